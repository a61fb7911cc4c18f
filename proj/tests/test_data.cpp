#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "adm/data.hpp"

using namespace adm;

namespace {

PhantomConfig small(std::uint64_t seed = 1) {
    PhantomConfig p;
    p.height = p.width = 32;
    p.n_train = 4;
    p.n_val = 3;
    p.n_test = 6;
    p.lesion_radius_min = 3.0;
    p.lesion_radius_max = 5.0;
    p.seed = seed;
    return p;
}

MultiContrastSample handmade(bool mask, bool label) {
    MultiContrastSample s;
    s.id = "x";
    s.contrasts = 2;
    s.height = 2;
    s.width = 3;
    s.image = {0.0f, 1.5f, -2.0f, 3.25f, 1e-7f, 7.0f, 0.0f, 0.1f, 0.2f, 0.3f, 0.4f, 0.5f};
    if (mask) s.brain_mask = {0, 1, 1, 1, 1, 1};
    if (label) s.label = Mask{0, 0, 1, 1, 0, 0};
    return s;
}

void expect_same(const MultiContrastSample& a, const MultiContrastSample& b) {
    EXPECT_EQ(a.contrasts, b.contrasts);
    EXPECT_EQ(a.height, b.height);
    EXPECT_EQ(a.width, b.width);
    EXPECT_EQ(std::memcmp(a.image.data(), b.image.data(), a.image.size() * sizeof(float)), 0);
    EXPECT_EQ(a.brain_mask, b.brain_mask);
    EXPECT_EQ(a.label, b.label);
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return static_cast<std::uint32_t>(b[off]) | static_cast<std::uint32_t>(b[off + 1]) << 8 |
           static_cast<std::uint32_t>(b[off + 2]) << 16 | static_cast<std::uint32_t>(b[off + 3]) << 24;
}

template <class F>
std::size_t format_error_offset(F&& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.offset();
    }
    ADD_FAILURE() << "no FormatError";
    return SIZE_MAX;
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("adm_data_" + name);
    std::filesystem::remove_all(p);
    return p;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

// ---------------------------------------------------------------------------
// MCAD container
// ---------------------------------------------------------------------------

TEST(Mcad, RoundTripsEveryFlagCombination) {
    for (const bool mask : {false, true})
        for (const bool label : {false, true}) {
            const auto s = handmade(mask, label);
            const auto bytes = encode_sample(s);
            expect_same(decode_sample(bytes), s);
            EXPECT_EQ(encode_sample(decode_sample(bytes)), bytes);
        }
}

TEST(Mcad, LittleEndianHeaderLayout) {
    const auto b = encode_sample(handmade(true, true));
    EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "MCAD");
    EXPECT_EQ(read_u32(b, 4), 1u);
    EXPECT_EQ(read_u32(b, 8), 2u);
    EXPECT_EQ(read_u32(b, 12), 2u);
    EXPECT_EQ(read_u32(b, 16), 3u);
    EXPECT_EQ(b[20], 3u);
    EXPECT_EQ(b.size(), 21u + 12 * 4 + 6 + 6);
    float v;
    std::memcpy(&v, b.data() + 21 + 4, 4);
    EXPECT_EQ(v, 1.5f);
}

TEST(Mcad, RejectsMalformedInput) {
    const auto good = encode_sample(handmade(true, true));

    auto foreign = good;
    std::memcpy(foreign.data(), "DACM", 4);
    try {
        decode_sample(foreign);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("byte order"), std::string::npos);
    }

    auto magic = good;
    magic[0] = 'X';
    EXPECT_EQ(format_error_offset([&] { decode_sample(magic); }), 0u);

    auto version = good;
    version[4] = 2;
    EXPECT_EQ(format_error_offset([&] { decode_sample(version); }), 4u);

    auto dims = good;
    dims[8] = 0;
    EXPECT_EQ(format_error_offset([&] { decode_sample(dims); }), 8u);

    auto flags = good;
    flags[20] = 4;
    EXPECT_EQ(format_error_offset([&] { decode_sample(flags); }), 20u);

    for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{30}, good.size() - 1}) {
        const std::vector<std::uint8_t> t(good.begin(), good.begin() + static_cast<long>(cut));
        EXPECT_THROW(decode_sample(t), FormatError) << cut;
    }

    auto mask = good;
    mask[21 + 48 + 1] = 2;
    EXPECT_THROW(decode_sample(mask), FormatError);

    auto trailing = good;
    trailing.push_back(0);
    EXPECT_EQ(format_error_offset([&] { decode_sample(trailing); }), good.size());

    auto nan = good;
    const float q = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(nan.data() + 21, &q, 4);
    EXPECT_THROW(decode_sample(nan), FormatError);

    // A lesion pixel outside the stored brain mask.
    auto outside = good;
    outside[21 + 48 + 6 + 0] = 1;
    EXPECT_THROW(decode_sample(outside), FormatError);
}

TEST(Mcad, EncodeValidatesTheSample) {
    auto s = handmade(true, false);
    s.image.pop_back();
    EXPECT_THROW(encode_sample(s), DataError);
    s = handmade(true, false);
    s.brain_mask.pop_back();
    EXPECT_THROW(encode_sample(s), DataError);
}

TEST(Mcad, FileRoundTripUsesStemAsId) {
    const auto dir = scratch("file");
    std::filesystem::create_directories(dir);
    const auto s = handmade(false, true);
    save_sample(s, (dir / "case_07.mcad").string());
    const auto back = load_sample((dir / "case_07.mcad").string());
    EXPECT_EQ(back.id, "case_07");
    expect_same(back, s);
    EXPECT_THROW(load_sample((dir / "missing.mcad").string()), Error);
    std::filesystem::remove_all(dir);
}

TEST(BackgroundMask, StoredMaskWinsOverHeuristic) {
    auto s = handmade(false, false);
    EXPECT_EQ(background_mask(s), (Mask{0, 1, 1, 1, 1, 1}));
    s.brain_mask = {1, 1, 0, 0, 0, 0};
    EXPECT_EQ(background_mask(s), s.brain_mask);
}

// ---------------------------------------------------------------------------
// Phantom generator
// ---------------------------------------------------------------------------

TEST(Phantoms, DeterministicForSeedAndDistinctAcrossSeeds) {
    const auto a = generate(small(5)), b = generate(small(5)), c = generate(small(6));
    ASSERT_EQ(a.test.size(), b.test.size());
    for (std::size_t i = 0; i < a.test.size(); ++i) EXPECT_EQ(encode_sample(a.test[i]), encode_sample(b.test[i]));
    EXPECT_EQ(a.manifest.dump(), b.manifest.dump());
    EXPECT_NE(encode_sample(a.train[0]), encode_sample(c.train[0]));
}

TEST(Phantoms, SplitsHaveTheRequestedComposition) {
    const auto cfg = small(2);
    const auto ds = generate(cfg);
    ASSERT_EQ(ds.train.size(), cfg.n_train);
    ASSERT_EQ(ds.validation.size(), cfg.n_val);
    ASSERT_EQ(ds.test.size(), cfg.n_test);
    for (const auto& s : ds.train) EXPECT_FALSE(s.label.has_value());
    for (const auto& s : ds.validation) {
        ASSERT_TRUE(s.label.has_value());
        EXPECT_GT(s.lesion_pixels(), 0u);
    }
    std::size_t anomalous = 0;
    for (const auto& s : ds.test) anomalous += s.label.has_value();
    EXPECT_EQ(anomalous, 3u);
    for (const auto* split : {&ds.train, &ds.validation, &ds.test})
        for (const auto& s : *split) {
            EXPECT_NO_THROW(s.validate());
            for (std::size_t i = 0; i < s.pixels(); ++i)
                for (std::size_t c = 0; c < s.contrasts; ++c) {
                    const float v = s.channel(c)[i];
                    if (s.brain_mask[i]) EXPECT_NE(v, 0.0f);
                    else EXPECT_EQ(v, 0.0f);
                }
        }
}

TEST(Phantoms, ManifestRecordsTheGenerationChecks) {
    const auto ds = generate(small(3));
    const auto& o = ds.manifest.at("oracle");
    EXPECT_TRUE(o.at("mask_heuristic_agrees").get<bool>());
    EXPECT_GE(o.at("overlap_1d_max").get<double>(), 0.2);
    EXPECT_LE(o.at("overlap_2d_min").get<double>(), 0.05);
    EXPECT_GE(o.at("bayes_auc_test").get<double>(), 0.99);
    EXPECT_EQ(ds.manifest.at("samples").size(), 13u);
}

TEST(Phantoms, LesionIsInvisibleInEachContrastAlone) {
    // Every lesion contrast value resembles some tissue within one standard
    // deviation; only the joint signature sets it apart.
    const auto sig = check_signature(PhantomConfig{});
    EXPECT_TRUE(sig.feasible());
    EXPECT_LE(sig.best_marginal_distance, 1.0);
    EXPECT_GE(sig.best_pair_joint_distance, 3.0);
}

TEST(Phantoms, NoAnomaliesWhenRateIsZero) {
    auto cfg = small(4);
    cfg.anomaly_rate = 0.0;
    const auto ds = generate(cfg);
    for (const auto& s : ds.validation) EXPECT_FALSE(s.label.has_value());
    for (const auto& s : ds.test) EXPECT_FALSE(s.label.has_value());
    EXPECT_TRUE(ds.manifest.at("oracle").at("bayes_auc_test").is_null());
}

TEST(Phantoms, ConfigValidation) {
    auto bad = [](auto f) {
        PhantomConfig c;
        f(c);
        return c;
    };
    EXPECT_THROW(generate(bad([](PhantomConfig& c) { c.height = 8; })), ConfigError);
    EXPECT_THROW(generate(bad([](PhantomConfig& c) { c.width = 30; })), ConfigError);
    EXPECT_THROW(generate(bad([](PhantomConfig& c) { c.anomaly_rate = 1.5; })), ConfigError);
    EXPECT_THROW(generate(bad([](PhantomConfig& c) { c.lesion_radius_max = 0.5; })), ConfigError);
    EXPECT_THROW(generate(bad([](PhantomConfig& c) { c.contrasts = 3; })), ConfigError);
    EXPECT_THROW(generate(bad([](PhantomConfig& c) { c.lesion_mean = {0.3, 0.8, 0.55, 0.4}; })), DataError);

    PhantomConfig c;
    c.lesion_radius_max = 12.0;
    nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<PhantomConfig>()), j);
}

TEST(Dataset, WriteLoadRoundTripIsByteIdentical) {
    const auto ds = generate(small(7));
    const auto d1 = scratch("ds1"), d2 = scratch("ds2");
    write_dataset(ds, d1.string());
    const auto back = load_dataset(d1.string());
    ASSERT_EQ(back.test.size(), ds.test.size());
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        EXPECT_EQ(back.test[i].id, ds.test[i].id);
        expect_same(back.test[i], ds.test[i]);
    }
    write_dataset(back, d2.string());
    for (const auto& e : std::filesystem::directory_iterator(d1))
        EXPECT_EQ(slurp(e.path()), slurp(d2 / e.path().filename())) << e.path().filename();
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
}

TEST(Dataset, LoaderRejectsLabeledTrainingSamplesAndMissingManifest) {
    auto ds = generate(small(8));
    ds.train[0].label = Mask(ds.train[0].pixels(), 0);
    const auto dir = scratch("labeled");
    write_dataset(ds, dir.string());
    EXPECT_THROW(load_dataset(dir.string()), DataError);
    EXPECT_THROW(load_dataset((dir / "nope").string()), DataError);
    std::filesystem::remove_all(dir);
    EXPECT_EQ(parse_role("validation"), Role::validation);
    EXPECT_THROW(parse_role("val"), ConfigError);
}
