// adm: data generation, training, scoring, evaluation and the covariance
// singularity demonstration.
//
// Exit codes: 0 success, 1 runtime or numeric failure (a singular covariance
// included), 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "adm/bundle.hpp"
#include "adm/data.hpp"
#include "adm/eval.hpp"
#include "adm/parallel.hpp"
#include "adm/singularity.hpp"
#include "adm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsage = 2;

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw adm::Error("cannot write " + path.string());
}

/// Config files are either flat or keyed by subcommand name.
json read_config(const std::string& path, const char* section) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw adm::UsageError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw adm::UsageError("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw adm::UsageError("config " + path + ": expected a JSON object");
    if (j.contains(section)) return j.at(section);
    return j;
}

template <class T>
T from_config(const json& j) {
    T v;
    try {
        from_json(j, v);
    } catch (const json::exception& e) {
        throw adm::UsageError(std::string("config: ") + e.what());
    }
    return v;
}

/// Seed precedence: flag, then config file, then ADM_SEED, then the default.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const json& cfg, std::uint64_t fallback) {
    if (flag) return *flag;
    if (cfg.contains("seed")) return cfg.at("seed").get<std::uint64_t>();
    if (const char* env = std::getenv("ADM_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument(env);
            return v;
        } catch (const std::logic_error&) {
            throw adm::UsageError(std::string("ADM_SEED is not an unsigned integer: ") + env);
        }
    }
    return fallback;
}

template <class T>
void overlay(T& dst, const std::optional<T>& src) {
    if (src) dst = *src;
}

struct Common {
    std::string config;
    unsigned threads = 1;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config file; flags override its values");
    sub->add_option("--threads", c.threads, "Worker cap; 1 is bit-reproducible")->check(CLI::PositiveNumber);
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    Common common;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string size;
    std::optional<std::size_t> n_train, n_val, n_test, contrasts;
    std::optional<double> anomaly_rate, radius_min, radius_max;
};

int run_gen_data(const GenDataArgs& a) {
    const json cj = read_config(a.common.config, "gen-data");
    auto cfg = from_config<adm::PhantomConfig>(cj);
    cfg.seed = resolve_seed(a.seed, cj, cfg.seed);
    if (!a.size.empty()) {
        const auto x = a.size.find('x');
        try {
            if (x == std::string::npos) throw std::invalid_argument(a.size);
            cfg.height = std::stoul(a.size.substr(0, x));
            cfg.width = std::stoul(a.size.substr(x + 1));
        } catch (const std::logic_error&) {
            throw adm::UsageError("--size must look like HxW, got '" + a.size + "'");
        }
    }
    overlay(cfg.n_train, a.n_train);
    overlay(cfg.n_val, a.n_val);
    overlay(cfg.n_test, a.n_test);
    overlay(cfg.anomaly_rate, a.anomaly_rate);
    overlay(cfg.lesion_radius_min, a.radius_min);
    overlay(cfg.lesion_radius_max, a.radius_max);
    if (a.contrasts && *a.contrasts != cfg.contrasts)
        throw adm::UsageError("--contrasts: the built-in tissue tables define " + std::to_string(cfg.contrasts) +
                              " contrasts; supply other tables through --config");
    try {
        cfg.validate();
    } catch (const adm::ConfigError& e) {
        throw adm::UsageError(e.what());
    }
    const auto ds = adm::generate(cfg);
    adm::write_dataset(ds, a.out);
    write_json(fs::path(a.out) / "config.json", {{"command", "gen-data"}, {"phantom", cfg}});
    const auto& oracle = ds.manifest.at("oracle");
    std::cout << "wrote " << ds.train.size() + ds.validation.size() + ds.test.size() << " samples to " << a.out
              << " (bayes test auc " << oracle.value("bayes_auc_test", json()).dump() << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    Common common;
    std::string data, out, preset, checkpoint;
    std::optional<std::string> variant;
    bool resume = false;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda, lr, eps, penalty_weight, aug_lo, aug_hi;
    std::optional<std::size_t> gmm_k, epochs_ctoc, epochs_joint, batch_size, base_channels, resblocks;
    std::optional<bool> round_robin, freeze_last;
};

adm::TrainConfig train_config(const TrainArgs& a, const json& cj) {
    adm::TrainConfig cfg;
    if (a.preset == "brats") cfg = adm::TrainConfig::paper_brats();
    else if (a.preset == "isles") cfg = adm::TrainConfig::paper_isles();
    try {
        from_json(cj, cfg);
    } catch (const json::exception& e) {
        throw adm::UsageError(std::string("config: ") + e.what());
    }
    cfg.seed = resolve_seed(a.seed, cj, cfg.seed);
    overlay(cfg.lambda, a.lambda);
    overlay(cfg.lr, a.lr);
    overlay(cfg.eps, a.eps);
    overlay(cfg.penalty_weight, a.penalty_weight);
    overlay(cfg.aug_lo, a.aug_lo);
    overlay(cfg.aug_hi, a.aug_hi);
    overlay(cfg.mixtures, a.gmm_k);
    overlay(cfg.epochs_ctoc, a.epochs_ctoc);
    overlay(cfg.epochs_joint, a.epochs_joint);
    overlay(cfg.batch_size, a.batch_size);
    overlay(cfg.base_channels, a.base_channels);
    overlay(cfg.n_resblocks, a.resblocks);
    overlay(cfg.round_robin_targets, a.round_robin);
    overlay(cfg.freeze_from_last_epoch, a.freeze_last);
    try {
        cfg.validate();
    } catch (const adm::ConfigError& e) {
        throw adm::UsageError(e.what());
    }
    return cfg;
}

int run_train(const TrainArgs& a) {
    const json cj = read_config(a.common.config, "train");
    adm::Variant variant;
    try {
        variant = adm::parse_variant(a.variant ? *a.variant : cj.value("variant", std::string("adm")));
    } catch (const json::exception& e) {
        throw adm::UsageError(std::string("config: ") + e.what());
    } catch (const adm::ConfigError& e) {
        throw adm::UsageError(e.what());
    }
    const auto cfg = train_config(a, cj);
    const auto ds = adm::load_dataset(a.data);

    adm::TrainOptions opt;
    opt.checkpoint_path = a.checkpoint;
    opt.resume = a.resume;
    if (opt.resume && opt.checkpoint_path.empty()) throw adm::UsageError("--resume needs --checkpoint");
    const auto res = adm::train_variant(variant, ds.train, cfg, opt);

    const fs::path bundle(a.out);
    if (bundle.has_parent_path()) fs::create_directories(bundle.parent_path());
    const auto stem = (bundle.parent_path() / bundle.stem()).string();
    write_json(stem + ".config.json",
               {{"command", "train"}, {"variant", adm::variant_name(variant)}, {"data", a.data}, {"train", cfg}});
    write_json(stem + ".report.json", res.report.to_json());
    if (!res.report.ok()) {
        std::cerr << "adm train: " << res.report.status << ": " << res.report.message << '\n';
        return kRuntimeFailure;
    }
    adm::save_bundle(*res.model, a.out);
    std::cout << "trained " << res.report.variant << " in " << res.report.wall_seconds << " s, bundle " << a.out
              << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
    Common common;
    std::string bundle, data, split = "test", out;
    bool export_maps = false, by_size = false;
};

struct Scored {
    adm::AdmModel model;
    adm::Dataset ds;
    adm::Role role;
    std::vector<adm::ScoreMap> maps;
};

Scored score_split(const ScoreArgs& a) {
    adm::Role role;
    try {
        role = adm::parse_role(a.split);
    } catch (const adm::ConfigError& e) {
        throw adm::UsageError(e.what());
    }
    if (role == adm::Role::train) throw adm::UsageError("--split must be validation or test");
    if (!fs::exists(a.bundle)) throw adm::UsageError("bundle " + a.bundle + " does not exist");
    Scored s{adm::load_bundle(a.bundle), adm::load_dataset(a.data), role, {}};
    s.maps = adm::score_all(s.model, s.ds.split(role));
    fs::create_directories(a.out);
    if (a.export_maps)
        for (const auto& m : s.maps) adm::export_map(m, (fs::path(a.out) / (m.id + ".pgm")).string());
    return s;
}

json score_echo(const char* command, const ScoreArgs& a) {
    return {{"command", command},   {"bundle", a.bundle},           {"data", a.data},
            {"split", a.split},     {"export_maps", a.export_maps}, {"by_size", a.by_size},
            {"threads", a.common.threads}};
}

int run_score(const ScoreArgs& a) {
    read_config(a.common.config, "score");
    const auto s = score_split(a);
    for (const auto& m : s.maps) adm::save_score_map(m, (fs::path(a.out) / (m.id + ".mcad")).string());
    write_json(fs::path(a.out) / "config.json", score_echo("score", a));
    std::cout << "scored " << s.maps.size() << " images into " << a.out << '\n';
    return 0;
}

int run_eval(const ScoreArgs& a) {
    read_config(a.common.config, "eval");
    const auto s = score_split(a);
    const auto& target = s.ds.split(s.role);
    const auto target_px = adm::pool(s.maps, target);
    const auto val_px = s.role == adm::Role::validation
                            ? target_px
                            : adm::pool(adm::score_all(s.model, s.ds.validation), s.ds.validation);
    const auto report = adm::evaluate(val_px, target_px);
    write_json(fs::path(a.out) / "metrics.json", report.to_json());
    if (a.by_size) write_json(fs::path(a.out) / "by_size.json", adm::auc_by_size(s.maps, target).to_json());
    write_json(fs::path(a.out) / "config.json", score_echo("eval", a));
    std::cout << a.split << " auc " << report.auc << " f1 " << report.at.f1 << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct DemoArgs {
    Common common;
    std::string out;
    std::optional<std::string> mode;
    bool organic = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs, points, batch_size, mixtures;
    std::optional<double> sigma0, decay, lr, eps, penalty_weight, organic_lambda;
};

adm::SingularityDemoConfig demo_config(const DemoArgs& a, const json& cj) {
    adm::SingularityDemoConfig c;
    auto get = [&](const char* k, auto& v) {
        if (cj.contains(k)) cj.at(k).get_to(v);
    };
    try {
        std::string mode = adm::demo_mode_name(c.mode);
        get("mode", mode);
        c.mode = adm::parse_demo_mode(a.mode ? *a.mode : mode);
        get("epochs", c.epochs);
        get("points_per_epoch", c.points_per_epoch);
        get("batch_size", c.batch_size);
        get("mixtures", c.mixtures);
        get("sigma0", c.sigma0);
        get("decay", c.decay);
        get("lr", c.lr);
        get("eps", c.eps);
        get("penalty_weight", c.penalty_weight);
        get("organic", c.organic);
        get("organic_lambda", c.organic_lambda);
    } catch (const json::exception& e) {
        throw adm::UsageError(std::string("config: ") + e.what());
    } catch (const adm::ConfigError& e) {
        throw adm::UsageError(e.what());
    }
    c.seed = resolve_seed(a.seed, cj, c.seed);
    overlay(c.epochs, a.epochs);
    overlay(c.points_per_epoch, a.points);
    overlay(c.batch_size, a.batch_size);
    overlay(c.mixtures, a.mixtures);
    overlay(c.sigma0, a.sigma0);
    overlay(c.decay, a.decay);
    overlay(c.lr, a.lr);
    overlay(c.eps, a.eps);
    overlay(c.penalty_weight, a.penalty_weight);
    overlay(c.organic_lambda, a.organic_lambda);
    if (a.organic) c.organic = true;
    try {
        c.validate();
    } catch (const adm::ConfigError& e) {
        throw adm::UsageError(e.what());
    }
    return c;
}

int run_demo(const DemoArgs& a) {
    const json cj = read_config(a.common.config, "singularity-demo");
    const auto cfg = demo_config(a, cj);
    const auto res = adm::run_singularity_demo(cfg);
    fs::create_directories(a.out);
    {
        std::ofstream csv(fs::path(a.out) / "curve.csv", std::ios::trunc);
        csv << res.csv();
        if (!csv) throw adm::Error("cannot write curve.csv in " + a.out);
    }
    write_json(fs::path(a.out) / "summary.json", res.to_json());
    write_json(fs::path(a.out) / "config.json",
               {{"command", "singularity-demo"},
                {"mode", adm::demo_mode_name(cfg.mode)},
                {"epochs", cfg.epochs},
                {"points_per_epoch", cfg.points_per_epoch},
                {"batch_size", cfg.batch_size},
                {"mixtures", cfg.mixtures},
                {"sigma0", cfg.sigma0},
                {"decay", cfg.decay},
                {"lr", cfg.lr},
                {"eps", cfg.eps},
                {"penalty_weight", cfg.penalty_weight},
                {"organic", cfg.organic},
                {"organic_lambda", cfg.organic_lambda},
                {"seed", cfg.seed}});
    std::cout << adm::demo_mode_name(cfg.mode) << ": " << res.status << " after " << res.epochs_completed
              << " epochs, min eigenvalue " << res.min_eig_raw << '\n';
    if (res.failed()) {
        std::cerr << "adm singularity-demo: " << res.message << '\n';
        return kRuntimeFailure;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unsupervised multi-contrast anomaly detection"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* g = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
    add_common(g, gen.common);
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--seed", gen.seed);
    g->add_option("--size", gen.size, "Image size HxW");
    g->add_option("--n-train", gen.n_train);
    g->add_option("--n-val", gen.n_val);
    g->add_option("--n-test", gen.n_test);
    g->add_option("--contrasts", gen.contrasts);
    g->add_option("--anomaly-rate", gen.anomaly_rate);
    g->add_option("--radius-min", gen.radius_min);
    g->add_option("--radius-max", gen.radius_max);

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train one model variant");
    add_common(t, tr.common);
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--out", tr.out, "Bundle path")->required();
    t->add_option("--variant", tr.variant)
        ->check(CLI::IsMember({"adm", "adm_ct", "adm_dr", "adm_woj", "de_baseline", "de_penalty"}));
    t->add_option("--preset", tr.preset, "Epoch regime")->check(CLI::IsMember({"desk", "brats", "isles"}));
    t->add_option("--seed", tr.seed);
    t->add_option("--lambda", tr.lambda, "Energy weight");
    t->add_option("--gmm-k", tr.gmm_k, "Number of mixture components");
    t->add_option("--epochs-ctoc", tr.epochs_ctoc);
    t->add_option("--epochs-joint", tr.epochs_joint);
    t->add_option("--batch-size", tr.batch_size);
    t->add_option("--lr", tr.lr);
    t->add_option("--eps", tr.eps, "Covariance eigenvalue floor");
    t->add_option("--penalty-weight", tr.penalty_weight);
    t->add_option("--aug-lo", tr.aug_lo);
    t->add_option("--aug-hi", tr.aug_hi);
    t->add_option("--base-channels", tr.base_channels);
    t->add_option("--resblocks", tr.resblocks);
    t->add_option("--round-robin-targets", tr.round_robin);
    t->add_option("--freeze-from-last-epoch", tr.freeze_last);
    t->add_option("--checkpoint", tr.checkpoint, "Checkpoint file written every epoch");
    t->add_flag("--resume", tr.resume, "Continue from --checkpoint");

    ScoreArgs sc;
    auto* s = app.add_subcommand("score", "Write per-pixel anomaly score maps");
    ScoreArgs ev;
    auto* e = app.add_subcommand("eval", "Score a split and report metrics");
    for (auto [sub, args] : {std::pair{s, &sc}, std::pair{e, &ev}}) {
        add_common(sub, args->common);
        sub->add_option("--bundle", args->bundle)->required();
        sub->add_option("--data", args->data)->required();
        sub->add_option("--split", args->split)->check(CLI::IsMember({"validation", "test"}));
        sub->add_option("--out", args->out)->required();
        sub->add_flag("--export-maps", args->export_maps, "Write 8-bit PGM score images");
    }
    e->add_flag("--by-size", ev.by_size, "Per-image AUC against lesion size");

    DemoArgs dm;
    auto* d = app.add_subcommand("singularity-demo", "Covariance singularity comparison");
    add_common(d, dm.common);
    d->add_option("--mode", dm.mode)->check(CLI::IsMember({"baseline", "penalty", "clamped"}));
    d->add_option("--out", dm.out)->required();
    d->add_flag("--organic", dm.organic, "Joint DR+DE learning on phantoms instead of synthetic points");
    d->add_option("--seed", dm.seed);
    d->add_option("--epochs", dm.epochs);
    d->add_option("--points", dm.points);
    d->add_option("--batch-size", dm.batch_size);
    d->add_option("--mixtures", dm.mixtures);
    d->add_option("--sigma0", dm.sigma0);
    d->add_option("--decay", dm.decay);
    d->add_option("--lr", dm.lr);
    d->add_option("--eps", dm.eps);
    d->add_option("--penalty-weight", dm.penalty_weight);
    d->add_option("--organic-lambda", dm.organic_lambda);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kUsage;
    }

    try {
        if (*g) {
            adm::set_max_threads(gen.common.threads);
            return run_gen_data(gen);
        }
        if (*t) {
            adm::set_max_threads(tr.common.threads);
            return run_train(tr);
        }
        if (*s) {
            adm::set_max_threads(sc.common.threads);
            return run_score(sc);
        }
        if (*e) {
            adm::set_max_threads(ev.common.threads);
            return run_eval(ev);
        }
        adm::set_max_threads(dm.common.threads);
        return run_demo(dm);
    } catch (const adm::UsageError& err) {
        std::cerr << "adm: " << err.what() << '\n';
        return kUsage;
    } catch (const std::exception& err) {
        std::cerr << "adm: " << err.what() << '\n';
        return kRuntimeFailure;
    }
}
