// Acceptance run: one PASS/FAIL line per criterion. Exit status 0 only when
// every criterion passes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "adm/eval.hpp"
#include "adm/parallel.hpp"
#include "adm/singularity.hpp"
#include "grad_suite.hpp"
#include "oracles.hpp"

using namespace adm;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets, pinned.
constexpr double kFdStep = 1e-3;
constexpr double kFdRelTol = 1e-3;
constexpr int kFdSeeds = 10;
constexpr double kFdBudgetS = 60.0;

constexpr int kClampMatrices = 1000;
constexpr double kClampEps = 1e-6;
constexpr double kClampSlack = 1e-9;
constexpr double kClampBudgetS = 5.0;

constexpr int kEnergyDraws = 1000;
constexpr double kEnergyTol = 1e-6;

constexpr double kMstepTol = 1e-6;

constexpr int kAucInstances = 100;
constexpr std::size_t kAucPoints = 200;
constexpr double kAucTol = 1e-9;

constexpr std::size_t kBaselineEpochs = 500;
constexpr double kSingularEig = 1e-6;
constexpr double kDemoBudgetS = 120.0;

constexpr double kAdmAuc = 0.95;
constexpr double kBayesAuc = 0.99;
constexpr double kAdmBudgetS = 900.0;
constexpr double kAblationMargin = 0.01;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... a) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a...);
    return buf;
}

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& run) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = run();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
}

// ---------------------------------------------------------------------------

Outcome gradients() {
    const auto t0 = Clock::now();
    double worst = 0.0, worst_skip = 0.0;
    std::string worst_name, failed;
    for (const auto& c : adm::testing::gradient_cases())
        for (int s = 1; s <= kFdSeeds; ++s) {
            const auto r = c.run(static_cast<std::uint64_t>(s));
            const double skip = static_cast<double>(r.skipped()) / static_cast<double>(r.checked() + r.skipped());
            worst_skip = std::max(worst_skip, skip);
            if (r.max_rel_err() > worst) {
                worst = r.max_rel_err();
                worst_name = c.name;
            }
            if (!(r.max_rel_err() < kFdRelTol) || skip > adm::testing::kMaxSkippedFraction)
                failed += " " + c.name + "/" + std::to_string(s);
        }
    const double t = seconds_since(t0);
    const bool ok = failed.empty() && t < kFdBudgetS;
    return {ok, fmt("%zu cases x %d seeds, h=%.0e, worst rel err %.2e (%s), max kink-skip fraction %.2f, %.1f s%s%s",
                    adm::testing::gradient_cases().size(), kFdSeeds, kFdStep, worst, worst_name.c_str(), worst_skip, t,
                    failed.empty() ? "" : ", failed:", failed.c_str())};
}

Outcome clamp_pd() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    double worst = std::numeric_limits<double>::infinity();
    int rank_deficient = 0;
    for (int t = 0; t < kClampMatrices; ++t) {
        const auto s = oracle::random_symmetric_mixed(7, rng, t);
        if (sym_eig(s).values.back() <= 1e-12) ++rank_deficient;
        const auto r = clamp_covariance(s, kClampEps);
        worst = std::min(worst, sym_eig(r.pd).values.back());
    }
    const double t = seconds_since(t0);
    return {worst >= kClampEps - kClampSlack && t < kClampBudgetS && rank_deficient > 0,
            fmt("%d matrices (%d singular or indefinite), min eigenvalue after clamp %.9e, %.2f s", kClampMatrices,
                rank_deficient, worst, t)};
}

Outcome energy_oracle() {
    Rng rng(7);
    double worst = 0.0;
    for (int t = 0; t < kEnergyDraws; ++t) {
        const auto p = oracle::random_params(7, 6, rng);
        const auto z = oracle::draw_near(p, rng);
        worst = std::max(worst, std::abs(energy(z, p)[0] - oracle::naive_energy(z, p)));
    }
    return {worst < kEnergyTol, fmt("%d draws at d=7, C=6, max abs diff %.2e", kEnergyDraws, worst)};
}

Outcome mstep_oracle() {
    const std::size_t N = 50, d = 7, C = 6;
    double worst = 0.0;
    bool merged_equal = true;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        std::vector<double> z(N * d), logits(N * C);
        for (auto& v : z) v = rng.normal();
        for (auto& v : logits) v = 2.0 * rng.normal();
        const auto f = oracle::softmax_vec(logits, C);
        GmmOptions raw;
        raw.clamp = false;
        raw.singular_rcond = 0.0;
        worst = std::max(worst, oracle::mstep_max_abs_diff(estimate_params(z, f, N, d, C, raw),
                                                           oracle::brute_force_mstep(z, f, N, d, C)));

        BatchStats one(d, C), merged(d, C);
        one.accumulate(z, f);
        for (std::size_t lo = 0; lo < N; lo += 13) {
            const std::size_t hi = std::min(N, lo + 13);
            BatchStats part(d, C);
            part.accumulate(std::span<const double>(z).subspan(lo * d, (hi - lo) * d),
                            std::span<const double>(f).subspan(lo * C, (hi - lo) * C));
            merged.merge(part);
        }
        const auto a = freeze(one), b = freeze(merged);
        merged_equal = merged_equal && merged == one && a.pi == b.pi && a.mu == b.mu;
        for (std::size_t c = 0; c < C; ++c) merged_equal = merged_equal && a.cov_raw[c].max_abs_diff(b.cov_raw[c]) == 0.0;
    }
    return {worst < kMstepTol && merged_equal,
            fmt("N=50 d=7 C=6, max abs diff %.2e; merged statistics %s one-pass", worst,
                merged_equal ? "identical to" : "DIFFER from")};
}

Outcome auc_oracle() {
    Rng rng(5);
    double worst = 0.0;
    std::size_t tied = 0;
    for (int t = 0; t < kAucInstances; ++t) {
        const auto in = oracle::random_scored(rng, kAucPoints, t % 2 == 0);
        std::vector<double> s = in.scores;
        std::sort(s.begin(), s.end());
        if (std::adjacent_find(s.begin(), s.end()) != s.end()) ++tied;
        worst = std::max(worst, std::abs(roc_auc(in.scores, in.labels) - oracle::pairwise_auc(in.scores, in.labels)));
    }
    return {worst < kAucTol && tied > 0,
            fmt("%d instances of %zu points (%zu with ties), max abs diff %.2e", kAucInstances, kAucPoints, tied, worst)};
}

Outcome singularity() {
    const auto t0 = Clock::now();
    SingularityDemoConfig b;
    b.mode = DemoMode::baseline;
    b.epochs = kBaselineEpochs;
    const auto base = run_singularity_demo(b);
    SingularityDemoConfig c;
    c.mode = DemoMode::clamped;
    const auto clamped = run_singularity_demo(c);

    bool finite = true;
    for (const auto& r : clamped.curve) finite = finite && std::isfinite(r.total);
    const bool base_ok = base.min_eig_raw < kSingularEig && base.failed() && base.epochs_completed < kBaselineEpochs;
    const bool clamp_ok = !clamped.failed() && finite && clamped.min_eig >= c.eps;
    const double t = seconds_since(t0);
    return {base_ok && clamp_ok && t < kDemoBudgetS,
            fmt("baseline %s at epoch %zu (min eigenvalue %.2e); clamped %s %zu epochs, finite loss %s, "
                "min eigenvalue %.2e >= %.0e; %.1f s",
                base.status.c_str(), base.epochs_completed + 1, base.min_eig_raw, clamped.status.c_str(),
                clamped.epochs_completed, finite ? "yes" : "no", clamped.min_eig, c.eps, t)};
}

// ---------------------------------------------------------------------------

struct Run {
    TrainReport report;
    std::optional<AdmModel> model;
    double auc = 0.0;
    std::string metrics_json;
    std::vector<std::uint8_t> bundle;
    double seconds = 0.0;
};

Run train_and_eval(Variant v, const Dataset& ds, const TrainConfig& cfg) {
    const auto t0 = Clock::now();
    Run r;
    auto res = train_variant(v, ds.train, cfg);
    r.report = res.report;
    if (res.model) {
        r.model = *res.model;
        const auto val = pool(score_all(*r.model, ds.validation), ds.validation);
        const auto test = pool(score_all(*r.model, ds.test), ds.test);
        const auto m = evaluate(val, test);
        r.auc = m.auc;
        r.metrics_json = m.to_json().dump(2);
        r.bundle = to_archive(*r.model).encode();
    }
    r.seconds = seconds_since(t0);
    std::printf("  trained %-7s %-10s test AUC %.4f in %.1f s\n", variant_name(v), r.report.status.c_str(), r.auc,
                r.seconds);
    std::fflush(stdout);
    return r;
}

struct Experiments {
    Dataset ds;
    double bayes = 0.0;
    Run adm, adm_again, ct, dr, woj;
};

const Experiments& experiments() {
    static const Experiments e = [] {
        Experiments x;
        x.ds = generate(PhantomConfig{});
        x.bayes = x.ds.manifest.at("oracle").at("bayes_auc_test").get<double>();
        const TrainConfig cfg;
        x.adm = train_and_eval(Variant::adm, x.ds, cfg);
        x.adm_again = train_and_eval(Variant::adm, x.ds, cfg);
        x.ct = train_and_eval(Variant::adm_ct, x.ds, cfg);
        x.dr = train_and_eval(Variant::adm_dr, x.ds, cfg);
        x.woj = train_and_eval(Variant::adm_woj, x.ds, cfg);
        return x;
    }();
    return e;
}

Outcome full_adm() {
    const auto& e = experiments();
    const bool ok = e.adm.report.ok() && e.adm.auc >= kAdmAuc && e.bayes >= kBayesAuc && e.adm.seconds < kAdmBudgetS;
    return {ok, fmt("ADM test AUC %.4f (>= %.2f), Bayes oracle %.4f (>= %.2f), train+eval %.1f s", e.adm.auc, kAdmAuc,
                    e.bayes, kBayesAuc, e.adm.seconds)};
}

Outcome ablations() {
    const auto& e = experiments();
    const bool all_ok = e.ct.report.ok() && e.dr.report.ok() && e.woj.report.ok();
    const double branch = std::max(e.ct.auc, e.dr.auc);
    const bool ok = all_ok && e.adm.auc >= branch - kAblationMargin && e.adm.auc >= e.woj.auc - kAblationMargin;
    return {ok, fmt("ADM %.4f vs adm_ct %.4f, adm_dr %.4f, adm_woj %.4f (margin %.2f)", e.adm.auc, e.ct.auc, e.dr.auc,
                    e.woj.auc, kAblationMargin)};
}

Outcome determinism() {
    const auto& e = experiments();
    const bool bundle = !e.adm.bundle.empty() && e.adm.bundle == e.adm_again.bundle;
    const bool metrics = !e.adm.metrics_json.empty() && e.adm.metrics_json == e.adm_again.metrics_json;
    return {bundle && metrics && max_threads() == 1,
            fmt("bundles %s (%zu bytes), metric reports %s, threads %u", bundle ? "identical" : "DIFFER",
                e.adm.bundle.size(), metrics ? "identical" : "DIFFER", max_threads())};
}

Outcome round_trips() {
    const auto& e = experiments();
    const auto dir = fs::temp_directory_path() / "adm_acceptance";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto& sample = e.ds.test.front();
    const auto m1 = (dir / "s1.mcad").string(), m2 = (dir / "s2.mcad").string();
    save_sample(sample, m1);
    save_sample(load_sample(m1), m2);
    const bool mcad = io::read_file(m1) == io::read_file(m2);

    const auto b1 = (dir / "m1.admb").string(), b2 = (dir / "m2.admb").string();
    save_bundle(*e.adm.model, b1);
    save_bundle(load_bundle(b1), b2);
    const bool bundle = io::read_file(b1) == io::read_file(b2);

    const auto p1 = (dir / "m1.pgm").string(), p2 = (dir / "m2.pgm").string();
    export_map(score(*e.adm.model, sample), p1);
    {
        const auto bytes = encode_pgm(read_pgm(p1));
        std::ofstream out(p2, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    const bool pgm = io::read_file(p1) == io::read_file(p2);
    fs::remove_all(dir);
    return {mcad && bundle && pgm, fmt("MCAD %s, bundle %s, PGM %s", mcad ? "identical" : "DIFFER",
                                       bundle ? "identical" : "DIFFER", pgm ? "identical" : "DIFFER")};
}

}  // namespace

int main() {
    set_max_threads(1);
    report(1, "gradient suite", gradients);
    report(2, "clamp positive definite", clamp_pd);
    report(3, "energy vs naive oracle", energy_oracle);
    report(4, "M-step vs brute force", mstep_oracle);
    report(5, "AUC vs pairwise oracle", auc_oracle);
    report(6, "singularity demo", singularity);
    report(7, "full ADM on default phantoms", full_adm);
    report(8, "ablation ordering", ablations);
    report(9, "single-thread determinism", determinism);
    report(10, "save/load/save byte identity", round_trips);
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
