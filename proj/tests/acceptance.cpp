// Acceptance run: one PASS/FAIL line per criterion. Usage: acceptance <path-to-dualrc-cli>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <unistd.h>
#include <vector>

#include "dualrc/harness/bench.hpp"
#include "dualrc/harness/pipeline.hpp"
#include "dualrc/harness/synth.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dualrc;
using namespace dualrc::harness;
using dualrc::testing::max_relative_error;
using dualrc::testing::random_array;
using dualrc::testing::random_index;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok && pass) detail = what;
        pass = pass && ok;
    }
};

struct Instance {
    DualFeatures a, b;
    CorrTensor4D cbar;
};

Instance random_instance(std::mt19937_64& rng, std::size_t max_coarse) {
    const std::size_t ha = random_index(rng, 1, max_coarse), wa = random_index(rng, 1, max_coarse);
    const std::size_t hb = random_index(rng, 1, max_coarse), wb = random_index(rng, 1, max_coarse);
    const std::size_t c = random_index(rng, 2, 5);
    auto map = [&](std::size_t h, std::size_t w, int stride) {
        return FeatureMap(Tensor(random_array({c, h, w}, rng)), stride);
    };
    DualFeatures a(map(ha * 4, wa * 4, 2), map(ha, wa, 8), 4);
    DualFeatures b(map(hb * 4, wb * 4, 2), map(hb, wb, 8), 4);
    const ConsensusConfig cfg = parse_consensus_layers("3:1:2,3:2:1");
    ParamStore params;
    init_consensus_params(params, cfg, rng());
    CorrTensor4D cbar = refine(corr4d(a.coarse, b.coarse), params, cfg);
    return {std::move(a), std::move(b), std::move(cbar)};
}

Verdict oracle_equivalence() {
    Verdict v;
    std::mt19937_64 rng(101);
    const auto start = Clock::now();
    for (int trial = 0; trial < 24; ++trial) {
        const Instance in = random_instance(rng, trial < 6 ? 8 : 4);
        const MatchSet fast = match_dense(in.a, in.b, in.cbar, 1.0);
        const auto ref =
            oracle::brute_force_matches(in.a.fine.data.value(), in.b.fine.data.value(), in.cbar.value(), 4, 1.0);
        v.require(fast.size() == ref.size(), "match count differs at trial " + std::to_string(trial));
        if (fast.size() != ref.size()) continue;
        for (std::size_t n = 0; n < ref.size(); ++n) {
            const Match& m = fast.matches[n];
            v.require(m.src == PixelPoint{cell_center(ref[n].src_j, 2), cell_center(ref[n].src_i, 2)} &&
                          m.dst == PixelPoint{cell_center(ref[n].dst_l, 2), cell_center(ref[n].dst_k, 2)},
                      "coordinates differ at trial " + std::to_string(trial));
            v.require(std::abs(m.score - ref[n].score) <= 1e-6, "score differs at trial " + std::to_string(trial));
        }
    }
    const double t = seconds_since(start);
    v.require(t < 60.0, "runtime " + std::to_string(t) + " s");
    if (v.pass) v.detail = "24 instances, " + std::to_string(t) + " s";
    return v;
}

Verdict kernel_oracles() {
    Verdict v;
    std::mt19937_64 rng(102);
    double worst = 0.0;
    auto check = [&](const NdArray& fast, const NdArray& ref, const char* what) {
        const double e = max_relative_error(fast, ref);
        worst = std::max(worst, e);
        v.require(e <= 1e-6, what);
    };
    for (int trial = 0; trial < 60; ++trial) {
        {
            const std::size_t ci = random_index(rng, 1, 3), co = random_index(rng, 1, 3), k = 2 * random_index(rng, 0, 1) + 1;
            const NdArray in = random_array({ci, random_index(rng, 3, 7), random_index(rng, 3, 7)}, rng);
            const NdArray ker = random_array({co, ci, k, k}, rng);
            check(conv2d(Tensor(in), Tensor(ker), int(k / 2)).value(), oracle::conv2d_loops(in, ker, int(k / 2)),
                  "conv2d");
        }
        {
            const std::size_t ci = random_index(rng, 1, 2), co = random_index(rng, 1, 2), k = 2 * random_index(rng, 0, 1) + 1;
            const NdArray in = random_array(
                {ci, random_index(rng, 1, 4), random_index(rng, 1, 4), random_index(rng, 1, 4), random_index(rng, 1, 4)},
                rng);
            const NdArray ker = random_array({co, ci, k, k, k, k}, rng);
            check(conv4d(Tensor(in), Tensor(ker), int(k / 2)).value(), oracle::conv4d_loops(in, ker, int(k / 2)),
                  "conv4d");
        }
        {
            const NdArray c = random_array(
                {random_index(rng, 1, 4), random_index(rng, 1, 4), random_index(rng, 1, 4), random_index(rng, 1, 4)},
                rng);
            check(soft_mutual_nn(CorrTensor4D(Tensor(c))).value(), oracle::soft_mnn_formula(c, kMutualEpsilon),
                  "soft_mutual_nn");
        }
        {
            const Instance in = random_instance(rng, 3);
            const std::size_t i = random_index(rng, 0, in.a.fine.height() - 1);
            const std::size_t j = random_index(rng, 0, in.a.fine.width() - 1);
            check(coarse_score_map(in.cbar, i, j, 4).data, oracle::bilinear_formula(in.cbar.value(), i, j, 4),
                  "coarse_score_map");
            check(fused_score_map(in.a.fine, in.b.fine, in.cbar, i, j, 4).data,
                  oracle::fused_formula(in.a.fine.data.value(), in.b.fine.data.value(), in.cbar.value(), i, j, 4),
                  "fused_score_map");
        }
    }
    if (v.pass) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "60 instances per kernel, worst rel err %.2e", worst);
        v.detail = buf;
    }
    return v;
}

Verdict gradients() {
    Verdict v;
    const auto start = Clock::now();
    ModelConfig cfg;
    cfg.backbone.trunk_channels = {2, 3, 4};
    cfg.backbone.lateral_channels = 4;
    cfg.consensus = parse_consensus_layers("3:1:2,3:2:1");
    ParamStore params;
    init_model_params(params, cfg, 9);
    SynthConfig sc;
    sc.size = 16;
    sc.annotations = 4;
    sc.tx = 2.0;
    sc.ty = -1.0;
    const SyntheticScene s = synth(sc);
    const TrainingSample sample{s.image_a, s.image_b, s.annotations};
    const Trunk trunk(cfg.backbone);
    const auto r = dualrc::testing::finite_difference_check(
        params, [&] { return sample_loss(sample, params, cfg, trunk); }, 1e-5);
    bool has_nc = false, has_lateral = false, has_fuse = false;
    for (const auto& [name, p] : params) {
        has_nc = has_nc || name.rfind("nc.", 0) == 0;
        has_lateral = has_lateral || name.find("lateral") != std::string::npos;
        has_fuse = has_fuse || name.find("fuse") != std::string::npos;
    }
    v.require(has_nc && has_lateral && has_fuse, "parameter groups missing");
    v.require(r.coordinates == params.total_elements(), "not every coordinate checked");
    v.require(r.max_rel_error < 1e-4, "max rel err " + std::to_string(r.max_rel_error) + " at " + r.worst_param);
    const double t = seconds_since(start);
    v.require(t < 120.0, "runtime " + std::to_string(t) + " s");
    if (v.pass) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%zu coordinates in %zu tensors, max rel err %.2e, %.1f s", r.coordinates,
                      params.size(), r.max_rel_error, t);
        v.detail = buf;
    }
    return v;
}

Verdict swap_symmetry() {
    Verdict v;
    std::mt19937_64 rng(104);
    double worst = 0.0;
    for (int trial = 0; trial < 24; ++trial) {
        const NdArray c = random_array(
            {random_index(rng, 1, 4), random_index(rng, 1, 4), random_index(rng, 1, 4), random_index(rng, 1, 4)}, rng);
        const ConsensusConfig cfg = parse_consensus_layers(trial % 2 ? "3:1:2,3:2:1" : "3:1:3,1:3:2,3:2:1");
        ParamStore params;
        init_consensus_params(params, cfg, rng());
        const CorrTensor4D C{Tensor(c)};
        const NdArray lhs = refine(transpose4d(C), params, cfg).value();
        const NdArray rhs = transpose4d(refine(C, params, cfg)).value();
        for (std::size_t n = 0; n < lhs.size(); ++n) worst = std::max(worst, std::abs(lhs[n] - rhs[n]));

        const Instance in = random_instance(rng, 4);
        const MatchSet ab = match_dense(in.a, in.b, in.cbar);
        const MatchSet ba = match_dense(in.b, in.a, transpose4d(in.cbar));
        std::set<std::tuple<double, double, double, double>> l, r;
        for (const auto& m : ab.matches) l.insert({m.src.x, m.src.y, m.dst.x, m.dst.y});
        for (const auto& m : ba.matches) r.insert({m.dst.x, m.dst.y, m.src.x, m.src.y});
        v.require(l == r, "direction symmetry broken at trial " + std::to_string(trial));
    }
    v.require(worst <= 1e-6, "refine/transpose mismatch " + std::to_string(worst));
    if (v.pass) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "24 draws, max |diff| %.2e, match sets mirror exactly", worst);
        v.detail = buf;
    }
    return v;
}

Verdict structural_constants() {
    Verdict v;
    v.require(kDualRatio == 4, "ratio is not 4");
    v.require(kDefaultLambda == 0.05, "lambda default");
    v.require(kDefaultKeepFraction == 0.5, "keep fraction default");
    v.require(kept_count(kDefaultKeepFraction, 5) == 3, "ceil rule");
    BackboneConfig bb;
    bb.base_stride = 4;
    const DualShape shape = dual_shape(1200, 1600, bb);
    v.require(shape.fine_h == 300 && shape.fine_w == 400, "1600x1200 does not map to a 400x300 fine grid");
    v.require(shape.coarse_h * 4 == shape.fine_h && shape.coarse_w * 4 == shape.fine_w, "coarse grid not fine/4");
    std::mt19937_64 rng(105);
    bool rejected = false;
    try {
        DualFeatures bad(FeatureMap(Tensor(random_array({2, 6, 6}, rng)), 2),
                         FeatureMap(Tensor(random_array({2, 2, 2}, rng)), 8), 4);
    } catch (const ShapeError&) {
        rejected = true;
    }
    v.require(rejected, "fine grid that is not 4x coarse accepted");

    Settings s(join_keys({backbone_keys(), consensus_keys(), matching_keys()}));
    s.set("patch", "3");
    const Model model(model_spec(s));
    const BenchReport report = bench(model, {2, 4, 8}, 0, 0.5);
    v.require(report.ok(), report.ok() ? "" : report.failures.front());
    for (const auto& row : report.rows) v.require(row.ratio() == 256, "element ratio is not 256");
    if (v.pass) v.detail = "r=4, lambda=0.05, keep=0.5, 1600x1200 -> 400x300, ratio 256";
    return v;
}

Verdict synthetic_matching() {
    Verdict v;
    const Settings s(join_keys({backbone_keys(), consensus_keys(), matching_keys(), evaluation_keys()}));
    const Model model(model_spec(s));
    const PipelineOptions opt = pipeline_options(s);
    double worst1 = 1.0, worst3 = 1.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SynthConfig sc;
        sc.seed = seed;
        sc.warp = WarpKind::translation;
        const SyntheticScene scene = synth(sc);
        v.require(scene.annotations.size() == 128, "annotation count");
        const PipelineResult r = run_pipeline(model, scene.image_a, scene.image_b, scene.h, opt);
        v.require(r.matches.size() <= 500 && r.matches.direction == MatchDirection::mutual, "not mutual top-500");
        worst1 = std::min(worst1, r.curve->values[0]);
        worst3 = std::min(worst3, r.curve->values[2]);
    }
    v.require(worst1 >= 0.95, "translation MMA@1 " + std::to_string(worst1));
    v.require(worst3 >= 0.99, "translation MMA@3 " + std::to_string(worst3));
    SynthConfig id;
    id.warp = WarpKind::identity;
    const SyntheticScene scene = synth(id);
    const PipelineResult r = run_pipeline(model, scene.image_a, scene.image_b, scene.h, opt);
    v.require(!r.matches.empty() && r.curve->values[0] == 1.0, "identity MMA@1 " + std::to_string(r.curve->values[0]));
    if (v.pass) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "5 translation scenes: min MMA@1 %.4f, min MMA@3 %.4f; identity MMA@1 1",
                      worst1, worst3);
        v.detail = buf;
    }
    return v;
}

Verdict trainability() {
    Verdict v;
    const auto start = Clock::now();
    ModelConfig cfg;
    cfg.backbone.trunk_channels = {8, 16, 16};
    cfg.backbone.lateral_channels = 16;
    cfg.consensus = parse_consensus_layers("3:1:4,3:4:1");
    ParamStore params;
    init_model_params(params, cfg, 3);
    SynthConfig sc;
    sc.size = 32;
    const SyntheticScene scene = synth(sc);
    const TrainingSample sample{scene.image_a, scene.image_b, scene.annotations};
    OptimizerConfig opt;
    opt.kind = OptimizerKind::adam;
    opt.learning_rate = 0.01;
    std::vector<double> trace;
    try {
        trace = train_toy([&](std::size_t) { return sample; }, params, cfg, 200, opt);
    } catch (const TrainingError& e) {
        v.require(false, e.what());
        return v;
    }
    for (double x : trace) v.require(std::isfinite(x), "non-finite loss");
    const double ratio = trace.back() / trace.front();
    v.require(trace.size() == 200, "trace length");
    v.require(ratio <= 0.5, "loss ratio " + std::to_string(ratio));
    const double t = seconds_since(start);
    v.require(t < 300.0, "runtime " + std::to_string(t) + " s");
    if (v.pass) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "loss %.4f -> %.4f (ratio %.3f) in %.1f s", trace.front(), trace.back(),
                      ratio, t);
        v.detail = buf;
    }
    return v;
}

Verdict determinism(const std::string& cli) {
    Verdict v;
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / ("dualrc_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string scene = (root / "scene").string();
    // Each entry: arguments (with {out} for the run directory) and the files they produce.
    const std::vector<std::pair<std::string, std::vector<std::string>>> runs = {
        {"synth --out {out}/s --warp projective --seed 3", {"s/a.pgm", "s/b.pgm", "s/h.txt", "s/annotations.txt"}},
        {"extract --image " + scene + "/a.pgm --fine {out}/f.bin --coarse {out}/c.bin", {"f.bin", "c.bin"}},
        {"match --a " + scene + "/a.pgm --b " + scene + "/b.pgm --homography " + scene +
             "/h.txt --out {out}/m.txt --curve {out}/curve.csv",
         {"m.txt", "curve.csv"}},
        {"eval-mma --matches " + scene + "/m.txt --homography " + scene + "/h.txt --out {out}/e.csv", {"e.csv"}},
        {"visualize --a " + scene + "/a.pgm --b " + scene + "/b.pgm --matches " + scene + "/m.txt --homography " +
             scene + "/h.txt --out {out}/v.ppm",
         {"v.ppm"}},
        {"bench --sizes 2,4,8 --patch 5 --out {out}/bench.csv", {"bench.csv"}},
        {"grad-check --out {out}/g.txt", {"g.txt"}},
        {"train-toy --steps 15 --size 16 --optimizer adam --out {out}/w.bin --trace {out}/t.csv", {"w.bin", "t.csv"}},
    };
    auto run = [&](const std::string& args, const std::string& out, unsigned workers) {
        std::string cmd = args;
        for (std::size_t p; (p = cmd.find("{out}")) != std::string::npos;) cmd.replace(p, 5, out);
        cmd = "\"" + cli + "\" --workers " + std::to_string(workers) + " " + cmd + " > /dev/null 2>&1";
        return std::system(cmd.c_str()) == 0;
    };
    // shared inputs for the commands that read a scene and a match file
    v.require(run("synth --out " + scene, root.string(), 1), "synth failed");
    v.require(run("match --a " + scene + "/a.pgm --b " + scene + "/b.pgm --out " + scene + "/m.txt", root.string(), 1),
              "match failed");
    std::size_t compared = 0;
    for (const auto& [args, files] : runs) {
        const std::vector<std::pair<std::string, unsigned>> variants = {{"r1", 1}, {"r2", 1}, {"r3", 3}};
        for (const auto& [tag, workers] : variants) {
            const fs::path dir = root / tag;
            fs::create_directories(dir);
            v.require(run(args, dir.string(), workers), "command failed: " + args);
        }
        for (const auto& f : files) {
            const std::string base = read_file_bytes((root / "r1" / f).string());
            for (const char* tag : {"r2", "r3"})
                v.require(read_file_bytes((root / tag / f).string()) == base, f + " differs in run " + tag);
            ++compared;
        }
    }
    fs::remove_all(root);
    if (v.pass) v.detail = std::to_string(runs.size()) + " subcommands, " + std::to_string(compared) +
                           " files identical across reruns and 1 vs 3 workers";
    return v;
}

Verdict invariants() {
    Verdict v;
    std::mt19937_64 rng(109);
    const int cases = 100;
    for (int trial = 0; trial < cases; ++trial) {
        // MMA curve monotone
        MatchSet set;
        std::uniform_real_distribution<double> coord(0, 40);
        for (std::size_t n = random_index(rng, 1, 30); n > 0; --n)
            set.matches.push_back({{coord(rng), coord(rng)}, {coord(rng), coord(rng)}, 1.0});
        const Homography h({1.0 + 0.1 * (coord(rng) / 40), 0.05, coord(rng) / 4, -0.05, 1.0, coord(rng) / 4, 1e-4, 0, 1});
        const MmaCurve curve = mma_curve(set, h, {0.5, 1, 2, 4, 8, 16, 32});
        for (std::size_t i = 1; i < curve.values.size(); ++i)
            v.require(curve.values[i] >= curve.values[i - 1], "MMA curve decreases");

        // mutual match set is a partial injection
        const Instance in = random_instance(rng, 3);
        const MatchSet m = match_dense(in.a, in.b, in.cbar, trial % 2 ? 1.0 : 0.5);
        std::set<std::pair<double, double>> src, dst;
        for (const auto& x : m.matches) {
            src.insert({x.src.x, x.src.y});
            dst.insert({x.dst.x, x.dst.y});
        }
        v.require(src.size() == m.size() && dst.size() == m.size(), "mutual set not injective");

        // ground-truth rows sum to 1
        const std::size_t gh = random_index(rng, 2, 8), gw = random_index(rng, 2, 8);
        const FeatureMap target(Tensor(NdArray({1, gh, gw}, 1.0)), 2);
        std::uniform_real_distribution<double> px(0.0, double(2 * gw - 1)), py(0.0, double(2 * gh - 1));
        std::vector<PixelPoint> pts;
        for (int n = 0; n < 4; ++n) pts.push_back({px(rng), py(rng)});
        const NdArray rows = gt_rows(pts, target, std::uniform_real_distribution<double>(0.2, 3.0)(rng));
        for (std::size_t r = 0; r < pts.size(); ++r) {
            double sum = 0.0;
            bool nonneg = true;
            for (std::size_t c = 0; c < gh * gw; ++c) {
                sum += rows.at(r, c);
                nonneg = nonneg && rows.at(r, c) >= 0.0;
            }
            v.require(nonneg && std::abs(sum - 1.0) <= 1e-12, "GT row not normalized");
        }

        // soft mutual NN damping on nonnegative input
        const NdArray c = random_array(
            {random_index(rng, 1, 4), random_index(rng, 1, 4), random_index(rng, 1, 4), random_index(rng, 1, 4)}, rng,
            0.0, 1.0);
        const NdArray out = soft_mutual_nn(CorrTensor4D(Tensor(c))).value();
        for (std::size_t i = 0; i < c.size(); ++i) v.require(out[i] >= 0.0 && out[i] <= c[i], "damping bound");

        // nearest upsampling is block-constant
        const std::size_t uh = random_index(rng, 1, 5), uw = random_index(rng, 1, 5), f = random_index(rng, 1, 4);
        const NdArray src_map = random_array({2, uh, uw}, rng);
        const NdArray up = upsample_nearest(Tensor(src_map), int(f)).value();
        for (std::size_t ch = 0; ch < 2; ++ch)
            for (std::size_t y = 0; y < uh * f; ++y)
                for (std::size_t x = 0; x < uw * f; ++x)
                    v.require(up.at(ch, y, x) == src_map.at(ch, y / f, x / f), "upsample not block-constant");
    }
    if (v.pass) v.detail = "5 invariants x " + std::to_string(cases) + " cases";
    return v;
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: %s <dualrc-cli>\n", argv[0]);
        return 2;
    }
    const std::string cli = argv[1];
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
        {"fast matcher equals exhaustive oracle", oracle_equivalence},
        {"kernel oracles", kernel_oracles},
        {"end-to-end gradients", gradients},
        {"swap symmetry", swap_symmetry},
        {"structural constants", structural_constants},
        {"synthetic end-to-end matching", synthetic_matching},
        {"toy trainability", trainability},
        {"CLI determinism", [&] { return determinism(cli); }},
        {"invariant suite", invariants},
    };
    int failed = 0;
    for (std::size_t n = 0; n < criteria.size(); ++n) {
        Verdict v;
        try {
            v = criteria[n].second();
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail = std::string("exception: ") + e.what();
        }
        std::printf("criterion %zu: %s: %s (%s)\n", n + 1, v.pass ? "PASS" : "FAIL", criteria[n].first,
                    v.detail.c_str());
        std::fflush(stdout);
        failed += !v.pass;
    }
    return failed == 0 ? 0 : 1;
}
