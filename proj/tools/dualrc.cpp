// Command-line front end. Exit codes: 0 success, 1 usage/configuration error,
// 2 data or format error, 3 failed check (bench, grad-check).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "dualrc/harness/bench.hpp"
#include "dualrc/harness/grad_check.hpp"
#include "dualrc/harness/pipeline.hpp"
#include "dualrc/harness/settings.hpp"
#include "dualrc/harness/synth.hpp"
#include "dualrc/harness/visualize.hpp"

using namespace dualrc;
using namespace dualrc::harness;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheck = 3;

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One subcommand: its declared keys, the flag values given for them, and
// the paths it reads or writes.
struct Command {
    CLI::App* app = nullptr;
    std::vector<KeySpec> keys;
    std::map<std::string, std::string> flags;
    std::string config_path;
    std::map<std::string, std::string> paths;
    std::map<std::string, bool> switches;

    Settings settings() const {
        Settings s(keys);
        if (!config_path.empty()) s.load_file(config_path);
        for (const auto& [k, v] : flags)
            if (app->count("--" + k)) s.set(k, v);
        return s;
    }
    const std::string& path(const std::string& name) const { return paths.at(name); }
    bool has(const std::string& name) const { return !paths.at(name).empty(); }
};

Command& add_command(CLI::App& root, std::map<std::string, Command>& commands, const std::string& name,
                     const std::string& help, std::vector<KeySpec> keys) {
    Command& cmd = commands[name];
    cmd.app = root.add_subcommand(name, help);
    cmd.keys = std::move(keys);
    cmd.app->add_option("--config", cmd.config_path, "key=value configuration file");
    for (const auto& k : cmd.keys)
        cmd.app->add_option("--" + k.name, cmd.flags[k.name], k.help + " (default: " + k.default_value + ")");
    return cmd;
}

void add_path(Command& cmd, const std::string& name, const std::string& help, bool required) {
    auto* opt = cmd.app->add_option("--" + name, cmd.paths[name], help);
    if (required) opt->required();
}

void add_switch(Command& cmd, const std::string& name, const std::string& help) {
    cmd.app->add_flag("--" + name, cmd.switches[name], help);
}

std::vector<KeySpec> toy_training_keys() {
    return join_keys({
        {
            {"backbone", "toy", "must be toy: training needs the learned pyramid"},
            {"size", "32", "synthetic image side length in pixels"},
            {"trunk_channels", "8,16,16", "toy trunk widths per level"},
            {"lateral_channels", "16", "toy lateral/fused channel width"},
            {"nc_layers", "3:1:4,3:4:1", "consensus stack, k:in:out per layer"},
            {"nc_init", "uniform", "consensus init: delta or uniform"},
            {"param_seed", "3", "seed of the initial trainable weights"},
        },
        backbone_keys(), consensus_keys(), synth_keys(), training_keys(),
    });
}

std::vector<KeySpec> grad_check_keys() {
    return {
        {"seed", "0", "scene seed"},
        {"size", "16", "image side length"},
        {"annotations", "3", "annotated correspondences"},
        {"variant", "a", "toy pyramid fusion variant a-e"},
        {"base_stride", "2", "toy backbone fine stride"},
        {"trunk_channels", "2,3,4,4", "trunk widths per level"},
        {"lateral_channels", "4", "lateral/fused channel width"},
        {"trunk_seed", "17", "seed of the frozen trunk weights"},
        {"param_seed", "4", "seed of the checked weights"},
        {"nc_layers", "3:1:2,3:2:1", "consensus stack"},
        {"nc_relu", "true", "ReLU between consensus layers"},
        {"nc_init", "uniform", "consensus init: delta or uniform"},
        {"sigma", "1", "ground-truth blur in grid cells"},
        {"lambda", "0.05", "orthogonal loss weight"},
        {"step", "1e-5", "central-difference step"},
        {"tolerance", "1e-4", "maximum accepted relative error"},
    };
}

SynthConfig synth_config(const Settings& s) {
    SynthConfig c;
    c.seed = s.count("seed");
    c.size = s.count("size");
    c.warp = parse_warp(s.str("warp"));
    c.annotations = s.count("annotations");
    if (!s.str("tx").empty()) c.tx = s.real("tx");
    if (!s.str("ty").empty()) c.ty = s.real("ty");
    return c;
}

OptimizerConfig optimizer_config(const Settings& s) {
    OptimizerConfig o;
    o.kind = parse_optimizer(s.str("optimizer"));
    o.learning_rate = s.real("learning_rate");
    o.halve_every = s.count("halve_every");
    o.validate();
    return o;
}

std::optional<Homography> optional_homography(const Command& cmd) {
    if (!cmd.has("homography")) return std::nullopt;
    return load_homography(cmd.path("homography"));
}

int run_extract(const Command& cmd) {
    const Settings s = cmd.settings();
    const Model model(model_spec(s));
    const DualFeatures f = model.extract(read_image(cmd.path("image")));
    save_features(cmd.path("fine"), f.fine);
    save_features(cmd.path("coarse"), f.coarse);
    std::printf("fine %zux%zux%zu stride %d, coarse %zux%zux%zu stride %d\n", f.fine.channels(), f.fine.height(),
                f.fine.width(), f.fine.stride, f.coarse.channels(), f.coarse.height(), f.coarse.width(),
                f.coarse.stride);
    return 0;
}

int run_match(const Command& cmd) {
    const Settings s = cmd.settings();
    const Model model(model_spec(s));
    const auto h = optional_homography(cmd);
    if (cmd.has("curve") && !h) throw ConfigError("--curve needs --homography");
    const PipelineResult r =
        run_pipeline(model, read_image(cmd.path("a")), read_image(cmd.path("b")), h, pipeline_options(s));
    write_matches(cmd.path("out"), r.matches);
    std::printf("%zu matches\n", r.matches.size());
    if (r.curve) {
        if (cmd.has("curve")) write_curve_csv(cmd.path("curve"), *r.curve);
        std::printf("MMA@1 %.6g MMA@3 %.6g\n", r.curve->values.front(),
                    r.curve->values[std::min<std::size_t>(2, r.curve->values.size() - 1)]);
    }
    return 0;
}

int run_eval(const Command& cmd) {
    const Settings s = cmd.settings();
    const MmaCurve curve = mma_curve(read_matches(cmd.path("matches")), load_homography(cmd.path("homography")),
                                     s.real_list("thresholds"));
    write_curve_csv(cmd.path("out"), curve);
    std::fputs(format_curve_csv(curve).c_str(), stdout);
    return 0;
}

int run_synth(const Command& cmd) {
    const SyntheticScene scene = synth(synth_config(cmd.settings()));
    std::filesystem::create_directories(cmd.path("out"));
    write_scene(cmd.path("out"), scene);
    std::printf("scene written to %s\n", cmd.path("out").c_str());
    return 0;
}

int run_bench(const Command& cmd) {
    const Settings s = cmd.settings();
    const Model model(model_spec(s));
    const BenchReport report = bench(model, s.count_list("sizes"), s.count("seed"), s.real("keep_fraction"));
    write_file_bytes(cmd.path("out"), format_bench_report(report));
    std::fputs(format_bench_report(report).c_str(), stdout);
    std::fputs(format_bench_measurements(report).c_str(), stdout);
    for (const auto& f : report.failures) std::fprintf(stderr, "check failed: %s\n", f.c_str());
    if (!report.ok()) throw CheckFailure("bench assertions failed");
    return 0;
}

int run_grad_check(const Command& cmd) {
    const Settings s = cmd.settings();
    ModelConfig cfg;
    cfg.backbone.variant = parse_variant(s.str("variant"));
    cfg.backbone.base_stride = int(s.integer("base_stride"));
    cfg.backbone.trunk_channels = s.count_list("trunk_channels");
    cfg.backbone.lateral_channels = s.count("lateral_channels");
    cfg.backbone.trunk_seed = s.count("trunk_seed");
    cfg.consensus = parse_consensus_layers(s.str("nc_layers"));
    cfg.consensus.relu_between = s.flag("nc_relu");
    cfg.sigma = s.real("sigma");
    cfg.lambda = s.real("lambda");
    ParamStore params;
    init_model_params(params, cfg, s.count("param_seed"), parse_nc_init(s.str("nc_init")));

    SynthConfig sc;
    sc.seed = s.count("seed");
    sc.size = s.count("size");
    sc.annotations = s.count("annotations");
    const SyntheticScene scene = synth(sc);

    GradCheckOptions opt;
    opt.step = s.real("step");
    opt.tolerance = s.real("tolerance");
    if (cmd.switches.at("inject-bug")) opt.inject_bug_scale = 1.5;
    const GradCheckReport report = grad_check({scene.image_a, scene.image_b, scene.annotations}, params, cfg, opt);
    const std::string text = format_grad_report(report);
    if (cmd.has("out")) write_file_bytes(cmd.path("out"), text);
    std::fputs(text.c_str(), stdout);
    if (!report.ok()) throw CheckFailure("gradient check exceeded tolerance");
    return 0;
}

int run_train(const Command& cmd) {
    const Settings s = cmd.settings();
    const ModelSpec spec = model_spec(s);
    if (spec.backbone != BackboneKind::toy) throw ConfigError("train-toy: backbone must be toy");
    TrainingSample sample;
    if (cmd.has("scene")) {
        const std::string dir = cmd.path("scene");
        sample = {read_image(dir + "/a.pgm"), read_image(dir + "/b.pgm"), read_annotations(dir + "/annotations.txt")};
    } else {
        const SyntheticScene scene = synth(synth_config(s));
        sample = {scene.image_a, scene.image_b, scene.annotations};
    }
    ParamStore params;
    if (!spec.weights.empty())
        params = load_params(spec.weights);
    else
        init_model_params(params, spec.model, spec.param_seed, spec.nc_init);

    std::string trace = "step,loss\n";
    char line[64];
    const auto losses = train_toy([&](std::size_t) { return sample; }, params, spec.model, s.count("steps"),
                                  optimizer_config(s), [&](std::size_t step, double loss) {
                                      std::snprintf(line, sizeof line, "%zu,%.17g\n", step, loss);
                                      trace += line;
                                  });
    save_params(cmd.path("out"), params);
    if (cmd.has("trace")) write_file_bytes(cmd.path("trace"), trace);
    if (!losses.empty())
        std::printf("loss %.6g -> %.6g (ratio %.4f) over %zu steps\n", losses.front(), losses.back(),
                    losses.back() / losses.front(), losses.size());
    return 0;
}

int run_visualize(const Command& cmd) {
    const Settings s = cmd.settings();
    write_visualization(cmd.path("out"), read_image(cmd.path("a")), read_image(cmd.path("b")),
                        read_matches(cmd.path("matches")), optional_homography(cmd), s.real("threshold"));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App root{"Dual-resolution correspondence matching toolkit"};
    root.require_subcommand(1);
    unsigned workers = 0;
    root.add_option("--workers", workers, "worker threads (default: DUALRC_WORKERS or all cores)");

    std::map<std::string, Command> commands;
    std::map<std::string, std::function<int(const Command&)>> handlers;

    auto& extract = add_command(root, commands, "extract", "compute fine and coarse feature maps of one image",
                                join_keys({backbone_keys(), consensus_keys()}));
    add_path(extract, "image", "input PGM/PPM image", true);
    add_path(extract, "fine", "output fine feature container", true);
    add_path(extract, "coarse", "output coarse feature container", true);
    handlers["extract"] = run_extract;

    auto& match = add_command(root, commands, "match", "dense matching of an image pair",
                              join_keys({backbone_keys(), consensus_keys(), matching_keys(), evaluation_keys()}));
    add_path(match, "a", "image A", true);
    add_path(match, "b", "image B", true);
    add_path(match, "homography", "ground-truth homography A->B (enables MMA)", false);
    add_path(match, "out", "output match file", true);
    add_path(match, "curve", "output MMA curve CSV (needs --homography)", false);
    handlers["match"] = run_match;

    auto& eval = add_command(root, commands, "eval-mma", "MMA curve of a match file", evaluation_keys());
    add_path(eval, "matches", "match file", true);
    add_path(eval, "homography", "homography A->B", true);
    add_path(eval, "out", "output curve CSV", true);
    handlers["eval-mma"] = run_eval;

    auto& syn = add_command(root, commands, "synth", "generate a synthetic image pair", synth_keys());
    add_path(syn, "out", "output directory", true);
    handlers["synth"] = run_synth;

    auto& ben = add_command(root, commands, "bench", "memory and time accounting over coarse sizes",
                            join_keys({{{"sizes", "4,8,16", "coarse grid sides to sweep"},
                                        {"seed", "0", "scene seed"}},
                                       backbone_keys(), consensus_keys(), matching_keys()}));
    add_path(ben, "out", "output report CSV (deterministic columns)", true);
    handlers["bench"] = run_bench;

    auto& grad = add_command(root, commands, "grad-check", "finite-difference check of all gradients",
                             grad_check_keys());
    add_path(grad, "out", "output report", false);
    add_switch(grad, "inject-bug", "scale one analytic gradient to exercise the failure path");
    handlers["grad-check"] = run_grad_check;

    auto& train = add_command(root, commands, "train-toy", "train the toy model on one image pair",
                              toy_training_keys());
    add_path(train, "scene", "scene directory (a.pgm, b.pgm, annotations.txt); synthesized if absent", false);
    add_path(train, "out", "output parameter container", true);
    add_path(train, "trace", "output loss trace CSV", false);
    handlers["train-toy"] = run_train;

    auto& vis = add_command(root, commands, "visualize", "draw matches side by side",
                            {{"threshold", "3", "pixel threshold for correct matches"}});
    add_path(vis, "a", "image A", true);
    add_path(vis, "b", "image B", true);
    add_path(vis, "matches", "match file", true);
    add_path(vis, "homography", "homography A->B (colours correct/wrong)", false);
    add_path(vis, "out", "output PPM", true);
    handlers["visualize"] = run_visualize;

    try {
        root.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = root.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }
    if (workers > 0) set_num_workers(workers);

    for (auto& [name, cmd] : commands) {
        if (!cmd.app->parsed()) continue;
        try {
            return handlers.at(name)(cmd);
        } catch (const CheckFailure& e) {
            std::fprintf(stderr, "%s: %s\n", name.c_str(), e.what());
            return kExitCheck;
        } catch (const ConfigError& e) {
            std::fprintf(stderr, "%s: configuration error: %s\n", name.c_str(), e.what());
            return kExitUsage;
        } catch (const Error& e) {
            std::fprintf(stderr, "%s: %s\n", name.c_str(), e.what());
            return kExitData;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "%s: %s\n", name.c_str(), e.what());
            return kExitData;
        }
    }
    return kExitUsage;
}
