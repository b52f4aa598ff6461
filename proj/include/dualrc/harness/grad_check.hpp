#pragma once

// Central finite-difference check of the end-to-end training loss against
// backward(), reported per parameter tensor.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dualrc/training.hpp"

namespace dualrc::harness {

inline constexpr double kGradTolerance = 1e-4;

struct GradCheckOptions {
    double step = 1e-5;
    double floor = 1e-6;            // denominator floor of the relative error
    double tolerance = kGradTolerance;
    double inject_bug_scale = 1.0;  // != 1 scales the first parameter's analytic gradient
};

struct GradGroupResult {
    std::string name;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    bool finite = true;
};

struct GradCheckReport {
    std::vector<GradGroupResult> groups;
    double tolerance = kGradTolerance;

    double max_rel_error() const {
        double m = 0.0;
        for (const auto& g : groups) m = std::max(m, g.max_rel_error);
        return m;
    }
    bool ok() const {
        for (const auto& g : groups)
            if (!g.finite || !(g.max_rel_error <= tolerance)) return false;
        return !groups.empty();
    }
};

inline GradCheckReport grad_check(const TrainingSample& sample, ParamStore& params, const ModelConfig& cfg,
                                  const GradCheckOptions& opt = {}) {
    if (!(opt.step > 0.0)) throw ConfigError("grad_check: step must be positive");
    const Trunk trunk(cfg.backbone);
    auto loss = [&] { return sample_loss(sample, params, cfg, trunk); };
    params.zero_grad();
    backward(loss(), params);

    GradCheckReport report;
    report.tolerance = opt.tolerance;
    bool first = true;
    for (auto& [name, param] : params) {
        NdArray analytic = param.grad();
        if (first && opt.inject_bug_scale != 1.0)
            for (auto& g : analytic.values()) g *= opt.inject_bug_scale;
        first = false;
        GradGroupResult group{name, 0, 0.0, 0, true};
        NdArray& value = param.leaf_value();
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double saved = value[i];
            value[i] = saved + opt.step;
            const double up = loss().item();
            value[i] = saved - opt.step;
            const double down = loss().item();
            value[i] = saved;
            const double numeric = (up - down) / (2.0 * opt.step);
            if (!std::isfinite(analytic[i]) || !std::isfinite(numeric)) group.finite = false;
            const double err = std::abs(analytic[i] - numeric) /
                               std::max({std::abs(analytic[i]), std::abs(numeric), opt.floor});
            if (err > group.max_rel_error) {
                group.max_rel_error = err;
                group.worst_index = i;
            }
            ++group.coordinates;
        }
        report.groups.push_back(group);
    }
    return report;
}

inline std::string format_grad_report(const GradCheckReport& report) {
    std::string out = "parameter,coordinates,max_rel_error,worst_index,finite\n";
    char line[256];
    for (const auto& g : report.groups) {
        std::snprintf(line, sizeof line, "%s,%zu,%.6e,%zu,%s\n", g.name.c_str(), g.coordinates, g.max_rel_error,
                      g.worst_index, g.finite ? "yes" : "no");
        out += line;
    }
    std::snprintf(line, sizeof line, "# max_rel_error %.6e tolerance %.1e %s\n", report.max_rel_error(),
                  report.tolerance, report.ok() ? "PASS" : "FAIL");
    out += line;
    return out;
}

} // namespace dualrc::harness
