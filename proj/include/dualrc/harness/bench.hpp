#pragma once

// Memory/time accounting of the dual-resolution pipeline over a sweep of
// coarse grid sizes. Stored-element counts are exact; peak bytes come from
// the tensor allocation tracker and timings from a steady clock.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "dualrc/harness/pipeline.hpp"
#include "dualrc/harness/synth.hpp"
#include "dualrc/memory.hpp"

namespace dualrc::harness {

struct BenchRow {
    std::size_t coarse_h = 0, coarse_w = 0, fine_h = 0, fine_w = 0;
    std::size_t coarse_elements = 0;           // stored refined tensor
    std::size_t fine_equivalent_elements = 0;  // a fine 4D tensor of the same pair
    std::size_t per_query_elements = 0;        // fine + coarse buffer of one query
    std::size_t feature_elements = 0;          // fine maps of both images
    std::size_t workers = 1;
    std::size_t match_peak_bytes = 0;          // tracked payload above baseline during matching
    std::size_t pipeline_peak_bytes = 0;
    double ms_extract = 0, ms_correlate = 0, ms_match = 0;

    std::size_t ratio() const { return fine_equivalent_elements / coarse_elements; }

    // Matching may hold two working copies of the fine features plus one
    // per-query buffer per worker, and no 4D storage beyond the coarse tensor.
    std::size_t match_bound_bytes() const {
        return sizeof(double) * (2 * feature_elements + workers * per_query_elements);
    }
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::vector<std::string> failures;

    bool ok() const { return failures.empty(); }
};

inline int coarse_stride_of(const ModelSpec& spec) {
    return spec.backbone == BackboneKind::patch ? spec.fine_stride * kDualRatio
                                                : spec.model.backbone.coarse_stride();
}

inline BenchRow bench_one(const Model& model, std::size_t coarse_side, std::uint64_t seed, double keep_fraction) {
    using clock = std::chrono::steady_clock;
    auto ms_since = [](clock::time_point t) {
        return std::chrono::duration<double, std::milli>(clock::now() - t).count();
    };
    SynthConfig sc;
    sc.seed = seed;
    sc.size = coarse_side * std::size_t(coarse_stride_of(model.spec()));
    sc.annotations = 0;
    const SyntheticScene scene = synth(sc);

    BenchRow row;
    const PeakScope pipeline_scope;
    auto t = clock::now();
    const DualFeatures fa = model.extract(scene.image_a), fb = model.extract(scene.image_b);
    row.ms_extract = ms_since(t);
    t = clock::now();
    const CorrTensor4D cbar = model.refined(fa, fb);
    row.ms_correlate = ms_since(t);

    MatchStats stats;
    {
        const PeakScope match_scope;
        t = clock::now();
        match_dense(fa, fb, cbar, keep_fraction, &stats);
        row.ms_match = ms_since(t);
        row.match_peak_bytes = match_scope.peak_above_base();
    }
    row.pipeline_peak_bytes = pipeline_scope.peak_above_base();
    row.coarse_h = fa.coarse.height();
    row.coarse_w = fa.coarse.width();
    row.fine_h = fa.fine.height();
    row.fine_w = fa.fine.width();
    row.coarse_elements = cbar.elements();
    row.fine_equivalent_elements = row.fine_h * row.fine_w * fb.fine.height() * fb.fine.width();
    row.per_query_elements = stats.per_query_elements;
    row.feature_elements = fa.fine.data.size() + fb.fine.data.size();
    row.workers = num_workers();
    return row;
}

inline BenchReport bench(const Model& model, const std::vector<std::size_t>& coarse_sides, std::uint64_t seed,
                         double keep_fraction) {
    if (coarse_sides.empty()) throw ConfigError("bench: empty size sweep");
    BenchReport report;
    const std::size_t r4 = std::size_t(kDualRatio) * kDualRatio * kDualRatio * kDualRatio;
    for (std::size_t side : coarse_sides) {
        if (side < 1) throw ConfigError("bench: coarse sizes must be >= 1");
        const BenchRow row = bench_one(model, side, seed, keep_fraction);
        const std::string tag = std::to_string(row.coarse_h) + "x" + std::to_string(row.coarse_w) + ": ";
        if (row.coarse_elements != row.coarse_h * row.coarse_w * row.coarse_h * row.coarse_w)
            report.failures.push_back(tag + "stored coarse elements differ from h_a*w_a*h_b*w_b");
        if (row.fine_equivalent_elements != r4 * row.coarse_elements)
            report.failures.push_back(tag + "fine/coarse element ratio is not r^4");
        if (row.match_peak_bytes > row.match_bound_bytes())
            report.failures.push_back(tag + "matching peak exceeds feature copies plus per-query buffers");
        report.rows.push_back(row);
    }
    for (std::size_t a = 0; a < report.rows.size(); ++a)
        for (std::size_t b = 0; b < report.rows.size(); ++b)
            if (report.rows[b].coarse_h == 2 * report.rows[a].coarse_h &&
                report.rows[b].coarse_w == 2 * report.rows[a].coarse_w &&
                report.rows[b].coarse_elements != 16 * report.rows[a].coarse_elements)
                report.failures.push_back("doubling the coarse grid did not give 16x stored elements");
    return report;
}

// Deterministic part of the report: geometry and exact element counts.
inline std::string format_bench_report(const BenchReport& report) {
    std::string out =
        "coarse_h,coarse_w,fine_h,fine_w,coarse_elements,fine_equivalent_elements,ratio,per_query_elements,"
        "stored_elements\n";
    char line[256];
    for (const auto& r : report.rows) {
        std::snprintf(line, sizeof line, "%zu,%zu,%zu,%zu,%zu,%zu,%zu,%zu,%zu\n", r.coarse_h, r.coarse_w, r.fine_h,
                      r.fine_w, r.coarse_elements, r.fine_equivalent_elements, r.ratio(), r.per_query_elements,
                      r.coarse_elements + r.per_query_elements);
        out += line;
    }
    return out;
}

// Measured part: tracked peak bytes and stage timings.
inline std::string format_bench_measurements(const BenchReport& report) {
    std::string out =
        "coarse_h,coarse_w,workers,match_peak_bytes,match_bound_bytes,fine_tensor_bytes,pipeline_peak_bytes,"
        "extract_ms,correlate_ms,match_ms\n";
    char line[256];
    for (const auto& r : report.rows) {
        std::snprintf(line, sizeof line, "%zu,%zu,%zu,%zu,%zu,%zu,%zu,%.3f,%.3f,%.3f\n", r.coarse_h, r.coarse_w,
                      r.workers, r.match_peak_bytes, r.match_bound_bytes(),
                      r.fine_equivalent_elements * sizeof(double), r.pipeline_peak_bytes, r.ms_extract,
                      r.ms_correlate, r.ms_match);
        out += line;
    }
    return out;
}

} // namespace dualrc::harness
