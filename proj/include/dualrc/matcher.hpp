#pragma once

// Coarse-to-fine dense matching. For every fine query cell the fine cosine
// score map over the target is masked by the refined coarse scores (bilinear
// lookup at the query's coarse position, clamped at 0, nearest-upsampled by
// the ratio), the arg-max is taken, and only mutual nearest neighbours are
// kept. Queries are restricted to the coarse cells whose best refined score
// ranks in the top keep_fraction. No fine-resolution 4D tensor is ever
// formed: each query needs one coarse and one fine target-sized buffer.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dualrc/correlation.hpp"
#include "dualrc/parallel.hpp"

namespace dualrc {

inline constexpr double kDefaultKeepFraction = 0.5;

struct PixelPoint {
    double x = 0.0, y = 0.0;
    bool operator==(const PixelPoint&) const = default;
};

struct Match {
    PixelPoint src;
    PixelPoint dst;
    double score = 0.0;
};

enum class MatchDirection { a_to_b, b_to_a, mutual };

struct MatchSet {
    std::vector<Match> matches;
    MatchDirection direction = MatchDirection::mutual;

    std::size_t size() const { return matches.size(); }
    bool empty() const { return matches.empty(); }
};

struct Retrieval {
    std::size_t k = 0, l = 0;
    double score = 0.0;
};

namespace detail {

// Read access to the refined tensor in either matching direction without
// materialising the transpose.
struct CoarseView {
    const NdArray& cbar;
    bool swapped = false;

    std::size_t src_h() const { return cbar.dim(swapped ? 2 : 0); }
    std::size_t src_w() const { return cbar.dim(swapped ? 3 : 1); }
    std::size_t dst_h() const { return cbar.dim(swapped ? 0 : 2); }
    std::size_t dst_w() const { return cbar.dim(swapped ? 1 : 3); }

    double at(std::size_t si, std::size_t sj, std::size_t ti, std::size_t tj) const {
        const std::size_t w1 = cbar.dim(1), h2 = cbar.dim(2), w3 = cbar.dim(3);
        return swapped ? cbar[((ti * w1 + tj) * h2 + si) * w3 + sj] : cbar[((si * w1 + sj) * h2 + ti) * w3 + tj];
    }
};

struct BilinearCorners {
    std::size_t i0, i1, j0, j1;
    double w00, w01, w10, w11;
};

// Corners of the fine query (i,j) on the coarse grid at (i/r, j/r); ceil
// indices clamp to the last row/column.
inline BilinearCorners bilinear_corners(std::size_t i, std::size_t j, int r, std::size_t h, std::size_t w) {
    const double ip = static_cast<double>(i) / r, jp = static_cast<double>(j) / r;
    BilinearCorners c{};
    c.i0 = std::min(static_cast<std::size_t>(std::floor(ip)), h - 1);
    c.j0 = std::min(static_cast<std::size_t>(std::floor(jp)), w - 1);
    c.i1 = std::min(static_cast<std::size_t>(std::ceil(ip)), h - 1);
    c.j1 = std::min(static_cast<std::size_t>(std::ceil(jp)), w - 1);
    const double fi = ip - std::floor(ip), fj = jp - std::floor(jp);
    c.w00 = (1.0 - fi) * (1.0 - fj);
    c.w01 = (1.0 - fi) * fj;
    c.w10 = fi * (1.0 - fj);
    c.w11 = fi * fj;
    return c;
}

inline void coarse_row(const CoarseView& view, std::size_t i, std::size_t j, int r, double* out) {
    const auto c = bilinear_corners(i, j, r, view.src_h(), view.src_w());
    for (std::size_t k = 0; k < view.dst_h(); ++k)
        for (std::size_t l = 0; l < view.dst_w(); ++l) {
            double acc = 0.0;
            acc += c.w00 * view.at(c.i0, c.j0, k, l);
            acc += c.w01 * view.at(c.i0, c.j1, k, l);
            acc += c.w10 * view.at(c.i1, c.j0, k, l);
            acc += c.w11 * view.at(c.i1, c.j1, k, l);
            out[k * view.dst_w() + l] = acc;
        }
}

// fine[t] *= max(coarse[t / r], 0), in place.
inline void apply_mask(double* fine, const double* coarse, std::size_t fine_h, std::size_t fine_w, int r,
                       std::size_t coarse_w) {
    const auto rr = static_cast<std::size_t>(r);
    for (std::size_t y = 0; y < fine_h; ++y)
        for (std::size_t x = 0; x < fine_w; ++x) {
            const double m = coarse[(y / rr) * coarse_w + x / rr];
            fine[y * fine_w + x] *= m > 0.0 ? m : 0.0;
        }
}

// First maximum in row-major order.
inline std::size_t argmax_first(const double* v, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < n; ++t)
        if (v[t] > v[best]) best = t;
    return best;
}

inline void require_cbar_dims(const CorrTensor4D& cbar, std::size_t ha, std::size_t wa, std::size_t hb,
                              std::size_t wb, const char* what) {
    if (cbar.dim(0) != ha || cbar.dim(1) != wa || cbar.dim(2) != hb || cbar.dim(3) != wb)
        throw ShapeError(std::string(what) + ": refined tensor " + dims_to_string(cbar.data.dims()) +
                         " does not match the coarse grids");
}

inline void require_fine_multiple(const FeatureMap& fine, std::size_t coarse_h, std::size_t coarse_w, int r,
                                  const char* what) {
    if (r < 1 || fine.height() != coarse_h * static_cast<std::size_t>(r) ||
        fine.width() != coarse_w * static_cast<std::size_t>(r))
        throw ShapeError(std::string(what) + ": fine grid must be exactly " + std::to_string(r) +
                         "x the coarse grid");
}

} // namespace detail

// Bilinear score map of fine query (i,j) over the coarse target grid.
inline ScoreMap2D coarse_score_map(const CorrTensor4D& cbar, std::size_t i, std::size_t j, int r) {
    if (r < 1) throw ConfigError("coarse_score_map: ratio must be >= 1");
    const auto rr = static_cast<std::size_t>(r);
    if (i >= cbar.dim(0) * rr || j >= cbar.dim(1) * rr)
        throw BoundsError("coarse_score_map: query outside the fine grid");
    detail::CoarseView view{cbar.value(), false};
    ScoreMap2D out{NdArray(Dims{cbar.dim(2), cbar.dim(3)}), i, j};
    detail::coarse_row(view, i, j, r, out.data.data());
    return out;
}

// Fine scores masked by the upsampled, zero-clamped coarse scores.
inline ScoreMap2D fused_score_map(const FeatureMap& fa_fine, const FeatureMap& fb_fine, const CorrTensor4D& cbar,
                                  std::size_t i, std::size_t j, int r) {
    detail::require_fine_multiple(fa_fine, cbar.dim(0), cbar.dim(1), r, "fused_score_map");
    detail::require_fine_multiple(fb_fine, cbar.dim(2), cbar.dim(3), r, "fused_score_map");
    ScoreMap2D fine = fine_score_map(fa_fine, fb_fine, i, j);
    const ScoreMap2D coarse = coarse_score_map(cbar, i, j, r);
    detail::apply_mask(fine.data.data(), coarse.data.data(), fb_fine.height(), fb_fine.width(), r, cbar.dim(3));
    return fine;
}

inline Retrieval retrieve(const ScoreMap2D& map) {
    const std::size_t w = map.data.dim(1);
    const std::size_t best = detail::argmax_first(map.data.data(), map.data.size());
    return {best / w, best % w, map.data[best]};
}

struct MatchStats {
    std::size_t coarse_sources_a = 0, coarse_sources_b = 0;
    std::size_t kept_coarse_a = 0, kept_coarse_b = 0;
    std::vector<std::size_t> queried_a, queried_b;  // fine linear indices, ascending
    std::size_t per_query_elements = 0;              // coarse + fine buffer per query
};

// Number of coarse cells kept for a fraction of M sources.
inline std::size_t kept_count(double keep_fraction, std::size_t sources) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw ConfigError("keep_fraction must lie in (0, 1]");
    const double raw = keep_fraction * static_cast<double>(sources);
    auto kept = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::clamp<std::size_t>(kept, sources ? 1 : 0, sources);
}

namespace detail {

// Coarse source cells ranked by their best refined score (descending, ties
// by index), truncated to the kept count; returned in ascending index order.
inline std::vector<std::size_t> top_coarse_sources(const CoarseView& view, double keep_fraction) {
    const std::size_t sources = view.src_h() * view.src_w();
    std::vector<double> best(sources);
    for (std::size_t s = 0; s < sources; ++s) {
        const std::size_t si = s / view.src_w(), sj = s % view.src_w();
        double m = view.at(si, sj, 0, 0);
        for (std::size_t ti = 0; ti < view.dst_h(); ++ti)
            for (std::size_t tj = 0; tj < view.dst_w(); ++tj) m = std::max(m, view.at(si, sj, ti, tj));
        best[s] = m;
    }
    std::vector<std::size_t> order(sources);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return best[x] > best[y]; });
    order.resize(kept_count(keep_fraction, sources));
    std::sort(order.begin(), order.end());
    return order;
}

inline std::vector<std::size_t> fine_cells_of(const std::vector<std::size_t>& coarse, std::size_t coarse_w,
                                              int r) {
    const auto rr = static_cast<std::size_t>(r);
    const std::size_t fine_w = coarse_w * rr;
    std::vector<std::size_t> cells;
    cells.reserve(coarse.size() * rr * rr);
    for (std::size_t c : coarse) {
        const std::size_t ci = c / coarse_w, cj = c % coarse_w;
        for (std::size_t dy = 0; dy < rr; ++dy)
            for (std::size_t dx = 0; dx < rr; ++dx) cells.push_back((ci * rr + dy) * fine_w + cj * rr + dx);
    }
    std::sort(cells.begin(), cells.end());
    return cells;
}

struct DirectionalResult {
    std::vector<std::size_t> target;  // arg-max target cell per query
    std::vector<double> score;
};

inline DirectionalResult query_direction(const CellMajorUnits& src, const CellMajorUnits& dst,
                                         const CoarseView& view, const std::vector<std::size_t>& queries,
                                         int r) {
    DirectionalResult res{std::vector<std::size_t>(queries.size()), std::vector<double>(queries.size())};
    const std::size_t t_fine = dst.cells(), t_coarse = view.dst_h() * view.dst_w();
    parallel_for(queries.size(), [&](std::size_t begin, std::size_t end) {
        NdArray fine_buf(Dims{t_fine});
        NdArray coarse_buf(Dims{t_coarse});
        for (std::size_t n = begin; n < end; ++n) {
            const std::size_t q = queries[n];
            score_row(src, q, dst, fine_buf.data());
            coarse_row(view, q / src.width, q % src.width, r, coarse_buf.data());
            apply_mask(fine_buf.data(), coarse_buf.data(), dst.height, dst.width, r, view.dst_w());
            const std::size_t best = argmax_first(fine_buf.data(), t_fine);
            res.target[n] = best;
            res.score[n] = fine_buf[best];
        }
    });
    return res;
}

} // namespace detail

inline MatchSet match_dense(const DualFeatures& a, const DualFeatures& b, const CorrTensor4D& cbar,
                            double keep_fraction = kDefaultKeepFraction, MatchStats* stats = nullptr) {
    if (a.ratio != b.ratio) throw ShapeError("match_dense: ratio differs between images");
    a.validate();
    b.validate();
    if (a.fine.channels() != b.fine.channels()) throw ShapeError("match_dense: channel mismatch");
    const int r = a.ratio;
    detail::require_cbar_dims(cbar, a.coarse.height(), a.coarse.width(), b.coarse.height(), b.coarse.width(),
                              "match_dense");
    kept_count(keep_fraction, 1);  // validates the fraction up front

    const detail::CellMajorUnits ua(a.fine), ub(b.fine);
    const detail::CoarseView forward{cbar.value(), false}, backward{cbar.value(), true};

    const auto kept_a = detail::top_coarse_sources(forward, keep_fraction);
    const auto kept_b = detail::top_coarse_sources(backward, keep_fraction);
    const auto queries_a = detail::fine_cells_of(kept_a, a.coarse.width(), r);
    const auto queries_b = detail::fine_cells_of(kept_b, b.coarse.width(), r);

    const auto ab = detail::query_direction(ua, ub, forward, queries_a, r);
    const auto ba = detail::query_direction(ub, ua, backward, queries_b, r);

    // position of each queried B cell in queries_b
    std::vector<std::ptrdiff_t> slot_b(ub.cells(), -1);
    for (std::size_t n = 0; n < queries_b.size(); ++n) slot_b[queries_b[n]] = static_cast<std::ptrdiff_t>(n);

    MatchSet out;
    out.direction = MatchDirection::mutual;
    for (std::size_t n = 0; n < queries_a.size(); ++n) {
        const std::size_t p = queries_a[n], q = ab.target[n];
        const std::ptrdiff_t back = slot_b[q];
        if (back < 0 || ba.target[static_cast<std::size_t>(back)] != p) continue;
        Match m;
        m.src = {cell_center(p % ua.width, a.fine.stride), cell_center(p / ua.width, a.fine.stride)};
        m.dst = {cell_center(q % ub.width, b.fine.stride), cell_center(q / ub.width, b.fine.stride)};
        m.score = ab.score[n];
        out.matches.push_back(m);
    }

    if (stats) {
        stats->coarse_sources_a = a.coarse.cells();
        stats->coarse_sources_b = b.coarse.cells();
        stats->kept_coarse_a = kept_a.size();
        stats->kept_coarse_b = kept_b.size();
        stats->queried_a = queries_a;
        stats->queried_b = queries_b;
        stats->per_query_elements =
            std::max(ub.cells() + b.coarse.cells(), ua.cells() + a.coarse.cells());
    }
    return out;
}

// Text form: one "x_a y_a x_b y_b score" line per match, six significant
// digits; lines starting with '#' are comments.
inline std::string format_matches(const MatchSet& set) {
    std::string out = "# x_a y_a x_b y_b score\n";
    char line[160];
    for (const auto& m : set.matches) {
        std::snprintf(line, sizeof line, "%.6g %.6g %.6g %.6g %.6g\n", m.src.x, m.src.y, m.dst.x, m.dst.y,
                      m.score);
        out += line;
    }
    return out;
}

inline MatchSet parse_matches(const std::string& text) {
    MatchSet set;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        Match m;
        std::string extra;
        if (!(ls >> m.src.x >> m.src.y >> m.dst.x >> m.dst.y >> m.score) || (ls >> extra))
            throw FormatError("match file line " + std::to_string(line_no) + ": expected 5 numbers");
        set.matches.push_back(m);
    }
    return set;
}

inline void write_matches(const std::string& path, const MatchSet& set) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << format_matches(set);
}

inline MatchSet read_matches(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_matches(ss.str());
}

} // namespace dualrc
