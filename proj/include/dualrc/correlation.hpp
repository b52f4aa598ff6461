#pragma once

#include <string>
#include <utility>

#include "dualrc/features.hpp"
#include "dualrc/ops.hpp"

namespace dualrc {

// Dense [h_a, w_a, h_b, w_b] correlation scores.
struct CorrTensor4D {
    Tensor data;

    CorrTensor4D() = default;
    explicit CorrTensor4D(Tensor t) : data(std::move(t)) {
        if (data.dims().size() != 4)
            throw ShapeError("CorrTensor4D: expected rank 4, got " + dims_to_string(data.dims()));
    }

    const NdArray& value() const { return data.value(); }
    std::size_t dim(std::size_t a) const { return data.dims()[a]; }
    std::size_t elements() const { return data.size(); }
};

// Scores of one query cell against every cell of a target grid.
struct ScoreMap2D {
    NdArray data;  // [H, W]
    std::size_t query_i = 0, query_j = 0;
};

// C[i,j,k,l] = <f_a(i,j), f_b(k,l)> over epsilon-guarded unit vectors.
inline CorrTensor4D corr4d(const FeatureMap& fa, const FeatureMap& fb) {
    if (fa.channels() != fb.channels())
        throw ShapeError("corr4d: channel mismatch " + std::to_string(fa.channels()) + " vs " +
                         std::to_string(fb.channels()));
    const std::size_t c = fa.channels();
    Tensor na = reshape(l2_normalize_channels(fa.data), {c, fa.cells()});
    Tensor nb = reshape(l2_normalize_channels(fb.data), {c, fb.cells()});
    Tensor flat = matmul(transpose2d(na), nb);
    return CorrTensor4D(reshape(flat, {fa.height(), fa.width(), fb.height(), fb.width()}));
}

// Swap of matching direction: out[k,l,i,j] = in[i,j,k,l].
inline CorrTensor4D transpose4d(const CorrTensor4D& c) {
    return CorrTensor4D(permute(c.data, {2, 3, 0, 1}));
}

namespace detail {

// Unit channel vectors stored cell-major ([cells, C]) for per-query scans.
struct CellMajorUnits {
    NdArray vectors;
    std::size_t channels = 0, height = 0, width = 0;

    explicit CellMajorUnits(const FeatureMap& f)
        : channels(f.channels()), height(f.height()), width(f.width()) {
        const NdArray unit = l2_normalize_channels(f.data).value();
        const std::size_t cells = height * width;
        vectors = NdArray(Dims{cells, channels});
        for (std::size_t ch = 0; ch < channels; ++ch)
            for (std::size_t p = 0; p < cells; ++p) vectors[p * channels + ch] = unit[ch * cells + p];
    }

    const double* cell(std::size_t index) const { return vectors.data() + index * channels; }
    std::size_t cells() const { return height * width; }
};

// Dot products of one source cell with every target cell; channel sums run
// in ascending order.
inline void score_row(const CellMajorUnits& src, std::size_t src_cell, const CellMajorUnits& dst,
                      double* out) {
    const double* q = src.cell(src_cell);
    const std::size_t c = src.channels;
    for (std::size_t t = 0; t < dst.cells(); ++t) {
        const double* v = dst.cell(t);
        double acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) acc += q[ch] * v[ch];
        out[t] = acc;
    }
}

} // namespace detail

inline ScoreMap2D fine_score_map(const FeatureMap& fa_fine, const FeatureMap& fb_fine, std::size_t i,
                                 std::size_t j) {
    if (i >= fa_fine.height() || j >= fa_fine.width())
        throw BoundsError("fine_score_map: query (" + std::to_string(i) + "," + std::to_string(j) +
                          ") outside " + std::to_string(fa_fine.height()) + "x" +
                          std::to_string(fa_fine.width()));
    if (fa_fine.channels() != fb_fine.channels()) throw ShapeError("fine_score_map: channel mismatch");
    const detail::CellMajorUnits src(fa_fine), dst(fb_fine);
    ScoreMap2D out{NdArray(Dims{fb_fine.height(), fb_fine.width()}), i, j};
    detail::score_row(src, i * fa_fine.width() + j, dst, out.data.data());
    return out;
}

} // namespace dualrc
