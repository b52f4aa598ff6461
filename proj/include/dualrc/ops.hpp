#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dualrc/ndarray.hpp"
#include "dualrc/parallel.hpp"
#include "dualrc/tensor.hpp"

namespace dualrc {

inline constexpr double kNormEpsilon = 1e-8;

namespace detail {

template <std::size_t S>
using Extent = std::array<std::size_t, S>;
template <std::size_t S>
using Shift = std::array<std::ptrdiff_t, S>;

template <std::size_t S>
Extent<S> strides_of(const Extent<S>& d) {
    Extent<S> s{};
    s[S - 1] = 1;
    for (std::size_t a = S - 1; a-- > 0;) s[a] = s[a + 1] * d[a + 1];
    return s;
}

template <std::size_t S>
std::size_t volume(const Extent<S>& d) {
    std::size_t v = 1;
    for (auto x : d) v *= x;
    return v;
}

// Index range of v along one axis such that v + shift lands inside [0, src).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t dst, std::size_t src,
                                                       std::ptrdiff_t shift) {
    std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
    std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(dst),
                                                 static_cast<std::ptrdiff_t>(src) - shift);
    if (hi <= lo) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Walks every row (fixed indices on all but the last axis) of the region
// where dst[v] and src[v + shift] are both in bounds, restricted to axes
// >= first_axis. fn(dst_offset, src_offset, row_length).
template <std::size_t S, class Fn>
void for_each_shifted_row(const Extent<S>& dst, const Extent<S>& src, const Shift<S>& shift,
                          std::size_t first_axis, std::size_t dst_base, std::size_t src_base,
                          Fn&& fn) {
    const auto dst_st = strides_of(dst);
    const auto src_st = strides_of(src);
    Extent<S> lo{}, hi{}, idx{};
    for (std::size_t a = first_axis; a < S; ++a) {
        std::tie(lo[a], hi[a]) = valid_range(dst[a], src[a], shift[a]);
        if (lo[a] >= hi[a]) return;
        idx[a] = lo[a];
    }
    const std::size_t len = hi[S - 1] - lo[S - 1];
    while (true) {
        std::size_t d_off = dst_base, s_off = src_base;
        for (std::size_t a = first_axis; a < S; ++a) {
            d_off += idx[a] * dst_st[a];
            s_off += static_cast<std::size_t>(static_cast<std::ptrdiff_t>(idx[a]) + shift[a]) *
                     src_st[a];
        }
        fn(d_off, s_off, len);
        // advance the odometer over axes [first_axis, S-1)
        bool wrapped = true;
        for (std::size_t a = S - 1; a > first_axis;) {
            --a;
            if (++idx[a] < hi[a]) {
                wrapped = false;
                break;
            }
            idx[a] = lo[a];
        }
        if (wrapped) return;
    }
}

template <std::size_t S>
struct ConvGeometry {
    std::size_t cin = 0, cout = 0;
    Extent<S> in{}, out{}, k{};
    std::ptrdiff_t pad = 0;
};

template <std::size_t S>
Extent<S> kernel_offset(std::size_t flat, const Extent<S>& k) {
    Extent<S> a{};
    for (std::size_t d = S; d-- > 0;) {
        a[d] = flat % k[d];
        flat /= k[d];
    }
    return a;
}

// out[o][u] = sum_i sum_a K[o][i][a] * in[i][u + a - pad]; the sum for each
// output element runs over (i, a) in lexicographic order.
template <std::size_t S>
void conv_forward(const ConvGeometry<S>& g, const double* in, const double* ker, double* out) {
    const std::size_t in_vol = volume(g.in), out_vol = volume(g.out), k_vol = volume(g.k);
    const auto out_st = strides_of(g.out);
    const auto in_st = strides_of(g.in);
    parallel_for(g.cout * g.out[0], [&](std::size_t begin, std::size_t end) {
        for (std::size_t task = begin; task < end; ++task) {
            const std::size_t o = task / g.out[0], u0 = task % g.out[0];
            for (std::size_t i = 0; i < g.cin; ++i) {
                const double* k_oi = ker + (o * g.cin + i) * k_vol;
                for (std::size_t f = 0; f < k_vol; ++f) {
                    const double w = k_oi[f];
                    if (w == 0.0) continue;
                    const auto a = kernel_offset(f, g.k);
                    Shift<S> shift{};
                    for (std::size_t d = 0; d < S; ++d)
                        shift[d] = static_cast<std::ptrdiff_t>(a[d]) - g.pad;
                    const std::ptrdiff_t s0 = static_cast<std::ptrdiff_t>(u0) + shift[0];
                    if (s0 < 0 || s0 >= static_cast<std::ptrdiff_t>(g.in[0])) continue;
                    double* dst = out + o * out_vol + u0 * out_st[0];
                    const double* src = in + i * in_vol + static_cast<std::size_t>(s0) * in_st[0];
                    if constexpr (S == 1) {
                        dst[0] += w * src[0];
                    } else {
                        for_each_shifted_row<S>(g.out, g.in, shift, 1, 0, 0,
                                                [&](std::size_t d_off, std::size_t s_off,
                                                    std::size_t len) {
                                                    double* dp = dst + d_off;
                                                    const double* sp = src + s_off;
                                                    for (std::size_t x = 0; x < len; ++x)
                                                        dp[x] += w * sp[x];
                                                });
                    }
                }
            }
        }
    });
}

template <std::size_t S>
void conv_backward_input(const ConvGeometry<S>& g, const double* grad_out, const double* ker,
                         double* grad_in) {
    const std::size_t in_vol = volume(g.in), out_vol = volume(g.out), k_vol = volume(g.k);
    const auto out_st = strides_of(g.out);
    const auto in_st = strides_of(g.in);
    parallel_for(g.cin * g.in[0], [&](std::size_t begin, std::size_t end) {
        for (std::size_t task = begin; task < end; ++task) {
            const std::size_t i = task / g.in[0], v0 = task % g.in[0];
            for (std::size_t o = 0; o < g.cout; ++o) {
                const double* k_oi = ker + (o * g.cin + i) * k_vol;
                for (std::size_t f = 0; f < k_vol; ++f) {
                    const double w = k_oi[f];
                    if (w == 0.0) continue;
                    const auto a = kernel_offset(f, g.k);
                    Shift<S> shift{};
                    for (std::size_t d = 0; d < S; ++d)
                        shift[d] = g.pad - static_cast<std::ptrdiff_t>(a[d]);
                    const std::ptrdiff_t s0 = static_cast<std::ptrdiff_t>(v0) + shift[0];
                    if (s0 < 0 || s0 >= static_cast<std::ptrdiff_t>(g.out[0])) continue;
                    double* dst = grad_in + i * in_vol + v0 * in_st[0];
                    const double* src =
                        grad_out + o * out_vol + static_cast<std::size_t>(s0) * out_st[0];
                    if constexpr (S == 1) {
                        dst[0] += w * src[0];
                    } else {
                        for_each_shifted_row<S>(g.in, g.out, shift, 1, 0, 0,
                                                [&](std::size_t d_off, std::size_t s_off,
                                                    std::size_t len) {
                                                    double* dp = dst + d_off;
                                                    const double* sp = src + s_off;
                                                    for (std::size_t x = 0; x < len; ++x)
                                                        dp[x] += w * sp[x];
                                                });
                    }
                }
            }
        }
    });
}

template <std::size_t S>
void conv_backward_kernel(const ConvGeometry<S>& g, const double* grad_out, const double* in,
                          double* grad_ker) {
    const std::size_t in_vol = volume(g.in), out_vol = volume(g.out), k_vol = volume(g.k);
    parallel_for(g.cout * g.cin, [&](std::size_t begin, std::size_t end) {
        for (std::size_t task = begin; task < end; ++task) {
            const std::size_t o = task / g.cin, i = task % g.cin;
            const double* go = grad_out + o * out_vol;
            const double* src = in + i * in_vol;
            for (std::size_t f = 0; f < k_vol; ++f) {
                const auto a = kernel_offset(f, g.k);
                Shift<S> shift{};
                for (std::size_t d = 0; d < S; ++d)
                    shift[d] = static_cast<std::ptrdiff_t>(a[d]) - g.pad;
                double acc = 0.0;
                for_each_shifted_row<S>(g.out, g.in, shift, 0, 0, 0,
                                        [&](std::size_t d_off, std::size_t s_off, std::size_t len) {
                                            for (std::size_t x = 0; x < len; ++x)
                                                acc += go[d_off + x] * src[s_off + x];
                                        });
                grad_ker[task * k_vol + f] += acc;
            }
        }
    });
}

template <std::size_t S>
ConvGeometry<S> conv_geometry(const NdArray& input, const NdArray& kernel, int padding,
                              const char* what) {
    const std::string name(what);
    if (input.ndim() != S + 1)
        throw ShapeError(name + ": input must have rank " + std::to_string(S + 1) + ", got " +
                         dims_to_string(input.dims()));
    if (kernel.ndim() != S + 2)
        throw ShapeError(name + ": kernel must have rank " + std::to_string(S + 2) + ", got " +
                         dims_to_string(kernel.dims()));
    if (kernel.dim(1) != input.dim(0))
        throw ShapeError(name + ": kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input has " + std::to_string(input.dim(0)));
    if (padding < 0) throw ConfigError(name + ": negative padding");
    ConvGeometry<S> g;
    g.cin = input.dim(0);
    g.cout = kernel.dim(0);
    g.pad = padding;
    const std::size_t k = kernel.dim(2);
    for (std::size_t d = 0; d < S; ++d) {
        if (kernel.dim(2 + d) != k) throw ConfigError(name + ": kernel must be isotropic");
        g.k[d] = k;
        g.in[d] = input.dim(1 + d);
        const auto out = static_cast<std::ptrdiff_t>(g.in[d]) + 2 * padding -
                         static_cast<std::ptrdiff_t>(k) + 1;
        if (out < 1) throw ShapeError(name + ": kernel larger than padded input");
        g.out[d] = static_cast<std::size_t>(out);
    }
    if (k % 2 == 0) throw ConfigError(name + ": kernel size must be odd, got " + std::to_string(k));
    return g;
}

template <std::size_t S>
Tensor conv_nd(const Tensor& input, const Tensor& kernel, int padding, const char* what) {
    const auto g = conv_geometry<S>(input.value(), kernel.value(), padding, what);
    Dims out_dims{g.cout};
    out_dims.insert(out_dims.end(), g.out.begin(), g.out.end());
    NdArray out(out_dims, 0.0);
    conv_forward<S>(g, input.value().data(), kernel.value().data(), out.data());
    return Tensor::from_op(std::move(out), what, {input, kernel},
                           [input, kernel, g](const NdArray& go, std::vector<NdArray*>& gi) {
                               if (gi[0])
                                   conv_backward_input<S>(g, go.data(), kernel.value().data(),
                                                          gi[0]->data());
                               if (gi[1])
                                   conv_backward_kernel<S>(g, go.data(), input.value().data(),
                                                           gi[1]->data());
                           });
}

template <class Fn>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* what, Fn&& forward,
                          BackwardFn backward) {
    require_same_dims(a.value(), b.value(), what);
    NdArray out(a.dims());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(av[i], bv[i]);
    return Tensor::from_op(std::move(out), what, {a, b}, std::move(backward));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.dims().size() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         dims_to_string(t.dims()));
}

} // namespace detail

// Cross-correlation of [C_in,H,W] with [C_out,C_in,k,k], zero padding.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int padding) {
    return detail::conv_nd<2>(input, kernel, padding, "conv2d");
}

// Cross-correlation of [C_in,d0,d1,d2,d3] with [C_out,C_in,k,k,k,k], zero padding.
inline Tensor conv4d(const Tensor& input, const Tensor& kernel, int padding) {
    return detail::conv_nd<4>(input, kernel, padding, "conv4d");
}

inline Tensor relu(const Tensor& t) {
    NdArray out(t.dims());
    const auto& v = t.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
    return Tensor::from_op(std::move(out), "relu", {t},
                           [t](const NdArray& go, std::vector<NdArray*>& gi) {
                               const auto& v = t.value();
                               for (std::size_t i = 0; i < go.size(); ++i)
                                   if (v[i] > 0.0) (*gi[0])[i] += go[i];
                           });
}

// max(t, floor) elementwise; gradient passes only where t > floor.
inline Tensor maximum_scalar(const Tensor& t, double floor) {
    NdArray out(t.dims());
    const auto& v = t.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > floor ? v[i] : floor;
    return Tensor::from_op(std::move(out), "maximum_scalar", {t},
                           [t, floor](const NdArray& go, std::vector<NdArray*>& gi) {
                               const auto& v = t.value();
                               for (std::size_t i = 0; i < go.size(); ++i)
                                   if (v[i] > floor) (*gi[0])[i] += go[i];
                           });
}

// Divides each position's channel vector (axis 0) by max(||v||_2, epsilon).
inline Tensor l2_normalize_channels(const Tensor& f, double epsilon = kNormEpsilon) {
    if (!(epsilon > 0.0)) throw ConfigError("l2_normalize_channels: epsilon must be positive");
    if (f.dims().empty()) throw ShapeError("l2_normalize_channels: needs a channel axis");
    const std::size_t channels = f.dims()[0];
    const std::size_t positions = channels ? f.size() / channels : 0;
    const auto& v = f.value();
    NdArray out(f.dims());
    std::vector<double> norms(positions);
    for (std::size_t p = 0; p < positions; ++p) {
        double ss = 0.0;
        for (std::size_t c = 0; c < channels; ++c) ss += v[c * positions + p] * v[c * positions + p];
        norms[p] = std::sqrt(ss);
        const double d = std::max(norms[p], epsilon);
        for (std::size_t c = 0; c < channels; ++c) out[c * positions + p] = v[c * positions + p] / d;
    }
    NdArray normalized = out;
    return Tensor::from_op(
        std::move(out), "l2_normalize_channels", {f},
        [normalized = std::move(normalized), norms = std::move(norms), channels, positions,
         epsilon](const NdArray& go, std::vector<NdArray*>& gi) {
            auto& g = *gi[0];
            for (std::size_t p = 0; p < positions; ++p) {
                if (norms[p] < epsilon) {
                    for (std::size_t c = 0; c < channels; ++c)
                        g[c * positions + p] += go[c * positions + p] / epsilon;
                    continue;
                }
                double dot = 0.0;
                for (std::size_t c = 0; c < channels; ++c)
                    dot += normalized[c * positions + p] * go[c * positions + p];
                for (std::size_t c = 0; c < channels; ++c)
                    g[c * positions + p] +=
                        (go[c * positions + p] - normalized[c * positions + p] * dot) / norms[p];
            }
        });
}

// Nearest-neighbour upsampling of the last two axes by an integer factor.
inline Tensor upsample_nearest(const Tensor& t, int factor) {
    if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
    if (t.dims().size() < 2) throw ShapeError("upsample_nearest: needs at least two axes");
    const std::size_t r = static_cast<std::size_t>(factor);
    Dims dims = t.dims();
    const std::size_t h = dims[dims.size() - 2], w = dims[dims.size() - 1];
    const std::size_t planes = t.size() / (h * w);
    dims[dims.size() - 2] = h * r;
    dims[dims.size() - 1] = w * r;
    NdArray out(dims);
    const auto& v = t.value();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h * r; ++y)
            for (std::size_t x = 0; x < w * r; ++x)
                out[(p * h * r + y) * w * r + x] = v[(p * h + y / r) * w + x / r];
    return Tensor::from_op(std::move(out), "upsample_nearest", {t},
                           [planes, h, w, r](const NdArray& go, std::vector<NdArray*>& gi) {
                               auto& g = *gi[0];
                               for (std::size_t p = 0; p < planes; ++p)
                                   for (std::size_t y = 0; y < h * r; ++y)
                                       for (std::size_t x = 0; x < w * r; ++x)
                                           g[(p * h + y / r) * w + x / r] +=
                                               go[(p * h * r + y) * w * r + x];
                           });
}

// Mean over non-overlapping factor x factor blocks of the last two axes.
inline Tensor avg_pool2d(const Tensor& t, int factor) {
    if (factor < 1) throw ConfigError("avg_pool2d: factor must be >= 1");
    if (t.dims().size() < 2) throw ShapeError("avg_pool2d: needs at least two axes");
    const std::size_t r = static_cast<std::size_t>(factor);
    Dims dims = t.dims();
    const std::size_t h = dims[dims.size() - 2], w = dims[dims.size() - 1];
    if (h % r || w % r)
        throw ConfigError("avg_pool2d: extent " + dims_to_string(dims) + " not divisible by " +
                          std::to_string(r));
    const std::size_t planes = t.size() / (h * w), oh = h / r, ow = w / r;
    dims[dims.size() - 2] = oh;
    dims[dims.size() - 1] = ow;
    NdArray out(dims);
    const auto& v = t.value();
    const double inv = 1.0 / static_cast<double>(r * r);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < r; ++dy)
                    for (std::size_t dx = 0; dx < r; ++dx)
                        acc += v[(p * h + y * r + dy) * w + x * r + dx];
                out[(p * oh + y) * ow + x] = acc * inv;
            }
    return Tensor::from_op(std::move(out), "avg_pool2d", {t},
                           [planes, h, w, r, inv](const NdArray& go, std::vector<NdArray*>& gi) {
                               auto& g = *gi[0];
                               const std::size_t oh = h / r, ow = w / r;
                               for (std::size_t p = 0; p < planes; ++p)
                                   for (std::size_t y = 0; y < h; ++y)
                                       for (std::size_t x = 0; x < w; ++x)
                                           g[(p * h + y) * w + x] +=
                                               go[(p * oh + y / r) * ow + x / r] * inv;
                           });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](const NdArray& go, std::vector<NdArray*>& gi) {
            for (auto* g : gi)
                if (g)
                    for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](const NdArray& go, std::vector<NdArray*>& gi) {
            if (gi[0])
                for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
            if (gi[1])
                for (std::size_t i = 0; i < go.size(); ++i) (*gi[1])[i] -= go[i];
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [a, b](const NdArray& go, std::vector<NdArray*>& gi) {
            const auto& av = a.value();
            const auto& bv = b.value();
            if (gi[0])
                for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i] * bv[i];
            if (gi[1])
                for (std::size_t i = 0; i < go.size(); ++i) (*gi[1])[i] += go[i] * av[i];
        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        a, b, "div", [](double x, double y) { return x / y; },
        [a, b](const NdArray& go, std::vector<NdArray*>& gi) {
            const auto& av = a.value();
            const auto& bv = b.value();
            if (gi[0])
                for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i] / bv[i];
            if (gi[1])
                for (std::size_t i = 0; i < go.size(); ++i)
                    (*gi[1])[i] -= go[i] * av[i] / (bv[i] * bv[i]);
        });
}

inline Tensor scale(const Tensor& t, double factor) {
    NdArray out(t.dims());
    const auto& v = t.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor;
    return Tensor::from_op(std::move(out), "scale", {t},
                           [factor](const NdArray& go, std::vector<NdArray*>& gi) {
                               for (std::size_t i = 0; i < go.size(); ++i)
                                   (*gi[0])[i] += go[i] * factor;
                           });
}

inline Tensor reshape(const Tensor& t, Dims dims) {
    NdArray out = t.value().reshaped(std::move(dims));
    return Tensor::from_op(std::move(out), "reshape", {t},
                           [](const NdArray& go, std::vector<NdArray*>& gi) {
                               for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
                           });
}

// out.dims[a] = in.dims[perm[a]].
inline Tensor permute(const Tensor& t, const std::vector<std::size_t>& perm) {
    const Dims& in_dims = t.dims();
    const std::size_t rank = in_dims.size();
    if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch");
    std::vector<bool> used(rank, false);
    for (auto p : perm) {
        if (p >= rank || used[p]) throw ShapeError("permute: invalid permutation");
        used[p] = true;
    }
    Dims out_dims(rank);
    for (std::size_t a = 0; a < rank; ++a) out_dims[a] = in_dims[perm[a]];
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t a = rank; a-- > 1;) in_strides[a - 1] = in_strides[a] * in_dims[a];
    // source offset for each output element, in output order
    std::vector<std::size_t> src(t.size());
    {
        std::vector<std::size_t> idx(rank, 0);
        for (std::size_t o = 0; o < src.size(); ++o) {
            std::size_t off = 0;
            for (std::size_t a = 0; a < rank; ++a) off += idx[a] * in_strides[perm[a]];
            src[o] = off;
            for (std::size_t a = rank; a-- > 0;) {
                if (++idx[a] < out_dims[a]) break;
                idx[a] = 0;
            }
        }
    }
    NdArray out(out_dims);
    const auto& v = t.value();
    for (std::size_t o = 0; o < src.size(); ++o) out[o] = v[src[o]];
    return Tensor::from_op(std::move(out), "permute", {t},
                           [src = std::move(src)](const NdArray& go, std::vector<NdArray*>& gi) {
                               for (std::size_t o = 0; o < src.size(); ++o)
                                   (*gi[0])[src[o]] += go[o];
                           });
}

inline Tensor transpose2d(const Tensor& t) {
    detail::require_rank(t, 2, "transpose2d");
    return permute(t, {1, 0});
}

// [M,K] x [K,N] -> [M,N]; every output element sums over k in ascending order.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dims()[0], k = a.dims()[1], n = b.dims()[1];
    if (b.dims()[0] != k)
        throw ShapeError("matmul: inner dims " + dims_to_string(a.dims()) + " x " +
                         dims_to_string(b.dims()));
    NdArray out(Dims{m, n}, 0.0);
    {
        const double* av = a.value().data();
        const double* bv = b.value().data();
        double* ov = out.data();
        parallel_for(m, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double x = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += x * bv[p * n + j];
                }
        });
    }
    return Tensor::from_op(std::move(out), "matmul", {a, b},
                           [a, b, m, k, n](const NdArray& go, std::vector<NdArray*>& gi) {
                               const double* av = a.value().data();
                               const double* bv = b.value().data();
                               if (gi[0]) {
                                   double* ga = gi[0]->data();
                                   parallel_for(m, [&](std::size_t begin, std::size_t end) {
                                       for (std::size_t i = begin; i < end; ++i)
                                           for (std::size_t p = 0; p < k; ++p) {
                                               double acc = 0.0;
                                               for (std::size_t j = 0; j < n; ++j)
                                                   acc += go[i * n + j] * bv[p * n + j];
                                               ga[i * k + p] += acc;
                                           }
                                   });
                               }
                               if (gi[1]) {
                                   double* gb = gi[1]->data();
                                   parallel_for(k, [&](std::size_t begin, std::size_t end) {
                                       for (std::size_t p = begin; p < end; ++p)
                                           for (std::size_t i = 0; i < m; ++i) {
                                               const double x = av[i * k + p];
                                               for (std::size_t j = 0; j < n; ++j)
                                                   gb[p * n + j] += x * go[i * n + j];
                                           }
                                   });
                               }
                           });
}

// Axis 0: every element replaced by its column maximum; axis 1: by its row
// maximum. The gradient of each maximum goes to its first arg-max.
inline Tensor broadcast_max(const Tensor& t, int axis) {
    detail::require_rank(t, 2, "broadcast_max");
    if (axis != 0 && axis != 1) throw ConfigError("broadcast_max: axis must be 0 or 1");
    const std::size_t rows = t.dims()[0], cols = t.dims()[1];
    const auto& v = t.value();
    const std::size_t groups = axis == 0 ? cols : rows;
    std::vector<std::size_t> arg(groups, 0);
    NdArray out(t.dims());
    if (axis == 0) {
        std::vector<double> best(cols, -std::numeric_limits<double>::infinity());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                if (v[r * cols + c] > best[c] || r == 0) {
                    best[c] = v[r * cols + c];
                    arg[c] = r;
                }
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = best[c];
    } else {
        for (std::size_t r = 0; r < rows; ++r) {
            double best = v[r * cols];
            for (std::size_t c = 1; c < cols; ++c)
                if (v[r * cols + c] > best) {
                    best = v[r * cols + c];
                    arg[r] = c;
                }
            for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = best;
        }
    }
    return Tensor::from_op(std::move(out), "broadcast_max", {t},
                           [arg = std::move(arg), axis, rows, cols](const NdArray& go,
                                                                    std::vector<NdArray*>& gi) {
                               auto& g = *gi[0];
                               if (axis == 0) {
                                   for (std::size_t c = 0; c < cols; ++c) {
                                       double acc = 0.0;
                                       for (std::size_t r = 0; r < rows; ++r) acc += go[r * cols + c];
                                       g[arg[c] * cols + c] += acc;
                                   }
                               } else {
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       double acc = 0.0;
                                       for (std::size_t c = 0; c < cols; ++c) acc += go[r * cols + c];
                                       g[r * cols + arg[r]] += acc;
                                   }
                               }
                           });
}

// [C,P] -> [C,N] with out[:,n] = t[:,columns[n]].
inline Tensor select_columns(const Tensor& t, std::vector<std::size_t> columns) {
    detail::require_rank(t, 2, "select_columns");
    const std::size_t rows = t.dims()[0], cols = t.dims()[1], n = columns.size();
    for (auto c : columns)
        if (c >= cols) throw BoundsError("select_columns: column index out of range");
    NdArray out(Dims{rows, n});
    const auto& v = t.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = v[r * cols + columns[j]];
    return Tensor::from_op(std::move(out), "select_columns", {t},
                           [columns = std::move(columns), rows, cols](const NdArray& go,
                                                                      std::vector<NdArray*>& gi) {
                               const std::size_t n = columns.size();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < n; ++j)
                                       (*gi[0])[r * cols + columns[j]] += go[r * n + j];
                           });
}

using RowBlend = std::vector<std::pair<std::size_t, double>>;

// [R,C] -> [N,C] with out[n] = sum_j weight_j * t[row_j], summed in the
// order the blend lists its terms.
inline Tensor gather_rows_weighted(const Tensor& t, std::vector<RowBlend> blends) {
    detail::require_rank(t, 2, "gather_rows_weighted");
    const std::size_t rows = t.dims()[0], cols = t.dims()[1];
    for (const auto& b : blends)
        for (const auto& [row, w] : b)
            if (row >= rows) throw BoundsError("gather_rows_weighted: row index out of range");
    NdArray out(Dims{blends.size(), cols}, 0.0);
    const auto& v = t.value();
    for (std::size_t n = 0; n < blends.size(); ++n)
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (const auto& [row, w] : blends[n]) acc += w * v[row * cols + c];
            out[n * cols + c] = acc;
        }
    return Tensor::from_op(std::move(out), "gather_rows_weighted", {t},
                           [blends = std::move(blends), cols](const NdArray& go,
                                                              std::vector<NdArray*>& gi) {
                               for (std::size_t n = 0; n < blends.size(); ++n)
                                   for (const auto& [row, w] : blends[n])
                                       for (std::size_t c = 0; c < cols; ++c)
                                           (*gi[0])[row * cols + c] += w * go[n * cols + c];
                           });
}

inline Tensor softmax_rows(const Tensor& t) {
    detail::require_rank(t, 2, "softmax_rows");
    const std::size_t rows = t.dims()[0], cols = t.dims()[1];
    const auto& v = t.value();
    NdArray out(t.dims());
    for (std::size_t r = 0; r < rows; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) m = std::max(m, v[r * cols + c]);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = std::exp(v[r * cols + c] - m);
            s += out[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= s;
    }
    NdArray probs = out;
    return Tensor::from_op(std::move(out), "softmax_rows", {t},
                           [probs = std::move(probs), rows, cols](const NdArray& go,
                                                                  std::vector<NdArray*>& gi) {
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < cols; ++c)
                                       dot += go[r * cols + c] * probs[r * cols + c];
                                   for (std::size_t c = 0; c < cols; ++c)
                                       (*gi[0])[r * cols + c] +=
                                           probs[r * cols + c] * (go[r * cols + c] - dot);
                               }
                           });
}

inline Tensor sum(const Tensor& t) {
    double acc = 0.0;
    for (double x : t.value().values()) acc += x;
    return Tensor::from_op(NdArray::scalar(acc), "sum", {t},
                           [](const NdArray& go, std::vector<NdArray*>& gi) {
                               const double g = go[0];
                               for (auto& x : gi[0]->values()) x += g;
                           });
}

// sqrt(sum x^2); subgradient 0 at the origin.
inline Tensor frobenius_norm(const Tensor& t) {
    double ss = 0.0;
    for (double x : t.value().values()) ss += x * x;
    const double norm = std::sqrt(ss);
    return Tensor::from_op(NdArray::scalar(norm), "frobenius_norm", {t},
                           [t, norm](const NdArray& go, std::vector<NdArray*>& gi) {
                               if (norm == 0.0) return;
                               const auto& v = t.value();
                               for (std::size_t i = 0; i < v.size(); ++i)
                                   (*gi[0])[i] += go[0] * v[i] / norm;
                           });
}

} // namespace dualrc
