#pragma once

// Supervision: blurred one-hot ground-truth rows, softmax-normalised fused
// score rows for annotated keypoints, the keypoint and orthogonal losses, and
// a small gradient-descent loop.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualrc/backbone.hpp"
#include "dualrc/consensus.hpp"
#include "dualrc/matcher.hpp"

namespace dualrc {

inline constexpr double kDefaultLambda = 0.05;
inline constexpr double kDefaultSigma = 1.0;
inline constexpr double kDefaultLearningRate = 0.01;

struct KeypointAnnotation {
    std::vector<std::pair<PixelPoint, PixelPoint>> pairs;

    std::size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }

    // Points must lie on the pixel-centre hull [0, W-1] x [0, H-1].
    void validate_inside(std::size_t wa, std::size_t ha, std::size_t wb, std::size_t hb) const {
        auto inside = [](const PixelPoint& p, std::size_t w, std::size_t h) {
            return p.x >= 0.0 && p.y >= 0.0 && p.x <= double(w) - 1.0 && p.y <= double(h) - 1.0;
        };
        for (std::size_t n = 0; n < pairs.size(); ++n)
            if (!inside(pairs[n].first, wa, ha) || !inside(pairs[n].second, wb, hb))
                throw AnnotationError("annotation " + std::to_string(n) + " lies outside its image");
    }
};

struct GroundTruthMaps {
    NdArray ab;  // [N, H_b * W_b]
    NdArray ba;  // [N, H_a * W_a]
    double sigma = kDefaultSigma;
};

// Grid cell of a pixel point on a feature map; AnnotationError outside.
inline std::size_t snap_to_cell(const PixelPoint& p, const FeatureMap& map) {
    const long i = nearest_cell(p.y, map.stride), j = nearest_cell(p.x, map.stride);
    if (i < 0 || j < 0 || i >= long(map.height()) || j >= long(map.width()))
        throw AnnotationError("keypoint (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                              ") falls outside the feature grid");
    return std::size_t(i) * map.width() + std::size_t(j);
}

// One row per point: a one-hot at the nearest cell blurred by a Gaussian
// truncated at radius ceil(3 sigma), then renormalised.
inline NdArray gt_rows(const std::vector<PixelPoint>& points, const FeatureMap& target, double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("build_gt: sigma must be positive");
    const std::size_t h = target.height(), w = target.width();
    const long radius = long(std::ceil(3.0 * sigma));
    NdArray rows(Dims{points.size(), h * w}, 0.0);
    for (std::size_t n = 0; n < points.size(); ++n) {
        const std::size_t cell = snap_to_cell(points[n], target);
        const long ci = long(cell / w), cj = long(cell % w);
        double total = 0.0;
        for (long dy = -radius; dy <= radius; ++dy)
            for (long dx = -radius; dx <= radius; ++dx) {
                const long y = ci + dy, x = cj + dx;
                if (y < 0 || x < 0 || y >= long(h) || x >= long(w)) continue;
                const double v = std::exp(-double(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                rows[n * h * w + std::size_t(y) * w + std::size_t(x)] = v;
                total += v;
            }
        for (std::size_t t = 0; t < h * w; ++t) rows[n * h * w + t] /= total;
    }
    return rows;
}

inline GroundTruthMaps build_gt(const KeypointAnnotation& ann, const FeatureMap& fine_a, const FeatureMap& fine_b,
                                double sigma = kDefaultSigma) {
    std::vector<PixelPoint> src, dst;
    for (const auto& [a, b] : ann.pairs) {
        src.push_back(a);
        dst.push_back(b);
    }
    return {gt_rows(dst, fine_b, sigma), gt_rows(src, fine_a, sigma), sigma};
}

struct PredictedMaps {
    Tensor ab;  // [N, H_b * W_b]
    Tensor ba;  // [N, H_a * W_a]
};

namespace detail {

// Fused score rows for the given source cells, as a differentiable graph.
inline Tensor fused_rows(const FeatureMap& src, const FeatureMap& dst, const CorrTensor4D& cbar,
                         const std::vector<std::size_t>& cells, int r) {
    const std::size_t c = src.channels();
    const std::size_t hs = cbar.dim(0), ws = cbar.dim(1), ht = cbar.dim(2), wt = cbar.dim(3);
    Tensor us = reshape(l2_normalize_channels(src.data), {c, src.cells()});
    Tensor ud = reshape(l2_normalize_channels(dst.data), {c, dst.cells()});
    Tensor fine = matmul(transpose2d(select_columns(us, cells)), ud);

    std::vector<RowBlend> blends;
    for (std::size_t cell : cells) {
        const auto k = bilinear_corners(cell / src.width(), cell % src.width(), r, hs, ws);
        blends.push_back({{k.i0 * ws + k.j0, k.w00},
                          {k.i0 * ws + k.j1, k.w01},
                          {k.i1 * ws + k.j0, k.w10},
                          {k.i1 * ws + k.j1, k.w11}});
    }
    const std::size_t n = cells.size();
    Tensor coarse = relu(gather_rows_weighted(reshape(cbar.data, {hs * ws, ht * wt}), std::move(blends)));
    Tensor mask = reshape(upsample_nearest(reshape(coarse, {n, ht, wt}), r), {n, dst.cells()});
    return mul(fine, mask);
}

} // namespace detail

// Softmax (temperature 1) over the target frame of each annotated
// keypoint's fused score map, in both directions.
inline PredictedMaps predicted_maps(const DualFeatures& a, const DualFeatures& b, const CorrTensor4D& cbar,
                                    const KeypointAnnotation& ann) {
    if (a.ratio != b.ratio) throw ShapeError("predicted_maps: ratio differs between images");
    const int r = a.ratio;
    detail::require_cbar_dims(cbar, a.coarse.height(), a.coarse.width(), b.coarse.height(), b.coarse.width(),
                              "predicted_maps");
    detail::require_fine_multiple(a.fine, cbar.dim(0), cbar.dim(1), r, "predicted_maps");
    detail::require_fine_multiple(b.fine, cbar.dim(2), cbar.dim(3), r, "predicted_maps");
    if (ann.empty()) throw AnnotationError("predicted_maps: no keypoints");
    std::vector<std::size_t> src, dst;
    for (const auto& [pa, pb] : ann.pairs) {
        src.push_back(snap_to_cell(pa, a.fine));
        dst.push_back(snap_to_cell(pb, b.fine));
    }
    return {softmax_rows(detail::fused_rows(a.fine, b.fine, cbar, src, r)),
            softmax_rows(detail::fused_rows(b.fine, a.fine, transpose4d(cbar), dst, r))};
}

namespace detail {

inline void require_same_shape(const Tensor& p, const NdArray& g, const char* what) {
    if (p.dims() != g.dims())
        throw ShapeError(std::string(what) + ": prediction " + dims_to_string(p.dims()) + " vs ground truth " +
                         dims_to_string(g.dims()));
}

inline Tensor gram(const Tensor& s) { return matmul(s, transpose2d(s)); }

inline NdArray gram_values(const NdArray& g) { return gram(Tensor(g)).value(); }

} // namespace detail

inline Tensor loss_keypoint(const PredictedMaps& pred, const GroundTruthMaps& gt) {
    detail::require_same_shape(pred.ab, gt.ab, "loss_keypoint");
    detail::require_same_shape(pred.ba, gt.ba, "loss_keypoint");
    return add(frobenius_norm(sub(pred.ab, Tensor(gt.ab))), frobenius_norm(sub(pred.ba, Tensor(gt.ba))));
}

inline Tensor loss_orthogonal(const PredictedMaps& pred, const GroundTruthMaps& gt) {
    detail::require_same_shape(pred.ab, gt.ab, "loss_orthogonal");
    detail::require_same_shape(pred.ba, gt.ba, "loss_orthogonal");
    return add(frobenius_norm(sub(detail::gram(pred.ab), Tensor(detail::gram_values(gt.ab)))),
               frobenius_norm(sub(detail::gram(pred.ba), Tensor(detail::gram_values(gt.ba)))));
}

inline Tensor combine_losses(const Tensor& keypoint, const Tensor& orthogonal, double lambda = kDefaultLambda) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
    return add(keypoint, scale(orthogonal, lambda));
}

inline Tensor loss_total(const PredictedMaps& pred, const GroundTruthMaps& gt, double lambda = kDefaultLambda) {
    return combine_losses(loss_keypoint(pred, gt), loss_orthogonal(pred, gt), lambda);
}

// Everything the trainable pipeline needs besides its parameters.
struct ModelConfig {
    BackboneConfig backbone;
    ConsensusConfig consensus;
    double sigma = kDefaultSigma;
    double lambda = kDefaultLambda;
};

inline void init_model_params(ParamStore& params, const ModelConfig& cfg, std::uint64_t seed,
                              ConsensusInit nc_init = ConsensusInit::uniform) {
    init_backbone_params(params, cfg.backbone, seed);
    init_consensus_params(params, cfg.consensus, seed + 1, nc_init);
}

struct TrainingSample {
    NdArray image_a;
    NdArray image_b;
    KeypointAnnotation annotation;
};

inline Tensor sample_loss(const TrainingSample& sample, const ParamStore& params, const ModelConfig& cfg,
                          const Trunk& trunk) {
    const DualFeatures fa = extract_dual(Tensor(sample.image_a), params, cfg.backbone, trunk);
    const DualFeatures fb = extract_dual(Tensor(sample.image_b), params, cfg.backbone, trunk);
    const CorrTensor4D cbar = refine(corr4d(fa.coarse, fb.coarse), params, cfg.consensus);
    const GroundTruthMaps gt = build_gt(sample.annotation, fa.fine, fb.fine, cfg.sigma);
    return loss_total(predicted_maps(fa, fb, cbar, sample.annotation), gt, cfg.lambda);
}

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double learning_rate = kDefaultLearningRate;
    std::size_t halve_every = 0;  // steps; 0 keeps the rate fixed
    double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

    double rate_at(std::size_t step) const {
        if (halve_every == 0) return learning_rate;
        return learning_rate * std::ldexp(1.0, -int(step / halve_every));
    }

    void validate() const {
        if (!(learning_rate >= 0.0)) throw ConfigError("optimizer: learning rate must be nonnegative");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("optimizer: betas must lie in [0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be positive");
    }
};

inline OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    // Applies one update from the accumulated gradients.
    void step(ParamStore& params) {
        const double lr = cfg_.rate_at(steps_);
        ++steps_;
        if (cfg_.kind == OptimizerKind::sgd) {
            for (auto& [name, p] : params) {
                const NdArray& g = p.grad();
                NdArray& v = p.leaf_value();
                for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
            }
            return;
        }
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(steps_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, double(steps_));
        for (auto& [name, p] : params) {
            auto [it, fresh] = moments_.try_emplace(name);
            if (fresh) it->second = {NdArray(p.dims(), 0.0), NdArray(p.dims(), 0.0)};
            auto& [m, s] = it->second;
            const NdArray& g = p.grad();
            NdArray& v = p.leaf_value();
            for (std::size_t i = 0; i < v.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                s[i] = cfg_.beta2 * s[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                v[i] -= lr * (m[i] / c1) / (std::sqrt(s[i] / c2) + cfg_.epsilon);
            }
        }
    }

    std::size_t steps_taken() const { return steps_; }

private:
    OptimizerConfig cfg_;
    std::size_t steps_ = 0;
    std::map<std::string, std::pair<NdArray, NdArray>> moments_;
};

using SampleSource = std::function<TrainingSample(std::size_t step)>;
using StepObserver = std::function<void(std::size_t step, double loss)>;

// Runs `steps` updates and returns the loss measured before each update.
inline std::vector<double> train_toy(const SampleSource& samples, ParamStore& params, const ModelConfig& cfg,
                                     std::size_t steps, const OptimizerConfig& opt_cfg,
                                     const StepObserver& observer = {}) {
    const Trunk trunk(cfg.backbone);
    Optimizer opt(opt_cfg);
    std::vector<double> trace;
    trace.reserve(steps);
    for (std::size_t step = 0; step < steps; ++step) {
        const TrainingSample sample = samples(step);
        params.zero_grad();
        const Tensor loss = sample_loss(sample, params, cfg, trunk);
        const double value = loss.item();
        if (!std::isfinite(value)) throw TrainingError("non-finite loss at step " + std::to_string(step));
        backward(loss, params);
        for (const auto& [name, p] : params)
            for (double g : p.grad().values())
                if (!std::isfinite(g))
                    throw TrainingError("non-finite gradient for '" + name + "' at step " + std::to_string(step));
        trace.push_back(value);
        if (observer) observer(step, value);
        opt.step(params);
    }
    return trace;
}

// Text form: "x_a y_a x_b y_b" per line; '#' starts a comment line.
// Coordinates are written with round-trip precision.
inline std::string format_annotations(const KeypointAnnotation& ann) {
    std::string out;
    char line[128];
    for (const auto& [a, b] : ann.pairs) {
        std::snprintf(line, sizeof line, "%.17g %.17g %.17g %.17g\n", a.x, a.y, b.x, b.y);
        out += line;
    }
    return out;
}

inline KeypointAnnotation parse_annotations(const std::string& text) {
    KeypointAnnotation ann;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        PixelPoint a, b;
        std::string extra;
        if (!(ls >> a.x >> a.y >> b.x >> b.y) || (ls >> extra))
            throw FormatError("annotation line " + std::to_string(line_no) + ": expected 4 numbers");
        ann.pairs.emplace_back(a, b);
    }
    return ann;
}

inline void write_annotations(const std::string& path, const KeypointAnnotation& ann) {
    write_file_bytes(path, format_annotations(ann));
}

inline KeypointAnnotation read_annotations(const std::string& path) {
    return parse_annotations(read_file_bytes(path));
}

} // namespace dualrc
