#pragma once

// Dual-resolution feature extraction: a small strided conv trunk, lateral
// 1x1 convs aligning every pyramid level to one channel width, and one of
// five fusion topologies producing the fine map. The coarse map is the
// lateral projection of the stride-(4 x base) level, so fine/coarse = 4.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dualrc/features.hpp"
#include "dualrc/ops.hpp"

namespace dualrc {

inline constexpr int kDualRatio = 4;

enum class FusionVariant { a, b, c, d, e };

inline FusionVariant parse_variant(const std::string& tag) {
    if (tag == "a") return FusionVariant::a;
    if (tag == "b") return FusionVariant::b;
    if (tag == "c") return FusionVariant::c;
    if (tag == "d") return FusionVariant::d;
    if (tag == "e") return FusionVariant::e;
    throw ConfigError("unknown fusion variant '" + tag + "' (expected a-e)");
}

inline std::string variant_name(FusionVariant v) {
    return std::string(1, static_cast<char>('a' + static_cast<int>(v)));
}

struct BackboneConfig {
    FusionVariant variant = FusionVariant::a;
    int base_stride = 2;  // stride of the fine level
    std::size_t image_channels = 1;
    std::vector<std::size_t> trunk_channels{8, 16, 32, 32};
    std::size_t lateral_channels = 32;
    std::uint64_t trunk_seed = 17;

    int levels() const { return variant == FusionVariant::e ? 4 : 3; }
    int fine_stride() const { return base_stride; }
    int coarse_stride() const { return base_stride * kDualRatio; }
    // Image extents must be multiples of the deepest level's stride.
    int required_divisor() const { return base_stride << (levels() - 1); }

    void validate() const {
        if (base_stride < 1) throw ConfigError("backbone: base_stride must be >= 1");
        if (trunk_channels.size() < static_cast<std::size_t>(levels()))
            throw ConfigError("backbone: need one trunk width per pyramid level");
        if (lateral_channels < 1 || image_channels < 1)
            throw ConfigError("backbone: channel counts must be >= 1");
    }
};

struct DualShape {
    std::size_t fine_h, fine_w, coarse_h, coarse_w;
};

inline DualShape dual_shape(std::size_t image_h, std::size_t image_w, const BackboneConfig& cfg) {
    cfg.validate();
    const auto div = static_cast<std::size_t>(cfg.required_divisor());
    if (image_h == 0 || image_w == 0 || image_h % div || image_w % div)
        throw ConfigError("backbone: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                          " not divisible by " + std::to_string(div));
    const auto fs = static_cast<std::size_t>(cfg.fine_stride());
    const auto cs = static_cast<std::size_t>(cfg.coarse_stride());
    return {image_h / fs, image_w / fs, image_h / cs, image_w / cs};
}

// Uniform in +-sqrt(6 / fan_in).
inline NdArray he_uniform(Dims dims, std::mt19937_64& rng) {
    std::size_t fan_in = 1;
    for (std::size_t a = 1; a < dims.size(); ++a) fan_in *= dims[a];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    NdArray out(std::move(dims));
    for (auto& v : out.values()) v = dist(rng);
    return out;
}

// Frozen trunk weights, regenerated deterministically from the config seed.
struct Trunk {
    std::vector<Tensor> kernels;  // level l: [c_l, c_{l-1}, 3, 3]

    explicit Trunk(const BackboneConfig& cfg) {
        cfg.validate();
        std::mt19937_64 rng(cfg.trunk_seed);
        std::size_t in = cfg.image_channels;
        for (int l = 0; l < cfg.levels(); ++l) {
            const std::size_t out = cfg.trunk_channels[static_cast<std::size_t>(l)];
            kernels.emplace_back(he_uniform({out, in, 3, 3}, rng));
            in = out;
        }
    }
};

inline std::string lateral_name(int level) { return "fpn.lateral" + std::to_string(level) + ".weight"; }
inline std::string fuse_name(int level) { return "fpn.fuse" + std::to_string(level) + ".weight"; }
inline std::string pre_name(int level) { return "fpn.pre" + std::to_string(level) + ".weight"; }

// Names of the trainable fusion parameters the variant needs, with their
// shapes. Levels are 1-based from the finest.
inline std::vector<std::pair<std::string, Dims>> backbone_param_shapes(const BackboneConfig& cfg) {
    cfg.validate();
    const std::size_t L = cfg.lateral_channels;
    std::vector<std::pair<std::string, Dims>> shapes;
    auto lateral = [&](int level) {
        shapes.emplace_back(lateral_name(level), Dims{L, cfg.trunk_channels[level - 1], 1, 1});
    };
    auto conv3 = [&](std::string name) { shapes.emplace_back(std::move(name), Dims{L, L, 3, 3}); };
    switch (cfg.variant) {
    case FusionVariant::a:
        lateral(1), lateral(2), lateral(3);
        conv3(fuse_name(2)), conv3(fuse_name(1));
        break;
    case FusionVariant::b:
        lateral(1), lateral(3);
        conv3(fuse_name(1));
        break;
    case FusionVariant::c:
        lateral(1), lateral(2), lateral(3);
        conv3(pre_name(3)), conv3(fuse_name(2)), conv3(pre_name(2)), conv3(fuse_name(1));
        break;
    case FusionVariant::d:
        lateral(1), lateral(3);
        conv3(pre_name(3)), conv3(fuse_name(1));
        break;
    case FusionVariant::e:
        lateral(1), lateral(2), lateral(3), lateral(4);
        conv3(fuse_name(3)), conv3(fuse_name(2)), conv3(fuse_name(1));
        break;
    }
    return shapes;
}

inline void init_backbone_params(ParamStore& params, const BackboneConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& [name, dims] : backbone_param_shapes(cfg)) params.add(name, he_uniform(dims, rng));
}

// Trunk feature maps at strides base, 2 base, 4 base (, 8 base).
inline std::vector<Tensor> trunk_forward(const Tensor& image, const Trunk& trunk, const BackboneConfig& cfg) {
    std::vector<Tensor> levels;
    Tensor x = image;
    for (std::size_t l = 0; l < trunk.kernels.size(); ++l) {
        x = relu(conv2d(x, trunk.kernels[l], 1));
        x = avg_pool2d(x, l == 0 ? cfg.base_stride : 2);
        levels.push_back(x);
    }
    return levels;
}

inline DualFeatures extract_dual(const Tensor& image, const ParamStore& params, const BackboneConfig& cfg,
                                 const Trunk& trunk) {
    if (image.dims().size() != 3 || image.dims()[0] != cfg.image_channels)
        throw ShapeError("extract_dual: image must be [" + std::to_string(cfg.image_channels) +
                         ",H,W], got " + dims_to_string(image.dims()));
    dual_shape(image.dims()[1], image.dims()[2], cfg);
    if (trunk.kernels.size() != static_cast<std::size_t>(cfg.levels()))
        throw ConfigError("extract_dual: trunk depth does not match the variant");

    const auto trunk_out = trunk_forward(image, trunk, cfg);
    auto lat = [&](int level) { return conv2d(trunk_out[level - 1], params.get(lateral_name(level)), 0); };
    auto conv3 = [&](const Tensor& x, const std::string& name) { return conv2d(x, params.get(name), 1); };

    Tensor top = lat(3);
    Tensor fine;
    switch (cfg.variant) {
    case FusionVariant::a: {
        Tensor mid = conv3(add(lat(2), upsample_nearest(top, 2)), fuse_name(2));
        fine = conv3(add(lat(1), upsample_nearest(mid, 2)), fuse_name(1));
        break;
    }
    case FusionVariant::b:
        fine = conv3(add(lat(1), upsample_nearest(top, 4)), fuse_name(1));
        break;
    case FusionVariant::c: {
        Tensor mid = conv3(add(lat(2), upsample_nearest(conv3(top, pre_name(3)), 2)), fuse_name(2));
        fine = conv3(add(lat(1), upsample_nearest(conv3(mid, pre_name(2)), 2)), fuse_name(1));
        break;
    }
    case FusionVariant::d:
        fine = conv3(add(lat(1), upsample_nearest(conv3(top, pre_name(3)), 4)), fuse_name(1));
        break;
    case FusionVariant::e: {
        Tensor third = conv3(add(top, upsample_nearest(lat(4), 2)), fuse_name(3));
        Tensor mid = conv3(add(lat(2), upsample_nearest(third, 2)), fuse_name(2));
        fine = conv3(add(lat(1), upsample_nearest(mid, 2)), fuse_name(1));
        break;
    }
    }
    return DualFeatures(FeatureMap(fine, cfg.fine_stride()), FeatureMap(top, cfg.coarse_stride()), kDualRatio);
}

// Training-free descriptor: the image is block-averaged to the requested
// stride, then every cell's patch x patch neighbourhood is vectorised,
// centred on the mean of its in-image samples and L2-normalised. Samples that
// fall outside the image (zero padding) contribute 0. A 1x1 patch is not
// centred, so it yields the normalised intensity.
inline FeatureMap patch_descriptor_features(const NdArray& image, int patch, int stride) {
    if (patch < 1 || patch % 2 == 0) throw ConfigError("patch_descriptor_features: patch must be odd");
    if (image.ndim() != 3 || image.dim(0) != 1)
        throw ShapeError("patch_descriptor_features: image must be [1,H,W]");
    const NdArray pooled = avg_pool2d(Tensor(image), stride).value();
    const std::size_t h = pooled.dim(1), w = pooled.dim(2);
    const auto p = static_cast<std::size_t>(patch);
    const long half = patch / 2;
    NdArray desc(Dims{p * p, h, w}, 0.0);
    std::vector<double> vec(p * p);
    std::vector<bool> inside(p * p);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double mean = 0.0;
            std::size_t count = 0;
            for (std::size_t dy = 0; dy < p; ++dy)
                for (std::size_t dx = 0; dx < p; ++dx) {
                    const long sy = static_cast<long>(y + dy) - half, sx = static_cast<long>(x + dx) - half;
                    const bool in = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
                    const std::size_t c = dy * p + dx;
                    inside[c] = in;
                    vec[c] = in ? pooled.at(0, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : 0.0;
                    if (in) {
                        mean += vec[c];
                        ++count;
                    }
                }
            if (p > 1) {
                mean /= static_cast<double>(count);
                for (std::size_t c = 0; c < p * p; ++c)
                    if (inside[c]) vec[c] -= mean;
            }
            for (std::size_t c = 0; c < p * p; ++c) desc.at(c, y, x) = vec[c];
        }
    return FeatureMap(l2_normalize_channels(Tensor(desc)), stride);
}

inline DualFeatures patch_dual_features(const NdArray& image, int patch, int fine_stride) {
    return DualFeatures(patch_descriptor_features(image, patch, fine_stride),
                        patch_descriptor_features(image, patch, fine_stride * kDualRatio), kDualRatio);
}

} // namespace dualrc
