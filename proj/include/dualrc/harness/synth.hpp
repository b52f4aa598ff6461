#pragma once

// Seeded synthetic image pairs: smoothed white noise warped by a homography,
// with ground-truth correspondences sampled where both views overlap.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>

#include "dualrc/evaluation.hpp"
#include "dualrc/image_io.hpp"
#include "dualrc/training.hpp"

namespace dualrc::harness {

enum class WarpKind { identity, translation, affine, projective };

inline WarpKind parse_warp(const std::string& name) {
    if (name == "identity") return WarpKind::identity;
    if (name == "translation") return WarpKind::translation;
    if (name == "affine") return WarpKind::affine;
    if (name == "projective") return WarpKind::projective;
    throw ConfigError("unknown warp '" + name + "' (expected identity, translation, affine or projective)");
}

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t size = 64;
    WarpKind warp = WarpKind::translation;
    std::size_t annotations = 128;
    std::optional<double> tx, ty;  // fixed translation instead of a random one
    int blur_radius = 2;
};

struct SyntheticScene {
    NdArray image_a;  // [1, size, size]
    NdArray image_b;
    Homography h;     // A pixels -> B pixels
    KeypointAnnotation annotations;
};

namespace detail {

// Box-blurred uniform noise on a canvas of side `side`.
inline NdArray smoothed_noise(std::size_t side, int radius, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    NdArray noise({side, side});
    for (auto& v : noise.values()) v = u(rng);
    NdArray out({side, side});
    const long r = radius, n = long(side);
    for (long y = 0; y < n; ++y)
        for (long x = 0; x < n; ++x) {
            double s = 0.0;
            int c = 0;
            for (long dy = -r; dy <= r; ++dy)
                for (long dx = -r; dx <= r; ++dx) {
                    const long sy = y + dy, sx = x + dx;
                    if (sy < 0 || sx < 0 || sy >= n || sx >= n) continue;
                    s += noise.at(std::size_t(sy), std::size_t(sx));
                    ++c;
                }
            out.at(std::size_t(y), std::size_t(x)) = s / c;
        }
    return out;
}

// Bilinear lookup with edge clamping; exact at integer positions.
inline double sample_bilinear(const NdArray& canvas, double x, double y) {
    const double max_c = double(canvas.dim(0) - 1);
    x = std::clamp(x, 0.0, max_c);
    y = std::clamp(y, 0.0, max_c);
    const auto x0 = std::size_t(std::floor(x)), y0 = std::size_t(std::floor(y));
    const std::size_t x1 = std::min(x0 + 1, canvas.dim(0) - 1), y1 = std::min(y0 + 1, canvas.dim(0) - 1);
    const double fx = x - double(x0), fy = y - double(y0);
    return canvas.at(y0, x0) * (1 - fx) * (1 - fy) + canvas.at(y0, x1) * fx * (1 - fy) +
           canvas.at(y1, x0) * (1 - fx) * fy + canvas.at(y1, x1) * fx * fy;
}

// Homography of the requested kind acting about the image centre.
inline Homography random_homography(const SynthConfig& cfg, std::mt19937_64& rng) {
    const double s = double(cfg.size), c = (s - 1.0) / 2.0;
    std::uniform_real_distribution<double> shift(-s / 8.0, s / 8.0);
    switch (cfg.warp) {
    case WarpKind::identity:
        return Homography();
    case WarpKind::translation: {
        // whole-pixel shifts, so image B is an exact copy of shifted texture
        const long bound = long(cfg.size / 8);
        std::uniform_int_distribution<long> step(-bound, bound);
        const double tx = double(step(rng)), ty = double(step(rng));
        return Homography::translation(cfg.tx.value_or(tx), cfg.ty.value_or(ty));
    }
    case WarpKind::affine:
    case WarpKind::projective: {
        std::uniform_real_distribution<double> angle(-10.0, 10.0), scale(0.9, 1.1), shear(-0.05, 0.05);
        const double a = angle(rng) * std::numbers::pi / 180.0, k = scale(rng), sh = shear(rng);
        const double tx = shift(rng) / 2.0, ty = shift(rng) / 2.0;
        double p0 = 0.0, p1 = 0.0;
        if (cfg.warp == WarpKind::projective) {
            std::uniform_real_distribution<double> persp(-0.1 / s, 0.1 / s);
            p0 = persp(rng);
            p1 = persp(rng);
        }
        // M = [k R + shear], applied to centred coordinates, then shifted back
        const double m00 = k * std::cos(a), m01 = -k * std::sin(a) + sh;
        const double m10 = k * std::sin(a), m11 = k * std::cos(a);
        // H = T(c + t) * [[m00 m01 0][m10 m11 0][p0 p1 1]] * T(-c)
        const double h20 = p0, h21 = p1, h22 = 1.0 - p0 * c - p1 * c;
        const double ox = c + tx, oy = c + ty;
        const Homography::Matrix h{m00 + ox * h20, m01 + ox * h21, -m00 * c - m01 * c + ox * h22,
                                   m10 + oy * h20, m11 + oy * h21, -m10 * c - m11 * c + oy * h22,
                                   h20,            h21,            h22};
        return Homography(h);
    }
    }
    throw ConfigError("unhandled warp kind");
}

} // namespace detail

inline SyntheticScene synth(const SynthConfig& cfg) {
    if (cfg.size < 4) throw ConfigError("synth: size must be >= 4");
    std::mt19937_64 rng(cfg.seed);
    const std::size_t margin = cfg.size / 2;
    const NdArray canvas = detail::smoothed_noise(cfg.size + 2 * margin, cfg.blur_radius, rng);
    SyntheticScene scene{NdArray({1, cfg.size, cfg.size}), NdArray({1, cfg.size, cfg.size}),
                         detail::random_homography(cfg, rng), {}};
    const double off = double(margin);
    for (std::size_t y = 0; y < cfg.size; ++y)
        for (std::size_t x = 0; x < cfg.size; ++x) scene.image_a.at(0, y, x) = canvas.at(y + margin, x + margin);

    const Homography inv = scene.h.inverse();
    for (std::size_t y = 0; y < cfg.size; ++y)
        for (std::size_t x = 0; x < cfg.size; ++x) {
            const PixelPoint src = warp(inv, {double(x), double(y)});
            scene.image_b.at(0, y, x) = detail::sample_bilinear(canvas, src.x + off, src.y + off);
        }

    const double last = double(cfg.size - 1);
    std::uniform_real_distribution<double> coord(0.0, last);
    const std::size_t max_tries = 1000 * std::max<std::size_t>(cfg.annotations, 1);
    std::size_t tries = 0;
    while (scene.annotations.size() < cfg.annotations) {
        if (++tries > max_tries)
            throw GenerationError("synth: overlap too small to place " + std::to_string(cfg.annotations) +
                                  " annotations");
        const PixelPoint a{coord(rng), coord(rng)};
        const PixelPoint b = warp(scene.h, a);
        if (b.x < 0.0 || b.y < 0.0 || b.x > last || b.y > last) continue;
        scene.annotations.pairs.emplace_back(a, b);
    }
    return scene;
}

// a.pgm, b.pgm, h.txt and annotations.txt inside `dir`.
inline void write_scene(const std::string& dir, const SyntheticScene& scene) {
    write_image(dir + "/a.pgm", scene.image_a);
    write_image(dir + "/b.pgm", scene.image_b);
    save_homography(dir + "/h.txt", scene.h);
    write_annotations(dir + "/annotations.txt", scene.annotations);
}

} // namespace dualrc::harness
