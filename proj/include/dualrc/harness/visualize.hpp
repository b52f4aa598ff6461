#pragma once

// Side-by-side rendering of a match set: image A on the left, image B on the
// right, one line per match with marked endpoints. With a homography, matches
// within the threshold are green and the rest red; without one, yellow.

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "dualrc/evaluation.hpp"
#include "dualrc/image_io.hpp"

namespace dualrc::harness {

inline constexpr double kVisualizeThreshold = 3.0;

using Rgb = std::array<double, 3>;
inline constexpr Rgb kCorrectColor{0.0, 1.0, 0.0};
inline constexpr Rgb kWrongColor{1.0, 0.0, 0.0};
inline constexpr Rgb kUnknownColor{1.0, 1.0, 0.0};

namespace detail {

inline void put_pixel(NdArray& canvas, long x, long y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= long(canvas.dim(2)) || y >= long(canvas.dim(1))) return;
    for (std::size_t ch = 0; ch < 3; ++ch) canvas.at(ch, std::size_t(y), std::size_t(x)) = c[ch];
}

inline void draw_line(NdArray& canvas, double x0, double y0, double x1, double y1, const Rgb& c) {
    const long steps = std::max(1L, long(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))));
    for (long s = 0; s <= steps; ++s) {
        const double t = double(s) / double(steps);
        put_pixel(canvas, std::lround(x0 + t * (x1 - x0)), std::lround(y0 + t * (y1 - y0)), c);
    }
}

inline void draw_marker(NdArray& canvas, double x, double y, const Rgb& c) {
    const long cx = std::lround(x), cy = std::lround(y);
    for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) put_pixel(canvas, cx + dx, cy + dy, c);
}

} // namespace detail

// Colour of one match: correct/wrong under `h`, unknown without it.
inline Rgb match_color(const Match& m, const std::optional<Homography>& h, double threshold) {
    if (!h) return kUnknownColor;
    return reprojection_error(*h, m) <= threshold ? kCorrectColor : kWrongColor;
}

// [3, max(Ha,Hb), Wa+Wb] in [0,1].
inline NdArray render_matches(const NdArray& image_a, const NdArray& image_b, const MatchSet& matches,
                              const std::optional<Homography>& h, double threshold = kVisualizeThreshold) {
    if (image_a.ndim() != 3 || image_a.dim(0) != 1 || image_b.ndim() != 3 || image_b.dim(0) != 1)
        throw ShapeError("visualize: images must be [1,H,W]");
    const std::size_t ha = image_a.dim(1), wa = image_a.dim(2), hb = image_b.dim(1), wb = image_b.dim(2);
    NdArray canvas(Dims{3, std::max(ha, hb), wa + wb}, 0.0);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t y = 0; y < ha; ++y)
            for (std::size_t x = 0; x < wa; ++x) canvas.at(ch, y, x) = image_a.at(0, y, x);
        for (std::size_t y = 0; y < hb; ++y)
            for (std::size_t x = 0; x < wb; ++x) canvas.at(ch, y, wa + x) = image_b.at(0, y, x);
    }
    const double off = double(wa);
    for (const auto& m : matches.matches) {
        const Rgb c = match_color(m, h, threshold);
        detail::draw_line(canvas, m.src.x, m.src.y, m.dst.x + off, m.dst.y, c);
    }
    for (const auto& m : matches.matches) {
        const Rgb c = match_color(m, h, threshold);
        detail::draw_marker(canvas, m.src.x, m.src.y, c);
        detail::draw_marker(canvas, m.dst.x + off, m.dst.y, c);
    }
    return canvas;
}

inline void write_visualization(const std::string& path, const NdArray& image_a, const NdArray& image_b,
                                const MatchSet& matches, const std::optional<Homography>& h,
                                double threshold = kVisualizeThreshold) {
    write_image(path, render_matches(image_a, image_b, matches, h, threshold));
}

} // namespace dualrc::harness
