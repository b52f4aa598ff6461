#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "dualrc/container.hpp"
#include "dualrc/matcher.hpp"

namespace dualrc {

inline constexpr double kHomographyEpsilon = 1e-12;

class Homography {
public:
    using Matrix = std::array<double, 9>;  // row-major

    Homography() : Homography(Matrix{1, 0, 0, 0, 1, 0, 0, 0, 1}) {}

    // Scales so that H[2][2] == 1 when it is nonzero; rejects singular input.
    explicit Homography(Matrix m) : m_(m) {
        for (double v : m_)
            if (!std::isfinite(v)) throw DegenerateError("homography has non-finite entries");
        if (m_[8] != 0.0) {
            const double s = m_[8];
            for (double& v : m_) v /= s;
        }
        if (std::abs(determinant()) <= kHomographyEpsilon) throw DegenerateError("homography is singular");
    }

    static Homography translation(double tx, double ty) { return Homography({1, 0, tx, 0, 1, ty, 0, 0, 1}); }

    const Matrix& matrix() const { return m_; }
    double operator()(std::size_t r, std::size_t c) const { return m_[r * 3 + c]; }

    double determinant() const {
        const Matrix& a = m_;
        return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
               a[2] * (a[3] * a[7] - a[4] * a[6]);
    }

    Homography inverse() const {
        const Matrix& a = m_;
        const double d = determinant();
        Matrix inv{(a[4] * a[8] - a[5] * a[7]) / d, (a[2] * a[7] - a[1] * a[8]) / d, (a[1] * a[5] - a[2] * a[4]) / d,
                   (a[5] * a[6] - a[3] * a[8]) / d, (a[0] * a[8] - a[2] * a[6]) / d, (a[2] * a[3] - a[0] * a[5]) / d,
                   (a[3] * a[7] - a[4] * a[6]) / d, (a[1] * a[6] - a[0] * a[7]) / d, (a[0] * a[4] - a[1] * a[3]) / d};
        return Homography(inv);
    }

private:
    Matrix m_;
};

inline PixelPoint warp(const Homography& h, const PixelPoint& p) {
    const double wx = h(0, 0) * p.x + h(0, 1) * p.y + h(0, 2);
    const double wy = h(1, 0) * p.x + h(1, 1) * p.y + h(1, 2);
    const double wz = h(2, 0) * p.x + h(2, 1) * p.y + h(2, 2);
    if (std::abs(wz) <= kHomographyEpsilon)
        throw DegenerateError("point (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                              ") maps to infinity");
    return {wx / wz, wy / wz};
}

// Nine whitespace-separated numbers, row-major.
inline Homography parse_homography(const std::string& text) {
    std::istringstream in(text);
    Homography::Matrix m{};
    for (double& v : m)
        if (!(in >> v)) throw FormatError("homography: expected 9 numbers");
    std::string extra;
    if (in >> extra) throw FormatError("homography: trailing content '" + extra + "'");
    return Homography(m);
}

inline Homography load_homography(const std::string& path) { return parse_homography(read_file_bytes(path)); }

inline std::string format_homography(const Homography& h) {
    std::string out;
    char buf[40];
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 3; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", h(r, c));
            out += buf;
            out += c < 2 ? ' ' : '\n';
        }
    }
    return out;
}

inline void save_homography(const std::string& path, const Homography& h) {
    write_file_bytes(path, format_homography(h));
}

inline double reprojection_error(const Homography& h, const Match& m) {
    const PixelPoint w = warp(h, m.src);
    return std::hypot(w.x - m.dst.x, w.y - m.dst.y);
}

// Fraction of matches whose warped source lies within t pixels (inclusive)
// of the matched target.
inline double mma(const MatchSet& set, const Homography& h, double t) {
    if (!(t >= 0.0)) throw ConfigError("mma: threshold must be nonnegative");
    if (set.empty()) throw EmptyInputError("mma: match set is empty");
    std::size_t correct = 0;
    for (const auto& m : set.matches) correct += reprojection_error(h, m) <= t;
    return double(correct) / double(set.size());
}

// The k highest-scoring matches, score-descending; ties keep input order.
inline MatchSet top_k(const MatchSet& set, std::size_t k) {
    if (k < 1) throw ConfigError("top_k: k must be >= 1");
    MatchSet out = set;
    std::stable_sort(out.matches.begin(), out.matches.end(),
                     [](const Match& a, const Match& b) { return a.score > b.score; });
    if (out.matches.size() > k) out.matches.resize(k);
    return out;
}

struct MmaCurve {
    std::vector<double> thresholds;
    std::vector<double> values;
};

inline std::vector<double> default_thresholds() { return {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}; }

inline MmaCurve mma_curve(const MatchSet& set, const Homography& h,
                          const std::vector<double>& thresholds = default_thresholds()) {
    if (thresholds.empty()) throw ConfigError("mma_curve: no thresholds");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (!(thresholds[i] > thresholds[i - 1])) throw ConfigError("mma_curve: thresholds must increase strictly");
    MmaCurve curve{thresholds, {}};
    for (double t : thresholds) curve.values.push_back(mma(set, h, t));
    return curve;
}

inline std::string format_curve_csv(const MmaCurve& curve) {
    std::string out = "threshold,mma\n";
    char line[64];
    for (std::size_t i = 0; i < curve.values.size(); ++i) {
        std::snprintf(line, sizeof line, "%.6g,%.6g\n", curve.thresholds[i], curve.values[i]);
        out += line;
    }
    return out;
}

inline void write_curve_csv(const std::string& path, const MmaCurve& curve) {
    write_file_bytes(path, format_curve_csv(curve));
}

} // namespace dualrc
