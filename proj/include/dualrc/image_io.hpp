#pragma once

// Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "dualrc/container.hpp"
#include "dualrc/error.hpp"
#include "dualrc/ndarray.hpp"

namespace dualrc {

namespace detail {

inline std::size_t pnm_header_int(const std::string& bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
            ++pos;
        } else {
            break;
        }
    }
    std::size_t start = pos;
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
        value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
        if (value > (1u << 24)) throw FormatError("pnm: header value too large");
        ++pos;
    }
    if (pos == start) throw FormatError("pnm: malformed header");
    return value;
}

inline unsigned char to_byte(double v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

} // namespace detail

// Grayscale image [1,H,W] with values in [0,1]. P6 input is converted with
// 0.299 R + 0.587 G + 0.114 B.
inline NdArray decode_pnm(const std::string& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw FormatError("pnm: expected binary P5 or P6 image");
    const bool color = bytes[1] == '6';
    std::size_t pos = 2;
    const std::size_t width = detail::pnm_header_int(bytes, pos);
    const std::size_t height = detail::pnm_header_int(bytes, pos);
    const std::size_t maxval = detail::pnm_header_int(bytes, pos);
    if (width == 0 || height == 0) throw FormatError("pnm: empty image");
    if (maxval == 0 || maxval > 255) throw FormatError("pnm: only 8-bit images are supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw FormatError("pnm: malformed header");
    ++pos;
    const std::size_t channels = color ? 3 : 1;
    if (bytes.size() - pos < width * height * channels) throw FormatError("pnm: truncated pixel data");
    NdArray img(Dims{1, height, width});
    const double scale = 1.0 / static_cast<double>(maxval);
    for (std::size_t i = 0; i < width * height; ++i) {
        const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * channels);
        img[i] = color ? (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]) * scale : px[0] * scale;
    }
    return img;
}

inline NdArray read_image(const std::string& path) { return decode_pnm(read_file_bytes(path)); }

// [1,H,W] -> P5, [3,H,W] -> P6. Values clamped to [0,1] and rounded.
inline std::string encode_pnm(const NdArray& img) {
    if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw ShapeError("encode_pnm: expected [1,H,W] or [3,H,W], got " + dims_to_string(img.dims()));
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::string out = (c == 1 ? "P5\n" : "P6\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + c * h * w);
    for (std::size_t p = 0; p < h * w; ++p)
        for (std::size_t ch = 0; ch < c; ++ch)
            out.push_back(static_cast<char>(detail::to_byte(img[ch * h * w + p])));
    return out;
}

inline void write_image(const std::string& path, const NdArray& img) {
    write_file_bytes(path, encode_pnm(img));
}

} // namespace dualrc
