#pragma once

// Binary tensor container shared by feature and weight files.
//
//   "DRCT" | u32 version (=1) | u32 count
//   per entry: u32 name_len | name bytes (UTF-8) | u32 ndim | ndim x u32 dims
//              | float32 payload, row-major
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "dualrc/error.hpp"
#include "dualrc/ndarray.hpp"
#include "dualrc/tensor.hpp"

namespace dualrc {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'D', 'R', 'C', 'T'};

using NamedArrays = std::vector<std::pair<std::string, NdArray>>;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
}

class ByteReader {
public:
    explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        pos_ += 4;
        return v;
    }
    std::string text(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (remaining() < n) throw FormatError("tensor container: truncated data");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode_container(const NamedArrays& entries) {
    std::string out(kContainerMagic, 4);
    detail::put_u32(out, kContainerVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, array] : entries) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(array.ndim()));
        for (auto d : array.dims()) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : array.values())
            detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    return out;
}

inline NamedArrays decode_container(const std::string& bytes) {
    detail::ByteReader in(bytes);
    if (in.text(4) != std::string(kContainerMagic, 4))
        throw FormatError("tensor container: bad magic");
    const std::uint32_t version = in.u32();
    if (version != kContainerVersion)
        throw FormatError("tensor container: unsupported version " + std::to_string(version));
    const std::uint32_t count = in.u32();
    NamedArrays entries;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::uint32_t name_len = in.u32();
        std::string name = in.text(name_len);
        const std::uint32_t ndim = in.u32();
        if (ndim > 16) throw FormatError("tensor container: implausible rank for '" + name + "'");
        Dims dims(ndim);
        std::size_t elements = 1;
        for (auto& d : dims) {
            d = in.u32();
            elements *= d;
            if (elements > in.remaining()) throw FormatError("tensor container: truncated payload");
        }
        if (elements * 4 > in.remaining())
            throw FormatError("tensor container: truncated payload for '" + name + "'");
        NdArray array(dims);
        for (auto& v : array.values()) v = std::bit_cast<float>(in.u32());
        entries.emplace_back(std::move(name), std::move(array));
    }
    if (in.remaining() != 0) throw FormatError("tensor container: trailing bytes");
    return entries;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void save_container(const std::string& path, const NamedArrays& entries) {
    write_file_bytes(path, encode_container(entries));
}

inline NamedArrays load_container(const std::string& path) {
    return decode_container(read_file_bytes(path));
}

inline void save_params(const std::string& path, const ParamStore& params) {
    NamedArrays entries;
    for (const auto& [name, t] : params) entries.emplace_back(name, t.value());
    save_container(path, entries);
}

inline ParamStore load_params(const std::string& path) {
    ParamStore params;
    for (auto& [name, array] : load_container(path)) params.add(name, std::move(array));
    return params;
}

} // namespace dualrc
