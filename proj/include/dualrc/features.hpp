#pragma once

#include <cmath>
#include <string>

#include "dualrc/container.hpp"
#include "dualrc/error.hpp"
#include "dualrc/tensor.hpp"

namespace dualrc {

// Image-space coordinate of the centre of feature cell `index` along one
// axis: ((index + 0.5) * stride - 0.5).
inline double cell_center(std::size_t index, int stride) {
    return (static_cast<double>(index) + 0.5) * stride - 0.5;
}

// Nearest feature cell to an image coordinate (may fall outside the grid).
inline long nearest_cell(double pixel, int stride) {
    return std::lround((pixel + 0.5) / stride - 0.5);
}

// C x H x W grid of feature vectors with an image-space stride.
struct FeatureMap {
    Tensor data;
    int stride = 1;

    FeatureMap() = default;
    FeatureMap(Tensor d, int s) : data(std::move(d)), stride(s) { validate(); }

    std::size_t channels() const { return data.dims()[0]; }
    std::size_t height() const { return data.dims()[1]; }
    std::size_t width() const { return data.dims()[2]; }
    std::size_t cells() const { return height() * width(); }

    void validate() const {
        if (data.dims().size() != 3)
            throw ShapeError("FeatureMap: data must be [C,H,W], got " + dims_to_string(data.dims()));
        if (stride < 1) throw ConfigError("FeatureMap: stride must be >= 1");
        for (auto d : data.dims())
            if (d < 1) throw ShapeError("FeatureMap: empty extent");
    }
};

// Interlocked fine/coarse pair with fine = ratio x coarse on both axes.
struct DualFeatures {
    FeatureMap fine;
    FeatureMap coarse;
    int ratio = 4;

    DualFeatures() = default;
    DualFeatures(FeatureMap f, FeatureMap c, int r) : fine(std::move(f)), coarse(std::move(c)), ratio(r) {
        validate();
    }

    void validate() const {
        if (ratio < 1) throw ConfigError("DualFeatures: ratio must be >= 1");
        const auto r = static_cast<std::size_t>(ratio);
        if (fine.height() != r * coarse.height() || fine.width() != r * coarse.width())
            throw ShapeError("DualFeatures: fine grid " + std::to_string(fine.height()) + "x" +
                             std::to_string(fine.width()) + " is not " + std::to_string(ratio) +
                             "x coarse grid " + std::to_string(coarse.height()) + "x" +
                             std::to_string(coarse.width()));
        if (fine.stride * ratio != coarse.stride)
            throw ShapeError("DualFeatures: stride mismatch (fine " + std::to_string(fine.stride) +
                             " x ratio != coarse " + std::to_string(coarse.stride) + ")");
        if (fine.channels() != coarse.channels())
            throw ShapeError("DualFeatures: fine and coarse channel counts differ");
    }
};

inline void save_features(const std::string& path, const FeatureMap& map) {
    save_container(path, {{"data", map.data.value()}, {"stride", NdArray::scalar(map.stride)}});
}

inline FeatureMap load_features(const std::string& path) {
    const NamedArrays entries = load_container(path);
    const NdArray* data = nullptr;
    const NdArray* stride = nullptr;
    for (const auto& [name, array] : entries) {
        if (name == "data") data = &array;
        if (name == "stride") stride = &array;
    }
    if (!data || !stride) throw FormatError("feature file '" + path + "': needs 'data' and 'stride'");
    if (data->ndim() != 3) throw FormatError("feature file '" + path + "': data must be [C,H,W]");
    if (stride->size() != 1 || stride->item() < 1 || stride->item() != std::floor(stride->item()))
        throw FormatError("feature file '" + path + "': stride must be a positive integer scalar");
    for (auto d : data->dims())
        if (d == 0) throw FormatError("feature file '" + path + "': empty extent");
    return FeatureMap(Tensor(*data), static_cast<int>(stride->item()));
}

} // namespace dualrc
