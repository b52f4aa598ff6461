#pragma once

// Neighbourhood consensus on the coarse 4D correlation tensor: a stack of
// 4D convolutions applied symmetrically in both matching directions, wrapped
// by the soft mutual nearest neighbour filter.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dualrc/backbone.hpp"
#include "dualrc/correlation.hpp"

namespace dualrc {

inline constexpr double kMutualEpsilon = 1e-12;

struct ConsensusLayer {
    std::size_t kernel = 5;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
};

struct ConsensusConfig {
    std::vector<ConsensusLayer> layers{{5, 1, 16}, {5, 16, 16}, {5, 16, 1}};
    bool relu_between = true;

    void validate() const {
        if (layers.empty()) throw ConfigError("consensus: at least one layer required");
        if (layers.front().in_channels != 1) throw ConfigError("consensus: first layer must take 1 channel");
        if (layers.back().out_channels != 1) throw ConfigError("consensus: last layer must emit 1 channel");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].kernel % 2 == 0) throw ConfigError("consensus: kernel sizes must be odd");
            if (i > 0 && layers[i].in_channels != layers[i - 1].out_channels)
                throw ConfigError("consensus: channel chain broken at layer " + std::to_string(i));
        }
    }
};

// "k:in:out,k:in:out,..." e.g. "5:1:16,5:16:16,5:16:1".
inline ConsensusConfig parse_consensus_layers(const std::string& text) {
    ConsensusConfig cfg;
    cfg.layers.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        ConsensusLayer layer;
        char c1 = 0, c2 = 0;
        std::istringstream is(item);
        if (!(is >> layer.kernel >> c1 >> layer.in_channels >> c2 >> layer.out_channels) || c1 != ':' ||
            c2 != ':')
            throw ConfigError("consensus: bad layer spec '" + item + "'");
        cfg.layers.push_back(layer);
    }
    cfg.validate();
    return cfg;
}

inline std::string format_consensus_layers(const ConsensusConfig& cfg) {
    std::string out;
    for (const auto& l : cfg.layers) {
        if (!out.empty()) out += ',';
        out += std::to_string(l.kernel) + ":" + std::to_string(l.in_channels) + ":" +
               std::to_string(l.out_channels);
    }
    return out;
}

inline std::string consensus_kernel_name(std::size_t layer) {
    return "nc.layer" + std::to_string(layer) + ".kernel";
}

enum class ConsensusInit { uniform, delta };

// `delta` makes every layer a channel-averaging identity, so with ReLU off
// (or nonnegative input) the stack passes its input through unchanged.
inline void init_consensus_params(ParamStore& params, const ConsensusConfig& cfg, std::uint64_t seed,
                                  ConsensusInit init = ConsensusInit::uniform) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        const auto& l = cfg.layers[i];
        Dims dims{l.out_channels, l.in_channels, l.kernel, l.kernel, l.kernel, l.kernel};
        if (init == ConsensusInit::uniform) {
            params.add(consensus_kernel_name(i), he_uniform(dims, rng));
            continue;
        }
        NdArray k(dims, 0.0);
        const std::size_t vol = l.kernel * l.kernel * l.kernel * l.kernel;
        for (std::size_t o = 0; o < l.out_channels; ++o)
            for (std::size_t c = 0; c < l.in_channels; ++c)
                k[(o * l.in_channels + c) * vol + vol / 2] = 1.0 / static_cast<double>(l.in_channels);
        params.add(consensus_kernel_name(i), std::move(k));
    }
}

// N(C): the conv4d stack on a single-channel view of the tensor.
inline Tensor consensus_stack(const Tensor& c, const ParamStore& params, const ConsensusConfig& cfg) {
    cfg.validate();
    Dims dims = c.dims();
    Dims chan{1};
    chan.insert(chan.end(), dims.begin(), dims.end());
    Tensor x = reshape(c, chan);
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        const Tensor& k = params.get(consensus_kernel_name(i));
        if (k.dims().size() != 6 || k.dims()[0] != cfg.layers[i].out_channels ||
            k.dims()[1] != cfg.layers[i].in_channels || k.dims()[2] != cfg.layers[i].kernel)
            throw ParamError("consensus: parameter '" + consensus_kernel_name(i) + "' has shape " +
                             dims_to_string(k.dims()) + ", config expects another");
        x = conv4d(x, k, static_cast<int>(cfg.layers[i].kernel / 2));
        if (cfg.relu_between && i + 1 < cfg.layers.size()) x = relu(x);
    }
    return reshape(x, dims);
}

// N(C) + N(C^T)^T.
inline CorrTensor4D nc_filter(const CorrTensor4D& c, const ParamStore& params, const ConsensusConfig& cfg) {
    Tensor forward = consensus_stack(c.data, params, cfg);
    Tensor swapped = consensus_stack(transpose4d(c).data, params, cfg);
    return CorrTensor4D(add(forward, transpose4d(CorrTensor4D(swapped)).data));
}

// out = rA * rB * c, rA = c / max(max over source cells, eps),
// rB = c / max(max over target cells, eps); negatives clamped to 0 first.
inline CorrTensor4D soft_mutual_nn(const CorrTensor4D& c, double epsilon = kMutualEpsilon) {
    if (!(epsilon > 0.0)) throw ConfigError("soft_mutual_nn: epsilon must be positive");
    const Dims dims = c.data.dims();
    const std::size_t src = dims[0] * dims[1], dst = dims[2] * dims[3];
    Tensor pos = relu(reshape(c.data, {src, dst}));
    Tensor ratio_a = div(pos, maximum_scalar(broadcast_max(pos, 0), epsilon));
    Tensor ratio_b = div(pos, maximum_scalar(broadcast_max(pos, 1), epsilon));
    return CorrTensor4D(reshape(mul(mul(ratio_a, ratio_b), pos), dims));
}

// The refined tensor used for matching: M(N-filter(M(C))).
inline CorrTensor4D refine(const CorrTensor4D& c, const ParamStore& params, const ConsensusConfig& cfg) {
    return soft_mutual_nn(nc_filter(soft_mutual_nn(c), params, cfg));
}

} // namespace dualrc
