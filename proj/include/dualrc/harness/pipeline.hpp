#pragma once

// End-to-end matching: features -> coarse correlation -> consensus ->
// dense matching -> top-k -> MMA curve. Every stage re-labels its errors.

#include <optional>
#include <string>

#include "dualrc/backbone.hpp"
#include "dualrc/consensus.hpp"
#include "dualrc/correlation.hpp"
#include "dualrc/evaluation.hpp"
#include "dualrc/harness/settings.hpp"
#include "dualrc/matcher.hpp"
#include "dualrc/training.hpp"

namespace dualrc::harness {

enum class BackboneKind { patch, toy };

inline BackboneKind parse_backbone(const std::string& name) {
    if (name == "patch") return BackboneKind::patch;
    if (name == "toy") return BackboneKind::toy;
    throw ConfigError("unknown backbone '" + name + "' (expected patch or toy)");
}

inline ConsensusInit parse_nc_init(const std::string& name) {
    if (name == "delta") return ConsensusInit::delta;
    if (name == "uniform") return ConsensusInit::uniform;
    throw ConfigError("unknown nc_init '" + name + "' (expected delta or uniform)");
}

struct ModelSpec {
    BackboneKind backbone = BackboneKind::patch;
    int patch = 5;
    int fine_stride = 1;
    ModelConfig model;  // toy backbone, consensus, sigma, lambda
    std::uint64_t param_seed = 1;
    std::string weights;
    ConsensusInit nc_init = ConsensusInit::delta;
};

// Reads the backbone_keys() and consensus_keys() groups (sigma/lambda too when present).
inline ModelSpec model_spec(const Settings& s) {
    ModelSpec spec;
    spec.backbone = parse_backbone(s.str("backbone"));
    spec.patch = int(s.integer("patch"));
    spec.fine_stride = int(s.integer("fine_stride"));
    if (spec.fine_stride < 1) throw ConfigError("fine_stride must be >= 1");
    auto& bb = spec.model.backbone;
    bb.variant = parse_variant(s.str("variant"));
    bb.base_stride = int(s.integer("base_stride"));
    bb.trunk_channels = s.count_list("trunk_channels");
    bb.lateral_channels = s.count("lateral_channels");
    bb.trunk_seed = s.count("trunk_seed");
    bb.validate();
    spec.model.consensus = parse_consensus_layers(s.str("nc_layers"));
    spec.model.consensus.relu_between = s.flag("nc_relu");
    spec.model.consensus.validate();
    if (s.accepts("sigma")) spec.model.sigma = s.real("sigma");
    if (s.accepts("lambda")) spec.model.lambda = s.real("lambda");
    spec.param_seed = s.count("param_seed");
    spec.weights = s.str("weights");
    spec.nc_init = parse_nc_init(s.str("nc_init"));
    return spec;
}

// Parameters and frozen trunk ready for inference.
class Model {
public:
    explicit Model(ModelSpec spec) : spec_(std::move(spec)), trunk_(spec_.model.backbone) {
        if (!spec_.weights.empty()) {
            params_ = load_params(spec_.weights);
        } else if (spec_.backbone == BackboneKind::toy) {
            init_model_params(params_, spec_.model, spec_.param_seed, spec_.nc_init);
        } else {
            init_consensus_params(params_, spec_.model.consensus, spec_.param_seed + 1, spec_.nc_init);
        }
    }

    const ModelSpec& spec() const { return spec_; }
    const ParamStore& params() const { return params_; }

    DualFeatures extract(const NdArray& image) const {
        if (spec_.backbone == BackboneKind::patch) return patch_dual_features(image, spec_.patch, spec_.fine_stride);
        return extract_dual(Tensor(image), params_, spec_.model.backbone, trunk_);
    }

    CorrTensor4D refined(const DualFeatures& a, const DualFeatures& b) const {
        return refine(corr4d(a.coarse, b.coarse), params_, spec_.model.consensus);
    }

private:
    ModelSpec spec_;
    Trunk trunk_;
    ParamStore params_;
};

struct PipelineOptions {
    double keep_fraction = kDefaultKeepFraction;
    std::size_t top_k = 500;  // 0 keeps every match
    std::vector<double> thresholds = default_thresholds();
};

inline PipelineOptions pipeline_options(const Settings& s) {
    PipelineOptions o;
    o.keep_fraction = s.real("keep_fraction");
    kept_count(o.keep_fraction, 1);
    o.top_k = s.count("top_k");
    o.thresholds = s.real_list("thresholds");
    return o;
}

struct PipelineResult {
    MatchSet matches;              // after top-k
    std::optional<MmaCurve> curve;  // when a homography is supplied
    MatchStats stats;
    std::size_t coarse_elements = 0;
};

inline PipelineResult run_pipeline(const Model& model, const NdArray& image_a, const NdArray& image_b,
                                   const std::optional<Homography>& h, const PipelineOptions& opt) {
    PipelineResult out;
    DualFeatures fa, fb;
    try {
        fa = model.extract(image_a);
        fb = model.extract(image_b);
    } catch (const Error&) {
        rethrow_with_context("extract");
    }
    CorrTensor4D cbar;
    try {
        cbar = model.refined(fa, fb);
    } catch (const Error&) {
        rethrow_with_context("consensus");
    }
    out.coarse_elements = cbar.elements();
    MatchSet all;
    try {
        all = match_dense(fa, fb, cbar, opt.keep_fraction, &out.stats);
    } catch (const Error&) {
        rethrow_with_context("match");
    }
    out.matches = opt.top_k == 0 ? all : top_k(all, opt.top_k);
    if (h) {
        try {
            out.curve = mma_curve(out.matches, *h, opt.thresholds);
        } catch (const Error&) {
            rethrow_with_context("evaluate");
        }
    }
    return out;
}

} // namespace dualrc::harness
