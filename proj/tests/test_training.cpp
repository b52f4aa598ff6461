#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "dualrc/training.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dualrc;
using dualrc::testing::max_relative_error;
using dualrc::testing::random_array;
using dualrc::testing::random_index;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.backbone.trunk_channels = {2, 3, 4};
    cfg.backbone.lateral_channels = 4;
    cfg.consensus = parse_consensus_layers("3:1:2,3:2:1");
    return cfg;
}

// Image b is image a moved by (dx, dy) pixels; annotations are random
// points of a whose shifted position stays inside b.
TrainingSample shifted_pair(std::mt19937_64& rng, std::size_t size, long dx, long dy, std::size_t n) {
    TrainingSample s;
    s.image_a = random_array({1, size, size}, rng, 0, 1);
    s.image_b = NdArray({1, size, size});
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const long sy = long(y) - dy, sx = long(x) - dx;
            const bool in = sy >= 0 && sx >= 0 && sy < long(size) && sx < long(size);
            s.image_b.at(0, y, x) = in ? s.image_a.at(0, std::size_t(sy), std::size_t(sx)) : 0.5;
        }
    while (s.annotation.size() < n) {
        const double x = double(random_index(rng, 0, size - 1)), y = double(random_index(rng, 0, size - 1));
        if (x + dx < 0 || y + dy < 0 || x + dx > double(size - 1) || y + dy > double(size - 1)) continue;
        s.annotation.pairs.push_back({{x, y}, {x + dx, y + dy}});
    }
    return s;
}

NdArray softmax_oracle(const NdArray& rows) {
    NdArray out(rows.dims());
    const std::size_t n = rows.dim(0), t = rows.dim(1);
    for (std::size_t r = 0; r < n; ++r) {
        double denom = 0.0;
        for (std::size_t c = 0; c < t; ++c) denom += std::exp(rows.at(r, c));
        for (std::size_t c = 0; c < t; ++c) out.at(r, c) = std::exp(rows.at(r, c)) / denom;
    }
    return out;
}

double frobenius_oracle(const NdArray& a, const NdArray& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

NdArray gram_oracle(const NdArray& m) {
    const std::size_t n = m.dim(0), t = m.dim(1);
    NdArray g({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < t; ++c) g.at(i, j) += m.at(i, c) * m.at(j, c);
    return g;
}

PredictedMaps constant_pred(const NdArray& ab, const NdArray& ba) { return {Tensor(ab), Tensor(ba)}; }

} // namespace

TEST(BuildGt, TinySigmaIsOneHot) {
    const FeatureMap target(Tensor(NdArray({1, 4, 5}, 1.0)), 2);
    const NdArray rows = gt_rows({{2.6, 4.4}}, target, 1e-3);
    // pixel (2.6, 4.4) at stride 2 -> cell (row 2, col 1)
    for (std::size_t t = 0; t < 20; ++t) EXPECT_EQ(rows[t], t == 2 * 5 + 1 ? 1.0 : 0.0);
}

TEST(BuildGt, CentredKeypointHasSymmetricNeighbours) {
    const FeatureMap target(Tensor(NdArray({1, 9, 9}, 1.0)), 1);
    const NdArray rows = gt_rows({{4.0, 4.0}}, target, 1.0);
    const double up = rows[3 * 9 + 4], down = rows[5 * 9 + 4], left = rows[4 * 9 + 3], right = rows[4 * 9 + 5];
    EXPECT_EQ(up, down);
    EXPECT_EQ(left, right);
    EXPECT_EQ(up, left);
    EXPECT_GT(rows[4 * 9 + 4], up);
    EXPECT_NEAR(up / rows[4 * 9 + 4], std::exp(-0.5), 1e-12);
}

TEST(BuildGt, RowsAreDistributions) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t h = random_index(rng, 1, 10), w = random_index(rng, 1, 10);
        const int stride = int(random_index(rng, 1, 4));
        const FeatureMap target(Tensor(NdArray({1, h, w}, 1.0)), stride);
        std::vector<PixelPoint> pts;
        std::uniform_real_distribution<double> ux(0.0, double(w * stride - 1)), uy(0.0, double(h * stride - 1));
        for (int n = 0; n < 5; ++n) pts.push_back({ux(rng), uy(rng)});
        const double sigma = std::uniform_real_distribution<double>(0.2, 3.0)(rng);
        const NdArray rows = gt_rows(pts, target, sigma);
        for (std::size_t n = 0; n < 5; ++n) {
            double s = 0.0;
            for (std::size_t t = 0; t < h * w; ++t) {
                EXPECT_GE(rows[n * h * w + t], 0.0);
                s += rows[n * h * w + t];
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(BuildGt, Errors) {
    const FeatureMap target(Tensor(NdArray({1, 4, 4}, 1.0)), 1);
    EXPECT_THROW(gt_rows({{4.6, 0.0}}, target, 1.0), AnnotationError);
    EXPECT_THROW(gt_rows({{-0.6, 0.0}}, target, 1.0), AnnotationError);
    EXPECT_THROW(gt_rows({{1.0, 1.0}}, target, 0.0), ConfigError);
    KeypointAnnotation ann;
    ann.pairs.push_back({{0.0, 0.0}, {3.0, 3.5}});
    EXPECT_THROW(ann.validate_inside(4, 4, 4, 4), AnnotationError);
    EXPECT_NO_THROW(ann.validate_inside(4, 4, 4, 5));
}

TEST(PredictedMaps, UniformFusedMapGivesUniformRow) {
    // all features identical and a constant refined tensor -> constant fused map
    const FeatureMap fine(Tensor(NdArray({2, 8, 8}, 1.0)), 1), coarse(Tensor(NdArray({2, 2, 2}, 1.0)), 4);
    const DualFeatures d(fine, coarse, 4);
    const CorrTensor4D cbar(Tensor(NdArray({2, 2, 2, 2}, 0.3)));
    KeypointAnnotation ann;
    ann.pairs.push_back({{1.0, 2.0}, {5.0, 6.0}});
    const PredictedMaps p = predicted_maps(d, d, cbar, ann);
    for (double v : p.ab.value().values()) EXPECT_NEAR(v, 1.0 / 64.0, 1e-15);
}

TEST(PredictedMaps, DominantScoreConcentratesMass) {
    NdArray fa({2, 4, 4}, 0.0), fb({2, 4, 4}, 0.0);
    for (std::size_t p = 0; p < 16; ++p) {
        fa[p] = 1.0;
        fb[p] = 1.0;
    }
    fb[16 + 5] = 1.0;  // target cell 5 differs from the rest
    fb[5] = 0.0;
    fa[16 + 0] = 1.0;
    fa[0] = 0.0;
    const DualFeatures a(FeatureMap(Tensor(fa), 1), FeatureMap(Tensor(NdArray({2, 1, 1}, 1.0)), 4), 4);
    const DualFeatures b(FeatureMap(Tensor(fb), 1), FeatureMap(Tensor(NdArray({2, 1, 1}, 1.0)), 4), 4);
    const CorrTensor4D cbar(Tensor(NdArray({1, 1, 1, 1}, 60.0)));
    KeypointAnnotation ann;
    ann.pairs.push_back({{0.0, 0.0}, {1.0, 1.0}});
    const PredictedMaps p = predicted_maps(a, b, cbar, ann);
    EXPECT_GT(p.ab.value()[5], 0.999);
}

TEST(PredictedMaps, MatchesSoftmaxOracle) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t h = random_index(rng, 1, 3), w = random_index(rng, 1, 3);
        auto dual = [&](std::size_t hh, std::size_t ww) {
            return DualFeatures(FeatureMap(Tensor(random_array({3, hh * 4, ww * 4}, rng)), 2),
                                FeatureMap(Tensor(random_array({3, hh, ww}, rng)), 8), 4);
        };
        const DualFeatures a = dual(h, w), b = dual(w, h);
        const CorrTensor4D cbar(Tensor(random_array({h, w, w, h}, rng, -1, 2)));
        KeypointAnnotation ann;
        for (int n = 0; n < 4; ++n) {
            const auto ya = double(random_index(rng, 0, 8 * h - 1)), xa = double(random_index(rng, 0, 8 * w - 1));
            const auto yb = double(random_index(rng, 0, 8 * w - 1)), xb = double(random_index(rng, 0, 8 * h - 1));
            ann.pairs.push_back({{xa, ya}, {xb, yb}});
        }
        const PredictedMaps p = predicted_maps(a, b, cbar, ann);
        NdArray ab_rows({4, b.fine.cells()}), ba_rows({4, a.fine.cells()});
        const NdArray cbar_t = oracle::transpose4d_loops(cbar.value());
        for (std::size_t n = 0; n < 4; ++n) {
            const auto& [pa, pb] = ann.pairs[n];
            const auto ia = std::size_t(nearest_cell(pa.y, 2)), ja = std::size_t(nearest_cell(pa.x, 2));
            const auto ib = std::size_t(nearest_cell(pb.y, 2)), jb = std::size_t(nearest_cell(pb.x, 2));
            const NdArray fab = oracle::fused_formula(a.fine.data.value(), b.fine.data.value(), cbar.value(), ia, ja, 4);
            const NdArray fba = oracle::fused_formula(b.fine.data.value(), a.fine.data.value(), cbar_t, ib, jb, 4);
            std::copy(fab.values().begin(), fab.values().end(), ab_rows.values().begin() + long(n * fab.size()));
            std::copy(fba.values().begin(), fba.values().end(), ba_rows.values().begin() + long(n * fba.size()));
        }
        EXPECT_LT(max_relative_error(p.ab.value(), softmax_oracle(ab_rows)), 1e-6);
        EXPECT_LT(max_relative_error(p.ba.value(), softmax_oracle(ba_rows)), 1e-6);
    }
}

TEST(Losses, ZeroWhenPredictionEqualsTruth) {
    std::mt19937_64 rng(3);
    const GroundTruthMaps gt{random_array({3, 6}, rng, 0, 1), random_array({3, 5}, rng, 0, 1), 1.0};
    const PredictedMaps p = constant_pred(gt.ab, gt.ba);
    EXPECT_EQ(loss_keypoint(p, gt).item(), 0.0);
    EXPECT_EQ(loss_orthogonal(p, gt).item(), 0.0);
    EXPECT_EQ(loss_total(p, gt).item(), 0.0);
}

TEST(Losses, AnalyticKeypointValue) {
    const GroundTruthMaps gt{NdArray({1, 2}, {0.0, 1.0}), NdArray({1, 2}, {0.0, 1.0}), 1.0};
    const PredictedMaps p = constant_pred(NdArray({1, 2}, {1.0, 0.0}), NdArray({1, 2}, {1.0, 0.0}));
    EXPECT_NEAR(loss_keypoint(p, gt).item(), 2.0 * std::sqrt(2.0), 1e-12);
}

TEST(Losses, SingleKeypointOrthogonalReducesToNormDifference) {
    std::mt19937_64 rng(4);
    const NdArray s1 = random_array({1, 7}, rng, 0, 1), g1 = random_array({1, 7}, rng, 0, 1);
    const NdArray s2 = random_array({1, 4}, rng, 0, 1), g2 = random_array({1, 4}, rng, 0, 1);
    auto sq = [](const NdArray& v) {
        double s = 0;
        for (double x : v.values()) s += x * x;
        return s;
    };
    const GroundTruthMaps gt{g1, g2, 1.0};
    EXPECT_NEAR(loss_orthogonal(constant_pred(s1, s2), gt).item(),
                std::abs(sq(s1) - sq(g1)) + std::abs(sq(s2) - sq(g2)), 1e-12);
}

TEST(Losses, CombinationArithmetic) {
    EXPECT_NEAR(combine_losses(Tensor(NdArray::scalar(1.0)), Tensor(NdArray::scalar(2.0))).item(), 1.1, 1e-15);
    EXPECT_EQ(combine_losses(Tensor(NdArray::scalar(1.5)), Tensor(NdArray::scalar(2.0)), 0.0).item(), 1.5);
    EXPECT_EQ(kDefaultLambda, 0.05);
    EXPECT_THROW(combine_losses(Tensor(NdArray::scalar(1.0)), Tensor(NdArray::scalar(1.0)), -1.0), ConfigError);
}

TEST(Losses, MatchDirectSumOracles) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = random_index(rng, 1, 5);
        const GroundTruthMaps gt{random_array({n, 6}, rng, 0, 1), random_array({n, 9}, rng, 0, 1), 1.0};
        const NdArray ab = random_array({n, 6}, rng, 0, 1), ba = random_array({n, 9}, rng, 0, 1);
        const PredictedMaps p = constant_pred(ab, ba);
        const double lk = frobenius_oracle(ab, gt.ab) + frobenius_oracle(ba, gt.ba);
        const double lo = frobenius_oracle(gram_oracle(ab), gram_oracle(gt.ab)) +
                          frobenius_oracle(gram_oracle(ba), gram_oracle(gt.ba));
        EXPECT_NEAR(loss_keypoint(p, gt).item(), lk, 1e-12);
        EXPECT_NEAR(loss_orthogonal(p, gt).item(), lo, 1e-12);
        EXPECT_NEAR(loss_total(p, gt, 0.3).item(), lk + 0.3 * lo, 1e-12);
        EXPECT_GE(lk, 0.0);
        EXPECT_GE(lo, 0.0);
    }
}

TEST(Losses, ShapeMismatchIsShapeError) {
    const GroundTruthMaps gt{NdArray({2, 3}), NdArray({2, 3}), 1.0};
    EXPECT_THROW(loss_keypoint(constant_pred(NdArray({2, 4}), NdArray({2, 3})), gt), ShapeError);
    EXPECT_THROW(loss_orthogonal(constant_pred(NdArray({2, 3}), NdArray({1, 3})), gt), ShapeError);
}

TEST(Losses, InvariantToKeypointOrder) {
    std::mt19937_64 rng(6);
    const ModelConfig cfg = tiny_model();
    ParamStore params;
    init_model_params(params, cfg, 6);
    const Trunk trunk(cfg.backbone);
    TrainingSample s = shifted_pair(rng, 16, 2, 1, 5);
    const double before = sample_loss(s, params, cfg, trunk).item();
    std::reverse(s.annotation.pairs.begin(), s.annotation.pairs.end());
    EXPECT_NEAR(sample_loss(s, params, cfg, trunk).item(), before, 1e-12);
}

TEST(Training, EndToEndGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    const ModelConfig cfg = tiny_model();
    ParamStore params;
    init_model_params(params, cfg, 7);
    const Trunk trunk(cfg.backbone);
    const TrainingSample s = shifted_pair(rng, 16, 1, 2, 3);  // fine 8x8, coarse 2x2
    const auto result = dualrc::testing::finite_difference_check(params, [&] { return sample_loss(s, params, cfg, trunk); });
    EXPECT_EQ(result.coordinates, params.total_elements());
    EXPECT_LT(result.max_rel_error, 1e-4) << result.worst_param;
}

TEST(Training, ZeroLearningRateGivesFlatTrace) {
    std::mt19937_64 rng(8);
    const ModelConfig cfg = tiny_model();
    ParamStore params;
    init_model_params(params, cfg, 8);
    const TrainingSample s = shifted_pair(rng, 16, 1, 1, 4);
    OptimizerConfig opt;
    opt.learning_rate = 0.0;
    const auto trace = train_toy([&](std::size_t) { return s; }, params, cfg, 4, opt);
    ASSERT_EQ(trace.size(), 4u);
    for (double v : trace) EXPECT_EQ(v, trace[0]);
}

TEST(Training, SgdStepIsExactUpdateRule) {
    std::mt19937_64 rng(9);
    const ModelConfig cfg = tiny_model();
    ParamStore params;
    init_model_params(params, cfg, 9);
    const TrainingSample s = shifted_pair(rng, 16, 0, 1, 3);
    ParamStore before = params.clone();
    backward(sample_loss(s, before, cfg, Trunk(cfg.backbone)), before);
    OptimizerConfig opt;
    train_toy([&](std::size_t) { return s; }, params, cfg, 1, opt);
    for (const auto& [name, p] : params) {
        const Tensor& old = before.get(name);
        for (std::size_t i = 0; i < p.size(); ++i)
            EXPECT_EQ(p.value()[i], old.value()[i] - 0.01 * old.grad()[i]) << name;
    }
}

TEST(Training, HalvingSchedule) {
    OptimizerConfig opt;
    opt.learning_rate = 0.08;
    opt.halve_every = 5;
    EXPECT_EQ(opt.rate_at(0), 0.08);
    EXPECT_EQ(opt.rate_at(4), 0.08);
    EXPECT_EQ(opt.rate_at(5), 0.04);
    EXPECT_EQ(opt.rate_at(12), 0.02);
    EXPECT_EQ(OptimizerConfig{}.learning_rate, 0.01);
    EXPECT_EQ(parse_optimizer("adam"), OptimizerKind::adam);
    EXPECT_THROW(parse_optimizer("rmsprop"), ConfigError);
}

TEST(Training, NonFiniteLossIsTrainingError) {
    std::mt19937_64 rng(10);
    const ModelConfig cfg = tiny_model();
    ParamStore params;
    init_model_params(params, cfg, 10);
    params.get(lateral_name(1)).leaf_value()[0] = std::nan("");
    const TrainingSample s = shifted_pair(rng, 16, 0, 0, 2);
    try {
        train_toy([&](std::size_t) { return s; }, params, cfg, 3, OptimizerConfig{});
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
    }
}

TEST(Annotations, TextRoundTrip) {
    KeypointAnnotation ann;
    ann.pairs.push_back({{1.0 / 3.0, 2.5}, {7.125, 1e-9}});
    ann.pairs.push_back({{0.0, 0.0}, {31.0, 30.999999999}});
    const std::string path = (std::filesystem::temp_directory_path() / "dualrc_ann.txt").string();
    write_annotations(path, ann);
    const KeypointAnnotation back = read_annotations(path);
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t n = 0; n < 2; ++n) {
        EXPECT_EQ(back.pairs[n].first, ann.pairs[n].first);
        EXPECT_EQ(back.pairs[n].second, ann.pairs[n].second);
    }
    std::filesystem::remove(path);
    EXPECT_EQ(parse_annotations("# c\n1 2 3 4\n\n").size(), 1u);
    EXPECT_THROW(parse_annotations("1 2 3\n"), FormatError);
    EXPECT_THROW(parse_annotations("1 2 3 4 5\n"), FormatError);
}
