// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace grid4d {
namespace {

namespace fs = std::filesystem;

TrainConfig tiny_config() {
    TrainConfig cfg = shrunken_check_config();
    cfg.table_size_log2 = 10;
    cfg.network.decoder_depth = 1;
    cfg.scene.gaussians = 32;
    cfg.scene.frames = 5;
    cfg.total_steps = 30;
    cfg.warmup_steps = 5;
    return cfg;
}

GeneratedScene scene_for(const TrainConfig& cfg) {
    Rng rng(cfg.scene_seed);
    return generate_scene(cfg.scene, rng);
}

Gaussian random_gaussian(Rng& rng) {
    Gaussian g;
    g.mu = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
    g.scale = Vec3(rng.uniform(0.01, 0.1), rng.uniform(0.01, 0.1), rng.uniform(0.01, 0.1));
    g.rot = random_rotation(rng);
    return g;
}

// ---------------------------------------------------------------------------
// Supervision loss

TEST(SupervisionLoss, ZeroWhenPredictionMatches) {
    Rng rng(1);
    std::vector<Gaussian> a;
    for (int i = 0; i < 10; ++i) a.push_back(random_gaussian(rng));
    const auto l = supervision_loss(a, a, 0.1, 0.1);
    EXPECT_EQ(l.value, 0.0);
    for (const auto& g : l.grads) EXPECT_EQ(g.mu, Vec3::Zero());
}

TEST(SupervisionLoss, UnitTranslationGivesPositionMseOne) {
    Rng rng(2);
    std::vector<Gaussian> pred, truth;
    for (int i = 0; i < 7; ++i) {
        pred.push_back(random_gaussian(rng));
        truth.push_back(pred.back());
        truth.back().mu += Vec3(1, 0, 0);
    }
    const auto l = supervision_loss(pred, truth, 0.1, 0.1);
    EXPECT_DOUBLE_EQ(l.position, 1.0);
    EXPECT_DOUBLE_EQ(l.value, 1.0);
}

TEST(SupervisionLoss, AntipodalQuaternionsAreEquivalent) {
    Gaussian a, b;
    a.rot = quat_normalize(Quat{0.5, 0.5, -0.5, 0.5});
    b.rot = Quat{-a.rot.w, -a.rot.x, -a.rot.y, -a.rot.z};
    EXPECT_EQ(supervision_loss(std::vector{a}, std::vector{b}, 0.1, 0.1).rotation, 0.0);
}

TEST(SupervisionLoss, MatchesNaiveLoopAndFiniteDifferences) {
    Rng rng(3);
    std::vector<Gaussian> pred, truth;
    for (int i = 0; i < 6; ++i) {
        pred.push_back(random_gaussian(rng));
        truth.push_back(random_gaussian(rng));
    }
    const double gs = 0.3, gr = 0.7;
    auto naive = [&](const std::vector<Gaussian>& p) {
        double pos = 0, sc = 0, rot = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            for (int k = 0; k < 3; ++k) {
                pos += (p[i].mu[k] - truth[i].mu[k]) * (p[i].mu[k] - truth[i].mu[k]);
                sc += (p[i].scale[k] - truth[i].scale[k]) * (p[i].scale[k] - truth[i].scale[k]);
            }
            const double a[4] = {p[i].rot.w, p[i].rot.x, p[i].rot.y, p[i].rot.z};
            const double b[4] = {truth[i].rot.w, truth[i].rot.x, truth[i].rot.y, truth[i].rot.z};
            double m = 0, s = 0;
            for (int k = 0; k < 4; ++k) {
                m += (a[k] - b[k]) * (a[k] - b[k]);
                s += (a[k] + b[k]) * (a[k] + b[k]);
            }
            rot += std::min(m, s);
        }
        const double n = static_cast<double>(p.size());
        return pos / n + gs * sc / n + gr * rot / n;
    };
    const auto l = supervision_loss(pred, truth, gs, gr);
    EXPECT_NEAR(l.value, naive(pred), 1e-14);
    const double h = 1e-6;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            auto p = pred, m = pred;
            p[i].mu[k] += h;
            m[i].mu[k] -= h;
            EXPECT_NEAR(l.grads[i].mu[k], (naive(p) - naive(m)) / (2 * h), 1e-7);
            p = pred, m = pred;
            p[i].scale[k] += h;
            m[i].scale[k] -= h;
            EXPECT_NEAR(l.grads[i].scale[k], (naive(p) - naive(m)) / (2 * h), 1e-7);
        }
        auto p = pred, m = pred;
        p[i].rot.y += h;
        m[i].rot.y -= h;
        EXPECT_NEAR(l.grads[i].rot.y, (naive(p) - naive(m)) / (2 * h), 1e-7);
    }
}

TEST(SupervisionLoss, LengthMismatchIsContractViolation) {
    EXPECT_THROW(supervision_loss(std::vector<Gaussian>(2), std::vector<Gaussian>(3), 0.1, 0.1), ContractViolation);
}

// ---------------------------------------------------------------------------
// Smoothness regularization

SpaceTimeEncoder small_encoder(Rng& rng) {
    DecomposedConfig dc;
    dc.spatial = GridConfig::isotropic(3, 2, 4, 8, 10, 2);
    dc.temporal = GridConfig::isotropic(3, 2, 4, 8, 10, 2);
    auto enc = SpaceTimeEncoder::decomposed(dc);
    enc.init_uniform(rng, 0.5);
    return enc;
}

std::vector<NormalizedCoord4> random_batch(Rng& rng, int n) {
    std::vector<NormalizedCoord4> b;
    for (int i = 0; i < n; ++i) b.push_back({rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
    return b;
}

TEST(SmoothReg, ZeroEpsilonGivesZero) {
    Rng rng(4);
    const auto enc = small_encoder(rng);
    const auto batch = random_batch(rng, 10);
    EXPECT_EQ(smooth_reg_loss(enc, batch, RegPerturbation{}, rng), 0.0);
}

TEST(SmoothReg, ConstantTablesGiveZero) {
    Rng rng(5);
    auto enc = small_encoder(rng);
    enc.fill(0.3f);
    const auto batch = random_batch(rng, 10);
    const RegPerturbation eps{0.1, 0.1, 0.1, 0.1, 0.1, 1.0};
    EXPECT_NEAR(smooth_reg_loss(enc, batch, eps, rng), 0.0, 1e-28);
}

TEST(SmoothReg, EmptyBatchIsZeroWithoutGradients) {
    Rng rng(6);
    const auto enc = small_encoder(rng);
    auto grads = enc.make_gradients();
    EXPECT_EQ(smooth_reg_loss(enc, {}, RegPerturbation{0.1, 0.1, 0.1, 0.1, 0.1, 1.0}, rng, &grads), 0.0);
    for (const auto& g : grads) EXPECT_TRUE(g.empty());
}

TEST(SmoothReg, HandPlacedSingleLevelOracle) {
    // One 4D level with N = 1 and F = 1. Vertex (a,b,c,d) stores
    // a + 2b + 4c + 8d, so the interpolant is exactly x + 2y + 4z + 8t.
    auto enc = SpaceTimeEncoder::hypergrid(GridConfig::isotropic(4, 1, 1, 1, 4, 1));
    auto& g = enc.grids()[0].grid;
    for (int v = 0; v < 16; ++v) {
        const std::vector<int> vert{v & 1, (v >> 1) & 1, (v >> 2) & 1, (v >> 3) & 1};
        g.row(0, g.index(0, vert))[0] = static_cast<float>(vert[0] + 2 * vert[1] + 4 * vert[2] + 8 * vert[3]);
    }
    const NormalizedCoord4 u{0.4, 0.5, 0.6, 0.3};
    const RegPerturbation eps{0.01, 0.02, 0.03, 0.04, 0.0, 1.0};
    Rng rng(7);
    Rng copy = rng;
    const double dx = copy.uniform(-1, 1) * 0.01, dy = copy.uniform(-1, 1) * 0.02, dz = copy.uniform(-1, 1) * 0.03,
                 dt = copy.uniform(-1, 1) * 0.04;
    const double d = dx + 2 * dy + 4 * dz + 8 * dt;
    const std::vector<NormalizedCoord4> batch{u};
    EXPECT_NEAR(smooth_reg_loss(enc, batch, eps, rng), d * d, 1e-12);
}

TEST(SmoothReg, SpatialSettingIsIndependent) {
    Rng rng(8);
    const auto enc = small_encoder(rng);
    const auto batch = random_batch(rng, 8);
    // Only the spatial grid perturbed, with weight 0: loss vanishes.
    Rng r1(1);
    EXPECT_EQ(smooth_reg_loss(enc, batch, RegPerturbation{0, 0, 0, 0, 0.05, 0.0}, r1), 0.0);
    // Weight scales the spatial term linearly.
    Rng r2(1), r3(1);
    const double w1 = smooth_reg_loss(enc, batch, RegPerturbation{0, 0, 0, 0, 0.05, 1.0}, r2);
    const double w3 = smooth_reg_loss(enc, batch, RegPerturbation{0, 0, 0, 0, 0.05, 3.0}, r3);
    EXPECT_GT(w1, 0.0);
    EXPECT_NEAR(w3, 3.0 * w1, 1e-12 * w3);
}

TEST(SmoothReg, GradientMatchesFiniteDifferences) {
    Rng rng(9);
    auto enc = small_encoder(rng);
    const auto batch = random_batch(rng, 4);
    const RegPerturbation eps{0.05, 0.05, 0.05, 0.08, 0.03, 0.7};
    const Rng draw(21);
    auto grads = enc.make_gradients();
    Rng r0 = draw;
    smooth_reg_loss(enc, batch, eps, r0, &grads, 1.0);
    for (std::size_t gi = 0; gi < enc.grids().size(); ++gi) {
        auto params = enc.grids()[gi].grid.params();
        const auto dense = grads[gi].dense();
        for (const auto& e : grads[gi].entries()) {
            const std::size_t idx = enc.grids()[gi].grid.levels()[static_cast<std::size_t>(e.level)].offset +
                                    e.row * 2;
            const float saved = params[idx];
            const float up = saved + 1e-3f, down = saved - 1e-3f;
            params[idx] = up;
            Rng r1 = draw;
            const double lp = smooth_reg_loss(enc, batch, eps, r1);
            params[idx] = down;
            Rng r2 = draw;
            const double lm = smooth_reg_loss(enc, batch, eps, r2);
            params[idx] = saved;
            const double fd = (lp - lm) / (static_cast<double>(up) - static_cast<double>(down));
            ASSERT_NEAR(dense[idx], fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

// ---------------------------------------------------------------------------
// Decoder-output regularizer and total loss

TEST(DecoderOutputReg, ZeroCasesAndNaiveOracle) {
    TrainConfig cfg = tiny_config();
    const auto scene = scene_for(cfg);
    Rng init(3);
    const auto model = build_check_model(cfg, scene, init);
    Rng rng(4);
    const auto batch = random_batch(rng, 5);
    Rng r0(1);
    EXPECT_EQ(decoder_output_reg(model, batch, RegPerturbation{}, r0), 0.0);

    const RegPerturbation eps{0.05, 0.05, 0.05, 0.05, 0.0, 1.0};
    const Rng draw(2);
    Rng r1 = draw, copy = draw;
    const double got = decoder_output_reg(model, batch, eps, r1);
    std::vector<NormalizedCoord4> moved;
    for (const auto& u : batch) {
        const double dx = copy.uniform(-1, 1), dy = copy.uniform(-1, 1), dz = copy.uniform(-1, 1),
                     dt = copy.uniform(-1, 1);
        moved.push_back({std::clamp(u.x + dx * 0.05, 0.0, 1.0), std::clamp(u.y + dy * 0.05, 0.0, 1.0),
                         std::clamp(u.z + dz * 0.05, 0.0, 1.0), std::clamp(u.t + dt * 0.05, 0.0, 1.0)});
    }
    const auto a = model.forward_normalized(batch), b = model.forward_normalized(moved);
    double expect = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& p = a.outputs[i];
        const auto& q = b.outputs[i];
        expect += (p.t_x - q.t_x).squaredNorm() + (p.r_x.w - q.r_x.w) * (p.r_x.w - q.r_x.w) +
                  (p.r_x.x - q.r_x.x) * (p.r_x.x - q.r_x.x) + (p.r_x.y - q.r_x.y) * (p.r_x.y - q.r_x.y) +
                  (p.r_x.z - q.r_x.z) * (p.r_x.z - q.r_x.z);
    }
    EXPECT_NEAR(got, expect / 5.0, 1e-12);

    // Zero heads make the decoder constant.
    Rng init2(3);
    const auto plain = build_model(cfg, scene, init2);
    Rng r2 = draw;
    EXPECT_EQ(decoder_output_reg(plain, batch, eps, r2), 0.0);
}

TEST(TotalLoss, Weighting) {
    TrainConfig cfg;
    EXPECT_EQ(cfg.lambda_r, 0.5);
    EXPECT_EQ(cfg.lambda_c, 0.2);
    EXPECT_EQ(total_loss(2.0, 4.0, cfg), 4.0);
    EXPECT_EQ(total_loss(0.0, 3.0, cfg), 1.5);
    cfg.lambda_r = 0.0;
    EXPECT_EQ(total_loss(2.5, 4.0, cfg), 2.5);
}

// ---------------------------------------------------------------------------
// Optimizers

TEST(DenseAdam, SingleStepOracle) {
    std::vector<double> p{0.5};
    DenseAdam adam;
    adam.add(p);
    const std::vector<double> g{1.0};
    adam.step({g}, 1e-3);
    // m = 0.1, v = 0.001; both bias corrections give 1.
    const double m_hat = 0.1 / (1 - 0.9), v_hat = 0.001 / (1 - 0.999);
    EXPECT_DOUBLE_EQ(p[0], 0.5 - 1e-3 * m_hat / (std::sqrt(v_hat) + 1e-15));
    EXPECT_NEAR(p[0], 0.499, 1e-15);
}

TEST(DenseAdam, ZeroGradientKeepsParamsAndDecaysMoments) {
    std::vector<double> p{1.0, -2.0};
    DenseAdam adam;
    adam.add(p);
    const std::vector<double> zero{0.0, 0.0};
    adam.step({zero}, 0.1);
    EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
    const std::vector<double> g{1.0, 1.0};
    adam.step({g}, 0.1);
    const double m = adam.first_moment()[0][0], v = adam.second_moment()[0][0];
    adam.step({zero}, 0.0);
    EXPECT_DOUBLE_EQ(adam.first_moment()[0][0], 0.9 * m);
    EXPECT_DOUBLE_EQ(adam.second_moment()[0][0], 0.999 * v);
}

TEST(DenseAdam, NonFiniteGradientIsDivergence) {
    std::vector<double> p{1.0};
    DenseAdam adam;
    adam.add(p);
    const std::vector<double> g{std::nan("")};
    EXPECT_THROW(adam.step({g}, 0.1), DivergenceError);
    const std::vector<double> two{1.0, 2.0};
    EXPECT_THROW(adam.step({two}, 0.1), ContractViolation);
}

TEST(GridAdam, MatchesDenseAdamOnSparseGradients) {
    HashGrid grid(GridConfig::isotropic(2, 2, 4, 8, 10, 2));
    Rng rng(10);
    grid.init_uniform(rng, 0.1);
    std::vector<double> ref(grid.params().begin(), grid.params().end());
    std::vector<double> m(ref.size(), 0.0), v(ref.size(), 0.0);
    GridAdam adam(grid);
    for (int step = 1; step <= 6; ++step) {
        GridGradients g(grid);
        // Steps 4-6 send no gradient: touched rows must keep moving by momentum.
        if (step <= 3) grid.encode_backward(std::vector<double>{rng.uniform(), rng.uniform()},
                                            std::vector<double>{1.0, -0.5, 0.25, 2.0}, g);
        adam.step(g, 1e-2);
        const auto dense = g.dense();
        const double bc1 = 1 - std::pow(0.9, step), bc2 = 1 - std::pow(0.999, step);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            m[i] = 0.9 * m[i] + 0.1 * dense[i];
            v[i] = 0.999 * v[i] + 0.001 * dense[i] * dense[i];
            if (v[i] == 0.0) continue;  // never touched: dense Adam leaves it unchanged too
            ref[i] -= 1e-2 * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-15);
        }
        for (std::size_t i = 0; i < ref.size(); ++i)
            ASSERT_NEAR(grid.params()[i], ref[i], 1e-6) << "step " << step << " entry " << i;
    }
}

TEST(LearningRate, ExponentialDecayEndpoints) {
    EXPECT_DOUBLE_EQ(decayed_lr(1e-3, 0.1, 0, 5000), 1e-3);
    EXPECT_DOUBLE_EQ(decayed_lr(1e-3, 0.1, 5000, 5000), 1e-4);
    EXPECT_NEAR(decayed_lr(1e-3, 0.1, 2500, 5000), 1e-3 / std::sqrt(10.0), 1e-15);
    for (int s = 1; s <= 100; ++s) EXPECT_LT(decayed_lr(1.0, 0.1, s, 100), decayed_lr(1.0, 0.1, s - 1, 100));
}

// ---------------------------------------------------------------------------
// Scene generation

TEST(SceneGeneration, RigidStartsAtCanonicalAndStaysRigid) {
    SceneSpec spec;
    spec.gaussians = 60;
    Rng rng(11);
    const auto scene = generate_scene(spec, rng);
    ASSERT_EQ(scene.canonical.size(), 60u);
    const auto f0 = scene.motion.evaluate(scene.canonical, 0.0);
    for (std::size_t i = 0; i < 60; ++i) {
        EXPECT_EQ(f0.gaussians[i].mu, scene.canonical.gaussians[i].mu);
        EXPECT_EQ(f0.gaussians[i].rot, scene.canonical.gaussians[i].rot);
    }
    const auto f1 = scene.motion.evaluate(scene.canonical, 1.0);
    for (std::size_t i = 0; i < 60; i += 7)
        for (std::size_t j = 0; j < 60; j += 5)
            EXPECT_NEAR((f1.gaussians[i].mu - f1.gaussians[j].mu).norm(),
                        (scene.canonical.gaussians[i].mu - scene.canonical.gaussians[j].mu).norm(), 1e-12);
    EXPECT_LE(std::abs(scene.motion.angle), spec.max_angle + 1e-15);
    EXPECT_LE(scene.motion.translation.norm(), spec.max_translation + 1e-15);
}

TEST(SceneGeneration, AabbCoversEveryFrame) {
    for (auto kind : {MotionKind::Rigid, MotionKind::Articulated, MotionKind::Sinusoidal, MotionKind::ShadowPair}) {
        SceneSpec spec;
        spec.kind = kind;
        spec.gaussians = 50;
        Rng rng(12);
        const auto scene = generate_scene(spec, rng);
        for (int k = 0; k < scene.frames; ++k) {
            const auto f = scene.motion.evaluate(scene.canonical, scene.frame_time(k));
            for (const auto& g : f.gaussians) EXPECT_TRUE(scene.canonical.aabb.strictly_contains(g.mu));
        }
    }
}

TEST(SceneGeneration, ArticulatedPartsAreRigid) {
    SceneSpec spec;
    spec.kind = MotionKind::Articulated;
    spec.gaussians = 80;
    Rng rng(13);
    const auto scene = generate_scene(spec, rng);
    const auto& c = scene.canonical.gaussians;
    int parts[2] = {0, 0};
    for (int p : scene.motion.part) ++parts[p];
    EXPECT_GT(parts[0], 0);
    EXPECT_GT(parts[1], 0);
    for (double t : {0.3, 0.7, 1.0}) {
        const auto f = scene.motion.evaluate(scene.canonical, t);
        for (std::size_t i = 0; i < c.size(); ++i)
            for (std::size_t j = i + 1; j < c.size(); ++j) {
                if (scene.motion.part[i] != scene.motion.part[j]) continue;
                EXPECT_NEAR((f.gaussians[i].mu - f.gaussians[j].mu).norm(), (c[i].mu - c[j].mu).norm(), 1e-12);
            }
    }
}

TEST(SceneGeneration, ShadowPairDeltasAreOpposite) {
    SceneSpec spec;
    spec.kind = MotionKind::ShadowPair;
    spec.gaussians = 40;
    Rng rng(14);
    const auto scene = generate_scene(spec, rng);
    const auto& c = scene.canonical.gaussians;
    for (double t : {0.1, 0.5, 0.9}) {
        const auto f = scene.motion.evaluate(scene.canonical, t);
        Vec3 d0 = Vec3::Zero(), d1 = Vec3::Zero();
        for (std::size_t i = 0; i < c.size(); ++i) {
            const Vec3 d = f.gaussians[i].mu - c[i].mu;
            if (scene.motion.part[i] == 0) d0 = d; else d1 = d;
        }
        EXPECT_GT(d0.norm(), 0.0);
        EXPECT_TRUE(d0.isApprox(-d1, 1e-12));
        // Every member of a component shares the delta.
        for (std::size_t i = 0; i < c.size(); ++i) {
            const Vec3 d = f.gaussians[i].mu - c[i].mu;
            EXPECT_TRUE(d.isApprox(scene.motion.part[i] == 0 ? d0 : d1, 1e-12));
        }
    }
}

TEST(SceneGeneration, SceneFileRoundTrip) {
    SceneSpec spec;
    spec.kind = MotionKind::Sinusoidal;
    spec.gaussians = 10;
    Rng rng(15);
    const auto scene = generate_scene(spec, rng);
    const auto back = GeneratedScene::from_file(scene.to_file());
    EXPECT_EQ(back.frames, scene.frames);
    const auto a = scene.motion.evaluate(scene.canonical, 0.37), b = back.motion.evaluate(back.canonical, 0.37);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(a.gaussians[i].mu, b.gaussians[i].mu);
    EXPECT_EQ(scene.frame_time(0), 0.0);
    EXPECT_EQ(scene.frame_time(scene.frames - 1), 1.0);
}

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultsAndTextRoundTrip) {
    const TrainConfig d;
    EXPECT_EQ(d.encoder_lr_multiplier, 20.0);
    EXPECT_EQ(d.adam.beta1, 0.9);
    EXPECT_EQ(d.adam.beta2, 0.999);
    EXPECT_EQ(d.reg_sample_fraction, 0.25);
    TrainConfig cfg;
    cfg.set("lambda_r", "0.125");
    cfg.set("attention", "unit");
    cfg.set("seed", "99");
    const auto back = TrainConfig::from_text(cfg.to_text());
    for (const auto& k : TrainConfig::keys()) EXPECT_EQ(back.get(k), cfg.get(k)) << k;
    EXPECT_EQ(back.lambda_r, 0.125);
    EXPECT_EQ(back.network.attention, AttentionMode::Unit);
}

TEST(Config, ParsesCommentsAndRejectsUnknownKeys) {
    const auto cfg = TrainConfig::from_text("# comment\n  total_steps = 42  # trailing\n\nlambda_r=0\n");
    EXPECT_EQ(cfg.total_steps, 42);
    EXPECT_EQ(cfg.lambda_r, 0.0);
    EXPECT_THROW(TrainConfig::from_text("not_a_key = 1\n"), ConfigError);
    EXPECT_THROW(TrainConfig::from_text("total_steps 5\n"), ConfigError);
    EXPECT_THROW(TrainConfig::from_text("total_steps = five\n"), ConfigError);
    EXPECT_THROW(TrainConfig::from_file("/nonexistent/cfg.txt"), IoError);
}

TEST(Config, ValidateRanges) {
    auto bad = [](const char* key, const char* value) {
        TrainConfig c;
        c.set(key, value);
        EXPECT_THROW(c.validate(), ConfigError) << key << "=" << value;
    };
    bad("lambda_c", "1.5");
    bad("lambda_r", "-0.1");
    bad("reg_sample_fraction", "0");
    bad("reg_sample_fraction", "1.01");
    bad("table_size_log2", "3");
    TrainConfig ok;
    ok.reg_sample_fraction = 1.0;
    EXPECT_NO_THROW(ok.validate());
}

TEST(Config, PerturbationDefaultsAreHalfCells) {
    const TrainConfig cfg;
    EXPECT_DOUBLE_EQ(cfg.eps_xyz(20), 1.0 / 4096.0);
    EXPECT_DOUBLE_EQ(cfg.eps_t(20), 1.0 / 20.0);
}

// ---------------------------------------------------------------------------
// Objective and training loop

TEST(Objective, RegularizationNeverTouchesNetworkWeights) {
    TrainConfig cfg = tiny_config();
    const auto scene = scene_for(cfg);
    Rng init(5);
    const auto model = build_check_model(cfg, scene, init);
    StepGradients with{model.net().make_grads(), model.encoder().make_gradients()};
    StepGradients without{model.net().make_grads(), model.encoder().make_gradients()};
    cfg.lambda_r = 0.5;
    const auto a = evaluate_objective(model, scene, 0.5, cfg, Rng(1), &with);
    cfg.lambda_r = 0.0;
    const auto b = evaluate_objective(model, scene, 0.5, cfg, Rng(1), &without);
    EXPECT_GT(a.reg, 0.0);
    EXPECT_EQ(a.sup, b.sup);
    for (std::size_t i = 0; i < with.net.layers.size(); ++i) {
        EXPECT_EQ(with.net.layers[i].weight, without.net.layers[i].weight);
        EXPECT_EQ(with.net.layers[i].bias, without.net.layers[i].bias);
    }
    // Grid gradients do differ.
    bool differs = false;
    for (std::size_t g = 0; g < with.grids.size(); ++g)
        for (std::size_t k = 0; k < with.grids[g].dense().size(); ++k)
            differs |= with.grids[g].dense()[k] != without.grids[g].dense()[k];
    EXPECT_TRUE(differs);
}

TEST(GradientCheck, ShrunkenPipelinePasses) {
    TrainConfig cfg = shrunken_check_config();
    cfg.scene.gaussians = 12;
    cfg.network.feature_width = cfg.network.decoder_width = 8;
    const auto scene = scene_for(cfg);
    Rng init(7);
    auto model = build_check_model(cfg, scene, init);
    GradientCheckOptions opts;
    opts.max_per_group = 120;
    const auto report = gradient_check(model, scene, cfg, opts);
    EXPECT_TRUE(report.passed());
    EXPECT_GE(report.groups.size(), 7u);
    for (const auto& g : report.groups) {
        EXPECT_GT(g.checked, 0u) << g.group;
        EXPECT_LT(g.max_rel_error, 1e-4) << g.group << " " << g.worst;
    }
}

TEST(Training, ZeroMotionConvergesWithin200Steps) {
    TrainConfig cfg = tiny_config();
    cfg.scene.max_angle = 0.0;
    cfg.scene.max_translation = 0.0;
    cfg.total_steps = 200;
    const auto scene = scene_for(cfg);
    const auto result = train(cfg, scene);
    ASSERT_EQ(result.log.size(), 200u);
    EXPECT_LT(result.log.back().sup_loss, 1e-8);
    EXPECT_LT(mean_position_error(result.model, scene), 1e-4);
}

TEST(Training, WarmupLeavesHeadsZero) {
    TrainConfig cfg = tiny_config();
    cfg.total_steps = cfg.warmup_steps = 10;
    const auto scene = scene_for(cfg);
    const auto result = train(cfg, scene);
    for (const Linear* l : result.model.net().layers())
        if (l->name.rfind("head", 0) == 0) {
            EXPECT_TRUE(l->weight.isZero(0.0));
            EXPECT_TRUE(l->bias.isZero(0.0));
        }
    const auto deformed = result.model.deform(scene.canonical, 0.8);
    for (std::size_t i = 0; i < deformed.size(); ++i) {
        EXPECT_EQ(deformed.gaussians[i].mu, scene.canonical.gaussians[i].mu);
        EXPECT_EQ(deformed.gaussians[i].rot, scene.canonical.gaussians[i].rot);
        EXPECT_EQ(deformed.gaussians[i].scale, scene.canonical.gaussians[i].scale);
    }
}

TEST(Training, ReducesSupervisionLossOnRigidScene) {
    TrainConfig cfg = tiny_config();
    cfg.total_steps = 150;
    const auto scene = scene_for(cfg);
    const auto result = train(cfg, scene);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 10; ++i) {
        first += result.log[static_cast<std::size_t>(cfg.warmup_steps + i)].sup_loss;
        last += result.log[result.log.size() - 1 - static_cast<std::size_t>(i)].sup_loss;
    }
    EXPECT_LT(last, 0.5 * first);
}

TEST(Training, DeterministicMetricsAndCheckpoint) {
    TrainConfig cfg = tiny_config();
    const auto scene = scene_for(cfg);
    const auto a = train(cfg, scene), b = train(cfg, scene);
    EXPECT_EQ(metrics_csv(a.log), metrics_csv(b.log));
    const fs::path da = fs::temp_directory_path() / "grid4d_det_a", db = fs::temp_directory_path() / "grid4d_det_b";
    fs::remove_all(da);
    fs::remove_all(db);
    save_checkpoint(da, a, cfg);
    save_checkpoint(db, b, cfg);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(da)) {
        if (!e.is_regular_file()) continue;
        ++files;
        const auto rel = fs::relative(e.path(), da);
        std::ifstream fa(e.path(), std::ios::binary), fb(db / rel, std::ios::binary);
        std::stringstream sa, sb;
        sa << fa.rdbuf();
        sb << fb.rdbuf();
        EXPECT_EQ(sa.str(), sb.str()) << rel;
    }
    EXPECT_GE(files, 4u);
    fs::remove_all(da);
    fs::remove_all(db);
}

TEST(Training, MetricsCsvFormat) {
    const std::vector<MetricRow> rows{{0, 1.5, 0.25, 1.625, 1e-3, 2e-2}};
    EXPECT_EQ(metrics_csv(rows), "step,sup_loss,reg_loss,total,lr_decoder,lr_grid\n0,1.5,0.25,1.625,0.001,0.02\n");
}

TEST(Training, DivergenceSavesLastGoodModel) {
    TrainConfig cfg = tiny_config();
    cfg.lr_decoder = 1e300;
    cfg.total_steps = 20;
    const auto scene = scene_for(cfg);
    const fs::path dir = fs::temp_directory_path() / "grid4d_diverge";
    fs::remove_all(dir);
    EXPECT_THROW(train(cfg, scene, dir), DivergenceError);
    ASSERT_TRUE(fs::exists(dir / "model.json"));
    const auto model = DeformationModel::load(dir);
    EXPECT_TRUE(model.net().finite());
    // The saved model is the last one with a finite loss.
    for (int k = 0; k < scene.frames; ++k)
        EXPECT_TRUE(std::isfinite(evaluate_objective(model, scene, scene.frame_time(k), cfg, Rng(1), nullptr).total));
    fs::remove_all(dir);
}

TEST(FeatureDistance, ZeroForConstantTablesAndPositiveOtherwise) {
    TrainConfig cfg = tiny_config();
    const auto scene = scene_for(cfg);
    Rng init(1);
    auto model = build_check_model(cfg, scene, init);
    const RegPerturbation eps{0.02, 0.02, 0.02, 0.05, 0.02, 1.0};
    EXPECT_GT(perturbation_feature_distance(model.encoder(), scene, model, eps, 3), 0.0);
    model.encoder().fill(0.5f);
    EXPECT_NEAR(perturbation_feature_distance(model.encoder(), scene, model, eps, 3), 0.0, 1e-25);
}

}  // namespace
}  // namespace grid4d
