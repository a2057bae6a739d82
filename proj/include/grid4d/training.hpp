// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "grid4d/core.hpp"
#include "grid4d/deformnet.hpp"
#include "grid4d/encoders.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace grid4d {

// ---------------------------------------------------------------------------
// Synthetic dynamic scenes
// ---------------------------------------------------------------------------

enum class MotionKind { Rigid, Articulated, Sinusoidal, ShadowPair };

std::string_view to_string(MotionKind kind);
/// "rigid" | "articulated" | "sinusoidal" | "shadow-pair"
MotionKind motion_kind_from_string(std::string_view name);

/// Closed-form motion of a canonical Gaussian set over t in [0, 1]. Every
/// kind is the identity at t = 0.
///
/// - Rigid: whole set rotates by `angle * t` about `axis` through `center`
///   and translates by `translation * t`.
/// - Articulated: Gaussians with x below `center.x` rotate by +angle * t,
///   the rest by -angle * t, both about `axis` through `center`.
/// - Sinusoidal: mu + amplitude * sin(2 pi t) * (sin 2pi y, sin 2pi z, sin 2pi x).
/// - ShadowPair: part 0 moves by +translation * sin(pi t), part 1 by the
///   negated offset.
struct SyntheticMotion {
    MotionKind kind = MotionKind::Rigid;
    Vec3 axis = Vec3::UnitZ();
    double angle = 0.0;  ///< radians at t = 1
    Vec3 translation = Vec3::Zero();
    Vec3 center = Vec3::Constant(0.5);
    double amplitude = 0.0;
    std::vector<int> part;  ///< per-Gaussian component id (Articulated, ShadowPair)

    Gaussian evaluate(const Gaussian& g, std::size_t index, double t) const;
    GaussianSet evaluate(const GaussianSet& canonical, double t) const;

    std::string to_json() const;
    static SyntheticMotion from_json(const std::string& text);
};

struct GeneratedScene {
    GaussianSet canonical;  ///< aabb covers every frame, with margin
    SyntheticMotion motion;
    int frames = 0;
    TimeRange t_range;

    /// Frame k of `frames` sits at t = k / (frames - 1).
    double frame_time(int k) const;
    SceneFile to_file() const;
    static GeneratedScene from_file(const SceneFile& file);
};

struct SceneSpec {
    MotionKind kind = MotionKind::Rigid;
    int gaussians = 500;
    int frames = 20;
    double max_angle = 0.7853981633974483;  ///< 45 degrees
    double max_translation = 0.2;
    double amplitude = 0.05;
    double scale_min = 0.015, scale_max = 0.035;
};

/// Random canonical Gaussians in [0.15, 0.85]^3 plus a random motion of
/// `spec.kind`.
GeneratedScene generate_scene(const SceneSpec& spec, Rng& rng);

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Regularizer { Feature, None, DecoderOutput };
std::string_view to_string(Regularizer r);
Regularizer regularizer_from_string(std::string_view name);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
};

/// Every knob of a training run. Serialized as `key = value` lines (see
/// configs/ and docs/formats.md); `set()` rejects unknown keys.
struct TrainConfig {
    std::uint64_t seed = 0;
    int total_steps = 5000;
    int warmup_steps = 100;
    double lambda_c = 0.2;  ///< photometric weight; reported only
    double lambda_r = 0.5;
    double reg_sample_fraction = 0.25;
    /// Perturbation half-widths in normalized units. Zero means half a finest
    /// cell: 1 / (2 N_max) spatially, 1 / (2 n_max_t) in time.
    double reg_eps_xyz = 0.0;
    double reg_eps_t = 0.0;
    double reg_spatial_eps = 0.0;  ///< spatial-grid perturbation; 0 = reg_eps_xyz
    double reg_spatial_weight = 1.0;
    Regularizer regularizer = Regularizer::Feature;

    double gamma_s = 0.1;
    double gamma_r = 0.1;

    double lr_decoder = 1e-3;
    double lr_final_ratio = 0.1;
    double encoder_lr_multiplier = 20.0;
    AdamConfig adam;

    // model
    EncoderKind encoder = EncoderKind::Decomposed;
    int spatial_levels = 16;
    int spatial_n_min = 16;
    int spatial_n_max = 2048;
    int temporal_levels = 32;
    int temporal_n_min = 16;  ///< spatial axes of the temporal grids
    int temporal_n_max = 2048;
    int time_n_min = 0;  ///< 0 = min(4, time_n_max)
    int time_n_max = 0;  ///< 0 = ceil(frames / 2)
    int table_size_log2 = 19;
    int feat_dim = 2;
    double grid_init = 1e-4;
    NetworkConfig network;

    // scene generation (train without --scene)
    SceneSpec scene;
    std::uint64_t scene_seed = 1;

    int log_every = 1;

    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    static const std::vector<std::string>& keys();
    /// One `key = value` line per key in keys() order.
    std::string to_text() const;
    static TrainConfig from_text(const std::string& text);
    static TrainConfig from_file(const std::filesystem::path& path);
    void validate() const;

    DecomposedConfig grid_configs(int frames) const;
    double eps_xyz(int frames) const;
    double eps_t(int frames) const;
};

/// Builds the encoder and network described by `cfg`, initialized from `rng`.
DeformationModel build_model(const TrainConfig& cfg, const GeneratedScene& scene, Rng& rng);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct SupervisionLoss {
    double value = 0.0;
    double position = 0.0;  ///< mean squared position error
    double scale = 0.0;
    double rotation = 0.0;
    std::vector<DeformedGrad> grads;
};

/// mean|mu' - mu*|^2 + gamma_s mean|s' - s*|^2 + gamma_r mean min(|q' - q*|^2, |q' + q*|^2).
SupervisionLoss supervision_loss(std::span<const Gaussian> pred, std::span<const Gaussian> truth, double gamma_s,
                                 double gamma_r);

struct RegPerturbation {
    double eps_x = 0.0, eps_y = 0.0, eps_z = 0.0, eps_t = 0.0;
    double spatial_eps = 0.0;     ///< spatial grid's half-width on x, y, z
    double spatial_weight = 1.0;  ///< weight of the spatial grid's term
};

/// Mean over the batch of |G(u) - G(u + e)|^2 with e uniform in the
/// per-axis box, perturbed inputs clamped to [0,1]. When `grads` is given,
/// `grad_scale` times the gradient is accumulated into it.
/// Perturbation widths used by training's smoothness term.
RegPerturbation perturbation_of(const TrainConfig& cfg, int frames);

double smooth_reg_loss(const SpaceTimeEncoder& enc, std::span<const NormalizedCoord4> batch,
                       const RegPerturbation& eps, Rng& rng, std::vector<GridGradients>* grads = nullptr,
                       double grad_scale = 1.0);

/// Mean over the batch of |R_x(u) - R_x(u')|^2 + |T_x(u) - T_x(u')|^2 on the
/// raw decoder outputs, u' = u perturbed in x, y, z, t.
double decoder_output_reg(const DeformationModel& model, std::span<const NormalizedCoord4> batch,
                          const RegPerturbation& eps, Rng& rng, DeformNet::Grads* net_grads = nullptr,
                          std::vector<GridGradients>* grid_grads = nullptr, double grad_scale = 1.0);

/// sup + lambda_r * reg.
double total_loss(double sup, double reg, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// Adam over a set of dense double buffers.
class DenseAdam {
public:
    explicit DenseAdam(AdamConfig cfg = {}) : cfg_(cfg) {}
    void add(std::span<double> params);
    /// grads[i] matches the i-th added buffer. Throws DivergenceError on a
    /// non-finite gradient without touching any parameter.
    void step(const std::vector<std::span<const double>>& grads, double lr);
    int steps() const { return t_; }
    /// Keep a copy of the parameters from before each step so undo() can
    /// restore them.
    void enable_undo() { keep_previous_ = true; }
    void undo();
    const std::vector<std::vector<double>>& first_moment() const { return m_; }
    const std::vector<std::vector<double>>& second_moment() const { return v_; }

private:
    AdamConfig cfg_;
    int t_ = 0;
    bool keep_previous_ = false;
    std::vector<std::span<double>> params_;
    std::vector<std::vector<double>> m_, v_, previous_;
};

/// Adam over a hash grid's float tables. Rows never touched by a gradient
/// have zero moments and therefore a zero update, so only rows that have ever
/// been touched are visited; the result equals dense Adam exactly.
class GridAdam {
public:
    GridAdam(HashGrid& grid, AdamConfig cfg = {});
    void step(const GridGradients& grads, double lr);
    int steps() const { return t_; }
    void enable_undo() { keep_previous_ = true; }
    /// Restores the rows written by the last step.
    void undo();

private:
    HashGrid* grid_;
    AdamConfig cfg_;
    int t_ = 0;
    std::vector<float> m_, v_;
    std::vector<std::uint8_t> active_;
    std::vector<std::uint64_t> active_rows_;
    bool keep_previous_ = false;
    std::vector<float> previous_;
};

/// lr0 * final_ratio^(step / total_steps).
double decayed_lr(double lr0, double final_ratio, int step, int total_steps);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct MetricRow {
    int step = 0;
    double sup_loss = 0.0;
    double reg_loss = 0.0;
    double total = 0.0;
    double lr_decoder = 0.0;
    double lr_grid = 0.0;
};

std::string metrics_csv(const std::vector<MetricRow>& rows);

/// Gradients of the full objective at one training step.
struct StepGradients {
    DeformNet::Grads net;
    std::vector<GridGradients> grids;
};

struct StepLosses {
    double sup = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

/// Loss and (optionally) gradients of sup + lambda_r * reg at time t.
/// `reg_rng` drives both the regularization subset and the perturbations, so
/// equal generator state gives an identical objective.
StepLosses evaluate_objective(const DeformationModel& model, const GeneratedScene& scene, double t,
                              const TrainConfig& cfg, Rng reg_rng, StepGradients* grads);

struct TrainResult {
    DeformationModel model;
    std::vector<MetricRow> log;
};

/// Static warmup (deformation bypassed; only the grid regularizer is
/// optimized), then full-timeline training with one random frame per step.
/// On divergence the last good model is written to `divergence_dir` (when
/// given) and DivergenceError is rethrown.
TrainResult train(const TrainConfig& cfg, const GeneratedScene& scene,
                  const std::optional<std::filesystem::path>& divergence_dir = std::nullopt);

/// Writes model/, metrics.csv and config.txt into `dir`.
void save_checkpoint(const std::filesystem::path& dir, const TrainResult& result, const TrainConfig& cfg);

/// Mean |mu'_pred - mu'_true| over all Gaussians and frames.
double mean_position_error(const DeformationModel& model, const GeneratedScene& scene);

/// Mean over all Gaussians and frames of |G(u) - G(u + e)|^2 with a fixed
/// draw of e; compares how smooth two encoders are.
double perturbation_feature_distance(const SpaceTimeEncoder& enc, const GeneratedScene& scene,
                                     const DeformationModel& model, const RegPerturbation& eps, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GroupCheck {
    std::string group;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    std::string worst;  ///< parameter with the largest error
};

struct GradientCheckReport {
    std::vector<GroupCheck> groups;
    double tolerance = 0.0;
    std::size_t nudged_gaussians = 0;
    bool passed() const;
    std::vector<std::string> offenders() const;
};

struct GradientCheckOptions {
    double step = 1e-4;
    double tolerance = 1e-4;
    std::size_t max_per_group = 400;
    double t = 0.5;
    std::uint64_t seed = 7;
};

/// Shrunken pipeline for gradient checks: 4 levels per grid, N 4..32,
/// 2^12 rows, widths 16, decoder depth 2, perturbation 0.02.
TrainConfig shrunken_check_config();

/// Builds a model for `cfg` and replaces the warmup-friendly init with one
/// that exercises every path: tables U(-0.5, 0.5), all layers Kaiming with
/// heads scaled by 0.1.
DeformationModel build_check_model(const TrainConfig& cfg, const GeneratedScene& scene, Rng& rng);

/// Central differences on every parameter group of `model` against the
/// analytic gradient of sup + lambda_r * reg at time `opts.t`. Canonical
/// positions whose network pre-activations sit within a small margin of a
/// ReLU or scale-clamp kink are nudged by 1e-3 (in x) until clear.
GradientCheckReport gradient_check(DeformationModel& model, GeneratedScene scene, const TrainConfig& cfg,
                                   const GradientCheckOptions& opts = {});

}  // namespace grid4d
