// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "grid4d/core.hpp"
#include "grid4d/encoders.hpp"

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace grid4d {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

/// Fully connected layer, y = W x + b, with batch inputs stored one sample
/// per column.
struct Linear {
    std::string name;
    MatX weight;  // out x in
    VecX bias;    // out

    Linear() = default;
    Linear(std::string name, Eigen::Index in, Eigen::Index out);

    Eigen::Index in_dim() const { return weight.cols(); }
    Eigen::Index out_dim() const { return weight.rows(); }
    MatX forward(const MatX& x) const;
    /// Kaiming-uniform weights (bound sqrt(6 / fan_in)) and biases in
    /// +-1/sqrt(fan_in).
    void init_kaiming(Rng& rng);
    void zero();
    bool finite() const { return weight.allFinite() && bias.allFinite(); }
};

struct LinearGrad {
    MatX weight;
    VecX bias;
    void resize_like(const Linear& l);
    void set_zero();
};

/// How spatial and temporal features are merged before decoding.
enum class AttentionMode {
    Directional,  ///< a = 2 sigmoid(f_s(s)) - 1, h = a * f_t(temporal)
    Unit,         ///< a = sigmoid(f_s(s)), range (0, 1)
    Concat,       ///< no attention: decoder reads [spatial; temporal]
};

/// How R_x and T_x act on positions.
enum class PositionMode {
    RotationTranslation,  ///< mu' = R_x mu + T_x
    Additive,             ///< mu' = mu + T_x (R_x head unused)
};

std::string_view to_string(AttentionMode m);
std::string_view to_string(PositionMode m);
/// "directional" | "unit" | "concat"; ConfigError otherwise.
AttentionMode attention_mode_from_string(std::string_view name);
/// "rt" | "additive"; ConfigError otherwise.
PositionMode position_mode_from_string(std::string_view name);

struct NetworkConfig {
    int feature_width = 256;  ///< output width of f_s and f_t
    int decoder_depth = 1;    ///< layers including the output heads
    int decoder_width = 256;  ///< trunk width when depth > 1
    AttentionMode attention = AttentionMode::Directional;
    PositionMode position = PositionMode::RotationTranslation;
};

/// Per-Gaussian deformation emitted by the decoder heads.
struct DeformationOutput {
    Quat r_x = Quat::identity();  ///< identity + raw head output, not yet normalized
    Vec3 t_x = Vec3::Zero();
    Quat delta_r{0.0, 0.0, 0.0, 0.0};
    Vec3 delta_s = Vec3::Zero();

    static constexpr int kRawWidth = 14;
    static DeformationOutput from_raw(std::span<const double, kRawWidth> raw);
    bool finite() const;
};

/// d(loss)/d(raw head outputs) in DeformationOutput layout.
using RawGrad = std::array<double, DeformationOutput::kRawWidth>;

inline constexpr double kMinScale = 1e-6;

/// mu' = R(normalize(r_x)) mu + t_x, scale' = max(scale + delta_s, 1e-6),
/// rot' = normalize(rot + delta_r). Opacity and color are copied unchanged.
Gaussian apply_deformation(const Gaussian& g, const DeformationOutput& d);
/// "w/o RT" variant: mu' = mu + t_x.
Gaussian apply_deformation_additive(const Gaussian& g, const DeformationOutput& d);
Gaussian apply_deformation(const Gaussian& g, const DeformationOutput& d, PositionMode mode);

/// Gradient of a loss w.r.t. the deformed attributes of one Gaussian.
struct DeformedGrad {
    Vec3 mu = Vec3::Zero();
    Vec3 scale = Vec3::Zero();
    Quat rot{0.0, 0.0, 0.0, 0.0};
};

/// Chain rule through apply_deformation back to the raw head outputs.
RawGrad apply_deformation_backward(const Gaussian& g, const DeformationOutput& d, const DeformedGrad& grad,
                                   PositionMode mode);

/// Spatial MLP, temporal MLP and multi-head decoder.
class DeformNet {
public:
    DeformNet() = default;
    DeformNet(const NetworkConfig& cfg, std::size_t spatial_dim, std::size_t temporal_dim);

    const NetworkConfig& config() const { return cfg_; }
    std::size_t spatial_dim() const { return spatial_dim_; }
    std::size_t temporal_dim() const { return temporal_dim_; }
    std::size_t decoder_input_dim() const;

    /// Trunk and f_s/f_t Kaiming-uniform; heads zero.
    void init(Rng& rng);

    struct Cache {
        MatX spatial, temporal;      // inputs
        MatX sigmoid;                // sigmoid(f_s(spatial)) before rescaling
        MatX attention;              // a (Directional / Unit)
        MatX temporal_act;           // f_t output after ReLU
        std::vector<MatX> trunk_in;  // input of each trunk layer, then of the heads
        std::vector<MatX> trunk_pre; // pre-activation of each trunk layer
        MatX raw;                    // 14 x B
    };

    /// Batch forward; columns are samples. Returns the 14 x B raw head output.
    const MatX& forward(const MatX& spatial, const MatX& temporal, Cache& cache) const;

    /// Attention scores for a batch (Directional or Unit only).
    MatX attention_scores(const MatX& spatial) const;
    /// h = a * f_t(temporal); Concat mode returns [spatial; temporal].
    MatX aggregate(const MatX& attention, const MatX& spatial, const MatX& temporal) const;

    struct Grads {
        std::vector<LinearGrad> layers;  // aligned with layers()
        MatX spatial, temporal;          // d(loss)/d(inputs)
    };
    Grads make_grads() const;
    /// Accumulates weight gradients into `grads` and overwrites its input
    /// gradients, given d(loss)/d(raw) (14 x B).
    void backward(const Cache& cache, const MatX& d_raw, Grads& grads) const;

    /// f_s, f_t (when present), trunk layers, then heads r_x, t_x, dr, ds.
    std::vector<Linear*> layers();
    std::vector<const Linear*> layers() const;
    /// Parameter group of a layer: "f_s", "f_t" or "decoder".
    static std::string group_of(const Linear& layer);

    bool finite() const;

    void save(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;
    static DeformNet load(std::istream& in);
    static DeformNet load(const std::filesystem::path& path);

private:
    NetworkConfig cfg_;
    std::size_t spatial_dim_ = 0;
    std::size_t temporal_dim_ = 0;
    Linear f_s_, f_t_;
    std::vector<Linear> trunk_;
    std::array<Linear, 4> heads_;
};

/// Encoder + network + the normalization that maps scene coordinates into the
/// encoder's unit domain.
class DeformationModel {
public:
    DeformationModel() = default;
    DeformationModel(SpaceTimeEncoder encoder, DeformNet net, Aabb aabb, TimeRange t_range);

    SpaceTimeEncoder& encoder() { return encoder_; }
    const SpaceTimeEncoder& encoder() const { return encoder_; }
    DeformNet& net() { return net_; }
    const DeformNet& net() const { return net_; }
    const Aabb& aabb() const { return aabb_; }
    const TimeRange& t_range() const { return t_range_; }
    PositionMode position_mode() const { return net_.config().position; }

    NormalizedCoord4 normalize(const Vec3& mu, double t) const { return normalize_coord(mu, t, aabb_, t_range_); }

    struct Batch {
        std::vector<NormalizedCoord4> inputs;
        DeformNet::Cache cache;
        std::vector<DeformationOutput> outputs;
    };
    /// Encodes and decodes every canonical position at time t.
    Batch forward(std::span<const Gaussian> canonical, double t) const;
    /// Same, starting from already normalized encoder inputs.
    Batch forward_normalized(std::vector<NormalizedCoord4> inputs) const;
    std::vector<DeformationOutput> predict(std::span<const Gaussian> canonical, double t) const;
    /// Canonical set deformed to time t.
    GaussianSet deform(const GaussianSet& canonical, double t) const;

    /// Backward from per-sample raw-output gradients (14 x B) into network
    /// gradients and one grid accumulator per encoder sub-grid.
    void backward(const Batch& batch, const MatX& d_raw, DeformNet::Grads& net_grads,
                  std::vector<GridGradients>& grid_grads) const;

    /// Writes encoder/ (grid blobs + manifest), network.bin and model.json.
    void save(const std::filesystem::path& dir) const;
    static DeformationModel load(const std::filesystem::path& dir);

private:
    SpaceTimeEncoder encoder_;
    DeformNet net_;
    Aabb aabb_;
    TimeRange t_range_;
};

inline constexpr double kDefaultMapTau = 0.05;

/// Finite-difference velocity (f(x, t + tau) - f(x, t)) / tau of a position
/// field, each component clamped to [-limit, limit]. Throws ContractViolation
/// when t + tau leaves [0, 1].
Vec3 deformation_map(const std::function<Vec3(const Vec3&, double)>& field, const Vec3& x, double t,
                     double tau = kDefaultMapTau, double limit = std::numeric_limits<double>::infinity());

/// CSV with columns id,x,y,z,t,dx,dy,dz for every Gaussian of `canonical`.
void export_deformation_map(const DeformationModel& model, const GaussianSet& canonical, double t, double tau,
                            double limit, const std::filesystem::path& path);

}  // namespace grid4d
