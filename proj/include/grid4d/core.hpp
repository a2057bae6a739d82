// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace grid4d {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// ---------------------------------------------------------------------------
// Error types. Everything in the library reports failure by throwing one of
// these; the CLI maps them onto exit codes.
// ---------------------------------------------------------------------------

/// Invalid configuration value or combination (exit code 1 at the CLI).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Caller broke a documented precondition (shape, range).
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

/// Quaternion with (near) zero norm where a rotation was required.
struct InvalidRotation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite value reached during optimization.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Quaternions, stored (w, x, y, z) everywhere in this project.
// ---------------------------------------------------------------------------

struct Quat {
    double w = 1.0;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    static constexpr Quat identity() { return {1.0, 0.0, 0.0, 0.0}; }
    static Quat from_axis_angle(const Vec3& axis, double angle);

    double norm() const;
    std::array<double, 4> to_array() const { return {w, x, y, z}; }
    static Quat from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }

    friend Quat operator+(const Quat& a, const Quat& b) { return {a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend Quat operator-(const Quat& a, const Quat& b) { return {a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend Quat operator*(double s, const Quat& q) { return {s * q.w, s * q.x, s * q.y, s * q.z}; }
    friend bool operator==(const Quat&, const Quat&) = default;
};

/// Hamilton product a ⊗ b (apply b first, then a).
Quat quat_mul(const Quat& a, const Quat& b);

/// Throws InvalidRotation when |q| is below 1e-12.
Quat quat_normalize(const Quat& q);

/// R(q)·v for a unit quaternion. Throws InvalidRotation on a zero quaternion;
/// a non-unit q is normalized first.
Vec3 quat_rotate(const Quat& q, const Vec3& v);

Mat3 quat_to_matrix(const Quat& q);

// ---------------------------------------------------------------------------
// Scene representation
// ---------------------------------------------------------------------------

struct Gaussian {
    Vec3 mu = Vec3::Zero();
    Vec3 scale = Vec3::Constant(0.01);
    Quat rot = Quat::identity();
    double opacity = 1.0;
    Vec3 color = Vec3::Zero();

    /// Checks the documented attribute ranges.
    bool valid() const;
};

struct Aabb {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Ones();

    Vec3 extent() const { return max - min; }
    bool strictly_contains(const Vec3& p) const;
    /// Grows each axis by `fraction` of its extent on both sides.
    Aabb expanded(double fraction) const;
    static Aabb bounding(const std::vector<Vec3>& points);
};

struct TimeRange {
    double min = 0.0;
    double max = 1.0;
};

/// Relative margin added around the positions when building a scene AABB.
inline constexpr double kAabbMargin = 0.01;

struct GaussianSet {
    std::vector<Gaussian> gaussians;
    Aabb aabb;

    std::size_t size() const { return gaussians.size(); }
    std::vector<Vec3> positions() const;
};

struct NormalizedCoord4 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double t = 0.0;

    double operator[](int axis) const { return std::array<double, 4>{x, y, z, t}[static_cast<std::size_t>(axis)]; }
    friend bool operator==(const NormalizedCoord4&, const NormalizedCoord4&) = default;
};

/// Affine map of (p, t) into [0,1]^4 using the scene bounds, clamped.
/// Throws ConfigError if an AABB axis or the time range has zero extent.
NormalizedCoord4 normalize_coord(const Vec3& p, double t, const Aabb& aabb, const TimeRange& t_range);

/// Clamps every component into [0,1].
NormalizedCoord4 clamp_unit(const NormalizedCoord4& u);

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// Counter-based SplitMix64: the i-th draw of a stream with seed s is
// mix64(s + (i + 1) * 0x9E3779B97F4A7C15). Only 64-bit integer arithmetic is
// involved, so streams are bit-identical across compilers and platforms.
// Doubles take the top 53 bits.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller (consumes two draws).
    double normal();

    /// Independent stream derived from this generator's seed and `stream_id`.
    Rng split(std::uint64_t stream_id) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    static std::uint64_t mix64(std::uint64_t z);

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

/// Unit quaternion drawn uniformly over SO(3).
Quat random_rotation(Rng& rng);

// ---------------------------------------------------------------------------
// Scene JSON
// ---------------------------------------------------------------------------

/// Fields as stored in a scene file; `motion` is kept as an opaque JSON string
/// so that the training module owns its schema.
struct SceneFile {
    GaussianSet set;
    TimeRange t_range;
    int frames = 0;
    std::string motion_json;
};

void save_scene(const std::filesystem::path& path, const SceneFile& scene);
SceneFile load_scene(const std::filesystem::path& path);

}  // namespace grid4d
