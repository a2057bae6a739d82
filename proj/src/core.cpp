// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace grid4d {

namespace {
constexpr double kMinQuatNorm = 1e-12;
}

Quat Quat::from_axis_angle(const Vec3& axis, double angle) {
    const double n = axis.norm();
    if (n < kMinQuatNorm) throw InvalidRotation("from_axis_angle: zero axis");
    const Vec3 a = axis / n;
    const double s = std::sin(0.5 * angle);
    return {std::cos(0.5 * angle), s * a.x(), s * a.y(), s * a.z()};
}

double Quat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quat quat_mul(const Quat& a, const Quat& b) {
    return {
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    };
}

Quat quat_normalize(const Quat& q) {
    const double n = q.norm();
    if (!(n >= kMinQuatNorm)) throw InvalidRotation("quaternion norm is zero or not finite");
    const double inv = 1.0 / n;
    return inv * q;
}

Vec3 quat_rotate(const Quat& q_in, const Vec3& v) {
    const double n = q_in.norm();
    if (!(n >= kMinQuatNorm)) throw InvalidRotation("quat_rotate: zero quaternion");
    const Quat q = (n == 1.0) ? q_in : (1.0 / n) * q_in;
    const Vec3 u(q.x, q.y, q.z);
    const Vec3 uv = u.cross(v);
    return v + 2.0 * q.w * uv + 2.0 * u.cross(uv);
}

Mat3 quat_to_matrix(const Quat& q_in) {
    const Quat q = quat_normalize(q_in);
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    Mat3 m;
    m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return m;
}

bool Gaussian::valid() const {
    const bool finite = mu.allFinite() && scale.allFinite() && color.allFinite() && std::isfinite(opacity);
    return finite && (scale.array() > 0.0).all() && opacity >= 0.0 && opacity <= 1.0 &&
           std::abs(rot.norm() - 1.0) < 1e-6;
}

bool Aabb::strictly_contains(const Vec3& p) const {
    return (p.array() > min.array()).all() && (p.array() < max.array()).all();
}

Aabb Aabb::expanded(double fraction) const {
    Vec3 pad = fraction * extent();
    // A flat axis still gets a usable extent.
    for (int i = 0; i < 3; ++i)
        if (pad[i] <= 0.0) pad[i] = fraction;
    return {min - pad, max + pad};
}

Aabb Aabb::bounding(const std::vector<Vec3>& points) {
    if (points.empty()) throw ContractViolation("Aabb::bounding: no points");
    Aabb box{points.front(), points.front()};
    for (const auto& p : points) {
        box.min = box.min.cwiseMin(p);
        box.max = box.max.cwiseMax(p);
    }
    return box;
}

std::vector<Vec3> GaussianSet::positions() const {
    std::vector<Vec3> out;
    out.reserve(gaussians.size());
    for (const auto& g : gaussians) out.push_back(g.mu);
    return out;
}

NormalizedCoord4 clamp_unit(const NormalizedCoord4& u) {
    auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
    return {c(u.x), c(u.y), c(u.z), c(u.t)};
}

NormalizedCoord4 normalize_coord(const Vec3& p, double t, const Aabb& aabb, const TimeRange& t_range) {
    const Vec3 ext = aabb.extent();
    for (int i = 0; i < 3; ++i)
        if (!(ext[i] > 0.0)) throw ConfigError("normalize_coord: degenerate AABB axis " + std::to_string(i));
    const double t_len = t_range.max - t_range.min;
    if (!(t_len > 0.0)) throw ConfigError("normalize_coord: degenerate time range");
    return clamp_unit({(p.x() - aabb.min.x()) / ext.x(), (p.y() - aabb.min.y()) / ext.y(),
                       (p.z() - aabb.min.z()) / ext.z(), (t - t_range.min) / t_len});
}

// ---------------------------------------------------------------------------

std::uint64_t Rng::mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() {
    ++counter_;
    return mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw ContractViolation("Rng::below(0)");
    // Rejection sampling keeps the result unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
        r = next_u64();
    } while (r >= limit);
    return r % n;
}

double Rng::normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::split(std::uint64_t stream_id) const { return Rng(mix64(seed_ ^ mix64(stream_id + 0x632BE59BD9B4E019ULL))); }

Quat random_rotation(Rng& rng) {
    // Shoemake's subgroup algorithm.
    const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
    const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
    const double two_pi = 2.0 * std::numbers::pi;
    return quat_normalize({b * std::cos(two_pi * u3), a * std::sin(two_pi * u2), a * std::cos(two_pi * u2),
                           b * std::sin(two_pi * u3)});
}

// ---------------------------------------------------------------------------
// Scene JSON

namespace {

using nlohmann::json;

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec3(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 3) throw ConfigError(std::string("scene: expected 3-array for ") + what);
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

void save_scene(const std::filesystem::path& path, const SceneFile& scene) {
    json gs = json::array();
    for (const auto& g : scene.set.gaussians) {
        gs.push_back({{"mu", vec_json(g.mu)},
                      {"scale", vec_json(g.scale)},
                      {"rot", json::array({g.rot.w, g.rot.x, g.rot.y, g.rot.z})},
                      {"opacity", g.opacity},
                      {"color", vec_json(g.color)}});
    }
    json root{{"gaussians", std::move(gs)},
              {"aabb", {{"min", vec_json(scene.set.aabb.min)}, {"max", vec_json(scene.set.aabb.max)}}},
              {"t_range", json::array({scene.t_range.min, scene.t_range.max})},
              {"frames", scene.frames}};
    if (!scene.motion_json.empty()) root["motion"] = json::parse(scene.motion_json);

    std::ofstream out(path);
    if (!out) throw IoError("cannot write scene file " + path.string());
    out << root.dump(1) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

SceneFile load_scene(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read scene file " + path.string());
    json root;
    try {
        root = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("scene " + path.string() + ": " + e.what());
    }
    SceneFile scene;
    try {
        for (const auto& jg : root.at("gaussians")) {
            Gaussian g;
            g.mu = json_vec3(jg.at("mu"), "mu");
            g.scale = json_vec3(jg.at("scale"), "scale");
            const auto& r = jg.at("rot");
            if (!r.is_array() || r.size() != 4) throw ConfigError("scene: rot must have 4 entries (w first)");
            g.rot = quat_normalize({r[0].get<double>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>()});
            g.opacity = jg.at("opacity").get<double>();
            g.color = json_vec3(jg.at("color"), "color");
            if (!g.valid()) throw ConfigError("scene: Gaussian with out-of-range attributes");
            scene.set.gaussians.push_back(g);
        }
        scene.set.aabb.min = json_vec3(root.at("aabb").at("min"), "aabb.min");
        scene.set.aabb.max = json_vec3(root.at("aabb").at("max"), "aabb.max");
        const auto& tr = root.at("t_range");
        scene.t_range = {tr.at(0).get<double>(), tr.at(1).get<double>()};
        scene.frames = root.value("frames", 0);
        if (root.contains("motion")) scene.motion_json = root["motion"].dump();
    } catch (const json::exception& e) {
        throw ConfigError("scene " + path.string() + ": " + e.what());
    }
    return scene;
}

}  // namespace grid4d
