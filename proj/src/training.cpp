// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

namespace grid4d {

// ---------------------------------------------------------------------------
// Synthetic motion

std::string_view to_string(MotionKind kind) {
    switch (kind) {
        case MotionKind::Rigid: return "rigid";
        case MotionKind::Articulated: return "articulated";
        case MotionKind::Sinusoidal: return "sinusoidal";
        case MotionKind::ShadowPair: return "shadow-pair";
    }
    return "?";
}

MotionKind motion_kind_from_string(std::string_view name) {
    if (name == "rigid") return MotionKind::Rigid;
    if (name == "articulated") return MotionKind::Articulated;
    if (name == "sinusoidal") return MotionKind::Sinusoidal;
    if (name == "shadow-pair") return MotionKind::ShadowPair;
    throw ConfigError("unknown motion kind '" + std::string(name) + "'");
}

namespace {

// Rotation about `center` written as an offset so that an identity rotation
// leaves mu bit-exact.
Gaussian rotate_about(const Gaussian& g, const Quat& q, const Vec3& center, const Vec3& shift) {
    Gaussian out = g;
    const Vec3 rel = g.mu - center;
    out.mu = g.mu + (quat_rotate(q, rel) - rel) + shift;
    out.rot = quat_mul(q, g.rot);
    return out;
}

int part_of(const SyntheticMotion& m, std::size_t index) {
    if (index >= m.part.size()) throw ContractViolation("motion: Gaussian index has no part assignment");
    return m.part[index];
}

}  // namespace

Gaussian SyntheticMotion::evaluate(const Gaussian& g, std::size_t index, double t) const {
    switch (kind) {
        case MotionKind::Rigid:
            return rotate_about(g, Quat::from_axis_angle(axis, angle * t), center, translation * t);
        case MotionKind::Articulated: {
            const double sign = part_of(*this, index) == 0 ? 1.0 : -1.0;
            return rotate_about(g, Quat::from_axis_angle(axis, sign * angle * t), center, Vec3::Zero());
        }
        case MotionKind::Sinusoidal: {
            constexpr double k2Pi = 2.0 * std::numbers::pi;
            Gaussian out = g;
            const Vec3 wave(std::sin(k2Pi * g.mu.y()), std::sin(k2Pi * g.mu.z()), std::sin(k2Pi * g.mu.x()));
            out.mu = g.mu + amplitude * std::sin(k2Pi * t) * wave;
            return out;
        }
        case MotionKind::ShadowPair: {
            const double sign = part_of(*this, index) == 0 ? 1.0 : -1.0;
            Gaussian out = g;
            out.mu = g.mu + (sign * std::sin(std::numbers::pi * t)) * translation;
            return out;
        }
    }
    return g;
}

GaussianSet SyntheticMotion::evaluate(const GaussianSet& canonical, double t) const {
    GaussianSet out;
    out.aabb = canonical.aabb;
    out.gaussians.reserve(canonical.size());
    for (std::size_t i = 0; i < canonical.size(); ++i) out.gaussians.push_back(evaluate(canonical.gaussians[i], i, t));
    return out;
}

std::string SyntheticMotion::to_json() const {
    nlohmann::json j;
    j["kind"] = std::string(to_string(kind));
    j["axis"] = {axis.x(), axis.y(), axis.z()};
    j["angle"] = angle;
    j["translation"] = {translation.x(), translation.y(), translation.z()};
    j["center"] = {center.x(), center.y(), center.z()};
    j["amplitude"] = amplitude;
    j["part"] = part;
    return j.dump();
}

SyntheticMotion SyntheticMotion::from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        SyntheticMotion m;
        m.kind = motion_kind_from_string(j.at("kind").get<std::string>());
        auto vec = [&](const char* key) {
            const auto& a = j.at(key);
            return Vec3(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>());
        };
        m.axis = vec("axis");
        m.angle = j.at("angle").get<double>();
        m.translation = vec("translation");
        m.center = vec("center");
        m.amplitude = j.at("amplitude").get<double>();
        m.part = j.at("part").get<std::vector<int>>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("motion JSON: ") + e.what());
    }
}

double GeneratedScene::frame_time(int k) const {
    if (k < 0 || k >= frames) throw ContractViolation("frame_time: frame index out of range");
    if (frames == 1) return t_range.min;
    return t_range.min + (t_range.max - t_range.min) * static_cast<double>(k) / static_cast<double>(frames - 1);
}

SceneFile GeneratedScene::to_file() const { return SceneFile{canonical, t_range, frames, motion.to_json()}; }

GeneratedScene GeneratedScene::from_file(const SceneFile& file) {
    if (file.motion_json.empty()) throw IoError("scene file carries no motion description");
    GeneratedScene s;
    s.canonical = file.set;
    s.motion = SyntheticMotion::from_json(file.motion_json);
    s.frames = file.frames;
    s.t_range = file.t_range;
    if (s.frames < 1) throw IoError("scene file: frames must be >= 1");
    if ((s.motion.kind == MotionKind::Articulated || s.motion.kind == MotionKind::ShadowPair) &&
        s.motion.part.size() != s.canonical.size())
        throw IoError("scene file: part list does not match the Gaussian count");
    return s;
}

namespace {

Vec3 random_unit(Rng& rng) {
    for (;;) {
        const Vec3 v(rng.normal(), rng.normal(), rng.normal());
        if (v.norm() > 1e-6) return v.normalized();
    }
}

// Magnitude in [0.5, 1] x max with a random sign.
double random_magnitude(Rng& rng, double max) {
    const double m = rng.uniform(0.5, 1.0) * max;
    return rng.uniform() < 0.5 ? -m : m;
}

}  // namespace

GeneratedScene generate_scene(const SceneSpec& spec, Rng& rng) {
    if (spec.gaussians < 1) throw ConfigError("scene: need at least one Gaussian");
    if (spec.frames < 2) throw ConfigError("scene: need at least two frames");
    if (!(spec.scale_min > 0.0) || spec.scale_max < spec.scale_min) throw ConfigError("scene: bad scale range");

    GeneratedScene s;
    s.frames = spec.frames;
    s.t_range = TimeRange{0.0, 1.0};
    auto& m = s.motion;
    m.kind = spec.kind;

    const bool slabs = spec.kind == MotionKind::ShadowPair;
    for (int i = 0; i < spec.gaussians; ++i) {
        Gaussian g;
        g.mu = Vec3(rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85));
        if (slabs) {
            // Two thin interleaved layers: even ids below, odd ids above the midplane.
            const double z = rng.uniform(0.0, 0.25);
            g.mu.z() = i % 2 == 0 ? 0.5 - 0.05 - z : 0.5 + 0.05 + z;
        }
        g.scale = Vec3(rng.uniform(spec.scale_min, spec.scale_max), rng.uniform(spec.scale_min, spec.scale_max),
                       rng.uniform(spec.scale_min, spec.scale_max));
        g.rot = random_rotation(rng);
        g.opacity = rng.uniform(0.5, 0.95);
        g.color = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
        s.canonical.gaussians.push_back(g);
    }

    switch (spec.kind) {
        case MotionKind::Rigid:
            m.axis = random_unit(rng);
            m.angle = random_magnitude(rng, spec.max_angle);
            m.translation = random_unit(rng) * std::abs(random_magnitude(rng, spec.max_translation));
            break;
        case MotionKind::Articulated:
            m.axis = random_unit(rng);
            m.angle = random_magnitude(rng, spec.max_angle);
            for (const auto& g : s.canonical.gaussians) m.part.push_back(g.mu.x() < m.center.x() ? 0 : 1);
            break;
        case MotionKind::Sinusoidal: m.amplitude = spec.amplitude; break;
        case MotionKind::ShadowPair: {
            Vec3 dir = random_unit(rng);
            dir.z() = 0.0;  // slide within the layers
            if (dir.norm() < 1e-6) dir = Vec3::UnitX();
            m.translation = dir.normalized() * std::abs(random_magnitude(rng, spec.max_translation));
            for (int i = 0; i < spec.gaussians; ++i) m.part.push_back(i % 2);
            break;
        }
    }

    std::vector<Vec3> pts;
    for (int k = 0; k < s.frames; ++k)
        for (const auto& g : m.evaluate(s.canonical, s.frame_time(k)).gaussians) pts.push_back(g.mu);
    s.canonical.aabb = Aabb::bounding(pts).expanded(kAabbMargin);
    return s;
}

// ---------------------------------------------------------------------------
// Configuration

std::string_view to_string(Regularizer r) {
    switch (r) {
        case Regularizer::Feature: return "feature";
        case Regularizer::None: return "none";
        case Regularizer::DecoderOutput: return "decoder-output";
    }
    return "?";
}

Regularizer regularizer_from_string(std::string_view name) {
    if (name == "feature") return Regularizer::Feature;
    if (name == "none") return Regularizer::None;
    if (name == "decoder-output") return Regularizer::DecoderOutput;
    throw ConfigError("unknown regularizer '" + std::string(name) + "'");
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end || !std::isfinite(out))
        throw ConfigError("config: '" + key + "' expects a finite number, got '" + v + "'");
    return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
    Int out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

struct Field {
    std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

template <typename M>
Field dbl(M member) {
    return {[member](TrainConfig& c, const std::string& k, const std::string& v) { member(c) = parse_double(k, v); },
            [member](const TrainConfig& c) { return fmt_double(member(const_cast<TrainConfig&>(c))); }};
}

template <typename M>
Field integer(M member) {
    return {[member](TrainConfig& c, const std::string& k, const std::string& v) {
                using T = std::remove_reference_t<decltype(member(c))>;
                member(c) = parse_int<T>(k, v);
            },
            [member](const TrainConfig& c) { return std::to_string(member(const_cast<TrainConfig&>(c))); }};
}

template <typename M, typename Parse, typename Show>
Field enumerated(M member, Parse parse, Show show) {
    return {[=](TrainConfig& c, const std::string&, const std::string& v) { member(c) = parse(v); },
            [=](const TrainConfig& c) { return std::string(show(member(const_cast<TrainConfig&>(c)))); }};
}

#define G4D_REF(expr) [](TrainConfig& c) -> auto& { return expr; }

const std::vector<std::pair<std::string, Field>>& field_table() {
    static const std::vector<std::pair<std::string, Field>> table = {
        {"seed", integer(G4D_REF(c.seed))},
        {"total_steps", integer(G4D_REF(c.total_steps))},
        {"warmup_steps", integer(G4D_REF(c.warmup_steps))},
        {"lambda_c", dbl(G4D_REF(c.lambda_c))},
        {"lambda_r", dbl(G4D_REF(c.lambda_r))},
        {"reg_sample_fraction", dbl(G4D_REF(c.reg_sample_fraction))},
        {"reg_eps_xyz", dbl(G4D_REF(c.reg_eps_xyz))},
        {"reg_eps_t", dbl(G4D_REF(c.reg_eps_t))},
        {"reg_spatial_eps", dbl(G4D_REF(c.reg_spatial_eps))},
        {"reg_spatial_weight", dbl(G4D_REF(c.reg_spatial_weight))},
        {"regularizer", enumerated(G4D_REF(c.regularizer), [](const std::string& v) { return regularizer_from_string(v); },
                                   [](Regularizer r) { return to_string(r); })},
        {"gamma_s", dbl(G4D_REF(c.gamma_s))},
        {"gamma_r", dbl(G4D_REF(c.gamma_r))},
        {"lr_decoder", dbl(G4D_REF(c.lr_decoder))},
        {"lr_final_ratio", dbl(G4D_REF(c.lr_final_ratio))},
        {"encoder_lr_multiplier", dbl(G4D_REF(c.encoder_lr_multiplier))},
        {"adam_beta1", dbl(G4D_REF(c.adam.beta1))},
        {"adam_beta2", dbl(G4D_REF(c.adam.beta2))},
        {"adam_eps", dbl(G4D_REF(c.adam.eps))},
        {"encoder", enumerated(G4D_REF(c.encoder), [](const std::string& v) { return encoder_kind_from_string(v); },
                               [](EncoderKind k) { return to_string(k); })},
        {"spatial_levels", integer(G4D_REF(c.spatial_levels))},
        {"spatial_n_min", integer(G4D_REF(c.spatial_n_min))},
        {"spatial_n_max", integer(G4D_REF(c.spatial_n_max))},
        {"temporal_levels", integer(G4D_REF(c.temporal_levels))},
        {"temporal_n_min", integer(G4D_REF(c.temporal_n_min))},
        {"temporal_n_max", integer(G4D_REF(c.temporal_n_max))},
        {"time_n_min", integer(G4D_REF(c.time_n_min))},
        {"time_n_max", integer(G4D_REF(c.time_n_max))},
        {"table_size_log2", integer(G4D_REF(c.table_size_log2))},
        {"feat_dim", integer(G4D_REF(c.feat_dim))},
        {"grid_init", dbl(G4D_REF(c.grid_init))},
        {"feature_width", integer(G4D_REF(c.network.feature_width))},
        {"decoder_depth", integer(G4D_REF(c.network.decoder_depth))},
        {"decoder_width", integer(G4D_REF(c.network.decoder_width))},
        {"attention", enumerated(G4D_REF(c.network.attention),
                                 [](const std::string& v) { return attention_mode_from_string(v); },
                                 [](AttentionMode m) { return to_string(m); })},
        {"position", enumerated(G4D_REF(c.network.position),
                                [](const std::string& v) { return position_mode_from_string(v); },
                                [](PositionMode m) { return to_string(m); })},
        {"scene_kind", enumerated(G4D_REF(c.scene.kind), [](const std::string& v) { return motion_kind_from_string(v); },
                                  [](MotionKind k) { return to_string(k); })},
        {"scene_gaussians", integer(G4D_REF(c.scene.gaussians))},
        {"scene_frames", integer(G4D_REF(c.scene.frames))},
        {"scene_max_angle", dbl(G4D_REF(c.scene.max_angle))},
        {"scene_max_translation", dbl(G4D_REF(c.scene.max_translation))},
        {"scene_amplitude", dbl(G4D_REF(c.scene.amplitude))},
        {"scene_scale_min", dbl(G4D_REF(c.scene.scale_min))},
        {"scene_scale_max", dbl(G4D_REF(c.scene.scale_max))},
        {"scene_seed", integer(G4D_REF(c.scene_seed))},
        {"log_every", integer(G4D_REF(c.log_every))},
    };
    return table;
}

#undef G4D_REF

const Field& field(const std::string& key) {
    for (const auto& [k, f] : field_table())
        if (k == key) return f;
    throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, trim(value)); }

std::string TrainConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& TrainConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& [name, f] : field_table()) out.push_back(name);
        return out;
    }();
    return k;
}

std::string TrainConfig::to_text() const {
    std::string out;
    for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
    return out;
}

TrainConfig TrainConfig::from_text(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        cfg.set(trim(body.substr(0, eq)), body.substr(eq + 1));
    }
    return cfg;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

void TrainConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError("config: " + msg);
    };
    require(total_steps >= 0, "total_steps must be >= 0");
    require(warmup_steps >= 0 && warmup_steps <= total_steps, "warmup_steps must lie in [0, total_steps]");
    require(lambda_r >= 0.0, "lambda_r must be >= 0");
    require(lambda_c >= 0.0 && lambda_c <= 1.0, "lambda_c must lie in [0, 1]");
    require(reg_sample_fraction > 0.0 && reg_sample_fraction <= 1.0, "reg_sample_fraction must lie in (0, 1]");
    require(reg_eps_xyz >= 0.0 && reg_eps_t >= 0.0 && reg_spatial_eps >= 0.0, "perturbation widths must be >= 0");
    require(reg_spatial_weight >= 0.0, "reg_spatial_weight must be >= 0");
    require(gamma_s >= 0.0 && gamma_r >= 0.0, "gamma_s and gamma_r must be >= 0");
    require(lr_decoder > 0.0, "lr_decoder must be > 0");
    require(lr_final_ratio > 0.0, "lr_final_ratio must be > 0");
    require(encoder_lr_multiplier > 0.0, "encoder_lr_multiplier must be > 0");
    require(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0, "Adam betas must lie in [0, 1)");
    require(adam.eps > 0.0, "adam_eps must be > 0");
    require(table_size_log2 >= 1 && table_size_log2 <= 30, "table_size_log2 must lie in [1, 30]");
    require(feat_dim >= 1, "feat_dim must be >= 1");
    require(grid_init >= 0.0, "grid_init must be >= 0");
    require(log_every >= 1, "log_every must be >= 1");
    require(scene.gaussians >= 1 && scene.frames >= 2, "scene needs >= 1 Gaussian and >= 2 frames");
    require(network.feature_width >= 1 && network.decoder_width >= 1 && network.decoder_depth >= 1,
            "network widths and depth must be >= 1");
    if (network.attention != AttentionMode::Concat)
        require(encoder == EncoderKind::Decomposed || encoder == EncoderKind::SpatialHyper,
                "attention needs an encoder with a spatial grid (use attention = concat)");
    grid_configs(scene.frames).spatial.validate();
    grid_configs(scene.frames).temporal.validate();
}

DecomposedConfig TrainConfig::grid_configs(int frames) const {
    DecomposedConfig d;
    d.spatial = GridConfig::isotropic(3, spatial_levels, spatial_n_min, spatial_n_max, table_size_log2, feat_dim);
    d.temporal = GridConfig::isotropic(3, temporal_levels, temporal_n_min, temporal_n_max, table_size_log2, feat_dim);
    const int t_max = time_n_max > 0 ? time_n_max : std::max(1, (frames + 1) / 2);
    const int t_min = time_n_min > 0 ? time_n_min : std::min(4, t_max);
    d.temporal.axes[2] = AxisSchedule{t_min, t_max};
    return d;
}

double TrainConfig::eps_xyz(int frames) const {
    (void)frames;
    return reg_eps_xyz > 0.0 ? reg_eps_xyz : 1.0 / (2.0 * std::max(spatial_n_max, temporal_n_max));
}

double TrainConfig::eps_t(int frames) const {
    return reg_eps_t > 0.0 ? reg_eps_t : 1.0 / (2.0 * grid_configs(frames).temporal.axes[2].n_max);
}

DeformationModel build_model(const TrainConfig& cfg, const GeneratedScene& scene, Rng& rng) {
    cfg.validate();
    const auto grids = cfg.grid_configs(scene.frames);
    GridConfig g4 = GridConfig::isotropic(4, cfg.temporal_levels, cfg.temporal_n_min, cfg.temporal_n_max,
                                          cfg.table_size_log2, cfg.feat_dim);
    g4.axes[3] = grids.temporal.axes[2];

    SpaceTimeEncoder enc;
    switch (cfg.encoder) {
        case EncoderKind::Decomposed: enc = SpaceTimeEncoder::decomposed(grids); break;
        case EncoderKind::Planes: {
            GridConfig plane = GridConfig::isotropic(2, cfg.temporal_levels, cfg.temporal_n_min, cfg.temporal_n_max,
                                                     cfg.table_size_log2, cfg.feat_dim);
            enc = SpaceTimeEncoder::planes(plane);
            break;
        }
        case EncoderKind::HyperGrid: enc = SpaceTimeEncoder::hypergrid(g4); break;
        case EncoderKind::SpatialHyper: enc = SpaceTimeEncoder::spatial_hyper(grids.spatial, g4); break;
    }
    enc.init_uniform(rng, cfg.grid_init);
    DeformNet net(cfg.network, enc.spatial_dim(), enc.temporal_dim());
    net.init(rng);
    return DeformationModel(std::move(enc), std::move(net), scene.canonical.aabb, scene.t_range);
}

// ---------------------------------------------------------------------------
// Losses

SupervisionLoss supervision_loss(std::span<const Gaussian> pred, std::span<const Gaussian> truth, double gamma_s,
                                 double gamma_r) {
    if (pred.size() != truth.size()) throw ContractViolation("supervision_loss: prediction and truth lengths differ");
    SupervisionLoss out;
    if (pred.empty()) return out;
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    out.grads.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const Gaussian& p = pred[i];
        const Gaussian& q = truth[i];
        const Vec3 dmu = p.mu - q.mu;
        const Vec3 ds = p.scale - q.scale;
        const Quat minus = p.rot - q.rot;
        const Quat plus = p.rot + q.rot;
        const auto sq = [](const Quat& a) { return a.w * a.w + a.x * a.x + a.y * a.y + a.z * a.z; };
        const double em = sq(minus), ep = sq(plus);
        const bool use_minus = em <= ep;
        out.position += dmu.squaredNorm();
        out.scale += ds.squaredNorm();
        out.rotation += use_minus ? em : ep;

        auto& g = out.grads[i];
        g.mu = (2.0 * inv_n) * dmu;
        g.scale = (2.0 * gamma_s * inv_n) * ds;
        g.rot = (2.0 * gamma_r * inv_n) * (use_minus ? minus : plus);
    }
    out.position *= inv_n;
    out.scale *= inv_n;
    out.rotation *= inv_n;
    out.value = out.position + gamma_s * out.scale + gamma_r * out.rotation;
    return out;
}

double smooth_reg_loss(const SpaceTimeEncoder& enc, std::span<const NormalizedCoord4> batch,
                       const RegPerturbation& eps, Rng& rng, std::vector<GridGradients>* grads, double grad_scale) {
    if (batch.empty()) return 0.0;
    const auto& grids = enc.grids();
    if (grads && grads->size() != grids.size()) throw ContractViolation("smooth_reg_loss: one accumulator per sub-grid");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    std::vector<double> a, b, diff;
    for (const auto& u : batch) {
        const std::array<double, 4> delta = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
                                             rng.uniform(-1.0, 1.0)};
        const NormalizedCoord4 moved = clamp_unit({u.x + delta[0] * eps.eps_x, u.y + delta[1] * eps.eps_y,
                                                   u.z + delta[2] * eps.eps_z, u.t + delta[3] * eps.eps_t});
        const NormalizedCoord4 moved_spatial =
            clamp_unit({u.x + delta[0] * eps.spatial_eps, u.y + delta[1] * eps.spatial_eps,
                        u.z + delta[2] * eps.spatial_eps, u.t});
        for (std::size_t gi = 0; gi < grids.size(); ++gi) {
            const auto& sg = grids[gi];
            const bool spatial = enc.has_spatial() && gi == 0;
            const double weight = spatial ? eps.spatial_weight : 1.0;
            const auto pu = SpaceTimeEncoder::project(u, sg.axes);
            const auto pv = SpaceTimeEncoder::project(spatial ? moved_spatial : moved, sg.axes);
            const std::span<const double> su(pu.data(), sg.axes.size()), sv(pv.data(), sg.axes.size());
            const std::size_t n = sg.grid.output_dim();
            a.resize(n);
            b.resize(n);
            diff.resize(n);
            sg.grid.encode(su, a);
            sg.grid.encode(sv, b);
            double sq = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                diff[k] = a[k] - b[k];
                sq += diff[k] * diff[k];
            }
            total += weight * sq;
            if (grads && grad_scale != 0.0 && weight != 0.0) {
                const double s = 2.0 * weight * inv_b * grad_scale;
                for (auto& d : diff) d *= s;
                sg.grid.encode_backward(su, diff, (*grads)[gi]);
                for (auto& d : diff) d = -d;
                sg.grid.encode_backward(sv, diff, (*grads)[gi]);
            }
        }
    }
    return total * inv_b;
}

double decoder_output_reg(const DeformationModel& model, std::span<const NormalizedCoord4> batch,
                          const RegPerturbation& eps, Rng& rng, DeformNet::Grads* net_grads,
                          std::vector<GridGradients>* grid_grads, double grad_scale) {
    if (batch.empty()) return 0.0;
    std::vector<NormalizedCoord4> base(batch.begin(), batch.end()), moved;
    moved.reserve(base.size());
    for (const auto& u : base) {
        const double dx = rng.uniform(-1.0, 1.0), dy = rng.uniform(-1.0, 1.0), dz = rng.uniform(-1.0, 1.0),
                     dt = rng.uniform(-1.0, 1.0);
        moved.push_back(clamp_unit({u.x + dx * eps.eps_x, u.y + dy * eps.eps_y, u.z + dz * eps.eps_z, u.t + dt * eps.eps_t}));
    }
    const auto ba = model.forward_normalized(std::move(base));
    const auto bb = model.forward_normalized(std::move(moved));
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const auto cols = static_cast<Eigen::Index>(batch.size());
    // R_x and T_x occupy the first seven raw outputs.
    const MatX diff = ba.cache.raw.topRows(7) - bb.cache.raw.topRows(7);
    const double loss = diff.squaredNorm() * inv_b;
    if (net_grads && grad_scale != 0.0) {
        std::vector<GridGradients> scratch;
        if (!grid_grads) {
            scratch = model.encoder().make_gradients();
            grid_grads = &scratch;
        }
        MatX d = MatX::Zero(DeformationOutput::kRawWidth, cols);
        d.topRows(7) = (2.0 * inv_b * grad_scale) * diff;
        model.backward(ba, d, *net_grads, *grid_grads);
        d = -d;
        model.backward(bb, d, *net_grads, *grid_grads);
    }
    return loss;
}

double total_loss(double sup, double reg, const TrainConfig& cfg) { return sup + cfg.lambda_r * reg; }

// ---------------------------------------------------------------------------
// Optimization

void DenseAdam::add(std::span<double> params) {
    params_.push_back(params);
    m_.emplace_back(params.size(), 0.0);
    v_.emplace_back(params.size(), 0.0);
}

void DenseAdam::step(const std::vector<std::span<const double>>& grads, double lr) {
    if (grads.size() != params_.size()) throw ContractViolation("DenseAdam: gradient count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].size() != params_[i].size()) throw ContractViolation("DenseAdam: gradient shape mismatch");
        for (double g : grads[i])
            if (!std::isfinite(g)) throw DivergenceError("Adam: non-finite gradient in parameter buffer " + std::to_string(i));
    }
    if (keep_previous_) {
        previous_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) previous_[i].assign(params_[i].begin(), params_[i].end());
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto& m = m_[i];
        auto& v = v_[i];
        auto p = params_[i];
        const auto g = grads[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
        }
    }
}

void DenseAdam::undo() {
    for (std::size_t i = 0; i < previous_.size(); ++i) std::copy(previous_[i].begin(), previous_[i].end(), params_[i].begin());
}

GridAdam::GridAdam(HashGrid& grid, AdamConfig cfg)
    : grid_(&grid), cfg_(cfg), m_(grid.param_count(), 0.0f), v_(grid.param_count(), 0.0f),
      active_(grid.param_count() / static_cast<std::size_t>(grid.config().feat_dim), 0) {}

void GridAdam::step(const GridGradients& grads, double lr) {
    const auto dense = grads.dense();
    if (dense.size() != m_.size()) throw ContractViolation("GridAdam: gradient buffer does not match the grid");
    const auto f = static_cast<std::size_t>(grid_->config().feat_dim);
    for (const auto row : grads.touched())
        for (std::size_t k = 0; k < f; ++k)
            if (!std::isfinite(dense[row * f + k])) throw DivergenceError("Adam: non-finite grid gradient");
    for (const auto row : grads.touched()) {
        if (!active_[row]) {
            active_[row] = 1;
            active_rows_.push_back(row);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const double step_size = lr / bc1;
    const double inv_bc2 = 1.0 / bc2;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2, c1 = 1.0 - cfg_.beta1, c2 = 1.0 - cfg_.beta2;
    float* params = grid_->params().data();
    float* m_data = m_.data();
    float* v_data = v_.data();
    const double* g_data = dense.data();
    if (keep_previous_) {
        previous_.resize(active_rows_.size() * f);
        float* prev = previous_.data();
        for (const auto row : active_rows_) prev = std::copy_n(params + row * f, f, prev);
    }
    for (const auto row : active_rows_) {
        const std::size_t begin = row * f;
        for (std::size_t i = begin; i < begin + f; ++i) {
            const double g = g_data[i];
            const double m = b1 * m_data[i] + c1 * g;
            const double v = b2 * v_data[i] + c2 * g * g;
            m_data[i] = static_cast<float>(m);
            v_data[i] = static_cast<float>(v);
            params[i] = static_cast<float>(params[i] - step_size * m / (std::sqrt(v * inv_bc2) + cfg_.eps));
        }
    }
}

void GridAdam::undo() {
    const auto f = static_cast<std::size_t>(grid_->config().feat_dim);
    if (previous_.size() != active_rows_.size() * f) return;
    float* params = grid_->params().data();
    const float* prev = previous_.data();
    for (const auto row : active_rows_) {
        std::copy_n(prev, f, params + row * f);
        prev += f;
    }
}

double decayed_lr(double lr0, double final_ratio, int step, int total_steps) {
    if (total_steps <= 0) return lr0;
    return lr0 * std::pow(final_ratio, static_cast<double>(step) / static_cast<double>(total_steps));
}

// ---------------------------------------------------------------------------
// Training

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out = "step,sup_loss,reg_loss,total,lr_decoder,lr_grid\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.sup_loss, r.reg_loss, r.total,
                      r.lr_decoder, r.lr_grid);
        out += buf;
    }
    return out;
}

RegPerturbation perturbation_of(const TrainConfig& cfg, int frames) {
    RegPerturbation p;
    p.eps_x = p.eps_y = p.eps_z = cfg.eps_xyz(frames);
    p.eps_t = cfg.eps_t(frames);
    p.spatial_eps = cfg.reg_spatial_eps > 0.0 ? cfg.reg_spatial_eps : p.eps_x;
    p.spatial_weight = cfg.reg_spatial_weight;
    return p;
}

namespace {

// Regularization subset: a partial Fisher-Yates draw of ceil(fraction * n) ids.
std::vector<NormalizedCoord4> reg_batch(const DeformationModel& model, const GaussianSet& canonical, double t,
                                        double fraction, Rng& rng) {
    const std::size_t n = canonical.size();
    const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
    std::vector<NormalizedCoord4> out;
    out.reserve(k);
    for (std::size_t i = 0; i < std::min(k, n); ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(ids[i], ids[j]);
        out.push_back(model.normalize(canonical.gaussians[ids[i]].mu, t));
    }
    return out;
}

double regularizer_value(const DeformationModel& model, std::span<const NormalizedCoord4> batch,
                         const TrainConfig& cfg, int frames, Rng& rng, StepGradients* grads) {
    const auto eps = perturbation_of(cfg, frames);
    const double scale = cfg.lambda_r;
    switch (cfg.regularizer) {
        case Regularizer::None: return 0.0;
        case Regularizer::Feature:
            return smooth_reg_loss(model.encoder(), batch, eps, rng, grads ? &grads->grids : nullptr, scale);
        case Regularizer::DecoderOutput:
            return decoder_output_reg(model, batch, eps, rng, grads ? &grads->net : nullptr,
                                      grads ? &grads->grids : nullptr, scale);
    }
    return 0.0;
}

}  // namespace

StepLosses evaluate_objective(const DeformationModel& model, const GeneratedScene& scene, double t,
                              const TrainConfig& cfg, Rng reg_rng, StepGradients* grads) {
    const auto& canonical = scene.canonical.gaussians;
    const auto batch = model.forward(canonical, t);
    std::vector<Gaussian> pred;
    pred.reserve(canonical.size());
    for (std::size_t i = 0; i < canonical.size(); ++i)
        pred.push_back(apply_deformation(canonical[i], batch.outputs[i], model.position_mode()));
    const auto truth = scene.motion.evaluate(scene.canonical, t);
    const auto sup = supervision_loss(pred, truth.gaussians, cfg.gamma_s, cfg.gamma_r);

    if (grads) {
        MatX d_raw(DeformationOutput::kRawWidth, static_cast<Eigen::Index>(canonical.size()));
        for (std::size_t i = 0; i < canonical.size(); ++i) {
            const RawGrad r = apply_deformation_backward(canonical[i], batch.outputs[i], sup.grads[i], model.position_mode());
            for (int k = 0; k < DeformationOutput::kRawWidth; ++k) d_raw(k, static_cast<Eigen::Index>(i)) = r[static_cast<std::size_t>(k)];
        }
        model.backward(batch, d_raw, grads->net, grads->grids);
    }

    StepLosses out;
    out.sup = sup.value;
    const auto rb = reg_batch(model, scene.canonical, t, cfg.reg_sample_fraction, reg_rng);
    out.reg = regularizer_value(model, rb, cfg, scene.frames, reg_rng, grads);
    out.total = total_loss(out.sup, out.reg, cfg);
    return out;
}

namespace {

void clear(StepGradients& g) {
    for (auto& l : g.net.layers) l.set_zero();
    for (auto& gg : g.grids) gg.clear();
}

bool grads_finite(const StepGradients& g) {
    for (const auto& l : g.net.layers)
        if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    for (const auto& gg : g.grids) {
        const auto dense = gg.dense();
        const auto f = static_cast<std::size_t>(gg.feat_dim());
        for (const auto row : gg.touched())
            for (std::size_t k = 0; k < f; ++k)
                if (!std::isfinite(dense[row * f + k])) return false;
    }
    return true;
}

[[noreturn]] void diverge(const std::string& why, const DeformationModel& model,
                          const std::optional<std::filesystem::path>& dir) {
    if (dir) model.save(*dir);
    throw DivergenceError(why + (dir ? " (last good model saved to " + dir->string() + ")" : std::string()));
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const GeneratedScene& scene,
                  const std::optional<std::filesystem::path>& divergence_dir) {
    cfg.validate();
    const Rng root(cfg.seed);
    Rng init_rng = root.split(1);
    Rng frame_rng = root.split(2);
    const Rng reg_root = root.split(3);

    TrainResult result{build_model(cfg, scene, init_rng), {}};
    DeformationModel& model = result.model;

    DenseAdam net_adam(cfg.adam);
    for (auto* l : model.net().layers()) {
        net_adam.add(std::span<double>(l->weight.data(), static_cast<std::size_t>(l->weight.size())));
        net_adam.add(std::span<double>(l->bias.data(), static_cast<std::size_t>(l->bias.size())));
    }
    std::vector<GridAdam> grid_adam;
    for (auto& sg : model.encoder().grids()) grid_adam.emplace_back(sg.grid, cfg.adam);
    // With a divergence directory the previous parameters are kept so the
    // saved model is the last one whose loss was finite.
    const bool keep_last_good = divergence_dir.has_value();
    if (keep_last_good) {
        net_adam.enable_undo();
        for (auto& a : grid_adam) a.enable_undo();
    }
    bool net_stepped = false;
    std::vector<std::uint8_t> grid_stepped(grid_adam.size(), 0);
    auto fail = [&](const std::string& why) {
        if (keep_last_good) {
            if (net_stepped) net_adam.undo();
            for (std::size_t i = 0; i < grid_adam.size(); ++i)
                if (grid_stepped[i]) grid_adam[i].undo();
        }
        diverge(why, model, divergence_dir);
    };

    StepGradients grads{model.net().make_grads(), model.encoder().make_gradients()};
    const double t0 = scene.t_range.min;

    for (int step = 0; step < cfg.total_steps; ++step) {
        const double lr = decayed_lr(cfg.lr_decoder, cfg.lr_final_ratio, step, cfg.total_steps);
        const double lr_grid = lr * cfg.encoder_lr_multiplier;
        Rng reg_rng = reg_root.split(static_cast<std::uint64_t>(step));
        clear(grads);
        StepLosses losses;
        const bool warmup = step < cfg.warmup_steps;
        try {
            if (warmup) {
                // Canonical fitting at t = 0: the deformation is the identity
                // by construction, so only the grid regularizer is optimized
                // and the decoder heads stay at zero.
                losses = evaluate_objective(model, scene, t0, cfg, reg_rng, nullptr);
                const auto rb = reg_batch(model, scene.canonical, t0, cfg.reg_sample_fraction, reg_rng);
                regularizer_value(model, rb, cfg, scene.frames, reg_rng,
                                  cfg.regularizer == Regularizer::Feature ? &grads : nullptr);
            } else {
                const auto frame = static_cast<int>(frame_rng.below(static_cast<std::uint64_t>(scene.frames)));
                losses = evaluate_objective(model, scene, scene.frame_time(frame), cfg, reg_rng, &grads);
            }
        } catch (const DivergenceError& e) {
            fail(std::string(e.what()) + " at step " + std::to_string(step));
        }
        if (!std::isfinite(losses.total)) fail("non-finite loss at step " + std::to_string(step));
        if (!grads_finite(grads)) fail("non-finite gradient at step " + std::to_string(step));

        if (!warmup) {
            std::vector<std::span<const double>> g;
            for (const auto& l : grads.net.layers) {
                g.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
                g.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
            }
            net_adam.step(g, lr);
        }
        net_stepped = !warmup;
        for (std::size_t i = 0; i < grid_adam.size(); ++i) {
            grid_stepped[i] = !warmup || !grads.grids[i].empty();
            if (grid_stepped[i]) grid_adam[i].step(grads.grids[i], lr_grid);
        }

        if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps)
            result.log.push_back({step, losses.sup, losses.reg, losses.total, lr, lr_grid});
    }
    if (!model.net().finite()) fail("non-finite network weights after training");
    return result;
}

void save_checkpoint(const std::filesystem::path& dir, const TrainResult& result, const TrainConfig& cfg) {
    std::filesystem::create_directories(dir);
    result.model.save(dir / "model");
    auto write = [&](const std::string& name, const std::string& text) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw IoError("cannot write " + (dir / name).string());
        out << text;
        if (!out) throw IoError("write failed: " + (dir / name).string());
    };
    write("metrics.csv", metrics_csv(result.log));
    write("config.txt", cfg.to_text());
}

double mean_position_error(const DeformationModel& model, const GeneratedScene& scene) {
    const Vec3 ext = scene.canonical.aabb.extent();
    double sum = 0.0;
    std::size_t count = 0;
    for (int k = 0; k < scene.frames; ++k) {
        const double t = scene.frame_time(k);
        const auto pred = model.deform(scene.canonical, t);
        const auto truth = scene.motion.evaluate(scene.canonical, t);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            sum += (pred.gaussians[i].mu - truth.gaussians[i].mu).cwiseQuotient(ext).norm();
            ++count;
        }
    }
    return count ? sum / static_cast<double>(count) : 0.0;
}

double perturbation_feature_distance(const SpaceTimeEncoder& enc, const GeneratedScene& scene,
                                     const DeformationModel& model, const RegPerturbation& eps, std::uint64_t seed) {
    const Rng root(seed);
    double sum = 0.0;
    for (int k = 0; k < scene.frames; ++k) {
        const double t = scene.frame_time(k);
        std::vector<NormalizedCoord4> batch;
        for (const auto& g : scene.canonical.gaussians) batch.push_back(model.normalize(g.mu, t));
        Rng rng = root.split(static_cast<std::uint64_t>(k));
        sum += smooth_reg_loss(enc, batch, eps, rng);
    }
    return sum / static_cast<double>(scene.frames);
}

// ---------------------------------------------------------------------------
// Gradient checking

bool GradientCheckReport::passed() const {
    return std::all_of(groups.begin(), groups.end(), [&](const GroupCheck& g) { return g.max_rel_error < tolerance; });
}

std::vector<std::string> GradientCheckReport::offenders() const {
    std::vector<std::string> out;
    for (const auto& g : groups)
        if (!(g.max_rel_error < tolerance)) out.push_back(g.group + " (" + g.worst + ")");
    return out;
}

namespace {

constexpr double kKinkMargin = 1e-3;

// Smallest distance of any kink-sensitive quantity from its kink.
double kink_distance(const DeformationModel& model, const GeneratedScene& scene, std::size_t i, double t) {
    const std::span<const Gaussian> one(&scene.canonical.gaussians[i], 1);
    const auto batch = model.forward(one, t);
    double d = std::numeric_limits<double>::infinity();
    const auto& net = model.net();
    if (net.config().attention != AttentionMode::Concat) {
        const MatX pre = net.layers()[1]->forward(batch.cache.temporal);
        d = std::min(d, pre.cwiseAbs().minCoeff());
    }
    for (const auto& pre : batch.cache.trunk_pre) d = std::min(d, pre.cwiseAbs().minCoeff());
    const Gaussian& g = scene.canonical.gaussians[i];
    const auto& out = batch.outputs[0];
    for (int k = 0; k < 3; ++k) d = std::min(d, std::abs(g.scale[k] + out.delta_s[k] - kMinScale));
    // Rotation loss switches branch where q' . q* = 0.
    const Gaussian p = apply_deformation(g, out, model.position_mode());
    const Gaussian q = scene.motion.evaluate(g, i, t);
    const double dot = p.rot.w * q.rot.w + p.rot.x * q.rot.x + p.rot.y * q.rot.y + p.rot.z * q.rot.z;
    return std::min(d, std::abs(dot));
}

void record(GroupCheck& gc, double analytic, double numeric, double floor, const std::string& name) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    const double err = denom > 0.0 ? std::abs(analytic - numeric) / denom : 0.0;
    ++gc.checked;
    if (err > gc.max_rel_error || gc.worst.empty()) {
        if (err >= gc.max_rel_error) {
            gc.max_rel_error = err;
            gc.worst = name;
        }
    }
}

// Evenly spaced subset of [0, n) with at most `k` members.
std::vector<std::size_t> pick(std::size_t n, std::size_t k) {
    std::vector<std::size_t> out;
    if (n == 0) return out;
    const std::size_t take = std::min(n, k);
    for (std::size_t i = 0; i < take; ++i) out.push_back(i * n / take);
    return out;
}

}  // namespace

TrainConfig shrunken_check_config() {
    TrainConfig cfg;
    cfg.spatial_levels = cfg.temporal_levels = 4;
    cfg.spatial_n_min = cfg.temporal_n_min = 4;
    cfg.spatial_n_max = cfg.temporal_n_max = 32;
    cfg.table_size_log2 = 12;
    cfg.network.feature_width = cfg.network.decoder_width = 16;
    cfg.network.decoder_depth = 2;
    cfg.reg_eps_xyz = cfg.reg_eps_t = 0.02;
    cfg.scene.gaussians = 32;
    return cfg;
}

DeformationModel build_check_model(const TrainConfig& cfg, const GeneratedScene& scene, Rng& rng) {
    auto model = build_model(cfg, scene, rng);
    model.encoder().init_uniform(rng, 0.5);
    for (auto* l : model.net().layers()) {
        l->init_kaiming(rng);
        if (l->name.rfind("head", 0) == 0) {
            l->weight *= 0.1;
            l->bias *= 0.1;
        }
    }
    return model;
}

GradientCheckReport gradient_check(DeformationModel& model, GeneratedScene scene, const TrainConfig& cfg,
                                   const GradientCheckOptions& opts) {
    GradientCheckReport report;
    report.tolerance = opts.tolerance;
    const double t = opts.t;

    // Move canonical positions off kinks.
    for (std::size_t i = 0; i < scene.canonical.size(); ++i) {
        bool nudged = false;
        for (int tries = 0; tries < 100 && kink_distance(model, scene, i, t) < kKinkMargin; ++tries) {
            auto& mu = scene.canonical.gaussians[i].mu;
            mu.x() += 1e-3;
            if (mu.x() >= model.aabb().max.x()) mu.x() -= 0.5 * model.aabb().extent().x();
            nudged = true;
        }
        if (nudged) ++report.nudged_gaussians;
    }

    const Rng reg_rng(opts.seed);
    StepGradients grads{model.net().make_grads(), model.encoder().make_gradients()};
    evaluate_objective(model, scene, t, cfg, reg_rng, &grads);
    auto loss = [&] { return evaluate_objective(model, scene, t, cfg, reg_rng, nullptr).total; };
    const double h = opts.step;

    // Network groups.
    std::map<std::string, GroupCheck> net_groups;
    std::map<std::string, double> net_max;
    const auto layers = model.net().layers();
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto group = DeformNet::group_of(*layers[li]);
        const auto& lg = grads.net.layers[li];
        net_max[group] = std::max({net_max[group], lg.weight.cwiseAbs().maxCoeff(), lg.bias.cwiseAbs().maxCoeff()});
    }
    for (std::size_t li = 0; li < layers.size(); ++li) {
        Linear& layer = *layers[li];
        const auto group = DeformNet::group_of(layer);
        auto& gc = net_groups[group];
        gc.group = group;
        const auto& lg = grads.net.layers[li];
        const std::size_t nw = static_cast<std::size_t>(layer.weight.size());
        const std::size_t total = nw + static_cast<std::size_t>(layer.bias.size());
        for (const auto idx : pick(total, opts.max_per_group / 2)) {
            double* p = idx < nw ? layer.weight.data() + idx : layer.bias.data() + (idx - nw);
            const double analytic = idx < nw ? lg.weight.data()[idx] : lg.bias.data()[idx - nw];
            const double saved = *p;
            *p = saved + h;
            const double lp = loss();
            *p = saved - h;
            const double lm = loss();
            *p = saved;
            record(gc, analytic, (lp - lm) / (2.0 * h), 1e-6 * net_max[group],
                   layer.name + "[" + std::to_string(idx) + "]");
        }
    }

    // Grid groups: float storage, so the difference quotient uses the step
    // that was actually stored.
    auto& subgrids = model.encoder().grids();
    for (std::size_t gi = 0; gi < subgrids.size(); ++gi) {
        GroupCheck gc;
        gc.group = "grid_" + subgrids[gi].name;
        auto params = subgrids[gi].grid.params();
        const auto dense = grads.grids[gi].dense();
        const auto f = static_cast<std::size_t>(grads.grids[gi].feat_dim());
        std::vector<std::size_t> candidates;
        for (const auto row : grads.grids[gi].touched())
            for (std::size_t k = 0; k < f; ++k) candidates.push_back(row * f + k);
        std::sort(candidates.begin(), candidates.end());
        double gmax = 0.0;
        for (const auto c : candidates) gmax = std::max(gmax, std::abs(dense[c]));
        std::vector<std::size_t> chosen;
        for (const auto c : pick(candidates.size(), opts.max_per_group)) chosen.push_back(candidates[c]);
        // A few untouched entries, whose gradient must be exactly zero.
        for (const auto c : pick(params.size(), 8)) chosen.push_back(c);
        for (const auto idx : chosen) {
            const float saved = params[idx];
            const float up = static_cast<float>(saved + h);
            const float down = static_cast<float>(saved - h);
            params[idx] = up;
            const double lp = loss();
            params[idx] = down;
            const double lm = loss();
            params[idx] = saved;
            const double numeric = (lp - lm) / (static_cast<double>(up) - static_cast<double>(down));
            record(gc, dense[idx], numeric, 1e-6 * gmax, gc.group + "[" + std::to_string(idx) + "]");
        }
        report.groups.push_back(gc);
    }
    for (auto& [name, gc] : net_groups) report.groups.push_back(gc);
    return report;
}

}  // namespace grid4d
