// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/deformnet.hpp"

#include "binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace grid4d {

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string n, Eigen::Index in, Eigen::Index out)
    : name(std::move(n)), weight(MatX::Zero(out, in)), bias(VecX::Zero(out)) {}

MatX Linear::forward(const MatX& x) const {
    MatX y = weight * x;
    y.colwise() += bias;
    return y;
}

void Linear::init_kaiming(Rng& rng) {
    const double fan_in = static_cast<double>(std::max<Eigen::Index>(1, in_dim()));
    const double w_bound = std::sqrt(6.0 / fan_in);
    const double b_bound = 1.0 / std::sqrt(fan_in);
    // Row-major draw order so the stream does not depend on Eigen's storage order.
    for (Eigen::Index r = 0; r < weight.rows(); ++r)
        for (Eigen::Index c = 0; c < weight.cols(); ++c) weight(r, c) = rng.uniform(-w_bound, w_bound);
    for (Eigen::Index r = 0; r < bias.size(); ++r) bias(r) = rng.uniform(-b_bound, b_bound);
}

void Linear::zero() {
    weight.setZero();
    bias.setZero();
}

void LinearGrad::resize_like(const Linear& l) {
    weight = MatX::Zero(l.weight.rows(), l.weight.cols());
    bias = VecX::Zero(l.bias.size());
}

void LinearGrad::set_zero() {
    weight.setZero();
    bias.setZero();
}

// ---------------------------------------------------------------------------

std::string_view to_string(AttentionMode m) {
    switch (m) {
        case AttentionMode::Directional: return "directional";
        case AttentionMode::Unit: return "unit";
        case AttentionMode::Concat: return "concat";
    }
    return "?";
}

std::string_view to_string(PositionMode m) { return m == PositionMode::Additive ? "additive" : "rt"; }

AttentionMode attention_mode_from_string(std::string_view name) {
    if (name == "directional") return AttentionMode::Directional;
    if (name == "unit") return AttentionMode::Unit;
    if (name == "concat") return AttentionMode::Concat;
    throw ConfigError("unknown attention variant '" + std::string(name) + "'");
}

PositionMode position_mode_from_string(std::string_view name) {
    if (name == "rt") return PositionMode::RotationTranslation;
    if (name == "additive") return PositionMode::Additive;
    throw ConfigError("unknown position variant '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Deformation application

DeformationOutput DeformationOutput::from_raw(std::span<const double, kRawWidth> r) {
    DeformationOutput d;
    d.r_x = {1.0 + r[0], r[1], r[2], r[3]};
    d.t_x = {r[4], r[5], r[6]};
    d.delta_r = {r[7], r[8], r[9], r[10]};
    d.delta_s = {r[11], r[12], r[13]};
    return d;
}

bool DeformationOutput::finite() const {
    auto fq = [](const Quat& q) {
        return std::isfinite(q.w) && std::isfinite(q.x) && std::isfinite(q.y) && std::isfinite(q.z);
    };
    return fq(r_x) && fq(delta_r) && t_x.allFinite() && delta_s.allFinite();
}

namespace {

Gaussian deform_common(const Gaussian& g, const DeformationOutput& d) {
    Gaussian out = g;
    for (int i = 0; i < 3; ++i) out.scale[i] = std::max(g.scale[i] + d.delta_s[i], kMinScale);
    // A zero delta on an already unit rotation is passed through unchanged so
    // the identity deformation is bit-exact.
    const bool zero_delta = d.delta_r.w == 0.0 && d.delta_r.x == 0.0 && d.delta_r.y == 0.0 && d.delta_r.z == 0.0;
    if (!(zero_delta && std::abs(g.rot.norm() - 1.0) <= 1e-12)) out.rot = quat_normalize(g.rot + d.delta_r);
    return out;
}

}  // namespace

Gaussian apply_deformation(const Gaussian& g, const DeformationOutput& d) {
    if (!d.finite()) throw ContractViolation("apply_deformation: non-finite deformation");
    Gaussian out = deform_common(g, d);
    out.mu = quat_rotate(quat_normalize(d.r_x), g.mu) + d.t_x;
    return out;
}

Gaussian apply_deformation_additive(const Gaussian& g, const DeformationOutput& d) {
    if (!d.finite()) throw ContractViolation("apply_deformation: non-finite deformation");
    Gaussian out = deform_common(g, d);
    out.mu = g.mu + d.t_x;
    return out;
}

Gaussian apply_deformation(const Gaussian& g, const DeformationOutput& d, PositionMode mode) {
    return mode == PositionMode::Additive ? apply_deformation_additive(g, d) : apply_deformation(g, d);
}

namespace {

std::array<double, 4> as_array(const Quat& q) { return {q.w, q.x, q.y, q.z}; }

/// Backward of p -> p / |p| for a 4-vector.
std::array<double, 4> normalize_backward(const Quat& p, const std::array<double, 4>& grad_unit) {
    const double n = p.norm();
    const auto u = as_array((1.0 / n) * p);
    double dot = 0.0;
    for (int i = 0; i < 4; ++i) dot += u[static_cast<std::size_t>(i)] * grad_unit[static_cast<std::size_t>(i)];
    std::array<double, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) out[i] = (grad_unit[i] - u[i] * dot) / n;
    return out;
}

}  // namespace

RawGrad apply_deformation_backward(const Gaussian& g, const DeformationOutput& d, const DeformedGrad& grad,
                                   PositionMode mode) {
    RawGrad out{};
    // t_x
    for (int i = 0; i < 3; ++i) out[static_cast<std::size_t>(4 + i)] = grad.mu[i];

    if (mode == PositionMode::RotationTranslation) {
        // mu' = v + 2w (u x v) + 2 u x (u x v) with q = (w, u) the normalized r_x.
        const Quat q = quat_normalize(d.r_x);
        const Vec3 u(q.x, q.y, q.z);
        const Vec3& v = g.mu;
        const Vec3& gm = grad.mu;
        const Vec3 uv = u.cross(v);
        const double dw = 2.0 * gm.dot(uv);
        const Vec3 du = 2.0 * q.w * v.cross(gm) + 2.0 * uv.cross(gm) + 2.0 * v.cross(gm.cross(u));
        const auto dq = normalize_backward(d.r_x, {dw, du.x(), du.y(), du.z()});
        for (std::size_t i = 0; i < 4; ++i) out[i] = dq[i];
    }

    const auto dr = normalize_backward(g.rot + d.delta_r, as_array(grad.rot));
    for (std::size_t i = 0; i < 4; ++i) out[7 + i] = dr[i];

    for (int i = 0; i < 3; ++i) {
        const bool active = g.scale[i] + d.delta_s[i] > kMinScale;
        out[static_cast<std::size_t>(11 + i)] = active ? grad.scale[i] : 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// DeformNet

namespace {

constexpr std::array<const char*, 4> kHeadNames = {"head_rx", "head_tx", "head_dr", "head_ds"};
constexpr std::array<Eigen::Index, 4> kHeadWidths = {4, 3, 4, 3};

// Largest double below 1; keeps attention strictly inside its open range.
const double kBelowOne = std::nextafter(1.0, 0.0);

}  // namespace

DeformNet::DeformNet(const NetworkConfig& cfg, std::size_t spatial_dim, std::size_t temporal_dim)
    : cfg_(cfg), spatial_dim_(spatial_dim), temporal_dim_(temporal_dim) {
    if (cfg.decoder_depth < 1) throw ConfigError("network: decoder depth must be >= 1");
    if (cfg.feature_width < 1 || cfg.decoder_width < 1) throw ConfigError("network: widths must be >= 1");
    if (temporal_dim == 0) throw ConfigError("network: temporal feature width is zero");
    if (cfg.attention != AttentionMode::Concat) {
        if (spatial_dim == 0) throw ConfigError("network: attention needs a spatial grid");
        f_s_ = Linear("f_s", static_cast<Eigen::Index>(spatial_dim), cfg.feature_width);
        f_t_ = Linear("f_t", static_cast<Eigen::Index>(temporal_dim), cfg.feature_width);
    }
    auto in = static_cast<Eigen::Index>(decoder_input_dim());
    for (int k = 0; k + 1 < cfg.decoder_depth; ++k) {
        trunk_.emplace_back("trunk" + std::to_string(k), in, cfg.decoder_width);
        in = cfg.decoder_width;
    }
    for (std::size_t h = 0; h < heads_.size(); ++h) heads_[h] = Linear(kHeadNames[h], in, kHeadWidths[h]);
}

std::size_t DeformNet::decoder_input_dim() const {
    return cfg_.attention == AttentionMode::Concat ? spatial_dim_ + temporal_dim_
                                                   : static_cast<std::size_t>(cfg_.feature_width);
}

void DeformNet::init(Rng& rng) {
    if (cfg_.attention != AttentionMode::Concat) {
        f_s_.init_kaiming(rng);
        f_t_.init_kaiming(rng);
    }
    for (auto& l : trunk_) l.init_kaiming(rng);
    for (auto& h : heads_) h.zero();
}

std::vector<Linear*> DeformNet::layers() {
    std::vector<Linear*> out;
    if (cfg_.attention != AttentionMode::Concat) {
        out.push_back(&f_s_);
        out.push_back(&f_t_);
    }
    for (auto& l : trunk_) out.push_back(&l);
    for (auto& h : heads_) out.push_back(&h);
    return out;
}

std::vector<const Linear*> DeformNet::layers() const {
    std::vector<const Linear*> out;
    for (auto* l : const_cast<DeformNet*>(this)->layers()) out.push_back(l);
    return out;
}

std::string DeformNet::group_of(const Linear& layer) {
    if (layer.name == "f_s" || layer.name == "f_t") return layer.name;
    return "decoder";
}

bool DeformNet::finite() const {
    const auto ls = layers();
    return std::all_of(ls.begin(), ls.end(), [](const Linear* l) { return l->finite(); });
}

MatX DeformNet::attention_scores(const MatX& spatial) const {
    if (cfg_.attention == AttentionMode::Concat) throw ContractViolation("attention_scores: concat variant has no attention");
    if (spatial.rows() != f_s_.in_dim()) throw ContractViolation("attention_scores: spatial width mismatch");
    const MatX z = f_s_.forward(spatial);
    if (cfg_.attention == AttentionMode::Directional) {
        // 2 sigmoid(z) - 1 == tanh(z / 2)
        return z.unaryExpr([](double v) { return std::clamp(std::tanh(0.5 * v), -kBelowOne, kBelowOne); });
    }
    return z.unaryExpr([](double v) {
        return std::clamp(1.0 / (1.0 + std::exp(-v)), std::numeric_limits<double>::denorm_min(), kBelowOne);
    });
}

MatX DeformNet::aggregate(const MatX& attention, const MatX& spatial, const MatX& temporal) const {
    if (cfg_.attention == AttentionMode::Concat) {
        if (spatial.rows() != static_cast<Eigen::Index>(spatial_dim_) ||
            temporal.rows() != static_cast<Eigen::Index>(temporal_dim_) || spatial.cols() != temporal.cols())
            throw ContractViolation("aggregate: input width mismatch");
        MatX h(spatial.rows() + temporal.rows(), spatial.cols());
        h << spatial, temporal;
        return h;
    }
    if (temporal.rows() != f_t_.in_dim()) throw ContractViolation("aggregate: temporal width mismatch");
    const MatX p = f_t_.forward(temporal).cwiseMax(0.0);
    if (attention.rows() != p.rows() || attention.cols() != p.cols())
        throw ContractViolation("aggregate: attention width mismatch");
    return attention.cwiseProduct(p);
}

const MatX& DeformNet::forward(const MatX& spatial, const MatX& temporal, Cache& c) const {
    if (spatial.rows() != static_cast<Eigen::Index>(spatial_dim_) ||
        temporal.rows() != static_cast<Eigen::Index>(temporal_dim_))
        throw ContractViolation("DeformNet::forward: input width mismatch");
    c.spatial = spatial;
    c.temporal = temporal;
    c.trunk_in.clear();
    c.trunk_pre.clear();

    MatX h;
    if (cfg_.attention == AttentionMode::Concat) {
        h = aggregate(MatX(), spatial, temporal);
    } else {
        const MatX z = f_s_.forward(spatial);
        c.sigmoid = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        c.attention = attention_scores(spatial);
        c.temporal_act = f_t_.forward(temporal).cwiseMax(0.0);
        h = c.attention.cwiseProduct(c.temporal_act);
    }
    for (const auto& layer : trunk_) {
        c.trunk_in.push_back(std::move(h));
        c.trunk_pre.push_back(layer.forward(c.trunk_in.back()));
        h = c.trunk_pre.back().cwiseMax(0.0);
    }
    c.trunk_in.push_back(std::move(h));
    const MatX& x = c.trunk_in.back();
    c.raw.resize(DeformationOutput::kRawWidth, x.cols());
    Eigen::Index row = 0;
    for (const auto& head : heads_) {
        c.raw.middleRows(row, head.out_dim()) = head.forward(x);
        row += head.out_dim();
    }
    return c.raw;
}

DeformNet::Grads DeformNet::make_grads() const {
    Grads g;
    for (const auto* l : layers()) {
        LinearGrad lg;
        lg.resize_like(*l);
        g.layers.push_back(std::move(lg));
    }
    return g;
}

void DeformNet::backward(const Cache& c, const MatX& d_raw, Grads& g) const {
    if (d_raw.rows() != DeformationOutput::kRawWidth || d_raw.cols() != c.raw.cols())
        throw ContractViolation("DeformNet::backward: gradient shape mismatch");
    const std::size_t head_base = g.layers.size() - heads_.size();
    const std::size_t trunk_base = head_base - trunk_.size();

    const MatX& x = c.trunk_in.back();
    MatX dx = MatX::Zero(x.rows(), x.cols());
    Eigen::Index row = 0;
    for (std::size_t h = 0; h < heads_.size(); ++h) {
        const auto n = heads_[h].out_dim();
        const auto d = d_raw.middleRows(row, n);
        auto& lg = g.layers[head_base + h];
        lg.weight.noalias() += d * x.transpose();
        lg.bias += d.rowwise().sum();
        dx.noalias() += heads_[h].weight.transpose() * d;
        row += n;
    }
    for (std::size_t k = trunk_.size(); k-- > 0;) {
        const MatX dz = dx.cwiseProduct((c.trunk_pre[k].array() > 0.0).cast<double>().matrix());
        auto& lg = g.layers[trunk_base + k];
        lg.weight.noalias() += dz * c.trunk_in[k].transpose();
        lg.bias += dz.rowwise().sum();
        dx = trunk_[k].weight.transpose() * dz;
    }

    if (cfg_.attention == AttentionMode::Concat) {
        g.spatial = dx.topRows(static_cast<Eigen::Index>(spatial_dim_));
        g.temporal = dx.bottomRows(static_cast<Eigen::Index>(temporal_dim_));
        return;
    }
    const MatX d_att = dx.cwiseProduct(c.temporal_act);
    const MatX d_act = dx.cwiseProduct(c.attention);
    const MatX dz_t = d_act.cwiseProduct((c.temporal_act.array() > 0.0).cast<double>().matrix());
    const double scale = cfg_.attention == AttentionMode::Directional ? 2.0 : 1.0;
    const MatX dz_s =
        scale * d_att.cwiseProduct(c.sigmoid.cwiseProduct((1.0 - c.sigmoid.array()).matrix()));

    auto& gs = g.layers[0];
    gs.weight.noalias() += dz_s * c.spatial.transpose();
    gs.bias += dz_s.rowwise().sum();
    auto& gt = g.layers[1];
    gt.weight.noalias() += dz_t * c.temporal.transpose();
    gt.bias += dz_t.rowwise().sum();
    g.spatial = f_s_.weight.transpose() * dz_s;
    g.temporal = f_t_.weight.transpose() * dz_t;
}

// ---------------------------------------------------------------------------
// Network checkpoint

namespace {
constexpr char kNetMagic[8] = {'G', '4', 'D', 'N', 'E', 'T', '0', '1'};
}

void DeformNet::save(std::ostream& out) const {
    out.write(kNetMagic, sizeof kNetMagic);
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.feature_width));
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.decoder_depth));
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.decoder_width));
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.attention));
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.position));
    io::write_u64(out, spatial_dim_);
    io::write_u64(out, temporal_dim_);
    const auto ls = layers();
    io::write_u32(out, static_cast<std::uint32_t>(ls.size()));
    for (const auto* l : ls) {
        io::write_string(out, l->name);
        io::write_u32(out, static_cast<std::uint32_t>(l->weight.rows()));
        io::write_u32(out, static_cast<std::uint32_t>(l->weight.cols()));
        for (Eigen::Index r = 0; r < l->weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l->weight.cols(); ++c) io::write_f32(out, static_cast<float>(l->weight(r, c)));
        for (Eigen::Index r = 0; r < l->bias.size(); ++r) io::write_f32(out, static_cast<float>(l->bias(r)));
    }
    if (!out) throw IoError("network checkpoint: write failed");
}

void DeformNet::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    save(out);
}

DeformNet DeformNet::load(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || !std::equal(magic, magic + 8, kNetMagic)) throw IoError("network checkpoint: bad magic");
    NetworkConfig cfg;
    cfg.feature_width = static_cast<int>(io::read_u32(in));
    cfg.decoder_depth = static_cast<int>(io::read_u32(in));
    cfg.decoder_width = static_cast<int>(io::read_u32(in));
    const auto att = io::read_u32(in);
    const auto pos = io::read_u32(in);
    if (att > 2 || pos > 1) throw IoError("network checkpoint: bad variant flags");
    cfg.attention = static_cast<AttentionMode>(att);
    cfg.position = static_cast<PositionMode>(pos);
    const auto sdim = io::read_u64(in);
    const auto tdim = io::read_u64(in);
    DeformNet net(cfg, sdim, tdim);
    const auto ls = net.layers();
    if (io::read_u32(in) != ls.size()) throw IoError("network checkpoint: layer count mismatch");
    for (auto* l : ls) {
        if (io::read_string(in) != l->name) throw IoError("network checkpoint: unexpected layer " + l->name);
        const auto rows = io::read_u32(in), cols = io::read_u32(in);
        if (rows != l->weight.rows() || cols != l->weight.cols())
            throw IoError("network checkpoint: shape mismatch in " + l->name);
        for (Eigen::Index r = 0; r < l->weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l->weight.cols(); ++c) l->weight(r, c) = io::read_f32(in);
        for (Eigen::Index r = 0; r < l->bias.size(); ++r) l->bias(r) = io::read_f32(in);
    }
    return net;
}

DeformNet DeformNet::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return load(in);
}

// ---------------------------------------------------------------------------
// DeformationModel

DeformationModel::DeformationModel(SpaceTimeEncoder encoder, DeformNet net, Aabb aabb, TimeRange t_range)
    : encoder_(std::move(encoder)), net_(std::move(net)), aabb_(aabb), t_range_(t_range) {
    if (net_.spatial_dim() != encoder_.spatial_dim() || net_.temporal_dim() != encoder_.temporal_dim())
        throw ConfigError("model: network input widths do not match the encoder");
}

DeformationModel::Batch DeformationModel::forward(std::span<const Gaussian> canonical, double t) const {
    std::vector<NormalizedCoord4> inputs;
    inputs.reserve(canonical.size());
    for (const auto& g : canonical) inputs.push_back(normalize(g.mu, t));
    return forward_normalized(std::move(inputs));
}

DeformationModel::Batch DeformationModel::forward_normalized(std::vector<NormalizedCoord4> inputs) const {
    Batch b;
    b.inputs = std::move(inputs);
    const auto n = static_cast<Eigen::Index>(b.inputs.size());
    const auto sdim = static_cast<Eigen::Index>(encoder_.spatial_dim());
    const auto tdim = static_cast<Eigen::Index>(encoder_.temporal_dim());
    MatX features(sdim + tdim, n);
    for (Eigen::Index i = 0; i < n; ++i)
        encoder_.encode(b.inputs[static_cast<std::size_t>(i)],
                        std::span<double>(features.col(i).data(), static_cast<std::size_t>(sdim + tdim)));
    const MatX& raw = net_.forward(features.topRows(sdim), features.bottomRows(tdim), b.cache);
    b.outputs.reserve(b.inputs.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto d = DeformationOutput::from_raw(
            std::span<const double, DeformationOutput::kRawWidth>(raw.col(i).data(), DeformationOutput::kRawWidth));
        if (!d.finite()) throw DivergenceError("decoder produced a non-finite deformation");
        b.outputs.push_back(d);
    }
    return b;
}

std::vector<DeformationOutput> DeformationModel::predict(std::span<const Gaussian> canonical, double t) const {
    return forward(canonical, t).outputs;
}

GaussianSet DeformationModel::deform(const GaussianSet& canonical, double t) const {
    const auto outs = predict(canonical.gaussians, t);
    GaussianSet out;
    out.aabb = canonical.aabb;
    out.gaussians.reserve(outs.size());
    for (std::size_t i = 0; i < outs.size(); ++i)
        out.gaussians.push_back(apply_deformation(canonical.gaussians[i], outs[i], position_mode()));
    return out;
}

void DeformationModel::backward(const Batch& batch, const MatX& d_raw, DeformNet::Grads& net_grads,
                                std::vector<GridGradients>& grid_grads) const {
    net_.backward(batch.cache, d_raw, net_grads);
    const auto sdim = encoder_.spatial_dim();
    std::vector<double> upstream(encoder_.output_dim());
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        for (std::size_t k = 0; k < sdim; ++k) upstream[k] = net_grads.spatial(static_cast<Eigen::Index>(k), col);
        for (std::size_t k = 0; k < encoder_.temporal_dim(); ++k)
            upstream[sdim + k] = net_grads.temporal(static_cast<Eigen::Index>(k), col);
        encoder_.backward(batch.inputs[i], upstream, grid_grads);
    }
}

void DeformationModel::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    encoder_.save(dir / "encoder");
    net_.save(dir / "network.bin");
    const auto v3 = [](const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); };
    nlohmann::json meta{{"aabb", {{"min", v3(aabb_.min)}, {"max", v3(aabb_.max)}}},
                        {"t_range", nlohmann::json::array({t_range_.min, t_range_.max})},
                        {"encoder", "encoder/encoder.json"},
                        {"network", "network.bin"},
                        {"attention", std::string(to_string(net_.config().attention))},
                        {"position", std::string(to_string(net_.config().position))}};
    std::ofstream out(dir / "model.json");
    if (!out) throw IoError("cannot write " + (dir / "model.json").string());
    out << meta.dump(1) << '\n';
}

DeformationModel DeformationModel::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "model.json");
    if (!in) throw IoError("cannot read " + (dir / "model.json").string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(in);
        Aabb box;
        for (int i = 0; i < 3; ++i) {
            box.min[i] = meta.at("aabb").at("min").at(static_cast<std::size_t>(i)).get<double>();
            box.max[i] = meta.at("aabb").at("max").at(static_cast<std::size_t>(i)).get<double>();
        }
        const TimeRange tr{meta.at("t_range").at(0).get<double>(), meta.at("t_range").at(1).get<double>()};
        return DeformationModel(SpaceTimeEncoder::load(dir / "encoder"), DeformNet::load(dir / "network.bin"), box, tr);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("model manifest: ") + e.what());
    }
}

// ---------------------------------------------------------------------------

Vec3 deformation_map(const std::function<Vec3(const Vec3&, double)>& field, const Vec3& x, double t, double tau,
                     double limit) {
    if (!(tau > 0.0)) throw ContractViolation("deformation_map: tau must be positive");
    if (t < 0.0 || t + tau > 1.0) throw ContractViolation("deformation_map: t + tau must lie in [0, 1]");
    const Vec3 v = (field(x, t + tau) - field(x, t)) / tau;
    return v.cwiseMax(-limit).cwiseMin(limit);
}

void export_deformation_map(const DeformationModel& model, const GaussianSet& canonical, double t, double tau,
                            double limit, const std::filesystem::path& path) {
    if (t < 0.0 || t + tau > 1.0) throw ContractViolation("deformation_map: t + tau must lie in [0, 1]");
    // Both time slices are decoded in batch; the field is evaluated per Gaussian
    // from those results.
    const double t0 = model.t_range().min + t * (model.t_range().max - model.t_range().min);
    const double t1 = model.t_range().min + (t + tau) * (model.t_range().max - model.t_range().min);
    const GaussianSet a = model.deform(canonical, t0);
    const GaussianSet b = model.deform(canonical, t1);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "id,x,y,z,t,dx,dy,dz\n";
    char buf[256];
    for (std::size_t i = 0; i < canonical.size(); ++i) {
        std::size_t idx = i;
        const auto field = [&](const Vec3&, double s) { return s == t ? a.gaussians[idx].mu : b.gaussians[idx].mu; };
        const Vec3& x = canonical.gaussians[i].mu;
        const Vec3 v = deformation_map(field, x, t, tau, limit);
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", i, x.x(), x.y(), x.z(), t, v.x(),
                      v.y(), v.z());
        out << buf;
    }
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace grid4d
