// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/encoders.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace grid4d {

std::string_view to_string(EncoderKind kind) {
    switch (kind) {
        case EncoderKind::Decomposed: return "decomposed";
        case EncoderKind::Planes: return "planes";
        case EncoderKind::HyperGrid: return "hypergrid";
        case EncoderKind::SpatialHyper: return "spatial-hyper";
    }
    return "?";
}

EncoderKind encoder_kind_from_string(std::string_view name) {
    if (name == "decomposed") return EncoderKind::Decomposed;
    if (name == "planes") return EncoderKind::Planes;
    if (name == "hypergrid") return EncoderKind::HyperGrid;
    if (name == "spatial-hyper") return EncoderKind::SpatialHyper;
    throw ConfigError("unknown encoder kind '" + std::string(name) + "'");
}

std::vector<std::vector<int>> subgrid_axes(EncoderKind kind) {
    switch (kind) {
        case EncoderKind::Decomposed: return {{0, 1, 2}, {0, 1, 3}, {1, 2, 3}, {0, 2, 3}};
        case EncoderKind::Planes: return {{0, 1}, {1, 2}, {0, 2}, {0, 3}, {1, 3}, {2, 3}};
        case EncoderKind::HyperGrid: return {{0, 1, 2, 3}};
        case EncoderKind::SpatialHyper: return {{0, 1, 2}, {0, 1, 2, 3}};
    }
    return {};
}

namespace {

std::string axes_name(const std::vector<int>& axes) {
    static constexpr char kNames[] = {'x', 'y', 'z', 't'};
    std::string s;
    for (int a : axes) s.push_back(kNames[a]);
    return s;
}

}  // namespace

DecomposedConfig DecomposedConfig::defaults(int frames) {
    if (frames < 1) throw ConfigError("DecomposedConfig::defaults: frames must be >= 1");
    DecomposedConfig cfg;
    cfg.spatial = GridConfig::isotropic(3, 16, 16, 2048, 19, 2);
    const int n_t = std::max(1, (frames + 1) / 2);
    cfg.temporal = GridConfig::isotropic(3, 32, 16, 2048, 19, 2);
    cfg.temporal.axes[2] = AxisSchedule{std::min(4, n_t), n_t};
    return cfg;
}

namespace {

std::vector<SubGrid> build(EncoderKind kind, const std::vector<GridConfig>& cfgs) {
    const auto axes = subgrid_axes(kind);
    std::vector<SubGrid> grids;
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (cfgs[i].dim != static_cast<int>(axes[i].size()))
            throw ConfigError("encoder: grid '" + axes_name(axes[i]) + "' needs dim " + std::to_string(axes[i].size()));
        grids.push_back({axes_name(axes[i]), axes[i], HashGrid(cfgs[i])});
    }
    return grids;
}

}  // namespace

SpaceTimeEncoder SpaceTimeEncoder::decomposed(const DecomposedConfig& cfg) {
    SpaceTimeEncoder e;
    e.kind_ = EncoderKind::Decomposed;
    e.grids_ = build(e.kind_, {cfg.spatial, cfg.temporal, cfg.temporal, cfg.temporal});
    return e;
}

SpaceTimeEncoder SpaceTimeEncoder::planes(const GridConfig& plane_cfg) {
    SpaceTimeEncoder e;
    e.kind_ = EncoderKind::Planes;
    e.grids_ = build(e.kind_, std::vector<GridConfig>(6, plane_cfg));
    return e;
}

SpaceTimeEncoder SpaceTimeEncoder::hypergrid(const GridConfig& cfg4d) {
    SpaceTimeEncoder e;
    e.kind_ = EncoderKind::HyperGrid;
    e.grids_ = build(e.kind_, {cfg4d});
    return e;
}

SpaceTimeEncoder SpaceTimeEncoder::spatial_hyper(const GridConfig& spatial, const GridConfig& cfg4d) {
    SpaceTimeEncoder e;
    e.kind_ = EncoderKind::SpatialHyper;
    e.grids_ = build(e.kind_, {spatial, cfg4d});
    return e;
}

std::size_t SpaceTimeEncoder::output_dim() const {
    std::size_t n = 0;
    for (const auto& g : grids_) n += g.grid.output_dim();
    return n;
}

std::size_t SpaceTimeEncoder::spatial_dim() const { return has_spatial() ? grids_.front().grid.output_dim() : 0; }

std::array<double, 4> SpaceTimeEncoder::project(const NormalizedCoord4& u, const std::vector<int>& axes) {
    std::array<double, 4> p{};
    for (std::size_t i = 0; i < axes.size(); ++i) p[i] = u[axes[i]];
    return p;
}

void SpaceTimeEncoder::encode(const NormalizedCoord4& u, std::span<double> out) const {
    if (out.size() != output_dim()) throw ContractViolation("SpaceTimeEncoder::encode: output has wrong size");
    std::size_t off = 0;
    for (const auto& g : grids_) {
        const auto p = project(u, g.axes);
        const std::size_t n = g.grid.output_dim();
        g.grid.encode(std::span<const double>(p.data(), g.axes.size()), out.subspan(off, n));
        off += n;
    }
}

std::vector<double> SpaceTimeEncoder::encode(const NormalizedCoord4& u) const {
    std::vector<double> out(output_dim());
    encode(u, out);
    return out;
}

std::vector<double> SpaceTimeEncoder::encode_spatial(const NormalizedCoord4& u) const {
    if (!has_spatial()) throw ContractViolation("encode_spatial: encoder has no spatial grid");
    const auto& g = grids_.front();
    const auto p = project(u, g.axes);
    return g.grid.encode(std::span<const double>(p.data(), g.axes.size()));
}

std::vector<std::vector<double>> SpaceTimeEncoder::encode_temporal(const NormalizedCoord4& u) const {
    std::vector<std::vector<double>> out;
    for (std::size_t i = has_spatial() ? 1 : 0; i < grids_.size(); ++i) {
        const auto& g = grids_[i];
        const auto p = project(u, g.axes);
        out.push_back(g.grid.encode(std::span<const double>(p.data(), g.axes.size())));
    }
    return out;
}

void SpaceTimeEncoder::backward(const NormalizedCoord4& u, std::span<const double> upstream,
                                std::vector<GridGradients>& grads) const {
    if (upstream.size() != output_dim()) throw ContractViolation("SpaceTimeEncoder::backward: upstream has wrong size");
    if (grads.size() != grids_.size()) throw ContractViolation("SpaceTimeEncoder::backward: need one accumulator per grid");
    std::size_t off = 0;
    for (std::size_t i = 0; i < grids_.size(); ++i) {
        const auto& g = grids_[i];
        const auto p = project(u, g.axes);
        const std::size_t n = g.grid.output_dim();
        g.grid.encode_backward(std::span<const double>(p.data(), g.axes.size()), upstream.subspan(off, n), grads[i]);
        off += n;
    }
}

std::vector<GridGradients> SpaceTimeEncoder::make_gradients() const {
    std::vector<GridGradients> out;
    out.reserve(grids_.size());
    for (const auto& g : grids_) out.emplace_back(g.grid);
    return out;
}

void SpaceTimeEncoder::init_uniform(Rng& rng, double half_width) {
    for (auto& g : grids_) g.grid.init_uniform(rng, half_width);
}

void SpaceTimeEncoder::fill(float value) {
    for (auto& g : grids_) g.grid.fill(value);
}

void SpaceTimeEncoder::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest{{"kind", std::string(to_string(kind_))}, {"grids", nlohmann::json::array()}};
    for (const auto& g : grids_) {
        const std::string file = "grid_" + g.name + ".bin";
        g.grid.save(dir / file);
        manifest["grids"].push_back({{"name", g.name}, {"file", file}});
    }
    std::ofstream out(dir / "encoder.json");
    if (!out) throw IoError("cannot write " + (dir / "encoder.json").string());
    out << manifest.dump(1) << '\n';
}

SpaceTimeEncoder SpaceTimeEncoder::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "encoder.json");
    if (!in) throw IoError("cannot read " + (dir / "encoder.json").string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("encoder manifest: ") + e.what());
    }
    SpaceTimeEncoder e;
    e.kind_ = encoder_kind_from_string(manifest.at("kind").get<std::string>());
    const auto axes = subgrid_axes(e.kind_);
    const auto& list = manifest.at("grids");
    if (list.size() != axes.size()) throw IoError("encoder manifest: wrong number of grids");
    for (std::size_t i = 0; i < axes.size(); ++i) {
        HashGrid grid = HashGrid::load(dir / list[i].at("file").get<std::string>());
        if (grid.dim() != static_cast<int>(axes[i].size())) throw IoError("encoder manifest: grid dimension mismatch");
        e.grids_.push_back({axes_name(axes[i]), axes[i], std::move(grid)});
    }
    return e;
}

// ---------------------------------------------------------------------------

Rational overlap_ratio(EncoderKind kind, const NormalizedCoord4& p, const NormalizedCoord4& q) {
    const auto axes = subgrid_axes(kind);
    int same = 0;
    for (const auto& a : axes) {
        const bool equal = std::all_of(a.begin(), a.end(), [&](int ax) { return p[ax] == q[ax]; });
        same += equal ? 1 : 0;
    }
    const int total = static_cast<int>(axes.size());
    const int g = std::gcd(same, total);
    return {same / g, total / g};
}

std::vector<LevelCollisionStats> collision_rate(const GridConfig& cfg, std::size_t sample_count, Rng& rng) {
    if (sample_count < 2) throw ContractViolation("collision_rate: need at least two samples");
    const HashGrid grid(cfg);
    const int d = cfg.dim;

    std::vector<std::array<double, kMaxGridDim>> samples(sample_count);
    for (auto& s : samples)
        for (int a = 0; a < d; ++a) s[static_cast<std::size_t>(a)] = rng.uniform();

    std::vector<LevelCollisionStats> out;
    std::vector<std::uint64_t> ids;
    std::vector<std::uint8_t> occupied;
    for (int l = 0; l < cfg.levels; ++l) {
        const auto& lv = grid.levels()[static_cast<std::size_t>(l)];
        LevelCollisionStats st;
        st.level = l;
        st.res = lv.res;
        st.direct = lv.direct;
        st.rows = lv.rows;

        // Distinct vertices are identified by their dense mixed-radix id.
        ids.clear();
        ids.reserve(sample_count << d);
        for (const auto& s : samples) {
            std::array<int, kMaxGridDim> base{};
            for (int a = 0; a < d; ++a) {
                const int n = lv.res[static_cast<std::size_t>(a)];
                base[static_cast<std::size_t>(a)] = std::min(static_cast<int>(std::floor(s[static_cast<std::size_t>(a)] * n)), n - 1);
            }
            for (int c = 0; c < (1 << d); ++c) {
                std::uint64_t id = 0, stride = 1;
                for (int a = 0; a < d; ++a) {
                    const auto ai = static_cast<std::size_t>(a);
                    id += static_cast<std::uint64_t>(base[ai] + ((c >> a) & 1)) * stride;
                    stride *= static_cast<std::uint64_t>(lv.res[ai]) + 1;
                }
                ids.push_back(id);
            }
        }
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

        occupied.assign(static_cast<std::size_t>(lv.rows), 0);
        std::uint64_t distinct_rows = 0;
        std::array<int, kMaxGridDim> v{};
        for (auto id : ids) {
            std::uint64_t rest = id;
            for (int a = 0; a < d; ++a) {
                const std::uint64_t extent = static_cast<std::uint64_t>(lv.res[static_cast<std::size_t>(a)]) + 1;
                v[static_cast<std::size_t>(a)] = static_cast<int>(rest % extent);
                rest /= extent;
            }
            const std::uint64_t row = grid.index(l, std::span<const int>(v.data(), static_cast<std::size_t>(d)));
            if (!occupied[row]) {
                occupied[row] = 1;
                ++distinct_rows;
            }
        }
        st.distinct_vertices = ids.size();
        st.distinct_rows = distinct_rows;
        st.collision_rate = ids.empty() ? 0.0
                                        : static_cast<double>(ids.size() - distinct_rows) / static_cast<double>(ids.size());
        out.push_back(st);
    }
    return out;
}

void export_features(const SpaceTimeEncoder& enc, const std::vector<NormalizedCoord4>& inputs,
                     const std::filesystem::path& path) {
    if (inputs.empty()) throw ContractViolation("export_features: no inputs");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());

    const auto& grids = enc.grids();
    const std::size_t first_temporal = enc.has_spatial() ? 1 : 0;
    out << "x,y,z,t";
    if (enc.has_spatial()) out << ",norm_" << grids.front().name;
    for (std::size_t i = first_temporal; i < grids.size(); ++i) out << ",norm_" << grids[i].name;
    for (std::size_t k = 0; k < enc.output_dim(); ++k) out << ",f" << k;
    out << '\n';

    char buf[32];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.9g", v);
        out << buf;
    };
    std::vector<double> feat(enc.output_dim());
    for (const auto& u : inputs) {
        enc.encode(u, feat);
        put(u.x), out << ',', put(u.y), out << ',', put(u.z), out << ',', put(u.t);
        std::size_t off = 0;
        for (const auto& g : grids) {
            const std::size_t n = g.grid.output_dim();
            double sq = 0.0;
            for (std::size_t k = off; k < off + n; ++k) sq += feat[k] * feat[k];
            out << ',';
            put(std::sqrt(sq));
            off += n;
        }
        for (double f : feat) out << ',', put(f);
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace grid4d
