// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/hashgrid.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace grid4d {

GridConfig GridConfig::isotropic(int dim, int levels, int n_min, int n_max, int table_size_log2, int feat_dim) {
    GridConfig cfg;
    cfg.dim = dim;
    cfg.levels = levels;
    cfg.table_size_log2 = table_size_log2;
    cfg.feat_dim = feat_dim;
    cfg.axes.assign(static_cast<std::size_t>(dim), AxisSchedule{n_min, n_max});
    return cfg;
}

void GridConfig::validate() const {
    if (dim < 1 || dim > kMaxGridDim) throw ConfigError("grid: dim must be in [1, 4]");
    if (levels < 1) throw ConfigError("grid: levels must be >= 1");
    if (feat_dim < 1) throw ConfigError("grid: feat_dim must be >= 1");
    if (table_size_log2 < 4 || table_size_log2 > 30) throw ConfigError("grid: table_size_log2 must be in [4, 30]");
    if (axes.size() != static_cast<std::size_t>(dim)) throw ConfigError("grid: need one axis schedule per dimension");
    for (const auto& a : axes) {
        if (a.n_min < 1) throw ConfigError("grid: n_min must be >= 1");
        if (a.n_max < a.n_min) throw ConfigError("grid: n_max must be >= n_min");
    }
}

int level_resolution(const GridConfig& cfg, int level, int axis) {
    const auto& a = cfg.axes.at(static_cast<std::size_t>(axis));
    if (cfg.levels == 1 || a.n_max == a.n_min) return a.n_min;
    const double b = std::exp((std::log(static_cast<double>(a.n_max)) - std::log(static_cast<double>(a.n_min))) /
                              static_cast<double>(cfg.levels - 1));
    // The 1e-9 slack keeps exact endpoints (e.g. 16 * 128^(15/15)) from
    // flooring one below after rounding in exp/pow.
    const double v = static_cast<double>(a.n_min) * std::pow(b, static_cast<double>(level));
    return std::min(a.n_max, static_cast<int>(std::floor(v + 1e-9)));
}

std::uint64_t spatial_hash(std::span<const std::uint32_t> vertex) {
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < vertex.size(); ++i) h ^= static_cast<std::uint64_t>(vertex[i]) * kHashPrimes[i];
    return h;
}

// ---------------------------------------------------------------------------

HashGrid::HashGrid(GridConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::uint64_t table = cfg_.table_size();
    std::size_t offset = 0;
    levels_.resize(static_cast<std::size_t>(cfg_.levels));
    for (int l = 0; l < cfg_.levels; ++l) {
        auto& lv = levels_[static_cast<std::size_t>(l)];
        std::uint64_t dense = 1;
        for (int a = 0; a < cfg_.dim; ++a) {
            lv.res[static_cast<std::size_t>(a)] = level_resolution(cfg_, l, a);
            const std::uint64_t extent = static_cast<std::uint64_t>(lv.res[static_cast<std::size_t>(a)]) + 1;
            dense = (dense > table) ? dense : dense * extent;  // saturate, only the comparison matters
        }
        lv.direct = dense <= table;
        lv.rows = lv.direct ? dense : table;
        lv.offset = offset;
        offset += static_cast<std::size_t>(lv.rows) * static_cast<std::size_t>(cfg_.feat_dim);
    }
    params_.assign(offset, 0.0f);
}

std::span<float> HashGrid::row(int level, std::uint64_t r) {
    const auto& lv = levels_.at(static_cast<std::size_t>(level));
    if (r >= lv.rows) throw ContractViolation("HashGrid::row out of range");
    const auto f = static_cast<std::size_t>(cfg_.feat_dim);
    return std::span<float>(params_).subspan(lv.offset + static_cast<std::size_t>(r) * f, f);
}

std::span<const float> HashGrid::row(int level, std::uint64_t r) const {
    return const_cast<HashGrid*>(this)->row(level, r);
}

std::uint64_t HashGrid::index_unchecked(const LevelInfo& lv, const std::uint32_t* vertex) const {
    if (lv.direct) {
        // Mixed radix, first axis fastest.
        std::uint64_t idx = 0;
        std::uint64_t stride = 1;
        for (int a = 0; a < cfg_.dim; ++a) {
            idx += static_cast<std::uint64_t>(vertex[a]) * stride;
            stride *= static_cast<std::uint64_t>(lv.res[static_cast<std::size_t>(a)]) + 1;
        }
        return idx;
    }
    return spatial_hash({vertex, static_cast<std::size_t>(cfg_.dim)}) & (lv.rows - 1);
}

std::uint64_t HashGrid::index(int level, std::span<const int> vertex) const {
    const auto& lv = levels_.at(static_cast<std::size_t>(level));
    if (vertex.size() != static_cast<std::size_t>(cfg_.dim)) throw ContractViolation("index: vertex has wrong dimension");
    std::array<std::uint32_t, kMaxGridDim> v{};
    for (int a = 0; a < cfg_.dim; ++a) {
        const int c = vertex[static_cast<std::size_t>(a)];
        if (c < 0 || c > lv.res[static_cast<std::size_t>(a)])
            throw ContractViolation("index: vertex component outside [0, N_l]");
        v[static_cast<std::size_t>(a)] = static_cast<std::uint32_t>(c);
    }
    return index_unchecked(lv, v.data());
}

std::array<HashGrid::Corner, (1 << kMaxGridDim)> HashGrid::corners(int level, std::span<const double> u,
                                                                   int& count) const {
    const auto& lv = levels_[static_cast<std::size_t>(level)];
    const int d = cfg_.dim;
    std::array<std::uint32_t, kMaxGridDim> base{};
    std::array<double, kMaxGridDim> frac{};
    for (int a = 0; a < d; ++a) {
        const int n = lv.res[static_cast<std::size_t>(a)];
        const double pos = std::clamp(u[static_cast<std::size_t>(a)], 0.0, 1.0) * n;
        const int cell = std::min(static_cast<int>(std::floor(pos)), n - 1);
        base[static_cast<std::size_t>(a)] = static_cast<std::uint32_t>(cell);
        frac[static_cast<std::size_t>(a)] = pos - cell;
    }
    // Corners are built axis by axis: corner c has bit a set when it takes
    // the upper vertex on axis a. Direct levels combine per-axis terms by
    // addition (mixed radix), hashed ones by XOR.
    std::array<Corner, (1 << kMaxGridDim)> out;
    out[0] = {0, 1.0};
    std::uint64_t stride = 1;
    for (int a = 0; a < d; ++a) {
        const auto ai = static_cast<std::size_t>(a);
        const std::uint64_t b = base[ai];
        const std::uint64_t mul = lv.direct ? stride : kHashPrimes[ai];
        const std::uint64_t lo = b * mul, hi = (b + 1) * mul;
        const double wl = 1.0 - frac[ai], wh = frac[ai];
        const std::size_t half = std::size_t{1} << a;
        for (std::size_t j = 0; j < half; ++j) {
            const Corner prev = out[j];
            if (lv.direct) {
                out[j] = {prev.row + lo, prev.weight * wl};
                out[j + half] = {prev.row + hi, prev.weight * wh};
            } else {
                out[j] = {prev.row ^ lo, prev.weight * wl};
                out[j + half] = {prev.row ^ hi, prev.weight * wh};
            }
        }
        if (lv.direct) stride *= static_cast<std::uint64_t>(lv.res[ai]) + 1;
    }
    count = 1 << d;
    if (!lv.direct) {
        const std::uint64_t mask = lv.rows - 1;
        for (int c = 0; c < count; ++c) out[static_cast<std::size_t>(c)].row &= mask;
    }
    return out;
}

void HashGrid::encode(std::span<const double> u, std::span<double> out) const {
    if (u.size() != static_cast<std::size_t>(cfg_.dim)) throw ContractViolation("encode: input has wrong dimension");
    if (out.size() != output_dim()) throw ContractViolation("encode: output has wrong size");
    const auto f = static_cast<std::size_t>(cfg_.feat_dim);
    for (int l = 0; l < cfg_.levels; ++l) {
        int count = 0;
        const auto cs = corners(l, u, count);
        const float* table = params_.data() + levels_[static_cast<std::size_t>(l)].offset;
        double* dst = out.data() + static_cast<std::size_t>(l) * f;
        std::fill(dst, dst + f, 0.0);
        for (int c = 0; c < count; ++c) {
            const auto& corner = cs[static_cast<std::size_t>(c)];
            const float* src = table + corner.row * f;
            for (std::size_t k = 0; k < f; ++k) dst[k] += corner.weight * static_cast<double>(src[k]);
        }
    }
}

std::vector<double> HashGrid::encode(std::span<const double> u) const {
    std::vector<double> out(output_dim());
    encode(u, out);
    return out;
}

void HashGrid::encode_backward(std::span<const double> u, std::span<const double> upstream,
                               GridGradients& grads) const {
    if (u.size() != static_cast<std::size_t>(cfg_.dim)) throw ContractViolation("encode_backward: input has wrong dimension");
    if (upstream.size() != output_dim()) throw ContractViolation("encode_backward: upstream has wrong size");
    if (grads.feat_dim() != cfg_.feat_dim) throw ContractViolation("encode_backward: gradient buffer belongs to another grid");
    const auto f = static_cast<std::size_t>(cfg_.feat_dim);
    for (int l = 0; l < cfg_.levels; ++l) {
        const auto up = upstream.subspan(static_cast<std::size_t>(l) * f, f);
        if (std::all_of(up.begin(), up.end(), [](double g) { return g == 0.0; })) continue;
        int count = 0;
        const auto cs = corners(l, u, count);
        for (int c = 0; c < count; ++c) {
            const auto& corner = cs[static_cast<std::size_t>(c)];
            if (corner.weight == 0.0) continue;
            grads.add_scaled(l, corner.row, corner.weight, up);
        }
    }
}

void HashGrid::fill(float value) { std::fill(params_.begin(), params_.end(), value); }

void HashGrid::init_uniform(Rng& rng, double half_width) {
    for (auto& p : params_) p = static_cast<float>(rng.uniform(-half_width, half_width));
}

// ---------------------------------------------------------------------------
// Checkpoint blob

namespace {
constexpr char kGridMagic[8] = {'G', '4', 'D', 'G', 'R', 'I', 'D', '1'};
}

void HashGrid::save(std::ostream& out) const {
    out.write(kGridMagic, sizeof kGridMagic);
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.dim));
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.levels));
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.feat_dim));
    io::write_u32(out, static_cast<std::uint32_t>(cfg_.table_size_log2));
    for (const auto& a : cfg_.axes) {
        io::write_u32(out, static_cast<std::uint32_t>(a.n_min));
        io::write_u32(out, static_cast<std::uint32_t>(a.n_max));
    }
    io::write_u64(out, params_.size());
    io::write_f32_array(out, params_);
    if (!out) throw IoError("grid checkpoint: write failed");
}

void HashGrid::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    save(out);
}

HashGrid HashGrid::load(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || !std::equal(magic, magic + 8, kGridMagic)) throw IoError("grid checkpoint: bad magic");
    GridConfig cfg;
    cfg.dim = static_cast<int>(io::read_u32(in));
    cfg.levels = static_cast<int>(io::read_u32(in));
    cfg.feat_dim = static_cast<int>(io::read_u32(in));
    cfg.table_size_log2 = static_cast<int>(io::read_u32(in));
    if (cfg.dim < 1 || cfg.dim > kMaxGridDim) throw IoError("grid checkpoint: bad dimension");
    for (int a = 0; a < cfg.dim; ++a) {
        AxisSchedule s;
        s.n_min = static_cast<int>(io::read_u32(in));
        s.n_max = static_cast<int>(io::read_u32(in));
        cfg.axes.push_back(s);
    }
    HashGrid grid(std::move(cfg));
    const std::uint64_t n = io::read_u64(in);
    if (n != grid.params_.size()) throw IoError("grid checkpoint: table size does not match header");
    io::read_f32_array(in, grid.params_);
    return grid;
}

HashGrid HashGrid::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return load(in);
}

// ---------------------------------------------------------------------------

GridGradients::GridGradients(const HashGrid& grid)
    : feat_dim_(grid.config().feat_dim), dense_(grid.param_count(), 0.0) {
    std::size_t rows = 0;
    for (const auto& lv : grid.levels()) {
        level_row_base_.push_back(rows);
        rows += static_cast<std::size_t>(lv.rows);
    }
    level_row_base_.push_back(rows);
    flag_.assign(rows, 0);
}

std::uint64_t GridGradients::global_row(int level, std::uint64_t row) const {
    return level_row_base_[static_cast<std::size_t>(level)] + row;
}

void GridGradients::add_scaled(int level, std::uint64_t row, double weight, std::span<const double> upstream) {
    const std::uint64_t g = global_row(level, row);
    if (!flag_[g]) {
        flag_[g] = 1;
        touched_.push_back(g);
    }
    double* dst = dense_.data() + g * static_cast<std::uint64_t>(feat_dim_);
    for (std::size_t k = 0; k < upstream.size(); ++k) dst[k] += weight * upstream[k];
}

void GridGradients::add(int level, std::uint64_t row, std::span<const double> grad) {
    if (grad.size() != static_cast<std::size_t>(feat_dim_)) throw ContractViolation("GridGradients::add: wrong width");
    add_scaled(level, row, 1.0, grad);
}

void GridGradients::clear() {
    const auto f = static_cast<std::size_t>(feat_dim_);
    for (auto g : touched_) {
        flag_[g] = 0;
        std::fill_n(dense_.begin() + static_cast<std::ptrdiff_t>(g * f), f, 0.0);
    }
    touched_.clear();
}

std::vector<GridGradients::Entry> GridGradients::entries() const {
    std::vector<std::uint64_t> rows(touched_.begin(), touched_.end());
    std::sort(rows.begin(), rows.end());
    std::vector<Entry> out;
    out.reserve(rows.size());
    const auto f = static_cast<std::size_t>(feat_dim_);
    for (auto g : rows) {
        const auto it = std::upper_bound(level_row_base_.begin(), level_row_base_.end(), g);
        const int level = static_cast<int>(it - level_row_base_.begin()) - 1;
        out.push_back({level, g - level_row_base_[static_cast<std::size_t>(level)],
                       std::span<const double>(dense_).subspan(g * f, f)});
    }
    return out;
}

}  // namespace grid4d
