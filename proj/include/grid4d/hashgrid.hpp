// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "grid4d/core.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace grid4d {

/// Coarsest/finest resolution of one input axis.
struct AxisSchedule {
    int n_min = 16;
    int n_max = 2048;
    friend bool operator==(const AxisSchedule&, const AxisSchedule&) = default;
};

/// Multiresolution grid layout. `axes` holds one schedule per input
/// dimension, which is how anisotropic (e.g. coarse-in-time) grids are
/// expressed.
struct GridConfig {
    int dim = 3;
    int levels = 16;
    int table_size_log2 = 19;
    int feat_dim = 2;
    std::vector<AxisSchedule> axes;

    static GridConfig isotropic(int dim, int levels, int n_min, int n_max, int table_size_log2, int feat_dim);

    std::uint64_t table_size() const { return std::uint64_t{1} << table_size_log2; }
    std::size_t output_dim() const { return static_cast<std::size_t>(levels) * static_cast<std::size_t>(feat_dim); }

    /// Throws ConfigError when an invariant does not hold.
    void validate() const;
    friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

inline constexpr int kMaxGridDim = 4;

/// Per-axis spatial hash primes; the first axis is left unscrambled.
inline constexpr std::array<std::uint64_t, kMaxGridDim> kHashPrimes = {1ULL, 2654435761ULL, 805459861ULL,
                                                                       3674653429ULL};

/// Resolution of `axis` at `level`: floor(n_min * b^level) on a geometric
/// progression from n_min to n_max across the configured number of levels.
int level_resolution(const GridConfig& cfg, int level, int axis);

/// Spatial hash of a grid vertex, before the modulo by the table size.
std::uint64_t spatial_hash(std::span<const std::uint32_t> vertex);

struct LevelInfo {
    std::array<int, kMaxGridDim> res{};  ///< N_l per axis
    std::uint64_t rows = 0;              ///< min(T_l, prod(N_l + 1))
    bool direct = false;                 ///< dense (injective) indexing
    std::size_t offset = 0;              ///< first float of this level in the parameter buffer
};

class GridGradients;

/// Feature tables of a multiresolution hash grid plus the lookups into them.
///
/// Tables are float32; interpolation and accumulation happen in double.
class HashGrid {
public:
    HashGrid() = default;
    explicit HashGrid(GridConfig cfg);

    const GridConfig& config() const { return cfg_; }
    const std::vector<LevelInfo>& levels() const { return levels_; }
    int dim() const { return cfg_.dim; }
    std::size_t output_dim() const { return cfg_.output_dim(); }
    std::size_t param_count() const { return params_.size(); }

    std::span<float> params() { return params_; }
    std::span<const float> params() const { return params_; }
    std::span<float> row(int level, std::uint64_t row);
    std::span<const float> row(int level, std::uint64_t row) const;

    /// Row of `vertex` at `level`. Throws ContractViolation for a vertex
    /// outside [0, N_l] on any axis.
    std::uint64_t index(int level, std::span<const int> vertex) const;

    /// Concatenated per-level features (coarse to fine) at u in [0,1]^dim.
    void encode(std::span<const double> u, std::span<double> out) const;
    std::vector<double> encode(std::span<const double> u) const;

    /// Adds d(loss)/d(table) for the lookup at `u` given d(loss)/d(output).
    /// Inputs are treated as constants, so no gradient w.r.t. u exists.
    void encode_backward(std::span<const double> u, std::span<const double> upstream, GridGradients& grads) const;

    /// Corner rows and multilinear weights touched at one level. Exposed for
    /// analysis code and tests.
    struct Corner {
        std::uint64_t row;
        double weight;
    };
    std::array<Corner, (1 << kMaxGridDim)> corners(int level, std::span<const double> u, int& count) const;

    void fill(float value);
    void init_uniform(Rng& rng, double half_width);

    /// Binary blob: see docs/formats.md.
    void save(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;
    static HashGrid load(std::istream& in);
    static HashGrid load(const std::filesystem::path& path);

private:
    std::uint64_t index_unchecked(const LevelInfo& lv, const std::uint32_t* vertex) const;

    GridConfig cfg_;
    std::vector<LevelInfo> levels_;
    std::vector<float> params_;
};

/// Gradient accumulator for one HashGrid.
///
/// Backed by a dense double buffer plus a touched-row list. Contributions are
/// summed in call order, so a fixed call sequence produces bit-identical
/// sums; `entries()` reports the result sorted by (level, row).
class GridGradients {
public:
    GridGradients() = default;
    explicit GridGradients(const HashGrid& grid);

    void add(int level, std::uint64_t row, std::span<const double> grad);
    void add_scaled(int level, std::uint64_t row, double weight, std::span<const double> upstream);

    bool empty() const { return touched_.empty(); }
    std::size_t touched_rows() const { return touched_.size(); }
    void clear();

    struct Entry {
        int level;
        std::uint64_t row;
        std::span<const double> grad;
    };
    std::vector<Entry> entries() const;

    /// Dense view aligned with HashGrid::params().
    std::span<const double> dense() const { return dense_; }
    /// Global row ids (offset / F) that received a contribution, in first-touch order.
    std::span<const std::uint64_t> touched() const { return touched_; }
    int feat_dim() const { return feat_dim_; }

private:
    std::uint64_t global_row(int level, std::uint64_t row) const;

    int feat_dim_ = 0;
    std::vector<std::size_t> level_row_base_;
    std::vector<double> dense_;
    std::vector<std::uint8_t> flag_;
    std::vector<std::uint64_t> touched_;
};

}  // namespace grid4d
