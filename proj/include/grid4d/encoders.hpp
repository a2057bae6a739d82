// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "grid4d/core.hpp"
#include "grid4d/hashgrid.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace grid4d {

/// How a 4D (x, y, z, t) input is split across sub-grids.
enum class EncoderKind {
    Decomposed,    ///< xyz + xyt + yzt + xzt (3D grids)
    Planes,        ///< xy, yz, xz, xt, yt, zt (2D grids)
    HyperGrid,     ///< single xyzt grid
    SpatialHyper,  ///< xyz + one xyzt grid (decomposition removed, attention kept)
};

std::string_view to_string(EncoderKind kind);
/// Accepts "decomposed", "planes", "hypergrid", "spatial-hyper".
EncoderKind encoder_kind_from_string(std::string_view name);

/// Input axes (0=x, 1=y, 2=z, 3=t) consumed by each sub-grid of `kind`, in
/// output order.
std::vector<std::vector<int>> subgrid_axes(EncoderKind kind);

struct SubGrid {
    std::string name;  ///< "xyz", "xyt", ...
    std::vector<int> axes;
    HashGrid grid;
};

/// Resolution/table layout for the decomposed encoder. The temporal grids
/// share one config whose third axis is time.
struct DecomposedConfig {
    GridConfig spatial;
    GridConfig temporal;

    /// 16 spatial levels spanning 16..2048, 32 temporal levels, 2^19 rows,
    /// F = 2. The time axis runs from min(4, n_t) to n_t = ceil(frames / 2).
    static DecomposedConfig defaults(int frames);
};

/// A set of hash grids reading projections of one normalized 4D coordinate.
///
/// For the kinds that carry a spatial grid (Decomposed, SpatialHyper) the
/// first sub-grid is the spatial one; the remaining sub-grids are temporal.
class SpaceTimeEncoder {
public:
    SpaceTimeEncoder() = default;

    static SpaceTimeEncoder decomposed(const DecomposedConfig& cfg);
    /// Six 2D grids sharing `plane_cfg` (dim must be 2).
    static SpaceTimeEncoder planes(const GridConfig& plane_cfg);
    /// One 4D grid (dim must be 4).
    static SpaceTimeEncoder hypergrid(const GridConfig& cfg4d);
    static SpaceTimeEncoder spatial_hyper(const GridConfig& spatial, const GridConfig& cfg4d);

    EncoderKind kind() const { return kind_; }
    bool has_spatial() const { return kind_ == EncoderKind::Decomposed || kind_ == EncoderKind::SpatialHyper; }

    std::vector<SubGrid>& grids() { return grids_; }
    const std::vector<SubGrid>& grids() const { return grids_; }

    std::size_t output_dim() const;
    std::size_t spatial_dim() const;
    std::size_t temporal_dim() const { return output_dim() - spatial_dim(); }

    /// Projection of u onto the axes of sub-grid `i`.
    static std::array<double, 4> project(const NormalizedCoord4& u, const std::vector<int>& axes);

    /// Concatenation of every sub-grid's features, in sub-grid order.
    void encode(const NormalizedCoord4& u, std::span<double> out) const;
    std::vector<double> encode(const NormalizedCoord4& u) const;

    /// Spatial sub-grid features only (independent of t).
    std::vector<double> encode_spatial(const NormalizedCoord4& u) const;
    /// One feature vector per temporal sub-grid, in sub-grid order.
    std::vector<std::vector<double>> encode_temporal(const NormalizedCoord4& u) const;

    /// `upstream` matches encode()'s layout; one accumulator per sub-grid.
    void backward(const NormalizedCoord4& u, std::span<const double> upstream, std::vector<GridGradients>& grads) const;
    std::vector<GridGradients> make_gradients() const;

    void init_uniform(Rng& rng, double half_width);
    void fill(float value);

    /// Writes one grid blob per sub-grid plus `encoder.json` listing them.
    void save(const std::filesystem::path& dir) const;
    static SpaceTimeEncoder load(const std::filesystem::path& dir);

private:
    EncoderKind kind_ = EncoderKind::Decomposed;
    std::vector<SubGrid> grids_;
};

// ---------------------------------------------------------------------------
// Analysis

struct Rational {
    int num = 0;
    int den = 1;
    double value() const { return static_cast<double>(num) / den; }
    friend bool operator==(const Rational&, const Rational&) = default;
};

/// Fraction of `kind`'s sub-grids that see identical projected inputs for p
/// and q. Comparison is exact on the coordinates, not on features.
Rational overlap_ratio(EncoderKind kind, const NormalizedCoord4& p, const NormalizedCoord4& q);

struct LevelCollisionStats {
    int level = 0;
    std::array<int, kMaxGridDim> res{};
    bool direct = false;
    std::uint64_t rows = 0;
    std::uint64_t distinct_vertices = 0;
    std::uint64_t distinct_rows = 0;
    /// (distinct_vertices - distinct_rows) / distinct_vertices
    double collision_rate = 0.0;
};

/// Samples `sample_count` uniform inputs, gathers the distinct grid vertices
/// they touch at every level and reports how many of them land on a row
/// already claimed by another vertex.
std::vector<LevelCollisionStats> collision_rate(const GridConfig& cfg, std::size_t sample_count, Rng& rng);

/// CSV: x,y,z,t, spatial feature norm (when present), one norm per temporal
/// sub-grid, then the full feature vector. Throws IoError on failure.
void export_features(const SpaceTimeEncoder& enc, const std::vector<NormalizedCoord4>& inputs,
                     const std::filesystem::path& path);

}  // namespace grid4d
