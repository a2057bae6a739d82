// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "grid4d/core.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace grid4d {

using Mat4 = Eigen::Matrix4d;
using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// Pinhole camera. Camera space looks down +z with +y pointing down the
/// image; pixel (px, py) samples the image plane at integer coordinates.
struct Camera {
    Mat4 world_to_camera = Mat4::Identity();
    double fx = 64.0, fy = 64.0;
    double cx = 31.5, cy = 31.5;
    int width = 64, height = 64;
    double near = 0.01;

    Mat3 rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
    Vec3 translation() const { return world_to_camera.topRightCorner<3, 1>(); }

    /// Camera at `eye` looking at `target`; `fov_y` in radians.
    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_y, int width, int height);
    /// Throws ConfigError for a non-orthonormal rotation block or bad intrinsics.
    void validate() const;
};

std::vector<Camera> load_cameras(const std::filesystem::path& path);
void save_cameras(const std::filesystem::path& path, const std::vector<Camera>& cameras);

struct Splat2D {
    Vec2 mean = Vec2::Zero();  ///< pixel coordinates
    Mat2 cov = Mat2::Identity();
    double depth = 0.0;
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();
    std::size_t id = 0;  ///< tie-breaker for equal depths
};

/// Planar RGB float image.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> r, g, b;

    Image() = default;
    Image(int w, int h, const Vec3& fill = Vec3::Zero());
    std::size_t pixels() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    Vec3 at(int x, int y) const;
    void set(int x, int y, const Vec3& c);
    friend bool operator==(const Image&, const Image&) = default;
};

/// Pixel-space covariance floor added after projection (px^2).
inline constexpr double kCovarianceFloor = 0.3;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kMinAlpha = 1.0 / 255.0;

/// R diag(scale)^2 R^T.
Mat3 gaussian_covariance(const Gaussian& g);

/// Perspective projection with the local affine (Jacobian) approximation of
/// the covariance. Returns nullopt when the Gaussian is not beyond the near
/// plane.
std::optional<Splat2D> project(const Gaussian& g, const Camera& cam, std::size_t id = 0);

/// Splats of every visible Gaussian, stably sorted front to back (depth,
/// then id).
std::vector<Splat2D> project_all(const GaussianSet& set, const Camera& cam);

struct CompositeStats {
    std::size_t singular_skipped = 0;
};

/// Half-extent in standard deviations beyond which a splat of this opacity
/// cannot reach the 1/255 visibility threshold; never below 3.
double splat_extent_sigmas(double opacity);

/// Front-to-back alpha compositing of pre-sorted splats. Each splat is only
/// evaluated inside its pixel bounding box. `threads` > 1 splits rows; the
/// result is identical to the serial one.
Image composite(const std::vector<Splat2D>& sorted_splats, int width, int height, const Vec3& background,
                CompositeStats* stats = nullptr, int threads = 1);

Image render(const GaussianSet& set, const Camera& cam, const Vec3& background = Vec3::Zero(), int threads = 1);

/// Renders `deform(t)` for every timestamp and camera; output is
/// timestamp-major.
std::vector<Image> render_sequence(const std::function<GaussianSet(double)>& deform, const std::vector<Camera>& cameras,
                                   const std::vector<double>& timestamps, const Vec3& background = Vec3::Zero(),
                                   int threads = 1);

// ---------------------------------------------------------------------------
// Metrics. All throw ContractViolation on mismatched dimensions.

double l1(const Image& a, const Image& b);
double mse(const Image& a, const Image& b);
/// +inf for identical images.
double psnr(const Image& a, const Image& b);
/// Mean SSIM over channels; 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, valid-region averaging. Needs both sides >= 11.
double ssim(const Image& a, const Image& b);
inline double d_ssim(const Image& a, const Image& b) { return 0.5 * (1.0 - ssim(a, b)); }

// ---------------------------------------------------------------------------

/// Binary P6, 8 bits per channel.
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);
/// 16-bit RGB PNG.
void write_png16(const std::filesystem::path& path, const Image& img);

}  // namespace grid4d
