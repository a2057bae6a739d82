// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/renderer.hpp"

#include <Eigen/Dense>
#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <thread>

namespace grid4d {

// ---------------------------------------------------------------------------
// Camera

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_y, int width, int height) {
    const Vec3 fwd = (target - eye).normalized();
    const Vec3 right = fwd.cross(up).normalized();
    const Vec3 down = fwd.cross(right);
    Camera cam;
    Mat3 r;
    r.row(0) = right.transpose();
    r.row(1) = down.transpose();
    r.row(2) = fwd.transpose();
    cam.world_to_camera.setIdentity();
    cam.world_to_camera.topLeftCorner<3, 3>() = r;
    cam.world_to_camera.topRightCorner<3, 1>() = -r * eye;
    cam.width = width;
    cam.height = height;
    cam.fy = 0.5 * height / std::tan(0.5 * fov_y);
    cam.fx = cam.fy;
    cam.cx = 0.5 * (width - 1);
    cam.cy = 0.5 * (height - 1);
    return cam;
}

void Camera::validate() const {
    if (width <= 0 || height <= 0) throw ConfigError("camera: image size must be positive");
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera: focal lengths must be positive");
    if (!(near > 0.0)) throw ConfigError("camera: near plane must be positive");
    const Mat3 r = rotation();
    if (!((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9))
        throw ConfigError("camera: rotation block is not orthonormal");
}

namespace {

Camera camera_from_json(const nlohmann::json& j) {
    Camera cam;
    const auto& w = j.at("W");
    if (!w.is_array() || w.size() != 16) throw ConfigError("camera: W must hold 16 numbers (row-major 4x4)");
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) cam.world_to_camera(r, c) = w[static_cast<std::size_t>(4 * r + c)].get<double>();
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.near = j.value("near", 0.01);
    cam.validate();
    return cam;
}

nlohmann::json camera_to_json(const Camera& cam) {
    nlohmann::json w = nlohmann::json::array();
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) w.push_back(cam.world_to_camera(r, c));
    return {{"W", w}, {"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx}, {"cy", cam.cy},
            {"width", cam.width}, {"height", cam.height}, {"near", cam.near}};
}

}  // namespace

std::vector<Camera> load_cameras(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read camera file " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        std::vector<Camera> cams;
        if (j.is_array()) {
            for (const auto& c : j) cams.push_back(camera_from_json(c));
        } else {
            cams.push_back(camera_from_json(j));
        }
        if (cams.empty()) throw ConfigError("camera file lists no cameras");
        return cams;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("camera file " + path.string() + ": " + e.what());
    }
}

void save_cameras(const std::filesystem::path& path, const std::vector<Camera>& cameras) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : cameras) j.push_back(camera_to_json(c));
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Image

Image::Image(int w, int h, const Vec3& fill) : width(w), height(h) {
    if (w <= 0 || h <= 0) throw ContractViolation("Image: dimensions must be positive");
    r.assign(pixels(), static_cast<float>(fill.x()));
    g.assign(pixels(), static_cast<float>(fill.y()));
    b.assign(pixels(), static_cast<float>(fill.z()));
}

Vec3 Image::at(int x, int y) const {
    const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
    return {r[i], g[i], b[i]};
}

void Image::set(int x, int y, const Vec3& c) {
    const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
    r[i] = static_cast<float>(c.x());
    g[i] = static_cast<float>(c.y());
    b[i] = static_cast<float>(c.z());
}

// ---------------------------------------------------------------------------
// Projection

Mat3 gaussian_covariance(const Gaussian& g) {
    const Mat3 r = quat_to_matrix(g.rot);
    const Mat3 m = r * g.scale.asDiagonal();
    return m * m.transpose();
}

std::optional<Splat2D> project(const Gaussian& g, const Camera& cam, std::size_t id) {
    const Mat3 w = cam.rotation();
    const Vec3 p = w * g.mu + cam.translation();
    if (!(p.z() > cam.near)) return std::nullopt;

    const double inv_z = 1.0 / p.z();
    Splat2D s;
    s.mean = {cam.fx * p.x() * inv_z + cam.cx, cam.fy * p.y() * inv_z + cam.cy};
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx * inv_z, 0.0, -cam.fx * p.x() * inv_z * inv_z,
         0.0, cam.fy * inv_z, -cam.fy * p.y() * inv_z * inv_z;
    const Eigen::Matrix<double, 2, 3> jw = j * w;
    s.cov = jw * gaussian_covariance(g) * jw.transpose();
    s.cov(0, 1) = s.cov(1, 0) = 0.5 * (s.cov(0, 1) + s.cov(1, 0));
    s.cov += kCovarianceFloor * Mat2::Identity();
    s.depth = p.z();
    s.opacity = g.opacity;
    s.color = g.color;
    s.id = id;
    return s;
}

std::vector<Splat2D> project_all(const GaussianSet& set, const Camera& cam) {
    std::vector<Splat2D> splats;
    splats.reserve(set.size());
    for (std::size_t i = 0; i < set.size(); ++i)
        if (auto s = project(set.gaussians[i], cam, i)) splats.push_back(*s);
    std::stable_sort(splats.begin(), splats.end(), [](const Splat2D& a, const Splat2D& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.id < b.id);
    });
    return splats;
}

// ---------------------------------------------------------------------------
// Compositing

double splat_extent_sigmas(double opacity) {
    const double ratio = opacity / kMinAlpha;
    const double reach = ratio > 1.0 ? std::sqrt(2.0 * std::log(ratio)) : 0.0;
    return std::max(3.0, reach) + 1e-6;
}

namespace {

struct PreparedSplat {
    const Splat2D* s;
    double ia, ib, ic;  // inverse covariance (a b; b c)
    int x0, x1, y0, y1; // inclusive pixel box
};

void composite_rows(const std::vector<PreparedSplat>& prepared, int width, int y_begin, int y_end,
                    const Vec3& background, Image& img) {
    const auto w = static_cast<std::size_t>(width);
    const std::size_t n = static_cast<std::size_t>(y_end - y_begin) * w;
    std::vector<double> acc(3 * n, 0.0);
    std::vector<double> trans(n, 1.0);
    for (const auto& p : prepared) {
        const int ya = std::max(p.y0, y_begin), yb = std::min(p.y1, y_end - 1);
        if (ya > yb) continue;
        for (int y = ya; y <= yb; ++y) {
            for (int x = p.x0; x <= p.x1; ++x) {
                const double dx = x - p.s->mean.x(), dy = y - p.s->mean.y();
                const double power = -0.5 * (p.ia * dx * dx + 2.0 * p.ib * dx * dy + p.ic * dy * dy);
                const double alpha = std::min(kMaxAlpha, p.s->opacity * std::exp(power));
                if (alpha < kMinAlpha) continue;
                const std::size_t i = static_cast<std::size_t>(y - y_begin) * w + static_cast<std::size_t>(x);
                const double t = trans[i];
                acc[3 * i + 0] += p.s->color.x() * alpha * t;
                acc[3 * i + 1] += p.s->color.y() * alpha * t;
                acc[3 * i + 2] += p.s->color.z() * alpha * t;
                trans[i] = t * (1.0 - alpha);
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const int y = y_begin + static_cast<int>(i / w), x = static_cast<int>(i % w);
        img.set(x, y,
                {acc[3 * i + 0] + background.x() * trans[i], acc[3 * i + 1] + background.y() * trans[i],
                 acc[3 * i + 2] + background.z() * trans[i]});
    }
}

}  // namespace

Image composite(const std::vector<Splat2D>& splats, int width, int height, const Vec3& background,
                CompositeStats* stats, int threads) {
    Image img(width, height, background);
    std::vector<PreparedSplat> prepared;
    prepared.reserve(splats.size());
    std::size_t singular = 0;
    for (const auto& s : splats) {
        if (!s.mean.allFinite() || !s.cov.allFinite()) throw ContractViolation("composite: non-finite splat");
        if (s.opacity < kMinAlpha) continue;  // can never pass the visibility threshold
        const double det = s.cov.determinant();
        if (!(det > 0.0) || s.cov(0, 0) <= 0.0) {
            ++singular;
            continue;
        }
        PreparedSplat p{&s, s.cov(1, 1) / det, -s.cov(0, 1) / det, s.cov(0, 0) / det, 0, 0, 0, 0};
        const double mid = 0.5 * (s.cov(0, 0) + s.cov(1, 1));
        const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
        const double radius = splat_extent_sigmas(s.opacity) * std::sqrt(lambda_max);
        p.x0 = std::max(0, static_cast<int>(std::floor(s.mean.x() - radius)));
        p.x1 = std::min(width - 1, static_cast<int>(std::ceil(s.mean.x() + radius)));
        p.y0 = std::max(0, static_cast<int>(std::floor(s.mean.y() - radius)));
        p.y1 = std::min(height - 1, static_cast<int>(std::ceil(s.mean.y() + radius)));
        if (p.x0 > p.x1 || p.y0 > p.y1) continue;
        prepared.push_back(p);
    }
    if (stats) stats->singular_skipped = singular;

    threads = std::clamp(threads, 1, height);
    if (threads == 1) {
        composite_rows(prepared, width, 0, height, background, img);
        return img;
    }
    std::vector<std::thread> pool;
    const int chunk = (height + threads - 1) / threads;
    for (int y0 = 0; y0 < height; y0 += chunk)
        pool.emplace_back(composite_rows, std::cref(prepared), width, y0, std::min(height, y0 + chunk),
                          std::cref(background), std::ref(img));
    for (auto& t : pool) t.join();
    return img;
}

Image render(const GaussianSet& set, const Camera& cam, const Vec3& background, int threads) {
    return composite(project_all(set, cam), cam.width, cam.height, background, nullptr, threads);
}

std::vector<Image> render_sequence(const std::function<GaussianSet(double)>& deform, const std::vector<Camera>& cameras,
                                   const std::vector<double>& timestamps, const Vec3& background, int threads) {
    std::vector<Image> out;
    for (double t : timestamps) {
        if (t < 0.0 || t > 1.0) throw ContractViolation("render_sequence: timestamps must lie in [0, 1]");
        const GaussianSet set = deform(t);
        for (const auto& cam : cameras) out.push_back(render(set, cam, background, threads));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

void check_same(const Image& a, const Image& b, const char* what) {
    if (a.width != b.width || a.height != b.height || a.pixels() == 0)
        throw ContractViolation(std::string(what) + ": image dimensions differ");
}

std::array<const std::vector<float>*, 3> planes(const Image& img) { return {&img.r, &img.g, &img.b}; }

}  // namespace

double l1(const Image& a, const Image& b) {
    check_same(a, b, "l1");
    double sum = 0.0;
    const auto pa = planes(a), pb = planes(b);
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < a.pixels(); ++i) sum += std::abs(static_cast<double>((*pa[c])[i]) - (*pb[c])[i]);
    return sum / (3.0 * static_cast<double>(a.pixels()));
}

double mse(const Image& a, const Image& b) {
    check_same(a, b, "mse");
    double sum = 0.0;
    const auto pa = planes(a), pb = planes(b);
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < a.pixels(); ++i) {
            const double d = static_cast<double>((*pa[c])[i]) - (*pb[c])[i];
            sum += d * d;
        }
    return sum / (3.0 * static_cast<double>(a.pixels()));
}

double psnr(const Image& a, const Image& b) {
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

std::array<double, kSsimWindow> ssim_kernel() {
    std::array<double, kSsimWindow> k{};
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - kSsimWindow / 2;
        k[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        sum += k[static_cast<std::size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

/// Valid-region separable filtering; output is (w - 10) x (h - 10).
std::vector<double> filter_valid(const std::vector<double>& src, int w, int h) {
    static const auto k = ssim_kernel();
    const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
    std::vector<double> tmp(static_cast<std::size_t>(ow) * static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < kSsimWindow; ++i) s += k[static_cast<std::size_t>(i)] * src[static_cast<std::size_t>(y * w + x + i)];
            tmp[static_cast<std::size_t>(y * ow + x)] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(ow) * static_cast<std::size_t>(oh));
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < kSsimWindow; ++i) s += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>((y + i) * ow + x)];
            out[static_cast<std::size_t>(y * ow + x)] = s;
        }
    return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
    check_same(a, b, "ssim");
    if (a.width < kSsimWindow || a.height < kSsimWindow) throw ContractViolation("ssim: image smaller than the 11x11 window");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const auto pa = planes(a), pb = planes(b);
    const std::size_t n = a.pixels();
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = (*pa[c])[i];
            y[i] = (*pb[c])[i];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = filter_valid(x, a.width, a.height), my = filter_valid(y, a.width, a.height);
        const auto sxx = filter_valid(xx, a.width, a.height), syy = filter_valid(yy, a.width, a.height);
        const auto sxy = filter_valid(xy, a.width, a.height);
        double sum = 0.0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
            sum += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
                   ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += sum / static_cast<double>(mx.size());
    }
    return total / 3.0;
}

// ---------------------------------------------------------------------------
// Image files

namespace {

std::uint8_t to_u8(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    std::vector<std::uint8_t> buf(3 * img.pixels());
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        buf[3 * i + 0] = to_u8(img.r[i]);
        buf[3 * i + 1] = to_u8(img.g[i]);
        buf[3 * i + 2] = to_u8(img.b[i]);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported PPM " + path.string());
    in.get();
    std::vector<std::uint8_t> buf(3 * static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw IoError("truncated PPM " + path.string());
    Image img(w, h);
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        img.r[i] = buf[3 * i + 0] / 255.0f;
        img.g[i] = buf[3 * i + 1] / 255.0f;
        img.b[i] = buf[3 * i + 2] / 255.0f;
    }
    return img;
}

void write_png16(const std::filesystem::path& path, const Image& img) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    std::vector<std::uint8_t> row(6 * static_cast<std::size_t>(img.width));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 16,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const Vec3 c = img.at(x, y);
            for (int k = 0; k < 3; ++k) {
                const auto v = static_cast<std::uint16_t>(std::lround(std::clamp(c[k], 0.0, 1.0) * 65535.0));
                row[static_cast<std::size_t>(6 * x + 2 * k)] = static_cast<std::uint8_t>(v >> 8);  // big-endian
                row[static_cast<std::size_t>(6 * x + 2 * k + 1)] = static_cast<std::uint8_t>(v & 0xFF);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace grid4d
