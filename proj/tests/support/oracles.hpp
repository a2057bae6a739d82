// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference implementations shared by the unit and acceptance tests. They
// trade speed for directness and avoid the library's fast paths.

#include "grid4d/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace grid4d::oracle {

/// Per-pixel compositing over every splat with no bounding box. Splats must
/// already be sorted front to back.
inline Image exhaustive_composite(const std::vector<Splat2D>& splats, int width, int height, const Vec3& background) {
    Image img(width, height, background);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            Vec3 c = Vec3::Zero();
            double t = 1.0;
            for (const auto& s : splats) {
                const Mat2 inv = s.cov.inverse();
                const Vec2 d(x - s.mean.x(), y - s.mean.y());
                const double alpha = std::min(kMaxAlpha, s.opacity * std::exp(-0.5 * d.dot(inv * d)));
                if (alpha < kMinAlpha) continue;
                c += s.color * alpha * t;
                t *= 1.0 - alpha;
            }
            img.set(x, y, c + background * t);
        }
    }
    return img;
}

inline double max_channel_diff(const Image& a, const Image& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.pixels(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.r[i]) - b.r[i]));
        m = std::max(m, std::abs(static_cast<double>(a.g[i]) - b.g[i]));
        m = std::max(m, std::abs(static_cast<double>(a.b[i]) - b.b[i]));
    }
    return m;
}

/// Random scene of `n` Gaussians in front of a 32x32 camera looking down +z.
inline GaussianSet random_scene(Rng& rng, int n) {
    GaussianSet set;
    for (int i = 0; i < n; ++i) {
        Gaussian g;
        g.mu = Vec3(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(1.5, 3.0));
        g.scale = Vec3(rng.uniform(0.02, 0.15), rng.uniform(0.02, 0.15), rng.uniform(0.02, 0.15));
        g.rot = random_rotation(rng);
        g.opacity = rng.uniform(0.05, 1.0);
        g.color = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
        set.gaussians.push_back(g);
    }
    set.aabb = Aabb::bounding(set.positions()).expanded(kAabbMargin);
    return set;
}

inline Camera camera32() {
    Camera cam;
    cam.width = cam.height = 32;
    cam.fx = cam.fy = 40.0;
    cam.cx = cam.cy = 15.5;
    return cam;
}

}  // namespace grid4d::oracle
