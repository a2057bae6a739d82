// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Arguments select a subset ("5 9").

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grid4d/cli.hpp"
#include "grid4d/encoders.hpp"
#include "grid4d/hashgrid.hpp"
#include "grid4d/renderer.hpp"
#include "grid4d/training.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace grid4d;

namespace {

const fs::path kConfigDir = GRID4D_CONFIG_DIR;
const fs::path kWork = fs::current_path() / "acceptance_work";

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> csv_lines(const fs::path& p) {
    std::vector<std::string> out;
    std::stringstream ss(slurp(p));
    std::string line;
    while (std::getline(ss, line)) out.push_back(line);
    return out;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

int cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) std::fprintf(stderr, "grid4d %s failed: %s\n", args.front().c_str(), err.str().c_str());
    return code;
}

// Drops the trailing "; " left by list building.
std::string trimmed(std::string s) {
    if (s.size() >= 2 && s.compare(s.size() - 2, 2, "; ") == 0) s.resize(s.size() - 2);
    return s;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// Mean supervision loss over every training frame.
double final_supervision_loss(const DeformationModel& model, const GeneratedScene& scene, const TrainConfig& cfg) {
    double sum = 0.0;
    for (int k = 0; k < scene.frames; ++k) {
        const double t = scene.frame_time(k);
        const auto pred = model.deform(scene.canonical, t);
        const auto truth = scene.motion.evaluate(scene.canonical, t);
        sum += supervision_loss(pred.gaussians, truth.gaussians, cfg.gamma_s, cfg.gamma_r).value;
    }
    return sum / scene.frames;
}

// 1. Overlap ratios through the analyze-overlap command.
Outcome overlap_ratios() {
    Outcome o{true, ""};
    for (const auto& [encoder, num, den] :
         std::vector<std::tuple<std::string, std::string, std::string>>{{"planes", "1", "2"}, {"decomposed", "1", "4"}}) {
        const auto dir = kWork / ("c1_" + encoder);
        fs::remove_all(dir);
        if (cli({"analyze-overlap", "--out", dir.string(), "--encoder", encoder, "--pairs", "axis-sharing",
                 "--count", "1000", "--seed", "1"}) != 0)
            return {false, encoder + ": command failed"};
        const auto lines = csv_lines(dir / "overlap.csv");
        std::size_t exact = 0;
        for (std::size_t i = 1; i < lines.size(); ++i) {
            const auto c = split(lines[i]);
            if (c.size() == 5 && c[2] == num && c[3] == den) ++exact;
        }
        o.pass = o.pass && lines.size() == 1001 && exact == 1000;
        o.detail += encoder + " " + std::to_string(exact) + "/1000 at " + num + "/" + den + "; ";
    }
    o.detail = trimmed(o.detail);
    return o;
}

// 2. 4D hyper-grid vs 3D grid collision rate at N = 64, T = 2^19.
Outcome collision_claim() {
    constexpr int kN = 64, kLog2 = 19;
    Rng rng4(11);
    const auto cfg4 = GridConfig::isotropic(4, 1, kN, kN, kLog2, 2);
    const double rate4 = collision_rate(cfg4, 1000000, rng4).front().collision_rate;

    // Each of the four 3D sub-grids has this configuration.
    Rng rng3(12);
    const auto cfg3 = GridConfig::isotropic(3, 1, kN, kN, kLog2, 2);
    const auto st3 = collision_rate(cfg3, 1000000, rng3).front();

    // Same 3D vertex set pushed through the hash regardless of fit.
    const std::uint64_t rows = std::uint64_t{1} << kLog2;
    std::vector<std::uint8_t> seen(rows, 0);
    std::uint64_t vertices = 0, distinct = 0;
    for (std::uint32_t z = 0; z <= kN; ++z)
        for (std::uint32_t y = 0; y <= kN; ++y)
            for (std::uint32_t x = 0; x <= kN; ++x) {
                const std::array<std::uint32_t, 3> v{x, y, z};
                const auto r = spatial_hash(v) % rows;
                ++vertices;
                if (!seen[r]) {
                    seen[r] = 1;
                    ++distinct;
                }
            }
    const double forced3 = static_cast<double>(vertices - distinct) / static_cast<double>(vertices);

    const double worst3 = std::max(st3.collision_rate, forced3);
    return {rate4 > 0.0 && rate4 >= 2.0 * worst3,
            "4D " + fmt("%.4f", rate4) + ", 3D " + fmt("%.4f", st3.collision_rate) +
                (st3.direct ? " (direct)" : "") + ", 3D forced hash " + fmt("%.4f", forced3)};
}

// 3. Finite-difference gradient check on the shrunken pipeline.
Outcome gradient_correctness() {
    const TrainConfig cfg = shrunken_check_config();
    Rng scene_rng(cfg.scene_seed);
    const auto scene = generate_scene(cfg.scene, scene_rng);
    Rng init(cfg.seed);
    auto model = build_check_model(cfg, scene, init);
    const auto report = gradient_check(model, scene, cfg);
    std::string detail;
    double worst = 0.0;
    for (const auto& g : report.groups) {
        detail += g.group + " " + fmt("%.2e", g.max_rel_error) + "; ";
        worst = std::max(worst, g.max_rel_error);
    }
    return {report.passed() && !report.groups.empty(), "max " + fmt("%.2e", worst) + " [" + trimmed(detail) + "]"};
}

std::vector<Camera> ring_cameras(int count, int size) {
    std::vector<Camera> cams;
    const Vec3 target = Vec3::Constant(0.5);
    for (int k = 0; k < count; ++k) {
        const double a = 2.0 * std::numbers::pi * k / count;
        const Vec3 eye = target + 2.0 * Vec3(std::cos(a), 0.35, std::sin(a));
        cams.push_back(Camera::look_at(eye, target, Vec3::UnitY(), 40.0 * std::numbers::pi / 180.0, size, size));
    }
    return cams;
}

// 4. Zero heads leave every timestamp's render identical to the canonical one.
Outcome identity_warmup() {
    const TrainConfig cfg = TrainConfig::from_file(kConfigDir / "desk.cfg");
    Rng scene_rng(cfg.scene_seed);
    const auto scene = generate_scene(cfg.scene, scene_rng);
    Rng init(cfg.seed);
    const auto model = build_model(cfg, scene, init);
    std::vector<double> times;
    for (int k = 0; k < scene.frames; ++k) times.push_back(scene.frame_time(k));
    Rng trng(5);
    for (int i = 0; i < 5; ++i) times.push_back(trng.uniform());
    const auto cams = ring_cameras(2, 64);
    std::vector<Image> canonical;
    for (const auto& cam : cams) canonical.push_back(render(scene.canonical, cam));
    std::size_t mismatches = 0;
    for (double t : times) {
        const auto set = model.deform(scene.canonical, t);
        for (std::size_t c = 0; c < cams.size(); ++c)
            if (!(render(set, cams[c]) == canonical[c])) ++mismatches;
    }
    return {mismatches == 0, std::to_string(times.size() * cams.size() - mismatches) + "/" +
                                 std::to_string(times.size() * cams.size()) + " renders bit-identical"};
}

// 5. Desk-scale fit of the rigid scene through train and eval.
Outcome desk_fit() {
    const auto run = kWork / "c5_train_a";
    const auto ev = kWork / "c5_eval";
    fs::remove_all(run);
    fs::remove_all(ev);
    if (cli({"train", "--out", run.string(), "--config", (kConfigDir / "desk.cfg").string()}) != 0)
        return {false, "train failed"};
    if (cli({"eval", "--out", ev.string(), "--checkpoint", run.string(), "--scene", (run / "scene.json").string()}) != 0)
        return {false, "eval failed"};
    const auto s = nlohmann::json::parse(slurp(ev / "summary.json"));
    const double p = s["mean_psnr"], e = s["mean_position_error"];
    return {p >= 30.0 && e < 1e-2, "PSNR " + fmt("%.2f", p) + " dB, position error " + fmt("%.5f", e)};
}

// 6. Directional attention vs the unit-range variant on the shadow-pair scene.
Outcome attention_ablation() {
    const TrainConfig base = TrainConfig::from_file(kConfigDir / "ablation_attention.cfg");
    int wins = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        TrainConfig cfg = base;
        cfg.seed = seed;
        cfg.scene_seed = seed;
        Rng scene_rng(cfg.scene_seed);
        const auto scene = generate_scene(cfg.scene, scene_rng);
        double loss[2];
        for (int v = 0; v < 2; ++v) {
            TrainConfig c = cfg;
            c.network.attention = v == 0 ? AttentionMode::Directional : AttentionMode::Unit;
            loss[v] = final_supervision_loss(train(c, scene).model, scene, c);
        }
        if (loss[0] <= loss[1]) ++wins;
        detail += "seed " + std::to_string(seed) + ": " + fmt("%.3e", loss[0]) + " vs " + fmt("%.3e", loss[1]) + "; ";
    }
    return {wins == 3, std::to_string(wins) + "/3 [" + trimmed(detail) + "]"};
}

// 7. Smoothness regularization halves the perturbation feature distance.
Outcome smoothness_ablation() {
    const TrainConfig base = TrainConfig::from_file(kConfigDir / "ablation_smoothness.cfg");
    Rng scene_rng(base.scene_seed);
    const auto scene = generate_scene(base.scene, scene_rng);
    double dist[2];
    for (int v = 0; v < 2; ++v) {
        TrainConfig c = base;
        c.lambda_r = v == 0 ? 0.5 : 0.0;
        const auto result = train(c, scene);
        dist[v] = perturbation_feature_distance(result.model.encoder(), scene, result.model,
                                                perturbation_of(c, scene.frames), 99);
    }
    return {dist[0] <= 0.5 * dist[1],
            "lambda_r 0.5: " + fmt("%.4e", dist[0]) + ", lambda_r 0: " + fmt("%.4e", dist[1])};
}

// 8. Bounded compositing against the exhaustive oracle plus the hand example.
Outcome rasterizer_correctness() {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(static_cast<std::uint64_t>(500 + trial));
        const auto set = oracle::random_scene(rng, 1 + static_cast<int>(rng.uniform() * 50.0) % 50);
        const auto splats = project_all(set, oracle::camera32());
        const Vec3 bg(0.1, 0.2, 0.3);
        worst = std::max(worst, oracle::max_channel_diff(composite(splats, 32, 32, bg),
                                                         oracle::exhaustive_composite(splats, 32, 32, bg)));
    }
    auto splat = [](const Vec3& color, double depth, std::size_t id) {
        Splat2D s;
        s.mean = Vec2(4, 4);
        s.cov = Mat2::Identity();
        s.opacity = 0.5;
        s.color = color;
        s.depth = depth;
        s.id = id;
        return s;
    };
    const auto img = composite({splat(Vec3(1, 0, 0), 1, 0), splat(Vec3(1, 1, 1), 2, 1)}, 9, 9, Vec3::Zero());
    const Vec3 px = img.at(4, 4);
    const bool hand = px.x() == 0.75 && px.y() == 0.25 && px.z() == 0.25;
    return {worst < 1e-4 && hand, "max diff " + fmt("%.2e", worst) + ", two-splat (" + fmt("%g", px.x()) + ", " +
                                      fmt("%g", px.y()) + ", " + fmt("%g", px.z()) + ")"};
}

// 9. A second identical train run must match the first byte for byte.
Outcome determinism() {
    const auto a = kWork / "c5_train_a";
    const auto b = kWork / "c9_train_b";
    if (!fs::exists(a / "metrics.csv")) {
        fs::remove_all(a);
        if (cli({"train", "--out", a.string(), "--config", (kConfigDir / "desk.cfg").string()}) != 0)
            return {false, "first train failed"};
    }
    fs::remove_all(b);
    if (cli({"train", "--out", b.string(), "--config", (kConfigDir / "desk.cfg").string()}) != 0)
        return {false, "second train failed"};
    std::size_t compared = 0, differing = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), a);
        ++compared;
        if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) ++differing;
    }
    return {compared > 0 && differing == 0 && fs::exists(a / "metrics.csv"),
            std::to_string(compared - differing) + "/" + std::to_string(compared) + " files byte-identical"};
}

// 10. Resolution schedule endpoints and monotonicity under defaults.
Outcome resolution_schedule() {
    const auto cfg = GridConfig::isotropic(3, 16, 16, 2048, 19, 2);
    bool mono = true;
    for (int l = 1; l < cfg.levels; ++l) mono = mono && level_resolution(cfg, l, 0) >= level_resolution(cfg, l - 1, 0);
    const int first = level_resolution(cfg, 0, 0), last = level_resolution(cfg, 15, 0);
    return {first == 16 && last == 2048 && mono,
            "l0 " + std::to_string(first) + ", l15 " + std::to_string(last) + (mono ? ", monotone" : ", not monotone")};
}

struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    fs::create_directories(kWork);

    const std::vector<Criterion> criteria = {
        {1, "overlap ratios", 5.0, overlap_ratios},
        {2, "collision claim", 30.0, collision_claim},
        {3, "gradient correctness", 120.0, gradient_correctness},
        {4, "identity warmup", 10.0, identity_warmup},
        {5, "desk-scale fitting", 900.0, desk_fit},
        {6, "directional attention ablation", 1800.0, attention_ablation},
        {7, "smoothness ablation", 1800.0, smoothness_ablation},
        {8, "rasterizer correctness", 5.0, rasterizer_correctness},
        {9, "determinism", 900.0, determinism},
        {10, "resolution schedule", 1.0, resolution_schedule},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs < c.limit_s;
        const bool pass = o.pass && in_time;
        if (!pass) ++failures;
        std::printf("%s criterion %d (%s): %s; %.1f s of %.0f s%s\n", pass ? "PASS" : "FAIL", c.id, c.name,
                    o.detail.c_str(), secs, c.limit_s, in_time ? "" : " (over time limit)");
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
