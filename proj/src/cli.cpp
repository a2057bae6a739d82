// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/cli.hpp"

#include "grid4d/core.hpp"
#include "grid4d/encoders.hpp"
#include "grid4d/renderer.hpp"
#include "grid4d/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numbers>
#include <ostream>
#include <sstream>

namespace grid4d::cli {

namespace fs = std::filesystem;

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("SHA-256 unavailable");
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    std::string hex;
    char b[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(b, sizeof b, "%02x", md[i]);
        hex += b;
    }
    return hex;
}

void write_manifest(const fs::path& dir, const std::string& command) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(fs::relative(e.path(), dir));
    std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
        return a.generic_string() < b.generic_string();
    });
    nlohmann::json j;
    j["command"] = command;
    j["artifacts"] = nlohmann::json::array();
    for (const auto& f : files)
        j["artifacts"].push_back(
            {{"path", f.generic_string()}, {"bytes", fs::file_size(dir / f)}, {"sha256", sha256_file(dir / f)}});
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << j.dump(2) << "\n";
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
    if (flag) return *flag;
    if (const char* env = std::getenv("GRID4D_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(env, &used);
            if (used == std::char_traits<char>::length(env)) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError("GRID4D_SEED must be an unsigned integer");
    }
    return fallback;
}

std::vector<Camera> default_cameras(int count, int size) {
    std::vector<Camera> cams;
    const Vec3 target = Vec3::Constant(0.5);
    for (int k = 0; k < count; ++k) {
        const double a = 2.0 * std::numbers::pi * k / count;
        const Vec3 eye = target + 2.0 * Vec3(std::cos(a), 0.35, std::sin(a));
        cams.push_back(Camera::look_at(eye, target, Vec3::UnitY(), 40.0 * std::numbers::pi / 180.0, size, size));
    }
    return cams;
}

// Accepts a train output directory or a model directory.
DeformationModel load_checkpoint(const fs::path& path) {
    if (fs::exists(path / "model" / "model.json")) return DeformationModel::load(path / "model");
    return DeformationModel::load(path);
}

// Common options bound to each subcommand.
struct Common {
    std::string out;
    std::optional<std::uint64_t> seed;
    int threads = 1;
};

void add_common(CLI::App* app, Common& c, bool needs_out = true) {
    auto* o = app->add_option("--out", c.out, "output directory");
    if (needs_out) o->required();
    app->add_option("--seed", c.seed, "random seed (falls back to GRID4D_SEED)");
    app->add_option("--threads", c.threads, "worker thread cap")->check(CLI::PositiveNumber);
}

void echo(const fs::path& dir, const nlohmann::json& resolved) {
    write_text(dir / "resolved_config.json", resolved.dump(2) + "\n");
}

std::vector<double> parse_times(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size() || !std::isfinite(v)) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("--times: '" + item + "' is not a number");
        }
    }
    if (out.empty()) throw ConfigError("--times: empty list");
    return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app("decomposed 4D hash encoding and deformation fields on synthetic scenes", "grid4d");
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    // gen-scene
    Common gen_c;
    std::string gen_kind = "rigid";
    SceneSpec gen_spec;
    int gen_cams = 4, gen_size = 64;
    auto* gen = app.add_subcommand("gen-scene", "generate a synthetic dynamic Gaussian scene");
    add_common(gen, gen_c);
    gen->add_option("--kind", gen_kind, "rigid | articulated | sinusoidal | shadow-pair");
    gen->add_option("--gaussians", gen_spec.gaussians)->check(CLI::PositiveNumber);
    gen->add_option("--frames", gen_spec.frames)->check(CLI::Range(2, 100000));
    gen->add_option("--cameras", gen_cams, "number of ring cameras written to cameras.json")->check(CLI::PositiveNumber);
    gen->add_option("--image-size", gen_size)->check(CLI::PositiveNumber);

    // train
    Common tr_c;
    std::string tr_config, tr_scene;
    std::vector<std::string> tr_set;
    auto* tr = app.add_subcommand("train", "train a deformation model");
    add_common(tr, tr_c);
    tr->add_option("--config", tr_config, "key = value config file")->check(CLI::ExistingFile);
    tr->add_option("--scene", tr_scene, "scene JSON (generated from the config when omitted)")->check(CLI::ExistingFile);
    tr->add_option("--set", tr_set, "override a config key: key=value");

    // render
    Common rd_c;
    std::string rd_ckpt, rd_scene, rd_cams, rd_times;
    bool rd_png = false;
    auto* rd = app.add_subcommand("render", "render a scene (deformed by a checkpoint, or ground truth)");
    add_common(rd, rd_c);
    rd->add_option("--checkpoint", rd_ckpt)->check(CLI::ExistingDirectory);
    rd->add_option("--scene", rd_scene)->required()->check(CLI::ExistingFile);
    rd->add_option("--cameras", rd_cams)->check(CLI::ExistingFile);
    rd->add_option("--times", rd_times, "comma-separated timestamps (default: every frame)");
    rd->add_flag("--png", rd_png, "also write 16-bit PNGs");

    // eval
    Common ev_c;
    std::string ev_ckpt, ev_scene, ev_cams;
    auto* ev = app.add_subcommand("eval", "per-frame PSNR/SSIM of a checkpoint against ground truth");
    add_common(ev, ev_c);
    ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingDirectory);
    ev->add_option("--scene", ev_scene)->required()->check(CLI::ExistingFile);
    ev->add_option("--cameras", ev_cams)->check(CLI::ExistingFile);

    // grad-check
    Common gc_c;
    std::string gc_config;
    std::vector<std::string> gc_set;
    double gc_tol = 1e-4;
    int gc_gaussians = 32;
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check on a shrunken pipeline");
    add_common(gc, gc_c);
    gc->add_option("--config", gc_config)->check(CLI::ExistingFile);
    gc->add_option("--set", gc_set, "override a config key: key=value");
    gc->add_option("--tolerance", gc_tol)->check(CLI::PositiveNumber);
    gc->add_option("--gaussians", gc_gaussians)->check(CLI::PositiveNumber);

    // analyze-overlap
    Common ov_c;
    std::string ov_encoder = "decomposed", ov_pairs = "axis-sharing";
    int ov_count = 1000;
    auto* ov = app.add_subcommand("analyze-overlap", "overlap ratio of point pairs under an encoder's decomposition");
    add_common(ov, ov_c);
    ov->add_option("--encoder", ov_encoder, "decomposed | planes | hypergrid | spatial-hyper");
    ov->add_option("--pairs", ov_pairs, "axis-sharing | random");
    ov->add_option("--count", ov_count)->check(CLI::PositiveNumber);

    // analyze-collisions
    Common co_c;
    int co_dim = 4, co_levels = 1, co_nmin = 64, co_nmax = 64, co_log2 = 19;
    std::size_t co_samples = 1000000;
    auto* co = app.add_subcommand("analyze-collisions", "per-level hash collision rates");
    add_common(co, co_c);
    co->add_option("--dim", co_dim)->check(CLI::Range(1, 4));
    co->add_option("--levels", co_levels)->check(CLI::PositiveNumber);
    co->add_option("--n-min", co_nmin)->check(CLI::PositiveNumber);
    co->add_option("--n-max", co_nmax)->check(CLI::PositiveNumber);
    co->add_option("--table-log2", co_log2)->check(CLI::Range(1, 30));
    co->add_option("--samples", co_samples)->check(CLI::Range(std::size_t{2}, std::size_t{100000000}));

    // export-features
    Common ef_c;
    std::string ef_ckpt, ef_scene;
    double ef_t = 0.0;
    auto* ef = app.add_subcommand("export-features", "per-Gaussian encoder features at one timestamp");
    add_common(ef, ef_c);
    ef->add_option("--checkpoint", ef_ckpt)->required()->check(CLI::ExistingDirectory);
    ef->add_option("--scene", ef_scene)->required()->check(CLI::ExistingFile);
    ef->add_option("--t", ef_t)->check(CLI::Range(0.0, 1.0));

    // deformation-map
    Common dm_c;
    std::string dm_ckpt, dm_scene;
    double dm_t = 0.0, dm_tau = kDefaultMapTau, dm_limit = std::numeric_limits<double>::infinity();
    auto* dm = app.add_subcommand("deformation-map", "finite-difference velocity of every Gaussian");
    add_common(dm, dm_c);
    dm->add_option("--checkpoint", dm_ckpt)->required()->check(CLI::ExistingDirectory);
    dm->add_option("--scene", dm_scene)->required()->check(CLI::ExistingFile);
    dm->add_option("--t", dm_t)->check(CLI::Range(0.0, 1.0));
    dm->add_option("--tau", dm_tau)->check(CLI::PositiveNumber);
    dm->add_option("--limit", dm_limit)->check(CLI::PositiveNumber);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }

    auto apply_overrides = [](TrainConfig& cfg, const std::vector<std::string>& sets) {
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            cfg.set(s.substr(0, eq), s.substr(eq + 1));
        }
    };

    try {
        if (gen->parsed()) {
            gen_spec.kind = motion_kind_from_string(gen_kind);
            const auto seed = resolve_seed(gen_c.seed, 1);
            Rng rng(seed);
            const auto scene = generate_scene(gen_spec, rng);
            const fs::path dir(gen_c.out);
            fs::create_directories(dir);
            save_scene(dir / "scene.json", scene.to_file());
            save_cameras(dir / "cameras.json", default_cameras(gen_cams, gen_size));
            echo(dir, {{"command", "gen-scene"},
                       {"kind", gen_kind},
                       {"gaussians", gen_spec.gaussians},
                       {"frames", gen_spec.frames},
                       {"cameras", gen_cams},
                       {"image_size", gen_size},
                       {"seed", seed}});
            write_manifest(dir, "gen-scene");
            out << "wrote " << (dir / "scene.json").string() << "\n";
            return kExitOk;
        }

        if (tr->parsed()) {
            TrainConfig cfg = tr_config.empty() ? TrainConfig{} : TrainConfig::from_file(tr_config);
            apply_overrides(cfg, tr_set);
            cfg.seed = resolve_seed(tr_c.seed, cfg.seed);
            cfg.validate();
            GeneratedScene scene;
            if (tr_scene.empty()) {
                Rng rng(cfg.scene_seed);
                scene = generate_scene(cfg.scene, rng);
            } else {
                scene = GeneratedScene::from_file(load_scene(tr_scene));
            }
            const fs::path dir(tr_c.out);
            fs::create_directories(dir);
            TrainResult result;
            try {
                result = train(cfg, scene, dir / "last_good");
            } catch (const DivergenceError&) {
                write_text(dir / "config.txt", cfg.to_text());
                write_manifest(dir, "train");
                throw;
            }
            save_checkpoint(dir, result, cfg);
            save_scene(dir / "scene.json", scene.to_file());
            write_manifest(dir, "train");
            const auto& last = result.log.back();
            out << "trained " << cfg.total_steps << " steps, final sup_loss " << fmt(last.sup_loss) << "\n";
            return kExitOk;
        }

        if (rd->parsed() || ev->parsed()) {
            const bool is_eval = ev->parsed();
            const Common& c = is_eval ? ev_c : rd_c;
            const std::string& cams_path = is_eval ? ev_cams : rd_cams;
            const std::string& ckpt = is_eval ? ev_ckpt : rd_ckpt;
            const auto scene = GeneratedScene::from_file(load_scene(is_eval ? ev_scene : rd_scene));
            const auto cams = cams_path.empty() ? default_cameras(4, 64) : load_cameras(cams_path);
            for (const auto& cam : cams) cam.validate();
            std::optional<DeformationModel> model;
            if (!ckpt.empty()) model = load_checkpoint(ckpt);
            std::vector<double> times;
            if (!is_eval && !rd_times.empty()) {
                times = parse_times(rd_times);
                for (double t : times)
                    if (t < scene.t_range.min || t > scene.t_range.max) throw ConfigError("--times: value outside the scene's time range");
            } else {
                for (int k = 0; k < scene.frames; ++k) times.push_back(scene.frame_time(k));
            }
            const fs::path dir(c.out);
            fs::create_directories(dir);
            auto predicted = [&](double t) {
                return model ? model->deform(scene.canonical, t) : scene.motion.evaluate(scene.canonical, t);
            };
            if (!is_eval) {
                for (std::size_t k = 0; k < times.size(); ++k) {
                    const auto set = predicted(times[k]);
                    for (std::size_t ci = 0; ci < cams.size(); ++ci) {
                        const auto img = render(set, cams[ci], Vec3::Zero(), c.threads);
                        char name[64];
                        std::snprintf(name, sizeof name, "frame_%03zu_cam%zu", k, ci);
                        write_ppm(dir / (std::string(name) + ".ppm"), img);
                        if (rd_png) write_png16(dir / (std::string(name) + ".png"), img);
                    }
                }
                echo(dir, {{"command", "render"}, {"checkpoint", ckpt}, {"scene", rd_scene}, {"cameras", cams_path},
                           {"times", times}, {"png", rd_png}, {"threads", c.threads}});
                write_manifest(dir, "render");
                out << "rendered " << times.size() * cams.size() << " images\n";
                return kExitOk;
            }
            std::string csv = "frame,t,camera,psnr,ssim,l1\n";
            double sum_psnr = 0.0, sum_ssim = 0.0, sum_l1 = 0.0;
            std::size_t n = 0;
            for (std::size_t k = 0; k < times.size(); ++k) {
                const auto pred = predicted(times[k]);
                const auto truth = scene.motion.evaluate(scene.canonical, times[k]);
                for (std::size_t ci = 0; ci < cams.size(); ++ci) {
                    const auto a = render(pred, cams[ci], Vec3::Zero(), c.threads);
                    const auto b = render(truth, cams[ci], Vec3::Zero(), c.threads);
                    const double p = psnr(a, b), s = ssim(a, b), l = l1(a, b);
                    csv += std::to_string(k) + "," + fmt(times[k]) + "," + std::to_string(ci) + "," + fmt(p) + "," +
                           fmt(s) + "," + fmt(l) + "\n";
                    sum_psnr += p;
                    sum_ssim += s;
                    sum_l1 += l;
                    ++n;
                }
            }
            const double dn = static_cast<double>(n);
            csv += "mean,,," + fmt(sum_psnr / dn) + "," + fmt(sum_ssim / dn) + "," + fmt(sum_l1 / dn) + "\n";
            write_text(dir / "eval.csv", csv);
            nlohmann::json summary = {{"frames", times.size()},
                                      {"cameras", cams.size()},
                                      {"mean_psnr", sum_psnr / dn},
                                      {"mean_ssim", sum_ssim / dn},
                                      {"mean_l1", sum_l1 / dn}};
            if (model) summary["mean_position_error"] = mean_position_error(*model, scene);
            write_text(dir / "summary.json", summary.dump(2) + "\n");
            echo(dir, {{"command", "eval"}, {"checkpoint", ckpt}, {"scene", ev_scene}, {"cameras", cams_path},
                       {"threads", c.threads}});
            write_manifest(dir, "eval");
            out << "mean PSNR " << fmt(sum_psnr / dn) << " dB, mean SSIM " << fmt(sum_ssim / dn) << "\n";
            return kExitOk;
        }

        if (gc->parsed()) {
            // Shrunken defaults; a config file or --set may override them.
            TrainConfig cfg = shrunken_check_config();
            if (!gc_config.empty()) cfg = TrainConfig::from_file(gc_config);
            apply_overrides(cfg, gc_set);
            cfg.seed = resolve_seed(gc_c.seed, cfg.seed);
            cfg.scene.gaussians = gc_gaussians;
            cfg.validate();
            Rng scene_rng(cfg.scene_seed);
            const auto scene = generate_scene(cfg.scene, scene_rng);
            Rng init(cfg.seed);
            auto model = build_check_model(cfg, scene, init);
            GradientCheckOptions opts;
            opts.tolerance = gc_tol;
            opts.seed = cfg.seed;
            const auto report = gradient_check(model, scene, cfg, opts);
            std::string csv = "group,checked,max_rel_error,worst,pass\n";
            for (const auto& g : report.groups)
                csv += g.group + "," + std::to_string(g.checked) + "," + fmt(g.max_rel_error) + "," + g.worst + "," +
                       (g.max_rel_error < gc_tol ? "1" : "0") + "\n";
            const fs::path dir(gc_c.out);
            fs::create_directories(dir);
            write_text(dir / "gradcheck.csv", csv);
            write_text(dir / "config.txt", cfg.to_text());
            write_manifest(dir, "grad-check");
            if (!report.passed()) {
                err << "gradient check failed:";
                for (const auto& o : report.offenders()) err << " " << o;
                err << "\n";
                return kExitRuntime;
            }
            out << "gradient check passed\n";
            return kExitOk;
        }

        if (ov->parsed()) {
            const auto kind = encoder_kind_from_string(ov_encoder);
            if (ov_pairs != "axis-sharing" && ov_pairs != "random") throw ConfigError("--pairs: axis-sharing | random");
            const auto seed = resolve_seed(ov_c.seed, 0);
            Rng rng(seed);
            std::string csv = "pair,differing_axis,ratio_num,ratio_den,ratio\n";
            for (int i = 0; i < ov_count; ++i) {
                NormalizedCoord4 p{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
                NormalizedCoord4 q{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
                int axis = -1;
                if (ov_pairs == "axis-sharing") {
                    axis = static_cast<int>(rng.below(4));
                    double v = rng.uniform();
                    while (v == p[axis]) v = rng.uniform();
                    q = p;
                    (axis == 0 ? q.x : axis == 1 ? q.y : axis == 2 ? q.z : q.t) = v;
                }
                const auto r = overlap_ratio(kind, p, q);
                csv += std::to_string(i) + "," + (axis < 0 ? std::string() : std::string(1, "xyzt"[axis])) + "," +
                       std::to_string(r.num) + "," + std::to_string(r.den) + "," + fmt(r.value()) + "\n";
            }
            const fs::path dir(ov_c.out);
            fs::create_directories(dir);
            write_text(dir / "overlap.csv", csv);
            echo(dir, {{"command", "analyze-overlap"}, {"encoder", ov_encoder}, {"pairs", ov_pairs},
                       {"count", ov_count}, {"seed", seed}});
            write_manifest(dir, "analyze-overlap");
            return kExitOk;
        }

        if (co->parsed()) {
            GridConfig cfg = GridConfig::isotropic(co_dim, co_levels, co_nmin, co_nmax, co_log2, 1);
            cfg.validate();
            const auto seed = resolve_seed(co_c.seed, 0);
            Rng rng(seed);
            const auto stats = collision_rate(cfg, co_samples, rng);
            std::string csv = "level,resolution,direct,rows,distinct_vertices,distinct_rows,collision_rate\n";
            for (const auto& s : stats)
                csv += std::to_string(s.level) + "," + std::to_string(s.res[0]) + "," + (s.direct ? "1" : "0") + "," +
                       std::to_string(s.rows) + "," + std::to_string(s.distinct_vertices) + "," +
                       std::to_string(s.distinct_rows) + "," + fmt(s.collision_rate) + "\n";
            const fs::path dir(co_c.out);
            fs::create_directories(dir);
            write_text(dir / "collisions.csv", csv);
            echo(dir, {{"command", "analyze-collisions"}, {"dim", co_dim}, {"levels", co_levels}, {"n_min", co_nmin},
                       {"n_max", co_nmax}, {"table_log2", co_log2}, {"samples", co_samples}, {"seed", seed}});
            write_manifest(dir, "analyze-collisions");
            return kExitOk;
        }

        if (ef->parsed() || dm->parsed()) {
            const bool feats = ef->parsed();
            const auto scene = GeneratedScene::from_file(load_scene(feats ? ef_scene : dm_scene));
            const auto model = load_checkpoint(feats ? ef_ckpt : dm_ckpt);
            const fs::path dir(feats ? ef_c.out : dm_c.out);
            fs::create_directories(dir);
            if (feats) {
                std::vector<NormalizedCoord4> inputs;
                for (const auto& g : scene.canonical.gaussians) inputs.push_back(model.normalize(g.mu, ef_t));
                export_features(model.encoder(), inputs, dir / "features.csv");
                echo(dir, {{"command", "export-features"}, {"checkpoint", ef_ckpt}, {"scene", ef_scene}, {"t", ef_t}});
                write_manifest(dir, "export-features");
            } else {
                export_deformation_map(model, scene.canonical, dm_t, dm_tau, dm_limit, dir / "deformation_map.csv");
                echo(dir, {{"command", "deformation-map"},
                           {"checkpoint", dm_ckpt},
                           {"scene", dm_scene},
                           {"t", dm_t},
                           {"tau", dm_tau},
                           {"limit", std::isfinite(dm_limit) ? nlohmann::json(dm_limit) : nlohmann::json("inf")}});
                write_manifest(dir, "deformation-map");
            }
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ContractViolation& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;
}

}  // namespace grid4d::cli
