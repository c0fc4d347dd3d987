// Batch front door: simulation, data generation, training, evaluation,
// gradient checks and exports. Every command writes a manifest with the fully
// resolved configuration next to its primary output, and identical manifests
// reproduce identical bytes.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ccadepth/cca.hpp"
#include "ccadepth/config.hpp"
#include "ccadepth/data.hpp"
#include "ccadepth/decoder.hpp"
#include "ccadepth/image_io.hpp"
#include "ccadepth/losses.hpp"
#include "ccadepth/optics.hpp"
#include "ccadepth/render.hpp"
#include "ccadepth/serialize.hpp"
#include "ccadepth/train.hpp"
#include "ccadepth/version.hpp"

namespace fs = std::filesystem;
using namespace ccadepth;

namespace {

std::vector<fs::path> g_outputs;  // removed when a command fails

void note_output(const fs::path& p) { g_outputs.push_back(p); }

KeyValueFile load_kv(const std::string& path) {
    if (path.empty()) return KeyValueFile::parse_string("", "<defaults>");
    return KeyValueFile::parse_file(path);
}

void write_manifest(const fs::path& beside, const std::string& command, const OpticalConfig& cfg,
                    const TrainConfig* tcfg, const std::vector<std::pair<std::string, std::string>>& io,
                    uint64_t seed) {
    KeyValueFile kv;
    kv.set("tool_version", kVersion);
    kv.set("command", command);
    kv.set_int("seed", long(seed));
    cfg.to_kv(kv);
    if (tcfg) tcfg->to_kv(kv);
    for (const auto& [k, v] : io) kv.set(k, v);
    fs::path path = beside;
    path += ".manifest";
    kv.write_file(path);
    note_output(path);
}

OpticalConfig optics_from(const KeyValueFile& kv) { return OpticalConfig::from_kv(kv); }

void save_depth_png(const fs::path& path, const DepthMap& depth, double z_min, double z_max) {
    RealGrid norm(depth.rows(), depth.cols());
    for (size_t i = 0; i < depth.size(); ++i)
        norm[i] = (depth[i] - z_min) / std::max(1e-12, z_max - z_min);
    write_png_rgb8(path, viridis_from_grid(norm), depth.cols(), depth.rows());
}

void save_coded_png(const fs::path& path, const CodedImage& img) {
    double mx = 0.0;
    for (double v : img.values) mx = std::max(mx, v);
    std::vector<uint8_t> px(size_t(img.h) * img.w * 3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = mx > 0 ? img.at(c, y, x) / mx : 0.0;
                px[(size_t(y) * img.w + x) * 3 + c] = uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
    write_png_rgb8(path, px, img.w, img.h);
}

// Coded image as an SDC1 cube: bands stored in wavelength order B, G, R with
// the nominal channel centers, optional estimated depth plane.
void save_render_sdc(const fs::path& path, const CodedImage& img, const DepthMap* depth) {
    SpectralCube cube(img.h, img.w, 3);
    cube.wavelengths = {470e-9, 540e-9, 610e-9};
    const int order[3] = {2, 1, 0};  // B, G, R
    for (int b = 0; b < 3; ++b)
        std::copy(img.channel(order[b]), img.channel(order[b]) + size_t(img.h) * img.w, cube.band(b));
    write_sdc(cube, depth, path);
}

int cmd_psf(const std::string& config_path, const std::string& cca_path, const std::string& out,
            const std::string& preview_dir) {
    const KeyValueFile kv = load_kv(config_path);
    OpticalConfig cfg = optics_from(kv);
    CcaImport imported = import_cca(cca_path);
    std::vector<std::string> warnings;
    const PsfStack stack = build_psf_stack(cfg, imported.cca, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    if (imported.unprojected) std::cerr << "warning: aperture file holds unprojected weights\n";
    note_output(out);
    write_psf1(stack, out);
    if (!preview_dir.empty()) {
        fs::create_directories(preview_dir);
        std::vector<RealGrid> tiles;
        for (int j = 0; j < stack.planes; ++j)
            for (int b = 0; b < stack.bands; ++b) {
                RealGrid tile(stack.crop, stack.crop);
                std::copy(stack.kernel(j, b), stack.kernel(j, b) + tile.size(), tile.data());
                tiles.push_back(tone_map(tile));
            }
        const RealGrid sheet = contact_sheet(tiles, stack.planes, stack.bands);
        const fs::path sheet_path = fs::path(preview_dir) / "psf_sheet.png";
        note_output(sheet_path);
        write_png_gray8(sheet_path, gray8_from_grid(sheet), sheet.cols(), sheet.rows());
    }
    write_manifest(out, "psf", cfg, nullptr, {{"input_cca", cca_path}, {"output_psf", out}}, 0);
    return 0;
}

int cmd_gen_data(const std::string& spec_path, int count, const std::string& out_dir, long seed) {
    const KeyValueFile kv = load_kv(spec_path);
    OpticalConfig cfg = optics_from(kv);
    SceneSpec spec = SceneSpec::from_kv(kv, cfg);
    fs::create_directories(out_dir);
    Dataset ds = generate_dataset(spec, cfg, count, uint64_t(seed));
    for (const auto& scene : ds) {
        const fs::path path = fs::path(out_dir) / (scene.name + ".sdc");
        note_output(path);
        write_sdc(scene.cube, &scene.depth, path);
    }
    write_manifest(fs::path(out_dir) / "dataset", "gen-data", cfg, nullptr,
                   {{"scene_count", std::to_string(count)}, {"output_dir", out_dir}}, uint64_t(seed));
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path, const std::string& mode,
              const std::string& out, const std::string& resume_path, const std::string& log_path) {
    const KeyValueFile kv = load_kv(config_path);
    OpticalConfig cfg = optics_from(kv);
    TrainConfig tcfg = TrainConfig::from_kv(kv);
    if (!mode.empty()) tcfg.mode = train_mode_from_string(mode);
    Dataset ds = load_dataset(data_dir);

    std::optional<Checkpoint> resume;
    if (!resume_path.empty()) resume = read_ckp1(resume_path);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, std::ios::binary);
        if (!log) throw IoError("cannot write log: " + log_path);
        note_output(log_path);
        log << "epoch\tloss\tloss_grad\tloss_normal\tloss_smooth\n";
    }
    TrainResult result = train_e2e(ds, tcfg, cfg, resume, fs::path(out).parent_path(),
                                   [&](const EpochLog& e) {
                                       std::cout << "epoch " << e.epoch << " loss " << e.loss << "\n";
                                       if (log)
                                           log << e.epoch << "\t" << f64_to_text(e.loss) << "\t"
                                               << f64_to_text(e.loss_grad) << "\t"
                                               << f64_to_text(e.loss_normal) << "\t"
                                               << f64_to_text(e.loss_smooth) << "\n";
                                   });
    note_output(out);
    write_ckp1(result.checkpoint, out);
    write_manifest(out, "train", cfg, &tcfg, {{"input_data", data_dir}, {"output_checkpoint", out}},
                   tcfg.seed);
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& config_path) {
    const KeyValueFile kv = load_kv(config_path);
    OpticalConfig cfg = optics_from(kv);
    const Checkpoint ckpt = read_ckp1(ckpt_path);
    Dataset ds = load_dataset(data_dir);
    EvalResult res = evaluate(ckpt, ds, cfg);
    std::cout << "scene\t" << MetricsReport::tsv_header() << "\n";
    for (size_t i = 0; i < ds.size(); ++i)
        std::cout << ds[i].name << "\t" << res.per_scene[i].to_tsv_row() << "\n";
    std::cout << "aggregate\t" << res.aggregate.to_tsv_row() << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& config_path) {
    GradcheckSetup setup = canonical_gradcheck_setup();
    if (!config_path.empty()) {
        // custom optics: rebuild the aperture/scene/decoder for that geometry
        setup.cfg = optics_from(load_kv(config_path));
        const SensorResponse resp = default_sensor_response(setup.cfg.wavelengths);
        std::vector<double> prim(size_t(2) * setup.cfg.bands());
        for (int b = 0; b < setup.cfg.bands(); ++b) {
            const double nm = setup.cfg.wavelengths[b] * 1e9;
            prim[b] = 0.15 + 0.75 / (1.0 + std::exp(-(nm - 560.0) / 25.0));
            prim[size_t(setup.cfg.bands()) + b] = 0.15 + 0.75 / (1.0 + std::exp((nm - 540.0) / 25.0));
        }
        setup.cca = random_cca(5, 2, setup.cfg.wavelengths, prim, 2);
        for (double& w : setup.cca.weights) w = 0.25 + 0.5 * w;
        setup.cca = project_constraint(setup.cca);
        SceneSpec spec;
        spec.seed = 23;
        spec.width = 32;
        spec.height = 32;
        spec.planes = std::min(2, setup.cfg.planes());
        spec.z_min = setup.cfg.min_depth();
        spec.z_max = setup.cfg.max_depth();
        setup.scene = generate_scene(spec, setup.cfg);
        setup.decoder = decoder_init(99, setup.cfg.min_depth(), setup.cfg.max_depth(),
                                     decoder_input_scale(resp, setup.cfg.wavelengths));
    }

    const GradCheckReport report =
        gradcheck(setup.cfg, setup.cca, setup.decoder, setup.scene, LossWeights{});
    std::printf("gradcheck: %d aperture weights, max rel error %.3e\n", report.checked_weights,
                report.max_rel_error_weights);
    std::printf("gradcheck: %d decoder parameters, max rel error %.3e\n", report.checked_decoder_params,
                report.max_rel_error_decoder);
    std::printf("gradcheck: overall max rel error %.3e (tolerance 1e-4)\n", report.max_rel_error());
    return report.max_rel_error() < 1e-4 ? 0 : 4;
}

int cmd_render(const std::string& scene_path, const std::string& ckpt_path, const std::string& cca_path,
               const std::string& config_path, const std::string& out_prefix) {
    const KeyValueFile kv = load_kv(config_path);
    OpticalConfig cfg = optics_from(kv);
    SdcContents scene = read_sdc(scene_path);
    if (!scene.depth) throw ParseError("render: the scene container has no depth plane");
    const SensorResponse resp = default_sensor_response(cfg.wavelengths);

    CodedImage coded;
    std::optional<DepthMap> estimate;
    if (!ckpt_path.empty()) {
        const Checkpoint ckpt = read_ckp1(ckpt_path);
        Scene s{std::move(scene.cube), std::move(*scene.depth), "scene"};
        PsfStack stack;
        const bool uses_optics = ckpt.mode != TrainMode::vanilla;
        if (uses_optics)
            stack = build_psf_stack(cfg, ckpt.cca.mode == ApertureMode::binary ? binarize(ckpt.cca)
                                                                               : ckpt.cca);
        coded = coded_image_for_mode(ckpt.mode, s, cfg, uses_optics ? &stack : nullptr, resp);
        estimate = decoder_forward(ckpt.decoder, coded, nullptr);
    } else {
        CcaImport imported = import_cca(cca_path);
        coded = render_pipeline(scene.cube, *scene.depth, imported.cca, cfg, resp);
    }

    const fs::path coded_png = out_prefix + "_coded.png";
    note_output(coded_png);
    save_coded_png(coded_png, coded);
    if (estimate) {
        const fs::path depth_png = out_prefix + "_depth.png";
        note_output(depth_png);
        save_depth_png(depth_png, *estimate, cfg.min_depth(), cfg.max_depth());
    }
    const fs::path raw = out_prefix + ".sdc";
    note_output(raw);
    save_render_sdc(raw, coded, estimate ? &*estimate : nullptr);
    write_manifest(raw, "render", cfg, nullptr,
                   {{"input_scene", scene_path},
                    {"input_checkpoint", ckpt_path},
                    {"input_cca", cca_path},
                    {"output_prefix", out_prefix}},
                   0);
    return 0;
}

int cmd_export_cca(const std::string& ckpt_path, const std::string& out) {
    const Checkpoint ckpt = read_ckp1(ckpt_path);
    note_output(out);
    fs::path preview = out;
    preview += ".png";
    note_output(preview);
    export_cca(ckpt.cca, out, true);
    return 0;
}

int cmd_finetune(const std::string& ckpt_path, const std::string& psf_path, const std::string& data_dir,
                 const std::string& config_path, const std::string& out, int epochs, double lr) {
    const KeyValueFile kv = load_kv(config_path);
    OpticalConfig cfg = optics_from(kv);
    TrainConfig tcfg = TrainConfig::from_kv(kv);
    const Checkpoint start = read_ckp1(ckpt_path);
    std::vector<std::string> warnings;
    const PsfStack measured = load_measured_psfs(psf_path, cfg, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    Dataset ds = load_dataset(data_dir);
    TrainResult result = finetune_measured(start, measured, ds, tcfg, cfg, epochs, lr);
    for (const auto& e : result.log) std::cout << "epoch " << e.epoch << " loss " << e.loss << "\n";
    note_output(out);
    write_ckp1(result.checkpoint, out);
    write_manifest(out, "finetune", cfg, &tcfg,
                   {{"input_checkpoint", ckpt_path},
                    {"input_psfs", psf_path},
                    {"input_data", data_dir},
                    {"output_checkpoint", out},
                    {"finetune_epochs", std::to_string(epochs)},
                    {"finetune_lr", f64_to_text(lr)}},
                   tcfg.seed);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Color-coded aperture depth camera toolkit"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::string config_path, cca_path, out, preview_dir, spec_path, data_dir, mode, ckpt_path, resume_path,
        scene_path, psf_path, log_path;
    int count = 0, epochs = 100;
    long seed = 0;
    double lr = 3e-5;

    auto* psf = app.add_subcommand("psf", "Simulate the PSF stack for an aperture");
    psf->add_option("--config", config_path, "optics config file");
    psf->add_option("--cca", cca_path, "CCA1 aperture file")->required();
    psf->add_option("--out", out, "output PSF1 path")->required();
    psf->add_option("--preview", preview_dir, "directory for the contact-sheet preview");

    auto* gen = app.add_subcommand("gen-data", "Generate synthetic spectral-depth scenes");
    gen->add_option("--spec", spec_path, "scene/optics config file");
    gen->add_option("--count", count, "number of scenes")->required();
    gen->add_option("--out", out, "output directory")->required();
    gen->add_option("--seed", seed, "dataset seed");

    auto* train = app.add_subcommand("train", "End-to-end training");
    train->add_option("--data", data_dir, "directory of .sdc scenes")->required();
    train->add_option("--config", config_path, "config file");
    train->add_option("--mode", mode, "vanilla|fixed_bca|learned_bca|fixed_cca|learned_cca");
    train->add_option("--out", out, "output CKP1 path")->required();
    train->add_option("--resume", resume_path, "checkpoint to resume from");
    train->add_option("--log", log_path, "tab-separated epoch log");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ckpt_path, "CKP1 checkpoint")->required();
    eval_cmd->add_option("--data", data_dir, "directory of .sdc scenes")->required();
    eval_cmd->add_option("--config", config_path, "config file");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
    gc->add_option("--config", config_path, "optics config file (default: built-in tiny setup)");

    auto* render = app.add_subcommand("render", "Render one scene through an aperture or checkpoint");
    render->add_option("--scene", scene_path, "SDC1 scene")->required();
    render->add_option("--ckpt", ckpt_path, "CKP1 checkpoint");
    render->add_option("--cca", cca_path, "CCA1 aperture (used without --ckpt)");
    render->add_option("--config", config_path, "config file");
    render->add_option("--out", out, "output prefix")->required();

    auto* exp = app.add_subcommand("export-cca", "Write the checkpoint aperture as CCA1 + preview");
    exp->add_option("--ckpt", ckpt_path, "CKP1 checkpoint")->required();
    exp->add_option("--out", out, "output CCA1 path")->required();

    auto* ft = app.add_subcommand("finetune", "Decoder fine-tuning on measured PSFs");
    ft->add_option("--ckpt", ckpt_path, "starting checkpoint")->required();
    ft->add_option("--psfs", psf_path, "measured PSF1 stack")->required();
    ft->add_option("--data", data_dir, "directory of .sdc scenes")->required();
    ft->add_option("--config", config_path, "config file");
    ft->add_option("--out", out, "output CKP1 path")->required();
    ft->add_option("--epochs", epochs, "fine-tuning epochs");
    ft->add_option("--lr", lr, "fine-tuning learning rate");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (psf->parsed()) return cmd_psf(config_path, cca_path, out, preview_dir);
        if (gen->parsed()) return cmd_gen_data(spec_path, count, out, seed);
        if (train->parsed()) return cmd_train(data_dir, config_path, mode, out, resume_path, log_path);
        if (eval_cmd->parsed()) return cmd_eval(ckpt_path, data_dir, config_path);
        if (gc->parsed()) return cmd_gradcheck(config_path);
        if (render->parsed()) {
            if (ckpt_path.empty() && cca_path.empty())
                throw DomainError("render: one of --ckpt or --cca is required");
            return cmd_render(scene_path, ckpt_path, cca_path, config_path, out);
        }
        if (exp->parsed()) return cmd_export_cca(ckpt_path, out);
        if (ft->parsed()) return cmd_finetune(ckpt_path, psf_path, data_dir, config_path, out, epochs, lr);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        for (const auto& p : g_outputs) {
            std::error_code ec;
            fs::remove(p, ec);
        }
        if (dynamic_cast<const IoError*>(&e)) return 3;
        if (dynamic_cast<const NanAbortError*>(&e)) return 4;
        return 2;
    }
    return 2;
}
