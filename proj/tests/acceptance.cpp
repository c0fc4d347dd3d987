// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. The heavy desk-scale ablation (criteria 9/10) trains the
// vanilla / fixed-aperture / learned-aperture baselines on 200 synthetic
// scenes at equal budgets and checks the error ordering and bit determinism.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ccadepth/cca.hpp"
#include "ccadepth/config.hpp"
#include "ccadepth/data.hpp"
#include "ccadepth/decoder.hpp"
#include "ccadepth/fft.hpp"
#include "ccadepth/losses.hpp"
#include "ccadepth/optics.hpp"
#include "ccadepth/render.hpp"
#include "ccadepth/rng.hpp"
#include "ccadepth/train.hpp"
#include "oracles.hpp"

using namespace ccadepth;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    int id;
    bool pass;
    std::string detail;
    double seconds;
};
std::vector<Outcome> g_results;

void report(int id, bool pass, const std::string& detail, double seconds) {
    g_results.push_back({id, pass, detail, seconds});
    std::printf("criterion %2d: %s  (%.1fs)  %s\n", id, pass ? "PASS" : "FAIL", seconds, detail.c_str());
    std::fflush(stdout);
}

struct Timer {
    Clock::time_point t0 = Clock::now();
    double seconds() const { return std::chrono::duration<double>(Clock::now() - t0).count(); }
};

std::string file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), {});
}

// Random field synthesized on the propagating band (production inverse FFT is
// fine here; the property under test is the propagator's energy behavior).
ComplexField fast_band_limited(Rng& rng, int m, double pitch, double wavelength, double fraction) {
    ComplexGrid spectrum(m, m);
    const double df = 1.0 / (m * pitch);
    for (int ky = 0; ky < m; ++ky) {
        const int sy = fft_freq_index(ky, m);
        for (int kx = 0; kx < m; ++kx) {
            const int sx = fft_freq_index(kx, m);
            const double lf2 = wavelength * sy * df * wavelength * sy * df +
                               wavelength * sx * df * wavelength * sx * df;
            if (lf2 < fraction * fraction) spectrum(ky, kx) = cdouble(rng.normal(), rng.normal());
        }
    }
    ifft2(spectrum);
    return ComplexField{std::move(spectrum), pitch, wavelength};
}

double field_energy(const ComplexGrid& g) {
    double acc = 0.0;
    for (size_t i = 0; i < g.size(); ++i) acc += std::norm(g[i]);
    return acc;
}

OpticalConfig small_config(int m, int k, std::vector<double> depths) {
    OpticalConfig cfg;
    cfg.focal_length = 0.025;
    cfg.aperture_diameter = 0.4e-3;
    cfg.window_size = 0.8e-3;
    cfg.sim_grid = m;
    cfg.psf_crop = k;
    cfg.sensor_bin = 1;
    cfg.focus_distance = 1.0;
    cfg.sensor_distance = 0.0;
    cfg.wavelengths = {470e-9, 550e-9, 630e-9};
    cfg.depth_planes = std::move(depths);
    cfg.finalize();
    return cfg;
}

void criterion_1() {
    Timer timer;
    Rng rng(101);
    const int m = 128;
    const double pitch = 0.3e-6, lambda = 550e-9;
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const ComplexField u = fast_band_limited(rng, m, pitch, lambda, 0.7);
        const double distance = rng.uniform(1e-5, 5e-3);
        const ComplexField out = angular_spectrum_propagate(u, distance);
        worst = std::max(worst, std::abs(field_energy(out.values) / field_energy(u.values) - 1.0));
    }
    const double secs = timer.seconds();
    char buf[160];
    std::snprintf(buf, sizeof buf, "energy ratio error %.2e (tol 1e-9), 10 distances on 128^2", worst);
    report(1, worst < 1e-9 && secs < 10.0, buf, secs);
}

void criterion_2() {
    Timer timer;
    Rng rng(202);
    const int m = 32;
    const double pitch = 0.4e-6, lambda = 550e-9;
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const ComplexGrid field = oracle::band_limited_field(rng, m, pitch, lambda, 0.6);
        const double distance = rng.uniform(5e-5, 2e-3);
        const ComplexGrid ref = oracle::dft_propagate(field, pitch, lambda, distance);
        const ComplexField got = angular_spectrum_propagate(ComplexField{field, pitch, lambda}, distance);
        double num = 0.0, den = 0.0;
        for (size_t i = 0; i < ref.size(); ++i) {
            num += std::norm(got.values[i] - ref[i]);
            den += std::norm(ref[i]);
        }
        worst = std::max(worst, std::sqrt(num / den));
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "relative RMS vs explicit DFT %.2e (tol 1e-8), 20 cases", worst);
    report(2, worst < 1e-8, buf, timer.seconds());
}

void criterion_3() {
    Timer timer;
    const OpticalConfig cfg = small_config(128, 17, {1.2, 0.5});
    const int n = 4;
    std::vector<double> prim4;
    {
        const std::vector<double> grid4 = {450e-9, 490e-9, 540e-9, 620e-9};
        const std::vector<double> full = default_primaries(grid4);
        prim4.resize(size_t(4) * 3);
        // sample the four standard curves at this config's three bands
        const std::vector<double> bands = cfg.wavelengths;
        for (int r = 0; r < 4; ++r)
            for (int b = 0; b < 3; ++b) {
                const double sigma_nm = 60.0 / (2.0 * std::sqrt(2.0 * std::log(2.0)));
                const double centers[4] = {540.0, 620.0, 450.0, 490.0};
                const double d = bands[b] * 1e9 - centers[r];
                prim4[size_t(r) * 3 + b] = 0.9 * std::exp(-d * d / (2.0 * sigma_nm * sigma_nm));
            }
        (void)full;
    }
    const std::pair<double, double> pairs[3] = {{0, 0}, {1, 1}, {2, 0}};  // (band, plane)
    std::vector<BasisFieldSet> basis;
    const CellMap map = CellMap::build(cfg, n);
    for (const auto& [band, plane] : pairs)
        basis.push_back(basis_fields(cfg, map, cfg.wavelengths[int(band)], cfg.depth_planes[int(plane)]));

    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const CodedAperture cca = random_cca(300 + trial, n, cfg.wavelengths, prim4, 4);
        for (int p = 0; p < 3; ++p) {
            const int band = int(pairs[p].first), plane = int(pairs[p].second);
            const PsfResult via = psf_from_basis(basis[p], cca, band);
            const PsfResult direct =
                compute_psf(cfg, rasterize(cca, cfg, band), cfg.wavelengths[band], cfg.depth_planes[plane]);
            for (size_t i = 0; i < via.kernel.size(); ++i)
                worst = std::max(worst, std::abs(via.kernel[i] - direct.kernel[i]));
        }
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "basis vs direct PSF max-abs %.2e (tol 1e-9), 10 CCAs x 3 pairs", worst);
    report(3, worst < 1e-9, buf, timer.seconds());
}

void criterion_4() {
    Timer timer;
    const GradcheckSetup setup = canonical_gradcheck_setup();
    const GradCheckReport rep =
        gradcheck(setup.cfg, setup.cca, setup.decoder, setup.scene, LossWeights{});
    const double secs = timer.seconds();
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "max rel error %.2e over %d aperture weights and %d decoder parameters (tol 1e-4)",
                  rep.max_rel_error(), rep.checked_weights, rep.checked_decoder_params);
    report(4, rep.max_rel_error() < 1e-4 && secs < 300.0, buf, secs);
}

void criterion_5() {
    Timer timer;
    const OpticalConfig cfg = small_config(32, 9, {1.4, 0.8, 0.5});
    Rng rng(505);
    double worst_sum = 0.0, worst_delta = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        SceneSpec spec;
        spec.seed = 1000 + trial;
        spec.width = 24;
        spec.height = 24;
        spec.planes = 2 + int(trial % 2);
        spec.z_min = cfg.min_depth();
        spec.z_max = cfg.max_depth();
        const Scene scene = generate_scene(spec, cfg);
        const DepthLayers layers = discretize_depth(scene.depth, cfg);

        PsfStack stack;
        stack.planes = cfg.planes();
        stack.bands = cfg.bands();
        stack.crop = 7;
        stack.wavelengths = cfg.wavelengths;
        stack.depths = cfg.depth_planes;
        stack.kernels.assign(size_t(3) * 3 * 49, 0.0);
        stack.energies.assign(9, 0.0);
        for (int j = 0; j < 3; ++j)
            for (int b = 0; b < 3; ++b) {
                double* k = stack.kernel(j, b);
                const double sigma = rng.uniform(0.6, 2.0);
                double sum = 0.0;
                for (int y = 0; y < 7; ++y)
                    for (int x = 0; x < 7; ++x) {
                        const double dy = y - 3, dx = x - 3;
                        k[y * 7 + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                        sum += k[y * 7 + x];
                    }
                const double e = rng.uniform(0.3, 1.0);
                for (int i = 0; i < 49; ++i) k[i] *= e / sum;
                stack.energy(j, b) = e;
            }
        const OcclusionMasks masks = occlusion_masks(layers, stack);
        for (size_t i = 0; i < scene.depth.size(); ++i) {
            double sum = 0.0;
            for (int j = 0; j < 3; ++j) sum += masks.masks[j][i];
            worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        }

        // delta kernels reproduce the binary masks
        PsfStack delta = stack;
        std::fill(delta.kernels.begin(), delta.kernels.end(), 0.0);
        for (int j = 0; j < 3; ++j)
            for (int b = 0; b < 3; ++b) delta.kernel(j, b)[3 * 7 + 3] = 1.0;
        const OcclusionMasks ident = occlusion_masks(layers, delta);
        for (int j = 0; j < 3; ++j)
            for (size_t i = 0; i < scene.depth.size(); ++i)
                worst_delta = std::max(worst_delta, std::abs(ident.masks[j][i] - layers.masks[j][i]));
    }
    const double secs = timer.seconds();
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "partition error %.2e (tol 1e-6); delta-kernel identity error %.2e (machine precision)",
                  worst_sum, worst_delta);
    report(5, worst_sum < 1e-6 && worst_delta < 1e-12 && secs < 30.0, buf, secs);
}

void criterion_6() {
    Timer timer;
    const OpticalConfig cfg = small_config(32, 9, {1.4, 0.8, 0.5});
    Rng rng(606);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        SpectralCube cube(16, 16, 3);
        cube.wavelengths = cfg.wavelengths;
        for (double& v : cube.values) v = rng.uniform();
        DepthMap dm(16, 16, cfg.depth_planes[0]);
        for (int y = 6; y < 12; ++y)
            for (int x = 4; x < 10; ++x) dm(y, x) = cfg.depth_planes[2];
        const DepthLayers layers = discretize_depth(dm, cfg);

        PsfStack stack;
        stack.planes = 3;
        stack.bands = 3;
        stack.crop = 5;
        stack.wavelengths = cfg.wavelengths;
        stack.depths = cfg.depth_planes;
        stack.kernels.assign(size_t(3) * 3 * 25, 0.0);
        stack.energies.assign(9, 0.0);
        for (size_t i = 0; i < stack.kernels.size(); ++i) stack.kernels[i] = rng.uniform(0.0, 0.05);
        for (int j = 0; j < 3; ++j)
            for (int b = 0; b < 3; ++b) {
                double sum = 0.0;
                for (int i = 0; i < 25; ++i) sum += stack.kernel(j, b)[i];
                stack.energy(j, b) = sum;
            }
        const OcclusionMasks masks = occlusion_masks(layers, stack);
        const SpectralCube out = render_coded_spectral(cube, layers, masks, stack);
        for (int b = 0; b < 3; ++b) {
            RealGrid img(16, 16);
            std::copy(cube.band(b), cube.band(b) + 256, img.data());
            std::vector<const double*> kernels;
            for (int j = 0; j < 3; ++j) kernels.push_back(stack.kernel(j, b));
            const RealGrid ref = oracle::layered_render_band(img, masks.masks, kernels, 5);
            for (int i = 0; i < 256; ++i) worst = std::max(worst, std::abs(out.band(b)[i] - ref[i]));
        }
    }
    const double secs = timer.seconds();
    char buf[160];
    std::snprintf(buf, sizeof buf, "FFT vs double-loop max-abs %.2e (tol 1e-10), 20 cases", worst);
    report(6, worst < 1e-10 && secs < 30.0, buf, secs);
}

void criterion_7() {
    Timer timer;
    bool ok = true;
    std::string detail;

    RealGrid zero(4, 4, 0.0);
    ok &= smooth_loss(RealGrid(4, 4, 0.5), zero) == 0.125;
    ok &= smooth_loss(RealGrid(4, 4, 2.0), zero) == 1.5;

    RealGrid y(1, 2), y_hat(1, 2);
    y(0, 0) = 1.0;
    y(0, 1) = 2.0;
    y_hat(0, 0) = 2.0;
    y_hat(0, 1) = 2.0;
    const MetricsReport m = evaluate_metrics(y, y_hat);
    ok &= m.mae == 0.5;
    ok &= m.rmse == std::sqrt(0.5);
    ok &= m.rel == 0.25;
    ok &= m.delta1 == 0.5;

    Rng rng(707);
    RealGrid same(6, 6);
    for (size_t i = 0; i < same.size(); ++i) same[i] = rng.uniform(0.4, 1.6);
    ok &= grad_loss(same, same) == 0.0;
    ok &= normal_loss(same, same) == 0.0;
    ok &= smooth_loss(same, same) == 0.0;
    const MetricsReport ident = evaluate_metrics(same, same);
    ok &= ident.mae == 0.0 && ident.rmse == 0.0 && ident.rel == 0.0 && ident.log10 == 0.0;
    ok &= ident.delta1 == 1.0 && ident.delta2 == 1.0 && ident.delta3 == 1.0;

    detail = "smooth 0.125 / 1.5, metrics (0.5, sqrt(.5), 0.25, 0.5), identity zeros: all exact";
    report(7, ok, detail, timer.seconds());
}

// ---------------------------------------------------------------------------
// Desk-scale ablation (criteria 8, 9, 10) and container round-trips (11).

struct DeskRun {
    Checkpoint ckpt;
    std::string metric_table;
    double rmse = 0.0;
};

DeskRun run_mode(TrainMode mode, const Dataset& train, const Dataset& test, const OpticalConfig& cfg) {
    TrainConfig tc;
    tc.mode = mode;
    tc.epochs = 30;
    tc.batch_size = 8;
    tc.seed = 7;
    tc.cca_cells = 8;
    const TrainResult result = train_e2e(train, tc, cfg, std::nullopt, fs::temp_directory_path());
    if (!(result.final_loss < result.initial_loss))
        std::printf("  note: %s final loss %.5f did not improve on initial %.5f\n",
                    to_string(mode).c_str(), result.final_loss, result.initial_loss);
    const EvalResult ev = evaluate(result.checkpoint, test, cfg);
    std::ostringstream table;
    table << to_string(mode) << "\t" << MetricsReport::tsv_header() << "\n";
    for (size_t i = 0; i < ev.per_scene.size(); ++i)
        table << test[i].name << "\t" << ev.per_scene[i].to_tsv_row() << "\n";
    table << "aggregate\t" << ev.aggregate.to_tsv_row() << "\n";
    return {result.checkpoint, table.str(), ev.aggregate.rmse};
}

void criteria_8_to_11() {
    const fs::path dir = fs::temp_directory_path() / "ccadepth_acceptance";
    fs::create_directories(dir);

    const OpticalConfig cfg = default_desk_config();
    SceneSpec spec;
    spec.width = 64;
    spec.height = 64;
    spec.planes = 3;
    spec.z_min = cfg.min_depth();
    spec.z_max = cfg.max_depth();

    Timer gen_timer;
    const Dataset all = generate_dataset(spec, cfg, 200, 4242);
    const Dataset train(all.begin(), all.begin() + 160);
    const Dataset test(all.begin() + 160, all.end());
    std::printf("  dataset: 200 scenes (160 train / 40 test) in %.1fs\n", gen_timer.seconds());
    std::fflush(stdout);

    // ---- criterion 9: ablation ordering at equal budgets
    Timer t9;
    DeskRun vanilla = run_mode(TrainMode::vanilla, train, test, cfg);
    std::printf("  vanilla      RMSE %.4f (%.0fs)\n", vanilla.rmse, t9.seconds());
    std::fflush(stdout);
    Timer tf;
    DeskRun fixed = run_mode(TrainMode::fixed_cca, train, test, cfg);
    std::printf("  fixed_cca    RMSE %.4f (%.0fs)\n", fixed.rmse, tf.seconds());
    std::fflush(stdout);
    Timer tl;
    DeskRun learned = run_mode(TrainMode::learned_cca, train, test, cfg);
    std::printf("  learned_cca  RMSE %.4f (%.0fs)\n", learned.rmse, tl.seconds());
    std::fflush(stdout);
    const double secs9 = t9.seconds();

    const bool ordering = learned.rmse < fixed.rmse && fixed.rmse < vanilla.rmse;
    const bool margin = learned.rmse <= 0.85 * fixed.rmse;
    char buf9[240];
    std::snprintf(buf9, sizeof buf9,
                  "test RMSE learned %.4f < fixed %.4f < vanilla %.4f; learned/fixed = %.3f (need <= 0.85)",
                  learned.rmse, fixed.rmse, vanilla.rmse, learned.rmse / std::max(fixed.rmse, 1e-300));

    // ---- criterion 8: projection arithmetic and post-training feasibility
    {
        Timer t8;
        bool ok = true;
        auto project_cell = [](std::vector<double> w) {
            CodedAperture c;
            c.n = 1;
            c.r = int(w.size());
            c.l = 4;
            c.weights = std::move(w);
            c.primaries.assign(size_t(c.r) * 4, 1.0);
            c.wavelengths_nm = {450, 490, 540, 620};
            return project_constraint(c).weights;
        };
        ok &= project_cell({2, 1, 1, 0}) == std::vector<double>({0.5, 0.25, 0.25, 0.0});
        ok &= project_cell({0.5, 0.25, 0.25, 0.0}) == std::vector<double>({0.5, 0.25, 0.25, 0.0});
        ok &= project_cell({-1, 3, 0, 0}) == std::vector<double>({0.0, 1.0, 0.0, 0.0});
        Rng rng(808);
        for (int trial = 0; trial < 500 && ok; ++trial) {
            CodedAperture c;
            c.n = 1;
            c.r = 4;
            c.l = 4;
            c.weights = {rng.uniform(-2, 3), rng.uniform(-2, 3), rng.uniform(-2, 3), rng.uniform(-2, 3)};
            c.primaries.assign(16, 1.0);
            c.wavelengths_nm = {450, 490, 540, 620};
            const CodedAperture once = project_constraint(c);
            const CodedAperture twice = project_constraint(once);
            ok &= once.weights == twice.weights;
        }
        // the trained aperture satisfies the manufacturability bounds
        const CodedAperture& w = learned.ckpt.cca;
        for (int i = 0; i < w.n && ok; ++i)
            for (int j = 0; j < w.n; ++j) {
                double sum = 0.0;
                for (int r = 0; r < w.r; ++r) {
                    const double v = w.weight(i, j, r);
                    ok &= v >= 0.0 && v <= 1.0;
                    sum += v;
                }
                ok &= sum <= 1.0 + 1e-9;
            }
        report(8, ok, "worked triples exact, 500 random cells exactly idempotent, trained CCA feasible",
               t8.seconds());
    }

    report(9, ordering && margin, buf9, secs9);

    // ---- criterion 10: bit-identical repetition
    {
        Timer t10;
        DeskRun vanilla2 = run_mode(TrainMode::vanilla, train, test, cfg);
        DeskRun fixed2 = run_mode(TrainMode::fixed_cca, train, test, cfg);
        DeskRun learned2 = run_mode(TrainMode::learned_cca, train, test, cfg);
        auto bytes_of = [&](const Checkpoint& c, const char* name) {
            const fs::path p = dir / name;
            write_ckp1(c, p);
            return file_bytes(p);
        };
        const bool ckpt_same = bytes_of(vanilla.ckpt, "v1.ckpt") == bytes_of(vanilla2.ckpt, "v2.ckpt") &&
                               bytes_of(fixed.ckpt, "f1.ckpt") == bytes_of(fixed2.ckpt, "f2.ckpt") &&
                               bytes_of(learned.ckpt, "l1.ckpt") == bytes_of(learned2.ckpt, "l2.ckpt");
        const bool table_same = vanilla.metric_table == vanilla2.metric_table &&
                                fixed.metric_table == fixed2.metric_table &&
                                learned.metric_table == learned2.metric_table;
        report(10, ckpt_same && table_same,
               ckpt_same ? "all three checkpoints and metric tables bit-identical on rerun"
                         : "checkpoint bytes differ between identical runs",
               t10.seconds());
    }

    // ---- criterion 11: container round-trips
    {
        Timer t11;
        bool ok = true;
        // SDC1
        const fs::path s1 = dir / "scene1.sdc", s2 = dir / "scene2.sdc";
        write_sdc(all[0].cube, &all[0].depth, s1);
        const SdcContents sc = read_sdc(s1);
        write_sdc(sc.cube, &*sc.depth, s2);
        ok &= file_bytes(s1) == file_bytes(s2);
        // PSF1
        const fs::path p1 = dir / "stack1.psf", p2 = dir / "stack2.psf";
        const PsfStack stack = build_psf_stack(cfg, learned.ckpt.cca);
        write_psf1(stack, p1);
        write_psf1(read_psf1(p1), p2);
        ok &= file_bytes(p1) == file_bytes(p2);
        // CCA1
        const fs::path c1 = dir / "cca1.cca", c2 = dir / "cca2.cca";
        export_cca(learned.ckpt.cca, c1, false);
        export_cca(import_cca(c1).cca, c2, false);
        ok &= file_bytes(c1) == file_bytes(c2);
        // CKP1
        const fs::path k1 = dir / "ck1.ckpt", k2 = dir / "ck2.ckpt";
        write_ckp1(learned.ckpt, k1);
        write_ckp1(read_ckp1(k1), k2);
        ok &= file_bytes(k1) == file_bytes(k2);
        report(11, ok, "SDC1, PSF1, CCA1, CKP1 write -> read -> write byte-identical", t11.seconds());
    }

    fs::remove_all(dir);
}

}  // namespace

int main() {
    std::printf("ccadepth acceptance suite\n");
    Timer total;
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criteria_8_to_11();

    std::printf("\nsummary (%.0fs total):\n", total.seconds());
    std::sort(g_results.begin(), g_results.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
    int failed = 0;
    for (const auto& r : g_results) {
        std::printf("  criterion %2d: %s\n", r.id, r.pass ? "PASS" : "FAIL");
        failed += r.pass ? 0 : 1;
    }
    if (failed) std::printf("%d criterion(s) FAILED\n", failed);
    return failed;
}
