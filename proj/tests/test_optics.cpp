#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "ccadepth/cca.hpp"
#include "ccadepth/config.hpp"
#include "ccadepth/fft.hpp"
#include "ccadepth/optics.hpp"
#include "ccadepth/rng.hpp"
#include "oracles.hpp"

using namespace ccadepth;

namespace {

// Small, properly sampled camera for unit tests.
OpticalConfig tiny_config() {
    OpticalConfig cfg;
    cfg.focal_length = 0.025;
    cfg.aperture_diameter = 0.4e-3;
    cfg.window_size = 0.8e-3;
    cfg.sim_grid = 32;
    cfg.psf_crop = 9;
    cfg.sensor_bin = 1;
    cfg.focus_distance = 1.0;
    cfg.sensor_distance = 0.0;
    cfg.wavelengths = {470e-9, 550e-9, 630e-9};
    cfg.depth_planes = {1.2, 0.5};
    cfg.finalize();
    return cfg;
}

std::vector<double> test_primaries_3band(double offset) {
    std::vector<double> prim(size_t(2) * 3);
    for (int b = 0; b < 3; ++b) {
        prim[b] = 0.3 + 0.1 * b + offset;
        prim[size_t(3) + b] = 0.8 - 0.2 * b;
    }
    return prim;
}

double max_abs_diff(const RealGrid& a, const RealGrid& b) {
    double mx = 0.0;
    for (size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a[i] - b[i]));
    return mx;
}

}  // namespace

TEST_CASE("spherical wave: axis value, magnitude, symmetry") {
    const OpticalConfig cfg = tiny_config();
    const ComplexField f = spherical_wave(cfg, 550e-9, 0.7);
    const int c = cfg.sim_grid / 2;
    CHECK(f.values(c, c).real() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(f.values(c, c).imag() == doctest::Approx(0.0).epsilon(1e-15));
    for (size_t i = 0; i < f.values.size(); ++i)
        CHECK(std::abs(f.values[i]) == doctest::Approx(1.0).epsilon(1e-12));
    // f(x, y) == f(-x, -y) for paired samples
    for (int y = 1; y < cfg.sim_grid; ++y)
        for (int x = 1; x < cfg.sim_grid; ++x)
            CHECK(std::abs(f.values(y, x) - f.values(2 * c - y, 2 * c - x)) < 1e-12);
    CHECK_THROWS_AS(spherical_wave(cfg, 550e-9, 0.0), DomainError);
    CHECK_THROWS_AS(spherical_wave(cfg, 550e-9, -1.0), DomainError);
    CHECK_THROWS_AS(spherical_wave(cfg, 123e-9, 1.0), DomainError);  // not a configured band
}

TEST_CASE("lens phase: axis value, magnitude, conjugate-plane curvature") {
    OpticalConfig cfg = tiny_config();
    const double lambda = 550e-9;
    const ComplexField t = lens_phase(cfg, lambda);
    const int c = cfg.sim_grid / 2;
    CHECK(t.values(c, c) == cdouble(1.0, 0.0));
    for (size_t i = 0; i < t.values.size(); ++i)
        CHECK(std::abs(t.values[i]) == doctest::Approx(1.0).epsilon(1e-12));

    // With 1/z + 1/z_i = 1/f, the wave arriving from distance f' = 2z times
    // the lens phase is a converging quadratic of curvature -1/z_i (the
    // arriving-wave phase carries r^2/z, twice the curvature of a point at z).
    cfg.focus_distance = 0.15;
    cfg.sensor_distance = 0.0;
    cfg.finalize();
    const double zi = cfg.sensor_distance;
    CHECK(zi == doctest::Approx(1.0 / (1.0 / 0.025 - 1.0 / 0.15)).epsilon(1e-12));
    const ComplexField u = spherical_wave(cfg, lambda, 2.0 * 0.15);
    const ComplexField lens = lens_phase(cfg, lambda);
    const double k = 2.0 * 3.14159265358979323846 / lambda;
    for (int y = 0; y < cfg.sim_grid; ++y)
        for (int x = 0; x < cfg.sim_grid; ++x) {
            const double r2 = cfg.coord(x) * cfg.coord(x) + cfg.coord(y) * cfg.coord(y);
            const double phi = -0.5 * k * r2 / zi;
            const cdouble expected(std::cos(phi), std::sin(phi));
            CHECK(std::abs(u.values(y, x) * lens.values(y, x) - expected) < 1e-9);
        }
}

TEST_CASE("aperture mask: center, boundary convention, area") {
    const OpticalConfig cfg = tiny_config();
    const RealGrid mask = aperture_mask(cfg);
    const int c = cfg.sim_grid / 2;
    CHECK(mask(c, c) == 1.0);
    double sum = 0.0;
    for (int y = 0; y < cfg.sim_grid; ++y)
        for (int x = 0; x < cfg.sim_grid; ++x) {
            const double r = std::hypot(cfg.coord(x), cfg.coord(y));
            if (r >= cfg.aperture_diameter / 2.0) CHECK(mask(y, x) == 0.0);  // strict interior rule
            sum += mask(y, x);
        }
    const double disk_area = 3.14159265358979323846 * cfg.aperture_diameter * cfg.aperture_diameter / 4.0;
    const double expected = disk_area / (cfg.window_size * cfg.window_size);
    const double got = sum / double(cfg.sim_grid) / double(cfg.sim_grid);
    CHECK(std::abs(got - expected) / expected < 2.0 / cfg.sim_grid);
}

TEST_CASE("field after lens: zero, unit and half transmittance") {
    const OpticalConfig cfg = tiny_config();
    const double lambda = cfg.wavelengths[1];
    const ComplexField u = spherical_wave(cfg, lambda, 0.9);
    const ComplexField t = lens_phase(cfg, lambda);
    const RealGrid a = aperture_mask(cfg);

    RealGrid zeros(cfg.sim_grid, cfg.sim_grid, 0.0);
    CHECK(oracle::energy(field_after_lens(u, t, a, zeros).values) == 0.0);

    RealGrid ones(cfg.sim_grid, cfg.sim_grid, 1.0);
    double in_aperture = 0.0;
    for (size_t i = 0; i < a.size(); ++i) in_aperture += a[i];
    CHECK(oracle::energy(field_after_lens(u, t, a, ones).values) ==
          doctest::Approx(in_aperture).epsilon(1e-12));

    RealGrid half(cfg.sim_grid, cfg.sim_grid, 0.5);
    CHECK(oracle::energy(field_after_lens(u, t, a, half).values) ==
          doctest::Approx(0.25 * in_aperture).epsilon(1e-12));

    RealGrid wrong(cfg.sim_grid + 1, cfg.sim_grid + 1, 1.0);
    CHECK_THROWS_AS(field_after_lens(u, t, a, wrong), ShapeError);
}

TEST_CASE("angular spectrum: zero distance is the identity") {
    Rng rng(3);
    const int m = 32;
    const double pitch = 0.3e-6, lambda = 550e-9;
    ComplexField u{oracle::band_limited_field(rng, m, pitch, lambda), pitch, lambda};
    const ComplexField out = angular_spectrum_propagate(u, 0.0);
    for (size_t i = 0; i < u.values.size(); ++i) CHECK(std::abs(out.values[i] - u.values[i]) < 1e-12);
    CHECK_THROWS_AS(angular_spectrum_propagate(u, -1e-6), DomainError);
}

TEST_CASE("angular spectrum: band-limited energy conservation") {
    Rng rng(17);
    const int m = 64;
    const double pitch = 0.3e-6, lambda = 550e-9;
    for (int trial = 0; trial < 5; ++trial) {
        ComplexField u{oracle::band_limited_field(rng, m, pitch, lambda), pitch, lambda};
        const ComplexField out = angular_spectrum_propagate(u, rng.uniform(1e-5, 3e-3));
        const double ratio = oracle::energy(out.values) / oracle::energy(u.values);
        CHECK(std::abs(ratio - 1.0) < 1e-9);
    }
}

TEST_CASE("angular spectrum: explicit DFT oracle on 32x32 grids") {
    Rng rng(11);
    const int m = 32;
    const double pitch = 0.4e-6, lambda = 550e-9;
    for (int trial = 0; trial < 3; ++trial) {
        ComplexField u{oracle::band_limited_field(rng, m, pitch, lambda), pitch, lambda};
        const double distance = rng.uniform(1e-4, 1e-3);
        const ComplexGrid ref = oracle::dft_propagate(u.values, pitch, lambda, distance);
        const ComplexField got = angular_spectrum_propagate(u, distance);
        double num = 0.0, den = 0.0;
        for (size_t i = 0; i < ref.size(); ++i) {
            num += std::norm(got.values[i] - ref[i]);
            den += std::norm(ref[i]);
        }
        CHECK(std::sqrt(num / den) < 1e-8);
    }
}

TEST_CASE("compute_psf: dark, in-focus and defocused apertures") {
    const OpticalConfig cfg = tiny_config();
    const double lambda = cfg.wavelengths[1];
    const int m = cfg.sim_grid, k = cfg.psf_crop;

    RealGrid zeros(m, m, 0.0);
    const PsfResult dark = compute_psf(cfg, zeros, lambda, cfg.focus_distance);
    CHECK(dark.energy == 0.0);
    for (size_t i = 0; i < dark.kernel.size(); ++i) CHECK(dark.kernel[i] == 0.0);

    RealGrid ones(m, m, 1.0);
    const PsfResult focus = compute_psf(cfg, ones, lambda, cfg.focus_distance);
    double cx = 0.0, cy = 0.0, mass = 0.0, peak = 0.0;
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
            mass += focus.kernel(y, x);
            cx += focus.kernel(y, x) * x;
            cy += focus.kernel(y, x) * y;
            peak = std::max(peak, focus.kernel(y, x));
        }
    CHECK(std::abs(cx / mass - (k - 1) / 2) < 0.05);
    CHECK(std::abs(cy / mass - (k - 1) / 2) < 0.05);
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
            CHECK(std::abs(focus.kernel(y, x) - focus.kernel(k - 1 - y, x)) < 1e-6 * peak);
            CHECK(std::abs(focus.kernel(y, x) - focus.kernel(y, k - 1 - x)) < 1e-6 * peak);
            CHECK(std::abs(focus.kernel(y, x) - focus.kernel(x, y)) < 1e-6 * peak);
        }

    const PsfResult defocus = compute_psf(cfg, ones, lambda, cfg.focus_distance / 2.0);
    double peak_d = 0.0;
    for (size_t i = 0; i < defocus.kernel.size(); ++i) peak_d = std::max(peak_d, defocus.kernel[i]);
    CHECK(peak_d < peak);
    auto second_moment = [&](const RealGrid& kr) {
        double acc = 0.0, total = 0.0;
        for (int y = 0; y < k; ++y)
            for (int x = 0; x < k; ++x) {
                const double dx = x - (k - 1) / 2, dy = y - (k - 1) / 2;
                acc += kr(y, x) * (dx * dx + dy * dy);
                total += kr(y, x);
            }
        return acc / total;
    };
    CHECK(second_moment(defocus.kernel) > second_moment(focus.kernel));
}

TEST_CASE("basis fields: single cell reproduces the open aperture") {
    const OpticalConfig cfg = tiny_config();
    const double lambda = cfg.wavelengths[0];
    const double z = cfg.depth_planes[0];
    const BasisFieldSet basis = basis_fields(cfg, CellMap::build(cfg, 1), lambda, z);
    REQUIRE(basis.fields.size() == 1);

    const ComplexField u = spherical_wave(cfg, lambda, z);
    const ComplexField t = lens_phase(cfg, lambda);
    RealGrid ones(cfg.sim_grid, cfg.sim_grid, 1.0);
    const ComplexField open = field_after_lens(u, t, aperture_mask(cfg), ones);
    const ComplexField sensor = angular_spectrum_propagate(open, cfg.sensor_distance);
    const int s0 = cfg.sim_grid / 2 - (cfg.psf_crop - 1) / 2;
    double diff = 0.0, ref = 0.0;
    for (int y = 0; y < basis.window; ++y)
        for (int x = 0; x < basis.window; ++x) {
            diff += std::norm(basis.fields[0](y, x) + basis.clear_field(y, x) -
                              sensor.values(s0 + y, s0 + x));
            ref += std::norm(sensor.values(s0 + y, s0 + x));
        }
    CHECK(diff / ref < 1e-10);
}

TEST_CASE("basis fields: superposition over cells matches the open aperture") {
    const OpticalConfig cfg = tiny_config();
    const double lambda = cfg.wavelengths[2];
    const double z = cfg.depth_planes[1];
    const BasisFieldSet basis = basis_fields(cfg, CellMap::build(cfg, 4), lambda, z);

    const ComplexField u = spherical_wave(cfg, lambda, z);
    const ComplexField t = lens_phase(cfg, lambda);
    RealGrid ones(cfg.sim_grid, cfg.sim_grid, 1.0);
    const ComplexField open = field_after_lens(u, t, aperture_mask(cfg), ones);
    const ComplexField sensor = angular_spectrum_propagate(open, cfg.sensor_distance);
    const int s0 = cfg.sim_grid / 2 - (cfg.psf_crop - 1) / 2;

    double diff = 0.0, ref = 0.0;
    for (int y = 0; y < basis.window; ++y)
        for (int x = 0; x < basis.window; ++x) {
            cdouble acc = basis.clear_field(y, x);
            for (const auto& f : basis.fields) acc += f(y, x);
            diff += std::norm(acc - sensor.values(s0 + y, s0 + x));
            ref += std::norm(sensor.values(s0 + y, s0 + x));
        }
    CHECK(diff / ref < 1e-10);
}

TEST_CASE("basis quadratic form matches the direct transmittance pipeline") {
    const OpticalConfig cfg = tiny_config();
    const int n = 4;
    std::vector<double> prim4(size_t(4) * 3);
    {
        // 4 smooth primaries sampled at the 3 test bands
        const std::vector<double> grid4 = {470e-9, 550e-9, 630e-9, 650e-9};
        const std::vector<double> full = default_primaries(grid4);
        for (int r = 0; r < 4; ++r)
            for (int b = 0; b < 3; ++b) prim4[size_t(r) * 3 + b] = full[size_t(r) * 4 + b];
    }
    for (int trial = 0; trial < 3; ++trial) {
        const CodedAperture cca = random_cca(100 + trial, n, cfg.wavelengths, prim4, 4);
        for (int band = 0; band < cfg.bands(); ++band) {
            const BasisFieldSet basis =
                basis_fields(cfg, CellMap::build(cfg, n), cfg.wavelengths[band], cfg.depth_planes[trial % 2]);
            const PsfResult via_basis = psf_from_basis(basis, cca, band);
            const PsfResult direct =
                compute_psf(cfg, rasterize(cca, cfg, band), cfg.wavelengths[band], cfg.depth_planes[trial % 2]);
            CHECK(max_abs_diff(via_basis.kernel, direct.kernel) < 1e-9);
            CHECK(std::abs(via_basis.energy - direct.energy) < 1e-9);
        }
    }
}

TEST_CASE("psf_and_gradient: zero weights, finite differences, quadratic scaling") {
    const OpticalConfig cfg = tiny_config();
    const int n = 2;
    const std::vector<double> prim = test_primaries_3band(0.0);
    const BasisFieldSet basis = basis_fields(cfg, CellMap::build(cfg, n), cfg.wavelengths[1],
                                             cfg.depth_planes[0]);
    const CodedAperture cca = random_cca(7, n, cfg.wavelengths, prim, 2);

    SUBCASE("all-zero weights give a zero kernel and zero gradient") {
        CodedAperture dark = cca;
        std::fill(dark.weights.begin(), dark.weights.end(), 0.0);
        const PsfGradients g = psf_and_gradient(basis, dark, 1);
        CHECK(g.energy == 0.0);
        for (const auto& dk : g.dkernel_dw)
            for (size_t i = 0; i < dk.size(); ++i) CHECK(dk[i] == 0.0);
    }

    SUBCASE("gradient matches central finite differences") {
        const PsfGradients g = psf_and_gradient(basis, cca, 1);
        Rng rng(9);
        RealGrid probe(cfg.psf_crop, cfg.psf_crop);
        for (size_t i = 0; i < probe.size(); ++i) probe[i] = rng.uniform(-1.0, 1.0);
        const double h = 1e-4;
        for (size_t wi = 0; wi < cca.weights.size(); ++wi) {
            CodedAperture plus = cca, minus = cca;
            plus.weights[wi] += h;
            minus.weights[wi] -= h;
            const PsfResult pk = psf_from_basis(basis, plus, 1);
            const PsfResult mk = psf_from_basis(basis, minus, 1);
            double fd = 0.0, analytic = 0.0;
            for (size_t i = 0; i < probe.size(); ++i) {
                fd += probe[i] * (pk.kernel[i] - mk.kernel[i]);
                analytic += probe[i] * g.dkernel_dw[wi][i];
            }
            fd /= 2.0 * h;
            CHECK(std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-12}) < 1e-5);
        }
    }

    SUBCASE("doubling a lone weight scales the kernel by 4") {
        CodedAperture one = cca;
        std::fill(one.weights.begin(), one.weights.end(), 0.0);
        one.weight(0, 1, 0) = 0.3;
        CodedAperture two = one;
        two.weight(0, 1, 0) = 0.6;
        const PsfResult k1 = psf_from_basis(basis, one, 1);
        const PsfResult k2 = psf_from_basis(basis, two, 1);
        for (size_t i = 0; i < k1.kernel.size(); ++i)
            CHECK(k2.kernel[i] == doctest::Approx(4.0 * k1.kernel[i]).epsilon(1e-12));
    }

    SUBCASE("stale basis is rejected") {
        const BasisFieldSet wrong =
            basis_fields(cfg, CellMap::build(cfg, 3), cfg.wavelengths[1], cfg.depth_planes[0]);
        CHECK_THROWS_AS(psf_and_gradient(wrong, cca, 1), ConsistencyError);
    }
}

TEST_CASE("PsfEngine: energies bounded and weight_grad matches the materialized gradients") {
    const OpticalConfig cfg = tiny_config();
    const int n = 2;
    const CodedAperture cca = random_cca(31, n, cfg.wavelengths, test_primaries_3band(0.1), 2);
    const PsfEngine engine(cfg, n);

    PsfEngine::Tape tape;
    const PsfStack stack = engine.stack_from_weights_with_tape(cca, tape);
    for (int j = 0; j < stack.planes; ++j)
        for (int b = 0; b < stack.bands; ++b) {
            CHECK(stack.energy(j, b) >= 0.0);
            CHECK(stack.energy(j, b) <= 1.0 + 1e-12);
        }

    Rng rng(13);
    std::vector<double> upstream(stack.kernels.size());
    for (double& v : upstream) v = rng.uniform(-1.0, 1.0);
    const std::vector<double> dw = engine.weight_grad(cca, tape, upstream);

    std::vector<double> expected(cca.weights.size(), 0.0);
    for (int j = 0; j < stack.planes; ++j)
        for (int b = 0; b < stack.bands; ++b) {
            const PsfGradients g = psf_and_gradient(engine.basis(j, b), cca, b);
            const double* up = upstream.data() + (size_t(j) * stack.bands + b) * stack.crop * stack.crop;
            for (size_t wi = 0; wi < expected.size(); ++wi)
                for (size_t i = 0; i < g.dkernel_dw[wi].size(); ++i)
                    expected[wi] += up[i] * g.dkernel_dw[wi][i];
        }
    for (size_t wi = 0; wi < expected.size(); ++wi)
        CHECK(dw[wi] == doctest::Approx(expected[wi]).epsilon(1e-9));
}

TEST_CASE("PSF1 container round-trips byte for byte") {
    const OpticalConfig cfg = tiny_config();
    const PsfStack stack = build_psf_stack(cfg, open_aperture(cfg.wavelengths));

    const auto dir = std::filesystem::temp_directory_path() / "ccadepth_test_psf1";
    std::filesystem::create_directories(dir);
    const auto p1 = dir / "a.psf", p2 = dir / "b.psf";
    write_psf1(stack, p1);
    write_psf1(read_psf1(p1), p2);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
    CHECK(!s1.empty());
    std::filesystem::remove_all(dir);
}

TEST_CASE("open aperture: near-unit energies when the crop covers the PSF") {
    // K = 31 of 32 samples: essentially the whole sensor window is kept, so
    // only sub-percent diffraction tails past the window edge are lost.
    OpticalConfig cfg = tiny_config();
    cfg.psf_crop = 31;
    cfg.finalize();
    const PsfStack stack = build_psf_stack(cfg, open_aperture(cfg.wavelengths));
    for (int j = 0; j < stack.planes; ++j)
        for (int b = 0; b < stack.bands; ++b) {
            CHECK(stack.energy(j, b) > 0.99);
            CHECK(stack.energy(j, b) <= 1.0 + 1e-9);
        }
}

TEST_CASE("compute_psf records a warning when the crop loses transmitted energy") {
    const OpticalConfig cfg = tiny_config();  // K = 9 keeps ~93% here
    RealGrid ones(cfg.sim_grid, cfg.sim_grid, 1.0);
    const PsfResult res = compute_psf(cfg, ones, cfg.wavelengths[1], cfg.depth_planes[1]);
    CHECK(res.warning.has_value());
    CHECK(res.energy > 0.0);
}
