#include "ccadepth/optics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <thread>

#include "ccadepth/fft.hpp"
#include "ccadepth/serialize.hpp"

namespace ccadepth {

namespace {

constexpr double kPi = std::numbers::pi;

void check_wavelength(const OpticalConfig& cfg, double wavelength) {
    for (double w : cfg.wavelengths)
        if (std::abs(w - wavelength) <= 1e-12 * w) return;
    throw DomainError("wavelength is not one of the configured bands");
}

// Crop start so that for odd B the central pixel is centered on the axis
// sample M/2. For even B the pixel grid sits half a sample off axis.
int crop_start(int m, int k, int b) { return m / 2 - (k - 1) / 2 * b - b / 2; }

// |u|^2 integrated over B x B sample blocks of the K*B crop window, scaled.
RealGrid bin_crop(const ComplexGrid& full, int m, int k, int b, double scale) {
    const int s0 = crop_start(m, k, b);
    RealGrid kernel(k, k);
    for (int py = 0; py < k; ++py)
        for (int px = 0; px < k; ++px) {
            double acc = 0.0;
            for (int dy = 0; dy < b; ++dy)
                for (int dx = 0; dx < b; ++dx) {
                    const cdouble v = full(s0 + py * b + dy, s0 + px * b + dx);
                    acc += std::norm(v);
                }
            kernel(py, px) = acc * scale;
        }
    return kernel;
}

}  // namespace

ComplexField spherical_wave(const OpticalConfig& cfg, double wavelength, double z) {
    if (z <= 0.0) throw DomainError("spherical_wave: source distance must be positive");
    check_wavelength(cfg, wavelength);
    const int m = cfg.sim_grid;
    ComplexField f{ComplexGrid(m, m), cfg.pitch(), wavelength};
    const double phase_scale = 2.0 * kPi / (wavelength * z);
    for (int y = 0; y < m; ++y) {
        const double ys = cfg.coord(y);
        for (int x = 0; x < m; ++x) {
            const double xs = cfg.coord(x);
            const double phi = phase_scale * (xs * xs + ys * ys);
            f.values(y, x) = cdouble(std::cos(phi), std::sin(phi));
        }
    }
    return f;
}

ComplexField lens_phase(const OpticalConfig& cfg, double wavelength) {
    if (wavelength <= 0.0) throw DomainError("lens_phase: wavelength must be positive");
    const int m = cfg.sim_grid;
    ComplexField f{ComplexGrid(m, m), cfg.pitch(), wavelength};
    const double k = 2.0 * kPi / wavelength;
    const double phase_scale = -k / (2.0 * cfg.focal_length);
    for (int y = 0; y < m; ++y) {
        const double ys = cfg.coord(y);
        for (int x = 0; x < m; ++x) {
            const double xs = cfg.coord(x);
            const double phi = phase_scale * (xs * xs + ys * ys);
            f.values(y, x) = cdouble(std::cos(phi), std::sin(phi));
        }
    }
    return f;
}

RealGrid aperture_mask(const OpticalConfig& cfg) {
    const int m = cfg.sim_grid;
    const double r2 = cfg.aperture_diameter * cfg.aperture_diameter / 4.0;
    RealGrid mask(m, m);
    for (int y = 0; y < m; ++y) {
        const double ys = cfg.coord(y);
        for (int x = 0; x < m; ++x) {
            const double xs = cfg.coord(x);
            mask(y, x) = (xs * xs + ys * ys < r2) ? 1.0 : 0.0;  // strictly inside
        }
    }
    return mask;
}

ComplexField field_after_lens(const ComplexField& u_in, const ComplexField& lens, const RealGrid& aperture,
                              const RealGrid& transmittance_grid) {
    u_in.values.require_shape(lens.values, "field_after_lens: u_in vs lens");
    if (aperture.rows() != u_in.values.rows() || aperture.cols() != u_in.values.cols() ||
        !aperture.same_shape(transmittance_grid))
        throw ShapeError("field_after_lens: grid size mismatch");
    if (u_in.wavelength != lens.wavelength)
        throw DomainError("field_after_lens: wavelength mismatch between field and lens");
    ComplexField out{ComplexGrid(u_in.values.rows(), u_in.values.cols()), u_in.pitch, u_in.wavelength};
    for (size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = aperture[i] * transmittance_grid[i] * lens.values[i] * u_in.values[i];
    return out;
}

ComplexField angular_spectrum_propagate(const ComplexField& u, double distance) {
    if (distance < 0.0) throw DomainError("angular_spectrum_propagate: negative distance");
    const int rows = u.values.rows(), cols = u.values.cols();
    ComplexField out{u.values, u.pitch, u.wavelength};
    fft2(out.values);

    const double k = 2.0 * kPi / u.wavelength;
    const double df_y = 1.0 / (rows * u.pitch);
    const double df_x = 1.0 / (cols * u.pitch);
    for (int y = 0; y < rows; ++y) {
        const double fy = fft_freq_index(y, rows) * df_y;
        const double ly = u.wavelength * fy;
        for (int x = 0; x < cols; ++x) {
            const double fx = fft_freq_index(x, cols) * df_x;
            const double lx = u.wavelength * fx;
            const double radicand = 1.0 - lx * lx - ly * ly;
            if (radicand < 0.0) {
                out.values(y, x) = 0.0;  // evanescent
            } else {
                const double phi = k * distance * std::sqrt(radicand);
                out.values(y, x) *= cdouble(std::cos(phi), std::sin(phi));
            }
        }
    }
    ifft2(out.values);
    return out;
}

PsfResult compute_psf(const OpticalConfig& cfg, const RealGrid& transmittance_grid, double wavelength,
                      double z) {
    const int m = cfg.sim_grid;
    if (transmittance_grid.rows() != m || transmittance_grid.cols() != m)
        throw ShapeError("compute_psf: transmittance grid does not match sim_grid");

    const RealGrid aperture = aperture_mask(cfg);
    const ComplexField u_in = spherical_wave(cfg, wavelength, z);
    const ComplexField lens = lens_phase(cfg, wavelength);
    const ComplexField after = field_after_lens(u_in, lens, aperture, transmittance_grid);

    double open_energy = 0.0, transmitted = 0.0;
    for (size_t i = 0; i < aperture.size(); ++i) {
        open_energy += aperture[i];
        transmitted += aperture[i] * transmittance_grid[i] * transmittance_grid[i];
    }

    const ComplexField sensor = angular_spectrum_propagate(after, cfg.sensor_distance);

    PsfResult res;
    if (open_energy <= 0.0) {
        res.kernel = RealGrid(cfg.psf_crop, cfg.psf_crop);
        return res;
    }
    res.kernel = bin_crop(sensor.values, m, cfg.psf_crop, cfg.sensor_bin, 1.0 / open_energy);
    double captured = 0.0;
    for (size_t i = 0; i < res.kernel.size(); ++i) captured += res.kernel[i];
    res.energy = captured;
    if (transmitted > 0.0 && captured * open_energy < 0.99 * transmitted) {
        res.warning = "psf crop captures " + std::to_string(captured * open_energy / transmitted) +
                      " of the transmitted energy at z=" + std::to_string(z) +
                      " lambda=" + std::to_string(wavelength * 1e9) + "nm";
    }
    return res;
}

CellMap CellMap::build(const OpticalConfig& cfg, int n, double cell_size) {
    if (n < 1 || n > 32) throw DomainError("CellMap: cell count out of range [1, 32]");
    const int m = cfg.sim_grid;
    const double cell = cell_size > 0.0 ? cell_size : cfg.window_size / n;
    const double extent = cell * n;
    CellMap map;
    map.n = n;
    map.cell = Grid<int>(m, m, -1);
    for (int y = 0; y < m; ++y) {
        const double v = (cfg.coord(y) + extent / 2.0) / cell;
        for (int x = 0; x < m; ++x) {
            const double u = (cfg.coord(x) + extent / 2.0) / cell;
            if (u <= -0.5 || u >= n + 0.5 || v <= -0.5 || v >= n + 0.5) continue;
            const int j = std::clamp(int(std::floor(u)), 0, n - 1);
            const int i = std::clamp(int(std::floor(v)), 0, n - 1);
            map.cell(y, x) = i * n + j;
        }
    }
    return map;
}

BasisFieldSet basis_fields(const OpticalConfig& cfg, const CellMap& map, double wavelength, double z) {
    const int m = cfg.sim_grid;
    if (map.cell.rows() != m || map.cell.cols() != m)
        throw ShapeError("basis_fields: cell map does not match sim_grid");

    const RealGrid aperture = aperture_mask(cfg);
    const ComplexField u_in = spherical_wave(cfg, wavelength, z);
    const ComplexField lens = lens_phase(cfg, wavelength);
    RealGrid ones(m, m, 1.0);
    const ComplexField open_field = field_after_lens(u_in, lens, aperture, ones);

    BasisFieldSet set;
    set.n = map.n;
    set.crop = cfg.psf_crop;
    set.bin = cfg.sensor_bin;
    set.window = cfg.psf_crop * cfg.sensor_bin;
    set.wavelength = wavelength;
    set.depth = z;
    set.config_hash = fnv1a(&map.n, sizeof map.n, cfg.hash());
    for (size_t i = 0; i < aperture.size(); ++i) set.open_energy += aperture[i];

    const int s0 = crop_start(m, cfg.psf_crop, cfg.sensor_bin);
    auto propagate_subset = [&](int cell_index) {
        ComplexField restricted{ComplexGrid(m, m), open_field.pitch, wavelength};
        bool any = false;
        for (int y = 0; y < m; ++y)
            for (int x = 0; x < m; ++x)
                if (map.cell(y, x) == cell_index) {
                    restricted.values(y, x) = open_field.values(y, x);
                    any = any || (aperture(y, x) != 0.0);
                }
        ComplexGrid crop(set.window, set.window);
        if (any) {
            ComplexField sensor = angular_spectrum_propagate(restricted, cfg.sensor_distance);
            for (int y = 0; y < set.window; ++y)
                for (int x = 0; x < set.window; ++x) crop(y, x) = sensor.values(s0 + y, s0 + x);
        }
        return crop;
    };

    set.fields.resize(size_t(map.n) * map.n);
    for (int c = 0; c < map.n * map.n; ++c) set.fields[c] = propagate_subset(c);
    set.clear_field = propagate_subset(-1);
    return set;
}

namespace {

// Shared guts of the basis-set forward path: U = sum_cells T_cell V_cell + clear.
ComplexGrid superpose(const BasisFieldSet& basis, const CodedAperture& cca, int band) {
    if (cca.n != basis.n)
        throw ConsistencyError("basis fields were built for a different cell grid");
    if (band < 0 || band >= cca.l) throw DomainError("band index out of range");
    const RealGrid t = transmittance(cca, band);
    ComplexGrid u = basis.clear_field;
    for (int i = 0; i < basis.n; ++i)
        for (int j = 0; j < basis.n; ++j) {
            const double c = t(i, j);
            if (c == 0.0) continue;
            const ComplexGrid& v = basis.fields[size_t(i) * basis.n + j];
            for (size_t s = 0; s < u.size(); ++s) u[s] += c * v[s];
        }
    return u;
}

}  // namespace

PsfResult psf_from_basis(const BasisFieldSet& basis, const CodedAperture& cca, int band) {
    const ComplexGrid u = superpose(basis, cca, band);
    PsfResult res;
    // crop_start(K*B, K, B) is 0, so binning the window needs no offset
    res.kernel = bin_crop(u, basis.window, basis.crop, basis.bin, 1.0 / basis.open_energy);
    for (size_t i = 0; i < res.kernel.size(); ++i) res.energy += res.kernel[i];
    return res;
}

PsfStack build_psf_stack(const OpticalConfig& cfg, const CodedAperture& cca,
                         std::vector<std::string>* warnings) {
    PsfStack stack;
    stack.planes = cfg.planes();
    stack.bands = cfg.bands();
    stack.crop = cfg.psf_crop;
    stack.wavelengths = cfg.wavelengths;
    stack.depths = cfg.depth_planes;
    stack.kernels.assign(size_t(stack.planes) * stack.bands * stack.crop * stack.crop, 0.0);
    stack.energies.assign(size_t(stack.planes) * stack.bands, 0.0);
    stack.config_hash = cfg.hash() ^ cca.hash();
    for (int j = 0; j < stack.planes; ++j)
        for (int band = 0; band < stack.bands; ++band) {
            const RealGrid t = rasterize(cca, cfg, band);
            PsfResult res = compute_psf(cfg, t, cfg.wavelengths[band], cfg.depth_planes[j]);
            std::copy(res.kernel.data(), res.kernel.data() + res.kernel.size(), stack.kernel(j, band));
            stack.energy(j, band) = res.energy;
            if (res.warning && warnings) warnings->push_back(*res.warning);
        }
    return stack;
}

void write_psf1(const PsfStack& stack, const std::filesystem::path& path) {
    auto os = open_output(path);
    put_magic(os, "PSF1");
    put_u32(os, uint32_t(stack.planes));
    put_u32(os, uint32_t(stack.bands));
    put_u32(os, uint32_t(stack.crop));
    for (double w : stack.wavelengths) put_f64(os, w);
    for (double d : stack.depths) put_f64(os, d);
    for (double v : stack.kernels) put_f64(os, v);
    for (double e : stack.energies) put_f64(os, e);
    if (!os) throw IoError("short write to " + path.string());
}

PsfStack read_psf1(const std::filesystem::path& path) {
    auto is = open_input(path);
    expect_magic(is, "PSF1", "PSF stack");
    PsfStack stack;
    stack.planes = int(get_u32(is, "PSF1 plane count"));
    stack.bands = int(get_u32(is, "PSF1 band count"));
    stack.crop = int(get_u32(is, "PSF1 crop size"));
    if (stack.planes < 1 || stack.bands < 1 || stack.crop < 1)
        throw ParseError("PSF1 header dimensions out of range");
    stack.wavelengths.resize(stack.bands);
    for (double& w : stack.wavelengths) w = get_f64(is, "PSF1 wavelengths");
    stack.depths.resize(stack.planes);
    for (double& d : stack.depths) d = get_f64(is, "PSF1 depths");
    stack.kernels.resize(size_t(stack.planes) * stack.bands * stack.crop * stack.crop);
    for (double& v : stack.kernels) v = get_f64(is, "PSF1 kernel values");
    stack.energies.resize(size_t(stack.planes) * stack.bands);
    for (double& e : stack.energies) e = get_f64(is, "PSF1 energies");
    expect_eof(is, "PSF1 payload");
    return stack;
}

PsfEngine::PsfEngine(const OpticalConfig& cfg, int cells, double cell_size, int threads)
    : cfg_(cfg), map_(CellMap::build(cfg, cells, cell_size)) {
    const int total = cfg.planes() * cfg.bands();
    basis_.resize(total);
    threads = std::clamp(threads, 1, total);
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int idx = next.fetch_add(1); idx < total; idx = next.fetch_add(1)) {
            const int j = idx / cfg_.bands();
            const int band = idx % cfg_.bands();
            basis_[idx] = basis_fields(cfg_, map_, cfg_.wavelengths[band], cfg_.depth_planes[j]);
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
}

PsfStack PsfEngine::stack_from_weights(const CodedAperture& cca) const {
    Tape tape;
    return stack_from_weights_with_tape(cca, tape);
}

PsfStack PsfEngine::stack_from_weights_with_tape(const CodedAperture& cca, Tape& tape) const {
    if (cca.n != map_.n) throw ConsistencyError("PsfEngine: aperture cell grid mismatch");
    if (cca.l != cfg_.bands()) throw ConsistencyError("PsfEngine: aperture band count mismatch");
    PsfStack stack;
    stack.planes = cfg_.planes();
    stack.bands = cfg_.bands();
    stack.crop = cfg_.psf_crop;
    stack.wavelengths = cfg_.wavelengths;
    stack.depths = cfg_.depth_planes;
    stack.kernels.assign(size_t(stack.planes) * stack.bands * stack.crop * stack.crop, 0.0);
    stack.energies.assign(size_t(stack.planes) * stack.bands, 0.0);
    stack.config_hash = cfg_.hash() ^ cca.hash();
    tape.sensor_fields.resize(size_t(stack.planes) * stack.bands);

    const int b = cfg_.sensor_bin;
    for (int j = 0; j < stack.planes; ++j)
        for (int band = 0; band < stack.bands; ++band) {
            const BasisFieldSet& basis = basis_[size_t(j) * stack.bands + band];
            ComplexGrid u = superpose(basis, cca, band);
            const RealGrid kernel = bin_crop(u, basis.window, basis.crop, b, 1.0 / basis.open_energy);
            double sum = 0.0;
            for (size_t i = 0; i < kernel.size(); ++i) sum += kernel[i];
            std::copy(kernel.data(), kernel.data() + kernel.size(), stack.kernel(j, band));
            stack.energy(j, band) = sum;
            tape.sensor_fields[size_t(j) * stack.bands + band] = std::move(u);
        }
    return stack;
}

std::vector<double> PsfEngine::weight_grad(const CodedAperture& cca, const Tape& tape,
                                           const std::vector<double>& dkernels) const {
    if (cca.n != map_.n) throw ConsistencyError("PsfEngine: aperture cell grid mismatch");
    const int planes = cfg_.planes(), bands = cfg_.bands(), k = cfg_.psf_crop, b = cfg_.sensor_bin;
    if (dkernels.size() != size_t(planes) * bands * k * k)
        throw ShapeError("PsfEngine::weight_grad: upstream gradient size mismatch");
    std::vector<double> dw(cca.weights.size(), 0.0);

    for (int j = 0; j < planes; ++j)
        for (int band = 0; band < bands; ++band) {
            const BasisFieldSet& basis = basis_[size_t(j) * bands + band];
            const ComplexGrid& u = tape.sensor_fields[size_t(j) * bands + band];
            const double* g = dkernels.data() + (size_t(j) * bands + band) * k * k;

            // Z(s) = g(pixel(s)) * conj(U(s)) / E_open on the crop window.
            ComplexGrid z(basis.window, basis.window);
            for (int py = 0; py < k; ++py)
                for (int px = 0; px < k; ++px) {
                    const double gv = g[py * k + px] / basis.open_energy;
                    if (gv == 0.0) continue;
                    for (int dy = 0; dy < b; ++dy)
                        for (int dx = 0; dx < b; ++dx) {
                            const int sy = py * b + dy, sx = px * b + dx;
                            z(sy, sx) = gv * std::conj(u(sy, sx));
                        }
                }

            for (int i = 0; i < cca.n; ++i)
                for (int jj = 0; jj < cca.n; ++jj) {
                    // clamped transmittance has zero slope below zero
                    double raw = 0.0;
                    for (int p = 0; p < cca.r; ++p) raw += cca.weight(i, jj, p) * cca.primary(p, band);
                    if (raw < 0.0) continue;
                    const ComplexGrid& v = basis.fields[size_t(i) * cca.n + jj];
                    double inner = 0.0;
                    for (size_t s = 0; s < v.size(); ++s)
                        inner += z[s].real() * v[s].real() - z[s].imag() * v[s].imag();
                    const double common = 2.0 * inner;
                    for (int p = 0; p < cca.r; ++p)
                        dw[(size_t(i) * cca.n + jj) * cca.r + p] += common * cca.primary(p, band);
                }
        }
    return dw;
}

PsfGradients psf_and_gradient(const BasisFieldSet& basis, const CodedAperture& cca, int band) {
    const ComplexGrid u = superpose(basis, cca, band);
    const int k = basis.crop, b = basis.bin;
    PsfGradients out;
    out.kernel = bin_crop(u, basis.window, k, b, 1.0 / basis.open_energy);
    for (size_t i = 0; i < out.kernel.size(); ++i) out.energy += out.kernel[i];

    out.dkernel_dw.assign(size_t(basis.n) * basis.n * cca.r, RealGrid(k, k));
    for (int i = 0; i < basis.n; ++i)
        for (int j = 0; j < basis.n; ++j) {
            double raw = 0.0;
            for (int p = 0; p < cca.r; ++p) raw += cca.weight(i, j, p) * cca.primary(p, band);
            if (raw < 0.0) continue;  // clamp in the forward path, zero slope here
            const ComplexGrid& v = basis.fields[size_t(i) * basis.n + j];
            // d|U|^2/dc on the sample grid, then binned like the kernel
            RealGrid base(k, k);
            for (int py = 0; py < k; ++py)
                for (int px = 0; px < k; ++px) {
                    double acc = 0.0;
                    for (int dy = 0; dy < b; ++dy)
                        for (int dx = 0; dx < b; ++dx) {
                            const int sy = py * b + dy, sx = px * b + dx;
                            acc += 2.0 * (u(sy, sx).real() * v(sy, sx).real() +
                                          u(sy, sx).imag() * v(sy, sx).imag());
                        }
                    base(py, px) = acc / basis.open_energy;
                }
            for (int p = 0; p < cca.r; ++p) {
                const double alpha = cca.primary(p, band);
                RealGrid& dst = out.dkernel_dw[(size_t(i) * basis.n + j) * cca.r + p];
                for (size_t s = 0; s < dst.size(); ++s) dst[s] = alpha * base[s];
            }
        }
    return out;
}

}  // namespace ccadepth
