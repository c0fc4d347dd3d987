#include "ccadepth/cca.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ccadepth/image_io.hpp"
#include "ccadepth/render.hpp"
#include "ccadepth/rng.hpp"
#include "ccadepth/serialize.hpp"

namespace ccadepth {

std::vector<double> CodedAperture::wavelengths_m() const {
    std::vector<double> out(wavelengths_nm.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = wavelengths_nm[i] * 1e-9;
    return out;
}

uint64_t CodedAperture::hash() const {
    uint64_t h = fnv1a(&n, sizeof n);
    h = fnv1a(&r, sizeof r, h);
    h = fnv1a(&l, sizeof l, h);
    h = fnv1a(weights.data(), weights.size() * sizeof(double), h);
    h = fnv1a(primaries.data(), primaries.size() * sizeof(double), h);
    int m = int(mode);
    return fnv1a(&m, sizeof m, h);
}

RealGrid transmittance(const CodedAperture& cca, int band) {
    if (band < 0 || band >= cca.l) throw DomainError("transmittance: band index out of range");
    RealGrid t(cca.n, cca.n);
    if (cca.mode == ApertureMode::open) {
        t.fill(1.0);
        return t;
    }
    for (int i = 0; i < cca.n; ++i)
        for (int j = 0; j < cca.n; ++j) {
            double s = 0.0;
            for (int k = 0; k < cca.r; ++k) s += cca.weight(i, j, k) * cca.primary(k, band);
            t(i, j) = std::max(0.0, s);
        }
    return t;
}

RealGrid rasterize(const CodedAperture& cca, const OpticalConfig& cfg, int band) {
    const RealGrid t = transmittance(cca, band);
    const int m = cfg.sim_grid;
    const double cell = cca.cell_size > 0.0 ? cca.cell_size : cfg.window_size / cca.n;
    const double extent = cell * cca.n;
    RealGrid grid(m, m, 1.0);
    for (int y = 0; y < m; ++y) {
        const double v = (cfg.coord(y) + extent / 2.0) / cell;
        for (int x = 0; x < m; ++x) {
            const double u = (cfg.coord(x) + extent / 2.0) / cell;
            // half-cell slack pads edge cells; anything farther out is clear
            if (u <= -0.5 || u >= cca.n + 0.5 || v <= -0.5 || v >= cca.n + 0.5) continue;
            const int j = std::clamp(int(std::floor(u)), 0, cca.n - 1);
            const int i = std::clamp(int(std::floor(v)), 0, cca.n - 1);
            grid(y, x) = t(i, j);
        }
    }
    return grid;
}

CodedAperture project_constraint(const CodedAperture& cca) {
    CodedAperture out = cca;
    const int r = out.r;
    std::vector<double> cell(r), next(r);
    for (int i = 0; i < out.n; ++i)
        for (int j = 0; j < out.n; ++j) {
            for (int k = 0; k < r; ++k) cell[k] = out.weight(i, j, k);
            // Iterate normalize-then-clip to a bitwise fixed point so repeated
            // projection is exactly a no-op.
            for (int pass = 0; pass < 8; ++pass) {
                double s = 0.0;
                for (int k = 0; k < r; ++k) s += cell[k];
                if (s == 0.0) {
                    std::fill(next.begin(), next.end(), 0.0);
                } else if (std::abs(s - 1.0) <= 8.0 * DBL_EPSILON) {
                    for (int k = 0; k < r; ++k) next[k] = std::clamp(cell[k], 0.0, 1.0);
                } else {
                    for (int k = 0; k < r; ++k) next[k] = std::clamp(cell[k] / s, 0.0, 1.0);
                }
                if (std::equal(cell.begin(), cell.end(), next.begin())) break;
                cell = next;
            }
            for (int k = 0; k < r; ++k) out.weight(i, j, k) = cell[k];
        }
    return out;
}

std::vector<double> default_primaries(const std::vector<double>& wavelengths_m) {
    if (wavelengths_m.size() < 4) throw DomainError("default_primaries: need at least 4 bands");
    for (size_t i = 1; i < wavelengths_m.size(); ++i)
        if (wavelengths_m[i] == wavelengths_m[i - 1])
            throw DomainError("default_primaries: wavelengths must be distinct");
    // green, red, blue, cyan
    constexpr double centers_nm[4] = {540.0, 620.0, 450.0, 490.0};
    constexpr double peak = 0.9;
    const double sigma_nm = 60.0 / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    const int l = int(wavelengths_m.size());
    std::vector<double> a(size_t(4) * l);
    for (int k = 0; k < 4; ++k)
        for (int b = 0; b < l; ++b) {
            const double d = wavelengths_m[b] * 1e9 - centers_nm[k];
            a[size_t(k) * l + b] = peak * std::exp(-d * d / (2.0 * sigma_nm * sigma_nm));
        }
    return a;
}

CodedAperture binarize(const CodedAperture& cca) {
    if (cca.mode != ApertureMode::binary) throw DomainError("binarize: aperture is not in binary mode");
    CodedAperture out = cca;
    for (double& w : out.weights) w = w >= 0.5 ? 1.0 : 0.0;
    return out;
}

namespace {

CodedAperture make_cca(int n, int r, const std::vector<double>& wavelengths_m,
                       std::vector<double> primaries) {
    CodedAperture cca;
    cca.n = n;
    cca.r = r;
    cca.l = int(wavelengths_m.size());
    cca.weights.assign(size_t(n) * n * r, 0.0);
    cca.primaries = std::move(primaries);
    cca.wavelengths_nm.resize(wavelengths_m.size());
    for (size_t i = 0; i < wavelengths_m.size(); ++i) cca.wavelengths_nm[i] = wavelengths_m[i] * 1e9;
    if (wavelengths_m.size() >= 2) {
        cca.band_width = (wavelengths_m.back() - wavelengths_m.front()) / double(wavelengths_m.size() - 1);
    }
    return cca;
}

}  // namespace

CodedAperture open_aperture(const std::vector<double>& wavelengths_m) {
    CodedAperture cca = make_cca(1, 1, wavelengths_m, std::vector<double>(wavelengths_m.size(), 1.0));
    cca.mode = ApertureMode::open;
    cca.weights[0] = 1.0;
    return cca;
}

CodedAperture random_cca(uint64_t seed, int n, const std::vector<double>& wavelengths_m,
                         const std::vector<double>& primaries, int r) {
    // random mosaic: one primary filter per cell, the usual construction for
    // colored apertures; mixtures stay reachable during optimization
    CodedAperture cca = make_cca(n, r, wavelengths_m, primaries);
    Rng rng(seed);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) cca.weight(i, j, int(rng.below(uint64_t(r)))) = 1.0;
    return project_constraint(cca);
}

CodedAperture random_binary_cca(uint64_t seed, int n, const std::vector<double>& wavelengths_m) {
    CodedAperture cca = make_cca(n, 1, wavelengths_m, std::vector<double>(wavelengths_m.size(), 1.0));
    cca.mode = ApertureMode::binary;
    Rng rng(seed);
    for (double& w : cca.weights) w = rng.next() & 1 ? 1.0 : 0.0;
    return cca;
}

CodedAperture continuous_binary_cca(uint64_t seed, int n, const std::vector<double>& wavelengths_m) {
    CodedAperture cca = make_cca(n, 1, wavelengths_m, std::vector<double>(wavelengths_m.size(), 1.0));
    cca.mode = ApertureMode::binary;
    Rng rng(seed);
    for (double& w : cca.weights) w = rng.uniform();
    return cca;
}

void write_cca_text(const CodedAperture& cca, std::ostream& os) {
    os << "CCA1 " << cca.n << " " << cca.r << " " << cca.l << "\n";
    for (int b = 0; b < cca.l; ++b) os << (b ? " " : "") << f64_to_text(cca.wavelengths_nm[b]);
    os << "\n";
    for (int k = 0; k < cca.r; ++k) {
        for (int b = 0; b < cca.l; ++b) os << (b ? " " : "") << f64_to_text(cca.primary(k, b));
        os << "\n";
    }
    for (int i = 0; i < cca.n; ++i)
        for (int j = 0; j < cca.n; ++j) {
            for (int k = 0; k < cca.r; ++k) os << (k ? " " : "") << f64_to_text(cca.weight(i, j, k));
            os << "\n";
        }
}

void export_cca(const CodedAperture& cca, const std::filesystem::path& path, bool preview) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    write_cca_text(cca, os);
    if (!os) throw IoError("short write to " + path.string());
    os.close();

    if (preview) {
        int w = 0, h = 0;
        auto px = cca_preview_rgb8(cca, 32, w, h);
        auto preview_path = path;
        preview_path += ".png";
        write_png_rgb8(preview_path, px, w, h);
    }
}

CcaImport read_cca_text(std::istream& is) {
    std::string line;
    long lineno = 0;

    auto next_line = [&]() -> std::string {
        if (!std::getline(is, line)) throw ParseError("unexpected end of CCA file", lineno);
        ++lineno;
        return line;
    };

    std::istringstream header(next_line());
    std::string magic;
    int n = 0, r = 0, l = 0;
    if (!(header >> magic >> n >> r >> l) || magic != "CCA1")
        throw ParseError("expected 'CCA1 N R L' header", lineno);
    if (n < 1 || n > 32 || r < 1 || l < 1) throw ParseError("CCA1 header out of range", lineno);

    auto parse_row = [&](int count, const char* what) {
        std::istringstream row(next_line());
        std::vector<double> out(count);
        for (int i = 0; i < count; ++i)
            if (!(row >> out[i])) throw ParseError(std::string("expected ") + std::to_string(count) + " " + what, lineno);
        double extra;
        if (row >> extra) throw ParseError(std::string("too many values for ") + what, lineno);
        return out;
    };

    CcaImport result;
    CodedAperture& cca = result.cca;
    cca.n = n;
    cca.r = r;
    cca.l = l;
    cca.wavelengths_nm = parse_row(l, "wavelengths");
    cca.primaries.resize(size_t(r) * l);
    for (int k = 0; k < r; ++k) {
        auto row = parse_row(l, "primary values");
        std::copy(row.begin(), row.end(), cca.primaries.begin() + size_t(k) * l);
    }
    cca.weights.resize(size_t(n) * n * r);
    for (int c = 0; c < n * n; ++c) {
        auto row = parse_row(r, "weights");
        std::copy(row.begin(), row.end(), cca.weights.begin() + size_t(c) * r);
        double sum = 0.0;
        for (double w : row) sum += w;
        if (sum > 1.0 + 1e-9) result.unprojected = true;
    }
    if (l >= 2) cca.band_width = (cca.wavelengths_nm[l - 1] - cca.wavelengths_nm[0]) / double(l - 1) * 1e-9;

    // A flat unit spectrum with one primary and 0/1 weights is a binary mask.
    if (r == 1) {
        bool flat = std::all_of(cca.primaries.begin(), cca.primaries.end(),
                                [](double a) { return a == 1.0; });
        bool binary = std::all_of(cca.weights.begin(), cca.weights.end(),
                                  [](double w) { return w == 0.0 || w == 1.0; });
        if (flat && binary) cca.mode = ApertureMode::binary;
    }
    return result;
}

CcaImport import_cca(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    return read_cca_text(is);
}

std::vector<uint8_t> cca_preview_rgb8(const CodedAperture& cca, int cell_pixels, int& width, int& height) {
    width = height = cca.n * cell_pixels;
    std::vector<uint8_t> px(size_t(width) * height * 3);
    const SensorResponse resp = default_sensor_response(cca.wavelengths_m());
    std::vector<double> norm(3, 0.0);
    for (int c = 0; c < 3; ++c)
        for (int b = 0; b < cca.l; ++b) norm[c] += resp.at(c, b);

    for (int i = 0; i < cca.n; ++i)
        for (int j = 0; j < cca.n; ++j) {
            double rgb[3] = {0, 0, 0};
            for (int c = 0; c < 3; ++c) {
                for (int b = 0; b < cca.l; ++b) {
                    double t = 0.0;
                    if (cca.mode == ApertureMode::open) {
                        t = 1.0;
                    } else {
                        for (int k = 0; k < cca.r; ++k) t += cca.weight(i, j, k) * cca.primary(k, b);
                    }
                    rgb[c] += std::max(0.0, t) * resp.at(c, b);
                }
                rgb[c] = norm[c] > 0 ? rgb[c] / norm[c] : 0.0;
                rgb[c] = std::pow(std::clamp(rgb[c], 0.0, 1.0), 1.0 / 2.2);  // display gamma
            }
            for (int y = 0; y < cell_pixels; ++y)
                for (int x = 0; x < cell_pixels; ++x) {
                    size_t idx = (size_t(i * cell_pixels + y) * width + j * cell_pixels + x) * 3;
                    for (int c = 0; c < 3; ++c) px[idx + c] = uint8_t(std::lround(rgb[c] * 255.0));
                }
        }
    return px;
}

}  // namespace ccadepth
