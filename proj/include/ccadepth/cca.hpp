#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ccadepth/array.hpp"
#include "ccadepth/config.hpp"

namespace ccadepth {

enum class ApertureMode { color, binary, open };

// Color-coded aperture: an N x N grid of cells, each a linear combination of
// R fixed primary filter spectra sampled at L bands. Weights are the only
// trainable quantity; primaries never change.
//
// Wavelengths are kept in nanometers as parsed/constructed so the text
// container round-trips byte-for-byte; meters() converts for the optics.
struct CodedAperture {
    int n = 0;  // cells per side
    int r = 0;  // primaries
    int l = 0;  // bands
    std::vector<double> weights;        // (n, n, r), row-major cells
    std::vector<double> primaries;      // (r, l)
    std::vector<double> wavelengths_nm; // (l)
    double cell_size = 0.0;             // meters; 0 means window_size / n
    double band_width = 0.0;            // meters, informational
    ApertureMode mode = ApertureMode::color;

    double& weight(int i, int j, int k) { return weights[(size_t(i) * n + j) * r + k]; }
    double weight(int i, int j, int k) const { return weights[(size_t(i) * n + j) * r + k]; }
    double primary(int k, int band) const { return primaries[size_t(k) * l + band]; }
    std::vector<double> wavelengths_m() const;

    uint64_t hash() const;
};

// Cell transmittance at one band: T_ij = sum_r w_ijr * alpha_r(band), floored
// at zero. Open apertures are identically 1.
RealGrid transmittance(const CodedAperture& cca, int band);

// Nearest-cell piecewise-constant upsampling onto the simulation grid.
// Samples outside the N*cell_size extent are clear (1).
RealGrid rasterize(const CodedAperture& cca, const OpticalConfig& cfg, int band);

// Manufacturability constraint: per cell, divide by the weight sum, clip to
// [0,1], and repeat until the cell is a bitwise fixed point (at most a few
// passes). Zero-sum cells map to all-zero. The result is exactly idempotent.
CodedAperture project_constraint(const CodedAperture& cca);

// Four smooth band-pass primaries (green, red, blue, cyan), Gaussian profile,
// peak 0.9, FWHM 60 nm. Stand-ins for measured film spectra.
std::vector<double> default_primaries(const std::vector<double>& wavelengths_m);

// Hard threshold at 0.5 (ties round up). Training uses a straight-through
// gradient; this op is the forward half.
CodedAperture binarize(const CodedAperture& cca);

struct CcaImport {
    CodedAperture cca;
    bool unprojected = false;  // some cell had weight sum > 1
};

// CCA1 text container. Export also writes an advisory sRGB preview PNG beside
// the text file.
void export_cca(const CodedAperture& cca, const std::filesystem::path& path, bool preview = true);
CcaImport import_cca(const std::filesystem::path& path);

// Stream forms used by the checkpoint container.
void write_cca_text(const CodedAperture& cca, std::ostream& os);
CcaImport read_cca_text(std::istream& is);

// Constructors used by the trainer and tests.
CodedAperture open_aperture(const std::vector<double>& wavelengths_m);
CodedAperture random_cca(uint64_t seed, int n, const std::vector<double>& wavelengths_m,
                         const std::vector<double>& primaries, int r);
CodedAperture random_binary_cca(uint64_t seed, int n, const std::vector<double>& wavelengths_m);
CodedAperture continuous_binary_cca(uint64_t seed, int n, const std::vector<double>& wavelengths_m);

std::vector<uint8_t> cca_preview_rgb8(const CodedAperture& cca, int cell_pixels, int& width, int& height);

}  // namespace ccadepth
