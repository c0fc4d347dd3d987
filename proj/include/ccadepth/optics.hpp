#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ccadepth/array.hpp"
#include "ccadepth/cca.hpp"
#include "ccadepth/config.hpp"

namespace ccadepth {

// Complex scalar field sampled on the simulation grid.
struct ComplexField {
    ComplexGrid values;
    double pitch = 0.0;       // meters per sample
    double wavelength = 0.0;  // meters
};

// J x L stack of nonnegative PSF kernels plus the fraction of open-aperture
// energy each kernel transmits and keeps inside its crop.
struct PsfStack {
    int planes = 0;  // J
    int bands = 0;   // L
    int crop = 0;    // K
    std::vector<double> kernels;   // (J, L, K, K), j-major
    std::vector<double> energies;  // (J, L)
    std::vector<double> wavelengths;  // meters
    std::vector<double> depths;       // meters
    uint64_t config_hash = 0;

    double* kernel(int j, int band) { return kernels.data() + ((size_t(j) * bands + band) * crop) * crop; }
    const double* kernel(int j, int band) const {
        return kernels.data() + ((size_t(j) * bands + band) * crop) * crop;
    }
    double& energy(int j, int band) { return energies[size_t(j) * bands + band]; }
    double energy(int j, int band) const { return energies[size_t(j) * bands + band]; }
};

// Spherical wave arriving at the lens from an on-axis point at distance z:
// exp[i (2 pi / lambda) (x^2 + y^2) / z], unit magnitude.
ComplexField spherical_wave(const OpticalConfig& cfg, double wavelength, double z);

// Thin-lens phase delay exp[-i (k / 2f) (x^2 + y^2)].
ComplexField lens_phase(const OpticalConfig& cfg, double wavelength);

// 1 strictly inside the aperture disk (center-of-sample rule), 0 outside.
RealGrid aperture_mask(const OpticalConfig& cfg);

// Field immediately after the lens and attached CCA: A * T * t * u_in.
ComplexField field_after_lens(const ComplexField& u_in, const ComplexField& lens, const RealGrid& aperture,
                              const RealGrid& transmittance_grid);

// Angular-spectrum propagation with the exact transfer function
// H = exp[i k z sqrt(1 - (lambda fx)^2 - (lambda fy)^2)]; evanescent
// frequencies (negative radicand) are zeroed.
ComplexField angular_spectrum_propagate(const ComplexField& u, double distance);

struct PsfResult {
    RealGrid kernel;  // K x K, sensor pixels
    double energy = 0.0;
    std::optional<std::string> warning;  // set when the crop misses > 1% of transmitted energy
};

// Sensor-plane PSF for one (wavelength, depth): |U_sen|^2 binned B x B into
// sensor pixels, cropped to the central K x K window and divided by the
// open-aperture energy, so an open in-focus aperture integrates to ~1.
PsfResult compute_psf(const OpticalConfig& cfg, const RealGrid& transmittance_grid, double wavelength,
                      double z);

// Cell index of each simulation sample, or -1 where the sample lies outside
// the CCA extent (clear). Cells are row-major i*n + j.
struct CellMap {
    int n = 0;
    Grid<int> cell;  // M x M
    static CellMap build(const OpticalConfig& cfg, int n, double cell_size = 0.0);
};

// Per-cell propagated sensor fields, cropped to the K*B x K*B PSF window.
// Superposition over cells (plus the clear-margin field) reproduces the
// open-aperture propagation, which makes the PSF an explicit quadratic in the
// CCA weights.
struct BasisFieldSet {
    int n = 0;
    int crop = 0;               // K, sensor pixels
    int bin = 0;                // B, samples per pixel
    int window = 0;             // K*B samples per side
    double wavelength = 0.0;
    double depth = 0.0;
    std::vector<ComplexGrid> fields;  // n*n cropped fields
    ComplexGrid clear_field;          // contribution of samples outside the CCA extent
    double open_energy = 0.0;         // total open-aperture energy (normalization)
    uint64_t config_hash = 0;
};

BasisFieldSet basis_fields(const OpticalConfig& cfg, const CellMap& map, double wavelength, double z);

struct PsfGradients {
    RealGrid kernel;              // K x K, identical to the compute_psf path
    double energy = 0.0;
    std::vector<RealGrid> dkernel_dw;  // n*n*r entries of K x K each, d kernel / d w_ijr
};

// PSF and its exact gradient w.r.t. every CCA weight via
// d|U|^2 / dw_ijr = 2 * alpha_r * Re(conj(U) V_ij), binned and cropped
// identically to the forward path.
PsfGradients psf_and_gradient(const BasisFieldSet& basis, const CodedAperture& cca, int band);

// Forward-only PSF from a basis set (cheaper than psf_and_gradient).
PsfResult psf_from_basis(const BasisFieldSet& basis, const CodedAperture& cca, int band);

// Direct pipeline over all (depth, band) pairs.
PsfStack build_psf_stack(const OpticalConfig& cfg, const CodedAperture& cca,
                         std::vector<std::string>* warnings = nullptr);

// Precomputed basis sets for every (depth, band); the training loop rebuilds
// PSFs from weights each step through the quadratic form.
class PsfEngine {
  public:
    PsfEngine() = default;
    PsfEngine(const OpticalConfig& cfg, int cells, double cell_size = 0.0, int threads = 1);

    const OpticalConfig& config() const { return cfg_; }
    int cells() const { return map_.n; }

    PsfStack stack_from_weights(const CodedAperture& cca) const;

    // Sensor fields U_{j,band} cached by stack_from_weights_with_tape for the
    // backward pass.
    struct Tape {
        std::vector<ComplexGrid> sensor_fields;  // (J*L) cropped complex fields
    };
    PsfStack stack_from_weights_with_tape(const CodedAperture& cca, Tape& tape) const;

    // Accumulates dL/dw (n*n*r, layout matches CodedAperture::weights) from
    // upstream kernel gradients dL/dK laid out like PsfStack::kernels.
    std::vector<double> weight_grad(const CodedAperture& cca, const Tape& tape,
                                    const std::vector<double>& dkernels) const;

    const BasisFieldSet& basis(int j, int band) const { return basis_[size_t(j) * cfg_.bands() + band]; }

  private:
    OpticalConfig cfg_;
    CellMap map_;
    std::vector<BasisFieldSet> basis_;  // (J, L)
};

// PSF1 binary container.
void write_psf1(const PsfStack& stack, const std::filesystem::path& path);
PsfStack read_psf1(const std::filesystem::path& path);

}  // namespace ccadepth
