#pragma once

#include <vector>

#include "ccadepth/array.hpp"
#include "ccadepth/config.hpp"
#include "ccadepth/optics.hpp"

namespace ccadepth {

// All-in-focus scene radiance, H x W x L, band-major storage.
struct SpectralCube {
    int h = 0, w = 0, l = 0;
    std::vector<double> values;       // (l, h, w)
    std::vector<double> wavelengths;  // meters

    SpectralCube() = default;
    SpectralCube(int h, int w, int l) : h(h), w(w), l(l), values(size_t(l) * h * w, 0.0) {}
    double& at(int band, int y, int x) { return values[(size_t(band) * h + y) * w + x]; }
    double at(int band, int y, int x) const { return values[(size_t(band) * h + y) * w + x]; }
    double* band(int b) { return values.data() + size_t(b) * h * w; }
    const double* band(int b) const { return values.data() + size_t(b) * h * w; }
};

using DepthMap = RealGrid;  // meters

// Per-pixel assignment to discrete depth planes; exactly one mask is set at
// each pixel.
struct DepthLayers {
    int planes = 0;
    std::vector<RealGrid> masks;  // J binary H x W maps
    Grid<int> labels;             // H x W indices into depth_planes
};

struct OcclusionMasks {
    std::vector<RealGrid> masks;  // J maps, pixel-wise sum 1
};

// 3-channel sensor image, channel order R, G, B.
struct CodedImage {
    int h = 0, w = 0;
    std::vector<double> values;  // (3, h, w)

    CodedImage() = default;
    CodedImage(int h, int w) : h(h), w(w), values(size_t(3) * h * w, 0.0) {}
    double& at(int c, int y, int x) { return values[(size_t(c) * h + y) * w + x]; }
    double at(int c, int y, int x) const { return values[(size_t(c) * h + y) * w + x]; }
    double* channel(int c) { return values.data() + size_t(c) * h * w; }
    const double* channel(int c) const { return values.data() + size_t(c) * h * w; }
};

// 3 x L sensor spectral response, rows R, G, B, values in [0,1].
struct SensorResponse {
    int l = 0;
    std::vector<double> rows;  // (3, l)
    double at(int c, int band) const { return rows[size_t(c) * l + band]; }
};

// Gaussian R/G/B curves centered 610/540/470 nm, 50 nm FWHM, peak 1.
SensorResponse default_sensor_response(const std::vector<double>& wavelengths_m);
SensorResponse load_sensor_response(const std::filesystem::path& path,
                                    const std::vector<double>& wavelengths_m);

// Band spacing used as the Riemann step of the spectral integral.
double band_spacing(const std::vector<double>& wavelengths_m);

// Nearest plane in inverse depth; ties go to the nearer (smaller z) plane.
// Out-of-range depths clamp to the end planes.
DepthLayers discretize_depth(const DepthMap& dm, const OpticalConfig& cfg);

// Soft per-layer visibility: binary masks blurred by the unit-normalized
// wavelength-mean kernel of their plane, composited near to far, then
// renormalized to a pixel-wise partition of unity. Pixels with no coverage
// fall back to uniform 1/J.
OcclusionMasks occlusion_masks(const DepthLayers& layers, const PsfStack& stack);

// Depth-dependent layered image formation for one cube:
// out_band = sum_j (band * PSF_{j,band}) .* M_j, "same"-size convolution with
// edge-replicate padding. FFT path.
SpectralCube render_coded_spectral(const SpectralCube& img, const DepthLayers& layers,
                                   const OcclusionMasks& masks, const PsfStack& stack);

// RGB integration: out_c = sum_band in_band * R_c(band) * dlambda.
CodedImage sensor_integrate(const SpectralCube& img, const SensorResponse& resp);

// Forward render with everything the backward pass needs retained.
struct RenderTape {
    int h = 0, w = 0, planes = 0, bands = 0, crop = 0;
    SensorResponse resp;
    std::vector<RealGrid> conv;            // (J, L) convolved bands, H x W
    OcclusionMasks masks;
    // occlusion tape
    std::vector<RealGrid> blurred;         // b_j
    std::vector<RealGrid> visibility;      // vis before each layer (near-to-far order)
    std::vector<int> near_to_far;          // plane indices sorted nearest first
    RealGrid mask_sum;                     // pre-normalization pixel sums
    std::vector<double> mean_kernel;       // (J, K, K) wavelength means
    std::vector<double> mean_kernel_sum;   // per plane
    const SpectralCube* cube = nullptr;    // borrowed
    const DepthLayers* layers = nullptr;   // borrowed
};

CodedImage render_forward(const SpectralCube& img, const DepthLayers& layers, const PsfStack& stack,
                          const SensorResponse& resp, RenderTape* tape);

// Reverse pass: dL/dcoded -> dL/dkernels (PsfStack::kernels layout), including
// the path through the occlusion masks.
std::vector<double> render_backward(const RenderTape& tape, const CodedImage& dcoded);

// Convenience composition used by the CLI and tests: PSF stack from the CCA,
// then discretize -> masks -> render -> integrate.
CodedImage render_pipeline(const SpectralCube& img, const DepthMap& dm, const CodedAperture& cca,
                           const OpticalConfig& cfg, const SensorResponse& resp);

// "Same"-size 2-D convolution with edge-replicate padding (FFT path), exposed
// for reuse and testing. kernel is K x K with centered origin.
RealGrid conv2_same_replicate(const RealGrid& img, const double* kernel, int k);

}  // namespace ccadepth
