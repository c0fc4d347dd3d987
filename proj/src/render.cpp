#include "ccadepth/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ccadepth/fft.hpp"

namespace ccadepth {

namespace {

int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

// Replicate-pad img by m on every side, zero-extend to (ph, pw), FFT.
ComplexGrid fft_pad_replicate(const double* img, int h, int w, int m, int ph, int pw) {
    ComplexGrid buf(ph, pw);
    for (int y = 0; y < h + 2 * m; ++y) {
        const int sy = std::clamp(y - m, 0, h - 1);
        for (int x = 0; x < w + 2 * m; ++x) {
            const int sx = std::clamp(x - m, 0, w - 1);
            buf(y, x) = img[size_t(sy) * w + sx];
        }
    }
    fft2(buf);
    return buf;
}

ComplexGrid fft_kernel(const double* kernel, int k, int ph, int pw) {
    ComplexGrid buf(ph, pw);
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) buf(y, x) = kernel[size_t(y) * k + x];
    fft2(buf);
    return buf;
}

// out(p) = full(p + 2m) of the circular convolution spectrum product.
RealGrid conv_extract(const ComplexGrid& f_img, const ComplexGrid& f_kernel, int h, int w, int m) {
    ComplexGrid prod(f_img.rows(), f_img.cols());
    for (size_t i = 0; i < prod.size(); ++i) prod[i] = f_img[i] * f_kernel[i];
    ifft2(prod);
    RealGrid out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out(y, x) = prod(y + 2 * m, x + 2 * m).real();
    return out;
}

// Adjoint of the "same"-size true convolution w.r.t. its kernel:
// dK(q) = sum_p g(p) * padded(p + 2m - q), i.e. the cross-correlation of g
// with the padded input, read flipped.
void corr_kernel_grad(const RealGrid& g, const ComplexGrid& f_pad, int k, double* dk_out) {
    ComplexGrid buf(f_pad.rows(), f_pad.cols());
    for (int y = 0; y < g.rows(); ++y)
        for (int x = 0; x < g.cols(); ++x) buf(y, x) = g(y, x);
    fft2(buf);
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = std::conj(buf[i]) * f_pad[i];
    ifft2(buf);
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) dk_out[size_t(y) * k + x] += buf(k - 1 - y, k - 1 - x).real();
}

constexpr double kDegenerateEps = 1e-12;

}  // namespace

SensorResponse default_sensor_response(const std::vector<double>& wavelengths_m) {
    constexpr double centers_nm[3] = {610.0, 540.0, 470.0};  // R, G, B
    const double sigma_nm = 50.0 / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    SensorResponse resp;
    resp.l = int(wavelengths_m.size());
    resp.rows.resize(size_t(3) * resp.l);
    for (int c = 0; c < 3; ++c)
        for (int b = 0; b < resp.l; ++b) {
            const double d = wavelengths_m[b] * 1e9 - centers_nm[c];
            resp.rows[size_t(c) * resp.l + b] = std::exp(-d * d / (2.0 * sigma_nm * sigma_nm));
        }
    return resp;
}

SensorResponse load_sensor_response(const std::filesystem::path& path,
                                    const std::vector<double>& wavelengths_m) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read sensor response: " + path.string());
    int l = 0;
    if (!(is >> l) || l != int(wavelengths_m.size()))
        throw ParseError("sensor response band count does not match the configuration", 1);
    std::vector<double> nm(l);
    for (double& v : nm)
        if (!(is >> v)) throw ParseError("sensor response: truncated wavelength row", 2);
    for (int b = 0; b < l; ++b)
        if (std::abs(nm[b] - wavelengths_m[b] * 1e9) > 0.5)
            throw ParseError("sensor response wavelengths disagree with the configuration", 2);
    SensorResponse resp;
    resp.l = l;
    resp.rows.resize(size_t(3) * l);
    for (int c = 0; c < 3; ++c)
        for (int b = 0; b < l; ++b)
            if (!(is >> resp.rows[size_t(c) * l + b]) || resp.rows[size_t(c) * l + b] < 0.0 ||
                resp.rows[size_t(c) * l + b] > 1.0)
                throw ParseError("sensor response: bad value in channel row", 3 + c);
    return resp;
}

double band_spacing(const std::vector<double>& wavelengths_m) {
    if (wavelengths_m.size() < 2) return 1.0;
    return (wavelengths_m.back() - wavelengths_m.front()) / double(wavelengths_m.size() - 1);
}

DepthLayers discretize_depth(const DepthMap& dm, const OpticalConfig& cfg) {
    const int planes = cfg.planes();
    const double zmin = cfg.min_depth(), zmax = cfg.max_depth();
    DepthLayers layers;
    layers.planes = planes;
    layers.labels = Grid<int>(dm.rows(), dm.cols());
    layers.masks.assign(planes, RealGrid(dm.rows(), dm.cols()));
    for (int y = 0; y < dm.rows(); ++y)
        for (int x = 0; x < dm.cols(); ++x) {
            const double z = std::clamp(dm(y, x), zmin, zmax);
            const double inv = 1.0 / z;
            int best = 0;
            double best_dist = std::abs(inv - 1.0 / cfg.depth_planes[0]);
            for (int j = 1; j < planes; ++j) {
                const double d = std::abs(inv - 1.0 / cfg.depth_planes[j]);
                // ties go to the nearer plane (smaller z)
                if (d < best_dist || (d == best_dist && cfg.depth_planes[j] < cfg.depth_planes[best])) {
                    best = j;
                    best_dist = d;
                }
            }
            layers.labels(y, x) = best;
            layers.masks[best](y, x) = 1.0;
        }
    return layers;
}

namespace {

// Forward occlusion-mask computation; fills the tape fields when given one.
OcclusionMasks masks_impl(const DepthLayers& layers, const PsfStack& stack, RenderTape* tape) {
    if (layers.planes != stack.planes)
        throw ShapeError("occlusion_masks: layer count disagrees with the PSF stack");
    const int planes = stack.planes, bands = stack.bands, k = stack.crop;
    const int h = layers.labels.rows(), w = layers.labels.cols();
    const int m = (k - 1) / 2;
    const int ph = next_pow2(h + 2 * m), pw = next_pow2(w + 2 * m);

    // Unit-energy wavelength-mean kernel per plane; geometry only, so filter
    // attenuation must not weaken the occlusion.
    std::vector<double> mean(size_t(planes) * k * k, 0.0);
    std::vector<double> mean_sum(planes, 0.0);
    for (int j = 0; j < planes; ++j) {
        double* pj = mean.data() + size_t(j) * k * k;
        for (int band = 0; band < bands; ++band) {
            const double* kb = stack.kernel(j, band);
            for (int i = 0; i < k * k; ++i) pj[i] += kb[i];
        }
        for (int i = 0; i < k * k; ++i) pj[i] /= double(bands);
        for (int i = 0; i < k * k; ++i) mean_sum[j] += pj[i];
    }

    std::vector<RealGrid> blurred(planes);
    for (int j = 0; j < planes; ++j) {
        if (mean_sum[j] > 1e-300) {
            std::vector<double> unit(size_t(k) * k);
            const double* pj = mean.data() + size_t(j) * k * k;
            for (int i = 0; i < k * k; ++i) unit[i] = pj[i] / mean_sum[j];
            ComplexGrid f_a = fft_pad_replicate(layers.masks[j].data(), h, w, m, ph, pw);
            ComplexGrid f_k = fft_kernel(unit.data(), k, ph, pw);
            blurred[j] = conv_extract(f_a, f_k, h, w, m);
            for (size_t i = 0; i < blurred[j].size(); ++i) blurred[j][i] = std::clamp(blurred[j][i], 0.0, 1.0);
        } else {
            blurred[j] = layers.masks[j];  // fully dark plane: geometry as-is
        }
    }

    // Composite near to far: each layer sees the visibility the nearer layers
    // left over, then everything is renormalized to a pixel-wise partition.
    std::vector<int> near_to_far(planes);
    for (int j = 0; j < planes; ++j) near_to_far[j] = j;
    std::sort(near_to_far.begin(), near_to_far.end(),
              [&](int a, int b) { return stack.depths[a] < stack.depths[b]; });

    std::vector<RealGrid> raw(planes);
    std::vector<RealGrid> visibility(planes);
    RealGrid vis(h, w, 1.0);
    for (int t = 0; t < planes; ++t) {
        const int j = near_to_far[t];
        visibility[t] = vis;
        raw[j] = RealGrid(h, w);
        for (size_t i = 0; i < vis.size(); ++i) raw[j][i] = vis[i] * blurred[j][i];
        for (size_t i = 0; i < vis.size(); ++i) vis[i] *= 1.0 - blurred[j][i];
    }

    RealGrid total(h, w);
    for (int j = 0; j < planes; ++j)
        for (size_t i = 0; i < total.size(); ++i) total[i] += raw[j][i];

    OcclusionMasks masks;
    masks.masks.assign(planes, RealGrid(h, w));
    for (size_t i = 0; i < total.size(); ++i) {
        if (total[i] < kDegenerateEps) {
            for (int j = 0; j < planes; ++j) masks.masks[j][i] = 1.0 / planes;
        } else {
            for (int j = 0; j < planes; ++j) masks.masks[j][i] = raw[j][i] / total[i];
        }
    }

    if (tape) {
        tape->blurred = std::move(blurred);
        tape->visibility = std::move(visibility);
        tape->near_to_far = std::move(near_to_far);
        tape->mask_sum = std::move(total);
        tape->mean_kernel = std::move(mean);
        tape->mean_kernel_sum = std::move(mean_sum);
        tape->masks = masks;
    }
    return masks;
}

}  // namespace

OcclusionMasks occlusion_masks(const DepthLayers& layers, const PsfStack& stack) {
    return masks_impl(layers, stack, nullptr);
}

RealGrid conv2_same_replicate(const RealGrid& img, const double* kernel, int k) {
    const int h = img.rows(), w = img.cols();
    const int m = (k - 1) / 2;
    const int ph = next_pow2(h + 2 * m), pw = next_pow2(w + 2 * m);
    ComplexGrid f_img = fft_pad_replicate(img.data(), h, w, m, ph, pw);
    ComplexGrid f_k = fft_kernel(kernel, k, ph, pw);
    return conv_extract(f_img, f_k, h, w, m);
}

SpectralCube render_coded_spectral(const SpectralCube& img, const DepthLayers& layers,
                                   const OcclusionMasks& masks, const PsfStack& stack) {
    if (img.l != stack.bands) throw ShapeError("render: cube band count disagrees with the PSF stack");
    if (layers.planes != stack.planes || int(masks.masks.size()) != stack.planes)
        throw ShapeError("render: layer count disagrees with the PSF stack");
    if (layers.labels.rows() != img.h || layers.labels.cols() != img.w)
        throw ShapeError("render: layer maps do not match the cube size");

    const int h = img.h, w = img.w, k = stack.crop, m = (k - 1) / 2;
    const int ph = next_pow2(h + 2 * m), pw = next_pow2(w + 2 * m);
    SpectralCube out(h, w, img.l);
    out.wavelengths = img.wavelengths;
    for (int band = 0; band < img.l; ++band) {
        ComplexGrid f_img = fft_pad_replicate(img.band(band), h, w, m, ph, pw);
        RealGrid acc(h, w);
        for (int j = 0; j < stack.planes; ++j) {
            ComplexGrid f_k = fft_kernel(stack.kernel(j, band), k, ph, pw);
            RealGrid conv = conv_extract(f_img, f_k, h, w, m);
            const RealGrid& mj = masks.masks[j];
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += conv[i] * mj[i];
        }
        double* dst = out.band(band);
        for (size_t i = 0; i < acc.size(); ++i) dst[i] = std::max(0.0, acc[i]);
    }
    return out;
}

CodedImage sensor_integrate(const SpectralCube& img, const SensorResponse& resp) {
    if (resp.l != img.l) throw ShapeError("sensor_integrate: response band count mismatch");
    const double dl = band_spacing(img.wavelengths);
    CodedImage out(img.h, img.w);
    for (int c = 0; c < 3; ++c) {
        double* dst = out.channel(c);
        for (int band = 0; band < img.l; ++band) {
            const double scale = resp.at(c, band) * dl;
            if (scale == 0.0) continue;
            const double* src = img.band(band);
            for (size_t i = 0; i < size_t(img.h) * img.w; ++i) dst[i] += scale * src[i];
        }
    }
    return out;
}

CodedImage render_forward(const SpectralCube& img, const DepthLayers& layers, const PsfStack& stack,
                          const SensorResponse& resp, RenderTape* tape) {
    if (img.l != stack.bands) throw ShapeError("render: cube band count disagrees with the PSF stack");
    if (layers.planes != stack.planes) throw ShapeError("render: layer count disagrees with the PSF stack");
    if (resp.l != img.l) throw ShapeError("render: response band count mismatch");

    const int h = img.h, w = img.w, k = stack.crop, m = (k - 1) / 2;
    const int ph = next_pow2(h + 2 * m), pw = next_pow2(w + 2 * m);

    RenderTape local;
    RenderTape& t = tape ? *tape : local;
    t.h = h;
    t.w = w;
    t.planes = stack.planes;
    t.bands = stack.bands;
    t.crop = k;
    t.resp = resp;
    t.cube = &img;
    t.layers = &layers;

    masks_impl(layers, stack, &t);

    const double dl = band_spacing(img.wavelengths);
    CodedImage coded(h, w);
    t.conv.assign(size_t(stack.planes) * stack.bands, RealGrid());
    for (int band = 0; band < img.l; ++band) {
        ComplexGrid f_img = fft_pad_replicate(img.band(band), h, w, m, ph, pw);
        RealGrid acc(h, w);
        for (int j = 0; j < stack.planes; ++j) {
            ComplexGrid f_k = fft_kernel(stack.kernel(j, band), k, ph, pw);
            RealGrid conv = conv_extract(f_img, f_k, h, w, m);
            const RealGrid& mj = t.masks.masks[j];
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += conv[i] * mj[i];
            t.conv[size_t(j) * stack.bands + band] = std::move(conv);
        }
        for (int c = 0; c < 3; ++c) {
            const double scale = resp.at(c, band) * dl;
            if (scale == 0.0) continue;
            double* dst = coded.channel(c);
            for (size_t i = 0; i < acc.size(); ++i) dst[i] += scale * std::max(0.0, acc[i]);
        }
    }
    return coded;
}

std::vector<double> render_backward(const RenderTape& tape, const CodedImage& dcoded) {
    const int h = tape.h, w = tape.w, planes = tape.planes, bands = tape.bands, k = tape.crop;
    const int m = (k - 1) / 2;
    const int ph = next_pow2(h + 2 * m), pw = next_pow2(w + 2 * m);
    const size_t npix = size_t(h) * w;
    const double dl = band_spacing(tape.cube->wavelengths);

    std::vector<double> dkernels(size_t(planes) * bands * k * k, 0.0);
    std::vector<RealGrid> dmask(planes, RealGrid(h, w));

    // Through the spectral integral and the per-band mask blend. The forward
    // clamped negative FFT noise to zero; those pixels carry no gradient.
    for (int band = 0; band < bands; ++band) {
        RealGrid dband(h, w);
        for (int c = 0; c < 3; ++c) {
            const double scale = tape.resp.at(c, band) * dl;
            if (scale == 0.0) continue;
            const double* src = dcoded.channel(c);
            for (size_t i = 0; i < npix; ++i) dband[i] += scale * src[i];
        }
        RealGrid sum(h, w);
        for (int j = 0; j < planes; ++j) {
            const RealGrid& conv = tape.conv[size_t(j) * bands + band];
            const RealGrid& mj = tape.masks.masks[j];
            for (size_t i = 0; i < npix; ++i) sum[i] += conv[i] * mj[i];
        }
        for (size_t i = 0; i < npix; ++i)
            if (sum[i] < 0.0) dband[i] = 0.0;

        ComplexGrid f_img = fft_pad_replicate(tape.cube->band(band), h, w, m, ph, pw);
        RealGrid dconv(h, w);
        for (int j = 0; j < planes; ++j) {
            const RealGrid& conv = tape.conv[size_t(j) * bands + band];
            const RealGrid& mj = tape.masks.masks[j];
            for (size_t i = 0; i < npix; ++i) {
                dconv[i] = dband[i] * mj[i];
                dmask[j][i] += dband[i] * conv[i];
            }
            corr_kernel_grad(dconv, f_img, k, dkernels.data() + (size_t(j) * bands + band) * k * k);
        }
    }

    // Through the pixel-wise renormalization of the occlusion masks.
    std::vector<RealGrid> draw(planes, RealGrid(h, w));
    for (size_t i = 0; i < npix; ++i) {
        const double s = tape.mask_sum[i];
        if (s < kDegenerateEps) continue;  // uniform fallback: no dependence on the kernels
        double dot = 0.0;
        for (int j = 0; j < planes; ++j) dot += dmask[j][i] * tape.masks.masks[j][i];
        for (int j = 0; j < planes; ++j) draw[j][i] = (dmask[j][i] - dot) / s;
    }

    // Through the near-to-far compositing.
    std::vector<RealGrid> dblur(planes, RealGrid(h, w));
    RealGrid gvis(h, w);  // gradient w.r.t. the running visibility
    for (int t = planes - 1; t >= 0; --t) {
        const int j = tape.near_to_far[t];
        const RealGrid& vis = tape.visibility[t];
        const RealGrid& b = tape.blurred[j];
        for (size_t i = 0; i < npix; ++i) {
            const double gm = draw[j][i];
            dblur[j][i] = vis[i] * gm - vis[i] * gvis[i];
            gvis[i] = b[i] * gm + (1.0 - b[i]) * gvis[i];
        }
    }

    // Through the mask blur convolution and the kernel unit-normalization,
    // then spread over the wavelength mean.
    for (int j = 0; j < planes; ++j) {
        const double s = tape.mean_kernel_sum[j];
        if (s <= 1e-300) continue;  // delta fallback carried no kernel dependence
        // clamp of b to [0,1]: zero slope where saturated
        RealGrid db = dblur[j];
        for (size_t i = 0; i < npix; ++i)
            if (tape.blurred[j][i] <= 0.0 || tape.blurred[j][i] >= 1.0) db[i] = 0.0;
        ComplexGrid f_a = fft_pad_replicate(tape.layers->masks[j].data(), h, w, m, ph, pw);
        std::vector<double> dunit(size_t(k) * k, 0.0);
        corr_kernel_grad(db, f_a, k, dunit.data());

        const double* pj = tape.mean_kernel.data() + size_t(j) * k * k;
        double dot = 0.0;
        for (int i = 0; i < k * k; ++i) dot += dunit[i] * pj[i] / s;
        for (int band = 0; band < bands; ++band) {
            double* dst = dkernels.data() + (size_t(j) * bands + band) * k * k;
            for (int i = 0; i < k * k; ++i) dst[i] += (dunit[i] - dot) / s / double(bands);
        }
    }
    return dkernels;
}

CodedImage render_pipeline(const SpectralCube& img, const DepthMap& dm, const CodedAperture& cca,
                           const OpticalConfig& cfg, const SensorResponse& resp) {
    const PsfStack stack = build_psf_stack(cfg, cca);
    const DepthLayers layers = discretize_depth(dm, cfg);
    return render_forward(img, layers, stack, resp, nullptr);
}

}  // namespace ccadepth
