#include "ccadepth/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "ccadepth/rng.hpp"
#include "ccadepth/serialize.hpp"

namespace ccadepth {

void write_sdc(const SpectralCube& cube, const DepthMap* depth, const std::filesystem::path& path) {
    if (cube.h < 1 || cube.w < 1 || cube.l < 1) throw DomainError("write_sdc: empty cube");
    if (int(cube.wavelengths.size()) != cube.l) throw ShapeError("write_sdc: wavelength count mismatch");
    if (depth && (depth->rows() != cube.h || depth->cols() != cube.w))
        throw ShapeError("write_sdc: depth plane size mismatch");
    auto os = open_output(path);
    put_magic(os, "SDC1");
    put_u32(os, uint32_t(cube.h));
    put_u32(os, uint32_t(cube.w));
    put_u32(os, uint32_t(cube.l));
    put_u32(os, depth ? 1u : 0u);
    for (double w : cube.wavelengths) put_f64(os, w);
    for (double v : cube.values) put_f32(os, float(v));
    if (depth)
        for (size_t i = 0; i < depth->size(); ++i) put_f32(os, float((*depth)[i]));
    if (!os) throw IoError("short write to " + path.string());
}

SdcContents read_sdc(const std::filesystem::path& path) {
    auto is = open_input(path);
    expect_magic(is, "SDC1", "spectral-depth container");
    const uint32_t h = get_u32(is, "SDC1 height");
    const uint32_t w = get_u32(is, "SDC1 width");
    const uint32_t l = get_u32(is, "SDC1 band count");
    const uint32_t flags = get_u32(is, "SDC1 flags");
    if (h < 1 || w < 1 || l < 1 || h > (1u << 20) || w > (1u << 20) || l > 4096)
        throw ParseError("SDC1 header dimensions out of range");
    if (flags > 1) throw ParseError("SDC1: unknown flag bits set");

    SdcContents out;
    out.cube = SpectralCube(int(h), int(w), int(l));
    out.cube.wavelengths.resize(l);
    for (uint32_t b = 0; b < l; ++b) {
        out.cube.wavelengths[b] = get_f64(is, "SDC1 wavelengths");
        if (b > 0 && out.cube.wavelengths[b] <= out.cube.wavelengths[b - 1])
            throw ParseError("SDC1 wavelengths are not strictly increasing");
    }
    for (size_t i = 0; i < out.cube.values.size(); ++i) {
        float v = get_f32(is, "cube payload");
        out.cube.values[i] = double(v);
    }
    if (flags & 1) {
        DepthMap d(int(h), int(w), 0.0);
        for (size_t i = 0; i < d.size(); ++i) d[i] = double(get_f32(is, "depth payload"));
        out.depth = std::move(d);
    }
    expect_eof(is, "SDC1 payload");
    return out;
}

void SceneSpec::validate(const OpticalConfig& cfg) const {
    if (width < 8 || height < 8) throw DomainError("SceneSpec: scenes must be at least 8x8");
    if (planes < 1 || planes > cfg.planes())
        throw DomainError("SceneSpec: plane count must be in [1, J]");
    if (!(z_min < z_max)) throw DomainError("SceneSpec: need z_min < z_max");
    if (z_min < cfg.min_depth() - 1e-12 || z_max > cfg.max_depth() + 1e-12)
        throw DomainError("SceneSpec: depth range must lie within the configured depth planes");
    if (occluder_probability < 0.0 || occluder_probability > 1.0)
        throw DomainError("SceneSpec: occluder probability must be in [0,1]");
}

SceneSpec SceneSpec::from_kv(const KeyValueFile& kv, const OpticalConfig& cfg) {
    SceneSpec spec;
    spec.seed = uint64_t(kv.get_int("scene_seed", 0));
    spec.width = int(kv.get_int("scene_width", 64));
    spec.height = int(kv.get_int("scene_height", 64));
    spec.planes = int(kv.get_int("scene_planes", 3));
    spec.z_min = kv.get_double("scene_z_min", cfg.min_depth());
    spec.z_max = kv.get_double("scene_z_max", cfg.max_depth());
    spec.occluder_probability = kv.get_double("occluder_probability", 0.7);
    const std::string tex = kv.get_string("scene_texture", "mixed");
    if (tex == "smooth-noise")
        spec.texture = SceneTexture::smooth_noise;
    else if (tex == "checker")
        spec.texture = SceneTexture::checker;
    else if (tex == "mixed")
        spec.texture = SceneTexture::mixed;
    else
        throw ParseError("scene_texture must be smooth-noise, checker or mixed");
    spec.validate(cfg);
    return spec;
}

std::vector<double> generator_endmembers(const std::vector<double>& wavelengths_m) {
    const int l = int(wavelengths_m.size());
    std::vector<double> e(size_t(4) * l);
    for (int b = 0; b < l; ++b) {
        const double nm = wavelengths_m[b] * 1e9;
        e[size_t(0) * l + b] = 0.15 + 0.75 / (1.0 + std::exp(-(nm - 580.0) / 20.0));          // warm
        e[size_t(1) * l + b] = 0.10 + 0.70 * std::exp(-(nm - 540.0) * (nm - 540.0) / 4050.0);  // green
        e[size_t(2) * l + b] = 0.10 + 0.70 * std::exp(-(nm - 460.0) * (nm - 460.0) / 3200.0);  // blue
        e[size_t(3) * l + b] = 0.60;                                                           // neutral
    }
    return e;
}

namespace {

// Low-frequency field: a coarse random grid bilinearly upsampled.
RealGrid smooth_field(Rng& rng, int h, int w, int coarse, double lo, double hi) {
    const int ch = coarse + 1, cw = coarse + 1;
    std::vector<double> grid(size_t(ch) * cw);
    for (double& v : grid) v = rng.uniform(lo, hi);
    RealGrid out(h, w);
    for (int y = 0; y < h; ++y) {
        const double fy = double(y) / double(h) * coarse;
        const int y0 = int(fy);
        const double ty = fy - y0;
        for (int x = 0; x < w; ++x) {
            const double fx = double(x) / double(w) * coarse;
            const int x0 = int(fx);
            const double tx = fx - x0;
            const double a = grid[size_t(y0) * cw + x0], b = grid[size_t(y0) * cw + x0 + 1];
            const double c = grid[size_t(y0 + 1) * cw + x0], d = grid[size_t(y0 + 1) * cw + x0 + 1];
            out(y, x) = a * (1 - ty) * (1 - tx) + b * (1 - ty) * tx + c * ty * (1 - tx) + d * ty * tx;
        }
    }
    return out;
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, const OpticalConfig& cfg) {
    spec.validate(cfg);
    Rng rng(spec.seed);
    const int h = spec.height, w = spec.width;
    const int l = cfg.bands();

    // Distinct plane depths, uniform in inverse depth, farthest first.
    std::vector<double> depths;
    const double ia = 1.0 / spec.z_max, ib = 1.0 / spec.z_min;
    while (int(depths.size()) < spec.planes) {
        const double z = 1.0 / rng.uniform(ia, ib);
        bool ok = true;
        for (double zd : depths)
            if (std::abs(1.0 / zd - 1.0 / z) < 0.02 * (ib - ia)) ok = false;
        if (ok) depths.push_back(z);
    }
    std::sort(depths.begin(), depths.end(), std::greater<>());

    DepthMap depth(h, w, depths[0]);
    Grid<int> region(h, w, 0);
    for (int k = 1; k < spec.planes; ++k) {
        if (rng.uniform() < spec.occluder_probability) {
            // compact rectangle
            const int rw = int(rng.uniform(0.25, 0.7) * w);
            const int rh = int(rng.uniform(0.25, 0.7) * h);
            const int cx = int(rng.uniform(0.0, double(w - 1)));
            const int cy = int(rng.uniform(0.0, double(h - 1)));
            for (int y = std::max(0, cy - rh / 2); y < std::min(h, cy + rh / 2 + 1); ++y)
                for (int x = std::max(0, cx - rw / 2); x < std::min(w, cx + rw / 2 + 1); ++x) {
                    depth(y, x) = depths[k];
                    region(y, x) = k;
                }
        } else {
            // half-plane split
            const double theta = rng.uniform(0.0, 6.283185307179586);
            const double cx = rng.uniform(0.3, 0.7) * w, cy = rng.uniform(0.3, 0.7) * h;
            const double nx = std::cos(theta), ny = std::sin(theta);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if ((x - cx) * nx + (y - cy) * ny > 0.0) {
                        depth(y, x) = depths[k];
                        region(y, x) = k;
                    }
        }
    }

    // Convex endmember abundances from smooth fields.
    std::vector<RealGrid> abundance;
    for (int e = 0; e < 4; ++e) abundance.push_back(smooth_field(rng, h, w, 4, 0.05, 1.0));

    bool use_checker = spec.texture == SceneTexture::checker;
    if (spec.texture == SceneTexture::mixed) use_checker = (rng.next() & 1) != 0;

    RealGrid brightness = smooth_field(rng, h, w, 6, 0.35, 1.0);
    {
        // fine-grained octave so every surface carries defocus-measurable
        // detail; pure low-frequency shading is blind to blur
        const RealGrid detail = smooth_field(rng, h, w, std::max(8, w / 3), 0.45, 1.0);
        for (size_t i = 0; i < brightness.size(); ++i) brightness[i] *= detail[i];
    }
    if (use_checker) {
        // per-plane checker period and phase
        std::vector<int> period(spec.planes), phase(spec.planes);
        for (int k = 0; k < spec.planes; ++k) {
            period[k] = 4 + int(rng.below(13));
            phase[k] = int(rng.below(uint64_t(period[k] * 2)));
        }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int k = region(y, x);
                const int c = ((x + phase[k]) / period[k] + (y + phase[k]) / period[k]) & 1;
                brightness(y, x) *= c ? 1.0 : 0.35;
            }
    }
    // per-plane gain so planes are photometrically distinct
    std::vector<double> gain(spec.planes);
    for (double& g : gain) g = rng.uniform(0.6, 1.0);

    const std::vector<double> endmembers = generator_endmembers(cfg.wavelengths);
    Scene scene;
    scene.cube = SpectralCube(h, w, l);
    scene.cube.wavelengths = cfg.wavelengths;
    scene.depth = std::move(depth);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double asum = 0.0;
            double a[4];
            for (int e = 0; e < 4; ++e) {
                a[e] = abundance[e](y, x);
                asum += a[e];
            }
            const double scale = brightness(y, x) * gain[region(y, x)] / asum;
            for (int b = 0; b < l; ++b) {
                double v = 0.0;
                for (int e = 0; e < 4; ++e) v += a[e] * endmembers[size_t(e) * l + b];
                scene.cube.at(b, y, x) = std::clamp(v * scale, 0.0, 1.0);
            }
        }
    return scene;
}

Dataset generate_dataset(const SceneSpec& spec, const OpticalConfig& cfg, int count, uint64_t seed) {
    Dataset out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        SceneSpec s = spec;
        // splitmix64 step decorrelates per-scene seeds
        uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (uint64_t(i) + 1);
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        s.seed = x ^ (x >> 31);
        Scene scene = generate_scene(s, cfg);
        char name[32];
        std::snprintf(name, sizeof name, "scene_%05d", i);
        scene.name = name;
        out.push_back(std::move(scene));
    }
    return out;
}

Dataset load_dataset(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".sdc") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .sdc files in " + dir.string());
    Dataset out;
    for (const auto& f : files) {
        SdcContents c = read_sdc(f);
        if (!c.depth) throw ParseError("scene " + f.string() + " has no depth plane");
        Scene s;
        s.cube = std::move(c.cube);
        s.depth = std::move(*c.depth);
        s.name = f.stem().string();
        out.push_back(std::move(s));
    }
    return out;
}

PsfStack load_measured_psfs(const std::filesystem::path& path, const OpticalConfig& cfg,
                            std::vector<std::string>* warnings) {
    PsfStack stack = read_psf1(path);
    if (stack.planes != cfg.planes() || stack.bands != cfg.bands() || stack.crop != cfg.psf_crop) {
        throw ConsistencyError("measured PSF stack mismatch: expected J=" + std::to_string(cfg.planes()) +
                               " L=" + std::to_string(cfg.bands()) + " K=" + std::to_string(cfg.psf_crop) +
                               ", found J=" + std::to_string(stack.planes) +
                               " L=" + std::to_string(stack.bands) + " K=" + std::to_string(stack.crop));
    }
    const int kk = stack.crop * stack.crop;
    for (int j = 0; j < stack.planes; ++j)
        for (int band = 0; band < stack.bands; ++band) {
            double* k = stack.kernel(j, band);
            double sum = 0.0;
            for (int i = 0; i < kk; ++i) {
                if (k[i] < 0.0) k[i] = 0.0;
                sum += k[i];
            }
            if (sum > 1.0 + 1e-6) {
                for (int i = 0; i < kk; ++i) k[i] /= sum;
                if (warnings)
                    warnings->push_back("measured kernel (j=" + std::to_string(j) +
                                        ", band=" + std::to_string(band) + ") had sum " +
                                        std::to_string(sum) + "; rescaled to 1");
                sum = 1.0;
            }
            stack.energy(j, band) = sum;
        }
    return stack;
}

}  // namespace ccadepth
