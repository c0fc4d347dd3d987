#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ccadepth/config.hpp"
#include "ccadepth/optics.hpp"
#include "ccadepth/render.hpp"

namespace ccadepth {

// SDC1 spectral-depth container: header (H, W, L, flags), wavelengths as
// binary64, cube as binary32 band-major, optional binary32 depth plane.
void write_sdc(const SpectralCube& cube, const DepthMap* depth, const std::filesystem::path& path);
struct SdcContents {
    SpectralCube cube;
    std::optional<DepthMap> depth;
};
SdcContents read_sdc(const std::filesystem::path& path);

enum class SceneTexture { smooth_noise, checker, mixed };

// Synthetic desk-scale scene: fronto-parallel textured planes at depths drawn
// in [z_min, z_max], band spectra formed as convex mixtures of four fixed
// endmember curves.
struct SceneSpec {
    uint64_t seed = 0;
    int width = 64, height = 64;
    int planes = 3;
    double z_min = 0.4, z_max = 1.6;
    SceneTexture texture = SceneTexture::mixed;
    double occluder_probability = 0.7;

    void validate(const OpticalConfig& cfg) const;
    static SceneSpec from_kv(const KeyValueFile& kv, const OpticalConfig& cfg);
};

struct Scene {
    SpectralCube cube;
    DepthMap depth;
    std::string name;
};

Scene generate_scene(const SceneSpec& spec, const OpticalConfig& cfg);

// The four endmember reflectance curves of the generator, sampled at the
// given wavelengths. Synthetic smooth curves, not measured data.
std::vector<double> generator_endmembers(const std::vector<double>& wavelengths_m);

using Dataset = std::vector<Scene>;

// Reads every *.sdc in the directory, sorted by filename.
Dataset load_dataset(const std::filesystem::path& dir);

// Generates `count` scenes with per-scene seeds derived from `seed`.
Dataset generate_dataset(const SceneSpec& spec, const OpticalConfig& cfg, int count, uint64_t seed);

// Measured-PSF ingestion: PSF1 file whose (J, L, K) must match the config.
// Kernels are floored at zero; kernels whose sum exceeds 1 + 1e-6 are
// rescaled to sum 1 (physical bound) with a warning recorded. Energies are
// recomputed from the kernels.
PsfStack load_measured_psfs(const std::filesystem::path& path, const OpticalConfig& cfg,
                            std::vector<std::string>* warnings = nullptr);

}  // namespace ccadepth
