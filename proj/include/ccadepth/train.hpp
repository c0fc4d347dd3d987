#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ccadepth/cca.hpp"
#include "ccadepth/config.hpp"
#include "ccadepth/data.hpp"
#include "ccadepth/decoder.hpp"
#include "ccadepth/losses.hpp"
#include "ccadepth/optics.hpp"

namespace ccadepth {

enum class TrainMode { vanilla, fixed_bca, learned_bca, fixed_cca, learned_cca };

TrainMode train_mode_from_string(const std::string& s);
std::string to_string(TrainMode mode);

struct TrainConfig {
    double lr_optics = 5e-2;
    double lr_decoder = 5e-4;
    double beta1 = 0.99;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int batch_size = 8;   // desk default; the reference schedule uses 32
    int epochs = 30;
    uint64_t seed = 1;
    TrainMode mode = TrainMode::learned_cca;
    LossWeights loss_weights;
    int cca_cells = 8;    // N
    int threads = 0;      // 0 = pick from hardware, numerics are unaffected

    void validate() const;
    static TrainConfig from_kv(const KeyValueFile& kv);
    void to_kv(KeyValueFile& kv) const;
};

// Bias-corrected Adam over one flat tensor.
struct AdamState {
    std::vector<double> m, v;
    uint64_t step = 0;
};

void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state, double lr,
               double beta1, double beta2, double epsilon);

struct Checkpoint {
    CodedAperture cca;
    DecoderParams decoder;
    std::vector<AdamState> adam_decoder;  // one per decoder tensor (kernels then biases)
    AdamState adam_optics;
    uint64_t epoch = 0;
    std::array<uint64_t, 4> rng_state{};
    TrainMode mode = TrainMode::learned_cca;
};

void write_ckp1(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_ckp1(const std::filesystem::path& path);

struct EpochLog {
    uint64_t epoch = 0;
    double loss = 0.0;
    double loss_grad = 0.0, loss_normal = 0.0, loss_smooth = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> log;
    double initial_loss = 0.0;  // epoch-mean loss of the first epoch
    double final_loss = 0.0;
};

// Joint end-to-end loop: render through the mode's aperture, decode, loss,
// Adam on decoder (lr_decoder) and on the CCA weights (lr_optics) with the
// manufacturability projection after every optics update. Deterministic for a
// fixed config and dataset. Throws NanAbortError (after writing a diagnostic
// dump next to dump_dir) on a non-finite loss.
TrainResult train_e2e(const Dataset& dataset, const TrainConfig& cfg, const OpticalConfig& opt_cfg,
                      const std::optional<Checkpoint>& resume = std::nullopt,
                      const std::filesystem::path& dump_dir = ".",
                      const std::function<void(const EpochLog&)>& on_epoch = nullptr);

// Renders each scene through the checkpoint aperture, decodes, and averages
// the metrics over scenes.
struct EvalResult {
    MetricsReport aggregate;
    std::vector<MetricsReport> per_scene;
};
EvalResult evaluate(const Checkpoint& ckpt, const Dataset& dataset, const OpticalConfig& opt_cfg);

struct GradCheckReport {
    double max_rel_error_weights = 0.0;
    double max_rel_error_decoder = 0.0;
    int checked_weights = 0;
    int checked_decoder_params = 0;
    double max_rel_error() const {
        return max_rel_error_weights > max_rel_error_decoder ? max_rel_error_weights
                                                             : max_rel_error_decoder;
    }
};

// Central finite differences of the total loss against the analytic gradients
// for every CCA weight and a seeded sample of decoder parameters. The default
// step keeps the stencil inside one smooth piece of the rectifier network.
GradCheckReport gradcheck(const OpticalConfig& opt_cfg, const CodedAperture& cca,
                          const DecoderParams& decoder, const Scene& scene, const LossWeights& weights,
                          double step = 1e-6, int decoder_samples = 48, uint64_t seed = 7);

// Canonical tiny gradient-check setup: N=2, R=2 low/high-pass primaries,
// L=3, J=2, 32x32 two-plane scene, freshly initialized decoder.
struct GradcheckSetup {
    OpticalConfig cfg;
    CodedAperture cca;
    DecoderParams decoder;
    Scene scene;
};
GradcheckSetup canonical_gradcheck_setup();

// Decoder-only fine-tuning against a measured PSF stack; the aperture and the
// stack stay frozen.
TrainResult finetune_measured(const Checkpoint& start, const PsfStack& measured, const Dataset& dataset,
                              const TrainConfig& base_cfg, const OpticalConfig& opt_cfg, int epochs = 100,
                              double lr = 3e-5);

// Mode-dependent coded image used by both training and evaluation. `engine`
// may be null for modes with a frozen aperture when `stack` is supplied.
CodedImage coded_image_for_mode(TrainMode mode, const Scene& scene, const OpticalConfig& opt_cfg,
                                const PsfStack* stack, const SensorResponse& resp);

// Fixed decoder input normalization derived from the sensor response: the
// reciprocal of the mean white-scene channel level.
double decoder_input_scale(const SensorResponse& resp, const std::vector<double>& wavelengths_m);

}  // namespace ccadepth
