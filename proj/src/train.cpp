#include "ccadepth/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <thread>

#include "ccadepth/rng.hpp"
#include "ccadepth/serialize.hpp"

namespace ccadepth {

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "vanilla") return TrainMode::vanilla;
    if (s == "fixed_bca") return TrainMode::fixed_bca;
    if (s == "learned_bca") return TrainMode::learned_bca;
    if (s == "fixed_cca") return TrainMode::fixed_cca;
    if (s == "learned_cca") return TrainMode::learned_cca;
    throw ParseError("unknown training mode '" + s + "'");
}

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::vanilla: return "vanilla";
        case TrainMode::fixed_bca: return "fixed_bca";
        case TrainMode::learned_bca: return "learned_bca";
        case TrainMode::fixed_cca: return "fixed_cca";
        case TrainMode::learned_cca: return "learned_cca";
    }
    return "?";
}

void TrainConfig::validate() const {
    // lr == 0 is allowed and freezes the corresponding parameters
    if (lr_optics < 0 || lr_decoder < 0) throw DomainError("learning rates must be nonnegative");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
        throw DomainError("Adam betas must lie in (0, 1)");
    if (epsilon <= 0) throw DomainError("Adam epsilon must be positive");
    if (batch_size < 1) throw DomainError("batch size must be >= 1");
    if (epochs < 0) throw DomainError("epoch count must be >= 0");
    if (cca_cells < 1 || cca_cells > 32) throw DomainError("cca_cells must lie in [1, 32]");
    loss_weights.validate();
}

TrainConfig TrainConfig::from_kv(const KeyValueFile& kv) {
    TrainConfig cfg;
    cfg.lr_optics = kv.get_double("lr_optics", cfg.lr_optics);
    cfg.lr_decoder = kv.get_double("lr_decoder", cfg.lr_decoder);
    cfg.beta1 = kv.get_double("beta1", cfg.beta1);
    cfg.beta2 = kv.get_double("beta2", cfg.beta2);
    cfg.epsilon = kv.get_double("epsilon", cfg.epsilon);
    cfg.batch_size = int(kv.get_int("batch_size", cfg.batch_size));
    cfg.epochs = int(kv.get_int("epochs", cfg.epochs));
    cfg.seed = uint64_t(kv.get_int("seed", long(cfg.seed)));
    cfg.mode = train_mode_from_string(kv.get_string("mode", to_string(cfg.mode)));
    cfg.loss_weights.alpha = kv.get_double("loss_alpha", cfg.loss_weights.alpha);
    cfg.loss_weights.mu = kv.get_double("loss_mu", cfg.loss_weights.mu);
    cfg.loss_weights.sigma = kv.get_double("loss_sigma", cfg.loss_weights.sigma);
    cfg.loss_weights.normal_printed_form = kv.get_int("normal_printed_form", 0) != 0;
    cfg.cca_cells = int(kv.get_int("cca_cells", cfg.cca_cells));
    cfg.threads = int(kv.get_int("threads", cfg.threads));
    cfg.validate();
    return cfg;
}

void TrainConfig::to_kv(KeyValueFile& kv) const {
    kv.set_double("lr_optics", lr_optics);
    kv.set_double("lr_decoder", lr_decoder);
    kv.set_double("beta1", beta1);
    kv.set_double("beta2", beta2);
    kv.set_double("epsilon", epsilon);
    kv.set_int("batch_size", batch_size);
    kv.set_int("epochs", epochs);
    kv.set_int("seed", long(seed));
    kv.set("mode", to_string(mode));
    kv.set_double("loss_alpha", loss_weights.alpha);
    kv.set_double("loss_mu", loss_weights.mu);
    kv.set_double("loss_sigma", loss_weights.sigma);
    kv.set_int("normal_printed_form", loss_weights.normal_printed_form ? 1 : 0);
    kv.set_int("cca_cells", cca_cells);
    kv.set_int("threads", threads);
}

void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state, double lr,
               double beta1, double beta2, double epsilon) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: state size mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(beta2, double(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + epsilon);
    }
}

double decoder_input_scale(const SensorResponse& resp, const std::vector<double>& wavelengths_m) {
    const double dl = band_spacing(wavelengths_m);
    double mean = 0.0;
    for (int c = 0; c < 3; ++c)
        for (int b = 0; b < resp.l; ++b) mean += resp.at(c, b) * dl;
    mean /= 3.0;
    return mean > 0.0 ? 1.0 / mean : 1.0;
}

CodedImage coded_image_for_mode(TrainMode mode, const Scene& scene, const OpticalConfig& opt_cfg,
                                const PsfStack* stack, const SensorResponse& resp) {
    if (mode == TrainMode::vanilla) return sensor_integrate(scene.cube, resp);
    if (!stack) throw ConsistencyError("coded_image_for_mode: this mode needs a PSF stack");
    const DepthLayers layers = discretize_depth(scene.depth, opt_cfg);
    return render_forward(scene.cube, layers, *stack, resp, nullptr);
}

namespace {

uint64_t subseed(uint64_t seed, uint64_t stream) {
    uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Primary filter bank for the trainer: the four standard curves when the
// band grid can support them, otherwise a two-filter low/high-pass pair so
// tiny test configurations (L < 4) stay trainable.
std::pair<std::vector<double>, int> trainer_primaries(const std::vector<double>& wavelengths_m) {
    if (wavelengths_m.size() >= 4) return {default_primaries(wavelengths_m), 4};
    const int l = int(wavelengths_m.size());
    std::vector<double> prim(size_t(2) * l);
    for (int b = 0; b < l; ++b) {
        const double nm = wavelengths_m[b] * 1e9;
        prim[b] = 0.15 + 0.75 / (1.0 + std::exp(-(nm - 560.0) / 25.0));
        prim[size_t(l) + b] = 0.15 + 0.75 / (1.0 + std::exp((nm - 540.0) / 25.0));
    }
    return {prim, 2};
}

CodedAperture initial_cca(const TrainConfig& cfg, const OpticalConfig& opt) {
    const uint64_t seed = subseed(cfg.seed, 2);
    switch (cfg.mode) {
        case TrainMode::vanilla: return open_aperture(opt.wavelengths);
        case TrainMode::fixed_bca: return random_binary_cca(seed, cfg.cca_cells, opt.wavelengths);
        case TrainMode::learned_bca: return continuous_binary_cca(seed, cfg.cca_cells, opt.wavelengths);
        case TrainMode::fixed_cca:
        case TrainMode::learned_cca: {
            auto [prim, r] = trainer_primaries(opt.wavelengths);
            return random_cca(seed, cfg.cca_cells, opt.wavelengths, prim, r);
        }
    }
    throw DomainError("unreachable mode");
}

bool mode_trains_optics(TrainMode m) {
    return m == TrainMode::learned_bca || m == TrainMode::learned_cca;
}
bool mode_uses_optics(TrainMode m) { return m != TrainMode::vanilla; }

struct SampleResult {
    double loss = 0.0;
    double lg = 0.0, ln = 0.0, ls = 0.0;
    DecoderGrads dec;
    std::vector<double> dkernels;
    bool finite = true;
};

// One scene through render -> decode -> loss -> adjoints.
void process_sample(const Scene& scene, const DepthLayers& layers, const CodedImage* precoded,
                    const PsfStack* stack, const SensorResponse& resp, const DecoderParams& decoder,
                    const LossWeights& lw, bool optics_grad, SampleResult& out) {
    RenderTape tape;
    CodedImage coded;
    const CodedImage* input = precoded;
    if (!precoded) {
        coded = render_forward(scene.cube, layers, *stack, resp, optics_grad ? &tape : nullptr);
        input = &coded;
    }
    DecoderCache cache;
    const DepthMap predicted = decoder_forward(decoder, *input, &cache);
    RealGrid d_pred;
    out.loss = total_loss(scene.depth, predicted, lw, &d_pred);
    out.lg = grad_loss(scene.depth, predicted);
    out.ln = normal_loss(scene.depth, predicted, lw.normal_printed_form);
    out.ls = smooth_loss(scene.depth, predicted);
    if (!std::isfinite(out.loss)) {
        out.finite = false;
        return;
    }
    out.dec = decoder_backward(decoder, cache, d_pred);
    if (optics_grad && !precoded) out.dkernels = render_backward(tape, out.dec.d_input);
}

struct FlatParams {
    // Decoder tensors exposed as flat vectors for Adam, kernels then biases.
    static int count(const DecoderParams& p) { return int(p.kernels.size() + p.biases.size()); }
    static std::vector<double>& tensor(DecoderParams& p, int t) {
        return t < int(p.kernels.size()) ? p.kernels[t].v : p.biases[t - p.kernels.size()].v;
    }
    static std::vector<double>& tensor(DecoderGrads& g, int t) {
        return t < int(g.kernels.size()) ? g.kernels[t].v : g.biases[t - g.kernels.size()].v;
    }
};

}  // namespace

TrainResult train_e2e(const Dataset& dataset, const TrainConfig& cfg, const OpticalConfig& opt_cfg,
                      const std::optional<Checkpoint>& resume, const std::filesystem::path& dump_dir,
                      const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (dataset.empty()) throw DomainError("train_e2e: dataset is empty");
    for (const auto& s : dataset)
        if (s.cube.l != opt_cfg.bands())
            throw ConsistencyError("train_e2e: scene band count disagrees with the configuration");

    const SensorResponse resp = default_sensor_response(opt_cfg.wavelengths);
    const double iscale = decoder_input_scale(resp, opt_cfg.wavelengths);

    Checkpoint ck;
    if (resume) {
        ck = *resume;
        if (ck.mode != cfg.mode) throw ConsistencyError("train_e2e: checkpoint mode disagrees with config");
    } else {
        ck.mode = cfg.mode;
        ck.decoder = decoder_init(subseed(cfg.seed, 1), opt_cfg.min_depth(), opt_cfg.max_depth(), iscale);
        ck.cca = initial_cca(cfg, opt_cfg);
        ck.adam_decoder.assign(FlatParams::count(ck.decoder), AdamState{});
        ck.adam_optics = AdamState{};
        ck.epoch = 0;
        ck.rng_state = Rng(subseed(cfg.seed, 3)).state();
    }

    const bool optics_used = mode_uses_optics(cfg.mode);
    const bool optics_trained = mode_trains_optics(cfg.mode) && cfg.lr_optics > 0.0;
    const bool binary = cfg.mode == TrainMode::fixed_bca || cfg.mode == TrainMode::learned_bca;

    int threads = cfg.threads > 0 ? cfg.threads : int(std::thread::hardware_concurrency());
    threads = std::clamp(threads, 1, std::max(1, cfg.batch_size));

    // Per-scene discretization never changes.
    std::vector<DepthLayers> layers(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i) layers[i] = discretize_depth(dataset[i].depth, opt_cfg);

    std::unique_ptr<PsfEngine> engine;
    PsfStack fixed_stack;
    std::vector<CodedImage> precoded;  // frozen-aperture modes render once
    if (mode_trains_optics(cfg.mode)) {
        engine = std::make_unique<PsfEngine>(opt_cfg, ck.cca.n, ck.cca.cell_size, threads);
    } else if (optics_used) {
        fixed_stack = build_psf_stack(opt_cfg, binary ? binarize(ck.cca) : ck.cca);
    }
    if (!mode_trains_optics(cfg.mode)) {
        precoded.resize(dataset.size());
        for (size_t i = 0; i < dataset.size(); ++i)
            precoded[i] = cfg.mode == TrainMode::vanilla
                              ? sensor_integrate(dataset[i].cube, resp)
                              : render_forward(dataset[i].cube, layers[i], fixed_stack, resp, nullptr);
    }

    Rng shuffle_rng;
    shuffle_rng.set_state(ck.rng_state);

    TrainResult result;
    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<SampleResult> slots(cfg.batch_size);

    for (uint64_t epoch = ck.epoch; epoch < uint64_t(cfg.epochs); ++epoch) {
        // Fisher-Yates from the identity with the checkpointed generator, so
        // a resumed run sees exactly the epochs an uninterrupted run would.
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = size_t(shuffle_rng.below(i));
            std::swap(order[i - 1], order[j]);
        }

        double epoch_loss = 0.0, epoch_lg = 0.0, epoch_ln = 0.0, epoch_ls = 0.0;
        size_t seen = 0;

        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
            const size_t nb = std::min(size_t(cfg.batch_size), order.size() - start);

            PsfStack step_stack;
            PsfEngine::Tape psf_tape;
            const PsfStack* stack = nullptr;
            CodedAperture forward_cca;
            if (mode_trains_optics(cfg.mode)) {
                forward_cca = binary ? binarize(ck.cca) : ck.cca;
                step_stack = engine->stack_from_weights_with_tape(forward_cca, psf_tape);
                stack = &step_stack;
            } else if (optics_used) {
                stack = &fixed_stack;
            }

            auto worker = [&](int tid) {
                for (size_t s = size_t(tid); s < nb; s += size_t(threads)) {
                    const size_t idx = order[start + s];
                    process_sample(dataset[idx], layers[idx],
                                   precoded.empty() ? nullptr : &precoded[idx], stack, resp, ck.decoder,
                                   cfg.loss_weights, optics_trained, slots[s]);
                }
            };
            if (threads <= 1 || nb == 1) {
                worker(0);
            } else {
                std::vector<std::thread> pool;
                for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
                for (auto& t : pool) t.join();
            }

            // Fixed accumulation order keeps results independent of scheduling.
            DecoderGrads acc = decoder_zero_grads(ck.decoder);
            std::vector<double> acc_dkernels;
            if (optics_trained)
                acc_dkernels.assign(size_t(opt_cfg.planes()) * opt_cfg.bands() * opt_cfg.psf_crop *
                                        opt_cfg.psf_crop,
                                    0.0);
            double batch_loss = 0.0;
            for (size_t s = 0; s < nb; ++s) {
                const SampleResult& r = slots[s];
                if (!r.finite || !std::isfinite(r.loss)) {
                    // diagnostic dump, then abort
                    std::filesystem::path dump =
                        dump_dir / ("nan_dump_epoch" + std::to_string(epoch) + ".txt");
                    std::ofstream ds(dump);
                    ds << "non-finite loss in epoch " << epoch << " batch starting at " << start << "\n";
                    for (size_t q = 0; q < nb; ++q)
                        ds << dataset[order[start + q]].name << " loss=" << slots[q].loss << "\n";
                    throw NanAbortError("training aborted on non-finite loss (dump: " + dump.string() + ")",
                                        dump.string());
                }
                batch_loss += r.loss;
                epoch_lg += r.lg;
                epoch_ln += r.ln;
                epoch_ls += r.ls;
                for (int t = 0; t < FlatParams::count(ck.decoder); ++t) {
                    auto& dst = FlatParams::tensor(acc, t);
                    const auto& src = t < int(r.dec.kernels.size())
                                          ? r.dec.kernels[t].v
                                          : r.dec.biases[t - r.dec.kernels.size()].v;
                    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
                }
                if (optics_trained)
                    for (size_t i = 0; i < acc_dkernels.size(); ++i) acc_dkernels[i] += r.dkernels[i];
            }
            epoch_loss += batch_loss;
            seen += nb;

            const double inv_nb = 1.0 / double(nb);
            if (cfg.lr_decoder > 0.0) {
                for (int t = 0; t < FlatParams::count(ck.decoder); ++t) {
                    auto& grads = FlatParams::tensor(acc, t);
                    for (double& g : grads) g *= inv_nb;
                    adam_step(FlatParams::tensor(ck.decoder, t), grads, ck.adam_decoder[t],
                              cfg.lr_decoder, cfg.beta1, cfg.beta2, cfg.epsilon);
                }
            }
            if (optics_trained) {
                for (double& g : acc_dkernels) g *= inv_nb;
                std::vector<double> dw = engine->weight_grad(forward_cca, psf_tape, acc_dkernels);
                adam_step(ck.cca.weights, dw, ck.adam_optics, cfg.lr_optics, cfg.beta1, cfg.beta2,
                          cfg.epsilon);
                if (binary) {
                    // straight-through estimator: continuous weights clamp to [0,1]
                    for (double& w : ck.cca.weights) w = std::clamp(w, 0.0, 1.0);
                } else {
                    ck.cca = project_constraint(ck.cca);
                }
            }
        }

        EpochLog log;
        log.epoch = epoch;
        log.loss = epoch_loss / double(seen);
        log.loss_grad = epoch_lg / double(seen);
        log.loss_normal = epoch_ln / double(seen);
        log.loss_smooth = epoch_ls / double(seen);
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }

    ck.epoch = uint64_t(cfg.epochs);
    ck.rng_state = shuffle_rng.state();
    result.initial_loss = result.log.empty() ? 0.0 : result.log.front().loss;
    result.final_loss = result.log.empty() ? 0.0 : result.log.back().loss;
    result.checkpoint = std::move(ck);
    return result;
}

EvalResult evaluate(const Checkpoint& ckpt, const Dataset& dataset, const OpticalConfig& opt_cfg) {
    if (dataset.empty()) throw DomainError("evaluate: dataset is empty");
    const SensorResponse resp = default_sensor_response(opt_cfg.wavelengths);
    PsfStack stack;
    const bool binary = ckpt.cca.mode == ApertureMode::binary;
    if (mode_uses_optics(ckpt.mode)) stack = build_psf_stack(opt_cfg, binary ? binarize(ckpt.cca) : ckpt.cca);

    EvalResult out;
    MetricsReport& agg = out.aggregate;
    for (const auto& scene : dataset) {
        const CodedImage coded = coded_image_for_mode(ckpt.mode, scene, opt_cfg,
                                                      mode_uses_optics(ckpt.mode) ? &stack : nullptr, resp);
        const DepthMap predicted = decoder_forward(ckpt.decoder, coded, nullptr);
        MetricsReport m = evaluate_metrics(scene.depth, predicted);
        agg.mae += m.mae;
        agg.rel += m.rel;
        agg.log10 += m.log10;
        agg.rmse += m.rmse;
        agg.delta1 += m.delta1;
        agg.delta2 += m.delta2;
        agg.delta3 += m.delta3;
        out.per_scene.push_back(m);
    }
    const double n = double(out.per_scene.size());
    agg.mae /= n;
    agg.rel /= n;
    agg.log10 /= n;
    agg.rmse /= n;
    agg.delta1 /= n;
    agg.delta2 /= n;
    agg.delta3 /= n;
    return out;
}

GradCheckReport gradcheck(const OpticalConfig& opt_cfg, const CodedAperture& cca,
                          const DecoderParams& decoder, const Scene& scene, const LossWeights& weights,
                          double step, int decoder_samples, uint64_t seed) {
    const SensorResponse resp = default_sensor_response(opt_cfg.wavelengths);
    const DepthLayers layers = discretize_depth(scene.depth, opt_cfg);
    PsfEngine engine(opt_cfg, cca.n, cca.cell_size, 1);

    auto loss_for = [&](const CodedAperture& c, const DecoderParams& d, DecoderCache* cache) {
        const PsfStack stack = engine.stack_from_weights(c);
        const CodedImage coded = render_forward(scene.cube, layers, stack, resp, nullptr);
        const DepthMap predicted = decoder_forward(d, coded, cache);
        return total_loss(scene.depth, predicted, weights, nullptr);
    };

    // analytic gradients through the full chain
    PsfEngine::Tape psf_tape;
    const PsfStack stack = engine.stack_from_weights_with_tape(cca, psf_tape);
    RenderTape tape;
    const CodedImage coded = render_forward(scene.cube, layers, stack, resp, &tape);
    DecoderCache cache;
    const DepthMap predicted = decoder_forward(decoder, coded, &cache);
    RealGrid d_pred;
    total_loss(scene.depth, predicted, weights, &d_pred);
    DecoderGrads dec_grads = decoder_backward(decoder, cache, d_pred);
    const std::vector<double> dkernels = render_backward(tape, dec_grads.d_input);
    const std::vector<double> dw = engine.weight_grad(cca, psf_tape, dkernels);

    auto rel_err = [](double a, double f) {
        const double scale = std::max({std::abs(a), std::abs(f), 1e-10});
        return std::abs(a - f) / scale;
    };

    // The loss is piecewise smooth in the rectifier activations. A central
    // quotient only estimates the derivative when both evaluations stay on
    // the same smooth piece, so compare the activation branch pattern of the
    // two endpoints and shrink the step whenever a kink was crossed.
    auto same_branches = [](const DecoderCache& a, const DecoderCache& b) {
        for (size_t t = 0; t < a.pre.size(); ++t)
            for (size_t i = 0; i < a.pre[t].v.size(); ++i)
                if ((a.pre[t].v[i] >= 0.0) != (b.pre[t].v[i] >= 0.0)) return false;
        return true;
    };
    auto fd_guarded = [&](const std::function<double(double, DecoderCache*)>& f) {
        double h = step;
        double quotient = 0.0;
        for (int attempt = 0; attempt < 3; ++attempt) {
            DecoderCache plus, minus;
            const double lp = f(h, &plus);
            const double lm = f(-h, &minus);
            quotient = (lp - lm) / (2.0 * h);
            if (same_branches(plus, minus)) return quotient;
            h *= 0.1;
        }
        return quotient;  // kink closer than the finest step; keep the estimate
    };

    GradCheckReport report;
    for (size_t i = 0; i < cca.weights.size(); ++i) {
        const double fd = fd_guarded([&](double h, DecoderCache* c) {
            CodedAperture mod = cca;
            mod.weights[i] += h;
            return loss_for(mod, decoder, c);
        });
        report.max_rel_error_weights = std::max(report.max_rel_error_weights, rel_err(dw[i], fd));
        ++report.checked_weights;
    }

    // Seeded sample of decoder parameters across every tensor. The coded
    // image does not depend on the decoder, so it is reused. Coordinates
    // whose gradients sit below the FD noise floor (1e-6 of the largest
    // component) are skipped; their code paths are shared with the checked
    // ones and carry no trainable signal.
    double gmax = 0.0;
    for (const auto& k : dec_grads.kernels)
        for (double v : k.v) gmax = std::max(gmax, std::abs(v));
    for (const auto& b : dec_grads.biases)
        for (double v : b.v) gmax = std::max(gmax, std::abs(v));

    auto decoder_loss = [&](const DecoderParams& d, DecoderCache* c) {
        const DepthMap p = decoder_forward(d, coded, c);
        return total_loss(scene.depth, p, weights, nullptr);
    };
    Rng rng(seed);
    const int n_tensors = int(decoder.kernels.size() + decoder.biases.size());
    DecoderParams perturbed = decoder;
    int accepted = 0;
    for (int attempts = 0; accepted < decoder_samples && attempts < 20 * decoder_samples; ++attempts) {
        const int t = int(rng.below(uint64_t(n_tensors)));
        auto& vec = t < int(perturbed.kernels.size()) ? perturbed.kernels[t].v
                                                      : perturbed.biases[t - perturbed.kernels.size()].v;
        const size_t i = size_t(rng.below(vec.size()));
        const double analytic = t < int(dec_grads.kernels.size())
                                    ? dec_grads.kernels[t].v[i]
                                    : dec_grads.biases[t - dec_grads.kernels.size()].v[i];
        if (std::abs(analytic) < 1e-6 * gmax) continue;
        const double saved = vec[i];
        const double fd = fd_guarded([&](double h, DecoderCache* c) {
            vec[i] = saved + h;
            const double l = decoder_loss(perturbed, c);
            vec[i] = saved;
            return l;
        });
        report.max_rel_error_decoder = std::max(report.max_rel_error_decoder, rel_err(analytic, fd));
        ++accepted;
    }
    report.checked_decoder_params = accepted;
    return report;
}

GradcheckSetup canonical_gradcheck_setup() {
    GradcheckSetup s;
    s.cfg = gradcheck_config();
    auto [prim, r] = trainer_primaries(s.cfg.wavelengths);
    s.cca = random_cca(5, 2, s.cfg.wavelengths, prim, r);
    // keep weights clear of the [0,1] clip boundaries
    for (double& w : s.cca.weights) w = 0.25 + 0.5 * w;
    s.cca = project_constraint(s.cca);

    SceneSpec spec;
    spec.seed = 23;
    spec.width = 32;
    spec.height = 32;
    spec.planes = 2;
    spec.z_min = s.cfg.min_depth();
    spec.z_max = s.cfg.max_depth();
    s.scene = generate_scene(spec, s.cfg);

    const SensorResponse resp = default_sensor_response(s.cfg.wavelengths);
    s.decoder = decoder_init(99, s.cfg.min_depth(), s.cfg.max_depth(),
                             decoder_input_scale(resp, s.cfg.wavelengths));
    return s;
}

TrainResult finetune_measured(const Checkpoint& start, const PsfStack& measured, const Dataset& dataset,
                              const TrainConfig& base_cfg, const OpticalConfig& opt_cfg, int epochs,
                              double lr) {
    if (measured.planes != opt_cfg.planes() || measured.bands != opt_cfg.bands() ||
        measured.crop != opt_cfg.psf_crop)
        throw ConsistencyError("finetune_measured: stack dimensions disagree with the configuration");
    if (epochs < 0) throw DomainError("finetune_measured: epochs must be >= 0");
    if (dataset.empty()) throw DomainError("finetune_measured: dataset is empty");

    TrainResult result;
    result.checkpoint = start;
    if (epochs == 0) return result;

    Checkpoint& ck = result.checkpoint;
    const SensorResponse resp = default_sensor_response(opt_cfg.wavelengths);

    std::vector<DepthLayers> layers(dataset.size());
    std::vector<CodedImage> precoded(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i) {
        layers[i] = discretize_depth(dataset[i].depth, opt_cfg);
        precoded[i] = render_forward(dataset[i].cube, layers[i], measured, resp, nullptr);
    }

    // Fresh optimizer state for the fine-tuning phase; the optics stay frozen.
    std::vector<AdamState> adam(FlatParams::count(ck.decoder));
    Rng shuffle_rng(subseed(base_cfg.seed, 11));
    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<SampleResult> slots(base_cfg.batch_size);
    int threads = base_cfg.threads > 0 ? base_cfg.threads : int(std::thread::hardware_concurrency());
    threads = std::clamp(threads, 1, std::max(1, base_cfg.batch_size));

    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = size_t(shuffle_rng.below(i));
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0, lg = 0.0, ln = 0.0, ls = 0.0;
        size_t seen = 0;
        for (size_t start_i = 0; start_i < order.size(); start_i += size_t(base_cfg.batch_size)) {
            const size_t nb = std::min(size_t(base_cfg.batch_size), order.size() - start_i);
            auto worker = [&](int tid) {
                for (size_t s = size_t(tid); s < nb; s += size_t(threads)) {
                    const size_t idx = order[start_i + s];
                    process_sample(dataset[idx], layers[idx], &precoded[idx], &measured, resp, ck.decoder,
                                   base_cfg.loss_weights, false, slots[s]);
                }
            };
            if (threads <= 1 || nb == 1) {
                worker(0);
            } else {
                std::vector<std::thread> pool;
                for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
                for (auto& t : pool) t.join();
            }
            DecoderGrads acc = decoder_zero_grads(ck.decoder);
            for (size_t s = 0; s < nb; ++s) {
                const SampleResult& r = slots[s];
                if (!std::isfinite(r.loss))
                    throw NanAbortError("fine-tuning aborted on non-finite loss");
                epoch_loss += r.loss;
                lg += r.lg;
                ln += r.ln;
                ls += r.ls;
                for (int t = 0; t < FlatParams::count(ck.decoder); ++t) {
                    auto& dst = FlatParams::tensor(acc, t);
                    const auto& src = t < int(r.dec.kernels.size())
                                          ? r.dec.kernels[t].v
                                          : r.dec.biases[t - r.dec.kernels.size()].v;
                    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
                }
            }
            seen += nb;
            const double inv_nb = 1.0 / double(nb);
            for (int t = 0; t < FlatParams::count(ck.decoder); ++t) {
                auto& grads = FlatParams::tensor(acc, t);
                for (double& g : grads) g *= inv_nb;
                adam_step(FlatParams::tensor(ck.decoder, t), grads, adam[t], lr, base_cfg.beta1,
                          base_cfg.beta2, base_cfg.epsilon);
            }
        }
        EpochLog log;
        log.epoch = uint64_t(epoch);
        log.loss = epoch_loss / double(seen);
        log.loss_grad = lg / double(seen);
        log.loss_normal = ln / double(seen);
        log.loss_smooth = ls / double(seen);
        result.log.push_back(log);
    }
    result.initial_loss = result.log.front().loss;
    result.final_loss = result.log.back().loss;
    return result;
}

namespace {

void write_adam(std::ostream& os, const AdamState& s) {
    put_u64(os, s.step);
    put_u32(os, uint32_t(s.m.size()));
    for (double v : s.m) put_f64(os, v);
    for (double v : s.v) put_f64(os, v);
}

AdamState read_adam(std::istream& is) {
    AdamState s;
    s.step = get_u64(is, "CKP1 adam step");
    const uint32_t n = get_u32(is, "CKP1 adam size");
    s.m.resize(n);
    for (double& v : s.m) v = get_f64(is, "CKP1 adam m");
    s.v.resize(n);
    for (double& v : s.v) v = get_f64(is, "CKP1 adam v");
    return s;
}

}  // namespace

void write_ckp1(const Checkpoint& ckpt, const std::filesystem::path& path) {
    auto os = open_output(path);
    put_magic(os, "CKP1");
    put_u32(os, 1);  // version
    put_u32(os, uint32_t(ckpt.mode));
    put_u32(os, uint32_t(ckpt.cca.mode));
    put_u64(os, ckpt.epoch);
    for (uint64_t s : ckpt.rng_state) put_u64(os, s);

    std::ostringstream cca_text;
    write_cca_text(ckpt.cca, cca_text);
    const std::string cca_block = cca_text.str();
    put_u32(os, uint32_t(cca_block.size()));
    os.write(cca_block.data(), std::streamsize(cca_block.size()));

    std::ostringstream dck;
    write_dck1(ckpt.decoder, dck);
    const std::string dck_block = dck.str();
    put_u32(os, uint32_t(dck_block.size()));
    os.write(dck_block.data(), std::streamsize(dck_block.size()));

    put_u32(os, uint32_t(ckpt.adam_decoder.size()));
    for (const auto& s : ckpt.adam_decoder) write_adam(os, s);
    write_adam(os, ckpt.adam_optics);
    if (!os) throw IoError("short write to " + path.string());
}

Checkpoint read_ckp1(const std::filesystem::path& path) {
    auto is = open_input(path);
    expect_magic(is, "CKP1", "checkpoint");
    if (get_u32(is, "CKP1 version") != 1) throw ParseError("unsupported CKP1 version");
    Checkpoint ck;
    ck.mode = TrainMode(get_u32(is, "CKP1 mode"));
    const uint32_t cca_mode = get_u32(is, "CKP1 aperture mode");
    ck.epoch = get_u64(is, "CKP1 epoch");
    for (auto& s : ck.rng_state) s = get_u64(is, "CKP1 rng state");

    const uint32_t cca_len = get_u32(is, "CKP1 cca block");
    std::string cca_block(cca_len, '\0');
    if (!is.read(cca_block.data(), cca_len)) throw ParseError("truncated CKP1 cca block");
    std::istringstream cs(cca_block);
    ck.cca = read_cca_text(cs).cca;
    ck.cca.mode = ApertureMode(cca_mode);

    const uint32_t dck_len = get_u32(is, "CKP1 decoder block");
    std::string dck_block(dck_len, '\0');
    if (!is.read(dck_block.data(), dck_len)) throw ParseError("truncated CKP1 decoder block");
    std::istringstream ds(dck_block);
    ck.decoder = read_dck1(ds);

    const uint32_t n_states = get_u32(is, "CKP1 adam state count");
    ck.adam_decoder.resize(n_states);
    for (auto& s : ck.adam_decoder) s = read_adam(is);
    ck.adam_optics = read_adam(is);
    expect_eof(is, "CKP1 payload");
    return ck;
}

}  // namespace ccadepth
