#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ccadepth/array.hpp"
#include "ccadepth/render.hpp"

namespace ccadepth {

// Compact 3-level convolutional encoder-decoder regressing metric depth from
// a 3-channel coded image. Widths 16/32/64, leaky rectifier (slope 0.1),
// nearest-neighbor upsampling with skip concatenation, sigmoid head rescaled
// to [z_min, z_max]. Input height/width must be divisible by 8.
struct DecoderParams {
    static constexpr int kLevels = 3;
    static constexpr int kWidths[3] = {16, 32, 64};
    static constexpr double kSlope = 0.1;

    double z_min = 0.4;
    double z_max = 1.6;
    double input_scale = 1.0;  // fixed input normalization, not trained

    // Trainable tensors in declaration order (the checkpoint order):
    // per level: conv1, conv2, down; then per decoder level (deep to shallow):
    // up-conv1, up-conv2; finally the 1x1 head.
    std::vector<Tensor4> kernels;
    std::vector<Tensor3> biases;  // (c,1,1) per conv

    std::string descriptor() const;
    size_t parameter_count() const;
};

struct DecoderCache {
    int h = 0, w = 0;
    CodedImage input;                 // scaled input
    std::vector<Tensor3> pre;         // pre-activation of every conv
    std::vector<Tensor3> act;         // inputs to every conv (post previous activation)
    std::vector<Tensor3> skips;       // encoder outputs kept for concatenation
    Tensor3 head_pre;                 // before sigmoid
};

struct DecoderGrads {
    std::vector<Tensor4> kernels;
    std::vector<Tensor3> biases;
    CodedImage d_input;  // gradient w.r.t. the (unscaled) coded image
};

// He-initialized kernels (variance 2/fan_in), zero biases, deterministic per
// seed.
DecoderParams decoder_init(uint64_t seed, double z_min, double z_max, double input_scale = 1.0);

DepthMap decoder_forward(const DecoderParams& params, const CodedImage& img, DecoderCache* cache = nullptr);

DecoderGrads decoder_backward(const DecoderParams& params, const DecoderCache& cache,
                              const RealGrid& d_output);

// Allocates zeroed gradient buffers matching params.
DecoderGrads decoder_zero_grads(const DecoderParams& params);

// DCK1 checkpoint block.
void write_dck1(const DecoderParams& params, std::ostream& os);
DecoderParams read_dck1(std::istream& is);
void save_decoder(const DecoderParams& params, const std::filesystem::path& path);
DecoderParams load_decoder(const std::filesystem::path& path);

}  // namespace ccadepth
