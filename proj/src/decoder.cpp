#include "ccadepth/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "ccadepth/rng.hpp"
#include "ccadepth/serialize.hpp"

namespace ccadepth {

namespace {

// Zero-padded copy of every channel, (c, h+2, w+2).
void pad_channels(const Tensor3& in, std::vector<double>& pad) {
    const int ph = in.h + 2, pw = in.w + 2;
    pad.assign(size_t(in.c) * ph * pw, 0.0);
    for (int ci = 0; ci < in.c; ++ci) {
        const double* src = in.channel(ci);
        double* dst = pad.data() + size_t(ci) * ph * pw;
        for (int y = 0; y < in.h; ++y)
            std::memcpy(dst + size_t(y + 1) * pw + 1, src + size_t(y) * in.w, size_t(in.w) * sizeof(double));
    }
}

void conv3x3(const Tensor3& in, const Tensor4& k, const Tensor3& bias, int stride, Tensor3& out,
             std::vector<double>& padbuf) {
    const int oh = in.h / stride, ow = in.w / stride;
    out = Tensor3(k.co, oh, ow);
    pad_channels(in, padbuf);
    const int pw = in.w + 2;
    for (int co = 0; co < k.co; ++co) {
        double* op = out.channel(co);
        const double b = bias.v[co];
        for (size_t i = 0; i < size_t(oh) * ow; ++i) op[i] = b;
        for (int ci = 0; ci < k.ci; ++ci) {
            const double* p = padbuf.data() + size_t(ci) * (in.h + 2) * pw;
            const double* kk = &k.v[((size_t(co) * k.ci + ci) * 3) * 3];
            const double w00 = kk[0], w01 = kk[1], w02 = kk[2];
            const double w10 = kk[3], w11 = kk[4], w12 = kk[5];
            const double w20 = kk[6], w21 = kk[7], w22 = kk[8];
            for (int y = 0; y < oh; ++y) {
                const double* r0 = p + size_t(y * stride) * pw;
                const double* r1 = r0 + pw;
                const double* r2 = r1 + pw;
                double* orow = op + size_t(y) * ow;
                if (stride == 1) {
                    for (int x = 0; x < ow; ++x)
                        orow[x] += w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2] + w10 * r1[x] +
                                   w11 * r1[x + 1] + w12 * r1[x + 2] + w20 * r2[x] + w21 * r2[x + 1] +
                                   w22 * r2[x + 2];
                } else {
                    for (int x = 0; x < ow; ++x) {
                        const int sx = 2 * x;
                        orow[x] += w00 * r0[sx] + w01 * r0[sx + 1] + w02 * r0[sx + 2] + w10 * r1[sx] +
                                   w11 * r1[sx + 1] + w12 * r1[sx + 2] + w20 * r2[sx] + w21 * r2[sx + 1] +
                                   w22 * r2[sx + 2];
                    }
                }
            }
        }
    }
}

// Adjoint of conv3x3. Accumulates dk/db, writes din.
void conv3x3_backward(const Tensor3& in, const Tensor4& k, int stride, const Tensor3& dout, Tensor3& din,
                      Tensor4& dk, Tensor3& db, std::vector<double>& padbuf, std::vector<double>& dpadbuf) {
    const int oh = dout.h, ow = dout.w;
    const int ph = in.h + 2, pw = in.w + 2;
    pad_channels(in, padbuf);
    dpadbuf.assign(size_t(in.c) * ph * pw, 0.0);

    for (int co = 0; co < k.co; ++co) {
        const double* gp = dout.channel(co);
        double bacc = 0.0;
        for (size_t i = 0; i < size_t(oh) * ow; ++i) bacc += gp[i];
        db.v[co] += bacc;
        for (int ci = 0; ci < k.ci; ++ci) {
            const double* p = padbuf.data() + size_t(ci) * ph * pw;
            double* dp = dpadbuf.data() + size_t(ci) * ph * pw;
            double* kk = &dk.v[((size_t(co) * k.ci + ci) * 3) * 3];
            const double* wk = &k.v[((size_t(co) * k.ci + ci) * 3) * 3];
            double a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0, a22 = 0;
            for (int y = 0; y < oh; ++y) {
                const double* r0 = p + size_t(y * stride) * pw;
                const double* r1 = r0 + pw;
                const double* r2 = r1 + pw;
                double* d0 = dp + size_t(y * stride) * pw;
                double* d1 = d0 + pw;
                double* d2 = d1 + pw;
                const double* grow = gp + size_t(y) * ow;
                for (int x = 0; x < ow; ++x) {
                    const double g = grow[x];
                    const int sx = stride * x;
                    a00 += g * r0[sx];
                    a01 += g * r0[sx + 1];
                    a02 += g * r0[sx + 2];
                    a10 += g * r1[sx];
                    a11 += g * r1[sx + 1];
                    a12 += g * r1[sx + 2];
                    a20 += g * r2[sx];
                    a21 += g * r2[sx + 1];
                    a22 += g * r2[sx + 2];
                    d0[sx] += g * wk[0];
                    d0[sx + 1] += g * wk[1];
                    d0[sx + 2] += g * wk[2];
                    d1[sx] += g * wk[3];
                    d1[sx + 1] += g * wk[4];
                    d1[sx + 2] += g * wk[5];
                    d2[sx] += g * wk[6];
                    d2[sx + 1] += g * wk[7];
                    d2[sx + 2] += g * wk[8];
                }
            }
            kk[0] += a00;
            kk[1] += a01;
            kk[2] += a02;
            kk[3] += a10;
            kk[4] += a11;
            kk[5] += a12;
            kk[6] += a20;
            kk[7] += a21;
            kk[8] += a22;
        }
    }
    din = Tensor3(in.c, in.h, in.w);
    for (int ci = 0; ci < in.c; ++ci) {
        const double* dp = dpadbuf.data() + size_t(ci) * ph * pw;
        double* dst = din.channel(ci);
        for (int y = 0; y < in.h; ++y)
            std::memcpy(dst + size_t(y) * in.w, dp + size_t(y + 1) * pw + 1, size_t(in.w) * sizeof(double));
    }
}

void leaky_inplace(Tensor3& t, double slope) {
    for (double& v : t.v) v = v >= 0.0 ? v : slope * v;
}

Tensor3 leaky_backward(const Tensor3& pre, const Tensor3& dout, double slope) {
    Tensor3 din(pre.c, pre.h, pre.w);
    for (size_t i = 0; i < pre.v.size(); ++i) din.v[i] = pre.v[i] >= 0.0 ? dout.v[i] : slope * dout.v[i];
    return din;
}

Tensor3 upsample2(const Tensor3& in) {
    Tensor3 out(in.c, in.h * 2, in.w * 2);
    for (int c = 0; c < in.c; ++c) {
        const double* src = in.channel(c);
        double* dst = out.channel(c);
        for (int y = 0; y < out.h; ++y) {
            const double* srow = src + size_t(y / 2) * in.w;
            double* drow = dst + size_t(y) * out.w;
            for (int x = 0; x < out.w; ++x) drow[x] = srow[x / 2];
        }
    }
    return out;
}

Tensor3 upsample2_backward(const Tensor3& dout) {
    Tensor3 din(dout.c, dout.h / 2, dout.w / 2);
    for (int c = 0; c < dout.c; ++c) {
        const double* g = dout.channel(c);
        double* d = din.channel(c);
        for (int y = 0; y < dout.h; ++y) {
            const double* grow = g + size_t(y) * dout.w;
            double* drow = d + size_t(y / 2) * din.w;
            for (int x = 0; x < dout.w; ++x) drow[x / 2] += grow[x];
        }
    }
    return din;
}

Tensor3 concat(const Tensor3& a, const Tensor3& b) {
    Tensor3 out(a.c + b.c, a.h, a.w);
    std::memcpy(out.v.data(), a.v.data(), a.v.size() * sizeof(double));
    std::memcpy(out.v.data() + a.v.size(), b.v.data(), b.v.size() * sizeof(double));
    return out;
}

void split(const Tensor3& d, int ca, Tensor3& da, Tensor3& db) {
    da = Tensor3(ca, d.h, d.w);
    db = Tensor3(d.c - ca, d.h, d.w);
    std::memcpy(da.v.data(), d.v.data(), da.v.size() * sizeof(double));
    std::memcpy(db.v.data(), d.v.data() + da.v.size(), db.v.size() * sizeof(double));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Kernel shapes in declaration order.
std::vector<std::array<int, 4>> kernel_shapes() {
    const int w0 = DecoderParams::kWidths[0], w1 = DecoderParams::kWidths[1], w2 = DecoderParams::kWidths[2];
    return {
        {w0, 3, 3, 3},       {w0, w0, 3, 3}, {w0, w0, 3, 3},   // encoder 0: A, B, down
        {w1, w0, 3, 3},      {w1, w1, 3, 3}, {w1, w1, 3, 3},   // encoder 1
        {w2, w1, 3, 3},      {w2, w2, 3, 3}, {w2, w2, 3, 3},   // encoder 2
        {w2, w2 + w2, 3, 3}, {w2, w2, 3, 3},                   // decoder 2: C, D
        {w1, w2 + w1, 3, 3}, {w1, w1, 3, 3},                   // decoder 1
        {w0, w1 + w0, 3, 3}, {w0, w0, 3, 3},                   // decoder 0
        {1, w0, 1, 1},                                         // head
    };
}

}  // namespace

std::string DecoderParams::descriptor() const {
    std::ostringstream os;
    os << "unet3 widths=16,32,64 slope=0.1 zmin=" << f64_to_text(z_min) << " zmax=" << f64_to_text(z_max)
       << " input_scale=" << f64_to_text(input_scale);
    return os.str();
}

size_t DecoderParams::parameter_count() const {
    size_t n = 0;
    for (const auto& k : kernels) n += k.size();
    for (const auto& b : biases) n += b.size();
    return n;
}

DecoderParams decoder_init(uint64_t seed, double z_min, double z_max, double input_scale) {
    if (!(z_min < z_max)) throw DomainError("decoder_init: need z_min < z_max");
    DecoderParams p;
    p.z_min = z_min;
    p.z_max = z_max;
    p.input_scale = input_scale;
    Rng rng(seed);
    for (const auto& s : kernel_shapes()) {
        Tensor4 k(s[0], s[1], s[2], s[3]);
        const double std_dev = std::sqrt(2.0 / (double(s[1]) * s[2] * s[3]));
        for (double& v : k.v) v = std_dev * rng.normal();
        p.kernels.push_back(std::move(k));
        p.biases.emplace_back(s[0], 1, 1);
    }
    return p;
}

DepthMap decoder_forward(const DecoderParams& params, const CodedImage& img, DecoderCache* cache) {
    if (params.kernels.size() != 16) throw ConsistencyError("decoder: uninitialized parameters");
    if (img.h % 8 != 0 || img.w % 8 != 0 || img.h < 8 || img.w < 8)
        throw ShapeError("decoder: input height and width must be divisible by 8");

    DecoderCache local;
    DecoderCache& c = cache ? *cache : local;
    c.h = img.h;
    c.w = img.w;
    c.pre.clear();
    c.act.clear();
    c.skips.clear();

    c.input = img;
    for (double& v : c.input.values) v *= params.input_scale;
    Tensor3 x(3, img.h, img.w);
    std::memcpy(x.v.data(), c.input.values.data(), x.v.size() * sizeof(double));

    std::vector<double> padbuf;
    const double slope = DecoderParams::kSlope;
    int idx = 0;
    auto conv_act = [&](Tensor3& input, int stride) {
        Tensor3 out;
        conv3x3(input, params.kernels[idx], params.biases[idx], stride, out, padbuf);
        c.act.push_back(std::move(input));
        c.pre.push_back(out);  // pre-activation copy
        leaky_inplace(out, slope);
        ++idx;
        return out;
    };

    // encoder
    for (int level = 0; level < 3; ++level) {
        x = conv_act(x, 1);
        x = conv_act(x, 1);
        c.skips.push_back(x);
        x = conv_act(x, 2);
    }
    // decoder
    for (int level = 2; level >= 0; --level) {
        Tensor3 up = upsample2(x);
        x = concat(up, c.skips[level]);
        x = conv_act(x, 1);
        x = conv_act(x, 1);
    }
    // 1x1 head, no activation
    {
        Tensor3 out(1, x.h, x.w);
        const Tensor4& k = params.kernels[15];
        const double b = params.biases[15].v[0];
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = b;
        for (int ci = 0; ci < k.ci; ++ci) {
            const double wgt = k.v[ci];
            const double* src = x.channel(ci);
            for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += wgt * src[i];
        }
        c.act.push_back(std::move(x));
        c.head_pre = std::move(out);
    }

    DepthMap depth(img.h, img.w);
    const double range = params.z_max - params.z_min;
    for (int y = 0; y < img.h; ++y)
        for (int x2 = 0; x2 < img.w; ++x2)
            depth(y, x2) = params.z_min + range * sigmoid(c.head_pre.at(0, y, x2));
    return depth;
}

DecoderGrads decoder_zero_grads(const DecoderParams& params) {
    DecoderGrads g;
    for (const auto& k : params.kernels) g.kernels.emplace_back(k.co, k.ci, k.kh, k.kw);
    for (const auto& b : params.biases) g.biases.emplace_back(b.c, 1, 1);
    return g;
}

DecoderGrads decoder_backward(const DecoderParams& params, const DecoderCache& cache,
                              const RealGrid& d_output) {
    if (cache.pre.size() != 15 || cache.act.size() != 16)
        throw ConsistencyError("decoder_backward: cache does not match a forward pass");
    if (d_output.rows() != cache.h || d_output.cols() != cache.w)
        throw ShapeError("decoder_backward: gradient shape mismatch");

    DecoderGrads g = decoder_zero_grads(params);
    const double slope = DecoderParams::kSlope;
    const double range = params.z_max - params.z_min;

    // through the sigmoid-affine output map
    Tensor3 dx(1, cache.h, cache.w);
    for (int y = 0; y < cache.h; ++y)
        for (int x = 0; x < cache.w; ++x) {
            const double s = sigmoid(cache.head_pre.at(0, y, x));
            dx.at(0, y, x) = d_output(y, x) * range * s * (1.0 - s);
        }

    // head 1x1
    {
        const Tensor3& hin = cache.act[15];
        const Tensor4& k = params.kernels[15];
        double bacc = 0.0;
        for (size_t i = 0; i < dx.v.size(); ++i) bacc += dx.v[i];
        g.biases[15].v[0] += bacc;
        Tensor3 dhin(hin.c, hin.h, hin.w);
        for (int ci = 0; ci < k.ci; ++ci) {
            const double* src = hin.channel(ci);
            double* dst = dhin.channel(ci);
            double acc = 0.0;
            for (size_t i = 0; i < dx.v.size(); ++i) {
                acc += dx.v[i] * src[i];
                dst[i] = dx.v[i] * k.v[ci];
            }
            g.kernels[15].v[ci] += acc;
        }
        dx = std::move(dhin);
    }

    std::vector<double> padbuf, dpadbuf;
    int idx = 14;
    auto conv_back = [&](Tensor3& grad, int stride) {
        Tensor3 dpre = leaky_backward(cache.pre[idx], grad, slope);
        Tensor3 din;
        conv3x3_backward(cache.act[idx], params.kernels[idx], stride, dpre, din, g.kernels[idx],
                         g.biases[idx], padbuf, dpadbuf);
        --idx;
        return din;
    };

    std::vector<Tensor3> dskips(3);
    // decoder levels 0, 1, 2 in reverse of the forward order
    for (int level = 0; level <= 2; ++level) {
        dx = conv_back(dx, 1);  // convD
        dx = conv_back(dx, 1);  // convC
        Tensor3 dup, dskip;
        const int up_channels = dx.c - DecoderParams::kWidths[level];
        split(dx, up_channels, dup, dskip);
        dskips[level] = std::move(dskip);
        dx = upsample2_backward(dup);
    }
    // encoder levels 2, 1, 0
    for (int level = 2; level >= 0; --level) {
        dx = conv_back(dx, 2);  // down
        for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dskips[level].v[i];
        dx = conv_back(dx, 1);  // convB
        dx = conv_back(dx, 1);  // convA
    }

    g.d_input = CodedImage(cache.h, cache.w);
    for (size_t i = 0; i < g.d_input.values.size(); ++i)
        g.d_input.values[i] = dx.v[i] * params.input_scale;
    return g;
}

void write_dck1(const DecoderParams& params, std::ostream& os) {
    put_magic(os, "DCK1");
    const std::string desc = params.descriptor();
    put_u32(os, uint32_t(desc.size()));
    os.write(desc.data(), std::streamsize(desc.size()));
    put_u32(os, uint32_t(params.kernels.size() + params.biases.size()));
    auto put_tensor = [&](std::initializer_list<int> dims, const std::vector<double>& v) {
        put_u32(os, uint32_t(dims.size()));
        for (int d : dims) put_u32(os, uint32_t(d));
        for (double x : v) put_f64(os, x);
    };
    for (const auto& k : params.kernels) put_tensor({k.co, k.ci, k.kh, k.kw}, k.v);
    for (const auto& b : params.biases) put_tensor({b.c, 1, 1}, b.v);
}

DecoderParams read_dck1(std::istream& is) {
    expect_magic(is, "DCK1", "decoder checkpoint");
    const uint32_t desc_len = get_u32(is, "DCK1 descriptor length");
    if (desc_len > 4096) throw ParseError("DCK1 descriptor is implausibly long");
    std::string desc(desc_len, '\0');
    if (!is.read(desc.data(), desc_len)) throw ParseError("truncated DCK1 descriptor");
    if (desc.rfind("unet3 ", 0) != 0) throw ParseError("DCK1: unknown architecture descriptor");

    DecoderParams p;
    std::istringstream ds(desc);
    std::string tok;
    while (ds >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "zmin") p.z_min = std::strtod(val.c_str(), nullptr);
        if (key == "zmax") p.z_max = std::strtod(val.c_str(), nullptr);
        if (key == "input_scale") p.input_scale = std::strtod(val.c_str(), nullptr);
    }

    const uint32_t count = get_u32(is, "DCK1 tensor count");
    if (count != 32) throw ParseError("DCK1: expected 32 tensors");
    auto shapes = kernel_shapes();
    for (size_t t = 0; t < 16; ++t) {
        if (get_u32(is, "DCK1 tensor rank") != 4) throw ParseError("DCK1: kernel tensor must be rank 4");
        int dims[4];
        for (int& d : dims) d = int(get_u32(is, "DCK1 tensor dims"));
        if (dims[0] != shapes[t][0] || dims[1] != shapes[t][1] || dims[2] != shapes[t][2] ||
            dims[3] != shapes[t][3])
            throw ParseError("DCK1: kernel shape disagrees with the architecture");
        Tensor4 k(dims[0], dims[1], dims[2], dims[3]);
        for (double& v : k.v) v = get_f64(is, "DCK1 kernel data");
        p.kernels.push_back(std::move(k));
    }
    for (size_t t = 0; t < 16; ++t) {
        if (get_u32(is, "DCK1 tensor rank") != 3) throw ParseError("DCK1: bias tensor must be rank 3");
        int dims[3];
        for (int& d : dims) d = int(get_u32(is, "DCK1 tensor dims"));
        if (dims[0] != shapes[t][0] || dims[1] != 1 || dims[2] != 1)
            throw ParseError("DCK1: bias shape disagrees with the architecture");
        Tensor3 b(dims[0], 1, 1);
        for (double& v : b.v) v = get_f64(is, "DCK1 bias data");
        p.biases.push_back(std::move(b));
    }
    return p;
}

void save_decoder(const DecoderParams& params, const std::filesystem::path& path) {
    auto os = open_output(path);
    write_dck1(params, os);
    if (!os) throw IoError("short write to " + path.string());
}

DecoderParams load_decoder(const std::filesystem::path& path) {
    auto is = open_input(path);
    DecoderParams p = read_dck1(is);
    expect_eof(is, "DCK1 payload");
    return p;
}

}  // namespace ccadepth
