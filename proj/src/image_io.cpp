#include "ccadepth/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>

#include "ccadepth/error.hpp"

namespace ccadepth {
namespace {

void put_be32(std::string& out, uint32_t v) {
    out.push_back(char(v >> 24));
    out.push_back(char(v >> 16));
    out.push_back(char(v >> 8));
    out.push_back(char(v));
}

void append_chunk(std::string& out, const char type[5], const std::string& payload) {
    put_be32(out, uint32_t(payload.size()));
    size_t start = out.size();
    out.append(type, 4);
    out += payload;
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(out.data() + start), uInt(out.size() - start));
    put_be32(out, uint32_t(crc));
}

void write_png(const std::filesystem::path& path, const std::vector<uint8_t>& pixels, int width, int height,
               int channels) {
    if (width <= 0 || height <= 0) throw DomainError("png: empty image");
    if (pixels.size() != size_t(width) * height * channels) throw ShapeError("png: pixel buffer size mismatch");

    // Scanlines with filter byte 0.
    std::string raw;
    raw.reserve(size_t(height) * (size_t(width) * channels + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back('\0');
        raw.append(reinterpret_cast<const char*>(pixels.data() + size_t(y) * width * channels),
                   size_t(width) * channels);
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::string compressed(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()), 6) != Z_OK)
        throw IoError("png: deflate failed");
    compressed.resize(bound);

    std::string ihdr;
    put_be32(ihdr, uint32_t(width));
    put_be32(ihdr, uint32_t(height));
    ihdr.push_back(8);                            // bit depth
    ihdr.push_back(channels == 1 ? 0 : char(2));  // gray / rgb
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);

    std::string file("\x89PNG\r\n\x1a\n", 8);
    append_chunk(file, "IHDR", ihdr);
    append_chunk(file, "IDAT", compressed);
    append_chunk(file, "IEND", "");

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os.write(file.data(), std::streamsize(file.size()));
    if (!os) throw IoError("short write to " + path.string());
}

// 32-entry viridis anchors, linearly interpolated.
constexpr float kViridis[32][3] = {
    {0.267f, 0.005f, 0.329f}, {0.277f, 0.050f, 0.376f}, {0.282f, 0.091f, 0.412f}, {0.283f, 0.131f, 0.443f},
    {0.278f, 0.173f, 0.478f}, {0.269f, 0.212f, 0.505f}, {0.257f, 0.250f, 0.525f}, {0.243f, 0.285f, 0.538f},
    {0.226f, 0.320f, 0.547f}, {0.211f, 0.353f, 0.552f}, {0.196f, 0.384f, 0.554f}, {0.182f, 0.414f, 0.556f},
    {0.169f, 0.444f, 0.557f}, {0.156f, 0.473f, 0.558f}, {0.144f, 0.502f, 0.557f}, {0.133f, 0.531f, 0.554f},
    {0.122f, 0.561f, 0.549f}, {0.119f, 0.590f, 0.541f}, {0.125f, 0.619f, 0.531f}, {0.145f, 0.648f, 0.516f},
    {0.176f, 0.677f, 0.498f}, {0.216f, 0.704f, 0.475f}, {0.266f, 0.731f, 0.448f}, {0.322f, 0.755f, 0.416f},
    {0.383f, 0.779f, 0.381f}, {0.449f, 0.800f, 0.342f}, {0.519f, 0.819f, 0.298f}, {0.592f, 0.837f, 0.250f},
    {0.668f, 0.851f, 0.199f}, {0.745f, 0.863f, 0.147f}, {0.822f, 0.871f, 0.106f}, {0.993f, 0.906f, 0.144f}};

uint8_t to_byte(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return uint8_t(std::lround(v * 255.0));
}

}  // namespace

void write_png_gray8(const std::filesystem::path& path, const std::vector<uint8_t>& pixels, int width,
                     int height) {
    write_png(path, pixels, width, height, 1);
}

void write_png_rgb8(const std::filesystem::path& path, const std::vector<uint8_t>& pixels, int width,
                    int height) {
    write_png(path, pixels, width, height, 3);
}

RealGrid tone_map(const RealGrid& g) {
    double mx = 0.0;
    for (size_t i = 0; i < g.size(); ++i) mx = std::max(mx, g[i]);
    RealGrid out(g.rows(), g.cols());
    if (mx <= 0.0) return out;
    for (size_t i = 0; i < g.size(); ++i) out[i] = std::max(0.0, g[i]) / mx;
    return out;
}

std::vector<uint8_t> gray8_from_grid(const RealGrid& normalized) {
    std::vector<uint8_t> px(normalized.size());
    for (size_t i = 0; i < normalized.size(); ++i) px[i] = to_byte(normalized[i]);
    return px;
}

std::vector<uint8_t> viridis_from_grid(const RealGrid& normalized) {
    std::vector<uint8_t> px(normalized.size() * 3);
    for (size_t i = 0; i < normalized.size(); ++i) {
        double v = std::clamp(normalized[i], 0.0, 1.0) * 31.0;
        int lo = int(v);
        int hi = std::min(lo + 1, 31);
        double t = v - lo;
        for (int c = 0; c < 3; ++c)
            px[3 * i + c] = to_byte(kViridis[lo][c] * (1.0 - t) + kViridis[hi][c] * t);
    }
    return px;
}

RealGrid contact_sheet(const std::vector<RealGrid>& tiles, int rows, int cols) {
    if (tiles.empty() || rows * cols < int(tiles.size())) throw ShapeError("contact_sheet: grid too small");
    const int th = tiles[0].rows(), tw = tiles[0].cols();
    RealGrid sheet(rows * (th + 1) + 1, cols * (tw + 1) + 1, 0.0);
    for (size_t t = 0; t < tiles.size(); ++t) {
        if (tiles[t].rows() != th || tiles[t].cols() != tw) throw ShapeError("contact_sheet: mixed tile sizes");
        const int r0 = int(t) / cols * (th + 1) + 1;
        const int c0 = int(t) % cols * (tw + 1) + 1;
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x) sheet(r0 + y, c0 + x) = tiles[t](y, x);
    }
    return sheet;
}

}  // namespace ccadepth
