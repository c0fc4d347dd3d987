#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ccadepth/array.hpp"

namespace ccadepth {

// Minimal 8-bit PNG writer over zlib. No ancillary chunks and a fixed
// compression level, so identical pixels always give identical bytes.
void write_png_gray8(const std::filesystem::path& path, const std::vector<uint8_t>& pixels, int width,
                     int height);
void write_png_rgb8(const std::filesystem::path& path, const std::vector<uint8_t>& pixels, int width,
                    int height);

// Max-normalizes to [0,1]; an all-zero grid stays zero.
RealGrid tone_map(const RealGrid& g);

std::vector<uint8_t> gray8_from_grid(const RealGrid& normalized);
std::vector<uint8_t> viridis_from_grid(const RealGrid& normalized);

// Lays out tiles[row*cols + col] (all same size) on a grid with 1-px separators.
RealGrid contact_sheet(const std::vector<RealGrid>& tiles, int rows, int cols);

}  // namespace ccadepth
