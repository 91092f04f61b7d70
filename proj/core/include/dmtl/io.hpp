// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dmtl/tensor.hpp"

namespace dmtl::io {

/// 8-bit image with 1 (gray) or 3 (RGB) channels, row-major interleaved.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
};

void write_png(const std::filesystem::path& path, const Image8& img);
Image8 read_png(const std::filesystem::path& path);

/// Tensor with values in [0, 1] scaled to 0..255 (rounded). Shape [H, W] or [H, W, C] with C in {1, 3}.
Image8 to_image8(const Tensor& t);
/// Inverse of to_image8: [H, W, C] with values k / 255.
Tensor from_image8(const Image8& img);

/// Little-endian float64 arrays in the .npy v1.0 format.
void write_npy(const std::filesystem::path& path, const Tensor& t);
Tensor read_npy(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace dmtl::io
