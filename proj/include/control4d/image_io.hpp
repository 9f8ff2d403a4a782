#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>

namespace c4d {

/// 8-bit RGB PNG bytes from a [3,H,W] float image in [0,1] (values are
/// clamped and rounded to the nearest level).
std::string encode_png(const torch::Tensor& rgb);

/// [3,H,W] float image in [0,1]. Gray and RGBA inputs are converted to RGB.
torch::Tensor decode_png(std::string_view bytes);

void write_png(const std::filesystem::path& path, const torch::Tensor& rgb);
torch::Tensor read_png(const std::filesystem::path& path);

/// 8-bit grayscale PNG from a [H,W] map in [0,1].
void write_gray_png(const std::filesystem::path& path, const torch::Tensor& gray);
/// [H,W] float map in [0,1].
torch::Tensor read_gray_png(const std::filesystem::path& path);

/// (width, height) from the PNG header without decoding pixels.
std::pair<int, int> png_size(const std::filesystem::path& path);

/// Little-endian float32 .npy (format 1.0), C order.
void write_npy(const std::filesystem::path& path, const torch::Tensor& array);
torch::Tensor read_npy(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);
/// Throws SchemaError on malformed input.
std::string base64_decode(std::string_view text);

}  // namespace c4d
