#include "control4d/image_io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "control4d/errors.hpp"

namespace c4d {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SchemaError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<uint8_t> quantize(const torch::Tensor& hwc) {
  auto q = (hwc.detach().to(torch::kDouble).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  const auto* p = q.data_ptr<uint8_t>();
  return std::vector<uint8_t>(p, p + q.numel());
}

std::string encode(const torch::Tensor& hwc, int channels) {
  const int h = static_cast<int>(hwc.size(0));
  const int w = static_cast<int>(hwc.size(1));
  auto pixels = quantize(hwc);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw SchemaError(std::string("png encode failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw SchemaError(std::string("png encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

torch::Tensor decode(std::string_view bytes, int channels) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw SchemaError(std::string("png decode failed: ") + image.message);
  }
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw SchemaError(std::string("png decode failed: ") + image.message);
  }
  const int64_t h = image.height, w = image.width;
  auto t = torch::from_blob(buffer.data(), {h, w, channels}, torch::kUInt8).clone();
  return t.to(torch::kFloat) / 255.0f;
}

}  // namespace

std::string encode_png(const torch::Tensor& rgb) {
  TORCH_CHECK(rgb.dim() == 3 && rgb.size(0) == 3, "encode_png: expects [3,H,W]");
  return encode(rgb.permute({1, 2, 0}), 3);
}

torch::Tensor decode_png(std::string_view bytes) { return decode(bytes, 3).permute({2, 0, 1}).contiguous(); }

void write_png(const std::filesystem::path& path, const torch::Tensor& rgb) { write_file(path, encode_png(rgb)); }

torch::Tensor read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

void write_gray_png(const std::filesystem::path& path, const torch::Tensor& gray) {
  TORCH_CHECK(gray.dim() == 2, "write_gray_png: expects [H,W]");
  write_file(path, encode(gray.unsqueeze(-1), 1));
}

torch::Tensor read_gray_png(const std::filesystem::path& path) { return decode(read_file(path), 1).squeeze(-1); }

std::pair<int, int> png_size(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char header[24];
  in.read(reinterpret_cast<char*>(header), 24);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (!in || std::memcmp(header, sig, 8) != 0 || std::memcmp(header + 12, "IHDR", 4) != 0) {
    throw SchemaError("not a PNG file: " + path.string());
  }
  auto be32 = [&](int off) {
    return static_cast<int>((header[off] << 24) | (header[off + 1] << 16) | (header[off + 2] << 8) | header[off + 3]);
  };
  return {be32(16), be32(20)};
}

// ---------------------------------------------------------------------------
// NPY

void write_npy(const std::filesystem::path& path, const torch::Tensor& array) {
  auto a = array.detach().to(torch::kFloat).contiguous();
  std::string shape = "(";
  for (int64_t i = 0; i < a.dim(); ++i) shape += std::to_string(a.size(i)) + (a.dim() == 1 || i + 1 < a.dim() ? ", " : "");
  shape += ")";
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape + ", }";
  const size_t prefix = 10;
  size_t total = prefix + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::string out("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<uint16_t>(header.size());
  out.push_back(static_cast<char>(len & 0xff));
  out.push_back(static_cast<char>(len >> 8));
  out += header;
  out.append(reinterpret_cast<const char*>(a.data_ptr<float>()), static_cast<size_t>(a.numel()) * sizeof(float));
  write_file(path, out);
}

torch::Tensor read_npy(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw SchemaError("not an npy file: " + path.string());
  const size_t len = static_cast<uint8_t>(bytes[8]) | (static_cast<uint8_t>(bytes[9]) << 8);
  const std::string header = bytes.substr(10, len);
  if (header.find("'<f4'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos) {
    throw SchemaError("unsupported npy layout: " + path.string());
  }
  const auto open = header.find('(', header.find("'shape'"));
  const auto close = header.find(')', open);
  std::vector<int64_t> shape;
  std::stringstream ss(header.substr(open + 1, close - open - 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(' ') != std::string::npos) shape.push_back(std::stoll(item));
  }
  int64_t n = 1;
  for (auto s : shape) n *= s;
  if (bytes.size() != 10 + len + static_cast<size_t>(n) * sizeof(float)) throw SchemaError("npy size mismatch: " + path.string());
  auto t = torch::empty(shape, torch::kFloat);
  std::memcpy(t.data_ptr<float>(), bytes.data() + 10 + len, static_cast<size_t>(n) * sizeof(float));
  return t;
}

// ---------------------------------------------------------------------------
// Base64

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  std::string clean;
  clean.reserve(text.size());
  for (char c : text)
    if (c != '\n' && c != '\r' && c != ' ') clean.push_back(c);
  if (clean.size() % 4 != 0) throw SchemaError("base64: length is not a multiple of 4");
  std::string out(3 * clean.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw SchemaError("base64: invalid character");
  size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<size_t>(n) - pad);
  return out;
}

}  // namespace c4d
