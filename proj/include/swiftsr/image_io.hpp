#pragma once

// 8-bit RGB image files: PNG (libpng) and binary PPM (P6).

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "swiftsr/tensor.hpp"

namespace swiftsr {

/// (1,3,h,w) RGB pixels in [0,255].
struct Image {
  Tensor pixels;
  std::filesystem::path path;

  std::size_t height() const { return pixels.shape().h; }
  std::size_t width() const { return pixels.shape().w; }
};

namespace detail {

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

inline Tensor from_interleaved(const unsigned char* rgb, std::size_t h, std::size_t w) {
  Tensor t(Shape{1, 3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) t.at(0, c, y, x) = rgb[(y * w + x) * 3 + c];
  return t;
}

inline std::vector<unsigned char> to_interleaved(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("image tensors must be (1,3,h,w), got " + s.str());
  std::vector<unsigned char> rgb(s.h * s.w * 3);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(t.at(0, c, y, x), 0.0f, 255.0f);
        rgb[(y * s.w + x) * 3 + c] = static_cast<unsigned char>(std::lround(v));
      }
  return rgb;
}

inline Tensor decode_ppm(const std::vector<unsigned char>& buf) {
  std::size_t pos = 2;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError("PPM parse error at byte offset " + std::to_string(pos) + ": " + what);
  };
  auto skip_ws = [&] {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_ws();
    if (pos >= buf.size()) throw fail(std::string("truncated header before ") + what);
    if (!std::isdigit(buf[pos])) throw fail(std::string("expected ") + what);
    std::size_t v = 0;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + (buf[pos] - '0');
      if (v > (1u << 24)) throw fail(std::string(what) + " too large");
      ++pos;
    }
    return v;
  };
  const std::size_t w = number("width");
  const std::size_t h = number("height");
  const std::size_t maxval = number("maxval");
  if (w == 0 || h == 0) throw fail("zero image dimension");
  if (maxval == 0 || maxval > 255) throw fail("only 8-bit PPM (maxval 1..255) is supported");
  if (pos >= buf.size() || !std::isspace(buf[pos])) throw fail("truncated header after maxval");
  ++pos;
  if (buf.size() - pos < w * h * 3) throw fail("truncated pixel data");
  Tensor t = from_interleaved(buf.data() + pos, h, w);
  if (maxval != 255) {
    for (float& v : t.data()) v = std::round(v * 255.0f / static_cast<float>(maxval));
  }
  return t;
}

inline Tensor decode_png(const std::vector<unsigned char>& buf) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, buf.data(), buf.size())) {
    throw FormatError(std::string("PNG decode failed: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("PNG decode failed: " + msg);
  }
  Tensor t = from_interleaved(rgb.data(), img.height, img.width);
  png_image_free(&img);
  return t;
}

}  // namespace detail

inline Image load_image(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open image '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  static constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  try {
    if (buf.size() >= 8 && std::memcmp(buf.data(), kPngSig, 8) == 0) {
      return {detail::decode_png(buf), path};
    }
    if (buf.size() >= 2 && buf[0] == 'P' && buf[1] == '6') return {detail::decode_ppm(buf), path};
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  throw FormatError(path.string() + ": unsupported image format (expected PNG or binary PPM)");
}

/// Writes PNG or PPM by extension; values are clamped to [0,255] and rounded.
inline void save_image(const Tensor& pixels, const std::filesystem::path& path) {
  const auto rgb = detail::to_interleaved(pixels);
  const std::size_t h = pixels.shape().h, w = pixels.shape().w;
  const std::string ext = detail::lower_ext(path);
  if (ext == ".ppm") {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path.string() + "' for writing");
    f << "P6\n" << w << ' ' << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!f) throw Error("failed writing '" + path.string() + "'");
    return;
  }
  if (ext != ".png") throw FormatError("cannot save '" + path.string() + "': use .png or .ppm");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, rgb.data(), 0, nullptr)) {
    throw Error("PNG write failed for '" + path.string() + "': " + img.message);
  }
}

inline void save_image(const Image& img, const std::filesystem::path& path) { save_image(img.pixels, path); }

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string e = detail::lower_ext(p);
  return e == ".png" || e == ".ppm";
}

/// Image files of a flat directory, sorted by filename.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory: '" + dir.string() + "'");
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  return out;
}

}  // namespace swiftsr
