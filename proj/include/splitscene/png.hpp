#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "splitscene/scene.hpp"

namespace splitscene::png {

namespace detail {

inline void write_to_vector(png_structp p, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
  out->insert(out->end(), data, data + len);
}
inline void flush_noop(png_structp) {}

struct ReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

inline void read_from_memory(png_structp p, png_bytep out, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(p));
  if (cur->pos + len > cur->size) png_error(p, "truncated PNG");
  std::memcpy(out, cur->data + cur->pos, len);
  cur->pos += len;
}

// Encodes rows of `bit_depth` samples; each row has width*channels samples.
inline std::vector<std::uint8_t> encode(int width, int height, int channels, int bit_depth,
                                        const std::vector<std::uint8_t>& raw) {
  std::vector<std::uint8_t> out;
  png_structp p = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(p);
  if (setjmp(png_jmpbuf(p))) {
    png_destroy_write_struct(&p, &info);
    throw Error("PNG encoding failed");
  }
  png_set_write_fn(p, &out, write_to_vector, flush_noop);
  const int color_type = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(p, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(p, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  for (int y = 0; y < height; ++y)
    png_write_row(p, const_cast<png_bytep>(raw.data() + stride * static_cast<std::size_t>(y)));
  png_write_end(p, nullptr);
  png_destroy_write_struct(&p, &info);
  return out;
}

struct Decoded {
  int width = 0, height = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint8_t> raw;  // big-endian samples for 16-bit
};

inline Decoded decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw InputError("not a PNG file");
  png_structp p = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(p);
  if (setjmp(png_jmpbuf(p))) {
    png_destroy_read_struct(&p, &info, nullptr);
    throw InputError("malformed PNG");
  }
  ReadCursor cur{bytes.data(), bytes.size(), 0};
  png_set_read_fn(p, &cur, read_from_memory);
  png_read_info(p, info);
  Decoded d;
  d.width = static_cast<int>(png_get_image_width(p, info));
  d.height = static_cast<int>(png_get_image_height(p, info));
  d.bit_depth = png_get_bit_depth(p, info);
  const int ct = png_get_color_type(p, info);
  if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(p);
  if (ct == PNG_COLOR_TYPE_GRAY && d.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(p);
  if (ct & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(p);
  png_read_update_info(p, info);
  d.channels = png_get_channels(p, info);
  d.bit_depth = png_get_bit_depth(p, info);
  const std::size_t stride = png_get_rowbytes(p, info);
  d.raw.resize(stride * static_cast<std::size_t>(d.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(d.height));
  for (int y = 0; y < d.height; ++y) rows[static_cast<std::size_t>(y)] = d.raw.data() + stride * y;
  png_read_image(p, rows.data());
  png_read_end(p, nullptr);
  png_destroy_read_struct(&p, &info, nullptr);
  return d;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes;
  std::uint8_t buf[1 << 14];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) bytes.insert(bytes.end(), buf, buf + n);
  std::fclose(f);
  return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw InputError("cannot write " + path.string());
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
  std::fclose(f);
  if (!ok) throw InputError("short write to " + path.string());
}

}  // namespace detail

/// 8-bit RGB (or gray) PNG of an image in [0,1]; values are clamped and rounded.
inline std::vector<std::uint8_t> encode_rgb(const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw Error("PNG export needs 1 or 3 channels");
  std::vector<std::uint8_t> raw(img.data.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.f, 1.f) * 255.f));
  return detail::encode(img.width, img.height, img.channels, 8, raw);
}

/// 16-bit grayscale PNG; pixel value = label.
inline std::vector<std::uint8_t> encode_labels(const LabelMap& m) {
  std::vector<std::uint8_t> raw(m.labels.size() * 2);
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    raw[2 * i] = static_cast<std::uint8_t>(m.labels[i] >> 8);
    raw[2 * i + 1] = static_cast<std::uint8_t>(m.labels[i] & 0xff);
  }
  return detail::encode(m.width, m.height, 1, 16, raw);
}

inline Image decode_rgb(const std::vector<std::uint8_t>& bytes) {
  const auto d = detail::decode(bytes);
  Image img(d.width, d.height, 3);
  const int bps = d.bit_depth / 8;
  const double maxv = d.bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src_c = d.channels >= 3 ? c : 0;
        const std::size_t off =
            ((static_cast<std::size_t>(y) * d.width + x) * d.channels + src_c) * bps;
        const unsigned v = bps == 2 ? (d.raw[off] << 8) | d.raw[off + 1] : d.raw[off];
        img.at(x, y, c) = static_cast<float>(v / maxv);
      }
  return img;
}

inline LabelMap decode_labels(const std::vector<std::uint8_t>& bytes) {
  const auto d = detail::decode(bytes);
  if (d.channels != 1) throw InputError("mask PNG must be single-channel");
  LabelMap m(d.width, d.height);
  for (std::size_t i = 0; i < m.labels.size(); ++i)
    m.labels[i] = d.bit_depth == 16 ? static_cast<std::uint16_t>((d.raw[2 * i] << 8) | d.raw[2 * i + 1])
                                    : d.raw[i];
  return m;
}

inline void write_rgb(const std::filesystem::path& path, const Image& img) {
  detail::write_file(path, encode_rgb(img));
}
inline void write_labels(const std::filesystem::path& path, const LabelMap& m) {
  detail::write_file(path, encode_labels(m));
}
inline Image read_rgb(const std::filesystem::path& path) { return decode_rgb(detail::read_file(path)); }
inline LabelMap read_labels(const std::filesystem::path& path) {
  return decode_labels(detail::read_file(path));
}

}  // namespace splitscene::png
