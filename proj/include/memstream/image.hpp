#pragma once

// Image plumbing: Frame <-> Tensor conversion, horizontal strip composition
// for qualitative reports, and a minimal PNG writer (8-bit RGB, zlib-backed).

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "memstream/maze.hpp"
#include "memstream/tensor.hpp"

namespace memstream {

/// u8 planar frame -> [3,h,w] tensor in [0,1].
inline Tensor frame_to_tensor(const Frame& frame) {
  std::vector<double> data(frame.rgb.size());
  for (std::size_t i = 0; i < frame.rgb.size(); ++i) {
    data[i] = frame.rgb[i] / 255.0;
  }
  return Tensor({3, frame.h, frame.w}, std::move(data));
}

/// [3,h,w] tensor -> u8 frame, clamping to [0,1] before quantization.
inline Frame tensor_to_frame(const Tensor& t) {
  if (t.ndim() != 3 || t.dim(0) != 3) {
    throw ShapeError(msg("expected [3,h,w] image tensor, got ",
                         shape_str(t.shape())));
  }
  Frame frame;
  frame.h = static_cast<int>(t.dim(1));
  frame.w = static_cast<int>(t.dim(2));
  frame.rgb.resize(t.numel());
  for (long i = 0; i < t.numel(); ++i) {
    const double v = std::min(1.0, std::max(0.0, t.data()[i]));
    frame.rgb[i] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
  }
  return frame;
}

/// Lays frames left-to-right with a 2-pixel mid-gray gutter between them.
inline Frame compose_strip(const std::vector<Frame>& frames) {
  if (frames.empty()) throw ContractError("compose_strip: no frames");
  const int h = frames[0].h, w = frames[0].w;
  constexpr int kGutter = 2;
  const int total_w =
      static_cast<int>(frames.size()) * w +
      (static_cast<int>(frames.size()) - 1) * kGutter;
  Frame strip;
  strip.h = h;
  strip.w = total_w;
  strip.rgb.assign(3 * h * total_w, 128);
  int x0 = 0;
  for (const Frame& f : frames) {
    if (f.h != h || f.w != w) {
      throw ContractError("compose_strip: frames must share one resolution");
    }
    for (int ch = 0; ch < 3; ++ch) {
      for (int y = 0; y < h; ++y) {
        std::copy(f.rgb.begin() + (ch * h + y) * w,
                  f.rgb.begin() + (ch * h + y) * w + w,
                  strip.rgb.begin() + (ch * h + y) * total_w + x0);
      }
    }
    x0 += w + kGutter;
  }
  return strip;
}

namespace detail {

inline void png_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back((v >> 24) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back(v & 0xff);
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
  png_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, out.data() + start, static_cast<uInt>(4 + data.size())));
  png_be32(out, crc);
}

}  // namespace detail

/// Writes an 8-bit RGB PNG. Scanlines use filter 0; compression is zlib's
/// default level.
inline void write_png(const std::string& path, const Frame& frame) {
  const int h = frame.h, w = frame.w;
  if (frame.rgb.size() != static_cast<std::size_t>(3 * h * w)) {
    throw ContractError(msg("frame byte count ", frame.rgb.size(),
                            " does not match ", h, "x", w));
  }
  // Interleave planar RGB into filtered scanlines.
  std::vector<std::uint8_t> raw((3 * w + 1) * h);
  for (int y = 0; y < h; ++y) {
    raw[y * (3 * w + 1)] = 0;  // filter: none
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        raw[y * (3 * w + 1) + 1 + x * 3 + ch] =
            frame.rgb[(ch * h + y) * w + x];
      }
    }
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> deflated(bound);
  if (compress2(deflated.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK) {
    throw IoError(msg("zlib compression failed for '", path, "'"));
  }
  deflated.resize(bound);

  std::vector<std::uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> ihdr;
  detail::png_be32(ihdr, static_cast<std::uint32_t>(w));
  detail::png_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", deflated);
  detail::png_chunk(out, "IEND", {});

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) {
    throw IoError(msg("cannot open '", path, "' for writing"));
  }
  file.write(reinterpret_cast<const char*>(out.data()),
             static_cast<std::streamsize>(out.size()));
  if (!file) {
    throw IoError(msg("short write to '", path, "'"));
  }
}

}  // namespace memstream
