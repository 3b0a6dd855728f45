#pragma once

// Versioned checkpoint envelope shared by codec and world-model weights:
//   magic "MSCK", u32 version, kind string, config text block,
//   u32 param count, per param: name, u8 ndim, u32 extents, f64 values;
//   trailing u32 CRC32 over every preceding byte. Little-endian.

#include <zlib.h>

#include <fstream>
#include <string>
#include <vector>

#include "memstream/bytes.hpp"
#include "memstream/nn.hpp"

namespace memstream {

inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> params;
};

inline void save_checkpoint(const std::string& path, const std::string& kind,
                            const std::string& config_text,
                            const ParamSet& params) {
  detail::ByteWriter w;
  w.bytes(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4);
  w.u32(kCheckpointVersion);
  w.str(kind);
  w.str(config_text);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.items()) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) {
      w.u32(static_cast<std::uint32_t>(t.shape()[i]));
    }
    for (const double v : t.data()) w.f64(v);
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, w.buf.data(), static_cast<uInt>(w.buf.size())));
  w.u32(crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError(msg("cannot open checkpoint '", path, "' for writing"));
  }
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  if (!out) {
    throw IoError(msg("short write to checkpoint '", path, "'"));
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError(msg("cannot open checkpoint '", path,
                      "' — run the producing stage first"));
  }
  std::vector<std::uint8_t> buf(
      (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) {
    throw FormatError(msg("checkpoint '", path, "' too small"));
  }
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(buf[body + i]) << (8 * i);
  const auto actual = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(body)));
  if (stored != actual) {
    throw FormatError(msg("checksum mismatch in checkpoint '", path, "'"));
  }

  detail::ByteReader r{buf.data(), body};
  char magic[4];
  r.bytes(reinterpret_cast<std::uint8_t*>(magic), 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw FormatError(msg("bad magic in checkpoint '", path, "'"));
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(msg("unsupported checkpoint version ", version, " in '",
                          path, "'"));
  }
  Checkpoint ckpt;
  ckpt.kind = r.str();
  ckpt.config_text = r.str();
  const std::uint32_t count = r.u32();
  ckpt.params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const int ndim = r.u8();
    Shape shape(ndim);
    for (int d = 0; d < ndim; ++d) shape[d] = r.u32();
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = r.f64();
    ckpt.params.emplace_back(name, Tensor(shape, std::move(values)));
  }
  return ckpt;
}

/// Copies checkpoint values into an already-built ParamSet, validating the
/// kind tag and every name/shape. Returns the stored config text.
inline std::string load_checkpoint_into(const std::string& path,
                                        const std::string& expected_kind,
                                        ParamSet& params) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != expected_kind) {
    throw FormatError(msg("checkpoint '", path, "' holds kind '", ckpt.kind,
                          "', expected '", expected_kind, "'"));
  }
  if (ckpt.params.size() != params.size()) {
    throw FormatError(msg("checkpoint '", path, "' has ", ckpt.params.size(),
                          " parameters, model expects ", params.size()));
  }
  for (auto& [name, stored] : ckpt.params) {
    if (!params.has(name)) {
      throw FormatError(msg("checkpoint '", path,
                            "' carries unknown parameter '", name, "'"));
    }
    Tensor& dst = params.at(name);
    if (dst.shape() != stored.shape()) {
      throw FormatError(msg("parameter '", name, "' shape ",
                            shape_str(stored.shape()),
                            " in checkpoint does not match model shape ",
                            shape_str(dst.shape())));
    }
    dst.data() = stored.data();
  }
  return ckpt.config_text;
}

}  // namespace memstream
