#pragma once

// Binary episode store. Layout (little-endian):
//   magic "MMEP", u32 version, u32 episode count,
//   per episode:
//     maze spec block: u16 grid_w, grid_h, door_x, door_y; u8 wall_hue;
//                      u8 object count; per object i16 x, y + u8 color;
//                      u64 seed
//     u32 T, u16 obs_h, u16 obs_w,
//     T frames of 3·h·w u8 (planar row-major),
//     T actions u8,
//     T poses of i16 x, y, heading,
//   trailing u32 CRC32 over every preceding byte.

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "memstream/bytes.hpp"
#include "memstream/maze.hpp"

namespace memstream {

inline constexpr char kEpisodeMagic[4] = {'M', 'M', 'E', 'P'};
inline constexpr std::uint32_t kEpisodeVersion = 1;

namespace detail {

inline void write_spec(ByteWriter& w, const MazeSpec& spec) {
  w.u16(static_cast<std::uint16_t>(spec.grid_w));
  w.u16(static_cast<std::uint16_t>(spec.grid_h));
  w.u16(static_cast<std::uint16_t>(spec.door_x));
  w.u16(static_cast<std::uint16_t>(spec.door_y));
  w.u8(static_cast<std::uint8_t>(spec.wall_hue));
  w.u8(static_cast<std::uint8_t>(spec.objects.size()));
  for (const MazeObject& o : spec.objects) {
    w.i16(static_cast<std::int16_t>(o.x));
    w.i16(static_cast<std::int16_t>(o.y));
    w.u8(static_cast<std::uint8_t>(o.color));
  }
  w.u64(spec.seed);
}

inline MazeSpec read_spec(ByteReader& r) {
  MazeSpec spec;
  spec.grid_w = r.u16();
  spec.grid_h = r.u16();
  spec.door_x = r.u16();
  spec.door_y = r.u16();
  spec.wall_hue = r.u8();
  const int count = r.u8();
  spec.objects.resize(count);
  for (MazeObject& o : spec.objects) {
    o.x = r.i16();
    o.y = r.i16();
    o.color = r.u8();
  }
  spec.seed = r.u64();
  return spec;
}

}  // namespace detail

inline void write_episodes(const std::string& path,
                           const std::vector<Episode>& episodes) {
  detail::ByteWriter w;
  w.bytes(reinterpret_cast<const std::uint8_t*>(kEpisodeMagic), 4);
  w.u32(kEpisodeVersion);
  w.u32(static_cast<std::uint32_t>(episodes.size()));
  for (const Episode& ep : episodes) {
    const int t_len = ep.length();
    if (static_cast<int>(ep.actions.size()) != t_len ||
        static_cast<int>(ep.poses.size()) != t_len) {
      throw ContractError(msg("episode arrays disagree in length: ",
                              ep.frames.size(), " frames, ",
                              ep.actions.size(), " actions, ",
                              ep.poses.size(), " poses"));
    }
    detail::write_spec(w, ep.spec);
    w.u32(static_cast<std::uint32_t>(t_len));
    const int h = t_len ? ep.frames[0].h : 0;
    const int ww = t_len ? ep.frames[0].w : 0;
    w.u16(static_cast<std::uint16_t>(h));
    w.u16(static_cast<std::uint16_t>(ww));
    for (const Frame& f : ep.frames) {
      if (f.h != h || f.w != ww ||
          f.rgb.size() != static_cast<std::size_t>(3 * h * ww)) {
        throw ContractError("episode frames must share one resolution");
      }
      w.bytes(f.rgb.data(), f.rgb.size());
    }
    for (const Action a : ep.actions) {
      w.u8(static_cast<std::uint8_t>(a));
    }
    for (const Pose& p : ep.poses) {
      w.i16(static_cast<std::int16_t>(p.x));
      w.i16(static_cast<std::int16_t>(p.y));
      w.i16(static_cast<std::int16_t>(p.heading));
    }
  }
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, w.buf.data(), static_cast<uInt>(w.buf.size())));
  w.u32(crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError(msg("cannot open '", path, "' for writing"));
  }
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  if (!out) {
    throw IoError(msg("short write to '", path, "'"));
  }
}

inline std::vector<Episode> read_episodes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError(msg("cannot open '", path, "' for reading"));
  }
  std::vector<std::uint8_t> buf(
      (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 12 + 4) {
    throw FormatError(msg("episode file '", path, "' too small (",
                          buf.size(), " bytes)"));
  }
  // Validate the checksum before trusting any field.
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(buf[body + i]) << (8 * i);
  const std::uint32_t actual = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(body)));
  if (stored != actual) {
    throw FormatError(msg("checksum mismatch in '", path, "': stored ",
                          stored, ", computed ", actual));
  }

  detail::ByteReader r{buf.data(), body};
  char magic[4];
  r.bytes(reinterpret_cast<std::uint8_t*>(magic), 4);
  if (!std::equal(magic, magic + 4, kEpisodeMagic)) {
    throw FormatError(msg("bad magic in '", path, "'"));
  }
  const std::uint32_t version = r.u32();
  if (version != kEpisodeVersion) {
    throw FormatError(msg("unsupported episode file version ", version,
                          " (expected ", kEpisodeVersion, ")"));
  }
  const std::uint32_t count = r.u32();
  std::vector<Episode> episodes(count);
  for (Episode& ep : episodes) {
    ep.spec = detail::read_spec(r);
    const std::uint32_t t_len = r.u32();
    const int h = r.u16();
    const int w = r.u16();
    ep.frames.resize(t_len);
    for (Frame& f : ep.frames) {
      f.h = h;
      f.w = w;
      f.rgb.resize(3 * h * w);
      r.bytes(f.rgb.data(), f.rgb.size());
    }
    ep.actions.resize(t_len);
    for (Action& a : ep.actions) {
      const std::uint8_t v = r.u8();
      if (v > 3) {
        throw FormatError(msg("invalid action value ", int(v), " in '", path,
                              "'"));
      }
      a = static_cast<Action>(v);
    }
    ep.poses.resize(t_len);
    for (Pose& p : ep.poses) {
      p.x = r.i16();
      p.y = r.i16();
      p.heading = r.i16();
    }
  }
  if (r.pos != body) {
    throw FormatError(msg("trailing bytes in '", path, "': ", body - r.pos,
                          " after last episode"));
  }
  return episodes;
}

}  // namespace memstream
