#pragma once

// Procedural two-room gridworld: spec sampling, collision-aware pose
// dynamics, a scripted loop-traversal policy, and an egocentric tile
// rasterizer. Stands in for a 3D maze at desk scale — out-of-view content
// still has to be remembered, which is the property under study.

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <utility>
#include <vector>

#include "memstream/common.hpp"

namespace memstream {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

enum class Action : std::uint8_t {
  Forward = 0,
  TurnLeft = 1,
  TurnRight = 2,
  Stay = 3,
};

/// Heading 0=north (−y), 1=east (+x), 2=south (+y), 3=west (−x).
struct Pose {
  int x = 0;
  int y = 0;
  int heading = 0;

  bool operator==(const Pose&) const = default;
};

struct MazeObject {
  int x = 0;
  int y = 0;
  int color = 0;  // palette index

  bool operator==(const MazeObject&) const = default;
};

/// Two rooms separated by a vertical wall with a single doorway.
struct MazeSpec {
  int grid_w = 11;
  int grid_h = 7;
  int door_x = 5;
  int door_y = 3;
  int wall_hue = 0;  // palette index
  std::vector<MazeObject> objects;
  std::uint64_t seed = 0;

  bool operator==(const MazeSpec&) const = default;
};

/// Planar row-major RGB image, u8 per channel ([3][h][w] order).
struct Frame {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> rgb;

  bool operator==(const Frame&) const = default;
};

struct Episode {
  MazeSpec spec;
  std::vector<Frame> frames;
  std::vector<Action> actions;
  std::vector<Pose> poses;

  bool operator==(const Episode&) const = default;

  int length() const { return static_cast<int>(frames.size()); }
};

// ---------------------------------------------------------------------------
// Palette
// ---------------------------------------------------------------------------

/// The fixed 8-color palette shared by wall hues and objects.
inline const std::array<std::array<double, 3>, 8>& palette() {
  static const std::array<std::array<double, 3>, 8> kColors = {{
      {0.85, 0.20, 0.20},  // red
      {0.20, 0.80, 0.25},  // green
      {0.25, 0.35, 0.90},  // blue
      {0.90, 0.85, 0.20},  // yellow
      {0.85, 0.30, 0.85},  // magenta
      {0.25, 0.80, 0.85},  // cyan
      {0.90, 0.55, 0.15},  // orange
      {0.55, 0.25, 0.80},  // purple
  }};
  return kColors;
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline bool in_grid(const MazeSpec& spec, int x, int y) {
  return x >= 0 && x < spec.grid_w && y >= 0 && y < spec.grid_h;
}

inline bool is_wall(const MazeSpec& spec, int x, int y) {
  if (!in_grid(spec, x, y)) return true;  // outside counts as solid
  if (x == 0 || y == 0 || x == spec.grid_w - 1 || y == spec.grid_h - 1) {
    return true;
  }
  if (x == spec.door_x) return y != spec.door_y;
  return false;
}

inline constexpr std::array<int, 4> kDx = {0, 1, 0, -1};
inline constexpr std::array<int, 4> kDy = {-1, 0, 1, 0};

/// One step of the dynamics; walking into a wall leaves the pose unchanged.
inline Pose step_pose(const MazeSpec& spec, Pose pose, Action action) {
  switch (action) {
    case Action::Forward: {
      const int nx = pose.x + kDx[pose.heading];
      const int ny = pose.y + kDy[pose.heading];
      if (!is_wall(spec, nx, ny)) {
        pose.x = nx;
        pose.y = ny;
      }
      return pose;
    }
    case Action::TurnLeft:
      pose.heading = (pose.heading + 3) % 4;
      return pose;
    case Action::TurnRight:
      pose.heading = (pose.heading + 1) % 4;
      return pose;
    case Action::Stay:
      return pose;
  }
  throw ContractError(msg("unknown action value ",
                          static_cast<int>(action)));
}

// ---------------------------------------------------------------------------
// Spec sampling
// ---------------------------------------------------------------------------

/// Draws the maze layout for a seed: doorway row, wall hue, and 2–4 objects
/// on floor cells. Deterministic in the seed.
inline MazeSpec sample_maze_spec(std::uint64_t seed) {
  RandomSource rng(derive_seed(seed, "maze_spec"));
  MazeSpec spec;
  spec.seed = seed;
  spec.door_y =
      1 + static_cast<int>(rng.randint(static_cast<std::uint64_t>(spec.grid_h - 2)));
  spec.wall_hue = static_cast<int>(rng.randint(8));

  const int n_objects = 2 + static_cast<int>(rng.randint(3));
  while (static_cast<int>(spec.objects.size()) < n_objects) {
    const int x =
        1 + static_cast<int>(rng.randint(static_cast<std::uint64_t>(spec.grid_w - 2)));
    const int y =
        1 + static_cast<int>(rng.randint(static_cast<std::uint64_t>(spec.grid_h - 2)));
    if (is_wall(spec, x, y)) continue;
    bool taken = false;
    for (const MazeObject& o : spec.objects) {
      if (o.x == x && o.y == y) taken = true;
    }
    if (taken) continue;
    spec.objects.push_back({x, y, static_cast<int>(rng.randint(8))});
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Scripted loop policy
// ---------------------------------------------------------------------------

namespace detail {

/// BFS shortest path between floor cells (fixed neighbor order N,E,S,W, so
/// routes are deterministic). Returns the cell sequence including both ends.
inline std::vector<std::pair<int, int>> bfs_path(const MazeSpec& spec, int sx,
                                                 int sy, int tx, int ty) {
  const int w = spec.grid_w, h = spec.grid_h;
  std::vector<int> prev(w * h, -1);
  std::deque<std::pair<int, int>> queue;
  queue.push_back({sx, sy});
  prev[sy * w + sx] = sy * w + sx;
  while (!queue.empty()) {
    auto [x, y] = queue.front();
    queue.pop_front();
    if (x == tx && y == ty) break;
    for (int dir = 0; dir < 4; ++dir) {
      const int nx = x + kDx[dir], ny = y + kDy[dir];
      if (is_wall(spec, nx, ny) || prev[ny * w + nx] >= 0) continue;
      prev[ny * w + nx] = y * w + x;
      queue.push_back({nx, ny});
    }
  }
  if (prev[ty * w + tx] < 0) {
    throw ContractError(msg("no path between (", sx, ",", sy, ") and (", tx,
                            ",", ty, ") — maze invariant broken"));
  }
  std::vector<std::pair<int, int>> path;
  int cur = ty * w + tx;
  while (true) {
    path.push_back({cur % w, cur / w});
    if (prev[cur] == cur) break;
    cur = prev[cur];
  }
  std::reverse(path.begin(), path.end());
  return path;
}

/// Actions that walk `pose` along `path` (turn toward the next cell, then
/// forward). Appends to `out`; returns the final pose.
inline Pose emit_path_actions(const MazeSpec& spec,
                              const std::vector<std::pair<int, int>>& path,
                              Pose pose, std::vector<Action>& out) {
  for (std::size_t i = 1; i < path.size(); ++i) {
    const int dx = path[i].first - path[i - 1].first;
    const int dy = path[i].second - path[i - 1].second;
    int want = 0;
    for (int dir = 0; dir < 4; ++dir) {
      if (kDx[dir] == dx && kDy[dir] == dy) want = dir;
    }
    const int delta = (want - pose.heading + 4) % 4;
    if (delta == 1) {
      out.push_back(Action::TurnRight);
      pose = step_pose(spec, pose, Action::TurnRight);
    } else if (delta == 3) {
      out.push_back(Action::TurnLeft);
      pose = step_pose(spec, pose, Action::TurnLeft);
    } else if (delta == 2) {
      out.push_back(Action::TurnRight);
      pose = step_pose(spec, pose, Action::TurnRight);
      out.push_back(Action::TurnRight);
      pose = step_pose(spec, pose, Action::TurnRight);
    }
    out.push_back(Action::Forward);
    pose = step_pose(spec, pose, Action::Forward);
  }
  return pose;
}

/// One full loop from `pose` through the far-room waypoint and back to the
/// start cell. Collision-free by construction (paths avoid walls).
inline Pose emit_loop(const MazeSpec& spec, Pose pose, int wx, int wy,
                      std::vector<Action>& out) {
  const int sx = pose.x, sy = pose.y;
  pose = emit_path_actions(spec, bfs_path(spec, sx, sy, wx, wy), pose, out);
  pose = emit_path_actions(spec, bfs_path(spec, wx, wy, sx, sy), pose, out);
  return pose;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Rasterizer
// ---------------------------------------------------------------------------

/// Crop is 9×9 cells centered on the agent and rotated so the heading points
/// up. Cell row/column for a pixel index in a res-pixel image.
inline int pixel_cell(int p, int res) { return (p * 9) / res; }

/// Egocentric observation: walls carry the wall hue, objects their palette
/// colors, the agent a fixed white marker at center, floor dark gray,
/// out-of-grid black. Quantized straight to u8 so stored episodes are the
/// single source of pixel truth.
inline Frame render_observation(const MazeSpec& spec, const Pose& pose,
                                int res = 32) {
  if (res < 9) {
    throw ContractError(msg("observation resolution ", res,
                            " cannot resolve a 9-cell crop"));
  }
  static const std::array<double, 3> kFloor = {0.12, 0.12, 0.12};
  static const std::array<double, 3> kVoid = {0.0, 0.0, 0.0};
  static const std::array<double, 3> kAgent = {0.95, 0.95, 0.95};

  // Color per crop cell, crop coords cx,cy in [-4,4]; cy=-4 is ahead.
  std::array<std::array<double, 3>, 81> cells;
  for (int cy = -4; cy <= 4; ++cy) {
    for (int cx = -4; cx <= 4; ++cx) {
      int wx = 0, wy = 0;
      switch (pose.heading) {
        case 0: wx = pose.x + cx; wy = pose.y + cy; break;
        case 1: wx = pose.x - cy; wy = pose.y + cx; break;
        case 2: wx = pose.x - cx; wy = pose.y - cy; break;
        case 3: wx = pose.x + cy; wy = pose.y - cx; break;
        default:
          throw ContractError(msg("invalid heading ", pose.heading));
      }
      std::array<double, 3> color;
      if (cx == 0 && cy == 0) {
        color = kAgent;
      } else if (!in_grid(spec, wx, wy)) {
        color = kVoid;
      } else if (is_wall(spec, wx, wy)) {
        color = palette()[spec.wall_hue];
      } else {
        color = kFloor;
        for (const MazeObject& o : spec.objects) {
          if (o.x == wx && o.y == wy) color = palette()[o.color];
        }
      }
      cells[(cy + 4) * 9 + (cx + 4)] = color;
    }
  }

  Frame frame;
  frame.h = res;
  frame.w = res;
  frame.rgb.resize(3 * res * res);
  for (int py = 0; py < res; ++py) {
    const int cy = pixel_cell(py, res);
    for (int px = 0; px < res; ++px) {
      const int cx = pixel_cell(px, res);
      const std::array<double, 3>& c = cells[cy * 9 + cx];
      for (int ch = 0; ch < 3; ++ch) {
        frame.rgb[(ch * res + py) * res + px] =
            static_cast<std::uint8_t>(c[ch] * 255.0 + 0.5);
      }
    }
  }
  return frame;
}

// ---------------------------------------------------------------------------
// Episode generation
// ---------------------------------------------------------------------------

/// Deterministic episode: the scripted policy loops start → far-room
/// waypoint → start for as long as a full loop fits, then stays. frames[t]
/// observes poses[t]; actions[t] transitions poses[t] → poses[t+1].
inline Episode generate_episode(std::uint64_t seed, int t_len,
                                int obs_res = 32) {
  if (t_len < 2) {
    throw ContractError(msg("episode length ", t_len, " below minimum 2"));
  }
  MazeSpec spec = sample_maze_spec(seed);
  RandomSource rng(derive_seed(seed, "maze_policy"));

  auto draw_floor_cell = [&](int x_lo, int x_hi) {
    while (true) {
      const int x = x_lo + static_cast<int>(rng.randint(
                               static_cast<std::uint64_t>(x_hi - x_lo + 1)));
      const int y = 1 + static_cast<int>(rng.randint(
                            static_cast<std::uint64_t>(spec.grid_h - 2)));
      if (!is_wall(spec, x, y)) return std::pair<int, int>{x, y};
    }
  };
  const auto [sx, sy] = draw_floor_cell(1, spec.door_x - 1);       // left room
  const auto [wx, wy] =
      draw_floor_cell(spec.door_x + 1, spec.grid_w - 2);           // right room

  const Pose start{sx, sy, static_cast<int>(rng.randint(4))};

  // Plan loops until another full one cannot fit. Planning is re-run from
  // the current pose each time, so repeated loops stay consistent even
  // though the heading at the loop seam differs from the initial one.
  std::vector<Action> actions;
  Pose pose = start;
  while (true) {
    std::vector<Action> loop;
    detail::emit_loop(spec, pose, wx, wy, loop);
    if (static_cast<int>(actions.size() + loop.size()) > t_len) break;
    Pose probe = pose;
    for (const Action a : loop) probe = step_pose(spec, probe, a);
    actions.insert(actions.end(), loop.begin(), loop.end());
    pose = probe;
  }
  while (static_cast<int>(actions.size()) < t_len) {
    actions.push_back(Action::Stay);
  }
  actions.resize(t_len);

  Episode episode;
  episode.spec = spec;
  episode.actions = actions;
  episode.poses.resize(t_len);
  episode.frames.resize(t_len);
  Pose cur = start;
  episode.poses[0] = cur;
  episode.frames[0] = render_observation(spec, cur, obs_res);
  for (int t = 1; t < t_len; ++t) {
    cur = step_pose(spec, cur, actions[t - 1]);
    episode.poses[t] = cur;
    episode.frames[t] = render_observation(spec, cur, obs_res);
  }
  return episode;
}

}  // namespace memstream
