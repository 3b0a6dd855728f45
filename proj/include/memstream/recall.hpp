#pragma once

// Two-phase state-recall evaluation. Phase 1 streams the context and the
// true continuation through the memory mechanism ("burn-in"); phase 2 rewinds
// the sliding window to the initial context — keeping the memory state — and
// rolls the model forward in imagination for the same horizon. What the model
// reproduces from memory is then scored with SSIM, image MSE, latent MSE and
// cycle MSE, and pairings are compared by ordinal rank aggregation.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "memstream/image.hpp"
#include "memstream/metrics.hpp"
#include "memstream/predictor.hpp"

namespace memstream {

// ---------------------------------------------------------------------------
// Recall protocol
// ---------------------------------------------------------------------------

/// One recall evaluation: split an episode at index t. The context covers
/// frames [t-C, t), the query the H frames [t, t+H).
struct RecallTask {
  const Episode* episode = nullptr;
  long t = 0;
  long context = 9;
  long horizon = 10;

  void validate() const {
    if (!episode) throw ContractError("recall task: missing episode");
    if (context < 1 || horizon < 1) {
      throw ContractError("recall task: context and horizon must be >= 1");
    }
    if (t < context) {
      throw ContractError(msg("recall task: split t=", t,
                              " leaves no room for C=", context,
                              " context frames"));
    }
    const long t_len = episode->length();
    if (t + horizon > t_len) {
      throw ContractError(msg("recall task: query [", t, ",", t + horizon,
                              ") exceeds episode length ", t_len));
    }
    if (episode->actions.size() < static_cast<std::size_t>(t + horizon - 1)) {
      throw ContractError("recall task: episode actions too short");
    }
  }
};

struct RecallResult {
  std::vector<LatentFrame> pred_latents;  // H predictions, times t..t+H-1
  std::vector<Tensor> decoded;            // H clamped [3,res,res] images
};

/// Runs the two-phase protocol. `burn_in=false` skips phase 1 entirely — a
/// diagnostics hook for isolating what the memory state contributes; the
/// protocol proper always burns in.
inline RecallResult run_recall(const WorldModel& model, const Codec& codec,
                               const RecallTask& task, bool burn_in = true) {
  task.validate();
  if (model.cfg.context != task.context) {
    throw ContractError(msg("run_recall: task context ", task.context,
                            " vs model context ", model.cfg.context));
  }
  NoGradGuard eval_only;
  const Episode& ep = *task.episode;

  std::vector<LatentFrame> lat;  // frames [t-C, t+H)
  lat.reserve(static_cast<std::size_t>(task.context + task.horizon));
  for (long i = task.t - task.context; i < task.t + task.horizon; ++i) {
    lat.push_back(codec.encode_frame(
        frame_to_tensor(ep.frames[static_cast<std::size_t>(i)]), i));
  }

  MemoryState mem = model.make_state();
  if (burn_in) {
    encode_history(model.encoder, mem, lat);
  }

  // Phase 2: the window rewinds to the initial context; the memory state is
  // carried over. Predicted frames re-use burnt-in source times, so the
  // memory is read, never advanced, during imagination.
  LatentSeq ctx;
  for (long i = 0; i < task.context; ++i) {
    ctx.frames.push_back(lat[static_cast<std::size_t>(i)]);
    ctx.actions.push_back(static_cast<int>(
        ep.actions[static_cast<std::size_t>(task.t - task.context + i)]));
  }
  std::vector<int> step_actions;
  step_actions.reserve(static_cast<std::size_t>(task.horizon));
  for (long h = 0; h < task.horizon; ++h) {
    step_actions.push_back(static_cast<int>(
        ep.actions[static_cast<std::size_t>(task.t - 1 + h)]));
  }

  RecallResult out;
  out.pred_latents = model.rollout_imagination(mem, ctx, step_actions);
  out.decoded.reserve(out.pred_latents.size());
  for (const LatentFrame& z : out.pred_latents) {
    out.decoded.push_back(codec.decode_latent(z));
  }
  return out;
}

/// ||encode(decode(z)) - z||^2, mean over elements: how far the predicted
/// latent sits from the codec's image manifold.
inline double cycle_mse(const LatentFrame& pred, const Codec& codec) {
  NoGradGuard ng;
  const Tensor image = codec.decode_latent(pred);
  const Tensor again = codec.encode_frame(image, pred.source_time).tokens;
  return mean_squared_error(again, pred.tokens);
}

// ---------------------------------------------------------------------------
// Rank aggregation
// ---------------------------------------------------------------------------

/// One table row: a pairing plus its metric means. LPIPS is carried only
/// when reproducing published tables; it is absent from desk-scale runs.
struct MetricRow {
  EncoderKind encoder = EncoderKind::None;
  InjectorKind injector = InjectorKind::None;
  double ssim = 0.0;
  std::optional<double> lpips;
  double img_mse = 0.0;
  double latent_mse = 0.0;
  double cycle_mse = 0.0;

  void validate() const {
    if (ssim < -1.0 || ssim > 1.0) {
      throw ContractError(msg("metric row: ssim ", ssim, " outside [-1,1]"));
    }
    if (img_mse < 0.0 || latent_mse < 0.0 || cycle_mse < 0.0 ||
        (lpips && *lpips < 0.0)) {
      throw ContractError("metric row: error metrics must be >= 0");
    }
  }
};

struct RankTable {
  std::vector<MetricRow> rows;
  std::vector<double> recon_rank;   // per row, mean rank over recon metrics
  std::vector<double> latent_rank;  // per row, mean rank over latent metrics
};

enum class MetricId { Ssim, Lpips, ImgMse, LatentMse, CycleMse };

inline const std::vector<MetricId>& recon_metric_ids() {
  static const std::vector<MetricId> ids = {MetricId::Ssim, MetricId::Lpips,
                                            MetricId::ImgMse};
  return ids;
}

inline const std::vector<MetricId>& latent_metric_ids() {
  static const std::vector<MetricId> ids = {MetricId::LatentMse,
                                            MetricId::CycleMse};
  return ids;
}

namespace detail {

inline double metric_value(const MetricRow& r, MetricId id) {
  switch (id) {
    case MetricId::Ssim: return r.ssim;
    case MetricId::Lpips: return *r.lpips;
    case MetricId::ImgMse: return r.img_mse;
    case MetricId::LatentMse: return r.latent_mse;
    case MetricId::CycleMse: return r.cycle_mse;
  }
  throw ContractError("unknown metric id");
}

inline bool higher_is_better(MetricId id) { return id == MetricId::Ssim; }

/// 1-based ordinal ranks for one metric; ties keep table row order.
inline std::vector<double> ordinal_ranks(const std::vector<MetricRow>& rows,
                                         MetricId id) {
  std::vector<std::size_t> idx(rows.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) {
                     const double va = metric_value(rows[a], id);
                     const double vb = metric_value(rows[b], id);
                     return higher_is_better(id) ? va > vb : va < vb;
                   });
  std::vector<double> rank(rows.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    rank[idx[k]] = static_cast<double>(k + 1);
  }
  return rank;
}

/// Drops metrics whose values are missing: LPIPS participates only when
/// every row carries it; a half-filled column is a caller bug.
inline std::vector<MetricId> available_subset(
    const std::vector<MetricRow>& rows, const std::vector<MetricId>& ids) {
  std::vector<MetricId> kept;
  for (MetricId id : ids) {
    if (id == MetricId::Lpips) {
      const std::size_t n_with =
          static_cast<std::size_t>(std::count_if(
              rows.begin(), rows.end(),
              [](const MetricRow& r) { return r.lpips.has_value(); }));
      if (n_with == 0) continue;
      if (n_with != rows.size()) {
        throw ContractError(
            "rank_aggregate: lpips present on some rows but not all");
      }
    }
    kept.push_back(id);
  }
  return kept;
}

}  // namespace detail

/// Ranks every row per metric (SSIM descending, error metrics ascending,
/// ordinal tie-break by row order) and averages the ranks over the recon and
/// latent metric groups.
inline RankTable rank_aggregate(
    const std::vector<MetricRow>& rows,
    const std::vector<MetricId>& recon = recon_metric_ids(),
    const std::vector<MetricId>& latent = latent_metric_ids()) {
  if (rows.size() < 2) {
    throw ContractError(msg("rank_aggregate: need >= 2 rows, got ",
                            rows.size()));
  }
  if (recon.empty() || latent.empty()) {
    throw ContractError("rank_aggregate: empty metric list");
  }
  for (const MetricRow& r : rows) r.validate();

  RankTable table;
  table.rows = rows;
  table.recon_rank.assign(rows.size(), 0.0);
  table.latent_rank.assign(rows.size(), 0.0);

  const auto accumulate = [&](const std::vector<MetricId>& ids,
                              std::vector<double>& out) {
    const std::vector<MetricId> used = detail::available_subset(rows, ids);
    if (used.empty()) {
      throw ContractError("rank_aggregate: no usable metric in group");
    }
    for (MetricId id : used) {
      const std::vector<double> r = detail::ordinal_ranks(rows, id);
      for (std::size_t i = 0; i < rows.size(); ++i) out[i] += r[i];
    }
    const double inv = 1.0 / static_cast<double>(used.size());
    for (double& v : out) v *= inv;
  };
  accumulate(recon, table.recon_rank);
  accumulate(latent, table.latent_rank);
  return table;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace detail {

/// Shortest decimal string that parses back to the same double.
inline std::string exact_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// 4-significant-digit presentation for the markdown mirror.
inline std::string pretty_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

inline const char* encoder_display(EncoderKind k) {
  switch (k) {
    case EncoderKind::None: return "Baseline";
    case EncoderKind::Cache: return "Cache";
    case EncoderKind::Ssm: return "SSM";
    case EncoderKind::Titans: return "Titans";
  }
  return "?";
}

inline const char* injector_display(InjectorKind k) {
  switch (k) {
    case InjectorKind::None: return "None";
    case InjectorKind::Prepend: return "Context Pre-pend";
    case InjectorKind::Additive: return "Additive";
    case InjectorKind::CrossAttention: return "Cross Attention";
    case InjectorKind::AdaNorm: return "AdaNorm";
    case InjectorKind::Lora: return "LoRA";
  }
  return "?";
}

}  // namespace detail

inline constexpr const char* kReportCsvHeader =
    "encoder,injector,ssim,img_mse,latent_mse,cycle_mse,recon_rank,"
    "latent_rank";

/// Writes `report.csv` (exact doubles) and `report.md` (4-digit mirror of
/// the published table layout) under `dir`. Byte output is a pure function
/// of the table.
inline void emit_report(const RankTable& table, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::ostringstream csv;
  csv << kReportCsvHeader << "\n";
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const MetricRow& r = table.rows[i];
    csv << encoder_name(r.encoder) << "," << injector_name(r.injector) << ","
        << detail::exact_double(r.ssim) << ","
        << detail::exact_double(r.img_mse) << ","
        << detail::exact_double(r.latent_mse) << ","
        << detail::exact_double(r.cycle_mse) << ","
        << detail::exact_double(table.recon_rank[i]) << ","
        << detail::exact_double(table.latent_rank[i]) << "\n";
  }

  const bool lpips = !table.rows.empty() && table.rows[0].lpips.has_value();
  std::ostringstream md;
  md << "# Encoder x injector comparison\n\n";
  md << "| Encoding | Injection | SSIM &uarr; |";
  if (lpips) md << " LPIPS &darr; |";
  md << " Img MSE &darr; | Latent MSE &darr; | Cycle MSE &darr; |"
     << " Recon. Rank | Latent Rank |\n";
  md << "|---|---|---|";
  if (lpips) md << "---|";
  md << "---|---|---|---|---|\n";
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const MetricRow& r = table.rows[i];
    md << "| " << detail::encoder_display(r.encoder) << " | "
       << detail::injector_display(r.injector) << " | "
       << detail::pretty_double(r.ssim) << " |";
    if (lpips) md << " " << detail::pretty_double(*r.lpips) << " |";
    md << " " << detail::pretty_double(r.img_mse) << " | "
       << detail::pretty_double(r.latent_mse) << " | "
       << detail::pretty_double(r.cycle_mse) << " | "
       << detail::pretty_double(table.recon_rank[i]) << " | "
       << detail::pretty_double(table.latent_rank[i]) << " |\n";
  }

  for (const auto& [name, text] :
       {std::pair<const char*, const std::ostringstream*>{"report.csv", &csv},
        {"report.md", &md}}) {
    const fs::path path = fs::path(dir) / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(msg("cannot open '", path.string(), "'"));
    const std::string s = text->str();
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!out) throw IoError(msg("short write to '", path.string(), "'"));
  }
}

/// Parses a report.csv written by emit_report back into a RankTable
/// (without LPIPS, which the CSV schema does not carry).
inline RankTable parse_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(msg("cannot open '", path, "'"));
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader) {
    throw IoError(msg("'", path, "': missing or unexpected CSV header"));
  }
  RankTable table;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) {
      throw IoError(msg("'", path, "' line ", line_no, ": expected 8 cells, got ",
                        cells.size()));
    }
    MetricRow r;
    r.encoder = parse_encoder(cells[0]);
    r.injector = parse_injector(cells[1]);
    r.ssim = std::stod(cells[2]);
    r.img_mse = std::stod(cells[3]);
    r.latent_mse = std::stod(cells[4]);
    r.cycle_mse = std::stod(cells[5]);
    table.rows.push_back(r);
    table.recon_rank.push_back(std::stod(cells[6]));
    table.latent_rank.push_back(std::stod(cells[7]));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Filmstrips
// ---------------------------------------------------------------------------

/// Lossless PNG filmstrip: the truth row on top (copied bitwise), then one
/// row per model, all over the same horizon.
inline void emit_strip(const std::vector<Frame>& truth,
                       const std::vector<std::vector<Frame>>& models,
                       const std::string& path) {
  if (truth.empty()) throw ContractError("emit_strip: empty truth row");
  for (const auto& row : models) {
    if (row.size() != truth.size()) {
      throw ContractError(msg("emit_strip: model row has ", row.size(),
                              " frames, truth has ", truth.size()));
    }
  }
  std::vector<Frame> rows;
  rows.push_back(compose_strip(truth));
  for (const auto& row : models) rows.push_back(compose_strip(row));

  constexpr int kGutter = 2;
  const int w = rows[0].w;
  const int h = rows[0].h;
  const int total_h = static_cast<int>(rows.size()) * h +
                      (static_cast<int>(rows.size()) - 1) * kGutter;
  Frame sheet;
  sheet.h = total_h;
  sheet.w = w;
  sheet.rgb.assign(static_cast<std::size_t>(3 * total_h * w), 128);
  int y0 = 0;
  for (const Frame& row : rows) {
    if (row.w != w || row.h != h) {
      throw ContractError("emit_strip: rows must share one resolution");
    }
    for (int ch = 0; ch < 3; ++ch) {
      std::copy(row.rgb.begin() + ch * h * w, row.rgb.begin() + (ch + 1) * h * w,
                sheet.rgb.begin() +
                    (static_cast<std::size_t>(ch) * total_h + y0) * w);
    }
    y0 += h + kGutter;
  }
  write_png(path, sheet);
}

}  // namespace memstream
