#pragma once

// Stage orchestration over the experiment matrix: dataset generation, codec
// pretraining, per-pairing world-model training, recall evaluation across
// horizons, and report/filmstrip assembly. Every stage is deterministic per
// (config, seed) and drops a frozen copy of its resolved config next to its
// artifacts.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "memstream/checkpoint.hpp"
#include "memstream/config.hpp"
#include "memstream/recall.hpp"

namespace memstream {

// ---------------------------------------------------------------------------
// Naming and layout
// ---------------------------------------------------------------------------

inline std::string pairing_name(EncoderKind e, InjectorKind i) {
  if (e == EncoderKind::None && i == InjectorKind::None) return "baseline";
  return std::string(encoder_name(e)) + "_" + injector_name(i);
}

/// Baseline first, then encoders x injectors in published table row order
/// (the order is load-bearing: ordinal rank ties break by row).
inline const std::vector<std::pair<EncoderKind, InjectorKind>>&
experiment_matrix() {
  static const std::vector<std::pair<EncoderKind, InjectorKind>> m = [] {
    std::vector<std::pair<EncoderKind, InjectorKind>> v;
    v.emplace_back(EncoderKind::None, InjectorKind::None);
    for (EncoderKind e : {EncoderKind::Cache, EncoderKind::Ssm,
                          EncoderKind::Titans}) {
      for (InjectorKind i :
           {InjectorKind::Prepend, InjectorKind::Additive,
            InjectorKind::CrossAttention, InjectorKind::AdaNorm,
            InjectorKind::Lora}) {
        v.emplace_back(e, i);
      }
    }
    return v;
  }();
  return m;
}

struct OutPaths {
  std::filesystem::path root;

  explicit OutPaths(const std::string& out) : root(out) {}

  std::filesystem::path data_dir() const { return root / "data"; }
  std::filesystem::path train_data() const {
    return data_dir() / "train.bin";
  }
  std::filesystem::path eval_data() const { return data_dir() / "eval.bin"; }
  std::filesystem::path codec_dir() const { return root / "codec"; }
  std::filesystem::path codec_ckpt() const {
    return codec_dir() / "codec.ckpt";
  }
  std::filesystem::path train_dir(const std::string& name) const {
    return root / "train" / name;
  }
  std::filesystem::path model_ckpt(const std::string& name) const {
    return train_dir(name) / "model.ckpt";
  }
  std::filesystem::path eval_dir(const std::string& name) const {
    return root / "eval" / name;
  }
  std::filesystem::path metrics_csv(const std::string& name) const {
    return eval_dir(name) / "metrics.csv";
  }
  std::filesystem::path report_dir() const { return root / "report"; }
};

namespace detail {

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(msg("cannot open '", path.string(), "'"));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError(msg("short write to '", path.string(), "'"));
}

inline void freeze_config(const ExperimentConfig& cfg,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "config.txt", cfg.to_text());
}

inline void require_file(const std::filesystem::path& path,
                         const std::string& producing_stage) {
  if (!std::filesystem::exists(path)) {
    throw IoError(msg("missing '", path.string(), "' — run the ",
                      producing_stage, " stage first"));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Episode dataset files
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[4] = {'M', 'S', 'E', 'P'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_episodes(const std::string& path,
                          const std::vector<Episode>& episodes) {
  detail::ByteWriter w;
  w.bytes(reinterpret_cast<const std::uint8_t*>(kDatasetMagic), 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(episodes.size()));
  for (const Episode& ep : episodes) {
    if (ep.frames.empty() || ep.frames[0].h != ep.frames[0].w) {
      throw ContractError("save_episodes: frames must be square, nonempty");
    }
    w.u16(static_cast<std::uint16_t>(ep.frames[0].h));
    w.u32(static_cast<std::uint32_t>(ep.frames.size()));
    for (const Frame& f : ep.frames) {
      w.bytes(f.rgb.data(), f.rgb.size());
    }
    for (const Action a : ep.actions) {
      w.u8(static_cast<std::uint8_t>(a));
    }
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, w.buf.data(), static_cast<uInt>(w.buf.size())));
  w.u32(crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(msg("cannot open '", path, "' for writing"));
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw IoError(msg("short write to '", path, "'"));
}

inline std::vector<Episode> load_episodes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError(msg("cannot open dataset '", path,
                      "' — run the gen-data stage first"));
  }
  std::vector<std::uint8_t> buf(
      (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw FormatError(msg("dataset '", path, "' too small"));
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(buf[body + i]) << (8 * i);
  if (stored != static_cast<std::uint32_t>(
                    crc32(0L, buf.data(), static_cast<uInt>(body)))) {
    throw FormatError(msg("checksum mismatch in dataset '", path, "'"));
  }
  detail::ByteReader r{buf.data(), body};
  char magic[4];
  r.bytes(reinterpret_cast<std::uint8_t*>(magic), 4);
  if (!std::equal(magic, magic + 4, kDatasetMagic)) {
    throw FormatError(msg("bad magic in dataset '", path, "'"));
  }
  if (r.u32() != kDatasetVersion) {
    throw FormatError(msg("unsupported dataset version in '", path, "'"));
  }
  const std::uint32_t count = r.u32();
  std::vector<Episode> episodes(count);
  for (Episode& ep : episodes) {
    const int res = r.u16();
    const std::uint32_t t_len = r.u32();
    ep.frames.resize(t_len);
    for (Frame& f : ep.frames) {
      f.h = res;
      f.w = res;
      f.rgb.resize(static_cast<std::size_t>(3 * res * res));
      r.bytes(f.rgb.data(), f.rgb.size());
    }
    ep.actions.resize(t_len);
    for (Action& a : ep.actions) a = static_cast<Action>(r.u8());
  }
  return episodes;
}

// ---------------------------------------------------------------------------
// In-memory building blocks (stages wrap these with file IO)
// ---------------------------------------------------------------------------

inline std::vector<Episode> generate_split(const ExperimentConfig& cfg,
                                           const char* tag, long count,
                                           long length) {
  std::vector<Episode> eps;
  eps.reserve(static_cast<std::size_t>(count));
  for (long i = 0; i < count; ++i) {
    eps.push_back(generate_episode(
        derive_seed(cfg.seed, tag, static_cast<std::uint64_t>(i)),
        static_cast<int>(length), cfg.obs_res));
  }
  return eps;
}

inline std::vector<LatentFrame> encode_episode(const Codec& codec,
                                               const Episode& ep) {
  NoGradGuard ng;
  std::vector<LatentFrame> lat;
  lat.reserve(ep.frames.size());
  for (std::size_t t = 0; t < ep.frames.size(); ++t) {
    lat.push_back(codec.encode_frame(frame_to_tensor(ep.frames[t]),
                                     static_cast<long>(t)));
  }
  return lat;
}

/// Trains one pairing on pre-generated episodes. Windows partition each
/// episode without overlap; the memory state persists across a whole
/// episode, is detached at every window boundary, and window w reads memory
/// advanced over windows 0..w-1 only — the teacher-forced targets of the
/// current window are never inside the readout.
inline WorldModel train_world_model(const ExperimentConfig& cfg,
                                    const std::vector<Episode>& episodes,
                                    const Codec& codec,
                                    std::vector<double>* epoch_losses = nullptr) {
  if (!codec.encoder_frozen()) {
    throw ContractError("train_world_model: codec encoder must be frozen");
  }
  WorldModel model(cfg.predictor_config(), cfg.memory_config());

  const long n_windows = cfg.episode_len / cfg.window;
  if (n_windows < 1) {
    throw ContractError("train_world_model: episode shorter than one window");
  }
  const long total_steps = cfg.epochs *
                           static_cast<long>(episodes.size()) * n_windows;
  ParamSet ps;
  model.register_params(ps, "model");
  AdamConfig acfg;
  acfg.base_lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  acfg.total_steps = total_steps;
  Adam opt(ps, acfg);

  // Latents are fixed by the frozen encoder: encode every episode once.
  std::vector<std::vector<LatentFrame>> latents;
  latents.reserve(episodes.size());
  for (const Episode& ep : episodes) {
    latents.push_back(encode_episode(codec, ep));
  }

  for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    long epoch_steps = 0;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
      const std::vector<LatentFrame>& lat = latents[e];
      const Episode& ep = episodes[e];
      MemoryState mem = model.make_state();
      for (long w = 0; w < n_windows; ++w) {
        const long start = w * cfg.window;
        if (w > 0) {
          // Absorb the previous window with gradients enabled: recurrent
          // encoders learn through this scan; the state itself was detached
          // so no graph crosses the window boundary.
          mem.detach_all();
          std::vector<LatentFrame> prev(
              lat.begin() + (start - cfg.window), lat.begin() + start);
          advance_memory(model.encoder, mem, prev);
        }
        TrainingWindow tw;
        tw.readout = read_memory(model.encoder, mem);
        for (long t = start; t < start + cfg.window; ++t) {
          tw.window.frames.push_back(lat[static_cast<std::size_t>(t)]);
          tw.window.actions.push_back(
              static_cast<int>(ep.actions[static_cast<std::size_t>(t)]));
        }
        epoch_loss += training_step(model, codec, {tw}, opt);
        ++epoch_steps;
      }
    }
    if (epoch_losses) {
      epoch_losses->push_back(epoch_loss /
                              static_cast<double>(std::max(1L, epoch_steps)));
    }
  }
  return model;
}

/// Means of the four metrics over the eval set at one horizon. Every task
/// splits its episode at t = context, the earliest valid point.
struct HorizonMetrics {
  long horizon = 0;
  double ssim = 0.0;
  double img_mse = 0.0;
  double latent_mse = 0.0;
  double cycle_mse = 0.0;
};

inline HorizonMetrics eval_recall_metrics(const WorldModel& model,
                                          const Codec& codec,
                                          const std::vector<Episode>& eval_eps,
                                          long horizon) {
  if (eval_eps.empty()) {
    throw ContractError("eval_recall_metrics: no eval episodes");
  }
  NoGradGuard ng;
  HorizonMetrics m;
  m.horizon = horizon;
  long n_frames = 0;
  for (const Episode& ep : eval_eps) {
    RecallTask task;
    task.episode = &ep;
    task.context = model.cfg.context;
    task.t = task.context;
    task.horizon = horizon;
    const RecallResult res = run_recall(model, codec, task);
    for (long h = 0; h < horizon; ++h) {
      const Tensor truth = frame_to_tensor(
          ep.frames[static_cast<std::size_t>(task.t + h)]);
      const LatentFrame truth_lat =
          codec.encode_frame(truth, task.t + h);
      const auto& pred = res.pred_latents[static_cast<std::size_t>(h)];
      const auto& dec = res.decoded[static_cast<std::size_t>(h)];
      m.ssim += ssim(dec, truth);
      m.img_mse += mean_squared_error(dec, truth);
      m.latent_mse += mean_squared_error(pred.tokens, truth_lat.tokens);
      m.cycle_mse += cycle_mse(pred, codec);
      ++n_frames;
    }
  }
  const double inv = 1.0 / static_cast<double>(n_frames);
  m.ssim *= inv;
  m.img_mse *= inv;
  m.latent_mse *= inv;
  m.cycle_mse *= inv;
  return m;
}

inline MetricRow to_metric_row(const ExperimentConfig& cfg,
                               const HorizonMetrics& m) {
  MetricRow row;
  row.encoder = cfg.encoder;
  row.injector = cfg.injector;
  row.ssim = m.ssim;
  row.img_mse = m.img_mse;
  row.latent_mse = m.latent_mse;
  row.cycle_mse = m.cycle_mse;
  return row;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline void run_gen_data(const ExperimentConfig& cfg) {
  const OutPaths paths(cfg.out);
  std::filesystem::create_directories(paths.data_dir());
  save_episodes(paths.train_data().string(),
                generate_split(cfg, "train_ep", cfg.train_episodes,
                               cfg.episode_len));
  save_episodes(paths.eval_data().string(),
                generate_split(cfg, "eval_ep", cfg.eval_episodes,
                               cfg.eval_episode_len));
  detail::freeze_config(cfg, paths.data_dir());
}

inline void run_pretrain_codec(const ExperimentConfig& cfg) {
  const OutPaths paths(cfg.out);
  detail::require_file(paths.train_data(), "gen-data");
  const std::vector<Episode> train = load_episodes(paths.train_data().string());

  std::vector<Frame> frames;
  frames.reserve(static_cast<std::size_t>(cfg.codec_frames));
  for (const Episode& ep : train) {
    for (const Frame& f : ep.frames) {
      if (static_cast<long>(frames.size()) >= cfg.codec_frames) break;
      frames.push_back(f);
    }
    if (static_cast<long>(frames.size()) >= cfg.codec_frames) break;
  }
  if (frames.empty()) throw ContractError("pretrain-codec: no frames");

  RandomSource rng(derive_seed(cfg.seed, "codec_init"));
  Codec codec(cfg.codec_config(), rng);
  pretrain_autoencoder(codec, frames, cfg.codec_epochs, cfg.codec_batch,
                       cfg.codec_lr, derive_seed(cfg.seed, "codec_pretrain"));

  std::filesystem::create_directories(paths.codec_dir());
  ParamSet ps;
  codec.register_params(ps, "codec");
  save_checkpoint(paths.codec_ckpt().string(), "codec", cfg.to_text(), ps);
  detail::freeze_config(cfg, paths.codec_dir());
}

inline Codec load_codec(const ExperimentConfig& cfg) {
  const OutPaths paths(cfg.out);
  detail::require_file(paths.codec_ckpt(), "pretrain-codec");
  RandomSource rng(derive_seed(cfg.seed, "codec_init"));
  Codec codec(cfg.codec_config(), rng);
  ParamSet ps;
  codec.register_params(ps, "codec");
  load_checkpoint_into(paths.codec_ckpt().string(), "codec", ps);
  codec.freeze_encoder();
  return codec;
}

inline void run_train(const ExperimentConfig& cfg) {
  const OutPaths paths(cfg.out);
  detail::require_file(paths.train_data(), "gen-data");
  const Codec codec = load_codec(cfg);
  const std::vector<Episode> train = load_episodes(paths.train_data().string());

  std::vector<double> epoch_losses;
  WorldModel model = train_world_model(cfg, train, codec, &epoch_losses);

  const std::string name = pairing_name(cfg.encoder, cfg.injector);
  std::filesystem::create_directories(paths.train_dir(name));
  ParamSet ps;
  model.register_params(ps, "model");
  save_checkpoint(paths.model_ckpt(name).string(), "predictor", cfg.to_text(),
                  ps);

  std::ostringstream log;
  log << "epoch,mean_loss\n";
  for (std::size_t i = 0; i < epoch_losses.size(); ++i) {
    log << i << "," << detail::exact_double(epoch_losses[i]) << "\n";
  }
  detail::write_text_file(paths.train_dir(name) / "train_log.csv", log.str());
  detail::freeze_config(cfg, paths.train_dir(name));
}

inline WorldModel load_world_model(const ExperimentConfig& cfg) {
  const OutPaths paths(cfg.out);
  const std::string name = pairing_name(cfg.encoder, cfg.injector);
  detail::require_file(paths.model_ckpt(name), "train");
  WorldModel model(cfg.predictor_config(), cfg.memory_config());
  ParamSet ps;
  model.register_params(ps, "model");
  load_checkpoint_into(paths.model_ckpt(name).string(), "predictor", ps);
  return model;
}

inline void run_eval(const ExperimentConfig& cfg) {
  const OutPaths paths(cfg.out);
  detail::require_file(paths.eval_data(), "gen-data");
  const Codec codec = load_codec(cfg);
  const WorldModel model = load_world_model(cfg);
  const std::vector<Episode> eval_eps =
      load_episodes(paths.eval_data().string());

  std::ostringstream csv;
  csv << "encoder,injector,horizon,ssim,img_mse,latent_mse,cycle_mse\n";
  for (const long h : cfg.horizons) {
    const HorizonMetrics m = eval_recall_metrics(model, codec, eval_eps, h);
    csv << encoder_name(cfg.encoder) << "," << injector_name(cfg.injector)
        << "," << h << "," << detail::exact_double(m.ssim) << ","
        << detail::exact_double(m.img_mse) << ","
        << detail::exact_double(m.latent_mse) << ","
        << detail::exact_double(m.cycle_mse) << "\n";
  }
  const std::string name = pairing_name(cfg.encoder, cfg.injector);
  std::filesystem::create_directories(paths.eval_dir(name));
  detail::write_text_file(paths.metrics_csv(name), csv.str());
  detail::freeze_config(cfg, paths.eval_dir(name));
}

/// Reads one pairing's metrics.csv and returns the row at `horizon`.
inline MetricRow load_metric_row(const std::filesystem::path& csv_path,
                                 long horizon) {
  std::ifstream in(csv_path);
  if (!in) {
    throw IoError(msg("cannot open '", csv_path.string(),
                      "' — run the eval stage first"));
  }
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) {
      throw FormatError(msg("'", csv_path.string(), "': expected 7 cells"));
    }
    if (std::stol(cells[2]) != horizon) continue;
    MetricRow r;
    r.encoder = parse_encoder(cells[0]);
    r.injector = parse_injector(cells[1]);
    r.ssim = std::stod(cells[3]);
    r.img_mse = std::stod(cells[4]);
    r.latent_mse = std::stod(cells[5]);
    r.cycle_mse = std::stod(cells[6]);
    return r;
  }
  throw FormatError(msg("'", csv_path.string(), "': no row for horizon ",
                        horizon));
}

inline void run_report(const ExperimentConfig& cfg) {
  const OutPaths paths(cfg.out);

  // Collect metric rows for every evaluated pairing, in matrix order.
  std::vector<MetricRow> rows;
  std::vector<std::pair<EncoderKind, InjectorKind>> present;
  for (const auto& [enc, inj] : experiment_matrix()) {
    const std::string name = pairing_name(enc, inj);
    if (!std::filesystem::exists(paths.metrics_csv(name))) continue;
    rows.push_back(load_metric_row(paths.metrics_csv(name), cfg.horizon));
    present.emplace_back(enc, inj);
  }
  if (rows.size() < 2) {
    throw IoError(msg("report: found ", rows.size(), " evaluated pairings",
                      " under '", (paths.root / "eval").string(),
                      "' — run the eval stage first (need at least 2)"));
  }
  const RankTable table = rank_aggregate(rows);
  emit_report(table, paths.report_dir().string());

  // Filmstrip: truth plus one row per evaluated pairing on the first eval
  // episode at the report horizon.
  detail::require_file(paths.eval_data(), "gen-data");
  const std::vector<Episode> eval_eps =
      load_episodes(paths.eval_data().string());
  const Codec codec = load_codec(cfg);
  const Episode& ep = eval_eps.front();
  RecallTask task;
  task.episode = &ep;
  task.context = cfg.context;
  task.t = cfg.context;
  task.horizon = cfg.horizon;

  std::vector<Frame> truth;
  for (long h = 0; h < task.horizon; ++h) {
    truth.push_back(ep.frames[static_cast<std::size_t>(task.t + h)]);
  }
  std::vector<std::vector<Frame>> model_rows;
  for (const auto& [enc, inj] : present) {
    ExperimentConfig run = cfg;
    run.encoder = enc;
    run.injector = inj;
    const WorldModel model = load_world_model(run);
    const RecallResult res = run_recall(model, codec, task);
    std::vector<Frame> row;
    for (const Tensor& img : res.decoded) row.push_back(tensor_to_frame(img));
    model_rows.push_back(std::move(row));
  }
  emit_strip(truth, model_rows,
             (paths.report_dir() / "strip.png").string());
  detail::freeze_config(cfg, paths.report_dir());
}

inline void run_all(const ExperimentConfig& cfg) {
  run_gen_data(cfg);
  run_pretrain_codec(cfg);

  const auto& matrix = experiment_matrix();
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex error_mu;

  const auto worker = [&] {
    while (!failed.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= matrix.size()) return;
      ExperimentConfig run = cfg;
      run.encoder = matrix[i].first;
      run.injector = matrix[i].second;
      try {
        run_train(run);
        run_eval(run);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!failed.exchange(true)) first_error = e.what();
        return;
      }
    }
  };

  const int n_threads =
      std::max(1, std::min<int>(cfg.parallel,
                                static_cast<int>(matrix.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
  }
  if (failed.load()) throw Error(first_error);

  run_report(cfg);
}

inline void run_stage(const std::string& stage, const ExperimentConfig& cfg) {
  if (stage == "gen-data") return run_gen_data(cfg);
  if (stage == "pretrain-codec") return run_pretrain_codec(cfg);
  if (stage == "train") return run_train(cfg);
  if (stage == "eval") return run_eval(cfg);
  if (stage == "report") return run_report(cfg);
  if (stage == "all") return run_all(cfg);
  throw ContractError(msg("unknown stage '", stage,
                          "' (expected gen-data, pretrain-codec, train, "
                          "eval, report, or all)"));
}

}  // namespace memstream
