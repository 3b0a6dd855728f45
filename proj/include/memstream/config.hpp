#pragma once

// Experiment configuration: two named profiles (`desk` for laptop-scale
// runs, `paper` for the published recipe), overridable per key from a plain
// key=value file and again from command-line flags. The resolved config is
// echoed and frozen next to every artifact so runs stay reproducible.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "memstream/codec.hpp"
#include "memstream/predictor.hpp"

namespace memstream {

struct ExperimentConfig {
  // run
  std::string profile = "desk";
  unsigned long long seed = 0;
  std::string out = "out";
  EncoderKind encoder = EncoderKind::None;
  InjectorKind injector = InjectorKind::None;
  int parallel = 1;
  // dataset. Train episodes hold exactly three training windows; eval
  // episodes are long enough for the full horizon sweep (context 9 + 50 + 1).
  long train_episodes = 512;
  long eval_episodes = 64;
  long episode_len = 30;
  long eval_episode_len = 64;
  int obs_res = 16;
  // codec
  long codec_width1 = 8;
  long codec_width2 = 16;
  long d_lat = 16;
  long codec_epochs = 60;
  long codec_batch = 16;
  double codec_lr = 1e-2;
  long codec_frames = 240;
  // predictor. Sized so the full 16-pairing matrix trains on one CPU core
  // in reasonable time; the paper profile restores the published widths.
  long d = 24;
  int heads = 2;
  long context = 9;
  long hidden_mult = 4;
  // memory
  long cache_capacity = 16;
  long d_mem = 32;
  long readout_tokens = 4;
  // training
  long epochs = 5;
  double lr = 3e-4;
  double weight_decay = 1e-2;
  long window = 10;
  // eval
  long horizon = 10;
  std::vector<long> horizons = {5, 10, 20, 50};

  static ExperimentConfig profile_defaults(const std::string& name) {
    ExperimentConfig c;  // the defaults above are the desk profile
    c.profile = name;
    if (name == "desk") return c;
    if (name == "paper") {
      c.train_episodes = 29000;
      c.eval_episodes = 64;
      c.episode_len = 500;
      c.eval_episode_len = 500;
      c.obs_res = 32;
      c.codec_width1 = 32;
      c.codec_width2 = 64;
      c.d_lat = 128;
      c.codec_frames = 5000;
      c.d = 128;
      c.heads = 4;
      c.d_mem = 128;
      c.epochs = 20;
      return c;
    }
    throw ContractError(msg("unknown profile '", name,
                            "' (expected desk or paper)"));
  }

  void apply(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text() const;

  long tokens_per_frame() const {
    const long side = obs_res / 4;
    return side * side;
  }

  CodecConfig codec_config() const {
    CodecConfig c;
    c.obs_res = obs_res;
    c.width1 = codec_width1;
    c.width2 = codec_width2;
    c.d_lat = d_lat;
    return c;
  }

  MemoryConfig memory_config() const {
    MemoryConfig m;
    m.d_lat = d_lat;
    m.cache_capacity = cache_capacity;
    m.d_mem = d_mem;
    m.readout_tokens = readout_tokens;
    return m;
  }

  PredictorConfig predictor_config() const {
    PredictorConfig p;
    p.layers = 4;
    p.d = d;
    p.heads = heads;
    p.context = context;
    p.d_lat = d_lat;
    p.tokens_per_frame = tokens_per_frame();
    p.hidden_mult = hidden_mult;
    p.n_actions = 4;
    p.encoder = encoder;
    p.injector = injector;
    p.seed = seed;
    return p;
  }
};

namespace detail {

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "profile", "seed", "out", "encoder", "injector", "parallel",
      "train_episodes", "eval_episodes", "episode_len", "eval_episode_len",
      "obs_res", "codec_width1", "codec_width2", "d_lat", "codec_epochs",
      "codec_batch", "codec_lr", "codec_frames", "d", "heads", "context",
      "hidden_mult", "cache_capacity", "d_mem", "readout_tokens", "epochs",
      "lr", "weight_decay", "window", "horizon", "horizons"};
  return keys;
}

inline long parse_long(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) {
    throw ContractError(msg("config: ", key, "=", value,
                            " is not an integer"));
  }
  return v;
}

inline double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) {
    throw ContractError(msg("config: ", key, "=", value, " is not a number"));
  }
  return v;
}

inline std::vector<long> parse_long_list(const std::string& key,
                                         const std::string& value) {
  std::vector<long> out;
  std::istringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(parse_long(key, item));
  }
  if (out.empty()) {
    throw ContractError(msg("config: ", key, " needs at least one value"));
  }
  return out;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline void ExperimentConfig::apply(const std::string& key,
                                    const std::string& value) {
  using detail::parse_double;
  using detail::parse_long;
  if (key == "profile") {
    if (value != "desk" && value != "paper") {
      throw ContractError(msg("config: unknown profile '", value, "'"));
    }
    profile = value;
  } else if (key == "seed") {
    seed = static_cast<unsigned long long>(parse_long(key, value));
  } else if (key == "out") {
    out = value;
  } else if (key == "encoder") {
    encoder = parse_encoder(value);
  } else if (key == "injector") {
    injector = parse_injector(value);
  } else if (key == "parallel") {
    parallel = static_cast<int>(parse_long(key, value));
  } else if (key == "train_episodes") {
    train_episodes = parse_long(key, value);
  } else if (key == "eval_episodes") {
    eval_episodes = parse_long(key, value);
  } else if (key == "episode_len") {
    episode_len = parse_long(key, value);
  } else if (key == "eval_episode_len") {
    eval_episode_len = parse_long(key, value);
  } else if (key == "obs_res") {
    obs_res = static_cast<int>(parse_long(key, value));
  } else if (key == "codec_width1") {
    codec_width1 = parse_long(key, value);
  } else if (key == "codec_width2") {
    codec_width2 = parse_long(key, value);
  } else if (key == "d_lat") {
    d_lat = parse_long(key, value);
  } else if (key == "codec_epochs") {
    codec_epochs = parse_long(key, value);
  } else if (key == "codec_batch") {
    codec_batch = parse_long(key, value);
  } else if (key == "codec_lr") {
    codec_lr = parse_double(key, value);
  } else if (key == "codec_frames") {
    codec_frames = parse_long(key, value);
  } else if (key == "d") {
    d = parse_long(key, value);
  } else if (key == "heads") {
    heads = static_cast<int>(parse_long(key, value));
  } else if (key == "context") {
    context = parse_long(key, value);
  } else if (key == "hidden_mult") {
    hidden_mult = parse_long(key, value);
  } else if (key == "cache_capacity") {
    cache_capacity = parse_long(key, value);
  } else if (key == "d_mem") {
    d_mem = parse_long(key, value);
  } else if (key == "readout_tokens") {
    readout_tokens = parse_long(key, value);
  } else if (key == "epochs") {
    epochs = parse_long(key, value);
  } else if (key == "lr") {
    lr = parse_double(key, value);
  } else if (key == "weight_decay") {
    weight_decay = parse_double(key, value);
  } else if (key == "window") {
    window = parse_long(key, value);
  } else if (key == "horizon") {
    horizon = parse_long(key, value);
  } else if (key == "horizons") {
    horizons = detail::parse_long_list(key, value);
  } else {
    std::string keys;
    for (const std::string& k : detail::config_keys()) {
      if (!keys.empty()) keys += ", ";
      keys += k;
    }
    throw ContractError(msg("config: unknown key '", key,
                            "'. Valid keys: ", keys));
  }
}

inline void ExperimentConfig::validate() const {
  if (parallel < 1) throw ContractError("config: parallel must be >= 1");
  if (train_episodes < 1 || eval_episodes < 1) {
    throw ContractError("config: episode counts must be >= 1");
  }
  if (obs_res < 12 || obs_res % 4 != 0) {
    throw ContractError(msg("config: obs_res ", obs_res,
                            " must be a multiple of 4 and >= 12"));
  }
  if (d <= 0 || heads <= 0 || d % heads != 0) {
    throw ContractError(msg("config: d=", d, " incompatible with ", heads,
                            " heads"));
  }
  if (window < 2) throw ContractError("config: window must be >= 2");
  if (window - 1 > context) {
    throw ContractError(msg("config: window ", window,
                            " teacher-forces more frames than context ",
                            context, " allows"));
  }
  if (episode_len < window) {
    throw ContractError(msg("config: episode_len ", episode_len,
                            " shorter than one window ", window));
  }
  if (horizons.empty()) throw ContractError("config: horizons empty");
  long h_max = 0;
  for (long h : horizons) {
    if (h < 1) throw ContractError("config: horizons must be >= 1");
    h_max = std::max(h_max, h);
  }
  if (horizon < 1) throw ContractError("config: horizon must be >= 1");
  h_max = std::max(h_max, horizon);
  if (eval_episode_len < context + h_max + 1) {
    throw ContractError(msg("config: eval_episode_len ", eval_episode_len,
                            " too short for context ", context,
                            " + horizon ", h_max));
  }
  if ((encoder == EncoderKind::None) != (injector == InjectorKind::None)) {
    throw ContractError(
        "config: encoder and injector must be paired "
        "(both none for the baseline, both set otherwise)");
  }
  codec_config().validate();
  predictor_config().validate();
  memory_config().validate();
}

inline std::string ExperimentConfig::to_text() const {
  std::ostringstream s;
  s << "profile=" << profile << "\n";
  s << "seed=" << seed << "\n";
  s << "out=" << out << "\n";
  s << "encoder=" << encoder_name(encoder) << "\n";
  s << "injector=" << injector_name(injector) << "\n";
  s << "parallel=" << parallel << "\n";
  s << "train_episodes=" << train_episodes << "\n";
  s << "eval_episodes=" << eval_episodes << "\n";
  s << "episode_len=" << episode_len << "\n";
  s << "eval_episode_len=" << eval_episode_len << "\n";
  s << "obs_res=" << obs_res << "\n";
  s << "codec_width1=" << codec_width1 << "\n";
  s << "codec_width2=" << codec_width2 << "\n";
  s << "d_lat=" << d_lat << "\n";
  s << "codec_epochs=" << codec_epochs << "\n";
  s << "codec_batch=" << codec_batch << "\n";
  s << "codec_lr=" << detail::fmt_double(codec_lr) << "\n";
  s << "codec_frames=" << codec_frames << "\n";
  s << "d=" << d << "\n";
  s << "heads=" << heads << "\n";
  s << "context=" << context << "\n";
  s << "hidden_mult=" << hidden_mult << "\n";
  s << "cache_capacity=" << cache_capacity << "\n";
  s << "d_mem=" << d_mem << "\n";
  s << "readout_tokens=" << readout_tokens << "\n";
  s << "epochs=" << epochs << "\n";
  s << "lr=" << detail::fmt_double(lr) << "\n";
  s << "weight_decay=" << detail::fmt_double(weight_decay) << "\n";
  s << "window=" << window << "\n";
  s << "horizon=" << horizon << "\n";
  s << "horizons=";
  for (std::size_t i = 0; i < horizons.size(); ++i) {
    if (i) s << ",";
    s << horizons[i];
  }
  s << "\n";
  return s.str();
}

/// key=value pairs in file order; '#' comments and blank lines skipped;
/// malformed lines are reported with their line number.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(
    std::istream& in, const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    const std::string stripped = strip(line);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ContractError(msg(origin, " line ", line_no,
                              ": expected key=value, got '", stripped, "'"));
    }
    pairs.emplace_back(strip(stripped.substr(0, eq)),
                       strip(stripped.substr(eq + 1)));
  }
  return pairs;
}

inline std::vector<std::pair<std::string, std::string>> parse_config_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(msg("cannot open config file '", path, "'"));
  return parse_config_text(in, path);
}

/// Layered resolution: profile defaults < config file < flags. The profile
/// itself may be named in either layer (flags win); all other keys are then
/// applied on top of that profile's defaults.
inline ExperimentConfig resolve_config(
    const std::vector<std::pair<std::string, std::string>>& file_pairs,
    const std::vector<std::pair<std::string, std::string>>& flag_pairs) {
  std::string profile = "desk";
  for (const auto& [k, v] : file_pairs) {
    if (k == "profile") profile = v;
  }
  for (const auto& [k, v] : flag_pairs) {
    if (k == "profile") profile = v;
  }
  ExperimentConfig cfg = ExperimentConfig::profile_defaults(profile);
  for (const auto& [k, v] : file_pairs) {
    if (k != "profile") cfg.apply(k, v);
  }
  for (const auto& [k, v] : flag_pairs) {
    if (k != "profile") cfg.apply(k, v);
  }
  cfg.validate();
  return cfg;
}

}  // namespace memstream
