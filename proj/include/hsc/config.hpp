#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsc {

// Feed-forward variants (ablation matrix).
enum class FfnVariant { mlgffn, no_local, no_global, plain };

inline std::string ffn_variant_name(FfnVariant v) {
  switch (v) {
    case FfnVariant::mlgffn: return "mlgffn";
    case FfnVariant::no_local: return "no_local";
    case FfnVariant::no_global: return "no_global";
    case FfnVariant::plain: return "plain";
  }
  throw std::logic_error("unknown ffn variant");
}

inline FfnVariant ffn_variant_from(const std::string& s) {
  if (s == "mlgffn") return FfnVariant::mlgffn;
  if (s == "no_local") return FfnVariant::no_local;
  if (s == "no_global") return FfnVariant::no_global;
  if (s == "plain") return FfnVariant::plain;
  throw std::invalid_argument("unknown ffn variant '" + s + "'");
}

struct StageSpec {
  std::int64_t channels = 0;
  int num_blocks = 0;
};

// The λ grid used for the bitstream header's rate-point byte.
inline const std::vector<double>& lambda_grid() {
  static const std::vector<double> grid{0.0025, 0.0035, 0.0067, 0.0130, 0.0250, 0.0500};
  return grid;
}

inline std::uint8_t lambda_index(double lambda) {
  const auto& g = lambda_grid();
  std::size_t best = 0;
  for (std::size_t i = 1; i < g.size(); ++i)
    if (std::abs(g[i] - lambda) < std::abs(g[best] - lambda)) best = i;
  return static_cast<std::uint8_t>(best);
}

struct ModelConfig {
  std::vector<StageSpec> stages{{40, 1}, {80, 1}, {160, 2}, {320, 2}};
  std::int64_t window_base = 4;       // s: attention windows are 2s x 2s
  std::int64_t beta = 4;              // channel-gate bottleneck shrink factor
  std::int64_t head_dim = 20;         // target per-head width (heads = max(1, C/2/head_dim))
  std::int64_t hyper_channels = 192;  // width of the hyper latent z
  std::int64_t context_channels = 128;
  bool lf_enabled = true;
  bool hf_enabled = true;
  bool casa_enabled = true;
  FfnVariant ffn = FfnVariant::mlgffn;
  std::vector<std::int64_t> chunks;  // empty -> default schedule for M

  std::int64_t latent_channels() const { return stages.back().channels; }

  // Spatial shrink of the analysis transform (2x per stage).
  std::int64_t transform_stride() const { return std::int64_t{1} << stages.size(); }

  // Total divisibility requirement: transform stride times the hyper
  // transform's own 4x shrink.
  std::int64_t total_stride() const { return transform_stride() * 4; }

  std::vector<std::int64_t> chunk_schedule() const {
    if (!chunks.empty()) return chunks;
    const std::int64_t m = latent_channels();
    if (m >= 160) return {16, 16, 32, 64, m - 128};
    return {m / 4, m / 4, m / 2};
  }

  void validate() const {
    if (stages.empty()) throw std::invalid_argument("config: at least one stage required");
    for (const auto& st : stages) {
      if (st.channels <= 0 || st.num_blocks < 0)
        throw std::invalid_argument("config: stage channels must be positive, blocks non-negative");
      if (st.channels % 2 != 0) throw std::invalid_argument("config: stage channels must be even");
      if (st.channels % 4 != 0)
        throw std::invalid_argument("config: stage channels must be divisible by 4");
      if (st.channels % beta != 0)
        throw std::invalid_argument("config: stage channels must be divisible by beta");
    }
    if (window_base <= 0) throw std::invalid_argument("config: window_base must be positive");
    if (beta <= 0 || head_dim <= 0 || hyper_channels <= 0 || context_channels <= 0)
      throw std::invalid_argument("config: widths must be positive");
    if (!lf_enabled && !hf_enabled)
      throw std::invalid_argument("config: at least one attention path must be enabled");
    const auto sched = chunk_schedule();
    std::int64_t sum = 0;
    for (auto c : sched) {
      if (c <= 0) throw std::invalid_argument("config: chunk sizes must be positive");
      sum += c;
    }
    if (sum != latent_channels())
      throw std::invalid_argument("config: chunk sizes sum to " + std::to_string(sum) + ", expected " +
                                  std::to_string(latent_channels()));
  }
};

struct TrainConfig {
  double lambda = 0.0130;
  int batch = 4;
  std::int64_t crop = 64;
  std::int64_t steps = 2000;
  double lr = 1e-4;
  double lr_final = 1e-5;
  std::uint64_t seed = 1;
  std::int64_t log_every = 10;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  ModelConfig model;

  void validate() const {
    if (!(lambda > 0)) throw std::invalid_argument("config: lambda must be positive");
    if (batch <= 0) throw std::invalid_argument("config: batch must be positive");
    if (steps <= 0) throw std::invalid_argument("config: steps must be positive");
    if (crop <= 0 || crop % model.total_stride() != 0)
      throw std::invalid_argument("config: crop must be a positive multiple of " +
                                  std::to_string(model.total_stride()));
    if (!(lr > 0) || !(lr_final > 0)) throw std::invalid_argument("config: learning rates must be positive");
    model.validate();
  }
};

// ---------------------------------------------------------------------------
// key=val config text

namespace detail_cfg {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::int64_t to_i64(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const std::int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config: bad integer for '" + key + "': " + v);
  }
}

inline double to_f64(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config: bad number for '" + key + "': " + v);
  }
}

inline bool to_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw std::invalid_argument("config: bad boolean for '" + key + "': " + v);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail_cfg

// "8:1,16:1" -> stage list
inline std::vector<StageSpec> parse_stages(const std::string& v) {
  std::vector<StageSpec> out;
  for (const auto& item : detail_cfg::split_list(v)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("config: stage entry '" + item + "' must be channels:blocks");
    StageSpec s;
    s.channels = detail_cfg::to_i64(detail_cfg::trim(item.substr(0, colon)), "stages");
    s.num_blocks = static_cast<int>(detail_cfg::to_i64(detail_cfg::trim(item.substr(colon + 1)), "stages"));
    out.push_back(s);
  }
  if (out.empty()) throw std::invalid_argument("config: empty stage list");
  return out;
}

inline std::string stages_to_string(const std::vector<StageSpec>& stages) {
  std::ostringstream os;
  for (std::size_t i = 0; i < stages.size(); ++i)
    os << (i ? "," : "") << stages[i].channels << ":" << stages[i].num_blocks;
  return os.str();
}

// Applies one key=value assignment. Shared by the config-file loader and the
// checkpoint metadata reader. Throws on unknown keys.
inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& val) {
  using namespace detail_cfg;
  if (key == "lambda") cfg.lambda = to_f64(val, key);
  else if (key == "batch") cfg.batch = static_cast<int>(to_i64(val, key));
  else if (key == "crop") cfg.crop = to_i64(val, key);
  else if (key == "steps") cfg.steps = to_i64(val, key);
  else if (key == "lr") cfg.lr = to_f64(val, key);
  else if (key == "lr_final") cfg.lr_final = to_f64(val, key);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_i64(val, key));
  else if (key == "log_every") cfg.log_every = to_i64(val, key);
  else if (key == "checkpoint_every") cfg.checkpoint_every = to_i64(val, key);
  else if (key == "stages") cfg.model.stages = parse_stages(val);
  else if (key == "window_base") cfg.model.window_base = to_i64(val, key);
  else if (key == "beta") cfg.model.beta = to_i64(val, key);
  else if (key == "head_dim") cfg.model.head_dim = to_i64(val, key);
  else if (key == "hyper_channels") cfg.model.hyper_channels = to_i64(val, key);
  else if (key == "context_channels") cfg.model.context_channels = to_i64(val, key);
  else if (key == "lf") cfg.model.lf_enabled = to_bool(val, key);
  else if (key == "hf") cfg.model.hf_enabled = to_bool(val, key);
  else if (key == "casa") cfg.model.casa_enabled = to_bool(val, key);
  else if (key == "ffn") cfg.model.ffn = ffn_variant_from(val);
  else if (key == "chunks") {
    cfg.model.chunks.clear();
    for (const auto& c : split_list(val)) cfg.model.chunks.push_back(to_i64(c, key));
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

// Parses `key = value` lines; '#' starts a comment; blank lines ignored.
inline TrainConfig parse_train_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail_cfg::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key=value: " + line);
    const std::string key = detail_cfg::trim(line.substr(0, eq));
    const std::string val = detail_cfg::trim(line.substr(eq + 1));
    apply_config_entry(cfg, key, val);
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  return parse_train_config(f);
}

namespace detail_cfg {

// Shortest decimal that round-trips the exact double.
inline std::string f64_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail_cfg

// Canonical flat serialization of the model architecture; stored in
// checkpoints and hashed into the model identifier.
inline std::string model_config_to_string(const ModelConfig& m) {
  std::ostringstream os;
  os << "stages=" << stages_to_string(m.stages) << "\n";
  os << "window_base=" << m.window_base << "\n";
  os << "beta=" << m.beta << "\n";
  os << "head_dim=" << m.head_dim << "\n";
  os << "hyper_channels=" << m.hyper_channels << "\n";
  os << "context_channels=" << m.context_channels << "\n";
  os << "lf=" << (m.lf_enabled ? 1 : 0) << "\n";
  os << "hf=" << (m.hf_enabled ? 1 : 0) << "\n";
  os << "casa=" << (m.casa_enabled ? 1 : 0) << "\n";
  os << "ffn=" << ffn_variant_name(m.ffn) << "\n";
  os << "chunks=";
  const auto sched = m.chunk_schedule();
  for (std::size_t i = 0; i < sched.size(); ++i) os << (i ? "," : "") << sched[i];
  os << "\n";
  return os.str();
}

// Full training-run serialization (architecture included); a checkpoint
// stores this so a resumed run reconstructs the identical setup.
inline std::string train_config_to_string(const TrainConfig& t) {
  std::ostringstream os;
  os << "lambda=" << detail_cfg::f64_str(t.lambda) << "\n";
  os << "batch=" << t.batch << "\n";
  os << "crop=" << t.crop << "\n";
  os << "steps=" << t.steps << "\n";
  os << "lr=" << detail_cfg::f64_str(t.lr) << "\n";
  os << "lr_final=" << detail_cfg::f64_str(t.lr_final) << "\n";
  os << "seed=" << t.seed << "\n";
  os << "log_every=" << t.log_every << "\n";
  os << "checkpoint_every=" << t.checkpoint_every << "\n";
  os << model_config_to_string(t.model);
  return os.str();
}

inline TrainConfig train_config_from_string(const std::string& text) {
  std::istringstream in(text);
  return parse_train_config(in);
}

inline ModelConfig model_config_from_string(const std::string& text) {
  std::istringstream in(text);
  TrainConfig cfg;
  std::string line;
  while (std::getline(in, line)) {
    line = detail_cfg::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config: bad model line: " + line);
    apply_config_entry(cfg, detail_cfg::trim(line.substr(0, eq)), detail_cfg::trim(line.substr(eq + 1)));
  }
  cfg.model.validate();
  return cfg.model;
}

}  // namespace hsc
