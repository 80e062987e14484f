#pragma once

// Run configuration: flat `dotted.key = value` text, `#` starts a comment.
// Every key has a default, so an empty file is a valid configuration.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msrl/error.hpp"
#include "msrl/experts.hpp"
#include "msrl/policy.hpp"
#include "msrl/random.hpp"
#include "msrl/synthworld.hpp"

namespace msrl {

inline const std::vector<std::string>& default_systems() {
  static const std::vector<std::string> names{"audio-only", "vision-only", "invariant",
                                              "ensemble",   "late-fusion", "msrl"};
  return names;
}

struct RunConfig {
  std::uint64_t seed = 0;
  WorldConfig world;
  SplitSizes sizes{20000, 300, 300};
  SnrSchedule schedule = SnrSchedule::clean_biased();

  int expert_hidden = 32;
  int expert_emb = 8;
  PretrainConfig pretrain;

  int summarizer_hidden = 8;
  int summary_dim = 4;
  RLTrainConfig rl;
  RewardConfig reward;

  std::vector<double> snr_grid{-15.0, -10.0, -5.0, 0.0, 5.0, kCleanSnr};
  int eval_beam = 5;
  int eval_max_len = 25;
  std::vector<std::string> systems = default_systems();

  std::string corpus_dir = "run/corpus";
  std::string checkpoint_dir = "run/checkpoints";
  std::string report_dir = "run/reports";

  // Stage sub-seeds, all derived from the master seed by label.
  std::uint64_t world_seed() const { return derive_seed(seed, "world"); }
  std::uint64_t corpus_seed() const { return derive_seed(seed, "corpus"); }
  std::uint64_t pretrain_seed(ExpertKind k) const {
    return derive_seed(seed, std::string("pretrain-") + expert_name(k));
  }
  std::uint64_t policy_init_seed() const { return derive_seed(seed, "policy-init"); }
  std::uint64_t rl_seed() const { return derive_seed(seed, "rl"); }

  void validate() const {
    world.validate();
    schedule.validate();
    if (sizes.train < 1 || sizes.valid < 1 || sizes.test < 1) throw ConfigError("data sizes must be >= 1");
    if (expert_hidden < 1 || expert_emb < 1) throw ConfigError("expert dims must be >= 1");
    if (pretrain.epochs < 1) throw ConfigError("expert.epochs must be >= 1");
    if (!(pretrain.lr >= 0.0)) throw ConfigError("expert.lr must be >= 0");
    if (pretrain.batch_size < 1) throw ConfigError("expert.batch_size must be >= 1");
    if (summarizer_hidden < 1 || summary_dim < 1) throw ConfigError("summarizer dims must be >= 1");
    rl.validate();
    reward.validate();
    if (snr_grid.empty()) throw ConfigError("eval.snr_grid is empty");
    if (eval_beam < 1) throw ConfigError("eval.beam_size must be >= 1");
    if (eval_max_len < 1) throw ConfigError("eval.max_len must be >= 1");
    if (systems.empty()) throw ConfigError("eval.systems is empty");
    if (corpus_dir.empty() || checkpoint_dir.empty() || report_dir.empty()) {
      throw ConfigError("paths must be nonempty");
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& v) {
  std::size_t pos = 0;
  T out{};
  try {
    if constexpr (std::is_same_v<T, double>) {
      out = std::stod(v, &pos);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = std::stoull(v, &pos);
    } else {
      out = static_cast<T>(std::stoi(v, &pos));
    }
  } catch (const std::exception&) {
    throw ConfigError("bad value '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("bad value '" + v + "'");
  return out;
}

inline std::string format_schedule(const SnrSchedule& s) {
  std::string out;
  for (const auto& [snr, w] : s.entries) {
    if (!out.empty()) out += ',';
    out += format_snr(snr) + ':' + format_real(w, 9);
  }
  return out;
}

inline SnrSchedule parse_schedule(const std::string& v) {
  SnrSchedule s;
  for (const auto& item : split_list(v)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("expected snr:weight, got '" + item + "'");
    s.entries.emplace_back(parse_snr(trim(item.substr(0, colon))),
                           parse_number<double>(trim(item.substr(colon + 1))));
  }
  return s;
}

// One binding per key: a setter from text and a getter back to text.
struct Binding {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Binding num(T RunConfig::*field) {
  return {[field](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(v); },
          [field](const RunConfig& c) {
            if constexpr (std::is_same_v<T, double>) return format_real(c.*field, 17);
            else return std::to_string(c.*field);
          }};
}

template <typename S, typename T>
Binding num(S RunConfig::*outer, T S::*field) {
  return {[outer, field](RunConfig& c, const std::string& v) { c.*outer.*field = parse_number<T>(v); },
          [outer, field](const RunConfig& c) {
            if constexpr (std::is_same_v<T, double>) return format_real(c.*outer.*field, 17);
            else return std::to_string(c.*outer.*field);
          }};
}

inline Binding text(std::string RunConfig::*field) {
  return {[field](RunConfig& c, const std::string& v) { c.*field = v; },
          [field](const RunConfig& c) { return c.*field; }};
}

inline const std::map<std::string, Binding>& bindings() {
  static const std::map<std::string, Binding> table = {
      {"seed", num(&RunConfig::seed)},
      {"world.vocab_size", num(&RunConfig::world, &WorldConfig::vocab_size)},
      {"world.viseme_classes", num(&RunConfig::world, &WorldConfig::viseme_classes)},
      {"world.seq_len_min", num(&RunConfig::world, &WorldConfig::seq_len_min)},
      {"world.seq_len_max", num(&RunConfig::world, &WorldConfig::seq_len_max)},
      {"world.markov_concentration", num(&RunConfig::world, &WorldConfig::markov_concentration)},
      {"world.audio_dim", num(&RunConfig::world, &WorldConfig::audio_dim)},
      {"world.base_noise_std", num(&RunConfig::world, &WorldConfig::base_noise_std)},
      {"world.video_flip_prob", num(&RunConfig::world, &WorldConfig::video_flip_prob)},
      {"data.train_size", num(&RunConfig::sizes, &SplitSizes::train)},
      {"data.valid_size", num(&RunConfig::sizes, &SplitSizes::valid)},
      {"data.test_size", num(&RunConfig::sizes, &SplitSizes::test)},
      {"data.snr_schedule",
       {[](RunConfig& c, const std::string& v) { c.schedule = parse_schedule(v); },
        [](const RunConfig& c) { return format_schedule(c.schedule); }}},
      {"expert.hidden_dim", num(&RunConfig::expert_hidden)},
      {"expert.emb_dim", num(&RunConfig::expert_emb)},
      {"expert.lr", num(&RunConfig::pretrain, &PretrainConfig::lr)},
      {"expert.epochs", num(&RunConfig::pretrain, &PretrainConfig::epochs)},
      {"expert.batch_size", num(&RunConfig::pretrain, &PretrainConfig::batch_size)},
      {"summarizer.hidden_dim", num(&RunConfig::summarizer_hidden)},
      {"summarizer.summary_dim", num(&RunConfig::summary_dim)},
      {"rl.beam_size", num(&RunConfig::rl, &RLTrainConfig::beam_size)},
      {"rl.lr", num(&RunConfig::rl, &RLTrainConfig::lr)},
      {"rl.epochs", num(&RunConfig::rl, &RLTrainConfig::epochs)},
      {"rl.max_len_slack", num(&RunConfig::rl, &RLTrainConfig::max_len_slack)},
      {"reward.lambda1", num(&RunConfig::reward, &RewardConfig::lambda1)},
      {"reward.lambda2", num(&RunConfig::reward, &RewardConfig::lambda2)},
      {"eval.snr_grid",
       {[](RunConfig& c, const std::string& v) {
          c.snr_grid.clear();
          for (const auto& s : split_list(v)) c.snr_grid.push_back(parse_snr(s));
        },
        [](const RunConfig& c) {
          std::string out;
          for (double s : c.snr_grid) out += (out.empty() ? "" : ",") + format_snr(s);
          return out;
        }}},
      {"eval.beam_size", num(&RunConfig::eval_beam)},
      {"eval.max_len", num(&RunConfig::eval_max_len)},
      {"eval.systems",
       {[](RunConfig& c, const std::string& v) { c.systems = split_list(v); },
        [](const RunConfig& c) {
          std::string out;
          for (const auto& s : c.systems) out += (out.empty() ? "" : ",") + s;
          return out;
        }}},
      {"paths.corpus_dir", text(&RunConfig::corpus_dir)},
      {"paths.checkpoint_dir", text(&RunConfig::checkpoint_dir)},
      {"paths.report_dir", text(&RunConfig::report_dir)},
  };
  return table;
}

}  // namespace detail

// Sets one key; unknown keys and malformed values are ConfigErrors.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::bindings();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError("config key " + key + ": " + e.what());
  }
}

inline RunConfig parse_config(std::istream& in, const std::string& origin) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  return parse_config(in, path);
}

// Canonical text of every key, sorted; parses back to the same config.
inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, b] : detail::bindings()) out += key + " = " + b.get(cfg) + "\n";
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& cfg) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config_to_text(cfg))));
  return buf;
}

}  // namespace msrl
