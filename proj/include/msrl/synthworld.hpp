#pragma once

// Seeded generator of a two-modality sequence recognition task.
//
// Tokens follow a first-order Markov chain. Each token emits one audio frame
// (its embedding plus Gaussian noise whose amplitude follows the SNR) and one
// video frame (a one-hot viseme class, occasionally flipped, never touched by
// the SNR). The viseme map is many-to-one, so video alone has an error floor
// while clean audio identifies tokens exactly.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "msrl/core.hpp"
#include "msrl/error.hpp"
#include "msrl/random.hpp"

namespace msrl {

inline constexpr double kCleanSnr = std::numeric_limits<double>::infinity();

struct WorldConfig {
  int vocab_size = 20;
  int viseme_classes = 5;
  int seq_len_min = 4;
  int seq_len_max = 10;
  double markov_concentration = 4.0;
  int audio_dim = 24;
  double base_noise_std = 2.0;
  double video_flip_prob = 0.05;

  void validate() const {
    if (vocab_size < 4) throw ConfigError("world.vocab_size must be >= 4");
    if (viseme_classes < 2 || viseme_classes > vocab_size) {
      throw ConfigError("world.viseme_classes must lie in [2, vocab_size]");
    }
    if (seq_len_min < 1 || seq_len_min > seq_len_max) {
      throw ConfigError("world.seq_len range must satisfy 1 <= min <= max");
    }
    if (!(markov_concentration > 0.0)) throw ConfigError("world.markov_concentration must be > 0");
    if (audio_dim < vocab_size) throw ConfigError("world.audio_dim must be >= vocab_size");
    if (!(base_noise_std > 0.0)) throw ConfigError("world.base_noise_std must be > 0");
    if (!(video_flip_prob >= 0.0 && video_flip_prob < 0.5)) {
      throw ConfigError("world.video_flip_prob must lie in [0, 0.5)");
    }
  }
};

struct World {
  WorldConfig config;
  Eigen::MatrixXd transition;  // V x V, row-stochastic
  Eigen::MatrixXd embedding;   // V x audio_dim, orthonormal rows
  std::vector<int> viseme;     // token -> viseme class

  Vocab vocab() const { return Vocab{config.vocab_size}; }
};

// SNR in dB to per-coordinate noise amplitude; +inf means clean.
inline double noise_std(double snr_db, double base_std) {
  if (std::isinf(snr_db) && snr_db > 0) return 0.0;
  return base_std * std::pow(10.0, -snr_db / 20.0);
}

inline World build_world(const WorldConfig& config, std::uint64_t seed) {
  config.validate();
  const int v = config.vocab_size;
  World w;
  w.config = config;

  Rng chain_rng(derive_seed(seed, "transition"));
  w.transition.resize(v, v);
  for (int i = 0; i < v; ++i) {
    Eigen::VectorXd logits(v);
    for (int j = 0; j < v; ++j) logits[j] = config.markov_concentration * chain_rng.normal();
    w.transition.row(i) = Distribution::softmax(logits).vec().transpose();
  }

  // Gram-Schmidt on Gaussian rows; audio_dim >= V keeps them independent.
  Rng emb_rng(derive_seed(seed, "embedding"));
  w.embedding.resize(v, config.audio_dim);
  for (int i = 0; i < v; ++i) {
    Eigen::VectorXd row(config.audio_dim);
    for (int d = 0; d < config.audio_dim; ++d) row[d] = emb_rng.normal();
    for (int k = 0; k < i; ++k) row -= row.dot(w.embedding.row(k).transpose()) * w.embedding.row(k).transpose();
    w.embedding.row(i) = row.normalized().transpose();
  }

  Rng vis_rng(derive_seed(seed, "viseme"));
  std::vector<int> order(v);
  std::iota(order.begin(), order.end(), 0);
  vis_rng.shuffle(order.begin(), order.end());
  w.viseme.assign(v, 0);
  for (int rank = 0; rank < v; ++rank) w.viseme[order[rank]] = rank % config.viseme_classes;
  return w;
}

struct SyntheticExample {
  TokenSeq truth;
  std::vector<Eigen::VectorXd> audio;  // one frame per token, audio_dim
  std::vector<Eigen::VectorXd> video;  // one frame per token, viseme_classes
  double snr_db = kCleanSnr;
};

// Truth and video come from one stream, the unit noise pattern from another,
// so the same example_seed yields identical video at every SNR and audio
// noise that only rescales with the SNR.
inline SyntheticExample emit_example(const World& world, double snr_db, std::uint64_t example_seed) {
  const auto& cfg = world.config;
  Rng content(derive_seed(example_seed, "content"));
  Rng noise(derive_seed(example_seed, "noise"));

  SyntheticExample ex;
  ex.snr_db = snr_db;
  const int len = content.uniform_int(cfg.seq_len_min, cfg.seq_len_max);
  ex.truth.reserve(len);
  for (int t = 0; t < len; ++t) {
    int tok;
    if (t == 0) {
      tok = static_cast<int>(content.below(static_cast<std::uint64_t>(cfg.vocab_size)));
    } else {
      const double u = content.uniform();
      const auto row = world.transition.row(ex.truth.back());
      double acc = 0.0;
      tok = cfg.vocab_size - 1;
      for (int j = 0; j < cfg.vocab_size; ++j) {
        acc += row[j];
        if (u < acc) {
          tok = j;
          break;
        }
      }
    }
    ex.truth.push_back(tok);
  }

  for (int t = 0; t < len; ++t) {
    int cls = world.viseme[ex.truth[t]];
    if (content.uniform() < cfg.video_flip_prob) {
      int other = static_cast<int>(content.below(static_cast<std::uint64_t>(cfg.viseme_classes - 1)));
      cls = other >= cls ? other + 1 : other;
    }
    Eigen::VectorXd frame = Eigen::VectorXd::Zero(cfg.viseme_classes);
    frame[cls] = 1.0;
    ex.video.push_back(std::move(frame));
  }

  const double sigma = noise_std(snr_db, cfg.base_noise_std);
  for (int t = 0; t < len; ++t) {
    Eigen::VectorXd frame = world.embedding.row(ex.truth[t]).transpose();
    for (int d = 0; d < cfg.audio_dim; ++d) {
      const double z = noise.normal();
      if (sigma > 0.0) frame[d] += sigma * z;
    }
    ex.audio.push_back(std::move(frame));
  }
  return ex;
}

// Re-noises a clean example at a new SNR using its own unit noise pattern.
inline SyntheticExample renoise(const World& world, const SyntheticExample& clean, double snr_db,
                                std::uint64_t example_seed) {
  SyntheticExample ex = clean;
  ex.snr_db = snr_db;
  const double sigma = noise_std(snr_db, world.config.base_noise_std);
  if (sigma == 0.0) return ex;
  Rng noise(derive_seed(example_seed, "noise"));
  for (auto& frame : ex.audio) {
    for (Eigen::Index d = 0; d < frame.size(); ++d) frame[d] += sigma * noise.normal();
  }
  return ex;
}

enum class Split { kTrain, kValid, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

struct Corpus {
  Split split = Split::kTrain;
  std::uint64_t seed = 0;
  std::vector<SyntheticExample> examples;

  std::uint64_t example_seed(std::size_t index) const {
    return derive_seed(derive_seed(seed, split_name(split)), static_cast<std::uint64_t>(index));
  }
};

// Discrete distribution over training SNRs.
struct SnrSchedule {
  std::vector<std::pair<double, double>> entries;  // (snr_db, weight)

  // 70% clean, 30% spread over {-5, 0, 5} dB.
  static SnrSchedule clean_biased() {
    return SnrSchedule{{{kCleanSnr, 0.7}, {-5.0, 0.1}, {0.0, 0.1}, {5.0, 0.1}}};
  }

  void validate() const {
    if (entries.empty()) throw ConfigError("snr schedule is empty");
    double total = 0.0;
    for (const auto& [snr, w] : entries) {
      if (!(w >= 0.0) || std::isnan(snr)) throw ConfigError("snr schedule has an invalid entry");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("snr schedule weights sum to zero");
  }

  double sample(Rng& rng) const {
    double total = 0.0;
    for (const auto& e : entries) total += e.second;
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (const auto& [snr, w] : entries) {
      acc += w;
      if (u < acc) return snr;
    }
    return entries.back().first;
  }
};

struct SplitSizes {
  int train = 1;
  int valid = 1;
  int test = 1;
};

struct CorpusSet {
  Corpus train;
  Corpus valid;
  Corpus test;
};

// Training examples draw their SNR from the schedule; valid/test are clean
// and get re-noised per evaluation SNR.
inline CorpusSet generate_corpus(const World& world, const SplitSizes& sizes,
                                 const SnrSchedule& schedule, std::uint64_t seed) {
  schedule.validate();
  if (sizes.train < 1 || sizes.valid < 1 || sizes.test < 1) {
    throw ConfigError("split sizes must be >= 1");
  }
  CorpusSet set;
  auto fill = [&](Corpus& c, Split split, int n, bool noisy) {
    c.split = split;
    c.seed = seed;
    c.examples.reserve(n);
    for (int i = 0; i < n; ++i) {
      const auto es = c.example_seed(static_cast<std::size_t>(i));
      double snr = kCleanSnr;
      if (noisy) {
        Rng snr_rng(derive_seed(es, "snr"));
        snr = schedule.sample(snr_rng);
      }
      c.examples.push_back(emit_example(world, snr, es));
    }
  };
  fill(set.train, Split::kTrain, sizes.train, true);
  fill(set.valid, Split::kValid, sizes.valid, false);
  fill(set.test, Split::kTest, sizes.test, false);
  return set;
}

// Re-noises every example of a clean corpus with SNRs drawn from a schedule.
// The draw depends only on the example seed and the label.
inline Corpus renoise_with_schedule(const World& world, const Corpus& clean,
                                    const SnrSchedule& schedule, std::string_view label) {
  Corpus out;
  out.split = clean.split;
  out.seed = clean.seed;
  out.examples.reserve(clean.examples.size());
  for (std::size_t i = 0; i < clean.examples.size(); ++i) {
    const auto es = clean.example_seed(i);
    Rng snr_rng(derive_seed(es, label));
    out.examples.push_back(renoise(world, clean.examples[i], schedule.sample(snr_rng), es));
  }
  return out;
}

inline Corpus renoise_at(const World& world, const Corpus& clean, double snr_db) {
  Corpus out;
  out.split = clean.split;
  out.seed = clean.seed;
  out.examples.reserve(clean.examples.size());
  for (std::size_t i = 0; i < clean.examples.size(); ++i) {
    out.examples.push_back(renoise(world, clean.examples[i], snr_db, clean.example_seed(i)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: one JSON object per line, floats at 9 significant digits.

inline std::string format_real(double x, int digits) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return buf;
}

inline std::string format_snr(double snr_db) {
  return std::isinf(snr_db) ? std::string("inf") : format_real(snr_db, 9);
}

inline double parse_snr(const std::string& s) {
  if (s == "inf" || s == "+inf") return kCleanSnr;
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("bad SNR value '" + s + "'");
  }
  if (pos != s.size()) throw ConfigError("bad SNR value '" + s + "'");
  return v;
}

inline void write_example_json(std::ostream& os, const SyntheticExample& ex) {
  auto frames = [&os](const std::vector<Eigen::VectorXd>& fs) {
    os << '[';
    for (std::size_t t = 0; t < fs.size(); ++t) {
      if (t) os << ',';
      os << '[';
      for (Eigen::Index d = 0; d < fs[t].size(); ++d) {
        if (d) os << ',';
        os << format_real(fs[t][d], 9);
      }
      os << ']';
    }
    os << ']';
  };
  os << "{\"truth\":[";
  for (std::size_t t = 0; t < ex.truth.size(); ++t) {
    if (t) os << ',';
    os << ex.truth[t];
  }
  os << "],\"audio\":";
  frames(ex.audio);
  os << ",\"video\":";
  frames(ex.video);
  os << ",\"snr_db\":";
  if (std::isinf(ex.snr_db)) {
    os << "\"inf\"";
  } else {
    os << format_real(ex.snr_db, 9);
  }
  os << "}\n";
}

inline SyntheticExample parse_example_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  SyntheticExample ex;
  ex.truth = j.at("truth").get<std::vector<TokenId>>();
  auto frames = [](const nlohmann::json& arr) {
    std::vector<Eigen::VectorXd> out;
    for (const auto& f : arr) {
      const auto v = f.get<std::vector<double>>();
      out.emplace_back(Eigen::VectorXd::Map(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    return out;
  };
  ex.audio = frames(j.at("audio"));
  ex.video = frames(j.at("video"));
  const auto& snr = j.at("snr_db");
  ex.snr_db = snr.is_string() ? parse_snr(snr.get<std::string>()) : snr.get<double>();
  if (ex.audio.size() != ex.truth.size() || ex.video.size() != ex.truth.size()) {
    throw DimensionError("corpus record: frame count differs from truth length");
  }
  return ex;
}

inline std::string corpus_to_string(const Corpus& corpus) {
  std::ostringstream os;
  for (const auto& ex : corpus.examples) write_example_json(os, ex);
  return os.str();
}

inline Corpus read_corpus(const std::string& path, Split split, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file " + path);
  Corpus c;
  c.split = split;
  c.seed = seed;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      c.examples.push_back(parse_example_json(line));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

}  // namespace msrl
