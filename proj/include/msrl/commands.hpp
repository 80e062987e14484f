#pragma once

// Pipeline stages behind the command-line tool. Every stage reads the run
// configuration, writes its artifacts atomically and records a manifest;
// run_command maps library errors onto the tool's exit codes.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msrl/checkpoint.hpp"
#include "msrl/config.hpp"
#include "msrl/error.hpp"
#include "msrl/eval.hpp"
#include "msrl/experts.hpp"
#include "msrl/gradcheck.hpp"
#include "msrl/policy.hpp"
#include "msrl/synthworld.hpp"

namespace msrl {

inline constexpr const char* kToolName = "msrl";
inline constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitVerifyFailed = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitMissing = 4,
  kExitUnknownName = 5,
};

struct CommandOptions {
  std::string config_path;  // optional for gradcheck only
  bool trace = false;
  std::optional<std::string> systems;
  std::optional<std::uint64_t> seed;
  std::optional<int> instances;
  bool perturb = false;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

// ---------------------------------------------------------------------------
// Files.

inline void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path p(path);
  std::error_code ec;
  if (p.has_parent_path()) {
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp + " for writing");
    os << content;
    os.flush();
    if (!os) throw IoError("write failed for " + tmp);
  }
  fs::rename(tmp, p, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

inline void require_file(const std::string& path, const std::string& hint) {
  if (!std::filesystem::is_regular_file(path)) throw MissingArtifact("missing " + path + " (" + hint + ")");
}

inline std::string corpus_path(const RunConfig& c, Split s) {
  return (std::filesystem::path(c.corpus_dir) / (std::string(split_name(s)) + ".jsonl")).string();
}
inline std::string checkpoint_path(const RunConfig& c, const std::string& name) {
  return (std::filesystem::path(c.checkpoint_dir) / (name + ".ckpt")).string();
}
inline std::string report_path(const RunConfig& c, const std::string& name) {
  return (std::filesystem::path(c.report_dir) / name).string();
}

// Hash of the keys that determine corpus contents.
inline std::string data_key(const RunConfig& cfg) {
  std::string text;
  std::istringstream is(config_to_text(cfg));
  for (std::string line; std::getline(is, line);) {
    if (line.rfind("seed ", 0) == 0 || line.rfind("world.", 0) == 0 || line.rfind("data.", 0) == 0) {
      text += line + '\n';
    }
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

// ---------------------------------------------------------------------------
// Manifest.

class Manifest {
 public:
  Manifest(std::string stage, const RunConfig& cfg) : stage_(std::move(stage)) {
    doc_["tool"] = kToolName;
    doc_["version"] = kToolVersion;
    doc_["stage"] = stage_;
    doc_["config_hash"] = config_hash(cfg);
    doc_["data_key"] = data_key(cfg);
    doc_["seeds"] = nlohmann::ordered_json::object();
    doc_["files"] = nlohmann::ordered_json::array();
    doc_["results"] = nlohmann::ordered_json::object();
    doc_["wall_clock_s"] = nlohmann::ordered_json::object();
  }

  void seed(const std::string& name, std::uint64_t value) { doc_["seeds"][name] = value; }
  void file(const std::string& path) { files_.push_back(path); }
  template <typename T>
  void result(const std::string& key, const T& value) {
    doc_["results"][key] = value;
  }
  void timing(const std::string& name, double seconds) { doc_["wall_clock_s"][name] = seconds; }

  std::string write(const std::string& dir) {
    for (const auto& f : files_) {
      std::error_code ec;
      const auto size = std::filesystem::file_size(f, ec);
      if (ec) throw IoError("manifest: listed file " + f + " does not exist");
      doc_["files"].push_back({{"path", f}, {"bytes", size}});
    }
    const std::string path = (std::filesystem::path(dir) / ("manifest-" + stage_ + ".json")).string();
    write_file_atomic(path, doc_.dump(2) + "\n");
    return path;
  }

 private:
  std::string stage_;
  std::vector<std::string> files_;
  nlohmann::ordered_json doc_;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Loading stage inputs.

inline Corpus load_corpus(const RunConfig& cfg, Split split) {
  const std::string path = corpus_path(cfg, split);
  require_file(path, "run gen-data first");
  const std::string manifest = (std::filesystem::path(cfg.corpus_dir) / "manifest-gen-data.json").string();
  if (std::filesystem::is_regular_file(manifest)) {
    std::ifstream in(manifest);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(manifest + ": " + e.what());
    }
    if (j.value("data_key", std::string()) != data_key(cfg)) {
      throw MissingArtifact("corpus in " + cfg.corpus_dir +
                            " was generated from a different world/data config; rerun gen-data");
    }
  }
  Corpus c = read_corpus(path, split, cfg.corpus_seed());
  for (const auto& ex : c.examples) {
    if ((!ex.audio.empty() && ex.audio.front().size() != cfg.world.audio_dim) ||
        (!ex.video.empty() && ex.video.front().size() != cfg.world.viseme_classes)) {
      throw IoError(path + ": frame sizes do not match the world config");
    }
  }
  return c;
}

inline ExpertParams load_expert(const RunConfig& cfg, ExpertKind kind) {
  const std::string path = checkpoint_path(cfg, expert_name(kind));
  require_file(path, "run pretrain first");
  ExpertParams p;
  try {
    p = load_params<ExpertParams>(read_checkpoint(path), "");
  } catch (const DimensionError& e) {
    throw IoError(path + ": " + e.what());
  }
  const ExpertDims d = p.dims();
  if (d.input_dim != expert_input_dim(cfg.world, kind) || d.vocab_full != cfg.world.vocab_size + 2 ||
      p.w_ctx.cols() != p.embed.cols() || p.w_out.cols() != p.w_feat.rows()) {
    throw IoError(path + ": checkpoint shapes do not match the config");
  }
  return p;
}

inline PolicyState load_policy(const RunConfig& cfg) {
  const std::string path = checkpoint_path(cfg, "policy");
  require_file(path, "run train-rl first");
  PolicyState s;
  try {
    const TensorMap t = read_checkpoint(path);
    s.policy = load_params<PolicyParams>(t, "policy.");
    s.summarizer = load_params<SummarizerParams>(t, "summarizer.");
  } catch (const DimensionError& e) {
    throw IoError(path + ": " + e.what());
  }
  if (s.policy.w.size() != 2 * (cfg.world.vocab_size + 2) + s.summarizer.summary_dim() ||
      s.summarizer.w1.cols() != kAudioStatDim) {
    throw IoError(path + ": checkpoint shapes do not match the config");
  }
  return s;
}

// Valid split at training-schedule SNRs, shared by pretraining, RL model
// selection and the late-fusion fit.
inline Corpus noisy_valid(const World& world, const Corpus& clean, const RunConfig& cfg) {
  return renoise_with_schedule(world, clean, cfg.schedule, "valid-snr");
}

inline std::string fmt(double x, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

// ---------------------------------------------------------------------------
// Stages.

inline int cmd_gen_data(const RunConfig& cfg, const CommandOptions& opts) {
  Stopwatch sw;
  Manifest m("gen-data", cfg);
  m.seed("master", cfg.seed);
  m.seed("world", cfg.world_seed());
  m.seed("corpus", cfg.corpus_seed());
  const World world = build_world(cfg.world, cfg.world_seed());
  const CorpusSet cs = generate_corpus(world, cfg.sizes, cfg.schedule, cfg.corpus_seed());

  int clean = 0;
  for (const auto& ex : cs.train.examples) clean += std::isinf(ex.snr_db) ? 1 : 0;
  for (const Corpus* c : {&cs.train, &cs.valid, &cs.test}) {
    const std::string path = corpus_path(cfg, c->split);
    write_file_atomic(path, corpus_to_string(*c));
    m.file(path);
    *opts.out << split_name(c->split) << ": " << c->examples.size() << " utterances -> " << path << '\n';
  }
  const double frac = static_cast<double>(clean) / static_cast<double>(cs.train.examples.size());
  *opts.out << "train clean fraction " << fmt(frac, "%.4f") << '\n';
  m.result("train_clean_fraction", frac);
  m.timing("gen-data", sw.seconds());
  m.write(cfg.corpus_dir);
  return kExitOk;
}

inline int cmd_pretrain(const RunConfig& cfg, const CommandOptions& opts) {
  Stopwatch sw;
  Manifest m("pretrain", cfg);
  const World world = build_world(cfg.world, cfg.world_seed());
  const Vocab vocab = world.vocab();
  const Corpus train = load_corpus(cfg, Split::kTrain);
  const Corpus valid = noisy_valid(world, load_corpus(cfg, Split::kValid), cfg);

  for (ExpertKind kind : {ExpertKind::kAudioVisual, ExpertKind::kVision, ExpertKind::kAudio}) {
    Stopwatch stage;
    const std::string name = expert_name(kind);
    m.seed("pretrain-" + name, cfg.pretrain_seed(kind));
    Rng rng(cfg.pretrain_seed(kind));
    const ExpertDims dims{expert_input_dim(cfg.world, kind), cfg.expert_hidden, cfg.expert_emb, vocab.full_size()};
    const ExpertParams init = ExpertParams::random(dims, rng);
    const PretrainResult r = pretrain_ce(init, train, kind, vocab, cfg.pretrain, rng, &valid);

    CheckpointWriter ckpt;
    ckpt.add_all("", r.params);
    const std::string ckpt_file = checkpoint_path(cfg, name);
    write_file_atomic(ckpt_file, ckpt.str());
    m.file(ckpt_file);

    std::string csv = "epoch,train_loss,valid_loss\n";
    for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
      csv += std::to_string(e) + ',' + fmt(r.train_loss[e], "%.9f") + ',' + fmt(r.valid_loss[e], "%.9f") + '\n';
    }
    const std::string csv_file = report_path(cfg, "pretrain_" + name + "_loss.csv");
    write_file_atomic(csv_file, csv);
    m.file(csv_file);
    m.result(name + "_best_epoch", r.best_epoch);
    m.timing("pretrain-" + name, stage.seconds());
    *opts.out << name << ": train CE " << fmt(r.train_loss.front(), "%.4f") << " -> "
              << fmt(r.train_loss.back(), "%.4f") << ", best valid CE " << fmt(r.valid_loss[r.best_epoch], "%.4f")
              << " at epoch " << r.best_epoch << '\n';
  }
  m.timing("pretrain", sw.seconds());
  m.write(cfg.checkpoint_dir);
  return kExitOk;
}

inline std::string trace_json(const TraceRecord& t) {
  std::ostringstream os;
  auto list = [&os](const std::vector<double>& v) {
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << format_real(v[i], 9);
    os << ']';
  };
  os << "{\"epoch\":" << t.epoch << ",\"utt\":" << t.utterance << ",\"rewards\":";
  list(t.rewards);
  os << ",\"baseline\":" << format_real(t.baseline, 9) << ",\"advantages\":";
  list(t.advantages);
  os << ",\"top1_wer\":" << format_real(t.top1_wer, 9) << ",\"mean_gate\":" << format_real(t.mean_gate, 9)
     << "}\n";
  return os.str();
}

inline int cmd_train_rl(const RunConfig& cfg, const CommandOptions& opts) {
  Stopwatch sw;
  Manifest m("train-rl", cfg);
  const World world = build_world(cfg.world, cfg.world_seed());
  const Corpus train = load_corpus(cfg, Split::kTrain);
  const Corpus valid = noisy_valid(world, load_corpus(cfg, Split::kValid), cfg);
  const FrozenExperts experts{load_expert(cfg, ExpertKind::kAudioVisual), load_expert(cfg, ExpertKind::kVision)};

  Rng init_rng(cfg.policy_init_seed());
  const PolicyState init =
      PolicyState::initial(world.vocab().full_size(), cfg.summarizer_hidden, cfg.summary_dim, init_rng);
  RLTrainConfig rl = cfg.rl;
  rl.seed = cfg.rl_seed();
  m.seed("policy-init", cfg.policy_init_seed());
  m.seed("rl", rl.seed);

  std::string trace;
  RLRunOptions run;
  run.eval_beam_size = cfg.eval_beam;
  run.eval_max_len = cfg.eval_max_len;
  if (opts.trace) run.on_episode = [&trace](const TraceRecord& t) { trace += trace_json(t); };

  const RLResult res = train_rl(experts, world, init, train, valid, rl, cfg.reward, run);

  CheckpointWriter ckpt;
  ckpt.add_all("policy.", res.best.policy);
  ckpt.add_all("summarizer.", res.best.summarizer);
  const std::string ckpt_file = checkpoint_path(cfg, "policy");
  write_file_atomic(ckpt_file, ckpt.str());
  m.file(ckpt_file);

  std::string csv =
      "epoch,train_mean_reward,train_wer,train_mean_gate,valid_wer,valid_mean_reward,valid_mean_kl,valid_mean_gate\n";
  for (const auto& e : res.epochs) {
    csv += std::to_string(e.epoch) + ',' + fmt(e.train_mean_reward) + ',' + fmt(e.train_wer) + ',' +
           fmt(e.train_mean_gate) + ',' + fmt(e.valid.wer) + ',' + fmt(e.valid.mean_reward) + ',' +
           fmt(e.valid.mean_kl) + ',' + fmt(e.valid.mean_gate) + '\n';
  }
  const std::string csv_file = report_path(cfg, "rl_metrics.csv");
  write_file_atomic(csv_file, csv);
  m.file(csv_file);
  if (opts.trace) {
    const std::string trace_file = report_path(cfg, "rl_trace.jsonl");
    write_file_atomic(trace_file, trace);
    m.file(trace_file);
  }

  *opts.out << "initial valid: wer " << fmt(res.initial_valid.wer, "%.4f") << " reward "
            << fmt(res.initial_valid.mean_reward, "%.4f") << " gate " << fmt(res.initial_valid.mean_gate, "%.3f")
            << '\n';
  for (const auto& e : res.epochs) {
    *opts.out << "epoch " << e.epoch << ": train reward " << fmt(e.train_mean_reward, "%.4f") << " wer "
              << fmt(e.train_wer, "%.4f") << " gate " << fmt(e.train_mean_gate, "%.3f") << " | valid wer "
              << fmt(e.valid.wer, "%.4f") << " reward " << fmt(e.valid.mean_reward, "%.4f") << " kl "
              << fmt(e.valid.mean_kl, "%.4f") << " gate " << fmt(e.valid.mean_gate, "%.3f") << '\n';
  }
  *opts.out << "best epoch " << res.best_epoch << '\n';
  m.result("best_epoch", res.best_epoch);
  m.result("initial_valid_wer", res.initial_valid.wer);
  m.timing("train-rl", sw.seconds());
  m.write(cfg.checkpoint_dir);
  return kExitOk;
}

// Accepted spellings -> report row name.
inline std::string canonical_system(const std::string& name) {
  static const std::map<std::string, std::string> names{
      {"audio-only", "audio-only"}, {"audio", "audio-only"},
      {"vision-only", "vision-only"}, {"vision", "vision-only"},
      {"invariant", "invariant"}, {"modality-invariant", "invariant"},
      {"early-fusion", "early-fusion"},
      {"ensemble", "ensemble"},
      {"late-fusion", "late-fusion"},
      {"msrl", "msrl"},
  };
  const auto it = names.find(name);
  if (it == names.end()) throw UnknownName("unknown system '" + name + "'");
  return it->second;
}

inline int cmd_sweep(const RunConfig& cfg, const CommandOptions& opts) {
  Stopwatch sw;
  Manifest m("sweep", cfg);
  std::vector<std::string> names;
  for (const auto& n : opts.systems ? detail::split_list(*opts.systems) : cfg.systems) {
    names.push_back(canonical_system(n));
  }
  if (names.empty()) throw ConfigError("no systems requested");
  auto wants = [&names](std::initializer_list<const char*> any) {
    for (const auto& n : names) {
      for (const char* a : any) {
        if (n == a) return true;
      }
    }
    return false;
  };

  const World world = build_world(cfg.world, cfg.world_seed());
  const Vocab vocab = world.vocab();
  const Corpus test = load_corpus(cfg, Split::kTest);

  // Load only what the requested rows need.
  std::optional<ExpertParams> av, vision, audio;
  std::optional<PolicyState> policy;
  if (wants({"invariant", "early-fusion", "ensemble", "late-fusion", "msrl"})) {
    av = load_expert(cfg, ExpertKind::kAudioVisual);
  }
  if (wants({"vision-only", "ensemble", "late-fusion", "msrl"})) vision = load_expert(cfg, ExpertKind::kVision);
  if (wants({"audio-only"})) audio = load_expert(cfg, ExpertKind::kAudio);
  FrozenExperts frozen;
  if (wants({"msrl"})) {
    policy = load_policy(cfg);
    frozen = FrozenExperts{*av, *vision};
  }

  std::optional<LateFusionFit> late;
  if (wants({"late-fusion"})) {
    const Corpus valid = noisy_valid(world, load_corpus(cfg, Split::kValid), cfg);
    late = fit_late_fusion(expert_source(*av, ExpertKind::kAudioVisual, vocab),
                           expert_source(*vision, ExpertKind::kVision, vocab), valid, vocab, cfg.eval_max_len);
    m.result("late_fusion_beta", late->beta);
  }

  std::vector<SystemUnderTest> systems;
  for (const auto& n : names) {
    StepperFactory f;
    if (n == "audio-only") {
      f = single_stepper(expert_source(*audio, ExpertKind::kAudio, vocab), 1.0);
    } else if (n == "vision-only") {
      f = single_stepper(expert_source(*vision, ExpertKind::kVision, vocab), 0.0);
    } else if (n == "invariant" || n == "early-fusion") {
      f = single_stepper(expert_source(*av, ExpertKind::kAudioVisual, vocab), 1.0);
    } else if (n == "ensemble") {
      f = ensemble_stepper(expert_source(*av, ExpertKind::kAudioVisual, vocab),
                           expert_source(*vision, ExpertKind::kVision, vocab));
    } else if (n == "late-fusion") {
      f = late_fusion_stepper(expert_source(*av, ExpertKind::kAudioVisual, vocab),
                              expert_source(*vision, ExpertKind::kVision, vocab), late->beta);
    } else {
      f = msrl_stepper(frozen, *policy, world);
    }
    systems.push_back({n, std::move(f)});
  }

  const SweepReport rep = run_sweep(systems, world, test, cfg.snr_grid, cfg.eval_beam, cfg.eval_max_len);
  std::string md = sweep_markdown(rep);
  if (late) md += "\nlate-fusion is a log-linear surrogate, beta = " + fmt(late->beta, "%.2f") + " fit on valid.\n";

  const std::string csv_file = report_path(cfg, "sweep.csv");
  const std::string md_file = report_path(cfg, "sweep.md");
  write_file_atomic(csv_file, sweep_csv(rep));
  write_file_atomic(md_file, md);
  m.file(csv_file);
  m.file(md_file);

  if (wants({"invariant"}) && wants({"msrl"})) {
    const std::size_t a = rep.system_index("invariant");
    const std::size_t b = rep.system_index("msrl");
    std::string lines;
    for (double snr : cfg.snr_grid) {
      const Corpus noisy = renoise_at(world, test, snr);
      for (std::size_t i = 0; i < noisy.examples.size(); ++i) {
        const auto r = dump_divergence(systems[a].factory, systems[b].factory, noisy.examples[i], vocab,
                                       cfg.eval_max_len);
        if (r) lines += divergence_json(*r, i, snr);
      }
    }
    const std::string div_file = report_path(cfg, "divergence.jsonl");
    write_file_atomic(div_file, lines);
    m.file(div_file);
  }

  *opts.out << md;
  if (const auto x = rep.crossover_snr()) {
    m.result("crossover_snr", format_snr(*x));
    *opts.out << "crossover_snr " << format_snr(*x) << '\n';
  } else if (wants({"invariant"}) && wants({"vision-only"})) {
    *opts.out << "crossover_snr none\n";
  }
  m.timing("sweep", sw.seconds());
  m.write(cfg.report_dir);
  return kExitOk;
}

inline int cmd_gradcheck(std::uint64_t seed, int instances, bool perturb, const CommandOptions& opts) {
  if (instances < 0) throw ConfigError("--instances must be >= 0");
  if (instances == 0) {
    *opts.err << "warning: gradcheck with 0 instances checks nothing\n";
    *opts.out << "gradcheck: 0 instances, vacuous pass\n";
    return kExitOk;
  }
  const GradcheckResult r = run_gradcheck(seed, instances, perturb);
  *opts.out << "gradcheck: " << r.instances << " instances, max relative error " << fmt(r.max_rel_error, "%.3e")
            << " (tolerance " << fmt(kGradcheckTolerance, "%.0e") << ", h " << fmt(kGradcheckStep, "%.0e") << ")\n";
  if (r.skipped > 0) *opts.out << "skipped " << r.skipped << " single-hypothesis beams\n";
  if (!r.passed()) {
    *opts.out << "FAIL at instance " << r.worst_instance << " coordinate " << r.worst_coord << ": analytic "
              << fmt(r.worst_analytic, "%.12g") << " numeric " << fmt(r.worst_numeric, "%.12g") << '\n';
    return kExitVerifyFailed;
  }
  return kExitOk;
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data", "pretrain", "train-rl", "sweep", "gradcheck"};
  return names;
}

// Runs one command and turns errors into exit codes with a one-line message.
inline int run_command(const std::string& command, const CommandOptions& opts) {
  try {
    if (command == "gradcheck") {
      std::uint64_t seed = 0;
      if (!opts.config_path.empty()) seed = read_config(opts.config_path).seed;
      if (opts.seed) seed = *opts.seed;
      return cmd_gradcheck(seed, opts.instances.value_or(50), opts.perturb, opts);
    }
    bool known = false;
    for (const auto& n : command_names()) known = known || n == command;
    if (!known) throw UnknownName("unknown command '" + command + "'");
    if (opts.config_path.empty()) throw ConfigError("--config is required for " + command);
    RunConfig cfg = read_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    if (command == "gen-data") return cmd_gen_data(cfg, opts);
    if (command == "pretrain") return cmd_pretrain(cfg, opts);
    if (command == "train-rl") return cmd_train_rl(cfg, opts);
    return cmd_sweep(cfg, opts);
  } catch (const ConfigError& e) {
    *opts.err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    *opts.err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const MissingArtifact& e) {
    *opts.err << "missing prerequisite: " << e.what() << '\n';
    return kExitMissing;
  } catch (const UnknownName& e) {
    *opts.err << "unknown name: " << e.what() << '\n';
    return kExitUnknownName;
  } catch (const std::exception& e) {
    *opts.err << "error: " << e.what() << '\n';
    return kExitVerifyFailed;
  }
}

}  // namespace msrl
