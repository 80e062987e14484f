#pragma once

// Corpus WER, fusion baselines and SNR sweeps.

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msrl/core.hpp"
#include "msrl/decoding.hpp"
#include "msrl/error.hpp"
#include "msrl/experts.hpp"
#include "msrl/policy.hpp"
#include "msrl/synthworld.hpp"

namespace msrl {

// Corpus-level WER: total edits over total reference tokens.
inline double wer(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  if (hyps.size() != refs.size()) throw DimensionError("wer: hyps and refs differ in length");
  long edits = 0, ref_tokens = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    edits += edit_distance(hyps[i], refs[i]);
    ref_tokens += static_cast<long>(refs[i].size());
  }
  if (ref_tokens == 0) throw EmptyReference("wer: total reference length is zero");
  return static_cast<double>(edits) / static_cast<double>(ref_tokens);
}

// Per-step distribution for an utterance and a decoded prefix.
using DistSource = std::function<Distribution(const SyntheticExample&, std::span<const TokenId>)>;

inline DistSource expert_source(const ExpertParams& params, ExpertKind kind, const Vocab& vocab) {
  return [&params, kind, vocab](const SyntheticExample& ex, std::span<const TokenId> prefix) {
    const TokenId prev = prefix.empty() ? vocab.bos() : prefix.back();
    return expert_step(params, prev, expert_features(ex, kind, prefix.size()));
  };
}

using StepFn = std::function<StepOutput(std::span<const TokenId>)>;
using StepperFactory = std::function<StepFn(const SyntheticExample&)>;

inline Distribution ensemble_combine(const Distribution& f_i, const Distribution& f_v) {
  if (f_i.size() != f_v.size()) throw DimensionError("ensemble: size mismatch");
  return Distribution(0.5 * (f_i.vec() + f_v.vec()));
}

// P proportional to f_i^beta * f_v^(1 - beta), normalized in log space.
inline Distribution log_linear_combine(double beta, const Distribution& f_i, const Distribution& f_v) {
  if (f_i.size() != f_v.size()) throw DimensionError("late fusion: size mismatch");
  Eigen::VectorXd logits(f_i.size());
  for (int k = 0; k < f_i.size(); ++k) {
    const double a = f_i[k] > 0 ? std::log(f_i[k]) : -std::numeric_limits<double>::infinity();
    const double b = f_v[k] > 0 ? std::log(f_v[k]) : -std::numeric_limits<double>::infinity();
    // Keep 0 * -inf out of the sum at the grid end points.
    logits[k] = (beta == 0.0 ? 0.0 : beta * a) + (beta == 1.0 ? 0.0 : (1.0 - beta) * b);
  }
  return Distribution::softmax(logits);
}

inline StepperFactory single_stepper(DistSource src, double gate_value) {
  return [src = std::move(src), gate_value](const SyntheticExample& ex) -> StepFn {
    return [src, &ex, gate_value](std::span<const TokenId> prefix) {
      Distribution p = src(ex, prefix);
      return StepOutput{p, p, p, gate_value};
    };
  };
}

inline StepperFactory ensemble_stepper(DistSource f_i_src, DistSource f_v_src) {
  return [fi = std::move(f_i_src), fv = std::move(f_v_src)](const SyntheticExample& ex) -> StepFn {
    return [fi, fv, &ex](std::span<const TokenId> prefix) {
      StepOutput out{fi(ex, prefix), fv(ex, prefix), {}, 0.5};
      out.p_a = ensemble_combine(out.f_i, out.f_v);
      return out;
    };
  };
}

inline StepperFactory late_fusion_stepper(DistSource f_i_src, DistSource f_v_src, double beta) {
  return [fi = std::move(f_i_src), fv = std::move(f_v_src), beta](const SyntheticExample& ex) -> StepFn {
    return [fi, fv, &ex, beta](std::span<const TokenId> prefix) {
      StepOutput out{fi(ex, prefix), fv(ex, prefix), {}, beta};
      out.p_a = log_linear_combine(beta, out.f_i, out.f_v);
      return out;
    };
  };
}

inline StepperFactory msrl_stepper(const FrozenExperts& experts, const PolicyState& state, const World& world) {
  return [&experts, &state, &world](const SyntheticExample& ex) -> StepFn {
    auto s = std::make_shared<MsrlStepper>(experts.av, experts.vision, state.policy, ex,
                                           acoustic_summary(state.summarizer, world, ex.audio), world.vocab());
    return [s](std::span<const TokenId> prefix) { return (*s)(prefix); };
  };
}

inline TokenSeq decode_top1(const StepperFactory& factory, const SyntheticExample& ex, const Vocab& vocab,
                            int beam_size, int max_len) {
  return beam_search(factory(ex), vocab, beam_size, max_len).front().seq;
}

inline double corpus_wer(const StepperFactory& factory, const Corpus& corpus, const Vocab& vocab,
                         int beam_size, int max_len) {
  std::vector<TokenSeq> hyps, refs;
  for (const auto& ex : corpus.examples) {
    hyps.push_back(decode_top1(factory, ex, vocab, beam_size, max_len));
    refs.push_back(ex.truth);
  }
  return wer(hyps, refs);
}

struct LateFusionFit {
  double beta = 1.0;
  std::vector<std::pair<double, double>> curve;  // (beta, greedy WER)
};

// Grid search over beta in {0, 0.05, ..., 1} on greedy WER; ties go to the
// larger beta.
inline LateFusionFit fit_late_fusion(const DistSource& f_i_src, const DistSource& f_v_src,
                                     const Corpus& valid, const Vocab& vocab, int max_len) {
  if (valid.examples.empty()) throw EmptyInput("fit_late_fusion: empty valid corpus");
  LateFusionFit fit;
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 20; ++k) {
    const double beta = k / 20.0;
    const double w = corpus_wer(late_fusion_stepper(f_i_src, f_v_src, beta), valid, vocab, 1, max_len);
    fit.curve.emplace_back(beta, w);
    if (w <= best) {
      best = w;
      fit.beta = beta;
    }
  }
  return fit;
}

struct SystemUnderTest {
  std::string name;
  StepperFactory factory;
};

struct SweepCell {
  double wer = 0.0;
  int n_utts = 0;
  long n_ref_tokens = 0;
};

inline constexpr const char* kInvariantSystem = "invariant";
inline constexpr const char* kVisionSystem = "vision-only";

struct SweepReport {
  std::vector<std::string> systems;
  std::vector<double> grid;
  std::vector<std::vector<SweepCell>> cells;  // [system][snr]

  std::size_t system_index(const std::string& name) const {
    for (std::size_t i = 0; i < systems.size(); ++i) {
      if (systems[i] == name) return i;
    }
    throw ConfigError("sweep report has no system '" + name + "'");
  }

  const SweepCell& cell(const std::string& system, double snr) const {
    const auto s = system_index(system);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (grid[g] == snr) return cells[s][g];
    }
    throw ConfigError("sweep report has no SNR " + format_snr(snr));
  }

  // Mean WER over the finite grid points; falls back to all points when the
  // grid is clean-only.
  double average(const std::string& system) const {
    const auto s = system_index(system);
    double sum = 0.0;
    int n = 0;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (std::isinf(grid[g])) continue;
      sum += cells[s][g].wer;
      ++n;
    }
    if (n == 0) {
      for (const auto& c : cells[s]) sum += c.wer;
      n = static_cast<int>(cells[s].size());
    }
    return n > 0 ? sum / n : 0.0;
  }

  // Largest grid SNR where the invariant system is worse than vision-only.
  std::optional<double> crossover_snr() const {
    std::size_t inv = 0, vis = 0;
    try {
      inv = system_index(kInvariantSystem);
      vis = system_index(kVisionSystem);
    } catch (const ConfigError&) {
      return std::nullopt;
    }
    std::optional<double> best;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (cells[inv][g].wer > cells[vis][g].wer && (!best || grid[g] > *best)) best = grid[g];
    }
    return best;
  }
};

inline SweepReport run_sweep(const std::vector<SystemUnderTest>& systems, const World& world,
                             const Corpus& clean_test, const std::vector<double>& grid, int beam_size,
                             int max_len) {
  if (grid.empty()) throw ConfigError("run_sweep: empty SNR grid");
  std::set<std::string> names;
  for (const auto& s : systems) {
    if (!names.insert(s.name).second) throw ConfigError("run_sweep: duplicate system '" + s.name + "'");
  }
  SweepReport rep;
  rep.grid = grid;
  for (const auto& s : systems) rep.systems.push_back(s.name);
  rep.cells.assign(systems.size(), std::vector<SweepCell>(grid.size()));
  const Vocab vocab = world.vocab();

  for (std::size_t g = 0; g < grid.size(); ++g) {
    const Corpus noisy = renoise_at(world, clean_test, grid[g]);
    for (std::size_t s = 0; s < systems.size(); ++s) {
      std::vector<TokenSeq> hyps, refs;
      long ref_tokens = 0;
      for (const auto& ex : noisy.examples) {
        hyps.push_back(decode_top1(systems[s].factory, ex, vocab, beam_size, max_len));
        refs.push_back(ex.truth);
        ref_tokens += static_cast<long>(ex.truth.size());
      }
      rep.cells[s][g] = {wer(hyps, refs), static_cast<int>(noisy.examples.size()), ref_tokens};
    }
  }
  return rep;
}

inline std::string sweep_csv(const SweepReport& rep) {
  std::ostringstream os;
  os << "system,snr_db,wer,n_utts,n_ref_tokens\n";
  char buf[32];
  for (std::size_t s = 0; s < rep.systems.size(); ++s) {
    for (std::size_t g = 0; g < rep.grid.size(); ++g) {
      const auto& c = rep.cells[s][g];
      std::snprintf(buf, sizeof buf, "%.4f", c.wer);
      os << rep.systems[s] << ',' << format_snr(rep.grid[g]) << ',' << buf << ',' << c.n_utts << ','
         << c.n_ref_tokens << '\n';
    }
  }
  return os.str();
}

// Systems x (finite SNRs, avg, clean), WER in percent.
inline std::string sweep_markdown(const SweepReport& rep) {
  std::vector<std::size_t> finite, clean;
  for (std::size_t g = 0; g < rep.grid.size(); ++g) {
    (std::isinf(rep.grid[g]) ? clean : finite).push_back(g);
  }
  std::ostringstream os;
  char buf[32];
  os << "WER (%) by SNR (dB). avg is over {";
  for (std::size_t k = 0; k < finite.size(); ++k) os << (k ? ", " : "") << format_snr(rep.grid[finite[k]]);
  os << "}.\n\n| System |";
  for (auto g : finite) os << ' ' << format_snr(rep.grid[g]) << " |";
  if (!finite.empty()) os << " avg |";
  for (std::size_t k = 0; k < clean.size(); ++k) os << " clean |";
  os << "\n|---|";
  for (std::size_t k = 0; k < finite.size() + (finite.empty() ? 0 : 1) + clean.size(); ++k) os << "---|";
  os << '\n';
  for (std::size_t s = 0; s < rep.systems.size(); ++s) {
    os << "| " << rep.systems[s] << " |";
    for (auto g : finite) {
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * rep.cells[s][g].wer);
      os << ' ' << buf << " |";
    }
    if (!finite.empty()) {
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * rep.average(rep.systems[s]));
      os << ' ' << buf << " |";
    }
    for (auto g : clean) {
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * rep.cells[s][g].wer);
      os << ' ' << buf << " |";
    }
    os << '\n';
  }
  if (const auto x = rep.crossover_snr()) {
    os << "\nCrossover SNR (invariant worse than vision-only): " << format_snr(*x) << " dB\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Divergent-step diagnostic.

inline constexpr double kDivergenceDisplayFloor = 0.05;

struct DivergenceRecord {
  std::size_t step = 0;
  TokenId truth_token = 0;  // EOS when the step is past the reference
  TokenId a_token = 0;
  TokenId b_token = 0;
  // (token, probability) with probability > kDivergenceDisplayFloor.
  std::vector<std::pair<TokenId, double>> f_i, f_v, a_p_a, b_p_a;
};

inline std::vector<std::pair<TokenId, double>> filter_display(const Distribution& d) {
  std::vector<std::pair<TokenId, double>> out;
  for (int k = 0; k < d.size(); ++k) {
    if (d[k] > kDivergenceDisplayFloor) out.emplace_back(k, d[k]);
  }
  return out;
}

// First step where the greedy decodes of A and B emit different tokens;
// nullopt when they agree everywhere.
inline std::optional<DivergenceRecord> dump_divergence(const StepperFactory& a, const StepperFactory& b,
                                                       const SyntheticExample& ex, const Vocab& vocab,
                                                       int max_len) {
  const Hypothesis ha = beam_search(a(ex), vocab, 1, max_len).front();
  const Hypothesis hb = beam_search(b(ex), vocab, 1, max_len).front();
  const std::size_t n = std::min(ha.steps.size(), hb.steps.size());
  for (std::size_t t = 0; t < n; ++t) {
    if (ha.steps[t].token == hb.steps[t].token) continue;
    DivergenceRecord r;
    r.step = t;
    r.truth_token = t < ex.truth.size() ? ex.truth[t] : vocab.eos();
    r.a_token = ha.steps[t].token;
    r.b_token = hb.steps[t].token;
    r.f_i = filter_display(hb.steps[t].f_i());
    r.f_v = filter_display(hb.steps[t].f_v());
    r.a_p_a = filter_display(ha.steps[t].p_a());
    r.b_p_a = filter_display(hb.steps[t].p_a());
    return r;
  }
  return std::nullopt;
}

inline std::string divergence_json(const DivergenceRecord& r, std::size_t utterance, double snr_db) {
  std::ostringstream os;
  auto dist = [&os](const char* key, const std::vector<std::pair<TokenId, double>>& d) {
    os << ",\"" << key << "\":[";
    for (std::size_t k = 0; k < d.size(); ++k) {
      os << (k ? "," : "") << '[' << d[k].first << ',' << format_real(d[k].second, 6) << ']';
    }
    os << ']';
  };
  os << "{\"utt\":" << utterance << ",\"snr_db\":";
  if (std::isinf(snr_db)) {
    os << "\"inf\"";
  } else {
    os << format_real(snr_db, 9);
  }
  os << ",\"step\":" << r.step << ",\"truth\":" << r.truth_token << ",\"a_token\":" << r.a_token
     << ",\"b_token\":" << r.b_token;
  dist("f_i", r.f_i);
  dist("f_v", r.f_v);
  dist("a_p_a", r.a_p_a);
  dist("b_p_a", r.b_p_a);
  os << "}\n";
  return os.str();
}

}  // namespace msrl
