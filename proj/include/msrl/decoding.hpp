#pragma once

// Breadth-first beam search over an arbitrary per-step distribution provider.
// The same N-best list serves as the decoder output and as the RL sample set.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "msrl/core.hpp"
#include "msrl/error.hpp"

namespace msrl {

// What a stepper reports for one prefix. Single-distribution systems set
// f_i, f_v and p_a to whatever is meaningful for them.
struct StepOutput {
  Distribution f_i;
  Distribution f_v;
  Distribution p_a;
  double gate = 1.0;
};

struct StepRecord {
  TokenId token = 0;
  // Shared between every candidate expanded from the same prefix.
  std::shared_ptr<const StepOutput> out;

  const Distribution& p_a() const { return out->p_a; }
  const Distribution& f_i() const { return out->f_i; }
  const Distribution& f_v() const { return out->f_v; }
  double gate() const { return out->gate; }
};

struct Hypothesis {
  TokenSeq seq;                  // content tokens
  std::vector<StepRecord> steps;  // len(seq) + 1 if finished
  LogWeight logp = 0.0;
  bool finished = false;          // last emitted token was EOS
};

using Beam = std::vector<Hypothesis>;

template <typename S>
concept Stepper = requires(S s, std::span<const TokenId> prefix) {
  { s(prefix) } -> std::convertible_to<StepOutput>;
};

namespace detail {

inline void check_distribution(const Distribution& d, int expected, const char* what) {
  if (d.size() != expected || !d.is_valid()) {
    throw InvalidDistribution(std::string("beam_search: stepper returned an invalid ") + what);
  }
}

struct Candidate {
  std::size_t parent = 0;
  TokenId token = -1;  // -1: finished parent carried forward
  double score = 0.0;
  std::vector<TokenId> emitted;  // tie-break key, includes EOS when present
};

}  // namespace detail

// Ranks candidates by score, then by emitted token ids (smaller first), then
// by length (shorter first). No length normalization.
template <Stepper S>
Beam beam_search(S&& stepper, const Vocab& vocab, int beam_size, int max_len) {
  if (beam_size < 1) throw ConfigError("beam_search: beam size must be >= 1");
  if (max_len < 1) throw ConfigError("beam_search: max_len must be >= 1");
  const int full = vocab.full_size();

  Beam beam(1);
  for (int step = 0; step < max_len; ++step) {
    if (std::all_of(beam.begin(), beam.end(), [](const Hypothesis& h) { return h.finished; })) break;

    std::vector<detail::Candidate> cands;
    std::vector<std::shared_ptr<const StepOutput>> outs(beam.size());
    for (std::size_t i = 0; i < beam.size(); ++i) {
      const Hypothesis& h = beam[i];
      std::vector<TokenId> emitted = h.seq;
      if (h.finished) {
        emitted.push_back(vocab.eos());
        cands.push_back({i, -1, h.logp, std::move(emitted)});
        continue;
      }
      auto out = std::make_shared<const StepOutput>(stepper(std::span<const TokenId>(h.seq)));
      detail::check_distribution(out->p_a, full, "p_a");
      detail::check_distribution(out->f_i, full, "f_i");
      detail::check_distribution(out->f_v, full, "f_v");
      outs[i] = out;
      for (TokenId tok = 0; tok < full; ++tok) {
        if (tok == vocab.bos()) continue;
        const double p = out->p_a[tok];
        if (!(p > 0.0)) continue;
        std::vector<TokenId> key = emitted;
        key.push_back(tok);
        cands.push_back({i, tok, h.logp + std::log(p), std::move(key)});
      }
    }

    const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(beam_size));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const detail::Candidate& a, const detail::Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        return a.emitted < b.emitted;
                      });

    Beam next;
    next.reserve(keep);
    for (std::size_t k = 0; k < keep; ++k) {
      const auto& c = cands[k];
      Hypothesis h = beam[c.parent];
      if (c.token >= 0) {
        h.steps.push_back({c.token, outs[c.parent]});
        h.logp = c.score;
        if (c.token == vocab.eos()) {
          h.finished = true;
        } else {
          h.seq.push_back(c.token);
        }
      }
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }
  return beam;
}

// Renormalized probabilities of the hypotheses within the beam.
inline std::vector<double> nbest_probs(const Beam& beam) {
  if (beam.empty()) throw EmptyInput("nbest_probs: empty beam");
  std::vector<double> lp;
  lp.reserve(beam.size());
  for (const auto& h : beam) lp.push_back(h.logp);
  return renormalize_nbest(lp);
}

// Sum of log p_a over a hypothesis' steps; equals h.logp for search output.
inline double recompute_logp(const Hypothesis& h) {
  double s = 0.0;
  for (const auto& st : h.steps) s += std::log(st.p_a()[st.token]);
  return s;
}

}  // namespace msrl
