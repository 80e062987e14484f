#pragma once

// Gating policy, sequence reward and the baseline-normalized REINFORCE
// trainer over N-best beams.
//
// The policy mixes the two expert distributions with a scalar gate:
//   alpha_t = sigmoid(w . [f_i^t, f_v^t, i_a] + b),  P_a^t = alpha_t f_i^t + (1 - alpha_t) f_v^t
// and is trained online, one SGD step per utterance, on
//   L = -sum_n log P^(Y^n) (R(Y^n, Y*) - mean R)
// where P^ is the beam-renormalized sequence probability and R is held
// constant (score-function estimator).

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "msrl/core.hpp"
#include "msrl/decoding.hpp"
#include "msrl/error.hpp"
#include "msrl/experts.hpp"
#include "msrl/random.hpp"
#include "msrl/synthworld.hpp"

namespace msrl {

struct PolicyParams {
  Eigen::VectorXd w;  // 2 (V + 2) + summary_dim
  double b = 0.0;

  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("w", p.w);
    using Scalar1 = std::conditional_t<std::is_const_v<Self>, const Eigen::Matrix<double, 1, 1>,
                                       Eigen::Matrix<double, 1, 1>>;
    Eigen::Map<Scalar1> bias(&p.b);
    f("b", bias);
  }

  static PolicyParams zeros(int vocab_full, int summary_dim) {
    return {Eigen::VectorXd::Zero(2 * vocab_full + summary_dim), 0.0};
  }
};

struct RewardConfig {
  double lambda1 = 0.1;  // weight on KL(P_a || F_i)
  double lambda2 = 0.1;  // weight on KL(P_a || F_v)

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("reward lambdas must be >= 0");
  }
};

struct RLTrainConfig {
  int beam_size = 5;
  double lr = 0.005;
  int epochs = 5;
  std::uint64_t seed = 0;
  int max_len_slack = 5;

  void validate() const {
    if (beam_size < 2) throw ConfigError("rl.beam_size must be >= 2");
    if (!(lr >= 0.0)) throw ConfigError("rl.lr must be >= 0");
    if (epochs < 1) throw ConfigError("rl.epochs must be >= 1");
    if (max_len_slack < 0) throw ConfigError("rl.max_len_slack must be >= 0");
  }
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Eigen::VectorXd policy_input(const Distribution& f_i, const Distribution& f_v,
                                    const Eigen::VectorXd& i_a) {
  Eigen::VectorXd x(f_i.size() + f_v.size() + i_a.size());
  x << f_i.vec(), f_v.vec(), i_a;
  return x;
}

inline double gate(const PolicyParams& params, const Distribution& f_i, const Distribution& f_v,
                   const Eigen::VectorXd& i_a) {
  const auto dim = f_i.size() + f_v.size() + i_a.size();
  if (params.w.size() != dim) {
    throw DimensionError("gate: policy weight dim " + std::to_string(params.w.size()) + " != input dim " +
                         std::to_string(dim));
  }
  return sigmoid(params.w.dot(policy_input(f_i, f_v, i_a)) + params.b);
}

inline Distribution combine(double alpha, const Distribution& f_i, const Distribution& f_v) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("combine: gate outside [0, 1]");
  if (f_i.size() != f_v.size()) throw DimensionError("combine: size mismatch");
  return Distribution(alpha * f_i.vec() + (1.0 - alpha) * f_v.vec());
}

// -R: edit distance to the truth plus the two KL trust-region penalties,
// summed over every step including EOS.
inline double reward(const Hypothesis& hyp, const TokenSeq& truth, const RewardConfig& cfg) {
  double r = -static_cast<double>(edit_distance(hyp.seq, truth));
  if (cfg.lambda1 != 0.0 || cfg.lambda2 != 0.0) {
    double kl_i = 0.0;
    double kl_v = 0.0;
    for (const auto& st : hyp.steps) {
      if (cfg.lambda1 != 0.0) kl_i += kl_divergence(st.p_a(), st.f_i());
      if (cfg.lambda2 != 0.0) kl_v += kl_divergence(st.p_a(), st.f_v());
    }
    r -= cfg.lambda1 * kl_i + cfg.lambda2 * kl_v;
  }
  return r;
}

struct EpisodeTrace {
  Beam beam;
  std::vector<double> rewards;
  double baseline = 0.0;
  std::vector<double> advantages;
  std::vector<double> nbest;  // renormalized P^ per hypothesis
  double loss = 0.0;
};

// Loss for given per-hypothesis rewards; split out so tests can shift or
// freeze rewards.
inline EpisodeTrace reinforce_loss_with_rewards(const Beam& beam, std::vector<double> rewards) {
  if (beam.size() < 2) throw BeamTooSmall("reinforce_loss: beam has fewer than 2 hypotheses");
  if (rewards.size() != beam.size()) throw DimensionError("reinforce_loss: one reward per hypothesis");
  EpisodeTrace tr;
  tr.beam = beam;
  tr.rewards = std::move(rewards);
  // Mean taken relative to the first reward, so equal rewards give a
  // baseline equal to them bit for bit and exactly zero advantages.
  double offset = 0.0;
  for (double r : tr.rewards) offset += r - tr.rewards.front();
  tr.baseline = tr.rewards.front() + offset / static_cast<double>(tr.rewards.size());
  tr.nbest = nbest_probs(beam);
  tr.advantages.resize(beam.size());
  const double lse = [&] {
    std::vector<double> lp;
    for (const auto& h : beam) lp.push_back(h.logp);
    return logsumexp(lp);
  }();
  for (std::size_t n = 0; n < beam.size(); ++n) {
    tr.advantages[n] = tr.rewards[n] - tr.baseline;
    tr.loss -= (beam[n].logp - lse) * tr.advantages[n];
  }
  return tr;
}

inline EpisodeTrace reinforce_loss(const Beam& beam, const TokenSeq& truth, const RewardConfig& cfg) {
  if (beam.size() < 2) throw BeamTooSmall("reinforce_loss: beam has fewer than 2 hypotheses");
  std::vector<double> rewards;
  rewards.reserve(beam.size());
  for (const auto& h : beam) rewards.push_back(reward(h, truth, cfg));
  return reinforce_loss_with_rewards(beam, std::move(rewards));
}

// ---------------------------------------------------------------------------
// Trainable state and its flat vector view.

struct PolicyState {
  PolicyParams policy;
  SummarizerParams summarizer;

  static PolicyState initial(int vocab_full, int summarizer_hidden, int summary_dim, Rng& rng) {
    return {PolicyParams::zeros(vocab_full, summary_dim),
            SummarizerParams::random(summarizer_hidden, summary_dim, rng)};
  }

  Eigen::Index size() const {
    return policy.w.size() + 1 + summarizer.w1.size() + summarizer.b1.size() + summarizer.w2.size() +
           summarizer.b2.size();
  }

  // [w, b, w1, b1, w2, b2], matrices column-major.
  Eigen::VectorXd flatten() const {
    Eigen::VectorXd v(size());
    Eigen::Index o = 0;
    auto put = [&](const auto& m) {
      v.segment(o, m.size()) = Eigen::VectorXd::Map(m.data(), m.size());
      o += m.size();
    };
    put(policy.w);
    v[o++] = policy.b;
    put(summarizer.w1);
    put(summarizer.b1);
    put(summarizer.w2);
    put(summarizer.b2);
    return v;
  }

  void assign(const Eigen::VectorXd& v) {
    if (v.size() != size()) throw DimensionError("PolicyState::assign: size mismatch");
    Eigen::Index o = 0;
    auto get = [&](auto& m) {
      Eigen::VectorXd::Map(m.data(), m.size()) = v.segment(o, m.size());
      o += m.size();
    };
    get(policy.w);
    policy.b = v[o++];
    get(summarizer.w1);
    get(summarizer.b1);
    get(summarizer.w2);
    get(summarizer.b2);
  }
};

// Audio-visual and vision experts plus the trainable gate, bound to one
// utterance: produces the per-step record the beam search consumes.
class MsrlStepper {
 public:
  MsrlStepper(const ExpertParams& av, const ExpertParams& vision, const PolicyParams& policy,
              const SyntheticExample& ex, Eigen::VectorXd i_a, const Vocab& vocab)
      : av_(av), vision_(vision), policy_(policy), ex_(ex), i_a_(std::move(i_a)), vocab_(vocab) {}

  StepOutput operator()(std::span<const TokenId> prefix) const {
    const TokenId prev = prefix.empty() ? vocab_.bos() : prefix.back();
    const std::size_t t = prefix.size();
    StepOutput out;
    out.f_i = expert_step(av_, prev, expert_features(ex_, ExpertKind::kAudioVisual, t));
    out.f_v = expert_step(vision_, prev, expert_features(ex_, ExpertKind::kVision, t));
    out.gate = gate(policy_, out.f_i, out.f_v, i_a_);
    out.p_a = combine(out.gate, out.f_i, out.f_v);
    return out;
  }

 private:
  const ExpertParams& av_;
  const ExpertParams& vision_;
  const PolicyParams& policy_;
  const SyntheticExample& ex_;
  Eigen::VectorXd i_a_;
  Vocab vocab_;
};

inline constexpr double kStalenessTolerance = 1e-9;

// Flat gradient of log P(Y^n) for every hypothesis, with the chain
//   d log P_a(y)/d alpha = (f_i(y) - f_v(y)) / P_a(y),  d alpha/dz = alpha (1 - alpha)
// through the gate weights and, via i_a, the summarizer.
inline std::vector<Eigen::VectorXd> sequence_score_gradients(const Beam& beam, const PolicyState& state,
                                                             const Eigen::VectorXd& audio_stats) {
  const Eigen::VectorXd i_a = acoustic_summary(state.summarizer, audio_stats);
  const Eigen::Index summary_dim = i_a.size();
  const Eigen::Index wdim = state.policy.w.size();
  std::vector<Eigen::VectorXd> grads;
  grads.reserve(beam.size());

  for (const auto& hyp : beam) {
    Eigen::VectorXd dw = Eigen::VectorXd::Zero(wdim);
    double db = 0.0;
    Eigen::VectorXd d_ia = Eigen::VectorXd::Zero(summary_dim);
    for (const auto& st : hyp.steps) {
      const Eigen::VectorXd x = policy_input(st.f_i(), st.f_v(), i_a);
      if (x.size() != wdim) throw DimensionError("policy_gradient: step input dim mismatch");
      const double alpha = sigmoid(state.policy.w.dot(x) + state.policy.b);
      const double fi = st.f_i()[st.token];
      const double fv = st.f_v()[st.token];
      const double pa = alpha * fi + (1.0 - alpha) * fv;
      if (std::abs(alpha - st.gate()) > kStalenessTolerance ||
          std::abs(pa - st.p_a()[st.token]) > kStalenessTolerance) {
        throw StalenessError("policy_gradient: beam records do not match current parameters");
      }
      const double dz = (fi - fv) / pa * alpha * (1.0 - alpha);
      dw += dz * x;
      db += dz;
      d_ia += dz * state.policy.w.tail(summary_dim);
    }
    const SummarizerParams ds = summarizer_backward(state.summarizer, audio_stats, d_ia);
    PolicyState g{PolicyParams{std::move(dw), db}, ds};
    grads.push_back(g.flatten());
  }
  return grads;
}

// Per-hypothesis gradient of log P^(Y^n) = log P(Y^n) - log sum_m P(Y^m).
inline std::vector<Eigen::VectorXd> nbest_log_gradients(const Beam& beam, const PolicyState& state,
                                                        const Eigen::VectorXd& audio_stats) {
  auto g = sequence_score_gradients(beam, state, audio_stats);
  const auto probs = nbest_probs(beam);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(state.size());
  for (std::size_t m = 0; m < g.size(); ++m) mean += probs[m] * g[m];
  for (auto& gn : g) gn -= mean;
  return g;
}

// Gradient of the renormalized REINFORCE loss with rewards held fixed.
inline Eigen::VectorXd policy_gradient_with_rewards(const Beam& beam, std::span<const double> rewards,
                                                    const PolicyState& state,
                                                    const Eigen::VectorXd& audio_stats) {
  const EpisodeTrace tr = reinforce_loss_with_rewards(beam, {rewards.begin(), rewards.end()});
  const auto g = nbest_log_gradients(beam, state, audio_stats);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(state.size());
  for (std::size_t n = 0; n < beam.size(); ++n) grad -= tr.advantages[n] * g[n];
  return grad;
}

inline Eigen::VectorXd policy_gradient(const Beam& beam, const TokenSeq& truth, const RewardConfig& cfg,
                                       const PolicyState& state, const Eigen::VectorXd& audio_stats) {
  const EpisodeTrace tr = reinforce_loss(beam, truth, cfg);
  return policy_gradient_with_rewards(beam, tr.rewards, state, audio_stats);
}

// ---------------------------------------------------------------------------
// Online training.

struct FrozenExperts {
  ExpertParams av;
  ExpertParams vision;
};

inline Beam msrl_decode(const FrozenExperts& experts, const PolicyState& state, const World& world,
                        const SyntheticExample& ex, int beam_size, int max_len) {
  const Eigen::VectorXd i_a = acoustic_summary(state.summarizer, world, ex.audio);
  MsrlStepper stepper(experts.av, experts.vision, state.policy, ex, i_a, world.vocab());
  return beam_search(stepper, world.vocab(), beam_size, max_len);
}

struct PolicyEval {
  double wer = 0.0;          // corpus-level, top-1
  double mean_reward = 0.0;  // top-1, per utterance
  double mean_kl = 0.0;      // per step of top-1: KL(P_a||F_i) + KL(P_a||F_v)
  double mean_gate = 0.0;    // per step of top-1
};

inline PolicyEval evaluate_policy(const FrozenExperts& experts, const PolicyState& state, const World& world,
                                  const Corpus& corpus, int beam_size, int max_len,
                                  const RewardConfig& reward_cfg) {
  PolicyEval ev;
  long edits = 0, ref_tokens = 0, steps = 0;
  for (const auto& ex : corpus.examples) {
    const Beam beam = msrl_decode(experts, state, world, ex, beam_size, max_len);
    const Hypothesis& top = beam.front();
    edits += edit_distance(top.seq, ex.truth);
    ref_tokens += static_cast<long>(ex.truth.size());
    ev.mean_reward += reward(top, ex.truth, reward_cfg);
    for (const auto& st : top.steps) {
      ev.mean_kl += kl_divergence(st.p_a(), st.f_i()) + kl_divergence(st.p_a(), st.f_v());
      ev.mean_gate += st.gate();
      ++steps;
    }
  }
  if (ref_tokens > 0) ev.wer = static_cast<double>(edits) / static_cast<double>(ref_tokens);
  if (!corpus.examples.empty()) ev.mean_reward /= static_cast<double>(corpus.examples.size());
  if (steps > 0) {
    ev.mean_kl /= static_cast<double>(steps);
    ev.mean_gate /= static_cast<double>(steps);
  }
  return ev;
}

struct EpochMetrics {
  int epoch = 0;
  double train_mean_reward = 0.0;
  double train_wer = 0.0;
  double train_mean_gate = 0.0;
  PolicyEval valid;
};

struct TraceRecord {
  int epoch = 0;
  std::size_t utterance = 0;
  std::vector<double> rewards;
  double baseline = 0.0;
  std::vector<double> advantages;
  double top1_wer = 0.0;
  double mean_gate = 0.0;
};

struct RLResult {
  PolicyState best;
  int best_epoch = 0;
  PolicyEval initial_valid;  // untrained policy on the valid set
  std::vector<EpochMetrics> epochs;
};

struct RLRunOptions {
  int eval_beam_size = 5;
  int eval_max_len = 25;
  std::function<void(const TraceRecord&)> on_episode;  // optional trace sink
};

// One beam search and one plain SGD step per utterance, utterances visited in
// a seeded shuffle. The returned state is the epoch with the lowest valid WER
// (earliest on ties).
inline RLResult train_rl(const FrozenExperts& experts, const World& world, PolicyState state,
                         const Corpus& train, const Corpus& valid, const RLTrainConfig& cfg,
                         const RewardConfig& reward_cfg, const RLRunOptions& opts = {}) {
  cfg.validate();
  reward_cfg.validate();
  Rng rng(derive_seed(cfg.seed, "rl-order"));

  std::vector<Eigen::VectorXd> stats;
  stats.reserve(train.examples.size());
  for (const auto& ex : train.examples) stats.push_back(audio_stats(world, ex.audio));

  RLResult result;
  result.best = state;
  result.initial_valid =
      evaluate_policy(experts, state, world, valid, opts.eval_beam_size, opts.eval_max_len, reward_cfg);
  double best_wer = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train.examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    EpochMetrics m;
    m.epoch = epoch;
    long edits = 0, ref_tokens = 0, gate_steps = 0;
    for (const std::size_t idx : order) {
      const SyntheticExample& ex = train.examples[idx];
      const int max_len = 2 * static_cast<int>(ex.truth.size()) + cfg.max_len_slack;
      const Eigen::VectorXd i_a = acoustic_summary(state.summarizer, stats[idx]);
      MsrlStepper stepper(experts.av, experts.vision, state.policy, ex, i_a, world.vocab());
      const Beam beam = beam_search(stepper, world.vocab(), cfg.beam_size, max_len);

      double top_gate = 0.0;
      for (const auto& st : beam.front().steps) top_gate += st.gate();
      const int top_ed = edit_distance(beam.front().seq, ex.truth);
      edits += top_ed;
      ref_tokens += static_cast<long>(ex.truth.size());
      gate_steps += static_cast<long>(beam.front().steps.size());
      m.train_mean_gate += top_gate;

      if (beam.size() < 2) continue;  // nothing to compare against
      const EpisodeTrace tr = reinforce_loss(beam, ex.truth, reward_cfg);
      m.train_mean_reward += tr.rewards.front();
      if (opts.on_episode) {
        opts.on_episode({epoch, idx, tr.rewards, tr.baseline, tr.advantages,
                         static_cast<double>(top_ed) / static_cast<double>(std::max<std::size_t>(1, ex.truth.size())),
                         beam.front().steps.empty() ? 0.0 : top_gate / static_cast<double>(beam.front().steps.size())});
      }
      if (cfg.lr == 0.0) continue;
      const Eigen::VectorXd grad = policy_gradient_with_rewards(beam, tr.rewards, state, stats[idx]);
      state.assign(state.flatten() - cfg.lr * grad);
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, train.examples.size()));
    m.train_mean_reward /= n;
    m.train_wer = ref_tokens > 0 ? static_cast<double>(edits) / static_cast<double>(ref_tokens) : 0.0;
    m.train_mean_gate = gate_steps > 0 ? m.train_mean_gate / static_cast<double>(gate_steps) : 0.0;
    m.valid = evaluate_policy(experts, state, world, valid, opts.eval_beam_size, opts.eval_max_len, reward_cfg);
    if (m.valid.wer < best_wer) {
      best_wer = m.valid.wer;
      result.best = state;
      result.best_epoch = epoch;
    }
    result.epochs.push_back(m);
  }
  return result;
}

}  // namespace msrl
