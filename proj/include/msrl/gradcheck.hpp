#pragma once

// Finite-difference check of the policy gradient on small random episodes.
//
// The numeric side re-evaluates the N-best loss from scratch at perturbed
// parameters, holding the sampled sequences, the per-step expert
// distributions and the rewards fixed.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "msrl/core.hpp"
#include "msrl/decoding.hpp"
#include "msrl/experts.hpp"
#include "msrl/policy.hpp"
#include "msrl/random.hpp"
#include "msrl/synthworld.hpp"

namespace msrl {

inline constexpr double kGradcheckStep = 1e-6;
inline constexpr double kGradcheckTolerance = 1e-5;
// Denominator floor of the relative error, so coordinates whose true
// gradient is ~0 are judged on absolute error instead of roundoff.
inline constexpr double kGradcheckFloor = 1e-2;

inline double gradcheck_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
}

struct GradcheckEpisode {
  World world;
  FrozenExperts experts;
  PolicyState state;
  SyntheticExample example;
  Eigen::VectorXd stats;
  Beam beam;
  std::vector<double> rewards;
};

// Small world (V=4), random experts sharp enough to make the beam
// non-trivial, random gate weights, N=3.
inline GradcheckEpisode make_gradcheck_episode(std::uint64_t seed) {
  Rng rng(seed);
  WorldConfig wc;
  wc.vocab_size = 4;
  wc.viseme_classes = 2;
  wc.seq_len_min = 1;
  wc.seq_len_max = 4;
  wc.markov_concentration = 1.0;
  wc.audio_dim = 4;
  wc.base_noise_std = 1.0;

  GradcheckEpisode ep;
  ep.world = build_world(wc, derive_seed(seed, "world"));
  const Vocab vocab = ep.world.vocab();
  const double snrs[] = {kCleanSnr, 5.0, 0.0, -5.0};
  ep.example = emit_example(ep.world, snrs[rng.below(4)], derive_seed(seed, "example"));

  auto expert = [&](ExpertKind kind) {
    ExpertParams p = ExpertParams::random({expert_input_dim(wc, kind), 3, 2, vocab.full_size()}, rng);
    p.w_out *= 150.0;  // init scale is 0.01
    for (Eigen::Index i = 0; i < p.b_out.size(); ++i) p.b_out[i] = rng.normal();
    return p;
  };
  ep.experts.av = expert(ExpertKind::kAudioVisual);
  ep.experts.vision = expert(ExpertKind::kVision);

  ep.state = PolicyState::initial(vocab.full_size(), 3, 2, rng);
  for (Eigen::Index i = 0; i < ep.state.policy.w.size(); ++i) ep.state.policy.w[i] = rng.normal();
  ep.state.policy.b = rng.normal();

  ep.stats = audio_stats(ep.world, ep.example.audio);
  const Eigen::VectorXd i_a = acoustic_summary(ep.state.summarizer, ep.stats);
  MsrlStepper stepper(ep.experts.av, ep.experts.vision, ep.state.policy, ep.example, i_a, vocab);
  const int max_len = 2 * static_cast<int>(ep.example.truth.size()) + 1;
  ep.beam = beam_search(stepper, vocab, 3, max_len);
  for (const auto& h : ep.beam) ep.rewards.push_back(reward(h, ep.example.truth, RewardConfig{}));
  return ep;
}

// The N-best loss at arbitrary parameters with rewards frozen, recomputed
// from the stored expert distributions.
inline double frozen_reward_loss(const Beam& beam, const std::vector<double>& rewards,
                                 const PolicyState& state, const Eigen::VectorXd& stats) {
  const Eigen::VectorXd i_a = acoustic_summary(state.summarizer, stats);
  std::vector<double> logp;
  for (const auto& h : beam) {
    double lp = 0.0;
    for (const auto& st : h.steps) {
      const double a = sigmoid(state.policy.w.dot(policy_input(st.f_i(), st.f_v(), i_a)) + state.policy.b);
      lp += std::log(a * st.f_i()[st.token] + (1.0 - a) * st.f_v()[st.token]);
    }
    logp.push_back(lp);
  }
  const double lse = logsumexp(logp);
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double loss = 0.0;
  for (std::size_t n = 0; n < beam.size(); ++n) loss -= (logp[n] - lse) * (rewards[n] - mean);
  return loss;
}

struct GradcheckResult {
  int instances = 0;
  int skipped = 0;  // beams with fewer than two hypotheses
  double max_rel_error = 0.0;
  int worst_instance = -1;
  Eigen::Index worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed() const { return max_rel_error <= kGradcheckTolerance; }
};

// perturb corrupts one analytic coordinate per episode (negative control).
inline GradcheckResult run_gradcheck(std::uint64_t seed, int instances, bool perturb = false) {
  GradcheckResult res;
  res.instances = instances;
  for (int k = 0; k < instances; ++k) {
    const GradcheckEpisode ep = make_gradcheck_episode(derive_seed(seed, static_cast<std::uint64_t>(k)));
    if (ep.beam.size() < 2) {
      ++res.skipped;
      continue;
    }
    Eigen::VectorXd analytic = policy_gradient_with_rewards(ep.beam, ep.rewards, ep.state, ep.stats);
    if (perturb) analytic[0] += 1e-3;

    PolicyState probe = ep.state;
    const Eigen::VectorXd theta = ep.state.flatten();
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      Eigen::VectorXd t = theta;
      t[j] = theta[j] + kGradcheckStep;
      probe.assign(t);
      const double up = frozen_reward_loss(ep.beam, ep.rewards, probe, ep.stats);
      t[j] = theta[j] - kGradcheckStep;
      probe.assign(t);
      const double down = frozen_reward_loss(ep.beam, ep.rewards, probe, ep.stats);
      const double numeric = (up - down) / (2.0 * kGradcheckStep);
      const double err = gradcheck_relative_error(analytic[j], numeric);
      if (res.worst_instance < 0 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_instance = k;
        res.worst_coord = j;
        res.worst_analytic = analytic[j];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace msrl
