#include <cmath>

#include <gtest/gtest.h>

#include "msrl/gradcheck.hpp"
#include "msrl/policy.hpp"
#include "oracles.hpp"

using namespace msrl;

namespace {

Hypothesis make_hyp(TokenSeq seq, std::vector<StepOutput> outs, std::vector<TokenId> tokens) {
  Hypothesis h;
  h.seq = std::move(seq);
  for (std::size_t t = 0; t < outs.size(); ++t) {
    h.steps.push_back({tokens[t], std::make_shared<const StepOutput>(outs[t])});
    h.logp += std::log(outs[t].p_a[tokens[t]]);
  }
  return h;
}

std::vector<double> flat(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// Small world and random (unpretrained) experts for trainer-level tests.
struct TinySetup {
  World world;
  FrozenExperts experts;
  CorpusSet data;
  PolicyState init;

  explicit TinySetup(std::uint64_t seed) {
    WorldConfig wc;
    wc.vocab_size = 5;
    wc.viseme_classes = 2;
    wc.seq_len_min = 2;
    wc.seq_len_max = 4;
    wc.audio_dim = 5;
    world = build_world(wc, seed);
    data = generate_corpus(world, {12, 4, 1}, SnrSchedule::clean_biased(), seed);
    Rng rng(seed);
    const int full = world.vocab().full_size();
    experts.av = ExpertParams::random({expert_input_dim(wc, ExpertKind::kAudioVisual), 4, 2, full}, rng);
    experts.vision = ExpertParams::random({expert_input_dim(wc, ExpertKind::kVision), 4, 2, full}, rng);
    experts.av.w_out *= 100.0;
    experts.vision.w_out *= 100.0;
    init = PolicyState::initial(full, 3, 2, rng);
  }
};

}  // namespace

TEST(Gate, Examples) {
  const Distribution f{0.25, 0.75};
  Eigen::VectorXd ia = Eigen::VectorXd::Zero(2);
  PolicyParams p = PolicyParams::zeros(2, 2);
  EXPECT_DOUBLE_EQ(gate(p, f, f, ia), 0.5);
  p.b = 20.0;
  EXPECT_GE(gate(p, f, f, ia), 1.0 - 1e-8);
  p.b = std::log(3.0);
  EXPECT_NEAR(gate(p, f, f, ia), 0.75, 1e-15);
  EXPECT_THROW(gate(p, f, f, Eigen::VectorXd::Zero(3)), DimensionError);
}

TEST(Gate, SigmoidIsStableAtExtremes) {
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(2.0) + sigmoid(-2.0), 1.0, 1e-15);
}

TEST(Combine, Examples) {
  const Distribution fi{0.8, 0.2}, fv{0.2, 0.8};
  EXPECT_EQ(combine(1.0, fi, fv), fi);
  EXPECT_EQ(combine(0.0, fi, fv), fv);
  const auto half = combine(0.5, fi, fv);
  EXPECT_NEAR(half[0], 0.5, 1e-15);
  EXPECT_NEAR(half[1], 0.5, 1e-15);
  EXPECT_THROW(combine(1.5, fi, fv), DomainError);
  EXPECT_THROW(combine(0.5, fi, Distribution{1.0}), DimensionError);
}

TEST(Combine, ValidAndArgmaxAtEnds) {
  Rng rng(2);
  for (int k = 0; k < 500; ++k) {
    Eigen::VectorXd a(6), b(6);
    for (int i = 0; i < 6; ++i) a[i] = 2 * rng.normal(), b[i] = 2 * rng.normal();
    const auto fi = Distribution::softmax(a), fv = Distribution::softmax(b);
    const double alpha = rng.uniform();
    EXPECT_TRUE(combine(alpha, fi, fv).is_strictly_positive());
    EXPECT_EQ(combine(1.0, fi, fv).argmax(), fi.argmax());
    EXPECT_EQ(combine(0.0, fi, fv).argmax(), fv.argmax());
  }
}

TEST(Reward, Examples) {
  const Distribution d{0.5, 0.5};
  const StepOutput out{d, d, d, 0.5};
  const Hypothesis exact = make_hyp({0, 1}, {out, out}, {0, 1});
  EXPECT_EQ(reward(exact, {0, 1}, {0.0, 0.0}), 0.0);
  EXPECT_EQ(reward(exact, {0, 0}, {0.0, 0.0}), -1.0);

  // KL(P_a || F_i) = -ln q0 when P_a = [1, 0].
  auto step = [](double kl) {
    const Distribution pa{1.0, 0.0};
    const Distribution fi{std::exp(-kl), 1.0 - std::exp(-kl)};
    return StepOutput{fi, Distribution{0.5, 0.5}, pa, 1.0};
  };
  const Hypothesis h = make_hyp({0, 0}, {step(0.10), step(0.25)}, {0, 0});
  EXPECT_NEAR(reward(h, {0, 0}, {1.0, 0.0}), -0.35, 1e-12);
  // The second penalty sees KL([1,0] || [0.5,0.5]) = ln 2 per step.
  EXPECT_NEAR(reward(h, {0, 0}, {1.0, 1.0}), -0.35 - 2 * std::log(2.0), 1e-12);
}

TEST(Reward, PropagatesKlDomainError) {
  const StepOutput out{Distribution{1.0, 0.0}, Distribution{0.5, 0.5}, Distribution{0.5, 0.5}, 1.0};
  const Hypothesis h = make_hyp({0}, {out}, {0});
  EXPECT_THROW(reward(h, {0}, {1.0, 0.0}), DomainError);
  EXPECT_NO_THROW(reward(h, {0}, {0.0, 1.0}));
}

TEST(Reward, MonotoneInEditDistance) {
  Rng rng(3);
  for (int k = 0; k < 500; ++k) {
    auto rand_seq = [&] {
      TokenSeq s(rng.below(6));
      for (auto& t : s) t = static_cast<TokenId>(rng.below(2));
      return s;
    };
    const TokenSeq truth = rand_seq(), y1 = rand_seq(), y2 = rand_seq();
    const Hypothesis h1 = make_hyp(y1, {}, {}), h2 = make_hyp(y2, {}, {});
    const int e1 = edit_distance(y1, truth), e2 = edit_distance(y2, truth);
    if (e1 < e2) {
      EXPECT_GT(reward(h1, truth, {0, 0}), reward(h2, truth, {0, 0}));
    }
  }
}

TEST(ReinforceLoss, TwoHypothesisExample) {
  Beam beam(2);
  beam[0].logp = std::log(0.6);
  beam[1].logp = std::log(0.2);
  const auto tr = reinforce_loss_with_rewards(beam, {0.0, -2.0});
  EXPECT_NEAR(tr.nbest[0], 0.75, 1e-15);
  EXPECT_NEAR(tr.nbest[1], 0.25, 1e-15);
  EXPECT_DOUBLE_EQ(tr.baseline, -1.0);
  EXPECT_DOUBLE_EQ(tr.advantages[0], 1.0);
  EXPECT_DOUBLE_EQ(tr.advantages[1], -1.0);
  EXPECT_NEAR(tr.loss, -std::log(3.0), 1e-12);
  // Independent scalar evaluation.
  EXPECT_NEAR(tr.loss, -(std::log(0.75) * 1.0 + std::log(0.25) * -1.0), 1e-12);
}

TEST(ReinforceLoss, EqualRewardsGiveZeroLoss) {
  Beam beam(3);
  beam[0].logp = -1.0;
  beam[1].logp = -2.0;
  beam[2].logp = -4.0;
  const auto tr = reinforce_loss_with_rewards(beam, {-3.0, -3.0, -3.0});
  EXPECT_EQ(tr.loss, 0.0);
  for (double a : tr.advantages) EXPECT_EQ(a, 0.0);
}

TEST(ReinforceLoss, EqualInexactRewardsGiveExactlyZero) {
  // Plain sum-then-divide does not return 0.1 for three copies of 0.1.
  ASSERT_NE((0.1 + 0.1 + 0.1) / 3.0, 0.1);
  for (double r : {0.1, -0.7, -1.0 / 3.0, -12.345678}) {
    for (std::size_t n : {2u, 3u, 5u, 7u}) {
      Beam beam(n);
      for (std::size_t k = 0; k < n; ++k) beam[k].logp = -1.0 - static_cast<double>(k);
      const auto tr = reinforce_loss_with_rewards(beam, std::vector<double>(n, r));
      EXPECT_EQ(tr.baseline, r);
      EXPECT_EQ(tr.loss, 0.0);
    }
  }
}

TEST(ReinforceLoss, Errors) {
  Beam one(1);
  EXPECT_THROW(reinforce_loss_with_rewards(one, {0.0}), BeamTooSmall);
  EXPECT_THROW(reinforce_loss(one, {0}, RewardConfig{}), BeamTooSmall);
  Beam two(2);
  EXPECT_THROW(reinforce_loss_with_rewards(two, {0.0}), DimensionError);
}

TEST(PolicyGradient, MatchesScalarOracle) {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto ep = make_gradcheck_episode(derive_seed(1234, seed));
    if (ep.beam.size() < 2) continue;
    ++checked;
    const Eigen::VectorXd g = policy_gradient_with_rewards(ep.beam, ep.rewards, ep.state, ep.stats);
    const auto theta = flat(ep.state.flatten());
    const int full = ep.world.vocab().full_size();
    const auto stats = flat(ep.stats);
    const int hidden = static_cast<int>(ep.state.summarizer.w1.rows());
    const int summary = ep.state.summarizer.summary_dim();
    // The oracle's loss at the unperturbed point equals the library's.
    EXPECT_NEAR(oracle::frozen_loss(ep.beam, ep.rewards, theta, full, hidden, summary, stats),
                reinforce_loss_with_rewards(ep.beam, ep.rewards).loss, 1e-10);
    double worst = 0.0;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      auto up = theta, dn = theta;
      up[j] += 1e-6;
      dn[j] -= 1e-6;
      const double numeric = (oracle::frozen_loss(ep.beam, ep.rewards, up, full, hidden, summary, stats) -
                              oracle::frozen_loss(ep.beam, ep.rewards, dn, full, hidden, summary, stats)) /
                             2e-6;
      worst = std::max(worst, oracle::rel_error(g[static_cast<Eigen::Index>(j)], numeric));
    }
    EXPECT_LE(worst, 1e-5) << "episode " << seed;
  }
  EXPECT_GT(checked, 20);
}

TEST(PolicyGradient, FullRewardPathMatchesFrozenPath) {
  const auto ep = make_gradcheck_episode(5);
  ASSERT_GE(ep.beam.size(), 2u);
  const auto a = policy_gradient(ep.beam, ep.example.truth, RewardConfig{}, ep.state, ep.stats);
  const auto b = policy_gradient_with_rewards(ep.beam, ep.rewards, ep.state, ep.stats);
  EXPECT_EQ(a, b);
}

TEST(PolicyGradient, BaselineShiftInvariance) {
  Rng rng(9);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto ep = make_gradcheck_episode(derive_seed(77, seed));
    if (ep.beam.size() < 2) continue;
    auto shifted = ep.rewards;
    const double c = rng.uniform(-50.0, 50.0);
    for (auto& r : shifted) r += c;
    const auto g0 = policy_gradient_with_rewards(ep.beam, ep.rewards, ep.state, ep.stats);
    const auto g1 = policy_gradient_with_rewards(ep.beam, shifted, ep.state, ep.stats);
    EXPECT_LE((g0 - g1).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(PolicyGradient, TangentIdentity) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto ep = make_gradcheck_episode(derive_seed(99, seed));
    const auto g = nbest_log_gradients(ep.beam, ep.state, ep.stats);
    const auto p = nbest_probs(ep.beam);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(ep.state.size());
    for (std::size_t n = 0; n < g.size(); ++n) sum += p[n] * g[n];
    EXPECT_LE(sum.cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(PolicyGradient, EqualRewardsGiveZeroGradient) {
  const auto ep = make_gradcheck_episode(3);
  ASSERT_GE(ep.beam.size(), 2u);
  const std::vector<double> same(ep.beam.size(), -2.5);
  EXPECT_EQ(policy_gradient_with_rewards(ep.beam, same, ep.state, ep.stats).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PolicyGradient, IdenticalExpertsGiveZeroGradient) {
  const int full = 6;
  Rng rng(4);
  PolicyState state = PolicyState::initial(full, 3, 2, rng);
  for (Eigen::Index i = 0; i < state.policy.w.size(); ++i) state.policy.w[i] = rng.normal();
  Eigen::VectorXd stats(kAudioStatDim);
  stats << 0.3, 0.5, 0.4;
  const Eigen::VectorXd ia = acoustic_summary(state.summarizer, stats);
  const oracle::RandomStepper base{full, 21};
  auto stepper = [&](std::span<const TokenId> prefix) {
    StepOutput out = base(prefix);
    out.f_v = out.f_i;
    out.gate = gate(state.policy, out.f_i, out.f_v, ia);
    out.p_a = combine(out.gate, out.f_i, out.f_v);
    return out;
  };
  const Beam beam = beam_search(stepper, Vocab{4}, 4, 4);
  ASSERT_GE(beam.size(), 2u);
  std::vector<double> rewards;
  for (std::size_t n = 0; n < beam.size(); ++n) rewards.push_back(-static_cast<double>(n));
  EXPECT_EQ(policy_gradient_with_rewards(beam, rewards, state, stats).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PolicyGradient, StaleBeamIsRejected) {
  auto ep = make_gradcheck_episode(3);
  ASSERT_GE(ep.beam.size(), 2u);
  ep.state.policy.b += 0.5;
  EXPECT_THROW(policy_gradient_with_rewards(ep.beam, ep.rewards, ep.state, ep.stats), StalenessError);
}

TEST(PolicyState, FlattenAssignRoundTrip) {
  Rng rng(1);
  PolicyState s = PolicyState::initial(8, 3, 2, rng);
  s.policy.b = 0.7;
  Eigen::VectorXd v = s.flatten();
  EXPECT_EQ(v.size(), s.size());
  EXPECT_EQ(v.size(), 2 * 8 + 2 + 1 + 3 * 3 + 3 + 2 * 3 + 2);
  v[0] = 42.0;
  s.assign(v);
  EXPECT_EQ(s.policy.w[0], 42.0);
  EXPECT_EQ(s.flatten(), v);
  EXPECT_THROW(s.assign(Eigen::VectorXd::Zero(3)), DimensionError);
}

TEST(TrainRl, ZeroLearningRateKeepsParameters) {
  const TinySetup t(1);
  RLTrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 2;
  const auto r = train_rl(t.experts, t.world, t.init, t.data.train, t.data.valid, cfg, RewardConfig{});
  EXPECT_EQ(r.best.flatten(), t.init.flatten());
  ASSERT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(r.epochs[0].valid.wer, r.initial_valid.wer);
  EXPECT_EQ(r.epochs[1].train_mean_reward, r.epochs[0].train_mean_reward);
}

TEST(TrainRl, DeterministicAndTraced) {
  const TinySetup t(2);
  RLTrainConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 2;
  cfg.seed = 7;
  int records = 0;
  RLRunOptions opts;
  opts.on_episode = [&](const TraceRecord& rec) {
    ++records;
    double sum = 0.0;
    for (double a : rec.advantages) sum += a;
    EXPECT_NEAR(sum, 0.0, 1e-12);
    for (std::size_t n = 0; n < rec.rewards.size(); ++n) {
      EXPECT_DOUBLE_EQ(rec.advantages[n], rec.rewards[n] - rec.baseline);
    }
  };
  const auto a = train_rl(t.experts, t.world, t.init, t.data.train, t.data.valid, cfg, RewardConfig{}, opts);
  const auto b = train_rl(t.experts, t.world, t.init, t.data.train, t.data.valid, cfg, RewardConfig{});
  EXPECT_EQ(a.best.flatten(), b.best.flatten());
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  EXPECT_EQ(records, 2 * 12);
  for (std::size_t e = 0; e < a.epochs.size(); ++e) {
    EXPECT_EQ(a.epochs[e].valid.wer, b.epochs[e].valid.wer);
    EXPECT_GE(a.epochs[e].train_mean_gate, 0.0);
    EXPECT_LE(a.epochs[e].train_mean_gate, 1.0);
  }
}

TEST(TrainRl, RejectsBadConfig) {
  const TinySetup t(3);
  RLTrainConfig cfg;
  cfg.beam_size = 1;
  EXPECT_THROW(train_rl(t.experts, t.world, t.init, t.data.train, t.data.valid, cfg, RewardConfig{}),
               ConfigError);
  cfg = {};
  EXPECT_THROW(train_rl(t.experts, t.world, t.init, t.data.train, t.data.valid, cfg, RewardConfig{-1, 0}),
               ConfigError);
}
