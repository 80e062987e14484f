#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "msrl/decoding.hpp"
#include "oracles.hpp"

using namespace msrl;

namespace {

// Same distribution for f_i, f_v and p_a; one row per step index.
struct TableStepper {
  std::vector<Distribution> rows;
  StepOutput operator()(std::span<const TokenId> prefix) const {
    const auto& d = rows.at(std::min(prefix.size(), rows.size() - 1));
    return {d, d, d, 1.0};
  }
};

void expect_well_formed(const Beam& beam, const Vocab& vocab) {
  std::set<std::vector<TokenId>> seen;
  for (std::size_t i = 0; i < beam.size(); ++i) {
    const auto& h = beam[i];
    if (i + 1 < beam.size()) {
      EXPECT_GE(h.logp, beam[i + 1].logp);
    }
    EXPECT_NEAR(recompute_logp(h), h.logp, 1e-10);
    EXPECT_EQ(h.steps.size(), h.seq.size() + (h.finished ? 1 : 0));
    const bool ends_eos = !h.steps.empty() && h.steps.back().token == vocab.eos();
    EXPECT_EQ(h.finished, ends_eos);
    for (const auto& st : h.steps) {
      EXPECT_NE(st.token, vocab.bos());
      EXPECT_GT(st.p_a()[st.token], 0.0);
    }
    std::vector<TokenId> key = h.seq;
    if (h.finished) key.push_back(vocab.eos());
    EXPECT_TRUE(seen.insert(key).second) << "duplicate hypothesis";
  }
}

TokenSeq greedy(const oracle::RandomStepper& s, const Vocab& vocab, int max_len) {
  TokenSeq out;
  for (int t = 0; t < max_len; ++t) {
    const auto p = s(std::span<const TokenId>(out)).p_a;
    TokenId best = -1;
    for (TokenId k = 0; k < vocab.full_size(); ++k) {
      if (k == vocab.bos()) continue;
      if (best < 0 || p[k] > p[best]) best = k;
    }
    if (best == vocab.eos()) break;
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST(BeamSearch, TwoStepBinaryExample) {
  const Vocab vocab{2};  // a = 0, b = 1, BOS = 2, EOS = 3
  TableStepper s{{Distribution{0.6, 0.4, 0.0, 0.0}, Distribution{0.3, 0.7, 0.0, 0.0},
                  Distribution{0.0, 0.0, 0.0, 1.0}}};
  const Beam beam = beam_search(s, vocab, 2, 3);
  ASSERT_EQ(beam.size(), 2u);
  EXPECT_EQ(beam[0].seq, (TokenSeq{0, 1}));
  EXPECT_NEAR(std::exp(beam[0].logp), 0.42, 1e-12);
  EXPECT_EQ(beam[1].seq, (TokenSeq{1, 1}));
  EXPECT_NEAR(std::exp(beam[1].logp), 0.28, 1e-12);
  EXPECT_TRUE(beam[0].finished);
  EXPECT_TRUE(beam[1].finished);
  expect_well_formed(beam, vocab);
}

TEST(BeamSearch, PeakedStepperWidthOneIsGreedy) {
  const Vocab vocab{3};
  const double eps = 1e-3;
  auto peaked = [&](TokenId tok) {
    Eigen::VectorXd p = Eigen::VectorXd::Constant(5, eps / 3.0);
    p[vocab.bos()] = 0.0;
    p[tok] = 1.0 - eps;
    return Distribution(p);
  };
  TableStepper s{{peaked(2), peaked(0), peaked(1), peaked(vocab.eos())}};
  const Beam beam = beam_search(s, vocab, 1, 10);
  ASSERT_EQ(beam.size(), 1u);
  EXPECT_EQ(beam[0].seq, (TokenSeq{2, 0, 1}));
  EXPECT_TRUE(beam[0].finished);
}

TEST(BeamSearch, WidthOneMatchesGreedyOnRandomSteppers) {
  const Vocab vocab{4};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const oracle::RandomStepper s{vocab.full_size(), seed};
    const Beam beam = beam_search(s, vocab, 1, 6);
    ASSERT_EQ(beam.size(), 1u);
    EXPECT_EQ(beam[0].seq, greedy(s, vocab, 6)) << "seed " << seed;
  }
}

// Criterion-sized version lives in the acceptance binary; this covers
// a smaller vocabulary and both larger and exact beam widths.
TEST(BeamSearch, MatchesExhaustiveEnumeration) {
  for (int v : {2, 3}) {
    const Vocab vocab{v};
    const int max_len = 3;
    int full_n = 1;
    for (int k = 0; k < max_len; ++k) full_n *= v + 1;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const oracle::RandomStepper s{vocab.full_size(), seed};
      const auto all = oracle::enumerate_all(s, vocab, max_len);
      const Beam beam = beam_search(s, vocab, full_n, max_len);
      ASSERT_EQ(beam.size(), all.size());
      for (std::size_t i = 0; i < all.size(); ++i) {
        EXPECT_EQ(beam[i].seq, all[i].seq);
        EXPECT_EQ(beam[i].finished, all[i].finished);
        EXPECT_NEAR(beam[i].logp, all[i].logp, 1e-12);
      }
      expect_well_formed(beam, vocab);
    }
  }
}

TEST(BeamSearch, WiderBeamsKeepAtLeastAsGoodScores) {
  const Vocab vocab{4};
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const oracle::RandomStepper s{vocab.full_size(), seed};
    std::vector<Beam> beams;
    for (int n : {1, 2, 3, 5, 8}) beams.push_back(beam_search(s, vocab, n, 4));
    for (std::size_t a = 0; a + 1 < beams.size(); ++a) {
      const Beam& narrow = beams[a];
      const Beam& wide = beams[a + 1];
      for (std::size_t k = 0; k < std::min(narrow.size(), wide.size()); ++k) {
        if (wide[k].logp < narrow[k].logp - 1e-12) ++violations;
      }
    }
    for (const auto& b : beams) expect_well_formed(b, vocab);
  }
  EXPECT_EQ(violations, 0);
}

TEST(BeamSearch, Deterministic) {
  const Vocab vocab{4};
  const oracle::RandomStepper s{vocab.full_size(), 17};
  const Beam a = beam_search(s, vocab, 4, 5);
  const Beam b = beam_search(s, vocab, 4, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].seq, b[i].seq);
    EXPECT_EQ(a[i].logp, b[i].logp);
    EXPECT_EQ(a[i].finished, b[i].finished);
  }
}

TEST(BeamSearch, TruncatedHypothesesStayUnfinished) {
  const Vocab vocab{2};
  TableStepper s{{Distribution{0.5, 0.5, 0.0, 0.0}}};  // never emits EOS
  const Beam beam = beam_search(s, vocab, 3, 2);
  ASSERT_EQ(beam.size(), 3u);
  for (const auto& h : beam) {
    EXPECT_FALSE(h.finished);
    EXPECT_EQ(h.seq.size(), 2u);
    EXPECT_EQ(h.steps.size(), 2u);
  }
  // Equal scores: ordered by token ids.
  EXPECT_EQ(beam[0].seq, (TokenSeq{0, 0}));
  EXPECT_EQ(beam[1].seq, (TokenSeq{0, 1}));
  EXPECT_EQ(beam[2].seq, (TokenSeq{1, 0}));
}

TEST(BeamSearch, FinishedHypothesesAreCarriedForward) {
  const Vocab vocab{2};
  // EOS immediately is the single best outcome; the beam must keep it while
  // continuing to expand the others.
  TableStepper s{{Distribution{0.2, 0.2, 0.0, 0.6}, Distribution{0.05, 0.05, 0.0, 0.9}}};
  const Beam beam = beam_search(s, vocab, 3, 4);
  ASSERT_FALSE(beam.empty());
  EXPECT_TRUE(beam[0].seq.empty());
  EXPECT_TRUE(beam[0].finished);
  EXPECT_NEAR(beam[0].logp, std::log(0.6), 1e-12);
  expect_well_formed(beam, vocab);
}

TEST(BeamSearch, RejectsInvalidStepperOutput) {
  const Vocab vocab{2};
  TableStepper wrong_size{{Distribution{0.5, 0.5, 0.0}}};
  EXPECT_THROW(beam_search(wrong_size, vocab, 2, 2), InvalidDistribution);
  TableStepper bad_sum{{Distribution{0.5, 0.6, 0.0, 0.0}}};
  EXPECT_THROW(beam_search(bad_sum, vocab, 2, 2), InvalidDistribution);
  TableStepper negative{{Distribution{1.5, -0.5, 0.0, 0.0}}};
  EXPECT_THROW(beam_search(negative, vocab, 2, 2), InvalidDistribution);
  TableStepper ok{{Distribution{0.5, 0.5, 0.0, 0.0}}};
  EXPECT_THROW(beam_search(ok, vocab, 0, 2), ConfigError);
  EXPECT_THROW(beam_search(ok, vocab, 2, 0), ConfigError);
}

TEST(NbestProbs, Examples) {
  Beam one(1);
  one[0].logp = -3.0;
  EXPECT_DOUBLE_EQ(nbest_probs(one)[0], 1.0);
  Beam two(2);
  two[0].logp = two[1].logp = -1.5;
  EXPECT_DOUBLE_EQ(nbest_probs(two)[0], 0.5);
  two[0].logp = std::log(0.09);
  two[1].logp = std::log(0.01);
  const auto p = nbest_probs(two);
  EXPECT_NEAR(p[0], 0.9, 1e-12);
  EXPECT_NEAR(p[1], 0.1, 1e-12);
  EXPECT_THROW(nbest_probs(Beam{}), EmptyInput);
}
