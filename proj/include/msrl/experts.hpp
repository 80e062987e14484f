#pragma once

// Frozen per-step token predictors and the utterance-level acoustic summarizer.
//
// Each expert is a one-hidden-layer autoregressive classifier:
//   h = tanh(W_feat x_t + W_ctx E[prev] + b_feat),  p = softmax(W_out h + b_out)
// The audio-visual expert reads concat(audio[t], video[t]) and yields the
// modality-invariant distribution; the vision expert reads video[t] only.
// Past the last input frame the features are all zero, which the experts
// learn to map to EOS.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msrl/core.hpp"
#include "msrl/error.hpp"
#include "msrl/random.hpp"
#include "msrl/synthworld.hpp"

namespace msrl {

enum class ExpertKind { kAudio, kVision, kAudioVisual };

inline const char* expert_name(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::kAudio: return "audio";
    case ExpertKind::kVision: return "vision";
    case ExpertKind::kAudioVisual: return "av";
  }
  return "?";
}

inline int expert_input_dim(const WorldConfig& cfg, ExpertKind kind) {
  switch (kind) {
    case ExpertKind::kAudio: return cfg.audio_dim;
    case ExpertKind::kVision: return cfg.viseme_classes;
    case ExpertKind::kAudioVisual: return cfg.audio_dim + cfg.viseme_classes;
  }
  return 0;
}

// Feature vector for decoding step t; zeros once t runs past the input.
inline Eigen::VectorXd expert_features(const SyntheticExample& ex, ExpertKind kind, std::size_t t) {
  const Eigen::Index a = ex.audio.empty() ? 0 : ex.audio.front().size();
  const Eigen::Index v = ex.video.empty() ? 0 : ex.video.front().size();
  const bool past_end = t >= ex.truth.size();
  switch (kind) {
    case ExpertKind::kAudio:
      return past_end ? Eigen::VectorXd::Zero(a) : ex.audio[t];
    case ExpertKind::kVision:
      return past_end ? Eigen::VectorXd::Zero(v) : ex.video[t];
    case ExpertKind::kAudioVisual: {
      Eigen::VectorXd x = Eigen::VectorXd::Zero(a + v);
      if (!past_end) {
        x.head(a) = ex.audio[t];
        x.tail(v) = ex.video[t];
      }
      return x;
    }
  }
  return {};
}

struct ExpertDims {
  int input_dim = 0;
  int hidden_dim = 0;
  int emb_dim = 0;
  int vocab_full = 0;  // V + 2
};

struct ExpertParams {
  Eigen::MatrixXd w_feat;  // hidden x input
  Eigen::VectorXd b_feat;  // hidden
  Eigen::MatrixXd w_ctx;   // hidden x emb
  Eigen::MatrixXd w_out;   // (V+2) x hidden
  Eigen::VectorXd b_out;   // V+2
  Eigen::MatrixXd embed;   // (V+2) x emb

  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("w_feat", p.w_feat);
    f("b_feat", p.b_feat);
    f("w_ctx", p.w_ctx);
    f("w_out", p.w_out);
    f("b_out", p.b_out);
    f("embed", p.embed);
  }

  ExpertDims dims() const {
    return {static_cast<int>(w_feat.cols()), static_cast<int>(w_feat.rows()),
            static_cast<int>(embed.cols()), static_cast<int>(w_out.rows())};
  }

  static ExpertParams zeros(const ExpertDims& d) {
    ExpertParams p;
    p.w_feat = Eigen::MatrixXd::Zero(d.hidden_dim, d.input_dim);
    p.b_feat = Eigen::VectorXd::Zero(d.hidden_dim);
    p.w_ctx = Eigen::MatrixXd::Zero(d.hidden_dim, d.emb_dim);
    p.w_out = Eigen::MatrixXd::Zero(d.vocab_full, d.hidden_dim);
    p.b_out = Eigen::VectorXd::Zero(d.vocab_full);
    p.embed = Eigen::MatrixXd::Zero(d.vocab_full, d.emb_dim);
    return p;
  }

  // Scaled Gaussian init; the output layer starts small so the first
  // predictions are close to uniform.
  static ExpertParams random(const ExpertDims& d, Rng& rng) {
    ExpertParams p = zeros(d);
    auto fill = [&rng](Eigen::MatrixXd& m, double scale) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    };
    fill(p.w_feat, 1.0 / std::sqrt(static_cast<double>(d.input_dim)));
    fill(p.w_ctx, 1.0 / std::sqrt(static_cast<double>(d.emb_dim)));
    fill(p.w_out, 0.01);
    fill(p.embed, 1.0);
    return p;
  }

  bool all_finite() const {
    bool ok = true;
    visit(*this, [&ok](const char*, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }

  // this += scale * other
  void axpy(double scale, const ExpertParams& other) {
    w_feat += scale * other.w_feat;
    b_feat += scale * other.b_feat;
    w_ctx += scale * other.w_ctx;
    w_out += scale * other.w_out;
    b_out += scale * other.b_out;
    embed += scale * other.embed;
  }
};

struct ExpertForward {
  Eigen::VectorXd hidden;
  Distribution probs;
};

inline ExpertForward expert_forward(const ExpertParams& params, TokenId prev_token,
                                    const Eigen::VectorXd& features) {
  if (features.size() != params.w_feat.cols()) {
    throw DimensionError("expert_step: feature dim " + std::to_string(features.size()) +
                         " != " + std::to_string(params.w_feat.cols()));
  }
  if (prev_token < 0 || prev_token >= params.embed.rows()) {
    throw DimensionError("expert_step: token id out of range: " + std::to_string(prev_token));
  }
  ExpertForward f;
  f.hidden = (params.w_feat * features + params.w_ctx * params.embed.row(prev_token).transpose() +
              params.b_feat)
                 .array()
                 .tanh()
                 .matrix();
  f.probs = Distribution::softmax(params.w_out * f.hidden + params.b_out);
  return f;
}

inline Distribution expert_step(const ExpertParams& params, TokenId prev_token,
                                const Eigen::VectorXd& features) {
  return expert_forward(params, prev_token, features).probs;
}

// Teacher-forced CE of one utterance (truth steps plus the EOS step).
// Adds d(sum CE)/d(params) into grad when grad is non-null; returns the
// summed loss and token count.
inline std::pair<double, int> ce_utterance(const ExpertParams& params, const SyntheticExample& ex,
                                           ExpertKind kind, const Vocab& vocab, ExpertParams* grad) {
  double loss = 0.0;
  TokenId prev = vocab.bos();
  const std::size_t steps = ex.truth.size() + 1;
  for (std::size_t t = 0; t < steps; ++t) {
    const TokenId target = t < ex.truth.size() ? ex.truth[t] : vocab.eos();
    const Eigen::VectorXd x = expert_features(ex, kind, t);
    const ExpertForward f = expert_forward(params, prev, x);
    loss -= std::log(f.probs[target]);
    if (grad != nullptr) {
      Eigen::VectorXd dlogits = f.probs.vec();
      dlogits[target] -= 1.0;
      grad->w_out.noalias() += dlogits * f.hidden.transpose();
      grad->b_out += dlogits;
      const Eigen::VectorXd dpre =
          ((params.w_out.transpose() * dlogits).array() * (1.0 - f.hidden.array().square())).matrix();
      grad->w_feat.noalias() += dpre * x.transpose();
      grad->b_feat += dpre;
      grad->w_ctx.noalias() += dpre * params.embed.row(prev);
      grad->embed.row(prev).noalias() += (params.w_ctx.transpose() * dpre).transpose();
    }
    prev = target;
  }
  return {loss, static_cast<int>(steps)};
}

// Mean per-token CE over a corpus.
inline double mean_ce(const ExpertParams& params, const Corpus& corpus, ExpertKind kind,
                      const Vocab& vocab) {
  double loss = 0.0;
  long tokens = 0;
  for (const auto& ex : corpus.examples) {
    const auto [l, n] = ce_utterance(params, ex, kind, vocab, nullptr);
    loss += l;
    tokens += n;
  }
  return tokens > 0 ? loss / static_cast<double>(tokens) : 0.0;
}

struct PretrainConfig {
  double lr = 0.5;
  int epochs = 15;
  int batch_size = 16;
};

struct PretrainResult {
  ExpertParams params;             // best by valid loss when a valid set is given, else last
  std::vector<double> train_loss;  // [0] is the initial model, then one per epoch
  std::vector<double> valid_loss;  // same indexing; empty without a valid set
  int best_epoch = 0;
};

// Teacher-forced mini-batch gradient descent on mean per-token CE.
inline PretrainResult pretrain_ce(ExpertParams params, const Corpus& train, ExpertKind kind,
                                  const Vocab& vocab, const PretrainConfig& cfg, Rng& rng,
                                  const Corpus* valid = nullptr) {
  if (cfg.epochs < 1) throw ConfigError("pretrain epochs must be >= 1");
  if (!(cfg.lr >= 0.0)) throw ConfigError("pretrain lr must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("pretrain batch size must be >= 1");

  PretrainResult result;
  result.train_loss.push_back(mean_ce(params, train, kind, vocab));
  double best_valid = std::numeric_limits<double>::infinity();
  if (valid != nullptr) {
    best_valid = mean_ce(params, *valid, kind, vocab);
    result.valid_loss.push_back(best_valid);
  }
  result.params = params;

  std::vector<std::size_t> order(train.examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  ExpertParams grad = ExpertParams::zeros(params.dims());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      grad = ExpertParams::zeros(params.dims());
      int tokens = 0;
      for (std::size_t k = start; k < stop; ++k) {
        tokens += ce_utterance(params, train.examples[order[k]], kind, vocab, &grad).second;
      }
      if (cfg.lr > 0.0) params.axpy(-cfg.lr / tokens, grad);
    }
    result.train_loss.push_back(mean_ce(params, train, kind, vocab));
    if (valid != nullptr) {
      const double vl = mean_ce(params, *valid, kind, vocab);
      result.valid_loss.push_back(vl);
      if (vl < best_valid) {
        best_valid = vl;
        result.best_epoch = epoch;
        result.params = params;
      }
    }
  }
  if (valid == nullptr) {
    result.params = params;
    result.best_epoch = cfg.epochs;
  }
  return result;
}

// Greedy (beam-1) decode of one expert, used by sanity checks. The full
// beam search lives in decoding.hpp.
inline TokenSeq greedy_expert_decode(const ExpertParams& params, const SyntheticExample& ex,
                                     ExpertKind kind, const Vocab& vocab, int max_len) {
  TokenSeq out;
  TokenId prev = vocab.bos();
  for (int t = 0; t < max_len; ++t) {
    const Distribution p = expert_step(params, prev, expert_features(ex, kind, static_cast<std::size_t>(t)));
    // BOS is never a valid continuation.
    int best = 0;
    for (int i = 1; i < p.size(); ++i) {
      if (i == vocab.bos()) continue;
      if (p[i] > p[best]) best = i;
    }
    if (best == vocab.eos()) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Acoustic summarizer: pooled audio statistics -> 2-layer MLP -> I_a.

inline constexpr int kAudioStatDim = 3;

// [log1p(mean per-coordinate energy), log1p(mean distance to the nearest
//  token embedding), frame count / max length]. The log compression keeps the
// first two roughly linear in SNR (dB), so I_a extrapolates to unseen SNRs.
inline Eigen::VectorXd audio_stats(const World& world, std::span<const Eigen::VectorXd> audio) {
  if (audio.empty()) throw EmptyInput("acoustic_summary: utterance has no frames");
  double energy = 0.0;
  double nearest = 0.0;
  for (const auto& frame : audio) {
    if (frame.size() != world.embedding.cols()) {
      throw DimensionError("acoustic_summary: frame dim mismatch");
    }
    energy += frame.squaredNorm() / static_cast<double>(frame.size());
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < world.embedding.rows(); ++k) {
      best = std::min(best, (world.embedding.row(k).transpose() - frame).norm());
    }
    nearest += best;
  }
  const double n = static_cast<double>(audio.size());
  Eigen::VectorXd s(kAudioStatDim);
  s << std::log1p(energy / n), std::log1p(nearest / n), n / static_cast<double>(world.config.seq_len_max);
  return s;
}

struct SummarizerParams {
  Eigen::MatrixXd w1;  // hidden x kAudioStatDim
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // summary x hidden
  Eigen::VectorXd b2;

  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("w1", p.w1);
    f("b1", p.b1);
    f("w2", p.w2);
    f("b2", p.b2);
  }

  int summary_dim() const { return static_cast<int>(w2.rows()); }

  static SummarizerParams zeros(int hidden, int summary) {
    return {Eigen::MatrixXd::Zero(hidden, kAudioStatDim), Eigen::VectorXd::Zero(hidden),
            Eigen::MatrixXd::Zero(summary, hidden), Eigen::VectorXd::Zero(summary)};
  }

  // First layer starts in the near-linear range of tanh over the span of
  // log-compressed statistics.
  static SummarizerParams random(int hidden, int summary, Rng& rng, double w1_scale = 0.1) {
    SummarizerParams p = zeros(hidden, summary);
    for (Eigen::Index i = 0; i < p.w1.size(); ++i) p.w1.data()[i] = w1_scale * rng.normal();
    for (Eigen::Index i = 0; i < p.w2.size(); ++i) p.w2.data()[i] = rng.normal() / std::sqrt(double(hidden));
    return p;
  }

  void axpy(double scale, const SummarizerParams& o) {
    w1 += scale * o.w1;
    b1 += scale * o.b1;
    w2 += scale * o.w2;
    b2 += scale * o.b2;
  }
};

inline Eigen::VectorXd acoustic_summary(const SummarizerParams& params, const Eigen::VectorXd& stats) {
  if (stats.size() != params.w1.cols()) throw DimensionError("acoustic_summary: stats dim mismatch");
  return params.w2 * (params.w1 * stats + params.b1).array().tanh().matrix() + params.b2;
}

inline Eigen::VectorXd acoustic_summary(const SummarizerParams& params, const World& world,
                                        std::span<const Eigen::VectorXd> audio) {
  return acoustic_summary(params, audio_stats(world, audio));
}

// Backprop of a summary-space gradient into the summarizer parameters.
inline SummarizerParams summarizer_backward(const SummarizerParams& params, const Eigen::VectorXd& stats,
                                            const Eigen::VectorXd& d_summary) {
  SummarizerParams g;
  const Eigen::VectorXd h = (params.w1 * stats + params.b1).array().tanh().matrix();
  g.w2 = d_summary * h.transpose();
  g.b2 = d_summary;
  const Eigen::VectorXd dpre =
      ((params.w2.transpose() * d_summary).array() * (1.0 - h.array().square())).matrix();
  g.w1 = dpre * stats.transpose();
  g.b1 = dpre;
  return g;
}

}  // namespace msrl
