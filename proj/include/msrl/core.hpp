#pragma once

// Token/sequence/distribution primitives shared by every other module.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msrl/error.hpp"

namespace msrl {

using TokenId = std::int32_t;

// Content tokens only. BOS/EOS never appear in a TokenSeq.
using TokenSeq = std::vector<TokenId>;

// A log-probability in (-inf, 0].
using LogWeight = double;

// Content vocabulary of size V plus the two reserved control ids.
struct Vocab {
  int content_size = 0;

  TokenId bos() const { return content_size; }
  TokenId eos() const { return content_size + 1; }
  // Size of every Distribution over this vocabulary.
  int full_size() const { return content_size + 2; }
  bool is_content(TokenId id) const { return id >= 0 && id < content_size; }
};

inline constexpr double kSumTolerance = 1e-9;
inline constexpr double kKlFloor = 1e-300;

// Probability vector over the full vocabulary (content + BOS + EOS).
class Distribution {
 public:
  Distribution() = default;
  explicit Distribution(Eigen::VectorXd p) : p_(std::move(p)) {}
  Distribution(std::initializer_list<double> values)
      : p_(Eigen::VectorXd::Map(values.begin(),
                                static_cast<Eigen::Index>(values.size()))) {}

  static Distribution uniform(int size) {
    return Distribution(Eigen::VectorXd::Constant(size, 1.0 / size));
  }

  // Numerically stable softmax of a logit vector.
  static Distribution softmax(const Eigen::VectorXd& logits) {
    const double m = logits.maxCoeff();
    Eigen::VectorXd e = (logits.array() - m).exp().matrix();
    e /= e.sum();
    return Distribution(std::move(e));
  }

  int size() const { return static_cast<int>(p_.size()); }
  double operator[](int i) const { return p_[i]; }
  const Eigen::VectorXd& vec() const { return p_; }

  int argmax() const {
    Eigen::Index idx = 0;
    p_.maxCoeff(&idx);
    return static_cast<int>(idx);
  }

  // Nonnegative, finite, sums to one within kSumTolerance.
  bool is_valid() const {
    if (p_.size() == 0) return false;
    for (Eigen::Index i = 0; i < p_.size(); ++i) {
      if (!std::isfinite(p_[i]) || p_[i] < 0.0) return false;
    }
    return std::abs(p_.sum() - 1.0) <= kSumTolerance;
  }

  bool is_strictly_positive() const { return is_valid() && p_.minCoeff() > 0.0; }

  friend bool operator==(const Distribution& a, const Distribution& b) {
    return a.p_.size() == b.p_.size() && a.p_ == b.p_;
  }

 private:
  Eigen::VectorXd p_;
};

// Unit-cost Levenshtein distance over token ids.
inline int edit_distance(std::span<const TokenId> a, std::span<const TokenId> b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<int> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    int diag = row[0];
    row[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const int up = row[j];
      const int sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
      row[j] = std::min({up + 1, row[j - 1] + 1, sub});
      diag = up;
    }
  }
  return row[b.size()];
}

// KL(p || q) in nats, with 0 * ln(0 / q) = 0. Refuses zero support in q
// rather than smoothing it.
inline double kl_divergence(const Distribution& p, const Distribution& q) {
  if (p.size() != q.size()) {
    throw DimensionError("kl_divergence: size mismatch " + std::to_string(p.size()) +
                         " vs " + std::to_string(q.size()));
  }
  double kl = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    if (pi <= 0.0) continue;
    const double qi = q[i];
    if (!(qi >= kKlFloor)) {
      throw DomainError("kl_divergence: q has no support at index " + std::to_string(i));
    }
    kl += pi * std::log(pi / qi);
  }
  // Rounding can push an exact-zero divergence a hair below zero.
  return std::max(kl, 0.0);
}

inline double logsumexp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

// Renormalized probabilities exp(l_n - logsumexp(l)) over an N-best list.
inline std::vector<double> renormalize_nbest(std::span<const LogWeight> log_probs) {
  if (log_probs.empty()) throw EmptyInput("renormalize_nbest: empty list");
  const double lse = logsumexp(log_probs);
  std::vector<double> out(log_probs.size());
  for (std::size_t i = 0; i < log_probs.size(); ++i) out[i] = std::exp(log_probs[i] - lse);
  return out;
}

}  // namespace msrl
