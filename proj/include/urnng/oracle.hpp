#pragma once

// Brute-force references: every quantity here is computed by enumerating all
// binary trees, without the chart recursions.

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "urnng/chart.hpp"
#include "urnng/model.hpp"

namespace urnng::oracle {

constexpr int kMaxEnumerate = 12;
constexpr int kMaxMarginal = 10;
constexpr int kMaxGradient = 6;

inline void require_length(const char* what, int length, int cap) {
  if (length < 1 || length > cap)
    throw std::invalid_argument(std::string(what) + ": length " + std::to_string(length) + " outside [1, " +
                                std::to_string(cap) + "]");
}

/// All binary trees over `length` words, ordered by root split (leftmost
/// first), then recursively by the left and right subtrees.
inline std::vector<TreeRepr> enumerate_trees(int length) {
  require_length("enumerate_trees", length, kMaxEnumerate);
  using SpanList = std::vector<Span>;
  std::vector<std::vector<std::vector<SpanList>>> memo(
      static_cast<std::size_t>(length + 2), std::vector<std::vector<SpanList>>(static_cast<std::size_t>(length + 2)));
  std::vector<std::vector<bool>> done(static_cast<std::size_t>(length + 2),
                                      std::vector<bool>(static_cast<std::size_t>(length + 2), false));
  auto rec = [&](auto& self, int i, int j) -> const std::vector<SpanList>& {
    auto& slot = memo[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    if (done[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) return slot;
    if (i == j) {
      slot.push_back({{i, i}});
    } else {
      for (int k = i; k < j; ++k) {
        const auto& left = self(self, i, k);
        const auto& right = self(self, k + 1, j);
        for (const auto& l : left)
          for (const auto& r : right) {
            SpanList s{{i, j}};
            s.insert(s.end(), l.begin(), l.end());
            s.insert(s.end(), r.begin(), r.end());
            slot.push_back(std::move(s));
          }
      }
    }
    done[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = true;
    return slot;
  };
  std::vector<TreeRepr> out;
  for (const auto& spans : rec(rec, 1, length)) out.push_back(TreeRepr::from_spans(spans, length));
  return out;
}

inline double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Sum of s_ij over a tree's spans, read straight from the table.
inline double tree_score(const ScoreTable& scores, const TreeRepr& tree) {
  double s = 0.0;
  for (const Span& sp : tree.spans()) s += scores(sp.i, sp.j);
  return s;
}

inline std::vector<double> tree_scores(const ScoreTable& scores, const std::vector<TreeRepr>& trees) {
  std::vector<double> out;
  out.reserve(trees.size());
  for (const auto& t : trees) out.push_back(tree_score(scores, t));
  return out;
}

inline double exact_partition(const ScoreTable& scores) {
  require_length("exact_partition", scores.length(), kMaxEnumerate);
  return log_sum_exp(tree_scores(scores, enumerate_trees(scores.length())));
}

/// q(z) for every tree, in enumerate_trees order.
inline std::vector<double> exact_distribution(const ScoreTable& scores) {
  require_length("exact_distribution", scores.length(), kMaxEnumerate);
  auto w = tree_scores(scores, enumerate_trees(scores.length()));
  const double z = log_sum_exp(w);
  for (double& x : w) x = std::exp(x - z);
  return w;
}

inline double exact_entropy(const ScoreTable& scores) {
  require_length("exact_entropy", scores.length(), kMaxEnumerate);
  auto w = tree_scores(scores, enumerate_trees(scores.length()));
  const double z = log_sum_exp(w);
  double h = 0.0;
  for (double x : w) {
    const double lq = x - z;
    h -= std::exp(lq) * lq;
  }
  return h;
}

/// Highest-weight tree; the last in enumeration order on exact ties.
inline TreeRepr exact_argmax(const ScoreTable& scores) {
  const auto trees = enumerate_trees(scores.length());
  std::size_t best = 0;
  double bw = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < trees.size(); ++k) {
    const double w = tree_score(scores, trees[k]);
    if (w >= bw) bw = w, best = k;
  }
  return trees[best];
}

/// log p(x, z) for every tree, eval mode.
inline std::vector<double> joint_table(const GenerativeModel& gen, const std::vector<int>& tokens) {
  const int n = static_cast<int>(tokens.size());
  require_length("joint_table", n, kMaxMarginal);
  std::vector<double> out;
  for (const auto& t : enumerate_trees(n)) {
    ad::Tape tape(false);
    out.push_back(joint_log_likelihood(gen, tape, tokens, t.actions()).total());
  }
  return out;
}

/// log p(x) = log Σ_z p(x, z).
inline double exact_marginal(const GenerativeModel& gen, const std::vector<int>& tokens) {
  return log_sum_exp(joint_table(gen, tokens));
}

struct ExactElbo {
  double elbo;      // Σ_z q(z) (log p(x, z) − log q(z))
  double marginal;  // log p(x)
  double kl;        // KL(q(z|x) ‖ p(z|x)), enumerated directly
};

inline ExactElbo exact_elbo(const Model& model, const std::vector<int>& tokens) {
  const int n = static_cast<int>(tokens.size());
  require_length("exact_elbo", n, kMaxMarginal);
  const auto joint = joint_table(model.generator(), tokens);
  const double marginal = log_sum_exp(joint);
  const ScoreTable scores = model.parser().score_values(tokens);
  const auto w = tree_scores(scores, enumerate_trees(n));
  const double z = log_sum_exp(w);
  ExactElbo out{0.0, marginal, 0.0};
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double lq = w[k] - z;
    const double q = std::exp(lq);
    out.elbo += q * (joint[k] - lq);
    out.kl += q * (lq - (joint[k] - marginal));
  }
  return out;
}

/// ∇φ Σ_z q_φ(z|x) ℓ(z) with ℓ held constant, computed by differentiating the
/// enumerated sum. ℓ defaults to log p(x, z). Returns gradients for every
/// parameter the inference network touches (φ and the shared embeddings).
inline nn::Snapshot exact_phi_gradient(const Model& model, const std::vector<int>& tokens,
                                       std::function<double(const TreeRepr&)> reward = {}) {
  const int n = static_cast<int>(tokens.size());
  require_length("exact_phi_gradient", n, kMaxGradient);
  const auto trees = enumerate_trees(n);
  std::vector<double> ell;
  for (const auto& t : trees) {
    if (reward) {
      ell.push_back(reward(t));
    } else {
      ad::Tape tape(false);
      ell.push_back(joint_log_likelihood(model.generator(), tape, tokens, t.actions()).total());
    }
  }
  ad::Tape tape;
  const ad::Var s = model.parser().score_vector(tape, tokens);
  std::vector<ad::Var> weights;
  for (const auto& t : trees) {
    std::vector<std::size_t> idx;
    for (const Span& sp : t.spans()) idx.push_back(span_index(n, sp.i, sp.j));
    weights.push_back(ad::sum(ad::gather(s, idx)));
  }
  const ad::Var q = ad::softmax(ad::concat(weights));
  const ad::Var obj = ad::dot(q, tape.constant(Tensor::vector(ell)));
  tape.backward(obj);
  nn::Snapshot out;
  for (auto& [p, g] : tape.param_grads()) out.emplace(p->name, g);
  return out;
}

}  // namespace urnng::oracle
