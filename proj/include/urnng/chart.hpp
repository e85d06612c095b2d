#pragma once

// Log-space chart algorithms over span scores s(i, j): partition function,
// top-down tree sampling, tree entropy and Viterbi decoding.
//
// The differentiable algorithms are templates over the scalar type: `double`
// for fast value-only passes, `ad::Var` when gradients wrt the scores are
// needed. Both instantiations run the exact same recursion.

#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "urnng/autodiff.hpp"
#include "urnng/random.hpp"
#include "urnng/treebank.hpp"

namespace urnng {

inline std::size_t span_count(int length) {
  return static_cast<std::size_t>(length) * static_cast<std::size_t>(length + 1) / 2;
}

/// Row-major position of 1-based span (i, j) among all spans of a length-T
/// sentence: (1,1) (1,2) ... (1,T) (2,2) ... (T,T).
inline std::size_t span_index(int length, int i, int j) {
  const auto r = static_cast<std::size_t>(i - 1);
  return r * static_cast<std::size_t>(length) - r * (r - 1) / 2 + static_cast<std::size_t>(j - i);
}

/// Upper-triangular table with one entry per span (i <= j).
template <class S>
class SpanTable {
 public:
  SpanTable() = default;
  explicit SpanTable(int length, S fill = S{}) : length_(length), cells_(span_count(length), fill) {
    if (length < 1) throw std::invalid_argument("SpanTable: length must be >= 1");
  }
  SpanTable(int length, std::vector<S> cells) : length_(length), cells_(std::move(cells)) {
    if (length < 1 || cells_.size() != span_count(length))
      throw std::invalid_argument("SpanTable: " + std::to_string(cells_.size()) + " cells for length " +
                                  std::to_string(length));
  }

  int length() const { return length_; }
  S& operator()(int i, int j) { return cells_[span_index(length_, i, j)]; }
  const S& operator()(int i, int j) const { return cells_[span_index(length_, i, j)]; }
  const std::vector<S>& cells() const { return cells_; }
  std::vector<S>& cells() { return cells_; }

 private:
  int length_ = 0;
  std::vector<S> cells_;
};

using ScoreTable = SpanTable<double>;

// ---- scalar operations used by the generic recursions ---------------------------

template <class S>
struct ChartOps;

template <>
struct ChartOps<double> {
  using Vec = std::vector<double>;
  static Vec stack(std::vector<double> xs) { return xs; }
  static double value(double x) { return x; }
  static double zero_like(double) { return 0.0; }
  static double lse(const Vec& v) { return ad::detail::lse(v.data(), v.size()); }
  static Vec log_softmax(const Vec& v) {
    const double z = lse(v);
    Vec out(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = v[k] - z;
    return out;
  }
  static Vec exp(Vec v) {
    for (double& x : v) x = std::exp(x);
    return v;
  }
  static Vec add(const Vec& a, const Vec& b) {
    Vec out(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + b[k];
    return out;
  }
  static Vec sub(const Vec& a, const Vec& b) {
    Vec out(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] - b[k];
    return out;
  }
  static double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
  }
  static double sum(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
};

template <>
struct ChartOps<ad::Var> {
  using Vec = ad::Var;
  static Vec stack(const std::vector<ad::Var>& xs) { return ad::concat(xs); }
  static double value(const ad::Var& x) { return x.item(); }
  static ad::Var zero_like(const ad::Var& x) { return x.tape()->constant(Tensor::scalar(0.0)); }
  static ad::Var lse(const Vec& v) { return ad::logsumexp(v); }
  static Vec log_softmax(const Vec& v) { return ad::log_softmax(v); }
  static Vec exp(const Vec& v) { return ad::exp(v); }
  static Vec add(const Vec& a, const Vec& b) { return ad::add(a, b); }
  static Vec sub(const Vec& a, const Vec& b) { return ad::sub(a, b); }
  static ad::Var dot(const Vec& a, const Vec& b) { return ad::dot(a, b); }
  static ad::Var sum(const std::vector<ad::Var>& xs) { return ad::sum(ad::concat(xs)); }
};

// ---- inside -------------------------------------------------------------------------

/// Log inside values: log_beta(i, j) = log of the summed weight of all binary
/// subtrees over x_i..x_j.
template <class S>
struct Chart {
  SpanTable<S> log_beta;

  int length() const { return log_beta.length(); }
  const S& log_partition() const { return log_beta(1, length()); }
};

template <class S>
Chart<S> inside(const SpanTable<S>& scores) {
  using Ops = ChartOps<S>;
  const int n = scores.length();
  Chart<S> c{SpanTable<S>(n, scores(1, 1))};
  for (int i = 1; i <= n; ++i) c.log_beta(i, i) = scores(i, i);
  std::vector<S> cand;
  for (int w = 1; w < n; ++w)
    for (int i = 1; i + w <= n; ++i) {
      const int j = i + w;
      cand.clear();
      for (int k = i; k < j; ++k) cand.push_back(c.log_beta(i, k) + c.log_beta(k + 1, j));
      c.log_beta(i, j) = scores(i, j) + Ops::lse(Ops::stack(cand));
    }
  return c;
}

/// Normalized log split weights log w_k, k = i..j-1, for span (i, j):
/// w_k ∝ beta(i, k) · beta(k+1, j). Sampling and entropy both use this.
template <class S>
typename ChartOps<S>::Vec split_log_weights(const Chart<S>& c, int i, int j) {
  using Ops = ChartOps<S>;
  if (i >= j) throw std::invalid_argument("split_log_weights: span has no split");
  std::vector<S> cand;
  cand.reserve(static_cast<std::size_t>(j - i));
  for (int k = i; k < j; ++k) cand.push_back(c.log_beta(i, k) + c.log_beta(k + 1, j));
  return Ops::log_softmax(Ops::stack(cand));
}

/// Sum of span scores over the spans of a tree (singletons and root included).
template <class S>
S tree_log_weight(const SpanTable<S>& scores, const TreeRepr& tree) {
  if (tree.length() != scores.length())
    throw std::invalid_argument("tree_log_weight: tree length " + std::to_string(tree.length()) +
                                " does not match scores length " + std::to_string(scores.length()));
  std::vector<S> terms;
  terms.reserve(tree.spans().size());
  for (const Span& s : tree.spans()) terms.push_back(scores(s.i, s.j));
  return ChartOps<S>::sum(terms);
}

/// log q(tree) under the Gibbs distribution defined by the scores.
template <class S>
S log_q(const TreeRepr& tree, const SpanTable<S>& scores, const S& log_partition) {
  return tree_log_weight(scores, tree) - log_partition;
}

/// Exact entropy of the tree distribution. H(i, j) accumulates
/// Σ_u w_u (H(i, u) + H(u+1, j) − log w_u) bottom-up.
template <class S>
S tree_entropy(const Chart<S>& c) {
  using Ops = ChartOps<S>;
  const int n = c.length();
  const S zero = Ops::zero_like(c.log_beta(1, 1));
  SpanTable<S> h(n, zero);
  std::vector<S> left, right;
  for (int w = 1; w < n; ++w)
    for (int i = 1; i + w <= n; ++i) {
      const int j = i + w;
      left.clear(), right.clear();
      for (int u = i; u < j; ++u) {
        left.push_back(h(i, u));
        right.push_back(h(u + 1, j));
      }
      auto log_w = split_log_weights(c, i, j);
      auto weights = Ops::exp(log_w);
      auto terms = Ops::sub(Ops::add(Ops::stack(left), Ops::stack(right)), log_w);
      h(i, j) = Ops::dot(weights, terms);
    }
  return h(1, n);
}

// ---- value-only algorithms ------------------------------------------------------

inline ScoreTable values_of(const SpanTable<ad::Var>& t) {
  std::vector<double> v;
  v.reserve(t.cells().size());
  for (const auto& x : t.cells()) v.push_back(x.item());
  return ScoreTable(t.length(), std::move(v));
}

inline Chart<double> values_of(const Chart<ad::Var>& c) { return Chart<double>{values_of(c.log_beta)}; }

struct SampledTree {
  TreeRepr tree;
  double log_q;
};

/// Top-down sampling: draw a split for (1, T) from the split weights, then
/// recurse into children of width > 1.
inline SampledTree sample_tree(const Chart<double>& chart, const ScoreTable& scores, Rng& rng) {
  const int n = chart.length();
  std::vector<Span> spans;
  spans.reserve(static_cast<std::size_t>(2 * n - 1));
  for (int i = 1; i <= n; ++i) spans.push_back({i, i});
  std::deque<Span> queue;
  if (n > 1) queue.push_back({1, n});
  spans.push_back({1, n});
  if (n == 1) spans.pop_back();
  std::vector<double> w;
  while (!queue.empty()) {
    const Span s = queue.front();
    queue.pop_front();
    w = split_log_weights(chart, s.i, s.j);
    for (double& x : w) x = std::exp(x);
    const int k = s.i + static_cast<int>(categorical(rng, w));
    if (k > s.i) {
      spans.push_back({s.i, k});
      queue.push_back({s.i, k});
    }
    if (k + 1 < s.j) {
      spans.push_back({k + 1, s.j});
      queue.push_back({k + 1, s.j});
    }
  }
  TreeRepr tree = TreeRepr::from_spans(std::move(spans), n);
  const double lq = log_q(tree, scores, chart.log_partition());
  return {std::move(tree), lq};
}

struct ViterbiResult {
  TreeRepr tree;
  double log_weight;
};

/// Max-product recursion with backpointers; exact ties go to the largest
/// split index, so all-equal scores decode to the left-branching tree.
inline ViterbiResult viterbi(const ScoreTable& scores) {
  const int n = scores.length();
  ScoreTable best(n, 0.0);
  SpanTable<int> split(n, 0);
  for (int i = 1; i <= n; ++i) best(i, i) = scores(i, i);
  for (int w = 1; w < n; ++w)
    for (int i = 1; i + w <= n; ++i) {
      const int j = i + w;
      double m = -std::numeric_limits<double>::infinity();
      int arg = i;
      for (int k = i; k < j; ++k) {
        const double v = best(i, k) + best(k + 1, j);
        if (v >= m) m = v, arg = k;
      }
      best(i, j) = scores(i, j) + m;
      split(i, j) = arg;
    }
  std::vector<Span> spans;
  auto rec = [&](auto& self, int i, int j) -> void {
    spans.push_back({i, j});
    if (i == j) return;
    const int k = split(i, j);
    self(self, i, k);
    self(self, k + 1, j);
  };
  rec(rec, 1, n);
  return {TreeRepr::from_spans(std::move(spans), n), best(1, n)};
}

/// Divides every score by a temperature (> 0); > 1 flattens the distribution.
inline ScoreTable flatten(const ScoreTable& scores, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("flatten: temperature must be positive");
  ScoreTable out = scores;
  for (double& s : out.cells()) s /= temperature;
  return out;
}

}  // namespace urnng
