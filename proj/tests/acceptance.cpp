// Acceptance suite: one PASS/FAIL line per criterion. Reference values are
// computed here by brute force (tree enumeration, finite differences, Monte
// Carlo) rather than by the chart code under test.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "urnng/urnng.hpp"

using namespace urnng;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---- test-side references -------------------------------------------------------

double lse(const std::vector<double>& v) {
  double m = -INFINITY;
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Every valid shift/reduce sequence over n words, by walking the stack machine.
std::vector<std::vector<Action>> all_action_sequences(int n) {
  std::vector<std::vector<Action>> out;
  std::vector<Action> cur;
  std::function<void(int, int)> walk = [&](int shifted, int depth) {
    if (shifted == n && depth == 1) {
      out.push_back(cur);
      return;
    }
    if (shifted < n) {
      cur.push_back(Action::Shift);
      walk(shifted + 1, depth + 1);
      cur.pop_back();
    }
    if (depth >= 2) {
      cur.push_back(Action::Reduce);
      walk(shifted, depth - 1);
      cur.pop_back();
    }
  };
  walk(0, 0);
  return out;
}

/// Spans of a tree read off an action sequence with a plain stack.
std::vector<Span> spans_of(const std::vector<Action>& actions) {
  std::vector<Span> stack, out;
  int pos = 0;
  for (Action a : actions) {
    if (a == Action::Shift) {
      ++pos;
      stack.push_back({pos, pos});
      out.push_back({pos, pos});
    } else {
      const Span r = stack.back();
      stack.pop_back();
      const Span l = stack.back();
      stack.pop_back();
      stack.push_back({l.i, r.j});
      out.push_back({l.i, r.j});
    }
  }
  return out;
}

double score_sum(const ScoreTable& s, const std::vector<Span>& spans) {
  double t = 0.0;
  for (const Span& sp : spans) t += s(sp.i, sp.j);
  return t;
}

/// Tree weights by direct enumeration of action sequences.
std::vector<double> enum_weights(const ScoreTable& s, const std::vector<std::vector<Action>>& seqs) {
  std::vector<double> w;
  for (const auto& a : seqs) w.push_back(score_sum(s, spans_of(a)));
  return w;
}

ScoreTable random_table(int n, Rng& rng) {
  ScoreTable s(n, 0.0);
  for (double& v : s.cells()) v = uniform(rng, -2.0, 2.0);
  return s;
}

std::unique_ptr<Model> tiny_model(std::size_t vocab, std::size_t hidden, int max_len, Rng& rng, double range = 0.5) {
  ModelConfig mc;
  mc.vocab = vocab;
  mc.hidden = hidden;
  mc.q_hidden = hidden;
  mc.mlp_hidden = hidden;
  mc.max_length = static_cast<std::size_t>(max_len);
  mc.dropout = 0.0;
  mc.q_dropout = 0.0;
  auto m = std::make_unique<Model>(mc);
  m->init_uniform(rng, range);
  return m;
}

std::vector<int> random_sentence(int n, std::size_t vocab, Rng& rng) {
  std::vector<int> x;
  for (int k = 0; k < n; ++k) x.push_back(2 + static_cast<int>(uniform_index(rng, vocab - 2)));
  return x;
}

double joint_of(const Model& m, const std::vector<int>& x, const std::vector<Action>& a) {
  ad::Tape tape(false);
  return joint_log_likelihood(m.generator(), tape, x, a).total();
}

// ---- 1, 2: inside and entropy ---------------------------------------------------------

struct InsideCase {
  ScoreTable scores;
  std::vector<double> weights;
};

std::vector<InsideCase> inside_cases() {
  Rng rng(101);
  std::vector<InsideCase> cases;
  for (int n = 2; n <= 8; ++n) {
    const auto seqs = all_action_sequences(n);
    for (int t = 0; t < 100; ++t) {
      ScoreTable s = random_table(n, rng);
      auto w = enum_weights(s, seqs);
      cases.push_back({std::move(s), std::move(w)});
    }
  }
  return cases;
}

Outcome criterion1(const std::vector<InsideCase>& cases, double setup_secs) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (const auto& c : cases) {
    const double ref = lse(c.weights);
    worst = std::max(worst, std::abs(inside(c.scores).log_partition() - ref) / std::abs(ref));
  }
  const double secs = setup_secs + seconds_since(t0);
  return {worst < 1e-10 && secs < 30.0,
          std::to_string(cases.size()) + " tables, max rel err " + fmt("%.3g", worst) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome criterion2(const std::vector<InsideCase>& cases) {
  double worst = 0.0;
  for (const auto& c : cases) {
    const double z = lse(c.weights);
    double h = 0.0;
    for (double w : c.weights) h -= std::exp(w - z) * (w - z);
    worst = std::max(worst, std::abs(tree_entropy(inside(c.scores)) - h));
  }
  return {worst < 1e-8, "max abs err " + fmt("%.3g", worst)};
}

// ---- 3: sampler ---------------------------------------------------------------------

Outcome criterion3() {
  Rng rng(303);
  const int draws = 50000;
  std::ostringstream detail;
  bool ok = true;
  for (int n : {5, 6}) {
    const auto seqs = all_action_sequences(n);
    for (bool zero : {false, true}) {
      const ScoreTable s = zero ? ScoreTable(n, 0.0) : random_table(n, rng);
      const auto w = enum_weights(s, seqs);
      const double z = lse(w);
      const Chart<double> c = inside(s);
      std::map<std::vector<Action>, double> freq;
      for (int k = 0; k < draws; ++k) freq[sample_tree(c, s, rng).tree.actions()] += 1.0 / draws;
      double tv = 0.0, dev = 0.0;
      for (std::size_t k = 0; k < seqs.size(); ++k) {
        const double p = std::exp(w[k] - z);
        const double f = freq.count(seqs[k]) ? freq[seqs[k]] : 0.0;
        tv += std::abs(f - p) / 2;
        dev = std::max(dev, std::abs(f - 1.0 / static_cast<double>(seqs.size())));
      }
      const bool good = zero ? dev <= 0.01 && tv < 0.02 : tv < 0.02;
      ok = ok && good && freq.size() <= seqs.size();
      detail << "T=" << n << (zero ? " zero: max|f-u|=" + fmt("%.4f", dev) + " tv=" : " random: tv=") << fmt("%.4f", tv)
             << "; ";
    }
  }
  return {ok, detail.str()};
}

// ---- 4: viterbi ---------------------------------------------------------------------

Outcome criterion4() {
  Rng rng(404);
  int bad = 0;
  for (int t = 0; t < 100; ++t) {
    const int n = 2 + t % 7;
    const ScoreTable s = random_table(n, rng);
    const auto seqs = all_action_sequences(n);
    const auto w = enum_weights(s, seqs);
    const std::size_t best = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
    bad += viterbi(s).tree.actions() != seqs[best];
  }
  // Ties: all-zero scores decode to the fully left-branching tree
  // (S S R S R S R ...).
  std::vector<Action> left{Action::Shift};
  for (int k = 1; k < 4; ++k) left.push_back(Action::Shift), left.push_back(Action::Reduce);
  const bool tie = viterbi(ScoreTable(4, 0.0)).tree.actions() == left;
  return {bad == 0 && tie, std::to_string(100 - bad) + "/100 match enumeration argmax; zero-score tie " +
                               (tie ? "left-branching" : "WRONG")};
}

// ---- 5: bijection -------------------------------------------------------------------

Outcome criterion5() {
  bool ok = true;
  std::ostringstream detail;
  for (int n = 1; n <= 8; ++n)
    for (const auto& a : all_action_sequences(n)) {
      auto spans = spans_of(a);
      std::sort(spans.begin(), spans.end());
      ok = ok && actions_to_tree(a) == spans && tree_to_actions(spans, n) == a;
    }
  detail << "round trip " << (ok ? "ok" : "FAILED") << " for T<=8; counts";
  const std::vector<std::uint64_t> catalan{1, 1, 2, 5, 14, 42, 132, 429, 1430, 4862};
  for (int n = 1; n <= 10; ++n) {
    const std::size_t enumerated = all_action_sequences(n).size();
    ok = ok && count_trees(n) == enumerated && enumerated == catalan[static_cast<std::size_t>(n - 1)];
    detail << " " << count_trees(n);
  }
  return {ok, detail.str()};
}

// ---- 6: gradients -------------------------------------------------------------------

Outcome criterion6() {
  Rng rng(606);
  std::ostringstream failures;
  double worst = 0.0;
  int checks = 0;
  auto param = [&](const std::string& name, Shape shape, double lo = -1.0, double hi = 1.0) {
    auto p = std::make_unique<ad::Parameter>(name, shape);
    for (double& v : p->value.values()) v = uniform(rng, lo, hi);
    return p;
  };
  // Reduces any output to a scalar through fixed random weights.
  auto project = [&](ad::Tape& t, ad::Var y, std::uint64_t seed) {
    Rng r(seed);
    Tensor w(y.shape());
    for (double& v : w.values()) v = uniform(r, -1.0, 1.0);
    return ad::sum(ad::mul(y, t.constant(std::move(w))));
  };
  auto check = [&](const std::string& name, std::vector<ad::Parameter*> ps, std::function<ad::Var(ad::Tape&)> f) {
    const auto rep = ad::grad_check(f, ps, 1e-5, 1e-4);
    ++checks;
    worst = std::max(worst, rep.max_rel_error);
    if (!rep.passed) failures << name << "(" << fmt("%.2g", rep.max_rel_error) << " at " << rep.worst << ") ";
  };

  auto a = param("a", Shape{3, 4}), b = param("b", Shape{3, 4}), v = param("v", Shape{5});
  auto pos = param("pos", Shape{5}, 0.2, 2.0);
  auto m1 = param("m1", Shape{3, 4}), m2 = param("m2", Shape{4, 2}), vec4 = param("vec4", Shape{4});
  auto w = param("w", Shape{3, 4}), bias = param("bias", Shape{3});
  auto gain = param("gain", Shape{4}), beta = param("beta", Shape{4});
  auto c2 = param("c2", Shape{3, 2});

  using T = ad::Tape;
  check("add", {a.get(), b.get()}, [&](T& t) { return project(t, ad::add(t.param(*a), t.param(*b)), 1); });
  check("sub", {a.get(), b.get()}, [&](T& t) { return project(t, ad::sub(t.param(*a), t.param(*b)), 2); });
  check("mul", {a.get(), b.get()}, [&](T& t) { return project(t, ad::mul(t.param(*a), t.param(*b)), 3); });
  check("scale", {v.get()}, [&](T& t) { return project(t, ad::scale(t.param(*v), -1.7), 4); });
  check("shift", {v.get()}, [&](T& t) { return project(t, ad::shift(t.param(*v), 0.3), 5); });
  check("sigmoid", {v.get()}, [&](T& t) { return project(t, ad::sigmoid(t.param(*v)), 6); });
  check("tanh", {v.get()}, [&](T& t) { return project(t, ad::tanh(t.param(*v)), 7); });
  check("relu", {pos.get()}, [&](T& t) { return project(t, ad::relu(ad::shift(t.param(*pos), -1.1)), 8); });
  check("exp", {v.get()}, [&](T& t) { return project(t, ad::exp(t.param(*v)), 9); });
  check("log", {pos.get()}, [&](T& t) { return project(t, ad::log(t.param(*pos)), 10); });
  check("log_sigmoid", {v.get()}, [&](T& t) { return project(t, ad::log_sigmoid(t.param(*v)), 11); });
  check("matmul_mv", {m1.get(), vec4.get()}, [&](T& t) { return project(t, ad::matmul(t.param(*m1), t.param(*vec4)), 12); });
  check("matmul_mm", {m1.get(), m2.get()}, [&](T& t) { return project(t, ad::matmul(t.param(*m1), t.param(*m2)), 13); });
  check("linear_vec", {vec4.get(), w.get(), bias.get()},
        [&](T& t) { return project(t, ad::linear(t.param(*vec4), t.param(*w), t.param(*bias)), 14); });
  check("linear_batch", {b.get(), w.get(), bias.get()},
        [&](T& t) { return project(t, ad::linear(t.param(*b), t.param(*w), t.param(*bias)), 15); });
  check("sum", {a.get()}, [&](T& t) { return ad::sum(t.param(*a)); });
  check("dot", {v.get(), pos.get()}, [&](T& t) { return ad::dot(t.param(*v), t.param(*pos)); });
  check("logsumexp", {v.get()}, [&](T& t) { return ad::logsumexp(t.param(*v)); });
  check("logsumexp_rows", {a.get()}, [&](T& t) { return project(t, ad::logsumexp(t.param(*a), 1), 16); });
  check("logsumexp_cols", {a.get()}, [&](T& t) { return project(t, ad::logsumexp(t.param(*a), 0), 17); });
  check("log_softmax", {v.get()}, [&](T& t) { return project(t, ad::log_softmax(t.param(*v)), 18); });
  check("softmax", {v.get()}, [&](T& t) { return project(t, ad::softmax(t.param(*v)), 19); });
  check("layer_norm", {a.get(), gain.get(), beta.get()},
        [&](T& t) { return project(t, ad::layer_norm(t.param(*a), t.param(*gain), t.param(*beta)), 20); });
  check("dropout", {v.get()}, [&](T& t) {
    Rng r(77);
    return project(t, ad::dropout(t.param(*v), 0.4, &r, true), 21);
  });
  check("concat", {v.get(), vec4.get()}, [&](T& t) { return project(t, ad::concat({t.param(*v), t.param(*vec4)}), 22); });
  check("stack_rows", {vec4.get(), gain.get()},
        [&](T& t) { return project(t, ad::stack_rows({t.param(*vec4), t.param(*gain)}), 23); });
  check("concat_cols", {a.get(), c2.get()},
        [&](T& t) { return project(t, ad::concat_cols(t.param(*a), t.param(*c2)), 24); });
  check("slice", {v.get()}, [&](T& t) { return project(t, ad::slice(t.param(*v), 1, 3), 25); });
  check("gather_rows", {a.get()}, [&](T& t) { return project(t, ad::gather_rows(t.param(*a), {2, 0, 2}), 26); });
  check("row", {a.get()}, [&](T& t) { return project(t, ad::row(t.param(*a), 1), 27); });
  check("embedding", {a.get()}, [&](T& t) { return project(t, ad::embedding(t.param(*a), 2), 28); });
  check("gather", {v.get()}, [&](T& t) { return project(t, ad::gather(t.param(*v), {4, 0, 4, 1}), 29); });
  check("pick", {v.get()}, [&](T& t) { return ad::pick(t.param(*v), 3); });
  check("reshape", {a.get()}, [&](T& t) { return project(t, ad::reshape(t.param(*a), Shape{12}), 30); });

  // Chart quantities with respect to span scores.
  const int n = 5;
  auto spans = param("scores", Shape{span_count(n)}, -2.0, 2.0);
  check("log_partition", {spans.get()},
        [&](T& t) { return inside(InferenceNetwork::unstack(t.param(*spans), n)).log_partition(); });
  check("tree_entropy", {spans.get()}, [&](T& t) { return tree_entropy(inside(InferenceNetwork::unstack(t.param(*spans), n))); });

  // Joint log-likelihood with respect to every generative parameter.
  const auto model = tiny_model(6, 4, 3, rng);
  const std::vector<int> x{2, 3, 4};
  const std::vector<Action> z{Action::Shift, Action::Shift, Action::Reduce, Action::Shift, Action::Reduce};
  check("joint_log_likelihood", model->theta().all(), [&](T& t) {
    const auto j = joint_log_likelihood(model->generator(), t, x, z);
    return ad::add(j.terminal, j.action);
  });

  const std::string f = failures.str();
  return {f.empty(), std::to_string(checks) + " checks, max rel err " + fmt("%.3g", worst) + (f.empty() ? "" : "; failed: " + f)};
}

// ---- 7: generative normalization ----------------------------------------------------

Outcome criterion7() {
  Rng rng(707);
  double worst_marginal = 0.0, worst_actions = 0.0;
  for (int t = 0; t < 30; ++t) {
    const auto model = tiny_model(8, 6, 6, rng, 1.0);
    const int n = 1 + t % 6;
    const auto x = random_sentence(n, 8, rng);
    std::vector<double> joint, action;
    for (const auto& a : all_action_sequences(n)) {
      ad::Tape tape(false);
      const auto j = joint_log_likelihood(model->generator(), tape, x, a);
      joint.push_back(j.total());
      action.push_back(j.action.item());
    }
    worst_marginal = std::max(worst_marginal, std::abs(lse(joint) - oracle::exact_marginal(model->generator(), x)));
    worst_actions = std::max(worst_actions, std::abs(lse(action)));
  }
  return {worst_marginal < 1e-8 && worst_actions < 1e-8,
          "|logsumexp joint - exact_marginal| " + fmt("%.3g", worst_marginal) + ", |log sum_z p(z|x)| " +
              fmt("%.3g", worst_actions)};
}

// ---- 8: estimator -------------------------------------------------------------------

Outcome criterion8() {
  Rng rng(808);
  const auto model = tiny_model(10, 8, 4, rng, 0.5);
  const std::vector<int> x{2, 5, 7, 9};
  const auto exact = oracle::exact_phi_gradient(*model, x);

  // Single-sample score-function estimates through the training surrogate.
  const int draws = 100000;
  std::map<std::string, std::vector<double>> sum, sumsq;
  for (const auto& [name, g] : exact) {
    sum[name].assign(g.size(), 0.0);
    sumsq[name].assign(g.size(), 0.0);
  }
  std::map<std::vector<Action>, double> ell_cache;
  for (int k = 0; k < draws; ++k) {
    ad::Tape tape;
    const auto scores = model->parser().score_spans(tape, x);
    const Chart<ad::Var> chart = inside(scores);
    const SampledTree z = sample_tree(values_of(chart), values_of(scores), rng);
    auto it = ell_cache.find(z.tree.actions());
    if (it == ell_cache.end()) it = ell_cache.emplace(z.tree.actions(), joint_of(*model, x, z.tree.actions())).first;
    const ad::Var lq = log_q(z.tree, scores, chart.log_partition());
    tape.backward(phi_surrogate({lq}, {it->second}, false));
    for (auto& [p, g] : tape.param_grads()) {
      auto& s = sum[p->name];
      auto& q = sumsq[p->name];
      for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i], q[i] += g[i] * g[i];
    }
  }
  // Coordinates whose gradient is identically zero (a shift shared by every
  // span score cancels in q) differ only by rounding; those are compared
  // against an absolute floor instead of their ~0 standard error.
  const double roundoff = 1e-10;
  std::size_t coords = 0, outside = 0, degenerate = 0;
  double worst_z = 0.0;
  for (const auto& [name, g] : exact)
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double mean = sum[name][i] / draws;
      const double var = std::max(0.0, sumsq[name][i] / draws - mean * mean);
      const double se = std::sqrt(var / draws);
      const double diff = std::abs(mean - g[i]);
      ++coords;
      if (se < roundoff && std::abs(g[i]) < roundoff) {
        ++degenerate;
        outside += diff > roundoff;
        continue;
      }
      const double zscore = diff / se;
      worst_z = std::max(worst_z, zscore);
      outside += zscore > 3.0;
    }

  // Leave-one-out baseline versus none at K=8: total estimator variance over
  // repeated draws, for 20 independent instances.
  int reduced = 0;
  const int trials = 20, reps = 300, K = 8;
  double ratio_worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto m = tiny_model(10, 8, 4, rng, 0.5);
    const auto xt = random_sentence(4, 10, rng);
    std::map<std::vector<Action>, double> cache;
    std::map<std::string, std::vector<double>> s1[2], s2[2];
    for (int r = 0; r < reps; ++r) {
      ad::Tape tape;
      const auto scores = m->parser().score_spans(tape, xt);
      const Chart<ad::Var> chart = inside(scores);
      const ScoreTable sv = values_of(scores);
      const Chart<double> cv = values_of(chart);
      std::vector<ad::Var> lqs;
      std::vector<double> ells;
      for (int k = 0; k < K; ++k) {
        const SampledTree z = sample_tree(cv, sv, rng);
        auto it = cache.find(z.tree.actions());
        if (it == cache.end()) it = cache.emplace(z.tree.actions(), joint_of(*m, xt, z.tree.actions())).first;
        lqs.push_back(log_q(z.tree, scores, chart.log_partition()));
        ells.push_back(it->second);
      }
      for (int baseline = 0; baseline < 2; ++baseline) {
        ad::Tape& tp = tape;
        ad::Var obj = phi_surrogate(lqs, ells, baseline == 1);
        tp.backward(obj);
        for (auto& [p, g] : tp.param_grads()) {
          auto& a1 = s1[baseline][p->name];
          auto& a2 = s2[baseline][p->name];
          a1.resize(g.size(), 0.0), a2.resize(g.size(), 0.0);
          for (std::size_t i = 0; i < g.size(); ++i) a1[i] += g[i], a2[i] += g[i] * g[i];
        }
      }
    }
    double total[2] = {0.0, 0.0};
    for (int baseline = 0; baseline < 2; ++baseline)
      for (const auto& [name, a1] : s1[baseline])
        for (std::size_t i = 0; i < a1.size(); ++i) {
          const double mean = a1[i] / reps;
          total[baseline] += s2[baseline].at(name)[i] / reps - mean * mean;
        }
    reduced += total[1] < total[0];
    ratio_worst = std::max(ratio_worst, total[1] / total[0]);
  }
  const bool ok = outside == 0 && reduced == trials;
  return {ok, std::to_string(coords - outside) + "/" + std::to_string(coords) + " coordinates within 3 SE (max z " +
                  fmt("%.2f", worst_z) + ", " + std::to_string(degenerate) +
                  " identically zero); baseline reduced variance in " + std::to_string(reduced) + "/" +
                  std::to_string(trials) + " (worst ratio " + fmt("%.3f", ratio_worst) + ")"};
}

// ---- 9: ELBO bound ------------------------------------------------------------------

Outcome criterion9() {
  Rng rng(909);
  const auto seqs = all_action_sequences(4);
  double worst = 0.0;
  bool bound = true;
  for (int t = 0; t < 100; ++t) {
    const auto model = tiny_model(10, 6, 4, rng, 1.0);
    const auto x = random_sentence(4, 10, rng);
    const auto e = oracle::exact_elbo(*model, x);
    // KL(q || p(z|x)) from the enumerated tables.
    const ScoreTable s = model->parser().score_values(x);
    const auto w = enum_weights(s, seqs);
    std::vector<double> joint;
    for (const auto& a : seqs) joint.push_back(joint_of(*model, x, a));
    const double zq = lse(w), marginal = lse(joint);
    double kl = 0.0;
    for (std::size_t k = 0; k < seqs.size(); ++k) {
      const double lq = w[k] - zq;
      kl += std::exp(lq) * (lq - (joint[k] - marginal));
    }
    bound = bound && e.elbo <= e.marginal && kl >= 0.0;
    worst = std::max(worst, std::abs((e.marginal - e.elbo) - kl));
    worst = std::max(worst, std::abs(e.marginal - marginal));
  }
  return {bound && worst < 1e-8, std::string("elbo <= log p(x) ") + (bound ? "always" : "VIOLATED") +
                                     ", max |gap - KL| " + fmt("%.3g", worst)};
}

// ---- 10: importance-weighted perplexity ------------------------------------------------

Outcome criterion10() {
  Rng rng(1010);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto model = tiny_model(10, 6, 6, rng, 0.5);
    const int n = 3 + t % 4;
    const auto x = random_sentence(n, 10, rng);
    const double exact = oracle::exact_marginal(model->generator(), x);
    const double est = iw_log_marginal(*model, x, 2000, 1.0, rng);
    worst = std::max(worst, std::abs(est - exact) / std::abs(exact));
  }
  double worst_t2 = 0.0;
  for (int t = 0; t < 10; ++t) {
    const auto model = tiny_model(10, 6, 6, rng, 0.5);
    const auto x = random_sentence(2, 10, rng);
    const double exact = joint_of(*model, x, {Action::Shift, Action::Shift, Action::Reduce});
    for (int k : {1, 2, 7, 50})
      worst_t2 = std::max(worst_t2, std::abs(iw_log_marginal(*model, x, k, 1.0, rng) - exact));
  }
  return {worst < 0.005 && worst_t2 < 1e-12,
          "max rel err at K=2000 " + fmt("%.2e", worst) + ", T=2 max abs err " + fmt("%.2g", worst_t2)};
}

// ---- 11: F1 conventions -------------------------------------------------------------

Outcome criterion11() {
  auto f1 = [](const std::vector<std::vector<Span>>& p, const std::vector<std::vector<Span>>& g,
               const std::vector<std::vector<bool>>& m) { return unlabeled_f1(p, g, m).f1; };
  const std::vector<bool> plain6(6, false), plain5(5, false);
  std::ostringstream detail;
  bool ok = true;

  // Identical trees.
  const auto gold6 = right_branching(6).spans();
  const double same = f1({gold6}, {gold6}, {plain6});
  ok = ok && std::abs(same - 100.0) < 1e-12;
  detail << "identical " << same;

  // Sentence "a b c d ." with the period (position 5) as punctuation: the two
  // predictions differ only in where the period attaches.
  const std::vector<bool> punct{false, false, false, false, true};
  const std::vector<Span> gold_p{{1, 5}, {1, 4}, {1, 2}, {3, 4}, {1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}};
  const std::vector<Span> pa{{1, 5}, {1, 4}, {1, 2}, {3, 4}, {1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}};
  const std::vector<Span> pb{{1, 5}, {1, 2}, {3, 5}, {3, 4}, {1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}};
  const double fa = f1({pa}, {gold_p}, {punct}), fb = f1({pb}, {gold_p}, {punct});
  ok = ok && std::abs(fa - fb) < 1e-12;
  detail << "; punctuation-only " << fa << " vs " << fb;

  // Differences only in trivial spans (singletons, whole sentence).
  const std::vector<Span> g1{{2, 3}, {1, 3}, {1, 4}};
  const std::vector<Span> with{{1, 4}, {1, 3}, {2, 3}, {1, 1}, {2, 2}, {3, 3}, {4, 4}};
  const std::vector<Span> without{{2, 3}, {1, 3}};
  const std::vector<bool> plain4(4, false);
  const double ft1 = f1({with}, {g1}, {plain4}), ft2 = f1({without}, {g1}, {plain4});
  ok = ok && std::abs(ft1 - ft2) < 1e-12;
  detail << "; trivial-only " << ft1 << " vs " << ft2;

  // Mixed fixture, counted by hand (evaluable spans only):
  //   sentence 1 (6 words): gold {(2,6),(3,6),(4,6),(5,6)}, predicted
  //     {(3,6),(4,6)}: 2 matched, 2 predicted, 4 gold.
  //   sentence 2 (5 words): gold {(1,2),(1,3),(1,4)}, predicted
  //     {(1,3),(4,5)}: 1 matched, 2 predicted, 3 gold.
  //   sentence 3 (4 words): gold {(1,2)}, predicted {(1,2),(3,4)}:
  //     1 matched, 2 predicted, 1 gold.
  //   corpus: P = 4/6, R = 4/8, F1 = 2PR/(P+R) = 57.142857...
  const std::vector<Span> p1{{1, 6}, {3, 6}, {4, 6}, {1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}, {6, 6}};
  const auto g2 = left_branching(5).spans();
  const std::vector<Span> p2{{1, 5}, {1, 3}, {4, 5}};
  const std::vector<Span> g3{{1, 4}, {1, 2}}, p3{{1, 4}, {1, 2}, {3, 4}};
  const auto mixed = unlabeled_f1({p1, p2, p3}, {gold6, g2, g3}, {plain6, plain5, plain4});
  ok = ok && mixed.matched == 4 && mixed.predicted == 6 && mixed.gold == 8 && std::abs(mixed.f1 - 57.14) <= 0.01;
  detail << "; mixed P=" << mixed.matched << "/" << mixed.predicted << " R=" << mixed.matched << "/" << mixed.gold
         << " F1=" << fmt("%.4f", mixed.f1);
  return {ok, detail.str()};
}

// ---- 12, 13: desk runs --------------------------------------------------------------

struct DeskData {
  Vocabulary vocab;
  std::vector<TrainExample> train;
  std::vector<Sentence> valid;
  std::vector<LabeledTree> valid_trees;
};

TrainConfig desk_config(const std::string& file) { return TrainConfig::load(std::string(URNNG_SOURCE_DIR) + "/data/" + file); }

DeskData desk_data(const TrainConfig& cfg) {
  const Grammar g = Grammar::load(std::string(URNNG_SOURCE_DIR) + "/data/synthetic.grammar");
  const auto train = synth_corpus(g, 5000, 3, 12, 11).trees;
  const auto valid = synth_corpus(g, 500, 3, 12, 12).trees;
  std::vector<std::vector<std::string>> words;
  for (const auto& t : train) words.push_back(tree_words(t));
  DeskData d{Vocabulary::build(words, cfg.min_count), {}, {}, valid};
  const PunctuationSet punct;
  for (const auto& t : train) d.train.push_back({make_sentence(tree_words(t), d.vocab, punct), binarize_right(t)});
  for (const auto& t : valid) d.valid.push_back(make_sentence(tree_words(t), d.vocab, punct));
  return d;
}

std::unique_ptr<Model> desk_model(const TrainConfig& cfg, const DeskData& d) {
  ModelConfig mc;
  mc.kind = ModelKind::Rnng;
  mc.vocab = d.vocab.size();
  mc.hidden = static_cast<std::size_t>(cfg.hidden);
  mc.q_hidden = static_cast<std::size_t>(cfg.q_hidden);
  mc.mlp_hidden = static_cast<std::size_t>(cfg.mlp_hidden);
  mc.max_length = static_cast<std::size_t>(cfg.max_length);
  mc.dropout = cfg.dropout;
  mc.q_dropout = cfg.q_dropout;
  auto m = std::make_unique<Model>(mc);
  Rng init(cfg.seed);
  m->init_uniform(init, cfg.init_range);
  return m;
}

/// Viterbi F1 on the validation trees; `binarized` scores against the
/// right-binarized gold instead of the n-ary gold.
double desk_f1(const Model& m, const DeskData& d, bool binarized) {
  std::vector<std::vector<Span>> pred, gold;
  std::vector<std::vector<bool>> masks;
  for (std::size_t k = 0; k < d.valid.size(); ++k) {
    pred.push_back(parse_viterbi(m, d.valid[k].tokens).spans());
    gold.push_back(binarized ? binarize_right(d.valid_trees[k]).spans() : gold_spans(d.valid_trees[k]));
    masks.push_back(d.valid[k].punct_mask);
  }
  return unlabeled_f1(pred, gold, masks).f1;
}

/// Mean F1 of uniformly random binary trees over five seeds.
double random_baseline(const DeskData& d) {
  double total = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    std::vector<std::vector<Span>> pred, gold;
    std::vector<std::vector<bool>> masks;
    for (std::size_t k = 0; k < d.valid.size(); ++k) {
      const ScoreTable zero(static_cast<int>(d.valid[k].length()), 0.0);
      pred.push_back(sample_tree(inside(zero), zero, rng).tree.spans());
      gold.push_back(gold_spans(d.valid_trees[k]));
      masks.push_back(d.valid[k].punct_mask);
    }
    total += unlabeled_f1(pred, gold, masks).f1;
  }
  return total / 5.0;
}

double mean_posterior_entropy(const Model& m, const std::vector<Sentence>& data) {
  double h = 0.0;
  for (const auto& s : data) h += tree_entropy(inside(m.parser().score_values(s.tokens)));
  return h / static_cast<double>(data.size());
}

std::vector<std::string> run_desk(const TrainConfig& cfg, const DeskData& d, std::unique_ptr<Model>& out) {
  out = desk_model(cfg, d);
  Trainer trainer(*out, cfg, d.train, d.valid);
  std::vector<std::string> trace;
  trainer.train([&](const EpochMetrics& m) {
    trace.push_back(m.to_line());
    std::cout << "    " << m.to_line() << std::endl;
  });
  return trace;
}

Outcome criterion12() {
  const TrainConfig cfg = desk_config("desk.cfg");
  const DeskData d = desk_data(cfg);
  std::unique_ptr<Model> model, again;
  const auto t0 = Clock::now();
  const auto trace = run_desk(cfg, d, model);
  const double minutes = seconds_since(t0) / 60.0;
  const auto first = Trainer::parse_metrics_line(trace.front());
  const auto last = Trainer::parse_metrics_line(trace.back());
  const bool a = last.valid_elbo > first.valid_elbo;
  const double f1 = desk_f1(*model, d, false), base = random_baseline(d);
  const bool b = f1 - base >= 10.0;
  const double h = mean_posterior_entropy(*model, d.valid);
  const bool c = h > cfg.collapse_threshold;
  const auto trace2 = run_desk(cfg, d, again);
  const bool dd = trace == trace2;
  std::ostringstream os;
  os << "vocab " << d.vocab.size() << ", " << fmt("%.1f", minutes) << " min/run; (a) valid ELBO/token "
     << fmt("%.4f", first.valid_elbo) << " -> " << fmt("%.4f", last.valid_elbo) << (a ? " ok" : " NO")
     << "; (b) F1 " << fmt("%.2f", f1) << " vs random " << fmt("%.2f", base) << (b ? " ok" : " NO")
     << "; (c) posterior entropy " << fmt("%.3f", h) << (c ? " ok" : " NO") << "; (d) traces "
     << (dd ? "identical" : "DIFFER");
  return {a && b && c && dd && minutes < 30.0, os.str()};
}

Outcome criterion13() {
  TrainConfig cfg = desk_config("desk.cfg");
  cfg.mode = TrainMode::Supervised;
  const DeskData d = desk_data(cfg);
  std::unique_ptr<Model> model;
  run_desk(cfg, d, model);
  const double f1 = desk_f1(*model, d, true);
  return {f1 >= 90.0, "F1 vs binarized gold " + fmt("%.2f", f1)};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional arguments select criteria by number.
  std::vector<int> only;
  for (int k = 1; k < argc; ++k) only.push_back(std::atoi(argv[k]));
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  std::vector<InsideCase> cases;
  double setup_secs = 0.0;
  if (wanted(1) || wanted(2)) {
    const auto t0 = Clock::now();
    cases = inside_cases();
    setup_secs = seconds_since(t0);
  }
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, [&] { return criterion1(cases, setup_secs); }},
      {2, [&] { return criterion2(cases); }},
      {3, criterion3},
      {4, criterion4},
      {5, criterion5},
      {6, criterion6},
      {7, criterion7},
      {8, criterion8},
      {9, criterion9},
      {10, criterion10},
      {11, criterion11},
      {12, criterion12},
      {13, criterion13},
  };
  int failed = 0;
  for (const auto& [id, run] : criteria) {
    if (!wanted(id)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << "criterion " << id << ": " << (o.passed ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
