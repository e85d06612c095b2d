#pragma once

// Probabilistic context-free grammar for synthetic corpora.
//
// File format, one rule per line:   LHS -> RHS1 RHS2 ... probability
// Symbols that never appear on a left-hand side are terminals. A rule's RHS
// is either all nonterminals or a single terminal (a preterminal rule).
// The first LHS in the file is the start symbol. '#' starts a comment.

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "urnng/error.hpp"
#include "urnng/random.hpp"
#include "urnng/treebank.hpp"

namespace urnng {

struct Rule {
  std::string lhs;
  std::vector<std::string> rhs;
  double prob = 0.0;
};

class Grammar {
 public:
  static Grammar parse(const std::string& text, const std::string& origin = "grammar") {
    Grammar g;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& why) { throw DataError(origin + ":" + std::to_string(lineno) + ": " + why); };
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      auto tok = split_ws(line);
      if (tok.empty()) continue;
      if (tok.size() < 4 || tok[1] != "->") fail("expected 'LHS -> RHS... probability'");
      Rule r;
      r.lhs = tok[0];
      r.rhs.assign(tok.begin() + 2, tok.end() - 1);
      try {
        std::size_t used = 0;
        r.prob = std::stod(tok.back(), &used);
        if (used != tok.back().size()) fail("bad probability '" + tok.back() + "'");
      } catch (const std::logic_error&) {
        fail("bad probability '" + tok.back() + "'");
      }
      if (!(r.prob > 0.0 && r.prob <= 1.0)) fail("rule probability must lie in (0, 1]");
      if (g.start_.empty()) g.start_ = r.lhs;
      g.by_lhs_[r.lhs].push_back(g.rules_.size());
      g.rules_.push_back(std::move(r));
    }
    if (g.rules_.empty()) throw DataError(origin + ": grammar has no rules");
    g.validate(origin);
    return g;
  }

  static Grammar load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read grammar file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  const std::string& start() const { return start_; }
  const std::vector<Rule>& rules() const { return rules_; }
  const std::vector<std::size_t>& rules_for(const std::string& lhs) const { return by_lhs_.at(lhs); }
  bool is_nonterminal(const std::string& s) const { return by_lhs_.count(s) > 0; }

  std::set<std::string> terminals() const {
    std::set<std::string> out;
    for (const auto& r : rules_)
      for (const auto& s : r.rhs)
        if (!is_nonterminal(s)) out.insert(s);
    return out;
  }

  /// Spectral radius bound of the expected-children matrix, estimated by
  /// repeated multiplication; < 1 means derivations terminate with probability 1.
  double growth_rate() const {
    std::vector<std::string> nts;
    std::map<std::string, std::size_t> idx;
    for (const auto& [lhs, _] : by_lhs_) idx[lhs] = nts.size(), nts.push_back(lhs);
    const std::size_t n = nts.size();
    std::vector<double> m(n * n, 0.0);
    for (const auto& r : rules_)
      for (const auto& s : r.rhs)
        if (is_nonterminal(s)) m[idx[r.lhs] * n + idx[s]] += r.prob;
    std::vector<double> v(n, 1.0), w(n);
    double rate = 0.0;
    for (int it = 0; it < 200; ++it) {
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        w[i] = 0.0;
        for (std::size_t j = 0; j < n; ++j) w[i] += m[i * n + j] * v[j];
        norm = std::max(norm, w[i]);
      }
      rate = norm;
      if (norm == 0.0) break;
      for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
    }
    return rate;
  }

 private:
  void validate(const std::string& origin) const {
    for (const auto& [lhs, ids] : by_lhs_) {
      double total = 0.0;
      for (std::size_t id : ids) total += rules_[id].prob;
      if (std::abs(total - 1.0) > 1e-12)
        throw DataError(origin + ": probabilities for " + lhs + " sum to " + std::to_string(total) + ", not 1");
    }
    for (const auto& r : rules_) {
      std::size_t terms = 0;
      for (const auto& s : r.rhs) terms += !is_nonterminal(s);
      if (terms > 0 && r.rhs.size() != 1)
        throw DataError(origin + ": rule " + r.lhs + " mixes terminals into a multi-symbol right-hand side");
    }
    if (growth_rate() >= 1.0) throw DataError(origin + ": grammar is not proper (expected derivation size is infinite)");
  }

  std::string start_;
  std::vector<Rule> rules_;
  std::map<std::string, std::vector<std::size_t>> by_lhs_;
};

struct Derivation {
  LabeledTree tree;
  std::vector<std::size_t> rules;  // rule ids used, in pre-order
};

/// Ancestral sample from the start symbol. Derivations with more than
/// `max_nodes` expansions are abandoned (returned as nullopt).
inline std::optional<Derivation> sample_derivation(const Grammar& g, Rng& rng, std::size_t max_nodes = 10000) {
  Derivation d;
  std::vector<double> w;
  std::size_t budget = max_nodes;
  bool ok = true;
  auto expand = [&](auto& self, const std::string& sym) -> LabeledTree {
    LabeledTree node;
    node.label = sym;
    if (!ok || budget-- == 0) {
      ok = false;
      return node;
    }
    const auto& ids = g.rules_for(sym);
    w.clear();
    for (std::size_t id : ids) w.push_back(g.rules()[id].prob);
    const std::size_t id = ids[categorical(rng, w)];
    d.rules.push_back(id);
    const Rule& r = g.rules()[id];
    if (!g.is_nonterminal(r.rhs.front())) {
      node.word = r.rhs.front();
      return node;
    }
    for (const auto& s : r.rhs) node.children.push_back(self(self, s));
    return node;
  };
  d.tree = expand(expand, g.start());
  if (!ok) return std::nullopt;
  return d;
}

struct SyntheticCorpus {
  std::vector<LabeledTree> trees;
  std::size_t attempts = 0;
};

/// Samples `n` trees whose yield length lies in [min_len, max_len]; fails if
/// more than 99% of draws are rejected.
inline SyntheticCorpus synth_corpus(const Grammar& g, std::size_t n, int min_len, int max_len, std::uint64_t seed) {
  if (min_len < 1 || max_len < min_len) throw std::invalid_argument("synth_corpus: need 1 <= min_len <= max_len");
  Rng rng(seed);
  SyntheticCorpus out;
  while (out.trees.size() < n) {
    ++out.attempts;
    if (out.attempts >= 1000 && out.trees.size() * 100 < out.attempts)
      throw DataError("synth_corpus: more than 99% of samples fall outside lengths [" + std::to_string(min_len) + ", " +
                      std::to_string(max_len) + "]");
    auto d = sample_derivation(g, rng, static_cast<std::size_t>(max_len) * 8 + 64);
    if (!d) continue;
    const int len = static_cast<int>(tree_words(d->tree).size());
    if (len < min_len || len > max_len) continue;
    out.trees.push_back(std::move(d->tree));
  }
  return out;
}

}  // namespace urnng
