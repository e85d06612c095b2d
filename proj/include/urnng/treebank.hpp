#pragma once

// Sentences, binary trees in span/action form, bracketed-tree I/O and
// binarization.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "urnng/error.hpp"

namespace urnng {

// ---- vocabulary -------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr int kEos = 1;
  static constexpr const char* kUnkToken = "<unk>";
  static constexpr const char* kEosToken = "</s>";

  Vocabulary() { add(kUnkToken), add(kEosToken); }

  /// Builds from training sentences; words seen fewer than `min_count` times
  /// map to the unknown id. Ids are assigned in order of first appearance.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences, int min_count = 2) {
    std::unordered_map<std::string, int> counts;
    std::vector<std::string> order;
    for (const auto& s : sentences)
      for (const auto& w : s)
        if (counts[w]++ == 0) order.push_back(w);
    Vocabulary v;
    for (const auto& w : order)
      if (counts[w] >= min_count) v.add(w);
    return v;
  }

  /// Restores a vocabulary from its id-ordered token list.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 2 || tokens[kUnk] != kUnkToken || tokens[kEos] != kEosToken)
      throw DataError("vocabulary: reserved tokens missing");
    Vocabulary v;
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      if (v.ids_.count(tokens[i])) throw DataError("vocabulary: duplicate token '" + tokens[i] + "'");
      v.add(tokens[i]);
    }
    return v;
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void add(const std::string& w) {
    ids_.emplace(w, static_cast<int>(tokens_.size()));
    tokens_.push_back(w);
  }

  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> tokens_;
};

// ---- punctuation ------------------------------------------------------------

/// Surface forms and POS tags treated as punctuation by F1 evaluation. The
/// defaults follow evalb's COLLINS.prm deletion list.
class PunctuationSet {
 public:
  PunctuationSet()
      : forms_{",", ".", ":", ";", "?", "!", "``", "''", "--", "...", "`", "'", "-LRB-", "-RRB-"},
        tags_{",", ":", "``", "''", "."} {}
  explicit PunctuationSet(std::set<std::string> forms, std::set<std::string> tags = {})
      : forms_(std::move(forms)), tags_(std::move(tags)) {}

  /// One form per line; blank lines and '#' comments ignored.
  static PunctuationSet from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read punctuation list: " + path);
    std::set<std::string> forms;
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string w;
      if (ls >> w && w[0] != '#') forms.insert(w);
    }
    return PunctuationSet(std::move(forms), PunctuationSet().tags_);
  }

  bool is_punct(const std::string& form) const { return forms_.count(form) > 0; }
  bool is_punct_tag(const std::string& tag) const { return tags_.count(tag) > 0; }

 private:
  std::set<std::string> forms_;
  std::set<std::string> tags_;
};

// ---- sentences ----------------------------------------------------------------

struct Sentence {
  std::vector<int> tokens;
  std::vector<bool> punct_mask;
  std::vector<std::string> raw;

  std::size_t length() const { return tokens.size(); }
};

inline Sentence make_sentence(const std::vector<std::string>& words, const Vocabulary& vocab,
                              const PunctuationSet& punct) {
  Sentence s;
  for (const auto& w : words) {
    s.tokens.push_back(vocab.id(w));
    s.punct_mask.push_back(punct.is_punct(w));
    s.raw.push_back(w);
  }
  return s;
}

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream is{std::string(line)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

/// Whitespace-tokenized lines of a corpus file; blank lines are skipped.
inline std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read corpus file: " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    auto words = split_ws(line);
    if (!words.empty()) out.push_back(std::move(words));
  }
  return out;
}

inline std::vector<Sentence> read_corpus(const std::string& path, const Vocabulary& vocab,
                                         const PunctuationSet& punct = {}) {
  std::vector<Sentence> out;
  for (const auto& words : read_token_lines(path)) out.push_back(make_sentence(words, vocab, punct));
  if (out.empty()) throw DataError("corpus has no usable sentences: " + path);
  return out;
}

// ---- binary trees ---------------------------------------------------------------

enum class Action : std::uint8_t { Shift = 0, Reduce = 1 };

/// Inclusive 1-based span (i, j).
struct Span {
  int i = 0;
  int j = 0;
  int width() const { return j - i + 1; }
  auto operator<=>(const Span&) const = default;
};

inline std::uint64_t count_trees(int length) {
  if (length < 1) throw std::invalid_argument("count_trees: length must be >= 1");
  if (length > 36) throw std::overflow_error("count_trees: Catalan number exceeds 64 bits");
  // C_n = prod_{k=2..n} (n+k)/k, kept exact by multiplying before dividing.
  const std::uint64_t n = static_cast<std::uint64_t>(length - 1);
  unsigned __int128 c = 1;
  for (std::uint64_t k = 0; k < n; ++k) c = c * 2 * (2 * k + 1) / (k + 2);
  return static_cast<std::uint64_t>(c);
}

inline bool valid_actions(const std::vector<Action>& actions, int length) {
  if (length < 1 || actions.size() != static_cast<std::size_t>(2 * length - 1)) return false;
  int depth = 0, shifts = 0;
  for (Action a : actions) {
    if (a == Action::Shift) {
      ++depth, ++shifts;
    } else {
      if (depth < 2) return false;
      --depth;
    }
  }
  return depth == 1 && shifts == length;
}

namespace detail {

// Recursively checks that `spans` (sorted) contains a complete binary
// bracketing of [i, j]; marks used spans.
inline bool check_node(const std::set<Span>& spans, int i, int j, std::size_t& used) {
  if (!spans.count({i, j})) return false;
  ++used;
  if (i == j) return true;
  int split = -1;
  for (int k = i; k < j; ++k)
    if (spans.count({i, k}) && spans.count({k + 1, j})) {
      if (split != -1) return false;  // two candidate splits means a crossing pair
      split = k;
    }
  if (split == -1) return false;
  return check_node(spans, i, split, used) && check_node(spans, split + 1, j, used);
}

}  // namespace detail

inline bool valid_spans(const std::vector<Span>& spans, int length) {
  if (length < 1) return false;
  std::set<Span> set(spans.begin(), spans.end());
  if (set.size() != spans.size()) return false;
  if (set.size() != static_cast<std::size_t>(2 * length - 1)) return false;
  for (const Span& s : set)
    if (s.i < 1 || s.j > length || s.i > s.j) return false;
  std::size_t used = 0;
  return detail::check_node(set, 1, length, used) && used == set.size();
}

/// Depth-first left-to-right linearization: SHIFT per leaf, REDUCE when a
/// constituent of width > 1 closes.
inline std::vector<Action> tree_to_actions(const std::vector<Span>& spans, int length) {
  if (!valid_spans(spans, length)) throw std::invalid_argument("tree_to_actions: not a valid binary span set");
  std::set<Span> set(spans.begin(), spans.end());
  std::vector<Action> out;
  out.reserve(static_cast<std::size_t>(2 * length - 1));
  auto rec = [&](auto& self, int i, int j) -> void {
    if (i == j) {
      out.push_back(Action::Shift);
      return;
    }
    for (int k = i; k < j; ++k)
      if (set.count({i, k}) && set.count({k + 1, j})) {
        self(self, i, k);
        self(self, k + 1, j);
        break;
      }
    out.push_back(Action::Reduce);
  };
  rec(rec, 1, length);
  return out;
}

/// Stack simulation of an action sequence; inverse of tree_to_actions.
inline std::vector<Span> actions_to_tree(const std::vector<Action>& actions) {
  std::vector<Span> stack, spans;
  int next = 1;
  for (std::size_t t = 0; t < actions.size(); ++t) {
    if (actions[t] == Action::Shift) {
      stack.push_back({next, next});
      spans.push_back({next, next});
      ++next;
    } else {
      if (stack.size() < 2)
        throw std::invalid_argument("actions_to_tree: REDUCE at step " + std::to_string(t + 1) +
                                    " with fewer than two stack items");
      Span r = stack.back();
      stack.pop_back();
      Span l = stack.back();
      stack.pop_back();
      stack.push_back({l.i, r.j});
      spans.push_back({l.i, r.j});
    }
  }
  if (stack.size() != 1) throw std::invalid_argument("actions_to_tree: sequence leaves " +
                                                     std::to_string(stack.size()) + " items on the stack");
  std::sort(spans.begin(), spans.end());
  return spans;
}

/// A binary tree over T leaves, held as both its span set (including
/// singletons and the full span) and its SHIFT/REDUCE sequence.
class TreeRepr {
 public:
  static TreeRepr from_spans(std::vector<Span> spans, int length) {
    TreeRepr t;
    t.actions_ = tree_to_actions(spans, length);
    std::sort(spans.begin(), spans.end());
    t.spans_ = std::move(spans);
    t.length_ = length;
    return t;
  }

  static TreeRepr from_actions(std::vector<Action> actions) {
    TreeRepr t;
    t.spans_ = actions_to_tree(actions);
    t.length_ = static_cast<int>((actions.size() + 1) / 2);
    t.actions_ = std::move(actions);
    return t;
  }

  int length() const { return length_; }
  const std::vector<Span>& spans() const { return spans_; }
  const std::vector<Action>& actions() const { return actions_; }
  bool contains(Span s) const { return std::binary_search(spans_.begin(), spans_.end(), s); }

  bool operator==(const TreeRepr& o) const { return length_ == o.length_ && actions_ == o.actions_; }
  bool operator<(const TreeRepr& o) const { return actions_ < o.actions_; }

 private:
  TreeRepr() = default;
  int length_ = 0;
  std::vector<Span> spans_;
  std::vector<Action> actions_;
};

/// ((x1 x2) x3) ... : reduce as early as possible.
inline TreeRepr left_branching(int length) {
  std::vector<Action> a{Action::Shift};
  for (int t = 1; t < length; ++t) a.insert(a.end(), {Action::Shift, Action::Reduce});
  return TreeRepr::from_actions(std::move(a));
}

/// x1 (x2 (x3 ...)) : all shifts, then all reduces.
inline TreeRepr right_branching(int length) {
  std::vector<Action> a(static_cast<std::size_t>(length), Action::Shift);
  a.insert(a.end(), static_cast<std::size_t>(length - 1), Action::Reduce);
  return TreeRepr::from_actions(std::move(a));
}

// ---- labeled trees ------------------------------------------------------------------

/// An n-ary tree from a bracketed file. Preterminals carry the word.
struct LabeledTree {
  std::string label;
  std::string word;  // non-empty only for preterminals
  std::vector<LabeledTree> children;

  bool is_preterminal() const { return children.empty(); }
};

inline void collect_leaves(const LabeledTree& t, std::vector<const LabeledTree*>& out) {
  if (t.is_preterminal()) {
    out.push_back(&t);
    return;
  }
  for (const auto& c : t.children) collect_leaves(c, out);
}

inline std::vector<std::string> tree_words(const LabeledTree& t) {
  std::vector<const LabeledTree*> leaves;
  collect_leaves(t, leaves);
  std::vector<std::string> words;
  for (auto* l : leaves) words.push_back(l->word);
  return words;
}

struct LabeledSpan {
  std::string label;
  Span span;
};

/// Spans of all non-preterminal nodes, in pre-order.
inline std::vector<LabeledSpan> labeled_spans(const LabeledTree& t) {
  std::vector<LabeledSpan> out;
  int next = 1;
  auto rec = [&](auto& self, const LabeledTree& n) -> Span {
    if (n.is_preterminal()) {
      const int i = next++;
      return {i, i};
    }
    const std::size_t slot = out.size();
    out.push_back({n.label, {}});
    Span s{-1, -1};
    for (const auto& c : n.children) {
      Span cs = self(self, c);
      if (s.i < 0) s.i = cs.i;
      s.j = cs.j;
    }
    out[slot].span = s;
    return s;
  };
  rec(rec, t);
  return out;
}

/// Right-branching binarization with labels discarded: children c1..ck
/// become (c1 (c2 (... ck))).
inline TreeRepr binarize_right(const LabeledTree& t) {
  std::vector<Span> spans;
  int next = 1;
  auto rec = [&](auto& self, const LabeledTree& n) -> Span {
    if (n.is_preterminal()) {
      const int i = next++;
      spans.push_back({i, i});
      return {i, i};
    }
    std::vector<Span> kids;
    for (const auto& c : n.children) kids.push_back(self(self, c));
    // Unary chains collapse onto their child's span.
    for (std::size_t k = kids.size() - 1; k-- > 0;) {
      Span merged{kids[k].i, kids.back().j};
      spans.push_back(merged);
      kids.back() = merged;
    }
    return kids.back();
  };
  Span root = rec(rec, t);
  std::sort(spans.begin(), spans.end());
  spans.erase(std::unique(spans.begin(), spans.end()), spans.end());
  return TreeRepr::from_spans(std::move(spans), root.j);
}

namespace detail {

inline std::vector<std::string> bracket_tokens(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == '(' || ch == ')') {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      out.emplace_back(1, ch);
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

/// Parses one PTB-style s-expression, e.g. "(S (NP (D the) (N dog)) (VP (V barks)))".
/// A bare word child "(X w)" is a preterminal; an outer unlabeled wrapper
/// "( (S ...) )" is removed.
inline LabeledTree parse_bracketed(std::string_view line) {
  const auto tok = detail::bracket_tokens(line);
  std::size_t pos = 0;
  auto fail = [](const std::string& why) -> LabeledTree { throw DataError(why); };
  auto rec = [&](auto& self) -> LabeledTree {
    if (pos >= tok.size() || tok[pos] != "(") return fail("expected '('");
    ++pos;
    LabeledTree n;
    if (pos < tok.size() && tok[pos] != "(" && tok[pos] != ")") n.label = tok[pos++];
    while (pos < tok.size() && tok[pos] != ")") {
      if (tok[pos] == "(") {
        n.children.push_back(self(self));
      } else {
        if (!n.children.empty() || !n.word.empty()) return fail("unexpected token '" + tok[pos] + "'");
        n.word = tok[pos++];
      }
    }
    if (pos >= tok.size()) return fail("unbalanced parentheses");
    ++pos;
    if (n.word.empty() && n.children.empty()) return fail("empty constituent");
    return n;
  };
  LabeledTree root = rec(rec);
  if (pos != tok.size()) throw DataError("unbalanced parentheses");
  // A labeled node with a single bare word and no label is a leaf-only tree.
  while (root.label.empty() && root.children.size() == 1) root = LabeledTree(root.children.front());
  if (root.is_preterminal() && root.word.empty()) throw DataError("tree has no leaves");
  return root;
}

struct GoldTree {
  Sentence sentence;
  LabeledTree tree;
};

/// Punctuation mask from a gold tree: a leaf is punctuation if its POS tag or
/// its surface form is in the set.
inline std::vector<bool> tree_punct_mask(const LabeledTree& t, const PunctuationSet& punct) {
  std::vector<const LabeledTree*> leaves;
  collect_leaves(t, leaves);
  std::vector<bool> mask;
  for (auto* l : leaves) mask.push_back(punct.is_punct_tag(l->label) || punct.is_punct(l->word));
  return mask;
}

inline std::vector<LabeledTree> read_bracketed_trees(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read tree file: " + path);
  std::vector<LabeledTree> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (split_ws(line).empty()) continue;
    try {
      out.push_back(parse_bracketed(line));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw DataError("tree file has no trees: " + path);
  return out;
}

inline std::vector<GoldTree> read_bracketed(const std::string& path, const Vocabulary& vocab,
                                            const PunctuationSet& punct = {}) {
  std::vector<GoldTree> out;
  for (auto& t : read_bracketed_trees(path)) {
    GoldTree g;
    g.sentence = make_sentence(tree_words(t), vocab, punct);
    g.sentence.punct_mask = tree_punct_mask(t, punct);
    g.tree = std::move(t);
    out.push_back(std::move(g));
  }
  return out;
}

/// Bracketed output with "X" as the only label and (X word) preterminals.
inline std::string to_bracketed(const TreeRepr& tree, const std::vector<std::string>& words) {
  if (words.size() != static_cast<std::size_t>(tree.length()))
    throw std::invalid_argument("to_bracketed: word count does not match tree length");
  std::vector<std::string> stack;
  int next = 0;
  for (Action a : tree.actions()) {
    if (a == Action::Shift) {
      stack.push_back("(X " + words[static_cast<std::size_t>(next++)] + ")");
    } else {
      std::string r = std::move(stack.back());
      stack.pop_back();
      stack.back() = "(X " + stack.back() + " " + r + ")";
    }
  }
  return stack.back();
}

inline std::string to_bracketed(const LabeledTree& t) {
  if (t.is_preterminal()) return "(" + t.label + " " + t.word + ")";
  std::string s = "(" + t.label;
  for (const auto& c : t.children) s += " " + to_bracketed(c);
  return s + ")";
}

}  // namespace urnng
