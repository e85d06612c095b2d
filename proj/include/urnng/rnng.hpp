#pragma once

// Generative model p(x, z): a stack LSTM over (hidden, constituent) pairs,
// tree-LSTM composition on REDUCE, a Bernoulli action head and a categorical
// word head tied to the input embeddings.

#include <optional>
#include <stdexcept>
#include <vector>

#include "urnng/autodiff.hpp"
#include "urnng/nn.hpp"
#include "urnng/treebank.hpp"

namespace urnng {

/// Training mode turns dropout on; it then needs an RNG.
struct RunMode {
  bool train = false;
  Rng* rng = nullptr;

  static RunMode eval() { return {}; }
  static RunMode training(Rng& rng) { return {true, &rng}; }
};

class GenerativeModel {
 public:
  GenerativeModel(nn::ParameterStore& theta, std::size_t vocab_size, std::size_t hidden, double dropout)
      : vocab_size_(vocab_size),
        hidden_(hidden),
        dropout_(dropout),
        embedding_(&theta.add("emb", Shape{vocab_size, hidden})),
        layer0_(nn::LstmCell::create(theta, "stack.l0", hidden, hidden)),
        layer1_(nn::LstmCell::create(theta, "stack.l1", hidden, hidden)),
        tree_(nn::TreeLstmCell::create(theta, "tree", hidden)),
        action_(nn::Linear::create(theta, "action", hidden, 1)),
        word_bias_(&theta.add("word.bias", Shape{vocab_size})) {}

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t hidden() const { return hidden_; }
  double dropout() const { return dropout_; }
  ad::Parameter& embedding() const { return *embedding_; }
  const nn::Linear& action_head() const { return action_; }
  ad::Parameter& word_bias() const { return *word_bias_; }
  const nn::LstmCell& layer(int k) const { return k == 0 ? layer0_ : layer1_; }
  const nn::TreeLstmCell& tree_cell() const { return tree_; }

 private:
  std::size_t vocab_size_, hidden_;
  double dropout_;
  ad::Parameter* embedding_;
  nn::LstmCell layer0_, layer1_;
  nn::TreeLstmCell tree_;
  nn::Linear action_;
  ad::Parameter* word_bias_;
};

/// The RNNG stack. Entry 0 is the zero pair and is never popped; every other
/// entry holds the stack-LSTM state after consuming a constituent (h) and the
/// constituent itself (g, with its tree-LSTM cell; zero cell for words).
class StackState {
 public:
  struct Entry {
    nn::LstmState layer0, layer1;
    nn::LstmState constituent;
  };

  StackState(const GenerativeModel& model, ad::Tape& tape, RunMode mode) : model_(&model), tape_(&tape), mode_(mode) {
    nn::LstmState zero = model.layer(0).zero_state(tape);
    entries_.push_back({zero, zero, zero});
  }

  /// Real constituents on the stack (the zero pair is not counted).
  int real_depth() const { return static_cast<int>(entries_.size()) - 1; }
  const Entry& top() const { return entries_.back(); }

  /// Logit a of p_t = sigmoid(a), the probability of REDUCE.
  ad::Var action_logit() const {
    return ad::pick(model_->action_head()(*tape_, head_input()), 0);
  }

  /// Forced action under the validity mask, if any: SHIFT with fewer than two
  /// real items, REDUCE once all `length` words of a known sentence are in.
  std::optional<Action> forced_action(int words_consumed, std::optional<int> length) const {
    if (real_depth() < 2) return Action::Shift;
    if (length && words_consumed >= *length) return Action::Reduce;
    return std::nullopt;
  }

  /// log p(action) at a free step.
  ad::Var action_log_prob(Action a) const {
    ad::Var logit = action_logit();
    return a == Action::Reduce ? ad::log_sigmoid(logit) : ad::log_sigmoid(ad::scale(logit, -1.0));
  }

  /// Log-probabilities over the vocabulary for the next generated word.
  ad::Var word_log_probs() const {
    return ad::log_softmax(ad::linear(head_input(), tape_->param(model_->embedding()), tape_->param(model_->word_bias())));
  }

  /// Generates `word` from the current top, then pushes its embedding.
  /// Returns log p(word | history).
  ad::Var shift(int word) {
    if (word < 0 || static_cast<std::size_t>(word) >= model_->vocab_size())
      throw std::out_of_range("shift: word id " + std::to_string(word) + " outside vocabulary");
    ad::Var lp = ad::pick(word_log_probs(), static_cast<std::size_t>(word));
    push_word(word);
    return lp;
  }

  /// Pushes a word without scoring it (used after sampling).
  void push_word(int word) {
    ad::Var e = ad::embedding(tape_->param(model_->embedding()), static_cast<std::size_t>(word));
    nn::LstmState cell{e, tape_->constant(Tensor(Shape{model_->hidden()}))};
    push(cell);
  }

  /// Pops right then left, composes their g's with the tree LSTM and pushes
  /// the result through the stack LSTM from the new top.
  void reduce() {
    if (real_depth() < 2) throw std::logic_error("reduce: fewer than two constituents on the stack");
    Entry right = entries_.back();
    entries_.pop_back();
    Entry left = entries_.back();
    entries_.pop_back();
    push(model_->tree_cell().compose(*tape_, left.constituent, right.constituent));
  }

 private:
  ad::Var head_input() const { return ad::dropout(top().layer1.h, model_->dropout(), mode_.rng, mode_.train); }

  void push(const nn::LstmState& constituent) {
    const Entry& prev = entries_.back();
    ad::Var x = ad::dropout(constituent.h, model_->dropout(), mode_.rng, mode_.train);
    nn::LstmState s0 = model_->layer(0).step(*tape_, x, prev.layer0);
    ad::Var x1 = ad::dropout(s0.h, model_->dropout(), mode_.rng, mode_.train);
    nn::LstmState s1 = model_->layer(1).step(*tape_, x1, prev.layer1);
    entries_.push_back({s0, s1, constituent});
  }

  const GenerativeModel* model_;
  ad::Tape* tape_;
  RunMode mode_;
  std::vector<Entry> entries_;
};

/// The two halves of log p(x, z).
struct JointLogLikelihood {
  ad::Var terminal;  // log p(x | z), including the end-of-sentence term
  ad::Var action;    // log p(z | x_<z), forced steps contribute 0

  double total() const { return terminal.item() + action.item(); }
};

/// Replays the stack machine over `actions` for the given sentence.
inline JointLogLikelihood joint_log_likelihood(const GenerativeModel& model, ad::Tape& tape,
                                               const std::vector<int>& tokens, const std::vector<Action>& actions,
                                               RunMode mode = {}) {
  const int n = static_cast<int>(tokens.size());
  if (n < 1) throw std::invalid_argument("joint_log_likelihood: empty sentence");
  if (!valid_actions(actions, n))
    throw std::invalid_argument("joint_log_likelihood: action sequence is not a valid tree over " +
                                std::to_string(n) + " words");
  StackState stack(model, tape, mode);
  std::vector<ad::Var> word_terms, action_terms;
  int consumed = 0;
  for (Action a : actions) {
    if (!stack.forced_action(consumed, n)) action_terms.push_back(stack.action_log_prob(a));
    if (a == Action::Shift) {
      word_terms.push_back(stack.shift(tokens[static_cast<std::size_t>(consumed++)]));
    } else {
      stack.reduce();
    }
  }
  // The final step is a forced SHIFT that generates the end-of-sentence token.
  word_terms.push_back(ad::pick(stack.word_log_probs(), Vocabulary::kEos));
  JointLogLikelihood out;
  out.terminal = ad::sum(ad::concat(word_terms));
  out.action = action_terms.empty() ? tape.constant(Tensor::scalar(0.0)) : ad::sum(ad::concat(action_terms));
  return out;
}

struct GeneratedSentence {
  std::vector<int> tokens;
  std::vector<Action> actions;
  bool truncated = false;  // hit max_len before generating end-of-sentence
  bool empty = false;      // end-of-sentence drawn before any word
};

/// Ancestral sampling of (x, z). The end-of-sentence token can only be drawn
/// when the stack holds a complete tree (or nothing); elsewhere it is masked
/// out of the word distribution.
inline GeneratedSentence generate(const GenerativeModel& model, Rng& rng, int max_len) {
  if (max_len < 1) throw std::invalid_argument("generate: max_len must be >= 1");
  ad::Tape tape(false);
  StackState stack(model, tape, RunMode::eval());
  GeneratedSentence out;
  std::vector<double> probs;
  for (;;) {
    const int depth = stack.real_depth();
    const int words = static_cast<int>(out.tokens.size());
    Action a;
    if (depth < 2) {
      a = Action::Shift;
    } else if (words >= max_len) {
      a = Action::Reduce;
    } else {
      a = bernoulli(rng, ad::detail::stable_sigmoid(stack.action_logit().item())) ? Action::Reduce : Action::Shift;
    }
    if (a == Action::Reduce) {
      stack.reduce();
      out.actions.push_back(a);
      continue;
    }
    if (depth == 1 && words >= max_len) {
      out.truncated = true;
      break;
    }
    const Tensor& lp = stack.word_log_probs().value();
    probs.assign(lp.size(), 0.0);
    for (std::size_t w = 0; w < lp.size(); ++w) probs[w] = std::exp(lp[w]);
    if (depth >= 2) probs[Vocabulary::kEos] = 0.0;
    const int w = static_cast<int>(categorical(rng, probs));
    if (w == Vocabulary::kEos) {
      out.empty = depth == 0;
      break;
    }
    stack.push_word(w);
    out.tokens.push_back(w);
    out.actions.push_back(Action::Shift);
  }
  return out;
}

}  // namespace urnng
