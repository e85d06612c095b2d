#pragma once

#include <optional>
#include <stdexcept>
#include <string>

#include "urnng/crf_parser.hpp"
#include "urnng/lm.hpp"
#include "urnng/rnng.hpp"

namespace urnng {

enum class ModelKind { Rnng, Lm };

struct ModelConfig {
  ModelKind kind = ModelKind::Rnng;
  std::size_t vocab = 0;
  std::size_t hidden = 650;
  std::size_t q_hidden = 256;
  std::size_t mlp_hidden = 256;
  std::size_t max_length = 100;
  double dropout = 0.5;
  double q_dropout = 0.5;
};

/// θ (generative model or LM) and φ (inference network) with their owning
/// parameter stores. The word embedding table lives in θ and is shared with φ.
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    if (cfg.vocab < 2) throw std::invalid_argument("Model: vocabulary must hold the reserved tokens");
    if (cfg.hidden == 0) throw std::invalid_argument("Model: hidden size must be positive");
    if (cfg.kind == ModelKind::Lm) {
      lm_.emplace(theta_, cfg.vocab, cfg.hidden, cfg.dropout);
    } else {
      gen_.emplace(theta_, cfg.vocab, cfg.hidden, cfg.dropout);
      q_.emplace(phi_, gen_->embedding(), cfg.q_hidden, cfg.mlp_hidden, cfg.max_length, cfg.q_dropout);
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  bool is_lm() const { return cfg_.kind == ModelKind::Lm; }

  nn::ParameterStore& theta() { return theta_; }
  nn::ParameterStore& phi() { return phi_; }
  const nn::ParameterStore& theta() const { return theta_; }
  const nn::ParameterStore& phi() const { return phi_; }

  const GenerativeModel& generator() const {
    if (!gen_) throw std::logic_error("language-model checkpoint has no generative grammar");
    return *gen_;
  }
  const InferenceNetwork& parser() const {
    if (!q_) throw std::logic_error("language-model checkpoint has no inference network");
    return *q_;
  }
  const LanguageModel& lm() const {
    if (!lm_) throw std::logic_error("model is not a language model");
    return *lm_;
  }

  /// Every parameter drawn from U[-range, range].
  void init_uniform(Rng& rng, double range) {
    theta_.init_uniform(rng, range);
    phi_.init_uniform(rng, range);
  }

 private:
  ModelConfig cfg_;
  nn::ParameterStore theta_, phi_;
  std::optional<GenerativeModel> gen_;
  std::optional<InferenceNetwork> q_;
  std::optional<LanguageModel> lm_;
};

inline std::string to_string(ModelKind k) { return k == ModelKind::Lm ? "lm" : "rnng"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "rnng") return ModelKind::Rnng;
  if (s == "lm") return ModelKind::Lm;
  throw std::invalid_argument("unknown model kind: " + s);
}

}  // namespace urnng
