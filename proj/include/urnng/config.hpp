#pragma once

// Training configuration as a flat key=value file. Keys match the field names.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "urnng/error.hpp"

namespace urnng {

enum class TrainMode { Urnng, Supervised, Lm, TrivialLeft, TrivialRight, TrivialRandom, Finetune };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Urnng: return "urnng";
    case TrainMode::Supervised: return "supervised";
    case TrainMode::Lm: return "lm";
    case TrainMode::TrivialLeft: return "trivial-left";
    case TrainMode::TrivialRight: return "trivial-right";
    case TrainMode::TrivialRandom: return "trivial-random";
    case TrainMode::Finetune: return "finetune";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  for (TrainMode m : {TrainMode::Urnng, TrainMode::Supervised, TrainMode::Lm, TrainMode::TrivialLeft,
                      TrainMode::TrivialRight, TrainMode::TrivialRandom, TrainMode::Finetune})
    if (to_string(m) == s) return m;
  throw DataError("unknown training mode: " + s);
}

struct TrainConfig {
  TrainMode mode = TrainMode::Urnng;
  std::uint64_t seed = 3435;
  int samples = 8;
  int batch_size = 16;
  int epochs = 18;
  double anneal_epochs = 2.0;
  double theta_lr = 1.0;
  double action_lr_scale = 0.1;
  double theta_clip = 5.0;
  double phi_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double phi_clip = 1.0;
  int freeze_epoch = 2;
  double decay = 2.0;
  int decay_grace = 8;
  double init_range = 0.1;
  double finetune_lr = 0.1;
  int hidden = 650;
  int q_hidden = 256;
  int mlp_hidden = 256;
  int max_length = 100;
  double dropout = 0.5;
  double q_dropout = 0.5;
  int min_count = 2;
  std::uint64_t valid_seed = 1;
  double collapse_threshold = 0.1;
  std::string init_from;

  /// Applies one key=value pair. Throws DataError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value) {
    auto fields = bindings();
    auto it = fields.find(key);
    if (it == fields.end()) throw DataError("unknown config key: " + key);
    try {
      it->second.set(value);
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError("bad value for config key " + key + ": '" + value + "'");
    }
  }

  /// Every key=value line, in a fixed order.
  std::string to_text() const {
    std::ostringstream os;
    auto fields = const_cast<TrainConfig*>(this)->bindings();
    for (const auto& key : key_order()) os << key << "=" << fields.at(key).get() << "\n";
    return os.str();
  }

  void validate() const {
    auto positive = [](double v, const char* k) {
      if (!(v > 0)) throw DataError(std::string("config key ") + k + " must be positive");
    };
    positive(batch_size, "batch_size");
    positive(epochs, "epochs");
    positive(theta_lr, "theta_lr");
    positive(action_lr_scale, "action_lr_scale");
    positive(theta_clip, "theta_clip");
    positive(phi_lr, "phi_lr");
    positive(phi_clip, "phi_clip");
    positive(decay, "decay");
    positive(init_range, "init_range");
    positive(finetune_lr, "finetune_lr");
    positive(hidden, "hidden");
    positive(q_hidden, "q_hidden");
    positive(mlp_hidden, "mlp_hidden");
    positive(max_length, "max_length");
    positive(samples, "samples");
    if ((mode == TrainMode::Urnng || mode == TrainMode::Finetune) && samples < 2)
      throw DataError("config key samples must be >= 2 for the leave-one-out baseline");
    if (anneal_epochs < 0) throw DataError("config key anneal_epochs must be >= 0");
    if (dropout < 0 || dropout >= 1 || q_dropout < 0 || q_dropout >= 1)
      throw DataError("dropout rates must lie in [0, 1)");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw DataError("Adam betas must lie in [0, 1)");
  }

  static TrainConfig from_text(const std::string& text, const std::string& origin = "config") {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      try {
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const DataError& e) {
        throw DataError(origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return c;
  }

  static TrainConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), path);
  }

 private:
  struct Binding {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
  }

  static std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }

  static const std::vector<std::string>& key_order() {
    static const std::vector<std::string> keys = {
        "mode",         "seed",        "samples",       "batch_size", "epochs",      "anneal_epochs",
        "theta_lr",     "action_lr_scale", "theta_clip", "phi_lr",    "beta1",       "beta2",
        "phi_clip",     "freeze_epoch", "decay",        "decay_grace", "init_range", "finetune_lr",
        "hidden",       "q_hidden",    "mlp_hidden",    "max_length", "dropout",     "q_dropout",
        "min_count",    "valid_seed",  "collapse_threshold", "init_from"};
    return keys;
  }

  std::map<std::string, Binding> bindings() {
    auto num = [](auto* field) {
      using T = std::remove_pointer_t<decltype(field)>;
      return Binding{[field](const std::string& v) {
                       std::size_t used = 0;
                       if constexpr (std::is_same_v<T, double>) {
                         *field = std::stod(v, &used);
                       } else if constexpr (std::is_same_v<T, std::uint64_t>) {
                         if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
                         *field = std::stoull(v, &used);
                       } else {
                         *field = std::stoi(v, &used);
                       }
                       if (used != v.size()) throw std::invalid_argument("trailing characters");
                     },
                     [field]() {
                       if constexpr (std::is_same_v<T, double>)
                         return fmt(*field);
                       else
                         return std::to_string(*field);
                     }};
    };
    return {
        {"mode", {[this](const std::string& v) { mode = parse_train_mode(v); }, [this] { return to_string(mode); }}},
        {"seed", num(&seed)},
        {"samples", num(&samples)},
        {"batch_size", num(&batch_size)},
        {"epochs", num(&epochs)},
        {"anneal_epochs", num(&anneal_epochs)},
        {"theta_lr", num(&theta_lr)},
        {"action_lr_scale", num(&action_lr_scale)},
        {"theta_clip", num(&theta_clip)},
        {"phi_lr", num(&phi_lr)},
        {"beta1", num(&beta1)},
        {"beta2", num(&beta2)},
        {"phi_clip", num(&phi_clip)},
        {"freeze_epoch", num(&freeze_epoch)},
        {"decay", num(&decay)},
        {"decay_grace", num(&decay_grace)},
        {"init_range", num(&init_range)},
        {"finetune_lr", num(&finetune_lr)},
        {"hidden", num(&hidden)},
        {"q_hidden", num(&q_hidden)},
        {"mlp_hidden", num(&mlp_hidden)},
        {"max_length", num(&max_length)},
        {"dropout", num(&dropout)},
        {"q_dropout", num(&q_dropout)},
        {"min_count", num(&min_count)},
        {"valid_seed", num(&valid_seed)},
        {"collapse_threshold", num(&collapse_threshold)},
        {"init_from", {[this](const std::string& v) { init_from = v; }, [this] { return init_from; }}},
    };
  }
};

}  // namespace urnng
