#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sitn/autograd.hpp"
#include "sitn/error.hpp"

namespace sitn::train {

using NamedParams = std::vector<std::pair<std::string, ag::Var>>;

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline void validate(const AdamConfig& c) {
  if (!(c.learning_rate > 0.0)) throw ConfigError("adam: learning rate must be > 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw ConfigError("adam: betas must be in [0,1)");
  if (!(c.epsilon > 0.0)) throw ConfigError("adam: epsilon must be > 0");
}

// Name of the first parameter whose gradient has a NaN/Inf, if any.
inline std::optional<std::string> find_nonfinite_gradient(const NamedParams& params) {
  for (const auto& [name, p] : params)
    if (p->grad.size() != 0 && !p->grad.allFinite()) return name;
  return std::nullopt;
}

inline void zero_grads(const NamedParams& params) {
  for (const auto& [name, p] : params) p->zero_grad();
}

// Adam with bias correction. Moment state is keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) { validate(config_); }

  // Applies one update from the gradients stored on `params`. Returns false
  // (and leaves everything untouched) when any gradient is non-finite.
  bool step(const NamedParams& params) {
    if (auto bad = find_nonfinite_gradient(params)) {
      ++skipped_;
      last_nonfinite_ = *bad;
      return false;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const auto& [name, p] : params) {
      const Matrix& g = p->grad_ref();
      auto [it, inserted] = state_.try_emplace(name);
      auto& st = it->second;
      if (inserted) {
        st.m = Matrix::Zero(g.rows(), g.cols());
        st.v = Matrix::Zero(g.rows(), g.cols());
      }
      if (st.m.rows() != g.rows() || st.m.cols() != g.cols()) throw ShapeError("adam: parameter " + name + " changed shape");
      st.m = config_.beta1 * st.m + (1.0 - config_.beta1) * g;
      st.v = config_.beta2 * st.v + (1.0 - config_.beta2) * g.cwiseProduct(g);
      p->value.array() -= config_.learning_rate * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + config_.epsilon);
    }
    return true;
  }

  std::size_t steps() const { return t_; }
  std::size_t skipped_steps() const { return skipped_; }
  const std::string& last_nonfinite_parameter() const { return last_nonfinite_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  AdamConfig config_;
  std::map<std::string, Moments> state_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
  std::string last_nonfinite_;
};

}  // namespace sitn::train
