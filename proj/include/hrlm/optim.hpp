#pragma once

// Training schedules and optimizer state: TBPTT horizon warmup, LR
// warmup-then-constant, Adam-atan2 and the weight EMA.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hrlm/model.hpp"
#include "hrlm/tensor.hpp"

namespace hrlm {

struct TrainConfig {
  double peak_lr = 2.2e-4;
  int64_t lr_warmup_steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double ema_decay = 0.9999;
  int64_t batch_tokens = 196608;
  int64_t k_start = 2;
  int64_t k_end = 5;
  int64_t k_warmup_steps = 0;  // 0 = 10% of total_steps
  int64_t total_steps = 1000;
  uint64_t seed = 0;
  // atan2 update pre-factors; the update is lr * a * atan2(m_hat, b * sqrt(v_hat))
  double atan2_a = 1.0;
  double atan2_b = 1.0;
  // objective and attention arms of the training recipe
  std::string objective = "response_only";  // or "full_causal"
  std::string attention = "prefixlm";       // or "causal"
  std::vector<std::string> no_weight_decay = {"embed", "z_l0"};
  int64_t log_every = 1;
  bool grad_stats = true;

  int64_t k_warmup_resolved() const {
    if (k_warmup_steps > 0) return k_warmup_steps;
    return std::max<int64_t>(1, total_steps / 10);
  }

  void validate() const {
    if (peak_lr < 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("train: invalid optimizer rates");
    if (weight_decay < 0 || ema_decay < 0 || ema_decay > 1)
      throw ConfigError("train: invalid decay rates");
    if (k_start < 2 || k_end < k_start)
      throw ConfigError("train: need 2 <= k_start <= k_end");
    if (batch_tokens < 1 || total_steps < 1)
      throw ConfigError("train: batch_tokens and total_steps must be >= 1");
    if (objective != "response_only" && objective != "full_causal")
      throw ConfigError("train: objective must be response_only or full_causal");
    if (attention != "prefixlm" && attention != "causal")
      throw ConfigError("train: attention must be prefixlm or causal");
  }
};

// Backward horizon K, linearly warmed from k_start to k_end with rounding
// half away from zero. Non-decreasing in step, clamped at k_end.
inline int64_t tbptt_horizon(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw ContractError("tbptt_horizon: step must be >= 0");
  const double frac =
      std::min(1.0, static_cast<double>(step) /
                        static_cast<double>(cfg.k_warmup_resolved()));
  const double k = static_cast<double>(cfg.k_start) +
                   static_cast<double>(cfg.k_end - cfg.k_start) * frac;
  return static_cast<int64_t>(std::round(k));
}

// Linear warmup to peak_lr, then constant. No decay.
inline double lr_schedule(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw ContractError("lr_schedule: step must be >= 0");
  if (cfg.lr_warmup_steps <= 0 || step >= cfg.lr_warmup_steps)
    return cfg.peak_lr;
  return cfg.peak_lr * static_cast<double>(step) /
         static_cast<double>(cfg.lr_warmup_steps);
}

// Adam-atan2: the usual first/second moments with bias correction, but the
// update is lr * a * atan2(m_hat, b * sqrt(v_hat)) instead of a division.
// The update magnitude is bounded by lr * a * pi/2 elementwise, and the
// step is invariant to rescaling all gradients by a positive constant.
// No gradient clipping anywhere. Decoupled weight decay is applied from
// the pre-update parameter value.
template <class S>
class AdamAtan2 {
 public:
  struct StepInfo {
    double max_update_mag = 0.0;  // optimizer update term only, no decay
  };

  void init(const ParametersT<S>& params) {
    m_.clear();
    v_.clear();
    for (const auto& e : params.entries) {
      m_.emplace_back(e.tensor.size(), S(0));
      v_.emplace_back(e.tensor.size(), S(0));
    }
    step_count_ = 0;
  }

  int64_t step_count() const { return step_count_; }

  StepInfo step(ParametersT<S>& params,
                const std::vector<std::vector<S>>& grads, double lr,
                const TrainConfig& cfg) {
    if (m_.empty()) init(params);
    if (grads.size() != params.entries.size())
      throw ContractError("adam_atan2: gradient map does not match parameters");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count_));
    StepInfo info;
    for (size_t i = 0; i < params.entries.size(); ++i) {
      auto& entry = params.entries[i];
      const std::vector<S>& g = grads[i];
      if (static_cast<int64_t>(g.size()) != entry.tensor.size())
        throw ContractError("adam_atan2: gradient size mismatch for " + entry.name);
      for (const S gv : g) {
        if (!std::isfinite(static_cast<double>(gv)))
          throw Error("adam_atan2: non-finite gradient for parameter " + entry.name);
      }
      const bool decay = apply_decay(entry.name, cfg);
      std::vector<S>& theta = entry.tensor.mutable_data();
      std::vector<S>& m = m_[i];
      std::vector<S>& v = v_[i];
      for (size_t j = 0; j < theta.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
        const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        const double m_hat = mj / bc1;
        const double v_hat = vj / bc2;
        const double upd =
            lr * cfg.atan2_a * std::atan2(m_hat, cfg.atan2_b * std::sqrt(v_hat));
        info.max_update_mag = std::max(info.max_update_mag, std::abs(upd));
        double nj = static_cast<double>(theta[j]) - upd;
        if (decay) nj -= lr * cfg.weight_decay * static_cast<double>(theta[j]);
        theta[j] = static_cast<S>(nj);
      }
    }
    return info;
  }

 private:
  static bool apply_decay(const std::string& name, const TrainConfig& cfg) {
    if (cfg.weight_decay == 0.0) return false;
    for (const auto& skip : cfg.no_weight_decay)
      if (name == skip) return false;
    return true;
  }

  std::vector<std::vector<S>> m_, v_;
  int64_t step_count_ = 0;
};

// Exponential moving average of every parameter: ema <- d*ema + (1-d)*p.
template <class S>
class Ema {
 public:
  void init(const ParametersT<S>& params) {
    shadow_.clear();
    for (const auto& e : params.entries) shadow_.push_back(e.tensor.data());
  }

  bool initialized() const { return !shadow_.empty(); }

  void update(const ParametersT<S>& params, double decay) {
    if (shadow_.empty()) {
      init(params);
      // first update from a fresh shadow equals the closed form with
      // ema_0 = params_0
    }
    if (shadow_.size() != params.entries.size())
      throw ContractError("ema: shadow does not match parameters");
    const S d = static_cast<S>(decay);
    const S one_minus = static_cast<S>(1.0 - decay);
    for (size_t i = 0; i < shadow_.size(); ++i) {
      const auto& src = params.entries[i].tensor.data();
      auto& dst = shadow_[i];
      for (size_t j = 0; j < dst.size(); ++j)
        dst[j] = d * dst[j] + one_minus * src[j];
    }
  }

  ParametersT<S> materialize(const ParametersT<S>& like) const {
    if (shadow_.size() != like.entries.size())
      throw ContractError("ema: shadow does not match parameters");
    ParametersT<S> out;
    for (size_t i = 0; i < shadow_.size(); ++i) {
      out.add(like.entries[i].name,
              TensorT<S>::from_data(like.entries[i].tensor.shape(), shadow_[i],
                                    true));
    }
    return out;
  }

  const std::vector<std::vector<S>>& shadow() const { return shadow_; }

 private:
  std::vector<std::vector<S>> shadow_;
};

}  // namespace hrlm
