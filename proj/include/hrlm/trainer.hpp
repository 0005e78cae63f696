#pragma once

// Training loop: deterministic batching by token budget, TBPTT horizon
// warmup, Adam-atan2, EMA, and a line-delimited JSON metrics log.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hrlm/diagnostics.hpp"
#include "hrlm/model.hpp"
#include "hrlm/objective.hpp"
#include "hrlm/optim.hpp"

namespace hrlm {

// Pull-based example source. Training consumes examples in stream order,
// which is what makes seeded runs byte-identical.
class DataStream {
 public:
  virtual ~DataStream() = default;
  virtual std::optional<PackedExample> next() = 0;
};

class VectorStream : public DataStream {
 public:
  explicit VectorStream(std::vector<PackedExample> examples)
      : examples_(std::move(examples)) {}
  std::optional<PackedExample> next() override {
    if (pos_ >= examples_.size()) return std::nullopt;
    return examples_[pos_++];
  }

 private:
  std::vector<PackedExample> examples_;
  size_t pos_ = 0;
};

template <class S>
struct TrainResult {
  ParametersT<S> params;
  Ema<S> ema;
  std::vector<std::string> metrics;  // one JSON line per step
  int64_t steps_run = 0;
  bool data_exhausted = false;
  bool stopped_by_hook = false;
};

// Periodic evaluation hook; returning true stops training early.
template <class S>
using EvalHook = std::function<bool(int64_t step, const ParametersT<S>& params,
                                    const Ema<S>& ema)>;

template <class S>
struct TrainOptions {
  EvalHook<S> hook;
  int64_t eval_every = 0;  // 0 = never
  std::function<void(const std::string&)> metric_sink;  // optional live sink
};

template <class S>
TrainResult<S> train_loop(const ModelConfig& mcfg, const TrainConfig& tcfg,
                          DataStream& stream,
                          const TrainOptions<S>& topts = {}) {
  mcfg.validate();
  tcfg.validate();
  if (mcfg.variant == Variant::hrm && tcfg.k_end > mcfg.total_module_steps())
    throw ConfigError("train: k_end exceeds total module steps");

  TrainResult<S> result{ParametersT<S>::init(mcfg, tcfg.seed), {}, {}, 0, false,
                        false};
  AdamAtan2<S> opt;
  opt.init(result.params);
  result.ema.init(result.params);

  std::optional<PackedExample> pending;
  const bool response_only = tcfg.objective == "response_only";
  const bool prefix_attention = tcfg.attention == "prefixlm";

  for (int64_t step = 0; step < tcfg.total_steps; ++step) {
    // greedy packing into the token budget, at least one example per step
    std::vector<PackedExample> batch;
    int64_t batch_tok = 0;
    while (true) {
      if (!pending) pending = stream.next();
      if (!pending) break;
      const int64_t len = static_cast<int64_t>(pending->token_ids.size());
      if (!batch.empty() && batch_tok + len > tcfg.batch_tokens) break;
      batch.push_back(std::move(*pending));
      pending.reset();
      batch_tok += len;
      if (batch_tok >= tcfg.batch_tokens) break;
    }
    if (batch.empty()) {
      result.data_exhausted = true;
      break;
    }

    const int64_t horizon =
        mcfg.variant == Variant::hrm
            ? std::min<int64_t>(tbptt_horizon(step, tcfg),
                                mcfg.total_module_steps())
            : 0;
    const double lr = lr_schedule(step, tcfg);

    double objective_value = 0.0;
    double response_nll_total = 0.0;
    int64_t response_count = 0;
    std::vector<std::vector<S>> grads;
    {
      Tape<S> tape;
      ForwardOptions fopts;
      fopts.grad_horizon = horizon;
      fopts.record_steps = false;
      std::optional<TensorT<S>> obj_sum;
      int64_t obj_count = 0;
      for (const PackedExample& ex : batch) {
        const int64_t eff_prefix = prefix_attention ? ex.prefix_len : 0;
        ForwardResult<S> fwd =
            model_forward(ex.token_ids, eff_prefix, mcfg, result.params, fopts);
        auto [rsum, rcount] =
            response_nll_sum(fwd.logits, ex.token_ids, ex.loss_mask);
        response_nll_total += static_cast<double>(rsum.item());
        response_count += rcount;
        if (response_only) {
          obj_sum = obj_sum ? add(*obj_sum, rsum) : rsum;
          obj_count += rcount;
        } else {
          std::vector<uint8_t> all(ex.token_ids.size(), 1);
          auto [fsum, fcount] = response_nll_sum(fwd.logits, ex.token_ids, all);
          obj_sum = obj_sum ? add(*obj_sum, fsum) : fsum;
          obj_count += fcount;
        }
      }
      TensorT<S> loss =
          scale(*obj_sum, static_cast<S>(1.0 / static_cast<double>(obj_count)));
      objective_value = static_cast<double>(loss.item());
      tape.backward(loss);
      grads.reserve(result.params.entries.size());
      for (const auto& e : result.params.entries)
        grads.push_back(tape.grad(e.tensor));
    }

    const bool log_now = tcfg.log_every > 0 && step % tcfg.log_every == 0;
    GradStats gstats;
    if (tcfg.grad_stats && log_now) {
      std::vector<double> flat;
      for (const auto& g : grads)
        for (const S v : g) flat.push_back(static_cast<double>(v));
      gstats = grad_magnitude_stats(flat);
      gstats.step = step;
    }

    typename AdamAtan2<S>::StepInfo sinfo =
        opt.step(result.params, grads, lr, tcfg);
    result.ema.update(result.params, tcfg.ema_decay);
    result.steps_run = step + 1;

    if (log_now) {
      nlohmann::ordered_json line;
      line["step"] = step;
      line["loss"] = objective_value;
      line["response_loss"] =
          response_nll_total / static_cast<double>(response_count);
      line["lr"] = lr;
      line["K"] = horizon;
      line["batch_tokens"] = batch_tok;
      line["batch_examples"] = batch.size();
      if (tcfg.grad_stats) {
        line["grad_mean_abs"] = gstats.mean_abs;
        line["grad_median_abs"] = gstats.median_abs;
        line["grad_log_dispersion"] = gstats.log_dispersion;
        line["grad_tail_to_median"] = gstats.tail_to_median;
      }
      line["update_max"] = sinfo.max_update_mag;
      std::string text = line.dump();
      if (topts.metric_sink) topts.metric_sink(text);
      result.metrics.push_back(std::move(text));
    }

    if (topts.hook && topts.eval_every > 0 &&
        (step + 1) % topts.eval_every == 0) {
      if (topts.hook(step, result.params, result.ema)) {
        result.stopped_by_hook = true;
        break;
      }
    }
  }

  if (result.data_exhausted) {
    nlohmann::ordered_json line;
    line["event"] = "data_exhausted";
    line["steps_run"] = result.steps_run;
    std::string text = line.dump();
    if (topts.metric_sink) topts.metric_sink(text);
    result.metrics.push_back(std::move(text));
  }
  return result;
}

// Infinite seeded stream of synthetic task examples.
template <class GenFn>
class GeneratorStream : public DataStream {
 public:
  explicit GeneratorStream(GenFn fn) : fn_(std::move(fn)) {}
  std::optional<PackedExample> next() override { return fn_(); }

 private:
  GenFn fn_;
};

}  // namespace hrlm
