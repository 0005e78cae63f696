#include <cmath>
#include <cstring>

#include <json.hpp>

#include "doctest.h"
#include "hrlm/synthetic.hpp"
#include "hrlm/trainer.hpp"
#include "oracle_utils.hpp"

using namespace hrlm;

namespace {

ModelConfig toy_standard_config() {
  ModelConfig cfg;
  cfg.variant = Variant::standard;
  cfg.d_model = 32;
  cfg.layers_per_module = 2;
  cfg.head_dim = 16;
  cfg.vocab_size = 24;
  cfg.context_len = 64;
  cfg.mlp_hidden = 64;
  return cfg;
}

ModelConfig toy_hrm_config() {
  ModelConfig cfg = toy_standard_config();
  cfg.variant = Variant::hrm;
  cfg.h_cycles = 2;
  cfg.l_steps_per_cycle = 3;
  return cfg;
}

TrainConfig toy_train_config() {
  TrainConfig t;
  t.peak_lr = 3e-3;
  t.lr_warmup_steps = 20;
  t.ema_decay = 0.99;
  t.batch_tokens = 128;
  t.total_steps = 100;
  t.k_warmup_steps = 30;
  t.seed = 7;
  return t;
}

class SyntheticStream : public DataStream {
 public:
  SyntheticStream(SyntheticTaskConfig cfg, uint64_t seed)
      : cfg_(cfg), rng_(seed) {}
  std::optional<PackedExample> next() override {
    return synthetic_example(cfg_, rng_);
  }

 private:
  SyntheticTaskConfig cfg_;
  Rng rng_;
};

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("tbptt horizon schedule") {
  TrainConfig cfg;
  cfg.k_start = 2;
  cfg.k_end = 5;
  cfg.k_warmup_steps = 100;
  CHECK(tbptt_horizon(0, cfg) == 2);
  CHECK(tbptt_horizon(100, cfg) == 5);
  CHECK(tbptt_horizon(100000, cfg) == 5);
  // mid-warmup: 2 + 3*0.5 = 3.5, rounded half away from zero
  CHECK(tbptt_horizon(50, cfg) == 4);

  // non-decreasing, clamped
  int64_t prev = 0;
  for (int64_t s = 0; s <= 200; ++s) {
    const int64_t k = tbptt_horizon(s, cfg);
    CHECK(k >= prev);
    CHECK(k <= cfg.k_end);
    prev = k;
  }
  CHECK_THROWS_AS(tbptt_horizon(-1, cfg), ContractError);
}

TEST_CASE("lr schedule: warmup then constant, no decay") {
  TrainConfig cfg;
  cfg.peak_lr = 2.2e-4;
  cfg.lr_warmup_steps = 2000;
  CHECK(lr_schedule(0, cfg) == 0.0);
  CHECK(lr_schedule(2000, cfg) == doctest::Approx(2.2e-4).epsilon(1e-15));
  CHECK(lr_schedule(1000000, cfg) == doctest::Approx(2.2e-4).epsilon(1e-15));
  CHECK(lr_schedule(1000, cfg) == doctest::Approx(1.1e-4).epsilon(1e-12));
}

TEST_CASE("adam-atan2: zero gradient moves parameters only by decay") {
  ModelConfig mcfg = toy_standard_config();
  mcfg.layers_per_module = 1;
  ParametersT<double> p = ParametersT<double>::init(mcfg, 3);
  ParametersT<double> before = p.clone();
  TrainConfig tcfg;
  tcfg.weight_decay = 0.1;
  AdamAtan2<double> opt;
  opt.init(p);
  std::vector<std::vector<double>> zeros;
  for (const auto& e : p.entries) zeros.emplace_back(e.tensor.size(), 0.0);
  auto info = opt.step(p, zeros, 0.5, tcfg);
  CHECK(info.max_update_mag == 0.0);  // atan2(0, 0) = 0
  for (size_t i = 0; i < p.entries.size(); ++i) {
    const auto& name = p.entries[i].name;
    const bool excluded = name == "embed" || name == "z_l0";
    for (size_t j = 0; j < p.entries[i].tensor.data().size(); ++j) {
      const double b = before.entries[i].tensor.data()[j];
      const double a = p.entries[i].tensor.data()[j];
      if (excluded) {
        CHECK(a == b);
      } else {
        CHECK(a == doctest::Approx(b * (1.0 - 0.5 * 0.1)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("adam-atan2: gradient scale invariance") {
  TrainConfig tcfg;
  tcfg.weight_decay = 0.0;
  Rng rng(5);
  // two identical parameter sets, gradients scaled by 10 on one side
  ParametersT<double> a, b;
  a.add("w", TensorT<double>::randn({8}, rng, 1.0, true));
  b.add("w", TensorT<double>::from_data({8}, a.at("w").data(), true));
  AdamAtan2<double> oa, ob;
  oa.init(a);
  ob.init(b);
  Rng grng(6);
  for (int step = 0; step < 25; ++step) {
    std::vector<double> g(8);
    for (auto& v : g) v = grng.normal();
    std::vector<double> g10(g);
    for (auto& v : g10) v *= 10.0;
    oa.step(a, {g}, 0.01, tcfg);
    ob.step(b, {g10}, 0.01, tcfg);
  }
  CHECK(hrlm_test::max_abs_diff(a.at("w").data(), b.at("w").data()) < 1e-6);
}

TEST_CASE("adam-atan2: constant-gradient fixed point lr*pi/4") {
  TrainConfig tcfg;
  tcfg.weight_decay = 0.0;
  ParametersT<double> p;
  p.add("w", TensorT<double>::filled({1}, 1.0, true));
  AdamAtan2<double> opt;
  opt.init(p);
  const double lr = 0.5;
  double last = 0.0;
  for (int step = 0; step < 10000; ++step) {
    auto info = opt.step(p, {{0.7}}, lr, tcfg);
    last = info.max_update_mag;
  }
  CHECK(std::abs(last - lr * M_PI / 4.0) < 1e-4);
}

TEST_CASE("adam-atan2: update magnitude bounded by lr*pi/2, always") {
  TrainConfig tcfg;
  tcfg.weight_decay = 0.05;
  ParametersT<double> p;
  Rng rng(9);
  p.add("w", TensorT<double>::randn({16}, rng, 1.0, true));
  AdamAtan2<double> opt;
  opt.init(p);
  Rng grng(10);
  for (int step = 0; step < 500; ++step) {
    std::vector<double> g(16);
    for (auto& v : g) v = grng.normal() * std::exp(grng.normal() * 3.0);
    const double lr = 0.001 + grng.uniform() * 0.5;
    auto info = opt.step(p, {g}, lr, tcfg);
    CHECK(info.max_update_mag <= lr * M_PI / 2.0 + 1e-15);
  }
}

TEST_CASE("adam-atan2: non-finite gradients abort with the parameter name") {
  ParametersT<double> p;
  p.add("w.bad", TensorT<double>::filled({2}, 1.0, true));
  AdamAtan2<double> opt;
  opt.init(p);
  TrainConfig tcfg;
  try {
    opt.step(p, {{1.0, std::numeric_limits<double>::infinity()}}, 0.1, tcfg);
    FAIL("expected Error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("w.bad") != std::string::npos);
  }
}

TEST_CASE("ema: endpoints and closed form") {
  Rng rng(12);
  ParametersT<double> p;
  p.add("w", TensorT<double>::randn({6}, rng, 1.0, true));

  Ema<double> e0;
  e0.init(p);
  ParametersT<double> p2 = p.clone();
  for (auto& v : p2.at("w").mutable_data()) v += 3.0;
  Ema<double> ed0;
  ed0.init(p);
  ed0.update(p2, 0.0);  // decay 0 -> ema = params
  CHECK(hrlm_test::max_abs_diff(ed0.shadow()[0], p2.at("w").data()) == 0.0);

  Ema<double> ed1;
  ed1.init(p);
  ed1.update(p2, 1.0);  // decay 1 -> unchanged
  CHECK(hrlm_test::max_abs_diff(ed1.shadow()[0], p.at("w").data()) == 0.0);

  // constant params from ema0: ema_n = p + (ema0 - p) * decay^n
  Ema<double> e;
  e.init(p);
  const double decay = 0.9999;
  const int64_t n = 500;
  for (int64_t i = 0; i < n; ++i) e.update(p2, decay);
  const double factor = std::pow(decay, static_cast<double>(n));
  for (size_t j = 0; j < 6; ++j) {
    const double expect = p2.at("w").data()[j] +
                          (p.at("w").data()[j] - p2.at("w").data()[j]) * factor;
    CHECK(std::abs(e.shadow()[0][j] - expect) < 1e-10);
  }
}

TEST_CASE("ema: every entry stays inside the span of its history") {
  Rng rng(13);
  ParametersT<double> p;
  p.add("w", TensorT<double>::randn({8}, rng, 1.0, true));
  Ema<double> e;
  e.init(p);
  std::vector<double> lo = p.at("w").data(), hi = p.at("w").data();
  for (int step = 0; step < 50; ++step) {
    for (auto& v : p.at("w").mutable_data()) v += rng.normal() * 0.3;
    for (size_t j = 0; j < 8; ++j) {
      lo[j] = std::min(lo[j], p.at("w").data()[j]);
      hi[j] = std::max(hi[j], p.at("w").data()[j]);
    }
    e.update(p, 0.9);
    for (size_t j = 0; j < 8; ++j) {
      CHECK(e.shadow()[0][j] >= lo[j] - 1e-12);
      CHECK(e.shadow()[0][j] <= hi[j] + 1e-12);
    }
  }
}

TEST_CASE("train loop: seeded determinism, K logging, loss decrease") {
  ModelConfig mcfg = toy_hrm_config();
  TrainConfig tcfg = toy_train_config();
  SyntheticTaskConfig task;
  task.seed = 41;

  auto run = [&] {
    SyntheticStream stream(task, task.seed);
    return train_loop<float>(mcfg, tcfg, stream);
  };
  TrainResult<float> a = run();
  TrainResult<float> b = run();

  REQUIRE(a.metrics.size() == b.metrics.size());
  for (size_t i = 0; i < a.metrics.size(); ++i) CHECK(a.metrics[i] == b.metrics[i]);
  // parameter bytes identical as well
  for (size_t i = 0; i < a.params.entries.size(); ++i)
    CHECK(std::memcmp(a.params.entries[i].tensor.data().data(),
                      b.params.entries[i].tensor.data().data(),
                      a.params.entries[i].tensor.size() * sizeof(float)) == 0);

  // K warms from k_start to k_end across the logged lines
  auto first = nlohmann::json::parse(a.metrics.front());
  CHECK(first["K"] == 2);
  auto last = nlohmann::json::parse(a.metrics[a.steps_run - 1]);
  CHECK(last["K"] == 5);

  // the objective moved: mean of first 5 losses vs mean of last 5
  double head_loss = 0.0, tail_loss = 0.0;
  for (int i = 0; i < 5; ++i) {
    head_loss += nlohmann::json::parse(a.metrics[i])["loss"].get<double>();
    tail_loss +=
        nlohmann::json::parse(a.metrics[a.steps_run - 1 - i])["loss"].get<double>();
  }
  CHECK(tail_loss < head_loss * 0.7);
}

TEST_CASE("train loop: data exhaustion stops cleanly with a report") {
  ModelConfig mcfg = toy_standard_config();
  TrainConfig tcfg = toy_train_config();
  tcfg.total_steps = 50;
  SyntheticTaskConfig task;
  Rng rng(55);
  std::vector<PackedExample> few;
  for (int i = 0; i < 12; ++i) few.push_back(synthetic_example(task, rng));
  VectorStream stream(std::move(few));
  TrainResult<float> r = train_loop<float>(mcfg, tcfg, stream);
  CHECK(r.data_exhausted);
  CHECK(r.steps_run < 50);
  auto tail = nlohmann::json::parse(r.metrics.back());
  CHECK(tail["event"] == "data_exhausted");
  CHECK(tail["steps_run"] == r.steps_run);
}

TEST_CASE("train loop: k_end above module steps is rejected") {
  ModelConfig mcfg = toy_hrm_config();
  mcfg.h_cycles = 1;
  mcfg.l_steps_per_cycle = 2;  // 3 module steps total
  TrainConfig tcfg = toy_train_config();
  tcfg.k_end = 5;
  SyntheticTaskConfig task;
  SyntheticStream stream(task, 1);
  CHECK_THROWS_AS(train_loop<float>(mcfg, tcfg, stream), ConfigError);
}

}  // TEST_SUITE
