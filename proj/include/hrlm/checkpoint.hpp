#pragma once

// Checkpoint container: named parameters with a shape/precision header,
// little-endian raw arrays, and the model config as a JSON record. The
// exact layout is documented in docs/file-formats.md and is stable across
// versions (version field in the header).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hrlm/model.hpp"

namespace hrlm {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"variant", variant_name(c.variant)},
                     {"d_model", c.d_model},
                     {"layers_per_module", c.layers_per_module},
                     {"head_dim", c.head_dim},
                     {"vocab_size", c.vocab_size},
                     {"context_len", c.context_len},
                     {"rope_theta", c.rope_theta},
                     {"norm_eps", c.norm_eps},
                     {"h_cycles", c.h_cycles},
                     {"l_steps_per_cycle", c.l_steps_per_cycle},
                     {"loop_count", c.loop_count},
                     {"mlp_hidden", c.mlp_hidden},
                     {"train_z_l0", c.train_z_l0},
                     {"exit_norm", c.exit_norm}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  j.at("d_model").get_to(c.d_model);
  j.at("layers_per_module").get_to(c.layers_per_module);
  j.at("head_dim").get_to(c.head_dim);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("context_len").get_to(c.context_len);
  j.at("rope_theta").get_to(c.rope_theta);
  j.at("norm_eps").get_to(c.norm_eps);
  j.at("h_cycles").get_to(c.h_cycles);
  j.at("l_steps_per_cycle").get_to(c.l_steps_per_cycle);
  j.at("loop_count").get_to(c.loop_count);
  j.at("mlp_hidden").get_to(c.mlp_hidden);
  j.at("train_z_l0").get_to(c.train_z_l0);
  j.at("exit_norm").get_to(c.exit_norm);
}

namespace detail {

constexpr char kCkptMagic[8] = {'H', 'R', 'L', 'M', 'C', 'K', 'P', '1'};

inline void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw Error("checkpoint: big-endian hosts are not supported");
}

inline void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
  const uint64_t len = read_u64(is);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("checkpoint: truncated string");
  return s;
}

template <class S>
void write_params(std::ostream& os, const ParametersT<S>& p) {
  write_u64(os, p.entries.size());
  for (const auto& e : p.entries) {
    write_str(os, e.name);
    const uint8_t dtype = sizeof(S) == 4 ? 0 : 1;
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    write_u64(os, e.tensor.shape().size());
    for (int64_t dim : e.tensor.shape()) write_u64(os, static_cast<uint64_t>(dim));
    const auto& data = e.tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(S)));
  }
}

template <class S>
ParametersT<S> read_params(std::istream& is) {
  ParametersT<S> p;
  const uint64_t n = read_u64(is);
  for (uint64_t i = 0; i < n; ++i) {
    const std::string name = read_str(is);
    uint8_t dtype = 0;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    const uint64_t ndim = read_u64(is);
    Shape shape(ndim);
    for (uint64_t d = 0; d < ndim; ++d)
      shape[d] = static_cast<int64_t>(read_u64(is));
    const int64_t numel = shape_numel(shape);
    std::vector<S> out(numel);
    if ((dtype == 0 && sizeof(S) == 4) || (dtype == 1 && sizeof(S) == 8)) {
      is.read(reinterpret_cast<char*>(out.data()),
              static_cast<std::streamsize>(numel * sizeof(S)));
    } else if (dtype == 0) {
      std::vector<float> tmp(numel);
      is.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(numel * sizeof(float)));
      for (int64_t k = 0; k < numel; ++k) out[k] = static_cast<S>(tmp[k]);
    } else {
      std::vector<double> tmp(numel);
      is.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(numel * sizeof(double)));
      for (int64_t k = 0; k < numel; ++k) out[k] = static_cast<S>(tmp[k]);
    }
    if (!is) throw DataError("checkpoint: truncated tensor data for " + name);
    p.add(name, TensorT<S>::from_data(std::move(shape), std::move(out), true));
  }
  return p;
}

}  // namespace detail

template <class S>
struct CheckpointT {
  ModelConfig config;
  ParametersT<S> raw;
  std::optional<ParametersT<S>> ema;
  int64_t step = 0;
};

template <class S>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParametersT<S>& raw, const ParametersT<S>* ema,
                     int64_t step) {
  detail::require_little_endian();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  nlohmann::json meta;
  meta["model"] = cfg;
  meta["step"] = step;
  detail::write_str(os, meta.dump());
  detail::write_u64(os, ema ? 2 : 1);
  detail::write_str(os, "raw");
  detail::write_params(os, raw);
  if (ema) {
    detail::write_str(os, "ema");
    detail::write_params(os, *ema);
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

template <class S>
CheckpointT<S> load_checkpoint(const std::string& path) {
  detail::require_little_endian();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  CheckpointT<S> ckpt;
  const nlohmann::json meta = nlohmann::json::parse(detail::read_str(is));
  ckpt.config = meta.at("model").get<ModelConfig>();
  ckpt.step = meta.value("step", 0);
  const uint64_t sections = detail::read_u64(is);
  for (uint64_t s = 0; s < sections; ++s) {
    const std::string name = detail::read_str(is);
    if (name == "raw") {
      ckpt.raw = detail::read_params<S>(is);
    } else if (name == "ema") {
      ckpt.ema = detail::read_params<S>(is);
    } else {
      throw DataError("checkpoint: unknown section " + name);
    }
  }
  return ckpt;
}

}  // namespace hrlm
