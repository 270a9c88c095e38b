// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "trialign/config.hpp"
#include "trialign/optimizer.hpp"
#include "trialign/substrate/io.hpp"
#include "trialign/substrate/parameters.hpp"

namespace trialign {

inline constexpr char kCheckpointMagic[8] = {'T', 'R', 'I', 'A', 'L', 'G', 'N', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A named tensor as stored on disk; payload kept in its stored dtype.
struct StoredTensor {
  std::string name;
  DType dtype = DType::kFloat32;
  Shape shape;
  std::vector<double> values;  // exact for both dtypes

  bool operator==(const StoredTensor&) const = default;
};

/// Everything needed to resume training bit-exactly.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_digest = 0;
  std::string config_json;
  std::string kind;  // "pretrain", "finetune-retrieval", "finetune-vqa"
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t step_in_epoch = 0;
  std::vector<std::string> rng_states;
  std::vector<StoredTensor> params;
  std::optional<std::uint64_t> optimizer_steps;
  std::vector<StoredTensor> first_moments, second_moments;

  RunConfig config() const { return config_from_json(parse_json_text(config_json, "checkpoint config")); }
  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

template <class T>
StoredTensor store(const std::string& name, const Tensor<T>& t) {
  StoredTensor s{name, dtype_of<T>(), t.shape(), {}};
  s.values.assign(t.values().begin(), t.values().end());
  return s;
}

inline void put_tensor(std::string& out, const StoredTensor& t) {
  io::put_string(out, t.name);
  io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t d : t.shape) io::put_le<std::uint64_t>(out, d);
  for (double v : t.values) {
    if (t.dtype == DType::kFloat32)
      io::put_le<float>(out, static_cast<float>(v));
    else
      io::put_le<double>(out, v);
  }
}

inline StoredTensor get_tensor(io::Reader& r) {
  StoredTensor t;
  t.name = r.get_string();
  const auto dt = r.get<std::uint8_t>();
  if (dt != 1 && dt != 2) throw IoError("checkpoint: tensor '" + t.name + "' has unknown dtype " + std::to_string(dt));
  t.dtype = static_cast<DType>(dt);
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw IoError("checkpoint: tensor '" + t.name + "' has implausible rank");
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(r.get<std::uint64_t>());
  const std::size_t n = shape_numel(t.shape);
  t.values.resize(n);
  for (auto& v : t.values) v = t.dtype == DType::kFloat32 ? double(r.get<float>()) : r.get<double>();
  return t;
}

template <class T>
void restore(Tensor<T>& dst, const StoredTensor& src) {
  if (dst.shape() != src.shape)
    throw ShapeError("checkpoint: tensor '" + src.name + "' has shape " + shape_str(src.shape) + ", model expects " + shape_str(dst.shape()));
  for (std::size_t i = 0; i < src.values.size(); ++i) dst[i] = static_cast<T>(src.values[i]);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  io::put_le<std::uint32_t>(out, c.version);
  io::put_le<std::uint64_t>(out, c.config_digest);
  io::put_string(out, c.config_json);
  io::put_string(out, c.kind);
  io::put_le<std::uint64_t>(out, c.step);
  io::put_le<std::uint64_t>(out, c.epoch);
  io::put_le<std::uint64_t>(out, c.step_in_epoch);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.rng_states.size()));
  for (const auto& s : c.rng_states) io::put_string(out, s);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) detail::put_tensor(out, p);
  io::put_le<std::uint8_t>(out, c.optimizer_steps.has_value());
  if (c.optimizer_steps) {
    io::put_le<std::uint64_t>(out, *c.optimizer_steps);
    for (const auto& t : c.first_moments) detail::put_tensor(out, t);
    for (const auto& t : c.second_moments) detail::put_tensor(out, t);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < sizeof(kCheckpointMagic) || bytes.compare(0, sizeof(kCheckpointMagic), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw IoError(what + ": not a checkpoint file (bad magic)");
  const std::string body = bytes.substr(sizeof(kCheckpointMagic));
  io::Reader r(body, what);
  Checkpoint c;
  c.version = r.get<std::uint32_t>();
  if (c.version != kCheckpointVersion) throw IoError(what + ": unsupported format version " + std::to_string(c.version));
  c.config_digest = r.get<std::uint64_t>();
  c.config_json = r.get_string();
  c.kind = r.get_string();
  c.step = r.get<std::uint64_t>();
  c.epoch = r.get<std::uint64_t>();
  c.step_in_epoch = r.get<std::uint64_t>();
  const auto n_rng = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_rng; ++i) c.rng_states.push_back(r.get_string());
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) c.params.push_back(detail::get_tensor(r));
  if (r.get<std::uint8_t>()) {
    c.optimizer_steps = r.get<std::uint64_t>();
    for (std::uint32_t i = 0; i < n; ++i) c.first_moments.push_back(detail::get_tensor(r));
    for (std::uint32_t i = 0; i < n; ++i) c.second_moments.push_back(detail::get_tensor(r));
  }
  if (!r.done()) throw IoError(what + ": trailing bytes after the last record");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { io::write_file_atomic(path, serialize_checkpoint(c)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(io::read_file(path), path.string()); }

template <class T>
std::vector<StoredTensor> store_parameters(const ParameterSet<T>& params) {
  std::vector<StoredTensor> out;
  for (const auto& p : params) out.push_back(detail::store(p->name, p->value));
  return out;
}

/// Copies stored values into `params`, casting to T. Names and shapes must
/// match one to one.
template <class T>
void restore_parameters(ParameterSet<T>& params, const std::vector<StoredTensor>& stored) {
  if (stored.size() != params.size())
    throw ShapeError("checkpoint holds " + std::to_string(stored.size()) + " parameters, model has " + std::to_string(params.size()));
  for (const auto& s : stored) {
    if (!params.contains(s.name)) throw ShapeError("checkpoint parameter '" + s.name + "' is not in the model");
    detail::restore(params.get(s.name).value, s);
  }
}

template <class T>
void store_optimizer(Checkpoint& c, const ParameterSet<T>& params, const AdamW<T>& opt) {
  c.optimizer_steps = opt.steps();
  c.first_moments.clear();
  c.second_moments.clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.first_moments.push_back(detail::store(params[i].name, opt.first_moments()[i]));
    c.second_moments.push_back(detail::store(params[i].name, opt.second_moments()[i]));
  }
}

template <class T>
void restore_optimizer(AdamW<T>& opt, const Checkpoint& c) {
  if (!c.optimizer_steps) throw InvalidArgument("checkpoint has no optimizer state");
  if (c.first_moments.size() != opt.first_moments().size()) throw ShapeError("checkpoint optimizer state does not match the model");
  for (std::size_t i = 0; i < c.first_moments.size(); ++i) {
    detail::restore(opt.first_moments()[i], c.first_moments[i]);
    detail::restore(opt.second_moments()[i], c.second_moments[i]);
  }
  opt.set_steps(*c.optimizer_steps);
}

}  // namespace trialign
