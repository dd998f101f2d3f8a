#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpgx/common.hpp"
#include "fpgx/growth.hpp"
#include "fpgx/mask.hpp"
#include "fpgx/tasks.hpp"
#include "fpgx/training.hpp"
#include "fpgx/transformer.hpp"

namespace fpgx {

using Json = nlohmann::json;

namespace detail {

inline void require_object(const Json& j, const std::string& where) {
  if (!j.is_object()) throw InputError(where + ": expected a JSON object");
}

inline void reject_unknown_keys(const Json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
  require_object(j, where);
  for (const auto& [key, value] : j.items())
    if (allowed.count(key) == 0) throw InputError(where + ": unknown key '" + key + "'");
}

template <class T>
T field_or(const Json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

}  // namespace detail

inline std::string strategy_name(GrowthStrategy s) {
  return s == GrowthStrategy::GFreeze ? "gfreeze" : "gtrain";
}

inline GrowthStrategy strategy_from_name(const std::string& name) {
  if (name == "gfreeze") return GrowthStrategy::GFreeze;
  if (name == "gtrain") return GrowthStrategy::GTrain;
  throw InputError("growth strategy must be 'gfreeze' or 'gtrain', got '" + name + "'");
}

inline std::string initializer_name(GrowthInitializer i) {
  return i == GrowthInitializer::Duplicate ? "duplicate" : "zero_init";
}

inline GrowthInitializer initializer_from_name(const std::string& name) {
  if (name == "duplicate") return GrowthInitializer::Duplicate;
  if (name == "zero_init") return GrowthInitializer::ZeroInit;
  throw InputError("growth initializer must be 'duplicate' or 'zero_init', got '" + name + "'");
}

inline std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::CopyReverse: return "copy_reverse";
    case TaskKind::ModularArith: return "modular_arith";
    case TaskKind::KeyValueRecall: return "kv_recall";
    case TaskKind::AssocMapping: return "assoc_mapping";
  }
  throw InputError("unnamed task kind");
}

inline TaskKind task_kind_from_name(const std::string& name) {
  if (name == "copy_reverse") return TaskKind::CopyReverse;
  if (name == "modular_arith") return TaskKind::ModularArith;
  if (name == "kv_recall") return TaskKind::KeyValueRecall;
  if (name == "assoc_mapping") return TaskKind::AssocMapping;
  throw InputError("unknown task kind '" + name + "'");
}

inline Json config_to_json(const ModelConfig& c) {
  Json j;
  j["n_layers"] = c.n_layers;
  j["hidden_dim"] = static_cast<std::int64_t>(c.hidden_dim);
  Json dims = Json::array();
  for (Index d : c.mlp_dims) dims.push_back(static_cast<std::int64_t>(d));
  j["mlp_dims"] = dims;
  j["n_heads"] = c.n_heads;
  j["head_dim"] = static_cast<std::int64_t>(c.head_dim);
  j["vocab_size"] = static_cast<std::int64_t>(c.vocab_size);
  j["max_seq_len"] = static_cast<std::int64_t>(c.max_seq_len);
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig config_from_json(const Json& j) {
  detail::reject_unknown_keys(j,
                              {"n_layers", "hidden_dim", "mlp_dims", "n_heads", "head_dim",
                               "vocab_size", "max_seq_len", "seed"},
                              "model config");
  for (const char* key :
       {"n_layers", "hidden_dim", "mlp_dims", "n_heads", "head_dim", "vocab_size", "max_seq_len"})
    if (!j.contains(key)) throw InputError(std::string("model config: missing key '") + key + "'");

  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<std::int64_t>();
  c.n_heads = j.at("n_heads").get<int>();
  c.head_dim = j.at("head_dim").get<std::int64_t>();
  c.vocab_size = j.at("vocab_size").get<std::int64_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::int64_t>();
  c.seed = detail::field_or<std::uint64_t>(j, "seed", 0);
  const Json& dims = j.at("mlp_dims");
  if (dims.is_number_integer()) {
    c.mlp_dims.assign(static_cast<size_t>(std::max(c.n_layers, 0)), dims.get<std::int64_t>());
  } else if (dims.is_array()) {
    for (const Json& d : dims) c.mlp_dims.push_back(d.get<std::int64_t>());
  } else {
    throw InputError("model config: mlp_dims must be an integer or an array");
  }
  c.validate();
  return c;
}

inline Json plan_to_json(const GrowthPlan& p) {
  Json j;
  j["k"] = p.k;
  if (p.layers.has_value())
    j["layers"] = *p.layers;
  else
    j["layers"] = nullptr;
  j["strategy"] = strategy_name(p.strategy);
  j["initializer"] = initializer_name(p.initializer);
  j["noise_scale"] = p.noise_scale;
  return j;
}

inline GrowthPlan plan_from_json(const Json& j) {
  detail::reject_unknown_keys(j, {"k", "layers", "strategy", "initializer", "noise_scale"},
                              "growth plan");
  GrowthPlan p;
  p.k = detail::field_or<int>(j, "k", 2);
  if (j.contains("layers") && !j.at("layers").is_null()) {
    const Json& layers = j.at("layers");
    if (layers.is_string()) {
      if (layers.get<std::string>() != "all")
        throw InputError("growth plan: layers must be 'all', null, or an index array");
    } else {
      p.layers = layers.get<std::vector<int>>();
    }
  }
  if (j.contains("strategy")) p.strategy = strategy_from_name(j.at("strategy").get<std::string>());
  if (j.contains("initializer"))
    p.initializer = initializer_from_name(j.at("initializer").get<std::string>());
  p.noise_scale = detail::field_or<double>(j, "noise_scale", 0.0);
  return p;
}

inline Json mask_to_json(const FreezeMask& mask) {
  Json j = Json::object();
  for (const auto& [name, tm] : mask.tensors) {
    Json entry;
    switch (tm.kind) {
      case Trainability::FullFrozen: entry["kind"] = "frozen"; break;
      case Trainability::FullTrainable: entry["kind"] = "trainable"; break;
      case Trainability::ColRange: entry["kind"] = "col_range"; break;
      case Trainability::RowRange: entry["kind"] = "row_range"; break;
    }
    entry["begin"] = static_cast<std::int64_t>(tm.begin);
    entry["end"] = static_cast<std::int64_t>(tm.end);
    j[name] = entry;
  }
  return j;
}

inline FreezeMask mask_from_json(const Json& j) {
  detail::require_object(j, "freeze mask");
  FreezeMask mask;
  for (const auto& [name, entry] : j.items()) {
    detail::reject_unknown_keys(entry, {"kind", "begin", "end"}, "freeze mask entry");
    const std::string kind = entry.at("kind").get<std::string>();
    TensorMask tm;
    if (kind == "frozen")
      tm = TensorMask::frozen();
    else if (kind == "trainable")
      tm = TensorMask::trainable();
    else if (kind == "col_range")
      tm = TensorMask::col_range(entry.at("begin").get<std::int64_t>(),
                                 entry.at("end").get<std::int64_t>());
    else if (kind == "row_range")
      tm = TensorMask::row_range(entry.at("begin").get<std::int64_t>(),
                                 entry.at("end").get<std::int64_t>());
    else
      throw InputError("freeze mask: unknown kind '" + kind + "'");
    mask.tensors[name] = tm;
  }
  return mask;
}

inline Json task_to_json(const TaskSpec& t) {
  Json j;
  j["kind"] = task_kind_name(t.kind);
  j["alphabet_size"] = static_cast<std::int64_t>(t.alphabet_size);
  j["alphabet_offset"] = static_cast<std::int64_t>(t.alphabet_offset);
  j["seq_len"] = static_cast<std::int64_t>(t.seq_len);
  j["n_operands"] = t.n_operands;
  j["modulus"] = t.modulus;
  j["n_pairs"] = t.n_pairs;
  j["n_mappings"] = t.n_mappings;
  j["mapping_seed"] = t.mapping_seed;
  j["train_seed"] = t.train_seed;
  j["eval_seed"] = t.eval_seed;
  j["eval_size"] = static_cast<std::int64_t>(t.eval_size);
  return j;
}

inline TaskSpec task_from_json(const Json& j) {
  detail::reject_unknown_keys(j,
                              {"kind", "alphabet_size", "alphabet_offset", "seq_len", "n_operands",
                               "modulus", "n_pairs", "n_mappings", "mapping_seed", "train_seed",
                               "eval_seed", "eval_size"},
                              "task spec");
  if (!j.contains("kind")) throw InputError("task spec: missing key 'kind'");
  TaskSpec t;
  t.kind = task_kind_from_name(j.at("kind").get<std::string>());
  t.alphabet_size = detail::field_or<std::int64_t>(j, "alphabet_size", t.alphabet_size);
  t.alphabet_offset = detail::field_or<std::int64_t>(j, "alphabet_offset", t.alphabet_offset);
  t.seq_len = detail::field_or<std::int64_t>(j, "seq_len", t.seq_len);
  t.n_operands = detail::field_or<int>(j, "n_operands", t.n_operands);
  t.modulus = detail::field_or<int>(j, "modulus", t.modulus);
  t.n_pairs = detail::field_or<int>(j, "n_pairs", t.n_pairs);
  t.n_mappings = detail::field_or<int>(j, "n_mappings", t.n_mappings);
  t.mapping_seed = detail::field_or<std::uint64_t>(j, "mapping_seed", t.mapping_seed);
  t.train_seed = detail::field_or<std::uint64_t>(j, "train_seed", t.train_seed);
  t.eval_seed = detail::field_or<std::uint64_t>(j, "eval_seed", t.eval_seed);
  t.eval_size = detail::field_or<std::int64_t>(j, "eval_size", t.eval_size);
  t.validate();
  return t;
}

inline Json train_to_json(const TrainConfig& t) {
  Json j;
  j["learning_rate"] = t.learning_rate;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["eps"] = t.eps;
  j["batch_size"] = t.batch_size;
  j["steps"] = t.steps;
  j["eval_every"] = t.eval_every;
  j["seed"] = t.seed;
  return j;
}

inline TrainConfig train_from_json(const Json& j) {
  detail::reject_unknown_keys(
      j, {"learning_rate", "beta1", "beta2", "eps", "batch_size", "steps", "eval_every", "seed"},
      "train config");
  TrainConfig t;
  t.learning_rate = detail::field_or<double>(j, "learning_rate", t.learning_rate);
  t.beta1 = detail::field_or<double>(j, "beta1", t.beta1);
  t.beta2 = detail::field_or<double>(j, "beta2", t.beta2);
  t.eps = detail::field_or<double>(j, "eps", t.eps);
  t.batch_size = detail::field_or<int>(j, "batch_size", t.batch_size);
  t.steps = detail::field_or<int>(j, "steps", t.steps);
  t.eval_every = detail::field_or<int>(j, "eval_every", t.eval_every);
  t.seed = detail::field_or<std::uint64_t>(j, "seed", t.seed);
  t.validate();
  return t;
}

}  // namespace fpgx
