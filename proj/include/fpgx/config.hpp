#pragma once

#include <optional>
#include <string>

#include "fpgx/serde.hpp"

namespace fpgx {

inline constexpr int kConfigSchemaVersion = 1;

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  ModelConfig model;
  TaskSpec task_old;
  std::optional<TaskSpec> task_new;
  TrainConfig train;
  std::optional<GrowthPlan> growth;
  std::string out_checkpoint;
  std::string out_runlog;
};

inline ExperimentConfig experiment_from_json(const Json& j) {
  detail::reject_unknown_keys(
      j, {"schema_version", "model", "task_old", "task_new", "train", "growth", "outputs"},
      "experiment config");
  for (const char* key : {"schema_version", "model", "task_old", "train"})
    if (!j.contains(key))
      throw InputError(std::string("experiment config: missing key '") + key + "'");

  ExperimentConfig e;
  e.schema_version = j.at("schema_version").get<int>();
  if (e.schema_version != kConfigSchemaVersion)
    throw InputError("experiment config: schema_version " + std::to_string(e.schema_version) +
                     " unsupported (expected " + std::to_string(kConfigSchemaVersion) + ")");
  e.model = config_from_json(j.at("model"));
  e.task_old = task_from_json(j.at("task_old"));
  if (j.contains("task_new")) e.task_new = task_from_json(j.at("task_new"));
  e.train = train_from_json(j.at("train"));
  if (j.contains("growth")) e.growth = plan_from_json(j.at("growth"));
  if (j.contains("outputs")) {
    const Json& out = j.at("outputs");
    detail::reject_unknown_keys(out, {"checkpoint", "runlog"}, "experiment outputs");
    e.out_checkpoint = detail::field_or<std::string>(out, "checkpoint", "");
    e.out_runlog = detail::field_or<std::string>(out, "runlog", "");
  }
  return e;
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw InputError(std::string("experiment config: invalid JSON: ") + e.what());
  }
  try {
    return experiment_from_json(j);
  } catch (const Json::exception& e) {
    throw InputError(std::string("experiment config: ") + e.what());
  }
}

inline Json experiment_to_json(const ExperimentConfig& e) {
  Json j;
  j["schema_version"] = e.schema_version;
  j["model"] = config_to_json(e.model);
  j["task_old"] = task_to_json(e.task_old);
  if (e.task_new) j["task_new"] = task_to_json(*e.task_new);
  j["train"] = train_to_json(e.train);
  if (e.growth) j["growth"] = plan_to_json(*e.growth);
  Json out = Json::object();
  if (!e.out_checkpoint.empty()) out["checkpoint"] = e.out_checkpoint;
  if (!e.out_runlog.empty()) out["runlog"] = e.out_runlog;
  if (!out.empty()) j["outputs"] = out;
  return j;
}

}  // namespace fpgx
