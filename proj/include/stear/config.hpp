#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "stear/engine.hpp"
#include "stear/model.hpp"
#include "stear/planted.hpp"
#include "stear/tasks.hpp"

namespace stear {

struct ModelSection {
  ModelConfig config;
  std::optional<std::uint64_t> seed;  // default: derived from the global seed
  std::optional<PlantedSpec> planted;  // absent: random init_weights
};

struct TasksSection {
  TaskSetParams params;             // params.seed is ignored if `seed` is absent
  std::optional<std::uint64_t> seed;  // default: derived from the global seed
  std::optional<std::filesystem::path> path;  // existing task file instead of generating
};

struct OutputSection {
  std::filesystem::path dir = "out";
  std::size_t max_new = 1;
};

// One JSON document with model / tasks / intervention / output sections and a
// global seed. Unknown keys anywhere are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelSection model;
  TasksSection tasks;
  InterventionConfig intervention;
  OutputSection output;

  std::uint64_t model_seed() const;
  TaskSetParams task_params() const;
  void validate() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_json(const RunConfig& config);

}  // namespace stear
