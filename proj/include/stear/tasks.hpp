#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stear/model.hpp"
#include "stear/video.hpp"

namespace stear {

enum class TaskKind { kSpatial, kTemporalOrder };

const char* task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct PlantedTask {
  VisualTokenGrid grid;
  std::vector<TokenId> prompt;
  TokenId gold = 0;
  TokenId distractor = 0;
  TaskKind kind = TaskKind::kSpatial;
  std::vector<std::size_t> annotation;  // flattened evidence token indices, ascending
  double attenuation = 1.0;
};

struct TaskSetParams {
  std::uint64_t seed = 0;
  std::size_t count = 100;
  TaskKind kind = TaskKind::kSpatial;
  std::size_t positions = 16;
  std::size_t frames = 8;
  std::size_t dim = 64;
  double attenuation = 1.0;
  // Temporal-order only: class amplitude (relative to the evidence) of a
  // reversed-order context event at a third position. 0 leaves it out.
  double decoy = 0.5;
};

// Task i is generated from mix_seed(seed, i) alone, so any subset or order of
// generation yields the same tasks.
PlantedTask generate_planted_task(const TaskSetParams& params, std::size_t index);
std::vector<PlantedTask> generate_planted_tasks(const TaskSetParams& params);

struct TaskSet {
  TaskSetParams params;
  std::vector<PlantedTask> tasks;
};

// JSON document plus a sibling grid bank (binary container). `grid_ref` in the
// JSON indexes into the bank.
std::string task_set_to_json(const TaskSet& set, const std::string& grid_file);
void save_task_set(const TaskSet& set, const std::filesystem::path& json_path);
TaskSet load_task_set(const std::filesystem::path& json_path);

}  // namespace stear
