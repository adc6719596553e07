#include "stear/tasks.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"

#include "stear/error.hpp"
#include "stear/planted.hpp"
#include "stear/random.hpp"
#include "stear/weights_io.hpp"

namespace stear {

namespace {

using Layout = PlantedLayout;
using nlohmann::json;

constexpr int kTaskFileVersion = 1;

void plant(VisualTokenGrid& grid, std::size_t position, std::size_t start, std::size_t span,
           std::size_t key_channel, std::size_t cls, double attenuation,
           std::vector<std::size_t>& annotation) {
  for (std::size_t t = start; t < start + span; ++t) {
    auto tok = grid.token(position, t);
    tok[key_channel] = attenuation * Layout::kCueAmplitude;
    tok[Layout::kClassChannel0 + cls] = attenuation * Layout::kClassAmplitude;
    annotation.push_back(grid.flatten(position, t));
  }
}

}  // namespace

const char* task_kind_name(TaskKind kind) {
  return kind == TaskKind::kSpatial ? "spatial" : "temporal-order";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "spatial") return TaskKind::kSpatial;
  if (name == "temporal-order") return TaskKind::kTemporalOrder;
  fail(ErrorCode::kConfig, "tasks.kind must be 'spatial' or 'temporal-order', got '" + name + "'");
}

PlantedTask generate_planted_task(const TaskSetParams& params, std::size_t index) {
  if (params.dim < Layout::kMinDim) {
    fail(ErrorCode::kConfig, "planted tasks need token dim >= " + std::to_string(Layout::kMinDim));
  }
  if (params.kind == TaskKind::kTemporalOrder && params.frames < 4) {
    fail(ErrorCode::kConfig, "temporal-order tasks need at least 4 frames");
  }
  if (params.kind == TaskKind::kSpatial && params.frames < 2) {
    fail(ErrorCode::kConfig, "spatial tasks need at least 2 frames");
  }
  if (!(params.decoy >= 0.0 && params.decoy <= 1.0)) {
    fail(ErrorCode::kConfig, "tasks.decoy must lie in [0, 1]");
  }
  if (params.kind == TaskKind::kTemporalOrder && params.decoy > 0.0 && params.positions < 3) {
    fail(ErrorCode::kConfig, "temporal-order tasks with a decoy need at least 3 positions");
  }
  if (!(params.attenuation >= 0.0 && params.attenuation <= 1.0)) {
    fail(ErrorCode::kConfig, "tasks.attenuation must lie in [0, 1]");
  }
  const std::uint64_t task_seed = mix_seed(params.seed, index);
  Rng rng(mix_seed(task_seed, 1));
  PlantedTask task;
  task.kind = params.kind;
  task.attenuation = params.attenuation;
  task.grid = generate_grid(task_seed, params.positions, params.frames, params.dim);

  if (params.kind == TaskKind::kSpatial) {
    const std::size_t cue = rng.below(Layout::kCues);
    const std::size_t cls = rng.below(Layout::kClasses);
    const std::size_t position = rng.below(params.positions);
    const std::size_t max_span = std::min<std::size_t>(4, params.frames);
    const std::size_t span = 2 + rng.below(max_span - 1);
    const std::size_t start = rng.below(params.frames - span + 1);
    plant(task.grid, position, start, span, Layout::kCueChannel0 + cue, cls, params.attenuation,
          task.annotation);
    task.prompt = {Layout::kBos, Layout::spatial_question(cue)};
    task.gold = Layout::class_token(cls);
    task.distractor = Layout::kNone;
  } else {
    const std::size_t first_cls = rng.below(Layout::kClasses);
    std::size_t second_cls = rng.below(Layout::kClasses - 1);
    if (second_cls >= first_cls) ++second_cls;
    const std::size_t span = 2;
    const std::size_t pos_a = rng.below(params.positions);
    std::size_t pos_b = pos_a;
    if (rng.below(2) == 1 && params.positions > 1) {
      pos_b = rng.below(params.positions - 1);
      if (pos_b >= pos_a) ++pos_b;
    }
    // Two non-overlapping spans with start_a < start_b.
    const std::size_t start_a = rng.below(params.frames - 2 * span + 1);
    const std::size_t start_b = start_a + span + rng.below(params.frames - start_a - 2 * span + 1);
    plant(task.grid, pos_a, start_a, span, Layout::kEventChannel, first_cls, params.attenuation,
          task.annotation);
    plant(task.grid, pos_b, start_b, span, Layout::kEventChannel, second_cls, params.attenuation,
          task.annotation);
    if (params.decoy > 0.0) {
      // Same frames, classes swapped, marked as context rather than event.
      std::size_t pos_c = rng.below(params.positions);
      while (pos_c == pos_a || pos_c == pos_b) pos_c = (pos_c + 1) % params.positions;
      const std::pair<std::size_t, std::size_t> parts[] = {{start_a, second_cls},
                                                           {start_b, first_cls}};
      for (const auto& [start, cls] : parts) {
        for (std::size_t t = start; t < start + span; ++t) {
          auto tok = task.grid.token(pos_c, t);
          for (std::size_t c = 0; c <= Layout::kCues; ++c) tok[Layout::kCueChannel0 + c] = 0.0;
          tok[Layout::kContextChannel] = Layout::kCueAmplitude;
          tok[Layout::kClassChannel0 + cls] = params.decoy * Layout::kClassAmplitude;
        }
      }
    }
    // The question mentions the later event, which is what the text prior favours.
    task.prompt = {Layout::kBos, Layout::temporal_question(second_cls)};
    task.gold = Layout::class_token(first_cls);
    task.distractor = Layout::class_token(second_cls);
  }
  std::sort(task.annotation.begin(), task.annotation.end());
  return task;
}

std::vector<PlantedTask> generate_planted_tasks(const TaskSetParams& params) {
  if (params.count < 1) fail(ErrorCode::kConfig, "tasks.count must be >= 1");
  std::vector<PlantedTask> tasks;
  tasks.reserve(params.count);
  for (std::size_t i = 0; i < params.count; ++i) tasks.push_back(generate_planted_task(params, i));
  return tasks;
}

std::string task_set_to_json(const TaskSet& set, const std::string& grid_file) {
  json doc;
  doc["version"] = kTaskFileVersion;
  doc["seed"] = set.params.seed;
  doc["kind"] = task_kind_name(set.params.kind);
  doc["P"] = set.params.positions;
  doc["T"] = set.params.frames;
  doc["d_vis"] = set.params.dim;
  doc["attenuation"] = set.params.attenuation;
  doc["decoy"] = set.params.decoy;
  doc["grids"] = grid_file;
  json tasks = json::array();
  for (std::size_t i = 0; i < set.tasks.size(); ++i) {
    const auto& t = set.tasks[i];
    tasks.push_back({{"prompt", t.prompt},
                     {"gold", t.gold},
                     {"distractor", t.distractor},
                     {"annotation", t.annotation},
                     {"grid_ref", i}});
  }
  doc["tasks"] = std::move(tasks);
  return doc.dump(2) + "\n";
}

void save_task_set(const TaskSet& set, const std::filesystem::path& json_path) {
  std::filesystem::path grid_path = json_path;
  grid_path.replace_extension(".grids.bin");
  std::vector<VisualTokenGrid> grids;
  grids.reserve(set.tasks.size());
  for (const auto& t : set.tasks) grids.push_back(t.grid);
  save_grids(grids, grid_path);
  write_file_atomic(json_path, task_set_to_json(set, grid_path.filename().string()));
}

TaskSet load_task_set(const std::filesystem::path& json_path) {
  const auto bytes = read_file(json_path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, "task file '" + json_path.string() + "' is not valid JSON: " + e.what());
  }
  TaskSet set;
  try {
    if (doc.at("version").get<int>() != kTaskFileVersion) {
      fail(ErrorCode::kVersion, "unsupported task file version");
    }
    set.params.seed = doc.at("seed").get<std::uint64_t>();
    set.params.kind = parse_task_kind(doc.at("kind").get<std::string>());
    set.params.positions = doc.at("P").get<std::size_t>();
    set.params.frames = doc.at("T").get<std::size_t>();
    set.params.dim = doc.value("d_vis", std::size_t{64});
    set.params.attenuation = doc.at("attenuation").get<double>();
    set.params.decoy = doc.at("decoy").get<double>();
    const auto grid_path = json_path.parent_path() / doc.at("grids").get<std::string>();
    const auto grids = load_grids(grid_path);
    for (const auto& jt : doc.at("tasks")) {
      PlantedTask t;
      t.kind = set.params.kind;
      t.attenuation = set.params.attenuation;
      t.prompt = jt.at("prompt").get<std::vector<TokenId>>();
      t.gold = jt.at("gold").get<TokenId>();
      t.distractor = jt.at("distractor").get<TokenId>();
      t.annotation = jt.at("annotation").get<std::vector<std::size_t>>();
      const auto ref = jt.at("grid_ref").get<std::size_t>();
      if (ref >= grids.size()) fail(ErrorCode::kShape, "grid_ref out of range in task file");
      t.grid = grids[ref];
      for (std::size_t idx : t.annotation) {
        if (idx >= t.grid.size()) fail(ErrorCode::kShape, "annotation index outside grid");
      }
      set.tasks.push_back(std::move(t));
    }
    set.params.count = set.tasks.size();
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, "malformed task file '" + json_path.string() + "': " + e.what());
  }
  return set;
}

}  // namespace stear
