#include "stear/config.hpp"

#include <set>

#include "json.hpp"

#include "stear/error.hpp"
#include "stear/random.hpp"
#include "stear/weights_io.hpp"

namespace stear {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads keys of one JSON object and rejects whatever was not asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorCode::kConfig, where() + " must be a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    allowed_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrorCode::kConfig, field(key) + " has the wrong type");
    }
  }

  template <typename T>
  void read_optional(const char* key, std::optional<T>& out) {
    allowed_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T value{};
    read(key, value);
    out = value;
  }

  // Non-negative integer field stored as size_t.
  void read_count(const char* key, std::size_t& out) {
    allowed_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(ErrorCode::kConfig, field(key) + " must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  }

  bool has(const char* key) {
    allowed_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const json& sub(const char* key) {
    allowed_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!allowed_.count(it.key())) fail(ErrorCode::kConfig, "unknown key '" + field(it.key()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> allowed_;
};

PlantedSpec parse_planted(const json& j) {
  PlantedSpec p;
  Section s(j, "model.planted");
  s.read_count("evidence_layer", p.evidence_layer);
  s.read("prior_strength", p.prior_strength);
  s.read("evidence_gain", p.evidence_gain);
  s.read("attention_sharpness", p.attention_sharpness);
  s.read("slot_decay", p.slot_decay);
  s.read_count("context_layer", p.context_layer);
  s.read("context_sharpness", p.context_sharpness);
  s.read("late_prior_growth", p.late_prior_growth);
  s.read("noise", p.noise);
  s.read("seed", p.seed);
  s.finish();
  return p;
}

ModelSection parse_model(const json& j) {
  ModelSection m;
  Section s(j, "model");
  std::string kind = "random";
  s.read("kind", kind);
  s.read_count("num_layers", m.config.num_layers);
  s.read_count("model_dim", m.config.model_dim);
  s.read_count("num_heads", m.config.num_heads);
  s.read_count("vocab_size", m.config.vocab_size);
  s.read_count("ffn_dim", m.config.ffn_dim);
  s.read_count("max_text_len", m.config.max_text_len);
  s.read_count("max_frames", m.config.max_frames);
  s.read_count("visual_dim", m.config.visual_dim);
  s.read("eps", m.config.eps);
  s.read_optional("seed", m.seed);
  if (kind == "planted") {
    m.planted = s.has("planted") ? parse_planted(s.sub("planted")) : PlantedSpec{};
  } else if (kind == "random") {
    if (s.has("planted")) fail(ErrorCode::kConfig, "model.planted given but model.kind is 'random'");
  } else {
    fail(ErrorCode::kConfig, "model.kind must be 'random' or 'planted', got '" + kind + "'");
  }
  s.finish();
  return m;
}

TasksSection parse_tasks(const json& j) {
  TasksSection t;
  Section s(j, "tasks");
  std::string kind = task_kind_name(t.params.kind);
  s.read("kind", kind);
  t.params.kind = parse_task_kind(kind);
  s.read_count("count", t.params.count);
  s.read_count("positions", t.params.positions);
  s.read_count("frames", t.params.frames);
  s.read_count("dim", t.params.dim);
  s.read("attenuation", t.params.attenuation);
  s.read("decoy", t.params.decoy);
  s.read_optional("seed", t.seed);
  std::optional<std::string> path;
  s.read_optional("path", path);
  if (path) t.path = *path;
  s.finish();
  return t;
}

LayerRange parse_range(Section& s, const char* key, LayerRange fallback) {
  std::optional<std::vector<std::size_t>> v;
  s.read_optional(key, v);
  if (!v) return fallback;
  if (v->size() != 2) fail(ErrorCode::kConfig, s.field(key) + " must be [first, last]");
  return {(*v)[0], (*v)[1]};
}

InterventionConfig parse_intervention(const json& j, const ModelConfig& model) {
  InterventionConfig c = InterventionConfig::defaults_for(model);
  Section s(j, "intervention");
  s.read("tau", c.tau);
  c.middle_window = parse_range(s, "middle_window", c.middle_window);
  s.read_count("neighborhood_radius", c.neighborhood_radius);
  s.read("r", c.selection_ratio);
  s.read("lambda", c.lambda);
  s.read("gamma", c.gamma);
  s.read("alpha", c.alpha);
  std::string text = perturb_mode_name(c.perturb_mode);
  s.read("perturb_mode", text);
  c.perturb_mode = parse_perturb_mode(text);
  text = cache_policy_name(c.cache_policy);
  s.read("cache_policy", text);
  c.cache_policy = parse_cache_policy(text);
  text = trigger_mode_name(c.trigger);
  s.read("trigger", text);
  c.trigger = parse_trigger_mode(text);
  s.read("reinject", c.reinject);
  s.read("counterfactual", c.counterfactual);

  text = "kes";
  s.read("selection", text);
  if (text == "kes") {
    c.selection = SelectionMode::kKes;
  } else if (text == "random") {
    c.selection = SelectionMode::kRandom;
  } else if (text == "frame") {
    c.selection = SelectionMode::kFrameLevel;
  } else {
    fail(ErrorCode::kConfig, "intervention.selection must be kes|random|frame, got '" + text + "'");
  }
  text = "patch";
  s.read("perturb_scope", text);
  if (text == "patch") {
    c.perturb_scope = PerturbScope::kPatch;
  } else if (text == "frame") {
    c.perturb_scope = PerturbScope::kFrame;
  } else if (text == "whole") {
    c.perturb_scope = PerturbScope::kWholeVideo;
  } else {
    fail(ErrorCode::kConfig,
         "intervention.perturb_scope must be patch|frame|whole, got '" + text + "'");
  }
  s.read("separate_selectors", c.separate_negative_selector);
  if (s.has("reinject_layers")) c.reinject_layers = parse_range(s, "reinject_layers", {});
  text = "reinjected";
  s.read("negative_entry", text);
  if (text == "reinjected") {
    c.negative_entry = NegativeEntry::kReinjected;
  } else if (text == "baseline") {
    c.negative_entry = NegativeEntry::kBaseline;
  } else {
    fail(ErrorCode::kConfig,
         "intervention.negative_entry must be reinjected|baseline, got '" + text + "'");
  }
  text = "frozen";
  s.read("retrieval", text);
  if (text == "frozen") {
    c.retrieval = RetrievalMaps::kFrozenCrossAttention;
  } else if (text == "identity") {
    c.retrieval = RetrievalMaps::kIdentity;
  } else {
    fail(ErrorCode::kConfig, "intervention.retrieval must be frozen|identity, got '" + text + "'");
  }
  s.read("shared_permutation", c.shared_permutation);
  s.finish();
  return c;
}

OutputSection parse_output(const json& j) {
  OutputSection o;
  Section s(j, "output");
  std::string dir = o.dir.string();
  s.read("dir", dir);
  o.dir = dir;
  s.read_count("max_new", o.max_new);
  s.finish();
  return o;
}

}  // namespace

std::uint64_t RunConfig::model_seed() const { return model.seed.value_or(mix_seed(seed, 1)); }

TaskSetParams RunConfig::task_params() const {
  TaskSetParams p = tasks.params;
  p.seed = tasks.seed.value_or(mix_seed(seed, 2));
  return p;
}

void RunConfig::validate() const {
  model.config.validate();
  intervention.validate(model.config);
  if (tasks.params.count < 1) fail(ErrorCode::kConfig, "tasks.count must be >= 1");
  if (tasks.params.frames > model.config.max_frames) {
    fail(ErrorCode::kConfig, "tasks.frames exceeds model.max_frames");
  }
  if (tasks.params.dim != model.config.visual_dim) {
    fail(ErrorCode::kConfig, "tasks.dim must equal model.visual_dim");
  }
  if (!(tasks.params.attenuation >= 0.0 && tasks.params.attenuation <= 1.0)) {
    fail(ErrorCode::kConfig, "tasks.attenuation must lie in [0, 1]");
  }
  if (!(tasks.params.decoy >= 0.0 && tasks.params.decoy <= 1.0)) {
    fail(ErrorCode::kConfig, "tasks.decoy must lie in [0, 1]");
  }
  if (output.max_new < 1) fail(ErrorCode::kConfig, "output.max_new must be >= 1");
  if (model.planted) {
    const std::size_t L = model.config.num_layers;
    if (model.planted->evidence_layer < 1 || model.planted->evidence_layer > L) {
      fail(ErrorCode::kConfig, "model.planted.evidence_layer " +
                                   std::to_string(model.planted->evidence_layer) +
                                   " outside [1, " + std::to_string(L) + "]");
    }
  }
}

RunConfig parse_run_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig rc;
  Section s(doc, "");
  s.read("seed", rc.seed);
  if (s.has("model")) rc.model = parse_model(s.sub("model"));
  if (s.has("tasks")) rc.tasks = parse_tasks(s.sub("tasks"));
  rc.intervention = s.has("intervention") ? parse_intervention(s.sub("intervention"), rc.model.config)
                                          : InterventionConfig::defaults_for(rc.model.config);
  if (s.has("output")) rc.output = parse_output(s.sub("output"));
  s.finish();
  rc.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()));
}

std::string run_config_to_json(const RunConfig& rc) {
  ordered_json j;
  j["seed"] = rc.seed;
  ordered_json m;
  m["kind"] = rc.model.planted ? "planted" : "random";
  m["num_layers"] = rc.model.config.num_layers;
  m["model_dim"] = rc.model.config.model_dim;
  m["num_heads"] = rc.model.config.num_heads;
  m["vocab_size"] = rc.model.config.vocab_size;
  m["ffn_dim"] = rc.model.config.ffn_dim;
  m["max_text_len"] = rc.model.config.max_text_len;
  m["max_frames"] = rc.model.config.max_frames;
  m["visual_dim"] = rc.model.config.visual_dim;
  m["eps"] = rc.model.config.eps;
  m["seed"] = rc.model_seed();
  if (rc.model.planted) {
    const PlantedSpec& p = *rc.model.planted;
    m["planted"] = {{"evidence_layer", p.evidence_layer},
                    {"prior_strength", p.prior_strength},
                    {"evidence_gain", p.evidence_gain},
                    {"attention_sharpness", p.attention_sharpness},
                    {"slot_decay", p.slot_decay},
                    {"context_layer", p.context_layer},
                    {"context_sharpness", p.context_sharpness},
                    {"late_prior_growth", p.late_prior_growth},
                    {"noise", p.noise},
                    {"seed", p.seed}};
  }
  j["model"] = std::move(m);
  const TaskSetParams tp = rc.task_params();
  ordered_json t;
  t["kind"] = task_kind_name(tp.kind);
  t["count"] = tp.count;
  t["positions"] = tp.positions;
  t["frames"] = tp.frames;
  t["dim"] = tp.dim;
  t["attenuation"] = tp.attenuation;
  t["decoy"] = tp.decoy;
  t["seed"] = tp.seed;
  if (rc.tasks.path) t["path"] = rc.tasks.path->string();
  j["tasks"] = std::move(t);
  const InterventionConfig& c = rc.intervention;
  ordered_json i;
  i["tau"] = c.tau;
  i["middle_window"] = {c.middle_window.first, c.middle_window.last};
  i["neighborhood_radius"] = c.neighborhood_radius;
  i["r"] = c.selection_ratio;
  i["lambda"] = c.lambda;
  i["gamma"] = c.gamma;
  i["alpha"] = c.alpha;
  i["perturb_mode"] = perturb_mode_name(c.perturb_mode);
  i["cache_policy"] = cache_policy_name(c.cache_policy);
  i["trigger"] = trigger_mode_name(c.trigger);
  i["reinject"] = c.reinject;
  i["counterfactual"] = c.counterfactual;
  i["selection"] = c.selection == SelectionMode::kKes      ? "kes"
                   : c.selection == SelectionMode::kRandom ? "random"
                                                           : "frame";
  i["perturb_scope"] = c.perturb_scope == PerturbScope::kPatch   ? "patch"
                       : c.perturb_scope == PerturbScope::kFrame ? "frame"
                                                                 : "whole";
  i["separate_selectors"] = c.separate_negative_selector;
  if (c.reinject_layers) i["reinject_layers"] = {c.reinject_layers->first, c.reinject_layers->last};
  i["negative_entry"] = c.negative_entry == NegativeEntry::kReinjected ? "reinjected" : "baseline";
  i["retrieval"] = c.retrieval == RetrievalMaps::kFrozenCrossAttention ? "frozen" : "identity";
  i["shared_permutation"] = c.shared_permutation;
  j["intervention"] = std::move(i);
  j["output"] = {{"dir", rc.output.dir.string()}, {"max_new", rc.output.max_new}};
  return j.dump(2) + "\n";
}

}  // namespace stear
