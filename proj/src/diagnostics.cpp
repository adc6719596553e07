#include "stear/diagnostics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "stear/error.hpp"
#include "stear/random.hpp"

namespace stear {

using nlohmann::json;
using nlohmann::ordered_json;

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::string fmt(double x, int precision) {
  if (x == 0.0) x = 0.0;  // no "-0.000000"
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << x;
  return os.str();
}

double grounding_score(std::span<const double> attention, std::span<const std::size_t> evidence) {
  Vec picked;
  picked.reserve(evidence.size());
  for (std::size_t i : evidence) {
    if (i >= attention.size()) fail(ErrorCode::kRange, "evidence index outside attention row");
    picked.push_back(attention[i]);
  }
  return stable_sum(picked);
}

LayerTrace answer_trace(const DecoderWeights& weights, const VisualTokenGrid& grid,
                        std::span<const TokenId> prompt) {
  if (prompt.empty()) fail(ErrorCode::kRange, "prompt must contain at least one token");
  const VisualMemory visual = encode_visual(weights, grid);
  KVCache cache(weights.config.num_layers);
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) forward_step(weights, cache, prompt[i], &visual);
  return forward_capture(weights, cache, prompt.back(), &visual);
}

namespace {

void require_tasks(std::span<const PlantedTask> tasks) {
  if (tasks.empty()) fail(ErrorCode::kRange, "diagnostics need a non-empty task set");
}

// Mean over tasks of per-task per-layer values, summed in task order.
Vec mean_rows(const std::vector<Vec>& rows, std::size_t L) {
  Vec out(L, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    Vec col;
    col.reserve(rows.size());
    for (const Vec& r : rows) col.push_back(r[l]);
    out[l] = stable_sum(col) / static_cast<double>(rows.size());
  }
  return out;
}

}  // namespace

Vec grounding_profile(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                      std::size_t threads) {
  require_tasks(tasks);
  const std::size_t L = weights.config.num_layers;
  std::vector<Vec> rows(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t i) {
    const PlantedTask& t = tasks[i];
    const LayerTrace tr = answer_trace(weights, t.grid, t.prompt);
    Vec g(L);
    for (std::size_t l = 1; l <= L; ++l) g[l - 1] = grounding_score(tr.cross_attention[l], t.annotation);
    rows[i] = std::move(g);
  });
  return mean_rows(rows, L);
}

Vec dominance_profile(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                      std::size_t threads) {
  require_tasks(tasks);
  const std::size_t L = weights.config.num_layers;
  std::vector<Vec> rows(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t i) {
    const PlantedTask& t = tasks[i];
    // Two independent sessions: the masked pass never sees the unmasked cache.
    const LayerTrace seen = answer_trace(weights, t.grid, t.prompt);
    const LayerTrace blind = answer_trace(weights, mask_visual(t.grid), t.prompt);
    Vec dv(L);
    for (std::size_t l = 1; l <= L; ++l) {
      dv[l - 1] = cosine(per_layer_readout(seen, weights, l), per_layer_readout(blind, weights, l));
    }
    rows[i] = std::move(dv);
  });
  return mean_rows(rows, L);
}

LayerProfile layer_profile(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                           std::size_t threads) {
  LayerProfile p;
  p.grounding = grounding_profile(weights, tasks, threads);
  p.dominance = dominance_profile(weights, tasks, threads);
  p.samples = tasks.size();
  return p;
}

EvalReport evaluate(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                    const InterventionConfig& icfg, const EvalOptions& options,
                    const std::string& label) {
  require_tasks(tasks);
  icfg.validate(weights.config);
  std::vector<DecodeResult> results(tasks.size());
  parallel_for(tasks.size(), options.threads, [&](std::size_t i) {
    DecodeOptions d;
    d.max_new = std::max<std::size_t>(1, options.max_new);
    d.seed = mix_seed(options.seed, i);
    results[i] = decode_sequence(weights, icfg, tasks[i].grid, tasks[i].prompt, d);
  });

  EvalReport r;
  r.kind = task_kind_name(tasks.front().kind);
  r.config = label;
  r.tasks = tasks.size();
  r.encoder_invocations_min = results.front().encoder_invocations;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const DecodeResult& res = results[i];
    const TokenId answer = res.tokens.front();
    r.answers.push_back(answer);
    if (answer == tasks[i].gold) {
      ++r.correct;
    } else if (answer == tasks[i].distractor) {
      ++r.distractor;
    } else {
      ++r.other;
    }
    for (const StepOutcome& s : res.steps) {
      ++r.steps;
      if (s.intervened) ++r.triggered_steps;
      r.extra_layer_forwards += s.extra_layer_forwards;
    }
    r.encoder_invocations_min = std::min(r.encoder_invocations_min, res.encoder_invocations);
    r.encoder_invocations_max = std::max(r.encoder_invocations_max, res.encoder_invocations);
  }
  const double n = static_cast<double>(r.tasks);
  r.accuracy = static_cast<double>(r.correct) / n;
  r.distractor_rate = static_cast<double>(r.distractor) / n;
  r.other_rate = static_cast<double>(r.other) / n;
  r.trigger_rate = static_cast<double>(r.triggered_steps) / static_cast<double>(r.steps);
  r.mean_extra_forwards =
      static_cast<double>(r.extra_layer_forwards) / static_cast<double>(r.steps);
  return r;
}

DepthSweep depth_sweep(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                       const InterventionConfig& icfg, const EvalOptions& options) {
  DepthSweep out;
  out.thirds = depth_thirds(weights.config.num_layers);
  out.baseline =
      evaluate(weights, tasks, InterventionConfig::baseline_for(weights.config), options).accuracy;
  auto run = [&](LayerRange range) {
    InterventionConfig c = icfg;
    c.counterfactual = false;
    c.reinject = true;
    c.reinject_layers = range;
    return evaluate(weights, tasks, c, options).accuracy;
  };
  out.early = run(out.thirds.early);
  out.middle = run(out.thirds.middle);
  out.late = run(out.thirds.late);
  return out;
}

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names = {
      "trigger-off-apply-always",
      "no-reinject",
      "no-counterfactual",
      "random-patch",
      "frame-level-selection",
      "separate-selectors",
      "early-reinjection",
      "middle-reinjection",
      "late-reinjection",
      "shuffle-only",
      "homogenize-only",
      "frame-level-perturbation",
      "whole-video-perturbation",
  };
  return names;
}

InterventionConfig apply_variant(const InterventionConfig& base, const std::string& name,
                                 const ModelConfig& model) {
  InterventionConfig c = base;
  const DepthThirds thirds = depth_thirds(model.num_layers);
  if (name == "full") {
  } else if (name == "baseline") {
    c.trigger = TriggerMode::kNever;
    c.reinject = false;
    c.counterfactual = false;
  } else if (name == "trigger-off-apply-always") {
    c.trigger = TriggerMode::kAlways;
  } else if (name == "no-reinject") {
    c.reinject = false;
  } else if (name == "no-counterfactual") {
    c.counterfactual = false;
  } else if (name == "random-patch") {
    c.selection = SelectionMode::kRandom;
  } else if (name == "frame-level-selection") {
    c.selection = SelectionMode::kFrameLevel;
  } else if (name == "separate-selectors") {
    c.separate_negative_selector = true;
  } else if (name == "early-reinjection") {
    c.reinject_layers = thirds.early;
  } else if (name == "middle-reinjection") {
    c.reinject_layers = thirds.middle;
  } else if (name == "late-reinjection") {
    c.reinject_layers = thirds.late;
  } else if (name == "shuffle-only") {
    c.perturb_mode = PerturbMode::kShuffle;
  } else if (name == "homogenize-only") {
    c.perturb_mode = PerturbMode::kHomogenize;
  } else if (name == "frame-level-perturbation") {
    c.perturb_scope = PerturbScope::kFrame;
  } else if (name == "whole-video-perturbation") {
    c.perturb_scope = PerturbScope::kWholeVideo;
  } else {
    fail(ErrorCode::kConfig, "unknown ablation variant '" + name + "'");
  }
  return c;
}

const EvalReport& AblationMatrix::at(const std::string& variant) const {
  if (variant == "full") return full;
  if (variant == "baseline") return baseline;
  for (const auto& row : rows) {
    if (row.variant == variant) return row.report;
  }
  fail(ErrorCode::kConfig, "unknown ablation variant '" + variant + "'");
}

AblationMatrix ablation_matrix(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                               const InterventionConfig& base, const EvalOptions& options) {
  AblationMatrix m;
  m.full = evaluate(weights, tasks, base, options, "full");
  m.baseline =
      evaluate(weights, tasks, apply_variant(base, "baseline", weights.config), options, "baseline");
  for (const auto& name : ablation_variants()) {
    m.rows.push_back(
        {name, evaluate(weights, tasks, apply_variant(base, name, weights.config), options, name)});
  }
  return m;
}

std::string AblationMatrix::to_csv() const {
  std::ostringstream os;
  os << "variant,accuracy,distractor_rate,other_rate,trigger_rate,mean_extra_forwards,"
        "delta_vs_full,delta_vs_baseline\n";
  for (const auto& row : rows) {
    const EvalReport& r = row.report;
    os << row.variant << ',' << fmt(r.accuracy) << ',' << fmt(r.distractor_rate) << ','
       << fmt(r.other_rate) << ',' << fmt(r.trigger_rate) << ',' << fmt(r.mean_extra_forwards)
       << ',' << fmt(r.accuracy - full.accuracy) << ',' << fmt(r.accuracy - baseline.accuracy)
       << '\n';
  }
  return os.str();
}

namespace {

ordered_json report_to_json(const EvalReport& r) {
  ordered_json j;
  j["kind"] = r.kind;
  j["config"] = r.config;
  j["tasks"] = r.tasks;
  j["correct"] = r.correct;
  j["distractor"] = r.distractor;
  j["other"] = r.other;
  j["accuracy"] = r.accuracy;
  j["distractor_rate"] = r.distractor_rate;
  j["other_rate"] = r.other_rate;
  j["steps"] = r.steps;
  j["triggered_steps"] = r.triggered_steps;
  j["trigger_rate"] = r.trigger_rate;
  j["extra_layer_forwards"] = r.extra_layer_forwards;
  j["mean_extra_forwards"] = r.mean_extra_forwards;
  j["encoder_invocations_min"] = r.encoder_invocations_min;
  j["encoder_invocations_max"] = r.encoder_invocations_max;
  return j;
}

}  // namespace

std::string AblationMatrix::to_json() const {
  ordered_json j;
  j["full"] = report_to_json(full);
  j["baseline"] = report_to_json(baseline);
  ordered_json variants = ordered_json::array();
  for (const auto& row : rows) {
    ordered_json v = report_to_json(row.report);
    v["variant"] = row.variant;
    v["delta_vs_full"] = row.report.accuracy - full.accuracy;
    v["delta_vs_baseline"] = row.report.accuracy - baseline.accuracy;
    variants.push_back(std::move(v));
  }
  j["variants"] = std::move(variants);
  return j.dump(2) + "\n";
}

std::string AblationMatrix::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(28) << "variant" << std::right << std::setw(10) << "acc"
     << std::setw(10) << "distr" << std::setw(10) << "other" << std::setw(10) << "trig"
     << std::setw(10) << "extra" << std::setw(10) << "d_full" << std::setw(10) << "d_base"
     << '\n';
  auto line = [&](const std::string& name, const EvalReport& r) {
    os << std::left << std::setw(28) << name << std::right << std::setw(10) << fmt(r.accuracy, 4)
       << std::setw(10) << fmt(r.distractor_rate, 4) << std::setw(10) << fmt(r.other_rate, 4)
       << std::setw(10) << fmt(r.trigger_rate, 4) << std::setw(10)
       << fmt(r.mean_extra_forwards, 3) << std::setw(10) << fmt(r.accuracy - full.accuracy, 4)
       << std::setw(10) << fmt(r.accuracy - baseline.accuracy, 4) << '\n';
  };
  line("(full)", full);
  line("(baseline)", baseline);
  for (const auto& row : rows) line(row.variant, row.report);
  return os.str();
}

StepRecord step_record(const StepOutcome& outcome, const InterventionConfig& icfg,
                       const std::string& task, std::size_t step) {
  StepRecord r;
  r.task = task;
  r.step = step;
  r.token = outcome.token;
  r.triggered = outcome.intervened;
  r.u = outcome.risk.u;
  r.l_star = outcome.risk.trigger_layer;
  if (outcome.selection) r.indices = outcome.selection->indices;
  r.alpha = icfg.alpha;
  r.lambda = icfg.lambda;
  r.logit_gap = logit_gap(outcome.logits);
  r.extra_layer_forwards = outcome.extra_layer_forwards;
  r.encoder_invocations = outcome.encoder_invocations;
  return r;
}

std::string step_record_json(const StepRecord& r) {
  ordered_json j;
  j["task"] = r.task;
  j["step"] = r.step;
  j["token"] = r.token;
  j["triggered"] = r.triggered;
  j["u_t"] = r.u;
  j["l_star"] = r.l_star;
  j["I_t"] = r.indices;
  j["alpha"] = r.alpha;
  j["lambda"] = r.lambda;
  j["logit_gap"] = r.logit_gap;
  j["extra_layer_forwards"] = r.extra_layer_forwards;
  j["encoder_invocations"] = r.encoder_invocations;
  return j.dump();
}

StepRecord parse_step_record(const std::string& line) {
  StepRecord r;
  try {
    const json j = json::parse(line);
    r.task = j.at("task").get<std::string>();
    r.step = j.at("step").get<std::size_t>();
    r.token = j.at("token").get<TokenId>();
    r.triggered = j.at("triggered").get<bool>();
    r.u = j.at("u_t").get<double>();
    r.l_star = j.at("l_star").get<std::size_t>();
    r.indices = j.at("I_t").get<std::vector<std::size_t>>();
    r.alpha = j.at("alpha").get<double>();
    r.lambda = j.at("lambda").get<double>();
    r.logit_gap = j.at("logit_gap").get<double>();
    r.extra_layer_forwards = j.at("extra_layer_forwards").get<std::size_t>();
    r.encoder_invocations = j.at("encoder_invocations").get<std::size_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("malformed step record: ") + e.what());
  }
  return r;
}

CostReport cost_report(std::span<const StepRecord> records, std::size_t num_layers) {
  CostReport c;
  if (records.empty()) fail(ErrorCode::kRange, "cost report needs at least one step record");
  if (num_layers == 0) fail(ErrorCode::kConfig, "cost report needs num_layers >= 1");
  std::map<std::string, std::size_t> encoder_by_task;
  for (const StepRecord& r : records) {
    ++c.steps;
    c.total_extra += r.extra_layer_forwards;
    if (r.triggered) {
      ++c.triggered_steps;
      c.max_extra_per_triggered = std::max(c.max_extra_per_triggered, r.extra_layer_forwards);
    }
    encoder_by_task[r.task] = r.encoder_invocations;
  }
  c.decodes = encoder_by_task.size();
  c.encoder_invocations_min = encoder_by_task.begin()->second;
  for (const auto& [task, n] : encoder_by_task) {
    c.encoder_invocations_min = std::min(c.encoder_invocations_min, n);
    c.encoder_invocations_max = std::max(c.encoder_invocations_max, n);
  }
  c.single_encode = c.encoder_invocations_min == 1 && c.encoder_invocations_max == 1;
  const double L = static_cast<double>(num_layers);
  if (c.triggered_steps > 0) {
    // Untriggered steps never add forwards, so all extra work is on triggered steps.
    c.mean_extra_per_triggered =
        static_cast<double>(c.total_extra) / static_cast<double>(c.triggered_steps);
    c.triggered_step_ratio = (L + c.mean_extra_per_triggered) / L;
  }
  const double base = L * static_cast<double>(c.steps);
  c.compute_ratio = (base + static_cast<double>(c.total_extra)) / base;
  return c;
}

Calibration calibrate_attenuation(const DecoderWeights& weights, const TaskSetParams& params,
                                  std::span<const double> candidates, double lo, double hi,
                                  const EvalOptions& options) {
  Calibration cal;
  const InterventionConfig base = InterventionConfig::baseline_for(weights.config);
  const double mid = 0.5 * (lo + hi);
  for (double a : candidates) {
    TaskSetParams p = params;
    p.attenuation = a;
    const auto tasks = generate_planted_tasks(p);
    const double acc = evaluate(weights, tasks, base, options).accuracy;
    cal.sweep.push_back({a, acc});
    if (acc >= lo && acc <= hi &&
        (!cal.found || std::abs(acc - mid) < std::abs(cal.metric - mid))) {
      cal.found = true;
      cal.value = a;
      cal.metric = acc;
    }
  }
  return cal;
}

Calibration calibrate_prior(const PlantedSpec& spec, const ModelConfig& model,
                            const TaskSetParams& params, std::span<const double> candidates,
                            double min_rate, const EvalOptions& options) {
  Calibration cal;
  const auto tasks = generate_planted_tasks(params);
  const InterventionConfig base = InterventionConfig::baseline_for(model);
  for (double b : candidates) {
    PlantedSpec s = spec;
    s.prior_strength = b;
    const DecoderWeights w = construct_planted_weights(s, model);
    const double rate = evaluate(w, tasks, base, options).distractor_rate;
    cal.sweep.push_back({b, rate});
    if (rate >= min_rate) {
      cal.found = true;
      cal.value = b;
      cal.metric = rate;
      break;
    }
  }
  return cal;
}

std::string eval_report_json(const EvalReport& report) {
  return report_to_json(report).dump(2) + "\n";
}

std::string eval_report_text(const EvalReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "kind" << r.kind << '\n'
     << std::setw(24) << "config" << r.config << '\n'
     << std::setw(24) << "tasks" << r.tasks << '\n'
     << std::setw(24) << "accuracy" << fmt(r.accuracy, 4) << '\n'
     << std::setw(24) << "distractor_rate" << fmt(r.distractor_rate, 4) << '\n'
     << std::setw(24) << "other_rate" << fmt(r.other_rate, 4) << '\n'
     << std::setw(24) << "trigger_rate" << fmt(r.trigger_rate, 4) << '\n'
     << std::setw(24) << "mean_extra_forwards" << fmt(r.mean_extra_forwards, 3) << '\n'
     << std::setw(24) << "encoder_invocations" << r.encoder_invocations_min << ".."
     << r.encoder_invocations_max << '\n';
  return os.str();
}

std::string layer_profile_csv(const LayerProfile& p) {
  std::ostringstream os;
  os << "layer,grounding,dominance\n";
  for (std::size_t l = 0; l < p.grounding.size(); ++l) {
    os << l + 1 << ',' << fmt(p.grounding[l], 9) << ',' << fmt(p.dominance[l], 9) << '\n';
  }
  return os.str();
}

std::string layer_profile_text(const LayerProfile& p) {
  std::ostringstream os;
  os << std::setw(6) << "layer" << std::setw(14) << "G(l)" << std::setw(14) << "D(l)" << '\n';
  for (std::size_t l = 0; l < p.grounding.size(); ++l) {
    os << std::setw(6) << l + 1 << std::setw(14) << fmt(p.grounding[l]) << std::setw(14)
       << fmt(p.dominance[l]) << '\n';
  }
  return os.str();
}

std::string cost_report_json(const CostReport& c) {
  ordered_json j;
  j["decodes"] = c.decodes;
  j["steps"] = c.steps;
  j["triggered_steps"] = c.triggered_steps;
  j["encoder_invocations_min"] = c.encoder_invocations_min;
  j["encoder_invocations_max"] = c.encoder_invocations_max;
  j["single_encode"] = c.single_encode;
  j["mean_extra_per_triggered"] = c.mean_extra_per_triggered;
  j["max_extra_per_triggered"] = c.max_extra_per_triggered;
  j["total_extra_layer_forwards"] = c.total_extra;
  j["compute_ratio"] = c.compute_ratio;
  j["triggered_step_ratio"] = c.triggered_step_ratio;
  return j.dump(2) + "\n";
}

}  // namespace stear
