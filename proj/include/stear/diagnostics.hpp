#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stear/engine.hpp"
#include "stear/planted.hpp"
#include "stear/tasks.hpp"

namespace stear {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers write results
// into slots keyed by i, so output never depends on scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// Per-layer profiles, index l-1 for layer l.
struct LayerProfile {
  Vec grounding;  // G(l)
  Vec dominance;  // D(l)
  std::size_t samples = 0;
};

// Sum of attention over the evidence indices.
double grounding_score(std::span<const double> attention, std::span<const std::size_t> evidence);

// Baseline trace of the answer position: the prompt prefix is fed, then the
// last prompt token is run with capture.
LayerTrace answer_trace(const DecoderWeights& weights, const VisualTokenGrid& grid,
                        std::span<const TokenId> prompt);

Vec grounding_profile(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                      std::size_t threads = 1);
Vec dominance_profile(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                      std::size_t threads = 1);
LayerProfile layer_profile(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                           std::size_t threads = 1);

struct EvalOptions {
  std::size_t max_new = 1;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct EvalReport {
  std::string kind;
  std::string config;
  std::size_t tasks = 0;
  std::size_t correct = 0;
  std::size_t distractor = 0;
  std::size_t other = 0;
  double accuracy = 0.0;
  double distractor_rate = 0.0;
  double other_rate = 0.0;
  std::size_t steps = 0;
  std::size_t triggered_steps = 0;
  double trigger_rate = 0.0;
  std::size_t extra_layer_forwards = 0;
  double mean_extra_forwards = 0.0;  // per step
  std::size_t encoder_invocations_min = 0;
  std::size_t encoder_invocations_max = 0;
  std::vector<TokenId> answers;  // first emitted token per task
};

// Decodes every task once; the answer is the first emitted token.
EvalReport evaluate(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                    const InterventionConfig& icfg, const EvalOptions& options = {},
                    const std::string& label = "");

struct DepthSweep {
  double baseline = 0.0;
  double early = 0.0;
  double middle = 0.0;
  double late = 0.0;
  DepthThirds thirds;
};

// Reinjection-only decoding with the reinjection set forced to each third.
DepthSweep depth_sweep(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                       const InterventionConfig& icfg, const EvalOptions& options = {});

// The 13 ablation variants, in report order.
const std::vector<std::string>& ablation_variants();
// base with the named variant applied; unknown names are a config error.
InterventionConfig apply_variant(const InterventionConfig& base, const std::string& name,
                                 const ModelConfig& model);

struct AblationRow {
  std::string variant;
  EvalReport report;
};

struct AblationMatrix {
  EvalReport full;
  EvalReport baseline;
  std::vector<AblationRow> rows;

  const EvalReport& at(const std::string& variant) const;
  std::string to_csv() const;
  std::string to_json() const;
  std::string to_text() const;
};

AblationMatrix ablation_matrix(const DecoderWeights& weights, std::span<const PlantedTask> tasks,
                               const InterventionConfig& base, const EvalOptions& options = {});

// One record per emitted token, as written to the JSON-lines step log.
struct StepRecord {
  std::string task;
  std::size_t step = 0;
  TokenId token = 0;
  bool triggered = false;
  double u = 0.0;
  std::size_t l_star = 0;
  std::vector<std::size_t> indices;
  double alpha = 0.0;
  double lambda = 0.0;
  double logit_gap = 0.0;
  std::size_t extra_layer_forwards = 0;
  std::size_t encoder_invocations = 0;
};

StepRecord step_record(const StepOutcome& outcome, const InterventionConfig& icfg,
                       const std::string& task, std::size_t step);
std::string step_record_json(const StepRecord& record);
StepRecord parse_step_record(const std::string& line);

struct CostReport {
  std::size_t decodes = 0;
  std::size_t steps = 0;
  std::size_t triggered_steps = 0;
  std::size_t encoder_invocations_min = 0;
  std::size_t encoder_invocations_max = 0;
  bool single_encode = true;
  double mean_extra_per_triggered = 0.0;
  std::size_t max_extra_per_triggered = 0;
  std::size_t total_extra = 0;
  // (L * steps + total extra) / (L * steps)
  double compute_ratio = 1.0;
  // Same ratio over triggered steps only.
  double triggered_step_ratio = 1.0;
};

// `records` grouped by task; encoder counts are read from each task's last
// record.
CostReport cost_report(std::span<const StepRecord> records, std::size_t num_layers);

struct CalibrationPoint {
  double value = 0.0;
  double metric = 0.0;
};

struct Calibration {
  bool found = false;
  double value = 0.0;
  double metric = 0.0;
  std::vector<CalibrationPoint> sweep;
};

// Sweeps task attenuation with the baseline decoder and picks the candidate
// whose baseline accuracy lies in [lo, hi], closest to the midpoint.
Calibration calibrate_attenuation(const DecoderWeights& weights, const TaskSetParams& params,
                                  std::span<const double> candidates, double lo, double hi,
                                  const EvalOptions& options = {});

// Sweeps the planted prior strength (ascending) and picks the smallest value
// whose baseline distractor-choice rate is at least `min_rate`.
Calibration calibrate_prior(const PlantedSpec& spec, const ModelConfig& model,
                            const TaskSetParams& params, std::span<const double> candidates,
                            double min_rate, const EvalOptions& options = {});

std::string eval_report_json(const EvalReport& report);
std::string eval_report_text(const EvalReport& report);
std::string layer_profile_csv(const LayerProfile& profile);
std::string layer_profile_text(const LayerProfile& profile);
std::string cost_report_json(const CostReport& report);

// Fixed-precision formatting used by every report, so reruns are byte-stable.
std::string fmt(double x, int precision = 6);

}  // namespace stear
