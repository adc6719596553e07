#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stear/model.hpp"
#include "stear/video.hpp"

namespace stear {

enum class PerturbMode { kShuffle, kHomogenize, kBoth };
enum class CachePolicy { kPositive, kBaseline };
// kUncertainty: intervene when u_t > tau. kAlways: every generated token.
// kNever: plain greedy decoding.
enum class TriggerMode { kUncertainty, kAlways, kNever };
// How the evidence hypothesis is chosen.
enum class SelectionMode { kKes, kRandom, kFrameLevel };
// Which part of the grid the counterfactual perturbs.
enum class PerturbScope { kPatch, kFrame, kWholeVideo };
// Entry state of the negative branch at l*.
enum class NegativeEntry { kReinjected, kBaseline };
// Projections used by reinjection retrieval.
enum class RetrievalMaps { kFrozenCrossAttention, kIdentity };

struct LayerRange {
  std::size_t first = 1;
  std::size_t last = 1;

  bool contains(std::size_t l) const { return l >= first && l <= last; }
  std::size_t size() const { return last >= first ? last - first + 1 : 0; }
  bool operator==(const LayerRange&) const = default;
};

// Early / middle / late thirds of [1, L]: disjoint and covering.
struct DepthThirds {
  LayerRange early, middle, late;
};
DepthThirds depth_thirds(std::size_t num_layers);

struct InterventionConfig {
  double tau = 0.85;
  LayerRange middle_window{5, 8};
  std::size_t neighborhood_radius = 1;
  double selection_ratio = 0.10;
  double lambda = 1.0;
  double gamma = 0.80;
  double alpha = 0.75;
  PerturbMode perturb_mode = PerturbMode::kBoth;
  CachePolicy cache_policy = CachePolicy::kPositive;

  // Enabled parts.
  TriggerMode trigger = TriggerMode::kUncertainty;
  bool reinject = true;
  bool counterfactual = true;

  // Ablation switches.
  SelectionMode selection = SelectionMode::kKes;
  bool separate_negative_selector = false;
  PerturbScope perturb_scope = PerturbScope::kPatch;
  std::optional<LayerRange> reinject_layers;  // overrides N(l*) as the reinjection set
  NegativeEntry negative_entry = NegativeEntry::kReinjected;
  RetrievalMaps retrieval = RetrievalMaps::kFrozenCrossAttention;
  bool shared_permutation = false;

  // Defaults with the middle window set to the middle third of the model.
  static InterventionConfig defaults_for(const ModelConfig& model);
  // Everything off: decoding reduces to plain greedy.
  static InterventionConfig baseline_for(const ModelConfig& model);

  void validate(const ModelConfig& model) const;
};

struct RiskAssessment {
  double u = 0.0;
  std::vector<double> layer_uncertainty;  // one per layer of the middle window
  std::size_t trigger_layer = 0;          // l*
  bool triggered = false;                 // u > tau
};

struct EvidenceSelection {
  std::vector<std::size_t> neighborhood;  // layers aggregated into scores
  Vec scores;                             // a_t over N tokens
  std::vector<std::size_t> indices;       // I_t, ascending
  std::vector<std::size_t> positions;     // spatial positions touched by I_t
  std::vector<std::size_t> frames;        // frames touched by I_t
};

struct StepOutcome {
  TokenId token = 0;
  Vec baseline_logits;
  std::optional<Vec> positive_logits;
  std::optional<Vec> negative_logits;
  Vec logits;  // calibrated o_t
  RiskAssessment risk;
  bool intervened = false;
  std::optional<EvidenceSelection> selection;
  std::optional<EvidenceSelection> negative_selection;
  std::size_t extra_layer_forwards = 0;
  std::size_t encoder_invocations = 0;  // session total after this step
};

// Normalized entropy -sum p ln p / ln|V|, clamped to [0, 1].
double normalized_entropy(std::span<const double> p);

// N(l*) = [l* - radius, l* + radius] intersected with the middle window.
LayerRange neighborhood(std::size_t trigger_layer, const InterventionConfig& icfg);

RiskAssessment assess_risk(const LayerTrace& trace, const DecoderWeights& weights,
                           const InterventionConfig& icfg);

// KES over an explicit set of layers.
EvidenceSelection select_over_layers(const LayerTrace& trace, const VisualTokenGrid& grid,
                                     std::span<const std::size_t> layers, double ratio);
EvidenceSelection select_key_evidence(const LayerTrace& trace, const VisualTokenGrid& grid,
                                      std::size_t trigger_layer, const InterventionConfig& icfg);
EvidenceSelection select_random(const VisualTokenGrid& grid, double ratio, std::uint64_t seed);
EvidenceSelection select_frames(const LayerTrace& trace, const VisualTokenGrid& grid,
                                std::span<const std::size_t> layers, double ratio);

std::size_t selection_size(std::size_t num_tokens, double ratio);

// M_t = {W_v z_i : i in I_t}, rows in ascending I_t order.
Mat build_memory(const VisualTokenGrid& grid, const EvidenceSelection& selection,
                 const DecoderWeights& weights);

struct Reinjection {
  Vec state;                       // h + lambda * r
  Vec retrieved;                   // r_t^(l)
  std::vector<Vec> head_weights;   // beta per head
  Vec weights;                     // beta averaged over heads
};

// Retrieval from the memory with the current state as query, through the
// layer's frozen cross-attention projections, added back with strength lambda.
Reinjection reinject_detail(std::span<const double> state, std::size_t layer, const Mat& memory,
                            const DecoderWeights& weights, double lambda,
                            RetrievalMaps maps = RetrievalMaps::kFrozenCrossAttention);
Vec reinject(std::span<const double> state, std::size_t layer, const Mat& memory,
             const DecoderWeights& weights, double lambda,
             RetrievalMaps maps = RetrievalMaps::kFrozenCrossAttention);

struct Counterfactual {
  VisualTokenGrid grid;            // Z^-
  std::vector<std::size_t> rows;   // token rows that may differ from Z
};

Counterfactual build_counterfactual(const VisualTokenGrid& grid,
                                    const EvidenceSelection& selection,
                                    const InterventionConfig& icfg, std::uint64_t perm_seed);

// o_t = (1 + alpha) o+ - alpha o-, evaluated as o+ + alpha (o+ - o-).
Vec contrastive_combine(std::span<const double> positive, std::span<const double> negative,
                        double alpha);

// One decode session: a single video encoding, its KV cache and counters.
class DecodeSession {
 public:
  DecodeSession(const DecoderWeights& weights, VisualTokenGrid grid, std::uint64_t seed = 0);

  const DecoderWeights& weights() const { return *weights_; }
  const VisualTokenGrid& grid() const { return grid_; }
  const VisualMemory& visual() const { return visual_; }
  const KVCache& cache() const { return cache_; }
  KVCache& cache() { return cache_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t steps() const { return steps_; }
  std::size_t encoder_invocations() const { return encoder_invocations_; }
  std::size_t layer_forwards() const { return layer_forwards_; }

  // Feeds a prompt token with a plain forward pass.
  LayerTrace prefill(TokenId token);

  // Used by decode_step.
  void count_layer_forwards(std::size_t n) { layer_forwards_ += n; }
  std::size_t next_step_index() { return steps_++; }

 private:
  const DecoderWeights* weights_;
  VisualTokenGrid grid_;
  VisualMemory visual_;
  KVCache cache_;
  std::uint64_t seed_;
  std::size_t steps_ = 0;
  std::size_t encoder_invocations_ = 0;
  std::size_t layer_forwards_ = 0;
};

StepOutcome decode_step(DecodeSession& session, const InterventionConfig& icfg, TokenId input);

struct DecodeOptions {
  std::size_t max_new = 1;
  std::optional<TokenId> end_token;
  std::uint64_t seed = 0;
};

struct DecodeResult {
  std::vector<TokenId> tokens;     // emitted tokens
  std::vector<StepOutcome> steps;  // one per emitted token
  std::size_t prompt_length = 0;
  std::size_t cache_length = 0;
  std::size_t encoder_invocations = 0;
  std::size_t layer_forwards = 0;
};

// Feeds the prompt, then greedily emits up to max_new tokens (stopping after
// the end token). The first emission comes from the step whose input is the
// last prompt token.
DecodeResult decode_sequence(const DecoderWeights& weights, const InterventionConfig& icfg,
                             const VisualTokenGrid& grid, std::span<const TokenId> prompt,
                             const DecodeOptions& options);

// Plain greedy decoding straight on the toy decoder, no engine involved.
std::vector<TokenId> greedy_decode(const DecoderWeights& weights, const VisualTokenGrid& grid,
                                   std::span<const TokenId> prompt, std::size_t max_new,
                                   std::optional<TokenId> end_token = std::nullopt);

// top1 - top2 of a logit vector.
double logit_gap(std::span<const double> logits);

const char* perturb_mode_name(PerturbMode mode);
PerturbMode parse_perturb_mode(const std::string& name);
const char* cache_policy_name(CachePolicy policy);
CachePolicy parse_cache_policy(const std::string& name);
const char* trigger_mode_name(TriggerMode mode);
TriggerMode parse_trigger_mode(const std::string& name);

}  // namespace stear
