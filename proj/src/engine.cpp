#include "stear/engine.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "stear/error.hpp"
#include "stear/random.hpp"

namespace stear {

DepthThirds depth_thirds(std::size_t num_layers) {
  if (num_layers < 3) fail(ErrorCode::kConfig, "depth thirds need at least 3 layers");
  const std::size_t a = num_layers / 3;
  const std::size_t b = (2 * num_layers) / 3;
  return {{1, a}, {a + 1, b}, {b + 1, num_layers}};
}

InterventionConfig InterventionConfig::defaults_for(const ModelConfig& model) {
  InterventionConfig c;
  c.middle_window = depth_thirds(model.num_layers).middle;
  return c;
}

InterventionConfig InterventionConfig::baseline_for(const ModelConfig& model) {
  InterventionConfig c = defaults_for(model);
  c.trigger = TriggerMode::kNever;
  c.reinject = false;
  c.counterfactual = false;
  return c;
}

void InterventionConfig::validate(const ModelConfig& model) const {
  auto bad = [](const std::string& field, const std::string& why) {
    fail(ErrorCode::kConfig, "intervention." + field + ": " + why);
  };
  const std::size_t L = model.num_layers;
  if (!(tau >= 0.0 && tau <= 1.0)) bad("tau", "must lie in [0, 1]");
  if (middle_window.first < 1 || middle_window.last > L || middle_window.first > middle_window.last)
    bad("middle_window", "must be a non-empty range inside [1, " + std::to_string(L) + "]");
  if (!(selection_ratio > 0.0 && selection_ratio <= 1.0)) bad("r", "must lie in (0, 1]");
  if (!std::isfinite(lambda) || lambda < 0.0) bad("lambda", "must be finite and >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) bad("gamma", "must lie in [0, 1]");
  if (!std::isfinite(alpha) || alpha < 0.0) bad("alpha", "must be finite and >= 0");
  if (reinject_layers &&
      (reinject_layers->first < 1 || reinject_layers->last > L ||
       reinject_layers->first > reinject_layers->last))
    bad("reinject_layers", "must be a non-empty range inside [1, " + std::to_string(L) + "]");
}

double normalized_entropy(std::span<const double> p) {
  if (p.size() < 2) return 0.0;
  Vec terms;
  terms.reserve(p.size());
  for (double x : p) {
    if (x > 0.0) terms.push_back(-x * std::log(x));
  }
  const double h = stable_sum(terms) / std::log(static_cast<double>(p.size()));
  return std::clamp(h, 0.0, 1.0);
}

LayerRange neighborhood(std::size_t trigger_layer, const InterventionConfig& icfg) {
  const std::size_t r = icfg.neighborhood_radius;
  const std::size_t lo = trigger_layer > r ? trigger_layer - r : 1;
  return {std::max(lo, icfg.middle_window.first),
          std::min(trigger_layer + r, icfg.middle_window.last)};
}

RiskAssessment assess_risk(const LayerTrace& trace, const DecoderWeights& weights,
                           const InterventionConfig& icfg) {
  RiskAssessment risk;
  risk.u = -1.0;
  for (std::size_t l = icfg.middle_window.first; l <= icfg.middle_window.last; ++l) {
    const double u = normalized_entropy(per_layer_readout(trace, weights, l));
    risk.layer_uncertainty.push_back(u);
    if (u > risk.u) {
      risk.u = u;
      risk.trigger_layer = l;
    }
  }
  risk.triggered = risk.u > icfg.tau;
  return risk;
}

std::size_t selection_size(std::size_t num_tokens, double ratio) {
  const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(num_tokens)));
  return std::clamp<std::size_t>(k, 1, num_tokens);
}

namespace {

void fill_touched(EvidenceSelection& sel, const VisualTokenGrid& grid) {
  std::set<std::size_t> pos, frm;
  for (std::size_t i : sel.indices) {
    pos.insert(grid.position_of(i));
    frm.insert(grid.frame_of(i));
  }
  sel.positions.assign(pos.begin(), pos.end());
  sel.frames.assign(frm.begin(), frm.end());
}

// Mean of the head-averaged cross-attention rows over `layers`. Accumulated in
// long double so identical rows average back to themselves exactly.
Vec mean_attention(const LayerTrace& trace, std::span<const std::size_t> layers,
                   std::size_t num_tokens) {
  if (layers.empty()) fail(ErrorCode::kRange, "evidence selection over an empty layer set");
  std::vector<long double> acc(num_tokens, 0.0L);
  for (std::size_t l : layers) {
    if (l >= trace.cross_attention.size() || trace.cross_attention[l].size() != num_tokens) {
      fail(ErrorCode::kShape, "no cross-attention captured for layer " + std::to_string(l));
    }
    for (std::size_t n = 0; n < num_tokens; ++n) acc[n] += trace.cross_attention[l][n];
  }
  Vec out(num_tokens);
  const long double m = static_cast<long double>(layers.size());
  for (std::size_t n = 0; n < num_tokens; ++n) out[n] = static_cast<double>(acc[n] / m);
  return out;
}

std::vector<std::size_t> range_layers(LayerRange r) {
  std::vector<std::size_t> v;
  for (std::size_t l = r.first; l <= r.last; ++l) v.push_back(l);
  return v;
}

}  // namespace

EvidenceSelection select_over_layers(const LayerTrace& trace, const VisualTokenGrid& grid,
                                     std::span<const std::size_t> layers, double ratio) {
  EvidenceSelection sel;
  sel.neighborhood.assign(layers.begin(), layers.end());
  sel.scores = mean_attention(trace, layers, grid.size());
  sel.indices = top_k_indices(sel.scores, selection_size(grid.size(), ratio));
  fill_touched(sel, grid);
  return sel;
}

EvidenceSelection select_key_evidence(const LayerTrace& trace, const VisualTokenGrid& grid,
                                      std::size_t trigger_layer, const InterventionConfig& icfg) {
  const auto layers = range_layers(neighborhood(trigger_layer, icfg));
  return select_over_layers(trace, grid, layers, icfg.selection_ratio);
}

EvidenceSelection select_random(const VisualTokenGrid& grid, double ratio, std::uint64_t seed) {
  EvidenceSelection sel;
  const auto perm = seeded_permutation(grid.size(), seed);
  sel.indices.assign(perm.begin(), perm.begin() + selection_size(grid.size(), ratio));
  std::sort(sel.indices.begin(), sel.indices.end());
  sel.scores.assign(grid.size(), 0.0);
  for (std::size_t i : sel.indices) sel.scores[i] = 1.0;
  fill_touched(sel, grid);
  return sel;
}

EvidenceSelection select_frames(const LayerTrace& trace, const VisualTokenGrid& grid,
                                std::span<const std::size_t> layers, double ratio) {
  EvidenceSelection sel;
  sel.neighborhood.assign(layers.begin(), layers.end());
  sel.scores = mean_attention(trace, layers, grid.size());
  Vec frame_scores(grid.frames, 0.0);
  for (std::size_t n = 0; n < grid.size(); ++n) frame_scores[grid.frame_of(n)] += sel.scores[n];
  const auto frames = top_k_indices(frame_scores, selection_size(grid.frames, ratio));
  for (std::size_t i = 0; i < grid.positions; ++i) {
    for (std::size_t f : frames) sel.indices.push_back(grid.flatten(i, f));
  }
  std::sort(sel.indices.begin(), sel.indices.end());
  fill_touched(sel, grid);
  return sel;
}

Mat build_memory(const VisualTokenGrid& grid, const EvidenceSelection& selection,
                 const DecoderWeights& weights) {
  if (grid.dim != weights.visual_proj.rows) {
    fail(ErrorCode::kShape, "grid dim " + std::to_string(grid.dim) + " vs visual projection " +
                                weights.visual_proj.shape_string());
  }
  Mat memory(selection.indices.size(), weights.config.model_dim);
  for (std::size_t r = 0; r < selection.indices.size(); ++r) {
    const std::size_t idx = selection.indices[r];
    if (idx >= grid.size()) fail(ErrorCode::kRange, "evidence index out of range");
    const Vec row = vec_mat(grid.tokens.row(idx), weights.visual_proj);
    std::copy(row.begin(), row.end(), memory.row(r).begin());
  }
  return memory;
}

Reinjection reinject_detail(std::span<const double> state, std::size_t layer, const Mat& memory,
                            const DecoderWeights& weights, double lambda, RetrievalMaps maps) {
  const ModelConfig& cfg = weights.config;
  const std::size_t d = cfg.model_dim;
  if (state.size() != d || memory.cols != d) {
    fail(ErrorCode::kShape, "reinjection state/memory width must equal model_dim");
  }
  if (memory.rows == 0) fail(ErrorCode::kRange, "reinjection with an empty memory");
  if (layer < 1 || layer > cfg.num_layers) fail(ErrorCode::kRange, "reinjection layer out of range");
  const LayerWeights& lw = weights.layer(layer);
  const bool frozen = maps == RetrievalMaps::kFrozenCrossAttention;

  const Vec x = layer_norm(state, lw.ln_cross_scale, lw.ln_cross_shift, cfg.eps);
  const Vec q = frozen ? vec_mat(x, lw.cross_q) : x;
  const Mat keys = frozen ? matmul(memory, lw.cross_k) : memory;
  const Mat vals = frozen ? matmul(memory, lw.cross_v) : memory;

  const std::size_t heads = frozen ? cfg.num_heads : 1;
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Reinjection out;
  out.weights.assign(memory.rows, 0.0);
  Vec mixed(d, 0.0);
  Vec scores(memory.rows);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t j = 0; j < memory.rows; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < dh; ++c) acc += q[off + c] * keys(j, off + c);
      scores[j] = acc * scale;
    }
    Vec beta = softmax_row(scores);
    for (std::size_t j = 0; j < memory.rows; ++j) {
      for (std::size_t c = 0; c < dh; ++c) mixed[off + c] += beta[j] * vals(j, off + c);
      out.weights[j] += beta[j];
    }
    out.head_weights.push_back(std::move(beta));
  }
  for (double& b : out.weights) b /= static_cast<double>(heads);
  out.retrieved = frozen ? vec_mat(mixed, lw.cross_o) : mixed;
  out.state.assign(state.begin(), state.end());
  for (std::size_t i = 0; i < d; ++i) out.state[i] += lambda * out.retrieved[i];
  return out;
}

Vec reinject(std::span<const double> state, std::size_t layer, const Mat& memory,
             const DecoderWeights& weights, double lambda, RetrievalMaps maps) {
  return reinject_detail(state, layer, memory, weights, lambda, maps).state;
}

Counterfactual build_counterfactual(const VisualTokenGrid& grid,
                                    const EvidenceSelection& selection,
                                    const InterventionConfig& icfg, std::uint64_t perm_seed) {
  Counterfactual cf;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> frames;
  switch (icfg.perturb_scope) {
    case PerturbScope::kPatch:
      positions = selection.positions;
      for (std::size_t f = 0; f < grid.frames; ++f) frames.push_back(f);
      break;
    case PerturbScope::kFrame:
      for (std::size_t i = 0; i < grid.positions; ++i) positions.push_back(i);
      frames = selection.frames;
      break;
    case PerturbScope::kWholeVideo:
      for (std::size_t i = 0; i < grid.positions; ++i) positions.push_back(i);
      for (std::size_t f = 0; f < grid.frames; ++f) frames.push_back(f);
      break;
  }
  const bool do_h = icfg.perturb_mode != PerturbMode::kShuffle;
  const bool do_s = icfg.perturb_mode != PerturbMode::kHomogenize;
  cf.grid = grid;
  if (icfg.perturb_scope == PerturbScope::kFrame) {
    if (do_h) cf.grid = temporal_homogenize_frames(cf.grid, positions, frames, icfg.gamma);
    if (do_s) cf.grid = temporal_shuffle_frames(cf.grid, positions, frames, perm_seed);
  } else {
    if (do_h) cf.grid = temporal_homogenize(cf.grid, positions, icfg.gamma);
    if (do_s) cf.grid = temporal_shuffle(cf.grid, positions, perm_seed, icfg.shared_permutation);
  }
  for (std::size_t i : positions) {
    for (std::size_t f : frames) cf.rows.push_back(grid.flatten(i, f));
  }
  std::sort(cf.rows.begin(), cf.rows.end());
  return cf;
}

Vec contrastive_combine(std::span<const double> positive, std::span<const double> negative,
                        double alpha) {
  if (positive.size() != negative.size()) {
    fail(ErrorCode::kShape, "contrastive branches differ in length: " +
                                std::to_string(positive.size()) + " vs " +
                                std::to_string(negative.size()));
  }
  Vec out(positive.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = positive[i] + alpha * (positive[i] - negative[i]);
  }
  return out;
}

double logit_gap(std::span<const double> logits) {
  if (logits.size() < 2) return 0.0;
  double a = -INFINITY, b = -INFINITY;
  for (double x : logits) {
    if (x > a) {
      b = a;
      a = x;
    } else if (x > b) {
      b = x;
    }
  }
  return a - b;
}

DecodeSession::DecodeSession(const DecoderWeights& weights, VisualTokenGrid grid,
                             std::uint64_t seed)
    : weights_(&weights),
      grid_(std::move(grid)),
      cache_(weights.config.num_layers),
      seed_(seed) {
  grid_.validate();
  if (grid_.frames > weights.config.max_frames) {
    fail(ErrorCode::kShape, "grid has " + std::to_string(grid_.frames) +
                                " frames, model supports " +
                                std::to_string(weights.config.max_frames));
  }
  visual_ = encode_visual(weights, grid_);
  ++encoder_invocations_;
}

LayerTrace DecodeSession::prefill(TokenId token) {
  LayerTrace t = forward_step(*weights_, cache_, token, &visual_);
  layer_forwards_ += weights_->config.num_layers;
  return t;
}

namespace {

// Layers [l', l'+...] for the separate negative selector: the neighbourhood
// of the same radius shifted just past N(l*), clipped to [1, L].
std::vector<std::size_t> separate_layers(std::size_t trigger_layer, const InterventionConfig& icfg,
                                         std::size_t L) {
  const std::size_t r = icfg.neighborhood_radius;
  const std::size_t shift = 2 * r + 1;
  std::size_t center;
  if (trigger_layer + shift <= L) {
    center = trigger_layer + shift;
  } else if (trigger_layer > shift) {
    center = trigger_layer - shift;
  } else {
    center = trigger_layer;
  }
  const std::size_t lo = center > r ? center - r : 1;
  const std::size_t hi = std::min(center + r, L);
  std::vector<std::size_t> v;
  for (std::size_t l = std::max<std::size_t>(lo, 1); l <= hi; ++l) v.push_back(l);
  return v;
}

constexpr std::uint64_t kRandomSelectSalt = 0x5e1ec7;
constexpr std::uint64_t kShuffleSalt = 0x5u;

}  // namespace

StepOutcome decode_step(DecodeSession& session, const InterventionConfig& icfg, TokenId input) {
  const DecoderWeights& w = session.weights();
  const std::size_t L = w.config.num_layers;
  const std::size_t step = session.next_step_index();

  const LayerTrace base = forward_capture(w, session.cache(), input, &session.visual());
  session.count_layer_forwards(L);

  StepOutcome out;
  out.baseline_logits = base.logits;
  out.risk = assess_risk(base, w, icfg);

  const bool fire = icfg.trigger == TriggerMode::kAlways ||
                    (icfg.trigger == TriggerMode::kUncertainty && out.risk.triggered);
  if (!fire || (!icfg.reinject && !icfg.counterfactual)) {
    out.logits = base.logits;
    out.token = static_cast<TokenId>(argmax(out.logits));
    commit_step(session.cache(), base);
    out.encoder_invocations = session.encoder_invocations();
    return out;
  }
  out.intervened = true;
  const std::size_t lstar = out.risk.trigger_layer;
  const LayerRange nb = neighborhood(lstar, icfg);
  const auto nb_layers = range_layers(nb);

  switch (icfg.selection) {
    case SelectionMode::kKes:
      out.selection = select_over_layers(base, session.grid(), nb_layers, icfg.selection_ratio);
      break;
    case SelectionMode::kRandom:
      out.selection = select_random(
          session.grid(), icfg.selection_ratio,
          mix_seed(mix_seed(session.seed(), kRandomSelectSalt), step));
      out.selection->neighborhood = nb_layers;
      break;
    case SelectionMode::kFrameLevel:
      out.selection = select_frames(base, session.grid(), nb_layers, icfg.selection_ratio);
      break;
  }

  // Positive branch: reinjection over R, starting from the baseline state.
  std::optional<LayerTrace> pos;
  std::size_t l0 = 0;
  if (icfg.reinject) {
    const LayerRange R = icfg.reinject_layers.value_or(nb);
    l0 = R.first;
    const Mat memory = build_memory(session.grid(), *out.selection, w);
    LayerHook hook = [&](std::size_t l, Vec& h) {
      if (R.contains(l)) h = reinject(h, l, memory, w, icfg.lambda, icfg.retrieval);
    };
    pos = resume_from_layer(w, session.cache(), l0, base.hidden[l0 - 1], &session.visual(), hook);
    out.positive_logits = pos->logits;
    out.extra_layer_forwards += L - l0 + 1;
  }
  const Vec& o_pos = pos ? pos->logits : base.logits;

  if (icfg.counterfactual) {
    const EvidenceSelection& neg_sel =
        icfg.separate_negative_selector
            ? out.negative_selection.emplace(select_over_layers(
                  base, session.grid(), separate_layers(lstar, icfg, L), icfg.selection_ratio))
            : *out.selection;
    const std::uint64_t perm_seed = mix_seed(mix_seed(session.seed(), kShuffleSalt), step);
    const Counterfactual cf = build_counterfactual(session.grid(), neg_sel, icfg, perm_seed);

    const bool from_pos = icfg.negative_entry == NegativeEntry::kReinjected && pos &&
                          lstar >= l0 && !pos->hidden[lstar].empty();
    const Vec& entry = from_pos ? pos->hidden[lstar] : base.hidden[lstar];
    if (lstar < L) {
      const VisualMemory neg_visual = patch_visual(w, session.visual(), cf.grid, cf.rows, lstar + 1);
      const LayerTrace neg = resume_from_layer(w, session.cache(), lstar + 1, entry, &neg_visual);
      out.negative_logits = neg.logits;
    } else {
      out.negative_logits = readout_logits(w, entry);
    }
    out.extra_layer_forwards += L - lstar;
    out.logits = contrastive_combine(o_pos, *out.negative_logits, icfg.alpha);
  } else {
    out.logits = o_pos;
  }
  session.count_layer_forwards(out.extra_layer_forwards);
  out.token = static_cast<TokenId>(argmax(out.logits));

  if (icfg.cache_policy == CachePolicy::kPositive && pos) {
    LayerTrace merged = base;
    for (std::size_t l = l0; l <= L; ++l) {
      merged.self_keys[l] = pos->self_keys[l];
      merged.self_values[l] = pos->self_values[l];
    }
    commit_step(session.cache(), merged);
  } else {
    commit_step(session.cache(), base);
  }
  out.encoder_invocations = session.encoder_invocations();
  return out;
}

DecodeResult decode_sequence(const DecoderWeights& weights, const InterventionConfig& icfg,
                             const VisualTokenGrid& grid, std::span<const TokenId> prompt,
                             const DecodeOptions& options) {
  icfg.validate(weights.config);
  if (prompt.empty()) fail(ErrorCode::kRange, "prompt must contain at least one token");
  const std::size_t extra = options.max_new == 0 ? 0 : options.max_new - 1;
  if (prompt.size() + extra > weights.config.max_text_len) {
    std::ostringstream os;
    os << "prompt length " << prompt.size() << " + " << options.max_new
       << " new tokens exceeds max_text_len " << weights.config.max_text_len;
    fail(ErrorCode::kRange, os.str());
  }
  for (TokenId t : prompt) {
    if (t < 0 || static_cast<std::size_t>(t) >= weights.config.vocab_size) {
      fail(ErrorCode::kRange, "prompt token " + std::to_string(t) + " outside the vocabulary");
    }
  }
  DecodeSession session(weights, grid, options.seed);
  DecodeResult res;
  res.prompt_length = prompt.size();
  const std::size_t fed = options.max_new == 0 ? prompt.size() : prompt.size() - 1;
  for (std::size_t i = 0; i < fed; ++i) session.prefill(prompt[i]);
  TokenId next = prompt.back();
  for (std::size_t k = 0; k < options.max_new; ++k) {
    StepOutcome o = decode_step(session, icfg, next);
    next = o.token;
    res.tokens.push_back(o.token);
    res.steps.push_back(std::move(o));
    if (options.end_token && next == *options.end_token) break;
  }
  res.cache_length = session.cache().length();
  res.encoder_invocations = session.encoder_invocations();
  res.layer_forwards = session.layer_forwards();
  return res;
}

std::vector<TokenId> greedy_decode(const DecoderWeights& weights, const VisualTokenGrid& grid,
                                   std::span<const TokenId> prompt, std::size_t max_new,
                                   std::optional<TokenId> end_token) {
  const VisualMemory visual = encode_visual(weights, grid);
  KVCache cache(weights.config.num_layers);
  if (prompt.empty()) fail(ErrorCode::kRange, "prompt must contain at least one token");
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) forward_step(weights, cache, prompt[i], &visual);
  std::vector<TokenId> out;
  TokenId next = prompt.back();
  for (std::size_t k = 0; k < max_new; ++k) {
    const LayerTrace t = forward_step(weights, cache, next, &visual);
    next = static_cast<TokenId>(argmax(t.logits));
    out.push_back(next);
    if (end_token && next == *end_token) break;
  }
  return out;
}

const char* perturb_mode_name(PerturbMode mode) {
  switch (mode) {
    case PerturbMode::kShuffle: return "shuffle";
    case PerturbMode::kHomogenize: return "homogenize";
    case PerturbMode::kBoth: return "both";
  }
  return "?";
}

PerturbMode parse_perturb_mode(const std::string& name) {
  if (name == "shuffle") return PerturbMode::kShuffle;
  if (name == "homogenize") return PerturbMode::kHomogenize;
  if (name == "both") return PerturbMode::kBoth;
  fail(ErrorCode::kConfig, "unknown perturb mode '" + name + "' (shuffle|homogenize|both)");
}

const char* cache_policy_name(CachePolicy policy) {
  return policy == CachePolicy::kPositive ? "positive" : "baseline";
}

CachePolicy parse_cache_policy(const std::string& name) {
  if (name == "positive") return CachePolicy::kPositive;
  if (name == "baseline") return CachePolicy::kBaseline;
  fail(ErrorCode::kConfig, "unknown cache policy '" + name + "' (positive|baseline)");
}

const char* trigger_mode_name(TriggerMode mode) {
  switch (mode) {
    case TriggerMode::kUncertainty: return "uncertainty";
    case TriggerMode::kAlways: return "always";
    case TriggerMode::kNever: return "never";
  }
  return "?";
}

TriggerMode parse_trigger_mode(const std::string& name) {
  if (name == "uncertainty") return TriggerMode::kUncertainty;
  if (name == "always") return TriggerMode::kAlways;
  if (name == "never") return TriggerMode::kNever;
  fail(ErrorCode::kConfig, "unknown trigger mode '" + name + "' (uncertainty|always|never)");
}

}  // namespace stear
