#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stear/tensor.hpp"
#include "stear/video.hpp"

namespace stear {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t num_layers = 12;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 64;
  std::size_t ffn_dim = 128;
  std::size_t max_text_len = 32;
  std::size_t max_frames = 16;
  std::size_t visual_dim = 64;
  double eps = 1e-5;

  std::size_t head_dim() const { return model_dim / num_heads; }

  // Throws ErrorCode::kConfig naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// One pre-norm block: self-attention, cross-attention over visual tokens, FFN.
struct LayerWeights {
  Vec ln_self_scale, ln_self_shift;
  Mat self_q, self_k, self_v, self_o;
  Vec ln_cross_scale, ln_cross_shift;
  Mat cross_q, cross_k, cross_v, cross_o;
  Vec ln_ffn_scale, ln_ffn_shift;
  Mat ffn_up, ffn_down;

  bool operator==(const LayerWeights&) const = default;
};

struct DecoderWeights {
  ModelConfig config;
  Mat token_embedding;     // vocab x d
  Mat position_embedding;  // max_text_len x d
  std::vector<LayerWeights> layers;
  Mat visual_proj;  // d_vis x d
  // Per-frame multiplicative gain on visual keys. This is the temporal slot
  // scaffold: it is indexed by frame slot, so it stays in place when token
  // contents are moved between frames.
  Mat slot_gain;  // max_frames x d
  Vec final_norm_scale, final_norm_shift;
  Mat lm_head;  // d x vocab

  const LayerWeights& layer(std::size_t l) const { return layers.at(l - 1); }
  LayerWeights& layer(std::size_t l) { return layers.at(l - 1); }

  void validate() const;
  bool operator==(const DecoderWeights&) const = default;
};

// Gaussian init (std 1/sqrt(d)) for projection matrices, unit norms, unit-ish
// slot gains. Same (config, seed) gives bitwise-identical weights.
DecoderWeights init_weights(const ModelConfig& config, std::uint64_t seed);

// Per-layer cross-attention keys/values for one grid. Building this is the
// "visual encoding" of a decode: it happens once per session.
struct VisualMemory {
  std::size_t positions = 0;
  std::size_t frames = 0;
  Mat projected;            // N x d, rows = W_v z_n
  std::vector<Mat> keys;    // per layer (index l-1), N x d, slot gain applied
  std::vector<Mat> values;  // per layer (index l-1), N x d

  std::size_t size() const { return projected.rows; }
};

VisualMemory encode_visual(const DecoderWeights& weights, const VisualTokenGrid& grid);

// Copy of `base` with the given token rows recomputed from `variant` for
// layers >= first_layer. Used for counterfactual branches, which only need
// the perturbed rows of the layers they actually run.
VisualMemory patch_visual(const DecoderWeights& weights, const VisualMemory& base,
                          const VisualTokenGrid& variant, std::span<const std::size_t> rows,
                          std::size_t first_layer);

// Self-attention keys/values for every committed prefix position.
struct KVCache {
  std::vector<std::vector<Vec>> keys;    // [layer-1][position]
  std::vector<std::vector<Vec>> values;  // [layer-1][position]

  explicit KVCache(std::size_t num_layers = 0) : keys(num_layers), values(num_layers) {}

  std::size_t length() const { return keys.empty() ? 0 : keys.front().size(); }
  std::size_t num_layers() const { return keys.size(); }
  bool operator==(const KVCache&) const = default;
};

// Everything captured for the current position during a (partial) pass.
// Layer-indexed members use index l for layer l; hidden[0] is the embedding.
// Entries for layers that were not run are left empty.
struct LayerTrace {
  std::size_t position = 0;
  std::vector<Vec> hidden;                            // L+1 entries
  std::vector<Vec> cross_attention;                   // L+1 entries, [0] unused
  std::vector<std::vector<Vec>> cross_attention_heads;  // only with capture_heads
  std::vector<Vec> self_keys;    // L+1 entries, current-position K
  std::vector<Vec> self_values;  // L+1 entries, current-position V
  Vec logits;

  std::size_t num_layers() const { return hidden.empty() ? 0 : hidden.size() - 1; }
};

struct ForwardOptions {
  bool capture_heads = false;
};

// Adjustment applied to h^(l) right after layer l's FFN residual.
using LayerHook = std::function<void(std::size_t layer, Vec& state)>;

// Embedding output (token + learned absolute position) for position `pos`.
Vec embed(const DecoderWeights& weights, TokenId token, std::size_t pos);

// Runs all layers for the next position without touching the cache.
LayerTrace forward_capture(const DecoderWeights& weights, const KVCache& cache, TokenId token,
                           const VisualMemory* visual, const ForwardOptions& options = {});

// Appends the trace's per-layer current-position K/V to the cache.
void commit_step(KVCache& cache, const LayerTrace& trace);

// One decode step: forward_capture + commit_step. `visual` may be null for a
// text-only run (cross-attention skipped).
LayerTrace forward_step(const DecoderWeights& weights, KVCache& cache, TokenId token,
                        const VisualMemory* visual, const ForwardOptions& options = {});

// softmax(W_lm . LN_final(h^(l))), 1 <= l <= L.
Vec per_layer_readout(const LayerTrace& trace, const DecoderWeights& weights, std::size_t layer);
Vec readout_logits(const DecoderWeights& weights, std::span<const double> state);

// Runs layers start_layer..L for the current position from `entry_state`
// (= h^(start_layer-1)), cross-attending to `visual`. Prefix K/V come from the
// committed cache; the current position's K/V are recomputed from the branch's
// own states. The cache is not modified.
LayerTrace resume_from_layer(const DecoderWeights& weights, const KVCache& cache,
                             std::size_t start_layer, std::span<const double> entry_state,
                             const VisualMemory* visual, const LayerHook& hook = {},
                             const ForwardOptions& options = {});

}  // namespace stear
