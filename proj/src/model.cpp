#include "stear/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "stear/error.hpp"
#include "stear/random.hpp"

namespace stear {

namespace {

void require_positive(std::size_t value, const char* field) {
  if (value == 0) fail(ErrorCode::kConfig, std::string("model.") + field + " must be >= 1");
}

void check_shape(const Mat& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows != rows || m.cols != cols || m.data.size() != rows * cols) {
    std::ostringstream os;
    os << "tensor " << name << " has shape " << m.shape_string() << ", expected [" << rows
       << "x" << cols << "]";
    fail(ErrorCode::kShape, os.str());
  }
}

void check_len(const Vec& v, std::size_t n, const std::string& name) {
  if (v.size() != n) {
    std::ostringstream os;
    os << "tensor " << name << " has length " << v.size() << ", expected " << n;
    fail(ErrorCode::kShape, os.str());
  }
}

Mat gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Mat m(rows, cols);
  for (double& x : m.data) x = stddev * rng.normal();
  return m;
}

// Multi-head attention of one query against `keys`/`values` rows [0, count).
// Writes the concatenated head outputs into `out` and (optionally) the
// per-head and head-averaged attention rows.
struct AttentionResult {
  Vec output;
  Vec mean_weights;
  std::vector<Vec> head_weights;
};

AttentionResult attend(std::span<const double> query, const std::vector<const double*>& keys,
                       const std::vector<const double*>& values, std::size_t num_heads,
                       std::size_t head_dim, bool keep_heads) {
  const std::size_t count = keys.size();
  AttentionResult res;
  res.output.assign(num_heads * head_dim, 0.0);
  res.mean_weights.assign(count, 0.0);
  if (keep_heads) res.head_weights.resize(num_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Vec scores(count);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * head_dim;
    for (std::size_t n = 0; n < count; ++n) {
      double acc = 0.0;
      for (std::size_t j = 0; j < head_dim; ++j) acc += query[off + j] * keys[n][off + j];
      scores[n] = acc * scale;
    }
    const Vec w = softmax_row(scores);
    for (std::size_t n = 0; n < count; ++n) {
      const double wn = w[n];
      for (std::size_t j = 0; j < head_dim; ++j) res.output[off + j] += wn * values[n][off + j];
      res.mean_weights[n] += wn;
    }
    if (keep_heads) res.head_weights[h] = w;
  }
  for (double& x : res.mean_weights) x /= static_cast<double>(num_heads);
  return res;
}

void add_into(Vec& x, const Vec& delta) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += delta[i];
}

// Shared layer loop used by forward_capture and resume_from_layer.
void run_layers(const DecoderWeights& weights, const KVCache& cache, std::size_t start_layer,
                Vec state, const VisualMemory* visual, const LayerHook& hook,
                const ForwardOptions& options, LayerTrace& trace) {
  const ModelConfig& cfg = weights.config;
  const std::size_t L = cfg.num_layers;
  const std::size_t dh = cfg.head_dim();
  const std::size_t prefix = cache.length();
  trace.position = prefix;
  trace.hidden.assign(L + 1, Vec{});
  trace.cross_attention.assign(L + 1, Vec{});
  trace.self_keys.assign(L + 1, Vec{});
  trace.self_values.assign(L + 1, Vec{});
  if (options.capture_heads) trace.cross_attention_heads.assign(L + 1, {});
  trace.hidden[start_layer - 1] = state;

  for (std::size_t l = start_layer; l <= L; ++l) {
    const LayerWeights& lw = weights.layer(l);

    // Self-attention over committed prefix plus the current position.
    {
      const Vec a = layer_norm(state, lw.ln_self_scale, lw.ln_self_shift, cfg.eps);
      const Vec q = vec_mat(a, lw.self_q);
      Vec k = vec_mat(a, lw.self_k);
      Vec v = vec_mat(a, lw.self_v);
      std::vector<const double*> ks;
      std::vector<const double*> vs;
      ks.reserve(prefix + 1);
      vs.reserve(prefix + 1);
      for (std::size_t p = 0; p < prefix; ++p) {
        ks.push_back(cache.keys[l - 1][p].data());
        vs.push_back(cache.values[l - 1][p].data());
      }
      ks.push_back(k.data());
      vs.push_back(v.data());
      const AttentionResult att = attend(q, ks, vs, cfg.num_heads, dh, false);
      add_into(state, vec_mat(att.output, lw.self_o));
      trace.self_keys[l] = std::move(k);
      trace.self_values[l] = std::move(v);
    }

    // Cross-attention over all visual tokens.
    if (visual != nullptr && visual->size() > 0) {
      const Vec b = layer_norm(state, lw.ln_cross_scale, lw.ln_cross_shift, cfg.eps);
      const Vec q = vec_mat(b, lw.cross_q);
      const Mat& K = visual->keys[l - 1];
      const Mat& V = visual->values[l - 1];
      std::vector<const double*> ks(K.rows);
      std::vector<const double*> vs(V.rows);
      for (std::size_t n = 0; n < K.rows; ++n) {
        ks[n] = K.row(n).data();
        vs[n] = V.row(n).data();
      }
      AttentionResult att = attend(q, ks, vs, cfg.num_heads, dh, options.capture_heads);
      add_into(state, vec_mat(att.output, lw.cross_o));
      trace.cross_attention[l] = std::move(att.mean_weights);
      if (options.capture_heads) trace.cross_attention_heads[l] = std::move(att.head_weights);
    }

    // Position-wise FFN (ReLU).
    {
      const Vec c = layer_norm(state, lw.ln_ffn_scale, lw.ln_ffn_shift, cfg.eps);
      Vec u = vec_mat(c, lw.ffn_up);
      for (double& x : u) x = x > 0.0 ? x : 0.0;
      add_into(state, vec_mat(u, lw.ffn_down));
    }

    if (hook) hook(l, state);
    trace.hidden[l] = state;
  }
  trace.logits = readout_logits(weights, state);
}

}  // namespace

void ModelConfig::validate() const {
  require_positive(num_layers, "num_layers");
  require_positive(model_dim, "model_dim");
  require_positive(num_heads, "num_heads");
  require_positive(vocab_size, "vocab_size");
  require_positive(ffn_dim, "ffn_dim");
  require_positive(max_text_len, "max_text_len");
  require_positive(max_frames, "max_frames");
  require_positive(visual_dim, "visual_dim");
  if (num_layers < 3) {
    fail(ErrorCode::kConfig, "model.num_layers must be >= 3 (early/middle/late thirds)");
  }
  if (model_dim % num_heads != 0) {
    std::ostringstream os;
    os << "model.model_dim (" << model_dim << ") not divisible by model.num_heads ("
       << num_heads << ")";
    fail(ErrorCode::kConfig, os.str());
  }
  if (!(eps > 0.0)) fail(ErrorCode::kConfig, "model.eps must be positive");
}

void DecoderWeights::validate() const {
  config.validate();
  const std::size_t d = config.model_dim;
  check_shape(token_embedding, config.vocab_size, d, "token_embedding");
  check_shape(position_embedding, config.max_text_len, d, "position_embedding");
  if (layers.size() != config.num_layers) {
    std::ostringstream os;
    os << "weights carry " << layers.size() << " layers, config says " << config.num_layers;
    fail(ErrorCode::kShape, os.str());
  }
  for (std::size_t l = 1; l <= layers.size(); ++l) {
    const auto& lw = layers[l - 1];
    const std::string p = "layers." + std::to_string(l) + ".";
    check_len(lw.ln_self_scale, d, p + "ln_self.scale");
    check_len(lw.ln_self_shift, d, p + "ln_self.shift");
    check_len(lw.ln_cross_scale, d, p + "ln_cross.scale");
    check_len(lw.ln_cross_shift, d, p + "ln_cross.shift");
    check_len(lw.ln_ffn_scale, d, p + "ln_ffn.scale");
    check_len(lw.ln_ffn_shift, d, p + "ln_ffn.shift");
    for (const auto* m : {&lw.self_q, &lw.self_k, &lw.self_v, &lw.self_o, &lw.cross_q,
                          &lw.cross_k, &lw.cross_v, &lw.cross_o}) {
      check_shape(*m, d, d, p + "attention projection");
    }
    check_shape(lw.ffn_up, d, config.ffn_dim, p + "ffn_up");
    check_shape(lw.ffn_down, config.ffn_dim, d, p + "ffn_down");
  }
  check_shape(visual_proj, config.visual_dim, d, "visual_proj");
  check_shape(slot_gain, config.max_frames, d, "slot_gain");
  check_len(final_norm_scale, d, "final_norm.scale");
  check_len(final_norm_shift, d, "final_norm.shift");
  check_shape(lm_head, d, config.vocab_size, "lm_head");
}

DecoderWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.model_dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(seed);
  DecoderWeights w;
  w.config = config;
  w.token_embedding = gaussian(rng, config.vocab_size, d, 1.0);
  w.position_embedding = gaussian(rng, config.max_text_len, d, sd);
  w.layers.resize(config.num_layers);
  for (auto& lw : w.layers) {
    lw.ln_self_scale.assign(d, 1.0);
    lw.ln_self_shift.assign(d, 0.0);
    lw.ln_cross_scale.assign(d, 1.0);
    lw.ln_cross_shift.assign(d, 0.0);
    lw.ln_ffn_scale.assign(d, 1.0);
    lw.ln_ffn_shift.assign(d, 0.0);
    lw.self_q = gaussian(rng, d, d, sd);
    lw.self_k = gaussian(rng, d, d, sd);
    lw.self_v = gaussian(rng, d, d, sd);
    lw.self_o = gaussian(rng, d, d, sd);
    lw.cross_q = gaussian(rng, d, d, sd);
    lw.cross_k = gaussian(rng, d, d, sd);
    lw.cross_v = gaussian(rng, d, d, sd);
    lw.cross_o = gaussian(rng, d, d, sd);
    lw.ffn_up = gaussian(rng, d, config.ffn_dim, sd);
    lw.ffn_down = gaussian(rng, config.ffn_dim, d, sd);
  }
  w.visual_proj = gaussian(rng, config.visual_dim, d, 1.0 / std::sqrt(double(config.visual_dim)));
  w.slot_gain = gaussian(rng, config.max_frames, d, sd);
  for (double& g : w.slot_gain.data) g += 1.0;
  w.final_norm_scale.assign(d, 1.0);
  w.final_norm_shift.assign(d, 0.0);
  w.lm_head = gaussian(rng, d, config.vocab_size, sd);
  return w;
}

VisualMemory encode_visual(const DecoderWeights& weights, const VisualTokenGrid& grid) {
  const ModelConfig& cfg = weights.config;
  grid.validate();
  if (grid.dim != cfg.visual_dim) {
    std::ostringstream os;
    os << "grid token dim " << grid.dim << " does not match model visual_dim " << cfg.visual_dim;
    fail(ErrorCode::kShape, os.str());
  }
  if (grid.frames > cfg.max_frames) {
    std::ostringstream os;
    os << "grid has " << grid.frames << " frames, model supports " << cfg.max_frames;
    fail(ErrorCode::kShape, os.str());
  }
  VisualMemory mem;
  mem.positions = grid.positions;
  mem.frames = grid.frames;
  mem.projected = matmul(grid.tokens, weights.visual_proj);
  mem.keys.resize(cfg.num_layers);
  mem.values.resize(cfg.num_layers);
  for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
    const LayerWeights& lw = weights.layer(l);
    Mat K = matmul(mem.projected, lw.cross_k);
    for (std::size_t n = 0; n < K.rows; ++n) {
      const auto gain = weights.slot_gain.row(grid.frame_of(n));
      auto row = K.row(n);
      for (std::size_t c = 0; c < K.cols; ++c) row[c] *= gain[c];
    }
    mem.keys[l - 1] = std::move(K);
    mem.values[l - 1] = matmul(mem.projected, lw.cross_v);
  }
  return mem;
}

VisualMemory patch_visual(const DecoderWeights& weights, const VisualMemory& base,
                          const VisualTokenGrid& variant, std::span<const std::size_t> rows,
                          std::size_t first_layer) {
  const ModelConfig& cfg = weights.config;
  if (variant.positions != base.positions || variant.frames != base.frames ||
      variant.dim != cfg.visual_dim) {
    fail(ErrorCode::kShape, "patch_visual: variant grid shape differs from encoded grid");
  }
  VisualMemory mem = base;
  for (std::size_t n : rows) {
    if (n >= mem.size()) fail(ErrorCode::kRange, "patch_visual: token row out of range");
    const Vec proj = vec_mat(variant.tokens.row(n), weights.visual_proj);
    std::copy(proj.begin(), proj.end(), mem.projected.row(n).begin());
    const auto gain = weights.slot_gain.row(variant.frame_of(n));
    for (std::size_t l = std::max<std::size_t>(first_layer, 1); l <= cfg.num_layers; ++l) {
      const LayerWeights& lw = weights.layer(l);
      Vec k = vec_mat(proj, lw.cross_k);
      for (std::size_t c = 0; c < k.size(); ++c) k[c] *= gain[c];
      const Vec v = vec_mat(proj, lw.cross_v);
      std::copy(k.begin(), k.end(), mem.keys[l - 1].row(n).begin());
      std::copy(v.begin(), v.end(), mem.values[l - 1].row(n).begin());
    }
  }
  return mem;
}

Vec embed(const DecoderWeights& weights, TokenId token, std::size_t pos) {
  const ModelConfig& cfg = weights.config;
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
    std::ostringstream os;
    os << "token id " << token << " outside vocabulary [0, " << cfg.vocab_size << ")";
    fail(ErrorCode::kRange, os.str());
  }
  if (pos >= cfg.max_text_len) {
    std::ostringstream os;
    os << "text position " << pos << " exceeds max_text_len " << cfg.max_text_len;
    fail(ErrorCode::kRange, os.str());
  }
  Vec x(cfg.model_dim);
  const auto te = weights.token_embedding.row(static_cast<std::size_t>(token));
  const auto pe = weights.position_embedding.row(pos);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = te[i] + pe[i];
  return x;
}

LayerTrace forward_capture(const DecoderWeights& weights, const KVCache& cache, TokenId token,
                           const VisualMemory* visual, const ForwardOptions& options) {
  if (cache.num_layers() != weights.config.num_layers) {
    fail(ErrorCode::kShape, "KV cache layer count does not match the model");
  }
  LayerTrace trace;
  run_layers(weights, cache, 1, embed(weights, token, cache.length()), visual, {}, options,
             trace);
  return trace;
}

void commit_step(KVCache& cache, const LayerTrace& trace) {
  if (trace.position != cache.length()) {
    fail(ErrorCode::kInvariant, "commit_step: trace was computed for a different position");
  }
  for (std::size_t l = 1; l <= cache.num_layers(); ++l) {
    if (trace.self_keys[l].empty()) {
      fail(ErrorCode::kInvariant, "commit_step: trace lacks K/V for layer " + std::to_string(l));
    }
    cache.keys[l - 1].push_back(trace.self_keys[l]);
    cache.values[l - 1].push_back(trace.self_values[l]);
  }
}

LayerTrace forward_step(const DecoderWeights& weights, KVCache& cache, TokenId token,
                        const VisualMemory* visual, const ForwardOptions& options) {
  LayerTrace trace = forward_capture(weights, cache, token, visual, options);
  commit_step(cache, trace);
  return trace;
}

Vec readout_logits(const DecoderWeights& weights, std::span<const double> state) {
  const Vec n = layer_norm(state, weights.final_norm_scale, weights.final_norm_shift,
                           weights.config.eps);
  return vec_mat(n, weights.lm_head);
}

Vec per_layer_readout(const LayerTrace& trace, const DecoderWeights& weights, std::size_t layer) {
  const std::size_t L = weights.config.num_layers;
  if (layer < 1 || layer > L) {
    std::ostringstream os;
    os << "readout layer " << layer << " outside [1, " << L << "]";
    fail(ErrorCode::kRange, os.str());
  }
  if (trace.hidden.size() != L + 1 || trace.hidden[layer].empty()) {
    fail(ErrorCode::kRange, "trace has no hidden state for layer " + std::to_string(layer));
  }
  return softmax_row(readout_logits(weights, trace.hidden[layer]));
}

LayerTrace resume_from_layer(const DecoderWeights& weights, const KVCache& cache,
                             std::size_t start_layer, std::span<const double> entry_state,
                             const VisualMemory* visual, const LayerHook& hook,
                             const ForwardOptions& options) {
  const ModelConfig& cfg = weights.config;
  if (start_layer < 1 || start_layer > cfg.num_layers) {
    std::ostringstream os;
    os << "resume layer " << start_layer << " outside [1, " << cfg.num_layers << "]";
    fail(ErrorCode::kRange, os.str());
  }
  if (entry_state.size() != cfg.model_dim) {
    std::ostringstream os;
    os << "entry state has dim " << entry_state.size() << ", model_dim is " << cfg.model_dim;
    fail(ErrorCode::kShape, os.str());
  }
  if (cache.num_layers() != cfg.num_layers) {
    fail(ErrorCode::kShape, "KV cache layer count does not match the model");
  }
  if (cache.length() >= cfg.max_text_len) {
    fail(ErrorCode::kRange, "resume_from_layer: cache already at max_text_len");
  }
  LayerTrace trace;
  run_layers(weights, cache, start_layer, Vec(entry_state.begin(), entry_state.end()), visual,
             hook, options, trace);
  return trace;
}

}  // namespace stear
