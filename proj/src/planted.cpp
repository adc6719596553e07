#include "stear/planted.hpp"

#include <cmath>
#include <sstream>

#include "stear/error.hpp"
#include "stear/random.hpp"

namespace stear {

namespace {

using Layout = PlantedLayout;

// Prior channels stay noise-free: the hint units have no threshold, so any
// noise reaching them would leak into the prior.
void clear_column(Mat& m, std::size_t col) {
  for (std::size_t r = 0; r < m.rows; ++r) m(r, col) = 0.0;
}

Mat noise_mat(Rng& rng, std::size_t rows, std::size_t cols, double sd) {
  Mat m(rows, cols);
  for (double& x : m.data) x = sd * rng.normal();
  return m;
}

struct LnStats {
  double mean = 0.0;
  double inv_std = 1.0;
};

LnStats stats_of(std::span<const double> v, double eps) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return {mean, 1.0 / std::sqrt(var + eps)};
}

}  // namespace

DecoderWeights construct_planted_weights(const PlantedSpec& spec, const ModelConfig& config) {
  config.validate();
  const std::size_t L = config.num_layers;
  const std::size_t d = config.model_dim;
  const std::size_t dh = config.head_dim();
  if (spec.evidence_layer < 1 || spec.evidence_layer > L) {
    std::ostringstream os;
    os << "planted.evidence_layer " << spec.evidence_layer << " outside [1, " << L << "]";
    fail(ErrorCode::kConfig, os.str());
  }
  if (spec.prior_strength < 0.0) fail(ErrorCode::kConfig, "planted.prior_strength must be >= 0");
  if (spec.context_layer != 0 &&
      (spec.context_layer > L || spec.context_layer == spec.evidence_layer)) {
    fail(ErrorCode::kConfig, "planted.context_layer must be 0 or a layer in [1, L] other than "
                             "planted.evidence_layer");
  }
  if (spec.late_prior_growth < 0.0)
    fail(ErrorCode::kConfig, "planted.late_prior_growth must be >= 0");
  if (spec.evidence_gain < 0.0) fail(ErrorCode::kConfig, "planted.evidence_gain must be >= 0");
  if (d < Layout::kMinDim || config.visual_dim != d || config.vocab_size < Layout::kMinVocab ||
      dh < Layout::kCues + 1 || config.ffn_dim < Layout::kClasses + 1) {
    std::ostringstream os;
    os << "planted weights need model_dim >= " << Layout::kMinDim
       << ", visual_dim == model_dim, vocab_size >= " << Layout::kMinVocab
       << ", head_dim >= " << Layout::kCues + 1 << " and ffn_dim >= " << Layout::kClasses + 1;
    fail(ErrorCode::kConfig, os.str());
  }

  Rng rng(spec.seed);
  const double sd = spec.noise;
  DecoderWeights w;
  w.config = config;

  // Token embeddings: unit random identity code plus designated channels.
  w.token_embedding = Mat(config.vocab_size, d);
  for (std::size_t t = 0; t < config.vocab_size; ++t) {
    auto row = w.token_embedding.row(t);
    for (std::size_t c = Layout::kIdentityChannel0; c < d; ++c) row[c] = rng.normal();
  }
  for (std::size_t cue = 0; cue < Layout::kCues; ++cue) {
    auto row = w.token_embedding.row(static_cast<std::size_t>(Layout::spatial_question(cue)));
    row[Layout::kCueChannel0 + cue] = 1.0;
    row[Layout::kLatentHintChannel0 + Layout::kClasses] = 1.0;
  }
  for (std::size_t k = 0; k < Layout::kClasses; ++k) {
    auto row = w.token_embedding.row(static_cast<std::size_t>(Layout::temporal_question(k)));
    row[Layout::kEventChannel] = 1.0;
    row[Layout::kLatentHintChannel0 + k] = 1.0;
  }
  w.position_embedding = noise_mat(rng, config.max_text_len, d, sd);
  // Cue/event/context channels drive the sharp retrieval queries and the hint
  // channels carry the prior; both only change through the designed paths.
  std::vector<std::size_t> exact_channels;
  for (std::size_t c = 0; c < Layout::kClassChannel0; ++c) exact_channels.push_back(c);
  for (std::size_t c = Layout::kHintChannel0; c < Layout::kIdentityChannel0; ++c) {
    exact_channels.push_back(c);
  }
  for (std::size_t c : exact_channels) clear_column(w.position_embedding, c);

  // Average LayerNorm statistics of the question embeddings; used to express
  // the designed weights in post-norm units.
  double on_value = 0.0;   // normalized value of a channel holding 1.0
  double inv_std = 0.0;
  std::size_t nq = 0;
  auto accumulate = [&](TokenId tok) {
    const auto row = w.token_embedding.row(static_cast<std::size_t>(tok));
    const LnStats s = stats_of(row, config.eps);
    on_value += (1.0 - s.mean) * s.inv_std;
    inv_std += s.inv_std;
    ++nq;
  };
  for (std::size_t cue = 0; cue < Layout::kCues; ++cue) accumulate(Layout::spatial_question(cue));
  for (std::size_t k = 0; k < Layout::kClasses; ++k) accumulate(Layout::temporal_question(k));
  on_value /= static_cast<double>(nq);
  inv_std /= static_cast<double>(nq);

  w.layers.resize(L);
  for (std::size_t l = 1; l <= L; ++l) {
    LayerWeights& lw = w.layer(l);
    lw.ln_self_scale.assign(d, 1.0);
    lw.ln_self_shift.assign(d, 0.0);
    lw.ln_cross_scale.assign(d, 1.0);
    lw.ln_cross_shift.assign(d, 0.0);
    lw.ln_ffn_scale.assign(d, 1.0);
    lw.ln_ffn_shift.assign(d, 0.0);
    lw.self_q = noise_mat(rng, d, d, sd);
    lw.self_k = noise_mat(rng, d, d, sd);
    lw.self_v = noise_mat(rng, d, d, sd);
    lw.self_o = noise_mat(rng, d, d, sd);
    lw.cross_q = noise_mat(rng, d, d, sd);
    lw.cross_k = noise_mat(rng, d, d, sd);
    lw.cross_v = noise_mat(rng, d, d, sd);
    lw.cross_o = noise_mat(rng, d, d, sd);
    lw.ffn_up = noise_mat(rng, d, config.ffn_dim, sd);
    lw.ffn_down = noise_mat(rng, config.ffn_dim, d, sd);
    for (std::size_t c : exact_channels) {
      clear_column(lw.self_o, c);
      clear_column(lw.cross_o, c);
      clear_column(lw.ffn_down, c);
    }
  }

  // Query units are raw residual units: LN(h)_c - LN(h)_ref == h_c * inv_std.
  const double q_scale = spec.attention_sharpness * std::sqrt(static_cast<double>(dh)) / inv_std;
  auto copy_classes = [&](LayerWeights& lw) {
    // Head 0 values carry class channels; the output projection writes them
    // back to the residual class channels scaled to unit class amplitude.
    const double copy = 1.0 / Layout::kClassAmplitude;
    for (std::size_t k = 0; k < Layout::kClasses; ++k) {
      lw.cross_v(Layout::kClassChannel0 + k, k) = 1.0;
      lw.cross_o(k, Layout::kClassChannel0 + k) = copy;
      lw.cross_o(k, Layout::kBalanceChannel) = -copy;
    }
  };

  // Evidence layer: every head matches query cue/event channels against the
  // same visual channels, so head-averaged attention equals each head's.
  {
    LayerWeights& lw = w.layer(spec.evidence_layer);
    // Exact matching: key noise would be amplified by the sharp query.
    lw.cross_q = Mat(d, d);
    lw.cross_k = Mat(d, d);
    for (std::size_t h = 0; h < config.num_heads; ++h) {
      for (std::size_t j = 0; j <= Layout::kCues; ++j) {
        // j == kCues is the event channel (kEventChannel == kCueChannel0 + kCues).
        lw.cross_q(Layout::kCueChannel0 + j, h * dh + j) = q_scale;
        lw.cross_q(Layout::kReferenceChannel, h * dh + j) = -q_scale;
        lw.cross_k(Layout::kCueChannel0 + j, h * dh + j) = 1.0;
      }
    }
    copy_classes(lw);
    // FFN units 0..kClasses expose latent hint j as hint j (the last one is
    // the "none" hint, which sits right after the class hints).
    for (std::size_t j = 0; j <= Layout::kClasses; ++j) {
      clear_column(lw.ffn_up, j);
      lw.ffn_up(Layout::kLatentHintChannel0 + j, j) = 1.0;
      lw.ffn_down(j, Layout::kHintChannel0 + j) = 1.0 / on_value;
    }
  }

  if (spec.context_layer != 0) {
    LayerWeights& lw = w.layer(spec.context_layer);
    lw.cross_q = Mat(d, d);
    lw.cross_k = Mat(d, d);
    for (std::size_t h = 0; h < config.num_heads; ++h) {
      const double scale = spec.context_sharpness * std::sqrt(static_cast<double>(dh)) / inv_std;
      lw.cross_q(Layout::kEventChannel, h * dh + Layout::kCues) = scale;
      lw.cross_q(Layout::kReferenceChannel, h * dh + Layout::kCues) = -scale;
      lw.cross_k(Layout::kContextChannel, h * dh + Layout::kCues) = 1.0;
    }
    copy_classes(lw);
  }

  for (std::size_t l = (2 * L) / 3 + 1; l <= L; ++l) {
    if (l == spec.evidence_layer) continue;
    LayerWeights& lw = w.layer(l);
    for (std::size_t j = 0; j <= Layout::kClasses; ++j) {
      clear_column(lw.ffn_up, j);
      lw.ffn_up(Layout::kHintChannel0 + j, j) = 1.0;
      lw.ffn_down(j, Layout::kHintChannel0 + j) = spec.late_prior_growth / on_value;
    }
  }

  w.visual_proj = Mat::identity(d);

  w.slot_gain = Mat(config.max_frames, d);
  for (std::size_t t = 0; t < config.max_frames; ++t) {
    auto row = w.slot_gain.row(t);
    for (std::size_t c = 0; c < d; ++c) row[c] = 1.0;
    const double gain = std::max(0.05, 1.0 - spec.slot_decay * static_cast<double>(t));
    for (std::size_t h = 0; h < config.num_heads; ++h) row[h * dh + Layout::kCues] = gain;
  }

  w.final_norm_scale.assign(d, 1.0);
  w.final_norm_shift.assign(d, 0.0);
  w.lm_head = noise_mat(rng, d, config.vocab_size, sd);
  // Class channel k -> answer token k: copied signal c gives ~ g * c logits.
  const double class_w = spec.evidence_gain / inv_std;
  for (std::size_t k = 0; k < Layout::kClasses; ++k) {
    w.lm_head(Layout::kClassChannel0 + k, static_cast<std::size_t>(Layout::class_token(k))) =
        class_w;
  }
  // Hint channels -> the question's distractor with ~ b logits.
  const double hint_w = spec.prior_strength / on_value;
  for (std::size_t k = 0; k < Layout::kClasses; ++k) {
    w.lm_head(Layout::kHintChannel0 + k, static_cast<std::size_t>(Layout::class_token(k))) =
        hint_w;
  }
  w.lm_head(Layout::kNoneHintChannel, static_cast<std::size_t>(Layout::kNone)) = hint_w;

  w.validate();
  return w;
}

}  // namespace stear
