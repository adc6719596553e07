#pragma once

#include <cstddef>
#include <cstdint>

#include "stear/model.hpp"

namespace stear {

// Fixed token and channel layout shared by the planted weights and the
// planted task generator.
//
// Tokens: BOS, END, spatial questions (one per cue), answer classes, the
// spatial "none" answer, temporal questions (one per hinted class); the
// remaining ids are fillers.
//
// Residual / visual channels: cue channels, one event-marker channel, class
// channels, per-class hint channels, the "none" hint channel, latent copies of
// the hint channels; the remaining channels carry random token identity.
// Question embeddings set the latent hints only. The evidence layer's FFN
// copies them into the hint channels the vocabulary head reads, so the
// language prior shows up in readouts from the evidence layer on.
struct PlantedLayout {
  static constexpr std::size_t kCues = 8;
  static constexpr std::size_t kClasses = 8;

  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEnd = 1;
  static constexpr TokenId kSpatialQuestion0 = 2;
  static constexpr TokenId kClass0 = kSpatialQuestion0 + kCues;
  static constexpr TokenId kNone = kClass0 + kClasses;
  static constexpr TokenId kTemporalQuestion0 = kNone + 1;
  static constexpr std::size_t kMinVocab = kTemporalQuestion0 + kClasses;

  static constexpr std::size_t kCueChannel0 = 0;
  static constexpr std::size_t kEventChannel = kCueChannel0 + kCues;
  // Receives minus the copied class signal, so copies leave the residual mean
  // (and with it the normalized prior) unchanged.
  static constexpr std::size_t kBalanceChannel = kEventChannel + 1;
  // Marks background "context" events, read by the context layer only.
  static constexpr std::size_t kContextChannel = kBalanceChannel + 1;
  // Always zero. LayerNorm maps every zero channel to the same value, so
  // queries subtract this one to read their channels exactly.
  static constexpr std::size_t kReferenceChannel = kContextChannel + 1;
  static constexpr std::size_t kClassChannel0 = 16;
  static constexpr std::size_t kHintChannel0 = kClassChannel0 + kClasses;
  static constexpr std::size_t kNoneHintChannel = kHintChannel0 + kClasses;
  static constexpr std::size_t kLatentHintChannel0 = kNoneHintChannel + 1;  // kClasses + 1 wide
  static constexpr std::size_t kIdentityChannel0 = kLatentHintChannel0 + kClasses + 1;
  static constexpr std::size_t kMinDim = kIdentityChannel0 + 8;

  // Amplitudes written into visual tokens by the task generator (before
  // attenuation). Background tokens are unit Gaussians.
  static constexpr double kCueAmplitude = 4.0;
  static constexpr double kClassAmplitude = 4.0;

  static TokenId spatial_question(std::size_t cue) {
    return kSpatialQuestion0 + static_cast<TokenId>(cue);
  }
  static TokenId temporal_question(std::size_t hinted_class) {
    return kTemporalQuestion0 + static_cast<TokenId>(hinted_class);
  }
  static TokenId class_token(std::size_t cls) { return kClass0 + static_cast<TokenId>(cls); }
};

struct PlantedSpec {
  std::size_t evidence_layer = 6;  // l_ev, 1-based
  double prior_strength = 2.5;     // b: prior logit on the question's distractor
  double evidence_gain = 12.0;      // g: logit per unit of copied class signal
  double attention_sharpness = 2.0;
  // Key gain on the event channel falls by this much per frame slot, so the
  // event query prefers earlier frames.
  double slot_decay = 0.06;
  // Layer that reads context-marked tokens (event query, slot-gained keys) and
  // copies their classes, like the evidence layer. 0 disables it.
  std::size_t context_layer = 7;
  double context_sharpness = 4.0;
  // Each late-third layer's FFN grows the exposed hint channels by this
  // factor, so top-layer readouts lean back toward the text prior.
  double late_prior_growth = 0.15;
  // Std of the random weights in every non-designated entry.
  double noise = 0.02;
  std::uint64_t seed = 1234;
};

// Hand-built weights: layer `evidence_layer` cross-attends from a question's
// cue (or event) channel to matching visual tokens and copies their class
// channels into the residual; the head maps class channels to answer tokens
// with gain g and each question's hint channel to its distractor with logit b.
// All other layers are near pass-through.
DecoderWeights construct_planted_weights(const PlantedSpec& spec, const ModelConfig& config);

}  // namespace stear
