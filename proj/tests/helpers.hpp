#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "stear/engine.hpp"
#include "stear/planted.hpp"
#include "stear/random.hpp"
#include "stear/tasks.hpp"

namespace testing {

inline stear::ModelConfig small_config(std::size_t layers = 6) {
  stear::ModelConfig c;
  c.num_layers = layers;
  c.model_dim = 16;
  c.num_heads = 2;
  c.vocab_size = 12;
  c.ffn_dim = 24;
  c.max_text_len = 16;
  c.max_frames = 8;
  c.visual_dim = 8;
  return c;
}

inline stear::InterventionConfig small_icfg(const stear::ModelConfig& c) {
  return stear::InterventionConfig::defaults_for(c);
}

inline std::vector<stear::TokenId> random_prompt(std::uint64_t seed, std::size_t n,
                                                 std::size_t vocab) {
  stear::Rng rng(seed);
  std::vector<stear::TokenId> p(n);
  for (auto& t : p) t = static_cast<stear::TokenId>(rng.below(vocab));
  return p;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline stear::ModelConfig planted_config() { return stear::ModelConfig{}; }

}  // namespace testing
