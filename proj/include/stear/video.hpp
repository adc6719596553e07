#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "stear/tensor.hpp"

namespace stear {

// The encoded video: P spatial positions x T frames of d_vis-dim tokens.
// Token (i, tau) lives in row i*T + tau of `tokens`.
struct VisualTokenGrid {
  std::size_t positions = 0;
  std::size_t frames = 0;
  std::size_t dim = 0;
  Mat tokens;

  VisualTokenGrid() = default;
  VisualTokenGrid(std::size_t p, std::size_t t, std::size_t d)
      : positions(p), frames(t), dim(d), tokens(p * t, d) {}

  std::size_t size() const { return positions * frames; }
  std::size_t flatten(std::size_t position, std::size_t frame) const {
    return position * frames + frame;
  }
  std::size_t position_of(std::size_t index) const { return index / frames; }
  std::size_t frame_of(std::size_t index) const { return index % frames; }

  std::span<const double> token(std::size_t position, std::size_t frame) const {
    return tokens.row(flatten(position, frame));
  }
  std::span<double> token(std::size_t position, std::size_t frame) {
    return tokens.row(flatten(position, frame));
  }

  void validate() const;
  bool operator==(const VisualTokenGrid&) const = default;
};

VisualTokenGrid generate_grid(std::uint64_t seed, std::size_t positions, std::size_t frames,
                              std::size_t dim);

// All-zero tokens of the same shape; used only by diagnostics.
VisualTokenGrid mask_visual(const VisualTokenGrid& grid);

// Permutes the temporal fiber of every listed position with its own seeded
// uniform permutation. With shared_permutation, one draw is reused for all.
VisualTokenGrid temporal_shuffle(const VisualTokenGrid& grid,
                                 std::span<const std::size_t> positions,
                                 std::uint64_t perm_seed, bool shared_permutation = false);

// z'_{i,tau} = (1 - gamma) z_{i,tau} + gamma * mean_tau(z_{i,.}) for listed positions.
VisualTokenGrid temporal_homogenize(const VisualTokenGrid& grid,
                                    std::span<const std::size_t> positions, double gamma);

// Frame-restricted variants: the sub-fiber over `frames` at each listed position
// is shuffled / homogenized toward its mean over those frames only.
VisualTokenGrid temporal_shuffle_frames(const VisualTokenGrid& grid,
                                        std::span<const std::size_t> positions,
                                        std::span<const std::size_t> frames,
                                        std::uint64_t perm_seed);
VisualTokenGrid temporal_homogenize_frames(const VisualTokenGrid& grid,
                                           std::span<const std::size_t> positions,
                                           std::span<const std::size_t> frames, double gamma);

// Seeded uniform permutation of [0, n) (Fisher-Yates).
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

}  // namespace stear
