#include "stear/video.hpp"

#include <algorithm>
#include <sstream>

#include "stear/error.hpp"
#include "stear/random.hpp"

namespace stear {

namespace {

void check_positions(const VisualTokenGrid& grid, std::span<const std::size_t> positions) {
  for (std::size_t p : positions) {
    if (p >= grid.positions) {
      std::ostringstream os;
      os << "spatial position " << p << " outside [0, " << grid.positions << ")";
      fail(ErrorCode::kRange, os.str());
    }
  }
}

void check_frames(const VisualTokenGrid& grid, std::span<const std::size_t> frames) {
  for (std::size_t f : frames) {
    if (f >= grid.frames) {
      std::ostringstream os;
      os << "frame " << f << " outside [0, " << grid.frames << ")";
      fail(ErrorCode::kRange, os.str());
    }
  }
}

void check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    std::ostringstream os;
    os << "homogenization gamma " << gamma << " outside [0, 1]";
    fail(ErrorCode::kRange, os.str());
  }
}

std::vector<std::size_t> unique_sorted(std::span<const std::size_t> xs) {
  std::vector<std::size_t> out(xs.begin(), xs.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Mean over the given frames of one position, per channel. Values are summed in
// sorted order so the result does not depend on how the frames are arranged.
Vec fiber_mean(const VisualTokenGrid& grid, std::size_t position,
               std::span<const std::size_t> frames) {
  Vec mean(grid.dim, 0.0);
  std::vector<double> column(frames.size());
  for (std::size_t c = 0; c < grid.dim; ++c) {
    for (std::size_t k = 0; k < frames.size(); ++k) {
      column[k] = grid.token(position, frames[k])[c];
    }
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (double x : column) acc += x;
    mean[c] = acc / static_cast<double>(frames.size());
  }
  return mean;
}

std::vector<std::size_t> all_frames(const VisualTokenGrid& grid) {
  std::vector<std::size_t> frames(grid.frames);
  for (std::size_t f = 0; f < grid.frames; ++f) frames[f] = f;
  return frames;
}

}  // namespace

void VisualTokenGrid::validate() const {
  if (tokens.rows != positions * frames || tokens.cols != dim) {
    std::ostringstream os;
    os << "grid P=" << positions << " T=" << frames << " d=" << dim
       << " inconsistent with token matrix " << tokens.shape_string();
    fail(ErrorCode::kShape, os.str());
  }
  if (!all_finite(tokens.data)) fail(ErrorCode::kInvariant, "grid has non-finite tokens");
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

VisualTokenGrid generate_grid(std::uint64_t seed, std::size_t positions, std::size_t frames,
                              std::size_t dim) {
  if (positions == 0 || frames == 0 || dim == 0) {
    fail(ErrorCode::kRange, "generate_grid: P, T and d_vis must be >= 1");
  }
  VisualTokenGrid grid(positions, frames, dim);
  Rng rng(seed);
  for (double& x : grid.tokens.data) x = rng.normal();
  return grid;
}

VisualTokenGrid mask_visual(const VisualTokenGrid& grid) {
  VisualTokenGrid out = grid;
  std::fill(out.tokens.data.begin(), out.tokens.data.end(), 0.0);
  return out;
}

VisualTokenGrid temporal_shuffle(const VisualTokenGrid& grid,
                                 std::span<const std::size_t> positions,
                                 std::uint64_t perm_seed, bool shared_permutation) {
  check_positions(grid, positions);
  VisualTokenGrid out = grid;
  const auto targets = unique_sorted(positions);
  for (std::size_t i : targets) {
    const std::uint64_t seed = shared_permutation ? perm_seed : mix_seed(perm_seed, i);
    const auto perm = seeded_permutation(grid.frames, seed);
    for (std::size_t t = 0; t < grid.frames; ++t) {
      const auto src = grid.token(i, perm[t]);
      std::copy(src.begin(), src.end(), out.token(i, t).begin());
    }
  }
  return out;
}

VisualTokenGrid temporal_homogenize(const VisualTokenGrid& grid,
                                    std::span<const std::size_t> positions, double gamma) {
  return temporal_homogenize_frames(grid, positions, all_frames(grid), gamma);
}

VisualTokenGrid temporal_shuffle_frames(const VisualTokenGrid& grid,
                                        std::span<const std::size_t> positions,
                                        std::span<const std::size_t> frames,
                                        std::uint64_t perm_seed) {
  check_positions(grid, positions);
  check_frames(grid, frames);
  VisualTokenGrid out = grid;
  const auto targets = unique_sorted(positions);
  const auto slots = unique_sorted(frames);
  for (std::size_t i : targets) {
    const auto perm = seeded_permutation(slots.size(), mix_seed(perm_seed, i));
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const auto src = grid.token(i, slots[perm[k]]);
      std::copy(src.begin(), src.end(), out.token(i, slots[k]).begin());
    }
  }
  return out;
}

VisualTokenGrid temporal_homogenize_frames(const VisualTokenGrid& grid,
                                           std::span<const std::size_t> positions,
                                           std::span<const std::size_t> frames, double gamma) {
  check_gamma(gamma);
  check_positions(grid, positions);
  check_frames(grid, frames);
  VisualTokenGrid out = grid;
  if (gamma == 0.0) return out;
  const auto targets = unique_sorted(positions);
  const auto slots = unique_sorted(frames);
  if (slots.empty()) return out;
  for (std::size_t i : targets) {
    const Vec mean = fiber_mean(grid, i, slots);
    for (std::size_t t : slots) {
      const auto src = grid.token(i, t);
      auto dst = out.token(i, t);
      for (std::size_t c = 0; c < grid.dim; ++c) {
        dst[c] = (1.0 - gamma) * src[c] + gamma * mean[c];
      }
    }
  }
  return out;
}

}  // namespace stear
