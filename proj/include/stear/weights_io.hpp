#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stear/model.hpp"
#include "stear/video.hpp"

namespace stear {

// Binary container, all integers little-endian:
//
//   magic[8]            "STEARTOY" (weights) or "STEARGRD" (grid bank)
//   u32 version         = 1
//   [weights only] ModelConfig: u32 num_layers, model_dim, num_heads,
//                  vocab_size, ffn_dim, max_text_len, max_frames, visual_dim;
//                  f64 eps
//   u32 tensor_count
//   tensor_count x { u32 name_len, name bytes, u32 rank, u64 dims[rank],
//                    f64 payload[prod(dims)] }
//
// Weight tensors appear in the fixed order produced by weight_tensor_names().
inline constexpr char kWeightsMagic[8] = {'S', 'T', 'E', 'A', 'R', 'T', 'O', 'Y'};
inline constexpr char kGridMagic[8] = {'S', 'T', 'E', 'A', 'R', 'G', 'R', 'D'};
inline constexpr std::uint32_t kFormatVersion = 1;

std::vector<std::string> weight_tensor_names(const ModelConfig& config);

std::vector<std::uint8_t> serialize_weights(const DecoderWeights& weights);
DecoderWeights deserialize_weights(std::span<const std::uint8_t> bytes);

// Grid bank: one rank-3 tensor [P, T, d_vis] per grid, named "grid/<index>".
std::vector<std::uint8_t> serialize_grids(const std::vector<VisualTokenGrid>& grids);
std::vector<VisualTokenGrid> deserialize_grids(std::span<const std::uint8_t> bytes);

void save_weights(const DecoderWeights& weights, const std::filesystem::path& path);
DecoderWeights load_weights(const std::filesystem::path& path);
void save_grids(const std::vector<VisualTokenGrid>& grids, const std::filesystem::path& path);
std::vector<VisualTokenGrid> load_grids(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::string hex64(std::uint64_t value);

}  // namespace stear
