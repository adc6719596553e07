#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "stear/diagnostics.hpp"
#include "stear/error.hpp"
#include "stear/model.hpp"
#include "stear/weights_io.hpp"

using namespace stear;
using testing::max_abs_diff;
using testing::small_config;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInvariant;
}

// Feeds `prompt` and returns the cache and the trace of the last token.
LayerTrace run_prompt(const DecoderWeights& w, KVCache& cache, const VisualMemory* vis,
                      const std::vector<TokenId>& prompt) {
  LayerTrace last;
  for (auto t : prompt) last = forward_step(w, cache, t, vis);
  return last;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("init_weights is seeded") {
  const auto c = small_config();
  const auto a = init_weights(c, 3);
  CHECK(a == init_weights(c, 3));
  CHECK_FALSE(a == init_weights(c, 4));
  CHECK_NOTHROW(a.validate());
}

TEST_CASE("config validation") {
  auto c = small_config();
  c.num_heads = 3;  // 16 % 3 != 0
  CHECK(code_of([&] { (void)init_weights(c, 1); }) == ErrorCode::kConfig);
  c = small_config();
  c.num_layers = 2;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::kConfig);
  c = small_config();
  c.vocab_size = 0;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::kConfig);
}

TEST_CASE("zero visual tokens equal a text-only run") {
  const auto c = small_config();
  const auto w = init_weights(c, 5);
  const auto zero = mask_visual(generate_grid(1, 3, 4, c.visual_dim));
  const auto vis = encode_visual(w, zero);
  KVCache with(c.num_layers), without(c.num_layers);
  const auto prompt = testing::random_prompt(2, 5, c.vocab_size);
  for (auto t : prompt) {
    const auto a = forward_step(w, with, t, &vis);
    const auto b = forward_step(w, without, t, nullptr);
    CHECK(max_abs_diff(a.logits, b.logits) < 1e-9);
  }
}

TEST_CASE("forward_step determinism and cross-attention rows") {
  const auto c = small_config();
  const auto w = init_weights(c, 6);
  const auto vis = encode_visual(w, generate_grid(2, 3, 4, c.visual_dim));
  KVCache a(c.num_layers), b(c.num_layers);
  const auto prompt = testing::random_prompt(3, 4, c.vocab_size);
  LayerTrace ta, tb;
  for (auto t : prompt) {
    ta = forward_step(w, a, t, &vis);
    tb = forward_step(w, b, t, &vis);
    CHECK(ta.logits == tb.logits);
  }
  CHECK(a == b);
  CHECK(a.length() == prompt.size());
  std::size_t rows = 0;
  for (std::size_t l = 1; l <= c.num_layers; ++l) {
    const auto& row = ta.cross_attention[l];
    REQUIRE(row.size() == 12);
    ++rows;
    for (double x : row) CHECK(x >= 0.0);
    CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) < 1e-9);
  }
  CHECK(rows == c.num_layers);
}

TEST_CASE("forward_step rejects an overlength prefix") {
  auto c = small_config();
  c.max_text_len = 3;
  const auto w = init_weights(c, 7);
  KVCache cache(c.num_layers);
  for (int i = 0; i < 3; ++i) forward_step(w, cache, 1, nullptr);
  CHECK(code_of([&] { forward_step(w, cache, 1, nullptr); }) == ErrorCode::kRange);
}

TEST_CASE("per_layer_readout examples") {
  const auto c = small_config();
  auto w = init_weights(c, 8);
  const auto vis = encode_visual(w, generate_grid(3, 2, 3, c.visual_dim));
  KVCache cache(c.num_layers);
  const auto tr = run_prompt(w, cache, &vis, {1, 2, 3});

  const Vec top = per_layer_readout(tr, w, c.num_layers);
  CHECK(max_abs_diff(top, softmax_row(tr.logits)) < 1e-12);
  for (std::size_t l = 1; l <= c.num_layers; ++l) {
    const Vec p = per_layer_readout(tr, w, l);
    CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-12);
    for (double x : p) CHECK(x >= 0.0);
  }
  CHECK(code_of([&] { (void)per_layer_readout(tr, w, 0); }) == ErrorCode::kRange);
  CHECK(code_of([&] { (void)per_layer_readout(tr, w, c.num_layers + 1); }) == ErrorCode::kRange);

  // Scale 0 leaves only the shift: readout = softmax(shift . W_lm).
  std::fill(w.final_norm_scale.begin(), w.final_norm_scale.end(), 0.0);
  Rng rng(1);
  for (auto& x : w.final_norm_shift) x = rng.normal();
  Vec oracle(c.vocab_size, 0.0);
  for (std::size_t v = 0; v < c.vocab_size; ++v)
    for (std::size_t k = 0; k < c.model_dim; ++k) oracle[v] += w.final_norm_shift[k] * w.lm_head(k, v);
  const Vec hand = per_layer_readout(tr, w, 2);
  CHECK(max_abs_diff(hand, softmax_row(oracle)) < 1e-12);
}

TEST_CASE("resume_from_layer examples") {
  const auto c = small_config();
  const auto w = init_weights(c, 9);
  const auto vis = encode_visual(w, generate_grid(4, 3, 4, c.visual_dim));
  KVCache cache(c.num_layers);
  run_prompt(w, cache, &vis, {1, 4});
  const auto full = forward_capture(w, cache, 5, &vis);

  const auto from_one = resume_from_layer(w, cache, 1, full.hidden[0], &vis);
  CHECK(max_abs_diff(from_one.logits, full.logits) < 1e-9);

  const auto from_top = resume_from_layer(w, cache, c.num_layers, full.hidden[c.num_layers - 1], &vis);
  CHECK(max_abs_diff(from_top.logits, full.logits) < 1e-9);

  const LayerHook zero = [](std::size_t, Vec& s) {
    for (auto& x : s) x += 0.0;
  };
  const auto hooked = resume_from_layer(w, cache, 3, full.hidden[2], &vis, zero);
  CHECK(hooked.logits == resume_from_layer(w, cache, 3, full.hidden[2], &vis).logits);

  const KVCache before = cache;
  (void)resume_from_layer(w, cache, 2, full.hidden[1], &vis);
  CHECK(cache == before);

  const Vec short_state(c.model_dim - 1, 0.0);
  CHECK(code_of([&] { (void)resume_from_layer(w, cache, 2, short_state, &vis); }) == ErrorCode::kShape);
  CHECK(code_of([&] { (void)resume_from_layer(w, cache, 0, full.hidden[0], &vis); }) == ErrorCode::kRange);
}

TEST_CASE("prefix-suffix consistency over random steps and entry layers") {
  const auto c = small_config(8);
  const auto w = init_weights(c, 10);
  Rng rng(77);
  for (int trial = 0; trial < 40; ++trial) {
    const auto vis = encode_visual(w, generate_grid(trial, 3, 3, c.visual_dim));
    KVCache cache(c.num_layers);
    const auto prompt = testing::random_prompt(trial, 1 + rng.below(6), c.vocab_size);
    run_prompt(w, cache, &vis, prompt);
    const auto tr = forward_capture(w, cache, 2, &vis);
    const std::size_t l0 = 1 + rng.below(c.num_layers);
    const auto r = resume_from_layer(w, cache, l0, tr.hidden[l0 - 1], &vis);
    CHECK(max_abs_diff(r.logits, tr.logits) < 1e-9);
  }
}

TEST_CASE("commit_step after capture equals forward_step") {
  const auto c = small_config();
  const auto w = init_weights(c, 11);
  const auto vis = encode_visual(w, generate_grid(5, 2, 2, c.visual_dim));
  KVCache a(c.num_layers), b(c.num_layers);
  for (TokenId t : {1, 2, 3}) {
    const auto tr = forward_capture(w, a, t, &vis);
    commit_step(a, tr);
    forward_step(w, b, t, &vis);
  }
  CHECK(a == b);
}

}  // TEST_SUITE

TEST_SUITE("weights_io") {

TEST_CASE("weights round trip bitwise") {
  const auto dir = temp_dir("stear_wio");
  const auto w = init_weights(small_config(), 12);
  save_weights(w, dir / "m.bin");
  CHECK(load_weights(dir / "m.bin") == w);
  // same weights, same bytes
  save_weights(w, dir / "m2.bin");
  CHECK(read_file(dir / "m.bin") == read_file(dir / "m2.bin"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("structured load errors") {
  const auto dir = temp_dir("stear_wio_err");
  const auto w = init_weights(small_config(), 13);
  auto bytes = serialize_weights(w);

  CHECK(code_of([&] { (void)load_weights(dir / "missing.bin"); }) == ErrorCode::kIo);

  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2));
  CHECK(code_of([&] { (void)deserialize_weights(truncated); }) == ErrorCode::kTruncated);

  auto bad_magic = bytes;
  bad_magic[0] ^= 0xff;
  CHECK(code_of([&] { (void)deserialize_weights(bad_magic); }) == ErrorCode::kVersion);

  auto extra = bytes;
  extra.push_back(0);
  CHECK(code_of([&] { (void)deserialize_weights(extra); }) == ErrorCode::kShape);
  std::filesystem::remove_all(dir);
}

TEST_CASE("grid bank round trip") {
  const std::vector<VisualTokenGrid> grids{generate_grid(1, 2, 3, 4), generate_grid(2, 5, 1, 2)};
  CHECK(deserialize_grids(serialize_grids(grids)) == grids);
}

TEST_CASE("write_file_atomic leaves no temp file") {
  const auto dir = temp_dir("stear_atomic");
  write_file_atomic(dir / "a.txt", std::string("hello"));
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++entries;
  CHECK(entries == 1);
  const auto back = read_file(dir / "a.txt");
  CHECK(std::string(back.begin(), back.end()) == "hello");
  CHECK(hex64(fnv1a64(back)).size() == 16);
  std::filesystem::remove_all(dir);
}

TEST_CASE("fnv1a64 reference values") {
  const std::vector<std::uint8_t> empty;
  CHECK(fnv1a64(empty) == 0xcbf29ce484222325ULL);
  const std::vector<std::uint8_t> a{'a'};
  CHECK(fnv1a64(a) == 0xaf63dc4c8601ec8cULL);
}

}  // TEST_SUITE

TEST_SUITE("planted") {

TEST_CASE("evidence layer out of range is a config error") {
  PlantedSpec s;
  s.evidence_layer = 13;
  CHECK(code_of([&] { (void)construct_planted_weights(s, ModelConfig{}); }) == ErrorCode::kConfig);
  s.evidence_layer = 0;
  CHECK(code_of([&] { (void)construct_planted_weights(s, ModelConfig{}); }) == ErrorCode::kConfig);
}

TEST_CASE("zero evidence gain predicts the distractor everywhere") {
  PlantedSpec s;
  s.evidence_gain = 0.0;
  const auto w = construct_planted_weights(s, ModelConfig{});
  for (auto kind : {TaskKind::kSpatial, TaskKind::kTemporalOrder}) {
    TaskSetParams p;
    p.kind = kind;
    p.count = 50;
    for (const auto& t : generate_planted_tasks(p)) {
      const auto out = greedy_decode(w, t.grid, t.prompt, 1);
      CHECK(out.front() == t.distractor);
    }
  }
}

TEST_CASE("full gain and clean evidence answer every task") {
  const auto w = construct_planted_weights(PlantedSpec{}, ModelConfig{});
  TaskSetParams p;
  p.count = 100;
  p.seed = 21;
  std::size_t correct = 0;
  for (const auto& t : generate_planted_tasks(p)) correct += greedy_decode(w, t.grid, t.prompt, 1).front() == t.gold;
  CHECK(correct == 100);
}

TEST_CASE("evidence layer attention mass on annotated tokens exceeds 0.8") {
  const auto w = construct_planted_weights(PlantedSpec{}, ModelConfig{});
  TaskSetParams p;
  p.count = 100;
  const auto tasks = generate_planted_tasks(p);
  const Vec g = grounding_profile(w, tasks);
  CHECK(g[PlantedSpec{}.evidence_layer - 1] > 0.8);
}

TEST_CASE("planted construction is deterministic") {
  CHECK(construct_planted_weights(PlantedSpec{}, ModelConfig{}) ==
        construct_planted_weights(PlantedSpec{}, ModelConfig{}));
}

}  // TEST_SUITE
