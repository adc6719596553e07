#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "stear/config.hpp"
#include "stear/error.hpp"

using namespace stear;

namespace {

// Runs the parser and returns the error message, or "" when parsing succeeds.
std::string config_error(const std::string& text, ErrorCode expected = ErrorCode::kConfig) {
  try {
    parse_run_config(text);
  } catch (const Error& e) {
    CHECK(e.code() == expected);
    return e.what();
  }
  return "";
}

bool mentions(const std::string& msg, const std::string& what) {
  return msg.find(what) != std::string::npos;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("an empty document takes every default") {
  const auto rc = parse_run_config("{}");
  CHECK(rc.model.config == ModelConfig{});
  CHECK_FALSE(rc.model.planted);
  CHECK(rc.intervention.tau == 0.85);
  CHECK(rc.intervention.middle_window == LayerRange{5, 8});
  CHECK(rc.output.max_new == 1);
}

TEST_CASE("sections are read") {
  const auto rc = parse_run_config(R"({
    "seed": 3,
    "model": {"kind": "planted", "num_layers": 12, "planted": {"prior_strength": 1.25}},
    "tasks": {"kind": "temporal-order", "count": 9, "attenuation": 0.5, "decoy": 0.25},
    "intervention": {"tau": 0.6, "r": 0.2, "lambda": 0.5, "alpha": 1.5, "middle_window": [4, 9],
                     "perturb_mode": "shuffle", "perturb_scope": "whole", "selection": "random"},
    "output": {"dir": "somewhere", "max_new": 4}
  })");
  CHECK(rc.seed == 3);
  REQUIRE(rc.model.planted);
  CHECK(rc.model.planted->prior_strength == 1.25);
  CHECK(rc.tasks.params.kind == TaskKind::kTemporalOrder);
  CHECK(rc.tasks.params.count == 9);
  CHECK(rc.tasks.params.decoy == 0.25);
  CHECK(rc.intervention.tau == 0.6);
  CHECK(rc.intervention.selection_ratio == 0.2);
  CHECK(rc.intervention.middle_window == LayerRange{4, 9});
  CHECK(rc.intervention.perturb_mode == PerturbMode::kShuffle);
  CHECK(rc.intervention.perturb_scope == PerturbScope::kWholeVideo);
  CHECK(rc.intervention.selection == SelectionMode::kRandom);
  CHECK(rc.output.dir == "somewhere");
  CHECK(rc.output.max_new == 4);
}

TEST_CASE("derived seeds are stable and overridable") {
  const auto a = parse_run_config(R"({"seed": 5})");
  CHECK(a.model_seed() == parse_run_config(R"({"seed": 5})").model_seed());
  CHECK(a.model_seed() != a.task_params().seed);
  const auto b = parse_run_config(R"({"seed": 5, "model": {"seed": 77}, "tasks": {"seed": 78}})");
  CHECK(b.model_seed() == 77);
  CHECK(b.task_params().seed == 78);
}

TEST_CASE("unknown keys are rejected and named") {
  CHECK(mentions(config_error(R"({"sed": 1})"), "sed"));
  CHECK(mentions(config_error(R"({"model": {"layers": 4}})"), "model.layers"));
  CHECK(mentions(config_error(R"({"model": {"kind": "planted", "planted": {"gain": 1}}})"),
                 "model.planted.gain"));
  CHECK(mentions(config_error(R"({"intervention": {"beta": 1}})"), "intervention.beta"));
}

TEST_CASE("invalid values name the field") {
  CHECK(mentions(config_error(R"({"intervention": {"tau": "high"}})"), "intervention.tau"));
  CHECK(mentions(config_error(R"({"tasks": {"count": -2}})"), "tasks.count"));
  CHECK(mentions(config_error(R"({"tasks": {"attenuation": 1.5}})"), "tasks.attenuation"));
  CHECK(mentions(config_error(R"({"intervention": {"middle_window": [1]}})"), "intervention.middle_window"));
  CHECK(mentions(config_error(R"({"intervention": {"perturb_scope": "scene"}})"), "intervention.perturb_scope"));
  CHECK(mentions(config_error(R"({"model": {"kind": "learned"}})"), "model.kind"));
  CHECK(mentions(config_error(R"({"output": {"max_new": 0}})"), "output.max_new"));
  CHECK_FALSE(config_error("{not json").empty());
}

TEST_CASE("evidence layer beyond the model depth is a config error") {
  const auto msg = config_error(
      R"({"model": {"kind": "planted", "num_layers": 6, "planted": {"evidence_layer": 7}}})");
  CHECK(mentions(msg, "model.planted.evidence_layer"));
}

TEST_CASE("round trip through JSON") {
  const auto rc = parse_run_config(R"({
    "seed": 11,
    "model": {"kind": "planted", "planted": {"evidence_layer": 5}},
    "intervention": {"alpha": 0.3, "reinject_layers": [1, 4]}
  })");
  const auto back = parse_run_config(run_config_to_json(rc));
  CHECK(back.seed == rc.seed);
  REQUIRE(back.model.planted);
  CHECK(back.model.planted->evidence_layer == 5);
  CHECK(back.intervention.alpha == 0.3);
  REQUIRE(back.intervention.reinject_layers);
  CHECK(*back.intervention.reinject_layers == LayerRange{1, 4});
  CHECK(run_config_to_json(back) == run_config_to_json(rc));
}

TEST_CASE("missing config file is an io error") {
  CHECK_THROWS_WITH_AS(load_run_config("/nonexistent/cfg.json"), doctest::Contains("cfg.json"), Error);
}

}  // TEST_SUITE
