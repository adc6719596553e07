#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "stear/cli.hpp"
#include "stear/diagnostics.hpp"

using namespace stear;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "stear");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// Scratch directory with a small planted spatial config.
struct Workspace {
  fs::path dir;

  explicit Workspace(const std::string& name, const std::string& intervention = R"({"tau": 0.85})",
                     std::size_t max_new = 2) {
    dir = fs::temp_directory_path() / ("stear_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    write("cfg.json", R"({"seed": 5,
      "model": {"kind": "planted"},
      "tasks": {"kind": "spatial", "count": 6, "attenuation": 0.7},
      "intervention": )" + intervention + R"(,
      "output": {"dir": ")" + (dir / "out").string() + R"(", "max_new": )" +
                              std::to_string(max_new) + "}}");
  }
  ~Workspace() { fs::remove_all(dir); }

  void write(const std::string& name, const std::string& text) const {
    std::ofstream(dir / name, std::ios::binary) << text;
  }
  std::string cfg() const { return (dir / "cfg.json").string(); }
  fs::path out() const { return dir / "out"; }

  Run cmd(const std::string& sub, std::vector<std::string> extra = {}) const {
    std::vector<std::string> args{sub, "--config", cfg()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }
  void prepare() const {
    REQUIRE(cmd("gen-model").code == kExitOk);
    REQUIRE(cmd("gen-tasks").code == kExitOk);
  }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 2") {
  CHECK(run({}).code == kExitConfig);
  CHECK(run({"frobnicate"}).code == kExitConfig);
  CHECK(run({"decode"}).code == kExitConfig);  // --config is required
  Workspace ws("usage");
  CHECK(ws.cmd("decode", {"--mode", "fancy"}).code == kExitConfig);
}

TEST_CASE("io errors exit 3") {
  CHECK(run({"gen-model", "--config", "/nonexistent/cfg.json"}).code == kExitIo);
  Workspace ws("io");
  REQUIRE(ws.cmd("gen-model").code == kExitOk);
  // no task file yet
  CHECK(ws.cmd("decode").code == kExitIo);
  ws.write("broken.bin", "not a weight file");
  CHECK(ws.cmd("decode", {"--model", (ws.dir / "broken.bin").string()}).code == kExitIo);
}

TEST_CASE("config errors exit 2 and name the field") {
  Workspace ws("cfgerr");
  ws.write("bad.json", R"({"model": {"kind": "planted", "planted": {"evidence_layer": 13}}})");
  const auto r = run({"gen-model", "--config", (ws.dir / "bad.json").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("model.planted.evidence_layer") != std::string::npos);
  ws.write("unknown.json", R"({"modle": {}})");
  CHECK(run({"gen-model", "--config", (ws.dir / "unknown.json").string()}).code == kExitConfig);
}

TEST_CASE("incompatible model and tasks are a shape error") {
  Workspace ws("shape");
  ws.prepare();
  ws.write("small.json", R"({"model": {"num_layers": 4, "model_dim": 32, "num_heads": 2,
    "visual_dim": 16, "max_frames": 8}, "tasks": {"dim": 16}})");
  const auto small_model = (ws.dir / "small.bin").string();
  REQUIRE(run({"gen-model", "--config", (ws.dir / "small.json").string(), "--model", small_model}).code ==
          kExitOk);
  CHECK(ws.cmd("decode", {"--model", small_model}).code == kExitIo);
}

TEST_CASE("gen-model is idempotent") {
  Workspace ws("idem");
  const auto a = ws.cmd("gen-model");
  REQUIRE(a.code == kExitOk);
  const auto bytes = slurp(ws.out() / "model.bin");
  const auto b = ws.cmd("gen-model");
  CHECK(a.out == b.out);
  CHECK(a.out.find("fnv1a64=") != std::string::npos);
  CHECK(slurp(ws.out() / "model.bin") == bytes);
}

TEST_CASE("decode writes one log line per emitted token and encodes once per task") {
  Workspace ws("decode");
  ws.prepare();
  REQUIRE(ws.cmd("decode").code == kExitOk);
  const auto summary = nlohmann::json::parse(slurp(ws.out() / "decode_summary.json"));
  const auto log = lines(ws.out() / "steps.jsonl");
  CHECK(log.size() == summary.at("emitted_tokens").get<std::size_t>());
  CHECK(summary.at("single_encode").get<bool>());
  for (const auto& t : summary.at("per_task")) CHECK(t.at("encoder_invocations").get<int>() == 1);
  for (const auto& line : log) CHECK(parse_step_record(line).encoder_invocations == 1);
}

TEST_CASE("stear with tau = 1 matches the baseline decode") {
  Workspace ws("tau1", R"({"tau": 1.0})");
  ws.prepare();
  REQUIRE(ws.cmd("decode", {"--mode", "baseline"}).code == kExitOk);
  const auto base = slurp(ws.out() / "decode_summary.json");
  REQUIRE(ws.cmd("decode", {"--mode", "stear"}).code == kExitOk);
  CHECK(slurp(ws.out() / "decode_summary.json") == base);
}

TEST_CASE("ablate, diagnose and eval write their reports") {
  Workspace ws("reports", R"({"tau": 0.85})", 1);
  ws.prepare();
  REQUIRE(ws.cmd("ablate").code == kExitOk);
  CHECK(lines(ws.out() / "ablation.csv").size() == 14);
  REQUIRE(ws.cmd("diagnose").code == kExitOk);
  CHECK(lines(ws.out() / "profile.csv").size() == 13);
  CHECK(fs::exists(ws.out() / "depth_sweep.json"));
  REQUIRE(ws.cmd("eval").code == kExitOk);
  const auto j = nlohmann::json::parse(slurp(ws.out() / "eval.json"));
  CHECK(j.contains("baseline"));
  CHECK(j.contains("stear"));
}

TEST_CASE("threaded and serial runs write identical files") {
  Workspace ws("threads", R"({"tau": 0.85})", 1);
  ws.prepare();
  REQUIRE(ws.cmd("ablate", {"--threads", "1"}).code == kExitOk);
  const auto serial = slurp(ws.out() / "ablation.json");
  REQUIRE(ws.cmd("ablate", {"--threads", "3"}).code == kExitOk);
  CHECK(slurp(ws.out() / "ablation.json") == serial);
}

TEST_CASE("bench counter ratio agrees with the step-log cost report") {
  Workspace ws("bench");
  ws.prepare();
  REQUIRE(ws.cmd("decode").code == kExitOk);
  std::vector<StepRecord> recs;
  for (const auto& line : lines(ws.out() / "steps.jsonl")) recs.push_back(parse_step_record(line));
  const auto cost = cost_report(recs, 12);
  REQUIRE(ws.cmd("bench").code == kExitOk);
  const auto j = nlohmann::json::parse(slurp(ws.out() / "bench.json"));
  CHECK(j.at("counter_ratio").get<double>() == cost.compute_ratio);
  CHECK(j.at("counters").at("stear_layer_forwards").get<std::size_t>() ==
        12 * cost.steps + cost.total_extra);
}

}  // TEST_SUITE
