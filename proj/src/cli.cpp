#include "stear/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "stear/config.hpp"
#include "stear/diagnostics.hpp"
#include "stear/error.hpp"
#include "stear/random.hpp"
#include "stear/weights_io.hpp"

namespace stear {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string model;
  std::string tasks;
  std::string mode = "stear";
  std::string log;
};

struct Context {
  RunConfig rc;
  fs::path out_dir;
  std::size_t threads = 1;
};

std::size_t resolve_threads(const std::optional<std::size_t>& flag) {
  if (flag) return std::max<std::size_t>(1, *flag);
  if (const char* env = std::getenv("STEAR_THREADS")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      fail(ErrorCode::kConfig, std::string("STEAR_THREADS is not a number: '") + env + "'");
    }
    return std::max<std::size_t>(1, static_cast<std::size_t>(v));
  }
  return 1;
}

Context make_context(const CommonArgs& args) {
  Context ctx;
  ctx.rc = load_run_config(args.config);
  if (args.seed) ctx.rc.seed = *args.seed;
  ctx.out_dir = args.out.empty() ? ctx.rc.output.dir : fs::path(args.out);
  ctx.threads = resolve_threads(args.threads);
  std::error_code ec;
  fs::create_directories(ctx.out_dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create output directory '" + ctx.out_dir.string() + "'");
  return ctx;
}

fs::path model_path(const CommonArgs& args, const Context& ctx) {
  return args.model.empty() ? ctx.out_dir / "model.bin" : fs::path(args.model);
}

fs::path tasks_path(const CommonArgs& args, const Context& ctx) {
  if (!args.tasks.empty()) return args.tasks;
  if (ctx.rc.tasks.path) return *ctx.rc.tasks.path;
  return ctx.out_dir / "tasks.json";
}

std::string checksum_of(const fs::path& path) {
  const auto bytes = read_file(path);
  return hex64(fnv1a64(bytes));
}

void check_compatible(const DecoderWeights& w, const TaskSet& set) {
  for (const auto& t : set.tasks) {
    if (t.grid.dim != w.config.visual_dim) {
      fail(ErrorCode::kShape, "task grid dim " + std::to_string(t.grid.dim) +
                                  " does not match model visual_dim " +
                                  std::to_string(w.config.visual_dim));
    }
    if (t.grid.frames > w.config.max_frames) {
      fail(ErrorCode::kShape, "task grid has more frames than the model supports");
    }
  }
}

InterventionConfig mode_config(const std::string& mode, const RunConfig& rc) {
  if (mode == "stear") return rc.intervention;
  if (mode == "baseline") {
    InterventionConfig c = rc.intervention;
    c.trigger = TriggerMode::kNever;
    c.reinject = false;
    c.counterfactual = false;
    return c;
  }
  fail(ErrorCode::kConfig, "--mode must be 'baseline' or 'stear', got '" + mode + "'");
}

int cmd_gen_model(const CommonArgs& args, std::ostream& out) {
  const Context ctx = make_context(args);
  const RunConfig& rc = ctx.rc;
  const DecoderWeights w = rc.model.planted
                               ? construct_planted_weights(*rc.model.planted, rc.model.config)
                               : init_weights(rc.model.config, rc.model_seed());
  const fs::path path = model_path(args, ctx);
  save_weights(w, path);
  out << "wrote " << path.string() << " fnv1a64=" << checksum_of(path) << "\n";
  return kExitOk;
}

int cmd_gen_tasks(const CommonArgs& args, std::ostream& out) {
  const Context ctx = make_context(args);
  TaskSet set;
  set.params = ctx.rc.task_params();
  set.tasks = generate_planted_tasks(set.params);
  const fs::path path = args.tasks.empty() ? ctx.out_dir / "tasks.json" : fs::path(args.tasks);
  save_task_set(set, path);
  out << "wrote " << set.tasks.size() << " " << task_kind_name(set.params.kind) << " tasks to "
      << path.string() << " fnv1a64=" << checksum_of(path) << "\n";
  return kExitOk;
}

struct Loaded {
  DecoderWeights weights;
  TaskSet tasks;
};

Loaded load_inputs(const CommonArgs& args, const Context& ctx) {
  Loaded l;
  l.weights = load_weights(model_path(args, ctx));
  l.tasks = load_task_set(tasks_path(args, ctx));
  if (l.tasks.tasks.empty()) fail(ErrorCode::kConfig, "task file contains no tasks");
  check_compatible(l.weights, l.tasks);
  ctx.rc.intervention.validate(l.weights.config);
  return l;
}

struct SuiteRun {
  std::vector<DecodeResult> results;
  std::vector<StepRecord> records;
};

SuiteRun decode_suite(const DecoderWeights& w, const TaskSet& set, const InterventionConfig& icfg,
                      const RunConfig& rc, std::size_t threads) {
  SuiteRun run;
  run.results.resize(set.tasks.size());
  parallel_for(set.tasks.size(), threads, [&](std::size_t i) {
    DecodeOptions d;
    d.max_new = rc.output.max_new;
    d.seed = mix_seed(rc.seed, i);
    run.results[i] = decode_sequence(w, icfg, set.tasks[i].grid, set.tasks[i].prompt, d);
  });
  for (std::size_t i = 0; i < set.tasks.size(); ++i) {
    const auto& steps = run.results[i].steps;
    for (std::size_t s = 0; s < steps.size(); ++s) {
      run.records.push_back(step_record(steps[s], icfg, "task-" + std::to_string(i), s));
    }
  }
  return run;
}

std::string summary_json(const TaskSet& set, const SuiteRun& run, std::size_t num_layers) {
  ordered_json j;
  std::size_t emitted = 0, correct = 0, distractor = 0, triggered = 0, extra = 0;
  ordered_json per_task = ordered_json::array();
  for (std::size_t i = 0; i < set.tasks.size(); ++i) {
    const DecodeResult& r = run.results[i];
    emitted += r.tokens.size();
    const TokenId answer = r.tokens.front();
    correct += answer == set.tasks[i].gold;
    distractor += answer == set.tasks[i].distractor;
    std::size_t task_triggered = 0, task_extra = 0;
    for (const auto& s : r.steps) {
      task_triggered += s.intervened;
      task_extra += s.extra_layer_forwards;
    }
    triggered += task_triggered;
    extra += task_extra;
    per_task.push_back({{"task", "task-" + std::to_string(i)},
                        {"tokens", r.tokens},
                        {"gold", set.tasks[i].gold},
                        {"correct", answer == set.tasks[i].gold},
                        {"triggered_steps", task_triggered},
                        {"extra_layer_forwards", task_extra},
                        {"encoder_invocations", r.encoder_invocations}});
  }
  const double n = static_cast<double>(set.tasks.size());
  j["tasks"] = set.tasks.size();
  j["emitted_tokens"] = emitted;
  j["accuracy"] = fmt(static_cast<double>(correct) / n);
  j["distractor_rate"] = fmt(static_cast<double>(distractor) / n);
  j["triggered_steps"] = triggered;
  j["extra_layer_forwards"] = extra;
  const CostReport cost = cost_report(run.records, num_layers);
  j["single_encode"] = cost.single_encode;
  j["compute_ratio"] = fmt(cost.compute_ratio);
  j["per_task"] = std::move(per_task);
  return j.dump(2) + "\n";
}

int cmd_decode(const CommonArgs& args, std::ostream& out) {
  const Context ctx = make_context(args);
  const Loaded in = load_inputs(args, ctx);
  const InterventionConfig icfg = mode_config(args.mode, ctx.rc);
  const SuiteRun run = decode_suite(in.weights, in.tasks, icfg, ctx.rc, ctx.threads);
  std::string log;
  for (const auto& r : run.records) log += step_record_json(r) + "\n";
  const fs::path log_path = args.log.empty() ? ctx.out_dir / "steps.jsonl" : fs::path(args.log);
  write_file_atomic(log_path, log);
  const fs::path summary_path = ctx.out_dir / "decode_summary.json";
  write_file_atomic(summary_path, summary_json(in.tasks, run, in.weights.config.num_layers));
  out << "decoded " << in.tasks.tasks.size() << " tasks (" << run.records.size()
      << " steps); log " << log_path.string() << ", summary " << summary_path.string() << "\n";
  return kExitOk;
}

int cmd_eval(const CommonArgs& args, std::ostream& out) {
  const Context ctx = make_context(args);
  const Loaded in = load_inputs(args, ctx);
  EvalOptions o;
  o.max_new = ctx.rc.output.max_new;
  o.seed = ctx.rc.seed;
  o.threads = ctx.threads;
  const EvalReport base = evaluate(in.weights, in.tasks.tasks,
                                   mode_config("baseline", ctx.rc), o, "baseline");
  const EvalReport stear = evaluate(in.weights, in.tasks.tasks, ctx.rc.intervention, o, "stear");
  ordered_json j;
  j["baseline"] = ordered_json::parse(eval_report_json(base));
  j["stear"] = ordered_json::parse(eval_report_json(stear));
  write_file_atomic(ctx.out_dir / "eval.json", j.dump(2) + "\n");
  const std::string text = eval_report_text(base) + "\n" + eval_report_text(stear);
  write_file_atomic(ctx.out_dir / "eval.txt", text);
  out << text;
  return kExitOk;
}

int cmd_ablate(const CommonArgs& args, std::ostream& out) {
  const Context ctx = make_context(args);
  const Loaded in = load_inputs(args, ctx);
  EvalOptions o;
  o.max_new = ctx.rc.output.max_new;
  o.seed = ctx.rc.seed;
  o.threads = ctx.threads;
  const AblationMatrix m = ablation_matrix(in.weights, in.tasks.tasks, ctx.rc.intervention, o);
  write_file_atomic(ctx.out_dir / "ablation.csv", m.to_csv());
  write_file_atomic(ctx.out_dir / "ablation.json", m.to_json());
  write_file_atomic(ctx.out_dir / "ablation.txt", m.to_text());
  out << m.to_text();
  return kExitOk;
}

int cmd_diagnose(const CommonArgs& args, std::ostream& out) {
  const Context ctx = make_context(args);
  const Loaded in = load_inputs(args, ctx);
  const LayerProfile p = layer_profile(in.weights, in.tasks.tasks, ctx.threads);
  write_file_atomic(ctx.out_dir / "profile.csv", layer_profile_csv(p));
  write_file_atomic(ctx.out_dir / "profile.txt", layer_profile_text(p));
  EvalOptions o;
  o.max_new = ctx.rc.output.max_new;
  o.seed = ctx.rc.seed;
  o.threads = ctx.threads;
  const DepthSweep ds = depth_sweep(in.weights, in.tasks.tasks, ctx.rc.intervention, o);
  ordered_json j;
  j["baseline"] = fmt(ds.baseline);
  j["early"] = {{"layers", {ds.thirds.early.first, ds.thirds.early.last}}, {"accuracy", fmt(ds.early)}};
  j["middle"] = {{"layers", {ds.thirds.middle.first, ds.thirds.middle.last}},
                 {"accuracy", fmt(ds.middle)}};
  j["late"] = {{"layers", {ds.thirds.late.first, ds.thirds.late.last}}, {"accuracy", fmt(ds.late)}};
  write_file_atomic(ctx.out_dir / "depth_sweep.json", j.dump(2) + "\n");
  out << layer_profile_text(p) << "depth sweep: baseline " << fmt(ds.baseline, 4) << ", early "
      << fmt(ds.early, 4) << ", middle " << fmt(ds.middle, 4) << ", late " << fmt(ds.late, 4)
      << "\n";
  return kExitOk;
}

int cmd_bench(const CommonArgs& args, std::ostream& out) {
  const Context ctx = make_context(args);
  const Loaded in = load_inputs(args, ctx);
  const std::size_t L = in.weights.config.num_layers;
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const SuiteRun base = decode_suite(in.weights, in.tasks, mode_config("baseline", ctx.rc), ctx.rc,
                                     ctx.threads);
  const auto t1 = clock::now();
  const SuiteRun stear =
      decode_suite(in.weights, in.tasks, ctx.rc.intervention, ctx.rc, ctx.threads);
  const auto t2 = clock::now();
  const double base_s = std::chrono::duration<double>(t1 - t0).count();
  const double stear_s = std::chrono::duration<double>(t2 - t1).count();

  const CostReport cost = cost_report(stear.records, L);
  const CostReport base_cost = cost_report(base.records, L);
  ordered_json j;
  ordered_json counters = ordered_json::parse(cost_report_json(cost));
  counters["baseline_layer_forwards"] = L * base_cost.steps;
  counters["stear_layer_forwards"] = L * cost.steps + cost.total_extra;
  j["counters"] = std::move(counters);
  j["counter_ratio"] = cost.compute_ratio;
  j["timing"] = {{"baseline_seconds", base_s},
                 {"stear_seconds", stear_s},
                 {"measured_ratio", base_s > 0.0 ? stear_s / base_s : 0.0}};
  write_file_atomic(ctx.out_dir / "bench.json", j.dump(2) + "\n");
  out << "counter-derived compute ratio " << fmt(cost.compute_ratio, 4)
      << " (triggered steps " << cost.triggered_steps << "/" << cost.steps
      << ", per triggered step " << fmt(cost.triggered_step_ratio, 4) << ")\n"
      << "measured wall-clock ratio " << fmt(base_s > 0.0 ? stear_s / base_s : 0.0, 4) << " ("
      << fmt(base_s, 3) << " s baseline, " << fmt(stear_s, 3) << " s stear)\n";
  return kExitOk;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
    case ErrorCode::kRange:
      return kExitConfig;
    case ErrorCode::kIo:
    case ErrorCode::kShape:
    case ErrorCode::kVersion:
    case ErrorCode::kTruncated:
      return kExitIo;
    case ErrorCode::kInvariant:
      return kExitInvariant;
  }
  return kExitInvariant;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"stear: evidence intervention for a toy video-language decoder"};
  app.require_subcommand(1);
  CommonArgs args;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "run config (JSON)")->required();
    sub->add_option("--out", args.out, "output directory (default: output.dir of the config)");
    sub->add_option("--seed", args.seed, "global seed override");
    sub->add_option("--threads", args.threads, "worker threads (fallback: STEAR_THREADS)");
  };
  auto add_inputs = [&](CLI::App* sub) {
    sub->add_option("--model", args.model, "weight file (default: <out>/model.bin)");
    sub->add_option("--tasks", args.tasks, "task file (default: <out>/tasks.json)");
  };

  CLI::App* gen_model = app.add_subcommand("gen-model", "write a weight file");
  add_common(gen_model);
  gen_model->add_option("--model", args.model, "output weight file (default: <out>/model.bin)");
  CLI::App* gen_tasks = app.add_subcommand("gen-tasks", "write a planted task file");
  add_common(gen_tasks);
  gen_tasks->add_option("--tasks", args.tasks, "output task file (default: <out>/tasks.json)");
  CLI::App* decode = app.add_subcommand("decode", "decode all tasks and write step logs");
  add_common(decode);
  add_inputs(decode);
  decode->add_option("--mode", args.mode, "baseline | stear")
      ->check(CLI::IsMember({"baseline", "stear"}));
  decode->add_option("--log", args.log, "JSON-lines step log (default: <out>/steps.jsonl)");
  CLI::App* eval = app.add_subcommand("eval", "accuracy report, baseline vs configured STEAR");
  add_common(eval);
  add_inputs(eval);
  CLI::App* ablate = app.add_subcommand("ablate", "ablation matrix (CSV/JSON/text)");
  add_common(ablate);
  add_inputs(ablate);
  CLI::App* diagnose = app.add_subcommand("diagnose", "per-layer G(l)/D(l) and depth sweep");
  add_common(diagnose);
  add_inputs(diagnose);
  CLI::App* bench = app.add_subcommand("bench", "counter and wall-clock cost, baseline vs STEAR");
  add_common(bench);
  add_inputs(bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream help_out, help_err;
    const int rc = app.exit(e, help_out, help_err);
    out << help_out.str();
    err << help_err.str();
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen_model->parsed()) return cmd_gen_model(args, out);
    if (gen_tasks->parsed()) return cmd_gen_tasks(args, out);
    if (decode->parsed()) return cmd_decode(args, out);
    if (eval->parsed()) return cmd_eval(args, out);
    if (ablate->parsed()) return cmd_ablate(args, out);
    if (diagnose->parsed()) return cmd_diagnose(args, out);
    if (bench->parsed()) return cmd_bench(args, out);
  } catch (const Error& e) {
    err << "error (" << error_code_name(e.code()) << "): " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInvariant;
  }
  return kExitConfig;
}

}  // namespace stear
