#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "transx/bench.hpp"
#include "transx/cli.hpp"
#include "transx/errors.hpp"
#include "transx/lm.hpp"
#include "transx/run_config.hpp"
#include "transx/verify.hpp"

namespace transx {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path.string());
  return os;
}

// ---------------------------------------------------------------- verify

int cmd_verify(const RunConfig& cfg, const std::optional<std::string>& filter, bool inject_fault, std::ostream& out) {
  out << run_metadata("verify", cfg).dump() << '\n';
  VerifyOptions opt;
  opt.filter = filter;
  opt.inject_rotation_fault = inject_fault;
  std::size_t passed = 0, total = 0;
  const VerifyReport rep = run_verify(opt, [&](const VerifyOutcome& o) {
    ++total;
    passed += o.result.passed;
    std::ostringstream line;
    line << (o.result.passed ? "PASS " : "FAIL ") << std::left << std::setw(40) << o.name
         << " instances=" << o.result.instances << " worst=" << std::setprecision(3) << o.result.worst_error
         << " tol=" << o.result.tolerance << std::fixed << std::setprecision(2) << " (" << o.seconds << "s)";
    if (!o.result.detail.empty()) line << "  " << o.result.detail;
    out << line.str() << std::endl;
  });
  out << passed << "/" << total << " properties passed\n";
  return rep.all_passed() ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------- train

nlohmann::json step_json(const StepMetrics& s, bool timing) {
  nlohmann::json j{{"type", "step"}, {"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"grad_norm", s.grad_norm}};
  if (timing) j["tokens_per_sec"] = s.tokens_per_sec;
  return j;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const ModelConfig model_cfg = cfg.effective_model();
  model_cfg.validate();
  cfg.train.validate();
  if (cfg.seq_len == 0 || cfg.seq_len > model_cfg.max_position) {
    throw ConfigError("seq_len must be in [1, max_position=" + std::to_string(model_cfg.max_position) + "]");
  }
  const TaskSpec task = TaskSpec::parse(cfg.task, cfg.seq_len);

  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  open_out(dir / "config.json") << nlohmann::json(cfg).dump(2) << '\n';
  std::ofstream metrics = open_out(dir / "metrics.jsonl");
  std::ofstream timing = open_out(dir / "timing.jsonl");
  const nlohmann::json meta = run_metadata("train", cfg);
  metrics << meta.dump() << '\n';
  out << meta.dump() << '\n';

  Model model = Model::initialize(model_cfg, cfg.train.seed);
  out << "task " << task.name() << ", " << model.parameter_count() << " parameters, " << cfg.train.steps << " steps\n";
  if (cfg.train.steps == 0) {
    save_checkpoint(dir / "checkpoint_final.bin", model, {{"step", 0}});
    out << "wrote " << (dir / "checkpoint_final.bin").string() << '\n';
    return kExitOk;
  }

  const std::size_t report_every = std::max<std::size_t>(1, cfg.train.steps / 20);
  TrainCallbacks cb;
  cb.on_step = [&](const StepMetrics& s) {
    metrics << step_json(s, cfg.train.timing_in_metrics).dump() << '\n';
    timing << nlohmann::json{{"step", s.step}, {"tokens_per_sec", s.tokens_per_sec}}.dump() << '\n';
    if (s.step % report_every == 0) {
      out << "step " << s.step << " loss " << std::fixed << std::setprecision(4) << s.loss << " lr " << std::scientific
          << std::setprecision(2) << s.lr << std::defaultfloat << " tok/s " << static_cast<long>(s.tokens_per_sec)
          << std::endl;
    }
  };
  cb.on_eval = [&](const EvalMetrics& e) {
    metrics << nlohmann::json{{"type", "eval"}, {"step", e.step}, {"loss", e.loss}, {"accuracy", e.accuracy}}.dump()
            << '\n';
    metrics.flush();
    out << "eval " << e.step << " loss " << std::fixed << std::setprecision(4) << e.loss << " accuracy "
        << e.accuracy << std::defaultfloat << std::endl;
  };
  cb.on_checkpoint = [&](std::size_t step, const Model& m) {
    save_checkpoint(dir / ("checkpoint_step_" + std::to_string(step) + ".bin"), m, {{"step", step}});
  };
  const TrainResult res = train(model, task, cfg.train, cb);
  const std::size_t done = res.steps.empty() ? 0 : res.steps.back().step + 1;
  save_checkpoint(dir / "checkpoint_final.bin", model, {{"step", done}});
  out << "wrote " << (dir / "checkpoint_final.bin").string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- bench

int cmd_bench(const RunConfig& cfg, std::ostream& out) {
  const ModelConfig model_cfg = cfg.effective_model();
  model_cfg.validate();
  const nlohmann::json meta = run_metadata("bench", cfg);
  out << meta.dump() << '\n';
  out << "mode,seq_len,batch,seconds,tokens_per_sec" << std::endl;
  const BenchReport rep = run_bench(cfg.bench, model_cfg, cfg.train.seed, [&](const BenchRecord& r) {
    out << r.mode << ',' << r.seq_len << ',' << r.batch << ',' << r.seconds << ',' << r.tokens_per_sec << std::endl;
  });
  for (const auto& s : rep.slopes) out << "slope " << s.mode << " " << std::fixed << std::setprecision(3) << s.slope << '\n';
  for (const auto& n : rep.notes) out << "note: " << n << '\n';
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  open_out(dir / "bench.csv") << bench_csv(rep);
  nlohmann::json j = bench_json(rep);
  j["metadata"] = meta;
  open_out(dir / "bench.json") << j.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- generate

int cmd_generate(const RunConfig& cfg, const fs::path& checkpoint, bool config_given, std::ostream& out,
                 std::ostream& err) {
  nlohmann::json extra;
  Model model = [&] {
    try {
      return load_checkpoint(checkpoint, &extra);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("checkpoint: ") + e.what());
    }
  }();
  if (config_given && nlohmann::json(cfg.effective_model()) != nlohmann::json(model.config())) {
    throw ConfigError("checkpoint/config mismatch: the checkpoint's model config differs from the given config");
  }
  err << run_metadata("generate", cfg).dump() << '\n';

  const std::vector<int> prompt =
      cfg.generate.prompt.empty() ? std::vector<int>{kBosToken} : tokenize_bytes(cfg.generate.prompt);
  out << cfg.generate.prompt << std::flush;
  GenerateOptions opt;
  opt.n_new = cfg.generate.n_new;
  opt.temperature = cfg.generate.temperature;
  opt.seed = cfg.train.seed;
  opt.on_token = [&](const GenerateTrace& t) {
    const int id = t.token;
    out << detokenize(std::span<const int>(&id, 1)) << std::flush;
    if (cfg.generate.trace) {
      err << nlohmann::json{{"type", "trace"},
                            {"step", t.step},
                            {"position", t.position},
                            {"token", t.token},
                            {"ss_cache_bytes", t.ss_cache_bytes},
                            {"sa_cache_bytes", t.sa_cache_bytes}}
                 .dump()
          << '\n';
    }
  };
  generate(model, prompt, opt);
  out << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid state-space / attention language model toolkit", "transx"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config_path, "JSON run configuration"); };

  // verify
  auto* verify = app.add_subcommand("verify", "Run the property suites");
  std::optional<std::string> filter;
  bool inject_fault = false;
  verify->add_option("--filter", filter, "Module name or regex over property names");
  verify->add_flag("--inject-fault", inject_fault, "Flip the rotation sine sign while verifying");
  add_config(verify);

  // train
  auto* trainc = app.add_subcommand("train", "Train on a synthetic or byte task");
  add_config(trainc);
  std::optional<std::string> task, out_dir;
  std::optional<std::size_t> steps, batch, seq_len, eval_every, checkpoint_every;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, target_accuracy;
  bool ablate = false, timing = false;
  trainc->add_option("--task", task, "copy | needle | bytes:<file>");
  trainc->add_option("--steps", steps);
  trainc->add_option("--seed", seed);
  trainc->add_option("--batch", batch);
  trainc->add_option("--lr", lr);
  trainc->add_option("--seq-len", seq_len);
  trainc->add_option("--eval-every", eval_every);
  trainc->add_option("--checkpoint-every", checkpoint_every);
  trainc->add_option("--target-accuracy", target_accuracy, "Stop once a validation pass reaches this accuracy");
  trainc->add_flag("--ablate-ssd-rope", ablate, "Disable the rotary transform on the SSD path");
  trainc->add_flag("--timing", timing, "Include tokens/sec in metrics.jsonl");
  trainc->add_option("--out", out_dir, "Output directory");

  // bench
  auto* benchc = app.add_subcommand("bench", "Throughput versus sequence length");
  add_config(benchc);
  std::optional<std::vector<std::string>> modes;
  std::optional<std::vector<std::size_t>> lengths;
  std::optional<std::size_t> bench_batch, workers, iterations, warmups;
  bool fp32 = false, backward = false, bench_ablate = false;
  std::optional<std::string> bench_out;
  std::optional<std::uint64_t> bench_seed;
  benchc->add_option("--modes", modes, "attention-full, ssd-recurrent, ssd-chunked, hybrid")->delimiter(',');
  benchc->add_option("--lengths", lengths, "Ascending sequence lengths")->delimiter(',');
  benchc->add_option("--batch", bench_batch);
  benchc->add_option("--workers", workers);
  benchc->add_option("--iterations", iterations);
  benchc->add_option("--warmups", warmups);
  benchc->add_option("--seed", bench_seed);
  benchc->add_flag("--fp32", fp32, "Round every op result to float");
  benchc->add_flag("--backward", backward, "Time forward + backward");
  benchc->add_flag("--ablate-ssd-rope", bench_ablate);
  benchc->add_option("--out", bench_out, "Output directory");

  // generate
  auto* gen = app.add_subcommand("generate", "Sample text from a checkpoint");
  add_config(gen);
  std::string checkpoint;
  std::optional<std::string> prompt;
  std::optional<std::size_t> n_new;
  std::optional<double> temperature;
  std::optional<std::uint64_t> gen_seed;
  bool trace = false;
  gen->add_option("checkpoint", checkpoint)->required();
  gen->add_option("--prompt", prompt);
  gen->add_option("--n", n_new, "Tokens to generate");
  gen->add_option("--temperature", temperature);
  gen->add_option("--seed", gen_seed);
  gen->add_flag("--trace", trace, "Per-step cache sizes on stderr");

  std::vector<const char*> argv{"transx"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg = load_run_config(config_path ? std::optional<fs::path>(*config_path) : std::nullopt);
    if (*verify) return cmd_verify(cfg, filter, inject_fault, out);
    if (*trainc) {
      if (task) cfg.task = *task;
      if (steps) cfg.train.steps = *steps;
      if (seed) cfg.train.seed = *seed;
      if (batch) cfg.train.batch_size = *batch;
      if (lr) cfg.train.lr = *lr;
      if (seq_len) cfg.seq_len = *seq_len;
      if (eval_every) cfg.train.eval_every = *eval_every;
      if (checkpoint_every) cfg.train.checkpoint_every = *checkpoint_every;
      if (target_accuracy) cfg.train.target_accuracy = *target_accuracy;
      if (ablate) cfg.ablate_ssd_rope = true;
      if (timing) cfg.train.timing_in_metrics = true;
      if (out_dir) cfg.out_dir = *out_dir;
      return cmd_train(cfg, out);
    }
    if (*benchc) {
      if (modes) cfg.bench.modes = *modes;
      if (lengths) cfg.bench.lengths = *lengths;
      if (bench_batch) cfg.bench.batch = *bench_batch;
      if (workers) cfg.bench.workers = *workers;
      if (iterations) cfg.bench.iterations = *iterations;
      if (warmups) cfg.bench.warmups = *warmups;
      if (bench_seed) cfg.train.seed = *bench_seed;
      if (fp32) cfg.bench.fp32 = true;
      if (backward) cfg.bench.backward = true;
      if (bench_ablate) cfg.ablate_ssd_rope = true;
      if (bench_out) cfg.out_dir = *bench_out;
      return cmd_bench(cfg, out);
    }
    if (prompt) cfg.generate.prompt = *prompt;
    if (n_new) cfg.generate.n_new = *n_new;
    if (temperature) cfg.generate.temperature = *temperature;
    if (gen_seed) cfg.train.seed = *gen_seed;
    if (trace) cfg.generate.trace = true;
    return cmd_generate(cfg, checkpoint, config_path.has_value(), out, err);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace transx
