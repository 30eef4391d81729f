#include "transx/bench.hpp"

#include <algorithm>
#include <chrono>
#include <malloc.h>
#include <cmath>
#include <sstream>
#include <thread>

#include "transx/blocks.hpp"
#include "transx/errors.hpp"
#include "transx/rng.hpp"
#include "transx/tensor.hpp"

namespace transx {

namespace {

struct Workload {
  ModelConfig cfg;
  FrequencyTable attn_table;
  FrequencyTable ssd_table;
  HybridModuleParams module;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One forward (and optionally backward) pass of `mode` over `rows` sequences.
void run_once(const std::string& mode, const Workload& w, const Tensor& x, std::size_t rows, std::size_t T,
              bool backward) {
  const BlockContext ctx{w.cfg, w.attn_table, w.ssd_table};
  const SequenceShape shape{rows, T, 0};
  if (mode == "ssd-recurrent") {
    // Per-step recurrence from an empty state, one sequence at a time.
    const auto ss = w.module.ss[0].mixer.map([](const Tensor& t) { return constant_view(t); });
    const std::size_t d = w.cfg.d_model;
    for (std::size_t r = 0; r < rows; ++r) {
      Tensor xr({T, d});
      std::copy_n(x.raw() + r * T * d, T * d, xr.raw());
      SSCache cache = make_ss_cache(w.cfg);
      ss_block_forward(Var(std::move(xr)), ss, ctx, SequenceShape{1, T, 0}, &cache);
    }
    return;
  }

  Tape tape;
  const bool track = backward;
  auto bind = [&](const Tensor& t) { return track ? tape.leaf(std::make_shared<const Tensor>(t)) : constant_view(t); };
  const Var xin = track ? tape.leaf(std::make_shared<const Tensor>(x)) : constant_view(x);
  Var out;
  if (mode == "attention-full") {
    out = sa_block_forward(xin, w.module.sa[0].mixer.map(bind), ctx, shape);
  } else if (mode == "ssd-chunked") {
    out = ss_block_forward(xin, w.module.ss[0].mixer.map(bind), ctx, shape);
  } else {
    out = hybrid_module_forward(xin, w.module.map(bind), ctx, shape);
  }
  if (track) tape.backward(ad::sum(out));
}

}  // namespace

const std::vector<std::string>& bench_modes() {
  static const std::vector<std::string> modes{"attention-full", "ssd-recurrent", "ssd-chunked", "hybrid"};
  return modes;
}

double estimate_bench_bytes(const std::string& mode, std::size_t seq_len, std::size_t batch, const ModelConfig& cfg,
                            bool backward) {
  const double T = static_cast<double>(seq_len), B = static_cast<double>(batch);
  const double d = static_cast<double>(cfg.d_model), H = static_cast<double>(cfg.n_heads);
  const double N = static_cast<double>(cfg.d_state), P = static_cast<double>(cfg.head_dim());
  const double keep = backward ? 3.0 : 1.0;
  const double attn = 8.0 * (B * T * d * 12.0 * keep + (backward ? B * H * T * T * 3.0 : 3.0 * T * T));
  const double ssd = 8.0 * B * T * (d * 12.0 + H * (2.0 * N + P) * 4.0) * keep +
                     8.0 * B * H * N * P * (T / static_cast<double>(cfg.chunk_len) + 1.0) * keep;
  const double ffn = 8.0 * B * T * static_cast<double>(cfg.ffn_mult) * d * 3.0 * keep;
  if (mode == "attention-full") return attn;
  if (mode == "ssd-chunked") return ssd;
  if (mode == "ssd-recurrent") return 8.0 * T * (d * 8.0 + H * (2.0 * N + P)) + 8.0 * H * N * P;
  const double layers = static_cast<double>(cfg.ss_per_module);
  return layers * (ssd + ffn) + attn + ffn;
}

std::optional<SlopeFit> fit_loglog_slope(const std::string& mode, std::span<const std::size_t> lengths,
                                         std::span<const double> seconds) {
  if (lengths.size() != seconds.size() || lengths.size() < 2) return std::nullopt;
  const double n = static_cast<double>(lengths.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const double x = std::log(static_cast<double>(lengths[i])), y = std::log(seconds[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double den = n * sxx - sx * sx;
  if (std::abs(den) < 1e-12) return std::nullopt;
  SlopeFit f;
  f.mode = mode;
  f.slope = (n * sxy - sx * sy) / den;
  f.intercept = (sy - f.slope * sx) / n;
  f.points = lengths.size();
  return f;
}

BenchReport run_bench(const BenchConfig& bench, const ModelConfig& model, std::uint64_t seed,
                      const std::function<void(const BenchRecord&)>& on_record) {
  model.validate();
  for (const auto& m : bench.modes) {
    if (std::find(bench_modes().begin(), bench_modes().end(), m) == bench_modes().end()) {
      throw ConfigError("bench: unknown mode '" + m + "'");
    }
  }
  if (bench.lengths.empty()) throw ConfigError("bench: no lengths given");
  for (std::size_t i = 1; i < bench.lengths.size(); ++i) {
    if (bench.lengths[i] <= bench.lengths[i - 1]) throw ConfigError("bench: lengths must be strictly ascending");
  }
  if (bench.iterations < 5) throw ConfigError("bench: at least 5 timed iterations are required");
  if (bench.warmups < 2) throw ConfigError("bench: at least 2 warmup iterations are required");
  if (bench.batch == 0 || bench.workers == 0) throw ConfigError("bench: batch and workers must be positive");
  for (const auto& m : bench.modes) {
    for (std::size_t T : bench.lengths) {
      const double bytes = estimate_bench_bytes(m, T, bench.batch, model, bench.backward);
      if (bytes > bench.memory_limit_mb * 1024.0 * 1024.0) {
        std::ostringstream os;
        os << "bench: " << m << " at T=" << T << ", batch=" << bench.batch << " needs about "
           << std::llround(bytes / (1024.0 * 1024.0)) << " MiB, above the " << bench.memory_limit_mb << " MiB limit";
        throw ConfigError(os.str());
      }
    }
  }

#ifdef __GLIBC__
  // Keep freed activation buffers in the heap instead of unmapping them, so
  // timed calls do not pay page faults for memory the warmups already touched.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif

  const Precision saved = precision();
  set_precision(bench.fp32 ? Precision::fp32 : Precision::fp64);
  struct Restore {
    Precision p;
    ~Restore() { set_precision(p); }
  } restore{saved};

  const std::size_t max_len = bench.lengths.back();
  Rng rng(seed);
  Workload w{model, build_frequencies(model.head_dim(), model.rope_base, max_len),
             build_frequencies(model.d_state, model.rope_base, max_len), init_hybrid_module(model, rng)};
  const std::size_t workers = std::min(bench.workers, bench.batch);

  BenchReport report;
  for (const auto& mode : bench.modes) {
    if (mode == "ssd-recurrent" && bench.backward) {
      report.notes.push_back("ssd-recurrent is an inference path; skipped in backward mode");
      continue;
    }
    std::vector<double> medians;
    for (std::size_t T : bench.lengths) {
      // Workers split the batch; each gets its own rows of input.
      std::vector<Tensor> inputs;
      std::vector<std::size_t> rows;
      for (std::size_t k = 0; k < workers; ++k) {
        const std::size_t r = bench.batch / workers + (k < bench.batch % workers ? 1 : 0);
        rows.push_back(r);
        inputs.push_back(rng.normal_tensor({r * T, model.d_model}, 1.0));
      }
      auto call = [&] {
        if (workers == 1) {
          run_once(mode, w, inputs[0], rows[0], T, bench.backward);
          return;
        }
        std::vector<std::jthread> pool;
        for (std::size_t k = 0; k < workers; ++k) {
          pool.emplace_back([&, k] { run_once(mode, w, inputs[k], rows[k], T, bench.backward); });
        }
      };
      double warm = 0.0;
      for (std::size_t i = 0; i < bench.warmups; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        call();
        warm = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      // Short calls are repeated inside each sample so one sample spans at
      // least min_sample_seconds; the sample is the per-call mean.
      const std::size_t repeats =
          warm > 0.0 ? std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(bench.min_sample_seconds / warm))) : 1;
      BenchRecord rec;
      rec.mode = mode;
      rec.seq_len = T;
      rec.batch = bench.batch;
      rec.fp_mode = precision_name(precision());
      rec.backward = bench.backward;
      rec.warmups = bench.warmups;
      rec.workers = workers;
      rec.repeats = repeats;
      for (std::size_t i = 0; i < bench.iterations; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t r = 0; r < repeats; ++r) call();
        rec.samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
                              static_cast<double>(repeats));
      }
      rec.seconds = median(rec.samples);
      rec.tokens_per_sec = static_cast<double>(bench.batch * T) / rec.seconds;
      medians.push_back(rec.seconds);
      report.records.push_back(rec);
      if (on_record) on_record(rec);
    }
    if (auto fit = fit_loglog_slope(mode, bench.lengths, medians)) report.slopes.push_back(*fit);
  }
  return report;
}

std::string bench_csv(const BenchReport& report) {
  std::ostringstream os;
  os.precision(9);
  os << "mode,T,batch,seconds_median,tokens_per_sec,fp_mode,backward,iterations,repeats,warmups,workers\n";
  for (const auto& r : report.records) {
    os << r.mode << ',' << r.seq_len << ',' << r.batch << ',' << r.seconds << ',' << r.tokens_per_sec << ','
       << r.fp_mode << ',' << (r.backward ? 1 : 0) << ',' << r.samples.size() << ',' << r.repeats << ',' << r.warmups << ','
       << r.workers << '\n';
  }
  return os.str();
}

nlohmann::json bench_json(const BenchReport& report) {
  nlohmann::json j;
  auto& recs = j["records"] = nlohmann::json::array();
  for (const auto& r : report.records) {
    recs.push_back({{"mode", r.mode},
                    {"T", r.seq_len},
                    {"batch", r.batch},
                    {"seconds_median", r.seconds},
                    {"tokens_per_sec", r.tokens_per_sec},
                    {"fp_mode", r.fp_mode},
                    {"backward", r.backward},
                    {"warmups", r.warmups},
                    {"workers", r.workers},
                    {"repeats", r.repeats},
                    {"samples", r.samples}});
  }
  auto& slopes = j["slopes"] = nlohmann::json::array();
  for (const auto& s : report.slopes) {
    slopes.push_back({{"mode", s.mode}, {"slope", s.slope}, {"intercept", s.intercept}, {"points", s.points}});
  }
  j["notes"] = report.notes;
  return j;
}

}  // namespace transx
