#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "transx/model_config.hpp"
#include "transx/run_config.hpp"

namespace transx {

/// attention-full, ssd-recurrent, ssd-chunked, hybrid.
const std::vector<std::string>& bench_modes();

struct BenchRecord {
  std::string mode;
  std::size_t seq_len = 0;
  std::size_t batch = 0;
  double seconds = 0.0;  // median over timed iterations
  double tokens_per_sec = 0.0;
  std::string fp_mode;
  bool backward = false;
  std::size_t warmups = 0;
  std::size_t workers = 1;
  std::size_t repeats = 1;  // calls averaged into each sample
  std::vector<double> samples;
};

struct SlopeFit {
  std::string mode;
  double slope = 0.0;
  double intercept = 0.0;
  std::size_t points = 0;
};

struct BenchReport {
  std::vector<BenchRecord> records;
  std::vector<SlopeFit> slopes;  // one per mode with >= 2 distinct lengths
  std::vector<std::string> notes;
};

/// Rough peak working set in bytes for one timed call.
double estimate_bench_bytes(const std::string& mode, std::size_t seq_len, std::size_t batch, const ModelConfig& cfg,
                            bool backward);

/// Least-squares slope of log(seconds) against log(seq_len).
std::optional<SlopeFit> fit_loglog_slope(const std::string& mode, std::span<const std::size_t> lengths,
                                         std::span<const double> seconds);

/// Times each mode at each length: warmups, then the median of `iterations`
/// timed calls. Forward-only runs untracked; backward runs build a tape.
/// Throws ConfigError for unknown modes, non-ascending lengths, too few
/// iterations, or a size estimate above the memory limit.
BenchReport run_bench(const BenchConfig& bench, const ModelConfig& model, std::uint64_t seed,
                      const std::function<void(const BenchRecord&)>& on_record = {});

std::string bench_csv(const BenchReport& report);
nlohmann::json bench_json(const BenchReport& report);

}  // namespace transx
