#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "transx/cli.hpp"

using namespace transx;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> v;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) v.push_back(l);
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("transx_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::size_t count_prefix(const std::string& text, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& l : lines(text)) n += l.rfind(prefix, 0) == 0;
  return n;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("verify passes every property") {
    const Run r = cli({"verify"});
    CHECK(r.code == kExitOk);
    CHECK(count_prefix(r.out, "FAIL") == 0);
    CHECK(count_prefix(r.out, "PASS") > 40);
    const auto meta = nlohmann::json::parse(lines(r.out).front());
    for (const char* key : {"command", "config", "seed", "fp_mode", "build_id", "workers"}) CHECK(meta.contains(key));
  }

  TEST_CASE("verify filter selects one module") {
    const Run r = cli({"verify", "--filter", "ssd"});
    CHECK(r.code == kExitOk);
    for (const auto& l : lines(r.out)) {
      if (l.rfind("PASS", 0) == 0 || l.rfind("FAIL", 0) == 0) CHECK(l.find(" ssd.") != std::string::npos);
    }
    CHECK(count_prefix(r.out, "PASS") == 7);
  }

  TEST_CASE("injected rotation fault is detected") {
    const Run r = cli({"verify", "--filter", "rope", "--inject-fault"});
    CHECK(r.code == kExitFailure);
    bool shift_failed = false;
    for (const auto& l : lines(r.out)) shift_failed |= l.rfind("FAIL rope.shift_invariance", 0) == 0;
    CHECK(shift_failed);
    CHECK(cli({"verify", "--filter", "rope"}).code == kExitOk);
  }

  TEST_CASE("usage and configuration errors") {
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
    CHECK(cli({"train", "--steps", "many"}).code == kExitUsage);
    CHECK(cli({"verify", "--filter", "no_such_property_anywhere"}).code == kExitUsage);
    CHECK(cli({"verify", "--config", "/nonexistent/config.json"}).code == kExitUsage);
    const fs::path dir = scratch("badcfg");
    fs::create_directories(dir);
    std::ofstream(dir / "c.json") << R"({"model": {"d_model": 63}})";
    CHECK(cli({"train", "--config", (dir / "c.json").string(), "--steps", "1", "--out", (dir / "o").string()}).code ==
          kExitUsage);
    std::ofstream(dir / "u.json") << R"({"mystery": 1})";
    CHECK(cli({"verify", "--config", (dir / "u.json").string()}).code == kExitUsage);
    CHECK(cli({"train", "--seq-len", "100000", "--out", (dir / "o").string()}).code == kExitUsage);
    CHECK(cli({"generate", (dir / "missing.bin").string()}).code == kExitUsage);
    CHECK(cli({"--help"}).code == kExitOk);
    fs::remove_all(dir);
  }

  TEST_CASE("zero-step training writes the initial checkpoint") {
    const fs::path dir = scratch("zero");
    const Run r = cli({"train", "--steps", "0", "--out", dir.string()});
    REQUIRE(r.code == kExitOk);
    CHECK(fs::exists(dir / "checkpoint_final.bin"));
    CHECK(fs::exists(dir / "config.json"));
    const auto m = lines(slurp(dir / "metrics.jsonl"));
    REQUIRE(m.size() == 1);
    CHECK(nlohmann::json::parse(m[0])["type"] == "metadata");
    fs::remove_all(dir);
  }

  TEST_CASE("same seed gives identical metrics") {
    const fs::path dir = scratch("repro");
    const std::vector<std::string> args{"train", "--steps", "6", "--batch", "2", "--seq-len", "16", "--eval-every", "3",
                                        "--checkpoint-every", "3", "--seed", "5", "--out", dir.string()};
    REQUIRE(cli(args).code == kExitOk);
    const std::string first = slurp(dir / "metrics.jsonl");
    const std::string ckpt = slurp(dir / "checkpoint_final.bin");
    CHECK(fs::exists(dir / "checkpoint_step_3.bin"));
    REQUIRE(cli(args).code == kExitOk);
    CHECK(slurp(dir / "metrics.jsonl") == first);
    CHECK(slurp(dir / "checkpoint_final.bin") == ckpt);
    const auto m = lines(first);
    CHECK(m.size() == 1 + 6 + 2);
    for (std::size_t i = 1; i < m.size(); ++i) CHECK_FALSE(nlohmann::json::parse(m[i]).contains("tokens_per_sec"));
    fs::remove_all(dir);
  }

  TEST_CASE("bench with one length reports one row per mode and no slope") {
    const fs::path dir = scratch("bench");
    const Run r = cli({"bench", "--lengths", "64", "--iterations", "5", "--warmups", "2", "--out", dir.string()});
    REQUIRE(r.code == kExitOk);
    CHECK(count_prefix(r.out, "slope") == 0);
    const auto csv = lines(slurp(dir / "bench.csv"));
    CHECK(csv.size() == 1 + 4);
    const auto j = nlohmann::json::parse(slurp(dir / "bench.json"));
    CHECK(j.contains("metadata"));
    CHECK(cli({"bench", "--lengths", "64", "--warmups", "1", "--out", dir.string()}).code == kExitUsage);
    CHECK(cli({"bench", "--lengths", "64,32", "--out", dir.string()}).code == kExitUsage);
    fs::remove_all(dir);
  }

  TEST_CASE("generate echoes the prompt and traces cache sizes") {
    const fs::path dir = scratch("gen");
    REQUIRE(cli({"train", "--steps", "0", "--out", dir.string()}).code == kExitOk);
    const std::string ck = (dir / "checkpoint_final.bin").string();
    const Run echo = cli({"generate", ck, "--prompt", "hello", "--n", "0"});
    CHECK(echo.code == kExitOk);
    CHECK(echo.out == "hello\n");

    const Run tr = cli({"generate", ck, "--prompt", "ab", "--n", "5", "--trace"});
    REQUIRE(tr.code == kExitOk);
    std::vector<nlohmann::json> steps;
    for (const auto& l : lines(tr.err)) {
      const auto j = nlohmann::json::parse(l);
      if (j["type"] == "trace") steps.push_back(j);
    }
    REQUIRE(steps.size() == 5);
    for (const auto& s : steps) CHECK(s["ss_cache_bytes"] == steps[0]["ss_cache_bytes"]);
    const auto sa = [&](std::size_t i) { return steps[i]["sa_cache_bytes"].get<std::size_t>(); };
    for (std::size_t i = 1; i < 5; ++i) CHECK(sa(i) - sa(i - 1) == sa(1) - sa(0));
    CHECK(sa(1) > sa(0));
    CHECK(cli({"generate", ck, "--prompt", "ab", "--n", "5"}).out == cli({"generate", ck, "--prompt", "ab", "--n", "5"}).out);
    fs::remove_all(dir);
  }
}
