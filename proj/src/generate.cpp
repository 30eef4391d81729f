#include <algorithm>
#include <cmath>

#include "transx/errors.hpp"
#include "transx/lm.hpp"

namespace transx {

namespace {

int sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    z += p[i];
  }
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (u < p[i]) return static_cast<int>(i);
    u -= p[i];
  }
  return static_cast<int>(p.size() - 1);
}

}  // namespace

std::vector<int> generate(const Model& model, std::span<const int> prompt, const GenerateOptions& options) {
  if (prompt.empty()) throw DomainError("generate: prompt must be non-empty");
  if (prompt.size() + options.n_new > model.config().max_position) {
    throw DomainError("generate: prompt + n_new exceeds max_position");
  }
  std::vector<int> out(prompt.begin(), prompt.end());
  if (options.n_new == 0) return out;

  const ModelWeights<Var> w = bind_constants(model.weights());
  ModelCache cache = model.make_cache();
  Rng rng = Rng(options.seed).fork(0x67656e);

  Tensor logits = model_forward(model, w, prompt, SequenceShape{1, prompt.size(), 0}, &cache).value();
  for (std::size_t step = 0; step < options.n_new; ++step) {
    Tensor last({1, logits.cols()});
    auto src = logits.row(logits.rows() - 1);
    std::copy(src.begin(), src.end(), last.row(0).begin());
    const int token = sample_token(last.row(0), options.temperature, rng);
    if (options.on_token) {
      GenerateTrace tr;
      tr.step = step;
      tr.position = cache.position - 1;
      tr.token = token;
      tr.ss_cache_bytes = cache.ss_bytes();
      tr.sa_cache_bytes = cache.sa_bytes();
      tr.logits = &last;
      options.on_token(tr);
    }
    out.push_back(token);
    if (step + 1 == options.n_new) break;
    const int next[1] = {token};
    logits = model_forward(model, w, next, SequenceShape{1, 1, cache.position}, &cache).value();
  }
  return out;
}

}  // namespace transx
