#include <fstream>
#include <iterator>
#include <string>

#include "transx/errors.hpp"
#include "transx/lm.hpp"

namespace transx {

namespace {

TaskInstance from_sequence(const std::vector<int>& seq, std::size_t scored_tail) {
  TaskInstance inst;
  const std::size_t T = seq.size() - 1;
  inst.inputs.assign(seq.begin(), seq.end() - 1);
  inst.targets.assign(seq.begin() + 1, seq.end());
  inst.mask.assign(T, 0);
  for (std::size_t t = T - scored_tail; t < T; ++t) inst.mask[t] = 1;
  return inst;
}

int lowercase(Rng& rng) { return 'a' + static_cast<int>(rng.below(26)); }
int digit(Rng& rng) { return '0' + static_cast<int>(rng.below(10)); }

}  // namespace

std::vector<int> TaskInstance::sequence() const {
  std::vector<int> s = inputs;
  if (!targets.empty()) s.push_back(targets.back());
  return s;
}

TaskInstance copy_task_from_payload(std::span<const int> payload) {
  if (payload.empty()) throw DomainError("copy task: empty payload");
  std::vector<int> seq(payload.begin(), payload.end());
  seq.push_back(kSepToken);
  seq.insert(seq.end(), payload.begin(), payload.end());
  return from_sequence(seq, payload.size());
}

TaskInstance make_copy_task(Rng& rng, std::size_t T, std::size_t vocab) {
  if (T < 2) throw DomainError("copy task: T must be >= 2");
  if (vocab == 0 || vocab > 256) throw DomainError("copy task: vocab must be in [1, 256]");
  const std::size_t p = T / 2;
  const int first = vocab <= 26 ? 'a' : 0;
  std::vector<int> payload(p);
  for (int& v : payload) v = first + static_cast<int>(rng.below(vocab));
  TaskInstance inst = copy_task_from_payload(payload);
  if (T % 2 == 1) {
    std::vector<int> seq = inst.sequence();
    seq.insert(seq.begin(), kBosToken);
    inst = from_sequence(seq, p);
  }
  return inst;
}

TaskInstance make_needle_task(Rng& rng, std::size_t T, std::size_t needle_len) {
  if (needle_len == 0) throw DomainError("needle task: needle_len must be >= 1");
  const std::size_t L = T + 1;
  if (L < 2 * needle_len + 2) {
    throw DomainError("needle task: needle of " + std::to_string(needle_len) + " does not fit in T=" + std::to_string(T));
  }
  const std::size_t max_key = L - 2 * needle_len - 2;
  const std::size_t key = static_cast<std::size_t>(rng.below(max_key + 1));
  std::vector<int> needle(needle_len);
  for (int& v : needle) v = digit(rng);
  std::vector<int> seq(L);
  for (int& v : seq) v = lowercase(rng);
  seq[key] = kSepToken;
  std::copy(needle.begin(), needle.end(), seq.begin() + static_cast<std::ptrdiff_t>(key + 1));
  seq[L - needle_len - 1] = kQueryToken;
  std::copy(needle.begin(), needle.end(), seq.end() - static_cast<std::ptrdiff_t>(needle_len));
  TaskInstance inst = from_sequence(seq, needle_len);
  inst.key_position = key;
  return inst;
}

TaskInstance make_bytes_task(Rng& rng, std::span<const std::uint8_t> corpus, std::size_t T) {
  if (corpus.size() < T + 1) throw DomainError("bytes task: corpus shorter than T+1 bytes");
  const std::size_t start = static_cast<std::size_t>(rng.below(corpus.size() - T));
  std::vector<int> seq(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                       corpus.begin() + static_cast<std::ptrdiff_t>(start + T + 1));
  return from_sequence(seq, T);
}

TaskSpec TaskSpec::parse(std::string_view text, std::size_t seq_len) {
  TaskSpec spec;
  spec.seq_len = seq_len;
  if (text == "copy") {
    spec.kind = Kind::copy;
  } else if (text == "needle") {
    spec.kind = Kind::needle;
  } else if (text.starts_with("bytes:")) {
    spec.kind = Kind::bytes;
    const std::string path(text.substr(6));
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DomainError("task: cannot read corpus '" + path + "'");
    auto data = std::make_shared<std::vector<std::uint8_t>>((std::istreambuf_iterator<char>(in)),
                                                            std::istreambuf_iterator<char>());
    spec.corpus = std::move(data);
  } else {
    throw DomainError("task: expected copy, needle or bytes:<file>, got '" + std::string(text) + "'");
  }
  return spec;
}

std::string TaskSpec::name() const {
  switch (kind) {
    case Kind::copy: return "copy";
    case Kind::needle: return "needle";
    case Kind::bytes: return "bytes";
  }
  return "unknown";
}

TaskInstance TaskSpec::sample(Rng& rng) const {
  switch (kind) {
    case Kind::copy: return make_copy_task(rng, seq_len, copy_vocab);
    case Kind::needle: return make_needle_task(rng, seq_len, needle_len);
    case Kind::bytes: return make_bytes_task(rng, *corpus, seq_len);
  }
  throw DomainError("task: unknown kind");
}

Batch collate(std::span<const TaskInstance> items) {
  if (items.empty()) throw DomainError("collate: empty batch");
  Batch b;
  b.batch = items.size();
  b.seq_len = items.front().length();
  for (const auto& it : items) {
    if (it.length() != b.seq_len) throw ShapeError("collate: instances differ in length");
    b.inputs.insert(b.inputs.end(), it.inputs.begin(), it.inputs.end());
    b.targets.insert(b.targets.end(), it.targets.begin(), it.targets.end());
    b.mask.insert(b.mask.end(), it.mask.begin(), it.mask.end());
  }
  return b;
}

}  // namespace transx
