#include <bit>
#include <cstring>
#include <fstream>

#include "transx/errors.hpp"
#include "transx/lm.hpp"

namespace transx {

namespace {

constexpr char kMagic[8] = {'T', 'X', 'S', 'S', 'M', 'C', 'K', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DomainError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra) {
  nlohmann::json header;
  header["format"] = "transx-checkpoint";
  header["version"] = 1;
  header["config"] = model.config();
  header["extra"] = extra;
  auto& manifest = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto params = model.named_parameters();
  for (const auto& [name, t] : params) {
    manifest.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->numel();
  }
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DomainError("checkpoint: cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params) {
    for (double v : t->data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw DomainError("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DomainError("checkpoint: cannot read " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw DomainError("checkpoint: bad magic");
  const std::uint64_t len = get_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw DomainError("checkpoint: truncated header");
  const nlohmann::json header = nlohmann::json::parse(text);
  if (header.value("format", "") != "transx-checkpoint" || header.value("version", 0) != 1) {
    throw DomainError("checkpoint: unsupported format");
  }
  const ModelConfig cfg = header.at("config").get<ModelConfig>();
  Model model = Model::initialize(cfg, 0);
  auto params = model.named_parameters();
  const auto& manifest = header.at("tensors");
  if (manifest.size() != params.size()) throw DomainError("checkpoint: tensor count does not match config");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& entry = manifest[k];
    auto& [name, t] = params[k];
    if (entry.at("name").get<std::string>() != name || entry.at("shape").get<Shape>() != t->shape()) {
      throw DomainError("checkpoint: manifest entry " + std::to_string(k) + " does not match " + name);
    }
    for (double& v : t->data()) v = std::bit_cast<double>(get_u64(is));
  }
  if (extra) *extra = header.value("extra", nlohmann::json::object());
  return model;
}

}  // namespace transx
