#pragma once

// Checkpoint layout (all integers little-endian):
//
//   magic      8 bytes  "PLABCKPT"
//   version    u32      1
//   config_len u32      byte length of the config JSON that follows
//   config     bytes    ModelConfig as JSON (plus "lora" when adapters are present)
//   count      u32      number of parameters
//   per parameter:
//     name_len u32, name bytes, trainable u8, rank u32, dims u64[rank], values f64[prod(dims)]
//
// A JSON manifest (<file>.json) lists name, shape, trainable and byte offset of each array.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "plab/core/error.hpp"
#include "plab/models/model.hpp"

namespace plab {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of checkpoint");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  nlohmann::json cfg = model.config();
  if (model.lora()) cfg["lora"] = *model.lora();
  const std::string cfg_text = cfg.dump();
  os.write("PLABCKPT", 8);
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_text.size()));
  os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(model.params().size()));
  nlohmann::json manifest = nlohmann::json::array();
  for (const Parameter& p : model.params()) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_pod<std::uint8_t>(os, p.trainable ? 1 : 0);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape) detail::write_pod<std::uint64_t>(os, d);
    const auto offset = static_cast<std::uint64_t>(os.tellp());
    os.write(reinterpret_cast<const char*>(p.value.data.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    manifest.push_back({{"name", p.name}, {"shape", p.value.shape}, {"trainable", p.trainable}, {"offset", offset}});
  }
  if (!os) throw IoError("failed writing checkpoint '" + path + "'");
  std::ofstream ms(path + ".json");
  if (!ms) throw IoError("cannot write manifest for '" + path + "'");
  ms << nlohmann::json{{"format", "plab-checkpoint"}, {"version", 1}, {"config", cfg}, {"parameters", manifest}}.dump(2)
     << '\n';
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "PLABCKPT", 8) != 0) throw IoError("'" + path + "' is not a plab checkpoint");
  if (detail::read_pod<std::uint32_t>(is) != 1) throw IoError("unsupported checkpoint version");
  const auto cfg_len = detail::read_pod<std::uint32_t>(is);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  const nlohmann::json cfg = nlohmann::json::parse(cfg_text);
  const ModelConfig config = cfg.get<ModelConfig>();
  std::vector<Parameter> params;
  const auto count = detail::read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    Parameter p;
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    p.name.resize(name_len);
    is.read(p.name.data(), name_len);
    p.trainable = detail::read_pod<std::uint8_t>(is) != 0;
    const auto rank = detail::read_pod<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_pod<std::uint64_t>(is);
    std::vector<double> values(shape_size(shape));
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw IoError("truncated checkpoint '" + path + "'");
    p.value = Tensor(std::move(shape), std::move(values));
    params.push_back(std::move(p));
  }
  Model m = Model::build(config, 0);
  if (cfg.contains("lora")) m = m.with_lora(cfg["lora"].get<LoRAConfig>(), 0);
  if (m.params().size() != params.size()) throw IoError("checkpoint parameter set does not match its config");
  for (Parameter& p : params) {
    Parameter& dst = m.param(p.name);
    if (dst.value.shape != p.value.shape) throw IoError("shape mismatch for parameter '" + p.name + "'");
    dst = std::move(p);
  }
  return m;
}

}  // namespace plab
