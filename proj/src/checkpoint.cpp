#include "distlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "distlab/digest.hpp"

namespace distlab {

namespace {

constexpr const char* kFormat = "distlab-ckpt-v1";

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"d_emb", c.d_emb},
          {"num_heads", c.num_heads},   {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"context_length", c.context_length},
          {"rms_eps", c.rms_eps},       {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<std::int64_t>();
  c.d_emb = j.at("d_emb").get<std::int64_t>();
  c.num_heads = j.at("num_heads").get<std::int64_t>();
  c.d_ff = j.at("d_ff").get<std::int64_t>();
  c.vocab_size = j.at("vocab_size").get<std::int64_t>();
  c.context_length = j.at("context_length").get<std::int64_t>();
  c.rms_eps = j.at("rms_eps").get<double>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.validate();
  return c;
}

}  // namespace

void save_checkpoint(const Transformer<float>& model, const std::string& path) {
  nlohmann::json manifest = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& p : model.params()) {
    manifest.push_back({{"name", p.name},
                        {"shape", p.tensor.shape()},
                        {"dtype", "f32"},
                        {"offset", offset}});
    offset += p.tensor.numel() * 4;
  }
  nlohmann::json header = {{"format", kFormat},
                           {"model", config_to_json(model.config())},
                           {"digest", hex(model_digest(model))},
                           {"tensors", std::move(manifest)}};
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  const std::uint64_t hlen = htext.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& p : model.params())
    out.write(reinterpret_cast<const char*>(p.tensor.values().data()),
              static_cast<std::streamsize>(p.tensor.numel()) * 4);
  if (!out) throw std::runtime_error("checkpoint: write to " + path + " failed");
}

Transformer<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);

  unsigned char lenbuf[8];
  if (!in.read(reinterpret_cast<char*>(lenbuf), 8))
    throw std::runtime_error("checkpoint: " + path + " is too short for a header");
  std::uint64_t hlen = 0;
  for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | lenbuf[i];
  std::string htext(hlen, '\0');
  if (!in.read(htext.data(), static_cast<std::streamsize>(hlen)))
    throw std::runtime_error("checkpoint: truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: malformed header in " + path + ": " + e.what());
  }
  if (header.value("format", "") != kFormat)
    throw std::runtime_error("checkpoint: " + path + " has unrecognized format tag");

  struct Entry {
    Shape shape;
    std::int64_t offset = 0;
  };
  std::unordered_map<std::string, Entry> manifest;
  for (const auto& t : header.at("tensors")) {
    if (t.at("dtype").get<std::string>() != "f32")
      throw std::runtime_error("checkpoint: unsupported dtype " + t.at("dtype").get<std::string>());
    manifest[t.at("name").get<std::string>()] = {t.at("shape").get<Shape>(),
                                                 t.at("offset").get<std::int64_t>()};
  }

  Transformer<float> model(config_from_json(header.at("model")), /*seed=*/0);
  if (manifest.size() != model.params().size())
    throw std::runtime_error("checkpoint: manifest lists " + std::to_string(manifest.size()) +
                             " tensors, model has " + std::to_string(model.params().size()));

  const std::int64_t payload_base = 8 + static_cast<std::int64_t>(hlen);
  for (const auto& p : model.params()) {
    auto it = manifest.find(p.name);
    if (it == manifest.end()) throw std::runtime_error("checkpoint: missing tensor " + p.name);
    if (it->second.shape != p.tensor.shape())
      throw std::runtime_error("checkpoint: tensor " + p.name + " has shape " +
                               shape_str(it->second.shape) + ", expected " + shape_str(p.tensor.shape()));
    std::vector<float> vals(static_cast<std::size_t>(p.tensor.numel()));
    in.seekg(payload_base + it->second.offset);
    if (!in.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(vals.size()) * 4))
      throw std::runtime_error("checkpoint: truncated payload reading " + p.name);
    model.load_param(p.name, vals);
  }

  const std::string want = header.value("digest", "");
  if (!want.empty() && hex(model_digest(model)) != want)
    throw std::runtime_error("checkpoint: digest mismatch after load of " + path);
  return model;
}

}  // namespace distlab
