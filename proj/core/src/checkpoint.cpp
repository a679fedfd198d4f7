#include "rlkv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace rlkv {

namespace {

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},
              {"n_query_heads", c.n_query_heads},
              {"n_kv_heads", c.n_kv_heads},
              {"head_dim", c.head_dim},
              {"ff_dim", c.ff_dim},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"sink_train", c.sink_train},
              {"local_train", c.local_train}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_query_heads = j.at("n_query_heads").get<int>();
  c.n_kv_heads = j.at("n_kv_heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.sink_train = j.at("sink_train").get<int>();
  c.local_train = j.at("local_train").get<int>();
  c.validate();
  return c;
}

void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t read_u32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error("checkpoint " + path + ": " + what);
}

}  // namespace

std::uint64_t config_hash(const ModelConfig& config) {
  const std::string canon = config_to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

Checkpoint make_checkpoint(const Weights& weights, const GatingAdapters* adapters,
                           CheckpointProvenance provenance) {
  Checkpoint ckpt;
  ckpt.config = weights.config();
  for (const auto& [name, tensor] : weights.named()) {
    ckpt.tensors.emplace_back(name, *tensor);
  }
  if (adapters != nullptr) {
    if (adapters->n_layers() != ckpt.config.n_layers ||
        adapters->n_kv_heads() != ckpt.config.n_kv_heads) {
      throw std::invalid_argument("make_checkpoint: adapter grid does not match the model");
    }
    ckpt.tensors.emplace_back(kAdapterTensorName, adapters->alpha());
  }
  ckpt.provenance = std::move(provenance);
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  json manifest = json::array();
  std::size_t payload_elems = 0;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    json shape = json::array();
    for (std::size_t d = 0; d < tensor.shape().size(); ++d) shape.push_back(tensor.shape()[d]);
    manifest.push_back(json{{"name", name}, {"shape", shape}, {"dtype", "f32"}});
    payload_elems += static_cast<std::size_t>(tensor.numel());
  }
  json header{{"config", config_to_json(checkpoint.config)},
              {"manifest", manifest},
              {"provenance",
               json{{"stage", checkpoint.provenance.stage},
                    {"step_count", checkpoint.provenance.step_count},
                    {"config_hash", checkpoint.provenance.config_hash}}}};
  const std::string header_text = header.dump();

  std::string blob;
  blob.reserve(16 + header_text.size() + payload_elems * 4);
  blob.append(kCheckpointMagic, 4);
  append_u32_le(blob, kCheckpointVersion);
  append_u64_le(blob, static_cast<std::uint64_t>(header_text.size()));
  blob += header_text;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    const float* data = tensor.data();
    for (std::int64_t i = 0; i < tensor.numel(); ++i) {
      append_u32_le(blob, std::bit_cast<std::uint32_t>(data[i]));
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) fail(path, "write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

  if (blob.size() < 16) fail(path, "file too short for the fixed preamble");
  if (std::memcmp(blob.data(), kCheckpointMagic, 4) != 0) {
    fail(path, "bad magic bytes (expected \"RLKV\")");
  }
  const std::uint32_t version = read_u32_le(bytes + 4);
  if (version != kCheckpointVersion) {
    fail(path, "unsupported version " + std::to_string(version) + " (expected " +
                   std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t header_len = read_u64_le(bytes + 8);
  // blob.size() >= 16 here; this form cannot overflow
  if (header_len > blob.size() - 16) fail(path, "header length exceeds the file");

  json header;
  try {
    header = json::parse(blob.substr(16, header_len));
  } catch (const json::exception& e) {
    fail(path, std::string("header parse error: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(header.at("config"));
    const json& prov = header.at("provenance");
    ckpt.provenance.stage = prov.at("stage").get<std::string>();
    ckpt.provenance.step_count = prov.at("step_count").get<std::int64_t>();
    ckpt.provenance.config_hash = prov.at("config_hash").get<std::uint64_t>();

    std::size_t offset = 16 + header_len;
    for (const json& entry : header.at("manifest")) {
      const std::string name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        fail(path, "tensor " + name + " has unsupported dtype");
      }
      Shape shape;
      std::int64_t numel = 1;
      for (const json& d : entry.at("shape")) {
        shape.push_back(d.get<int>());
        numel *= shape.back();
      }
      if (numel < 0 || offset + static_cast<std::size_t>(numel) * 4 > blob.size()) {
        fail(path, "payload truncated: tensor " + name + " needs " + std::to_string(numel * 4) +
                       " bytes past offset " + std::to_string(offset));
      }
      std::vector<float> data(static_cast<std::size_t>(numel));
      for (std::int64_t i = 0; i < numel; ++i) {
        data[static_cast<std::size_t>(i)] =
            std::bit_cast<float>(read_u32_le(bytes + offset + static_cast<std::size_t>(i) * 4));
      }
      offset += static_cast<std::size_t>(numel) * 4;
      ckpt.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
    }
    if (offset != blob.size()) {
      fail(path, "payload length mismatch: " + std::to_string(blob.size() - offset) +
                     " trailing bytes");
    }
  } catch (const json::exception& e) {
    fail(path, std::string("malformed header: ") + e.what());
  }
  return ckpt;
}

Weights weights_from_checkpoint(const Checkpoint& checkpoint) {
  Weights weights(checkpoint.config, 0);
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, tensor] : checkpoint.tensors) stored[name] = &tensor;

  for (auto& [name, tensor] : weights.named()) {
    const auto it = stored.find(name);
    if (it == stored.end()) {
      throw std::runtime_error("checkpoint is missing model tensor " + name);
    }
    const Tensor& src = *it->second;
    if (src.shape() != tensor.shape()) {
      throw std::runtime_error("checkpoint tensor " + name + " has the wrong shape");
    }
    std::memcpy(tensor.data(), src.data(), static_cast<std::size_t>(src.numel()) * sizeof(float));
  }
  return weights;
}

std::optional<GatingAdapters> adapters_from_checkpoint(const Checkpoint& checkpoint) {
  for (const auto& [name, tensor] : checkpoint.tensors) {
    if (name != kAdapterTensorName) continue;
    std::vector<float> vals(tensor.data(), tensor.data() + tensor.numel());
    return GatingAdapters(Tensor::from_data(tensor.shape(), std::move(vals), true));
  }
  return std::nullopt;
}

}  // namespace rlkv
