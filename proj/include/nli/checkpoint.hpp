#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nli/common.hpp"
#include "nli/corpus.hpp"
#include "nli/model.hpp"

namespace nli {

inline constexpr std::array<unsigned char, 8> kCheckpointMagic = {'N', 'L', 'I', 'C',
                                                                  'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint32_t crc32(const unsigned char* p, std::size_t n) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return ~c;
}

// All multi-byte fields are little-endian regardless of host order.
inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) buf.push_back(static_cast<unsigned char>(v >> (8 * k)));
}

inline void put_u64(std::vector<unsigned char>& buf, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) buf.push_back(static_cast<unsigned char>(v >> (8 * k)));
}

inline void put_f64(std::vector<unsigned char>& buf, double v) {
  put_u64(buf, std::bit_cast<std::uint64_t>(v));
}

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(uint(8)); }

  const unsigned char* bytes(std::size_t n) {
    need(n);
    const unsigned char* out = p_ + at_;
    at_ += n;
    return out;
  }

  std::size_t remaining() const { return n_ - at_; }

 private:
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int k = 0; k < width; ++k)
      v |= static_cast<std::uint64_t>(p_[at_ + static_cast<std::size_t>(k)]) << (8 * k);
    at_ += static_cast<std::size_t>(width);
    return v;
  }

  void need(std::size_t n) const {
    if (n_ - at_ < n) throw IoError("truncated checkpoint");
  }

  const unsigned char* p_;
  std::size_t n_, at_ = 0;
};

}  // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"model", to_string(c.kind)},
          {"encoder", to_string(c.encoder)},
          {"composition", to_string(c.composition)},
          {"pooling", to_string(c.pooling)},
          {"diff_prod", c.diff_prod},
          {"premise_attn", c.premise_attn},
          {"hypothesis_attn", c.hypothesis_attn},
          {"tied_forget", c.tied_forget},
          {"use_bias", c.use_bias},
          {"embed_dim", c.embed_dim},
          {"hidden", c.hidden},
          {"mlp_hidden", c.mlp_hidden},
          {"dropout", c.dropout}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.kind = model_kind_from(j.at("model").get<std::string>());
    c.encoder = feed_kind_from(j.at("encoder").get<std::string>());
    c.composition = feed_kind_from(j.at("composition").get<std::string>());
    c.pooling = pool_mode_from(j.at("pooling").get<std::string>());
    c.diff_prod = j.at("diff_prod").get<bool>();
    c.premise_attn = j.at("premise_attn").get<bool>();
    c.hypothesis_attn = j.at("hypothesis_attn").get<bool>();
    c.tied_forget = j.at("tied_forget").get<bool>();
    c.use_bias = j.at("use_bias").get<bool>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// On-disk layout: magic, format version (u32), manifest length (u64), UTF-8
/// JSON manifest (config, vocabulary, tensor table), tensor payload as
/// little-endian f64 in table order, CRC-32 of the payload (u32).
inline void save_checkpoint(const std::string& path, const Model& model,
                            const std::vector<std::string>& vocab_tokens) {
  nlohmann::json manifest;
  manifest["config"] = config_to_json(model.cfg);
  manifest["vocab"] = vocab_tokens;
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : model.params.named) {
    table.push_back({{"name", name},
                     {"shape", t.shape()},
                     {"offset", offset},
                     {"dtype", "f64"}});
    offset += static_cast<std::uint64_t>(t.size()) * 8;
  }
  manifest["tensors"] = table;
  const std::string mstr = manifest.dump();

  std::vector<unsigned char> payload;
  payload.reserve(offset);
  for (const auto& [name, t] : model.params.named)
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(payload, t.data()[i]);

  std::vector<unsigned char> buf;
  buf.reserve(payload.size() + mstr.size() + 32);
  for (unsigned char c : kCheckpointMagic) buf.push_back(c);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u64(buf, mstr.size());
  buf.insert(buf.end(), mstr.begin(), mstr.end());
  buf.insert(buf.end(), payload.begin(), payload.end());
  detail::put_u32(buf, detail::crc32(payload.data(), payload.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write on checkpoint " + path);
}

struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> vocab_tokens;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw ContractError("checkpoint has no tensor named " + name);
  }
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path);
  std::vector<unsigned char> raw{std::istreambuf_iterator<char>(in),
                                 std::istreambuf_iterator<char>()};
  detail::ByteReader r(raw.data(), raw.size());

  const unsigned char* magic = r.bytes(kCheckpointMagic.size());
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), magic))
    throw IoError("not a checkpoint file: " + path);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t mlen = r.u64();
  if (mlen > r.remaining()) throw IoError("truncated checkpoint");
  const unsigned char* mptr = r.bytes(mlen);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mptr, mptr + mlen);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint manifest: ") + e.what());
  }

  Checkpoint ck;
  std::uint64_t payload_len = 0;
  try {
    ck.config = config_from_json(manifest.at("config"));
    ck.vocab_tokens = manifest.at("vocab").get<std::vector<std::string>>();
    for (const auto& entry : manifest.at("tensors")) {
      if (entry.at("dtype").get<std::string>() != "f64")
        throw IoError("unsupported tensor dtype in checkpoint");
      const auto shape = entry.at("shape").get<Shape>();
      std::uint64_t count = 1;
      for (std::size_t d : shape) count *= d;
      if (entry.at("offset").get<std::uint64_t>() != payload_len)
        throw IoError("tensor table offsets are not contiguous");
      payload_len += count * 8;
      ck.tensors.emplace_back(entry.at("name").get<std::string>(),
                              Tensor::zeros(shape));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint manifest: ") + e.what());
  }

  if (r.remaining() != payload_len + 4) throw IoError("truncated checkpoint");
  const unsigned char* payload = r.bytes(payload_len);
  detail::ByteReader pr(payload, payload_len);
  for (auto& [name, t] : ck.tensors)
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = pr.f64();
  if (r.u32() != detail::crc32(payload, payload_len))
    throw IoError("checkpoint checksum mismatch: " + path);
  return ck;
}

/// Rebuild a model whose parameters exactly match the checkpoint. The loaded
/// tensor set and the freshly created parameter set must agree name-for-name.
inline Model restore_model(const Checkpoint& ck) {
  const Tensor& emb = ck.find("embed");
  Rng rng(0);
  Model m = Model::create(ck.config, Tensor::zeros(emb.shape()), rng);
  if (ck.tensors.size() != m.params.named.size())
    throw ContractError("checkpoint tensor count does not match the model");
  for (auto& [name, t] : m.params.named) {
    const Tensor& src = ck.find(name);
    if (src.shape() != t.shape())
      throw ContractError("checkpoint shape mismatch for " + name);
    std::copy(src.data(), src.data() + src.size(), t.data());
  }
  return m;
}

/// Vocabulary whose rows are the model's embedding matrix.
inline Vocabulary vocab_from_checkpoint(const Checkpoint& ck, const Model& model) {
  if (ck.vocab_tokens.size() != model.embeddings.rows())
    throw ContractError("checkpoint vocabulary does not match the embedding matrix");
  Vocabulary v;
  v.tokens = ck.vocab_tokens;
  for (std::size_t i = 0; i < v.tokens.size(); ++i) v.index[v.tokens[i]] = i;
  v.embeddings = model.embeddings;
  return v;
}

}  // namespace nli
