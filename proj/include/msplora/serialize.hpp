#pragma once

#include <bit>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "msplora/error.hpp"
#include "msplora/matrix.hpp"
#include "msplora/model.hpp"
#include "msplora/pyramid.hpp"

namespace msplora {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Base64 over little-endian 64-bit floats: matrices round-trip bit-exactly
// regardless of the host's endianness or printf formatting.
// ---------------------------------------------------------------------------

inline std::string base64_encode(const std::vector<unsigned char>& bytes) {
  static const char* tbl =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(tbl[(v >> 18) & 0x3F]);
    out.push_back(tbl[(v >> 12) & 0x3F]);
    out.push_back(tbl[(v >> 6) & 0x3F]);
    out.push_back(tbl[v & 0x3F]);
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out.push_back(tbl[(v >> 18) & 0x3F]);
    out.push_back(tbl[(v >> 12) & 0x3F]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(tbl[(v >> 18) & 0x3F]);
    out.push_back(tbl[(v >> 12) & 0x3F]);
    out.push_back(tbl[(v >> 6) & 0x3F]);
    out.push_back('=');
  }
  return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s) {
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (s.size() % 4 != 0) throw IoError("base64: length not a multiple of 4");
  std::vector<unsigned char> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = s[i + k];
      if (c == '=') {
        if (i + 4 != s.size() || k < 2) throw IoError("base64: bad padding");
        vals[k] = 0;
        ++pad;
      } else {
        if (pad > 0) throw IoError("base64: data after padding");
        vals[k] = value_of(c);
        if (vals[k] < 0) throw IoError(std::string("base64: invalid character '") + c + "'");
      }
    }
    const std::uint32_t v = (vals[0] << 18) | (vals[1] << 12) | (vals[2] << 6) | vals[3];
    out.push_back((v >> 16) & 0xFF);
    if (pad < 2) out.push_back((v >> 8) & 0xFF);
    if (pad < 1) out.push_back(v & 0xFF);
  }
  return out;
}

inline std::string encode_doubles(const std::vector<double>& values) {
  std::vector<unsigned char> bytes;
  bytes.reserve(values.size() * 8);
  for (double d : values) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(d);
    for (int b = 0; b < 8; ++b) bytes.push_back((u >> (8 * b)) & 0xFF);
  }
  return base64_encode(bytes);
}

inline std::vector<double> decode_doubles(const std::string& b64) {
  const std::vector<unsigned char> bytes = base64_decode(b64);
  if (bytes.size() % 8 != 0) throw IoError("matrix payload is not a whole number of doubles");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) {
      u |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    }
    out[i] = std::bit_cast<double>(u);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix / parameter JSON
// ---------------------------------------------------------------------------

inline json matrix_to_json(const Matrix& m) {
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", encode_doubles(m.data())}};
}

inline Matrix matrix_from_json(const json& j) {
  const std::size_t rows = j.at("rows").get<std::size_t>();
  const std::size_t cols = j.at("cols").get<std::size_t>();
  std::vector<double> data = decode_doubles(j.at("data").get<std::string>());
  if (data.size() != rows * cols) {
    throw IoError("matrix payload holds " + std::to_string(data.size()) +
                  " doubles, expected " + shape_string(rows, cols));
  }
  Matrix m(rows, cols);
  m.data() = std::move(data);
  return m;
}

namespace detail {

inline json named_matrices(const std::vector<const Parameter*>& params) {
  json arr = json::array();
  for (const Parameter* p : params) {
    json entry = matrix_to_json(p->value);
    entry["name"] = p->name;
    arr.push_back(std::move(entry));
  }
  return arr;
}

inline void load_named_matrices(const json& arr, std::vector<Parameter*> params) {
  std::unordered_map<std::string, Parameter*> by_name;
  for (Parameter* p : params) by_name.emplace(p->name, p);
  std::size_t loaded = 0;
  for (const json& entry : arr) {
    const std::string name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("unknown matrix '" + name + "' in document");
    Matrix m = matrix_from_json(entry);
    if (m.rows() != it->second->value.rows() || m.cols() != it->second->value.cols()) {
      throw IoError("matrix '" + name + "' is " + m.shape() + ", expected " +
                    it->second->value.shape());
    }
    it->second->value = std::move(m);
    ++loaded;
  }
  if (loaded != params.size()) {
    throw IoError("document holds " + std::to_string(loaded) + " matrices, expected " +
                  std::to_string(params.size()));
  }
}

inline json kinds_to_json(const std::vector<Proj>& kinds) {
  json arr = json::array();
  for (Proj k : kinds) arr.push_back(to_string(k));
  return arr;
}

inline std::vector<Proj> kinds_from_json(const json& arr) {
  std::vector<Proj> out;
  for (const json& k : arr) out.push_back(proj_from_string(k.get<std::string>()));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Adapter sets
// ---------------------------------------------------------------------------

inline json to_json(const PyramidAdapterSet& s) {
  json j;
  j["method"] = "msplora";
  j["n_layers"] = s.n_layers();
  j["d_model"] = s.d_model();
  j["ranks"] = {{"high", s.schedule().high}, {"mid", s.schedule().mid}, {"low", s.schedule().low}};
  j["partition"] = {{"sizes", s.partition().sizes()}};
  j["seed"] = s.seed();
  j["sigma"] = s.sigma();
  j["kinds"] = detail::kinds_to_json(s.kinds());
  j["tier_scales"] = {{"global", s.tier_scales().global},
                      {"mid", s.tier_scales().mid},
                      {"layer", s.tier_scales().layer}};
  j["matrices"] = detail::named_matrices(s.trainable_parameters());
  return j;
}

inline PyramidAdapterSet pyramid_from_json(const json& j) {
  if (j.at("method").get<std::string>() != "msplora") {
    throw IoError("document method is '" + j.at("method").get<std::string>() +
                  "', expected 'msplora'");
  }
  const RankSchedule sched = RankSchedule::custom(j.at("ranks").at("high").get<std::size_t>(),
                                                  j.at("ranks").at("mid").get<std::size_t>(),
                                                  j.at("ranks").at("low").get<std::size_t>());
  PyramidAdapterSet s(j.at("n_layers").get<std::size_t>(), j.at("d_model").get<std::size_t>(),
                      sched, j.at("seed").get<std::uint64_t>(), j.at("sigma").get<double>(),
                      detail::kinds_from_json(j.at("kinds")));
  if (j.contains("tier_scales")) {
    s.tier_scales().global = j["tier_scales"].at("global").get<double>();
    s.tier_scales().mid = j["tier_scales"].at("mid").get<double>();
    s.tier_scales().layer = j["tier_scales"].at("layer").get<double>();
  }
  detail::load_named_matrices(j.at("matrices"), s.trainable_parameters());
  return s;
}

inline json to_json(const PlainLoraSet& s) {
  json j;
  j["method"] = "lora";
  j["n_layers"] = s.n_layers();
  j["d_model"] = s.d_model();
  j["rank"] = s.rank();
  j["seed"] = s.seed();
  j["sigma"] = s.sigma();
  j["kinds"] = detail::kinds_to_json(s.kinds());
  j["matrices"] = detail::named_matrices(s.trainable_parameters());
  return j;
}

inline PlainLoraSet plain_lora_from_json(const json& j) {
  if (j.at("method").get<std::string>() != "lora") {
    throw IoError("document method is '" + j.at("method").get<std::string>() +
                  "', expected 'lora'");
  }
  PlainLoraSet s(j.at("n_layers").get<std::size_t>(), j.at("d_model").get<std::size_t>(),
                 j.at("rank").get<std::size_t>(), j.at("seed").get<std::uint64_t>(),
                 j.at("sigma").get<double>(), detail::kinds_from_json(j.at("kinds")));
  detail::load_named_matrices(j.at("matrices"), s.trainable_parameters());
  return s;
}

inline json adapter_to_json(const AdapterSet& s) {
  if (const auto* p = dynamic_cast<const PyramidAdapterSet*>(&s)) return to_json(*p);
  if (const auto* p = dynamic_cast<const PlainLoraSet*>(&s)) return to_json(*p);
  throw Error("adapter_to_json: unknown adapter type");
}

inline std::unique_ptr<AdapterSet> adapter_from_json(const json& j) {
  const std::string method = j.at("method").get<std::string>();
  if (method == "msplora") {
    return std::make_unique<PyramidAdapterSet>(pyramid_from_json(j));
  }
  if (method == "lora") {
    return std::make_unique<PlainLoraSet>(plain_lora_from_json(j));
  }
  throw IoError("unknown adapter method '" + method + "'");
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

inline json config_to_json(const TinyTransformerConfig& c) {
  return json{{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},         {"vocab", c.vocab},     {"seq_len", c.seq_len},
              {"seed", c.seed}};
}

inline TinyTransformerConfig model_config_from_json(const json& j) {
  TinyTransformerConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.seq_len = j.at("seq_len").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

inline json backbone_to_json(const FrozenBackbone& bb) {
  json j;
  j["config"] = config_to_json(bb.config());
  j["matrices"] = detail::named_matrices(bb.all_parameters());
  return j;
}

inline FrozenBackbone backbone_from_json(const json& j) {
  FrozenBackbone bb(model_config_from_json(j.at("config")));
  detail::load_named_matrices(j.at("matrices"), bb.all_parameters());
  return bb;
}

}  // namespace msplora
