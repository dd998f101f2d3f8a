#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "fpgx/common.hpp"
#include "fpgx/growth.hpp"
#include "fpgx/mask.hpp"
#include "fpgx/serde.hpp"
#include "fpgx/transformer.hpp"

namespace fpgx {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

inline constexpr char kCheckpointMagic[4] = {'F', 'P', 'G', 'X'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::vector<GrowthPlan> lineage;
  std::optional<FreezeMask> mask;
  std::map<std::string, std::string> labels;
};

using AnyParams = std::variant<ModelParams<float>, ModelParams<double>>;

inline const ModelConfig& config_of(const AnyParams& p) {
  return std::visit([](const auto& m) -> const ModelConfig& { return m.config; }, p);
}

namespace detail {

template <class S>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() {
  return "f32";
}
template <>
constexpr const char* dtype_name<double>() {
  return "f64";
}

inline void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t read_u32_le(std::string_view bytes, size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[at + size_t(i)]);
  return v;
}

inline std::uint64_t read_u64_le(std::string_view bytes, size_t at) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[at + size_t(i)]);
  return v;
}

struct TensorEntry {
  std::string name;
  std::string dtype;
  Index rows = 0;
  Index cols = 0;
  std::uint64_t offset = 0;
  std::uint64_t len = 0;
};

template <class S>
std::pair<AnyParams, CheckpointMeta> decode_typed(const Json& header, std::string_view payload) {
  ModelConfig cfg;
  try {
    cfg = config_from_json(header.at("config"));
  } catch (const std::runtime_error& e) {
    throw CorruptTable(std::string("checkpoint: malformed embedded config: ") + e.what());
  }

  std::vector<TensorEntry> table;
  try {
    for (const Json& t : header.at("tensors")) {
      reject_unknown_keys(t, {"name", "dtype", "shape", "offset", "len"}, "tensor entry");
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = t.at("dtype").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
      if (shape.size() != 2) throw InputError("tensor entry: shape must have two dims");
      e.rows = shape[0];
      e.cols = shape[1];
      e.offset = t.at("offset").get<std::uint64_t>();
      e.len = t.at("len").get<std::uint64_t>();
      table.push_back(std::move(e));
    }
  } catch (const Json::exception& e) {
    throw CorruptTable(std::string("checkpoint: malformed tensor table: ") + e.what());
  } catch (const InputError& e) {
    throw CorruptTable(std::string("checkpoint: malformed tensor table: ") + e.what());
  }

  std::uint64_t total = 0;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const TensorEntry& e : table) {
    if (e.dtype != dtype_name<S>())
      throw CorruptTable("checkpoint: tensor '" + e.name + "' dtype disagrees with header");
    if (e.offset + e.len > payload.size())
      throw CorruptTable("checkpoint: tensor '" + e.name + "' overruns the payload");
    spans.emplace_back(e.offset, e.len);
    total += e.len;
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].first + spans[i - 1].second)
      throw CorruptTable("checkpoint: tensor offsets overlap");
  if (total != payload.size())
    throw CorruptTable("checkpoint: payload length disagrees with tensor table");

  ModelParams<S> params = alloc_params<S>(cfg);
  std::map<std::string, const TensorEntry*> by_name;
  for (const TensorEntry& e : table) {
    if (!by_name.emplace(e.name, &e).second)
      throw CorruptTable("checkpoint: duplicate tensor '" + e.name + "'");
  }

  size_t expected = 0;
  for_each_tensor(params, [&](const std::string& name, Mat<S>& tensor) {
    ++expected;
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ShapeMismatch("checkpoint: tensor '" + name + "' missing from the table");
    const TensorEntry& e = *it->second;
    if (e.rows != tensor.rows() || e.cols != tensor.cols())
      throw ShapeMismatch("checkpoint: tensor '" + name + "' shape disagrees with config");
    if (e.len != std::uint64_t(tensor.size()) * sizeof(S))
      throw CorruptTable("checkpoint: tensor '" + name + "' length disagrees with its shape");
    std::memcpy(tensor.data(), payload.data() + e.offset, e.len);
  });
  if (expected != table.size())
    throw ShapeMismatch("checkpoint: tensor table names tensors absent from the model");

  CheckpointMeta meta;
  try {
    for (const Json& p : header.at("lineage")) meta.lineage.push_back(plan_from_json(p));
    if (!header.at("freeze_mask").is_null()) meta.mask = mask_from_json(header.at("freeze_mask"));
    for (auto it = header.at("meta").begin(); it != header.at("meta").end(); ++it)
      meta.labels[it.key()] = it.value().get<std::string>();
  } catch (const Json::exception& e) {
    throw CorruptTable(std::string("checkpoint: malformed metadata: ") + e.what());
  } catch (const InputError& e) {
    throw CorruptTable(std::string("checkpoint: malformed metadata: ") + e.what());
  }
  return {AnyParams(std::move(params)), std::move(meta)};
}

}  // namespace detail

template <class S>
std::string encode_checkpoint(const ModelParams<S>& params, const CheckpointMeta& meta) {
  params.config.validate();

  Json tensors = Json::array();
  std::string payload;
  for_each_tensor(params, [&](const std::string& name, const Mat<S>& t) {
    Json entry;
    entry["name"] = name;
    entry["dtype"] = detail::dtype_name<S>();
    entry["shape"] = {static_cast<std::int64_t>(t.rows()), static_cast<std::int64_t>(t.cols())};
    entry["offset"] = payload.size();
    const size_t len = static_cast<size_t>(t.size()) * sizeof(S);
    entry["len"] = len;
    tensors.push_back(std::move(entry));
    payload.append(reinterpret_cast<const char*>(t.data()), len);
  });

  Json header;
  header["dtype"] = detail::dtype_name<S>();
  header["config"] = config_to_json(params.config);
  Json lineage = Json::array();
  for (const GrowthPlan& p : meta.lineage) lineage.push_back(plan_to_json(p));
  header["lineage"] = lineage;
  header["freeze_mask"] = meta.mask ? mask_to_json(*meta.mask) : Json(nullptr);
  header["meta"] = meta.labels;
  header["tensors"] = tensors;

  const std::string header_text = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::append_u32_le(out, kCheckpointVersion);
  detail::append_u64_le(out, header_text.size());
  out += header_text;
  out += payload;
  return out;
}

inline std::pair<AnyParams, CheckpointMeta> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw BadMagic("checkpoint: magic bytes are not FPGX");
  if (bytes.size() < 16) throw CorruptTable("checkpoint: truncated fixed header");
  const std::uint32_t version = detail::read_u32_le(bytes, 4);
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint: version " + std::to_string(version) + " unsupported");
  const std::uint64_t header_len = detail::read_u64_le(bytes, 8);
  if (16 + header_len > bytes.size()) throw CorruptTable("checkpoint: truncated header");

  Json header;
  try {
    header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(header_len));
  } catch (const Json::exception& e) {
    throw CorruptTable(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  try {
    detail::reject_unknown_keys(
        header, {"dtype", "config", "lineage", "freeze_mask", "meta", "tensors"}, "checkpoint header");
    for (const char* key : {"dtype", "config", "lineage", "freeze_mask", "meta", "tensors"})
      if (!header.contains(key))
        throw InputError(std::string("checkpoint header: missing key '") + key + "'");
  } catch (const InputError& e) {
    throw CorruptTable(e.what());
  }

  const std::string_view payload(bytes.data() + 16 + header_len,
                                 bytes.size() - 16 - static_cast<size_t>(header_len));
  std::string dtype;
  try {
    dtype = header.at("dtype").get<std::string>();
  } catch (const Json::exception& e) {
    throw CorruptTable(std::string("checkpoint: malformed dtype: ") + e.what());
  }
  if (dtype == "f32") return detail::decode_typed<float>(header, payload);
  if (dtype == "f64") return detail::decode_typed<double>(header, payload);
  throw CorruptTable("checkpoint: unknown dtype '" + dtype + "'");
}

// Write-temp-then-rename so readers never observe a half-written file.
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("io: cannot open '" + tmp + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) {
      fs::remove(tmp);
      throw InputError("io: short write to '" + tmp + "'");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw InputError("io: cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("io: cannot read '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

template <class S>
void save_checkpoint(const ModelParams<S>& params, const CheckpointMeta& meta,
                     const std::string& path) {
  atomic_write_file(path, encode_checkpoint(params, meta));
}

inline std::pair<AnyParams, CheckpointMeta> load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path));
}

inline std::string base64_encode(const unsigned char* data, size_t n) {
  static constexpr char kAlphabet[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (size_t i = 0; i < n; i += 3) {
    const unsigned b0 = data[i];
    const unsigned b1 = i + 1 < n ? data[i + 1] : 0;
    const unsigned b2 = i + 2 < n ? data[i + 2] : 0;
    out.push_back(kAlphabet[b0 >> 2]);
    out.push_back(kAlphabet[((b0 & 0x3) << 4) | (b1 >> 4)]);
    out.push_back(i + 1 < n ? kAlphabet[((b1 & 0xf) << 2) | (b2 >> 6)] : '=');
    out.push_back(i + 2 < n ? kAlphabet[b2 & 0x3f] : '=');
  }
  return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& text) {
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw InputError("base64: length must be a multiple of four");
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + size_t(k)];
      if (c == '=') {
        if (i + 4 != text.size() || k < 2) throw InputError("base64: misplaced padding");
        vals[k] = 0;
        ++pad;
      } else {
        if (pad > 0) throw InputError("base64: data after padding");
        vals[k] = value_of(c);
        if (vals[k] < 0) throw InputError(std::string("base64: invalid character '") + c + "'");
      }
    }
    out.push_back(static_cast<unsigned char>((vals[0] << 2) | (vals[1] >> 4)));
    if (pad < 2) out.push_back(static_cast<unsigned char>(((vals[1] & 0xf) << 4) | (vals[2] >> 2)));
    if (pad < 1) out.push_back(static_cast<unsigned char>(((vals[2] & 0x3) << 6) | vals[3]));
  }
  return out;
}

}  // namespace fpgx
