#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/backbone/model.hpp"
#include "tah/errors.hpp"
#include "tah/numerics/tensor.hpp"

namespace tah {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

/// One named array in a checkpoint file.
struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<unsigned char> bytes;  // row-major little-endian payload

  template <class T>
  static TensorRecord from(std::string name, const Shape& shape, std::span<const T> values) {
    TensorRecord r;
    r.name = std::move(name);
    r.dtype = dtype_of<T>::value;
    r.shape = shape;
    r.bytes.resize(values.size() * sizeof(T));
    std::memcpy(r.bytes.data(), values.data(), r.bytes.size());
    return r;
  }

  std::size_t numel() const { return shape_numel(shape); }

  /// Values converted to T (exact when the stored dtype is T).
  template <class T>
  std::vector<T> values() const {
    std::vector<T> out(numel());
    if (dtype == DType::f32) {
      std::vector<float> raw(numel());
      std::memcpy(raw.data(), bytes.data(), bytes.size());
      for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<T>(raw[i]);
    } else {
      std::vector<double> raw(numel());
      std::memcpy(raw.data(), bytes.data(), bytes.size());
      for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<T>(raw[i]);
    }
    return out;
  }
};

/// File layout: "TAH1", u32 meta length, meta JSON (UTF-8), u32 record
/// count, then per record: u32 name length, name, u8 dtype tag, u32 rank,
/// u64 extents, payload. Integers are little-endian.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> records;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
  const TensorRecord& at(const std::string& name) const {
    if (const auto* r = find(name)) return *r;
    throw IoError("checkpoint: missing record '" + name + "'");
  }
  void put(TensorRecord r) {
    for (auto& existing : records) {
      if (existing.name == r.name) {
        existing = std::move(r);
        return;
      }
    }
    records.push_back(std::move(r));
  }
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <class U>
U get_le(const std::string& in, std::size_t& at) {
  if (at + sizeof(U) > in.size()) throw IoError("checkpoint: truncated file");
  U v;
  std::memcpy(&v, in.data() + at, sizeof(U));
  at += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  std::string out = "TAH1";
  const auto meta = ck.meta.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.records.size()));
  for (const auto& r : ck.records) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    out.append(reinterpret_cast<const char*>(r.bytes.data()), r.bytes.size());
  }
  return out;
}

inline Checkpoint deserialize(const std::string& in) {
  if (in.size() < 4 || in.compare(0, 4, "TAH1") != 0) throw IoError("checkpoint: bad magic");
  std::size_t at = 4;
  Checkpoint ck;
  const auto meta_len = detail::get_le<std::uint32_t>(in, at);
  if (at + meta_len > in.size()) throw IoError("checkpoint: truncated header");
  try {
    ck.meta = nlohmann::json::parse(in.substr(at, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  at += meta_len;
  const auto count = detail::get_le<std::uint32_t>(in, at);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord r;
    const auto name_len = detail::get_le<std::uint32_t>(in, at);
    if (at + name_len > in.size()) throw IoError("checkpoint: truncated record name");
    r.name = in.substr(at, name_len);
    at += name_len;
    const auto tag = detail::get_le<std::uint8_t>(in, at);
    if (tag != static_cast<std::uint8_t>(DType::f32) && tag != static_cast<std::uint8_t>(DType::f64)) {
      throw IoError("checkpoint: unknown dtype tag in '" + r.name + "'");
    }
    r.dtype = static_cast<DType>(tag);
    const auto rank = detail::get_le<std::uint32_t>(in, at);
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(static_cast<std::size_t>(detail::get_le<std::uint64_t>(in, at)));
    const std::size_t n = shape_numel(r.shape) * (r.dtype == DType::f32 ? 4 : 8);
    if (at + n > in.size()) throw IoError("checkpoint: truncated payload for '" + r.name + "'");
    r.bytes.assign(in.begin() + static_cast<std::ptrdiff_t>(at), in.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
    ck.records.push_back(std::move(r));
  }
  if (at != in.size()) throw IoError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    const auto bytes = serialize(ck);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

template <class T>
void put_params(Checkpoint& ck, const std::vector<NamedParam<T>>& params, const std::string& prefix = "") {
  for (const auto& p : params) ck.put(TensorRecord::from<T>(prefix + p.name, p.tensor.shape(), p.tensor.data()));
}

/// Overwrites each parameter in place from the record of the same name.
template <class T>
void load_params(const Checkpoint& ck, std::vector<NamedParam<T>>& params, const std::string& prefix = "") {
  for (auto& p : params) {
    const auto& r = ck.at(prefix + p.name);
    if (r.shape != p.tensor.shape()) {
      throw IoError("checkpoint: shape mismatch for '" + p.name + "': file " + shape_str(r.shape) + " vs model " +
                    shape_str(p.tensor.shape()));
    }
    const auto vals = r.template values<T>();
    auto dst = p.tensor.mutable_data();
    std::copy(vals.begin(), vals.end(), dst.begin());
  }
}

template <class T>
Checkpoint backbone_checkpoint(const Backbone<T>& model) {
  Checkpoint ck;
  ck.meta["model"] = model.config();
  put_params(ck, model.params());
  return ck;
}

template <class T>
Backbone<T> backbone_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("model")) throw IoError("checkpoint: no model config in header");
  auto m = Backbone<T>::init(ck.meta["model"].get<ModelConfig>(), 0);
  auto params = m.params();
  load_params(ck, params);
  return m;
}

/// Content-addressed name for a serialized checkpoint.
inline std::string content_name(const std::string& bytes, const std::string& stem) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream ss;
  ss << stem << "-" << std::hex;
  ss.width(16);
  ss.fill('0');
  ss << h << ".tah";
  return ss.str();
}

}  // namespace tah
