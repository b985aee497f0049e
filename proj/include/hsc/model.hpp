#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hsc/coder.hpp"
#include "hsc/config.hpp"
#include "hsc/entropy.hpp"
#include "hsc/registry.hpp"
#include "hsc/transforms.hpp"

namespace hsc {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and bitstream IO assume a little-endian host");

namespace detail {

struct Fnv1a64 {
  std::uint64_t h = 1469598103934665603ull;
  void update(const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// model: the full set of trainable components behind one parameter registry

template <typename R>
struct ModelT {
  ModelConfig cfg;
  ParamRegistryT<R> reg;
  AnalysisT<R> analysis;
  SynthesisT<R> synthesis;
  EntropyModelT<R> entropy;

  ModelT(const ModelConfig& c, Rng& rng)
      : cfg(c), analysis(reg, cfg, rng), synthesis(reg, cfg, rng), entropy(reg, cfg, rng) {}

  // Identity of architecture plus weights; stamped into every bitstream so a
  // decoder can refuse payloads produced by a different model.
  std::uint64_t hash() const {
    detail::Fnv1a64 f;
    f.update(model_config_to_string(cfg));
    for (const auto* p : reg.list()) {
      f.update(p->name);
      for (auto d : p->value.shape) {
        const std::int64_t v = d;
        f.update(&v, sizeof(v));
      }
      f.update(p->value.data.data(), p->value.data.size() * sizeof(R));
    }
    return f.h;
  }
};

using Model = ModelT<float>;

// ---------------------------------------------------------------------------
// checkpoint container
//
// Self-describing binary file (all integers little-endian):
//   magic "HSCK" | version u8
//   u32 meta count    | per entry: u32 key len, key, u32 value len, value
//   u32 tensor count  | per record: u32 name len, name, u8 dtype (0=f32,
//                       1=f64), u32 rank, rank x i64 dims, u64 byte count,
//                       raw element bytes

inline constexpr std::uint8_t kCheckpointVersion = 1;

template <typename R>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<R, float> || std::is_same_v<R, double>);
  return std::is_same_v<R, float> ? 0 : 1;
}

struct TensorRecord {
  std::string name;
  std::vector<std::int64_t> shape;
  std::uint8_t dtype = 0;
  std::vector<std::uint8_t> data;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<TensorRecord> tensors;

  void set_meta(const std::string& key, const std::string& value) {
    for (auto& kv : meta)
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    meta.emplace_back(key, value);
  }

  const std::string* find_meta(const std::string& key) const {
    for (const auto& kv : meta)
      if (kv.first == key) return &kv.second;
    return nullptr;
  }

  const std::string& require_meta(const std::string& key) const {
    const auto* v = find_meta(key);
    if (!v) throw std::runtime_error("checkpoint: missing metadata entry '" + key + "'");
    return *v;
  }

  const TensorRecord* find_tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  template <typename R>
  void add_tensor(const std::string& name, const TensorT<R>& t) {
    if (find_tensor(name)) throw std::logic_error("checkpoint: duplicate tensor '" + name + "'");
    TensorRecord rec;
    rec.name = name;
    rec.shape = t.shape;
    rec.dtype = dtype_code<R>();
    rec.data.resize(t.data.size() * sizeof(R));
    std::memcpy(rec.data.data(), t.data.data(), rec.data.size());
    tensors.push_back(std::move(rec));
  }

  template <typename R>
  TensorT<R> get_tensor(const std::string& name) const {
    const auto* rec = find_tensor(name);
    if (!rec) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    if (rec->dtype != dtype_code<R>())
      throw std::runtime_error("checkpoint: tensor '" + name + "' has the wrong element type");
    TensorT<R> t(rec->shape);
    if (rec->data.size() != t.data.size() * sizeof(R))
      throw std::runtime_error("checkpoint: tensor '" + name + "' has inconsistent byte count");
    std::memcpy(t.data.data(), rec->data.data(), rec->data.size());
    return t;
  }

  void save(const std::string& path) const {
    std::vector<std::uint8_t> buf;
    buf.push_back('H');
    buf.push_back('S');
    buf.push_back('C');
    buf.push_back('K');
    buf.push_back(kCheckpointVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(meta.size()));
    for (const auto& kv : meta) {
      detail::put_u32(buf, static_cast<std::uint32_t>(kv.first.size()));
      buf.insert(buf.end(), kv.first.begin(), kv.first.end());
      detail::put_u32(buf, static_cast<std::uint32_t>(kv.second.size()));
      buf.insert(buf.end(), kv.second.begin(), kv.second.end());
    }
    detail::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      detail::put_u32(buf, static_cast<std::uint32_t>(t.name.size()));
      buf.insert(buf.end(), t.name.begin(), t.name.end());
      buf.push_back(t.dtype);
      detail::put_u32(buf, static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) detail::put_u64(buf, static_cast<std::uint64_t>(d));
      detail::put_u64(buf, t.data.size());
      buf.insert(buf.end(), t.data.begin(), t.data.end());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("checkpoint: short write to '" + path + "'");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    detail::ByteReader r{buf.data(), buf.size()};
    r.need(4, "checkpoint magic");
    if (std::memcmp(r.p + r.off, "HSCK", 4) != 0)
      throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
    r.off += 4;
    const std::uint8_t version = r.u8("checkpoint version");
    if (version != kCheckpointVersion)
      throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    const std::uint32_t n_meta = r.u32("metadata count");
    for (std::uint32_t i = 0; i < n_meta; ++i) {
      const std::uint32_t klen = r.u32("metadata key length");
      r.need(klen, "metadata key");
      std::string key(reinterpret_cast<const char*>(r.p + r.off), klen);
      r.off += klen;
      const std::uint32_t vlen = r.u32("metadata value length");
      r.need(vlen, "metadata value");
      std::string value(reinterpret_cast<const char*>(r.p + r.off), vlen);
      r.off += vlen;
      ck.meta.emplace_back(std::move(key), std::move(value));
    }
    const std::uint32_t n_tensors = r.u32("tensor count");
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
      TensorRecord rec;
      const std::uint32_t nlen = r.u32("tensor name length");
      r.need(nlen, "tensor name");
      rec.name.assign(reinterpret_cast<const char*>(r.p + r.off), nlen);
      r.off += nlen;
      rec.dtype = r.u8("tensor dtype");
      if (rec.dtype > 1)
        throw std::runtime_error("checkpoint: tensor '" + rec.name + "' has unknown dtype");
      const std::uint32_t rank = r.u32("tensor rank");
      if (rank > 8) throw std::runtime_error("checkpoint: tensor '" + rec.name + "' rank too large");
      std::int64_t elems = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        const auto dim = static_cast<std::int64_t>(r.u64("tensor dim"));
        if (dim <= 0 || dim > (1 << 30))
          throw std::runtime_error("checkpoint: tensor '" + rec.name + "' has a bad dimension");
        rec.shape.push_back(dim);
        elems *= dim;
      }
      const std::uint64_t nbytes = r.u64("tensor byte count");
      const std::uint64_t expect =
          static_cast<std::uint64_t>(elems) * (rec.dtype == 0 ? sizeof(float) : sizeof(double));
      if (nbytes != expect)
        throw std::runtime_error("checkpoint: tensor '" + rec.name + "' has inconsistent size");
      r.need(nbytes, "tensor data");
      rec.data.assign(r.p + r.off, r.p + r.off + nbytes);
      r.off += nbytes;
      ck.tensors.push_back(std::move(rec));
    }
    if (r.off != buf.size())
      throw std::runtime_error("checkpoint: trailing bytes after the last tensor");
    return ck;
  }
};

// Snapshot every registered parameter into the checkpoint.
template <typename R>
void store_params(Checkpoint& ck, const ParamRegistryT<R>& reg) {
  for (const auto* p : reg.list()) ck.add_tensor(p->name, p->value);
}

// Restore every registered parameter from the checkpoint; names, shapes and
// dtypes must match exactly.
template <typename R>
void load_params(const Checkpoint& ck, ParamRegistryT<R>& reg) {
  for (auto* p : reg.list()) {
    TensorT<R> t = ck.template get_tensor<R>(p->name);
    if (t.shape != p->value.shape)
      throw std::runtime_error("checkpoint: tensor '" + p->name + "' has shape " +
                               shape_str(t.shape) + " but the model expects " +
                               shape_str(p->value.shape));
    p->value = std::move(t);
  }
}

}  // namespace hsc
