#pragma once

// Named-tensor archive.
//
// Layout (all integers little-endian):
//   "SSRG" | version u32 | tensor count u32 |
//   per tensor: name length u16 | UTF-8 name | dtype u8 (0 = f32) | rank u8 |
//               dims u32 x rank | f32 payload |
//   CRC32 (IEEE, zlib) u32 over every byte between the header and the CRC.
//
// Rank is written without trailing unit dims (minimum 1) and padded back
// with ones on read.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "swiftsr/models.hpp"
#include "swiftsr/tensor.hpp"

namespace swiftsr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'S', 'S', 'R', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kMetaName = "meta.config";

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline const Tensor* find_tensor(const NamedTensors& a, const std::string& name) {
  for (const auto& [n, t] : a) {
    if (n == name) return &t;
  }
  return nullptr;
}

namespace detail {

template <class T>
void put(std::vector<unsigned char>& buf, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.insert(buf.end(), b, b + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& buf, std::size_t end)
      : buf_(buf), end_(end) {}
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void bytes(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  void need(std::size_t n, const char* what) {
    if (end_ - pos_ < n) {
      throw FormatError("checkpoint truncated while reading " + std::string(what) +
                        " at byte offset " + std::to_string(pos_));
    }
  }
  const std::vector<unsigned char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<unsigned char> encode_archive(const NamedTensors& tensors) {
  std::vector<unsigned char> buf(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put<std::uint32_t>(buf, kCheckpointVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  const std::size_t payload_start = buf.size();
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name);
    detail::put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    buf.push_back(0);  // f32
    const Shape& s = t.shape();
    std::vector<std::size_t> dims{s.n, s.c, s.h, s.w};
    while (dims.size() > 1 && dims.back() == 1) dims.pop_back();
    buf.push_back(static_cast<unsigned char>(dims.size()));
    for (auto d : dims) detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    const auto* raw = reinterpret_cast<const unsigned char*>(t.ptr());
    buf.insert(buf.end(), raw, raw + t.size() * sizeof(float));
  }
  detail::put<std::uint32_t>(
      buf, detail::crc32_of(buf.data() + payload_start, buf.size() - payload_start));
  return buf;
}

inline NamedTensors decode_archive(const std::vector<unsigned char>& buf) {
  if (buf.size() < 4 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("not a checkpoint: bad magic bytes");
  }
  if (buf.size() < 16) throw FormatError("checkpoint truncated: header incomplete");
  const std::size_t crc_pos = buf.size() - 4;
  detail::Reader r(buf, crc_pos);
  r.seek(4);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + crc_pos, 4);
  if (detail::crc32_of(buf.data() + 12, crc_pos - 12) != stored_crc) {
    throw FormatError("checkpoint CRC mismatch (file corrupt or truncated)");
  }
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) throw FormatError("tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank < 1 || rank > 4) throw FormatError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    std::size_t d[4] = {1, 1, 1, 1};
    for (std::uint8_t k = 0; k < rank; ++k) d[k] = r.get<std::uint32_t>("dims");
    Tensor t(Shape{d[0], d[1], d[2], d[3]});
    r.bytes(t.ptr(), t.size() * sizeof(float), "tensor payload");
    out.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos() != crc_pos) throw FormatError("checkpoint has trailing bytes after last tensor");
  return out;
}

inline void write_archive(const std::filesystem::path& path, const NamedTensors& tensors) {
  const auto buf = encode_archive(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw Error("failed writing '" + path.string() + "'");
}

inline NamedTensors read_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_archive(buf);
}

// ---------------------------------------------------------------------------

/// Parameters and buffers of `model` under `prefix`, plus its config record.
inline NamedTensors state_dict(ModelGraph& model, const std::string& prefix = "") {
  NamedTensors out;
  const auto& m = model.meta();
  out.emplace_back(prefix + kMetaName, Tensor(vec_shape(m.size()), m));
  for (const auto& p : model.parameters()) out.emplace_back(prefix + p.name, *p.value);
  return out;
}

/// Copies every parameter of `model` from `archive` entries named
/// prefix + name. Missing or extra names under the prefix (other than the
/// config record) and shape mismatches are errors; names outside the prefix
/// are ignored.
inline void load_state(ModelGraph& model, const NamedTensors& archive, const std::string& prefix = "") {
  std::map<std::string, const Tensor*> mine;
  for (const auto& [n, t] : archive) {
    if (n.rfind(prefix, 0) != 0) continue;
    const std::string local = n.substr(prefix.size());
    if (local == kMetaName) continue;
    if (!prefix.empty() || (local.rfind("opt.", 0) != 0 && local.rfind("state.", 0) != 0)) {
      mine[local] = &t;
    }
  }
  const auto params = model.parameters();
  for (const auto& p : params) {
    auto it = mine.find(p.name);
    if (it == mine.end()) {
      throw FormatError("checkpoint does not match " + std::string(topology_name(model.topology())) +
                        " topology: missing tensor '" + prefix + p.name + "'");
    }
    if (it->second->shape() != p.value->shape()) {
      throw FormatError("tensor '" + prefix + p.name + "' has shape " + it->second->shape().str() +
                        ", model expects " + p.value->shape().str());
    }
  }
  if (mine.size() != params.size()) {
    for (const auto& [n, t] : mine) {
      bool known = false;
      for (const auto& p : params) known = known || p.name == n;
      if (!known) throw FormatError("checkpoint has unexpected tensor '" + prefix + n + "'");
    }
  }
  for (auto& p : params) *p.value = *mine.at(p.name);
}

inline void save_checkpoint(ModelGraph& model, const std::filesystem::path& path,
                            const NamedTensors& extra = {}) {
  NamedTensors all = state_dict(model);
  all.insert(all.end(), extra.begin(), extra.end());
  write_archive(path, all);
}

struct LoadedCheckpoint {
  ModelGraph model;
  NamedTensors extra;  // "opt." / "state." entries
};

/// Rebuilds the model recorded in a checkpoint and fills its weights.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& prefix = "") {
  NamedTensors archive = read_archive(path);
  const Tensor* meta = find_tensor(archive, prefix + kMetaName);
  if (!meta) throw FormatError("checkpoint has no '" + prefix + kMetaName + "' record");
  ModelGraph model = model_from_meta({meta->data().begin(), meta->data().end()});
  load_state(model, archive, prefix);
  NamedTensors extra;
  for (auto& [n, t] : archive) {
    if (n.rfind("opt.", 0) == 0 || n.rfind("state.", 0) == 0) extra.emplace_back(n, std::move(t));
  }
  return {std::move(model), std::move(extra)};
}

/// Loads weights into an existing model; rejects a checkpoint written for a
/// different topology with the first missing name.
inline NamedTensors load_checkpoint_into(ModelGraph& model, const std::filesystem::path& path,
                                         const std::string& prefix = "") {
  NamedTensors archive = read_archive(path);
  load_state(model, archive, prefix);
  return archive;
}

}  // namespace swiftsr
