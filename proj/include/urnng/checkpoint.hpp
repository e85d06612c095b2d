#pragma once

// Versioned binary checkpoint container.
//
// Layout (little-endian): magic "URNNGCKP", u32 version, then length-prefixed
// records: vocabulary, config text, scalar key/value map, tensor groups
// (group name -> tensor name -> shape + row-major doubles), and a trailing
// u64 byte count of everything before it.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "urnng/error.hpp"
#include "urnng/nn.hpp"

namespace urnng {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr char kMagic[8] = {'U', 'R', 'N', 'N', 'G', 'C', 'K', 'P'};

  std::vector<std::string> vocab;
  std::string config;
  std::map<std::string, std::string> scalars;
  std::map<std::string, nn::Snapshot> groups;

  const std::string& scalar(const std::string& key) const {
    auto it = scalars.find(key);
    if (it == scalars.end()) throw DataError("checkpoint lacks field " + key);
    return it->second;
  }
  const nn::Snapshot& group(const std::string& name) const {
    auto it = groups.find(name);
    if (it == groups.end()) throw DataError("checkpoint lacks tensor group " + name);
    return it->second;
  }
  bool has_group(const std::string& name) const { return groups.count(name) > 0; }

  std::string serialize() const {
    std::string out(kMagic, sizeof kMagic);
    put_u32(out, kVersion);
    put_u64(out, vocab.size());
    for (const auto& w : vocab) put_str(out, w);
    put_str(out, config);
    put_u64(out, scalars.size());
    for (const auto& [k, v] : scalars) put_str(out, k), put_str(out, v);
    put_u64(out, groups.size());
    for (const auto& [g, tensors] : groups) {
      put_str(out, g);
      put_u64(out, tensors.size());
      for (const auto& [name, t] : tensors) {
        put_str(out, name);
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d) put_u64(out, t.shape()[d]);
        const auto* bytes = reinterpret_cast<const char*>(t.data());
        out.append(bytes, t.size() * sizeof(double));
      }
    }
    put_u64(out, out.size());
    return out;
  }

  static Checkpoint deserialize(const std::string& buf) {
    Reader r{buf, 0};
    if (buf.size() < sizeof kMagic || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
      throw DataError("not a checkpoint file (bad magic)");
    r.pos = sizeof kMagic;
    const std::uint32_t version = r.u32();
    if (version != kVersion)
      throw DataError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kVersion) + ")");
    Checkpoint c;
    for (std::uint64_t n = r.count(); n-- > 0;) c.vocab.push_back(r.str());
    c.config = r.str();
    for (std::uint64_t n = r.count(); n-- > 0;) {
      std::string k = r.str();
      c.scalars[k] = r.str();
    }
    for (std::uint64_t n = r.count(); n-- > 0;) {
      nn::Snapshot& g = c.groups[r.str()];
      for (std::uint64_t m = r.count(); m-- > 0;) {
        std::string name = r.str();
        const std::uint32_t rank = r.u32();
        if (rank > 2) throw DataError("checkpoint tensor " + name + " has unsupported rank");
        Shape shape = rank == 0 ? Shape{} : rank == 1 ? Shape{r.u64()} : Shape{0, 0};
        if (rank == 2) {
          const std::uint64_t a = r.u64();
          shape = Shape{a, r.u64()};
        }
        const std::size_t bytes = shape.numel() * sizeof(double);
        r.need(bytes);
        std::vector<double> vals(shape.numel());
        std::memcpy(vals.data(), buf.data() + r.pos, bytes);
        r.pos += bytes;
        g.emplace(std::move(name), Tensor(shape, std::move(vals)));
      }
    }
    const std::size_t body = r.pos;
    if (r.u64() != body || r.pos != buf.size()) throw DataError("checkpoint is truncated or corrupt");
    return c;
  }

  /// Writes to a temporary file in the same directory, then renames.
  void save(const std::string& path) const {
    const std::string data = serialize();
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot write checkpoint: " + tmp);
      out.write(data.data(), static_cast<std::streamsize>(data.size()));
      out.flush();
      if (!out) throw DataError("failed writing checkpoint: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
      std::filesystem::remove(tmp, ec);
      throw DataError("cannot move checkpoint into place: " + path);
    }
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      return deserialize(ss.str());
    } catch (const DataError& e) {
      throw DataError(path + ": " + e.what());
    }
  }

 private:
  struct Reader {
    const std::string& buf;
    std::size_t pos;

    void need(std::size_t n) const {
      if (n > buf.size() || pos > buf.size() - n) throw DataError("checkpoint is truncated");
    }
    std::uint64_t u64() {
      need(8);
      std::uint64_t v;
      std::memcpy(&v, buf.data() + pos, 8);
      pos += 8;
      return v;
    }
    std::uint32_t u32() {
      need(4);
      std::uint32_t v;
      std::memcpy(&v, buf.data() + pos, 4);
      pos += 4;
      return v;
    }
    std::uint64_t count() {
      const std::uint64_t n = u64();
      if (n > buf.size()) throw DataError("checkpoint is truncated or corrupt");
      return n;
    }
    std::string str() {
      const std::uint64_t n = count();
      need(n);
      std::string s = buf.substr(pos, n);
      pos += n;
      return s;
    }
  };

  static void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
  static void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
  static void put_str(std::string& out, const std::string& s) {
    put_u64(out, s.size());
    out += s;
  }
};

/// Copies tensors from a group into parameters, checking names and shapes.
inline void load_group(const std::vector<ad::Parameter*>& params, const nn::Snapshot& g, const std::string& what) {
  for (auto* p : params) {
    auto it = g.find(p->name);
    if (it == g.end()) throw DataError(what + ": checkpoint lacks parameter " + p->name);
    if (it->second.shape() != p->value.shape())
      throw DataError(what + ": shape mismatch for " + p->name + " (checkpoint " + it->second.shape().str() +
                      ", model " + p->value.shape().str() + ")");
    p->value = it->second;
  }
  if (g.size() != params.size()) throw DataError(what + ": checkpoint has parameters the model does not");
}

}  // namespace urnng
