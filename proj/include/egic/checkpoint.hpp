#pragma once

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "egic/hash.hpp"
#include "egic/nn.hpp"

namespace egic::ckpt {

inline constexpr char kMagic[4] = {'E', 'G', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

/// Container: magic, version, JSON index (metadata plus tensor table), raw little-endian
/// float32 payload, CRC32 of everything before it. Sections group the tensors of one
/// network ("E", "P", "G1", "G2", "D", "ORP") or one optimizer.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, NamedTensors> sections;

  bool has(const std::string& tag) const { return sections.count(tag) != 0; }

  const NamedTensors& section(const std::string& tag) const {
    auto it = sections.find(tag);
    if (it == sections.end()) throw IncompatibleModel("checkpoint has no section '" + tag + "'");
    return it->second;
  }

  template <class T>
  void put(const std::string& tag, const nn::ParamStore<T>& ps) {
    NamedTensors s;
    for (const auto& [name, v] : ps.items()) s.emplace_back(name, v->value.template cast<float>());
    sections[tag] = std::move(s);
  }

  /// Loads a section into a structurally identical store.
  template <class T>
  void get(const std::string& tag, nn::ParamStore<T>& ps) const {
    const auto& s = section(tag);
    if (s.size() != ps.size())
      throw IncompatibleModel("section '" + tag + "' has " + std::to_string(s.size()) + " tensors, network has " +
                              std::to_string(ps.size()));
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& [name, v] = ps.items()[i];
      if (s[i].first != name || s[i].second.shape() != v->value.shape())
        throw IncompatibleModel("section '" + tag + "' does not match the network at " + name);
      v->value = s[i].second.template cast<T>();
    }
  }

  template <class T>
  void put_optimizer(const std::string& tag, nn::Adam<T>& opt) {
    NamedTensors s;
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    for (std::size_t i = 0; i < m.size(); ++i) {
      s.emplace_back("m" + std::to_string(i), m[i].template cast<float>());
      s.emplace_back("v" + std::to_string(i), v[i].template cast<float>());
    }
    sections[tag] = std::move(s);
    meta["optimizers"][tag] = {{"step", opt.step_count()}, {"lr", opt.lr()}};
  }

  template <class T>
  void get_optimizer(const std::string& tag, nn::Adam<T>& opt) const {
    const auto& s = section(tag);
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    if (s.size() != 2 * m.size()) throw IncompatibleModel("optimizer section '" + tag + "' does not match");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (s[2 * i].second.shape() != m[i].shape()) throw IncompatibleModel("optimizer section '" + tag + "' shape mismatch");
      m[i] = s[2 * i].second.template cast<T>();
      v[i] = s[2 * i + 1].second.template cast<T>();
    }
    opt.set_step_count(meta.at("optimizers").at(tag).at("step").get<long>());
  }

  /// Digest of one section's names and values.
  std::uint64_t section_digest(const std::string& tag) const {
    Fnv1a h;
    for (const auto& [name, t] : section(tag)) {
      h.update(name);
      h.update(t.span());
    }
    return h.digest();
  }

  std::vector<std::uint8_t> serialize() const {
    nlohmann::json index;
    index["meta"] = meta;
    index["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [tag, items] : sections)
      for (const auto& [name, t] : items) {
        const auto& s = t.shape();
        index["tensors"].push_back({{"section", tag}, {"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
        offset += t.size();
      }
    const std::string text = index.dump();
    std::vector<std::uint8_t> b(kMagic, kMagic + 4);
    auto put = [&b](std::uint64_t v, int bytes) {
      for (int i = 0; i < bytes; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    };
    put(kVersion, 4);
    put(text.size(), 8);
    b.insert(b.end(), text.begin(), text.end());
    put(offset, 8);
    for (const auto& [tag, items] : sections)
      for (const auto& [name, t] : items)
        for (float f : t.vec()) {
          std::uint32_t u;
          std::memcpy(&u, &f, 4);
          put(u, 4);
        }
    put(static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size()))), 4);
    return b;
  }

  static Checkpoint parse(const std::vector<std::uint8_t>& b) {
    std::size_t pos = 0;
    auto get = [&](int bytes) {
      if (pos + bytes > b.size()) throw CorruptData("truncated checkpoint");
      std::uint64_t v = 0;
      for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[pos + i]) << (8 * i);
      pos += bytes;
      return v;
    };
    if (b.size() < 28 || std::memcmp(b.data(), kMagic, 4) != 0) throw CorruptData("not a checkpoint file");
    pos = 4;
    if (get(4) != kVersion) throw CorruptData("unsupported checkpoint version");
    const auto crc_stored = static_cast<std::uint32_t>(b[b.size() - 4]) | static_cast<std::uint32_t>(b[b.size() - 3]) << 8 |
                            static_cast<std::uint32_t>(b[b.size() - 2]) << 16 |
                            static_cast<std::uint32_t>(b[b.size() - 1]) << 24;
    if (crc_stored != static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size() - 4))))
      throw CorruptData("checkpoint checksum mismatch");
    const auto len = get(8);
    if (pos + len > b.size()) throw CorruptData("truncated checkpoint index");
    nlohmann::json index;
    try {
      index = nlohmann::json::parse(b.begin() + static_cast<std::ptrdiff_t>(pos),
                                    b.begin() + static_cast<std::ptrdiff_t>(pos + len));
    } catch (const nlohmann::json::exception& e) {
      throw CorruptData(std::string("checkpoint index: ") + e.what());
    }
    pos += len;
    const auto count = get(8);
    const std::size_t data_pos = pos;
    if (data_pos + count * 4 + 4 != b.size()) throw CorruptData("checkpoint payload size mismatch");
    Checkpoint c;
    c.meta = index.at("meta");
    for (const auto& e : index.at("tensors")) {
      const auto sh = e.at("shape");
      Shape s{sh[0].get<int>(), sh[1].get<int>(), sh[2].get<int>(), sh[3].get<int>()};
      const auto off = e.at("offset").get<std::uint64_t>();
      if (off + s.size() > count) throw CorruptData("checkpoint tensor out of range");
      Tensor<float> t(s);
      std::memcpy(t.data(), b.data() + data_pos + off * 4, s.size() * 4);
      c.sections[e.at("section").get<std::string>()].emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
    return c;
  }

  /// Writes to a temporary sibling and renames, so readers never see a partial file.
  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) throw Error("cannot write checkpoint " + tmp.string());
      f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw Error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(bytes);
  }
};

}  // namespace egic::ckpt
