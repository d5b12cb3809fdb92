#pragma once

// Single-file checkpoints: u64 header length, JSON header, then the tensors
// as little-endian f64 in header order.

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vila/nn.hpp"

namespace vila {

struct StoredTensor {
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::string stage;  // "teacher" or "student"
  std::size_t step = 0;
  std::string config_digest;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::pair<std::string, StoredTensor>> tensors;

  void put(const std::string& name, const Tensor& t) { tensors.emplace_back(name, StoredTensor{t.shape(), t.values()}); }
  void put(const std::string& name, Shape shape, std::vector<double> data) {
    tensors.emplace_back(name, StoredTensor{std::move(shape), std::move(data)});
  }
  void put_all(const NamedTensors& params, const std::string& prefix = "") {
    for (const auto& [n, t] : params) put(prefix + n, t);
  }

  const StoredTensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
  const StoredTensor& at(const std::string& name) const {
    const auto* t = find(name);
    if (!t) throw std::runtime_error("checkpoint has no tensor named " + name);
    return *t;
  }

  /// Copies stored values into the given parameters (shapes must match).
  void load_into(const NamedTensors& params, const std::string& prefix = "") const {
    for (const auto& [n, p] : params) {
      const auto& s = at(prefix + n);
      if (s.shape != p.shape()) {
        throw DimensionError("checkpoint tensor " + prefix + n + " has shape " + shape_str(s.shape) + ", parameter is " +
                             shape_str(p.shape()));
      }
      Tensor t = p;
      std::copy(s.data.begin(), s.data.end(), t.mutable_data().begin());
    }
  }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

/// Write to a sibling temp file, then rename over the target.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["format"] = "vila-ckpt-v1";
  header["stage"] = ck.stage;
  header["step"] = ck.step;
  header["config_digest"] = ck.config_digest;
  header["extra"] = ck.extra;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.data.size() * 8;
  }
  header["tensors"] = entries;
  header["payload_bytes"] = offset;
  const std::string h = header.dump();
  std::string out;
  out.reserve(8 + h.size() + offset);
  detail::put_u64_le(out, h.size());
  out += h;
  for (const auto& [name, t] : ck.tensors) {
    for (double v : t.data) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  auto fail = [](const std::string& why) { return std::runtime_error("malformed checkpoint: " + why); };
  if (bytes.size() < 8) throw fail("truncated header length");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = detail::get_u64_le(p);
  if (hlen > bytes.size() - 8) throw fail("header length exceeds file size");
  const auto header = nlohmann::json::parse(bytes.substr(8, hlen));
  if (header.value("format", "") != "vila-ckpt-v1") throw fail("unknown format tag");
  Checkpoint ck;
  ck.stage = header.at("stage").get<std::string>();
  ck.step = header.at("step").get<std::size_t>();
  ck.config_digest = header.at("config_digest").get<std::string>();
  ck.extra = header.at("extra");
  const std::size_t base = 8 + hlen;
  const std::size_t payload = header.at("payload_bytes").get<std::size_t>();
  if (bytes.size() != base + payload) throw fail("payload size mismatch");
  for (const auto& e : header.at("tensors")) {
    StoredTensor t;
    t.shape = e.at("shape").get<Shape>();
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(t.shape);
    if (off + n * 8 > payload) throw fail("tensor " + e.at("name").get<std::string>() + " runs past the payload");
    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.data[i] = std::bit_cast<double>(detail::get_u64_le(p + base + off + 8 * i));
    ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::slurp(path));
}

}  // namespace vila
