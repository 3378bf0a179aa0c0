#pragma once

// Versioned binary container of named double tensors.
//
// Layout: "SITNCKPT" | u32 version | u64 header length | JSON header |
// raw little-endian doubles for every tensor in header order | u64 FNV-1a
// of everything before it.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sitn/autograd.hpp"
#include "sitn/error.hpp"
#include "sitn/hash.hpp"
#include "sitn/optimizer.hpp"

namespace sitn::train {

struct Checkpoint {
  std::map<std::string, Matrix> tensors;
  std::string config_hash;
  std::string stage;
  std::uint64_t step = 0;
  nlohmann::json metrics = nlohmann::json::object();

  bool operator==(const Checkpoint& o) const {
    if (config_hash != o.config_hash || stage != o.stage || step != o.step || metrics != o.metrics) return false;
    if (tensors.size() != o.tensors.size()) return false;
    for (const auto& [name, m] : tensors) {
      auto it = o.tensors.find(name);
      if (it == o.tensors.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols()) return false;
      if (std::memcmp(m.data(), it->second.data(), sizeof(double) * static_cast<std::size_t>(m.size())) != 0)
        return false;
    }
    return true;
  }
};

inline constexpr char kCheckpointMagic[8] = {'S', 'I', 'T', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline Checkpoint snapshot(const NamedParams& params) {
  Checkpoint c;
  for (const auto& [name, p] : params) c.tensors[name] = p->value;
  return c;
}

// Copies tensors into parameters. Every parameter must be present with the
// same shape; otherwise ShapeError names the offending tensor.
inline void assign(const NamedParams& params, const Checkpoint& c) {
  for (const auto& [name, p] : params) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw ShapeError("checkpoint is missing tensor " + name);
    if (it->second.rows() != p->rows() || it->second.cols() != p->cols())
      throw ShapeError("tensor " + name + " has shape " + std::to_string(it->second.rows()) + "x" +
                       std::to_string(it->second.cols()) + ", expected " + std::to_string(p->rows()) + "x" +
                       std::to_string(p->cols()));
  }
  for (const auto& [name, p] : params) p->value = c.tensors.at(name);
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::json header = {{"config_hash", c.config_hash},
                           {"stage", c.stage},
                           {"step", c.step},
                           {"metrics", c.metrics},
                           {"tensors", nlohmann::json::array()}};
  for (const auto& [name, m] : c.tensors) header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  auto put = [&out](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  put(&kCheckpointVersion, sizeof(kCheckpointVersion));
  const std::uint64_t hlen = h.size();
  put(&hlen, sizeof(hlen));
  out += h;
  for (const auto& [name, m] : c.tensors) put(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  const std::uint64_t sum = fnv1a64(out);
  put(&sum, sizeof(sum));
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  auto fail = [](const std::string& why) -> ParseError { return ParseError("corrupt checkpoint: " + why); };
  const std::size_t fixed = sizeof(kCheckpointMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < fixed + sizeof(std::uint64_t)) throw fail("file too short");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) throw fail("bad magic");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
  if (fnv1a64(bytes.substr(0, bytes.size() - sizeof(stored))) != stored) throw fail("checksum mismatch");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + sizeof(kCheckpointMagic), sizeof(version));
  if (version != kCheckpointVersion) throw fail("unsupported version " + std::to_string(version));
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + sizeof(kCheckpointMagic) + sizeof(version), sizeof(hlen));
  if (hlen > bytes.size() - fixed) throw fail("header length out of range");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(fixed, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
  Checkpoint c;
  std::size_t at = fixed + hlen;
  const std::size_t end = bytes.size() - sizeof(stored);
  try {
    c.config_hash = header.at("config_hash").get<std::string>();
    c.stage = header.at("stage").get<std::string>();
    c.step = header.at("step").get<std::uint64_t>();
    c.metrics = header.at("metrics");
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw fail("negative shape");
      const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * sizeof(double);
      if (n > end - at) throw fail("tensor data truncated");
      Matrix m(rows, cols);
      std::memcpy(m.data(), bytes.data() + at, n);
      at += n;
      c.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
  if (at != end) throw fail("trailing bytes");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// A differing config hash is reported through `warnings`; it is not fatal.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_hash = {},
                                  std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint c = deserialize_checkpoint(bytes);
  if (!expected_hash.empty() && c.config_hash != expected_hash && warnings)
    warnings->push_back("checkpoint " + path.string() + " was written with config hash " + c.config_hash +
                        ", current config hash is " + std::string(expected_hash));
  return c;
}

}  // namespace sitn::train
