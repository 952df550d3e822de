// SPDX-License-Identifier: Apache-2.0
//
// Single-file checkpoint archive: magic, little-endian u64 header length, a
// JSON header (kind, config hash, step, parameter manifest), then raw
// float32 payloads in manifest order. Optimizer moments ride along so
// training can resume exactly.

#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tilediff/autodiff.hpp"
#include "tilediff/common.hpp"

namespace tilediff::checkpoint {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr char kMagic[8] = {'T', 'D', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

struct Meta {
  std::string kind;         // "vae", "ldm", "classifier"
  std::string config_hash;  // hex digest of the resolved model config
  long step = 0;
  json extra = json::object();
};

namespace detail {

inline void write_floats(std::ofstream& f, const nn::Arr& a) {
  f.write(reinterpret_cast<const char*>(a.data()),
          static_cast<std::streamsize>(a.size() * sizeof(float)));
}

inline void read_floats(std::ifstream& f, nn::Arr& a) {
  f.read(reinterpret_cast<char*>(a.data()),
         static_cast<std::streamsize>(a.size() * sizeof(float)));
  if (!f) throw DataError("checkpoint payload truncated");
}

}  // namespace detail

inline void save(const fs::path& path, const Meta& meta, const nn::ParamStore& ps,
                 bool with_moments = true) {
  json header;
  header["format_version"] = kFormatVersion;
  header["kind"] = meta.kind;
  header["config_hash"] = meta.config_hash;
  header["step"] = meta.step;
  header["with_moments"] = with_moments;
  header["extra"] = meta.extra;
  json params = json::array();
  for (const auto& p : ps.all()) {
    json e;
    e["name"] = p->name;
    e["shape"] = p->shape;
    params.push_back(std::move(e));
  }
  header["params"] = std::move(params);
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint for write: " + path.string());
  f.write(kMagic, sizeof(kMagic));
  const uint64_t len = hs.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& p : ps.all()) detail::write_floats(f, p->value);
  if (with_moments)
    for (const auto& p : ps.all()) {
      detail::write_floats(f, p->m);
      detail::write_floats(f, p->v);
    }
  if (!f) throw DataError("short write: " + path.string());
}

inline json read_header(std::ifstream& f, const fs::path& path) {
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("not a checkpoint file: " + path.string());
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!f || len == 0 || len > (1u << 26)) throw DataError("corrupt checkpoint header length");
  std::string hs(len, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(len));
  if (!f) throw DataError("corrupt checkpoint header");
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.value("format_version", -1) != kFormatVersion)
    throw DataError("unsupported checkpoint format version");
  return header;
}

inline Meta peek(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path.string());
  const json header = read_header(f, path);
  Meta m;
  m.kind = header.at("kind").get<std::string>();
  m.config_hash = header.at("config_hash").get<std::string>();
  m.step = header.at("step").get<long>();
  m.extra = header.value("extra", json::object());
  return m;
}

// The param store must already hold the exact parameter set (names and
// shapes); the model architecture is rebuilt from config, never from the
// checkpoint.
inline Meta load(const fs::path& path, nn::ParamStore& ps, const std::string& expect_kind = "",
                 const std::string& expect_config_hash = "") {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path.string());
  const json header = read_header(f, path);
  Meta m;
  m.kind = header.at("kind").get<std::string>();
  m.config_hash = header.at("config_hash").get<std::string>();
  m.step = header.at("step").get<long>();
  m.extra = header.value("extra", json::object());
  if (!expect_kind.empty() && m.kind != expect_kind)
    throw DataError("checkpoint kind mismatch: have " + m.kind + ", want " + expect_kind);
  if (!expect_config_hash.empty() && m.config_hash != expect_config_hash)
    throw ConfigError("checkpoint config hash mismatch: " + m.config_hash + " vs " +
                      expect_config_hash);

  const auto& params = header.at("params");
  if (params.size() != ps.all().size())
    throw DataError("checkpoint parameter count mismatch");
  for (size_t i = 0; i < ps.all().size(); ++i) {
    const auto& p = ps.all()[i];
    const auto& e = params.at(i);
    if (e.at("name").get<std::string>() != p->name)
      throw DataError("checkpoint parameter order mismatch at " + p->name);
    if (e.at("shape").get<std::vector<int>>() != p->shape)
      throw DataError("checkpoint shape mismatch for " + p->name);
  }
  for (const auto& p : ps.all()) detail::read_floats(f, p->value);
  if (header.value("with_moments", false))
    for (const auto& p : ps.all()) {
      detail::read_floats(f, p->m);
      detail::read_floats(f, p->v);
    }
  return m;
}

}  // namespace tilediff::checkpoint
