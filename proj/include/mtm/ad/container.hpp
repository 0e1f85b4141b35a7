// Copyright 2026 The mtmkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Named-tensor container file. Layout (all little-endian):
//
//   magic "MTMC" u32 | version u32 | metadata length u64 | metadata (JSON)
//   tensor count u32
//   shape table: per tensor { name length u32, name, rank u32, dims u64[rank] }
//   data: per tensor, in table order, numel float32 values
//
// Tensors are written in map (name) order, so identical contents give
// byte-identical files.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "json.hpp"
#include "mtm/ad/tensor.hpp"
#include "mtm/common.hpp"

namespace mtm::ad {

inline constexpr std::uint32_t kContainerMagic = io::fourcc("MTMC");
inline constexpr std::uint32_t kContainerVersion = 1;

struct TensorContainer {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;

  const Tensor<float>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("container has no tensor named '" + name + "'");
    return it->second;
  }
};

inline void save_container(const std::filesystem::path& path, const TensorContainer& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write container: " + path.string());
  const std::string meta = c.metadata.dump();
  io::write_le(out, kContainerMagic);
  io::write_le(out, kContainerVersion);
  io::write_le(out, static_cast<std::uint64_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  io::write_le(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    io::write_le(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) io::write_le(out, static_cast<std::uint64_t>(d));
  }
  for (const auto& [name, t] : c.tensors) {
    for (float v : t.data) io::write_le(out, v);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline TensorContainer load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open container: " + path.string());
  try {
    if (io::read_le<std::uint32_t>(in) != kContainerMagic) throw IoError("not a tensor container: " + path.string());
    const auto version = io::read_le<std::uint32_t>(in);
    if (version != kContainerVersion) throw IoError("unsupported container version " + std::to_string(version));
    const auto meta_len = io::read_le<std::uint64_t>(in);
    if (meta_len > (1ull << 32)) throw IoError("corrupt container metadata length");
    std::string meta(meta_len, '\0');
    if (!in.read(meta.data(), static_cast<std::streamsize>(meta_len))) throw IoError("truncated container metadata");
    TensorContainer c;
    c.metadata = nlohmann::json::parse(meta);
    const auto count = io::read_le<std::uint32_t>(in);
    std::vector<std::pair<std::string, Shape>> table;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = io::read_le<std::uint32_t>(in);
      if (name_len > 4096) throw IoError("corrupt tensor name length");
      std::string name(name_len, '\0');
      if (!in.read(name.data(), name_len)) throw IoError("truncated tensor table");
      const auto rank = io::read_le<std::uint32_t>(in);
      if (rank > 8) throw IoError("corrupt tensor rank");
      Shape shape(rank);
      for (auto& d : shape) d = static_cast<std::size_t>(io::read_le<std::uint64_t>(in));
      table.emplace_back(std::move(name), std::move(shape));
    }
    for (auto& [name, shape] : table) {
      Tensor<float> t(shape);
      for (float& v : t.data) v = io::read_le<float>(in);
      c.tensors.emplace(name, std::move(t));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt container metadata in " + path.string() + ": " + e.what());
  }
}

}  // namespace mtm::ad
