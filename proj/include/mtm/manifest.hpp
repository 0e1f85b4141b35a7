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

// Every artifact <file> gets a sidecar <file>.manifest.json describing how it
// was produced. Volatile facts (wall time, date) live only in the manifest so
// the artifact itself stays byte-reproducible.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "mtm/annotations.hpp"
#include "mtm/common.hpp"
#include "mtm/config.hpp"

namespace mtm {

inline std::filesystem::path manifest_path(const std::filesystem::path& artifact) {
  return artifact.string() + ".manifest.json";
}

struct ManifestInfo {
  std::string command;
  const RunConfig* config = nullptr;
  double wall_seconds = 0.0;
  nlohmann::json extra = nlohmann::json::object();
};

inline void write_manifest(const std::filesystem::path& artifact, const ManifestInfo& info) {
  nlohmann::json j;
  j["artifact"] = artifact.filename().string();
  j["command"] = info.command;
  j["versions"] = {{"mtmkit", kVersion}, {"format", 1}};
  j["wall_seconds"] = info.wall_seconds;
  j["created_unix"] = static_cast<std::int64_t>(std::time(nullptr));
  if (info.config) {
    j["config"] = serialize_config(*info.config);
    j["fingerprint"] = fingerprint_hex(config_fingerprint(*info.config));
    j["pretrain_fingerprint"] = fingerprint_hex(pretrain_fingerprint(*info.config));
  }
  if (!info.extra.empty()) j["details"] = info.extra;
  write_json_file(manifest_path(artifact), j);
}

// Elapsed-seconds helper for manifests.
class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace mtm
