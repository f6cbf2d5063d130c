// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "slicevoco/tensor.hpp"

namespace slicevoco {

/// Versioned array container; layout documented in docs/checkpoint_format.md.
///   "SVCK1\n"
///   one-line JSON header: format_version, kind, config, extras, arrays[{name, shape, dtype}]
///   each array's values as little-endian float64, in header order.
struct Checkpoint {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json extras = nlohmann::json::object();
  ParameterSet arrays;
};

inline constexpr const char* kCheckpointFormatVersion = "svck/1";

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

/// Atomic write (temporary file + rename), so a failed run leaves no partial file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies entries of `src` into `dst` under `prefix` + name.
void append_prefixed(ParameterSet& dst, const ParameterSet& src, const std::string& prefix);
/// Entries of `src` whose names start with `prefix`, with the prefix stripped.
ParameterSet take_prefixed(const ParameterSet& src, const std::string& prefix);

}  // namespace slicevoco
