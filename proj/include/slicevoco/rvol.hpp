// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "slicevoco/volume.hpp"

namespace slicevoco {

/// RVOL layout:
///   "RVOL1\n"
///   {"shape":[Z,Y,X],"spacing":[sz,sy,sx],"dtype":"f32le","patient_id":"..."}\n
///   Z*Y*X little-endian float32, Z slowest.
std::string encode_rvol(const VolumeGrid& volume);
VolumeGrid decode_rvol(const std::string& bytes, const std::string& origin = "<memory>");

void write_volume(const std::filesystem::path& path, const VolumeGrid& volume);

/// Reads an RVOL file, or dispatches to a registered adapter by extension.
VolumeGrid load_volume(const std::filesystem::path& path);

/// Hook for foreign formats (e.g. a DICOM series reader living outside the core).
/// `extension` includes the dot, e.g. ".dcm".
using VolumeAdapter = std::function<VolumeGrid(const std::filesystem::path&)>;
void register_volume_adapter(const std::string& extension, VolumeAdapter adapter);
void clear_volume_adapters();

/// All `*.rvol` files in a directory, sorted by filename.
std::vector<std::filesystem::path> list_volumes(const std::filesystem::path& dir);

/// FNV-1a 64 hex digest over the sorted RVOL files' names and bytes.
std::string dataset_digest(const std::filesystem::path& dir);

/// Writes `bytes` to `path` via a sibling temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace slicevoco
