// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/rvol.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "slicevoco/errors.hpp"
#include "slicevoco/hashing.hpp"

namespace slicevoco {

namespace {

constexpr std::string_view kMagic = "RVOL1\n";

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
}

std::mutex& adapter_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, VolumeAdapter>& adapters() {
  static std::map<std::string, VolumeAdapter> table;
  return table;
}

}  // namespace

std::string encode_rvol(const VolumeGrid& volume) {
  validate(volume);
  nlohmann::ordered_json header;
  const auto& s = volume.shape();
  header["shape"] = {s.z, s.y, s.x};
  header["spacing"] = {volume.spacing[0], volume.spacing[1], volume.spacing[2]};
  header["dtype"] = "f32le";
  header["patient_id"] = volume.patient_id;

  std::string out(kMagic);
  out += header.dump();
  out += '\n';
  const std::size_t offset = out.size();
  out.resize(offset + 4 * s.count());
  char* dst = out.data() + offset;
  for (float f : volume.voxels.values()) {
    const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
    std::memcpy(dst, &bits, 4);
    dst += 4;
  }
  return out;
}

VolumeGrid decode_rvol(const std::string& bytes, const std::string& origin) {
  if (bytes.compare(0, kMagic.size(), kMagic) != 0) {
    throw DataError(origin + ": bad magic, not an RVOL1 file");
  }
  const auto eol = bytes.find('\n', kMagic.size());
  if (eol == std::string::npos) throw DataError(origin + ": malformed header, missing newline");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kMagic.size(), eol - kMagic.size()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed header JSON: " + e.what());
  }

  VolumeGrid v;
  Shape3 shape;
  try {
    if (header.at("dtype").get<std::string>() != "f32le") {
      throw DataError(origin + ": unsupported dtype " + header.at("dtype").dump());
    }
    const auto dims = header.at("shape").get<std::vector<std::int64_t>>();
    const auto spacing = header.at("spacing").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3) {
      throw DataError(origin + ": shape and spacing must have 3 entries");
    }
    for (auto d : dims) {
      if (d < 1) throw DataError(origin + ": shape entries must be >= 1");
    }
    shape = {static_cast<std::size_t>(dims[0]), static_cast<std::size_t>(dims[1]),
             static_cast<std::size_t>(dims[2])};
    v.spacing = {spacing[0], spacing[1], spacing[2]};
    v.patient_id = header.at("patient_id").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed header: " + e.what());
  }

  const std::size_t payload = bytes.size() - (eol + 1);
  const std::size_t expected = 4 * shape.count();
  if (payload < expected) {
    throw DataError(origin + ": truncated payload (" + std::to_string(payload) + " of " +
                    std::to_string(expected) + " bytes)");
  }
  if (payload > expected) {
    throw DataError(origin + ": payload has " + std::to_string(payload - expected) +
                    " trailing bytes beyond shape " + to_string(shape));
  }

  std::vector<float> voxels(shape.count());
  const char* src = bytes.data() + eol + 1;
  for (auto& f : voxels) {
    std::uint32_t bits;
    std::memcpy(&bits, src, 4);
    f = std::bit_cast<float>(to_le(bits));
    src += 4;
  }
  v.voxels = Grid3<float>(shape, std::move(voxels));
  validate(v);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move " + tmp.string() + " into place: " + ec.message());
}

void write_volume(const std::filesystem::path& path, const VolumeGrid& volume) {
  write_file_atomic(path, encode_rvol(volume));
}

VolumeGrid load_volume(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("missing volume file " + path.string());
  const auto ext = path.extension().string();
  if (ext != ".rvol") {
    VolumeAdapter adapter;
    {
      std::lock_guard lock(adapter_mutex());
      auto it = adapters().find(ext);
      if (it != adapters().end()) adapter = it->second;
    }
    if (adapter) {
      auto v = adapter(path);
      validate(v);
      return v;
    }
  }
  return decode_rvol(read_file(path), path.string());
}

void register_volume_adapter(const std::string& extension, VolumeAdapter adapter) {
  std::lock_guard lock(adapter_mutex());
  adapters()[extension] = std::move(adapter);
}

void clear_volume_adapters() {
  std::lock_guard lock(adapter_mutex());
  adapters().clear();
}

std::vector<std::filesystem::path> list_volumes(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a dataset directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".rvol") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string dataset_digest(const std::filesystem::path& dir) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : list_volumes(dir)) {
    h = fnv1a64(p.filename().string(), h);
    h = fnv1a64(read_file(p), h);
  }
  return hex64(h);
}

}  // namespace slicevoco
