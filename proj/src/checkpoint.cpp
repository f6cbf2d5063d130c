// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "slicevoco/errors.hpp"
#include "slicevoco/rvol.hpp"

namespace slicevoco {

namespace {

constexpr std::string_view kMagic = "SVCK1\n";

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xFFu);
    return r;
  }
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["kind"] = ckpt.kind;
  header["config"] = ckpt.config;
  header["extras"] = ckpt.extras;
  auto arrays = nlohmann::json::array();
  for (const auto& e : ckpt.arrays) {
    arrays.push_back({{"name", e.name}, {"shape", e.tensor.shape}, {"dtype", "f64le"}});
  }
  header["arrays"] = std::move(arrays);

  std::string out(kMagic);
  out += header.dump();
  out += '\n';
  std::size_t offset = out.size();
  out.resize(offset + 8 * ckpt.arrays.scalar_count());
  for (const auto& e : ckpt.arrays) {
    for (double v : e.tensor.data) {
      const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
      std::memcpy(out.data() + offset, &bits, 8);
      offset += 8;
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  if (bytes.compare(0, kMagic.size(), kMagic) != 0) throw DataError(origin + ": not a checkpoint (bad magic)");
  const auto eol = bytes.find('\n', kMagic.size());
  if (eol == std::string::npos) throw DataError(origin + ": malformed checkpoint header");

  Checkpoint ckpt;
  std::size_t offset = eol + 1;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(kMagic.size(), eol - kMagic.size()));
    if (header.at("format_version").get<std::string>() != kCheckpointFormatVersion) {
      throw DataError(origin + ": unsupported checkpoint version " + header.at("format_version").dump());
    }
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = header.at("config");
    ckpt.extras = header.at("extras");
    for (const auto& a : header.at("arrays")) {
      if (a.at("dtype").get<std::string>() != "f64le") throw DataError(origin + ": unsupported array dtype");
      Tensor t(a.at("shape").get<std::vector<std::size_t>>());
      const std::size_t need = 8 * t.size();
      if (bytes.size() < offset + need) throw DataError(origin + ": truncated checkpoint payload");
      for (auto& v : t.data) {
        std::uint64_t bits;
        std::memcpy(&bits, bytes.data() + offset, 8);
        v = std::bit_cast<double>(to_le(bits));
        if (!std::isfinite(v)) throw DataError(origin + ": non-finite value in '" + a.at("name").get<std::string>() + "'");
        offset += 8;
      }
      ckpt.arrays.add(a.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed checkpoint header: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(origin + ": " + e.what());
  }
  if (offset != bytes.size()) throw DataError(origin + ": trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

void append_prefixed(ParameterSet& dst, const ParameterSet& src, const std::string& prefix) {
  for (const auto& e : src) dst.add(prefix + e.name, e.tensor);
}

ParameterSet take_prefixed(const ParameterSet& src, const std::string& prefix) {
  ParameterSet out;
  for (const auto& e : src) {
    if (e.name.rfind(prefix, 0) == 0) out.add(e.name.substr(prefix.size()), e.tensor);
  }
  return out;
}

}  // namespace slicevoco
