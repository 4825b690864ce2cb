#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "lrlab/net.hpp"

namespace lrlab {

using Digest = std::array<std::uint8_t, 32>;

// SHA-256 of the bytes of `text`.
Digest sha256(std::string_view text);
std::string to_hex(const Digest& d);

// Digest of the unfactorized architecture (input shape, layer geometry, head).
// Base and low-rank runs of one architecture share it.
Digest architecture_digest(const NetworkSpec& spec);

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Binary layout, all integers little-endian:
//   "LRLB" | u16 version | u64 step | 32-byte digest | u32 tensor count |
//   per tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
//               prod(dims) x f64 values (IEEE-754 binary64, little-endian)
struct Checkpoint {
  std::uint64_t step = 0;
  Digest digest{};
  ParamSet params;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "<memory>");

// Writes to a temporary sibling and renames it into place, so an interrupted
// write never leaves a file with a valid header at `path`.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace lrlab
