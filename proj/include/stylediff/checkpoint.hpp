#pragma once

#include <cstdint>
#include <string>

#include "stylediff/diffusion.hpp"

namespace stylediff {

// Binary checkpoint blob:
//
//   bytes 0..3   magic "SDDP"
//   bytes 4..7   format version, u32 little-endian (currently 1)
//   bytes 8..15  header length in bytes, u64 little-endian
//   header       UTF-8 JSON: planner configuration, normalization stats,
//                bookkeeping, and an ordered parameter manifest (name, shape)
//   payload      every parameter tensor as float64 little-endian, row-major,
//                concatenated in manifest order
//
// Loading reconstructs the planner from the header and overwrites its
// parameters from the payload, so save -> load -> save round-trips
// byte-identically.  Format details live in docs/formats.md.

inline constexpr char kCheckpointMagic[4] = {'S', 'D', 'D', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  PlannerConfig config;
  NormStats norm;
  std::int64_t trained_steps = 0;
};

// Serializes the planner's configuration, normalization stats and parameters.
// Writes to a temporary file in the same directory and renames it into place
// so a crash never leaves a truncated checkpoint at `path`.
void save_checkpoint(const Planner& planner, std::int64_t trained_steps,
                     const std::string& path);

// Reconstructs a planner from a checkpoint.  Throws IoError for unreadable,
// truncated or corrupt files (bad magic, manifest/payload mismatch) and
// ConfigError for an unsupported format version.  `trained_steps_out`, when
// non-null, receives the stored optimizer step count.
Planner load_checkpoint(const std::string& path,
                        std::int64_t* trained_steps_out = nullptr);

}  // namespace stylediff
