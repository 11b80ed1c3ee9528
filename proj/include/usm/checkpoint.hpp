#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "usm/config.hpp"
#include "usm/model.hpp"

// Binary checkpoint, all integers and floats little-endian:
//   "USMC" | u32 version | u64 config length | config text (UTF-8 key = value)
//   | u64 tensor count | per tensor: u32 name length, name, u32 rank,
//   rank x u64 dims, numel x f64 | u32 CRC-32 of every preceding byte.
namespace usm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kBadMagic, kVersion, kTruncated, kCrc, kContent };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  KeyValue config;
  std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Model config goes under "model." keys; extra entries are merged in.
Checkpoint make_checkpoint(const UsmParams& params, const ModelConfig& cfg, const KeyValue& extra = {});

struct LoadedModel {
  ModelConfig config;
  UsmParams params;
  KeyValue meta;  // full config blob
};
// Rebuilds the parameter structure from the stored config and fills it by
// name. Missing, extra or mis-shaped tensors throw kContent.
LoadedModel model_from_checkpoint(const Checkpoint& ck);

}  // namespace usm
