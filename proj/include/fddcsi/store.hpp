#pragma once

// On-disk formats. All multi-byte values are little-endian; floats are
// IEEE-754 binary64.
//
// Dataset ("FMCD", version 1)
//   char[4] magic | u32 version | u32 M | u32 env_count
//   u8 role | u8 noise_mode | u8 has_clean | u8 reserved
//   u64 pair_count | f64 delta_f | f64 snr_db | u32 pilot_len
//   env_count x { i64 env_id | u64 pairs }
//   pair_count x { f64 f_up | f64[2M] x | f64[2M] y }
//   [has_clean] pair_count x f64[2M] y_clean
//   pair_count x i64 user
//
// Checkpoint ("FMCK", version 1)
//   char[4] magic | u32 version | u32 layer_count | u32[layer_count+1] widths
//   u8[layer_count] activations | u8 provenance | u8 converged | u16 reserved
//   u32 derivative_order | u32 steps | u64 config_digest
//   per layer: f64[rows*cols] W (row-major) ; then per layer: f64[rows] b
//
// Every write goes to `<path>.tmp` and is renamed into place, then a
// `<path>.meta.json` sidecar is written the same way.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fddcsi/channel.hpp"
#include "fddcsi/transfer.hpp"

namespace fddcsi {

class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, UnsupportedVersion, Truncated, Shape, Io };

  FormatError(Kind kind, std::uint64_t offset, const std::string& what);

  Kind kind() const { return kind_; }
  std::uint64_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::uint64_t offset_;
};

std::string to_string(FormatError::Kind kind);

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A set of task datasets sharing one role, array size and noise setup.
struct DatasetFile {
  int M = 0;
  Role role = Role::Train;
  double delta_f = 0.0;
  NoiseSpec noise;
  std::vector<TaskDataset> tasks;

  std::size_t pair_count() const;
  bool operator==(const DatasetFile& o) const;
};

/// Checks shapes and that every pair satisfies f_down == f_up + delta_f.
void validate(const DatasetFile& file);

std::vector<std::uint8_t> encode_dataset(const DatasetFile& file);
DatasetFile decode_dataset(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_checkpoint(const TrainedModel& model);
/// The returned model carries default config and empty histories; the
/// config can be restored from the sidecar (see read_checkpoint).
TrainedModel decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_dataset(const std::filesystem::path& path, const DatasetFile& file);
DatasetFile read_dataset(const std::filesystem::path& path);

void write_checkpoint(const std::filesystem::path& path, const TrainedModel& model);
/// Reads the binary checkpoint; if a sidecar with a matching config digest
/// exists, the training config is restored from it.
TrainedModel read_checkpoint(const std::filesystem::path& path);

std::uint64_t checkpoint_digest(const TrainConfig& cfg);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

void write_bytes_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

}  // namespace fddcsi
