#pragma once

#include "plm/nn.hpp"

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace plm {

/// Raised when a checkpoint and a model disagree on tensor names or shapes.
struct CheckpointMismatch : FormatError {
  using FormatError::FormatError;
};

struct CheckpointEntry {
  std::string name;
  std::variant<Tensor<float>, Tensor<double>> tensor;
};

/// Named tensors in insertion order. File layout:
/// "PLBK" | u32 version | u32 count | per tensor: u32 name length, name,
/// u8 dtype (0 = f32, 1 = f64), u32 rank, rank x u64 extents, raw data.
/// All integers and elements are little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::vector<CheckpointEntry> entries;

  template <typename Scalar>
  void add(const std::string& name, const Tensor<Scalar>& t);
  const CheckpointEntry* find(const std::string& name) const;
  std::size_t size() const { return entries.size(); }
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Copies parameter values keyed by parameter name.
template <typename Scalar>
Checkpoint snapshot(const ParamList<Scalar>& params);

/// Writes checkpoint values into the parameters. Every parameter must be
/// present and every entry must be used; offenders are named in the error.
template <typename Scalar>
void restore(const ParamList<Scalar>& params, const Checkpoint& ckpt);

/// Names of tensors whose bytes differ between two checkpoints with equal names.
std::vector<std::string> differing_entries(const Checkpoint& a, const Checkpoint& b);

}  // namespace plm
