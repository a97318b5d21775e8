#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deltacomp/numerics.hpp"

namespace deltacomp {

/// A named parameter. 1-D parameters are held as (length × 1) with
/// is_vector set; only 2-D tensors are eligible for low-rank compression.
struct Tensor {
  Matrix values;
  bool is_vector = false;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Insertion-ordered name → tensor map. Names are unique.
class TensorMap {
 public:
  void add(std::string name, Tensor tensor);
  const Tensor* find(std::string_view name) const noexcept;
  const Tensor& at(std::string_view name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  const NamedTensors& entries() const noexcept { return entries_; }

  friend bool operator==(const TensorMap&, const TensorMap&) = default;

 private:
  NamedTensors entries_;
};

class ModelCheckpoint {
 public:
  ModelCheckpoint() = default;
  explicit ModelCheckpoint(TensorMap tensors) : tensors_(std::move(tensors)) {}

  const TensorMap& tensors() const noexcept { return tensors_; }
  /// FNV-1a 64 over the canonical payload bytes (tensor data only).
  std::uint64_t checksum() const;

  friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;

 private:
  TensorMap tensors_;
};

struct DeltaWeights {
  TensorMap tensors;
  std::uint64_t backbone_checksum = 0;
};

/// Canonical DCKP bytes; saving the same checkpoint always yields identical bytes.
std::vector<std::uint8_t> serialize_checkpoint(const ModelCheckpoint& checkpoint);
ModelCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelCheckpoint& checkpoint, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

DeltaWeights extract_delta(const ModelCheckpoint& aligned, const ModelCheckpoint& backbone);

/// backbone + delta. Refuses a delta taken against a different backbone
/// unless `force` is set.
ModelCheckpoint restore(const ModelCheckpoint& backbone, const DeltaWeights& delta, bool force = false);

/// Storage for one backbone plus n compressed deltas: (1 + alpha·n)·model_size.
double total_size(std::size_t n_models, double model_size, double alpha);

}  // namespace deltacomp
