#pragma once

// Per-layer input gram matrices G = X^T X for closed-form (RegMean) merging.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "modmerge/tensor_store.hpp"

namespace modmerge {

/// Inputs fed to one linear weight: n_tokens x d_in rows.
struct ActivationBatch {
  std::string entry_name;
  Tensor rows;
};

struct GramEntry {
  Tensor matrix;  // d_in x d_in
  std::uint64_t sample_count = 0;
};

/// Accumulated grams for one modality, keyed by the linear weight's entry name.
class GramStore {
 public:
  explicit GramStore(Modality modality) : modality_(modality) {}

  Modality modality() const noexcept { return modality_; }
  const std::map<std::string, GramEntry, std::less<>>& grams() const noexcept { return grams_; }
  const GramEntry* find(std::string_view name) const;

  /// G[name] += rows^T rows, row by row, so splitting a batch never changes
  /// the result. Throws DataError on a d_in mismatch.
  void add(const ActivationBatch& batch);

  /// Inserts a ready-made gram (used when loading). Validates symmetry.
  void set(std::string name, Tensor matrix, std::uint64_t sample_count);

 private:
  Modality modality_;
  std::map<std::string, GramEntry, std::less<>> grams_;
};

GramStore accumulate(GramStore store, const ActivationBatch& batch);

/// gamma * G + (1 - gamma) * diag(G): off-diagonals scaled, diagonal kept.
Tensor shrink_matrix(const Tensor& gram, double gamma);
GramStore shrink(const GramStore& store, double gamma);

/// Symmetric to 1e-10 relative and non-negative diagonal; throws DataError.
void validate_gram(const Tensor& gram, std::string_view name);

// Grams travel in MMC1 files with meta.kind = "gram".
Checkpoint to_checkpoint(const GramStore& store);
GramStore gram_store_from_checkpoint(const Checkpoint& ckpt);
void save_gram_store(const GramStore& store, const std::filesystem::path& path);
GramStore load_gram_store(const std::filesystem::path& path);

}  // namespace modmerge
