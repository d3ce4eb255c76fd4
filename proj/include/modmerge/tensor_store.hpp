#pragma once

// Dense tensors, named checkpoints with per-entry metadata, and the MMC1
// on-disk container.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modmerge/error.hpp"

namespace modmerge {

/// Row-major tensor of 64-bit reals. Shape entries are all positive.
class Tensor {
 public:
  /// Zero-filled tensor of the given shape.
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors; rows() is shape[0], cols() the product of the rest.
  std::size_t rows() const noexcept { return shape_.front(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : data_.size() / shape_.front(); }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool all_finite() const noexcept;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Same shape and bit-identical payload (distinguishes -0.0 from 0.0).
bool identical(const Tensor& a, const Tensor& b) noexcept;

std::size_t shape_product(std::span<const std::size_t> shape);
std::string shape_string(std::span<const std::size_t> shape);

enum class Modality { vision, language, crossmodal, shared, init };

enum class ParamKind {
  linear_weight,
  bias,
  layernorm_scale,
  layernorm_shift,
  embedding,
  other,
  gram,
};

std::string_view to_string(Modality m) noexcept;
std::string_view to_string(ParamKind k) noexcept;
Modality parse_modality(std::string_view s);
ParamKind parse_param_kind(std::string_view s);

struct ParamMeta {
  std::optional<int> layer_index;  // nullopt encodes "non-layer"
  Modality modality = Modality::shared;
  ParamKind kind = ParamKind::other;
  bool mergeable = false;
  std::uint64_t sample_count = 0;  // only meaningful for kind == gram

  friend bool operator==(const ParamMeta&, const ParamMeta&) = default;
};

/// Throws DataError when the metadata violates the taxonomy rules
/// (embeddings and gram matrices are never mergeable).
void validate_meta(const ParamMeta& meta, std::string_view name);

struct Entry {
  Tensor tensor;
  ParamMeta meta;
};

/// Named tensor collection. Iteration order is lexicographic by name.
class Checkpoint {
 public:
  static constexpr int kFormatVersion = 1;

  /// Adds a new entry; duplicate names and invalid metadata throw DataError.
  void insert(std::string name, Tensor tensor, ParamMeta meta);
  /// Adds or replaces an entry.
  void assign(std::string name, Tensor tensor, ParamMeta meta);

  bool contains(std::string_view name) const;
  const Entry& at(std::string_view name) const;
  Entry& at(std::string_view name);
  const Entry* find(std::string_view name) const;

  const std::map<std::string, Entry, std::less<>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  int format_version() const noexcept { return format_version_; }

  /// Names of mergeable entries, sorted.
  std::vector<std::string> mergeable_names() const;

 private:
  std::map<std::string, Entry, std::less<>> entries_;
  int format_version_ = kFormatVersion;
};

/// Mergeable entries have identical name sets and identical shapes per name.
bool merge_compatible(const Checkpoint& a, const Checkpoint& b);
/// As merge_compatible, but throws DataError naming the first offending entry.
void require_merge_compatible(const Checkpoint& a, const Checkpoint& b, std::string_view what);

// MMC1 container: "MMCKPT01", u64 LE header length, JSON header, LE payload.
inline constexpr std::string_view kMagic = "MMCKPT01";

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

Checkpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Concatenates mergeable entries of the given modality in name order.
Tensor flatten_mergeable(const Checkpoint& ckpt, Modality modality_filter);

// Parameter groups used by share masks: which sub-module of a transformer
// layer an entry belongs to.
enum class ParamGroup { attention, ffn, layernorm, other };

using ShareMask = std::set<ParamGroup>;

std::string_view to_string(ParamGroup g) noexcept;
ParamGroup parse_param_group(std::string_view s);
/// Layernorm kinds map to layernorm; otherwise the ".attn." / ".ffn." name
/// segment decides.
ParamGroup param_group(std::string_view name, const ParamMeta& meta);

}  // namespace modmerge
