#include "modmerge/gram_capture.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace modmerge {

namespace {

// "layers.3.attn.wq" -> 3
std::optional<int> layer_from_name(std::string_view name) {
  constexpr std::string_view prefix = "layers.";
  if (!name.starts_with(prefix)) return std::nullopt;
  name.remove_prefix(prefix.size());
  int value = 0;
  std::size_t i = 0;
  for (; i < name.size() && name[i] >= '0' && name[i] <= '9'; ++i) value = value * 10 + (name[i] - '0');
  if (i == 0) return std::nullopt;
  return value;
}

}  // namespace

const GramEntry* GramStore::find(std::string_view name) const {
  auto it = grams_.find(name);
  return it == grams_.end() ? nullptr : &it->second;
}

void GramStore::add(const ActivationBatch& batch) {
  const Tensor& x = batch.rows;
  if (x.rank() != 2)
    throw DataError("activation batch for '" + batch.entry_name + "' must be 2-D (n_tokens x d_in)");
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  auto it = grams_.find(batch.entry_name);
  if (it == grams_.end())
    it = grams_.emplace(batch.entry_name, GramEntry{Tensor({d, d}), 0}).first;
  Tensor& g = it->second.matrix;
  if (g.rows() != d)
    throw DataError("dimension mismatch for '" + batch.entry_name + "': gram is " +
                    std::to_string(g.rows()) + "x" + std::to_string(g.rows()) + ", rows have d_in " +
                    std::to_string(d));
  // Upper triangle accumulated, then mirrored: exact symmetry.
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = &x.data()[r * d];
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = row[i];
      double* grow = &g.data()[i * d];
      for (std::size_t j = i; j < d; ++j) grow[j] += xi * row[j];
    }
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) g(j, i) = g(i, j);
  it->second.sample_count += n;
}

void GramStore::set(std::string name, Tensor matrix, std::uint64_t sample_count) {
  validate_gram(matrix, name);
  grams_.insert_or_assign(std::move(name), GramEntry{std::move(matrix), sample_count});
}

GramStore accumulate(GramStore store, const ActivationBatch& batch) {
  store.add(batch);
  return store;
}

Tensor shrink_matrix(const Tensor& gram, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("gamma must lie in [0,1]");
  Tensor out = gram;
  const std::size_t d = gram.rows();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      if (i != j) out(i, j) = gamma * gram(i, j);
  return out;
}

GramStore shrink(const GramStore& store, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("gamma must lie in [0,1]");
  GramStore out(store.modality());
  for (const auto& [name, entry] : store.grams())
    out.set(name, shrink_matrix(entry.matrix, gamma), entry.sample_count);
  return out;
}

void validate_gram(const Tensor& gram, std::string_view name) {
  if (gram.rank() != 2 || gram.rows() != gram.cols())
    throw DataError("gram '" + std::string(name) + "' must be square, got " + shape_string(gram.shape()));
  const std::size_t d = gram.rows();
  double scale = 0.0;
  for (double v : gram.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < d; ++i) {
    if (gram(i, i) < 0.0) throw DataError("gram '" + std::string(name) + "' has a negative diagonal entry");
    for (std::size_t j = i + 1; j < d; ++j)
      if (std::abs(gram(i, j) - gram(j, i)) > 1e-10 * scale)
        throw DataError("gram '" + std::string(name) + "' is not symmetric");
  }
}

Checkpoint to_checkpoint(const GramStore& store) {
  Checkpoint ckpt;
  for (const auto& [name, entry] : store.grams()) {
    ParamMeta meta;
    meta.layer_index = layer_from_name(name);
    meta.modality = store.modality();
    meta.kind = ParamKind::gram;
    meta.mergeable = false;
    meta.sample_count = entry.sample_count;
    ckpt.insert(name, entry.matrix, meta);
  }
  return ckpt;
}

GramStore gram_store_from_checkpoint(const Checkpoint& ckpt) {
  std::optional<Modality> modality;
  for (const auto& [name, e] : ckpt.entries()) {
    if (e.meta.kind != ParamKind::gram) throw DataError("entry '" + name + "' is not a gram matrix");
    if (modality && *modality != e.meta.modality)
      throw DataError("gram file mixes modalities ('" + name + "')");
    modality = e.meta.modality;
  }
  GramStore store(modality.value_or(Modality::shared));
  for (const auto& [name, e] : ckpt.entries()) store.set(name, e.tensor, e.meta.sample_count);
  return store;
}

void save_gram_store(const GramStore& store, const std::filesystem::path& path) {
  save_checkpoint(to_checkpoint(store), path);
}

GramStore load_gram_store(const std::filesystem::path& path) {
  return gram_store_from_checkpoint(load_checkpoint(path));
}

}  // namespace modmerge
