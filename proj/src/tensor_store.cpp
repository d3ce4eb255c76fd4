#include "modmerge/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace modmerge {

using json = nlohmann::json;

std::size_t shape_product(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(std::span<const std::size_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void check_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw DataError("tensor shape must have at least one dimension");
  for (std::size_t d : shape)
    if (d == 0) throw DataError("tensor shape entries must be positive, got " + shape_string(shape));
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_product(shape_))
    throw DataError("length mismatch: shape " + shape_string(shape_) + " needs " +
                    std::to_string(shape_product(shape_)) + " values, got " +
                    std::to_string(data_.size()));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool identical(const Tensor& a, const Tensor& b) noexcept {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

std::string_view to_string(Modality m) noexcept {
  switch (m) {
    case Modality::vision: return "vision";
    case Modality::language: return "language";
    case Modality::crossmodal: return "crossmodal";
    case Modality::shared: return "shared";
    case Modality::init: return "init";
  }
  return "?";
}

std::string_view to_string(ParamKind k) noexcept {
  switch (k) {
    case ParamKind::linear_weight: return "linear-weight";
    case ParamKind::bias: return "bias";
    case ParamKind::layernorm_scale: return "layernorm-scale";
    case ParamKind::layernorm_shift: return "layernorm-shift";
    case ParamKind::embedding: return "embedding";
    case ParamKind::other: return "other";
    case ParamKind::gram: return "gram";
  }
  return "?";
}

Modality parse_modality(std::string_view s) {
  for (Modality m : {Modality::vision, Modality::language, Modality::crossmodal, Modality::shared,
                     Modality::init})
    if (to_string(m) == s) return m;
  throw DataError("unknown modality '" + std::string(s) + "'");
}

ParamKind parse_param_kind(std::string_view s) {
  for (ParamKind k : {ParamKind::linear_weight, ParamKind::bias, ParamKind::layernorm_scale,
                      ParamKind::layernorm_shift, ParamKind::embedding, ParamKind::other,
                      ParamKind::gram})
    if (to_string(k) == s) return k;
  throw DataError("unknown parameter kind '" + std::string(s) + "'");
}

void validate_meta(const ParamMeta& meta, std::string_view name) {
  if (meta.layer_index && *meta.layer_index < 0)
    throw DataError("entry '" + std::string(name) + "': negative layer index");
  if ((meta.kind == ParamKind::embedding || meta.kind == ParamKind::gram) && meta.mergeable)
    throw DataError("entry '" + std::string(name) + "': " + std::string(to_string(meta.kind)) +
                    " entries cannot be mergeable");
}

void Checkpoint::insert(std::string name, Tensor tensor, ParamMeta meta) {
  if (entries_.contains(name)) throw DataError("duplicate name '" + name + "'");
  assign(std::move(name), std::move(tensor), meta);
}

void Checkpoint::assign(std::string name, Tensor tensor, ParamMeta meta) {
  if (name.empty()) throw DataError("entry names must be non-empty");
  validate_meta(meta, name);
  entries_.insert_or_assign(std::move(name), Entry{std::move(tensor), meta});
}

bool Checkpoint::contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }

const Entry& Checkpoint::at(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw DataError("missing entry '" + std::string(name) + "'");
  return it->second;
}

Entry& Checkpoint::at(std::string_view name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw DataError("missing entry '" + std::string(name) + "'");
  return it->second;
}

const Entry* Checkpoint::find(std::string_view name) const {
  auto it = entries_.find(name);
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<std::string> Checkpoint::mergeable_names() const {
  std::vector<std::string> names;
  for (const auto& [name, e] : entries_)
    if (e.meta.mergeable) names.push_back(name);
  return names;
}

namespace {

std::string compatibility_problem(const Checkpoint& a, const Checkpoint& b) {
  for (const auto& [name, e] : a.entries()) {
    if (!e.meta.mergeable) continue;
    const Entry* other = b.find(name);
    if (!other || !other->meta.mergeable) return "entry '" + name + "' missing from second checkpoint";
    if (other->tensor.shape() != e.tensor.shape())
      return "entry '" + name + "' shape " + shape_string(e.tensor.shape()) + " vs " +
             shape_string(other->tensor.shape());
  }
  for (const auto& [name, e] : b.entries())
    if (e.meta.mergeable && !a.contains(name))
      return "entry '" + name + "' missing from first checkpoint";
  return {};
}

}  // namespace

bool merge_compatible(const Checkpoint& a, const Checkpoint& b) {
  return compatibility_problem(a, b).empty();
}

void require_merge_compatible(const Checkpoint& a, const Checkpoint& b, std::string_view what) {
  if (auto problem = compatibility_problem(a, b); !problem.empty())
    throw DataError("incompatible checkpoints (" + std::string(what) + "): " + problem);
}

// ---------------------------------------------------------------------------
// MMC1 container

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

json meta_to_json(const ParamMeta& meta) {
  json j;
  if (meta.layer_index)
    j["layer_index"] = *meta.layer_index;
  else
    j["layer_index"] = "non-layer";
  j["modality"] = std::string(to_string(meta.modality));
  j["kind"] = std::string(to_string(meta.kind));
  j["mergeable"] = meta.mergeable;
  if (meta.kind == ParamKind::gram) j["sample_count"] = meta.sample_count;
  return j;
}

ParamMeta meta_from_json(const json& j, const std::string& name) {
  auto fail = [&](const std::string& why) -> DataError {
    return DataError("malformed header: entry '" + name + "' meta: " + why);
  };
  if (!j.is_object()) throw fail("not an object");
  ParamMeta meta;
  const auto& li = j.at("layer_index");
  if (li.is_string()) {
    if (li.get<std::string>() != "non-layer") throw fail("layer_index must be an integer or \"non-layer\"");
  } else if (li.is_number_integer()) {
    meta.layer_index = li.get<int>();
  } else {
    throw fail("layer_index must be an integer or \"non-layer\"");
  }
  if (!j.at("modality").is_string() || !j.at("kind").is_string() || !j.at("mergeable").is_boolean())
    throw fail("modality/kind must be strings and mergeable a boolean");
  meta.modality = parse_modality(j.at("modality").get<std::string>());
  meta.kind = parse_param_kind(j.at("kind").get<std::string>());
  meta.mergeable = j.at("mergeable").get<bool>();
  if (auto it = j.find("sample_count"); it != j.end()) {
    if (!it->is_number_unsigned()) throw fail("sample_count must be a non-negative integer");
    meta.sample_count = it->get<std::uint64_t>();
  }
  return meta;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, e] : ckpt.entries()) {
    if (!e.tensor.all_finite()) throw DataError("refusing to write non-finite values in entry '" + name + "'");
    header[name] = {{"shape", e.tensor.shape()},
                    {"dtype", "f64"},
                    {"offset", offset},
                    {"meta", meta_to_json(e.meta)}};
    offset += e.tensor.size() * sizeof(double);
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kMagic.size() + 8 + text.size() + offset);
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, e] : ckpt.entries())
    for (double v : e.tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  const std::size_t prefix = kMagic.size() + 8;
  if (bytes.size() < prefix) throw DataError("malformed header: file shorter than the fixed prefix");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
    throw DataError("malformed header: bad magic (expected MMCKPT01)");
  const std::uint64_t header_len = get_u64(bytes.data() + kMagic.size());
  if (header_len > bytes.size() - prefix)
    throw DataError("malformed header: declared header length exceeds file size");

  const auto* hbegin = reinterpret_cast<const char*>(bytes.data() + prefix);
  const std::string_view text(hbegin, header_len);

  std::set<std::string> seen;
  std::string duplicate;
  json::parser_callback_t cb = [&](int depth, json::parse_event_t event, json& parsed) {
    if (depth == 1 && event == json::parse_event_t::key) {
      auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };
  json header;
  try {
    header = json::parse(text.begin(), text.end(), cb);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed header: ") + e.what());
  }
  if (!duplicate.empty()) throw DataError("duplicate name '" + duplicate + "'");
  if (!header.is_object()) throw DataError("malformed header: top level is not an object");

  const std::uint8_t* payload = bytes.data() + prefix + header_len;
  const std::uint64_t payload_len = bytes.size() - prefix - header_len;

  Checkpoint ckpt;
  std::uint64_t declared = 0;
  for (const auto& [name, spec] : header.items()) {
    try {
      if (!spec.is_object()) throw DataError("malformed header: entry '" + name + "' is not an object");
      if (spec.at("dtype") != "f64")
        throw DataError("malformed header: entry '" + name + "' has unsupported dtype");
      const auto& jshape = spec.at("shape");
      if (!jshape.is_array() || jshape.empty())
        throw DataError("malformed header: entry '" + name + "' shape must be a non-empty array");
      std::vector<std::size_t> shape;
      for (const auto& d : jshape) {
        if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0)
          throw DataError("malformed header: entry '" + name + "' shape entries must be positive integers");
        shape.push_back(d.get<std::size_t>());
      }
      if (!spec.at("offset").is_number_unsigned())
        throw DataError("malformed header: entry '" + name + "' offset must be a non-negative integer");
      const std::uint64_t offset = spec.at("offset").get<std::uint64_t>();
      const std::uint64_t count = shape_product(shape);
      const std::uint64_t nbytes = count * sizeof(double);
      if (offset % sizeof(double) != 0)
        throw DataError("malformed header: entry '" + name + "' offset is not 8-byte aligned");
      if (offset > payload_len || nbytes > payload_len - offset)
        throw DataError("length mismatch: entry '" + name + "' extends past the payload");
      declared += nbytes;

      std::vector<double> values(count);
      for (std::uint64_t i = 0; i < count; ++i)
        values[i] = std::bit_cast<double>(get_u64(payload + offset + i * sizeof(double)));
      Tensor t(std::move(shape), std::move(values));
      if (!t.all_finite()) throw DataError("non-finite value in entry '" + name + "'");
      ckpt.insert(name, std::move(t), meta_from_json(spec.at("meta"), name));
    } catch (const json::exception& e) {
      throw DataError("malformed header: entry '" + name + "': " + e.what());
    }
  }
  if (declared != payload_len)
    throw DataError("length mismatch: header declares " + std::to_string(declared) +
                    " payload bytes, file has " + std::to_string(payload_len));
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

Tensor flatten_mergeable(const Checkpoint& ckpt, Modality modality_filter) {
  std::vector<double> flat;
  for (const auto& [name, e] : ckpt.entries()) {
    if (!e.meta.mergeable || e.meta.modality != modality_filter) continue;
    flat.insert(flat.end(), e.tensor.data().begin(), e.tensor.data().end());
  }
  if (flat.empty())
    throw DataError("no mergeable entries with modality '" + std::string(to_string(modality_filter)) + "'");
  return Tensor::vector(std::move(flat));
}

std::string_view to_string(ParamGroup g) noexcept {
  switch (g) {
    case ParamGroup::attention: return "attention";
    case ParamGroup::ffn: return "ffn";
    case ParamGroup::layernorm: return "layernorm";
    case ParamGroup::other: return "other";
  }
  return "?";
}

ParamGroup parse_param_group(std::string_view s) {
  for (ParamGroup g : {ParamGroup::attention, ParamGroup::ffn, ParamGroup::layernorm, ParamGroup::other})
    if (to_string(g) == s) return g;
  throw UsageError("unknown parameter group '" + std::string(s) + "' (attention, ffn, layernorm)");
}

ParamGroup param_group(std::string_view name, const ParamMeta& meta) {
  if (meta.kind == ParamKind::layernorm_scale || meta.kind == ParamKind::layernorm_shift)
    return ParamGroup::layernorm;
  if (name.find(".attn.") != std::string_view::npos) return ParamGroup::attention;
  if (name.find(".ffn.") != std::string_view::npos) return ParamGroup::ffn;
  return ParamGroup::other;
}

}  // namespace modmerge
