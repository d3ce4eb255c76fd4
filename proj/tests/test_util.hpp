#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "modmerge/tensor_store.hpp"

namespace testutil {

using namespace modmerge;

inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

inline ParamMeta layer_meta(int layer, Modality m, ParamKind kind = ParamKind::linear_weight) {
  return ParamMeta{layer, m, kind, true, 0};
}

// A small layered checkpoint: per layer an attention weight, an FFN weight,
// an FFN bias and a layernorm scale, plus a non-mergeable embedding.
inline Checkpoint layered(std::mt19937_64& rng, Modality m, int n_layers, int first_layer = 0,
                          std::size_t d = 3) {
  Checkpoint c;
  for (int i = first_layer; i < n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    c.insert(p + "attn.wq", Tensor({d, d}, random_values(rng, d * d)), layer_meta(i, m));
    c.insert(p + "ffn.w1", Tensor({d, 2 * d}, random_values(rng, 2 * d * d)), layer_meta(i, m));
    c.insert(p + "ffn.b1", Tensor({2 * d}, random_values(rng, 2 * d)), layer_meta(i, m, ParamKind::bias));
    c.insert(p + "ln1.scale", Tensor({d}, random_values(rng, d)), layer_meta(i, m, ParamKind::layernorm_scale));
  }
  if (m != Modality::crossmodal && m != Modality::init)
    c.insert("embed." + std::string(to_string(m)), Tensor({4, d}, random_values(rng, 4 * d)),
             ParamMeta{std::nullopt, m, ParamKind::embedding, false, 0});
  return c;
}

inline std::vector<std::uint8_t> raw_file(const std::string& header, const std::vector<double>& payload) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  const std::uint64_t n = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  for (double v : payload) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

}  // namespace testutil
