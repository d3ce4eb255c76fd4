#include "modmerge/synthetic_tasks.hpp"

#include <random>

namespace modmerge {

std::string_view task_name(Route r) noexcept {
  switch (r) {
    case Route::unimodal_v: return "vision";
    case Route::unimodal_l: return "language";
    case Route::fusion: return "joint";
  }
  return "?";
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SyntheticTaskSet::SyntheticTaskSet(TaskShape shape, std::uint64_t task_seed) : shape_(shape) {
  constexpr int kProjDim = 4;
  std::mt19937_64 rng(mix_seed(task_seed, 0x7461736b));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> direction(kProjDim);
  for (double& d : direction) d = normal(rng);
  token_score_.resize(static_cast<std::size_t>(shape_.vocab_v));
  for (double& s : token_score_) {
    s = 0.0;
    for (int k = 0; k < kProjDim; ++k) s += normal(rng) * direction[static_cast<std::size_t>(k)];
  }
}

int SyntheticTaskSet::vision_label(std::span<const int> tokens) const {
  double sum = 0.0;
  for (int t : tokens) sum += token_score_[static_cast<std::size_t>(t)];
  return sum > 0.0 ? 1 : 0;
}

int SyntheticTaskSet::language_label(std::span<const int> tokens) const {
  std::size_t flips = 0;
  for (std::size_t i = 1; i < tokens.size(); ++i)
    if ((tokens[i] & 1) != (tokens[i - 1] & 1)) ++flips;
  return 2 * flips > tokens.size() - 1 ? 1 : 0;
}

namespace {

void vision_sequence(const SyntheticTaskSet& tasks, std::mt19937_64& rng, int label, std::vector<int>& out) {
  const auto& shape = tasks.shape();
  std::uniform_int_distribution<int> token(0, shape.vocab_v - 1);
  std::vector<int> seq(static_cast<std::size_t>(shape.seq_len));
  do {
    for (int& t : seq) t = token(rng);
  } while (tasks.vision_label(seq) != label);
  out.insert(out.end(), seq.begin(), seq.end());
}

void language_sequence(const SyntheticTaskSet& tasks, std::mt19937_64& rng, int label, std::vector<int>& out) {
  const auto& shape = tasks.shape();
  const int half = shape.vocab_l / 2;
  std::uniform_int_distribution<int> token(0, shape.vocab_l - 1);
  std::uniform_int_distribution<int> pair(0, half - 1);
  std::vector<int> seq(static_cast<std::size_t>(shape.seq_len));
  seq[0] = token(rng);
  for (std::size_t i = 1; i < seq.size(); ++i) {
    const int parity = seq[i - 1] & 1;
    seq[i] = 2 * pair(rng) + (label == 1 ? 1 - parity : parity);
  }
  out.insert(out.end(), seq.begin(), seq.end());
}

}  // namespace

TaskBatch SyntheticTaskSet::batch(Route route, std::uint64_t stream_seed, std::size_t batch_size) const {
  std::mt19937_64 rng(mix_seed(stream_seed, static_cast<std::uint64_t>(route)));
  std::bernoulli_distribution coin(0.5);
  TaskBatch b;
  b.route = route;
  b.size = batch_size;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const int label = coin(rng) ? 1 : 0;
    b.labels.push_back(label);
    switch (route) {
      case Route::unimodal_v: vision_sequence(*this, rng, label, b.vision_tokens); break;
      case Route::unimodal_l: language_sequence(*this, rng, label, b.language_tokens); break;
      case Route::fusion: {
        const int v_label = coin(rng) ? 1 : 0;
        const int l_label = label == 1 ? v_label : 1 - v_label;
        vision_sequence(*this, rng, v_label, b.vision_tokens);
        language_sequence(*this, rng, l_label, b.language_tokens);
        break;
      }
    }
  }
  return b;
}

}  // namespace modmerge
