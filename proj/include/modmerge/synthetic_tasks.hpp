#pragma once

// Seedable token-sequence tasks standing in for vision, language and
// image-text matching objectives.
//
//   vision:   label = whether the summed fixed random projection of the
//             sequence's tokens is positive (a half-space test).
//   language: each next token either flips (label 1) or copies (label 0)
//             the parity of the previous one; the label names the rule.
//   joint:    a vision and a language sequence; label = whether both carry
//             the same unimodal label (matched pair).

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace modmerge {

enum class Route { unimodal_v, unimodal_l, fusion };

std::string_view task_name(Route r) noexcept;  // vision | language | joint
inline constexpr Route kAllRoutes[] = {Route::unimodal_v, Route::unimodal_l, Route::fusion};

/// Token sequences are stored flat, `size` rows of `seq_len` ids.
struct TaskBatch {
  Route route = Route::unimodal_v;
  std::size_t size = 0;
  std::vector<int> vision_tokens;    // unimodal_v and fusion
  std::vector<int> language_tokens;  // unimodal_l and fusion
  std::vector<int> labels;           // 0 / 1
};

struct TaskShape {
  int vocab_v = 32;
  int vocab_l = 32;
  int seq_len = 8;
};

class SyntheticTaskSet {
 public:
  SyntheticTaskSet(TaskShape shape, std::uint64_t task_seed);

  /// Deterministic in (route, stream_seed, batch_size); labels are balanced
  /// in expectation.
  TaskBatch batch(Route route, std::uint64_t stream_seed, std::size_t batch_size) const;

  double loss_weight(Route route) const noexcept { return route == Route::fusion ? 0.25 : 1.0; }
  const TaskShape& shape() const noexcept { return shape_; }

  // Ground-truth rules, exposed for tests.
  int vision_label(std::span<const int> tokens) const;
  int language_label(std::span<const int> tokens) const;

 private:
  TaskShape shape_;
  std::vector<double> token_score_;  // per vision token: projection onto the hidden direction
};

/// splitmix64 mixing of a seed with a stream of tags.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace modmerge
