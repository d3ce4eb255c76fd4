#pragma once

// A small modality-specific transformer: an N-layer vision stack, an N-layer
// language stack and M cross-modal fusion layers that replace the top M
// layers on the fusion route. Pre-LN blocks, tanh-GELU FFN, mean pooling and
// a two-way softmax head per task. Forward and backward are written by hand.
//
// Linear weights are stored d_in x d_out (y = x W + b).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "modmerge/gram_capture.hpp"
#include "modmerge/merge_engine.hpp"
#include "modmerge/synthetic_tasks.hpp"
#include "modmerge/tensor_store.hpp"

namespace modmerge {

struct ToyConfig {
  int d_model = 16;
  int n_heads = 2;
  int n_layers = 4;
  int n_fusion = 1;
  int ffn_mult = 4;
  int vocab_v = 32;
  int vocab_l = 32;
  int seq_len = 8;
  double init_std = 0.0;  // linear weights; 0 selects 1/sqrt(d_in)
  std::uint64_t seed = 0;

  void validate() const;
  LayerRouting routing() const { return {n_layers, n_fusion}; }
  TaskShape task_shape() const { return {vocab_v, vocab_l, seq_len}; }
  int head_dim() const { return d_model / n_heads; }
  int ffn_dim() const { return d_model * ffn_mult; }
};

struct LayerWeights {
  Tensor ln1_scale, ln1_shift;
  Tensor wq, bq, wk, wv, bv, wo, bo;  // keys carry no bias
  Tensor ln2_scale, ln2_shift;
  Tensor w1, b1, w2, b2;

  explicit LayerWeights(const ToyConfig& cfg);
};

struct ToyModel {
  ToyConfig cfg;
  std::vector<LayerWeights> vision;      // N layers
  std::vector<LayerWeights> language;    // N layers
  std::vector<LayerWeights> crossmodal;  // M layers, indices N-M .. N-1
  Tensor embed_v_token, embed_v_pos, embed_l_token, embed_l_pos;
  Tensor head_v_w, head_v_b, head_l_w, head_l_b, head_j_w, head_j_b;
  ShareMask tied;  // groups held identical across stacks during branched training

  explicit ToyModel(const ToyConfig& config);  // all zeros

  /// Same structure, all parameters zero (gradient accumulator).
  ToyModel zeros_like() const;
};

/// One parameter tensor with its checkpoint identity.
struct ParamRef {
  std::string name;        // full name, e.g. "vision/layers.2.attn.wq" or "embed.vision.token"
  std::string local_name;  // route-agnostic name, e.g. "layers.2.attn.wq"
  Tensor* tensor;
  ParamMeta meta;          // modality = owning stack
  bool layer_param;        // belongs to a transformer layer (mergeable)
};

/// Parameters in a fixed order; two models with the same config align.
std::vector<ParamRef> parameters(ToyModel& model);
std::vector<ParamRef> parameters(const ToyModel& model);

/// Deterministic in cfg.seed. Every stack receives the same layer values;
/// embeddings are random, heads start at zero.
ToyModel init_model(const ToyConfig& cfg);

struct CapturedActivation {
  Modality stack;
  ActivationBatch batch;
};

struct ForwardResult {
  double loss = 0.0;
  std::vector<int> predictions;
  std::vector<CapturedActivation> activations;  // filled when capture = true
};

/// Mean cross-entropy of the route's task. Throws DivergenceError when the
/// loss is not finite.
ForwardResult forward(const ToyModel& model, const TaskBatch& batch, bool capture = false);

/// Gradient of `weight * loss(batch)` added into `grads` (a zeros_like
/// accumulator). Returns the unweighted loss.
double accumulate_gradient(const ToyModel& model, const TaskBatch& batch, double weight, ToyModel& grads);

/// Sums gradients of tied layer parameters across the stacks present at each
/// layer and writes the sum back to every copy.
void tie_gradients(ToyModel& grads, const ShareMask& tied);

/// theta -= lr * grad over every parameter.
void apply_update(ToyModel& model, const ToyModel& grads, double lr);

/// One plain gradient-descent step on a single route's loss.
ToyModel backward_step(const ToyModel& model, const TaskBatch& batch, double lr);

enum class TrainMode { seed_shared, branched };

struct TrainOptions {
  double lr = 0.05;
  std::size_t batch_size = 4;
  std::uint64_t stream_seed = 0;  // batches for step t come from mix(stream_seed, t)
  std::uint64_t first_step = 0;
  bool heads_only = false;        // update only the task heads
};

/// Runs `steps` steps over all three tasks (loss weights 1, 1, 0.25).
/// seed_shared ties every layer group across stacks; branched ties only the
/// groups in model.tied. Returns the number of steps taken.
std::size_t train_phase(ToyModel& model, const SyntheticTaskSet& tasks, std::size_t steps, TrainMode mode,
                        const TrainOptions& options);

struct EvalOptions {
  std::size_t samples = 1000;  // per task
  std::uint64_t seed = 0xe7a1;
  std::size_t batch_size = 50;
};

/// Held-out accuracy per task name (vision, language, joint).
std::map<std::string, double> evaluate(const ToyModel& model, const SyntheticTaskSet& tasks,
                                       const EvalOptions& options = {});

/// Activations of every linear input on the route(s) that exercise each
/// stack: vision and language stacks on their unimodal routes, the fusion
/// layers on the fusion route.
GramStore capture_grams(const ToyModel& model, const SyntheticTaskSet& tasks, Modality stack,
                        std::size_t batches = 16, std::size_t batch_size = 8, std::uint64_t seed = 0x6a3);

// Checkpoint views -----------------------------------------------------------

/// Full export: stack-prefixed layer names plus embeddings and heads.
Checkpoint to_checkpoint(const ToyModel& model);
/// Restores a full export, or a merged checkpoint with unprefixed layer
/// names (which then feeds every stack).
ToyModel from_checkpoint(const ToyConfig& cfg, const Checkpoint& ckpt);

/// One stack as a merge input: unprefixed layer names; the stack's embedding
/// and head ride along as non-mergeable entries. Layer entries in tied groups
/// are tagged modality "shared".
Checkpoint route_checkpoint(const ToyModel& model, Modality stack);

/// The stack checkpoints re-labelled as the merge baseline W0.
Checkpoint init_checkpoint(const ToyModel& model);

/// Modality-agnostic model built from a merged checkpoint.
ToyModel from_merged(const ToyConfig& cfg, const Checkpoint& merged);

/// Reads d_model, N, M, ffn_mult, vocab sizes and seq_len off the shapes of a
/// full export or merged checkpoint; n_heads cannot be recovered and is given.
ToyConfig infer_config(const Checkpoint& ckpt, int n_heads);

}  // namespace modmerge
