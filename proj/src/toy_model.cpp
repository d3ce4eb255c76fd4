#include "modmerge/toy_model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace modmerge {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vec = Eigen::VectorXd;

constexpr double kLayerNormEps = 1e-12;
constexpr int kClasses = 2;

Eigen::Map<const Mat> as_mat(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
Eigen::Map<Mat> as_mat(Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
Eigen::Map<const RowVec> as_row(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}
Eigen::Map<RowVec> as_row(Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.size())}; }

Tensor vec_tensor(int n, double fill = 0.0) {
  Tensor t({static_cast<std::size_t>(n)});
  std::fill(t.values().begin(), t.values().end(), fill);
  return t;
}
Tensor mat_tensor(int r, int c) { return Tensor({static_cast<std::size_t>(r), static_cast<std::size_t>(c)}); }

Tensor to_tensor(const Mat& m) {
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::vector<double>(m.data(), m.data() + m.size()));
}

}  // namespace

void ToyConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || n_layers < 1 || ffn_mult < 1 || seq_len < 1)
    throw UsageError("toy config dimensions must be positive");
  if (d_model % n_heads != 0)
    throw UsageError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                     std::to_string(n_heads) + ")");
  if (n_fusion < 0 || n_fusion > n_layers) throw UsageError("n_fusion must lie in [0, n_layers]");
  if (vocab_v < 2 || vocab_l < 2 || vocab_l % 2 != 0)
    throw UsageError("vocabularies need at least two tokens (language vocabulary even)");
}

LayerWeights::LayerWeights(const ToyConfig& cfg)
    : ln1_scale(vec_tensor(cfg.d_model, 1.0)),
      ln1_shift(vec_tensor(cfg.d_model)),
      wq(mat_tensor(cfg.d_model, cfg.d_model)),
      bq(vec_tensor(cfg.d_model)),
      wk(mat_tensor(cfg.d_model, cfg.d_model)),
      wv(mat_tensor(cfg.d_model, cfg.d_model)),
      bv(vec_tensor(cfg.d_model)),
      wo(mat_tensor(cfg.d_model, cfg.d_model)),
      bo(vec_tensor(cfg.d_model)),
      ln2_scale(vec_tensor(cfg.d_model, 1.0)),
      ln2_shift(vec_tensor(cfg.d_model)),
      w1(mat_tensor(cfg.d_model, cfg.ffn_dim())),
      b1(vec_tensor(cfg.ffn_dim())),
      w2(mat_tensor(cfg.ffn_dim(), cfg.d_model)),
      b2(vec_tensor(cfg.d_model)) {}

ToyModel::ToyModel(const ToyConfig& config)
    : cfg(config),
      embed_v_token(mat_tensor(config.vocab_v, config.d_model)),
      embed_v_pos(mat_tensor(config.seq_len, config.d_model)),
      embed_l_token(mat_tensor(config.vocab_l, config.d_model)),
      embed_l_pos(mat_tensor(config.seq_len, config.d_model)),
      head_v_w(mat_tensor(config.d_model, kClasses)),
      head_v_b(vec_tensor(kClasses)),
      head_l_w(mat_tensor(config.d_model, kClasses)),
      head_l_b(vec_tensor(kClasses)),
      head_j_w(mat_tensor(config.d_model, kClasses)),
      head_j_b(vec_tensor(kClasses)) {
  cfg.validate();
  vision.assign(static_cast<std::size_t>(cfg.n_layers), LayerWeights(cfg));
  language.assign(static_cast<std::size_t>(cfg.n_layers), LayerWeights(cfg));
  crossmodal.assign(static_cast<std::size_t>(cfg.n_fusion), LayerWeights(cfg));
}

ToyModel ToyModel::zeros_like() const {
  ToyModel z(cfg);
  for (auto& p : parameters(z)) std::fill(p.tensor->values().begin(), p.tensor->values().end(), 0.0);
  z.tied = tied;
  return z;
}

// ---------------------------------------------------------------------------
// Parameter enumeration

namespace {

struct LayerField {
  const char* suffix;
  Tensor LayerWeights::*member;
  ParamKind kind;
};

const LayerField kLayerFields[] = {
    {"ln1.scale", &LayerWeights::ln1_scale, ParamKind::layernorm_scale},
    {"ln1.shift", &LayerWeights::ln1_shift, ParamKind::layernorm_shift},
    {"attn.wq", &LayerWeights::wq, ParamKind::linear_weight},
    {"attn.bq", &LayerWeights::bq, ParamKind::bias},
    {"attn.wk", &LayerWeights::wk, ParamKind::linear_weight},
    {"attn.wv", &LayerWeights::wv, ParamKind::linear_weight},
    {"attn.bv", &LayerWeights::bv, ParamKind::bias},
    {"attn.wo", &LayerWeights::wo, ParamKind::linear_weight},
    {"attn.bo", &LayerWeights::bo, ParamKind::bias},
    {"ln2.scale", &LayerWeights::ln2_scale, ParamKind::layernorm_scale},
    {"ln2.shift", &LayerWeights::ln2_shift, ParamKind::layernorm_shift},
    {"ffn.w1", &LayerWeights::w1, ParamKind::linear_weight},
    {"ffn.b1", &LayerWeights::b1, ParamKind::bias},
    {"ffn.w2", &LayerWeights::w2, ParamKind::linear_weight},
    {"ffn.b2", &LayerWeights::b2, ParamKind::bias},
};

std::string layer_name(int layer, const char* suffix) {
  return "layers." + std::to_string(layer) + "." + suffix;
}

template <class Model>
std::vector<ParamRef> enumerate(Model& m) {
  std::vector<ParamRef> out;
  const int n = m.cfg.n_layers;
  const int first_fusion = n - m.cfg.n_fusion;
  auto add_stack = [&](auto& layers, Modality stack, int offset) {
    for (std::size_t j = 0; j < layers.size(); ++j) {
      const int layer = offset + static_cast<int>(j);
      for (const LayerField& f : kLayerFields) {
        std::string local = layer_name(layer, f.suffix);
        ParamMeta meta{layer, stack, f.kind, true, 0};
        out.push_back({std::string(to_string(stack)) + "/" + local, local,
                       const_cast<Tensor*>(&(layers[j].*f.member)), meta, true});
      }
    }
  };
  add_stack(m.vision, Modality::vision, 0);
  add_stack(m.language, Modality::language, 0);
  add_stack(m.crossmodal, Modality::crossmodal, first_fusion);

  auto add_other = [&](const char* name, auto& tensor, Modality modality, ParamKind kind) {
    out.push_back({name, name, const_cast<Tensor*>(&tensor), ParamMeta{std::nullopt, modality, kind, false, 0}, false});
  };
  add_other("embed.vision.token", m.embed_v_token, Modality::vision, ParamKind::embedding);
  add_other("embed.vision.position", m.embed_v_pos, Modality::vision, ParamKind::embedding);
  add_other("embed.language.token", m.embed_l_token, Modality::language, ParamKind::embedding);
  add_other("embed.language.position", m.embed_l_pos, Modality::language, ParamKind::embedding);
  add_other("head.vision.weight", m.head_v_w, Modality::vision, ParamKind::linear_weight);
  add_other("head.vision.bias", m.head_v_b, Modality::vision, ParamKind::bias);
  add_other("head.language.weight", m.head_l_w, Modality::language, ParamKind::linear_weight);
  add_other("head.language.bias", m.head_l_b, Modality::language, ParamKind::bias);
  add_other("head.joint.weight", m.head_j_w, Modality::shared, ParamKind::linear_weight);
  add_other("head.joint.bias", m.head_j_b, Modality::shared, ParamKind::bias);
  return out;
}

}  // namespace

std::vector<ParamRef> parameters(ToyModel& model) { return enumerate(model); }
std::vector<ParamRef> parameters(const ToyModel& model) { return enumerate(model); }

ToyModel init_model(const ToyConfig& cfg) {
  ToyModel model(cfg);
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x696e6974));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Tensor& t, double std) {
    for (double& v : t.values()) v = std * normal(rng);
  };

  for (int i = 0; i < cfg.n_layers; ++i) {
    LayerWeights layer(cfg);
    const double s_model = cfg.init_std > 0.0 ? cfg.init_std : 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double s_ffn = cfg.init_std > 0.0 ? cfg.init_std : 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim()));
    fill(layer.wq, s_model);
    fill(layer.wk, s_model);
    fill(layer.wv, s_model);
    fill(layer.wo, s_model);
    fill(layer.w1, s_model);
    fill(layer.w2, s_ffn);
    const auto idx = static_cast<std::size_t>(i);
    model.vision[idx] = layer;
    model.language[idx] = layer;
    const int fusion_idx = i - (cfg.n_layers - cfg.n_fusion);
    if (fusion_idx >= 0) model.crossmodal[static_cast<std::size_t>(fusion_idx)] = layer;
  }
  fill(model.embed_v_token, 1.0);
  fill(model.embed_v_pos, 0.5);
  fill(model.embed_l_token, 1.0);
  fill(model.embed_l_pos, 0.5);
  return model;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

double gelu(double u) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
}

double gelu_grad(double u) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * u * u);
}

struct LayerNormCache {
  Mat xhat;
  Vec rstd;
};

Mat layernorm_forward(const Mat& x, const Tensor& scale, const Tensor& shift, LayerNormCache& cache) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  cache.xhat.resize(rows, d);
  cache.rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
  }
  Mat y = cache.xhat.array().rowwise() * as_row(scale).array();
  y.rowwise() += as_row(shift);
  return y;
}

Mat layernorm_backward(const Mat& dy, const LayerNormCache& cache, const Tensor& scale, Tensor& dscale,
                       Tensor& dshift) {
  as_row(dscale) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  as_row(dshift) += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * as_row(scale).array();
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).mean();
    const double m2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).mean();
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
  }
  return dx;
}

Mat linear(const Mat& x, const Tensor& w, const Tensor& b) {
  Mat y = x * as_mat(w);
  y.rowwise() += as_row(b);
  return y;
}

// dy -> dW, db accumulated; returns dx.
Mat linear_backward(const Mat& x, const Mat& dy, const Tensor& w, Tensor& dw, Tensor& db) {
  as_mat(dw).noalias() += x.transpose() * dy;
  as_row(db) += dy.colwise().sum();
  return dy * as_mat(w).transpose();
}

struct LayerCache {
  LayerNormCache ln1, ln2;
  Mat a, q, k, v, o, f, u, g;
  std::vector<Mat> probs;  // per (sequence, head)
};

// x holds `x.rows() / tokens` sequences of `tokens` rows each.
Mat layer_forward(const LayerWeights& w, const Mat& x, int tokens, int heads, LayerCache& c) {
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / heads;
  const Eigen::Index nseq = x.rows() / tokens;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  c.a = layernorm_forward(x, w.ln1_scale, w.ln1_shift, c.ln1);
  c.q = linear(c.a, w.wq, w.bq);
  c.k = c.a * as_mat(w.wk);  // a key bias would shift every score of a query equally
  c.v = linear(c.a, w.wv, w.bv);
  c.o.resize(x.rows(), d);
  c.probs.resize(static_cast<std::size_t>(nseq * heads));
  for (Eigen::Index s = 0; s < nseq; ++s) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto q = c.q.block(s * tokens, h * dh, tokens, dh);
      const auto k = c.k.block(s * tokens, h * dh, tokens, dh);
      const auto v = c.v.block(s * tokens, h * dh, tokens, dh);
      Mat p = (q * k.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      c.o.block(s * tokens, h * dh, tokens, dh) = p * v;
      c.probs[static_cast<std::size_t>(s * heads + h)] = std::move(p);
    }
  }
  Mat x1 = x + linear(c.o, w.wo, w.bo);
  c.f = layernorm_forward(x1, w.ln2_scale, w.ln2_shift, c.ln2);
  c.u = linear(c.f, w.w1, w.b1);
  c.g = c.u.unaryExpr(&gelu);
  return x1 + linear(c.g, w.w2, w.b2);
}

Mat layer_backward(const LayerWeights& w, const LayerCache& c, const Mat& dout, int tokens, int heads,
                   LayerWeights& gw) {
  const Eigen::Index d = dout.cols();
  const Eigen::Index dh = d / heads;
  const Eigen::Index nseq = dout.rows() / tokens;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // FFN branch.
  const Mat dg = linear_backward(c.g, dout, w.w2, gw.w2, gw.b2);
  const Mat du = dg.array() * c.u.unaryExpr(&gelu_grad).array();
  const Mat df = linear_backward(c.f, du, w.w1, gw.w1, gw.b1);
  Mat dx1 = dout + layernorm_backward(df, c.ln2, w.ln2_scale, gw.ln2_scale, gw.ln2_shift);

  // Attention branch.
  const Mat dO = linear_backward(c.o, dx1, w.wo, gw.wo, gw.bo);
  Mat dq(dout.rows(), d), dk(dout.rows(), d), dv(dout.rows(), d);
  for (Eigen::Index s = 0; s < nseq; ++s) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const Mat& p = c.probs[static_cast<std::size_t>(s * heads + h)];
      const auto q = c.q.block(s * tokens, h * dh, tokens, dh);
      const auto k = c.k.block(s * tokens, h * dh, tokens, dh);
      const auto v = c.v.block(s * tokens, h * dh, tokens, dh);
      const auto dob = dO.block(s * tokens, h * dh, tokens, dh);
      const Mat dp = dob * v.transpose();
      dv.block(s * tokens, h * dh, tokens, dh) = p.transpose() * dob;
      Mat ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
      ds *= inv_sqrt;
      dq.block(s * tokens, h * dh, tokens, dh) = ds * k;
      dk.block(s * tokens, h * dh, tokens, dh) = ds.transpose() * q;
    }
  }
  Mat da = linear_backward(c.a, dq, w.wq, gw.wq, gw.bq);
  as_mat(gw.wk).noalias() += c.a.transpose() * dk;
  da += dk * as_mat(w.wk).transpose();
  da += linear_backward(c.a, dv, w.wv, gw.wv, gw.bv);
  return dx1 + layernorm_backward(da, c.ln1, w.ln1_scale, gw.ln1_scale, gw.ln1_shift);
}

Mat embed(const Tensor& token_table, const Tensor& pos_table, const std::vector<int>& tokens, int seq_len) {
  const auto table = as_mat(token_table);
  const auto pos = as_mat(pos_table);
  Mat h(static_cast<Eigen::Index>(tokens.size()), table.cols());
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const int t = tokens[r];
    if (t < 0 || t >= table.rows()) throw DataError("token id " + std::to_string(t) + " out of range");
    h.row(static_cast<Eigen::Index>(r)) = table.row(t) + pos.row(static_cast<Eigen::Index>(r % static_cast<std::size_t>(seq_len)));
  }
  return h;
}

void embed_backward(Tensor& dtoken, Tensor& dpos, const std::vector<int>& tokens, int seq_len, const Mat& dh) {
  auto gt = as_mat(dtoken);
  auto gp = as_mat(dpos);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    gt.row(tokens[r]) += dh.row(row);
    gp.row(static_cast<Eigen::Index>(r % static_cast<std::size_t>(seq_len))) += dh.row(row);
  }
}

struct StackRun {
  Modality stack;
  int first_layer;
  std::vector<LayerCache> caches;
};

struct RouteTrace {
  Mat h_v, h_l;        // embeddings
  std::vector<StackRun> runs;
  Mat final_h;
  Mat pooled;
  Mat probs;           // batch x 2
  int pool_tokens = 0;
};

const LayerWeights& layer_of(const ToyModel& m, Modality stack, int layer) {
  switch (stack) {
    case Modality::vision: return m.vision[static_cast<std::size_t>(layer)];
    case Modality::language: return m.language[static_cast<std::size_t>(layer)];
    default: return m.crossmodal[static_cast<std::size_t>(layer - (m.cfg.n_layers - m.cfg.n_fusion))];
  }
}
LayerWeights& layer_of(ToyModel& m, Modality stack, int layer) {
  return const_cast<LayerWeights&>(layer_of(static_cast<const ToyModel&>(m), stack, layer));
}

Mat run_stack(const ToyModel& m, Modality stack, int first, int last, Mat h, int tokens, StackRun& run) {
  run.stack = stack;
  run.first_layer = first;
  run.caches.resize(static_cast<std::size_t>(last - first));
  for (int i = first; i < last; ++i)
    h = layer_forward(layer_of(m, stack, i), h, tokens, m.cfg.n_heads, run.caches[static_cast<std::size_t>(i - first)]);
  return h;
}

Mat back_stack(const ToyModel& m, const StackRun& run, Mat dh, int tokens, ToyModel& grads) {
  for (int j = static_cast<int>(run.caches.size()) - 1; j >= 0; --j) {
    const int layer = run.first_layer + j;
    dh = layer_backward(layer_of(m, run.stack, layer), run.caches[static_cast<std::size_t>(j)], dh, tokens,
                        m.cfg.n_heads, layer_of(grads, run.stack, layer));
  }
  return dh;
}

void head_tensors(const ToyModel& m, Route route, const Tensor*& w, const Tensor*& b) {
  switch (route) {
    case Route::unimodal_v: w = &m.head_v_w; b = &m.head_v_b; return;
    case Route::unimodal_l: w = &m.head_l_w; b = &m.head_l_b; return;
    case Route::fusion: w = &m.head_j_w; b = &m.head_j_b; return;
  }
}

void check_batch(const ToyModel& m, const TaskBatch& batch) {
  const std::size_t expect = batch.size * static_cast<std::size_t>(m.cfg.seq_len);
  const bool need_v = batch.route != Route::unimodal_l;
  const bool need_l = batch.route != Route::unimodal_v;
  if (batch.size == 0 || batch.labels.size() != batch.size || (need_v && batch.vision_tokens.size() != expect) ||
      (need_l && batch.language_tokens.size() != expect))
    throw DataError("batch does not match route '" + std::string(task_name(batch.route)) + "'");
}

// Runs the route; fills trace and returns the mean loss.
double route_forward(const ToyModel& m, const TaskBatch& batch, RouteTrace& tr) {
  check_batch(m, batch);
  const ToyConfig& cfg = m.cfg;
  const int T = cfg.seq_len;
  const int n = cfg.n_layers;
  const int lower = n - cfg.n_fusion;
  const auto B = static_cast<Eigen::Index>(batch.size);

  Mat h;
  switch (batch.route) {
    case Route::unimodal_v: {
      tr.h_v = embed(m.embed_v_token, m.embed_v_pos, batch.vision_tokens, T);
      tr.runs.resize(1);
      h = run_stack(m, Modality::vision, 0, n, tr.h_v, T, tr.runs[0]);
      tr.pool_tokens = T;
      break;
    }
    case Route::unimodal_l: {
      tr.h_l = embed(m.embed_l_token, m.embed_l_pos, batch.language_tokens, T);
      tr.runs.resize(1);
      h = run_stack(m, Modality::language, 0, n, tr.h_l, T, tr.runs[0]);
      tr.pool_tokens = T;
      break;
    }
    case Route::fusion: {
      tr.h_v = embed(m.embed_v_token, m.embed_v_pos, batch.vision_tokens, T);
      tr.h_l = embed(m.embed_l_token, m.embed_l_pos, batch.language_tokens, T);
      tr.runs.resize(3);
      const Mat hv = run_stack(m, Modality::vision, 0, lower, tr.h_v, T, tr.runs[0]);
      const Mat hl = run_stack(m, Modality::language, 0, lower, tr.h_l, T, tr.runs[1]);
      Mat joint(2 * B * T, hv.cols());
      for (Eigen::Index s = 0; s < B; ++s) {
        joint.middleRows(2 * s * T, T) = hv.middleRows(s * T, T);
        joint.middleRows((2 * s + 1) * T, T) = hl.middleRows(s * T, T);
      }
      h = run_stack(m, Modality::crossmodal, lower, n, joint, 2 * T, tr.runs[2]);
      tr.pool_tokens = 2 * T;
      break;
    }
  }
  tr.final_h = std::move(h);
  const int P = tr.pool_tokens;
  tr.pooled.resize(B, tr.final_h.cols());
  for (Eigen::Index s = 0; s < B; ++s) tr.pooled.row(s) = tr.final_h.middleRows(s * P, P).colwise().mean();

  const Tensor *hw = nullptr, *hb = nullptr;
  head_tensors(m, batch.route, hw, hb);
  const Mat logits = linear(tr.pooled, *hw, *hb);
  tr.probs.resize(B, kClasses);
  double loss = 0.0;
  for (Eigen::Index s = 0; s < B; ++s) {
    const double mx = logits.row(s).maxCoeff();
    const RowVec e = (logits.row(s).array() - mx).exp();
    const double z = e.sum();
    tr.probs.row(s) = e / z;
    loss -= (logits(s, batch.labels[static_cast<std::size_t>(s)]) - mx) - std::log(z);
  }
  loss /= static_cast<double>(B);
  if (!std::isfinite(loss)) throw DivergenceError("non-finite loss on route '" + std::string(task_name(batch.route)) + "'");
  return loss;
}

void capture_layer_inputs(const StackRun& run, std::vector<CapturedActivation>& out) {
  for (std::size_t j = 0; j < run.caches.size(); ++j) {
    const int layer = run.first_layer + static_cast<int>(j);
    const LayerCache& c = run.caches[j];
    auto push = [&](const char* suffix, const Mat& x) {
      out.push_back({run.stack, ActivationBatch{layer_name(layer, suffix), to_tensor(x)}});
    };
    push("attn.wq", c.a);
    push("attn.wk", c.a);
    push("attn.wv", c.a);
    push("attn.wo", c.o);
    push("ffn.w1", c.f);
    push("ffn.w2", c.g);
  }
}

}  // namespace

ForwardResult forward(const ToyModel& model, const TaskBatch& batch, bool capture) {
  RouteTrace tr;
  ForwardResult out;
  out.loss = route_forward(model, batch, tr);
  out.predictions.resize(batch.size);
  for (std::size_t s = 0; s < batch.size; ++s)
    out.predictions[s] = tr.probs(static_cast<Eigen::Index>(s), 1) > tr.probs(static_cast<Eigen::Index>(s), 0) ? 1 : 0;
  if (capture)
    for (const StackRun& run : tr.runs) capture_layer_inputs(run, out.activations);
  return out;
}

namespace {

double accumulate(const ToyModel& model, const TaskBatch& batch, double weight, ToyModel& grads, bool heads_only) {
  RouteTrace tr;
  const double loss = route_forward(model, batch, tr);
  const ToyConfig& cfg = model.cfg;
  const int T = cfg.seq_len;
  const auto B = static_cast<Eigen::Index>(batch.size);

  Mat dlogits = tr.probs;
  for (Eigen::Index s = 0; s < B; ++s) dlogits(s, batch.labels[static_cast<std::size_t>(s)]) -= 1.0;
  dlogits *= weight / static_cast<double>(B);

  const Tensor *hw = nullptr, *hb = nullptr;
  head_tensors(model, batch.route, hw, hb);
  Tensor *gw = nullptr, *gb = nullptr;
  head_tensors(grads, batch.route, const_cast<const Tensor*&>(gw), const_cast<const Tensor*&>(gb));
  const Mat dpooled = linear_backward(tr.pooled, dlogits, *hw, *gw, *gb);
  if (heads_only) return loss;

  const int P = tr.pool_tokens;
  Mat dh(tr.final_h.rows(), tr.final_h.cols());
  for (Eigen::Index s = 0; s < B; ++s)
    dh.middleRows(s * P, P).rowwise() = dpooled.row(s) / static_cast<double>(P);

  switch (batch.route) {
    case Route::unimodal_v: {
      const Mat de = back_stack(model, tr.runs[0], dh, T, grads);
      embed_backward(grads.embed_v_token, grads.embed_v_pos, batch.vision_tokens, T, de);
      break;
    }
    case Route::unimodal_l: {
      const Mat de = back_stack(model, tr.runs[0], dh, T, grads);
      embed_backward(grads.embed_l_token, grads.embed_l_pos, batch.language_tokens, T, de);
      break;
    }
    case Route::fusion: {
      const Mat djoint = back_stack(model, tr.runs[2], dh, 2 * T, grads);
      Mat dv(B * T, djoint.cols()), dl(B * T, djoint.cols());
      for (Eigen::Index s = 0; s < B; ++s) {
        dv.middleRows(s * T, T) = djoint.middleRows(2 * s * T, T);
        dl.middleRows(s * T, T) = djoint.middleRows((2 * s + 1) * T, T);
      }
      embed_backward(grads.embed_v_token, grads.embed_v_pos, batch.vision_tokens, T,
                     back_stack(model, tr.runs[0], dv, T, grads));
      embed_backward(grads.embed_l_token, grads.embed_l_pos, batch.language_tokens, T,
                     back_stack(model, tr.runs[1], dl, T, grads));
      break;
    }
  }
  return loss;
}

}  // namespace

double accumulate_gradient(const ToyModel& model, const TaskBatch& batch, double weight, ToyModel& grads) {
  return accumulate(model, batch, weight, grads, false);
}

namespace {

std::vector<Tensor LayerWeights::*> group_members(ParamGroup g) {
  std::vector<Tensor LayerWeights::*> out;
  for (const LayerField& f : kLayerFields) {
    ParamMeta meta{0, Modality::shared, f.kind, true, 0};
    if (param_group(layer_name(0, f.suffix), meta) == g) out.push_back(f.member);
  }
  return out;
}

}  // namespace

void tie_gradients(ToyModel& grads, const ShareMask& tied) {
  const int n = grads.cfg.n_layers;
  for (ParamGroup g : tied) {
    for (auto member : group_members(g)) {
      for (int i = 0; i < n; ++i) {
        std::vector<Tensor*> copies = {&(grads.vision[static_cast<std::size_t>(i)].*member),
                                       &(grads.language[static_cast<std::size_t>(i)].*member)};
        if (grads.cfg.routing().is_top(i)) copies.push_back(&(layer_of(grads, Modality::crossmodal, i).*member));
        std::vector<double> sum = copies.front()->values();
        for (std::size_t c = 1; c < copies.size(); ++c)
          for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += (*copies[c])[k];
        for (Tensor* t : copies) t->values() = sum;
      }
    }
  }
}

void apply_update(ToyModel& model, const ToyModel& grads, double lr) {
  auto ps = parameters(model);
  auto gs = parameters(grads);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& v = ps[i].tensor->values();
    const auto& g = gs[i].tensor->values();
    for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lr * g[k];
  }
}

ToyModel backward_step(const ToyModel& model, const TaskBatch& batch, double lr) {
  ToyModel grads = model.zeros_like();
  accumulate_gradient(model, batch, 1.0, grads);
  tie_gradients(grads, model.tied);
  ToyModel next = model;
  apply_update(next, grads, lr);
  return next;
}

std::size_t train_phase(ToyModel& model, const SyntheticTaskSet& tasks, std::size_t steps, TrainMode mode,
                        const TrainOptions& options) {
  const ShareMask all_groups = {ParamGroup::attention, ParamGroup::ffn, ParamGroup::layernorm};
  const ShareMask& tied = mode == TrainMode::seed_shared ? all_groups : model.tied;
  ToyModel grads = model.zeros_like();
  for (std::size_t step = 0; step < steps; ++step) {
    for (auto& p : parameters(grads)) std::fill(p.tensor->values().begin(), p.tensor->values().end(), 0.0);
    const std::uint64_t stream = mix_seed(options.stream_seed, options.first_step + step);
    for (Route r : kAllRoutes)
      accumulate(model, tasks.batch(r, stream, options.batch_size), tasks.loss_weight(r), grads, options.heads_only);
    if (!options.heads_only) tie_gradients(grads, tied);
    apply_update(model, grads, options.lr);
  }
  return steps;
}

std::map<std::string, double> evaluate(const ToyModel& model, const SyntheticTaskSet& tasks,
                                       const EvalOptions& options) {
  std::map<std::string, double> scores;
  for (Route r : kAllRoutes) {
    std::size_t correct = 0, seen = 0, chunk = 0;
    while (seen < options.samples) {
      const std::size_t n = std::min(options.batch_size, options.samples - seen);
      const TaskBatch batch = tasks.batch(r, mix_seed(options.seed, chunk++), n);
      const ForwardResult res = forward(model, batch);
      for (std::size_t i = 0; i < n; ++i) correct += res.predictions[i] == batch.labels[i] ? 1 : 0;
      seen += n;
    }
    scores[std::string(task_name(r))] = options.samples ? static_cast<double>(correct) / options.samples : 0.0;
  }
  return scores;
}

GramStore capture_grams(const ToyModel& model, const SyntheticTaskSet& tasks, Modality stack, std::size_t batches,
                        std::size_t batch_size, std::uint64_t seed) {
  Route route = Route::fusion;
  if (stack == Modality::vision) route = Route::unimodal_v;
  else if (stack == Modality::language) route = Route::unimodal_l;
  else if (stack != Modality::crossmodal) throw UsageError("grams are captured per vision/language/crossmodal stack");

  GramStore store(stack);
  for (std::size_t b = 0; b < batches; ++b) {
    const ForwardResult res = forward(model, tasks.batch(route, mix_seed(seed, b), batch_size), true);
    for (const CapturedActivation& act : res.activations)
      if (act.stack == stack) store.add(act.batch);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Checkpoint views

Checkpoint to_checkpoint(const ToyModel& model) {
  Checkpoint ckpt;
  for (const ParamRef& p : parameters(model)) ckpt.insert(p.name, *p.tensor, p.meta);
  return ckpt;
}

namespace {

void load_into(ToyModel& model, const Checkpoint& ckpt, bool prefer_local) {
  for (ParamRef& p : parameters(model)) {
    const Entry* e = prefer_local ? ckpt.find(p.local_name) : ckpt.find(p.name);
    if (!e) throw DataError("checkpoint is missing '" + (prefer_local ? p.local_name : p.name) + "'");
    if (e->tensor.shape() != p.tensor->shape())
      throw DataError("entry '" + p.name + "' has shape " + shape_string(e->tensor.shape()) + ", model expects " +
                      shape_string(p.tensor->shape()));
    *p.tensor = e->tensor;
  }
}

}  // namespace

ToyModel from_checkpoint(const ToyConfig& cfg, const Checkpoint& ckpt) {
  ToyModel model(cfg);
  const bool merged = ckpt.contains("layers.0.attn.wq");
  load_into(model, ckpt, merged);
  if (merged) model.tied = {ParamGroup::attention, ParamGroup::ffn, ParamGroup::layernorm};
  return model;
}

ToyModel from_merged(const ToyConfig& cfg, const Checkpoint& merged) {
  ToyModel model(cfg);
  load_into(model, merged, true);
  model.tied = {ParamGroup::attention, ParamGroup::ffn, ParamGroup::layernorm};
  return model;
}

Checkpoint route_checkpoint(const ToyModel& model, Modality stack) {
  Checkpoint ckpt;
  for (const ParamRef& p : parameters(model)) {
    if (p.layer_param) {
      if (p.meta.modality != stack) continue;
      ParamMeta meta = p.meta;
      if (model.tied.contains(param_group(p.local_name, meta))) meta.modality = Modality::shared;
      ckpt.insert(p.local_name, *p.tensor, meta);
    } else if (p.meta.modality == stack || (stack == Modality::crossmodal && p.name.starts_with("head.joint"))) {
      ckpt.insert(p.name, *p.tensor, p.meta);
    }
  }
  return ckpt;
}

Checkpoint init_checkpoint(const ToyModel& model) {
  Checkpoint ckpt;
  const Checkpoint vision = route_checkpoint(model, Modality::vision);
  for (const auto& [name, e] : vision.entries()) {
    if (!e.meta.mergeable) continue;
    ParamMeta meta = e.meta;
    meta.modality = Modality::init;
    ckpt.insert(name, e.tensor, meta);
  }
  return ckpt;
}

ToyConfig infer_config(const Checkpoint& ckpt, int n_heads) {
  ToyConfig cfg;
  const Tensor& tv = ckpt.at("embed.vision.token").tensor;
  const Tensor& tl = ckpt.at("embed.language.token").tensor;
  const Tensor& pv = ckpt.at("embed.vision.position").tensor;
  cfg.vocab_v = static_cast<int>(tv.rows());
  cfg.d_model = static_cast<int>(tv.cols());
  cfg.vocab_l = static_cast<int>(tl.rows());
  cfg.seq_len = static_cast<int>(pv.rows());
  cfg.n_heads = n_heads;
  int max_layer = -1;
  std::set<int> fusion;
  const Tensor* w1 = nullptr;
  for (const auto& [name, e] : ckpt.entries()) {
    if (!e.meta.layer_index) continue;
    max_layer = std::max(max_layer, *e.meta.layer_index);
    if (name.starts_with("crossmodal/")) fusion.insert(*e.meta.layer_index);
    if (!w1 && name.ends_with("ffn.w1")) w1 = &e.tensor;
  }
  if (max_layer < 0 || !w1) throw DataError("checkpoint has no transformer layers");
  cfg.n_layers = max_layer + 1;
  cfg.n_fusion = fusion.empty() ? std::min(1, cfg.n_layers) : static_cast<int>(fusion.size());
  cfg.ffn_mult = static_cast<int>(w1->cols()) / cfg.d_model;
  cfg.validate();
  return cfg;
}

}  // namespace modmerge
