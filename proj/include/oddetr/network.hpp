// SPDX-License-Identifier: Apache-2.0
//
// The desk-scale query-based detector. A stage maps (queries, anchors,
// feature grid) to (updated queries, boxes, class scores):
//
//   x   = q + pe(anchor)
//   q1  = LN(q + SelfAttn(x, x, q))
//   q2  = LN(q1 + CrossAttn(q1 + pe, F + pe_cell, bias(anchor, cell)))
//   q3  = LN(q2 + FFN(q2))
//   box = sigmoid(delta(q3) + logit(anchor)),  scores = sigmoid(cls(q3))
//
// Refined boxes become the next stage's anchors with the gradient stopped.
// All parameters live in one flat buffer; tensors are row-major views into it
// in declaration order.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oddetr/autodiff.hpp"
#include "oddetr/errors.hpp"
#include "oddetr/geometry.hpp"
#include "oddetr/matching.hpp"

namespace oddetr {

struct ModelConfig {
  int d_model = 32;
  int num_queries = 24;
  int num_stages = 3;
  int grid = 8;
  int num_classes = 5;
  int ffn_hidden = 64;
  bool share_decoder = false;
  double anchor_size = 0.2;
  double class_prior = 0.01;
  /// Strength of the anchor-to-cell distance bias in cross-attention.
  double attn_bias_scale = 2.0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Tensors of one decoder stage, in declaration order.
enum class StageTensor : int {
  pe1_w, pe1_b, pe2_w, pe2_b,
  sa_q, sa_k, sa_v, sa_o, ln1_g, ln1_b,
  ca_q, ca_k, ca_v, ca_o, ln2_g, ln2_b,
  ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln3_g, ln3_b,
  cls_w, cls_b, box_w1, box_b1, box_w2, box_b2,
  count
};
inline constexpr int kStageTensorCount = static_cast<int>(StageTensor::count);

enum class InitKind { uniform, zeros, ones, constant };

struct TensorSpec {
  std::string name;
  int rows = 0, cols = 0;
  std::size_t offset = 0;
  InitKind init = InitKind::uniform;
  double init_value = 0;  ///< bound for uniform, value for constant

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  friend bool operator==(const TensorSpec&, const TensorSpec&) = default;
};

class ParamLayout {
 public:
  static ParamLayout build(const ModelConfig& cfg) {
    ParamLayout l;
    const int d = cfg.d_model;
    const double wd = 1.0 / std::sqrt(static_cast<double>(d));
    l.query_embed_ = l.add("query_embed", cfg.num_queries, d, InitKind::uniform, 1.0);
    l.cell_w_ = l.add("cell_pe.w", 2, d, InitKind::uniform, 1.0 / std::sqrt(2.0));
    l.cell_b_ = l.add("cell_pe.b", 1, d, InitKind::zeros);
    const std::size_t decoder_begin = l.size_;
    const int blocks = cfg.share_decoder ? 1 : cfg.num_stages;
    std::vector<std::array<int, kStageTensorCount>> block_ids;
    const double prior_bias = -std::log((1.0 - cfg.class_prior) / cfg.class_prior);
    for (int b = 0; b < blocks; ++b) {
      const std::string p = cfg.share_decoder ? "dec." : "dec" + std::to_string(b) + ".";
      std::array<int, kStageTensorCount> ids{};
      auto set = [&](StageTensor t, int id) { ids[static_cast<std::size_t>(t)] = id; };
      set(StageTensor::pe1_w, l.add(p + "pe1.w", 4, d, InitKind::uniform, 0.5));
      set(StageTensor::pe1_b, l.add(p + "pe1.b", 1, d, InitKind::zeros));
      set(StageTensor::pe2_w, l.add(p + "pe2.w", d, d, InitKind::uniform, wd));
      set(StageTensor::pe2_b, l.add(p + "pe2.b", 1, d, InitKind::zeros));
      set(StageTensor::sa_q, l.add(p + "self_attn.q", d, d, InitKind::uniform, wd));
      set(StageTensor::sa_k, l.add(p + "self_attn.k", d, d, InitKind::uniform, wd));
      set(StageTensor::sa_v, l.add(p + "self_attn.v", d, d, InitKind::uniform, wd));
      set(StageTensor::sa_o, l.add(p + "self_attn.o", d, d, InitKind::uniform, wd));
      set(StageTensor::ln1_g, l.add(p + "ln1.g", 1, d, InitKind::ones));
      set(StageTensor::ln1_b, l.add(p + "ln1.b", 1, d, InitKind::zeros));
      set(StageTensor::ca_q, l.add(p + "cross_attn.q", d, d, InitKind::uniform, wd));
      set(StageTensor::ca_k, l.add(p + "cross_attn.k", d, d, InitKind::uniform, wd));
      set(StageTensor::ca_v, l.add(p + "cross_attn.v", d, d, InitKind::uniform, wd));
      set(StageTensor::ca_o, l.add(p + "cross_attn.o", d, d, InitKind::uniform, wd));
      set(StageTensor::ln2_g, l.add(p + "ln2.g", 1, d, InitKind::ones));
      set(StageTensor::ln2_b, l.add(p + "ln2.b", 1, d, InitKind::zeros));
      set(StageTensor::ffn_w1, l.add(p + "ffn.w1", d, cfg.ffn_hidden, InitKind::uniform, wd));
      set(StageTensor::ffn_b1, l.add(p + "ffn.b1", 1, cfg.ffn_hidden, InitKind::zeros));
      set(StageTensor::ffn_w2, l.add(p + "ffn.w2", cfg.ffn_hidden, d, InitKind::uniform,
                                     1.0 / std::sqrt(static_cast<double>(cfg.ffn_hidden))));
      set(StageTensor::ffn_b2, l.add(p + "ffn.b2", 1, d, InitKind::zeros));
      set(StageTensor::ln3_g, l.add(p + "ln3.g", 1, d, InitKind::ones));
      set(StageTensor::ln3_b, l.add(p + "ln3.b", 1, d, InitKind::zeros));
      set(StageTensor::cls_w, l.add(p + "cls.w", d, cfg.num_classes, InitKind::uniform, wd));
      set(StageTensor::cls_b, l.add(p + "cls.b", 1, cfg.num_classes, InitKind::constant, prior_bias));
      set(StageTensor::box_w1, l.add(p + "box.w1", d, d, InitKind::uniform, wd));
      set(StageTensor::box_b1, l.add(p + "box.b1", 1, d, InitKind::zeros));
      set(StageTensor::box_w2, l.add(p + "box.w2", d, 4, InitKind::uniform, wd));
      set(StageTensor::box_b2, l.add(p + "box.b2", 1, 4, InitKind::zeros));
      block_ids.push_back(ids);
      if (b == 0) l.block_size_ = l.size_ - decoder_begin;
    }
    for (int s = 0; s < cfg.num_stages; ++s)
      l.stages_.push_back(block_ids[static_cast<std::size_t>(cfg.share_decoder ? 0 : s)]);
    l.decoder_size_ = l.size_ - decoder_begin;
    return l;
  }

  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  const TensorSpec& tensor(int id) const { return tensors_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return size_; }
  /// Parameter count of one decoder stage.
  std::size_t stage_block_size() const { return block_size_; }
  /// Parameter count of the whole decoder (all distinct stage blocks).
  std::size_t decoder_size() const { return decoder_size_; }

  int query_embed() const { return query_embed_; }
  int cell_w() const { return cell_w_; }
  int cell_b() const { return cell_b_; }
  int stage_tensor(int stage, StageTensor t) const {
    return stages_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(t)];
  }

  friend bool operator==(const ParamLayout& a, const ParamLayout& b) { return a.tensors_ == b.tensors_; }

 private:
  int add(std::string name, int rows, int cols, InitKind init, double value = 0) {
    TensorSpec spec{std::move(name), rows, cols, size_, init, value};
    size_ += spec.size();
    tensors_.push_back(std::move(spec));
    return static_cast<int>(tensors_.size()) - 1;
  }

  std::vector<TensorSpec> tensors_;
  std::vector<std::array<int, kStageTensorCount>> stages_;
  std::size_t size_ = 0, block_size_ = 0, decoder_size_ = 0;
  int query_embed_ = -1, cell_w_ = -1, cell_b_ = -1;
};

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using TensorView = Eigen::Map<RowMajorMatrix>;
using ConstTensorView = Eigen::Map<const RowMajorMatrix>;

/// Flat parameter buffer plus its layout.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(const ModelConfig& cfg)
      : config_(cfg), layout_(std::make_shared<const ParamLayout>(ParamLayout::build(cfg))),
        data_(layout_->size(), 0.0) {}

  /// Seeded initialization: uniform weights scaled by 1/sqrt(fan_in).
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams m(cfg);
    std::mt19937_64 rng(seed);
    for (const auto& t : m.layout_->tensors()) {
      auto span = std::span<double>(m.data_).subspan(t.offset, t.size());
      switch (t.init) {
        case InitKind::uniform: {
          std::uniform_real_distribution<double> u(-t.init_value, t.init_value);
          for (double& x : span) x = u(rng);
          break;
        }
        case InitKind::zeros: std::fill(span.begin(), span.end(), 0.0); break;
        case InitKind::ones: std::fill(span.begin(), span.end(), 1.0); break;
        case InitKind::constant: std::fill(span.begin(), span.end(), t.init_value); break;
      }
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return *layout_; }
  std::size_t size() const { return data_.size(); }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  TensorView tensor(int id) {
    const auto& t = layout_->tensor(id);
    return TensorView(data_.data() + t.offset, t.rows, t.cols);
  }
  ConstTensorView tensor(int id) const {
    const auto& t = layout_->tensor(id);
    return ConstTensorView(data_.data() + t.offset, t.rows, t.cols);
  }

  bool same_layout(const ModelParams& other) const {
    return layout_ && other.layout_ && *layout_ == *other.layout_;
  }

 private:
  ModelConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> data_;
};

/// Query embeddings (N x d) and their anchor boxes (N x 4, center form).
struct QuerySet {
  Eigen::MatrixXd embeddings;
  Eigen::MatrixXd anchors;

  int size() const { return static_cast<int>(embeddings.rows()); }
};

/// G x G feature cells (G^2 x d, row-major cell order) with cell centers.
struct FeatureGrid {
  int grid = 0;
  Eigen::MatrixXd cells;
  Eigen::MatrixXd centers;  ///< G^2 x 2

  static Eigen::MatrixXd cell_centers(int g) {
    Eigen::MatrixXd c(g * g, 2);
    for (int r = 0; r < g; ++r)
      for (int k = 0; k < g; ++k) c.row(r * g + k) << (k + 0.5) / g, (r + 0.5) / g;
    return c;
  }
};

struct StageOutput {
  QuerySet queries;  ///< updated embeddings; anchors = this stage's boxes
  PredictionSet predictions;
};

/// Anchors on a uniform grid covering the image.
inline Eigen::MatrixXd grid_anchors(int n, double size) {
  const int rows = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(n)))));
  const int cols = (n + rows - 1) / rows;
  Eigen::MatrixXd a(n, 4);
  for (int i = 0; i < n; ++i) {
    const int r = i / cols, c = i % cols;
    a.row(i) << (c + 0.5) / cols, (r + 0.5) / rows, size, size;
  }
  return a;
}

inline QuerySet initial_queries(const ModelParams& m) {
  const auto& cfg = m.config();
  return QuerySet{Eigen::MatrixXd(m.tensor(m.layout().query_embed())),
                  grid_anchors(cfg.num_queries, cfg.anchor_size)};
}

/// Binds a ModelParams to a tape. Trainable bindings create gradient leaves;
/// frozen bindings (the teacher) create constants.
class ParamBinding {
 public:
  ParamBinding(ad::Tape& tape, const ModelParams& params, bool trainable)
      : tape_(tape), params_(params), trainable_(trainable && tape.grad_enabled()) {}

  ad::Tape& tape() const { return tape_; }
  const ModelParams& params() const { return params_; }
  bool trainable() const { return trainable_; }

  ad::Var tensor(int id) {
    auto it = leaves_.find(id);
    if (it != leaves_.end()) return it->second;
    ad::Matrix value = params_.tensor(id);
    ad::Var v = trainable_ ? tape_.leaf(std::move(value)) : tape_.constant(std::move(value));
    leaves_.emplace(id, v);
    return v;
  }

  ad::Var stage(int s, StageTensor t) { return tensor(params_.layout().stage_tensor(s, t)); }

  /// Adds the accumulated leaf gradients into a flat buffer aligned with the
  /// parameters.
  void accumulate_gradients(std::span<double> out) const {
    if (out.size() != params_.size()) throw std::invalid_argument("gradient buffer size mismatch");
    for (const auto& [id, var] : leaves_) {
      const auto& g = tape_.grad(var);
      if (g.size() == 0) continue;
      const auto& t = params_.layout().tensor(id);
      TensorView view(out.data() + t.offset, t.rows, t.cols);
      view += g;
    }
  }

  std::vector<double> gradients() const {
    std::vector<double> g(params_.size(), 0.0);
    accumulate_gradients(g);
    return g;
  }

 private:
  ad::Tape& tape_;
  const ModelParams& params_;
  bool trainable_;
  std::map<int, ad::Var> leaves_;
};

/// One stage's graph outputs.
struct StageVars {
  ad::Var queries;
  ad::Var scores;
  ad::Var boxes;
  ad::Matrix anchors_in;
};

namespace detail {

inline ad::Matrix inverse_sigmoid(const ad::Matrix& x) {
  const auto c = x.array().min(1.0 - 1e-4).max(1e-4);
  return (c / (1.0 - c)).log().matrix();
}

inline ad::Matrix anchor_cell_bias(const ad::Matrix& anchors, const ad::Matrix& centers, double k) {
  ad::Matrix bias(anchors.rows(), centers.rows());
  for (Eigen::Index i = 0; i < anchors.rows(); ++i) {
    const double cx = anchors(i, 0), cy = anchors(i, 1);
    const double w = std::max(anchors(i, 2), 1e-3), h = std::max(anchors(i, 3), 1e-3);
    for (Eigen::Index j = 0; j < centers.rows(); ++j) {
      const double dx = (centers(j, 0) - cx) / w, dy = (centers(j, 1) - cy) / h;
      bias(i, j) = -k * (dx * dx + dy * dy);
    }
  }
  return bias;
}

inline void check_finite(const ad::Matrix& m, int stage, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (!m.row(i).allFinite())
      throw NumericalError("non-finite " + std::string(what) + " at stage " + std::to_string(stage) + ", query " +
                           std::to_string(i));
}

}  // namespace detail

/// Per-forward cache of feature projections (shared across stages that alias
/// one parameter block).
class FeatureContext {
 public:
  FeatureContext(ParamBinding& bind, const FeatureGrid& f) : bind_(bind), grid_(f) {
    ad::Tape& t = bind.tape();
    const auto& lay = bind.params().layout();
    ad::Var cells = t.constant(f.cells);
    ad::Var centers = t.constant(f.centers);
    ad::Var pe = add_row(matmul(centers, bind.tensor(lay.cell_w())), bind.tensor(lay.cell_b()));
    memory_ = add(cells, pe);
  }

  const FeatureGrid& grid() const { return grid_; }

  ad::Var keys(int stage) { return project(stage, StageTensor::ca_k, keys_); }
  ad::Var values(int stage) { return project(stage, StageTensor::ca_v, values_); }

 private:
  ad::Var project(int stage, StageTensor which, std::map<int, ad::Var>& cache) {
    const int id = bind_.params().layout().stage_tensor(stage, which);
    auto it = cache.find(id);
    if (it != cache.end()) return it->second;
    ad::Var v = matmul(memory_, bind_.tensor(id));
    cache.emplace(id, v);
    return v;
  }

  ParamBinding& bind_;
  const FeatureGrid& grid_;
  ad::Var memory_;
  std::map<int, ad::Var> keys_, values_;
};

/// Builds one decoder stage on the tape.
inline StageVars decode_stage_graph(ParamBinding& bind, FeatureContext& ctx, int stage, const ad::Var& q,
                                    const ad::Matrix& anchors) {
  ad::Tape& t = bind.tape();
  const auto& cfg = bind.params().config();
  auto P = [&](StageTensor which) { return bind.stage(stage, which); };
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

  ad::Var anchor_in = t.constant(anchors);
  ad::Var pe = add_row(matmul(relu(add_row(matmul(anchor_in, P(StageTensor::pe1_w)), P(StageTensor::pe1_b))),
                              P(StageTensor::pe2_w)),
                       P(StageTensor::pe2_b));

  // self-attention
  ad::Var x = add(q, pe);
  ad::Var sq = matmul(x, P(StageTensor::sa_q));
  ad::Var sk = matmul(x, P(StageTensor::sa_k));
  ad::Var sv = matmul(q, P(StageTensor::sa_v));
  const ad::Matrix no_bias = ad::Matrix::Zero(q.value().rows(), q.value().rows());
  ad::Var sa = softmax_rows(scale(matmul_nt(sq, sk), inv_sqrt_d), no_bias);
  ad::Var q1 = layer_norm_rows(add(q, matmul(matmul(sa, sv), P(StageTensor::sa_o))), P(StageTensor::ln1_g),
                               P(StageTensor::ln1_b));

  // cross-attention over all cells with an anchor-distance prior
  ad::Var cq = matmul(add(q1, pe), P(StageTensor::ca_q));
  const ad::Matrix bias = detail::anchor_cell_bias(anchors, ctx.grid().centers, cfg.attn_bias_scale);
  ad::Var ca = softmax_rows(scale(matmul_nt(cq, ctx.keys(stage)), inv_sqrt_d), bias);
  ad::Var q2 = layer_norm_rows(add(q1, matmul(matmul(ca, ctx.values(stage)), P(StageTensor::ca_o))),
                               P(StageTensor::ln2_g), P(StageTensor::ln2_b));

  // feed-forward
  ad::Var h = relu(add_row(matmul(q2, P(StageTensor::ffn_w1)), P(StageTensor::ffn_b1)));
  ad::Var q3 = layer_norm_rows(add(q2, add_row(matmul(h, P(StageTensor::ffn_w2)), P(StageTensor::ffn_b2))),
                               P(StageTensor::ln3_g), P(StageTensor::ln3_b));

  // heads
  ad::Var scores = sigmoid(add_row(matmul(q3, P(StageTensor::cls_w)), P(StageTensor::cls_b)));
  ad::Var hb = relu(add_row(matmul(q3, P(StageTensor::box_w1)), P(StageTensor::box_b1)));
  ad::Var delta = add_row(matmul(hb, P(StageTensor::box_w2)), P(StageTensor::box_b2));
  ad::Var boxes = sigmoid(add(delta, t.constant(detail::inverse_sigmoid(anchors))));

  detail::check_finite(scores.value(), stage, "class score");
  detail::check_finite(boxes.value(), stage, "box");
  return StageVars{q3, scores, boxes, anchors};
}

/// Chains all decoder stages. Each stage's boxes feed the next stage as
/// detached anchors.
inline std::vector<StageVars> decode_graph(ParamBinding& bind, const FeatureGrid& f, const ad::Var& q0,
                                           const ad::Matrix& anchors0) {
  const int stages = bind.params().config().num_stages;
  if (stages < 1) throw std::invalid_argument("decoder needs at least one stage");
  FeatureContext ctx(bind, f);
  std::vector<StageVars> out;
  out.reserve(static_cast<std::size_t>(stages));
  ad::Var q = q0;
  ad::Matrix anchors = anchors0;
  for (int s = 0; s < stages; ++s) {
    StageVars sv = decode_stage_graph(bind, ctx, s, q, anchors);
    q = sv.queries;
    if (s + 1 < stages) anchors = bind.tape().detach(sv.boxes).value();
    out.push_back(std::move(sv));
  }
  return out;
}

inline StageOutput to_stage_output(const StageVars& sv) {
  StageOutput o;
  o.queries.embeddings = sv.queries.value();
  o.queries.anchors = sv.boxes.value();
  o.predictions.scores = sv.scores.value();
  o.predictions.boxes = sv.boxes.value();
  return o;
}

/// Value-only forward of the full decoder stack.
inline std::vector<StageOutput> forward(const ModelParams& m, const QuerySet& q0, const FeatureGrid& f) {
  ad::Tape tape(false);
  ParamBinding bind(tape, m, false);
  auto vars = decode_graph(bind, f, tape.constant(q0.embeddings), q0.anchors);
  std::vector<StageOutput> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(to_stage_output(v));
  return out;
}

/// Value-only single stage.
inline StageOutput decode_stage(const ModelParams& m, int stage, const QuerySet& q, const FeatureGrid& f) {
  ad::Tape tape(false);
  ParamBinding bind(tape, m, false);
  FeatureContext ctx(bind, f);
  return to_stage_output(decode_stage_graph(bind, ctx, stage, tape.constant(q.embeddings), q.anchors));
}

/// Inference: final-stage predictions of the main query group.
inline PredictionSet predict(const ModelParams& m, const FeatureGrid& f) {
  return forward(m, initial_queries(m), f).back().predictions;
}

}  // namespace oddetr
