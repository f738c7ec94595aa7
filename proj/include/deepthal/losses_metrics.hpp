#pragma once

#include "deepthal/nn/autograd.hpp"
#include "deepthal/volumes.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace deepthal {

/// Per-label GDL weights; index 0 (background) is unused by the GDL.
struct LabelWeights {
  std::vector<double> w;

  int labels() const { return int(w.size()) - 1; }
};

/// w_l = 1 / (mean voxel count of label l over the training cases).
LabelWeights label_weights_from_training(const std::vector<const LabelMap*>& cases);

/// One-hot (C = schema.max_id() + 1 channels) encoding of a label map.
template <typename Scalar>
nn::Tensor<Scalar> one_hot(const LabelMap& labels, int channels = -1) {
  const int c = channels < 0 ? labels.schema.max_id() + 1 : channels;
  nn::Tensor<Scalar> t(nn::Shape{c, labels.dims[0], labels.dims[1], labels.dims[2]});
  for (Eigen::Index i = 0; i < labels.data.size(); ++i) {
    const int l = labels.data(i);
    if (l >= c) throw DataError("one_hot: label " + std::to_string(l) + " exceeds channel count");
    t.data(l, i) = Scalar(1);
  }
  return t;
}

/// Hard labels from per-voxel probabilities (lowest channel wins ties).
template <typename Scalar>
LabelMap argmax_labels(const nn::Tensor<Scalar>& p, const Volume3D& like, const LabelSchema& schema) {
  LabelMap out(like.template like<std::uint8_t>(like.dims), schema);
  if (p.shape.x != like.dims[0] || p.shape.y != like.dims[1] || p.shape.z != like.dims[2])
    throw DataError("argmax_labels: probability grid does not match reference geometry");
  for (Eigen::Index v = 0; v < p.data.cols(); ++v) {
    Eigen::Index best;
    p.data.col(v).maxCoeff(&best);
    out.data(v) = std::uint8_t(best);
  }
  return out;
}

namespace detail {

inline void check_prob_shapes(const nn::Shape& y, const nn::Shape& p, const LabelWeights& w) {
  if (!(y == p)) throw DataError("loss: shape mismatch " + y.str() + " vs " + p.str());
  if (w.labels() != y.c - 1)
    throw DataError("loss: " + std::to_string(w.labels()) + " weights for " + std::to_string(y.c - 1) + " labels");
}

struct GdlTerms {
  double a = 0;  // sum_l w_l sum_x y p
  double b = 0;  // sum_l w_l sum_x (y + p)
};

template <typename Scalar>
GdlTerms gdl_terms(const nn::RowMatrix<Scalar>& y, const nn::RowMatrix<Scalar>& p, const LabelWeights& w) {
  // Three accumulators of identical form, so y == p gives b == 2a exactly.
  double a = 0, by = 0, bp = 0;
  for (Eigen::Index l = 1; l < y.rows(); ++l) {
    const double wl = w.w[std::size_t(l)];
    a += wl * (y.row(l).template cast<double>().array() * p.row(l).template cast<double>().array()).sum();
    by += wl * y.row(l).template cast<double>().sum();
    bp += wl * p.row(l).template cast<double>().sum();
  }
  return {a, by + bp};
}

}  // namespace detail

/// GDL = 1 - 2 sum_l w_l sum_x y p / sum_l w_l sum_x (y + p), background excluded.
template <typename Scalar>
double gdl(const nn::Tensor<Scalar>& y, const nn::Tensor<Scalar>& p, const LabelWeights& w) {
  detail::check_prob_shapes(y.shape, p.shape, w);
  const auto t = detail::gdl_terms(y.data, p.data, w);
  if (t.b <= 0) return 0.0;
  return 1.0 - 2.0 * t.a / t.b;
}

/// Mean binary cross entropy over voxels and channels, p clamped to [eps, 1 - eps].
template <typename Scalar>
double bce(const nn::Tensor<Scalar>& y, const nn::Tensor<Scalar>& p, double eps = 1e-7) {
  if (!(y.shape == p.shape)) throw DataError("bce: shape mismatch");
  const auto yd = y.data.template cast<double>().array();
  const auto pc = p.data.template cast<double>().array().max(eps).min(1.0 - eps);
  return -(yd * pc.log() + (1.0 - yd) * (1.0 - pc).log()).mean();
}

/// log(GDL + BCE + eps).
template <typename Scalar>
double composite_loss(const nn::Tensor<Scalar>& y, const nn::Tensor<Scalar>& p, const LabelWeights& w,
                      double eps = 1e-7) {
  return std::log(gdl(y, p, w) + bce(y, p, eps) + eps);
}

/// Differentiable composite loss of predicted probabilities `p` against one-hot `y`.
template <typename Scalar>
nn::Var<Scalar> composite_loss(const nn::Var<Scalar>& p, const nn::Tensor<Scalar>& y, const LabelWeights& w,
                               double eps = 1e-7) {
  detail::check_prob_shapes(y.shape, p->value.shape, w);
  const double g = gdl(y, p->value, w);
  const double b = bce(y, p->value, eps);
  const double total = g + b + eps;
  const double value = std::log(total);
  return nn::make_node<Scalar>(
      nn::Tensor<Scalar>::constant({1, 1, 1, 1}, Scalar(value)), {p}, [y, w, eps, total](nn::Node<Scalar>& n) {
        auto& pin = n.parents[0];
        const auto& P = pin->value.data;
        const auto t = detail::gdl_terms(y.data, P, w);
        const double scale = double(n.grad.data(0, 0)) / total;
        const double count = double(P.size());
        auto& G = pin->ensure_grad().data;
        for (Eigen::Index l = 0; l < P.rows(); ++l) {
          const double wl = l == 0 ? 0.0 : w.w[std::size_t(l)];
          for (Eigen::Index v = 0; v < P.cols(); ++v) {
            const double yv = double(y.data(l, v));
            const double pv = double(P(l, v));
            double d = 0;
            if (t.b > 0 && wl != 0) d += -2.0 * wl * (yv * t.b - t.a) / (t.b * t.b);
            if (pv > eps && pv < 1.0 - eps) d += -(yv / pv - (1.0 - yv) / (1.0 - pv)) / count;
            G(l, v) += Scalar(scale * d);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Dice.

/// 2|A ∩ B| / (|A| + |B|) for one label; empty-vs-empty is 1.
double dice(const LabelMap& a, const LabelMap& b, int label);

struct DiceReport {
  std::vector<int> ids;
  std::vector<std::string> names;
  std::vector<double> per_label;
  double mean = 0.0;           // unweighted mean over the schema's structures
  double whole_thalamus = 0.0;  // union of all structures vs union
};

DiceReport dice_report(const LabelMap& a, const LabelMap& b);

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test.

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-)
  double p_value = 1.0;    // two-sided
  int n = 0;               // non-zero differences used
  bool exact = false;
};

/// Two-sided paired test; exact null distribution for n <= 20 (with mid-ranks
/// for ties), normal approximation with tie correction above.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace deepthal
