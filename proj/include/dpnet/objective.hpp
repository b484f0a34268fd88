#pragma once

// Training objective: cross-entropy plus three weighted penalties,
//
//   total = cce + lambda1 * orth(U) + lambda2 * assign(U, X) + lambda3 * cs(V)
//
// with hand-derived gradients for U and V.
//
// orth is the mean squared off-diagonal cosine between parts, taken with a
// positive sign so that minimizing it decorrelates parts. assign is the
// column entropy of softmax(U_hat * X). cs charges classifier weight placed
// outside a class's own block of q parts. orth and assign only see the
// row-normalized parts U_hat; their gradients flow back through the
// normalization.

#include <cmath>
#include <cstdint>
#include <string>

#include "dpnet/errors.hpp"
#include "dpnet/numerics.hpp"
#include "dpnet/part_model.hpp"

namespace dpnet {

enum class CsMode { kL1Abs, kRawSum };

inline std::string to_string(CsMode mode) { return mode == CsMode::kL1Abs ? "l1_abs" : "raw_sum"; }

inline CsMode parse_cs_mode(const std::string& s) {
  if (s == "l1_abs") return CsMode::kL1Abs;
  if (s == "raw_sum") return CsMode::kRawSum;
  throw ConfigError("cs_mode: expected 'l1_abs' or 'raw_sum', got '" + s + "'");
}

struct LossWeights {
  double lambda1 = 1e-2;  // orthogonality
  double lambda2 = 1e-3;  // assignment entropy
  double lambda3 = 1e-3;  // class-specific
  bool enable_orth = true;
  bool enable_assign = true;
  bool enable_cs = true;
  CsMode cs_mode = CsMode::kL1Abs;
  bool assign_normalized_by_R = false;

  static LossWeights none() {
    LossWeights w;
    w.enable_orth = w.enable_assign = w.enable_cs = false;
    return w;
  }
};

inline void validate(const LossWeights& w) {
  if (!(w.lambda1 >= 0.0 && w.lambda2 >= 0.0 && w.lambda3 >= 0.0)) {
    throw ConfigError("loss weights: every lambda must be >= 0");
  }
}

struct CceResult {
  double value = 0.0;
  Vec dlogits;  // o - onehot(y)
};

inline CceResult cce(std::span<const double> o, std::size_t label) {
  if (label >= o.size()) {
    throw ContractError("cce: label " + std::to_string(label) + " out of range for " +
                        std::to_string(o.size()) + " classes");
  }
  CceResult out;
  out.value = -std::log(o[label]);
  out.dlogits.assign(o.begin(), o.end());
  out.dlogits[label] -= 1.0;
  return out;
}

struct PenaltyResult {
  double value = 0.0;
  Mat grad;
};

namespace detail {

/// Pulls a gradient w.r.t. normalized rows back to the raw rows.
inline Mat backprop_row_normalization(const Mat& normalized, const Vec& norms, const Mat& grad_normalized) {
  Mat out = grad_normalized;
  for (std::size_t i = 0; i < normalized.rows(); ++i) {
    if (norms[i] <= kNormEps) continue;
    const double proj = dot(normalized.row(i), grad_normalized.row(i));
    auto u = normalized.row(i);
    auto g = out.row(i);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = (g[k] - u[k] * proj) / norms[i];
  }
  return out;
}

}  // namespace detail

/// (1/P^2) * sum_{i != j} (u_hat_i . u_hat_j)^2
inline PenaltyResult orth_penalty(const Mat& u) {
  if (u.rows() < 1) throw ContractError("orth_penalty: no parts");
  const std::size_t parts = u.rows();
  Vec norms;
  const Mat uh = normalize_rows(u, &norms);
  const double scale = 1.0 / (static_cast<double>(parts) * static_cast<double>(parts));
  PenaltyResult out;
  Mat grad_uh(parts, u.cols());
  for (std::size_t i = 0; i < parts; ++i) {
    auto gi = grad_uh.row(i);
    for (std::size_t j = 0; j < parts; ++j) {
      if (i == j) continue;
      const double g = dot(uh.row(i), uh.row(j));
      out.value += g * g;
      auto uj = uh.row(j);
      for (std::size_t k = 0; k < gi.size(); ++k) gi[k] += 4.0 * scale * g * uj[k];
    }
  }
  out.value *= scale;
  out.grad = detail::backprop_row_normalization(uh, norms, grad_uh);
  return out;
}

/// -sum_r sum_p s_hat ln s_hat, with S_hat = column_softmax(U_hat * X); 0 ln 0 := 0.
inline PenaltyResult assign_penalty(const Mat& u, const Mat& x, bool normalized_by_r = false) {
  if (u.cols() != x.rows()) {
    throw ContractError("assign_penalty: parts " + u.shape() + " vs descriptors " + x.shape());
  }
  Vec norms;
  const Mat uh = normalize_rows(u, &norms);
  const Mat sh = column_softmax(matmul(uh, x));
  const std::size_t parts = sh.rows();
  const std::size_t regions = sh.cols();
  const double scale = normalized_by_r ? 1.0 / static_cast<double>(regions) : 1.0;

  PenaltyResult out;
  Mat dz(parts, regions);
  for (std::size_t r = 0; r < regions; ++r) {
    double entropy = 0.0;
    for (std::size_t p = 0; p < parts; ++p) {
      const double s = sh(p, r);
      if (s > 0.0) entropy -= s * std::log(s);
    }
    out.value += entropy;
    // dH/dz_p = -s_p (ln s_p + H)
    for (std::size_t p = 0; p < parts; ++p) {
      const double s = sh(p, r);
      dz(p, r) = s > 0.0 ? -scale * s * (std::log(s) + entropy) : 0.0;
    }
  }
  out.value *= scale;

  // dU_hat = dZ * X^T
  Mat grad_uh(parts, u.cols());
  for (std::size_t p = 0; p < parts; ++p) {
    for (std::size_t d = 0; d < u.cols(); ++d) {
      double acc = 0.0;
      for (std::size_t r = 0; r < regions; ++r) acc += dz(p, r) * x(d, r);
      grad_uh(p, d) = acc;
    }
  }
  out.grad = detail::backprop_row_normalization(uh, norms, grad_uh);
  return out;
}

/// Off-block classifier mass scaled by 1/(P(C-1)); block of class c is [q c, q (c+1)).
/// With a single class there are no off-block entries and the penalty is 0.
inline PenaltyResult cs_penalty(const Mat& v, std::uint32_t q, CsMode mode = CsMode::kL1Abs) {
  const std::size_t classes = v.rows();
  const std::size_t parts = v.cols();
  if (q == 0 || parts != std::size_t{q} * classes) {
    throw ContractError("cs_penalty: " + std::to_string(parts) + " parts do not split into " +
                        std::to_string(classes) + " blocks of " + std::to_string(q));
  }
  PenaltyResult out;
  out.grad = Mat(classes, parts);
  if (classes < 2) return out;
  const double scale = 1.0 / (static_cast<double>(parts) * static_cast<double>(classes - 1));
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t p = 0; p < parts; ++p) {
      if (p / q == c) continue;
      const double w = v(c, p);
      if (mode == CsMode::kL1Abs) {
        out.value += std::abs(w);
        out.grad(c, p) = scale * static_cast<double>((w > 0.0) - (w < 0.0));
      } else {
        out.value += w;
        out.grad(c, p) = scale;
      }
    }
  }
  out.value *= scale;
  return out;
}

struct ClassificationGrad {
  Mat du;
  Mat dv;
};

/// Backpropagates dL/dlogits through V, the L2 normalization, the max-pool
/// (full credit to the recorded argmax region) and the score layer.
inline ClassificationGrad backprop_classification(const PartModel& model, const Mat& x, const ForwardTrace& t,
                                                  std::span<const double> dlogits) {
  const std::size_t classes = model.num_classes();
  const std::size_t parts = model.num_parts();
  ClassificationGrad g{Mat(parts, model.descriptor_dim()), Mat(classes, parts)};
  Vec db(parts, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t p = 0; p < parts; ++p) {
      g.dv(c, p) = dlogits[c] * t.b[p];
      db[p] += model.v(c, p) * dlogits[c];
    }
  }
  const double n = norm2(t.b_raw);
  Vec db_raw = db;
  if (n > kNormEps) {
    const double proj = dot(t.b, db);
    for (std::size_t p = 0; p < parts; ++p) db_raw[p] = (db[p] - t.b[p] * proj) / n;
  }
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t r = t.argmax_r[p];
    auto row = g.du.row(p);
    for (std::size_t d = 0; d < row.size(); ++d) row[d] = db_raw[p] * x(d, r);
  }
  return g;
}

/// Per-term values (unweighted) and gradients for one image.
struct LossBreakdown {
  double cce = 0.0;
  double orth = 0.0;
  double assign = 0.0;
  double cs = 0.0;
  double total = 0.0;

  Mat cce_du, cce_dv;
  Mat orth_du;
  Mat assign_du;
  Mat cs_dv;

  Mat du;  // gradient of total
  Mat dv;
};

/// Image-dependent terms: cce and assign.
struct ImageTerms {
  ForwardTrace trace;
  double cce = 0.0;
  double assign = 0.0;
  Mat cce_du, cce_dv;
  Mat assign_du;
};

inline ImageTerms image_terms(const PartModel& model, const Mat& x, std::size_t label, const LossWeights& w) {
  ImageTerms out;
  out.trace = forward(model, x);
  auto ce = cce(out.trace.o, label);
  out.cce = ce.value;
  auto g = backprop_classification(model, x, out.trace, ce.dlogits);
  out.cce_du = std::move(g.du);
  out.cce_dv = std::move(g.dv);
  if (w.enable_assign) {
    auto a = assign_penalty(model.u, x, w.assign_normalized_by_R);
    out.assign = a.value;
    out.assign_du = std::move(a.grad);
  } else {
    out.assign_du = Mat(model.num_parts(), model.descriptor_dim());
  }
  return out;
}

/// Image-independent terms: orth and cs.
struct ModelTerms {
  double orth = 0.0;
  double cs = 0.0;
  Mat orth_du;
  Mat cs_dv;
};

inline ModelTerms model_terms(const PartModel& model, const LossWeights& w) {
  ModelTerms out;
  if (w.enable_orth) {
    auto o = orth_penalty(model.u);
    out.orth = o.value;
    out.orth_du = std::move(o.grad);
  } else {
    out.orth_du = Mat(model.num_parts(), model.descriptor_dim());
  }
  if (w.enable_cs) {
    auto c = cs_penalty(model.v, model.parts_per_class, w.cs_mode);
    out.cs = c.value;
    out.cs_dv = std::move(c.grad);
  } else {
    out.cs_dv = Mat(model.num_classes(), model.num_parts());
  }
  return out;
}

/// Combines per-term values and gradients into the weighted total.
inline LossBreakdown combine(const LossWeights& w, double cce_value, double assign_value, Mat cce_du, Mat cce_dv,
                             Mat assign_du, const ModelTerms& mt) {
  validate(w);
  LossBreakdown out;
  out.cce = cce_value;
  out.assign = assign_value;
  out.orth = mt.orth;
  out.cs = mt.cs;
  const double l1 = w.enable_orth ? w.lambda1 : 0.0;
  const double l2 = w.enable_assign ? w.lambda2 : 0.0;
  const double l3 = w.enable_cs ? w.lambda3 : 0.0;
  out.total = out.cce + l1 * out.orth + l2 * out.assign + l3 * out.cs;

  out.du = cce_du;
  auto du = out.du.data();
  auto od = mt.orth_du.data();
  auto ad = assign_du.data();
  for (std::size_t i = 0; i < du.size(); ++i) du[i] += l1 * od[i] + l2 * ad[i];
  out.dv = cce_dv;
  auto dv = out.dv.data();
  auto cd = mt.cs_dv.data();
  for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += l3 * cd[i];

  out.cce_du = std::move(cce_du);
  out.cce_dv = std::move(cce_dv);
  out.assign_du = std::move(assign_du);
  out.orth_du = mt.orth_du;
  out.cs_dv = mt.cs_dv;
  return out;
}

/// Full objective and gradients for a single labeled image.
inline LossBreakdown total_loss(const PartModel& model, const Mat& x, std::size_t label, const LossWeights& w) {
  auto it = image_terms(model, x, label, w);
  auto mt = model_terms(model, w);
  return combine(w, it.cce, it.assign, std::move(it.cce_du), std::move(it.cce_dv), std::move(it.assign_du), mt);
}

}  // namespace dpnet
