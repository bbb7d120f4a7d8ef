#pragma once

// Training objectives: the pointwise positive/negative terms, the in-entity
// margin hinge, their α-blend, and InfoNCE over pairs of masked group views.
// Every loss comes with its gradient w.r.t. its inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "c3/error.hpp"
#include "c3/numcore.hpp"

namespace c3 {

struct LossConfig {
  double alpha = 0.5;
  double delta = 1.0;
  double epsilon = 1e-8;
  double tau = 1.0;
  double beta = 0.1;
  double mask_ratio = 0.8;
  std::size_t aug_threshold = 3;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0,1]");
    if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in (0,1)");
    if (aug_threshold < 2) throw ConfigError("aug_threshold must be >= 2");
  }

  bool operator==(const LossConfig&) const = default;
};

struct LossReport {
  double l_pos = 0.0;
  double l_neg = 0.0;
  double l_margin = 0.0;
  double l_main = 0.0;
  double l_cont = 0.0;
  double l_total = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::size_t n_pairs = 0;
};

// ---------------------------------------------------------------------------
// scalar terms

/// mean over positives of −log(s + ε)
inline double positive_loss(std::span<const double> scores, double epsilon) {
  if (scores.empty()) throw DimensionError("positive_loss: empty positive set");
  double sum = 0.0;
  for (const double s : scores) sum += -std::log(s + epsilon);
  return sum / static_cast<double>(scores.size());
}

inline std::vector<double> positive_loss_grad(std::span<const double> scores, double epsilon) {
  std::vector<double> g(scores.size());
  const double n = static_cast<double>(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) g[i] = -1.0 / ((scores[i] + epsilon) * n);
  return g;
}

/// mean over negatives of exp(s) − 1
inline double negative_loss(std::span<const double> scores) {
  if (scores.empty()) throw DimensionError("negative_loss: empty negative set");
  double sum = 0.0;
  for (const double s : scores) sum += std::expm1(s);
  return sum / static_cast<double>(scores.size());
}

inline std::vector<double> negative_loss_grad(std::span<const double> scores) {
  std::vector<double> g(scores.size());
  const double n = static_cast<double>(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) g[i] = std::exp(scores[i]) / n;
  return g;
}

/// (1/|P|) Σ_p (1/|N|) Σ_n max(0, δ − (s_p − s_n)) for one entity's positives and negatives.
inline double margin_loss(std::span<const double> pos, std::span<const double> neg, double delta) {
  if (pos.empty() || neg.empty()) throw DimensionError("margin_loss: empty positive or negative set");
  double sum = 0.0;
  for (const double sp : pos) {
    double inner = 0.0;
    for (const double sn : neg) inner += std::max(0.0, delta - (sp - sn));
    sum += inner / static_cast<double>(neg.size());
  }
  return sum / static_cast<double>(pos.size());
}

struct MarginGrad {
  std::vector<double> pos;
  std::vector<double> neg;
};

/// Subgradient with the hinge counted as active only when strictly positive.
inline MarginGrad margin_loss_grad(std::span<const double> pos, std::span<const double> neg, double delta) {
  MarginGrad g{std::vector<double>(pos.size()), std::vector<double>(neg.size())};
  const double w = 1.0 / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
  for (std::size_t p = 0; p < pos.size(); ++p)
    for (std::size_t n = 0; n < neg.size(); ++n)
      if (delta - (pos[p] - neg[n]) > 0.0) {
        g.pos[p] -= w;
        g.neg[n] += w;
      }
  return g;
}

inline double main_loss(double l_pos, double l_neg, double l_margin, double alpha) {
  return alpha * (l_pos + l_neg) + (1.0 - alpha) * l_margin;
}

inline double total_loss(double l_main, double l_cont, double beta) { return l_main + beta * l_cont; }

// ---------------------------------------------------------------------------
// batch-level recommendation loss

struct RecommendationLoss {
  LossReport report;
  std::vector<double> d_scores;  // dL_main/ds per row
};

/// L_pos and L_neg average over every positive and negative row; margin pairs
/// are formed only between rows of the same entity.
inline RecommendationLoss recommendation_loss(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                              std::span<const std::size_t> entity_ids, const LossConfig& cfg) {
  RecommendationLoss out;
  out.d_scores.assign(scores.size(), 0.0);
  std::vector<double> pos, neg;
  std::vector<std::size_t> pos_rows, neg_rows;
  for (std::size_t r = 0; r < scores.size(); ++r) {
    (labels[r] ? pos : neg).push_back(scores[r]);
    (labels[r] ? pos_rows : neg_rows).push_back(r);
  }
  LossReport& rep = out.report;
  rep.n_pos = pos.size();
  rep.n_neg = neg.size();
  if (!pos.empty()) {
    rep.l_pos = positive_loss(pos, cfg.epsilon);
    const auto g = positive_loss_grad(pos, cfg.epsilon);
    for (std::size_t i = 0; i < g.size(); ++i) out.d_scores[pos_rows[i]] += cfg.alpha * g[i];
  }
  if (!neg.empty()) {
    rep.l_neg = negative_loss(neg);
    const auto g = negative_loss_grad(neg);
    for (std::size_t i = 0; i < g.size(); ++i) out.d_scores[neg_rows[i]] += cfg.alpha * g[i];
  }

  std::map<std::size_t, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_entity;
  for (std::size_t r = 0; r < scores.size(); ++r) {
    auto& slot = by_entity[entity_ids[r]];
    (labels[r] ? slot.first : slot.second).push_back(r);
  }
  if (!pos.empty()) {
    const double inv_p = 1.0 / static_cast<double>(pos.size());
    double margin_sum = 0.0;
    for (const auto& [entity, rows] : by_entity) {
      const auto& [prow, nrow] = rows;
      if (prow.empty() || nrow.empty()) continue;
      std::vector<double> ps, ns;
      for (const auto r : prow) ps.push_back(scores[r]);
      for (const auto r : nrow) ns.push_back(scores[r]);
      // margin_loss averages over this entity's positives; rescale to a sum
      const double np = static_cast<double>(ps.size());
      margin_sum += margin_loss(ps, ns, cfg.delta) * np;
      rep.n_pairs += ps.size() * ns.size();
      const auto g = margin_loss_grad(ps, ns, cfg.delta);
      const double w = (1.0 - cfg.alpha) * np * inv_p;
      for (std::size_t i = 0; i < prow.size(); ++i) out.d_scores[prow[i]] += w * g.pos[i];
      for (std::size_t i = 0; i < nrow.size(); ++i) out.d_scores[nrow[i]] += w * g.neg[i];
    }
    rep.l_margin = margin_sum * inv_p;
  }
  rep.l_main = main_loss(rep.l_pos, rep.l_neg, rep.l_margin, cfg.alpha);
  rep.l_total = rep.l_main;
  return out;
}

// ---------------------------------------------------------------------------
// InfoNCE

struct InfoNceResult {
  double loss = 0.0;
  Tensor grad;            // same shape as the views
  bool degenerate = false;  // fewer than two pairs: loss defined as 0
};

/// Views are rows of a 2B×d matrix; rows 2j and 2j+1 form a positive pair.
/// Each of the 2B anchors contributes −log(exp(cos(a,partner)/τ) / Σ_{k≠a} exp(cos(a,k)/τ)),
/// and the loss is the mean over anchors.
inline InfoNceResult info_nce(const Tensor& views, double tau) {
  const std::size_t n = views.rows(), d = views.cols();
  if (n % 2 != 0) throw DimensionError("info_nce: views must come in pairs");
  if (!(tau > 0.0)) throw ConfigError("info_nce: tau must be > 0");
  InfoNceResult out;
  out.grad = Tensor::matrix(n, d);
  if (n < 4) {
    out.degenerate = true;
    return out;
  }
  std::vector<double> norm(n);
  Tensor z = Tensor::matrix(n, d);
  for (std::size_t a = 0; a < n; ++a) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += views(a, c) * views(a, c);
    norm[a] = std::sqrt(s);
    if (!(norm[a] > 0.0)) throw NumericalError("info_nce: zero-length view");
    for (std::size_t c = 0; c < d; ++c) z(a, c) = views(a, c) / norm[a];
  }
  Tensor sim = matmul(z, Tensor({d, n}, [&] {
                        std::vector<double> zt(d * n);
                        for (std::size_t a = 0; a < n; ++a)
                          for (std::size_t c = 0; c < d; ++c) zt[c * n + a] = z(a, c);
                        return zt;
                      }()));
  for (double& x : sim.data) x /= tau;

  // dL/dsim[a][k] for k ≠ a
  Tensor dsim = Tensor::matrix(n, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> logits(n);
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t partner = a ^ 1U;
    for (std::size_t k = 0; k < n; ++k) logits[k] = k == a ? -std::numeric_limits<double>::infinity() : sim(a, k);
    double mx = -std::numeric_limits<double>::infinity();
    for (const double x : logits) mx = std::max(mx, x);
    double denom = 0.0;
    for (const double x : logits) denom += std::exp(x - mx);
    out.loss += (mx + std::log(denom) - sim(a, partner)) * inv_n;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == a) continue;
      dsim(a, k) += std::exp(logits[k] - mx) / denom * inv_n;
    }
    dsim(a, partner) -= inv_n;
  }
  // sim[a][k] = z_a·z_k/τ feeds both z_a and z_k
  Tensor dz = Tensor::matrix(n, d);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t k = 0; k < n; ++k) {
      const double g = dsim(a, k) / tau;
      if (g == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) {
        dz(a, c) += g * z(k, c);
        dz(k, c) += g * z(a, c);
      }
    }
  // z = h/|h|  ⇒  dh = (dz − z(z·dz))/|h|
  for (std::size_t a = 0; a < n; ++a) {
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += z(a, c) * dz(a, c);
    for (std::size_t c = 0; c < d; ++c) out.grad(a, c) = (dz(a, c) - z(a, c) * dot) / norm[a];
  }
  require_finite(out.loss, "info_nce");
  return out;
}

}  // namespace c3
