#pragma once

// Normal-equation assembly, damped Gauss-Newton (Levenberg-Marquardt), Schur
// complement marginalization and the resulting prior factor.
//
// Cost convention: cost = 1/2 sum rho(|r|^2) over whitened residuals, so the
// assembled right-hand side b = -sum J^T r is exactly the negative gradient.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <set>
#include <vector>

#include "msfo/errors.hpp"
#include "msfo/factors.hpp"
#include "msfo/values.hpp"

namespace msfo {

/// Huber IRLS weight for a whitened squared norm.
inline double robust_weight(double squared_norm, double delta) {
  if (!(delta > 0.0) || squared_norm <= delta * delta) return 1.0;
  return delta / std::sqrt(squared_norm);
}

/// Huber rho(s): s inside the threshold, 2 delta sqrt(s) - delta^2 outside.
inline double robust_cost(double squared_norm, double delta) {
  if (!(delta > 0.0) || squared_norm <= delta * delta) return squared_norm;
  return 2.0 * delta * std::sqrt(squared_norm) - delta * delta;
}

struct FactorGraph {
  std::vector<FactorPtr> factors;

  void add(FactorPtr f) { factors.push_back(std::move(f)); }
  template <class F, class... Args>
  void emplace(Args&&... args) {
    factors.push_back(std::make_shared<const F>(std::forward<Args>(args)...));
  }

  std::vector<BlockId> block_ids() const {
    std::set<BlockId> ids;
    for (const auto& f : factors) ids.insert(f->blocks().begin(), f->blocks().end());
    return {ids.begin(), ids.end()};
  }

  Layout layout(const Values& values) const { return Layout(block_ids(), values); }
};

struct Linearization {
  Eigen::MatrixXd H;
  Eigen::VectorXd b;
  double cost = 0.0;
  int evaluated = 0;
  int skipped = 0;
};

/// Maximum share of factors that may be skipped before linearization fails.
inline constexpr double kMaxSkippedFraction = 0.1;

namespace detail {

inline bool all_finite(const Eigen::VectorXd& r, const std::vector<Eigen::MatrixXd>* J) {
  if (!r.allFinite()) return false;
  if (J) {
    for (const auto& j : *J) {
      if (!j.allFinite()) return false;
    }
  }
  return true;
}

inline void check_skips(int skipped, std::size_t total) {
  if (total > 0 && static_cast<double>(skipped) > kMaxSkippedFraction * static_cast<double>(total)) {
    throw LinearizationError("linearization: " + std::to_string(skipped) + " of " + std::to_string(total) +
                             " factors could not be evaluated");
  }
}

}  // namespace detail

/// H = sum w J^T J, b = -sum w J^T r, with Huber IRLS weights w.
inline Linearization linearize_graph(const FactorGraph& graph, const Values& values, const Layout& layout) {
  const int n = layout.total_dim();
  Linearization lin;
  lin.H = Eigen::MatrixXd::Zero(n, n);
  lin.b = Eigen::VectorXd::Zero(n);

  Eigen::VectorXd r;
  std::vector<Eigen::MatrixXd> J;
  std::vector<const LayoutEntry*> entries;
  for (const auto& f : graph.factors) {
    if (!f->evaluate(values, r, &J) || !detail::all_finite(r, &J)) {
      ++lin.skipped;
      continue;
    }
    ++lin.evaluated;
    const double s = r.squaredNorm();
    const double w = robust_weight(s, f->huber_delta());
    lin.cost += 0.5 * robust_cost(s, f->huber_delta());

    entries.clear();
    for (const auto& id : f->blocks()) entries.push_back(&layout.entry(id));
    // upper triangle only; mirrored once at the end
    for (std::size_t a = 0; a < entries.size(); ++a) {
      const auto& ea = *entries[a];
      lin.b.segment(ea.offset, ea.dim).noalias() -= w * (J[a].transpose() * r);
      for (std::size_t c = 0; c < entries.size(); ++c) {
        const auto& ec = *entries[c];
        if (ea.offset > ec.offset || (ea.offset == ec.offset && c < a)) continue;
        lin.H.block(ea.offset, ec.offset, ea.dim, ec.dim).noalias() += w * J[a].transpose().lazyProduct(J[c]);
      }
    }
  }
  lin.H.triangularView<Eigen::StrictlyLower>() = lin.H.transpose();
  detail::check_skips(lin.skipped, graph.factors.size());
  return lin;
}

struct CostEvaluation {
  double cost = 0.0;
  int skipped = 0;
};

inline CostEvaluation evaluate_cost(const FactorGraph& graph, const Values& values) {
  CostEvaluation out;
  Eigen::VectorXd r;
  for (const auto& f : graph.factors) {
    if (!f->evaluate(values, r, nullptr) || !r.allFinite()) {
      ++out.skipped;
      continue;
    }
    out.cost += 0.5 * robust_cost(r.squaredNorm(), f->huber_delta());
  }
  return out;
}

/// Solves (H + lambda diag(H)) dx = b. Columns from `landmark_begin` on must
/// form a diagonal block (independent scalar landmarks); they are eliminated
/// by Schur complement before the remaining system is Cholesky-factorized.
inline Eigen::VectorXd solve_normal(const Eigen::MatrixXd& H, const Eigen::VectorXd& b, double lambda,
                                    int landmark_begin = -1) {
  const int n = static_cast<int>(H.rows());
  if (H.cols() != n || b.size() != n) throw ContractError("solve_normal: dimension mismatch");
  if (lambda < 0.0) throw ContractError("solve_normal: damping must be non-negative");
  if (landmark_begin < 0 || landmark_begin > n) landmark_begin = n;
  const int np = landmark_begin;
  const int nl = n - np;

  Eigen::MatrixXd A = H;
  A.diagonal() += lambda * H.diagonal();

  Eigen::VectorXd dx(n);
  if (nl == 0) {
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) throw IndefiniteSystemError("solve_normal: system is not positive definite");
    dx = llt.solve(b);
  } else {
    const Eigen::VectorXd d = A.diagonal().tail(nl);
    if ((d.array() <= 0.0).any() || !d.allFinite()) {
      throw IndefiniteSystemError("solve_normal: landmark block is not positive definite");
    }
    const Eigen::VectorXd d_inv = d.cwiseInverse();
    const auto A_pl = A.topRightCorner(np, nl);
    const Eigen::MatrixXd W = A_pl * d_inv.asDiagonal();
    Eigen::MatrixXd S = A.topLeftCorner(np, np);
    S.noalias() -= W * A_pl.transpose();
    const Eigen::VectorXd rhs = b.head(np) - W * b.tail(nl);
    if (np > 0) {
      Eigen::LLT<Eigen::MatrixXd> llt(S);
      if (llt.info() != Eigen::Success) {
        throw IndefiniteSystemError("solve_normal: reduced system is not positive definite");
      }
      dx.head(np) = llt.solve(rhs);
    }
    dx.tail(nl) = d_inv.cwiseProduct(b.tail(nl) - A_pl.transpose() * dx.head(np));
  }
  if (!dx.allFinite()) throw IndefiniteSystemError("solve_normal: non-finite solution");
  return dx;
}

struct OptimizerOptions {
  int max_iters = 10;
  double lambda0 = 1e-4;  // 0 gives plain Gauss-Newton until a step is rejected
  double lambda_up = 10.0;
  double lambda_down = 0.5;
  double cost_tol = 1e-6;
  double delta_tol = 1e-8;
};

struct OptimizerReport {
  int iterations = 0;
  int accepted = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  /// Cost after each accepted step, preceded by the initial cost.
  std::vector<double> costs;
  int skipped_factors = 0;
  bool converged = false;
};

struct OptimizeResult {
  Values values;
  OptimizerReport report;
};

inline OptimizeResult optimize(const FactorGraph& graph, Values values, const OptimizerOptions& opts = {}) {
  const Layout layout = graph.layout(values);
  OptimizeResult out;
  OptimizerReport& rep = out.report;

  Linearization lin = linearize_graph(graph, values, layout);
  rep.initial_cost = lin.cost;
  rep.costs.push_back(lin.cost);
  rep.skipped_factors = lin.skipped;
  double lambda = opts.lambda0;

  while (rep.iterations < opts.max_iters) {
    ++rep.iterations;
    if (lin.cost <= std::numeric_limits<double>::min()) {
      rep.converged = true;
      break;
    }
    Eigen::VectorXd dx;
    try {
      dx = solve_normal(lin.H, lin.b, lambda, layout.landmark_begin());
    } catch (const IndefiniteSystemError&) {
      lambda = lambda > 0.0 ? lambda * opts.lambda_up : 1e-4;
      continue;
    }
    if (dx.size() == 0 || dx.lpNorm<Eigen::Infinity>() < opts.delta_tol) {
      rep.converged = true;
      break;
    }
    Values candidate = layout.retract(values, dx);
    const CostEvaluation ce = evaluate_cost(graph, candidate);
    if (ce.skipped <= lin.skipped && ce.cost < lin.cost) {
      const double rel = (lin.cost - ce.cost) / lin.cost;
      values = std::move(candidate);
      ++rep.accepted;
      rep.costs.push_back(ce.cost);
      lambda *= opts.lambda_down;
      lin = linearize_graph(graph, values, layout);
      rep.skipped_factors = lin.skipped;
      if (rel < opts.cost_tol) {
        rep.converged = true;
        break;
      }
    } else {
      lambda = lambda > 0.0 ? lambda * opts.lambda_up : 1e-4;
    }
  }
  rep.final_cost = lin.cost;
  out.values = std::move(values);
  return out;
}

/// Marginalization prior 1/2 dx^T H_p dx - b_p^T dx over retained blocks,
/// evaluated in square-root form r = S^1/2 V^T dx - S^-1/2 V^T b_p with
/// H_p = V S V^T (positive eigenvalues only) and dx = x [-] lin_point.
class PriorFactor final : public Factor {
 public:
  PriorFactor(std::vector<BlockId> blocks, Eigen::MatrixXd H_p, Eigen::VectorXd b_p, Values lin_point)
      : Factor(std::move(blocks)), H_(std::move(H_p)), b_(std::move(b_p)), lin_(std::move(lin_point)) {
    int n = 0;
    for (const auto& id : this->blocks()) {
      offsets_.push_back(n);
      n += lin_.dim(id);
    }
    if (H_.rows() != n || H_.cols() != n || b_.size() != n) throw ContractError("prior: dimension mismatch");

    H_ = 0.5 * (H_ + H_.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H_);
    const Eigen::VectorXd s = es.eigenvalues();
    const double smax = s.size() ? std::max(s.maxCoeff(), 0.0) : 0.0;
    const double eps = 1e-8 * smax;
    // clamp to PSD; keep only well-conditioned directions for the residual
    const Eigen::VectorXd s_clamped = s.cwiseMax(0.0);
    H_ = es.eigenvectors() * s_clamped.asDiagonal() * es.eigenvectors().transpose();
    std::vector<int> keep;
    for (int i = 0; i < s.size(); ++i) {
      if (s[i] > eps && s[i] > 0.0) keep.push_back(i);
    }
    sqrt_J_.resize(static_cast<int>(keep.size()), n);
    r0_.resize(static_cast<int>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
      const int i = keep[k];
      const double sq = std::sqrt(s[i]);
      const Eigen::VectorXd v = es.eigenvectors().col(i);
      sqrt_J_.row(static_cast<int>(k)) = sq * v.transpose();
      r0_[static_cast<int>(k)] = -v.dot(b_) / sq;
    }
  }

  int dim() const override { return static_cast<int>(r0_.size()); }
  std::string_view kind() const override { return "prior"; }

  const Eigen::MatrixXd& H() const { return H_; }
  const Eigen::VectorXd& b() const { return b_; }
  const Values& lin_point() const { return lin_; }
  int rank() const { return dim(); }

  bool evaluate(const Values& values, Eigen::VectorXd& r, std::vector<Eigen::MatrixXd>* J) const override {
    const int n = static_cast<int>(H_.rows());
    Eigen::VectorXd dx(n);
    for (std::size_t k = 0; k < blocks().size(); ++k) {
      const BlockId& id = blocks()[k];
      dx.segment(offsets_[k], lin_.dim(id)) = values.boxminus_block(id, lin_);
    }
    r = sqrt_J_ * dx + r0_;
    if (J) {
      J->resize(blocks().size());
      for (std::size_t k = 0; k < blocks().size(); ++k) {
        const BlockId& id = blocks()[k];
        const int d = lin_.dim(id);
        Eigen::MatrixXd jk = sqrt_J_.middleCols(offsets_[k], d);
        if (id.kind == BlockKind::Pose) {
          const Vec3 dtheta = dx.segment<3>(offsets_[k] + 3);
          jk.rightCols<3>() = (jk.rightCols<3>() * so3_right_jacobian_inv(dtheta)).eval();
        }
        (*J)[k] = std::move(jk);
      }
    }
    return true;
  }

 private:
  Eigen::MatrixXd H_;
  Eigen::VectorXd b_;
  Values lin_;
  std::vector<int> offsets_;
  Eigen::MatrixXd sqrt_J_;
  Eigen::VectorXd r0_;
};

/// Schur complement of the marginalized blocks:
///   H_p = H_rr - H_rm H_mm^+ H_mr,  b_p = b_r - H_rm H_mm^+ b_m.
/// H_mm^+ is an eigenvalue-clamped pseudo-inverse (clamp at 1e-8 lambda_max).
inline std::shared_ptr<PriorFactor> marginalize(const Eigen::MatrixXd& H, const Eigen::VectorXd& b,
                                                const std::vector<BlockId>& marg_ids, const Layout& layout,
                                                const Values& values, int* dropped_directions = nullptr) {
  std::set<BlockId> marg(marg_ids.begin(), marg_ids.end());
  std::vector<int> mi, ri;
  std::vector<BlockId> retained;
  for (const auto& e : layout.entries()) {
    auto& dst = marg.count(e.id) ? mi : ri;
    for (int k = 0; k < e.dim; ++k) dst.push_back(e.offset + k);
    if (!marg.count(e.id)) retained.push_back(e.id);
  }
  for (const auto& id : marg) {
    if (!layout.contains(id)) throw ContractError("marginalize: block not in layout " + to_string(id));
  }
  const int m = static_cast<int>(mi.size());
  const int r = static_cast<int>(ri.size());
  Eigen::MatrixXd Hmm(m, m), Hrm(r, m), Hrr(r, r);
  Eigen::VectorXd bm(m), br(r);
  for (int i = 0; i < m; ++i) {
    bm[i] = b[mi[i]];
    for (int j = 0; j < m; ++j) Hmm(i, j) = H(mi[i], mi[j]);
  }
  for (int i = 0; i < r; ++i) {
    br[i] = b[ri[i]];
    for (int j = 0; j < m; ++j) Hrm(i, j) = H(ri[i], mi[j]);
    for (int j = 0; j < r; ++j) Hrr(i, j) = H(ri[i], ri[j]);
  }

  Eigen::MatrixXd Hmm_pinv = Eigen::MatrixXd::Zero(m, m);
  int dropped = 0;
  if (m > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (Hmm + Hmm.transpose()));
    const Eigen::VectorXd s = es.eigenvalues();
    const double eps = 1e-8 * std::max(s.maxCoeff(), 0.0);
    Eigen::VectorXd s_inv(m);
    for (int i = 0; i < m; ++i) {
      if (s[i] > eps && s[i] > 0.0) {
        s_inv[i] = 1.0 / s[i];
      } else {
        s_inv[i] = 0.0;
        ++dropped;
      }
    }
    Hmm_pinv = es.eigenvectors() * s_inv.asDiagonal() * es.eigenvectors().transpose();
  }
  if (dropped_directions) *dropped_directions = dropped;

  const Eigen::MatrixXd K = Hrm * Hmm_pinv;
  Eigen::MatrixXd Hp = Hrr - K * Hrm.transpose();
  Hp = 0.5 * (Hp + Hp.transpose()).eval();
  const Eigen::VectorXd bp = br - K * bm;

  Values lin;
  for (const auto& id : retained) lin.copy_block(id, values);
  return std::make_shared<PriorFactor>(retained, Hp, bp, lin);
}

}  // namespace msfo
