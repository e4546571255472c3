#include "crfrail/solver.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

namespace crfrail {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Precomputed ordering shared by every sweep over the risk sets. Units are
// processed in decreasing time; tied times form one group so that each unit
// is in the risk set at its own event time (Breslow handling of ties).
struct Work {
  const StudyDataset* data;
  const Eigen::MatrixXd* weights;
  int n, N, K, p;
  std::vector<int> order;
  std::vector<int> group_begin;  // indices into order, one per tie group
  std::vector<int> cluster;      // per unit, 0-based
  Eigen::MatrixXd X;             // n x p
  double weight_total;

  Work(const StudyDataset& d, const Eigen::MatrixXd& w) : data(&d), weights(&w) {
    n = d.num_units();
    N = d.num_clusters();
    K = d.num_causes();
    p = d.covariate_dim();
    if (w.rows() != n || w.cols() != K)
      throw std::invalid_argument("weight matrix has wrong dimensions");
    order.resize(n);
    for (int u = 0; u < n; ++u) order[u] = u;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return d.units()[a].time > d.units()[b].time;
    });
    group_begin.push_back(0);
    for (int r = 1; r < n; ++r)
      if (d.units()[order[r]].time != d.units()[order[r - 1]].time) group_begin.push_back(r);
    group_begin.push_back(n);
    cluster.resize(n);
    X.resize(n, p);
    for (int u = 0; u < n; ++u) {
      cluster[u] = d.cluster_index(u);
      X.row(u) = d.units()[u].covariates.transpose();
    }
    weight_total = w.sum();
  }

  int vidx(int i, int k) const { return i * K + k; }
};

Eigen::MatrixXd exp_eta(const Work& w, const Eigen::MatrixXd& beta, const Eigen::VectorXd& v) {
  Eigen::MatrixXd e(w.n, w.K);
  for (int u = 0; u < w.n; ++u)
    for (int k = 0; k < w.K; ++k)
      e(u, k) = std::exp(w.X.row(u).dot(beta.row(k)) + v[w.vidx(w.cluster[u], k)]);
  return e;
}

// One pass over the risk sets at fixed (beta, v). Produces the event part of
// the log likelihood, exact scores, the exact beta and beta-v information
// blocks, and the per-(cluster,cause) diagonal curvature of I_vv.
struct Sweep {
  double event_loglik = 0.0;
  Eigen::VectorXd score_b;     // Kp
  Eigen::VectorXd score_v_ev;  // NK, before the -D^{-1} v penalty term
  Eigen::VectorXd lambda;      // NK, diag second-moment term of I_vv
  Eigen::VectorXd qdiag;       // NK, diagonal of the squared-mean term
  Eigen::MatrixXd I_bb;        // Kp x Kp
  Eigen::MatrixXd I_bv;        // Kp x NK
  Eigen::MatrixXd e;           // n x K, exp(eta)
  Eigen::MatrixXd S0_event;    // n x K, risk-set denominator at the unit's time (events only)
  bool finite = true;
};

Sweep run_sweep(const Work& w, const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                bool curvature) {
  const int n = w.n, K = w.K, p = w.p;
  Sweep s;
  s.e = exp_eta(w, beta, v);
  if (!s.e.allFinite()) {
    s.finite = false;
    return s;
  }
  s.score_b = Eigen::VectorXd::Zero(K * p);
  s.score_v_ev = Eigen::VectorXd::Zero(w.N * K);
  s.lambda = Eigen::VectorXd::Zero(w.N * K);
  s.S0_event = Eigen::MatrixXd::Zero(n, K);
  if (curvature) {
    s.qdiag = Eigen::VectorXd::Zero(w.N * K);
    s.I_bb = Eigen::MatrixXd::Zero(K * p, K * p);
    s.I_bv = Eigen::MatrixXd::Zero(K * p, w.N * K);
  }

  Eigen::VectorXd S0 = Eigen::VectorXd::Zero(K);
  Eigen::MatrixXd S1X = Eigen::MatrixXd::Zero(K, p);
  std::vector<Eigen::MatrixXd> S2X;
  if (curvature) S2X.assign(K, Eigen::MatrixXd::Zero(p, p));

  // Tail accumulators G(t) = sum over events with t_e <= t of the listed
  // increments; per-unit values are recovered as (final - snapshot at the
  // unit's insertion into the risk set).
  Eigen::VectorXd G = Eigen::VectorXd::Zero(K), G2 = Eigen::VectorXd::Zero(K);
  Eigen::MatrixXd GX = Eigen::MatrixXd::Zero(K, p);
  Eigen::MatrixXd Gsnap(n, K), G2snap(n, K);
  std::vector<Eigen::MatrixXd> GXsnap(K, Eigen::MatrixXd(n, p));

  for (std::size_t g = 0; g + 1 < w.group_begin.size(); ++g) {
    int b = w.group_begin[g], e_ = w.group_begin[g + 1];
    for (int r = b; r < e_; ++r) {
      int u = w.order[r];
      for (int k = 0; k < K; ++k) {
        S0[k] += s.e(u, k);
        S1X.row(k) += s.e(u, k) * w.X.row(u);
        if (curvature) S2X[k] += s.e(u, k) * (w.X.row(u).transpose() * w.X.row(u));
        Gsnap(u, k) = G[k];
        if (curvature) {
          G2snap(u, k) = G2[k];
          GXsnap[k].row(u) = GX.row(k);
        }
      }
    }
    for (int r = b; r < e_; ++r) {
      int u = w.order[r];
      if (w.data->units()[u].censor_indicator != 1) continue;
      for (int k = 0; k < K; ++k) {
        double wt = (*w.weights)(u, k);
        if (wt == 0.0) continue;
        double s0 = S0[k];
        s.S0_event(u, k) = s0;
        Eigen::RowVectorXd xbar = S1X.row(k) / s0;
        s.event_loglik += wt * (std::log(s.e(u, k)) - std::log(s0));
        s.score_b.segment(k * p, p) += wt * (w.X.row(u) - xbar).transpose();
        G[k] += wt / s0;
        if (curvature) {
          s.I_bb.block(k * p, k * p, p, p) +=
              wt * (S2X[k] / s0 - xbar.transpose() * xbar);
          G2[k] += wt / (s0 * s0);
          GX.row(k) += (wt / s0) * xbar;
        }
      }
    }
  }

  // Per-unit tail sums feed the v score, the I_vv diagonal and the I_bv block.
  for (int u = 0; u < n; ++u) {
    int i = w.cluster[u];
    for (int k = 0; k < K; ++k) {
      int idx = w.vidx(i, k);
      double gu = G[k] - Gsnap(u, k);
      double le = s.e(u, k) * gu;
      s.score_v_ev[idx] += (*w.weights)(u, k) * (w.data->units()[u].censor_indicator == 1) - le;
      s.lambda[idx] += le;
      if (curvature)
        s.I_bv.block(k * p, idx, p, 1) +=
            s.e(u, k) * (w.X.row(u).transpose() * gu - (GX.row(k) - GXsnap[k].row(u)).transpose());
    }
  }
  if (curvature) {
    // qdiag_{ik} = sum over unit pairs (j,j') in cluster i of
    // e_j e_j' * G2 at min(T_j, T_j'); the tie-group ordering makes the unit
    // with the smaller time carry the right tail value.
    int pos = 0;
    for (int i = 0; i < w.N; ++i) {
      int sz = w.data->cluster_sizes()[i];
      for (int a = 0; a < sz; ++a)
        for (int b2 = 0; b2 < sz; ++b2) {
          int ua = pos + a, ub = pos + b2;
          int umin = w.data->units()[ua].time <= w.data->units()[ub].time ? ua : ub;
          for (int k = 0; k < K; ++k)
            s.qdiag[w.vidx(i, k)] += s.e(ua, k) * s.e(ub, k) * (G2[k] - G2snap(umin, k));
        }
      pos += sz;
    }
  }
  return s;
}

double ppll_value(const Work& w, const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                  const Eigen::MatrixXd& Dinv_blk) {
  Eigen::MatrixXd e = exp_eta(w, beta, v);
  if (!e.allFinite()) return kNegInf;
  const int K = w.K;
  Eigen::VectorXd S0 = Eigen::VectorXd::Zero(K);
  double ll = 0.0;
  for (std::size_t g = 0; g + 1 < w.group_begin.size(); ++g) {
    int b = w.group_begin[g], e_ = w.group_begin[g + 1];
    for (int r = b; r < e_; ++r)
      for (int k = 0; k < K; ++k) S0[k] += e(w.order[r], k);
    for (int r = b; r < e_; ++r) {
      int u = w.order[r];
      if (w.data->units()[u].censor_indicator != 1) continue;
      for (int k = 0; k < K; ++k) {
        double wt = (*w.weights)(u, k);
        if (wt != 0.0) ll += wt * (std::log(e(u, k)) - std::log(S0[k]));
      }
    }
  }
  for (int i = 0; i < w.N; ++i) {
    auto vi = v.segment(i * K, K);
    ll -= 0.5 * vi.dot(Dinv_blk * vi);
  }
  return std::isfinite(ll) ? ll : kNegInf;
}

// Dense I_vv including the cross-cluster coupling (second pass over events,
// rank-one accumulation per event). Quadratic in N; used below the dense
// limit and for the exact theta trace / variance matrices on small problems.
Eigen::MatrixXd dense_Ivv(const Work& w, const Sweep& s) {
  const int N = w.N, K = w.K;
  Eigen::MatrixXd Ivv = Eigen::MatrixXd::Zero(N * K, N * K);
  Eigen::MatrixXd S1(N, K);  // per-cluster at-risk sums
  S1.setZero();
  Eigen::VectorXd S0 = Eigen::VectorXd::Zero(K);
  Eigen::VectorXd mu(N);
  for (std::size_t g = 0; g + 1 < w.group_begin.size(); ++g) {
    int b = w.group_begin[g], e_ = w.group_begin[g + 1];
    for (int r = b; r < e_; ++r) {
      int u = w.order[r];
      for (int k = 0; k < K; ++k) {
        S0[k] += s.e(u, k);
        S1(w.cluster[u], k) += s.e(u, k);
      }
    }
    for (int r = b; r < e_; ++r) {
      int u = w.order[r];
      if (w.data->units()[u].censor_indicator != 1) continue;
      for (int k = 0; k < K; ++k) {
        double wt = (*w.weights)(u, k);
        if (wt == 0.0) continue;
        mu = S1.col(k) / S0[k];
        for (int a = 0; a < N; ++a) {
          if (mu[a] == 0.0) continue;
          Ivv(a * K + k, a * K + k) += wt * mu[a];
          for (int c = 0; c < N; ++c)
            Ivv(a * K + k, c * K + k) -= wt * mu[a] * mu[c];
        }
      }
    }
  }
  return Ivv;
}

// Matrix-free application of the exact I_vv coupling term:
// out_{ik} += sum_e w_e mu_e[i] (mu_e . x) computed by one sweep.
Eigen::VectorXd coupling_apply(const Work& w, const Sweep& s, const Eigen::VectorXd& x) {
  const int n = w.n, K = w.K;
  Eigen::VectorXd A = Eigen::VectorXd::Zero(K);   // sum at risk e * x_(cluster,k)
  Eigen::VectorXd Gq = Eigen::VectorXd::Zero(K);  // sum_e (w/S0^2) A(t_e)
  Eigen::MatrixXd Gqsnap(n, K);
  for (std::size_t g = 0; g + 1 < w.group_begin.size(); ++g) {
    int b = w.group_begin[g], e_ = w.group_begin[g + 1];
    for (int r = b; r < e_; ++r) {
      int u = w.order[r];
      for (int k = 0; k < K; ++k) {
        A[k] += s.e(u, k) * x[w.vidx(w.cluster[u], k)];
        Gqsnap(u, k) = Gq[k];
      }
    }
    for (int r = b; r < e_; ++r) {
      int u = w.order[r];
      if (w.data->units()[u].censor_indicator != 1) continue;
      for (int k = 0; k < K; ++k) {
        double wt = (*w.weights)(u, k);
        if (wt == 0.0) continue;
        double s0 = s.S0_event(u, k);
        Gq[k] += wt / (s0 * s0) * A[k];
      }
    }
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(w.N * K);
  for (int u = 0; u < n; ++u)
    for (int k = 0; k < K; ++k)
      out[w.vidx(w.cluster[u], k)] += s.e(u, k) * (Gq[k] - Gqsnap(u, k));
  return out;
}

// Cluster-diagonal Newton/preconditioner system: per-cluster K x K blocks
// Dinv + diag(lambda - qdiag), exact beta blocks, Schur complement on beta.
struct Arrowhead {
  int N, K, p;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> vblocks;
  Eigen::MatrixXd I_bv;  // reference copy (Kp x NK)
  Eigen::LLT<Eigen::MatrixXd> schur;
  bool ok = false;

  void build(const Work& w, const Sweep& s, const Eigen::MatrixXd& Dinv_blk, double ridge) {
    N = w.N; K = w.K; p = w.p;
    const int KP = K * p;
    I_bv = s.I_bv;
    vblocks.clear();
    vblocks.reserve(N);
    Eigen::MatrixXd M = s.I_bb + ridge * Eigen::MatrixXd::Identity(KP, KP);
    for (int i = 0; i < N; ++i) {
      Eigen::MatrixXd B = Dinv_blk;
      for (int k = 0; k < K; ++k) {
        double d = s.lambda[i * K + k] - s.qdiag[i * K + k];
        B(k, k) += std::max(d, 0.0) + ridge;
      }
      vblocks.emplace_back(B);
      if (vblocks.back().info() != Eigen::Success) return;
      Eigen::MatrixXd Bi = I_bv.middleCols(i * K, K);        // Kp x K
      M -= Bi * vblocks.back().solve(Bi.transpose());
    }
    schur.compute(M);
    ok = schur.info() == Eigen::Success;
  }

  // Solves the arrowhead system for rhs (gb, gv).
  void solve(const Eigen::VectorXd& gb, const Eigen::VectorXd& gv, Eigen::VectorXd& db,
             Eigen::VectorXd& dv) const {
    const int KP = K * p;
    Eigen::VectorXd rb = gb;
    for (int i = 0; i < N; ++i)
      rb -= I_bv.middleCols(i * K, K) * vblocks[i].solve(gv.segment(i * K, K));
    db = schur.solve(rb);
    dv.resize(N * K);
    for (int i = 0; i < N; ++i)
      dv.segment(i * K, K) =
          vblocks[i].solve(gv.segment(i * K, K) -
                           I_bv.middleCols(i * K, K).transpose() * db.head(KP));
  }
};

// Exact H matvec: H = I(beta,v) + blockdiag(0, D^{-1}), applied without
// materializing the NK x NK block.
struct HOperator {
  const Work* w;
  const Sweep* s;
  Eigen::MatrixXd Dinv_blk;

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    const int KP = w->K * w->p, NK = w->N * w->K;
    Eigen::VectorXd b = x.head(KP), xv = x.tail(NK);
    Eigen::VectorXd out(KP + NK);
    out.head(KP) = s->I_bb * b + s->I_bv * xv;
    Eigen::VectorXd zv = s->I_bv.transpose() * b;
    zv += s->lambda.cwiseProduct(xv);
    zv -= coupling_apply(*w, *s, xv);
    for (int i = 0; i < w->N; ++i)
      zv.segment(i * w->K, w->K) += Dinv_blk * xv.segment(i * w->K, w->K);
    out.tail(NK) = zv;
    return out;
  }

  // Information-matrix-only matvec (no D^{-1}), for the sandwich middle.
  Eigen::VectorXd apply_info(const Eigen::VectorXd& x) const {
    const int KP = w->K * w->p, NK = w->N * w->K;
    Eigen::VectorXd b = x.head(KP), xv = x.tail(NK);
    Eigen::VectorXd out(KP + NK);
    out.head(KP) = s->I_bb * b + s->I_bv * xv;
    out.tail(NK) = s->I_bv.transpose() * b + s->lambda.cwiseProduct(xv) -
                   coupling_apply(*w, *s, xv);
    return out;
  }
};

// Preconditioned conjugate gradients on the exact H with the arrowhead
// approximation as preconditioner. Deterministic; converges in a handful of
// iterations because the preconditioner only drops cross-cluster curvature.
Eigen::VectorXd pcg_solve(const HOperator& H, const Arrowhead& pre, const Eigen::VectorXd& rhs,
                          double tol = 1e-12, int max_iter = 400) {
  const int KP = pre.K * pre.p;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(rhs.size());
  Eigen::VectorXd r = rhs;
  Eigen::VectorXd zb, zv;
  pre.solve(r.head(KP), r.tail(r.size() - KP), zb, zv);
  Eigen::VectorXd z(rhs.size());
  z << zb, zv;
  Eigen::VectorXd d = z;
  double rz = r.dot(z);
  double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) return x;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd Hd = H.apply(d);
    double alpha = rz / d.dot(Hd);
    x += alpha * d;
    r -= alpha * Hd;
    if (r.norm() <= tol * rhs_norm) break;
    pre.solve(r.head(KP), r.tail(r.size() - KP), zb, zv);
    z << zb, zv;
    double rz_new = r.dot(z);
    d = z + (rz_new / rz) * d;
    rz = rz_new;
  }
  return x;
}

bool use_dense(const Work& w, const SolverOptions& opt) {
  if (opt.force_dense) return true;
  if (opt.force_structured) return false;
  return w.K * w.p + w.N * w.K <= opt.dense_limit;
}

Eigen::MatrixXd assemble_info(const Work& w, const Sweep& s) {
  const int KP = w.K * w.p, NK = w.N * w.K;
  Eigen::MatrixXd info(KP + NK, KP + NK);
  info.topLeftCorner(KP, KP) = s.I_bb;
  info.topRightCorner(KP, NK) = s.I_bv;
  info.bottomLeftCorner(NK, KP) = s.I_bv.transpose();
  info.bottomRightCorner(NK, NK) = dense_Ivv(w, s);
  return info;
}

// Theta estimating function at fixed (beta, v). In dense mode the trace term
// uses the full (I_vv + D^{-1})^{-1}; otherwise the cluster-diagonal blocks.
Eigen::VectorXd theta_score_impl(const Work& w, const Sweep& s, const Eigen::VectorXd& v,
                                 const VarCovSpec& vc, ThetaScoreForm form, bool dense,
                                 const Eigen::MatrixXd* Ivv_dense) {
  const int K = w.K, N = w.N;
  Eigen::MatrixXd Dinv = vc.block_inverse();
  const int m = vc.theta_dim();
  Eigen::VectorXd U(m);

  std::vector<Eigen::MatrixXd> K2inv_blocks(N);
  if (dense) {
    Eigen::MatrixXd K2 = *Ivv_dense;
    for (int i = 0; i < N; ++i) K2.block(i * K, i * K, K, K) += Dinv;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(K2);
    Eigen::MatrixXd K2inv = ldlt.solve(Eigen::MatrixXd::Identity(N * K, N * K));
    for (int i = 0; i < N; ++i) K2inv_blocks[i] = K2inv.block(i * K, i * K, K, K);
  } else {
    for (int i = 0; i < N; ++i) {
      Eigen::MatrixXd B = Dinv;
      for (int k = 0; k < K; ++k)
        B(k, k) += std::max(s.lambda[i * K + k] - s.qdiag[i * K + k], 0.0);
      K2inv_blocks[i] = Eigen::LLT<Eigen::MatrixXd>(B).solve(Eigen::MatrixXd::Identity(K, K));
    }
  }

  for (int c = 0; c < m; ++c) {
    Eigen::MatrixXd dD = vc.block_derivative(c);
    Eigen::MatrixXd DiD = Dinv * dD;
    double t1 = N * DiD.trace();
    Eigen::MatrixXd DiDDi = DiD * Dinv;
    double t2 = 0.0, t3 = 0.0;
    for (int i = 0; i < N; ++i) {
      auto vi = v.segment(i * K, K);
      t2 += vi.dot(DiDDi * vi);
      if (form == ThetaScoreForm::Paper)
        t3 -= (K2inv_blocks[i] * dD).trace();
      else
        t3 -= (K2inv_blocks[i] * DiDDi).trace();
    }
    U[c] = -0.5 * (t1 - t2 + t3);
  }
  return U;
}

// Laplace-approximate marginal objective at fixed (beta, v), used to select
// theta: PPLL - (N/2) log|D| - 1/2 log|I_vv + D^{-1}|. Unlike the fixed-v
// estimating-function root, maximizing this profile (with (beta, v)
// re-maximized per candidate) keeps the indirect dependence of the
// log-determinant on the profiled frailties, which matters for the variance
// components under soft event-type weights. Dense mode uses the exact
// log-determinant; structured mode the cluster-diagonal curvature.
double laplace_value(const Work& w, const Sweep& s, const Eigen::MatrixXd& beta,
                     const Eigen::VectorXd& v, const VarCovSpec& vc, bool dense) {
  Eigen::MatrixXd Dinv = vc.block_inverse();
  double ld = 0.0;
  if (dense) {
    Eigen::MatrixXd K2 = dense_Ivv(w, s);
    for (int i = 0; i < w.N; ++i) K2.block(i * w.K, i * w.K, w.K, w.K) += Dinv;
    Eigen::LLT<Eigen::MatrixXd> llt(K2);
    if (llt.info() != Eigen::Success) return kNegInf;
    for (int j = 0; j < K2.rows(); ++j) ld += 2.0 * std::log(llt.matrixLLT()(j, j));
  } else {
    for (int i = 0; i < w.N; ++i) {
      Eigen::MatrixXd B = Dinv;
      for (int k = 0; k < w.K; ++k)
        B(k, k) += std::max(s.lambda[i * w.K + k] - s.qdiag[i * w.K + k], 0.0);
      Eigen::LLT<Eigen::MatrixXd> llt(B);
      if (llt.info() != Eigen::Success) return kNegInf;
      for (int k = 0; k < w.K; ++k) ld += 2.0 * std::log(llt.matrixLLT()(k, k));
    }
  }
  return ppll_value(w, beta, v, Dinv) - 0.5 * w.N * vc.block_log_det() - 0.5 * ld;
}

InnerResult inner_impl(const Work& w, const VarCovSpec& varcov, const Eigen::MatrixXd& beta0,
                       const Eigen::VectorXd& v0, const SolverOptions& opt) {
  const int KP = w.K * w.p, NK = w.N * w.K;
  InnerResult res;
  res.beta = beta0;
  res.v = v0;
  Eigen::MatrixXd Dinv = varcov.block_inverse();

  if (w.weight_total == 0.0) {
    // Penalty-only optimum: v = 0, beta carries no information.
    res.v = Eigen::VectorXd::Zero(NK);
    res.degenerate = true;
    res.converged = true;
    res.pplog = 0.0;
    return res;
  }

  const bool dense = use_dense(w, opt);
  double cur_ppll = ppll_value(w, res.beta, res.v, Dinv);
  for (int it = 0; it < opt.max_inner; ++it) {
    Sweep s = run_sweep(w, res.beta, res.v, true);
    if (!s.finite) throw ConvergenceError("non-finite hazard during inner maximization");
    Eigen::VectorXd gb = s.score_b;
    Eigen::VectorXd gv = s.score_v_ev;
    for (int i = 0; i < w.N; ++i)
      gv.segment(i * w.K, w.K) -= Dinv * res.v.segment(i * w.K, w.K);
    res.max_score_beta = gb.size() ? gb.cwiseAbs().maxCoeff() : 0.0;
    res.max_score_v = gv.cwiseAbs().maxCoeff();
    if (std::max(res.max_score_beta, res.max_score_v) < opt.score_tol) {
      res.converged = true;
      res.pplog = cur_ppll;
      return res;
    }

    Eigen::VectorXd db, dv;
    if (dense) {
      Eigen::MatrixXd H = assemble_info(w, s);
      for (int i = 0; i < w.N; ++i) H.block(KP + i * w.K, KP + i * w.K, w.K, w.K) += Dinv;
      Eigen::VectorXd g(KP + NK);
      g << gb, gv;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
      Eigen::VectorXd step;
      if (ldlt.info() == Eigen::Success) step = ldlt.solve(g);
      if (ldlt.info() != Eigen::Success || !step.allFinite()) {
        H.diagonal().array() += opt.ridge_retry;
        ldlt.compute(H);
        if (ldlt.info() != Eigen::Success)
          throw ConvergenceError("singular Newton system in inner maximization");
        step = ldlt.solve(g);
      }
      db = step.head(KP);
      dv = step.tail(NK);
    } else {
      Arrowhead arrow;
      arrow.build(w, s, Dinv, 0.0);
      if (!arrow.ok) {
        arrow.build(w, s, Dinv, opt.ridge_retry);
        if (!arrow.ok) throw ConvergenceError("singular Newton system in inner maximization");
      }
      arrow.solve(gb, gv, db, dv);
    }

    // Step halving until the PPLL does not decrease.
    double alpha = 1.0;
    bool accepted = false;
    for (int half = 0; half < 40; ++half) {
      Eigen::MatrixXd beta_new = res.beta;
      for (int k = 0; k < w.K; ++k) beta_new.row(k) += alpha * db.segment(k * w.p, w.p).transpose();
      Eigen::VectorXd v_new = res.v + alpha * dv;
      double ppll_new = ppll_value(w, beta_new, v_new, Dinv);
      if (ppll_new >= cur_ppll - 1e-12 * (1.0 + std::abs(cur_ppll)) && ppll_new != kNegInf) {
        res.beta = beta_new;
        res.v = v_new;
        cur_ppll = ppll_new;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    ++res.iterations;
    if (!accepted) break;  // stalled; report with current diagnostics
  }
  // Final score check.
  Sweep s = run_sweep(w, res.beta, res.v, false);
  Eigen::VectorXd gv = s.score_v_ev;
  for (int i = 0; i < w.N; ++i)
    gv.segment(i * w.K, w.K) -= Dinv * res.v.segment(i * w.K, w.K);
  res.max_score_beta = s.score_b.size() ? s.score_b.cwiseAbs().maxCoeff() : 0.0;
  res.max_score_v = gv.cwiseAbs().maxCoeff();
  res.converged = std::max(res.max_score_beta, res.max_score_v) < opt.score_tol;
  res.pplog = cur_ppll;
  return res;
}

}  // namespace

Eigen::VectorXd FrailtyFit::se_beta_hessian() const {
  return var_hessian_beta.diagonal().cwiseMax(0.0).cwiseSqrt();
}

Eigen::VectorXd FrailtyFit::se_beta_sandwich() const {
  return var_sandwich_beta.diagonal().cwiseMax(0.0).cwiseSqrt();
}

double weighted_ppll(const StudyDataset& data, const Eigen::MatrixXd& weights,
                     const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                     const VarCovSpec& varcov) {
  Work w(data, weights);
  return ppll_value(w, beta, v, varcov.block_inverse());
}

Eigen::VectorXd score_beta(const StudyDataset& data, const Eigen::MatrixXd& weights,
                           const Eigen::MatrixXd& beta, const Eigen::VectorXd& v, int cause) {
  if (cause < 1 || cause > data.num_causes()) throw std::out_of_range("cause");
  Work w(data, weights);
  Sweep s = run_sweep(w, beta, v, false);
  return s.score_b.segment((cause - 1) * w.p, w.p);
}

Eigen::VectorXd score_v(const StudyDataset& data, const Eigen::MatrixXd& weights,
                        const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                        const VarCovSpec& varcov) {
  Work w(data, weights);
  Sweep s = run_sweep(w, beta, v, false);
  Eigen::MatrixXd Dinv = varcov.block_inverse();
  Eigen::VectorXd g = s.score_v_ev;
  for (int i = 0; i < w.N; ++i)
    g.segment(i * w.K, w.K) -= Dinv * v.segment(i * w.K, w.K);
  return g;
}

Eigen::VectorXd score_theta(const StudyDataset& data, const Eigen::MatrixXd& weights,
                            const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                            const VarCovSpec& varcov, const SolverOptions& options) {
  Work w(data, weights);
  Sweep s = run_sweep(w, beta, v, true);
  const bool dense = use_dense(w, options);
  Eigen::MatrixXd Ivv;
  if (dense) Ivv = dense_Ivv(w, s);
  return theta_score_impl(w, s, v, varcov, options.theta_form, dense, dense ? &Ivv : nullptr);
}

double theta_score_formula(const Eigen::MatrixXd& D, const Eigen::MatrixXd& dD,
                           const Eigen::VectorXd& v, const Eigen::MatrixXd& K2inv) {
  Eigen::MatrixXd Dinv = D.ldlt().solve(Eigen::MatrixXd::Identity(D.rows(), D.cols()));
  double t1 = (Dinv * dD).trace();
  double t2 = v.dot(Dinv * dD * Dinv * v);
  double t3 = (K2inv * dD).trace();
  return -0.5 * (t1 - t2 + t3);
}

Eigen::MatrixXd information_matrix(const StudyDataset& data, const Eigen::MatrixXd& weights,
                                   const Eigen::MatrixXd& beta, const Eigen::VectorXd& v) {
  Work w(data, weights);
  Sweep s = run_sweep(w, beta, v, true);
  return assemble_info(w, s);
}

InnerResult inner_maximize(const StudyDataset& data, const Eigen::MatrixXd& weights,
                           const VarCovSpec& varcov, const Eigen::MatrixXd& beta0,
                           const Eigen::VectorXd& v0, const SolverOptions& options) {
  Work w(data, weights);
  return inner_impl(w, varcov, beta0, v0, options);
}

Eigen::MatrixXd sandwich_variance(const Eigen::MatrixXd& H, const Eigen::MatrixXd& info) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
  if (ldlt.info() != Eigen::Success) throw ConvergenceError("singular Hessian in sandwich variance");
  Eigen::MatrixXd Hinv = ldlt.solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
  Eigen::MatrixXd V = Hinv * info * Hinv;
  return 0.5 * (V + V.transpose());
}

double laplace_objective(const StudyDataset& data, const Eigen::MatrixXd& weights,
                         const Eigen::MatrixXd& beta, const Eigen::VectorXd& v,
                         const VarCovSpec& varcov) {
  Work w(data, weights);
  Sweep s = run_sweep(w, beta, v, true);
  Eigen::MatrixXd Dinv = varcov.block_inverse();
  Eigen::MatrixXd K2 = dense_Ivv(w, s);
  for (int i = 0; i < w.N; ++i) K2.block(i * w.K, i * w.K, w.K, w.K) += Dinv;
  double ld_K2 = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(K2);
  if (llt.info() != Eigen::Success) throw ConvergenceError("K2 not positive definite");
  for (int j = 0; j < K2.rows(); ++j) ld_K2 += 2.0 * std::log(llt.matrixLLT()(j, j));
  double ppll = ppll_value(w, beta, v, Dinv);
  return -0.5 * w.N * varcov.block_log_det() + ppll - 0.5 * ld_K2;
}

FrailtyFit fit(const StudyDataset& data, const Eigen::MatrixXd& weights,
               const VarCovSpec& varcov0, const SolverOptions& options) {
  Work w(data, weights);
  const int KP = w.K * w.p, NK = w.N * w.K;
  const bool dense = use_dense(w, options);

  VarCovSpec vc = varcov0;
  vc.project_admissible(options.sigma2_floor, options.rho_max);
  FrailtyFit out(vc);
  out.beta = Eigen::MatrixXd::Zero(w.K, w.p);
  out.v = Eigen::VectorXd::Zero(NK);

  Eigen::MatrixXd beta = Eigen::MatrixXd::Zero(w.K, w.p);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(NK);
  InnerResult inner;
  bool theta_converged = false;
  bool at_floor = false;
  double theta_score = 0.0;

  // Profile objective: maximize over (beta, v) at the candidate theta
  // (warm-started, so repeated evaluations are cheap), then evaluate the
  // Laplace-approximate marginal objective at the profiled frailties. Theta
  // is chosen to maximize this profile.
  const int m = vc.theta_dim();
  auto profile_value = [&](const VarCovSpec& cand) {
    inner = inner_impl(w, cand, beta, v, options);
    beta = inner.beta;
    v = inner.v;
    out.inner_iterations += inner.iterations;
    Sweep s = run_sweep(w, beta, v, true);
    return laplace_value(w, s, beta, v, cand, dense);
  };
  auto project = [&](VarCovSpec& cand) {
    return cand.project_admissible(options.sigma2_floor, options.rho_max);
  };
  // Components pinned at the admissible boundary with the profile gradient
  // pushing outward (active-set view of the sigma2 floor and the correlation
  // caps); used for boundary classification of the final gradient.
  auto pinned_mask = [&](const VarCovSpec& cand, const Eigen::VectorXd& U) {
    std::vector<bool> pin(m, false);
    if (cand.structure() == VarCovStructure::SharedExchangeable) {
      if (cand.at_floor(options.sigma2_floor) && U[0] < 0.0) pin[0] = true;
      double rho_lo =
          w.K > 1 ? -options.rho_max / (w.K - 1) : -options.rho_max;
      if (cand.rho() >= options.rho_max * (1 - 1e-9) && U[1] > 0.0) pin[1] = true;
      if (cand.rho() <= rho_lo * (1 - 1e-9) + 0.0 && U[1] < 0.0 && cand.rho() <= rho_lo)
        pin[1] = true;
    }
    return pin;
  };
  auto free_norm = [&](const Eigen::VectorXd& U, const std::vector<bool>& pin) {
    double nrm = 0.0;
    for (int c = 0; c < m; ++c)
      if (!pin[c]) nrm = std::max(nrm, std::abs(U[c]));
    return nrm;
  };

  // Search coordinates for the pattern search. The exchangeable profile has a
  // strong (sigma2, rho) ridge along which axis moves in the natural
  // parameters stall at the variance floor, so the search runs in the
  // eigenvalues of the frailty block, (sigma2 (1+(K-1) rho), sigma2 (1-rho)),
  // where the ridge is axis-aligned. Other structures search theta directly.
  const bool eig_coords =
      vc.structure() == VarCovStructure::SharedExchangeable && w.K > 1;
  auto to_search = [&](const VarCovSpec& s) -> Eigen::VectorXd {
    Eigen::VectorXd t = s.theta();
    if (!eig_coords) return t;
    Eigen::VectorXd u(2);
    u << t[0] * (1.0 + (w.K - 1) * t[1]), t[0] * (1.0 - t[1]);
    return u;
  };
  auto from_search = [&](const Eigen::VectorXd& u) -> VarCovSpec {
    VarCovSpec cand = vc;
    if (eig_coords) {
      double a = std::max(u[0], options.sigma2_floor);
      double b = std::max(u[1], options.sigma2_floor);
      double s2 = (a + (w.K - 1) * b) / w.K;
      Eigen::VectorXd t(2);
      t << s2, (a - b) / (w.K * s2);
      cand = vc.with_theta(t);
    } else {
      cand = vc.with_theta(u);
    }
    project(cand);
    return cand;
  };

  if (w.weight_total != 0.0) {
    // Coordinate pattern search with expanding/contracting steps. Derivative
    // free on purpose: near the variance floor the profile is only one-sided
    // differentiable, and each candidate is a full (cheap, warm-started)
    // inner maximization anyway.
    double cur = profile_value(vc);
    Eigen::MatrixXd best_beta = beta;
    Eigen::VectorXd best_v = v;
    Eigen::VectorXd u = to_search(vc);
    Eigen::VectorXd stepsz(m);
    for (int c = 0; c < m; ++c) stepsz[c] = 0.1 * (1.0 + std::abs(u[c]));
    const double step_tol = std::max(options.theta_tol, 1e-7);
    auto better = [&](double val) { return val > cur + 1e-11 * (1.0 + std::abs(cur)); };
    for (int outer = 0; outer < options.max_outer && !theta_converged; ++outer) {
      ++out.outer_iterations;
      bool any_move = false;
      for (int c = 0; c < m; ++c) {
        for (double dir : {1.0, -1.0}) {
          Eigen::VectorXd up = u;
          up[c] += dir * stepsz[c];
          VarCovSpec cand = from_search(up);
          if ((cand.theta() - vc.theta()).cwiseAbs().maxCoeff() < 1e-14) continue;
          double val = profile_value(cand);
          if (!better(val)) {
            beta = best_beta;  // discard the profiled state of a rejected move
            v = best_v;
            continue;
          }
          vc = cand;
          u = to_search(vc);
          cur = val;
          best_beta = beta;
          best_v = v;
          any_move = true;
          // March further in the improving direction with growing steps.
          for (int ext = 0; ext < 30; ++ext) {
            stepsz[c] = std::min(2.0 * stepsz[c], 0.5 * (1.0 + std::abs(u[c])));
            up = u;
            up[c] += dir * stepsz[c];
            VarCovSpec c2 = from_search(up);
            if ((c2.theta() - vc.theta()).cwiseAbs().maxCoeff() < 1e-14) break;
            double v2 = profile_value(c2);
            if (!better(v2)) {
              beta = best_beta;
              v = best_v;
              break;
            }
            vc = c2;
            u = to_search(vc);
            cur = v2;
            best_beta = beta;
            best_v = v;
          }
          break;  // the opposite-direction probe is stale after a move
        }
      }
      if (!any_move) {
        double rel = 0.0;
        for (int c = 0; c < m; ++c) {
          stepsz[c] *= 0.25;
          rel = std::max(rel, stepsz[c] / (1.0 + std::abs(u[c])));
        }
        if (rel < step_tol) theta_converged = true;
      }
    }
    beta = best_beta;
    v = best_v;

    // One-sided-aware finite-difference gradient of the profile objective at
    // the optimum, reported as the theta diagnostic and used to classify
    // boundary solutions.
    Eigen::VectorXd U(m);
    for (int c = 0; c < m; ++c) {
      double h = 1e-5 * (1.0 + std::abs(vc.theta()[c]));
      Eigen::VectorXd tp = vc.theta(), tn = vc.theta();
      tp[c] += h;
      tn[c] -= h;
      VarCovSpec cp = vc.with_theta(tp), cn = vc.with_theta(tn);
      project(cp);
      project(cn);
      double hh = cp.theta()[c] - cn.theta()[c];
      if (hh <= 0.0) {
        U[c] = 0.0;
        continue;
      }
      double fp = profile_value(cp);
      beta = best_beta;
      v = best_v;
      double fn = profile_value(cn);
      beta = best_beta;
      v = best_v;
      U[c] = (fp - fn) / hh;
    }
    std::vector<bool> pin = pinned_mask(vc, U);
    theta_score = free_norm(U, pin);
    at_floor = vc.at_floor(options.sigma2_floor) ||
               std::find(pin.begin(), pin.end(), true) != pin.end();
  } else {
    inner = inner_impl(w, vc, beta, v, options);
    beta = inner.beta;
    v = inner.v;
    out.degenerate = true;
    theta_converged = true;
  }

  // Re-polish (beta, v) at the final theta.
  if (!out.degenerate) {
    inner = inner_impl(w, vc, beta, v, options);
    beta = inner.beta;
    v = inner.v;
    out.inner_iterations += inner.iterations;
  }

  out.beta = beta;
  out.v = v;
  out.theta = vc;
  out.pplog = inner.pplog;
  out.max_score_beta = inner.max_score_beta;
  out.max_score_v = inner.max_score_v;
  out.max_score_theta = theta_score;
  out.theta_at_floor = at_floor;
  out.converged = inner.converged && theta_converged;

  if (!out.converged) {
    std::ostringstream os;
    os << "frailty fit did not converge: max|U(beta)|=" << out.max_score_beta
       << " max|U(v)|=" << out.max_score_v
       << " |grad(theta)|=" << theta_score << " after " << out.outer_iterations
       << " outer iterations";
    throw ConvergenceError(os.str());
  }

  if (options.compute_variances && !out.degenerate) {
    Eigen::MatrixXd Dinv = vc.block_inverse();
    Sweep s = run_sweep(w, beta, v, true);
    if (dense || options.store_full_variances) {
      Eigen::MatrixXd info = assemble_info(w, s);
      Eigen::MatrixXd H = info;
      for (int i = 0; i < w.N; ++i) H.block(KP + i * w.K, KP + i * w.K, w.K, w.K) += Dinv;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
      if (ldlt.info() != Eigen::Success)
        throw ConvergenceError("singular Hessian when computing variances");
      Eigen::MatrixXd Hinv = ldlt.solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
      Hinv = 0.5 * (Hinv + Hinv.transpose());
      Eigen::MatrixXd V = Hinv * info * Hinv;
      V = 0.5 * (V + V.transpose());
      out.var_hessian_beta = Hinv.topLeftCorner(KP, KP);
      out.var_sandwich_beta = V.topLeftCorner(KP, KP);
      out.var_hessian = Hinv;
      out.var_sandwich = V;
    } else {
      // Matrix-free: beta blocks of H^{-1} and H^{-1} I H^{-1} via PCG.
      HOperator hop{&w, &s, Dinv};
      Arrowhead pre;
      pre.build(w, s, Dinv, 0.0);
      if (!pre.ok) pre.build(w, s, Dinv, options.ridge_retry);
      if (!pre.ok) throw ConvergenceError("singular preconditioner when computing variances");
      Eigen::MatrixXd Z(KP + NK, KP);
      for (int c = 0; c < KP; ++c) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(KP + NK);
        e[c] = 1.0;
        Z.col(c) = pcg_solve(hop, pre, e);
      }
      out.var_hessian_beta = Z.topRows(KP);
      out.var_hessian_beta = 0.5 * (out.var_hessian_beta + out.var_hessian_beta.transpose()).eval();
      Eigen::MatrixXd IZ(KP + NK, KP);
      for (int c = 0; c < KP; ++c) IZ.col(c) = hop.apply_info(Z.col(c));
      out.var_sandwich_beta = Z.transpose() * IZ;
      out.var_sandwich_beta = 0.5 * (out.var_sandwich_beta + out.var_sandwich_beta.transpose()).eval();
    }
  } else {
    out.var_hessian_beta = Eigen::MatrixXd::Zero(KP, KP);
    out.var_sandwich_beta = Eigen::MatrixXd::Zero(KP, KP);
  }
  return out;
}

}  // namespace crfrail
