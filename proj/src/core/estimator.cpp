#include "estimator.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>

namespace mlmgof {

namespace {

constexpr double kLogSdFloor = -8.0;
constexpr double kLogSdCeil = 8.0;
constexpr double kSeparationBound = 30.0;
constexpr double kLog2Pi = 1.8378770664093454836;

// ---------------------------------------------------------------------------
// Unconstrained covariance parameterization: Omega = C C^T with C lower
// triangular and log-scale diagonal. Independent structure keeps only the
// diagonal parameters.
// ---------------------------------------------------------------------------
class CovFactor {
public:
  static int n_params(int dim, CovStructure s) {
    return s == CovStructure::Unstructured ? dim * (dim + 1) / 2 : dim;
  }

  CovFactor() = default;

  CovFactor(int dim, CovStructure structure, const Eigen::VectorXd& params)
      : dim_(dim), structure_(structure) {
    if (params.size() != n_params(dim, structure))
      throw EstimationError(EstimationError::Code::BadVarianceComponents,
                            "covariance parameter count mismatch");
    C_ = Eigen::MatrixXd::Zero(dim, dim);
    diag_clamped_.assign(dim, false);
    int p = 0;
    for (int i = 0; i < dim; ++i) {
      if (structure == CovStructure::Unstructured)
        for (int j = 0; j < i; ++j) C_(i, j) = params[p++];
      const double t = params[p++];
      const double tc = std::clamp(t, kLogSdFloor, kLogSdCeil);
      diag_clamped_[i] = tc != t;
      C_(i, i) = std::exp(tc);
    }
    finish();
  }

  static CovFactor from_omega(const Eigen::MatrixXd& omega) {
    CovFactor f;
    f.dim_ = static_cast<int>(omega.rows());
    f.structure_ = CovStructure::Unstructured;
    f.diag_clamped_.assign(f.dim_, false);
    if (f.dim_ == 0 || omega.lpNorm<Eigen::Infinity>() < 1e-290) {
      f.zero_ = true;
      return f;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(omega);
    if (llt.info() != Eigen::Success)
      throw EstimationError(EstimationError::Code::BadVarianceComponents,
                            "covariance matrix is not positive definite");
    f.C_ = llt.matrixL();
    f.finish();
    return f;
  }

  int dim() const { return dim_; }
  int n_params() const { return zero_ ? 0 : n_params(dim_, structure_); }
  bool zero() const { return zero_; }
  int effective_dim() const { return zero_ ? 0 : dim_; }
  const Eigen::MatrixXd& precision() const { return P_; }

  Eigen::MatrixXd omega() const {
    if (zero_) return Eigen::MatrixXd::Zero(dim_, dim_);
    return C_ * C_.transpose();
  }

  bool boundary() const {
    for (bool b : diag_clamped_)
      if (b) return true;
    return false;
  }

  double log_prior(const Eigen::VectorXd& u) const {
    Eigen::VectorXd a = C_.triangularView<Eigen::Lower>().solve(u);
    return -0.5 * a.squaredNorm() - logdet_ - 0.5 * dim_ * kLog2Pi;
  }

  // d log N(u; 0, CC^T) / d params, accumulated with weight w.
  void add_param_grad(const Eigen::VectorXd& u, double w,
                      Eigen::Ref<Eigen::VectorXd> g) const {
    Eigen::VectorXd a = C_.triangularView<Eigen::Lower>().solve(u);
    Eigen::MatrixXd M = a * a.transpose();
    M.diagonal().array() -= 1.0;
    Eigen::MatrixXd G =
        C_.transpose().triangularView<Eigen::Upper>().solve(M);
    int p = 0;
    for (int i = 0; i < dim_; ++i) {
      if (structure_ == CovStructure::Unstructured)
        for (int j = 0; j < i; ++j) g[p++] += w * G(i, j);
      g[p++] += diag_clamped_[i] ? 0.0 : w * G(i, i) * C_(i, i);
    }
  }

private:
  void finish() {
    logdet_ = 0.0;
    for (int i = 0; i < dim_; ++i) logdet_ += std::log(C_(i, i));
    Eigen::MatrixXd Ci = Eigen::MatrixXd::Identity(dim_, dim_);
    C_.triangularView<Eigen::Lower>().solveInPlace(Ci);
    P_ = Ci.transpose() * Ci;
  }

  int dim_ = 0;
  CovStructure structure_ = CovStructure::Unstructured;
  bool zero_ = false;
  Eigen::MatrixXd C_, P_;
  double logdet_ = 0.0;
  std::vector<bool> diag_clamped_;
};

// Tensor-product grid over a 1-D rule: column s holds the node vector,
// logw its log-weight, q = |z|^2 / 2.
struct TensorGrid {
  Eigen::MatrixXd z; // dim x count
  Eigen::VectorXd logw;
  Eigen::VectorXd q;
};

TensorGrid make_tensor(const QuadratureRule& rule, int dim) {
  const int k = static_cast<int>(rule.nodes.size());
  long count = 1;
  for (int d = 0; d < dim; ++d) count *= k;
  TensorGrid t;
  t.z.resize(dim, count);
  t.logw.resize(count);
  t.q.resize(count);
  std::vector<int> idx(dim, 0);
  for (long s = 0; s < count; ++s) {
    double lw = 0.0, q = 0.0;
    for (int d = 0; d < dim; ++d) {
      const double x = rule.nodes[idx[d]];
      t.z(d, s) = x;
      lw += std::log(rule.weights[idx[d]]);
      q += 0.5 * x * x;
    }
    t.logw[s] = lw;
    t.q[s] = q;
    for (int d = dim - 1; d >= 0; --d) {
      if (++idx[d] < k) break;
      idx[d] = 0;
    }
  }
  return t;
}

double logsumexp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

// ---------------------------------------------------------------------------
// Nested AGQ likelihood engine.
// ---------------------------------------------------------------------------
class Evaluator {
public:
  Evaluator(const DesignMatrices& d, const QuadratureRule& rule)
      : d_(d), rule_(rule) {
    u_cache_.assign(n_subjects_total(), Eigen::VectorXd());
    v_cache_.assign(d_.families.size(), Eigen::VectorXd());
  }

  int n_subjects_total() const {
    int n = 0;
    for (const auto& f : d_.families) n += static_cast<int>(f.subjects.size());
    return n;
  }

  // Score layout: [beta | theta2 | theta3]; score may be null.
  double eval(const Eigen::VectorXd& beta, const CovFactor& c2,
              const CovFactor& c3, Eigen::VectorXd* score) {
    const int nb = d_.n_beta;
    const int np2 = c2.n_params();
    const int np3 = c3.n_params();
    if (score) score->setZero(nb + np2 + np3);

    double ll = 0.0;
    for (std::size_t j = 0; j < d_.families.size(); ++j)
      ll += eval_family(j, beta, c2, c3, score, np2, np3);
    if (!std::isfinite(ll))
      throw EstimationError(EstimationError::Code::NonFiniteLikelihood,
                            "marginal log-likelihood is not finite");
    return ll;
  }

  EbModes modes(const Eigen::VectorXd& beta, const CovFactor& c2,
                const CovFactor& c3) {
    EbModes out;
    out.level2.resize(count_level2());
    out.level3.resize(d_.families.size(), Eigen::VectorXd::Zero(c3.dim()));
    for (std::size_t j = 0; j < d_.families.size(); ++j) {
      const FamilyBlock& fam = d_.families[j];
      std::vector<Eigen::VectorXd> us(fam.subjects.size(),
                                      Eigen::VectorXd::Zero(c2.effective_dim()));
      Eigen::VectorXd v = Eigen::VectorXd::Zero(c3.effective_dim());
      Eigen::MatrixXd S;
      if (c3.effective_dim() > 0 || c2.effective_dim() > 0)
        family_mode(fam, beta, c2, c3, v, us, c3.effective_dim() > 0 ? &S : nullptr);
      out.level3[fam.level3_index] = Eigen::VectorXd::Zero(c3.dim());
      if (c3.effective_dim() > 0) out.level3[fam.level3_index] = v;
      for (std::size_t k = 0; k < fam.subjects.size(); ++k) {
        Eigen::VectorXd u = Eigen::VectorXd::Zero(c2.dim());
        if (c2.effective_dim() > 0) u = us[k];
        out.level2[fam.subjects[k].level2_index] = u;
      }
    }
    return out;
  }

  void set_structures(CovStructure s2, CovStructure s3) {
    structure2_ = s2;
    structure3_ = s3;
  }

private:
  int count_level2() const {
    int m = 0;
    for (const auto& f : d_.families)
      for (const auto& s : f.subjects)
        m = std::max(m, s.level2_index + 1);
    return m;
  }

  const TensorGrid& tensor(int dim) {
    auto it = grids_.find(dim);
    if (it == grids_.end())
      it = grids_.emplace(dim, make_tensor(rule_, dim)).first;
    return it->second;
  }

  static double bernoulli_sum(const Eigen::VectorXd& y, const Eigen::VectorXd& eta) {
    double s = 0.0;
    for (long i = 0; i < y.size(); ++i)
      s += y[i] * eta[i] - log1pexp(eta[i]);
    return s;
  }

  // Damped Newton for the subject posterior mode given fixed eta_base.
  // Returns the mode objective; fills A with the negative Hessian there.
  double subject_newton(const SubjectBlock& sb, const Eigen::VectorXd& eta_base,
                        const CovFactor& c2, Eigen::VectorXd& u,
                        Eigen::MatrixXd& A) {
    const int d = static_cast<int>(u.size());
    const long m = sb.y.size();
    Eigen::VectorXd eta = eta_base + sb.Z2 * u;
    double obj = bernoulli_sum(sb.y, eta) + c2.log_prior(u);
    if (!std::isfinite(obj)) {
      u.setZero();
      eta = eta_base;
      obj = bernoulli_sum(sb.y, eta) + c2.log_prior(u);
    }
    Eigen::VectorXd g(d), step(d), u_try(d), eta_try(m);
    for (int it = 0; it < 100; ++it) {
      g = -(c2.precision() * u);
      A = c2.precision();
      for (long i = 0; i < m; ++i) {
        const double p = invlogit(eta[i]);
        const double w = std::max(p * (1.0 - p), 1e-12);
        g += (sb.y[i] - p) * sb.Z2.row(i).transpose();
        A.noalias() += w * sb.Z2.row(i).transpose() * sb.Z2.row(i);
      }
      if (g.lpNorm<Eigen::Infinity>() < 1e-9) return obj;
      step = A.llt().solve(g);
      double t = 1.0;
      bool moved = false;
      for (int h = 0; h < 40; ++h) {
        u_try = u + t * step;
        eta_try = eta_base + sb.Z2 * u_try;
        const double obj_try = bernoulli_sum(sb.y, eta_try) + c2.log_prior(u_try);
        if (std::isfinite(obj_try) && obj_try >= obj - 1e-14) {
          u = u_try;
          eta = eta_try;
          obj = obj_try;
          moved = true;
          break;
        }
        t *= 0.5;
      }
      if (!moved) {
        if (g.lpNorm<Eigen::Infinity>() < 1e-5) return obj;
        throw EstimationError(EstimationError::Code::ModeSearchFailure,
                              "subject mode search stalled");
      }
    }
    // Rebuild A at the final point for the caller.
    A = c2.precision();
    g = -(c2.precision() * u);
    for (long i = 0; i < m; ++i) {
      const double p = invlogit(eta[i]);
      const double w = std::max(p * (1.0 - p), 1e-12);
      g += (sb.y[i] - p) * sb.Z2.row(i).transpose();
      A.noalias() += w * sb.Z2.row(i).transpose() * sb.Z2.row(i);
    }
    if (g.lpNorm<Eigen::Infinity>() > 1e-5)
      throw EstimationError(EstimationError::Code::ModeSearchFailure,
                            "subject mode search did not converge");
    return obj;
  }

  // Adaptive GH integral over one subject's random effects. eta_base holds
  // X beta + Z3 v. Optionally accumulates the posterior-weighted score
  // (beta block and level-2 covariance block).
  double inner_integral(const SubjectBlock& sb, const Eigen::VectorXd& eta_base,
                        const CovFactor& c2, Eigen::VectorXd& u_warm,
                        Eigen::VectorXd* sbeta, Eigen::VectorXd* stheta2) {
    const long m = sb.y.size();
    if (c2.effective_dim() == 0) {
      double s = bernoulli_sum(sb.y, eta_base);
      if (sbeta)
        for (long i = 0; i < m; ++i)
          *sbeta += (sb.y[i] - invlogit(eta_base[i])) * sb.X.row(i).transpose();
      return s;
    }
    const int d = c2.dim();
    Eigen::MatrixXd A(d, d);
    subject_newton(sb, eta_base, c2, u_warm, A);
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
      throw EstimationError(EstimationError::Code::ModeSearchFailure,
                            "subject curvature is not positive definite");
    const Eigen::MatrixXd R = llt.matrixL();
    double logdet_half = 0.0;
    for (int i = 0; i < d; ++i) logdet_half += std::log(R(i, i));

    const TensorGrid& grid = tensor(d);
    const long ns = grid.logw.size();
    Eigen::VectorXd vals(ns);
    Eigen::MatrixXd SB, U;
    if (sbeta) {
      SB.setZero(d_.n_beta, ns);
      U.resize(d, ns);
    }
    Eigen::VectorXd u_s(d), eta(m);
    for (long s = 0; s < ns; ++s) {
      u_s = R.transpose().triangularView<Eigen::Upper>().solve(grid.z.col(s));
      u_s += u_warm;
      eta = eta_base + sb.Z2 * u_s;
      vals[s] = grid.logw[s] + grid.q[s] + bernoulli_sum(sb.y, eta) +
                c2.log_prior(u_s);
      if (sbeta) {
        U.col(s) = u_s;
        for (long i = 0; i < m; ++i)
          SB.col(s) += (sb.y[i] - invlogit(eta[i])) * sb.X.row(i).transpose();
      }
    }
    const double mval = vals.maxCoeff();
    Eigen::VectorXd w = (vals.array() - mval).exp();
    const double wsum = w.sum();
    if (sbeta) {
      w /= wsum;
      *sbeta += SB * w;
      for (long s = 0; s < ns; ++s)
        c2.add_param_grad(U.col(s), w[s], *stheta2);
    }
    return mval + std::log(wsum) - logdet_half + 0.5 * d * kLog2Pi;
  }

  // Joint posterior mode over (v, u_1..u_K) by block Newton sweeps. On exit
  // v and us hold the mode; S (if requested) the profiled precision of v.
  void family_mode(const FamilyBlock& fam, const Eigen::VectorXd& beta,
                   const CovFactor& c2, const CovFactor& c3, Eigen::VectorXd& v,
                   std::vector<Eigen::VectorXd>& us, Eigen::MatrixXd* S) {
    const int r3 = c3.effective_dim();
    const int r2 = c2.effective_dim();
    const std::size_t K = fam.subjects.size();
    std::vector<Eigen::VectorXd> etaX(K);
    for (std::size_t k = 0; k < K; ++k) etaX[k] = fam.subjects[k].X * beta;

    if (r3 == 0) {
      Eigen::MatrixXd A(r2, r2);
      for (std::size_t k = 0; k < K; ++k)
        subject_newton(fam.subjects[k], etaX[k], c2, us[k], A);
      return;
    }

    // Damped Newton on the joint density of (v, u_1..u_K), solved through
    // the arrow structure of the Hessian: subject blocks A_k on the
    // diagonal, couplings B_k to v, Schur complement S for the v step.
    auto joint_obj = [&](const Eigen::VectorXd& vv,
                         const std::vector<Eigen::VectorXd>& uu) {
      double o = c3.log_prior(vv);
      for (std::size_t k = 0; k < K; ++k) {
        const SubjectBlock& sb = fam.subjects[k];
        Eigen::VectorXd eta = etaX[k] + sb.Z3 * vv;
        if (r2 > 0) {
          eta += sb.Z2 * uu[k];
          o += c2.log_prior(uu[k]);
        }
        o += bernoulli_sum(sb.y, eta);
      }
      return o;
    };

    if (!std::isfinite(joint_obj(v, us))) {
      v.setZero();
      for (auto& u : us) u.setZero();
    }
    double obj = joint_obj(v, us);

    std::vector<Eigen::MatrixXd> Ak(K), Bk(K);
    std::vector<Eigen::VectorXd> gu(K), du(K), u_try(K);
    Eigen::VectorXd gv(r3), dv(r3), v_try(r3);
    bool done = false;
    for (int it = 0; it < 100; ++it) {
      gv = -(c3.precision() * v);
      Eigen::MatrixXd Svv = c3.precision();
      Eigen::VectorXd rhs = gv;
      double gmax = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const SubjectBlock& sb = fam.subjects[k];
        Eigen::VectorXd eta = etaX[k] + sb.Z3 * v;
        if (r2 > 0) eta += sb.Z2 * us[k];
        Ak[k] = c2.precision();
        Bk[k].setZero(std::max(r2, 1), r3);
        gu[k] = r2 > 0 ? (-(c2.precision() * us[k])).eval()
                       : Eigen::VectorXd::Zero(0);
        for (long i = 0; i < sb.y.size(); ++i) {
          const double p = invlogit(eta[i]);
          const double w = std::max(p * (1.0 - p), 1e-12);
          gv += (sb.y[i] - p) * sb.Z3.row(i).transpose();
          Svv.noalias() += w * sb.Z3.row(i).transpose() * sb.Z3.row(i);
          if (r2 > 0) {
            gu[k] += (sb.y[i] - p) * sb.Z2.row(i).transpose();
            Ak[k].noalias() += w * sb.Z2.row(i).transpose() * sb.Z2.row(i);
            Bk[k].noalias() += w * sb.Z2.row(i).transpose() * sb.Z3.row(i);
          }
        }
        if (r2 > 0) {
          gmax = std::max(gmax, gu[k].lpNorm<Eigen::Infinity>());
          Svv.noalias() -= Bk[k].transpose() * Ak[k].llt().solve(Bk[k]);
        }
      }
      // rhs = gv - sum_k Bk' Ak^-1 gu_k
      rhs = gv;
      for (std::size_t k = 0; k < K; ++k)
        if (r2 > 0) rhs.noalias() -= Bk[k].transpose() * Ak[k].llt().solve(gu[k]);
      gmax = std::max(gmax, gv.lpNorm<Eigen::Infinity>());
      // Scale with the objective: line-search progress on a density of
      // magnitude |obj| bottoms out near machine epsilon times |obj|, so an
      // absolute gradient floor is unreachable for large families.
      if (gmax < 1e-9 * (1.0 + std::abs(obj))) {
        done = true;
        break;
      }
      const Eigen::LLT<Eigen::MatrixXd> sllt(Svv);
      if (sllt.info() != Eigen::Success)
        throw EstimationError(EstimationError::Code::ModeSearchFailure,
                              "family curvature is not positive definite");
      dv = sllt.solve(rhs);
      for (std::size_t k = 0; k < K; ++k)
        if (r2 > 0) du[k] = Ak[k].llt().solve(gu[k] - Bk[k] * dv);

      double t = 1.0;
      bool moved = false;
      for (int h = 0; h < 40; ++h) {
        v_try = v + t * dv;
        for (std::size_t k = 0; k < K; ++k)
          if (r2 > 0) u_try[k] = us[k] + t * du[k];
        const double obj_try = joint_obj(v_try, r2 > 0 ? u_try : us);
        if (std::isfinite(obj_try) && obj_try >= obj - 1e-14) {
          v = v_try;
          if (r2 > 0) us = u_try;
          obj = obj_try;
          moved = true;
          break;
        }
        t *= 0.5;
      }
      if (!moved) {
        if (gmax < 1e-5 * (1.0 + std::abs(obj))) {
          done = true;
          break;
        }
        throw EstimationError(EstimationError::Code::ModeSearchFailure,
                              "family mode search stalled");
      }
    }
    if (!done)
      throw EstimationError(EstimationError::Code::ModeSearchFailure,
                            "family mode search did not converge");

    if (!S) return;
    // Profiled precision of v: Schur complement of the joint negative
    // Hessian at the mode.
    Eigen::MatrixXd Avv = c3.precision();
    *S = Eigen::MatrixXd::Zero(r3, r3);
    for (std::size_t k = 0; k < K; ++k) {
      const SubjectBlock& sb = fam.subjects[k];
      Eigen::VectorXd eta = etaX[k] + sb.Z3 * v;
      if (r2 > 0) eta += sb.Z2 * us[k];
      Eigen::MatrixXd Ak = c2.precision();
      Eigen::MatrixXd Bk = Eigen::MatrixXd::Zero(std::max(r2, 1), r3);
      for (long i = 0; i < sb.y.size(); ++i) {
        const double p = invlogit(eta[i]);
        const double w = std::max(p * (1.0 - p), 1e-12);
        Avv.noalias() += w * sb.Z3.row(i).transpose() * sb.Z3.row(i);
        if (r2 > 0) {
          Ak.noalias() += w * sb.Z2.row(i).transpose() * sb.Z2.row(i);
          Bk.noalias() += w * sb.Z2.row(i).transpose() * sb.Z3.row(i);
        }
      }
      if (r2 > 0) *S -= Bk.transpose() * Ak.llt().solve(Bk);
    }
    *S += Avv;
  }

  double eval_family(std::size_t j, const Eigen::VectorXd& beta,
                     const CovFactor& c2, const CovFactor& c3,
                     Eigen::VectorXd* score, int np2, int np3) {
    const FamilyBlock& fam = d_.families[j];
    const int nb = d_.n_beta;
    const int r3 = c3.effective_dim();
    const int r2 = c2.effective_dim();
    const std::size_t K = fam.subjects.size();

    // Warm-start caches keyed by subject / family index.
    std::vector<Eigen::VectorXd*> ucache(K);
    {
      int base = 0;
      for (std::size_t jj = 0; jj < j; ++jj)
        base += static_cast<int>(d_.families[jj].subjects.size());
      for (std::size_t k = 0; k < K; ++k) {
        Eigen::VectorXd& slot = u_cache_[base + k];
        if (slot.size() != r2) slot = Eigen::VectorXd::Zero(r2);
        ucache[k] = &slot;
      }
    }

    Eigen::VectorXd sbeta, stheta2;
    if (score) {
      sbeta.setZero(nb);
      stheta2.setZero(np2);
    }

    if (r3 == 0) {
      double ll = 0.0;
      for (std::size_t k = 0; k < K; ++k)
        ll += inner_integral(fam.subjects[k], fam.subjects[k].X * beta, c2,
                             *ucache[k], score ? &sbeta : nullptr,
                             score ? &stheta2 : nullptr);
      if (score) {
        score->head(nb) += sbeta;
        score->segment(nb, np2) += stheta2;
      }
      return ll;
    }

    Eigen::VectorXd& v = v_cache_[j];
    if (v.size() != r3) v = Eigen::VectorXd::Zero(r3);
    std::vector<Eigen::VectorXd> us(K, Eigen::VectorXd::Zero(r2));
    for (std::size_t k = 0; k < K; ++k)
      if (ucache[k]->size() == r2) us[k] = *ucache[k];
    Eigen::MatrixXd S;
    family_mode(fam, beta, c2, c3, v, us, &S);
    for (std::size_t k = 0; k < K; ++k) *ucache[k] = us[k];

    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success)
      throw EstimationError(EstimationError::Code::ModeSearchFailure,
                            "family curvature is not positive definite");
    const Eigen::MatrixXd R3 = llt.matrixL();
    double logdet_half = 0.0;
    for (int i = 0; i < r3; ++i) logdet_half += std::log(R3(i, i));

    const TensorGrid& grid = tensor(r3);
    const long nt = grid.logw.size();
    Eigen::VectorXd vals(nt);
    Eigen::MatrixXd SCORE;
    if (score) SCORE.setZero(nb + np2 + np3, nt);
    std::vector<Eigen::VectorXd> etaX(K);
    for (std::size_t k = 0; k < K; ++k) etaX[k] = fam.subjects[k].X * beta;

    Eigen::VectorXd v_t(r3), u_work(r2);
    for (long t = 0; t < nt; ++t) {
      v_t = R3.transpose().triangularView<Eigen::Upper>().solve(grid.z.col(t));
      v_t += v;
      double gsum = 0.0;
      Eigen::VectorXd sb_t, st2_t;
      if (score) {
        sb_t.setZero(nb);
        st2_t.setZero(np2);
      }
      for (std::size_t k = 0; k < K; ++k) {
        u_work = us[k];
        gsum += inner_integral(fam.subjects[k],
                               etaX[k] + fam.subjects[k].Z3 * v_t, c2, u_work,
                               score ? &sb_t : nullptr, score ? &st2_t : nullptr);
      }
      vals[t] = grid.logw[t] + grid.q[t] + gsum + c3.log_prior(v_t);
      if (score) {
        SCORE.col(t).head(nb) = sb_t;
        SCORE.col(t).segment(nb, np2) = st2_t;
        Eigen::VectorXd g3 = Eigen::VectorXd::Zero(np3);
        c3.add_param_grad(v_t, 1.0, g3);
        SCORE.col(t).tail(np3) = g3;
      }
    }
    const double mval = vals.maxCoeff();
    Eigen::VectorXd w = (vals.array() - mval).exp();
    const double wsum = w.sum();
    if (score) {
      w /= wsum;
      *score += SCORE * w;
      return mval + std::log(wsum) - logdet_half + 0.5 * r3 * kLog2Pi;
    }
    return mval + std::log(wsum) - logdet_half + 0.5 * r3 * kLog2Pi;
  }

  const DesignMatrices& d_;
  QuadratureRule rule_;
  CovStructure structure2_ = CovStructure::Unstructured;
  CovStructure structure3_ = CovStructure::Unstructured;
  std::map<int, TensorGrid> grids_;
  std::vector<Eigen::VectorXd> u_cache_;
  std::vector<Eigen::VectorXd> v_cache_;
};

// ---------------------------------------------------------------------------
// BFGS maximization with backtracking line search. Accepted steps never
// decrease the objective.
// ---------------------------------------------------------------------------
struct BfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  bool converged = false;
};

BfgsResult bfgs_maximize(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>& fn,
    const std::function<void(const Eigen::VectorXd&)>& on_accept,
    Eigen::VectorXd x0, int max_iter, double tol) {
  const long n = x0.size();
  Eigen::VectorXd x = std::move(x0), g(n);
  double f = fn(x, &g);
  if (!std::isfinite(f))
    throw EstimationError(EstimationError::Code::NonFiniteLikelihood,
                          "objective not finite at the starting point");
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  bool scaled = false;

  // The analytic gradient carries a quadrature error that grows with the
  // log-likelihood magnitude, so the gradient test has to scale with |f|.
  auto gtol = [&] { return std::max(10.0 * tol, 1e-4 * (1.0 + std::abs(f))); };

  BfgsResult res;
  int it = 0;
  for (; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < gtol() && it > 0) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd dir = H.selfadjointView<Eigen::Lower>() * g;
    if (g.dot(dir) <= 0.0) {
      H.setIdentity();
      dir = g;
    }

    auto line_search = [&](const Eigen::VectorXd& d,
                           double slope) -> std::optional<std::pair<Eigen::VectorXd, double>> {
      double t = 1.0;
      for (int h = 0; h < 40; ++h) {
        Eigen::VectorXd xt = x + t * d;
        double ft;
        try {
          ft = fn(xt, nullptr);
        } catch (const EstimationError&) {
          ft = -std::numeric_limits<double>::infinity();
        }
        if (std::isfinite(ft) && ft >= f + 1e-4 * t * slope)
          return std::make_pair(std::move(xt), ft);
        t *= 0.5;
      }
      return std::nullopt;
    };

    auto step = line_search(dir, g.dot(dir));
    if (!step) {
      H.setIdentity();
      step = line_search(g, g.dot(g));
    }
    if (!step) {
      // Dead end: the objective cannot be improved along the gradient even
      // after a Hessian reset, so this is the numerical optimum of the
      // quadrature objective. The analytic gradient differs from the
      // evaluated objective's gradient by the quadrature error, so it need
      // not vanish here.
      res.converged = true;
      break;
    }

    Eigen::VectorXd x_new = std::move(step->first);
    const double f_new = step->second;
    on_accept(x_new);
    Eigen::VectorXd g_new(n);
    fn(x_new, &g_new);

    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd yv = g - g_new; // gradient change of -f
    const double sy = s.dot(yv);
    const double rel_change = std::abs(f_new - f) / (1.0 + std::abs(f));
    x = std::move(x_new);
    const bool grad_small = g_new.lpNorm<Eigen::Infinity>() < gtol();
    g = std::move(g_new);
    f = f_new;
    if (rel_change < tol && (grad_small || rel_change < 1e-2 * tol)) {
      res.converged = true;
      ++it;
      break;
    }
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (!scaled) {
        H = (sy / yv.squaredNorm()) * Eigen::MatrixXd::Identity(n, n);
        scaled = true;
      }
      const Eigen::VectorXd Hy = H.selfadjointView<Eigen::Lower>() * yv;
      const double rho = 1.0 / sy;
      // H <- (I - rho s y') H (I - rho y s') + rho s s'
      H -= rho * (s * Hy.transpose() + Hy * s.transpose());
      H += rho * (1.0 + rho * yv.dot(Hy)) * (s * s.transpose());
    }
  }
  if (it >= max_iter && !res.converged)
    throw EstimationError(EstimationError::Code::NoConvergence,
                          "maximum iterations reached");
  res.x = std::move(x);
  res.f = f;
  res.grad = std::move(g);
  res.iterations = it;
  return res;
}

// Ridge-stabilized Newton logistic fit used only as a starting point.
Eigen::VectorXd initial_beta(const Eigen::MatrixXd& X, const std::vector<int>& y) {
  const long n = X.rows(), p = X.cols();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  double ybar = 0.0;
  for (int yi : y) ybar += yi;
  ybar = std::clamp(ybar / static_cast<double>(n), 1e-6, 1.0 - 1e-6);
  beta[0] = std::log(ybar / (1.0 - ybar));
  for (int it = 0; it < 8; ++it) {
    Eigen::VectorXd eta = X * beta;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd Hm = 1e-6 * Eigen::MatrixXd::Identity(p, p);
    for (long i = 0; i < n; ++i) {
      const double pr = invlogit(eta[i]);
      g += (y[i] - pr) * X.row(i).transpose();
      Hm.noalias() += std::max(pr * (1.0 - pr), 1e-10) * X.row(i).transpose() * X.row(i);
    }
    Eigen::VectorXd step = Hm.llt().solve(g);
    if (!step.allFinite()) break;
    beta += step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-6) break;
  }
  for (long q = 0; q < p; ++q) beta[q] = std::clamp(beta[q], -10.0, 10.0);
  return beta;
}

std::vector<std::string> effect_names(const RandomPart& part) {
  std::vector<std::string> names;
  if (part.intercept) names.emplace_back("intercept");
  for (const auto& s : part.slopes) names.push_back(s);
  return names;
}

} // namespace

Eigen::VectorXd LevelCov::sds() const {
  return omega.diagonal().array().sqrt();
}

Eigen::MatrixXd LevelCov::correlations() const {
  const int d = dim();
  Eigen::MatrixXd corr = Eigen::MatrixXd::Identity(d, d);
  const Eigen::VectorXd s = sds();
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (i != j)
        corr(i, j) = s[i] > 0 && s[j] > 0 ? omega(i, j) / (s[i] * s[j]) : 0.0;
  return corr;
}

double marginal_loglik(const Eigen::VectorXd& beta, const Eigen::MatrixXd& omega2,
                       const Eigen::MatrixXd& omega3, const DesignMatrices& design,
                       const QuadratureRule& rule) {
  CovFactor c2 = CovFactor::from_omega(omega2);
  CovFactor c3 = CovFactor::from_omega(omega3);
  Evaluator ev(design, rule);
  return ev.eval(beta, c2, c3, nullptr);
}

Eigen::VectorXd score_beta(const Eigen::VectorXd& beta, const Eigen::MatrixXd& omega2,
                           const Eigen::MatrixXd& omega3, const DesignMatrices& design,
                           const QuadratureRule& rule) {
  CovFactor c2 = CovFactor::from_omega(omega2);
  CovFactor c3 = CovFactor::from_omega(omega3);
  Evaluator ev(design, rule);
  Eigen::VectorXd score;
  ev.eval(beta, c2, c3, &score);
  return score.head(design.n_beta);
}

EbModes eb_modes(const Eigen::VectorXd& beta, const Eigen::MatrixXd& omega2,
                 const Eigen::MatrixXd& omega3, const DesignMatrices& design) {
  CovFactor c2 = CovFactor::from_omega(omega2);
  CovFactor c3 = CovFactor::from_omega(omega3);
  Evaluator ev(design, gh_rule(1));
  return ev.modes(beta, c2, c3);
}

FittedModel fit(const Dataset& ds, const ModelSpec& spec, const FitOptions& opts,
                const FitInit* init) {
  DesignMatrices design = build_design(ds, spec);
  const QuadratureRule rule = gh_rule(opts.nodes);
  const int nb = design.n_beta;
  const int r2 = design.r2, r3 = design.r3;
  const CovStructure s2 = spec.random.level2.structure;
  const CovStructure s3 = spec.random.level3.structure;
  const int np2 = CovFactor::n_params(r2, s2);
  const int np3 = CovFactor::n_params(r3, s3);

  Eigen::VectorXd x(nb + np2 + np3);
  if (init) {
    if (init->beta.size() != nb || init->theta.size() != np2 + np3)
      throw EstimationError(EstimationError::Code::BadVarianceComponents,
                            "warm-start dimensions do not match the model");
    x.head(nb) = init->beta;
    x.tail(np2 + np3) = init->theta;
  } else {
    x.head(nb) = initial_beta(design.X_full, ds.y);
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(np2 + np3);
    // log sd = log(0.5) on every diagonal, zero off-diagonals
    int p = 0;
    for (int i = 0; i < r2; ++i) {
      if (s2 == CovStructure::Unstructured) p += i;
      theta[p++] = std::log(0.5);
    }
    for (int i = 0; i < r3; ++i) {
      if (s3 == CovStructure::Unstructured) p += i;
      theta[p++] = std::log(0.5);
    }
    x.tail(np2 + np3) = theta;
  }

  Evaluator ev(design, rule);
  ev.set_structures(s2, s3);
  auto unpack = [&](const Eigen::VectorXd& xv) {
    CovFactor c2(r2, s2, xv.segment(nb, np2));
    CovFactor c3(r3, s3, xv.tail(np3));
    return std::make_pair(std::move(c2), std::move(c3));
  };

  auto objective = [&](const Eigen::VectorXd& xv, Eigen::VectorXd* grad) {
    auto [c2, c3] = unpack(xv);
    Eigen::VectorXd score;
    const double ll = ev.eval(xv.head(nb), c2, c3, grad ? &score : nullptr);
    if (grad) *grad = score;
    return ll;
  };
  auto check_separation = [&](const Eigen::VectorXd& xv) {
    if (xv.head(nb).lpNorm<Eigen::Infinity>() > kSeparationBound)
      throw EstimationError(EstimationError::Code::SeparationDetected,
                            "fixed effect exceeded the separation bound");
  };

  BfgsResult opt = bfgs_maximize(objective, check_separation, x, opts.max_iter,
                                 opts.tol);

  FittedModel fm;
  fm.beta = opt.x.head(nb);
  fm.coef_names = design.coef_names;
  fm.theta = opt.x.tail(np2 + np3);
  fm.loglik = opt.f;
  fm.converged = opt.converged;
  fm.iterations = opt.iterations;

  auto [c2, c3] = unpack(opt.x);
  fm.vc.level2.omega = c2.omega();
  fm.vc.level2.structure = s2;
  fm.vc.level2.names = effect_names(spec.random.level2);
  fm.vc.level2.boundary = c2.boundary();
  fm.vc.level3.omega = c3.omega();
  fm.vc.level3.structure = s3;
  fm.vc.level3.names = effect_names(spec.random.level3);
  fm.vc.level3.boundary = c3.boundary();

  EbModes eb = ev.modes(fm.beta, c2, c3);
  fm.eb_level2 = std::move(eb.level2);
  fm.eb_level3 = std::move(eb.level3);

  if (opts.compute_cov) {
    // Observed information over (beta, theta) by central differences of the
    // analytic score; fixed_cov is the beta block of its inverse, so that
    // variance-parameter uncertainty propagates into the Wald variances.
    // Inverting only the beta block understates them and inflates test size.
    const int np_all = nb + np2 + np3;
    const double h = 1e-4;
    Eigen::MatrixXd Hm(np_all, np_all);
    Eigen::VectorXd score_p, score_m;
    for (int q = 0; q < np_all; ++q) {
      Eigen::VectorXd xp = opt.x, xm = opt.x;
      xp[q] += h;
      xm[q] -= h;
      auto [c2p, c3p] = unpack(xp);
      ev.eval(xp.head(nb), c2p, c3p, &score_p);
      auto [c2m, c3m] = unpack(xm);
      ev.eval(xm.head(nb), c2m, c3m, &score_m);
      Hm.col(q) = (score_p - score_m) / (2.0 * h);
    }
    Hm = 0.5 * (Hm + Hm.transpose()).eval();

    // Variance parameters collapsed to the floor carry no information and
    // would make the full matrix singular; invert over the active set only.
    std::vector<int> active;
    for (int q = 0; q < nb; ++q) active.push_back(q);
    for (int q = nb; q < np_all; ++q)
      if (std::abs(Hm(q, q)) > 1e-8) active.push_back(q);
    const int na = static_cast<int>(active.size());
    Eigen::MatrixXd Ha(na, na);
    for (int a = 0; a < na; ++a)
      for (int b = 0; b < na; ++b) Ha(a, b) = Hm(active[a], active[b]);

    Eigen::LDLT<Eigen::MatrixXd> ldlt(-Ha);
    Eigen::MatrixXd cov;
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
      cov = ldlt.solve(Eigen::MatrixXd::Identity(na, na));
    } else {
      // Joint information not positive definite (typically a boundary or
      // near-boundary fit): fall back to the beta block alone.
      Eigen::LDLT<Eigen::MatrixXd> beta_ldlt(-Hm.topLeftCorner(nb, nb));
      if (beta_ldlt.info() != Eigen::Success || !beta_ldlt.isPositive())
        throw EstimationError(EstimationError::Code::SingularInformation,
                              "observed information is not positive definite");
      cov = beta_ldlt.solve(Eigen::MatrixXd::Identity(nb, nb));
    }
    fm.fixed_cov = cov.topLeftCorner(nb, nb);
    fm.fixed_cov = 0.5 * (fm.fixed_cov + fm.fixed_cov.transpose()).eval();
    if (!fm.fixed_cov.allFinite())
      throw EstimationError(EstimationError::Code::SingularInformation,
                            "observed information inversion failed");
  } else {
    fm.fixed_cov.setZero(nb, nb);
  }
  return fm;
}

Eigen::VectorXd predict_conditional(const FittedModel& fm, const Dataset& ds,
                                    const ModelSpec& spec) {
  DesignMatrices design = build_design(ds, spec);
  Eigen::VectorXd eta = design.X_full * fm.beta;
  for (const auto& fam : design.families) {
    const Eigen::VectorXd* v = fam.level3_index < static_cast<int>(fm.eb_level3.size())
                                   ? &fm.eb_level3[fam.level3_index]
                                   : nullptr;
    for (const auto& sb : fam.subjects) {
      const Eigen::VectorXd* u = sb.level2_index < static_cast<int>(fm.eb_level2.size())
                                     ? &fm.eb_level2[sb.level2_index]
                                     : nullptr;
      for (long r = 0; r < static_cast<long>(sb.rows.size()); ++r) {
        double add = 0.0;
        if (u && u->size() == design.r2 && design.r2 > 0)
          add += sb.Z2.row(r).dot(*u);
        if (v && v->size() == design.r3 && design.r3 > 0)
          add += sb.Z3.row(r).dot(*v);
        eta[sb.rows[r]] += add;
      }
    }
  }
  Eigen::VectorXd p(eta.size());
  for (long i = 0; i < eta.size(); ++i) p[i] = invlogit(eta[i]);
  return p;
}

} // namespace mlmgof
