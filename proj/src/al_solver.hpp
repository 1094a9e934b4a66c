#pragma once

// Small dense augmented-Lagrangian solver shared by the centralized
// reference optimizer and the per-bus subproblems. Problem sizes here are a
// few dozen variables at most, so everything is dense and allocation is not
// a concern.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>

namespace topf::detail {

struct AlProblem {
  int dim = 0;
  int n_eq = 0;
  int n_ineq = 0;

  // Returns f(x); fills gradient and Hessian when non-null.
  std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*,
                       Eigen::MatrixXd*)>
      objective;

  // Fills constraint values h(x) (=0) and g(x) (<=0) with their Jacobians.
  std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&,
                     Eigen::MatrixXd&, Eigen::VectorXd&, Eigen::MatrixXd&)>
      constraints;

  // Adds sum_i w_eq[i] * hess(h_i) + sum_i w_in[i] * hess(g_i) to H.
  std::function<void(const Eigen::VectorXd&, const Eigen::VectorXd&,
                     const Eigen::VectorXd&, Eigen::MatrixXd&)>
      add_constraint_hessians;
};

struct AlOptions {
  double kkt_tol = 1e-9;
  double feas_tol = 1e-9;
  int max_outer = 60;
  int max_inner = 200;
  double rho0 = 10.0;
  double rho_max = 1e12;
};

struct AlResult {
  Eigen::VectorXd x;
  Eigen::VectorXd lam_eq;
  Eigen::VectorXd mu_in;
  double kkt_residual = 0.0;
  double max_violation = 0.0;
  double objective = 0.0;
  bool converged = false;
};

inline AlResult solve_al(const AlProblem& p, Eigen::VectorXd x0,
                         const AlOptions& opt,
                         const Eigen::VectorXd* warm_eq = nullptr,
                         const Eigen::VectorXd* warm_in = nullptr) {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;

  VectorXd x = std::move(x0);
  VectorXd lam = warm_eq && warm_eq->size() == p.n_eq
                     ? *warm_eq
                     : VectorXd::Zero(p.n_eq);
  VectorXd mu = warm_in && warm_in->size() == p.n_ineq
                    ? *warm_in
                    : VectorXd::Zero(p.n_ineq);
  double rho = opt.rho0;

  VectorXd h(p.n_eq), g(p.n_ineq);
  MatrixXd Jh(p.n_eq, p.dim), Jg(p.n_ineq, p.dim);

  auto eval_aug = [&](const VectorXd& xx, VectorXd* grad, MatrixXd* hess) {
    VectorXd fg;
    MatrixXd fH;
    double val = p.objective(xx, grad ? &fg : nullptr, hess ? &fH : nullptr);
    p.constraints(xx, h, Jh, g, Jg);
    VectorXd w_eq = lam + rho * h;
    VectorXd w_in = (mu + rho * g).cwiseMax(0.0);
    val += h.dot(lam) + 0.5 * rho * h.squaredNorm();
    val += (w_in.squaredNorm() - mu.squaredNorm()) / (2.0 * rho);
    if (grad) {
      *grad = fg;
      if (p.n_eq) grad->noalias() += Jh.transpose() * w_eq;
      if (p.n_ineq) grad->noalias() += Jg.transpose() * w_in;
    }
    if (hess) {
      *hess = fH;
      for (int i = 0; i < p.n_eq; ++i)
        hess->noalias() += rho * Jh.row(i).transpose() * Jh.row(i);
      for (int i = 0; i < p.n_ineq; ++i)
        if (w_in[i] > 0.0)
          hess->noalias() += rho * Jg.row(i).transpose() * Jg.row(i);
      if (p.add_constraint_hessians)
        p.add_constraint_hessians(xx, w_eq, w_in, *hess);
    }
    return val;
  };

  AlResult res;
  double prev_viol = std::numeric_limits<double>::infinity();

  for (int outer = 0; outer < opt.max_outer; ++outer) {
    // Inner: damped Newton on the augmented Lagrangian.
    VectorXd grad(p.dim);
    MatrixXd H(p.dim, p.dim);
    double val = eval_aug(x, &grad, &H);
    double nu = 1e-10;
    for (int it = 0; it < opt.max_inner; ++it) {
      double gnorm = grad.lpNorm<Eigen::Infinity>();
      if (gnorm <= opt.kkt_tol * std::max(1.0, rho * 1e-9) ||
          gnorm <= opt.kkt_tol)
        break;
      MatrixXd Hd = H;
      Hd.diagonal().array() += nu;
      Eigen::LDLT<MatrixXd> ldlt(Hd);
      VectorXd d = ldlt.solve(-grad);
      if (ldlt.info() != Eigen::Success || !d.allFinite() ||
          grad.dot(d) > 0) {
        nu = std::max(nu * 10.0, 1e-8);
        continue;
      }
      // Armijo backtracking
      double t = 1.0;
      bool accepted = false;
      double slope = grad.dot(d);
      for (int ls = 0; ls < 40; ++ls) {
        VectorXd xt = x + t * d;
        double vt = eval_aug(xt, nullptr, nullptr);
        if (std::isfinite(vt) && vt <= val + 1e-4 * t * slope) {
          x = xt;
          accepted = true;
          break;
        }
        t *= 0.5;
      }
      if (!accepted) {
        nu = std::max(nu * 10.0, 1e-8);
        if (nu > 1e12) break;
        continue;
      }
      nu = std::max(nu * 0.25, 1e-12);
      val = eval_aug(x, &grad, &H);
    }

    // Multiplier update and verdict.
    p.constraints(x, h, Jh, g, Jg);
    double viol = 0.0;
    if (p.n_eq) viol = h.lpNorm<Eigen::Infinity>();
    if (p.n_ineq) viol = std::max(viol, g.maxCoeff());
    viol = std::max(viol, 0.0);

    VectorXd fg(p.dim);
    p.objective(x, &fg, nullptr);
    VectorXd lam_new = lam + rho * h;
    VectorXd mu_new = (mu + rho * g).cwiseMax(0.0);
    VectorXd kkt = fg;
    if (p.n_eq) kkt.noalias() += Jh.transpose() * lam_new;
    if (p.n_ineq) kkt.noalias() += Jg.transpose() * mu_new;
    res.kkt_residual = kkt.lpNorm<Eigen::Infinity>();
    res.max_violation = viol;

    lam = lam_new;
    mu = mu_new;

    if (viol <= opt.feas_tol && res.kkt_residual <= opt.kkt_tol) {
      res.converged = true;
      break;
    }
    if (viol > 0.25 * prev_viol && rho < opt.rho_max) rho *= 10.0;
    prev_viol = std::min(prev_viol, viol);
  }

  res.x = x;
  res.lam_eq = lam;
  res.mu_in = mu;
  res.objective = p.objective(x, nullptr, nullptr);
  return res;
}

}  // namespace topf::detail
