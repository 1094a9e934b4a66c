#include "topf/admm_engine.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>

#include "al_solver.hpp"

namespace topf {

using Eigen::MatrixXd;
using Eigen::Vector4d;
using Eigen::VectorXd;

NetworkCase apply_social_responsibility(const NetworkCase& c) {
  NetworkCase out = c;
  for (const auto& b : c.buses) {
    auto gidx = c.generators_at(b.index);
    if (gidx.empty() || b.p_demand <= 0.0) continue;
    double cap_sum = 0.0;
    bool unlimited = false;
    for (const auto& br : c.branches)
      if (br.from_bus == b.index || br.to_bus == b.index) {
        if (!br.cap) { unlimited = true; break; }
        cap_sum += *br.cap;
      }
    if (unlimited || cap_sum >= b.p_demand) continue;
    const double needed = b.p_demand - cap_sum;
    double agg_min = 0.0, agg_max = 0.0;
    for (int gi : gidx) {
      agg_min += c.generators[gi].p_min;
      agg_max += c.generators[gi].p_max;
    }
    if (needed > agg_max + 1e-12)
      throw numeric_error(
          "load pocket at bus " + std::to_string(b.index) +
          ": local demand exceeds incident line capacity plus generation");
    if (needed > agg_min) {
      // raise the first machine so the aggregate minimum covers the pocket
      double others = agg_min - c.generators[gidx[0]].p_min;
      out.generators[gidx[0]].p_min =
          std::min(needed - others, out.generators[gidx[0]].p_max);
    }
  }
  return out;
}

// Diagonal of the per-bus consensus metric W_j: identity on the projection
// and voltage blocks (first six coordinates), flow_weight on the lifted
// line-flow block.
static Eigen::VectorXd metric_diag(const ConsensusMap& m,
                                   const SolverConfig& cfg) {
  Eigen::VectorXd w = Eigen::VectorXd::Ones(m.M.rows());
  if (m.M.rows() > 6) w.tail(m.M.rows() - 6).setConstant(cfg.flow_weight);
  return w;
}

GlobalPrecomp precompute_global(const std::vector<ConsensusMap>& maps,
                                const SolverConfig& cfg, int ref_bus) {
  GlobalPrecomp pre;
  const int two_n = static_cast<int>(maps.front().M.cols());
  pre.n = two_n / 2;
  pre.ref = ref_bus;
  pre.normal = MatrixXd::Zero(two_n, two_n);
  for (const auto& m : maps) {
    const MatrixXd mw =
        metric_diag(m, cfg).cwiseSqrt().asDiagonal() * m.M;  // W^1/2 M
    pre.normal.selfadjointView<Eigen::Lower>().rankUpdate(
        mw.transpose(), cfg.mu_at(m.bus));
  }
  pre.normal = pre.normal.selfadjointView<Eigen::Lower>();

  Eigen::LDLT<MatrixXd> ldlt(pre.normal);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    // The delta rows alone make the normal matrix positive definite, so
    // this path only fires on numerically hostile input.
    const double eps = 1e-10 * pre.normal.diagonal().maxCoeff();
    pre.normal.diagonal().array() += eps;
    pre.regularized = true;
    ldlt.compute(pre.normal);
    if (ldlt.info() != Eigen::Success)
      throw numeric_error("consensus normal matrix is not factorizable");
  }

  VectorXd e = VectorXd::Zero(two_n);
  e[ref_bus + pre.n] = 1.0;
  pre.tau = ldlt.solve(e);
  pre.tau_ref = pre.tau[ref_bus + pre.n];
  if (std::abs(pre.tau_ref) < 1e-300)
    throw numeric_error("reference direction is degenerate");

  pre.T.resize(maps.size());
  for (const auto& m : maps)
    pre.T[m.bus] = ldlt.solve(
        cfg.mu_at(m.bus) *
        (metric_diag(m, cfg).asDiagonal() * m.M).transpose());  // mu M^T W
  return pre;
}

Eigen::VectorXd global_update_bus(const Eigen::VectorXd& x_j, int bus,
                                  const GlobalPrecomp& pre) {
  VectorXd omega = pre.T.at(bus) * x_j;
  const double s = omega[pre.ref + pre.n] / pre.tau_ref;
  return omega - s * pre.tau;
}

CartesianVoltage global_update(const std::vector<Eigen::VectorXd>& x,
                               const GlobalPrecomp& pre) {
  CartesianVoltage v = CartesianVoltage::Zero(2 * pre.n);
  for (size_t j = 0; j < x.size(); ++j)
    v += global_update_bus(x[j], static_cast<int>(j), pre);
  return v;
}

// ------------------------- local subproblems -------------------------

namespace {

struct FlowPiece {
  const ProjectedFlowForm* pf = nullptr;
  int offset = 0;  // lambda block offset within x
  int dim = 0;
  double cap = 0.0;
  bool capped = false;
};

// Quadratic value/gradient/Hessian of one flow component in (alpha, lambda).
struct FlowEval {
  double p = 0, q = 0;
  VectorXd dp, dq;  // full-dimension gradients
};

}  // namespace

struct LocalProblem {
  int bus = 0;
  int dim = 0;
  bool pv = false;
  double mu = 0.0;
  Eigen::VectorXd pen_weight;  // diagonal consensus metric W_j
  double p_demand = 0.0, q_demand = 0.0;
  double vmin_sq = 0.0, vmax_sq = 0.0;
  // PV data
  double p_lo = 0, p_hi = 0, q_lo = 0, q_hi = 0;  // bounds on injection
  double c2 = 0, c1 = 0;
  // PQ data
  double n_p = 0, n_q = 0;
  Eigen::Matrix4d core_p, core_q;
  std::vector<FlowPiece> flows;

  int n_ineq() const {
    int k = 3 + (pv ? 4 : 0);  // ball, delta hi/lo, injection box
    for (const auto& fp : flows)
      if (fp.capped) ++k;
    return k;
  }

  // Load buses carry their balance as hard equalities on top of the penalty
  // terms: a merely-penalized balance turns any consensus gap into an
  // amplified force error (gradient shift = penalty weight times gap), which
  // freezes the voltage iteration far from stationarity. At the equality
  // the penalty terms and their gradients vanish, so the printed objective
  // is unchanged; the equality multiplier carries the exact balance price.
  int n_eq() const { return pv ? 0 : 2; }

  FlowEval eval_flow(const FlowPiece& fp, const VectorXd& x,
                     bool want_grad) const {
    FlowEval e;
    Vector4d a = x.head<4>();
    VectorXd l = x.segment(fp.offset, fp.dim);
    e.p = a.dot(fp.pf->Fp * a) + 2.0 * a.dot(fp.pf->Gp * l) +
          l.dot(fp.pf->Sp.asDiagonal() * l);
    e.q = a.dot(fp.pf->Fq * a) + 2.0 * a.dot(fp.pf->Gq * l) +
          l.dot(fp.pf->Iq * l);
    if (want_grad) {
      e.dp = VectorXd::Zero(dim);
      e.dq = VectorXd::Zero(dim);
      e.dp.head<4>() = 2.0 * (fp.pf->Fp * a + fp.pf->Gp * l);
      e.dp.segment(fp.offset, fp.dim) =
          2.0 * (fp.pf->Gp.transpose() * a) +
          2.0 * (fp.pf->Sp.asDiagonal() * l);
      e.dq.head<4>() = 2.0 * (fp.pf->Fq * a + fp.pf->Gq * l);
      e.dq.segment(fp.offset, fp.dim) =
          2.0 * (fp.pf->Gq.transpose() * a) + 2.0 * (fp.pf->Iq * l);
    }
    return e;
  }

  void add_flow_hessian(const FlowPiece& fp, double wp, double wq,
                        MatrixXd& H) const {
    // wp * hess(p) + wq * hess(q)
    H.block<4, 4>(0, 0) += 2.0 * (wp * fp.pf->Fp + wq * fp.pf->Fq);
    H.block(0, fp.offset, 4, fp.dim) += 2.0 * (wp * fp.pf->Gp + wq * fp.pf->Gq);
    H.block(fp.offset, 0, fp.dim, 4) +=
        2.0 * (wp * fp.pf->Gp + wq * fp.pf->Gq).transpose();
    H.block(fp.offset, fp.offset, fp.dim, fp.dim) +=
        2.0 * wp * MatrixXd(fp.pf->Sp.asDiagonal());
    H.block(fp.offset, fp.offset, fp.dim, fp.dim) += 2.0 * wq * fp.pf->Iq;
  }
};

// pen_center is where the consensus penalty is anchored (the shared-voltage
// image shifted by the running scaled dual); ball_center is the trust-region
// anchor (the shared-voltage image itself). They coincide on the first
// iteration and in the single-shot entry points.
static detail::AlProblem make_al_problem(const LocalProblem& lp,
                                         const VectorXd& pen_center,
                                         const VectorXd& ball_center,
                                         double delta) {
  detail::AlProblem prob;
  prob.dim = lp.dim;
  prob.n_eq = lp.n_eq();
  prob.n_ineq = lp.n_ineq();

  prob.objective = [&lp, pen_center](const VectorXd& x, VectorXd* grad,
                                     MatrixXd* hess) {
    Vector4d a = x.head<4>();
    const VectorXd d = x - pen_center;
    double f = 0.5 * lp.mu * d.dot(lp.pen_weight.asDiagonal() * d);
    if (grad) *grad = lp.mu * lp.pen_weight.cwiseProduct(d);
    if (hess) {
      hess->setZero(lp.dim, lp.dim);
      hess->diagonal() += lp.mu * lp.pen_weight;
    }
    if (lp.pv) {
      const double pinj = a.dot(lp.core_p * a);
      const double p = pinj + lp.p_demand;
      f += lp.c2 * p * p + lp.c1 * p;
      if (grad || hess) {
        const double dcdp = 2.0 * lp.c2 * p + lp.c1;
        Vector4d dpin = 2.0 * (lp.core_p * a);
        if (grad) grad->head<4>() += dcdp * dpin;
        if (hess) {
          hess->block<4, 4>(0, 0) += 2.0 * lp.c2 * dpin * dpin.transpose();
          hess->block<4, 4>(0, 0) += dcdp * 2.0 * lp.core_p;
        }
      }
    } else {
      const double bp = a.dot(lp.core_p * a) + lp.p_demand;
      const double bq = a.dot(lp.core_q * a) + lp.q_demand;
      f += lp.n_p * bp * bp + lp.n_q * bq * bq;
      if (grad || hess) {
        Vector4d dbp = 2.0 * (lp.core_p * a);
        Vector4d dbq = 2.0 * (lp.core_q * a);
        if (grad)
          grad->head<4>() +=
               2.0 * lp.n_p * bp * dbp + 2.0 * lp.n_q * bq * dbq;
        if (hess) {
          hess->block<4, 4>(0, 0) +=
              2.0 * lp.n_p * (dbp * dbp.transpose() + bp * 2.0 * lp.core_p);
          hess->block<4, 4>(0, 0) +=
              2.0 * lp.n_q * (dbq * dbq.transpose() + bq * 2.0 * lp.core_q);
        }
      }
    }
    return f;
  };

  // The ball constraint is kept in distance units (the squared form has a
  // vanishing gradient once delta is tiny, which starves the multiplier
  // update of signal).
  const double ball_scale = std::max(delta, 1e-8);

  prob.constraints = [&lp, ball_center, delta, ball_scale](
                         const VectorXd& x, VectorXd& ceq, MatrixXd& Jeq,
                         VectorXd& cin, MatrixXd& Jin) {
    ceq.resize(lp.n_eq());
    Jeq.resize(lp.n_eq(), lp.dim);
    cin.resize(lp.n_ineq());
    Jin.resize(lp.n_ineq(), lp.dim);
    Vector4d a = x.head<4>();
    Eigen::Vector2d d = x.segment<2>(4);
    if (!lp.pv) {
      ceq[0] = a.dot(lp.core_p * a) + lp.p_demand;
      ceq[1] = a.dot(lp.core_q * a) + lp.q_demand;
      Jeq.setZero();
      Jeq.row(0).head<4>() = (2.0 * (lp.core_p * a)).transpose();
      Jeq.row(1).head<4>() = (2.0 * (lp.core_q * a)).transpose();
    }
    int i = 0;
    // trust ball
    cin[i] =
        ((x - ball_center).squaredNorm() - delta * delta) / (2.0 * ball_scale);
    Jin.row(i) = (x - ball_center).transpose() / ball_scale;
    ++i;
    // voltage magnitude window
    cin[i] = d.squaredNorm() - lp.vmax_sq;
    Jin.row(i).setZero();
    Jin.row(i).segment<2>(4) = 2.0 * d.transpose();
    ++i;
    cin[i] = lp.vmin_sq - d.squaredNorm();
    Jin.row(i).setZero();
    Jin.row(i).segment<2>(4) = -2.0 * d.transpose();
    ++i;
    if (lp.pv) {
      const double pinj = a.dot(lp.core_p * a);
      const double qinj = a.dot(lp.core_q * a);
      Vector4d dp = 2.0 * (lp.core_p * a);
      Vector4d dq = 2.0 * (lp.core_q * a);
      cin[i] = pinj - lp.p_hi;
      Jin.row(i).setZero();
      Jin.row(i).head<4>() = dp.transpose();
      ++i;
      cin[i] = lp.p_lo - pinj;
      Jin.row(i).setZero();
      Jin.row(i).head<4>() = -dp.transpose();
      ++i;
      cin[i] = qinj - lp.q_hi;
      Jin.row(i).setZero();
      Jin.row(i).head<4>() = dq.transpose();
      ++i;
      cin[i] = lp.q_lo - qinj;
      Jin.row(i).setZero();
      Jin.row(i).head<4>() = -dq.transpose();
      ++i;
    }
    for (const auto& fp : lp.flows) {
      if (!fp.capped) continue;
      FlowEval e = lp.eval_flow(fp, x, true);
      cin[i] = e.p * e.p + e.q * e.q - fp.cap * fp.cap;
      Jin.row(i) = (2.0 * e.p * e.dp + 2.0 * e.q * e.dq).transpose();
      ++i;
    }
  };

  prob.add_constraint_hessians = [&lp, ball_scale](const VectorXd& x,
                                                   const VectorXd& w_eq,
                                                   const VectorXd& w_in,
                                                   MatrixXd& H) {
    if (!lp.pv) {
      if (w_eq[0] != 0.0) H.block<4, 4>(0, 0) += w_eq[0] * 2.0 * lp.core_p;
      if (w_eq[1] != 0.0) H.block<4, 4>(0, 0) += w_eq[1] * 2.0 * lp.core_q;
    }
    int i = 0;
    if (w_in[i] != 0.0) H.diagonal().array() += w_in[i] / ball_scale;
    ++i;
    // delta window
    if (w_in[i] != 0.0) {
      H(4, 4) += 2.0 * w_in[i];
      H(5, 5) += 2.0 * w_in[i];
    }
    ++i;
    if (w_in[i] != 0.0) {
      H(4, 4) -= 2.0 * w_in[i];
      H(5, 5) -= 2.0 * w_in[i];
    }
    ++i;
    if (lp.pv) {
      double wp = w_in[i] - w_in[i + 1];
      double wq = w_in[i + 2] - w_in[i + 3];
      if (wp != 0.0) H.block<4, 4>(0, 0) += wp * 2.0 * lp.core_p;
      if (wq != 0.0) H.block<4, 4>(0, 0) += wq * 2.0 * lp.core_q;
      i += 4;
    }
    for (const auto& fp : lp.flows) {
      if (!fp.capped) continue;
      if (w_in[i] != 0.0) {
        FlowEval e = lp.eval_flow(fp, x, true);
        H.noalias() += w_in[i] * 2.0 *
                       (e.dp * e.dp.transpose() + e.dq * e.dq.transpose());
        lp.add_flow_hessian(fp, w_in[i] * 2.0 * e.p, w_in[i] * 2.0 * e.q, H);
      }
      ++i;
    }
  };

  return prob;
}

// ------------------------- engine -------------------------

AdmmEngine::AdmmEngine(const NetworkCase& c, const SolverConfig& cfg)
    : case_(cfg.social_responsibility ? apply_social_responsibility(c) : c),
      cfg_(cfg) {
  validate_case(case_);
  adm_ = build_admittance(case_);
  inj_ = build_injection_forms(adm_);
  flows_ = build_flow_forms(case_, adm_);
  BTensor tensor = assemble_b_tensor(inj_);
  factors_ = hogsvd(tensor, common_left_basis(tensor));
  maps_ = build_consensus_maps(factors_, flows_);
  projected_ = build_projected_forms(factors_, flows_);
  pre_ = precompute_global(maps_, cfg_, case_.reference_bus);

  busgen_.resize(case_.n_buses());
  for (const auto& b : case_.buses) {
    auto gidx = case_.generators_at(b.index);
    if (gidx.empty()) continue;
    BusGen& bg = busgen_[b.index];
    bg.present = true;
    double wsum = 0;
    for (int gi : gidx) wsum += std::max(case_.generators[gi].p_max, 1e-9);
    for (int gi : gidx) {
      const auto& g = case_.generators[gi];
      bg.p_min += g.p_min;
      bg.p_max += g.p_max;
      bg.q_min += g.q_min;
      bg.q_max += g.q_max;
      double w = std::max(g.p_max, 1e-9) / wsum;
      bg.c2 += g.c2 * w * w;
      bg.c1 += g.c1 * w;
      bg.c0 += g.c0;
    }
  }
}

Eigen::VectorXd AdmmEngine::solve_local(int bus,
                                        const Eigen::VectorXd& pen_center,
                                        const Eigen::VectorXd& ball_center,
                                        double delta, double mu_scale,
                                        std::string* warn) const {
  const auto& map = maps_[bus];
  const auto& b = case_.buses[bus];
  LocalProblem lp;
  lp.bus = bus;
  lp.dim = static_cast<int>(map.M.rows());
  lp.pv = busgen_[bus].present;
  lp.mu = cfg_.mu_at(bus) * mu_scale;
  lp.pen_weight = metric_diag(map, cfg_);
  lp.p_demand = b.p_demand;
  lp.q_demand = b.q_demand;
  lp.vmin_sq = b.v_min * b.v_min;
  lp.vmax_sq = b.v_max * b.v_max;
  lp.core_p = factors_.core_p;
  lp.core_q = factors_.core_q[bus];
  if (lp.pv) {
    const BusGen& bg = busgen_[bus];
    lp.p_lo = bg.p_min - b.p_demand;
    lp.p_hi = bg.p_max - b.p_demand;
    lp.q_lo = bg.q_min - b.q_demand;
    lp.q_hi = bg.q_max - b.q_demand;
    lp.c2 = bg.c2;
    lp.c1 = bg.c1;
  } else {
    lp.n_p = cfg_.n_p;
    lp.n_q = cfg_.n_q;
  }
  int offset = 6;
  for (size_t i = 0; i < map.incident.size(); ++i) {
    FlowPiece fp;
    fp.pf = &projected_[map.incident[i]];
    fp.offset = offset;
    fp.dim = map.lambda_dims[i];
    const auto& br = case_.branches[flows_[map.incident[i]].branch];
    fp.capped = br.cap.has_value();
    fp.cap = br.cap.value_or(0.0);
    lp.flows.push_back(fp);
    offset += fp.dim;
  }

  detail::AlProblem prob = make_al_problem(lp, pen_center, ball_center, delta);
  detail::AlOptions opt;
  // Stationarity at the scale of the objective gradient: the balance
  // penalties put gradients around 1e6, where an absolute 1e-9 target sits
  // below double-precision cancellation noise.
  Eigen::VectorXd g0(lp.dim);
  prob.objective(ball_center, &g0, nullptr);
  opt.kkt_tol =
      cfg_.inner_kkt_tol * std::max(1.0, g0.lpNorm<Eigen::Infinity>());
  opt.feas_tol = 1e-10;
  opt.max_inner = cfg_.inner_max_newton;
  opt.max_outer = 40;

  // Each local solve restarts its multipliers from scratch: the subproblems
  // are tiny and carrying estimates across consensus iterations lets a stale
  // active set act as a phantom force on the shared voltage.
  detail::AlResult res = detail::solve_al(prob, ball_center, opt);
  if (!res.converged && res.max_violation > 1e-8) {
    // feasibility restoration: drive the violations down, then retry once
    detail::AlProblem rest = prob;
    rest.objective = [&prob](const VectorXd&, VectorXd* grad,
                             MatrixXd* hess) {
      if (grad) grad->setZero(prob.dim);
      if (hess) hess->setZero(prob.dim, prob.dim);
      return 0.0;
    };
    detail::AlResult r2 = detail::solve_al(rest, ball_center, opt);
    detail::AlResult res2 = detail::solve_al(prob, r2.x, opt);
    if (res2.max_violation <= res.max_violation) res = res2;
  }
  if (warn && res.max_violation > 1e-8)
    *warn = "bus " + std::to_string(bus) +
            ": local solve stopped at KKT residual " +
            std::to_string(res.kkt_residual) + ", violation " +
            std::to_string(res.max_violation);
  return res.x;
}

Eigen::VectorXd AdmmEngine::solve_pv_subproblem(int bus,
                                                const CartesianVoltage& v,
                                                double delta) const {
  if (!busgen_[bus].present)
    throw numeric_error("bus has no generator");
  Eigen::VectorXd c = maps_[bus].M * v;
  return solve_local(bus, c, c, delta, 1.0, nullptr);
}

Eigen::VectorXd AdmmEngine::solve_pq_subproblem(int bus,
                                                const CartesianVoltage& v,
                                                double delta) const {
  if (busgen_[bus].present)
    throw numeric_error("bus has a generator");
  Eigen::VectorXd c = maps_[bus].M * v;
  return solve_local(bus, c, c, delta, 1.0, nullptr);
}

std::vector<DispatchEntry> AdmmEngine::recover_dispatch(
    const std::vector<Eigen::VectorXd>& x) const {
  std::vector<DispatchEntry> out;
  for (const auto& b : case_.buses) {
    auto gidx = case_.generators_at(b.index);
    if (gidx.empty()) continue;
    Vector4d alpha = x[b.index].head<4>();
    const double p = alpha.dot(factors_.core_p * alpha) + b.p_demand;
    const double q = alpha.dot(factors_.core_q[b.index] * alpha) + b.q_demand;
    const double share = 1.0 / static_cast<double>(gidx.size());
    for (int gi : gidx) {
      (void)gi;
      out.push_back({b.index, p * share, q * share});
    }
  }
  return out;
}

SolveReport AdmmEngine::run() {
  const int n = case_.n_buses();
  SolveReport rep;
  CartesianVoltage v = flat_start(case_);
  v.head(n) *= cfg_.v0_magnitude;
  v[case_.reference_bus + n] = 0.0;

  std::vector<VectorXd> x(n), u(n), y(n);
  std::vector<std::string> bus_warn(n);
  int udim = 0;
  for (int j = 0; j < n; ++j) {
    x[j] = maps_[j].M * v;
    u[j] = VectorXd::Zero(x[j].size());
    udim += static_cast<int>(x[j].size());
  }

  // The iteration state is (v, all duals); one sweep of bus solves plus the
  // analytic voltage fit is one application of the fixed-point map.
  const int zdim = 2 * n + udim;
  auto pack = [&](const CartesianVoltage& vv, const std::vector<VectorXd>& uu) {
    VectorXd z(zdim);
    z.head(2 * n) = vv;
    int off = 2 * n;
    for (int j = 0; j < n; ++j) {
      z.segment(off, uu[j].size()) = uu[j];
      off += static_cast<int>(uu[j].size());
    }
    return z;
  };
  auto unpack = [&](const VectorXd& z, CartesianVoltage& vv,
                    std::vector<VectorXd>& uu) {
    vv = z.head(2 * n);
    int off = 2 * n;
    for (int j = 0; j < n; ++j) {
      uu[j] = z.segment(off, uu[j].size());
      off += static_cast<int>(uu[j].size());
    }
  };

  // Scaled-dual consensus iteration: each bus minimizes its objective with
  // the quadratic penalty anchored at M_j v - u_j, the shared voltage is the
  // weighted least-squares fit to x_j + u_j, and the duals integrate the
  // remaining disagreement. At the fixed point x_j = M_j v exactly and
  // mu_j u_j carries the local objective gradient, so the shared voltage is
  // a stationary point of the full problem rather than a penalty-biased one.
  //
  // The linear tail of that iteration (dominated by low-curvature modes such
  // as the loss profile) is collapsed with safeguarded Anderson extrapolation
  // over the packed state. It engages only once the sweep has settled - balls
  // slack and the voltage step already small - so the nonsmooth transient
  // (active-set changes, radius adjustment) is handled by plain iterations,
  // and the history is dropped on any residual jump or subproblem warning.
  //
  // The trust radius is adjusted with hysteresis. Any sweep with a binding
  // ball doubles the radius at once: a ball that clamps below the natural
  // step scale absorbs the remaining objective gradient into its own
  // multiplier and freezes the iteration at a non-stationary point, and the
  // clamped residual would then seem to justify further shrinking (a death
  // spiral), so growth must win immediately and decisively. The radius
  // decays geometrically only after several consecutive fully-slack sweeps
  // and only while it sits well above the observed motion, so it trails the
  // decaying step scale from a safe distance instead of overtaking it (a
  // geometric decay is faster than most convergence tails and would
  // otherwise clamp genuine motion near the fixed point). A slack final
  // sweep is also required for declaring convergence - it certifies no
  // gradient is hiding in a ball multiplier.
  const int aa_depth = 8;
  std::vector<VectorXd> hist_fix, hist_res;  // G(z) and G(z) - z
  double prev_res_norm = std::numeric_limits<double>::infinity();
  bool just_extrapolated = false;
  double pre_aa_res = 0.0;   // residual right before the last extrapolation
  VectorXd z_plain_stash;    // plain map output the extrapolation replaced
  std::vector<double> step_hist;
  int aa_cooldown = 0;   // plain sweeps required before the next extrapolation
  int plain_streak = 0;  // consecutive sweeps taken from un-extrapolated state
  CartesianVoltage v_map = v;  // last un-extrapolated map output

  // The consensus penalty is rescaled online by primal/dual residual
  // balancing: a primal residual stuck far above the dual one means the
  // penalty is too weak to pull the local solutions onto the shared voltage
  // (the iteration orbits in a limit cycle), and vice versa. The voltage
  // update is invariant under a uniform rescaling of all mu_j, so only the
  // subproblem pull and the scaled duals change - no refactorization.
  // Rescaling stops late in the budget so the endgame runs on a fixed map.
  double mu_scale = 1.0;
  const double mu_scale_lo = 1.0 / 64.0, mu_scale_hi = 1024.0;
  int adapt_cooldown = 0;

  double delta = cfg_.delta0;
  bool prev_slack = false;
  bool prev_binding = false;
  double prev_step = 0.0;
  int slack_streak = 0;
  for (int m = 1; m <= cfg_.max_iterations; ++m) {
    if (m > 1) {
      if (prev_binding) {
        delta = std::min(cfg_.delta0, delta * 2.0);
        slack_streak = 0;
      } else if (prev_slack) {
        if (++slack_streak >= 3 && delta > 20.0 * prev_step)
          delta *= cfg_.delta_decay;
      } else {
        slack_streak = 0;
      }
    }
    double max_step = 0.0;
    bool warned_now = false;
    for (int j = 0; j < n; ++j) {
      VectorXd ball_center = maps_[j].M * v;
      std::string warn;
      x[j] = solve_local(j, ball_center - u[j], ball_center, delta, mu_scale,
                         &warn);
      if (!warn.empty()) {
        bus_warn[j] = warn;
        warned_now = true;
      }
      max_step = std::max(max_step, (x[j] - ball_center).norm());
      y[j] = x[j] + u[j];
    }
    CartesianVoltage v_new = global_update(y, pre_);
    const double vnorm = std::max(v_new.norm(), 1e-12);
    std::vector<VectorXd> u_new(n);
    for (int j = 0; j < n; ++j) u_new[j] = u[j] + x[j] - maps_[j].M * v_new;

    IterationRecord rec;
    rec.iter = m;
    rec.rel_voltage_change = (v_new - v).norm() / vnorm;
    double cons = 0.0, bal = 0.0;
    double gap_sq = 0.0, vstep_sq = 0.0;
    double x_sq = 0.0, mv_sq = 0.0, u_sq = 0.0;
    for (int j = 0; j < n; ++j) {
      const VectorXd mvj = maps_[j].M * v_new;
      const double rj = (x[j] - mvj).norm();
      cons = std::max(cons, rj);
      gap_sq += rj * rj;
      vstep_sq += (maps_[j].M * (v_new - v)).squaredNorm();
      x_sq += x[j].squaredNorm();
      mv_sq += mvj.squaredNorm();
      u_sq += u_new[j].squaredNorm();
      // balance bookkeeping at the shared voltage, which is what the final
      // feasibility audit sees
      Vector4d a = mvj.head<4>();
      const double pinj = a.dot(factors_.core_p * a);
      const double qinj = a.dot(factors_.core_q[j] * a);
      const auto& b = case_.buses[j];
      if (busgen_[j].present) {
        const double p = pinj + b.p_demand, q = qinj + b.q_demand;
        bal = std::max(bal, std::max(0.0, p - busgen_[j].p_max));
        bal = std::max(bal, std::max(0.0, busgen_[j].p_min - p));
        bal = std::max(bal, std::max(0.0, q - busgen_[j].q_max));
        bal = std::max(bal, std::max(0.0, busgen_[j].q_min - q));
      } else {
        bal = std::max(bal, std::abs(pinj + b.p_demand));
        bal = std::max(bal, std::abs(qinj + b.q_demand));
      }
    }
    rec.max_consensus_residual = cons;
    rec.max_balance_mismatch = bal;
    rec.delta = delta;
    rec.max_step = max_step;
    rec.mu_scale = mu_scale;
    double cost = 0.0;
    for (int j = 0; j < n; ++j) {
      if (!busgen_[j].present) continue;
      Vector4d a = x[j].head<4>();
      const double p =
          a.dot(factors_.core_p * a) + case_.buses[j].p_demand;
      const BusGen& bg = busgen_[j];
      cost += bg.c2 * p * p + bg.c1 * p + bg.c0;
    }
    rec.objective = cost;
    rep.trace.push_back(rec);
    rep.iterations = m;
    v_map = v_new;

    // Projected remaining travel of the voltage tail: with contraction ratio
    // rho the geometric sum of future steps is step * rho / (1 - rho).
    // Stopping on the per-step change alone can freeze a slow mode several
    // orders of magnitude short of stationarity. The ratio is estimated as
    // the worst geometric mean over several window lengths - a short window
    // alone reads the currently-dominant fast component and misses slow
    // modes whose plateau only shows across tens of iterations.
    const double step_now = (v_new - v).norm();
    step_hist.push_back(std::max(step_now, 1e-300));
    double rho = 0.0;
    for (int w : {1, 5, 20, 50}) {
      const int sz = static_cast<int>(step_hist.size());
      if (sz > w) {
        const double r = std::pow(step_hist[sz - 1] / step_hist[sz - 1 - w],
                                  1.0 / static_cast<double>(w));
        rho = std::max(rho, r);
      }
    }
    rho = std::min(rho, 0.9999);
    const double projected_drift = step_now * rho / (1.0 - rho);

    // Convergence may only be declared on plainly-generated evidence: right
    // after an extrapolation the step history reads artificially small and
    // the contraction estimate cannot see a slow mode regrowing, so a run of
    // plain sweeps must confirm the state first.
    const bool slack = max_step < 0.5 * delta;
    const bool tight = cons <= 0.1 * cfg_.tolerance * std::max(1.0, vnorm);
    if (plain_streak >= 10 && rec.rel_voltage_change < cfg_.tolerance &&
        tight && slack && projected_drift <= cfg_.tolerance * vnorm) {
      v = v_new;
      u = u_new;
      rep.converged = true;
      break;
    }
    prev_slack = slack;
    prev_binding = max_step >= 0.9 * delta;
    prev_step = max_step;

    // Residual balancing with both residuals normalized to dimensionless
    // form: the primal gap relative to the iterate size, and the voltage
    // motion relative to the accumulated dual. The dual residual proper is
    // mu * M^T(v_new - v) and the dual magnitude is mu * u, so mu cancels
    // from their ratio - comparing the raw quantities instead biases the
    // test toward ever-stiffer penalties (the dual side shrinks as 1/mu).
    bool adapted = false;
    --adapt_cooldown;
    if (cfg_.adaptive_penalty && m >= 10 &&
        m <= (7 * cfg_.max_iterations) / 10 && adapt_cooldown <= 0) {
      const double r_rel = std::sqrt(gap_sq) /
                           std::max(std::sqrt(std::max(x_sq, mv_sq)), 1e-12);
      const double s_rel =
          std::sqrt(vstep_sq) / std::max(std::sqrt(u_sq), 1e-12);
      double factor = 0.0;
      if (r_rel > 5.0 * s_rel && mu_scale < mu_scale_hi)
        factor = 2.0;
      else if (s_rel > 5.0 * r_rel && mu_scale > mu_scale_lo)
        factor = 0.5;
      if (factor != 0.0) {
        mu_scale *= factor;
        // lambda = mu * u: rescaling mu must preserve the accumulated force
        for (int j = 0; j < n; ++j) {
          u[j] /= factor;
          u_new[j] /= factor;
        }
        adapted = true;
        adapt_cooldown = 5;
      }
    }

    // Anderson bookkeeping on z -> G(z). The integrator structure of the
    // dual ramp produces near-affine tails (contraction ratios within 1e-4
    // of one), so the extrapolation coefficients legitimately reach ~1/(1-
    // ratio); they are clipped rather than rejected, and a residual jump on
    // any iteration other than the one right after an extrapolation flushes
    // the history (active-set change / regime change).
    VectorXd z_cur = pack(v, u);
    VectorXd z_fix = pack(v_new, u_new);
    VectorXd res = z_fix - z_cur;
    const double res_norm = res.norm();

    // Post-extrapolation audit: if the extrapolated point made the residual
    // worse than where the plain step left off, the local linear model was
    // wrong - fall back to the stashed plain output and drop the history.
    // A failed extrapolation then costs one iteration, not a re-settling
    // transient.
    if (!adapted && just_extrapolated && res_norm > 2.0 * pre_aa_res) {
      unpack(z_plain_stash, v, u);
      v_map = z_plain_stash.head(2 * n);
      hist_fix.clear();
      hist_res.clear();
      prev_res_norm = pre_aa_res;
      just_extrapolated = false;
      plain_streak = 0;
      continue;
    }

    if (adapted || warned_now ||
        (!just_extrapolated && res_norm > 3.0 * prev_res_norm)) {
      hist_fix.clear();
      hist_res.clear();
    }
    prev_res_norm = adapted ? std::numeric_limits<double>::infinity()
                            : res_norm;
    just_extrapolated = false;
    if (!adapted) {
      hist_fix.push_back(z_fix);
      hist_res.push_back(res);
      if (static_cast<int>(hist_fix.size()) > aa_depth + 1) {
        hist_fix.erase(hist_fix.begin());
        hist_res.erase(hist_res.begin());
      }
    }

    VectorXd z_next = z_fix;  // plain step by default
    const int k = static_cast<int>(hist_fix.size());
    --aa_cooldown;
    if (cfg_.use_anderson && aa_cooldown <= 0 &&
        rec.rel_voltage_change < 1e-3 && k >= 2) {
      MatrixXd dR(zdim, k - 1), dG(zdim, k - 1);
      for (int i = 0; i < k - 1; ++i) {
        dR.col(i) = hist_res[i + 1] - hist_res[i];
        dG.col(i) = hist_fix[i + 1] - hist_fix[i];
      }
      VectorXd gamma = dR.colPivHouseholderQr().solve(res);
      const double gmax = gamma.lpNorm<Eigen::Infinity>();
      if (gamma.allFinite() && gmax > 0.0) {
        if (gmax > 1e4) gamma *= 1e4 / gmax;
        z_next = z_fix - dG * gamma;
        just_extrapolated = true;
        pre_aa_res = res_norm;
        z_plain_stash = z_fix;
        aa_cooldown = 12;
      }
    }
    plain_streak = just_extrapolated ? 0 : plain_streak + 1;
    unpack(z_next, v, u);
  }

  for (int j = 0; j < n; ++j)
    if (!bus_warn[j].empty()) rep.warnings.push_back(bus_warn[j]);

  rep.v = v_map;
  rep.dispatch = recover_dispatch(x);
  if (!rep.trace.empty()) {
    rep.final_consensus_residual = rep.trace.back().max_consensus_residual;
    rep.objective = rep.trace.back().objective;
  }
  if (cfg_.verify_with_oracle) {
    rep.max_constraint_violation =
        oracle::constraint_violation(case_, adm_, v);
    rep.feasible = rep.max_constraint_violation <= 1e-6;
  }
  return rep;
}

SolveReport solve_case(const NetworkCase& c, const SolverConfig& cfg) {
  AdmmEngine engine(c, cfg);
  return engine.run();
}

}  // namespace topf
