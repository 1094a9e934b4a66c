#include "topf/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "al_solver.hpp"

namespace topf::oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::vector<BusPower> complex_injection(const CartesianVoltage& v,
                                        const AdmittanceModel& adm) {
  const int n = adm.n;
  VectorXd x = v.head(n), y = v.tail(n);
  // I = Y V in rectangular parts
  VectorXd ire = adm.G * x - adm.B * y;
  VectorXd iim = adm.G * y + adm.B * x;
  std::vector<BusPower> out(n);
  for (int j = 0; j < n; ++j) {
    out[j].p = x[j] * ire[j] + y[j] * iim[j];
    out[j].q = y[j] * ire[j] - x[j] * iim[j];
  }
  return out;
}

BranchFlow complex_branch_flow(const CartesianVoltage& v,
                               const AdmittanceModel& adm, int branch_index,
                               const NetworkCase& c) {
  const auto& br = c.branches.at(branch_index);
  const auto& ba = adm.branch.at(branch_index);
  const int n = adm.n;
  std::complex<double> vf(v[br.from_bus], v[br.from_bus + n]);
  std::complex<double> vt(v[br.to_bus], v[br.to_bus + n]);
  std::complex<double> sf = vf * std::conj(ba.y_ff * vf + ba.y_ft * vt);
  std::complex<double> st = vt * std::conj(ba.y_tf * vf + ba.y_tt * vt);
  return {{sf.real(), sf.imag()}, {st.real(), st.imag()}};
}

// Symmetric dense matrix of p = x_j (row_g . x - row_b . y) + y_j (row_g . y + row_b . x)
// for generic row vectors; shared by injection and flow assembly.
static MatrixXd symmetrize_power_row(int n, int j, const VectorXd& row_g,
                                     const VectorXd& row_b, bool reactive) {
  MatrixXd H = MatrixXd::Zero(2 * n, 2 * n);
  if (!reactive) {
    H.row(j).head(n) = row_g.transpose();
    H.row(j).tail(n) = -row_b.transpose();
    H.row(j + n).head(n) = row_b.transpose();
    H.row(j + n).tail(n) = row_g.transpose();
  } else {
    H.row(j + n).head(n) = row_g.transpose();
    H.row(j + n).tail(n) = -row_b.transpose();
    H.row(j).head(n) = -row_b.transpose();
    H.row(j).tail(n) = -row_g.transpose();
  }
  return 0.5 * (H + H.transpose());
}

Eigen::MatrixXd dense_injection_p(const AdmittanceModel& adm, int j) {
  return symmetrize_power_row(adm.n, j, adm.G.row(j), adm.B.row(j), false);
}

Eigen::MatrixXd dense_injection_q(const AdmittanceModel& adm, int j) {
  return symmetrize_power_row(adm.n, j, adm.G.row(j), adm.B.row(j), true);
}

static void flow_rows(const AdmittanceModel& adm, const NetworkCase& c,
                      int branch_index, int end, int* bus, VectorXd* row_g,
                      VectorXd* row_b) {
  const auto& br = c.branches.at(branch_index);
  const auto& ba = adm.branch.at(branch_index);
  *row_g = VectorXd::Zero(adm.n);
  *row_b = VectorXd::Zero(adm.n);
  if (end == 0) {
    *bus = br.from_bus;
    (*row_g)[br.from_bus] += ba.y_ff.real();
    (*row_b)[br.from_bus] += ba.y_ff.imag();
    (*row_g)[br.to_bus] += ba.y_ft.real();
    (*row_b)[br.to_bus] += ba.y_ft.imag();
  } else {
    *bus = br.to_bus;
    (*row_g)[br.to_bus] += ba.y_tt.real();
    (*row_b)[br.to_bus] += ba.y_tt.imag();
    (*row_g)[br.from_bus] += ba.y_tf.real();
    (*row_b)[br.from_bus] += ba.y_tf.imag();
  }
}

MatrixXd dense_flow_p(const NetworkCase& c, const AdmittanceModel& adm,
                      int branch_index, int end) {
  int bus;
  VectorXd rg, rb;
  flow_rows(adm, c, branch_index, end, &bus, &rg, &rb);
  return symmetrize_power_row(adm.n, bus, rg, rb, false);
}

MatrixXd dense_flow_q(const NetworkCase& c, const AdmittanceModel& adm,
                      int branch_index, int end) {
  int bus;
  VectorXd rg, rb;
  flow_rows(adm, c, branch_index, end, &bus, &rg, &rb);
  return symmetrize_power_row(adm.n, bus, rg, rb, true);
}

CartesianVoltage newton_power_flow(const NetworkCase& c,
                                   const AdmittanceModel& adm,
                                   const std::vector<BusPower>& scheduled,
                                   double v_ref, double tol, int max_iter) {
  const int n = adm.n;
  const int ref = c.reference_bus;
  if (static_cast<int>(scheduled.size()) != n)
    throw numeric_error("newton_power_flow: schedule size mismatch");

  CartesianVoltage v = flat_start(c);
  v[ref] = v_ref;

  // Unknown layout: (x_j, y_j) for every non-reference bus.
  std::vector<int> free_bus;
  for (int j = 0; j < n; ++j)
    if (j != ref) free_bus.push_back(j);
  const int m = static_cast<int>(free_bus.size());

  for (int it = 0; it < max_iter; ++it) {
    VectorXd x = v.head(n), y = v.tail(n);
    VectorXd a = adm.G * x - adm.B * y;   // I_re
    VectorXd b = adm.G * y + adm.B * x;   // I_im

    VectorXd mism(2 * m);
    for (int r = 0; r < m; ++r) {
      int j = free_bus[r];
      mism[r] = x[j] * a[j] + y[j] * b[j] - scheduled[j].p;
      mism[m + r] = y[j] * a[j] - x[j] * b[j] - scheduled[j].q;
    }
    if (mism.lpNorm<Eigen::Infinity>() <= tol) return v;

    MatrixXd J(2 * m, 2 * m);
    for (int r = 0; r < m; ++r) {
      int j = free_bus[r];
      for (int s = 0; s < m; ++s) {
        int k = free_bus[s];
        double djk = (j == k) ? 1.0 : 0.0;
        J(r, s) = djk * a[j] + x[j] * adm.G(j, k) + y[j] * adm.B(j, k);
        J(r, m + s) = djk * b[j] - x[j] * adm.B(j, k) + y[j] * adm.G(j, k);
        J(m + r, s) = -djk * b[j] + y[j] * adm.G(j, k) - x[j] * adm.B(j, k);
        J(m + r, m + s) = djk * a[j] - y[j] * adm.B(j, k) - x[j] * adm.G(j, k);
      }
    }
    VectorXd step = J.partialPivLu().solve(-mism);
    if (!step.allFinite())
      throw numeric_error("newton_power_flow: singular Jacobian");
    // plain Newton with a mild step cap for the first iterations
    double cap = (it < 3) ? 0.5 : 1e9;
    double norm = step.lpNorm<Eigen::Infinity>();
    if (norm > cap) step *= cap / norm;
    for (int r = 0; r < m; ++r) {
      v[free_bus[r]] += step[r];
      v[free_bus[r] + n] += step[m + r];
    }
  }
  throw nonconvergence_error("newton_power_flow: no convergence");
}

// ------------------------- centralized OPF -------------------------

namespace {

// One equivalent machine per generator bus (bounds summed, quadratic costs
// merged by proportional output share).
struct AggGen {
  int bus = 0;
  double p_min = 0, p_max = 0, q_min = 0, q_max = 0;
  double c2 = 0, c1 = 0, c0 = 0;
};

std::vector<AggGen> aggregate_generators(const NetworkCase& c) {
  std::vector<AggGen> out;
  for (const auto& b : c.buses) {
    auto idx = c.generators_at(b.index);
    if (idx.empty()) continue;
    AggGen a;
    a.bus = b.index;
    double wsum = 0;
    for (int gi : idx) {
      const auto& g = c.generators[gi];
      a.p_min += g.p_min;
      a.p_max += g.p_max;
      a.q_min += g.q_min;
      a.q_max += g.q_max;
      wsum += std::max(g.p_max, 1e-9);
    }
    // proportional-share merge: C(p) = sum_i C_i(w_i p)
    for (int gi : idx) {
      const auto& g = c.generators[gi];
      double w = std::max(g.p_max, 1e-9) / wsum;
      a.c2 += g.c2 * w * w;
      a.c1 += g.c1 * w;
      a.c0 += g.c0;
    }
    out.push_back(a);
  }
  return out;
}

struct DenseConstraintSet {
  // Quadratic rows: value = v' A v + rhs, either equality or boxed.
  struct QRow {
    MatrixXd A;
    double shift = 0;      // added to v'Av before comparison
    double lo = 0, hi = 0; // bounds on (v'Av + shift)
    bool eq = false;       // lo == hi treated as equality
  };
  struct CapRow {
    MatrixXd Ap, Aq;
    double cap = 0;
  };
  std::vector<QRow> quads;
  std::vector<CapRow> caps;
};

}  // namespace

OpfResult centralized_opf(const NetworkCase& c, const OpfOptions& opt) {
  const AdmittanceModel adm = build_admittance(c);
  const int n = adm.n;
  const int ref = c.reference_bus;
  const auto gens = aggregate_generators(c);

  std::vector<char> has_gen(n, 0);
  std::vector<AggGen> gen_at(n);
  for (const auto& g : gens) {
    has_gen[g.bus] = 1;
    gen_at[g.bus] = g;
  }

  // Constraint sets over the full 2N-vector (the reference imaginary entry
  // is eliminated from the optimization variables below).
  DenseConstraintSet cs;
  std::vector<MatrixXd> inj_p(n), inj_q(n);
  for (int j = 0; j < n; ++j) {
    inj_p[j] = dense_injection_p(adm, j);
    inj_q[j] = dense_injection_q(adm, j);
    const auto& b = c.buses[j];
    if (has_gen[j]) {
      const auto& g = gen_at[j];
      cs.quads.push_back({inj_p[j], b.p_demand, g.p_min, g.p_max, false});
      cs.quads.push_back({inj_q[j], b.q_demand, g.q_min, g.q_max, false});
    } else {
      cs.quads.push_back({inj_p[j], b.p_demand, 0.0, 0.0, true});
      cs.quads.push_back({inj_q[j], b.q_demand, 0.0, 0.0, true});
    }
    MatrixXd Ev = MatrixXd::Zero(2 * n, 2 * n);
    Ev(j, j) = 1.0;
    Ev(j + n, j + n) = 1.0;
    cs.quads.push_back(
        {Ev, 0.0, b.v_min * b.v_min, b.v_max * b.v_max, false});
  }
  for (size_t k = 0; k < c.branches.size(); ++k) {
    if (!c.branches[k].cap) continue;
    for (int end = 0; end < 2; ++end)
      cs.caps.push_back({dense_flow_p(c, adm, static_cast<int>(k), end),
                         dense_flow_q(c, adm, static_cast<int>(k), end),
                         *c.branches[k].cap});
  }

  // Count scalar constraints: equalities and inequalities.
  int n_eq = 0, n_in = 0;
  for (const auto& q : cs.quads)
    q.eq ? ++n_eq : (n_in += 2);
  n_in += static_cast<int>(cs.caps.size());

  const int dim = 2 * n - 1;  // drop the reference imaginary entry
  auto embed = [&](const VectorXd& z) {
    VectorXd v(2 * n);
    v.head(ref + n) = z.head(ref + n);
    v[ref + n] = 0.0;
    v.tail(n - 1 - ref) = z.tail(n - 1 - ref);
    return v;
  };
  auto reduce_grad = [&](const VectorXd& gv) {
    VectorXd gz(dim);
    gz.head(ref + n) = gv.head(ref + n);
    gz.tail(n - 1 - ref) = gv.tail(n - 1 - ref);
    return gz;
  };
  auto reduce_hess = [&](const MatrixXd& Hv) {
    MatrixXd Hz(dim, dim);
    auto keep = [&](int i) { return i < ref + n ? i : i + 1; };
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) Hz(i, j) = Hv(keep(i), keep(j));
    return Hz;
  };

  detail::AlProblem prob;
  prob.dim = dim;
  prob.n_eq = n_eq;
  prob.n_ineq = n_in;

  prob.objective = [&](const VectorXd& z, VectorXd* grad, MatrixXd* hess) {
    VectorXd v = embed(z);
    double f = 0;
    VectorXd gv = VectorXd::Zero(2 * n);
    MatrixXd Hv;
    if (hess) Hv = MatrixXd::Zero(2 * n, 2 * n);
    for (const auto& g : gens) {
      double pinj = v.dot(inj_p[g.bus] * v);
      double p = pinj + c.buses[g.bus].p_demand;
      f += g.c2 * p * p + g.c1 * p + g.c0;
      if (grad || hess) {
        double dCdp = 2 * g.c2 * p + g.c1;
        VectorXd dp = 2.0 * (inj_p[g.bus] * v);
        if (grad) gv.noalias() += dCdp * dp;
        if (hess) {
          Hv.noalias() += 2 * g.c2 * dp * dp.transpose();
          Hv.noalias() += dCdp * 2.0 * inj_p[g.bus];
        }
      }
    }
    if (grad) *grad = reduce_grad(gv);
    if (hess) *hess = reduce_hess(Hv);
    return f;
  };

  // Constraint layout: equalities first (balance rows of load buses), then
  // inequalities: for each boxed quad two rows (upper, lower), then caps.
  prob.constraints = [&](const VectorXd& z, VectorXd& ceq, MatrixXd& Jeq,
                         VectorXd& cin, MatrixXd& Jin) {
    VectorXd v = embed(z);
    ceq.resize(n_eq);
    Jeq.resize(n_eq, dim);
    cin.resize(n_in);
    Jin.resize(n_in, dim);
    int ie = 0, ii = 0;
    for (const auto& q : cs.quads) {
      double val = v.dot(q.A * v) + q.shift;
      VectorXd dval = reduce_grad(2.0 * (q.A * v));
      if (q.eq) {
        ceq[ie] = val - q.lo;
        Jeq.row(ie) = dval.transpose();
        ++ie;
      } else {
        cin[ii] = val - q.hi;          // val <= hi
        Jin.row(ii) = dval.transpose();
        ++ii;
        cin[ii] = q.lo - val;          // val >= lo
        Jin.row(ii) = -dval.transpose();
        ++ii;
      }
    }
    for (const auto& cap : cs.caps) {
      double p = v.dot(cap.Ap * v), q = v.dot(cap.Aq * v);
      cin[ii] = p * p + q * q - cap.cap * cap.cap;
      VectorXd dp = reduce_grad(2.0 * (cap.Ap * v));
      VectorXd dq = reduce_grad(2.0 * (cap.Aq * v));
      Jin.row(ii) = (2 * p * dp + 2 * q * dq).transpose();
      ++ii;
    }
  };

  prob.add_constraint_hessians = [&](const VectorXd& z, const VectorXd& w_eq,
                                     const VectorXd& w_in, MatrixXd& H) {
    VectorXd v = embed(z);
    int ie = 0, ii = 0;
    for (const auto& q : cs.quads) {
      if (q.eq) {
        if (w_eq[ie] != 0.0) H.noalias() += w_eq[ie] * reduce_hess(2.0 * q.A);
        ++ie;
      } else {
        double w = w_in[ii] - w_in[ii + 1];
        if (w != 0.0) H.noalias() += w * reduce_hess(2.0 * q.A);
        ii += 2;
      }
    }
    for (const auto& cap : cs.caps) {
      double w = w_in[ii];
      if (w != 0.0) {
        double p = v.dot(cap.Ap * v), q = v.dot(cap.Aq * v);
        VectorXd dp = reduce_grad(2.0 * (cap.Ap * v));
        VectorXd dq = reduce_grad(2.0 * (cap.Aq * v));
        H.noalias() += w * (2.0 * dp * dp.transpose() +
                            2.0 * dq * dq.transpose());
        H.noalias() += w * 2.0 * p * reduce_hess(2.0 * cap.Ap);
        H.noalias() += w * 2.0 * q * reduce_hess(2.0 * cap.Aq);
      }
      ++ii;
    }
  };

  detail::AlOptions alopt;
  alopt.feas_tol = opt.feas_tol;
  alopt.max_outer = opt.max_outer;
  alopt.max_inner = opt.max_inner;

  // Deterministic multi-start: flat plus fixed-seed perturbations.
  std::mt19937 rng(20240817u);
  std::normal_distribution<double> dist(0.0, 0.02);

  OpfResult best;
  best.objective = std::numeric_limits<double>::infinity();
  for (int s = 0; s < std::max(1, opt.multi_starts); ++s) {
    VectorXd z0(dim);
    {
      CartesianVoltage v0 = flat_start(c);
      if (s > 0)
        for (int i = 0; i < 2 * n; ++i) v0[i] += dist(rng);
      v0[ref + n] = 0.0;
      z0 = reduce_grad(v0);  // same row selection as gradients
    }
    // Stationarity target relative to the objective-gradient scale; the
    // absolute option value is unreachable once the constraint penalties
    // push the augmented gradient into cancellation noise.
    VectorXd g0(dim);
    prob.objective(z0, &g0, nullptr);
    alopt.kkt_tol = opt.kkt_tol * std::max(1.0, g0.lpNorm<Eigen::Infinity>());
    detail::AlResult r = detail::solve_al(prob, z0, alopt);
    ++best.starts_tried;
    if (!r.converged) continue;
    if (r.objective < best.objective) {
      best.converged = true;
      best.objective = r.objective;
      best.v = embed(r.x);
      best.kkt_residual = r.kkt_residual;
      best.max_violation = r.max_violation;
    }
  }
  if (!best.converged)
    throw nonconvergence_error("centralized_opf: no start converged");

  // Recover dispatch at generator buses.
  auto inj = complex_injection(best.v, adm);
  best.dispatch.assign(c.generators.size(), BusPower{});
  for (size_t gi = 0; gi < c.generators.size(); ++gi) {
    const auto& g = c.generators[gi];
    auto at_bus = c.generators_at(g.bus);
    double share = 1.0 / static_cast<double>(at_bus.size());
    best.dispatch[gi].p = (inj[g.bus].p + c.buses[g.bus].p_demand) * share;
    best.dispatch[gi].q = (inj[g.bus].q + c.buses[g.bus].q_demand) * share;
  }
  return best;
}

double constraint_violation(const NetworkCase& c, const AdmittanceModel& adm,
                            const CartesianVoltage& v) {
  const int n = adm.n;
  auto inj = complex_injection(v, adm);
  const auto gens = aggregate_generators(c);
  std::vector<char> has_gen(n, 0);
  std::vector<AggGen> gen_at(n);
  for (const auto& g : gens) {
    has_gen[g.bus] = 1;
    gen_at[g.bus] = g;
  }
  double worst = 0.0;
  for (int j = 0; j < n; ++j) {
    const auto& b = c.buses[j];
    double p = inj[j].p + b.p_demand;  // generation
    double q = inj[j].q + b.q_demand;
    if (has_gen[j]) {
      worst = std::max(worst, p - gen_at[j].p_max);
      worst = std::max(worst, gen_at[j].p_min - p);
      worst = std::max(worst, q - gen_at[j].q_max);
      worst = std::max(worst, gen_at[j].q_min - q);
    } else {
      worst = std::max(worst, std::abs(p));
      worst = std::max(worst, std::abs(q));
    }
    double msq = v[j] * v[j] + v[j + n] * v[j + n];
    worst = std::max(worst, b.v_min * b.v_min - msq);
    worst = std::max(worst, msq - b.v_max * b.v_max);
  }
  for (size_t k = 0; k < c.branches.size(); ++k) {
    if (!c.branches[k].cap) continue;
    auto fl = complex_branch_flow(v, adm, static_cast<int>(k), c);
    double cap = *c.branches[k].cap;
    worst = std::max(worst, std::hypot(fl.from.p, fl.from.q) - cap);
    worst = std::max(worst, std::hypot(fl.to.p, fl.to.q) - cap);
  }
  return worst;
}

}  // namespace topf::oracle
