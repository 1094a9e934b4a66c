#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "topf/oracle.hpp"
#include "topf/projection_algebra.hpp"

namespace topf {

struct SolverConfig {
  double mu = 1e3;            // consensus penalty weight (uniform default)
  std::vector<double> mu_per_bus;  // optional per-bus override
  // Relative consensus weight on the lifted line-flow coordinates. The flow
  // coordinates carry congestion prices whose scale is orders of magnitude
  // above the soft voltage-profile modes; weighting them harder in the
  // consensus metric lets the duals price a binding cap in a few sweeps
  // instead of a long integration ramp. 1 keeps the metric Euclidean.
  double flow_weight = 1.0;
  double n_p = 1e6;           // PQ real-balance penalty
  double n_q = 1e6;           // PQ reactive-balance penalty
  double delta0 = 1.0;        // initial trust-region radius
  double delta_decay = 0.9;   // geometric radius decay per iteration
  // Magnitude of the flat initial voltage profile. The sweep map is a local
  // method: losses fall with voltage, so loss-sensitive cases have a
  // low-cost solution near the upper magnitude bound and a flat 1.0 start
  // can settle into a lossier stationary point. Starting the profile high
  // selects the economic basin.
  double v0_magnitude = 1.0;
  int max_iterations = 500;
  double tolerance = 1e-6;    // relative voltage change
  bool social_responsibility = true;
  // Acceleration / adaptation switches. Both default on; turning them off
  // yields the plain fixed-point sweep, which some diagnostics and the
  // algebraic invariance tests rely on.
  bool use_anderson = true;
  bool adaptive_penalty = true;
  // Penalty continuation: start the sweep at mu * mu_ramp_start and double
  // the working penalty every mu_ramp_interval iterations until it reaches
  // the configured mu. A soft opening moves the iterate quickly into the
  // solution neighbourhood and lets the consensus duals form at speed; the
  // stiff endgame then contracts cleanly. 1.0 disables the ramp. The
  // accumulated dual force mu*u is preserved across each doubling, and the
  // voltage update is invariant under the uniform rescaling.
  double mu_ramp_start = 1.0;
  int mu_ramp_interval = 20;
  double inner_kkt_tol = 1e-9;
  int inner_max_newton = 200;
  bool verify_with_oracle = true;

  double mu_at(int bus) const {
    return mu_per_bus.empty() ? mu : mu_per_bus.at(bus);
  }
};

// Precomputed pieces of the analytic voltage update. The normal matrix is
// factored once; each bus then owns a dense operator T_j = Minv * mu_j M_j^T
// so its voltage contribution costs O(N * dim(x_j)) per iteration.
struct GlobalPrecomp {
  int n = 0;
  int ref = 0;
  Eigen::MatrixXd normal;            // sum_j mu_j M_j^T W_j M_j
  std::vector<Eigen::MatrixXd> T;    // per bus, 2N x dim(x_j)
  Eigen::VectorXd tau;               // Minv * e_{ref+N}
  double tau_ref = 0.0;              // e_{ref+N}^T tau
  bool regularized = false;
};

GlobalPrecomp precompute_global(const std::vector<ConsensusMap>& maps,
                                const SolverConfig& cfg, int ref_bus);

// Exact minimizer of sum_j mu_j ||x_j - M_j v||^2_{W_j} over v with the
// reference imaginary entry pinned to zero (W_j is the diagonal consensus
// metric; identity unless flow_weight != 1). Built as a sum of per-bus
// contributions.
CartesianVoltage global_update(const std::vector<Eigen::VectorXd>& x,
                               const GlobalPrecomp& pre);

// Per-bus contribution v_j (the summand of the global update); exposed for
// the scaling benchmark.
Eigen::VectorXd global_update_bus(const Eigen::VectorXd& x_j, int bus,
                                  const GlobalPrecomp& pre);

// Raises generator p_min to cover local demand that incident line capacity
// cannot import. Throws if that collides with p_max.
NetworkCase apply_social_responsibility(const NetworkCase& c);

struct IterationRecord {
  int iter = 0;
  double rel_voltage_change = 0.0;
  double max_consensus_residual = 0.0;
  double max_balance_mismatch = 0.0;
  double objective = 0.0;
  double delta = 0.0;     // trust radius used for this sweep
  double max_step = 0.0;  // largest ||x_j - M_j v|| over buses
  double mu_scale = 1.0;  // adaptive multiplier on the configured penalty
};

struct DispatchEntry {
  int bus = 0;
  double p = 0.0;  // per-unit generation
  double q = 0.0;
};

struct SolveReport {
  bool converged = false;
  bool feasible = false;
  int iterations = 0;
  double objective = 0.0;  // $/h
  double max_constraint_violation = 0.0;
  double final_consensus_residual = 0.0;
  CartesianVoltage v;
  std::vector<DispatchEntry> dispatch;
  std::vector<IterationRecord> trace;
  std::vector<std::string> warnings;
};

// Subproblem interface (exposed for tests). Solves the trust-region
// constrained local problem at one bus and returns the stacked state.
struct LocalProblem;  // opaque; built by the engine

class AdmmEngine {
 public:
  AdmmEngine(const NetworkCase& c, const SolverConfig& cfg);

  SolveReport run();

  // Single-bus solves against a frozen voltage (unit-test hooks).
  Eigen::VectorXd solve_pv_subproblem(int bus, const CartesianVoltage& v,
                                      double delta) const;
  Eigen::VectorXd solve_pq_subproblem(int bus, const CartesianVoltage& v,
                                      double delta) const;

  const TensorFactors& factors() const { return factors_; }
  const std::vector<ConsensusMap>& maps() const { return maps_; }
  const std::vector<FlowForm>& flow_forms() const { return flows_; }
  const GlobalPrecomp& precomp() const { return pre_; }
  const NetworkCase& working_case() const { return case_; }

  std::vector<DispatchEntry> recover_dispatch(
      const std::vector<Eigen::VectorXd>& x) const;

 private:
  Eigen::VectorXd solve_local(int bus, const Eigen::VectorXd& pen_center,
                              const Eigen::VectorXd& ball_center, double delta,
                              double mu_scale, std::string* warn) const;

  NetworkCase case_;
  SolverConfig cfg_;
  AdmittanceModel adm_;
  std::vector<InjectionForm> inj_;
  std::vector<FlowForm> flows_;
  TensorFactors factors_;
  std::vector<ConsensusMap> maps_;
  std::vector<ProjectedFlowForm> projected_;
  GlobalPrecomp pre_;
  // Per-bus aggregated generator data (one equivalent machine per PV bus).
  struct BusGen {
    bool present = false;
    double p_min = 0, p_max = 0, q_min = 0, q_max = 0;
    double c2 = 0, c1 = 0, c0 = 0;
  };
  std::vector<BusGen> busgen_;

  friend struct LocalProblem;
};

SolveReport solve_case(const NetworkCase& c, const SolverConfig& cfg = {});

}  // namespace topf
