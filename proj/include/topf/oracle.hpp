#pragma once

#include <Eigen/Dense>
#include <vector>

#include "topf/case_model.hpp"

namespace topf::oracle {

// Ground-truth evaluations in complex arithmetic. Everything here is kept
// independent of the quadratic-form coefficient path so the two can be
// cross-checked against each other.

struct BusPower {
  double p = 0.0;
  double q = 0.0;
};

struct BranchFlow {
  BusPower from;  // flow leaving the from-bus into the line
  BusPower to;    // flow leaving the to-bus into the line
};

// S_j = V_j * conj((Y V)_j) for every bus.
std::vector<BusPower> complex_injection(const CartesianVoltage& v,
                                        const AdmittanceModel& adm);

BranchFlow complex_branch_flow(const CartesianVoltage& v,
                               const AdmittanceModel& adm, int branch_index,
                               const NetworkCase& c);

// Dense symmetric matrices of the injection/flow quadratic forms, assembled
// directly from Y rows (used by the oracle-side optimizers; this is a
// different arithmetic path from the compact-coefficient machinery).
Eigen::MatrixXd dense_injection_p(const AdmittanceModel& adm, int j);
Eigen::MatrixXd dense_injection_q(const AdmittanceModel& adm, int j);
// end = 0 for the from side, 1 for the to side.
Eigen::MatrixXd dense_flow_p(const NetworkCase& c, const AdmittanceModel& adm,
                             int branch_index, int end);
Eigen::MatrixXd dense_flow_q(const NetworkCase& c, const AdmittanceModel& adm,
                             int branch_index, int end);

// Rectangular Newton power flow for a fully scheduled case: the reference
// bus holds a fixed complex voltage, every other bus holds scheduled (p, q)
// net injections. Returns the voltage with balance mismatch <= tol.
CartesianVoltage newton_power_flow(const NetworkCase& c,
                                   const AdmittanceModel& adm,
                                   const std::vector<BusPower>& scheduled,
                                   double v_ref = 1.0, double tol = 1e-12,
                                   int max_iter = 60);

struct OpfResult {
  bool converged = false;
  double objective = 0.0;  // $/h
  CartesianVoltage v;
  std::vector<BusPower> dispatch;  // per generator, parallel to case list
  double kkt_residual = 0.0;
  double max_violation = 0.0;
  int starts_tried = 0;
};

struct OpfOptions {
  int multi_starts = 5;
  double kkt_tol = 1e-8;
  double feas_tol = 1e-9;
  int max_outer = 120;
  int max_inner = 400;
};

// Centralized reference solver over the full rectangular voltage vector:
// augmented-Lagrangian outer loop, damped Newton inner loop, best of a flat
// start plus deterministic perturbed starts. Local optimum only.
OpfResult centralized_opf(const NetworkCase& c, const OpfOptions& opt = {});

// Feasibility audit of an arbitrary voltage/dispatch pair against the full
// constraint set; returns the worst violation (per-unit).
double constraint_violation(const NetworkCase& c, const AdmittanceModel& adm,
                            const CartesianVoltage& v);

}  // namespace topf::oracle
