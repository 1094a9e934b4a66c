#pragma once

#include <Eigen/Dense>
#include <vector>

#include "topf/case_model.hpp"

namespace topf {

// Compact representation of the nodal injection quadratic forms. Both the
// real and reactive forms at bus j share mu, xi, zeta and differ only in the
// diagonal coefficient and the role of the xi/zeta blocks.
struct InjectionForm {
  int bus = 0;
  double eta_p = 0.0;
  double eta_q = 0.0;
  double mu = 0.0;          // > 0 for any connected bus
  Eigen::VectorXd xi;       // length N, xi[bus] == 0
  Eigen::VectorXd zeta;     // length N, zeta[bus] == 0
};

// Per-line-end flow form. `bus` is the end the flow is measured at, `other`
// the opposite terminal. The compact coefficients are supported on a single
// off-diagonal coordinate, so the dense form has rank 4 on the coordinate
// set {bus, bus+N, other, other+N}; K/S hold its exact eigendecomposition.
struct FlowForm {
  int branch = 0;
  int bus = 0;
  int other = 0;
  double eta_p = 0.0;
  double eta_q = 0.0;
  double mu = 0.0;
  Eigen::VectorXd xi;
  Eigen::VectorXd zeta;
  Eigen::MatrixXd K;        // 2N x r, orthonormal columns (r = 4 generically)
  Eigen::VectorXd S;        // r eigenvalues of the real-power form
};

// Ordered collection of the rank-4 tensor slices: real slices 0..N-1 then
// reactive slices N..2N-1, plus the shared signature diag(1,-1,1,-1).
struct BTensor {
  int n = 0;
  std::vector<Eigen::MatrixXd> slices;  // 2N entries, each 2N x 4
  static Eigen::Matrix4d signature();
};

std::vector<InjectionForm> build_injection_forms(const AdmittanceModel& adm);

// Two forms per branch, from-end first.
std::vector<FlowForm> build_flow_forms(const NetworkCase& c,
                                       const AdmittanceModel& adm);

BTensor assemble_b_tensor(const std::vector<InjectionForm>& forms);

// Evaluates the compact form without assembling anything dense.
struct PQValue {
  double p = 0.0;
  double q = 0.0;
};
PQValue evaluate_injection(const InjectionForm& f, const CartesianVoltage& v);
PQValue evaluate_flow(const FlowForm& f, const CartesianVoltage& v);

// Dense 2N x 2N assemblies (debug path; production code stays compact).
Eigen::MatrixXd dense_form_p(const InjectionForm& f);
Eigen::MatrixXd dense_form_q(const InjectionForm& f);
Eigen::MatrixXd dense_form_p(const FlowForm& f);
Eigen::MatrixXd dense_form_q(const FlowForm& f);

}  // namespace topf
