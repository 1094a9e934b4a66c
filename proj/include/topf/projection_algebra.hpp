#pragma once

#include <Eigen/Dense>
#include <vector>

#include "topf/hogsvd_core.hpp"

namespace topf {

// Low-dimensional nodal state x_j: alpha (4), delta (2), then one length-r
// line coordinate per incident line end, stacked in incident-line order.
struct NodalProjection {
  int bus = 0;
  Eigen::Vector4d alpha;
  Eigen::Vector2d delta;
  std::vector<Eigen::VectorXd> lambda;  // one per incident line end

  Eigen::VectorXd stacked() const;
  void set_from_stacked(const Eigen::VectorXd& x);
  int dim() const;
};

// Linear map from the global voltage to a bus's stacked nodal state. Rows:
//   alpha block: R_j^T QR_j^T V^T
//   delta block: rows j and j+N of the identity
//   one block per incident line end: K^T (I - V QR QR^T V^T)
struct ConsensusMap {
  int bus = 0;
  std::vector<int> incident;     // indices into the flow-form list (ends here)
  std::vector<int> lambda_dims;  // row count of each line block (4 generically)
  Eigen::MatrixXd M;             // (6 + sum lambda_dims) x 2N

  NodalProjection apply(const CartesianVoltage& v) const;
};

std::vector<ConsensusMap> build_consensus_maps(
    const TensorFactors& f, const std::vector<FlowForm>& flows);

NodalProjection project(const CartesianVoltage& v, const ConsensusMap& map);

// alpha^T core_p alpha and the reactive analogue; equals the bus injection
// of the voltage that generated x.
PQValue projected_balance(const NodalProjection& x, const TensorFactors& f);

// Both flow components of one incident line end from the nodal state.
PQValue projected_flow(const NodalProjection& x, int slot,
                       const ProjectedFlowForm& pf);

double voltage_magnitude_sq(const Eigen::Vector2d& delta);

// Reactive-slice coordinate from the real-slice coordinate.
Eigen::Vector4d beta_from_alpha(const Eigen::Vector4d& alpha,
                                const TensorFactors& f, int bus);

// Complement coordinate (diagnostic only): the part of V^T v outside the
// bus's range basis.
Eigen::VectorXd gamma_coordinate(const TensorFactors& f, int bus,
                                 const CartesianVoltage& v);

}  // namespace topf
