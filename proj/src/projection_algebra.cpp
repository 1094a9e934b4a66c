#include "topf/projection_algebra.hpp"

namespace topf {

using Eigen::MatrixXd;
using Eigen::Vector4d;
using Eigen::VectorXd;

Eigen::VectorXd NodalProjection::stacked() const {
  VectorXd x(dim());
  x.head<4>() = alpha;
  x.segment<2>(4) = delta;
  int at = 6;
  for (const auto& l : lambda) {
    x.segment(at, l.size()) = l;
    at += static_cast<int>(l.size());
  }
  return x;
}

void NodalProjection::set_from_stacked(const Eigen::VectorXd& x) {
  alpha = x.head<4>();
  delta = x.segment<2>(4);
  int at = 6;
  for (auto& l : lambda) {
    l = x.segment(at, l.size());
    at += static_cast<int>(l.size());
  }
}

int NodalProjection::dim() const {
  int d = 6;
  for (const auto& l : lambda) d += static_cast<int>(l.size());
  return d;
}

NodalProjection ConsensusMap::apply(const CartesianVoltage& v) const {
  NodalProjection x;
  x.bus = bus;
  VectorXd stacked = M * v;
  x.alpha = stacked.head<4>();
  x.delta = stacked.segment<2>(4);
  int at = 6;
  x.lambda.resize(lambda_dims.size());
  for (size_t i = 0; i < lambda_dims.size(); ++i) {
    x.lambda[i] = stacked.segment(at, lambda_dims[i]);
    at += lambda_dims[i];
  }
  return x;
}

std::vector<ConsensusMap> build_consensus_maps(
    const TensorFactors& f, const std::vector<FlowForm>& flows) {
  const int n = f.n;
  const int two_n = 2 * n;
  std::vector<ConsensusMap> maps(n);
  for (int j = 0; j < n; ++j) {
    ConsensusMap& m = maps[j];
    m.bus = j;
    for (size_t fi = 0; fi < flows.size(); ++fi)
      if (flows[fi].bus == j) {
        m.incident.push_back(static_cast<int>(fi));
        m.lambda_dims.push_back(static_cast<int>(flows[fi].K.cols()));
      }
    int rows = 6;
    for (int d : m.lambda_dims) rows += d;
    m.M.resize(rows, two_n);

    // alpha rows
    MatrixXd vq = f.V * f.QR[j];  // 2N x 4
    m.M.topRows<4>() = f.R[j].transpose() * vq.transpose();
    // delta rows: plain coordinate selectors
    m.M.middleRows<2>(4).setZero();
    m.M(4, j) = 1.0;
    m.M(5, j + n) = 1.0;
    // line rows: component of v outside the bus range basis, seen by K
    int at = 6;
    for (size_t i = 0; i < m.incident.size(); ++i) {
      const FlowForm& fl = flows[m.incident[i]];
      // K^T (I - VQ Q^T V^T)
      MatrixXd kt = fl.K.transpose();
      m.M.middleRows(at, m.lambda_dims[i]) =
          kt - (kt * vq) * vq.transpose();
      at += m.lambda_dims[i];
    }
  }
  return maps;
}

NodalProjection project(const CartesianVoltage& v, const ConsensusMap& map) {
  return map.apply(v);
}

PQValue projected_balance(const NodalProjection& x, const TensorFactors& f) {
  PQValue r;
  r.p = x.alpha.dot(f.core_p * x.alpha);
  r.q = x.alpha.dot(f.core_q.at(x.bus) * x.alpha);
  return r;
}

PQValue projected_flow(const NodalProjection& x, int slot,
                       const ProjectedFlowForm& pf) {
  const VectorXd& l = x.lambda.at(slot);
  PQValue r;
  r.p = x.alpha.dot(pf.Fp * x.alpha) + 2.0 * x.alpha.dot(pf.Gp * l) +
        l.dot(pf.Sp.asDiagonal() * l);
  r.q = x.alpha.dot(pf.Fq * x.alpha) + 2.0 * x.alpha.dot(pf.Gq * l) +
        l.dot(pf.Iq * l);
  return r;
}

double voltage_magnitude_sq(const Eigen::Vector2d& delta) {
  return delta.squaredNorm();
}

Eigen::Vector4d beta_from_alpha(const Eigen::Vector4d& alpha,
                                const TensorFactors& f, int bus) {
  // beta = R_{j+N}^T R_j^{-T} alpha
  Vector4d t = f.R[bus]
                   .transpose()
                   .triangularView<Eigen::Lower>()
                   .solve(alpha);
  return f.R[bus + f.n].transpose() * t;
}

Eigen::VectorXd gamma_coordinate(const TensorFactors& f, int bus,
                                 const CartesianVoltage& v) {
  return null_basis(f, bus).transpose() * (f.V.transpose() * v);
}

}  // namespace topf
