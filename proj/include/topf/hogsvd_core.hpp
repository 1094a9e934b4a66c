#pragma once

#include <Eigen/Dense>
#include <vector>

#include "topf/quadratic_forms.hpp"

namespace topf {

// Joint factorization output: every slice satisfies
//   B_j = V * U_j * diag(Sigma_j) * W^T
// with one orthonormal V and one shared right factor W across slices. The
// per-slice QR split of U_j*Sigma_j yields the range basis Q_R and the
// triangular factor R used by the projection algebra. The reactive slice of
// a bus shares its range with the real slice, so Q_R is stored once per bus
// and the reactive R factor (generally not triangular) is expressed in that
// shared basis; this is what makes the alpha->beta map exact.
struct TensorFactors {
  int n = 0;                       // bus count (2N slices)
  Eigen::MatrixXd V;               // 2N x 2N orthonormal
  Eigen::Matrix4d W;               // shared right factor, unit columns
  Eigen::Vector4d S_eigenvalues;   // eigenvalues backing W, desc. magnitude
  Eigen::Matrix4d S;               // pairwise-balanced Gram quotient matrix
  std::vector<Eigen::MatrixXd> U;      // 2N entries, 2N x 4
  std::vector<Eigen::Vector4d> Sigma;  // 2N entries, nonnegative
  std::vector<Eigen::Matrix4d> R;      // 2N entries; R[j] upper triangular
  std::vector<Eigen::MatrixXd> QR;     // N entries (shared by slice pair)

  Eigen::Matrix4d core_p;              // W^T * signature * W
  std::vector<Eigen::Matrix4d> core_q; // per bus: scaled similarity of core_p

  // U_j * diag(Sigma_j) for a slice.
  Eigen::MatrixXd scaled_u(int slice) const;
};

// Left basis from the SVD of the horizontal slice concatenation; always
// square 2N x 2N, leading columns spanning the union of slice ranges.
Eigen::MatrixXd common_left_basis(const BTensor& tensor);

TensorFactors hogsvd(const BTensor& tensor, const Eigen::MatrixXd& V);

// Orthonormal complement of QR[j] inside the 2N-dim factor space. Computed
// on demand (the solver itself only ever needs the projector, which is
// I - QR*QR^T).
Eigen::MatrixXd null_basis(const TensorFactors& f, int bus);

// Per-line-end flow form projected into the nodal coordinates:
//   p_flow = a^T Fp a + 2 a^T Gp l + l^T diag(Sp) l
//   q_flow = a^T Fq a + 2 a^T Gq l + l^T Iq l
// where a is the bus alpha block and l the line-end coordinate.
struct ProjectedFlowForm {
  int branch = 0;
  int bus = 0;
  Eigen::Matrix4d Fp, Fq;
  Eigen::MatrixXd Gp, Gq;  // 4 x r
  Eigen::VectorXd Sp;      // r
  Eigen::MatrixXd Iq;      // r x r symmetric
};

std::vector<ProjectedFlowForm> build_projected_forms(
    const TensorFactors& f, const std::vector<FlowForm>& flows);

// Structural diagnostics: departures of W from orthonormality and of the
// core matrix from the negated signature, plus the worst pairing defect of
// the left-basis columns under the quarter-turn map [vx;vy] -> [-vy;vx].
struct StructureReport {
  double w_orthonormality = 0.0;   // ||W^T W - I||_max
  double core_vs_signature = 0.0;  // ||W^T Pi W + Pi||_max
  double v_pairing = 0.0;          // worst column-pairing residual of V
};
StructureReport structure_report(const TensorFactors& f);

}  // namespace topf
