#include "topf/hogsvd_core.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace topf {

using Eigen::Matrix4d;
using Eigen::MatrixXd;
using Eigen::Vector4d;
using Eigen::VectorXd;

Eigen::MatrixXd TensorFactors::scaled_u(int slice) const {
  return U.at(slice) * Sigma.at(slice).asDiagonal();
}

Eigen::MatrixXd common_left_basis(const BTensor& tensor) {
  const int two_n = 2 * tensor.n;
  MatrixXd concat(two_n, 4 * static_cast<int>(tensor.slices.size()));
  for (size_t j = 0; j < tensor.slices.size(); ++j)
    concat.middleCols(4 * static_cast<int>(j), 4) = tensor.slices[j];
  Eigen::BDCSVD<MatrixXd> svd(concat, Eigen::ComputeFullU);
  if (svd.info() != Eigen::Success)
    throw numeric_error("left-basis SVD failed (degenerate tensor)");
  return svd.matrixU();
}

// Eigendecomposition of the balanced Gram-quotient matrix with explicit
// handling of (numerically exact) degenerate eigenvalue clusters: within a
// cluster any orthonormal basis of the invariant subspace is a valid set of
// eigenvectors, so one is extracted from the real/imaginary parts returned
// by the solver. Lone real eigenvalues keep their real eigenvectors.
static void eigendecompose_shared_factor(const Matrix4d& S, Matrix4d* W,
                                         Vector4d* lam) {
  Eigen::EigenSolver<Matrix4d> eig(S);
  if (eig.info() != Eigen::Success)
    throw numeric_error("shared-factor eigendecomposition failed");
  Eigen::Vector4cd ev = eig.eigenvalues();
  const double scale = ev.cwiseAbs().maxCoeff();
  for (int i = 0; i < 4; ++i) {
    const double re = std::abs(ev[i].real());
    const double im = std::abs(ev[i].imag());
    if (im > 1e-9 * re && im > 1e-13 * std::max(1.0, scale))
      throw numeric_error(
          "complex eigenvalue in shared-factor extraction: lambda = (" +
          std::to_string(ev[i].real()) + ", " + std::to_string(ev[i].imag()) +
          "i)");
  }

  std::array<int, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return std::abs(ev[a]) > std::abs(ev[b]);
  });

  // group sorted eigenvalues into numerically identical clusters
  std::vector<std::vector<int>> clusters;
  for (int pos = 0; pos < 4; ++pos) {
    int i = order[pos];
    if (!clusters.empty()) {
      int head = clusters.back().front();
      if (std::abs(std::abs(ev[i]) - std::abs(ev[head])) <= 1e-9 * scale) {
        clusters.back().push_back(i);
        continue;
      }
    }
    clusters.push_back({i});
  }

  int col = 0;
  for (const auto& cl : clusters) {
    const int c = static_cast<int>(cl.size());
    if (c == 1) {
      Eigen::Vector4cd v = eig.eigenvectors().col(cl[0]);
      Vector4d vr = v.real();
      if (v.imag().cwiseAbs().maxCoeff() > 1e-9 * vr.norm())
        throw numeric_error("complex eigenvector for isolated eigenvalue");
      W->col(col) = vr;
      (*lam)[col] = ev[cl[0]].real();
      ++col;
      continue;
    }
    // invariant-subspace basis from real and imaginary parts
    MatrixXd span(4, 2 * c);
    for (int k = 0; k < c; ++k) {
      span.col(2 * k) = eig.eigenvectors().col(cl[k]).real();
      span.col(2 * k + 1) = eig.eigenvectors().col(cl[k]).imag();
    }
    Eigen::ColPivHouseholderQR<MatrixXd> qr(span);
    qr.setThreshold(1e-10);
    if (qr.rank() != c)
      throw numeric_error("degenerate eigenvalue cluster has defective span");
    MatrixXd q = qr.householderQ() * MatrixXd::Identity(4, c);
    double mean = 0;
    for (int k = 0; k < c; ++k) mean += ev[cl[k]].real() / c;
    for (int k = 0; k < c; ++k) {
      W->col(col) = q.col(k);
      (*lam)[col] = mean;
      ++col;
    }
  }

  // unit columns, largest-magnitude entry positive
  for (int i = 0; i < 4; ++i) {
    W->col(i).normalize();
    int arg = 0;
    W->col(i).cwiseAbs().maxCoeff(&arg);
    if ((*W)(arg, i) < 0.0) W->col(i) = -W->col(i);
  }
  if (std::abs(W->determinant()) < 1e-12)
    throw numeric_error("shared right factor is numerically singular");
}

TensorFactors hogsvd(const BTensor& tensor, const Eigen::MatrixXd& V) {
  const int n = tensor.n;
  const int k = static_cast<int>(tensor.slices.size());
  TensorFactors f;
  f.n = n;
  f.V = V;

  std::vector<MatrixXd> D(k);
  Matrix4d sum_a = Matrix4d::Zero();
  Matrix4d sum_ai = Matrix4d::Zero();
  for (int j = 0; j < k; ++j) {
    D[j] = V.transpose() * tensor.slices[j];
    Matrix4d a = D[j].transpose() * D[j];
    Eigen::FullPivLU<Matrix4d> lu(a);
    if (!lu.isInvertible())
      throw numeric_error("singular slice Gram matrix at slice " +
                          std::to_string(j));
    sum_a += a;
    sum_ai += lu.inverse();
  }
  f.S = (sum_a * sum_ai - double(k) * Matrix4d::Identity()) /
        (double(k) * double(k - 1));

  eigendecompose_shared_factor(f.S, &f.W, &f.S_eigenvalues);

  Matrix4d w_inv_t = f.W.inverse().transpose();
  f.U.resize(k);
  f.Sigma.resize(k);
  for (int j = 0; j < k; ++j) {
    MatrixXd us = D[j] * w_inv_t;
    Vector4d sig = us.colwise().norm();
    for (int c = 0; c < 4; ++c) {
      if (sig[c] <= 0.0)
        throw numeric_error("zero singular factor at slice " +
                            std::to_string(j));
      us.col(c) /= sig[c];
    }
    f.U[j] = std::move(us);
    f.Sigma[j] = sig;
  }

  // Per-bus QR split; the reactive slice shares the range basis of the real
  // slice, which keeps the alpha -> beta change of coordinates exact.
  f.R.resize(k);
  f.QR.resize(n);
  for (int j = 0; j < n; ++j) {
    MatrixXd us = f.scaled_u(j);
    Eigen::HouseholderQR<MatrixXd> qr(us);
    MatrixXd q = qr.householderQ() * MatrixXd::Identity(2 * n, 4);
    Matrix4d r = qr.matrixQR().topRows(4).triangularView<Eigen::Upper>();
    for (int c = 0; c < 4; ++c)
      if (r(c, c) < 0.0) {
        r.row(c) = -r.row(c);
        q.col(c) = -q.col(c);
      }
    if (std::abs(r(0, 0) * r(1, 1) * r(2, 2) * r(3, 3)) < 1e-12)
      throw numeric_error("rank-deficient range factor at bus " +
                          std::to_string(j));
    MatrixXd us_q = f.scaled_u(j + n);
    Matrix4d r_q = q.transpose() * us_q;
    if ((us_q - q * r_q).norm() > 1e-8 * us_q.norm())
      throw numeric_error("slice pair ranges do not coincide at bus " +
                          std::to_string(j));
    f.QR[j] = std::move(q);
    f.R[j] = r;
    f.R[j + n] = r_q;
  }

  const Matrix4d pi = BTensor::signature();
  f.core_p = f.W.transpose() * pi * f.W;
  f.core_q.resize(n);
  for (int j = 0; j < n; ++j) {
    Matrix4d r_inv = f.R[j].inverse();
    f.core_q[j] =
        r_inv * f.R[j + n] * f.core_p * f.R[j + n].transpose() *
        r_inv.transpose();
  }
  return f;
}

Eigen::MatrixXd null_basis(const TensorFactors& f, int bus) {
  const int two_n = 2 * f.n;
  Eigen::HouseholderQR<MatrixXd> qr(f.QR.at(bus));
  MatrixXd full = qr.householderQ() * MatrixXd::Identity(two_n, two_n);
  return full.rightCols(two_n - 4);
}

// X^T Phi X for a compact form Phi = eta (e_j e_j^T + e_j' e_j'^T)
//                                  + mu (u e_j^T + e_j u^T + w e_j'^T + e_j' w^T)
// using only rows of X — O(N) in the factor dimension.
static MatrixXd project_compact(const MatrixXd& X, int j, int two_n_half,
                                double eta, double mu, const VectorXd& u,
                                const VectorXd& w) {
  VectorXd a = X.row(j);
  VectorXd b = X.row(j + two_n_half);
  VectorXd cu = X.transpose() * u;
  VectorXd dw = X.transpose() * w;
  MatrixXd m = eta * (a * a.transpose() + b * b.transpose());
  m.noalias() += mu * (cu * a.transpose() + a * cu.transpose());
  m.noalias() += mu * (dw * b.transpose() + b * dw.transpose());
  return m;
}

static void compact_directions(const FlowForm& f, bool reactive, VectorXd* u,
                               VectorXd* w) {
  const int n = static_cast<int>(f.xi.size());
  u->resize(2 * n);
  w->resize(2 * n);
  if (!reactive) {
    *u << f.xi, f.zeta;
    *w << -f.zeta, f.xi;
  } else {
    *u << f.zeta, -f.xi;
    *w << f.xi, f.zeta;
  }
}

std::vector<ProjectedFlowForm> build_projected_forms(
    const TensorFactors& f, const std::vector<FlowForm>& flows) {
  const int n = f.n;
  std::vector<ProjectedFlowForm> out;
  out.reserve(flows.size());
  for (const auto& fl : flows) {
    ProjectedFlowForm pf;
    pf.branch = fl.branch;
    pf.bus = fl.bus;
    const int j = fl.bus;
    // lift: alpha -> voltage-space range component
    Matrix4d r_inv_t = f.R[j].inverse().transpose();
    MatrixXd lift = f.V * f.QR[j] * r_inv_t;  // 2N x 4
    MatrixXd e = lift.transpose() * fl.K;     // 4 x r

    VectorXd uq, wq;
    compact_directions(fl, true, &uq, &wq);
    MatrixXd iq =
        project_compact(fl.K, fl.bus, n, fl.eta_q, fl.mu, uq, wq);
    iq = 0.5 * (iq + iq.transpose());

    pf.Sp = fl.S;
    pf.Iq = iq;
    pf.Gp = e * fl.S.asDiagonal();
    pf.Gq = e * iq;
    pf.Fp = e * fl.S.asDiagonal() * e.transpose();
    pf.Fq = e * iq * e.transpose();
    pf.Fp = 0.5 * (pf.Fp + pf.Fp.transpose()).eval();
    pf.Fq = 0.5 * (pf.Fq + pf.Fq.transpose()).eval();
    out.push_back(std::move(pf));
  }
  return out;
}

StructureReport structure_report(const TensorFactors& f) {
  StructureReport rep;
  const Matrix4d pi = BTensor::signature();
  rep.w_orthonormality =
      (f.W.transpose() * f.W - Matrix4d::Identity()).cwiseAbs().maxCoeff();
  rep.core_vs_signature = (f.core_p + pi).cwiseAbs().maxCoeff();

  // Quarter-turn pairing of the active left-basis columns: for column
  // [x; y] there should be a partner column equal to [-y; x] up to sign.
  const int n = f.n;
  const int two_n = 2 * n;
  // column activity: how much of any slice lives on each V column
  // (rows of D_j = U_j Sigma_j W^T are the per-column components)
  VectorXd activity = VectorXd::Zero(two_n);
  for (int j = 0; j < 2 * n; ++j) {
    MatrixXd d = f.scaled_u(j) * f.W.transpose();
    activity = activity.cwiseMax(d.rowwise().norm());
  }
  double scale = activity.maxCoeff();
  double worst = 0.0;
  for (int c = 0; c < two_n; ++c) {
    if (activity[c] <= 1e-10 * scale) continue;
    VectorXd cand(two_n);
    cand.head(n) = -f.V.col(c).tail(n);
    cand.tail(n) = f.V.col(c).head(n);
    double best = std::numeric_limits<double>::infinity();
    for (int c2 = 0; c2 < two_n; ++c2) {
      best = std::min(best, (f.V.col(c2) - cand).cwiseAbs().maxCoeff());
      best = std::min(best, (f.V.col(c2) + cand).cwiseAbs().maxCoeff());
    }
    worst = std::max(worst, best);
  }
  rep.v_pairing = worst;
  return rep;
}

}  // namespace topf
