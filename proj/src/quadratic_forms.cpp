#include "topf/quadratic_forms.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

namespace topf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Eigen::Matrix4d BTensor::signature() {
  Eigen::Matrix4d pi = Eigen::Matrix4d::Zero();
  pi.diagonal() << 1.0, -1.0, 1.0, -1.0;
  return pi;
}

// Shared coefficient extraction: the diagonal coefficient pair comes from
// the Y diagonal, the coupling strength from the off-diagonal row. The
// normalization makes the xi/zeta stack a unit vector, which is exactly what
// gives the rank-4 factor orthonormal columns.
static void extract_coeffs(int j, const VectorXd& g_row, const VectorXd& b_row,
                           double g_jj, double b_jj, InjectionForm* f) {
  f->bus = j;
  VectorXd g = g_row, b = b_row;
  g[j] = 0.0;
  b[j] = 0.0;
  double s = std::sqrt(g.squaredNorm() + b.squaredNorm());
  if (s <= 0.0)
    throw numeric_error("degenerate form: bus " + std::to_string(j) +
                        " has no network coupling");
  f->mu = s / 2.0;
  f->xi = g / s;
  f->zeta = -b / s;
  f->eta_p = g_jj;
  f->eta_q = -b_jj;
}

std::vector<InjectionForm> build_injection_forms(const AdmittanceModel& adm) {
  std::vector<InjectionForm> out(adm.n);
  for (int j = 0; j < adm.n; ++j)
    extract_coeffs(j, adm.G.row(j), adm.B.row(j), adm.G(j, j), adm.B(j, j),
                   &out[j]);
  return out;
}

static PQValue evaluate_compact(int j, double eta_p, double eta_q, double mu,
                                const VectorXd& xi, const VectorXd& zeta,
                                const CartesianVoltage& v) {
  const int n = static_cast<int>(xi.size());
  auto vx = v.head(n);
  auto vy = v.tail(n);
  const double msq = v[j] * v[j] + v[j + n] * v[j + n];
  // real: coupling directions (xi; zeta) and (-zeta; xi)
  const double a = xi.dot(vx) + zeta.dot(vy);
  const double cdir = -zeta.dot(vx) + xi.dot(vy);
  // reactive: directions (zeta; -xi) and (xi; zeta)
  const double a2 = zeta.dot(vx) - xi.dot(vy);
  const double c2 = xi.dot(vx) + zeta.dot(vy);
  PQValue r;
  r.p = eta_p * msq + 2.0 * mu * (a * v[j] + cdir * v[j + n]);
  r.q = eta_q * msq + 2.0 * mu * (a2 * v[j] + c2 * v[j + n]);
  return r;
}

PQValue evaluate_injection(const InjectionForm& f, const CartesianVoltage& v) {
  return evaluate_compact(f.bus, f.eta_p, f.eta_q, f.mu, f.xi, f.zeta, v);
}

PQValue evaluate_flow(const FlowForm& f, const CartesianVoltage& v) {
  return evaluate_compact(f.bus, f.eta_p, f.eta_q, f.mu, f.xi, f.zeta, v);
}

// 4x4 restriction of the dense form to coordinates {j, j+N, i, i+N}.
static Eigen::Matrix4d flow_block(const FlowForm& f, bool reactive) {
  const double xi_i = f.xi[f.other];
  const double ze_i = f.zeta[f.other];
  Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
  const double eta = reactive ? f.eta_q : f.eta_p;
  m(0, 0) = m(1, 1) = eta;
  if (!reactive) {
    m(0, 2) = f.mu * xi_i;
    m(0, 3) = f.mu * ze_i;
    m(1, 2) = -f.mu * ze_i;
    m(1, 3) = f.mu * xi_i;
  } else {
    m(0, 2) = f.mu * ze_i;
    m(0, 3) = -f.mu * xi_i;
    m(1, 2) = f.mu * xi_i;
    m(1, 3) = f.mu * ze_i;
  }
  m(2, 0) = m(0, 2);
  m(3, 0) = m(0, 3);
  m(2, 1) = m(1, 2);
  m(3, 1) = m(1, 3);
  return m;
}

std::vector<FlowForm> build_flow_forms(const NetworkCase& c,
                                       const AdmittanceModel& adm) {
  std::vector<FlowForm> out;
  const int n = adm.n;
  out.reserve(2 * c.branches.size());
  for (size_t k = 0; k < c.branches.size(); ++k) {
    const auto& br = c.branches[k];
    const auto& ba = adm.branch[k];
    for (int end = 0; end < 2; ++end) {
      FlowForm f;
      f.branch = static_cast<int>(k);
      f.bus = end == 0 ? br.from_bus : br.to_bus;
      f.other = end == 0 ? br.to_bus : br.from_bus;
      // self/mutual admittances seen from this end
      std::complex<double> y_self = end == 0 ? ba.y_ff : ba.y_tt;
      std::complex<double> y_mut = end == 0 ? ba.y_ft : ba.y_tf;
      f.eta_p = y_self.real();
      f.eta_q = -y_self.imag();
      double s = std::abs(y_mut);
      if (s <= 0.0)
        throw numeric_error("zero-admittance line " + std::to_string(k));
      f.mu = s / 2.0;
      f.xi = VectorXd::Zero(n);
      f.zeta = VectorXd::Zero(n);
      f.xi[f.other] = y_mut.real() / (2.0 * f.mu);
      f.zeta[f.other] = -y_mut.imag() / (2.0 * f.mu);
      // exact eigendecomposition of the rank-4 block
      Eigen::Matrix4d blockP = flow_block(f, false);
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(blockP);
      const Eigen::Vector4d ev = eig.eigenvalues();
      const double scale = ev.cwiseAbs().maxCoeff();
      std::vector<int> keep;
      for (int i = 0; i < 4; ++i)
        if (std::abs(ev[i]) >= 1e-12 * std::max(1.0, scale))
          keep.push_back(i);
      const int coords[4] = {f.bus, f.bus + n, f.other, f.other + n};
      f.K = MatrixXd::Zero(2 * n, static_cast<int>(keep.size()));
      f.S = VectorXd(static_cast<int>(keep.size()));
      for (size_t col = 0; col < keep.size(); ++col) {
        f.S[col] = ev[keep[col]];
        for (int r = 0; r < 4; ++r)
          f.K(coords[r], col) = eig.eigenvectors()(r, keep[col]);
      }
      out.push_back(std::move(f));
    }
  }
  return out;
}

BTensor assemble_b_tensor(const std::vector<InjectionForm>& forms) {
  const int n = static_cast<int>(forms.size());
  BTensor t;
  t.n = n;
  t.slices.resize(2 * n);
  for (int j = 0; j < n; ++j) {
    const auto& f = forms[j];
    for (int reactive = 0; reactive < 2; ++reactive) {
      const double eta = reactive ? f.eta_q : f.eta_p;
      const double kp = 1.0 + eta / (2.0 * f.mu);
      const double km = 1.0 - eta / (2.0 * f.mu);
      VectorXd u(2 * n), w(2 * n);
      if (!reactive) {
        u << f.xi, f.zeta;
        w << -f.zeta, f.xi;
      } else {
        u << f.zeta, -f.xi;
        w << f.xi, f.zeta;
      }
      MatrixXd slice(2 * n, 4);
      VectorXd ej = VectorXd::Zero(2 * n), ejn = VectorXd::Zero(2 * n);
      ej[f.bus] = 1.0;
      ejn[f.bus + n] = 1.0;
      slice.col(0) = u + kp * ej;
      slice.col(1) = u - km * ej;
      slice.col(2) = w + kp * ejn;
      slice.col(3) = w - km * ejn;
      slice *= std::sqrt(f.mu / 2.0);
      // full column rank is required downstream
      Eigen::JacobiSVD<MatrixXd> svd(slice);
      if (svd.singularValues()[3] <=
          1e-12 * std::max(1.0, svd.singularValues()[0]))
        throw numeric_error("rank-deficient tensor slice at bus " +
                            std::to_string(j));
      t.slices[j + reactive * n] = std::move(slice);
    }
  }
  return t;
}

static MatrixXd dense_compact(int n, int j, double eta, double mu,
                              const VectorXd& u, const VectorXd& w) {
  MatrixXd m = MatrixXd::Zero(2 * n, 2 * n);
  m(j, j) += eta;
  m(j + n, j + n) += eta;
  m.col(j) += mu * u;
  m.row(j) += mu * u.transpose();
  m.col(j + n) += mu * w;
  m.row(j + n) += mu * w.transpose();
  return m;
}

static MatrixXd dense_from(int bus, double eta_p, double eta_q, double mu,
                           const VectorXd& xi, const VectorXd& zeta,
                           bool reactive) {
  const int n = static_cast<int>(xi.size());
  VectorXd u(2 * n), w(2 * n);
  if (!reactive) {
    u << xi, zeta;
    w << -zeta, xi;
  } else {
    u << zeta, -xi;
    w << xi, zeta;
  }
  return dense_compact(n, bus, reactive ? eta_q : eta_p, mu, u, w);
}

MatrixXd dense_form_p(const InjectionForm& f) {
  return dense_from(f.bus, f.eta_p, f.eta_q, f.mu, f.xi, f.zeta, false);
}
MatrixXd dense_form_q(const InjectionForm& f) {
  return dense_from(f.bus, f.eta_p, f.eta_q, f.mu, f.xi, f.zeta, true);
}
MatrixXd dense_form_p(const FlowForm& f) {
  return dense_from(f.bus, f.eta_p, f.eta_q, f.mu, f.xi, f.zeta, false);
}
MatrixXd dense_form_q(const FlowForm& f) {
  return dense_from(f.bus, f.eta_p, f.eta_q, f.mu, f.xi, f.zeta, true);
}

}  // namespace topf
