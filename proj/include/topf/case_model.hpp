#pragma once

#include <Eigen/Dense>
#include <complex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace topf {

// Error taxonomy mapped onto CLI exit codes by the harness.
struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct nonconvergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class BusKind { Reference, PV, PQ };

struct Bus {
  int index = 0;
  BusKind kind = BusKind::PQ;
  double p_demand = 0.0;  // per-unit
  double q_demand = 0.0;
  double v_min = 0.9;  // voltage magnitude bounds, per-unit
  double v_max = 1.1;
  double shunt_g = 0.0;  // per-unit shunt at nominal voltage
  double shunt_b = 0.0;
};

struct Branch {
  int from_bus = 0;
  int to_bus = 0;
  double series_r = 0.0;
  double series_x = 0.0;
  double charging_b = 0.0;  // total line charging susceptance
  double tap_ratio = 1.0;   // 1 = no transformer
  // Apparent-power capacity per end; empty = unlimited.
  std::optional<double> cap;
};

struct Generator {
  int bus = 0;
  double p_min = 0.0, p_max = 0.0;
  double q_min = 0.0, q_max = 0.0;
  // Cost polynomial c2*p^2 + c1*p + c0 in $/h with p in per-unit.
  double c2 = 0.0, c1 = 0.0, c0 = 0.0;
};

struct NetworkCase {
  std::string name;
  double base_mva = 100.0;
  int reference_bus = 0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;

  int n_buses() const { return static_cast<int>(buses.size()); }
  // Generators at a bus (PQ buses have none).
  std::vector<int> generators_at(int bus) const;
};

// Per-branch admittance records kept alongside Y so the flow forms can be
// built per line end without re-deriving tap handling.
struct BranchAdmittance {
  std::complex<double> y_ff, y_ft, y_tf, y_tt;
};

struct AdmittanceModel {
  int n = 0;
  Eigen::MatrixXd G;  // real part of Y
  Eigen::MatrixXd B;  // imaginary part of Y
  std::vector<BranchAdmittance> branch;  // parallel to case branches

  std::complex<double> y(int i, int j) const { return {G(i, j), B(i, j)}; }
};

// Stacked rectangular voltage: entries 0..N-1 real parts, N..2N-1 imaginary.
using CartesianVoltage = Eigen::VectorXd;

enum class CaseFormat { Auto, Json, MatpowerSubset };

NetworkCase parse_case(const std::string& text, CaseFormat format);
NetworkCase load_case(const std::string& path, CaseFormat format = CaseFormat::Auto);
std::string serialize_case(const NetworkCase& c);

// Validates the structural invariants (single reference bus, index ranges,
// bounds ordering, PQ buses without generators). Throws parse_error.
void validate_case(const NetworkCase& c);

AdmittanceModel build_admittance(const NetworkCase& c);

CartesianVoltage flat_start(const NetworkCase& c);

}  // namespace topf
