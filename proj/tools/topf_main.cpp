// topf: tensor-decomposition OPF toolkit command line.
//
//   topf solve      --case F [solver flags]   -> report.json, trace.csv
//   topf decompose  --case F                  -> V.txt W.txt Sigma.txt III.txt
//   topf validate   --case F [--case G ...]   -> validate.json
//   topf bench      --sizes 10,50,100,500     -> bench.csv, bench.json
//
// Output directory: --out flag, else TOPF_OUT_DIR, else current directory.
// Exit codes: 0 ok, 2 input/parse error, 3 numerical failure,
// 4 solver non-convergence.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "topf/admm_engine.hpp"
#include "topf/case_model.hpp"
#include "topf/hogsvd_core.hpp"
#include "topf/matrix_io.hpp"
#include "topf/oracle.hpp"
#include "topf/quadratic_forms.hpp"
#include "topf/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path resolve_out(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("TOPF_OUT_DIR")) return env;
  return ".";
}

json config_json(const topf::SolverConfig& cfg) {
  return json{{"mu", cfg.mu},
              {"mu_per_bus", cfg.mu_per_bus},
              {"n_p", cfg.n_p},
              {"n_q", cfg.n_q},
              {"delta0", cfg.delta0},
              {"delta_decay", cfg.delta_decay},
              {"max_iterations", cfg.max_iterations},
              {"tolerance", cfg.tolerance},
              {"social_responsibility", cfg.social_responsibility},
              {"inner_kkt_tol", cfg.inner_kkt_tol},
              {"inner_max_newton", cfg.inner_max_newton},
              {"verify_with_oracle", cfg.verify_with_oracle}};
}

void write_trace_csv(const fs::path& path,
                     const std::vector<topf::IterationRecord>& trace) {
  std::ofstream os(path);
  os.precision(17);
  os << "iter,rel_voltage_change,max_consensus_residual,"
        "max_balance_mismatch,objective,delta,max_step,mu_scale\n";
  for (const auto& r : trace)
    os << r.iter << ',' << r.rel_voltage_change << ','
       << r.max_consensus_residual << ',' << r.max_balance_mismatch << ','
       << r.objective << ',' << r.delta << ',' << r.max_step << ','
       << r.mu_scale << '\n';
}

json report_json(const topf::NetworkCase& c, const topf::SolverConfig& cfg,
                 const topf::SolveReport& rep) {
  const int n = c.n_buses();
  json dispatch = json::array();
  for (const auto& d : rep.dispatch)
    dispatch.push_back({{"bus", d.bus}, {"p", d.p}, {"q", d.q}});
  std::vector<double> vx(rep.v.data(), rep.v.data() + n);
  std::vector<double> vy(rep.v.data() + n, rep.v.data() + 2 * n);
  return json{{"schema", "topf-report/1"},
              {"case", c.name},
              {"converged", rep.converged},
              {"feasible", rep.feasible},
              {"iterations", rep.iterations},
              {"objective", rep.objective},
              {"max_constraint_violation", rep.max_constraint_violation},
              {"final_consensus_residual", rep.final_consensus_residual},
              {"voltage_real", vx},
              {"voltage_imag", vy},
              {"dispatch", dispatch},
              {"warnings", rep.warnings},
              {"config", config_json(cfg)}};
}

int cmd_solve(const std::string& case_path, const std::string& out_flag,
              const topf::SolverConfig& cfg) {
  fs::path out = resolve_out(out_flag);
  fs::create_directories(out);
  topf::NetworkCase c = topf::load_case(case_path);
  topf::SolveReport rep = topf::solve_case(c, cfg);

  std::ofstream os(out / "report.json");
  os << report_json(c, cfg, rep).dump(2) << '\n';
  write_trace_csv(out / "trace.csv", rep.trace);

  std::cout << c.name << ": " << (rep.converged ? "converged" : "stopped")
            << " after " << rep.iterations << " iterations, objective "
            << rep.objective << ", worst constraint violation "
            << rep.max_constraint_violation << "\n";
  for (const auto& w : rep.warnings) std::cout << "  warning: " << w << "\n";
  if (!rep.converged) throw topf::nonconvergence_error(
      "voltage change did not reach tolerance within iteration budget");
  return 0;
}

int cmd_decompose(const std::string& case_path, const std::string& out_flag) {
  fs::path out = resolve_out(out_flag);
  fs::create_directories(out);
  topf::NetworkCase c = topf::load_case(case_path);
  topf::AdmittanceModel adm = topf::build_admittance(c);
  topf::BTensor tensor =
      topf::assemble_b_tensor(topf::build_injection_forms(adm));
  topf::TensorFactors f = topf::hogsvd(tensor, topf::common_left_basis(tensor));

  topf::write_matrix_file(out / "V.txt", f.V);
  topf::write_matrix_file(out / "W.txt", f.W);
  Eigen::MatrixXd sig(f.Sigma.size(), 4);
  for (size_t j = 0; j < f.Sigma.size(); ++j)
    sig.row(static_cast<int>(j)) = f.Sigma[j].transpose();
  topf::write_matrix_file(out / "Sigma.txt", sig);
  topf::write_matrix_file(out / "III.txt", f.core_p);

  topf::StructureReport sr = topf::structure_report(f);
  json manifest{{"schema", "topf-decompose/1"},
                {"case", c.name},
                {"files", {"V.txt", "W.txt", "Sigma.txt", "III.txt"}},
                {"w_orthonormality", sr.w_orthonormality},
                {"core_vs_signature", sr.core_vs_signature},
                {"v_pairing", sr.v_pairing}};
  std::ofstream os(out / "decompose.json");
  os << manifest.dump(2) << '\n';
  std::cout << "wrote V/W/Sigma/III dumps for " << c.name << " to " << out
            << "\n";
  return 0;
}

json validate_one(const std::string& case_path, int sweeps, unsigned seed,
                  double tol) {
  topf::NetworkCase c = topf::load_case(case_path);
  topf::AdmittanceModel adm = topf::build_admittance(c);
  auto inj = topf::build_injection_forms(adm);
  auto flows = topf::build_flow_forms(c, adm);
  const int n = c.n_buses();

  std::mt19937 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.25);
  double max_inj = 0.0, max_flow = 0.0;
  for (int s = 0; s < sweeps; ++s) {
    topf::CartesianVoltage v = topf::flat_start(c);
    for (int i = 0; i < 2 * n; ++i) v[i] += jitter(rng);
    auto ref = topf::oracle::complex_injection(v, adm);
    for (int j = 0; j < n; ++j) {
      topf::PQValue pq = topf::evaluate_injection(inj[j], v);
      max_inj = std::max(max_inj, std::abs(pq.p - ref[j].p));
      max_inj = std::max(max_inj, std::abs(pq.q - ref[j].q));
    }
    for (size_t k = 0; k < flows.size(); ++k) {
      topf::PQValue pq = topf::evaluate_flow(flows[k], v);
      auto bf = topf::oracle::complex_branch_flow(
          v, adm, flows[k].branch, c);
      const auto& side =
          flows[k].bus == c.branches[flows[k].branch].from_bus ? bf.from
                                                               : bf.to;
      max_flow = std::max(max_flow, std::abs(pq.p - side.p));
      max_flow = std::max(max_flow, std::abs(pq.q - side.q));
    }
  }
  bool pass = max_inj <= tol && max_flow <= tol;
  return json{{"case", c.name},
              {"path", case_path},
              {"sweeps", sweeps},
              {"max_injection_error", max_inj},
              {"max_flow_error", max_flow},
              {"tolerance", tol},
              {"pass", pass}};
}

int cmd_validate(const std::vector<std::string>& case_paths,
                 const std::string& report_path, const std::string& out_flag,
                 int sweeps, unsigned seed, double tol) {
  fs::path out = resolve_out(out_flag);
  fs::create_directories(out);
  json results = json::array();
  bool all_pass = true;
  for (const auto& p : case_paths) {
    json r = validate_one(p, sweeps, seed, tol);
    all_pass = all_pass && r["pass"].get<bool>();
    std::cout << r["case"].get<std::string>() << ": "
              << (r["pass"].get<bool>() ? "PASS" : "FAIL")
              << "  max injection error " << r["max_injection_error"]
              << ", max flow error " << r["max_flow_error"] << "\n";
    results.push_back(std::move(r));
  }

  json doc{{"schema", "topf-validate/1"}, {"fixtures", results}};

  if (!report_path.empty()) {
    // Cross-check a previously written SolveReport against the oracle.
    std::ifstream is(report_path);
    if (!is) throw topf::parse_error("cannot read " + report_path);
    json rep = json::parse(is);
    topf::NetworkCase c = topf::load_case(case_paths.at(0));
    const int n = c.n_buses();
    auto vx = rep.at("voltage_real").get<std::vector<double>>();
    auto vy = rep.at("voltage_imag").get<std::vector<double>>();
    if (static_cast<int>(vx.size()) != n)
      throw topf::parse_error("report voltage length does not match case");
    topf::CartesianVoltage v(2 * n);
    for (int i = 0; i < n; ++i) {
      v[i] = vx[i];
      v[i + n] = vy[i];
    }
    topf::AdmittanceModel adm = topf::build_admittance(c);
    auto injections = topf::oracle::complex_injection(v, adm);
    json residuals = json::array();
    for (const auto& b : c.buses) {
      json row{{"bus", b.index},
               {"p_injection", injections[b.index].p},
               {"q_injection", injections[b.index].q},
               {"v_magnitude", std::hypot(v[b.index], v[b.index + n])}};
      residuals.push_back(row);
      std::cout << "bus " << b.index << ": p=" << injections[b.index].p
                << " q=" << injections[b.index].q
                << " |v|=" << row["v_magnitude"] << "\n";
    }
    double viol = topf::oracle::constraint_violation(c, adm, v);
    std::cout << "max constraint violation: " << viol << "\n";
    doc["report_check"] = {{"report", report_path},
                           {"max_constraint_violation", viol},
                           {"bus_residuals", residuals}};
  }

  std::ofstream os(out / "validate.json");
  os << doc.dump(2) << '\n';
  return all_pass ? 0 : 3;
}

struct BenchRow {
  int n = 0;
  double per_bus_update_s = 0.0;
  double full_sweep_s = 0.0;
  double precompute_s = 0.0;
};

BenchRow bench_one(int n_buses) {
  using clock = std::chrono::steady_clock;
  BenchRow row;
  row.n = n_buses;

  topf::NetworkCase c = topf::synthetic_ring_case(n_buses);
  auto t0 = clock::now();
  topf::AdmmEngine engine(c, topf::SolverConfig{});
  row.precompute_s = std::chrono::duration<double>(clock::now() - t0).count();

  topf::CartesianVoltage v = topf::flat_start(c);
  std::vector<Eigen::VectorXd> x(n_buses);
  for (int j = 0; j < n_buses; ++j) x[j] = engine.maps()[j].M * v;

  // Repeat full sweeps until the sample is long enough to trust, then
  // report the per-bus average. The precompute above is excluded.
  int reps = 1;
  double elapsed = 0.0;
  Eigen::VectorXd sink = Eigen::VectorXd::Zero(2 * n_buses);
  for (;;) {
    auto t1 = clock::now();
    for (int r = 0; r < reps; ++r)
      for (int j = 0; j < n_buses; ++j)
        sink += topf::global_update_bus(x[j], j, engine.precomp());
    elapsed = std::chrono::duration<double>(clock::now() - t1).count();
    if (elapsed > 0.05 || reps > (1 << 20)) break;
    reps *= 4;
  }
  if (sink.hasNaN()) throw topf::numeric_error("benchmark produced NaN");
  row.full_sweep_s = elapsed / reps;
  row.per_bus_update_s = row.full_sweep_s / n_buses;
  return row;
}

void fit_loglog(const std::vector<BenchRow>& rows, double& slope, double& r2) {
  const int m = static_cast<int>(rows.size());
  Eigen::VectorXd lx(m), ly(m);
  for (int i = 0; i < m; ++i) {
    lx[i] = std::log(static_cast<double>(rows[i].n));
    ly[i] = std::log(rows[i].per_bus_update_s);
  }
  const double mx = lx.mean(), my = ly.mean();
  const double sxx = (lx.array() - mx).square().sum();
  const double sxy = ((lx.array() - mx) * (ly.array() - my)).sum();
  slope = sxy / sxx;
  const double syy = (ly.array() - my).square().sum();
  r2 = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
}

int cmd_bench(const std::vector<int>& sizes, const std::string& out_flag) {
  fs::path out = resolve_out(out_flag);
  fs::create_directories(out);
  std::vector<BenchRow> rows;
  for (int n : sizes) rows.push_back(bench_one(n));

  std::ofstream csv(out / "bench.csv");
  csv.precision(17);
  csv << "n,per_bus_update_s,full_sweep_s,precompute_s\n";
  for (const auto& r : rows)
    csv << r.n << ',' << r.per_bus_update_s << ',' << r.full_sweep_s << ','
        << r.precompute_s << '\n';

  double slope = 0, r2 = 0;
  if (rows.size() >= 2) fit_loglog(rows, slope, r2);
  json doc{{"schema", "topf-bench/1"},
           {"sizes", sizes},
           {"fit_quantity", "per_bus_update_s"},
           {"loglog_slope", slope},
           {"r_squared", r2}};
  std::ofstream os(out / "bench.json");
  os << doc.dump(2) << '\n';

  std::cout << "bench: " << rows.size() << " sizes, per-bus update log-log "
            << "slope " << slope << " (R^2 " << r2 << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tensor-decomposition OPF toolkit"};
  app.require_subcommand(1);

  std::string case_path, out_dir;
  topf::SolverConfig cfg;
  std::vector<double> mu_per_bus;

  auto add_solver_flags = [&](CLI::App* s) {
    s->add_option("--mu", cfg.mu, "consensus penalty weight");
    s->add_option("--mu-per-bus", mu_per_bus,
                  "per-bus consensus weights (comma separated)")
        ->delimiter(',');
    s->add_option("--flow-weight", cfg.flow_weight,
                  "consensus metric weight on lifted flow coordinates");
    s->add_option("--n-p", cfg.n_p, "PQ real balance penalty");
    s->add_option("--n-q", cfg.n_q, "PQ reactive balance penalty");
    s->add_option("--v0", cfg.v0_magnitude,
                  "flat-start voltage magnitude (per-unit)");
    s->add_option("--delta0", cfg.delta0, "initial trust radius");
    s->add_option("--delta-decay", cfg.delta_decay,
                  "geometric radius decay per iteration");
    s->add_option("--max-iterations", cfg.max_iterations, "iteration budget");
    s->add_option("--tolerance", cfg.tolerance,
                  "relative voltage change stop tolerance");
    s->add_flag("!--no-social-responsibility", cfg.social_responsibility,
                "disable the local-coverage p_min raise");
    s->add_flag("!--no-anderson", cfg.use_anderson,
                "disable Anderson extrapolation (plain sweeps)");
    s->add_flag("!--no-adaptive-penalty", cfg.adaptive_penalty,
                "freeze the penalty weight at its configured value");
    s->add_option("--inner-kkt-tol", cfg.inner_kkt_tol,
                  "subproblem KKT tolerance");
    s->add_option("--inner-max-newton", cfg.inner_max_newton,
                  "subproblem Newton step budget");
    s->add_flag("!--no-oracle-check", cfg.verify_with_oracle,
                "skip the final feasibility cross-check");
  };

  CLI::App* solve = app.add_subcommand("solve", "run the consensus solver");
  solve->add_option("--case", case_path, "case file (json or .m)")
      ->required();
  solve->add_option("--out", out_dir, "output directory");
  add_solver_flags(solve);

  CLI::App* dec = app.add_subcommand("decompose", "dump V, W, Sigma, III");
  dec->add_option("--case", case_path, "case file")->required();
  dec->add_option("--out", out_dir, "output directory");

  std::vector<std::string> val_cases;
  std::string report_path;
  int sweeps = 1000;
  unsigned seed = 7;
  double val_tol = 1e-9;
  CLI::App* val =
      app.add_subcommand("validate", "oracle-equivalence sweeps per fixture");
  val->add_option("--case", val_cases, "case file(s)")->required();
  val->add_option("--report", report_path,
                  "cross-check a report.json against the oracle");
  val->add_option("--sweeps", sweeps, "random voltages per fixture");
  val->add_option("--seed", seed, "sweep RNG seed");
  val->add_option("--tol", val_tol, "pass/fail tolerance");
  val->add_option("--out", out_dir, "output directory");

  std::vector<int> sizes{10, 50, 100, 500};
  CLI::App* bench =
      app.add_subcommand("bench", "global-update scaling benchmark");
  bench->add_option("--sizes", sizes, "synthetic case sizes")->delimiter(',');
  bench->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (!mu_per_bus.empty()) cfg.mu_per_bus = mu_per_bus;
    if (solve->parsed()) return cmd_solve(case_path, out_dir, cfg);
    if (dec->parsed()) return cmd_decompose(case_path, out_dir);
    if (val->parsed())
      return cmd_validate(val_cases, report_path, out_dir, sweeps, seed,
                          val_tol);
    if (bench->parsed()) return cmd_bench(sizes, out_dir);
  } catch (const topf::parse_error& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const topf::nonconvergence_error& e) {
    std::cerr << "non-convergence: " << e.what() << "\n";
    return 4;
  } catch (const topf::numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
