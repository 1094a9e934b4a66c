#include "topf/case_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace topf {

using json = nlohmann::json;

std::vector<int> NetworkCase::generators_at(int bus) const {
  std::vector<int> out;
  for (size_t g = 0; g < generators.size(); ++g)
    if (generators[g].bus == bus) out.push_back(static_cast<int>(g));
  return out;
}

void validate_case(const NetworkCase& c) {
  const int n = c.n_buses();
  if (n < 2) throw parse_error("case needs at least 2 buses");
  int refs = 0;
  std::set<int> seen;
  for (const auto& b : c.buses) {
    if (b.index < 0 || b.index >= n)
      throw parse_error("bus index out of range: " + std::to_string(b.index));
    if (!seen.insert(b.index).second)
      throw parse_error("duplicate bus index: " + std::to_string(b.index));
    if (b.kind == BusKind::Reference) ++refs;
    if (!(b.v_min > 0.0) || !(b.v_min <= b.v_max))
      throw parse_error("bus " + std::to_string(b.index) +
                        ": need 0 < v_min <= v_max");
    if (!std::isfinite(b.p_demand) || !std::isfinite(b.q_demand))
      throw parse_error("bus " + std::to_string(b.index) +
                        ": demand not finite");
  }
  if (refs != 1) throw parse_error("exactly one reference bus required, got " +
                                   std::to_string(refs));
  if (c.reference_bus < 0 || c.reference_bus >= n ||
      c.buses[c.reference_bus].kind != BusKind::Reference)
    throw parse_error("reference_bus does not name the reference bus");
  for (const auto& br : c.branches) {
    if (br.from_bus < 0 || br.from_bus >= n || br.to_bus < 0 || br.to_bus >= n)
      throw parse_error("branch references missing bus " +
                        std::to_string(br.from_bus >= n || br.from_bus < 0
                                           ? br.from_bus
                                           : br.to_bus));
    if (br.from_bus == br.to_bus)
      throw parse_error("branch connects a bus to itself");
    if (br.series_r == 0.0 && br.series_x == 0.0)
      throw parse_error("zero-impedance branch " +
                        std::to_string(br.from_bus) + "-" +
                        std::to_string(br.to_bus));
    if (br.tap_ratio <= 0.0) throw parse_error("tap ratio must be positive");
    if (br.cap && *br.cap <= 0.0)
      throw parse_error("branch capacity must be positive when given");
  }
  for (const auto& g : c.generators) {
    if (g.bus < 0 || g.bus >= n)
      throw parse_error("generator references missing bus " +
                        std::to_string(g.bus));
    if (g.p_min > g.p_max || g.q_min > g.q_max)
      throw parse_error("generator bounds reversed at bus " +
                        std::to_string(g.bus));
    if (g.c2 < 0.0)
      throw parse_error("concave generator cost at bus " +
                        std::to_string(g.bus));
    if (c.buses[g.bus].kind == BusKind::PQ)
      throw parse_error("PQ bus " + std::to_string(g.bus) +
                        " must not carry a generator");
  }
  for (const auto& b : c.buses)
    if (b.kind != BusKind::PQ && b.kind != BusKind::Reference &&
        c.generators_at(b.index).empty())
      throw parse_error("PV bus " + std::to_string(b.index) +
                        " has no generator");
}

// ------------------------- JSON format -------------------------

static BusKind kind_from_string(const std::string& s) {
  if (s == "reference" || s == "ref" || s == "slack") return BusKind::Reference;
  if (s == "pv" || s == "PV") return BusKind::PV;
  if (s == "pq" || s == "PQ") return BusKind::PQ;
  throw parse_error("unknown bus kind: " + s);
}

static const char* kind_to_string(BusKind k) {
  switch (k) {
    case BusKind::Reference: return "reference";
    case BusKind::PV: return "pv";
    default: return "pq";
  }
}

static NetworkCase parse_json_case(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw parse_error(std::string("json: ") + e.what());
  }
  try {
    NetworkCase c;
    c.name = j.value("name", "");
    c.base_mva = j.value("base_mva", 100.0);
    c.reference_bus = j.at("reference_bus").get<int>();
    for (const auto& bj : j.at("buses")) {
      Bus b;
      b.index = bj.at("index").get<int>();
      b.kind = kind_from_string(bj.at("kind").get<std::string>());
      b.p_demand = bj.value("p_demand", 0.0);
      b.q_demand = bj.value("q_demand", 0.0);
      b.v_min = bj.value("v_min", 0.9);
      b.v_max = bj.value("v_max", 1.1);
      b.shunt_g = bj.value("shunt_g", 0.0);
      b.shunt_b = bj.value("shunt_b", 0.0);
      c.buses.push_back(b);
    }
    std::sort(c.buses.begin(), c.buses.end(),
              [](const Bus& a, const Bus& b) { return a.index < b.index; });
    for (const auto& rj : j.at("branches")) {
      Branch br;
      br.from_bus = rj.at("from").get<int>();
      br.to_bus = rj.at("to").get<int>();
      br.series_r = rj.value("r", 0.0);
      br.series_x = rj.at("x").get<double>();
      br.charging_b = rj.value("charging_b", 0.0);
      br.tap_ratio = rj.value("tap", 1.0);
      if (rj.contains("cap")) br.cap = rj.at("cap").get<double>();
      c.branches.push_back(br);
    }
    for (const auto& gj : j.at("generators")) {
      Generator g;
      g.bus = gj.at("bus").get<int>();
      g.p_min = gj.value("p_min", 0.0);
      g.p_max = gj.at("p_max").get<double>();
      g.q_min = gj.value("q_min", 0.0);
      g.q_max = gj.value("q_max", 0.0);
      // cost: [c2, c1, c0], shorter arrays right-aligned on the constant
      if (gj.contains("cost")) {
        auto cost = gj.at("cost");
        std::vector<double> cc = cost.get<std::vector<double>>();
        if (cc.size() > 3) throw parse_error("cost polynomial beyond quadratic");
        while (cc.size() < 3) cc.insert(cc.begin(), 0.0);
        g.c2 = cc[0]; g.c1 = cc[1]; g.c0 = cc[2];
      }
      c.generators.push_back(g);
    }
    validate_case(c);
    return c;
  } catch (const json::exception& e) {
    throw parse_error(std::string("json case: ") + e.what());
  }
}

std::string serialize_case(const NetworkCase& c) {
  json j;
  if (!c.name.empty()) j["name"] = c.name;
  j["base_mva"] = c.base_mva;
  j["reference_bus"] = c.reference_bus;
  j["buses"] = json::array();
  for (const auto& b : c.buses) {
    json bj;
    bj["index"] = b.index;
    bj["kind"] = kind_to_string(b.kind);
    bj["p_demand"] = b.p_demand;
    bj["q_demand"] = b.q_demand;
    bj["v_min"] = b.v_min;
    bj["v_max"] = b.v_max;
    bj["shunt_g"] = b.shunt_g;
    bj["shunt_b"] = b.shunt_b;
    j["buses"].push_back(bj);
  }
  j["branches"] = json::array();
  for (const auto& br : c.branches) {
    json rj;
    rj["from"] = br.from_bus;
    rj["to"] = br.to_bus;
    rj["r"] = br.series_r;
    rj["x"] = br.series_x;
    rj["charging_b"] = br.charging_b;
    rj["tap"] = br.tap_ratio;
    if (br.cap) rj["cap"] = *br.cap;
    j["branches"].push_back(rj);
  }
  j["generators"] = json::array();
  for (const auto& g : c.generators) {
    json gj;
    gj["bus"] = g.bus;
    gj["p_min"] = g.p_min;
    gj["p_max"] = g.p_max;
    gj["q_min"] = g.q_min;
    gj["q_max"] = g.q_max;
    gj["cost"] = {g.c2, g.c1, g.c0};
    j["generators"].push_back(gj);
  }
  return j.dump(2) + "\n";
}

// --------------------- MATPOWER subset format ---------------------
//
// Accepts the common function-style case file: baseMVA scalar plus bus, gen,
// branch and gencost matrices. Only polynomial (model 2) costs up to
// quadratic, in-service rows, and zero phase shift are supported.

namespace {

struct MpTable {
  std::vector<std::vector<double>> rows;
};

struct MpScan {
  std::string text;
  size_t pos = 0;
  int line = 1;

  [[noreturn]] void fail(const std::string& msg) const {
    throw parse_error("matpower line " + std::to_string(line) + ": " + msg);
  }
};

void skip_ws_and_comments(MpScan& s) {
  while (s.pos < s.text.size()) {
    char ch = s.text[s.pos];
    if (ch == '\n') { ++s.line; ++s.pos; }
    else if (std::isspace(static_cast<unsigned char>(ch))) ++s.pos;
    else if (ch == '%') {
      while (s.pos < s.text.size() && s.text[s.pos] != '\n') ++s.pos;
    } else break;
  }
}

// Finds "mpc.<field> = " and leaves the cursor after '='.
bool seek_field(MpScan& s, const std::string& field) {
  const std::string needle = "mpc." + field;
  size_t search = 0;
  while (true) {
    size_t at = s.text.find(needle, search);
    if (at == std::string::npos) return false;
    size_t after = at + needle.size();
    while (after < s.text.size() &&
           std::isspace(static_cast<unsigned char>(s.text[after])))
      ++after;
    if (after < s.text.size() && s.text[after] == '=') {
      s.pos = after + 1;
      s.line = 1 + static_cast<int>(std::count(s.text.begin(),
                                               s.text.begin() + s.pos, '\n'));
      return true;
    }
    search = at + 1;
  }
}

double parse_scalar(MpScan& s) {
  skip_ws_and_comments(s);
  size_t consumed = 0;
  double val = 0;
  try {
    val = std::stod(s.text.substr(s.pos), &consumed);
  } catch (const std::exception&) {
    s.fail("expected a number");
  }
  s.pos += consumed;
  return val;
}

MpTable parse_table(MpScan& s) {
  skip_ws_and_comments(s);
  if (s.pos >= s.text.size() || s.text[s.pos] != '[')
    s.fail("expected '[' opening a table");
  ++s.pos;
  MpTable t;
  std::vector<double> row;
  while (true) {
    skip_ws_and_comments(s);
    if (s.pos >= s.text.size()) s.fail("unterminated table");
    char ch = s.text[s.pos];
    if (ch == ']') {
      ++s.pos;
      if (!row.empty()) t.rows.push_back(row);
      break;
    }
    if (ch == ';') {
      ++s.pos;
      if (!row.empty()) { t.rows.push_back(row); row.clear(); }
      continue;
    }
    size_t consumed = 0;
    double val = 0;
    try {
      val = std::stod(s.text.substr(s.pos), &consumed);
    } catch (const std::exception&) {
      s.fail("expected a number in table");
    }
    s.pos += consumed;
    row.push_back(val);
  }
  for (const auto& r : t.rows)
    if (r.size() != t.rows.front().size())
      s.fail("ragged table rows");
  return t;
}

}  // namespace

static NetworkCase parse_matpower_case(const std::string& text) {
  MpScan s{text};
  NetworkCase c;

  {
    size_t fn = text.find("function");
    if (fn != std::string::npos) {
      size_t eq = text.find('=', fn);
      if (eq != std::string::npos) {
        size_t end = text.find_first_of("\n;", eq);
        std::string nm = text.substr(eq + 1, end - eq - 1);
        nm.erase(std::remove_if(nm.begin(), nm.end(),
                                [](unsigned char ch) { return std::isspace(ch); }),
                 nm.end());
        c.name = nm;
      }
    }
  }

  if (!seek_field(s, "baseMVA")) throw parse_error("matpower: missing baseMVA");
  c.base_mva = parse_scalar(s);
  if (c.base_mva <= 0) throw parse_error("matpower: baseMVA must be positive");

  if (!seek_field(s, "bus")) throw parse_error("matpower: missing bus table");
  MpTable bus = parse_table(s);
  if (!seek_field(s, "gen")) throw parse_error("matpower: missing gen table");
  MpTable gen = parse_table(s);
  if (!seek_field(s, "branch"))
    throw parse_error("matpower: missing branch table");
  MpTable branch = parse_table(s);
  if (!seek_field(s, "gencost"))
    throw parse_error("matpower: missing gencost table");
  MpTable gencost = parse_table(s);

  // External bus numbers may be arbitrary; map to dense 0-based indices.
  std::vector<int> ext;
  for (const auto& r : bus.rows) {
    if (r.size() < 13) throw parse_error("matpower: bus row needs 13 columns");
    ext.push_back(static_cast<int>(r[0]));
  }
  auto internal = [&](double external) {
    auto it = std::find(ext.begin(), ext.end(), static_cast<int>(external));
    if (it == ext.end())
      throw parse_error("matpower: reference to unknown bus " +
                        std::to_string(static_cast<int>(external)));
    return static_cast<int>(it - ext.begin());
  };

  for (size_t i = 0; i < bus.rows.size(); ++i) {
    const auto& r = bus.rows[i];
    Bus b;
    b.index = static_cast<int>(i);
    int type = static_cast<int>(r[1]);
    if (type == 3) { b.kind = BusKind::Reference; c.reference_bus = b.index; }
    else if (type == 2) b.kind = BusKind::PV;
    else if (type == 1) b.kind = BusKind::PQ;
    else throw parse_error("matpower: unsupported bus type " +
                           std::to_string(type));
    b.p_demand = r[2] / c.base_mva;
    b.q_demand = r[3] / c.base_mva;
    b.shunt_g = r[4] / c.base_mva;
    b.shunt_b = r[5] / c.base_mva;
    b.v_max = r[11];
    b.v_min = r[12];
    c.buses.push_back(b);
  }

  for (const auto& r : branch.rows) {
    if (r.size() < 11)
      throw parse_error("matpower: branch row needs 11 columns");
    Branch br;
    br.from_bus = internal(r[0]);
    br.to_bus = internal(r[1]);
    br.series_r = r[2];
    br.series_x = r[3];
    br.charging_b = r[4];
    if (r[5] > 0) br.cap = r[5] / c.base_mva;
    br.tap_ratio = (r[8] == 0.0) ? 1.0 : r[8];
    if (r[9] != 0.0)
      throw parse_error("matpower: phase-shifting transformers unsupported");
    if (r[10] != 1.0)
      throw parse_error("matpower: out-of-service branches unsupported");
    c.branches.push_back(br);
  }

  if (gencost.rows.size() != gen.rows.size())
    throw parse_error("matpower: gencost rows must match gen rows");
  for (size_t i = 0; i < gen.rows.size(); ++i) {
    const auto& r = gen.rows[i];
    if (r.size() < 10) throw parse_error("matpower: gen row needs 10 columns");
    if (r[7] == 0.0)
      throw parse_error("matpower: out-of-service generators unsupported");
    Generator g;
    g.bus = internal(r[0]);
    g.q_max = r[3] / c.base_mva;
    g.q_min = r[4] / c.base_mva;
    g.p_max = r[8] / c.base_mva;
    g.p_min = r[9] / c.base_mva;
    const auto& cr = gencost.rows[i];
    if (cr.size() < 4 || static_cast<int>(cr[0]) != 2)
      throw parse_error("matpower: only polynomial gencost (model 2)");
    int ncost = static_cast<int>(cr[3]);
    if (ncost > 3 || static_cast<int>(cr.size()) < 4 + ncost)
      throw parse_error("matpower: cost polynomial beyond quadratic");
    // $/MWh coefficients -> $/h per per-unit power
    std::vector<double> cc(cr.begin() + 4, cr.begin() + 4 + ncost);
    while (cc.size() < 3) cc.insert(cc.begin(), 0.0);
    g.c2 = cc[0] * c.base_mva * c.base_mva;
    g.c1 = cc[1] * c.base_mva;
    g.c0 = cc[2];
    c.generators.push_back(g);
  }

  // A bus table may mark a bus PV while all its machines sit elsewhere in
  // modified files; the validator will catch genuinely inconsistent cases.
  validate_case(c);
  return c;
}

NetworkCase parse_case(const std::string& text, CaseFormat format) {
  if (text.empty()) throw parse_error("empty case text");
  if (format == CaseFormat::Auto) {
    size_t first = text.find_first_not_of(" \t\r\n");
    format = (first != std::string::npos &&
              (text[first] == '{' || text[first] == '['))
                 ? CaseFormat::Json
                 : CaseFormat::MatpowerSubset;
  }
  return format == CaseFormat::Json ? parse_json_case(text)
                                    : parse_matpower_case(text);
}

NetworkCase load_case(const std::string& path, CaseFormat format) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open case file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  if (format == CaseFormat::Auto && path.size() > 2 &&
      path.substr(path.size() - 2) == ".m")
    format = CaseFormat::MatpowerSubset;
  return parse_case(ss.str(), format);
}

AdmittanceModel build_admittance(const NetworkCase& c) {
  const int n = c.n_buses();
  AdmittanceModel adm;
  adm.n = n;
  Eigen::MatrixXcd Y = Eigen::MatrixXcd::Zero(n, n);
  adm.branch.reserve(c.branches.size());
  for (const auto& br : c.branches) {
    const std::complex<double> ys =
        1.0 / std::complex<double>(br.series_r, br.series_x);
    const std::complex<double> half_b(0.0, br.charging_b / 2.0);
    const double t = br.tap_ratio;
    BranchAdmittance ba;
    ba.y_ff = (ys + half_b) / (t * t);
    ba.y_ft = -ys / t;
    ba.y_tf = -ys / t;
    ba.y_tt = ys + half_b;
    Y(br.from_bus, br.from_bus) += ba.y_ff;
    Y(br.from_bus, br.to_bus) += ba.y_ft;
    Y(br.to_bus, br.from_bus) += ba.y_tf;
    Y(br.to_bus, br.to_bus) += ba.y_tt;
    adm.branch.push_back(ba);
  }
  for (const auto& b : c.buses)
    Y(b.index, b.index) += std::complex<double>(b.shunt_g, b.shunt_b);
  adm.G = Y.real();
  adm.B = Y.imag();
  return adm;
}

CartesianVoltage flat_start(const NetworkCase& c) {
  const int n = c.n_buses();
  CartesianVoltage v = CartesianVoltage::Zero(2 * n);
  v.head(n).setOnes();
  return v;
}

}  // namespace topf
