#include "topf/synthetic.hpp"

#include <random>
#include <stdexcept>

namespace topf {

NetworkCase synthetic_ring_case(int n_buses, unsigned seed) {
  if (n_buses < 3) throw parse_error("synthetic case needs >= 3 buses");
  NetworkCase c;
  c.name = "ring" + std::to_string(n_buses);
  c.base_mva = 100.0;
  c.reference_bus = 0;

  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> load(0.05, 0.15);

  for (int i = 0; i < n_buses; ++i) {
    Bus b;
    b.index = i;
    const bool gen = (i % 5 == 0);
    b.kind = i == 0 ? BusKind::Reference : (gen ? BusKind::PV : BusKind::PQ);
    b.p_demand = gen ? 0.0 : load(rng);
    b.q_demand = gen ? 0.0 : 0.3 * b.p_demand;
    b.v_min = 0.9;
    b.v_max = 1.1;
    c.buses.push_back(b);
    if (gen) {
      Generator g;
      g.bus = i;
      g.p_min = 0.0;
      g.p_max = 3.0;
      g.q_min = -2.0;
      g.q_max = 2.0;
      g.c2 = 100.0 + 10.0 * (i % 7);
      g.c1 = 2000.0 + 100.0 * (i % 3);
      g.c0 = 0.0;
      c.generators.push_back(g);
    }
  }

  auto add_line = [&c](int a, int b) {
    Branch br;
    br.from_bus = a;
    br.to_bus = b;
    br.series_r = 0.02;
    br.series_x = 0.10;
    br.charging_b = 0.02;
    br.tap_ratio = 1.0;
    c.branches.push_back(br);
  };
  for (int i = 0; i < n_buses; ++i) add_line(i, (i + 1) % n_buses);
  for (int i = 0; i + n_buses / 2 < n_buses; i += 5)
    add_line(i, i + n_buses / 2);

  validate_case(c);
  return c;
}

}  // namespace topf
