#pragma once

#include "topf/case_model.hpp"

namespace topf {

// Deterministic ring-plus-chords mesh for scaling runs: uniform line
// parameters, one generator per five buses, loads on the remainder.
NetworkCase synthetic_ring_case(int n_buses, unsigned seed = 1);

}  // namespace topf
