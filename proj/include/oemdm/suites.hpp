// Named verification suites run by `oemdm verify`. Each one is a scaled-down
// oracle comparison that finishes in seconds.
#pragma once

#include <string>
#include <vector>

#include "oemdm/oracles.hpp"

namespace oemdm {

const std::vector<std::string>& suite_names();
// Throws InvalidArgument for an unknown name.
PropositionReport run_suite(const std::string& name, std::uint64_t seed);

// Model and inputs shared by the gradient suite and its tests.
struct GradientFixture {
  ModelParams params;
  CombinedInputs inputs;
  ObjectiveSettings settings;
};
GradientFixture gradient_fixture(int vocab, int length, std::uint64_t seed);

// Central differences against the tape for every parameter group, with the
// stop-gradient values frozen at the base point.
GradientCheckReport check_objective_gradient(GradientFixture& fx, double step, double tolerance,
                                             std::size_t coords_per_group, double floor, std::uint64_t seed);

// Largest |backbone gradient| of the head probe; exactly zero when features
// are detached.
double stop_gradient_leak(const ModelParams& params, const Sequence& x);

// Largest central difference of the same probe over the first entry of every
// backbone tensor, with features recomputed from the perturbed weights. It is
// nonzero: the heads do depend on the backbone, just not through the gradient.
double live_feature_sensitivity(const ModelParams& params, const Sequence& x, double step);

}  // namespace oemdm
