// Brute-force ground truth on tiny instances and numerical checks of the
// method's structural claims.
#pragma once

#include <string>
#include <vector>

#include "oemdm/diffusion.hpp"
#include "oemdm/model.hpp"
#include "oemdm/objective.hpp"

namespace oemdm {

struct PropositionReport {
  std::string name;
  std::size_t instances = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  std::vector<double> epsilons;
  std::vector<double> deviations;  // per epsilon where applicable
  double slope = 0.0;
  bool monotone = true;
  bool pass = false;
  std::string detail;
};

// Probability of x under the reverse chain plus reconstruction, summed over
// every absorbing trajectory ending at x. Organised as a recursion over the
// set of still-masked positions, one grid step at a time.
double exact_likelihood(const Sequence& x, const Denoiser& denoiser, const SchedulerSpec& rev, const TimeGrid& grid);

// Same quantity by listing all (T+1)^L trajectories and summing their
// log-weights pairwise in log space. Used to cross-check the recursion.
double exact_likelihood_by_paths(const Sequence& x, const Denoiser& denoiser, const SchedulerSpec& rev,
                                 const TimeGrid& grid);

// Left-to-right chain-rule NLL: -sum_i log p_i(x_i | prefix revealed, rest masked).
// `order` lists positions in generation order (empty = left to right).
double arm_factorized_nll(const Denoiser& denoiser, const Sequence& x, const std::vector<int>& order = {});

double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys);

PropositionReport check_arm_limit(const Denoiser& denoiser, const Sequence& x, const std::vector<double>& epsilons,
                                  const TimeGrid& grid, const std::vector<int>& order = {});

// Independent coding of the masked cross-entropy with 1/t weights.
double mdlm_loss_reference(const Sequence& x, const MaskedSequence& z, const Rows& denoised, double t);

PropositionReport check_mdlm_reduction(const Denoiser& denoiser, const Sequence& x, std::size_t n, RandomStream rng,
                                       const SchedulerSpec& matched = Linear{});

struct GenMd4Trial {
  double genmd4 = 0.0;
  double oemdm = 0.0;
  double tilde_mask = 0.0;  // mask coordinate of the reweighted row
};
// Both integrands at one masked position (row includes the mask column).
GenMd4Trial genmd4_integrands(const std::vector<double>& vocab_velocities, const std::vector<double>& denoiser_row,
                              int x_token);
PropositionReport check_genmd4_equivalence(const std::vector<double>& vocab_velocities,
                                           const std::vector<double>& denoiser_row, int x_token, double t);

struct RlooCheckOptions {
  double c1 = 0.7;
  double c2 = 0.65;
  std::size_t coordinates = 16;  // phi coordinates compared
  bool constant_loss = false;    // replace the loss by a constant
};
PropositionReport check_rloo_unbiased(const Sequence& x, const ModelParams& params, double t, std::size_t n_pairs,
                                      RandomStream rng, const RlooCheckOptions& opts = {});

// Fraction of sampled forward trajectories with some position whose first
// masked grid index lies outside its block window.
double bd3lm_violation_fraction(double eps, int length, int blocks, const TimeGrid& grid, std::size_t n,
                                RandomStream rng);
PropositionReport check_bd3lm_windows(const std::vector<double>& epsilons, int length, int blocks, const TimeGrid& grid,
                                      std::size_t n, RandomStream rng);

}  // namespace oemdm
