// Forward corruption, the true reverse posterior, the constrained reverse
// kernel and the ancestral sampler.
#pragma once

#include <Eigen/Dense>

#include "oemdm/core.hpp"
#include "oemdm/schedulers.hpp"

namespace oemdm {

// One row per position over V+1 symbols; the last column is the mask symbol.
using Rows = Eigen::MatrixXd;

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual int vocab_size() const = 0;
  // Rows already satisfy the mask-free / carry-over constraints.
  virtual Rows denoise(const MaskedSequence& z) const = 0;
};

MaskedSequence forward_sample(const Sequence& x, const Vocabulary& vocab, const Schedule& sched, double t,
                              RandomStream rng);
MaskedSequence forward_sample(const Sequence& x, const Vocabulary& vocab, const SchedulerSpec& spec, double t,
                              RandomStream rng);

double forward_logprob(const MaskedSequence& z, const Sequence& x, const Schedule& sched, double t);
double forward_logprob(const MaskedSequence& z, const Sequence& x, const SchedulerSpec& spec, double t);

Rows true_posterior_step(const MaskedSequence& z_t, const Sequence& x, const Vocabulary& vocab,
                         const SchedulerSpec& spec, double s, double t);

// raw_scores has V+1 columns; the mask column is ignored.
Rows apply_subs(const Rows& raw_scores, const MaskedSequence& z_t);
void check_subs(const Rows& rows, const MaskedSequence& z_t, double tol = 1e-12);

Rows reverse_step(const MaskedSequence& z_t, const Rows& denoised, const Schedule& sched, double s, double t);
Rows reverse_step(const MaskedSequence& z_t, const Rows& denoised, const SchedulerSpec& spec, double s, double t);

// Runs the reverse chain from the all-mask state; when `trace` is given it
// receives the visited states indexed by grid step.
Sequence ancestral_sample(const Denoiser& denoiser, const SchedulerSpec& reverse_spec, const TimeGrid& grid,
                          std::size_t length, RandomStream rng, Trajectory* trace = nullptr);

}  // namespace oemdm
