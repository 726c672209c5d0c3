// The generalized bound: per-token loss terms, a Monte Carlo continuous-time
// estimator, the exact discrete-time bound for tiny instances, and the
// two-sample leave-one-out objective used for training.
#pragma once

#include <optional>
#include <vector>

#include "oemdm/diffusion.hpp"
#include "oemdm/model.hpp"
#include "oemdm/schedulers.hpp"

namespace oemdm {

constexpr double kDefaultTMin = 1e-4;

struct TokenTerm {
  std::size_t position = 0;
  double A = 0.0, A_hat = 0.0, confidence = 0.0;
  double main = 0.0, velocity = 0.0;
};

struct LossBreakdown {
  double l_main = 0.0;
  double l_velocity = 0.0;
  double total = 0.0;
  double t = 0.0;
  std::vector<TokenTerm> per_token;  // masked positions only
};

struct LossTerms {
  double main = 0.0;
  double velocity = 0.0;
};

// A(log A - log Â) - (A - Â), evaluated without cancellation near A = Â.
double velocity_term(double A, double A_hat);
// Throws ZeroConfidence instead of returning an infinite main term.
LossTerms loss_terms(double A, double A_hat, double confidence);

// A from `fwd` (instantiated on x), Â from `rev` (instantiated on z).
LossBreakdown loss_breakdown(const Sequence& x, const MaskedSequence& z, const Rows& denoised, const Schedule& fwd,
                             const Schedule& rev, double t);

struct Estimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  double l_main = 0.0;
  double l_velocity = 0.0;
  std::size_t samples = 0;
};

// Integral over t in (t_min, 1) of the masked-position loss, by sampling
// t ~ U(t_min, 1) and z ~ q_fwd(.|x).
Estimate nelbo_mc(const Sequence& x, const Denoiser& denoiser, const SchedulerSpec& fwd, const SchedulerSpec& rev,
                  std::size_t n, RandomStream rng, double t_min = kDefaultTMin);

double nelbo_discrete_exact(const Sequence& x, const Denoiser& denoiser, const SchedulerSpec& fwd,
                            const SchedulerSpec& rev, const TimeGrid& grid);

// Two-atom KL between the true posterior and the reverse kernel at one
// masked position: unmask-to-x vs stay masked.
double two_atom_kl(const PositionLaw& fwd, const PositionLaw& rev, double confidence, double s, double t);

double rloo_loss(double loss_z1, double loss_z2, double logq_z1, double logq_z2);

struct ObjectiveSettings {
  double c1 = 0.7;
  double c2 = 0.65;
  bool train_backbone = true;
  bool train_phi = true;
  bool train_psi = true;
  double dropout = 0.0;
};

// Values that sit behind a stop-gradient. A finite-difference check freezes
// them at the base point so perturbed evaluations differentiate the same
// function the tape differentiates.
struct FrozenValues {
  bool set = false;
  Mat features_x, features_z1, features_z2;
  double loss_z1 = 0.0, loss_z2 = 0.0;
};

struct CombinedResult {
  MaskedSequence z1, z2;
  LossBreakdown loss1, loss2;
  double logq1 = 0.0, logq2 = 0.0;
  double rloo = 0.0;
  double objective = 0.0;  // 0.5 (L1 + L2) + rloo
  std::vector<double> exponent_phi;
};

struct CombinedInputs {
  Sequence x;
  double t = 0.5;
  std::optional<MaskedSequence> z1, z2;  // sampled from q_phi when absent
  RandomStream rng{0};                   // corruption and dropout streams
};

// Evaluates the training objective for one text. When `grads` is given the
// gradient of weight * objective is added into it.
CombinedResult combined_objective(const ModelParams& params, const CombinedInputs& in, const ObjectiveSettings& settings,
                                  ModelParams* grads = nullptr, double weight = 1.0, FrozenValues* frozen = nullptr);

// log q_phi(z | x) with exponents from the phi head on detached features of
// x; adds its phi gradient into `grads` when given.
double phi_logprob(const ModelParams& params, const Sequence& x, const MaskedSequence& z, double t, double c1,
                   double c2, ModelParams* grads = nullptr);

// Scalar probe: sum of phi/psi head outputs on x, computed through detached
// features. Its analytic backbone gradient is zero by construction.
double head_probe(const ModelParams& params, const Sequence& x, ModelParams* grads, const Mat* frozen_features);

}  // namespace oemdm
