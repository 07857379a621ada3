#pragma once

// Variance predictions and data-driven prior selection.
//
// The estimators in shadows.hpp and observables.hpp are unbiased; what
// separates a good prior from a useless one is the variance.  This header
// provides three levels of prediction for that variance, from coarse to
// exact, plus a selection routine that picks among candidate priors using
// the empirical spread actually observed on a dataset.
//
//  * pauli_variance_exact / pauli_variance_bound: closed forms for a single
//    Pauli observable under the difference estimator.
//  * mco_variance_bound: a norm bound for multi-copy observables, split into
//    a setting-noise and a shot-noise component.
//  * exact_leading_variance: the exact leading-order (1/N_U) variance of the
//    single-copy difference statistic, by exhaustive enumeration of all
//    product settings on the observable's support.
//  * prior_selection: estimates one observable once per candidate prior on
//    the same dataset and returns the candidate with the smallest empirical
//    standard error, flagging priors that look unfaithful to the data.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "crm/errors.hpp"
#include "crm/measurement.hpp"
#include "crm/observables.hpp"
#include "crm/qcore.hpp"
#include "crm/shadows.hpp"

namespace crm {

namespace detail {

// Shared validation for the closed-form Pauli variance functions.  Reduces
// rho and sigma to the support of gamma and returns the two traces the
// formulas need: t = Tr[gamma (rho - sigma)] and e = Tr[gamma rho].
struct PauliVarianceTerms {
  int n_a = 0;
  double t = 0.0;
  double e = 0.0;
};

inline PauliVarianceTerms pauli_variance_terms(const PauliString& gamma, const Matrix& rho,
                                               const Matrix& sigma) {
  const int n = qubits_for_dim(rho.rows());
  if (rho.rows() != rho.cols() || sigma.rows() != sigma.cols())
    throw std::invalid_argument("variance inputs must be square matrices");
  if (sigma.rows() != rho.rows())
    throw std::invalid_argument("rho and sigma must act on the same register");
  if (static_cast<int>(gamma.size()) != n)
    throw std::invalid_argument("Pauli string length must match the register size");
  if (!is_hermitian(rho) || !is_hermitian(sigma))
    throw std::invalid_argument("variance inputs must be hermitian");
  const std::vector<int> support = gamma.support();

  PauliVarianceTerms out;
  if (support.empty()) {
    // The identity estimator is the constant 1; both formulas collapse to 0.
    out.n_a = 0;
    out.t = 0.0;
    out.e = 1.0;
    return out;
  }
  out.n_a = static_cast<int>(support.size());
  const Matrix rho_a = partial_trace(rho, n, support);
  const Matrix sigma_a = partial_trace(sigma, n, support);
  const Matrix gamma_a = gamma.matrix_on(support);
  out.e = std::real(trace_product(gamma_a, rho_a));
  out.t = out.e - std::real(trace_product(gamma_a, sigma_a));
  return out;
}

inline void check_shot_budget(double n_u, double n_m) {
  if (!(n_u >= 1.0)) throw std::invalid_argument("unitary count must be at least 1");
  if (!(n_m > 0.0)) throw std::invalid_argument("shot count must be positive (infinity allowed)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Closed-form Pauli variance
// ---------------------------------------------------------------------------

// Exact variance of the difference estimator for a Pauli observable gamma:
//
//   V = (1/N_U) [ (3^|A| - 1) Tr[gamma (rho - sigma)]^2
//                 + 3^|A| (1 - Tr[gamma rho]^2) / N_M ]
//
// where A is the support of gamma.  rho and sigma are density-like matrices
// on the full register; both are reduced to A internally.  Shot counts are
// taken as doubles so the infinite-shot limit can be expressed directly.
inline double pauli_variance_exact(const PauliString& gamma, const Matrix& rho,
                                   const Matrix& sigma, double n_u, double n_m) {
  detail::check_shot_budget(n_u, n_m);
  const auto terms = detail::pauli_variance_terms(gamma, rho, sigma);
  const double pow3 = std::pow(3.0, terms.n_a);
  const double setting = (pow3 - 1.0) * terms.t * terms.t;
  const double shot = std::isinf(n_m) ? 0.0 : pow3 * (1.0 - terms.e * terms.e) / n_m;
  return (setting + shot) / n_u;
}

// Simpler upper bound on the same variance, from the scalar ingredients:
// support size |A| and the bias t = Tr[gamma (rho - sigma)]:
//
//   V <= 3^|A| ( t^2 + 1/N_M ) / N_U
inline double pauli_variance_bound(int n_a, double t, double n_u, double n_m) {
  detail::check_shot_budget(n_u, n_m);
  if (n_a < 0) throw std::invalid_argument("support size must be non-negative");
  if (n_a == 0) return 0.0;  // constant estimator, nothing to bound
  const double pow3 = std::pow(3.0, n_a);
  const double inv_nm = std::isinf(n_m) ? 0.0 : 1.0 / n_m;
  return pow3 * (t * t + inv_nm) / n_u;
}

inline double pauli_variance_bound(const PauliString& gamma, const Matrix& rho,
                                   const Matrix& sigma, double n_u, double n_m) {
  const auto terms = detail::pauli_variance_terms(gamma, rho, sigma);
  return pauli_variance_bound(terms.n_a, terms.t, n_u, n_m);
}

namespace detail {

// Reduce a simulator state and an optional prior onto the support of gamma,
// returning the local string plus matched reduced matrices so the matrix-level
// formulas apply directly.  The prior may live on any support containing A.
struct ReducedPauliInputs {
  PauliString gamma_local;
  Matrix rho_a;
  Matrix sigma_a;
};

inline ReducedPauliInputs reduce_pauli_inputs(const PauliString& gamma, const DensityState& rho,
                                              const std::optional<PseudoState>& sigma) {
  if (gamma.size() != rho.qubits())
    throw std::invalid_argument("Pauli string length must match the register size");
  const std::vector<int> a = gamma.support();
  if (a.empty())
    throw std::invalid_argument("identity observable reduces to an empty support");
  std::string letters;
  for (int q : a) letters.push_back(static_cast<char>(gamma.letter(q)));
  ReducedPauliInputs out{PauliString(letters), partial_trace(rho, a), Matrix()};
  out.sigma_a = sigma ? restrict_pseudo(*sigma, a).matrix
                      : Matrix::Zero(out.rho_a.rows(), out.rho_a.cols());
  return out;
}

}  // namespace detail

// Conveniences for simulator states.  A missing prior means sigma = 0; a
// prior on a larger support is reduced onto the observable support first.
inline double pauli_variance_exact(const PauliString& gamma, const DensityState& rho,
                                   const std::optional<PseudoState>& sigma, double n_u,
                                   double n_m) {
  detail::check_shot_budget(n_u, n_m);
  if (gamma.support().empty()) return 0.0;
  const auto in = detail::reduce_pauli_inputs(gamma, rho, sigma);
  return pauli_variance_exact(in.gamma_local, in.rho_a, in.sigma_a, n_u, n_m);
}

inline double pauli_variance_bound(const PauliString& gamma, const DensityState& rho,
                                   const std::optional<PseudoState>& sigma, double n_u,
                                   double n_m) {
  detail::check_shot_budget(n_u, n_m);
  if (gamma.support().empty()) return 0.0;
  const auto in = detail::reduce_pauli_inputs(gamma, rho, sigma);
  return pauli_variance_bound(in.gamma_local, in.rho_a, in.sigma_a, n_u, n_m);
}

// ---------------------------------------------------------------------------
// Reduced one-copy operator
// ---------------------------------------------------------------------------

// The variance of a multi-copy estimator is controlled, at leading order,
// by a single-copy operator acting on the observable's support.  For a trace
// moment Tr[rho^n] that operator is rho_A^{n-1}; for a Pauli observable it
// is the Pauli itself.  This small wrapper keeps the matrix together with a
// record of how it was built so reports can say what was bounded.
struct ReducedOneCopyOperator {
  // Where the operator came from: the shift-operator reduction rho_a^(n-1)
  // of an n-copy trace moment, a Pauli observable, or an explicit matrix.
  enum class Provenance { shift, pauli, explicit_op };

  Matrix matrix;
  Provenance provenance = Provenance::explicit_op;

  int num_qubits() const { return qubits_for_dim(matrix.rows()); }

  // rho_a^(n-1) for the n-copy trace moment on the reduced state rho_a.
  static ReducedOneCopyOperator for_trace_moment(const Matrix& rho_a, int copies) {
    if (copies < 1) throw std::invalid_argument("trace moment order must be at least 1");
    if (rho_a.rows() != rho_a.cols() || rho_a.rows() < 2)
      throw std::invalid_argument("reduced state must be a square matrix on at least one qubit");
    (void)qubits_for_dim(rho_a.rows());
    if (!is_hermitian(rho_a)) throw std::invalid_argument("reduced state must be hermitian");
    Matrix m = Matrix::Identity(rho_a.rows(), rho_a.cols());
    for (int i = 1; i < copies; ++i) m = m * rho_a;
    return ReducedOneCopyOperator{std::move(m), Provenance::shift};
  }

  static ReducedOneCopyOperator for_pauli(const PauliString& gamma_local) {
    const std::vector<int> support = gamma_local.support();
    if (static_cast<int>(support.size()) != gamma_local.size())
      throw std::invalid_argument("local Pauli must be non-identity on every qubit it names");
    return ReducedOneCopyOperator{gamma_local.matrix_on(support), Provenance::pauli};
  }

  static ReducedOneCopyOperator explicit_op(Matrix m) {
    if (m.rows() != m.cols() || m.rows() < 2)
      throw std::invalid_argument("one-copy operator must be a square matrix on at least one qubit");
    (void)qubits_for_dim(m.rows());
    if (!is_hermitian(m)) throw std::invalid_argument("one-copy operator must be hermitian");
    return ReducedOneCopyOperator{std::move(m), Provenance::explicit_op};
  }
};

// ---------------------------------------------------------------------------
// Multi-copy variance bound
// ---------------------------------------------------------------------------

// Leading-order bound for an n-copy observable with one-copy reduction O1 on
// support A, split into its two noise sources:
//
//   setting_noise = n^2 ||O1||_2^2 3^|A| ||rho_A - sigma_A||_2^2 / N_U
//   shot_noise    = n^2 ||O1||_2^2 2^|A| / (N_U N_M)
//   bound         = setting_noise + shot_noise
//
// with ||.||_2 the Hilbert-Schmidt norm.  A perfect prior kills the setting
// noise entirely; the shot noise is what remains and shrinks with N_M.
struct VarianceBoundReport {
  double bound = 0.0;
  double setting_noise = 0.0;
  double shot_noise = 0.0;
  int copies = 0;
  int n_a = 0;
  double n_u = 0.0;
  double n_m = 0.0;
};

// Scalar form taking the squared Frobenius norm of the one-copy operator and
// of the state-prior difference, for callers without the matrices in hand.
inline VarianceBoundReport mco_variance_bound(int n_a, double o1_norm_sq, double diff_sq,
                                              int copies, double n_u, double n_m) {
  if (copies < 1) throw std::invalid_argument("copy count must be at least 1");
  if (n_a < 1) throw std::invalid_argument("support size must be at least 1");
  if (o1_norm_sq < 0.0 || diff_sq < 0.0)
    throw std::invalid_argument("squared norms must be non-negative");
  detail::check_shot_budget(n_u, n_m);

  VarianceBoundReport rep;
  rep.copies = copies;
  rep.n_a = n_a;
  rep.n_u = n_u;
  rep.n_m = n_m;

  const double scale = static_cast<double>(copies) * static_cast<double>(copies) * o1_norm_sq;
  rep.setting_noise = scale * std::pow(3.0, rep.n_a) * diff_sq / n_u;
  rep.shot_noise = std::isinf(n_m) ? 0.0 : scale * std::pow(2.0, rep.n_a) / (n_u * n_m);
  rep.bound = rep.setting_noise + rep.shot_noise;
  return rep;
}

inline VarianceBoundReport mco_variance_bound(const ReducedOneCopyOperator& o1,
                                              const Matrix& rho_a, const Matrix& sigma_a,
                                              int copies, double n_u, double n_m) {
  if (rho_a.rows() != rho_a.cols() || sigma_a.rows() != sigma_a.cols())
    throw std::invalid_argument("reduced states must be square matrices");
  if (rho_a.rows() != o1.matrix.rows() || sigma_a.rows() != o1.matrix.rows())
    throw std::invalid_argument("reduced states must match the one-copy operator dimension");
  return mco_variance_bound(o1.num_qubits(), o1.matrix.squaredNorm(),
                            (rho_a - sigma_a).squaredNorm(), copies, n_u, n_m);
}

// ---------------------------------------------------------------------------
// Exact leading-order variance
// ---------------------------------------------------------------------------

// Exact variance of the per-setting difference statistic
//
//   X(U) = sum_s (Phat_rho(s|U) - P_sigma(s|U)) [Minv(O1)](U, s)
//
// at leading order in 1/N_U, where [Minv(O1)](U, s) is the diagonal entry s
// of U Minv(O1) U^dag and Phat is the empirical distribution of N_M shots:
//
//   V1 = Var_U[f] + E_U[g] / N_M
//   f(U) = sum_s (P_rho(s|U) - P_sigma(s|U)) w_U(s)
//   g(U) = sum_s P_rho(s|U) w_U(s)^2 - (sum_s P_rho(s|U) w_U(s))^2
//
// Evaluated by exhaustive enumeration of all 3^|A| product settings, so the
// support is capped at 8 qubits.  sigma_a may be any hermitian matrix.
inline double exact_leading_variance(const ReducedOneCopyOperator& o1, const Matrix& rho_a,
                                     const Matrix& sigma_a, double n_m) {
  if (!(n_m > 0.0)) throw std::invalid_argument("shot count must be positive (infinity allowed)");
  if (rho_a.rows() != rho_a.cols() || sigma_a.rows() != sigma_a.cols())
    throw std::invalid_argument("reduced states must be square matrices");
  if (rho_a.rows() != o1.matrix.rows() || sigma_a.rows() != o1.matrix.rows())
    throw std::invalid_argument("reduced states must match the one-copy operator dimension");
  if (!is_hermitian(rho_a) || !is_hermitian(sigma_a))
    throw std::invalid_argument("reduced states must be hermitian");
  const int n_a = o1.num_qubits();
  if (n_a > 8)
    throw resource_error("exhaustive setting enumeration is limited to 8 support qubits");

  // Minv(O1) once; each setting then needs three conjugations (weights, rho
  // side, sigma side) and a walk over the diagonal.
  const Matrix inv = inverse_channel_apply(o1.matrix);

  const auto settings = all_product_settings(n_a);
  const double count = static_cast<double>(settings.size());
  const Eigen::Index dim = rho_a.rows();

  double f_mean = 0.0, f_sq_mean = 0.0, g_mean = 0.0;
  for (const auto& setting : settings) {
    const auto gates = setting_gates(setting.bases);
    Matrix w_rot = inv;
    conjugate_by_gates(w_rot, gates);
    Matrix rho_rot = rho_a;
    conjugate_by_gates(rho_rot, gates);
    Matrix sig_rot = sigma_a;
    conjugate_by_gates(sig_rot, gates);

    double f = 0.0, first = 0.0, second = 0.0;
    for (Eigen::Index s = 0; s < dim; ++s) {
      const double w = std::real(w_rot(s, s));
      const double p_rho = std::real(rho_rot(s, s));
      const double p_sig = std::real(sig_rot(s, s));
      f += (p_rho - p_sig) * w;
      first += p_rho * w;
      second += p_rho * w * w;
    }
    f_mean += f / count;
    f_sq_mean += f * f / count;
    g_mean += (second - first * first) / count;
  }

  const double var_f = f_sq_mean - f_mean * f_mean;
  const double shot = std::isinf(n_m) ? 0.0 : g_mean / n_m;
  return var_f + shot;
}

// ---------------------------------------------------------------------------
// Empirical spread
// ---------------------------------------------------------------------------

// Mean and standard error of a list of per-unitary estimate values.  This is
// the quantity prior selection compares across candidates; it needs at least
// two values to say anything about spread.
inline EstimateReport empirical_report(std::span<const double> values) {
  if (values.size() < 2)
    throw std::invalid_argument("empirical spread needs at least two values");
  EstimateReport rep;
  const auto [mean, sem] = detail::mean_and_sem(values);
  rep.value = mean;
  rep.std_error = sem;
  rep.nu = static_cast<long>(values.size());
  rep.nm = 0;
  return rep;
}

// ---------------------------------------------------------------------------
// Prior selection
// ---------------------------------------------------------------------------

// Result of comparing candidate priors on one dataset.  chosen indexes the
// candidate whose estimate had the smallest empirical standard error; the
// fidelity entries hold Tr[sigma_i rho_hat] against the mean plain snapshot,
// and flagged marks candidates falling below the faithfulness threshold.
struct PriorSelection {
  std::size_t chosen = 0;
  std::vector<EstimateReport> reports;
  std::vector<double> fidelity;
  std::vector<bool> flagged;
  double threshold = 0.5;
};

namespace detail {

// Estimate one observable from per-record outcomes under a fixed prior,
// reporting the empirical spread across unitaries.  Single-copy observables
// average per-record traces directly; multi-copy observables use batches of
// size n for the value and disjoint record groups for the spread.
inline EstimateReport estimate_with_prior(std::span<const SupportOutcomes> outcomes,
                                          const PseudoState& prior, bool prior_is_zero,
                                          const MultiCopyObservable& obs) {
  const int n = obs.copies;
  std::vector<Snapshot> snaps;
  snaps.reserve(outcomes.size());
  for (const auto& oc : outcomes) {
    if (prior_is_zero)
      snaps.push_back(snapshot_from_outcomes(oc, SnapshotKind::standard));
    else
      snaps.push_back(build_crm_snapshot(oc, prior));
  }

  EstimateReport rep;
  rep.nu = static_cast<long>(outcomes.size());
  rep.nm = outcomes.empty() ? 0 : outcomes.front().nm;

  if (n == 1) {
    std::vector<double> vals;
    vals.reserve(snaps.size());
    for (const auto& s : snaps) {
      BatchShadow b;
      b.support = s.support;
      b.matrix = s.matrix;
      b.index = 1;
      b.members = 1;
      b.kind = s.kind;
      vals.push_back(estimate_mco(std::span<const BatchShadow>(&b, 1), obs));
    }
    const auto [mean, sem] = mean_and_sem(vals);
    rep.value = mean;
    rep.std_error = sem;
    return rep;
  }

  const std::size_t k = snaps.size() / static_cast<std::size_t>(n);
  if (k < 1) throw std::invalid_argument("prior selection needs at least n records for an n-copy observable");

  // Value from the largest usable prefix, batched so every batch holds one
  // record per copy slot.
  {
    std::vector<Snapshot> prefix(snaps.begin(),
                                 snaps.begin() + static_cast<std::ptrdiff_t>(k * static_cast<std::size_t>(n)));
    const auto batches = make_batches(prefix, n);
    rep.value = estimate_mco(batches, obs);
  }

  // Spread from disjoint contiguous record groups, each estimating the same
  // observable independently.
  const std::size_t groups = std::min<std::size_t>(10, k);
  const std::size_t per_group = (k / groups) * static_cast<std::size_t>(n);
  std::vector<double> group_vals;
  group_vals.reserve(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<Snapshot> part(snaps.begin() + static_cast<std::ptrdiff_t>(g * per_group),
                               snaps.begin() + static_cast<std::ptrdiff_t>((g + 1) * per_group));
    const auto batches = make_batches(part, n);
    group_vals.push_back(estimate_mco(batches, obs));
  }
  if (group_vals.size() >= 2) {
    const auto [gmean, gsem] = mean_and_sem(group_vals);
    (void)gmean;
    rep.std_error = gsem;
  } else {
    rep.std_error = 0.0;
  }
  return rep;
}

}  // namespace detail

// Compare candidate priors on one set of measurement outcomes.  Candidate 0
// is conventionally the zero pseudo-state, i.e. plain shadows without a
// prior; a candidate whose matrix is exactly zero is treated as that case.
// All candidates see the same records, so the comparison is paired.
inline PriorSelection prior_selection(std::span<const SupportOutcomes> outcomes,
                                      std::span<const PseudoState> priors,
                                      const MultiCopyObservable& obs, double threshold = 0.5) {
  if (outcomes.empty()) throw std::invalid_argument("prior selection needs at least one record");
  if (priors.empty()) throw std::invalid_argument("prior selection needs at least one candidate");
  for (const auto& p : priors) {
    if (p.support != outcomes.front().support)
      throw std::invalid_argument("every candidate prior must live on the observable support");
  }

  PriorSelection sel;
  sel.threshold = threshold;
  sel.reports.reserve(priors.size());
  sel.fidelity.reserve(priors.size());
  sel.flagged.reserve(priors.size());

  // Faithfulness check: mean plain snapshot once, then Tr[sigma_i rho_hat]
  // per candidate.  The zero candidate scores 0 and is always flagged; the
  // flag marks it as useless as a prior, not as an invalid choice.
  Matrix mean_snap = Matrix::Zero(outcomes.front().weights.size(), outcomes.front().weights.size());
  for (const auto& oc : outcomes)
    mean_snap += snapshot_from_outcomes(oc, SnapshotKind::standard).matrix;
  mean_snap /= static_cast<double>(outcomes.size());

  for (const auto& p : priors) {
    const bool is_zero = p.matrix.isZero(0.0);
    sel.reports.push_back(detail::estimate_with_prior(outcomes, p, is_zero, obs));
    const double fid = std::real(trace_product(p.matrix, mean_snap));
    sel.fidelity.push_back(fid);
    sel.flagged.push_back(fid < threshold);
  }

  sel.chosen = 0;
  for (std::size_t i = 1; i < priors.size(); ++i) {
    if (sel.reports[i].std_error < sel.reports[sel.chosen].std_error) sel.chosen = i;
  }
  return sel;
}

// Dataset convenience: marginalizes every record onto the observable support
// and runs the comparison on the resulting empirical outcomes.
inline PriorSelection prior_selection(const Dataset& ds, std::span<const PseudoState> priors,
                                      const MultiCopyObservable& obs, double threshold = 0.5) {
  std::vector<SupportOutcomes> outcomes;
  outcomes.reserve(ds.records.size());
  for (const auto& rec : ds.records) outcomes.push_back(marginal_outcomes(rec, obs.support));
  return prior_selection(std::span<const SupportOutcomes>(outcomes), priors, obs, threshold);
}

}  // namespace crm
