#pragma once

#include <bit>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "crm/measurement.hpp"
#include "crm/qcore.hpp"
#include "crm/shadows.hpp"

namespace crm {

struct EstimateReport {
  double value = 0;
  double std_error = 0;  // 0 iff all contributions to the mean are identical
  long nu = 0;           // records or snapshots behind the estimate
  long nm = 0;           // shots per setting; 0 in the exact (infinite-shot) limit
};

namespace detail {

// Mean about an assumed origin. With bitwise-identical inputs the deviations
// are exactly zero, so the mean returns the common value and the standard
// error comes out as an exact 0 rather than rounding noise.
inline std::pair<double, double> mean_and_sem(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("no contributions to average");
  const double origin = v[0];
  double acc = 0;
  for (double x : v) acc += x - origin;
  const long r = static_cast<long>(v.size());
  const double mean = origin + acc / static_cast<double>(r);
  if (r == 1) return {mean, 0.0};
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (static_cast<double>(r) * static_cast<double>(r - 1)))};
}

// Delete-1 jackknife standard error from the leave-one-out estimates.
inline double jackknife_sem(std::span<const double> theta) {
  const long m = static_cast<long>(theta.size());
  if (m < 2) return 0.0;
  const double origin = theta[0];
  double acc = 0;
  for (double x : theta) acc += x - origin;
  const double mean = origin + acc / static_cast<double>(m);
  double ss = 0;
  for (double x : theta) ss += (x - mean) * (x - mean);
  return std::sqrt(ss * static_cast<double>(m - 1) / static_cast<double>(m));
}

inline double parity_sum(const RealVector& w) {
  double acc = 0;
  for (long s = 0; s < w.size(); ++s) {
    if (std::popcount(static_cast<unsigned long long>(s)) & 1)
      acc -= w[s];
    else
      acc += w[s];
  }
  return acc;
}

}  // namespace detail

// Reduce a pseudo-state to a subset of its support. Returns the input
// untouched when the subset is the whole support, preserving bitwise
// equality for perfect-prior paths.
inline PseudoState restrict_pseudo(const PseudoState& ps, std::span<const int> qubits) {
  if (ps.support.size() == qubits.size() &&
      std::equal(qubits.begin(), qubits.end(), ps.support.begin()))
    return ps;
  std::vector<int> local;
  for (int q : qubits) {
    const auto it = std::find(ps.support.begin(), ps.support.end(), q);
    if (it == ps.support.end())
      throw std::invalid_argument("requested qubits are not inside the pseudo-state support");
    local.push_back(static_cast<int>(it - ps.support.begin()));
  }
  Matrix red = partial_trace(ps.matrix, static_cast<int>(ps.support.size()), local);
  return PseudoState(std::vector<int>(qubits.begin(), qubits.end()), std::move(red));
}

// ---------------------------------------------------------------------------
// Pauli observables, closed form

// Per-record contribution: 3^{N_A} [delta(setting, gamma-basis)] (z_rho -
// z_sigma) + Tr(sigma gamma), where z is the parity-weighted outcome sum on
// the support. Mismatched settings contribute the constant Tr(sigma gamma).
// Unbiased for Tr(rho gamma) for any hermitian prior.
inline EstimateReport estimate_pauli(std::span<const SupportOutcomes> recs,
                                     const std::optional<PseudoState>& sigma,
                                     const PauliString& gamma) {
  if (recs.empty()) throw std::invalid_argument("no measurement outcomes given");
  const std::vector<int> a = gamma.support();
  if (a.empty())
    return EstimateReport{1.0, 0.0, static_cast<long>(recs.size()), recs[0].nm};

  std::string local;
  std::vector<Basis> target;
  for (int q : a) {
    local.push_back(static_cast<char>(gamma.letter(q)));
    target.push_back(PauliString::basis_for(gamma.letter(q)));
  }
  const PauliString gamma_local(local);
  const MeasurementSetting match(std::move(target));
  const PseudoState sig = sigma ? restrict_pseudo(*sigma, a) : PseudoState::zero(a);
  const double constant = pauli_expectation(sig.matrix, static_cast<int>(a.size()), gamma_local);
  const double factor = std::pow(3.0, static_cast<double>(a.size()));
  const double z_sigma = detail::parity_sum(exact_outcomes(sig.matrix, match, a).weights);

  std::vector<double> contrib;
  contrib.reserve(recs.size());
  for (const auto& oc : recs) {
    if (oc.support != a)
      throw std::invalid_argument("outcome support does not match the observable support");
    if (oc.setting == match)
      contrib.push_back(factor * (detail::parity_sum(oc.weights) - z_sigma) + constant);
    else
      contrib.push_back(constant);
  }
  auto [mean, sem] = detail::mean_and_sem(contrib);
  return EstimateReport{mean, sem, static_cast<long>(recs.size()), recs[0].nm};
}

inline EstimateReport estimate_pauli(const Dataset& ds, const std::optional<PseudoState>& sigma,
                                     const PauliString& gamma) {
  if (gamma.size() != ds.meta.n)
    throw std::invalid_argument("Pauli string length does not match the dataset");
  const std::vector<int> a = gamma.support();
  if (a.empty()) return EstimateReport{1.0, 0.0, ds.meta.nu, ds.meta.nm};
  std::vector<SupportOutcomes> recs;
  recs.reserve(ds.records.size());
  for (const auto& rec : ds.records) recs.push_back(marginal_outcomes(rec, a));
  return estimate_pauli(recs, sigma, gamma);
}

// Infinite-shot limit over a fixed setting sequence.
inline EstimateReport estimate_pauli(const DensityState& rho,
                                     std::span<const MeasurementSetting> settings,
                                     const std::optional<PseudoState>& sigma,
                                     const PauliString& gamma) {
  if (gamma.size() != rho.qubits())
    throw std::invalid_argument("Pauli string length does not match the state");
  if (settings.empty()) throw std::invalid_argument("no settings given");
  const std::vector<int> a = gamma.support();
  if (a.empty()) return EstimateReport{1.0, 0.0, static_cast<long>(settings.size()), 0};
  std::vector<SupportOutcomes> recs;
  recs.reserve(settings.size());
  for (const auto& ms : settings) recs.push_back(exact_outcomes(rho, ms, a));
  return estimate_pauli(recs, sigma, gamma);
}

// ---------------------------------------------------------------------------
// Fidelity with a pure target (single-copy projector observable)

inline EstimateReport estimate_fidelity(std::span<const SupportOutcomes> recs,
                                        const std::optional<PseudoState>& sigma,
                                        const Vector& psi, std::span<const int> qubits) {
  if (recs.empty()) throw std::invalid_argument("no measurement outcomes given");
  check_support(kMaxQubits, qubits);
  if (psi.size() != (1L << qubits.size()))
    throw std::invalid_argument("target vector dimension does not match the support");
  if (std::abs(psi.norm() - 1.0) > 1e-10)
    throw validation_error("fidelity target vector must be normalized");
  std::optional<PseudoState> sig;
  if (sigma) sig = restrict_pseudo(*sigma, qubits);
  std::vector<double> contrib;
  contrib.reserve(recs.size());
  const std::vector<int> a(qubits.begin(), qubits.end());
  for (const auto& oc : recs) {
    if (oc.support != a)
      throw std::invalid_argument("outcome support does not match the target support");
    const Snapshot snap = sig ? build_crm_snapshot(oc, *sig)
                              : snapshot_from_outcomes(oc, SnapshotKind::standard);
    contrib.push_back((psi.adjoint() * snap.matrix * psi)(0, 0).real());
  }
  auto [mean, sem] = detail::mean_and_sem(contrib);
  return EstimateReport{mean, sem, static_cast<long>(recs.size()), recs[0].nm};
}

inline EstimateReport estimate_fidelity(const Dataset& ds, const std::optional<PseudoState>& sigma,
                                        const Vector& psi, std::span<const int> qubits) {
  std::vector<SupportOutcomes> recs;
  recs.reserve(ds.records.size());
  for (const auto& rec : ds.records) recs.push_back(marginal_outcomes(rec, qubits));
  return estimate_fidelity(recs, sigma, psi, qubits);
}

inline EstimateReport estimate_fidelity(const DensityState& rho,
                                        std::span<const MeasurementSetting> settings,
                                        const std::optional<PseudoState>& sigma,
                                        const Vector& psi, std::span<const int> qubits) {
  if (settings.empty()) throw std::invalid_argument("no settings given");
  std::vector<SupportOutcomes> recs;
  recs.reserve(settings.size());
  for (const auto& ms : settings) recs.push_back(exact_outcomes(rho, ms, qubits));
  return estimate_fidelity(recs, sigma, psi, qubits);
}

// ---------------------------------------------------------------------------
// Trace moments

inline EstimateReport estimate_trace_moment(std::span<const BatchShadow> batches, int n) {
  if (batches.empty()) throw std::invalid_argument("no batches given");
  if (n < 1) throw std::invalid_argument("moment order must be >= 1");
  const long total = static_cast<long>(batches.size()) * batches[0].members;
  if (n == 1) {
    bool normalized = true;
    for (const auto& b : batches)
      if (b.kind == SnapshotKind::prior) normalized = false;
    if (normalized) return EstimateReport{1.0, 0.0, total, 0};
    std::vector<double> traces;
    traces.reserve(batches.size());
    for (const auto& b : batches) traces.push_back(b.matrix.trace().real());
    auto [mean, sem] = detail::mean_and_sem(traces);
    return EstimateReport{mean, sem, total, 0};
  }
  const int m = static_cast<int>(batches.size());
  if (m < n) throw std::invalid_argument("need at least as many batches as copies");
  const auto obs = MultiCopyObservable::trace_moment(n, batches[0].support);
  const double value = estimate_mco(batches, obs);
  double sem = 0;
  if (m > n) {
    std::vector<double> theta;
    theta.reserve(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
      std::vector<BatchShadow> rest;
      rest.reserve(static_cast<std::size_t>(m - 1));
      for (int t = 0; t < m; ++t)
        if (t != j) rest.push_back(batches[static_cast<std::size_t>(t)]);
      theta.push_back(estimate_mco(rest, obs));
    }
    sem = detail::jackknife_sem(theta);
  }
  return EstimateReport{value, sem, total, 0};
}

// ---------------------------------------------------------------------------
// Entropy polynomial machinery

struct EntropyPolynomial {
  int n_max = 0;
  std::vector<double> a;  // a[k] multiplies x^{k+1}; no constant term
  std::vector<boost::multiprecision::cpp_rational> a_rational;  // filled iff exact
  bool exact = false;

  double eval(double x) const {
    double acc = 0;
    for (int k = n_max - 1; k >= 0; --k) acc = acc * x + a[static_cast<std::size_t>(k)];
    return acc * x;
  }
};

namespace detail {

// Explicit inverse of the Cauchy matrix C_ij = 1/(x_i + y_j):
// B_ij = prod_k (x_j + y_k) (x_k + y_i) / [ (x_j + y_i)
//        prod_{k != j} (x_j - x_k) prod_{k != i} (y_i - y_k) ].
template <typename T>
std::vector<std::vector<T>> cauchy_inverse_impl(const std::vector<T>& x, const std::vector<T>& y) {
  const std::size_t n = x.size();
  if (n == 0 || y.size() != n)
    throw std::invalid_argument("node vectors must be non-empty and of equal length");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i < j && x[i] == x[j]) throw singular_error("coincident x nodes in Cauchy inverse");
      if (i < j && y[i] == y[j]) throw singular_error("coincident y nodes in Cauchy inverse");
      if (x[i] + y[j] == T(0)) throw singular_error("singular Cauchy matrix: x_i + y_j = 0");
    }
  std::vector<std::vector<T>> b(n, std::vector<T>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T num(1), den(x[j] + y[i]);
      for (std::size_t k = 0; k < n; ++k) {
        num *= (x[j] + y[k]) * (x[k] + y[i]);
        if (k != j) den *= x[j] - x[k];
        if (k != i) den *= y[i] - y[k];
      }
      b[i][j] = num / den;
    }
  return b;
}

}  // namespace detail

inline Eigen::MatrixXd cauchy_inverse(const std::vector<double>& x, const std::vector<double>& y) {
  const auto b = detail::cauchy_inverse_impl<double>(x, y);
  const long n = static_cast<long>(x.size());
  Eigen::MatrixXd out(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j)
      out(i, j) = b[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return out;
}

// Least-squares coefficients of the degree-n_max polynomial approximation
// (no constant term) to -x ln x on [0,1]. The normal equations have Cauchy
// form and are inverted explicitly in exact rational arithmetic; the
// floating-point inverse already loses several digits near degree 10 and is
// off by order 0.1 at degree 12, so doubles are only produced at the end.
inline EntropyPolynomial entropy_poly_coeffs(int n_max) {
  using boost::multiprecision::cpp_rational;
  if (n_max < 1 || n_max > 12)
    throw std::invalid_argument("polynomial degree must be between 1 and 12");
  EntropyPolynomial poly;
  poly.n_max = n_max;
  std::vector<cpp_rational> x, y;
  for (int n = 1; n <= n_max; ++n) {
    x.emplace_back(n + 1);
    y.emplace_back(n);
  }
  const auto inv = detail::cauchy_inverse_impl<cpp_rational>(x, y);
  poly.a_rational.resize(static_cast<std::size_t>(n_max));
  for (int n = 1; n <= n_max; ++n) {
    cpp_rational acc = 0;
    for (int k = 1; k <= n_max; ++k)
      acc += inv[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(k - 1)] /
             cpp_rational((2 + k) * (2 + k));
    poly.a_rational[static_cast<std::size_t>(n - 1)] = acc;
    poly.a.push_back(acc.convert_to<double>());
  }
  poly.exact = true;
  return poly;
}

// Integrated squared error of the polynomial against -x ln x on [0,1]:
// I = 2/27 - sum 2 a_n/(2+n)^2 + sum a_n a_k/(1+n+k).
inline double least_square_error(const EntropyPolynomial& poly) {
  using boost::multiprecision::cpp_rational;
  if (static_cast<int>(poly.a.size()) != poly.n_max)
    throw std::invalid_argument("polynomial coefficient count does not match its degree");
  if (poly.exact) {
    cpp_rational acc(2, 27);
    for (int n = 1; n <= poly.n_max; ++n) {
      acc -= 2 * poly.a_rational[static_cast<std::size_t>(n - 1)] /
             cpp_rational((2 + n) * (2 + n));
      for (int k = 1; k <= poly.n_max; ++k)
        acc += poly.a_rational[static_cast<std::size_t>(n - 1)] *
               poly.a_rational[static_cast<std::size_t>(k - 1)] / cpp_rational(1 + n + k);
    }
    return acc.convert_to<double>();
  }
  double acc = 2.0 / 27.0;
  for (int n = 1; n <= poly.n_max; ++n) {
    acc -= 2.0 * poly.a[static_cast<std::size_t>(n - 1)] / static_cast<double>((2 + n) * (2 + n));
    for (int k = 1; k <= poly.n_max; ++k)
      acc += poly.a[static_cast<std::size_t>(n - 1)] * poly.a[static_cast<std::size_t>(k - 1)] /
             static_cast<double>(1 + n + k);
  }
  return acc;
}

// Worst-case entropy error of the degree-n_max approximation for states of
// bounded rank: rank times the sup-norm distance between -x ln x and the
// polynomial over [0,1], located on a dense grid and sharpened locally.
inline double entropy_error_bound(int n_max, long rank) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  const EntropyPolynomial poly = entropy_poly_coeffs(n_max);
  const auto gap = [&poly](double x) {
    const double f = x > 0 ? -x * std::log(x) : 0.0;
    return std::abs(f - poly.eval(x));
  };
  const long grid = 1000000;
  double best_x = 0, best = 0;
  for (long i = 0; i <= grid; ++i) {
    const double x = static_cast<double>(i) / static_cast<double>(grid);
    const double g = gap(x);
    if (g > best) {
      best = g;
      best_x = x;
    }
  }
  double lo = std::max(0.0, best_x - 1.0 / grid);
  double hi = std::min(1.0, best_x + 1.0 / grid);
  for (int it = 0; it < 200; ++it) {
    const double x1 = lo + (hi - lo) / 3.0;
    const double x2 = hi - (hi - lo) / 3.0;
    if (gap(x1) < gap(x2))
      lo = x1;
    else
      hi = x2;
  }
  best = std::max(best, gap((lo + hi) / 2.0));
  return static_cast<double>(rank) * best;
}

// Spectral evaluation sum_i poly(lambda_i) = sum_n a_n Tr(rho^n); the exact
// reference the estimator below converges to.
inline double entropy_poly_value(const Matrix& rho, const EntropyPolynomial& poly) {
  if (!is_hermitian(rho)) throw validation_error("spectral evaluation needs a hermitian matrix");
  Eigen::SelfAdjointEigenSolver<Matrix> es(rho, Eigen::EigenvaluesOnly);
  double acc = 0;
  for (long i = 0; i < es.eigenvalues().size(); ++i) acc += poly.eval(es.eigenvalues()[i]);
  return acc;
}

// Polynomial entropy estimate sum_n a_n p-hat_n on shared batches. The n = 1
// moment is the exact constant 1 for normalized batch kinds.
inline EstimateReport estimate_entropy_poly(std::span<const BatchShadow> batches, int n_max) {
  if (batches.empty()) throw std::invalid_argument("no batches given");
  const int m = static_cast<int>(batches.size());
  if (m < n_max) throw std::invalid_argument("need at least n_max batches");
  const EntropyPolynomial poly = entropy_poly_coeffs(n_max);
  const long total = static_cast<long>(m) * batches[0].members;

  const auto value_of = [&poly, n_max](std::span<const BatchShadow> bs) {
    double acc = poly.a[0];
    for (int n = 2; n <= n_max; ++n)
      acc += poly.a[static_cast<std::size_t>(n - 1)] *
             estimate_mco(bs, MultiCopyObservable::trace_moment(n, bs[0].support));
    return acc;
  };
  const double value = n_max == 1 ? poly.a[0] : value_of(batches);
  double sem = 0;
  if (m > n_max && n_max >= 2) {
    std::vector<double> theta;
    theta.reserve(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
      std::vector<BatchShadow> rest;
      rest.reserve(static_cast<std::size_t>(m - 1));
      for (int t = 0; t < m; ++t)
        if (t != j) rest.push_back(batches[static_cast<std::size_t>(t)]);
      theta.push_back(value_of(rest));
    }
    sem = detail::jackknife_sem(theta);
  }
  return EstimateReport{value, sem, total, 0};
}

}  // namespace crm
