#pragma once

// Test-state generation: transverse-field Ising ground states, bond-truncated
// approximations of pure states, noisy random-circuit states, and the state
// descriptor strings that name all of these in dataset metadata and configs.
//
// The Ising chain is H = -sum_i (Z_i Z_{i+1} + X_i) with open boundary (the
// last coupling term is absent), optionally perturbed by per-site fields
// +sum_i eps_i Z_i to model a slightly different companion device.  Ground
// states come from a dense eigensolve at small sizes and from restarted
// Lanczos iteration above that, both well inside desk-scale resources.
//
// Random circuits alternate layers of single-qubit and neighboring two-qubit
// Haar gates; each gate is followed by single-qubit depolarization of
// strength p on the qubits it touched.  The channel convention is
// rho -> (1-p) rho + p (I/2 tensor Tr_q rho) per touched qubit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "crm/errors.hpp"
#include "crm/qcore.hpp"
#include "crm/rng.hpp"

namespace crm {

// Stream labels for the deterministic substreams used by this header.
inline constexpr std::uint64_t kStreamSiteField = 0x00e5;
inline constexpr std::uint64_t kStreamGateDraw = 0x9a7e;

// ---------------------------------------------------------------------------
// Ising chain
// ---------------------------------------------------------------------------

struct IsingSpec {
  int n = 0;
  std::vector<double> eps;  // per-site Z field offsets; empty means none

  static IsingSpec plain(int n) { return IsingSpec{n, {}}; }

  // Companion-device perturbation: every site gets an independent uniform
  // field in [0, eps_max].  The range cap matches the perturbations the
  // difference estimators are meant to absorb; larger offsets change the
  // state enough that a companion dataset stops being a useful prior.
  static IsingSpec perturbed(int n, double eps_max, std::uint64_t seed) {
    if (!(eps_max >= 0.0 && eps_max <= 0.02))
      throw std::invalid_argument("companion perturbation strength must lie in [0, 0.02]");
    IsingSpec spec{n, std::vector<double>(static_cast<std::size_t>(n), 0.0)};
    for (int i = 0; i < n; ++i)
      spec.eps[static_cast<std::size_t>(i)] =
          eps_max * to_unit_double(derive_stream(seed, kStreamSiteField, static_cast<std::uint64_t>(i)));
    return spec;
  }
};

namespace detail {

inline void check_ising_spec(const IsingSpec& spec) {
  if (spec.n < 1) throw std::invalid_argument("chain length must be at least 1");
  if (!spec.eps.empty() && spec.eps.size() != static_cast<std::size_t>(spec.n))
    throw std::invalid_argument("per-site field list must match the chain length");
  for (double e : spec.eps)
    if (!std::isfinite(e)) throw std::invalid_argument("per-site field must be finite");
}

// Diagonal of H in the computational basis: the ZZ couplings plus the
// perturbing fields.  The X terms are the uniform off-diagonal -1 entries
// between bit-flip neighbors and are applied separately.
inline Eigen::VectorXd ising_diagonal(const IsingSpec& spec) {
  check_ising_spec(spec);
  const int n = spec.n;
  const long dim = 1L << n;
  Eigen::VectorXd diag(dim);
  for (long s = 0; s < dim; ++s) {
    double d = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
      const double zi = (s >> bitpos(n, i)) & 1 ? -1.0 : 1.0;
      const double zj = (s >> bitpos(n, i + 1)) & 1 ? -1.0 : 1.0;
      d -= zi * zj;
    }
    if (!spec.eps.empty()) {
      for (int i = 0; i < n; ++i) {
        const double zi = (s >> bitpos(n, i)) & 1 ? -1.0 : 1.0;
        d += spec.eps[static_cast<std::size_t>(i)] * zi;
      }
    }
    diag[s] = d;
  }
  return diag;
}

inline Eigen::VectorXd ising_matvec(const Eigen::VectorXd& diag, int n,
                                    const Eigen::VectorXd& v) {
  Eigen::VectorXd out = diag.cwiseProduct(v);
  const long dim = v.size();
  for (int q = 0; q < n; ++q) {
    const long mask = 1L << bitpos(n, q);
    for (long s = 0; s < dim; ++s) out[s] -= v[s ^ mask];
  }
  return out;
}

struct GroundPair {
  double energy = 0.0;
  Eigen::VectorXd vector;
};

// Smallest eigenpair by dense diagonalization; fine up to ~10 qubits.
inline GroundPair ground_dense(const Eigen::VectorXd& diag, int n) {
  const long dim = diag.size();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
  h.diagonal() = diag;
  for (int q = 0; q < n; ++q) {
    const long mask = 1L << bitpos(n, q);
    for (long s = 0; s < dim; ++s) h(s ^ mask, s) -= 1.0;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
  return GroundPair{es.eigenvalues()[0], es.eigenvectors().col(0)};
}

// Smallest eigenpair by restarted Lanczos with full reorthogonalization.
// The all-ones start vector overlaps the ground state, whose amplitudes are
// strictly positive in this basis (the off-diagonal entries of -H are
// nonnegative, so Perron-Frobenius applies to the shifted operator).
inline GroundPair ground_lanczos(const Eigen::VectorXd& diag, int n) {
  const long dim = diag.size();
  const int max_steps = static_cast<int>(std::min<long>(110, dim - 1));

  Eigen::VectorXd x = Eigen::VectorXd::Ones(dim).normalized();
  double theta = 0.0;

  for (int restart = 0; restart < 6; ++restart) {
    Eigen::MatrixXd basis(dim, max_steps + 1);
    basis.col(0) = x;
    std::vector<double> alpha, beta;
    int m = 0;
    for (int k = 0; k < max_steps; ++k) {
      Eigen::VectorXd w = ising_matvec(diag, n, basis.col(k));
      alpha.push_back(basis.col(k).dot(w));
      w -= alpha.back() * basis.col(k);
      if (k > 0) w -= beta.back() * basis.col(k - 1);
      // Full reorthogonalization keeps the basis clean over many steps.
      auto seen = basis.leftCols(k + 1);
      w.noalias() -= seen * (seen.transpose() * w);
      m = k + 1;
      const double nb = w.norm();
      if (nb < 1e-12) break;  // invariant subspace reached
      beta.push_back(nb);
      basis.col(k + 1) = w / nb;
    }

    Eigen::MatrixXd tri = Eigen::MatrixXd::Zero(m, m);
    for (int i = 0; i < m; ++i) tri(i, i) = alpha[static_cast<std::size_t>(i)];
    for (int i = 0; i + 1 < m; ++i) {
      tri(i, i + 1) = beta[static_cast<std::size_t>(i)];
      tri(i + 1, i) = beta[static_cast<std::size_t>(i)];
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(tri);
    theta = es.eigenvalues()[0];
    x = (basis.leftCols(m) * es.eigenvectors().col(0)).normalized();

    const double residual = (ising_matvec(diag, n, x) - theta * x).norm();
    if (residual < 1e-9) break;
  }
  return GroundPair{theta, x};
}

inline GroundPair ising_ground_pair(const IsingSpec& spec) {
  if (spec.n > kMaxQubits) throw resource_error("Ising ground state beyond 16 qubits");
  const Eigen::VectorXd diag = ising_diagonal(spec);
  GroundPair gp = spec.n <= 10 ? ground_dense(diag, spec.n) : ground_lanczos(diag, spec.n);
  // Fix the overall sign so equal specs give bitwise-equal vectors; the
  // ground state has a definite sign pattern, so the sum is bounded away
  // from zero.
  if (gp.vector.sum() < 0) gp.vector = -gp.vector;
  return gp;
}

}  // namespace detail

inline Vector ising_ground_state(const IsingSpec& spec) {
  return detail::ising_ground_pair(spec).vector.cast<Complex>();
}

inline double ising_ground_energy(const IsingSpec& spec) {
  return detail::ising_ground_pair(spec).energy;
}

// ---------------------------------------------------------------------------
// Bond truncation
// ---------------------------------------------------------------------------

// Sequential left-to-right Schmidt truncation: at every bond the state is
// reshaped into a (left x right) matrix, the chi largest singular values are
// kept, and the sweep moves on.  A single pass, no re-optimization; the
// result is exactly representable as a matrix product state of bond
// dimension chi and the map is idempotent at fixed chi.  The final state is
// renormalized.
inline Vector bond_truncate(const Vector& psi, long chi) {
  if (chi < 1) throw std::invalid_argument("bond dimension must be at least 1");
  const int n = qubits_for_dim(psi.size());
  if (psi.norm() < 1e-12) throw std::invalid_argument("cannot truncate the zero vector");

  Vector cur = psi;
  for (int b = 1; b < n; ++b) {
    const long left = 1L << b;
    const long right = cur.size() / left;
    if (std::min(left, right) <= chi) continue;  // bond rank already within cap

    Matrix a(left, right);
    for (long i = 0; i < left; ++i)
      for (long j = 0; j < right; ++j) a(i, j) = cur[i * right + j];

    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const long rank = std::min<long>(chi, svd.singularValues().size());
    const Matrix approx = svd.matrixU().leftCols(rank) *
                          svd.singularValues().head(rank).asDiagonal() *
                          svd.matrixV().leftCols(rank).adjoint();
    for (long i = 0; i < left; ++i)
      for (long j = 0; j < right; ++j) cur[i * right + j] = approx(i, j);
  }
  cur /= cur.norm();
  return cur;
}

// ---------------------------------------------------------------------------
// Haar-random gates and random circuits
// ---------------------------------------------------------------------------

namespace detail {

// Standard normal via Box-Muller on counter-addressed uniforms; the floor on
// u1 keeps the log finite without disturbing the distribution measurably.
inline double gaussian(SplitMix& gen) {
  const double u1 = std::max(to_unit_double(gen()), 1e-300);
  const double u2 = to_unit_double(gen());
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace detail

// Haar-distributed unitary: QR of a complex Gaussian matrix with the phases
// of R's diagonal folded into Q, which makes the factorization unique and
// the distribution exactly invariant.
inline Matrix haar_unitary(long dim, SplitMix& gen) {
  if (dim < 2) throw std::invalid_argument("unitary dimension must be at least 2");
  Matrix g(dim, dim);
  for (long i = 0; i < dim; ++i)
    for (long j = 0; j < dim; ++j)
      g(i, j) = Complex(detail::gaussian(gen), detail::gaussian(gen)) / std::numbers::sqrt2;
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(dim, dim);
  for (long j = 0; j < dim; ++j) {
    const Complex r = qr.matrixQR()(j, j);
    if (std::abs(r) > 0) q.col(j) *= r / std::abs(r);
  }
  return q;
}

struct CircuitSpec {
  int n = 0;
  int depth = 0;
  double p = 0.0;  // per-qubit depolarization strength after each gate
  std::uint64_t seed = 0;
};

namespace detail {

inline void check_circuit_spec(const CircuitSpec& spec) {
  if (spec.n < 1) throw std::invalid_argument("circuit needs at least 1 qubit");
  if (spec.depth < 1) throw std::invalid_argument("circuit depth must be at least 1");
  if (!(spec.p >= 0.0 && spec.p <= 1.0))
    throw std::invalid_argument("depolarization strength must lie in [0, 1]");
}

// Gate for (layer, position), drawn from its own substream so the density
// and statevector paths see identical circuits.
inline Matrix circuit_gate(const CircuitSpec& spec, int layer, int pos, long dim) {
  SplitMix gen{derive_stream(spec.seed, kStreamGateDraw, static_cast<std::uint64_t>(layer),
                             static_cast<std::uint64_t>(pos))};
  return haar_unitary(dim, gen);
}

// Apply a 4x4 gate to adjacent qubits q, q+1 of a statevector.
inline void apply_two_qubit_vec(Vector& v, int n, int q, const Matrix& g) {
  const long hi = 1L << bitpos(n, q);
  const long lo = 1L << bitpos(n, q + 1);
  const long dim = v.size();
  for (long s = 0; s < dim; ++s) {
    if (s & (hi | lo)) continue;
    const long idx[4] = {s, s | lo, s | hi, s | hi | lo};
    Complex in[4];
    for (int k = 0; k < 4; ++k) in[k] = v[idx[k]];
    for (int r = 0; r < 4; ++r) {
      Complex acc = 0;
      for (int k = 0; k < 4; ++k) acc += g(r, k) * in[k];
      v[idx[r]] = acc;
    }
  }
}

// rho <- (G on qubits q, q+1) rho G^dag for a density matrix.
inline void apply_two_qubit_mat(Matrix& m, int n, int q, const Matrix& g) {
  const long hi = 1L << bitpos(n, q);
  const long lo = 1L << bitpos(n, q + 1);
  const long dim = m.rows();
  for (long c = 0; c < dim; ++c) {
    for (long s = 0; s < dim; ++s) {
      if (s & (hi | lo)) continue;
      const long idx[4] = {s, s | lo, s | hi, s | hi | lo};
      Complex in[4];
      for (int k = 0; k < 4; ++k) in[k] = m(idx[k], c);
      for (int r = 0; r < 4; ++r) {
        Complex acc = 0;
        for (int k = 0; k < 4; ++k) acc += g(r, k) * in[k];
        m(idx[r], c) = acc;
      }
    }
  }
  for (long r = 0; r < dim; ++r) {
    for (long s = 0; s < dim; ++s) {
      if (s & (hi | lo)) continue;
      const long idx[4] = {s, s | lo, s | hi, s | hi | lo};
      Complex in[4];
      for (int k = 0; k < 4; ++k) in[k] = m(r, idx[k]);
      for (int c2 = 0; c2 < 4; ++c2) {
        Complex acc = 0;
        for (int k = 0; k < 4; ++k) acc += in[k] * std::conj(g(c2, k));
        m(r, idx[c2]) = acc;
      }
    }
  }
}

// Single-qubit depolarization: rho -> (1-p) rho + p (I/2 tensor Tr_q rho),
// in place.  Off-diagonal blocks in the qubit's index just shrink by (1-p).
inline void depolarize_qubit(Matrix& m, int n, int q, double p) {
  if (p == 0.0) return;
  const long mask = 1L << bitpos(n, q);
  const long dim = m.rows();
  const long pos = bitpos(n, q);
  const long half = dim >> 1;
  auto expand = [pos, mask](long a) { return ((a >> pos) << (pos + 1)) | (a & (mask - 1)); };
  for (long a = 0; a < half; ++a) {
    const long ia0 = expand(a), ia1 = ia0 | mask;
    for (long b = 0; b < half; ++b) {
      const long ib0 = expand(b), ib1 = ib0 | mask;
      const Complex tr = m(ia0, ib0) + m(ia1, ib1);
      m(ia0, ib0) = (1.0 - p) * m(ia0, ib0) + 0.5 * p * tr;
      m(ia1, ib1) = (1.0 - p) * m(ia1, ib1) + 0.5 * p * tr;
      m(ia0, ib1) *= (1.0 - p);
      m(ia1, ib0) *= (1.0 - p);
    }
  }
}

// Layout shared by both circuit paths: odd layers are single-qubit gates on
// every site, even layers are two-qubit gates on neighboring pairs whose
// starting offset alternates between consecutive two-qubit layers.
inline int layer_offset(int layer) { return (layer / 2 + 1) % 2; }

}  // namespace detail

// Mixed-state simulation of the noisy circuit; capped by the density-matrix
// representation.
inline DensityState random_circuit_state(const CircuitSpec& spec) {
  detail::check_circuit_spec(spec);
  if (spec.n > 10) throw resource_error("density-matrix circuit simulation is limited to 10 qubits");
  const long dim = 1L << spec.n;
  Matrix rho = Matrix::Zero(dim, dim);
  rho(0, 0) = 1.0;

  for (int layer = 1; layer <= spec.depth; ++layer) {
    if (layer % 2 == 1) {
      for (int q = 0; q < spec.n; ++q) {
        const Gate g = detail::circuit_gate(spec, layer, q, 2);
        apply_gate_rows(rho, spec.n, q, g);
        apply_gate_cols_adj(rho, spec.n, q, g);
        detail::depolarize_qubit(rho, spec.n, q, spec.p);
      }
    } else {
      for (int q = detail::layer_offset(layer); q + 1 < spec.n; q += 2) {
        const Matrix g = detail::circuit_gate(spec, layer, q, 4);
        detail::apply_two_qubit_mat(rho, spec.n, q, g);
        detail::depolarize_qubit(rho, spec.n, q, spec.p);
        detail::depolarize_qubit(rho, spec.n, q + 1, spec.p);
      }
    }
  }
  rho = ((rho + rho.adjoint()) / 2.0).eval();
  return DensityState::trusted(std::move(rho));
}

// Pure-state simulation of the same circuit without noise; used to build
// truncated priors.  The gate draws are addressed by (layer, position), so
// this matches random_circuit_state with p = 0 exactly.
inline Vector random_circuit_vector(const CircuitSpec& spec) {
  detail::check_circuit_spec(spec);
  if (spec.p != 0.0)
    throw std::invalid_argument("statevector circuit path is noiseless; requires p = 0");
  if (spec.n > kMaxQubits) throw resource_error("statevector circuit beyond 16 qubits");
  const long dim = 1L << spec.n;
  Vector v = Vector::Zero(dim);
  v[0] = 1.0;

  for (int layer = 1; layer <= spec.depth; ++layer) {
    if (layer % 2 == 1) {
      for (int q = 0; q < spec.n; ++q)
        apply_gate_vec(v, spec.n, q, Gate(detail::circuit_gate(spec, layer, q, 2)));
    } else {
      for (int q = detail::layer_offset(layer); q + 1 < spec.n; q += 2)
        detail::apply_two_qubit_vec(v, spec.n, q, detail::circuit_gate(spec, layer, q, 4));
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Dense state files
// ---------------------------------------------------------------------------

// Binary layout: a little-endian u64 dimension header, then dim*dim complex
// entries in row-major order as interleaved f64 (re, im) pairs.
inline void save_state_file(const std::string& path, const Matrix& m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("state file payload must be square");
  (void)qubits_for_dim(m.rows());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw validation_error("cannot open state file for writing: " + path);
  const std::uint64_t dim = static_cast<std::uint64_t>(m.rows());
  out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  for (long i = 0; i < m.rows(); ++i) {
    for (long j = 0; j < m.cols(); ++j) {
      const double re = m(i, j).real(), im = m(i, j).imag();
      out.write(reinterpret_cast<const char*>(&re), sizeof(re));
      out.write(reinterpret_cast<const char*>(&im), sizeof(im));
    }
  }
  if (!out) throw validation_error("failed while writing state file: " + path);
}

inline Matrix load_state_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("cannot open state file: " + path);
  std::uint64_t dim = 0;
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  if (!in || dim < 2 || dim > (1ULL << kMaxDenseQubits) || (dim & (dim - 1)) != 0)
    throw validation_error("state file has an invalid dimension header: " + path);
  Matrix m(static_cast<long>(dim), static_cast<long>(dim));
  for (long i = 0; i < m.rows(); ++i) {
    for (long j = 0; j < m.cols(); ++j) {
      double re = 0, im = 0;
      in.read(reinterpret_cast<char*>(&re), sizeof(re));
      in.read(reinterpret_cast<char*>(&im), sizeof(im));
      if (!in) throw validation_error("state file truncated: " + path);
      m(i, j) = Complex(re, im);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// State descriptors
// ---------------------------------------------------------------------------

// Descriptor grammar, colon-separated:
//   ising:N=16
//   ising:N=12:eps=0.02:seed=7
//   circuit:N=8:d=4:p=0.001:seed=3
//   file:<path>
struct StateDescriptor {
  enum class Kind { ising, circuit, file };
  Kind kind = Kind::ising;
  IsingSpec ising;
  CircuitSpec circuit;
  std::string path;
  std::string text;  // the descriptor as given, kept verbatim for metadata
};

namespace detail {

inline long parse_long_field(const std::string& field, const std::string& text) {
  std::size_t used = 0;
  long value = 0;
  try {
    value = std::stol(text, &used);
  } catch (const std::exception&) {
    throw config_error(field + ": not an integer '" + text + "'");
  }
  if (used != text.size()) throw config_error(field + ": not an integer '" + text + "'");
  return value;
}

inline double parse_double_field(const std::string& field, const std::string& text) {
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    throw config_error(field + ": not a number '" + text + "'");
  }
  if (used != text.size() || !std::isfinite(value))
    throw config_error(field + ": not a number '" + text + "'");
  return value;
}

inline std::uint64_t parse_seed_field(const std::string& field, const std::string& text) {
  std::size_t used = 0;
  unsigned long long value = 0;
  try {
    value = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw config_error(field + ": not a seed value '" + text + "'");
  }
  if (used != text.size()) throw config_error(field + ": not a seed value '" + text + "'");
  return static_cast<std::uint64_t>(value);
}

inline std::vector<std::pair<std::string, std::string>> split_descriptor_fields(
    const std::string& field, std::string_view rest) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t start = 0;
  while (start <= rest.size()) {
    const std::size_t stop = std::min(rest.find(':', start), rest.size());
    const std::string_view token = rest.substr(start, stop - start);
    const std::size_t eq = token.find('=');
    if (token.empty() || eq == std::string_view::npos || eq == 0)
      throw config_error(field + ": malformed descriptor token '" + std::string(token) + "'");
    out.emplace_back(std::string(token.substr(0, eq)), std::string(token.substr(eq + 1)));
    start = stop + 1;
  }
  return out;
}

}  // namespace detail

inline StateDescriptor parse_state_descriptor(std::string_view text,
                                              const std::string& field = "state") {
  StateDescriptor d;
  d.text = std::string(text);
  const std::size_t colon = text.find(':');
  const std::string_view kind = text.substr(0, colon);

  if (kind == "file") {
    if (colon == std::string_view::npos || colon + 1 >= text.size())
      throw config_error(field + ": file descriptor needs a path");
    d.kind = StateDescriptor::Kind::file;
    d.path = std::string(text.substr(colon + 1));
    return d;
  }

  const std::string_view rest = colon == std::string_view::npos ? std::string_view{} : text.substr(colon + 1);
  if (kind == "ising") {
    d.kind = StateDescriptor::Kind::ising;
    long n = -1;
    double eps = 0.0;
    std::optional<std::uint64_t> seed;
    for (const auto& [key, value] : detail::split_descriptor_fields(field, rest)) {
      if (key == "N")
        n = detail::parse_long_field(field + ".N", value);
      else if (key == "eps")
        eps = detail::parse_double_field(field + ".eps", value);
      else if (key == "seed")
        seed = detail::parse_seed_field(field + ".seed", value);
      else
        throw config_error(field + ": unknown key '" + key + "' in ising descriptor");
    }
    if (n < 1) throw config_error(field + ".N: chain length missing or not positive");
    if (n > kMaxQubits) throw config_error(field + ".N: chain length beyond 16");
    if (eps < 0.0 || eps > 0.02)
      throw config_error(field + ".eps: perturbation strength must lie in [0, 0.02]");
    if (eps > 0.0 && !seed)
      throw config_error(field + ".seed: required when eps > 0");
    d.ising = eps > 0.0 ? IsingSpec::perturbed(static_cast<int>(n), eps, *seed)
                        : IsingSpec::plain(static_cast<int>(n));
    return d;
  }

  if (kind == "circuit") {
    d.kind = StateDescriptor::Kind::circuit;
    long n = -1, depth = -1;
    std::optional<double> p;
    std::optional<std::uint64_t> seed;
    for (const auto& [key, value] : detail::split_descriptor_fields(field, rest)) {
      if (key == "N")
        n = detail::parse_long_field(field + ".N", value);
      else if (key == "d")
        depth = detail::parse_long_field(field + ".d", value);
      else if (key == "p")
        p = detail::parse_double_field(field + ".p", value);
      else if (key == "seed")
        seed = detail::parse_seed_field(field + ".seed", value);
      else
        throw config_error(field + ": unknown key '" + key + "' in circuit descriptor");
    }
    if (n < 1) throw config_error(field + ".N: qubit count missing or not positive");
    if (depth < 1) throw config_error(field + ".d: depth missing or not positive");
    if (!p) throw config_error(field + ".p: depolarization strength missing");
    if (*p < 0.0 || *p > 1.0) throw config_error(field + ".p: must lie in [0, 1]");
    if (!seed) throw config_error(field + ".seed: required for circuit states");
    d.circuit = CircuitSpec{static_cast<int>(n), static_cast<int>(depth), *p, *seed};
    return d;
  }

  throw config_error(field + ": unknown state kind '" + std::string(kind) + "'");
}

inline DensityState make_state(const StateDescriptor& d) {
  switch (d.kind) {
    case StateDescriptor::Kind::ising:
      return DensityState::from_vector(ising_ground_state(d.ising));
    case StateDescriptor::Kind::circuit:
      return random_circuit_state(d.circuit);
    case StateDescriptor::Kind::file:
      return DensityState::from_matrix(load_state_file(d.path));
  }
  throw std::logic_error("unhandled state descriptor kind");
}

inline DensityState make_state(std::string_view text) {
  return make_state(parse_state_descriptor(text));
}

}  // namespace crm
