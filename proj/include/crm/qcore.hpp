#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crm/errors.hpp"

namespace crm {

using Complex = std::complex<double>;
using Matrix = Eigen::MatrixXcd;
using Vector = Eigen::VectorXcd;
using RealVector = Eigen::VectorXd;
using Gate = Eigen::Matrix2cd;

// Hard size caps. Pure states are stored as length-2^N vectors, everything
// dense (density matrices, snapshots, reduced states) as 2^k x 2^k with
// k <= kMaxDenseQubits.
inline constexpr int kMaxQubits = 16;
inline constexpr int kMaxDenseQubits = 12;

// Qubit 0 is the leftmost position in bitstrings and the most significant
// bit of a basis index, so |q0 q1 ... q_{n-1}> has index sum q_i 2^{n-1-i}.
inline int bitpos(int n, int qubit) { return n - 1 - qubit; }

inline int bit_of(std::uint64_t index, int n, int qubit) {
  return static_cast<int>((index >> bitpos(n, qubit)) & 1u);
}

// Compress the bits of `index` at the (sorted) qubit subset into a local
// index with the same qubit ordering.
inline std::uint64_t gather_bits(std::uint64_t index, int n, std::span<const int> qubits) {
  std::uint64_t out = 0;
  const int k = static_cast<int>(qubits.size());
  for (int j = 0; j < k; ++j)
    out |= static_cast<std::uint64_t>(bit_of(index, n, qubits[j])) << (k - 1 - j);
  return out;
}

inline void check_support(int n, std::span<const int> qubits, bool allow_empty = false) {
  if (qubits.empty() && !allow_empty) throw std::invalid_argument("support set is empty");
  for (std::size_t j = 0; j < qubits.size(); ++j) {
    if (qubits[j] < 0 || qubits[j] >= n) throw std::invalid_argument("support qubit out of range");
    if (j > 0 && qubits[j] <= qubits[j - 1])
      throw std::invalid_argument("support must be sorted and duplicate-free");
  }
}

inline std::vector<int> complement_support(int n, std::span<const int> qubits) {
  std::vector<int> rest;
  std::size_t j = 0;
  for (int q = 0; q < n; ++q) {
    if (j < qubits.size() && qubits[j] == q) {
      ++j;
    } else {
      rest.push_back(q);
    }
  }
  return rest;
}

inline std::string bits_to_string(std::uint64_t index, int n) {
  std::string s(static_cast<std::size_t>(n), '0');
  for (int q = 0; q < n; ++q)
    if (bit_of(index, n, q)) s[static_cast<std::size_t>(q)] = '1';
  return s;
}

inline std::uint64_t bits_from_string(std::string_view s) {
  std::uint64_t index = 0;
  for (char c : s) {
    if (c != '0' && c != '1') throw std::invalid_argument("bitstring must be over {0,1}");
    index = (index << 1) | static_cast<std::uint64_t>(c == '1');
  }
  return index;
}

inline bool is_power_of_two(long d) { return d > 0 && (d & (d - 1)) == 0; }

inline int qubits_for_dim(long d) {
  if (!is_power_of_two(d)) throw std::invalid_argument("dimension must be a power of two");
  int n = 0;
  while ((1L << n) < d) ++n;
  return n;
}

inline bool is_hermitian(const Matrix& m, double tol = 1e-10) {
  return (m - m.adjoint()).cwiseAbs().maxCoeff() <= tol;
}

// ---------------------------------------------------------------------------
// Pauli strings

enum class Pauli : char { I = 'I', X = 'X', Y = 'Y', Z = 'Z' };

// Measurement basis label per qubit; the rotation U_i satisfies
// U_i^dag Z U_i = Z, X, Y respectively.
enum class Basis : char { Z = 'Z', X = 'X', Y = 'Y' };

inline const Gate& gate_identity() {
  static const Gate g = Gate::Identity();
  return g;
}
inline const Gate& gate_hadamard() {
  static const Gate g = (Gate() << 1, 1, 1, -1).finished() / std::sqrt(2.0);
  return g;
}
inline const Gate& gate_y_rotator() {
  static const Gate g =
      (Gate() << Complex(1, 0), Complex(0, -1), Complex(1, 0), Complex(0, 1)).finished() /
      std::sqrt(2.0);
  return g;
}

inline const Gate& basis_gate(Basis b) {
  switch (b) {
    case Basis::Z: return gate_identity();
    case Basis::X: return gate_hadamard();
    default: return gate_y_rotator();
  }
}

inline Matrix pauli_matrix_1q(Pauli p) {
  Matrix m(2, 2);
  switch (p) {
    case Pauli::I: m << 1, 0, 0, 1; break;
    case Pauli::X: m << 0, 1, 1, 0; break;
    case Pauli::Y: m << 0, Complex(0, -1), Complex(0, 1), 0; break;
    case Pauli::Z: m << 1, 0, 0, -1; break;
  }
  return m;
}

class PauliString {
 public:
  PauliString() = default;

  explicit PauliString(std::string_view s) {
    letters_.reserve(s.size());
    for (char c : s) {
      switch (c) {
        case 'I': letters_.push_back(Pauli::I); break;
        case 'X': letters_.push_back(Pauli::X); break;
        case 'Y': letters_.push_back(Pauli::Y); break;
        case 'Z': letters_.push_back(Pauli::Z); break;
        default: throw std::invalid_argument("Pauli string must be over {I,X,Y,Z}");
      }
    }
  }

  static PauliString identity(int n) { return PauliString(std::string(static_cast<std::size_t>(n), 'I')); }

  int size() const { return static_cast<int>(letters_.size()); }
  Pauli letter(int q) const { return letters_.at(static_cast<std::size_t>(q)); }

  std::vector<int> support() const {
    std::vector<int> sup;
    for (int q = 0; q < size(); ++q)
      if (letters_[static_cast<std::size_t>(q)] != Pauli::I) sup.push_back(q);
    return sup;
  }

  // Dense matrix of the letters at the given qubits (identity letters allowed).
  Matrix matrix_on(std::span<const int> qubits) const {
    if (qubits.size() > static_cast<std::size_t>(kMaxDenseQubits))
      throw resource_error("Pauli matrix on more than 12 qubits");
    Matrix m = Matrix::Identity(1, 1);
    for (int q : qubits) {
      Matrix next(m.rows() * 2, m.cols() * 2);
      const Matrix p = pauli_matrix_1q(letter(q));
      for (long i = 0; i < m.rows(); ++i)
        for (long j = 0; j < m.cols(); ++j) next.block(2 * i, 2 * j, 2, 2) = m(i, j) * p;
      m.swap(next);
    }
    return m;
  }

  // Basis label that rotates this letter onto Z; only defined off identity.
  static Basis basis_for(Pauli p) {
    switch (p) {
      case Pauli::X: return Basis::X;
      case Pauli::Y: return Basis::Y;
      case Pauli::Z: return Basis::Z;
      default: throw std::invalid_argument("identity letter has no measurement basis");
    }
  }

  std::string str() const {
    std::string s;
    s.reserve(letters_.size());
    for (Pauli p : letters_) s.push_back(static_cast<char>(p));
    return s;
  }

  bool operator==(const PauliString& other) const = default;

 private:
  std::vector<Pauli> letters_;
};

// ---------------------------------------------------------------------------
// Single-qubit gate application on vectors and dense matrices

inline void apply_gate_vec(Vector& v, int n, int qubit, const Gate& g) {
  const long stride = 1L << bitpos(n, qubit);
  const long dim = v.size();
  for (long base = 0; base < dim; base += 2 * stride) {
    for (long off = 0; off < stride; ++off) {
      const long i = base + off;
      const long j = i + stride;
      const Complex a = v[i], b = v[j];
      v[i] = g(0, 0) * a + g(0, 1) * b;
      v[j] = g(1, 0) * a + g(1, 1) * b;
    }
  }
}

// M <- (G on qubit) * M. Walks column by column so the strided row pairs
// stay within one contiguous column of the storage.
inline void apply_gate_rows(Matrix& m, int n, int qubit, const Gate& g) {
  const long stride = 1L << bitpos(n, qubit);
  const long dim = m.rows();
  const Complex g00 = g(0, 0), g01 = g(0, 1), g10 = g(1, 0), g11 = g(1, 1);
  for (long c = 0; c < m.cols(); ++c) {
    Complex* col = m.data() + c * dim;
    for (long base = 0; base < dim; base += 2 * stride) {
      for (long off = 0; off < stride; ++off) {
        const long i = base + off;
        const long j = i + stride;
        const Complex a = col[i], b = col[j];
        col[i] = g00 * a + g01 * b;
        col[j] = g10 * a + g11 * b;
      }
    }
  }
}

// M <- M * (G on qubit)^dag
inline void apply_gate_cols_adj(Matrix& m, int n, int qubit, const Gate& g) {
  const long stride = 1L << bitpos(n, qubit);
  const long dim = m.cols();
  Vector tmp;
  for (long base = 0; base < dim; base += 2 * stride) {
    for (long off = 0; off < stride; ++off) {
      const long i = base + off;
      const long j = i + stride;
      tmp = m.col(i);
      m.col(i) = std::conj(g(0, 0)) * tmp + std::conj(g(0, 1)) * m.col(j);
      m.col(j) = std::conj(g(1, 0)) * tmp + std::conj(g(1, 1)) * m.col(j);
    }
  }
}

// M <- U M U^dag with U the product of the per-qubit gates.
inline void conjugate_by_gates(Matrix& m, std::span<const Gate> gates) {
  const int n = qubits_for_dim(m.rows());
  if (static_cast<int>(gates.size()) != n) throw std::invalid_argument("one gate per qubit required");
  for (int q = 0; q < n; ++q) apply_gate_rows(m, n, q, gates[static_cast<std::size_t>(q)]);
  for (int q = 0; q < n; ++q) apply_gate_cols_adj(m, n, q, gates[static_cast<std::size_t>(q)]);
}

inline std::vector<Gate> setting_gates(std::span<const Basis> bases, bool adjoint = false) {
  std::vector<Gate> gates;
  gates.reserve(bases.size());
  for (Basis b : bases) {
    const Gate& g = basis_gate(b);
    gates.push_back(adjoint ? Gate(g.adjoint()) : g);
  }
  return gates;
}

// ---------------------------------------------------------------------------
// States

class DensityState {
 public:
  static DensityState from_vector(Vector psi) {
    const int n = qubits_for_dim(psi.size());
    if (n > kMaxQubits) throw resource_error("statevector beyond 16 qubits");
    if (std::abs(psi.norm() - 1.0) > 1e-10) throw validation_error("statevector is not normalized");
    DensityState st;
    st.n_ = n;
    st.pure_ = std::move(psi);
    return st;
  }

  static DensityState from_matrix(Matrix rho, bool check_spectrum = true) {
    if (rho.rows() != rho.cols()) throw std::invalid_argument("density matrix must be square");
    const int n = qubits_for_dim(rho.rows());
    if (n > kMaxDenseQubits) throw resource_error("dense density matrix beyond 12 qubits");
    if (!is_hermitian(rho)) throw validation_error("density matrix is not hermitian");
    if (std::abs(rho.trace().real() - 1.0) > 1e-10 || std::abs(rho.trace().imag()) > 1e-10)
      throw validation_error("density matrix trace differs from 1");
    if (check_spectrum) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(rho, Eigen::EigenvaluesOnly);
      if (es.eigenvalues().minCoeff() < -1e-8)
        throw validation_error("density matrix has a negative eigenvalue");
    }
    DensityState st;
    st.n_ = n;
    st.mixed_ = std::move(rho);
    return st;
  }

  // Skips the spectrum check; for callers that already know the state is valid.
  static DensityState trusted(Matrix rho) { return from_matrix(std::move(rho), false); }

  int qubits() const { return n_; }
  long dim() const { return 1L << n_; }
  bool pure() const { return pure_.size() > 0; }

  const Vector& vector() const {
    if (!pure()) throw std::invalid_argument("state is not stored as a vector");
    return pure_;
  }

  Matrix matrix() const {
    if (!pure()) return mixed_;
    if (n_ > kMaxDenseQubits) throw resource_error("dense promotion beyond 12 qubits");
    return pure_ * pure_.adjoint();
  }

 private:
  int n_ = 0;
  Vector pure_;
  Matrix mixed_;
};

// Hermitian operator on a declared qubit subset; trace and positivity are
// deliberately unconstrained (priors may be any hermitian matrix).
struct PseudoState {
  std::vector<int> support;
  Matrix matrix;

  PseudoState(std::vector<int> sup, Matrix m) : support(std::move(sup)), matrix(std::move(m)) {
    if (matrix.rows() != matrix.cols()) throw std::invalid_argument("pseudo-state matrix must be square");
    const int k = qubits_for_dim(matrix.rows());
    if (k != static_cast<int>(support.size()))
      throw std::invalid_argument("pseudo-state dimension does not match its support");
    if (k > kMaxDenseQubits) throw resource_error("pseudo-state beyond 12 qubits");
    for (std::size_t j = 1; j < support.size(); ++j)
      if (support[j] <= support[j - 1])
        throw std::invalid_argument("pseudo-state support must be sorted and duplicate-free");
    if (!is_hermitian(matrix)) throw validation_error("pseudo-state matrix is not hermitian");
  }

  static PseudoState zero(std::vector<int> sup) {
    const long d = 1L << sup.size();
    return PseudoState(std::move(sup), Matrix::Zero(d, d));
  }

  int qubits() const { return static_cast<int>(support.size()); }
};

// ---------------------------------------------------------------------------
// Core operations

// U rho U^dag as a dense matrix, with U the tensor product of per-qubit
// basis rotations.
inline Matrix rotate_state(const Matrix& rho, std::span<const Basis> bases) {
  const int n = qubits_for_dim(rho.rows());
  if (static_cast<int>(bases.size()) != n) throw std::invalid_argument("one basis label per qubit required");
  if (n > kMaxDenseQubits) throw resource_error("dense rotation beyond 12 qubits");
  Matrix out = rho;
  const auto gates = setting_gates(bases);
  conjugate_by_gates(out, gates);
  return out;
}

inline Matrix rotate_state(const DensityState& st, std::span<const Basis> bases) {
  if (st.pure()) {
    Vector v = st.vector();
    const int n = st.qubits();
    if (n > kMaxDenseQubits) throw resource_error("dense rotation beyond 12 qubits");
    for (int q = 0; q < n; ++q) apply_gate_vec(v, n, q, basis_gate(bases[static_cast<std::size_t>(q)]));
    return v * v.adjoint();
  }
  return rotate_state(st.matrix(), bases);
}

inline Matrix partial_trace(const Matrix& rho, int n, std::span<const int> keep) {
  check_support(n, keep);
  if (rho.rows() != (1L << n)) throw std::invalid_argument("matrix dimension does not match qubit count");
  const int ka = static_cast<int>(keep.size());
  if (ka > kMaxDenseQubits) throw resource_error("reduced matrix beyond 12 qubits");
  const auto rest = complement_support(n, keep);
  const int kb = static_cast<int>(rest.size());
  const long da = 1L << ka, db = 1L << kb;

  // Scatter tables: local indices back to positions in the full register.
  std::vector<std::uint64_t> offa(static_cast<std::size_t>(da), 0), offb(static_cast<std::size_t>(db), 0);
  for (long i = 0; i < da; ++i)
    for (int j = 0; j < ka; ++j)
      if ((i >> (ka - 1 - j)) & 1) offa[static_cast<std::size_t>(i)] |= 1ULL << bitpos(n, keep[static_cast<std::size_t>(j)]);
  for (long b = 0; b < db; ++b)
    for (int j = 0; j < kb; ++j)
      if ((b >> (kb - 1 - j)) & 1) offb[static_cast<std::size_t>(b)] |= 1ULL << bitpos(n, rest[static_cast<std::size_t>(j)]);

  Matrix out = Matrix::Zero(da, da);
  for (long i = 0; i < da; ++i)
    for (long j = 0; j < da; ++j) {
      Complex acc = 0;
      for (long b = 0; b < db; ++b)
        acc += rho(static_cast<long>(offa[static_cast<std::size_t>(i)] | offb[static_cast<std::size_t>(b)]),
                   static_cast<long>(offa[static_cast<std::size_t>(j)] | offb[static_cast<std::size_t>(b)]));
      out(i, j) = acc;
    }
  return out;
}

inline Matrix partial_trace(const Vector& psi, int n, std::span<const int> keep) {
  check_support(n, keep);
  if (psi.size() != (1L << n)) throw std::invalid_argument("vector dimension does not match qubit count");
  const int ka = static_cast<int>(keep.size());
  if (ka > kMaxDenseQubits) throw resource_error("reduced matrix beyond 12 qubits");
  const auto rest = complement_support(n, keep);
  const long da = 1L << ka, db = 1L << rest.size();
  Matrix m(da, db);
  for (long s = 0; s < psi.size(); ++s) {
    const auto u = static_cast<std::uint64_t>(s);
    m(static_cast<long>(gather_bits(u, n, keep)), static_cast<long>(gather_bits(u, n, rest))) = psi[s];
  }
  return m * m.adjoint();
}

inline Matrix partial_trace(const DensityState& st, std::span<const int> keep) {
  if (st.pure()) return partial_trace(st.vector(), st.qubits(), keep);
  return partial_trace(st.matrix(), st.qubits(), keep);
}

inline double pauli_expectation(const Vector& psi, int n, const PauliString& gamma) {
  if (gamma.size() != n) throw std::invalid_argument("Pauli string length does not match qubit count");
  std::uint64_t flip = 0;
  std::uint64_t zmask = 0, ymask = 0;
  int y_count = 0;
  for (int q = 0; q < n; ++q) {
    switch (gamma.letter(q)) {
      case Pauli::I: break;
      case Pauli::X: flip |= 1ULL << bitpos(n, q); break;
      case Pauli::Y:
        flip |= 1ULL << bitpos(n, q);
        ymask |= 1ULL << bitpos(n, q);
        ++y_count;
        break;
      case Pauli::Z: zmask |= 1ULL << bitpos(n, q); break;
    }
  }
  // <s^flip|gamma|s> = i^{#Y} * (-1)^{|s & (zmask|ymask)|}
  static const Complex ipow[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  const Complex iphase = ipow[y_count & 3];
  Complex acc = 0;
  const std::uint64_t signmask = zmask | ymask;
  for (long s = 0; s < psi.size(); ++s) {
    const auto u = static_cast<std::uint64_t>(s);
    const int par = std::popcount(u & signmask) & 1;
    acc += std::conj(psi[static_cast<long>(u ^ flip)]) * (par ? -1.0 : 1.0) * psi[s];
  }
  acc *= iphase;
  return acc.real();
}

inline double pauli_expectation(const Matrix& rho, int n, const PauliString& gamma) {
  if (gamma.size() != n) throw std::invalid_argument("Pauli string length does not match qubit count");
  const auto sup = gamma.support();
  if (sup.empty()) return rho.trace().real();
  const Matrix red = partial_trace(rho, n, sup);
  // Letters of gamma at its support, relabelled onto the reduced register.
  std::string letters;
  for (int q : sup) letters.push_back(static_cast<char>(gamma.letter(q)));
  const PauliString gl(letters);
  std::vector<int> all(sup.size());
  for (std::size_t j = 0; j < sup.size(); ++j) all[j] = static_cast<int>(j);
  const Matrix gm = gl.matrix_on(all);
  return (red.transpose().cwiseProduct(gm)).sum().real();
}

inline double pauli_expectation(const DensityState& st, const PauliString& gamma) {
  if (st.pure()) return pauli_expectation(st.vector(), st.qubits(), gamma);
  return pauli_expectation(st.matrix(), st.qubits(), gamma);
}

// Von Neumann entropy (natural log) of a density matrix.
inline double exact_entropy(const Matrix& rho) {
  if (!is_hermitian(rho)) throw validation_error("entropy input is not hermitian");
  Eigen::SelfAdjointEigenSolver<Matrix> es(rho, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  if (ev.minCoeff() < -1e-8) throw validation_error("entropy input has a negative eigenvalue");
  double s = 0;
  for (long i = 0; i < ev.size(); ++i) {
    const double lam = std::min(std::max(ev[i], 0.0), 1.0);
    if (lam > 0) s -= lam * std::log(lam);
  }
  return std::max(s, 0.0);
}

// Tr(rho^n) via the eigenvalue decomposition.
inline double exact_trace_moment(const Matrix& rho, int n) {
  if (n < 1) throw std::invalid_argument("moment order must be >= 1");
  if (!is_hermitian(rho)) throw validation_error("moment input is not hermitian");
  Eigen::SelfAdjointEigenSolver<Matrix> es(rho, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  if (ev.minCoeff() < -1e-8) throw validation_error("moment input has a negative eigenvalue");
  double p = 0;
  for (long i = 0; i < ev.size(); ++i) p += std::pow(ev[i], n);
  return p;
}

}  // namespace crm
