#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crm/measurement.hpp"
#include "crm/qcore.hpp"

namespace crm {

inline Complex trace_product(const Matrix& a, const Matrix& b) {
  return (a.transpose().cwiseProduct(b)).sum();
}

enum class SnapshotKind { standard, prior, crm, companion };

// Single-record shadow reconstruction on a declared qubit subset.
struct Snapshot {
  std::vector<int> support;
  Matrix matrix;
  SnapshotKind kind = SnapshotKind::standard;
  std::uint64_t setting_hash = 0;  // hash of the setting restricted to support
};

// Mean of a disjoint group of snapshots, used as one independent sample in
// multi-copy estimators.
struct BatchShadow {
  std::vector<int> support;
  Matrix matrix;
  int index = 0;  // t in 1..m
  std::uint64_t settings_hash = 0;  // order-sensitive hash over member settings
  long members = 0;
  SnapshotKind kind = SnapshotKind::standard;
};

// Applies O -> 3O - Tr(O) * identity independently to every qubit tensor
// index, extended by linearity. Trace- and hermiticity-preserving.
inline Matrix inverse_channel_apply(Matrix m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("matrix must be square");
  const int k = qubits_for_dim(m.rows());
  const long dim = m.rows();
  for (int q = 0; q < k; ++q) {
    const long stride = 1L << bitpos(k, q);
    for (long rb = 0; rb < dim; rb += 2 * stride)
      for (long ro = 0; ro < stride; ++ro) {
        const long r0 = rb + ro, r1 = r0 + stride;
        for (long cb = 0; cb < dim; cb += 2 * stride)
          for (long co = 0; co < stride; ++co) {
            const long c0 = cb + co, c1 = c0 + stride;
            const Complex a = m(r0, c0), b = m(r0, c1);
            const Complex c = m(r1, c0), d = m(r1, c1);
            m(r0, c0) = 2.0 * a - d;
            m(r1, c1) = 2.0 * d - a;
            m(r0, c1) = 3.0 * b;
            m(r1, c0) = 3.0 * c;
          }
      }
  }
  return m;
}

// Core reconstruction: outcome weights in the rotated basis -> diagonal
// operator -> undo the rotation -> inverse channel. Both empirical and exact
// weights flow through this one path, so equal inputs give bitwise equal
// snapshots.
inline Snapshot snapshot_from_outcomes(const SupportOutcomes& oc, SnapshotKind kind) {
  const int k = static_cast<int>(oc.support.size());
  if (k > kMaxDenseQubits) throw resource_error("snapshot support exceeds the dense-matrix cap");
  if (oc.weights.size() != (1L << k))
    throw std::invalid_argument("outcome weight vector does not match support size");
  Matrix m = Matrix::Zero(1L << k, 1L << k);
  m.diagonal() = oc.weights.cast<Complex>();
  const auto adj = setting_gates(oc.setting.bases, true);
  conjugate_by_gates(m, adj);
  Snapshot snap;
  snap.support = oc.support;
  snap.matrix = inverse_channel_apply(std::move(m));
  snap.kind = kind;
  snap.setting_hash = setting_hash(oc.setting);
  return snap;
}

inline Snapshot build_rho_snapshot(const MeasurementRecord& rec, std::span<const int> qubits) {
  if (static_cast<int>(qubits.size()) > kMaxDenseQubits)
    throw resource_error("snapshot support exceeds the dense-matrix cap");
  return snapshot_from_outcomes(marginal_outcomes(rec, qubits), SnapshotKind::standard);
}

// Infinite-shot limit: exact Born weights instead of empirical frequencies.
inline Snapshot build_rho_snapshot(const DensityState& st, const MeasurementSetting& setting,
                                   std::span<const int> qubits) {
  if (static_cast<int>(qubits.size()) > kMaxDenseQubits)
    throw resource_error("snapshot support exceeds the dense-matrix cap");
  return snapshot_from_outcomes(exact_outcomes(st, setting, qubits), SnapshotKind::standard);
}

// Prior-side snapshot: exact outcome weights of the pseudo-state under the
// same setting, dephased in the rotated basis and pulled back through the
// inverse channel. Trace equals Tr(sigma).
inline Snapshot build_sigma_snapshot(const PseudoState& sigma, const MeasurementSetting& setting) {
  return snapshot_from_outcomes(exact_outcomes(sigma.matrix, setting, sigma.support),
                                SnapshotKind::prior);
}

// Control-variate snapshot: rho-hat - sigma-hat + sigma, all three on the
// same support with the sigma part sharing the record's setting.
inline Snapshot build_crm_snapshot(const SupportOutcomes& oc, const PseudoState& sigma) {
  if (oc.support != sigma.support)
    throw std::invalid_argument("pseudo-state support does not match outcome support");
  Snapshot rho = snapshot_from_outcomes(oc, SnapshotKind::standard);
  Snapshot sig = build_sigma_snapshot(sigma, oc.setting);
  Snapshot out;
  out.support = oc.support;
  out.matrix = rho.matrix - sig.matrix + sigma.matrix;
  out.kind = SnapshotKind::crm;
  out.setting_hash = rho.setting_hash;
  return out;
}

// Same combination from parts already in hand, for callers that reuse one
// standard snapshot across several priors.
inline Snapshot build_crm_snapshot(const Snapshot& rho, const Snapshot& sig,
                                   const PseudoState& sigma) {
  if (rho.kind != SnapshotKind::standard || sig.kind != SnapshotKind::prior)
    throw std::invalid_argument("combination needs a standard and a prior snapshot");
  if (rho.support != sig.support || rho.support != sigma.support)
    throw std::invalid_argument("snapshot supports do not match");
  if (rho.setting_hash != sig.setting_hash)
    throw protocol_error("rho and sigma snapshots were not built from the same setting");
  Snapshot out;
  out.support = rho.support;
  out.matrix = rho.matrix - sig.matrix + sigma.matrix;
  out.kind = SnapshotKind::crm;
  out.setting_hash = rho.setting_hash;
  return out;
}

inline Snapshot build_crm_snapshot(const MeasurementRecord& rec, const PseudoState& sigma,
                                   std::span<const int> qubits) {
  if (static_cast<int>(qubits.size()) > kMaxDenseQubits)
    throw resource_error("snapshot support exceeds the dense-matrix cap");
  return build_crm_snapshot(marginal_outcomes(rec, qubits), sigma);
}

inline Snapshot build_crm_snapshot(const DensityState& st, const MeasurementSetting& setting,
                                   const PseudoState& sigma) {
  return build_crm_snapshot(exact_outcomes(st, setting, sigma.support), sigma);
}

// ---------------------------------------------------------------------------
// Batching

inline std::vector<BatchShadow> make_batches(std::span<const Snapshot> snapshots, int m) {
  const long nu = static_cast<long>(snapshots.size());
  if (m < 1) throw std::invalid_argument("batch count must be >= 1");
  if (nu < 1) throw std::invalid_argument("no snapshots to batch");
  if (nu % m != 0) throw std::invalid_argument("batch count must divide the number of snapshots");
  const long per = nu / m;
  for (const auto& s : snapshots) {
    if (s.support != snapshots[0].support)
      throw std::invalid_argument("snapshots in a batch set must share a support");
    if (s.kind != snapshots[0].kind)
      throw std::invalid_argument("snapshots in a batch set must share a kind");
  }
  std::vector<BatchShadow> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int t = 0; t < m; ++t) {
    BatchShadow b;
    b.support = snapshots[0].support;
    b.index = t + 1;
    b.members = per;
    b.kind = snapshots[0].kind;
    b.matrix = Matrix::Zero(snapshots[0].matrix.rows(), snapshots[0].matrix.cols());
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (long j = t * per; j < (t + 1) * per; ++j) {
      b.matrix += snapshots[static_cast<std::size_t>(j)].matrix;
      h = mix64(h ^ snapshots[static_cast<std::size_t>(j)].setting_hash);
    }
    b.matrix /= static_cast<double>(per);
    b.settings_hash = h;
    out.push_back(std::move(b));
  }
  return out;
}

// Shared-randomness combination: rho and sigma batches built from identical
// setting sequences, plus an independently sampled second sigma batch set.
inline std::vector<BatchShadow> build_companion_batches(std::span<const BatchShadow> rho,
                                                        std::span<const BatchShadow> sigma_shared,
                                                        std::span<const BatchShadow> sigma_indep) {
  if (rho.size() != sigma_shared.size() || rho.size() != sigma_indep.size())
    throw std::invalid_argument("companion batch sets must have equal length");
  if (rho.empty()) throw std::invalid_argument("companion batch sets are empty");
  std::vector<BatchShadow> out;
  out.reserve(rho.size());
  for (std::size_t t = 0; t < rho.size(); ++t) {
    if (rho[t].support != sigma_shared[t].support || rho[t].support != sigma_indep[t].support)
      throw std::invalid_argument("companion batches must share a support");
    if (rho[t].settings_hash != sigma_shared[t].settings_hash)
      throw protocol_error("rho and sigma batches were not built from the same setting sequence");
    BatchShadow b;
    b.support = rho[t].support;
    b.matrix = rho[t].matrix - sigma_shared[t].matrix + sigma_indep[t].matrix;
    b.index = rho[t].index;
    b.settings_hash = rho[t].settings_hash;
    b.members = rho[t].members;
    b.kind = SnapshotKind::companion;
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-copy observables and the U-statistic estimator

// Left cyclic shift on `copies` registers of `local_qubits` qubits each:
// tau |j1 j2 ... jn> = |j2 ... jn j1>, so Tr[tau (A1 x ... x An)] equals
// Tr(A1 A2 ... An).
inline Matrix shift_operator_dense(int copies, int local_qubits) {
  if (copies < 2) throw std::invalid_argument("shift operator needs at least two copies");
  if (copies * local_qubits > kMaxDenseQubits)
    throw resource_error("dense shift operator exceeds the dense-matrix cap");
  const long reg = 1L << local_qubits;
  const long dim = 1L << (copies * local_qubits);
  Matrix tau = Matrix::Zero(dim, dim);
  for (long j = 0; j < dim; ++j) {
    // register 1 occupies the most significant bits
    std::vector<long> regs(static_cast<std::size_t>(copies));
    long rest = j;
    for (int c = copies - 1; c >= 0; --c) {
      regs[static_cast<std::size_t>(c)] = rest % reg;
      rest /= reg;
    }
    long i = 0;
    for (int c = 1; c < copies; ++c) i = i * reg + regs[static_cast<std::size_t>(c)];
    i = i * reg + regs[0];
    tau(i, j) = 1.0;
  }
  return tau;
}

struct MultiCopyObservable {
  enum class Rep { pauli, shift, projector, dense };

  int copies = 1;
  std::vector<int> support;  // global qubit labels, sorted
  Rep rep = Rep::pauli;
  PauliString pauli_local = PauliString::identity(1);  // rep == pauli
  Vector projector;                                    // rep == projector
  Matrix dense;                                        // rep == dense

  // Single-copy Pauli observable; the global string is restricted to its
  // non-identity support.
  static MultiCopyObservable pauli_obs(const PauliString& gamma) {
    MultiCopyObservable o;
    o.copies = 1;
    o.support = gamma.support();
    if (o.support.empty())
      throw std::invalid_argument("identity Pauli string has no support; its expectation is 1");
    std::string local;
    for (int q : o.support) local.push_back(static_cast<char>(gamma.letter(q)));
    o.pauli_local = PauliString(local);
    o.rep = Rep::pauli;
    return o;
  }

  // Trace moment p_n via the cyclic shift on n copies.
  static MultiCopyObservable trace_moment(int n, std::vector<int> sup) {
    if (n < 2) throw std::invalid_argument("shift representation needs n >= 2");
    std::span<const int> view(sup);
    check_support(kMaxQubits, view);
    MultiCopyObservable o;
    o.copies = n;
    o.support = std::move(sup);
    o.rep = Rep::shift;
    return o;
  }

  // Fidelity with a pure target on the support (single copy).
  static MultiCopyObservable fidelity_projector(Vector psi, std::vector<int> sup) {
    std::span<const int> view(sup);
    check_support(kMaxQubits, view);
    if (psi.size() != (1L << sup.size()))
      throw std::invalid_argument("target vector dimension does not match support");
    if (std::abs(psi.norm() - 1.0) > 1e-10)
      throw std::invalid_argument("target vector must be normalized");
    MultiCopyObservable o;
    o.copies = 1;
    o.support = std::move(sup);
    o.projector = std::move(psi);
    o.rep = Rep::projector;
    return o;
  }

  // Arbitrary hermitian operator on n copies of the support.
  static MultiCopyObservable dense_obs(int n, std::vector<int> sup, Matrix m) {
    if (n < 1) throw std::invalid_argument("copy count must be >= 1");
    std::span<const int> view(sup);
    check_support(kMaxQubits, view);
    if (n * static_cast<int>(sup.size()) > kMaxDenseQubits)
      throw resource_error("dense observable exceeds the dense-matrix cap");
    if (m.rows() != m.cols() || m.rows() != (1L << (n * sup.size())))
      throw std::invalid_argument("dense observable dimension does not match copies x support");
    if (!is_hermitian(m, 1e-10)) throw std::invalid_argument("dense observable must be hermitian");
    MultiCopyObservable o;
    o.copies = n;
    o.support = std::move(sup);
    o.dense = std::move(m);
    o.rep = Rep::dense;
    return o;
  }
};

namespace detail {

// Reduce every batch matrix to the observable's support. Returns local
// matrices in batch order.
inline std::vector<Matrix> restrict_batches(std::span<const BatchShadow> batches,
                                            const MultiCopyObservable& o) {
  if (batches.empty()) throw std::invalid_argument("no batches given");
  for (const auto& b : batches)
    if (b.support != batches[0].support)
      throw std::invalid_argument("batches must share a support");
  const auto& bs = batches[0].support;
  std::vector<int> keep_local;
  for (int q : o.support) {
    const auto it = std::find(bs.begin(), bs.end(), q);
    if (it == bs.end())
      throw std::invalid_argument("observable support is not contained in the batch support");
    keep_local.push_back(static_cast<int>(it - bs.begin()));
  }
  std::vector<Matrix> out;
  out.reserve(batches.size());
  const int nb = static_cast<int>(bs.size());
  for (const auto& b : batches) {
    if (keep_local.size() == bs.size())
      out.push_back(b.matrix);
    else
      out.push_back(partial_trace(b.matrix, nb, keep_local));
  }
  return out;
}

// Depth-first walk over ordered tuples of distinct batch indices keeping a
// running matrix product; adds Tr(product) at the leaves.
inline void cyclic_tuple_sum(const std::vector<Matrix>& r, int depth, int n,
                             std::vector<bool>& used, const Matrix& prod, Complex& acc) {
  if (depth == n) {
    acc += prod.trace();
    return;
  }
  for (std::size_t t = 0; t < r.size(); ++t) {
    if (used[t]) continue;
    used[t] = true;
    if (depth == 0)
      cyclic_tuple_sum(r, 1, n, used, r[t], acc);
    else
      cyclic_tuple_sum(r, depth + 1, n, used, Matrix(prod * r[t]), acc);
    used[t] = false;
  }
}

inline void dense_tuple_sum(const std::vector<Matrix>& r, const Matrix& obs, int depth, int n,
                            std::vector<bool>& used, const Matrix& kron_acc, Complex& acc) {
  if (depth == n) {
    acc += trace_product(obs, kron_acc);
    return;
  }
  for (std::size_t t = 0; t < r.size(); ++t) {
    if (used[t]) continue;
    used[t] = true;
    if (depth == 0)
      dense_tuple_sum(r, obs, 1, n, used, r[t], acc);
    else {
      // kron with the next copy as the less significant factor
      const Matrix& b = r[t];
      Matrix next(kron_acc.rows() * b.rows(), kron_acc.cols() * b.cols());
      for (long i = 0; i < kron_acc.rows(); ++i)
        for (long j = 0; j < kron_acc.cols(); ++j)
          next.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = kron_acc(i, j) * b;
      dense_tuple_sum(r, obs, depth + 1, n, used, next, acc);
    }
    used[t] = false;
  }
}

}  // namespace detail

// U-statistic estimate of Tr(O rho^{x n}) from m >= n batch shadows:
// the mean over all ordered tuples of distinct batch indices of
// Tr[O (B_{t1} x ... x B_{tn})]. For the shift representation the tensor
// product is never materialized; the cyclic trace Tr(B_{t1} ... B_{tn}) is
// used instead.
inline double estimate_mco(std::span<const BatchShadow> batches, const MultiCopyObservable& o) {
  const int m = static_cast<int>(batches.size());
  if (m < o.copies) throw std::invalid_argument("need at least as many batches as copies");
  const std::vector<Matrix> r = detail::restrict_batches(batches, o);

  if (o.copies == 1) {
    Matrix mean = Matrix::Zero(r[0].rows(), r[0].cols());
    for (const auto& b : r) mean += b;
    mean /= static_cast<double>(m);
    switch (o.rep) {
      case MultiCopyObservable::Rep::pauli: {
        const int k = static_cast<int>(o.support.size());
        std::vector<int> all(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) all[static_cast<std::size_t>(i)] = i;
        return trace_product(o.pauli_local.matrix_on(all), mean).real();
      }
      case MultiCopyObservable::Rep::projector:
        return (o.projector.adjoint() * mean * o.projector)(0, 0).real();
      case MultiCopyObservable::Rep::dense:
        return trace_product(o.dense, mean).real();
      default:
        throw std::invalid_argument("shift representation needs n >= 2");
    }
  }

  double prefactor = 1.0;
  for (int j = 0; j < o.copies; ++j) prefactor /= static_cast<double>(m - j);
  Complex acc = 0;
  std::vector<bool> used(static_cast<std::size_t>(m), false);
  if (o.rep == MultiCopyObservable::Rep::shift) {
    detail::cyclic_tuple_sum(r, 0, o.copies, used, Matrix(), acc);
  } else if (o.rep == MultiCopyObservable::Rep::dense) {
    detail::dense_tuple_sum(r, o.dense, 0, o.copies, used, Matrix(), acc);
  } else {
    throw std::invalid_argument("multi-copy estimation needs a shift or dense representation");
  }
  return prefactor * acc.real();
}

}  // namespace crm
