#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "crm/shadows.hpp"
#include "test_helpers.hpp"

using namespace crm;
using crmtest::kron_ref;
using crmtest::max_abs_diff;

namespace {

std::vector<MeasurementSetting> all_settings(int k) {
  std::vector<MeasurementSetting> out;
  const Basis opts[3] = {Basis::Z, Basis::X, Basis::Y};
  const int total = static_cast<int>(std::pow(3, k));
  for (int idx = 0; idx < total; ++idx) {
    std::vector<Basis> bases(static_cast<std::size_t>(k));
    int rest = idx;
    for (int q = k - 1; q >= 0; --q) {
      bases[static_cast<std::size_t>(q)] = opts[rest % 3];
      rest /= 3;
    }
    out.emplace_back(std::move(bases));
  }
  return out;
}

SupportOutcomes indicator_outcomes(const MeasurementSetting& setting, std::vector<int> support,
                                   long outcome) {
  SupportOutcomes oc;
  oc.setting = setting;
  oc.support = std::move(support);
  oc.weights = RealVector::Zero(1L << oc.support.size());
  oc.weights[outcome] = 1.0;
  oc.exact = false;
  oc.nm = 1;
  return oc;
}

// Reference single-qubit inverse map built from partial traces, applied
// sequentially to both qubits of a 2-qubit operator.
Matrix inverse_channel_ref_2q(const Matrix& m) {
  const Matrix eye = Matrix::Identity(2, 2);
  std::vector<int> keep1{1}, keep0{0};
  Matrix m1 = 3.0 * m - kron_ref(eye, partial_trace(m, 2, keep1));
  Matrix m2 = 3.0 * m1 - kron_ref(partial_trace(m1, 2, keep0), eye);
  return m2;
}

}  // namespace

TEST_CASE("inverse channel on known one- and two-qubit inputs", "[shadows]") {
  Matrix half = Matrix::Identity(2, 2) / 2.0;
  CHECK(max_abs_diff(inverse_channel_apply(half), half) < 1e-14);

  Matrix zero_proj = Matrix::Zero(2, 2);
  zero_proj(0, 0) = 1.0;
  Matrix expect1(2, 2);
  expect1 << 2, 0, 0, -1;
  CHECK(max_abs_diff(inverse_channel_apply(zero_proj), expect1) < 1e-14);

  Matrix zz = Matrix::Zero(4, 4);
  zz(0, 0) = 1.0;
  Matrix expect2 = Matrix::Zero(4, 4);
  expect2.diagonal() << 4, -2, -2, 1;
  CHECK(max_abs_diff(inverse_channel_apply(zz), expect2) < 1e-14);
}

TEST_CASE("inverse channel agrees with the partial-trace reference map", "[shadows]") {
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    Matrix m = crmtest::random_hermitian(2, seed);
    Matrix got = inverse_channel_apply(m);
    CHECK(max_abs_diff(got, inverse_channel_ref_2q(m)) < 1e-12);
    CHECK(std::abs(got.trace().real() - m.trace().real()) < 1e-12);
    CHECK(is_hermitian(got, 1e-12));
  }
  Matrix bad(2, 3);
  bad.setZero();
  CHECK_THROWS_AS(inverse_channel_apply(bad), std::invalid_argument);
  Matrix odd(3, 3);
  odd.setZero();
  CHECK_THROWS_AS(inverse_channel_apply(odd), std::invalid_argument);
}

TEST_CASE("rho snapshot reproduces the one-qubit closed form", "[shadows]") {
  Vector zero(2);
  zero << 1, 0;
  DensityState st = DensityState::from_vector(zero);
  Snapshot snap = build_rho_snapshot(st, MeasurementSetting::from_string("Z"), std::vector<int>{0});
  Matrix expect(2, 2);
  expect << 2, 0, 0, -1;
  CHECK(max_abs_diff(snap.matrix, expect) < 1e-14);
  CHECK(snap.kind == SnapshotKind::standard);
}

TEST_CASE("rho snapshot setting-average is unbiased in exact mode", "[shadows]") {
  DensityState st = crmtest::random_density(1, 17);
  Matrix mean = Matrix::Zero(2, 2);
  for (const auto& ms : all_settings(1))
    mean += build_rho_snapshot(st, ms, std::vector<int>{0}).matrix;
  mean /= 3.0;
  CHECK(max_abs_diff(mean, st.matrix()) < 1e-12);

  // Two-qubit exhaustive version on a subset of a three-qubit state.
  DensityState st3 = crmtest::random_density(3, 18);
  const std::vector<int> sub{0, 2};
  Matrix mean2 = Matrix::Zero(4, 4);
  std::vector<MeasurementSetting> full;
  for (const auto& local : all_settings(2)) {
    // embed the local setting into a 3-qubit one; the middle basis is dummy
    std::vector<Basis> b{local.basis(0), Basis::Z, local.basis(1)};
    full.emplace_back(std::move(b));
  }
  for (const auto& ms : full) mean2 += build_rho_snapshot(st3, ms, sub).matrix;
  mean2 /= 9.0;
  CHECK(max_abs_diff(mean2, partial_trace(st3, sub)) < 1e-12);
}

TEST_CASE("sampled rho snapshots have unit trace and are hermitian", "[shadows]") {
  DensityState st = crmtest::random_density(2, 19);
  Dataset ds = sample_dataset(st, 10, 5, 404);
  for (const auto& rec : ds.records) {
    Snapshot on_all = build_rho_snapshot(rec, std::vector<int>{0, 1});
    Snapshot on_one = build_rho_snapshot(rec, std::vector<int>{1});
    CHECK(std::abs(on_all.matrix.trace().real() - 1.0) < 1e-10);
    CHECK(std::abs(on_one.matrix.trace().real() - 1.0) < 1e-10);
    CHECK(is_hermitian(on_all.matrix, 1e-10));
    CHECK(is_hermitian(on_one.matrix, 1e-10));
  }
}

TEST_CASE("sigma snapshot keeps the maximally mixed prior fixed", "[shadows]") {
  for (int k : {1, 2}) {
    std::vector<int> sup;
    for (int q = 0; q < k; ++q) sup.push_back(q);
    PseudoState sigma{sup, Matrix::Identity(1L << k, 1L << k) / std::pow(2.0, k)};
    for (const auto& ms : all_settings(k)) {
      Snapshot snap = build_sigma_snapshot(sigma, ms);
      CHECK(max_abs_diff(snap.matrix, sigma.matrix) < 1e-12);
      CHECK(snap.kind == SnapshotKind::prior);
    }
  }
}

TEST_CASE("sigma snapshot trace and exhaustive unbiasedness", "[shadows]") {
  // Non-positive prior with trace far from one.
  Matrix m = crmtest::random_hermitian(2, 23);
  PseudoState sigma{{0, 1}, m};
  const double tr = m.trace().real();
  Matrix mean = Matrix::Zero(4, 4);
  for (const auto& ms : all_settings(2)) {
    Snapshot snap = build_sigma_snapshot(sigma, ms);
    CHECK(std::abs(snap.matrix.trace().real() - tr) < 1e-10);
    mean += snap.matrix;
  }
  mean /= 9.0;
  CHECK(max_abs_diff(mean, m) < 1e-12);

  CHECK_THROWS_AS(build_sigma_snapshot(sigma, MeasurementSetting::from_string("Z")),
                  std::invalid_argument);
}

TEST_CASE("exact rho and sigma snapshots coincide for a perfect prior", "[shadows]") {
  DensityState st = crmtest::random_density(2, 29);
  const std::vector<int> sup{0, 1};
  PseudoState sigma{sup, st.matrix()};
  for (const auto& ms : all_settings(2)) {
    Snapshot rho = build_rho_snapshot(st, ms, sup);
    Snapshot sig = build_sigma_snapshot(sigma, ms);
    // identical code path on identical inputs: bitwise equality
    CHECK(max_abs_diff(rho.matrix, sig.matrix) == 0.0);
  }
}

TEST_CASE("crm snapshot with zero prior reduces to the standard snapshot", "[shadows]") {
  DensityState st = crmtest::random_density(2, 31);
  Dataset ds = sample_dataset(st, 5, 4, 713);
  PseudoState zero = PseudoState::zero(std::vector<int>{0, 1});
  for (const auto& rec : ds.records) {
    Snapshot crm_snap = build_crm_snapshot(rec, zero, std::vector<int>{0, 1});
    Snapshot std_snap = build_rho_snapshot(rec, std::vector<int>{0, 1});
    CHECK(max_abs_diff(crm_snap.matrix, std_snap.matrix) < 1e-14);
    CHECK(crm_snap.kind == SnapshotKind::crm);
  }
}

TEST_CASE("crm snapshot with a perfect prior returns the state exactly", "[shadows]") {
  DensityState st = crmtest::random_density(2, 37);
  const std::vector<int> sup{0, 1};
  PseudoState sigma{sup, st.matrix()};
  for (const auto& ms : all_settings(2)) {
    Snapshot snap = build_crm_snapshot(st, ms, sigma);
    CHECK(max_abs_diff(snap.matrix, st.matrix()) == 0.0);
  }
}

TEST_CASE("crm snapshots are unbiased over settings and outcomes", "[shadows]") {
  // Exhaustive two-qubit average against twenty random pairs, including
  // non-positive priors with arbitrary trace.
  const std::vector<int> sup{0, 1};
  const auto settings = all_settings(2);
  for (int pair = 0; pair < 20; ++pair) {
    DensityState rho = crmtest::random_density(2, 100 + static_cast<std::uint64_t>(pair));
    Matrix sig_m = crmtest::random_hermitian(2, 200 + static_cast<std::uint64_t>(pair));
    PseudoState sigma{sup, sig_m};
    Matrix mean = Matrix::Zero(4, 4);
    for (const auto& ms : settings) {
      RealVector p = born_probabilities(rho, ms);
      for (long s = 0; s < 4; ++s) {
        if (p[s] == 0.0) continue;
        Snapshot snap = build_crm_snapshot(indicator_outcomes(ms, sup, s), sigma);
        mean += (p[s] / 9.0) * snap.matrix;
        CHECK(std::abs(snap.matrix.trace().real() - 1.0) < 1e-10);
      }
    }
    CHECK(max_abs_diff(mean, rho.matrix()) < 1e-12);
  }
}

TEST_CASE("crm snapshot is linear in the prior", "[shadows]") {
  DensityState st = crmtest::random_density(2, 41);
  Dataset ds = sample_dataset(st, 3, 6, 99);
  const std::vector<int> sup{0, 1};
  Matrix sig_m = crmtest::random_hermitian(2, 42);
  PseudoState sigma{sup, sig_m};
  PseudoState zero = PseudoState::zero(sup);
  for (const auto& rec : ds.records) {
    Snapshot with_prior = build_crm_snapshot(rec, sigma, sup);
    Snapshot without = build_crm_snapshot(rec, zero, sup);
    Snapshot sig_snap = build_sigma_snapshot(sigma, rec.setting.restricted(sup));
    Matrix diff = with_prior.matrix - without.matrix;
    CHECK(max_abs_diff(diff, sig_m - sig_snap.matrix) < 1e-12);
  }
}

TEST_CASE("batching splits snapshots into disjoint contiguous means", "[shadows]") {
  DensityState st = crmtest::random_density(2, 43);
  Dataset ds = sample_dataset(st, 6, 3, 55);
  std::vector<Snapshot> snaps;
  for (const auto& rec : ds.records) snaps.push_back(build_rho_snapshot(rec, std::vector<int>{0, 1}));

  auto identity_batches = make_batches(snaps, 6);
  REQUIRE(identity_batches.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(max_abs_diff(identity_batches[i].matrix, snaps[i].matrix) == 0.0);
    CHECK(identity_batches[i].index == static_cast<int>(i) + 1);
    CHECK(identity_batches[i].members == 1);
  }

  auto single = make_batches(snaps, 1);
  REQUIRE(single.size() == 1);
  Matrix mean = Matrix::Zero(4, 4);
  for (const auto& s : snaps) mean += s.matrix;
  mean /= 6.0;
  CHECK(max_abs_diff(single[0].matrix, mean) < 1e-14);

  auto pairs = make_batches(snaps, 3);
  REQUIRE(pairs.size() == 3);
  Matrix batch_mean = Matrix::Zero(4, 4);
  for (const auto& b : pairs) {
    CHECK(b.members == 2);
    batch_mean += b.matrix;
  }
  batch_mean /= 3.0;
  CHECK(max_abs_diff(batch_mean, mean) < 1e-13);

  CHECK_THROWS_AS(make_batches(snaps, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_batches(snaps, 0), std::invalid_argument);
  std::vector<Snapshot> mixed = snaps;
  mixed[2] = build_rho_snapshot(ds.records[2], std::vector<int>{0});
  CHECK_THROWS_AS(make_batches(mixed, 2), std::invalid_argument);
}

TEST_CASE("dense shift operator contracts tensor products cyclically", "[shadows]") {
  Matrix a = crmtest::random_hermitian(3, 61);
  Matrix b = crmtest::random_hermitian(3, 62);
  Matrix c = crmtest::random_hermitian(3, 63);
  Matrix tau = shift_operator_dense(3, 3);
  const Complex lhs = trace_product(tau, kron_ref(kron_ref(a, b), c));
  const Complex rhs = (a * b * c).trace();
  CHECK(std::abs(lhs - rhs) < 1e-10);

  // two copies: the swap contraction gives Tr(AB)
  Matrix tau2 = shift_operator_dense(2, 3);
  CHECK(std::abs(trace_product(tau2, kron_ref(a, b)) - (a * b).trace()) < 1e-10);
  CHECK_THROWS_AS(shift_operator_dense(1, 2), std::invalid_argument);
  CHECK_THROWS_AS(shift_operator_dense(2, 8), resource_error);
}

TEST_CASE("multi-copy estimator matches the dense observable path", "[shadows]") {
  DensityState st = crmtest::random_density(2, 71);
  Dataset ds = sample_dataset(st, 6, 4, 88);
  std::vector<Snapshot> snaps;
  for (const auto& rec : ds.records) snaps.push_back(build_rho_snapshot(rec, std::vector<int>{0, 1}));
  auto batches = make_batches(snaps, 3);

  auto shift_obs = MultiCopyObservable::trace_moment(2, {0, 1});
  auto dense_obs = MultiCopyObservable::dense_obs(2, {0, 1}, shift_operator_dense(2, 2));
  CHECK(estimate_mco(batches, shift_obs) ==
        Catch::Approx(estimate_mco(batches, dense_obs)).margin(1e-10));

  // third moment on a single-qubit support, reducing the batch matrices;
  // the cyclic shift is not hermitian for three copies, but its hermitian
  // part has the same expectation on every symmetric tensor product and the
  // same ordered-tuple sum (reversed tuples pair up)
  auto shift3 = MultiCopyObservable::trace_moment(3, {1});
  Matrix tau3 = shift_operator_dense(3, 1);
  auto dense3 = MultiCopyObservable::dense_obs(3, {1}, Matrix((tau3 + tau3.adjoint()) / 2.0));
  CHECK(estimate_mco(batches, shift3) ==
        Catch::Approx(estimate_mco(batches, dense3)).margin(1e-10));
}

TEST_CASE("single-copy estimates are the trace against the mean shadow", "[shadows]") {
  DensityState st = crmtest::random_density(2, 73);
  Dataset ds = sample_dataset(st, 6, 4, 89);
  std::vector<Snapshot> snaps;
  for (const auto& rec : ds.records) snaps.push_back(build_rho_snapshot(rec, std::vector<int>{0, 1}));
  Matrix mean = Matrix::Zero(4, 4);
  for (const auto& s : snaps) mean += s.matrix;
  mean /= 6.0;

  auto gamma = MultiCopyObservable::pauli_obs(PauliString("ZX"));
  const double direct = pauli_expectation(mean, 2, PauliString("ZX"));
  for (int m : {1, 2, 3, 6}) {
    auto batches = make_batches(snaps, m);
    CHECK(estimate_mco(batches, gamma) == Catch::Approx(direct).margin(1e-12));
  }

  // restriction to a sub-support equals the reduced-matrix expectation
  auto gz = MultiCopyObservable::pauli_obs(PauliString("IZ"));
  auto batches = make_batches(snaps, 2);
  std::vector<int> keep{1};
  const double reduced = pauli_expectation(partial_trace(mean, 2, keep), 1, PauliString("Z"));
  CHECK(estimate_mco(batches, gz) == Catch::Approx(reduced).margin(1e-12));

  // projector representation gives the fidelity with a pure target
  Vector target = crmtest::random_pure_vector(2, 74);
  auto fid = MultiCopyObservable::fidelity_projector(target, {0, 1});
  const double fref = (target.adjoint() * mean * target)(0, 0).real();
  CHECK(estimate_mco(batches, fid) == Catch::Approx(fref).margin(1e-12));
}

TEST_CASE("perfect-prior batches give exact trace moments with zero spread", "[shadows]") {
  DensityState st = crmtest::random_density(2, 79);
  const std::vector<int> sup{0, 1};
  PseudoState sigma{sup, st.matrix()};
  const auto settings = all_settings(2);
  std::vector<Snapshot> snaps;
  for (int r = 0; r < 4; ++r) snaps.push_back(build_crm_snapshot(st, settings[static_cast<std::size_t>(r)], sigma));
  auto batches = make_batches(snaps, 4);
  auto p2 = MultiCopyObservable::trace_moment(2, sup);
  const double first = estimate_mco(batches, p2);
  const double second = estimate_mco(batches, p2);
  CHECK(first == second);
  CHECK(first == Catch::Approx(exact_trace_moment(st.matrix(), 2)).margin(1e-13));
}

TEST_CASE("multi-copy estimator validates its inputs", "[shadows]") {
  DensityState st = crmtest::random_density(2, 83);
  Dataset ds = sample_dataset(st, 4, 4, 90);
  std::vector<Snapshot> snaps;
  for (const auto& rec : ds.records) snaps.push_back(build_rho_snapshot(rec, std::vector<int>{0, 1}));
  auto batches = make_batches(snaps, 2);

  CHECK_THROWS_AS(estimate_mco(batches, MultiCopyObservable::trace_moment(3, {0, 1})),
                  std::invalid_argument);
  auto outside = MultiCopyObservable::pauli_obs(PauliString("IIZ"));
  CHECK_THROWS_AS(estimate_mco(batches, outside), std::invalid_argument);
  CHECK_THROWS_AS(MultiCopyObservable::pauli_obs(PauliString("II")), std::invalid_argument);
  CHECK_THROWS_AS(MultiCopyObservable::trace_moment(1, {0}), std::invalid_argument);
  Vector bad(2);
  bad << 2, 0;
  CHECK_THROWS_AS(MultiCopyObservable::fidelity_projector(bad, {0}), std::invalid_argument);
  Matrix nh(2, 2);
  nh << 0, 1, 0, 0;
  CHECK_THROWS_AS(MultiCopyObservable::dense_obs(1, {0}, nh), std::invalid_argument);
  CHECK_THROWS_AS(MultiCopyObservable::dense_obs(7, {0, 1}, Matrix::Zero(4, 4)), resource_error);
}

TEST_CASE("companion batches validate the shared setting sequence", "[shadows]") {
  DensityState rho = crmtest::random_density(2, 91);
  DensityState sig = crmtest::random_density(2, 92);
  Dataset rho_ds = sample_dataset(rho, 4, 8, 1000);
  std::vector<MeasurementSetting> settings;
  for (const auto& rec : rho_ds.records) settings.push_back(rec.setting);
  Dataset sig_ds = sample_dataset_with_settings(sig, settings, 8, 1001);
  Dataset ind_ds = sample_dataset(sig, 4, 8, 1002);

  const std::vector<int> sup{0, 1};
  auto snap_all = [&sup](const Dataset& ds) {
    std::vector<Snapshot> out;
    for (const auto& rec : ds.records) out.push_back(build_rho_snapshot(rec, sup));
    return out;
  };
  auto rb = make_batches(snap_all(rho_ds), 2);
  auto sb = make_batches(snap_all(sig_ds), 2);
  auto ib = make_batches(snap_all(ind_ds), 2);

  auto comp = build_companion_batches(rb, sb, ib);
  REQUIRE(comp.size() == 2);
  for (const auto& b : comp) {
    CHECK(b.kind == SnapshotKind::companion);
    CHECK(std::abs(b.matrix.trace().real() - 1.0) < 1e-10);
    CHECK(is_hermitian(b.matrix, 1e-10));
  }

  // independent settings in the sigma slot trip the shared-sequence check
  CHECK_THROWS_AS(build_companion_batches(rb, ib, sb), protocol_error);
  CHECK_THROWS_AS(build_companion_batches(rb, sb, std::vector<BatchShadow>{ib[0]}),
                  std::invalid_argument);
}

TEST_CASE("companion batches with an exact second prior reduce to crm batches", "[shadows]") {
  DensityState rho = crmtest::random_density(2, 93);
  const std::vector<int> sup{0, 1};
  Matrix sig_m = crmtest::random_density_matrix(2, 94);
  PseudoState sigma{sup, sig_m};
  DensityState sig_state = DensityState::from_matrix(sig_m);

  Dataset rho_ds = sample_dataset(rho, 6, 10, 2000);
  std::vector<MeasurementSetting> settings;
  for (const auto& rec : rho_ds.records) settings.push_back(rec.setting);

  std::vector<Snapshot> rho_snaps, sig_snaps, crm_snaps, exact_prior;
  for (const auto& rec : rho_ds.records) {
    rho_snaps.push_back(build_rho_snapshot(rec, sup));
    sig_snaps.push_back(build_sigma_snapshot(sigma, rec.setting.restricted(sup)));
    crm_snaps.push_back(build_crm_snapshot(rec, sigma, sup));
    Snapshot s;
    s.support = sup;
    s.matrix = sig_m;
    s.kind = SnapshotKind::prior;
    s.setting_hash = setting_hash(rec.setting.restricted(sup));
    exact_prior.push_back(std::move(s));
  }
  auto rb = make_batches(rho_snaps, 3);
  auto sb = make_batches(sig_snaps, 3);
  auto eb = make_batches(exact_prior, 3);
  auto crm_batches = make_batches(crm_snaps, 3);
  auto comp = build_companion_batches(rb, sb, eb);
  for (std::size_t t = 0; t < comp.size(); ++t)
    CHECK(max_abs_diff(comp[t].matrix, crm_batches[t].matrix) < 1e-12);

  // perfect prior in exact mode everywhere: batches collapse to the state
  std::vector<Snapshot> exact_rho, exact_sig, exact_state;
  PseudoState perfect{sup, rho.matrix()};
  for (const auto& ms : settings) {
    exact_rho.push_back(build_rho_snapshot(rho, ms, sup));
    exact_sig.push_back(build_sigma_snapshot(perfect, ms.restricted(sup)));
    Snapshot s;
    s.support = sup;
    s.matrix = rho.matrix();
    s.kind = SnapshotKind::prior;
    s.setting_hash = setting_hash(ms.restricted(sup));
    exact_state.push_back(std::move(s));
  }
  auto comp2 = build_companion_batches(make_batches(exact_rho, 3), make_batches(exact_sig, 3),
                                       make_batches(exact_state, 3));
  for (const auto& b : comp2) CHECK(max_abs_diff(b.matrix, rho.matrix()) < 1e-13);
  (void)sig_state;
}

TEST_CASE("companion construction is unbiased over all randomness sources", "[shadows]") {
  // Exhaustive expectation over the rho outcomes, the shared-setting sigma
  // outcomes, and the independent sigma measurement.
  DensityState rho = crmtest::random_density(2, 95);
  DensityState sig = crmtest::random_density(2, 96);
  const std::vector<int> sup{0, 1};
  const auto settings = all_settings(2);

  Matrix shared_part = Matrix::Zero(4, 4);
  for (const auto& ms : settings) {
    RealVector pr = born_probabilities(rho, ms);
    RealVector ps = born_probabilities(sig, ms);
    Matrix inner = Matrix::Zero(4, 4);
    for (long s = 0; s < 4; ++s) {
      if (pr[s] != 0.0)
        inner += pr[s] * snapshot_from_outcomes(indicator_outcomes(ms, sup, s),
                                                SnapshotKind::standard)
                             .matrix;
      if (ps[s] != 0.0)
        inner -= ps[s] * snapshot_from_outcomes(indicator_outcomes(ms, sup, s),
                                                SnapshotKind::standard)
                             .matrix;
    }
    shared_part += inner / 9.0;
  }
  Matrix indep_part = Matrix::Zero(4, 4);
  for (const auto& ms : settings) {
    RealVector ps = born_probabilities(sig, ms);
    for (long s = 0; s < 4; ++s)
      if (ps[s] != 0.0)
        indep_part += (ps[s] / 9.0) * snapshot_from_outcomes(indicator_outcomes(ms, sup, s),
                                                             SnapshotKind::standard)
                                          .matrix;
  }
  CHECK(max_abs_diff(shared_part + indep_part, rho.matrix()) < 1e-12);
}

TEST_CASE("crm snapshot assembled from parts matches the direct builder", "[shadows]") {
  const DensityState rho = crmtest::random_density(2, 5151);
  const Matrix sm = crmtest::random_hermitian(2, 717);
  const std::vector<int> sup{0, 1};
  const PseudoState sigma(sup, sm);

  const Dataset ds = sample_dataset(rho, 6, 40, 909);
  for (const auto& rec : ds.records) {
    const SupportOutcomes oc = marginal_outcomes(rec, sup);
    const Snapshot direct = build_crm_snapshot(oc, sigma);
    const Snapshot std_snap = snapshot_from_outcomes(oc, SnapshotKind::standard);
    const Snapshot sig_snap = build_sigma_snapshot(sigma, oc.setting);
    const Snapshot parts = build_crm_snapshot(std_snap, sig_snap, sigma);
    CHECK(max_abs_diff(direct.matrix, parts.matrix) == 0.0);
    CHECK(parts.kind == SnapshotKind::crm);
    CHECK(parts.setting_hash == direct.setting_hash);
  }

  // Mixed-up inputs are rejected before any arithmetic happens.
  const SupportOutcomes oc0 = marginal_outcomes(ds.records[0], sup);
  const SupportOutcomes oc1 = marginal_outcomes(ds.records[1], sup);
  const Snapshot r0 = snapshot_from_outcomes(oc0, SnapshotKind::standard);
  const Snapshot s0 = build_sigma_snapshot(sigma, oc0.setting);
  const Snapshot s1 = build_sigma_snapshot(sigma, oc1.setting);
  CHECK_THROWS_AS(build_crm_snapshot(r0, s1, sigma), protocol_error);
  CHECK_THROWS_AS(build_crm_snapshot(s0, s0, sigma), std::invalid_argument);
  CHECK_THROWS_AS(build_crm_snapshot(r0, r0, sigma), std::invalid_argument);
}
