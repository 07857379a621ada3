#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "crm/qcore.hpp"
#include "crm/rng.hpp"

namespace crm {

// Substream tags so settings and shots never share a counter.
inline constexpr std::uint64_t kStreamSetting = 0x5e77;
inline constexpr std::uint64_t kStreamShot = 0x5807;

struct MeasurementSetting {
  std::vector<Basis> bases;

  MeasurementSetting() = default;
  explicit MeasurementSetting(std::vector<Basis> b) : bases(std::move(b)) {}

  static MeasurementSetting from_string(std::string_view s) {
    MeasurementSetting out;
    out.bases.reserve(s.size());
    for (char c : s) {
      switch (c) {
        case 'Z': out.bases.push_back(Basis::Z); break;
        case 'X': out.bases.push_back(Basis::X); break;
        case 'Y': out.bases.push_back(Basis::Y); break;
        default: throw std::invalid_argument("setting string must be over {X,Y,Z}");
      }
    }
    return out;
  }

  int size() const { return static_cast<int>(bases.size()); }
  Basis basis(int q) const {
    if (q < 0 || q >= size()) throw std::invalid_argument("setting qubit index out of range");
    return bases[static_cast<std::size_t>(q)];
  }

  std::string str() const {
    std::string s;
    s.reserve(bases.size());
    for (Basis b : bases) s.push_back(static_cast<char>(b));
    return s;
  }

  MeasurementSetting restricted(std::span<const int> qubits) const {
    std::vector<Basis> out;
    out.reserve(qubits.size());
    for (int q : qubits) out.push_back(basis(q));
    return MeasurementSetting(std::move(out));
  }

  bool operator==(const MeasurementSetting& other) const = default;
};

inline std::uint64_t setting_hash(const MeasurementSetting& s) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (Basis b : s.bases) h = mix64(h ^ static_cast<std::uint64_t>(static_cast<char>(b)));
  return h;
}

struct MeasurementRecord {
  int index = 0;  // 1-based position in the dataset
  MeasurementSetting setting;
  std::vector<std::uint64_t> shots;

  int qubits() const { return setting.size(); }
  long shot_count() const { return static_cast<long>(shots.size()); }
};

struct DatasetMeta {
  int n = 0;
  int nu = 0;
  long nm = 0;
  std::uint64_t seed = 0;
  std::string state;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<MeasurementRecord> records;
};

// ---------------------------------------------------------------------------
// Born probabilities

// Outcome distribution of a computational-basis measurement after the
// per-qubit basis rotations. Length 2^N, sums to Tr(state).
inline RealVector born_probabilities(const DensityState& st, const MeasurementSetting& setting) {
  if (setting.size() != st.qubits())
    throw std::invalid_argument("setting length does not match qubit count");
  const int n = st.qubits();
  RealVector p(st.dim());
  if (st.pure()) {
    Vector v = st.vector();
    for (int q = 0; q < n; ++q) apply_gate_vec(v, n, q, basis_gate(setting.basis(q)));
    p = v.cwiseAbs2();
  } else {
    Matrix m = st.matrix();
    const auto gates = setting_gates(setting.bases);
    conjugate_by_gates(m, gates);
    p = m.diagonal().real();
  }
  for (long s = 0; s < p.size(); ++s) {
    if (p[s] < -1e-8) throw validation_error("density state produced a negative outcome probability");
    if (p[s] < 0) p[s] = 0;
  }
  return p;
}

// Pseudo-state version; entries may be negative, sum equals Tr(matrix).
inline RealVector born_probabilities(const PseudoState& ps, const MeasurementSetting& setting) {
  if (setting.size() != ps.qubits())
    throw std::invalid_argument("setting length does not match pseudo-state support");
  Matrix m = ps.matrix;
  const auto gates = setting_gates(setting.bases);
  conjugate_by_gates(m, gates);
  return m.diagonal().real();
}

// ---------------------------------------------------------------------------
// Sampling

inline MeasurementSetting sample_setting(std::uint64_t seed, int record_index, int n) {
  std::vector<Basis> bases(static_cast<std::size_t>(n));
  const Basis all[3] = {Basis::Z, Basis::X, Basis::Y};
  for (int q = 0; q < n; ++q) {
    const std::uint64_t word =
        derive_stream(seed, static_cast<std::uint64_t>(record_index), kStreamSetting,
                      static_cast<std::uint64_t>(q));
    bases[static_cast<std::size_t>(q)] = all[bounded_draw(word, 3)];
  }
  return MeasurementSetting(std::move(bases));
}

// Shots for one record; depends only on (seed, record_index, shot index), so
// records can be produced in any order or in parallel.
inline MeasurementRecord sample_record_with_setting(const DensityState& st,
                                                    MeasurementSetting setting,
                                                    long nm, std::uint64_t seed,
                                                    int record_index) {
  if (nm < 1) throw std::invalid_argument("shots per setting must be >= 1");
  if (record_index < 1) throw std::invalid_argument("record index must be >= 1");
  const RealVector p = born_probabilities(st, setting);
  RealVector cum(p.size());
  std::partial_sum(p.data(), p.data() + p.size(), cum.data());
  const double total = cum[cum.size() - 1];

  MeasurementRecord rec;
  rec.index = record_index;
  rec.setting = std::move(setting);
  rec.shots.resize(static_cast<std::size_t>(nm));
  for (long b = 0; b < nm; ++b) {
    const double u = to_unit_double(derive_stream(seed, static_cast<std::uint64_t>(record_index),
                                                  kStreamShot, static_cast<std::uint64_t>(b)));
    const double target = u * total;
    const auto it = std::upper_bound(cum.data(), cum.data() + cum.size(), target);
    long idx = it - cum.data();
    if (idx >= cum.size()) idx = cum.size() - 1;
    rec.shots[static_cast<std::size_t>(b)] = static_cast<std::uint64_t>(idx);
  }
  return rec;
}

inline MeasurementRecord sample_record(const DensityState& st, long nm, std::uint64_t seed,
                                       int record_index) {
  return sample_record_with_setting(st, sample_setting(seed, record_index, st.qubits()), nm, seed,
                                    record_index);
}

inline Dataset sample_dataset(const DensityState& st, int nu, long nm, std::uint64_t seed,
                              std::string state_label = {}) {
  if (nu < 1) throw std::invalid_argument("number of settings must be >= 1");
  Dataset ds;
  ds.meta = DatasetMeta{st.qubits(), nu, nm, seed, std::move(state_label)};
  ds.records.reserve(static_cast<std::size_t>(nu));
  for (int r = 1; r <= nu; ++r) ds.records.push_back(sample_record(st, nm, seed, r));
  return ds;
}

// Same as sample_dataset but reusing an externally fixed setting sequence
// (shared-randomness companion measurements).
inline Dataset sample_dataset_with_settings(const DensityState& st,
                                            std::span<const MeasurementSetting> settings, long nm,
                                            std::uint64_t seed, std::string state_label = {}) {
  if (settings.empty()) throw std::invalid_argument("setting sequence is empty");
  Dataset ds;
  ds.meta = DatasetMeta{st.qubits(), static_cast<int>(settings.size()), nm, seed,
                        std::move(state_label)};
  for (std::size_t r = 0; r < settings.size(); ++r)
    ds.records.push_back(
        sample_record_with_setting(st, settings[r], nm, seed, static_cast<int>(r + 1)));
  return ds;
}

// Every product setting on k qubits, in lexicographic Z < X < Y order.
// Meant for exhaustive enumeration oracles; 3^k settings.
inline std::vector<MeasurementSetting> all_product_settings(int k) {
  if (k < 1 || k > 10) throw std::invalid_argument("exhaustive setting enumeration supports 1..10 qubits");
  long total = 1;
  for (int q = 0; q < k; ++q) total *= 3;
  const Basis opts[3] = {Basis::Z, Basis::X, Basis::Y};
  std::vector<MeasurementSetting> out;
  out.reserve(static_cast<std::size_t>(total));
  for (long idx = 0; idx < total; ++idx) {
    std::vector<Basis> bases(static_cast<std::size_t>(k));
    long rest = idx;
    for (int q = k - 1; q >= 0; --q) {
      bases[static_cast<std::size_t>(q)] = opts[rest % 3];
      rest /= 3;
    }
    out.emplace_back(std::move(bases));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Empirical distributions

inline std::map<std::uint64_t, long> outcome_counts(const MeasurementRecord& rec) {
  std::map<std::uint64_t, long> counts;
  for (std::uint64_t s : rec.shots) ++counts[s];
  return counts;
}

inline std::map<std::uint64_t, double> empirical_distribution(const MeasurementRecord& rec) {
  if (rec.shots.empty()) throw std::invalid_argument("record has no shots");
  std::map<std::uint64_t, double> freq;
  const double nm = static_cast<double>(rec.shot_count());
  for (auto [s, c] : outcome_counts(rec)) freq[s] = static_cast<double>(c) / nm;
  return freq;
}

// One measurement setting with outcome weights marginalized to a qubit
// subset. Weights are empirical frequencies or exact Born probabilities
// (the infinite-shot limit); estimators accept either uniformly.
struct SupportOutcomes {
  MeasurementSetting setting;  // already restricted to `support`
  std::vector<int> support;    // global qubit labels, sorted
  RealVector weights;          // length 2^|support|
  bool exact = false;
  long nm = 0;                 // shots behind the weights; 0 in the exact case
};

inline SupportOutcomes marginal_outcomes(const MeasurementRecord& rec, std::span<const int> qubits) {
  const int n = rec.qubits();
  check_support(n, qubits);
  if (rec.shots.empty()) throw std::invalid_argument("record has no shots");
  SupportOutcomes out;
  out.setting = rec.setting.restricted(qubits);
  out.support.assign(qubits.begin(), qubits.end());
  out.weights = RealVector::Zero(1L << qubits.size());
  for (std::uint64_t s : rec.shots) out.weights[static_cast<long>(gather_bits(s, n, qubits))] += 1.0;
  out.weights /= static_cast<double>(rec.shot_count());
  out.exact = false;
  out.nm = rec.shot_count();
  return out;
}

// Exact Born weights of a reduced operator on its support. `setting` may be
// the full-register setting or one already restricted to `qubits`.
inline SupportOutcomes exact_outcomes(const Matrix& reduced, const MeasurementSetting& setting,
                                      std::span<const int> qubits) {
  const int k = static_cast<int>(qubits.size());
  if (reduced.rows() != (1L << k))
    throw std::invalid_argument("reduced matrix dimension does not match support");
  SupportOutcomes out;
  if (setting.size() == k)
    out.setting = setting;
  else
    out.setting = setting.restricted(qubits);
  out.support.assign(qubits.begin(), qubits.end());
  Matrix m = reduced;
  const auto gates = setting_gates(out.setting.bases);
  conjugate_by_gates(m, gates);
  out.weights = m.diagonal().real();
  out.exact = true;
  out.nm = 0;
  return out;
}

inline SupportOutcomes exact_outcomes(const DensityState& st, const MeasurementSetting& setting,
                                      std::span<const int> qubits) {
  check_support(st.qubits(), qubits);
  return exact_outcomes(partial_trace(st, qubits), setting, qubits);
}

// ---------------------------------------------------------------------------
// Setting-sequence hashes (shared-randomness validation)

inline std::uint64_t settings_hash(std::span<const MeasurementRecord> records,
                                   std::span<const int> qubits) {
  std::uint64_t h = 0x452821e638d01377ULL;
  for (const auto& rec : records) h = mix64(h ^ setting_hash(rec.setting.restricted(qubits)));
  return h;
}

inline std::uint64_t settings_hash(const Dataset& ds, std::span<const int> qubits) {
  return settings_hash(ds.records, qubits);
}

// ---------------------------------------------------------------------------
// JSONL persistence

inline void save_dataset(const Dataset& ds, std::ostream& os) {
  nlohmann::json head;
  head["n"] = ds.meta.n;
  head["nu"] = ds.meta.nu;
  head["nm"] = ds.meta.nm;
  head["seed"] = ds.meta.seed;
  head["state"] = ds.meta.state;
  os << head.dump() << '\n';
  for (const auto& rec : ds.records) {
    nlohmann::json line;
    line["r"] = rec.index;
    line["setting"] = rec.setting.str();
    std::vector<std::string> shots;
    shots.reserve(rec.shots.size());
    for (std::uint64_t s : rec.shots) shots.push_back(bits_to_string(s, ds.meta.n));
    line["shots"] = shots;
    os << line.dump() << '\n';
  }
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open dataset file for writing: " + path);
  save_dataset(ds, os);
}

inline Dataset load_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw validation_error("dataset stream is empty");
  nlohmann::json head = nlohmann::json::parse(line);
  Dataset ds;
  try {
    ds.meta.n = head.at("n").get<int>();
    ds.meta.nu = head.at("nu").get<int>();
    ds.meta.nm = head.at("nm").get<long>();
    ds.meta.seed = head.at("seed").get<std::uint64_t>();
    ds.meta.state = head.at("state").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(std::string("dataset header is malformed: ") + e.what());
  }
  if (ds.meta.n < 1 || ds.meta.n > kMaxQubits) throw validation_error("dataset qubit count out of range");
  if (ds.meta.nu < 1) throw validation_error("dataset setting count must be >= 1");
  if (ds.meta.nm < 1) throw validation_error("dataset shot count must be >= 1");

  std::vector<bool> seen(static_cast<std::size_t>(ds.meta.nu) + 1, false);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json row = nlohmann::json::parse(line);
    MeasurementRecord rec;
    try {
      rec.index = row.at("r").get<int>();
      rec.setting = MeasurementSetting::from_string(row.at("setting").get<std::string>());
      for (const auto& s : row.at("shots")) rec.shots.push_back(bits_from_string(s.get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
      throw validation_error(std::string("dataset record is malformed: ") + e.what());
    } catch (const std::invalid_argument& e) {
      throw validation_error(std::string("dataset record is malformed: ") + e.what());
    }
    if (rec.index < 1 || rec.index > ds.meta.nu) throw validation_error("record index out of range");
    if (seen[static_cast<std::size_t>(rec.index)]) throw validation_error("duplicate record index");
    seen[static_cast<std::size_t>(rec.index)] = true;
    if (rec.setting.size() != ds.meta.n) throw validation_error("record setting length mismatch");
    if (rec.shot_count() != ds.meta.nm) throw validation_error("record shot count mismatch");
    for (std::uint64_t s : rec.shots)
      if (s >= (1ULL << ds.meta.n)) throw validation_error("shot outcome out of range");
    ds.records.push_back(std::move(rec));
  }
  if (static_cast<int>(ds.records.size()) != ds.meta.nu)
    throw validation_error("dataset record count does not match header");
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset file: " + path);
  return load_dataset(is);
}

}  // namespace crm
