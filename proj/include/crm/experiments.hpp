#pragma once

// Experiment runner behind the command-line tool: parses self-describing
// key-value configuration files, simulates shadow datasets over a grid of
// setting counts, applies the standard, control-variate, and companion
// estimators to the same records, and aggregates everything into a
// fixed-column CSV table. Rows come out in a deterministic order and the
// same configuration reproduces the CSV byte for byte.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>

#include "crm/errors.hpp"
#include "crm/measurement.hpp"
#include "crm/observables.hpp"
#include "crm/shadows.hpp"
#include "crm/statesrc.hpp"

namespace crm {

// Substream tags for experiment-level randomness. Data seeds are derived per
// grid point and repetition; the two companion sources get their own tags so
// no stream is ever reused across roles.
inline constexpr std::uint64_t kStreamExpData = 0xd474;
inline constexpr std::uint64_t kStreamExpShared = 0x51a2;
inline constexpr std::uint64_t kStreamExpIndep = 0x1f0d;

enum class ExperimentKind { entropy, fidelity, companion };

inline std::string_view experiment_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::entropy: return "entropy";
    case ExperimentKind::fidelity: return "fidelity";
    case ExperimentKind::companion: return "companion";
  }
  throw std::invalid_argument("unknown experiment kind");
}

// Parsed configuration. `exact` replaces sampled shots by exact outcome
// weights; its rows report N_M = 0 to keep the parameter tuple visible.
struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::entropy;
  StateDescriptor state;
  std::vector<std::string> priors;
  int n_max = 0;  // polynomial degree and batch count for entropy estimates
  int n_a = 0;    // subsystem size; the support is the first n_a qubits
  std::vector<int> nu_grid;
  long nm = 0;
  bool exact = false;
  int repetitions = 1;
  std::uint64_t seed = 0;
  std::string output;
  StateDescriptor companion_state;  // companion experiments only
  std::vector<long> nu_prime;       // companion setting counts
  long nm_prime = 0;                // companion shots; 0 falls back to nm
};

namespace detail {

inline std::string_view trim_view(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_comma_list(const std::string& field, std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t stop = std::min(s.find(',', start), s.size());
    const std::string_view item = trim_view(s.substr(start, stop - start));
    if (item.empty()) throw config_error(field + ": empty entry in list");
    out.emplace_back(item);
    start = stop + 1;
  }
  return out;
}

inline bool parse_bool_field(const std::string& field, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw config_error(field + ": expected true or false, got '" + text + "'");
}

}  // namespace detail

inline ExperimentConfig parse_config_text(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string_view stripped = detail::trim_view(line);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string_view::npos)
      throw config_error("config: malformed line '" + std::string(stripped) + "'");
    const std::string key(detail::trim_view(stripped.substr(0, eq)));
    const std::string value(detail::trim_view(stripped.substr(eq + 1)));
    if (key.empty() || value.empty())
      throw config_error("config: malformed line '" + std::string(stripped) + "'");
    if (!kv.emplace(key, value).second)
      throw config_error(key + ": duplicated configuration key");
  }

  ExperimentConfig cfg;
  const auto take = [&kv](const char* key) -> std::optional<std::string> {
    const auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };

  const auto kind_text = take("experiment");
  if (!kind_text) throw config_error("experiment: missing experiment kind");
  if (*kind_text == "entropy")
    cfg.experiment = ExperimentKind::entropy;
  else if (*kind_text == "fidelity")
    cfg.experiment = ExperimentKind::fidelity;
  else if (*kind_text == "companion")
    cfg.experiment = ExperimentKind::companion;
  else
    throw config_error("experiment: must be entropy, fidelity, or companion");

  const auto state_text = take("state");
  if (!state_text) throw config_error("state: missing state descriptor");
  cfg.state = parse_state_descriptor(*state_text, "state");

  const auto priors_text = take("priors");
  if (!priors_text) throw config_error("priors: missing prior list (use priors = none)");
  cfg.priors = detail::split_comma_list("priors", *priors_text);

  const auto nu_text = take("N_U");
  if (!nu_text) throw config_error("N_U: missing setting-count grid");
  for (const std::string& item : detail::split_comma_list("N_U", *nu_text)) {
    const long v = detail::parse_long_field("N_U", item);
    if (v < 1) throw config_error("N_U: grid values must be at least 1");
    cfg.nu_grid.push_back(static_cast<int>(v));
  }

  if (const auto reps = take("repetitions")) {
    const long v = detail::parse_long_field("repetitions", *reps);
    if (v < 1) throw config_error("repetitions: must be at least 1");
    cfg.repetitions = static_cast<int>(v);
  } else {
    throw config_error("repetitions: missing repetition count");
  }

  const auto seed_text = take("seed");
  if (!seed_text) throw config_error("seed: mandatory seed is missing");
  cfg.seed = detail::parse_seed_field("seed", *seed_text);

  if (const auto exact = take("exact")) cfg.exact = detail::parse_bool_field("exact", *exact);

  const auto nm_text = take("N_M");
  if (cfg.exact) {
    if (nm_text) throw config_error("N_M: not used when exact = true");
  } else {
    if (!nm_text) throw config_error("N_M: missing shots per setting");
    cfg.nm = detail::parse_long_field("N_M", *nm_text);
    if (cfg.nm < 1) throw config_error("N_M: must be at least 1");
  }

  if (const auto out = take("output")) cfg.output = *out;

  const bool subsystem = cfg.experiment != ExperimentKind::fidelity;
  const auto na_text = take("N_A");
  const auto nmax_text = take("n_max");
  if (subsystem) {
    if (!na_text) throw config_error("N_A: subsystem size is required for this experiment");
    const long v = detail::parse_long_field("N_A", *na_text);
    if (v < 1 || v > kMaxDenseQubits)
      throw config_error(fmt::format("N_A: must lie in 1..{}", kMaxDenseQubits));
    cfg.n_a = static_cast<int>(v);
    if (!nmax_text) throw config_error("n_max: polynomial degree is required for this experiment");
    const long d = detail::parse_long_field("n_max", *nmax_text);
    if (d < 1) throw config_error("n_max: must be at least 1");
    cfg.n_max = static_cast<int>(d);
    for (int nu : cfg.nu_grid)
      if (nu % cfg.n_max != 0)
        throw config_error("N_U: grid values must be multiples of n_max for batching");
  } else {
    if (na_text) throw config_error("N_A: not used by fidelity experiments");
    if (nmax_text) throw config_error("n_max: not used by fidelity experiments");
    for (const std::string& p : cfg.priors)
      if (p == "none")
        throw config_error("priors: fidelity experiments estimate the overlap with each prior "
                           "state; 'none' names no target (use exact or mps:chi=K)");
  }

  const auto comp_text = take("companion_state");
  const auto nup_text = take("N_U_prime");
  const auto nmp_text = take("N_M_prime");
  if (cfg.experiment == ExperimentKind::companion) {
    for (const std::string& p : cfg.priors)
      if (p != "none")
        throw config_error("priors: companion experiments take the prior from companion_state; "
                           "use priors = none");
    if (!comp_text) throw config_error("companion_state: required for companion experiments");
    cfg.companion_state = parse_state_descriptor(*comp_text, "companion_state");
    if (!nup_text) throw config_error("N_U_prime: required for companion experiments");
    for (const std::string& item : detail::split_comma_list("N_U_prime", *nup_text)) {
      const long v = detail::parse_long_field("N_U_prime", item);
      if (v < cfg.n_max)
        throw config_error("N_U_prime: values must be at least n_max");
      cfg.nu_prime.push_back(v);
    }
    if (nmp_text) {
      if (cfg.exact) throw config_error("N_M_prime: not used when exact = true");
      cfg.nm_prime = detail::parse_long_field("N_M_prime", *nmp_text);
      if (cfg.nm_prime < 1) throw config_error("N_M_prime: must be at least 1");
    } else {
      cfg.nm_prime = cfg.nm;
    }
  } else {
    if (comp_text) throw config_error("companion_state: only used by companion experiments");
    if (nup_text) throw config_error("N_U_prime: only used by companion experiments");
    if (nmp_text) throw config_error("N_M_prime: only used by companion experiments");
  }

  if (!kv.empty()) throw config_error("config: unknown key '" + kv.begin()->first + "'");
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open file: " + path);
  return parse_config_text(in);
}

// ---------------------------------------------------------------------------
// Result table

struct ResultRow {
  std::string experiment;
  int n = 0;
  int n_a = 0;
  long nu = 0;
  long nm = 0;
  std::string prior;
  std::string estimator;
  double value = 0;
  double std_error = 0;
  double exact_reference = 0;
  double rel_error = 0;
};

struct ResultTable {
  std::vector<ResultRow> rows;
};

namespace detail {

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace detail

inline void write_csv(const ResultTable& table, std::ostream& os) {
  os << "experiment,N,N_A,N_U,N_M,prior,estimator,value,stderr,exact_reference,rel_error\n";
  for (const ResultRow& r : table.rows) {
    os << fmt::format("{},{},{},{},{},{},{},{:.12g},{:.12g},{:.12g},{:.12g}\n", r.experiment, r.n,
                      r.n_a, r.nu, r.nm, detail::csv_field(r.prior), detail::csv_field(r.estimator),
                      r.value, r.std_error, r.exact_reference, r.rel_error);
  }
}

inline void write_csv(const ResultTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw validation_error("cannot open output file for writing: " + path);
  write_csv(table, out);
  if (!out) throw validation_error("failed while writing output file: " + path);
}

// ---------------------------------------------------------------------------
// Runner internals

namespace detail {

// Runs fn(0..count-1) across a small thread pool. Each index writes only its
// own result slot, so the outcome does not depend on scheduling.
template <typename Fn>
inline void parallel_for(std::size_t count, Fn&& fn) {
  std::size_t workers = std::thread::hardware_concurrency();
  if (workers == 0) workers = 1;
  workers = std::min(workers, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          const std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// Near-equal contiguous split for snapshot sets whose size need not be a
// multiple of the batch count (the independently sampled companion pool).
// Batch t covers [t*n/m, (t+1)*n/m); sizes differ by at most one.
inline std::vector<BatchShadow> make_batches_ragged(std::span<const Snapshot> snapshots, int m) {
  const long count = static_cast<long>(snapshots.size());
  if (m < 1) throw std::invalid_argument("batch count must be >= 1");
  if (count < m) throw std::invalid_argument("fewer snapshots than batches");
  for (const auto& s : snapshots) {
    if (s.support != snapshots[0].support)
      throw std::invalid_argument("snapshots in a batch set must share a support");
    if (s.kind != snapshots[0].kind)
      throw std::invalid_argument("snapshots in a batch set must share a kind");
  }
  std::vector<BatchShadow> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int t = 0; t < m; ++t) {
    const long lo = count * t / m;
    const long hi = count * (t + 1) / m;
    BatchShadow b;
    b.support = snapshots[0].support;
    b.index = t + 1;
    b.members = hi - lo;
    b.kind = snapshots[0].kind;
    b.matrix = Matrix::Zero(snapshots[0].matrix.rows(), snapshots[0].matrix.cols());
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (long j = lo; j < hi; ++j) {
      b.matrix += snapshots[static_cast<std::size_t>(j)].matrix;
      h = mix64(h ^ snapshots[static_cast<std::size_t>(j)].setting_hash);
    }
    b.matrix /= static_cast<double>(hi - lo);
    b.settings_hash = h;
    out.push_back(std::move(b));
  }
  return out;
}

// One estimator column of a run: the standard baseline, a control-variate
// prior, or a companion source with its own setting budget.
struct ArmSpec {
  std::string label;
  std::string estimator;
  std::optional<PseudoState> sigma;  // crm arms
  std::size_t indep_slot = 0;        // companion arms: index into the shared pool
  long nu_prime = 0;
  long nm_prime = 0;
  Vector target;          // fidelity arms: the pure state whose overlap is estimated
  double reference = 0;   // fidelity arms: the exact overlap with the simulator state
};

// Prior-side snapshots depend only on the restricted setting, so arms reuse
// them across records, repetitions, and grid points. Keyed by the basis
// string to make collisions impossible.
class SigmaCache {
 public:
  explicit SigmaCache(PseudoState sigma) : sigma_(std::move(sigma)) {}

  const PseudoState& sigma() const { return sigma_; }

  Snapshot get(const MeasurementSetting& restricted) {
    std::string key;
    key.reserve(restricted.bases.size());
    for (Basis b : restricted.bases)
      key += b == Basis::Z ? 'Z' : (b == Basis::X ? 'X' : 'Y');
    {
      const std::lock_guard<std::mutex> lock(mutex_);
      const auto it = map_.find(key);
      if (it != map_.end()) return it->second;
    }
    Snapshot snap = build_sigma_snapshot(sigma_, restricted);
    const std::lock_guard<std::mutex> lock(mutex_);
    return map_.emplace(std::move(key), std::move(snap)).first->second;
  }

 private:
  PseudoState sigma_;
  std::mutex mutex_;
  std::unordered_map<std::string, Snapshot> map_;
};

// Bond dimension out of an "mps:chi=K" descriptor.
inline long parse_mps_chi(const std::string& text) {
  long chi = -1;
  for (const auto& [key, value] : split_descriptor_fields("priors", text.substr(4))) {
    if (key == "chi")
      chi = parse_long_field("priors.chi", value);
    else
      throw config_error("priors: unknown key '" + key + "' in mps descriptor");
  }
  if (chi < 1) throw config_error("priors.chi: bond dimension missing or not positive");
  return chi;
}

// Resolves a prior descriptor against the main state. `ideal` is the exact
// pure vector behind the state when one exists (chain ground state or the
// noiseless circuit), used as the source for rank-truncated priors.
inline PseudoState resolve_prior(const std::string& text, const DensityState& rho,
                                 const std::optional<Vector>& ideal,
                                 std::span<const int> support) {
  if (text == "exact") return PseudoState(std::vector<int>(support.begin(), support.end()),
                                          partial_trace(rho, support));
  if (text.rfind("mps:", 0) == 0) {
    if (!ideal)
      throw config_error("priors: rank-truncated priors need an ising or circuit state");
    const Vector truncated = bond_truncate(*ideal, parse_mps_chi(text));
    return PseudoState(std::vector<int>(support.begin(), support.end()),
                       partial_trace(truncated, rho.qubits(), support));
  }
  if (text.rfind("file:", 0) == 0) {
    const std::string path = text.substr(5);
    if (path.empty()) throw config_error("priors: file descriptor needs a path");
    Matrix m = load_state_file(path);
    if (m.rows() != (1L << support.size()))
      throw config_error(fmt::format("priors: matrix dimension {} does not match the {}-qubit support",
                                     m.rows(), support.size()));
    if (!is_hermitian(m)) throw config_error("priors: prior matrix must be hermitian");
    return PseudoState(std::vector<int>(support.begin(), support.end()), std::move(m));
  }
  throw config_error("priors: unknown prior descriptor '" + text + "'");
}

// Fidelity runs estimate the overlap with the prior state itself, so the
// prior must resolve to a pure vector on the full register.
inline Vector resolve_pure_target(const std::string& text, const std::optional<Vector>& ideal) {
  if (!ideal)
    throw config_error("state: fidelity experiments need an ising or circuit state");
  if (text == "exact") return *ideal;
  if (text.rfind("mps:", 0) == 0) return bond_truncate(*ideal, parse_mps_chi(text));
  throw config_error("priors: fidelity priors must be pure states built from the ideal state "
                     "(exact or mps:chi=K)");
}

struct RepEstimate {
  double value = 0;
  double err = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Runner

// Simulates every (grid point, repetition) task, evaluates all estimator arms
// on the same records, and aggregates rows. Entropy and companion runs emit
// two rows per arm, one against the polynomial truncation of the exact
// entropy and one against the exact entropy itself. The value column is the
// mean estimate over repetitions; the stderr column is the spread over
// repetitions (or the single report's standard error when repetitions = 1);
// rel_error is the mean absolute deviation from the reference, scaled by it.
inline ResultTable run_experiment(const ExperimentConfig& cfg) {
  const DensityState rho = make_state(cfg.state);
  const int n = rho.qubits();
  const bool subsystem = cfg.experiment != ExperimentKind::fidelity;

  const int n_a = subsystem ? cfg.n_a : n;
  if (n_a > n) throw config_error("N_A: subsystem exceeds the register");
  if (n_a > kMaxDenseQubits)
    throw config_error(fmt::format("state.N: this experiment materializes the full register and "
                                   "needs at most {} qubits", kMaxDenseQubits));
  std::vector<int> support(static_cast<std::size_t>(n_a));
  for (int q = 0; q < n_a; ++q) support[static_cast<std::size_t>(q)] = q;

  std::optional<Vector> ideal;
  if (cfg.state.kind == StateDescriptor::Kind::ising) {
    ideal = ising_ground_state(cfg.state.ising);
  } else if (cfg.state.kind == StateDescriptor::Kind::circuit) {
    CircuitSpec noiseless = cfg.state.circuit;
    noiseless.p = 0.0;
    ideal = random_circuit_vector(noiseless);
  }

  const Matrix reduced_main = partial_trace(rho, support);

  double ref_poly = 0, ref_exact = 0;
  if (subsystem) {
    ref_poly = entropy_poly_value(reduced_main, entropy_poly_coeffs(cfg.n_max));
    ref_exact = exact_entropy(reduced_main);
  }

  std::optional<DensityState> companion;
  Matrix reduced_comp;
  if (cfg.experiment == ExperimentKind::companion) {
    companion = make_state(cfg.companion_state);
    if (companion->qubits() != n)
      throw config_error("companion_state: qubit count does not match the main state");
    reduced_comp = partial_trace(*companion, support);
  }

  // Estimator arms, in the order their rows appear.
  std::vector<detail::ArmSpec> arms;
  std::vector<std::unique_ptr<detail::SigmaCache>> caches;
  if (cfg.experiment == ExperimentKind::companion) {
    arms.push_back({"none", "standard", std::nullopt, 0, 0, 0});
    for (std::size_t j = 0; j < cfg.nu_prime.size(); ++j) {
      const long nup = cfg.nu_prime[j];
      std::string label = fmt::format("companion:NUp={}", nup);
      if (!cfg.exact && cfg.nm_prime != cfg.nm) label += fmt::format(":NMp={}", cfg.nm_prime);
      arms.push_back({std::move(label), "companion", std::nullopt, j, nup, cfg.nm_prime});
    }
  } else if (cfg.experiment == ExperimentKind::fidelity) {
    // Each prior resolves to a pure target; the same overlap is estimated
    // with and without the control variate, on the same records.
    for (const std::string& text : cfg.priors) {
      Vector phi = detail::resolve_pure_target(text, ideal);
      const double reference = (phi.adjoint() * reduced_main * phi)(0, 0).real();
      arms.push_back({text, "standard", std::nullopt, 0, 0, 0, phi, reference});
      arms.push_back({text, "crm", PseudoState(support, Matrix(phi * phi.adjoint())), 0, 0, 0,
                      std::move(phi), reference});
    }
  } else {
    for (const std::string& text : cfg.priors) {
      if (text == "none") {
        arms.push_back({"none", "standard", std::nullopt, 0, 0, 0});
      } else {
        arms.push_back({text, "crm", detail::resolve_prior(text, rho, ideal, support), 0, 0, 0});
      }
    }
  }
  caches.reserve(arms.size());
  for (const auto& arm : arms)
    caches.push_back(arm.sigma ? std::make_unique<detail::SigmaCache>(*arm.sigma) : nullptr);

  const std::size_t g_count = cfg.nu_grid.size();
  const std::size_t reps = static_cast<std::size_t>(cfg.repetitions);
  const int m = cfg.n_max;

  // The companion pool is sampled once per repetition and reused at every
  // grid point, mirroring one companion experiment analyzed at several
  // budgets. Entries are indexed [rep * arms + slot].
  std::vector<std::vector<BatchShadow>> indep_pool;
  if (cfg.experiment == ExperimentKind::companion) {
    const std::size_t slots = cfg.nu_prime.size();
    indep_pool.resize(reps * slots);
    detail::parallel_for(reps * slots, [&](std::size_t idx) {
      const std::size_t rep = idx / slots, slot = idx % slots;
      const long nup = cfg.nu_prime[slot];
      const std::uint64_t seed = derive_stream(cfg.seed, kStreamExpIndep, rep, slot);
      std::vector<Snapshot> snaps;
      snaps.reserve(static_cast<std::size_t>(nup));
      if (cfg.exact) {
        for (long r = 1; r <= nup; ++r) {
          const MeasurementSetting ms = sample_setting(seed, static_cast<int>(r), n);
          snaps.push_back(snapshot_from_outcomes(exact_outcomes(reduced_comp, ms, support),
                                                 SnapshotKind::standard));
        }
      } else {
        const Dataset ds = sample_dataset(*companion, static_cast<int>(nup), cfg.nm_prime, seed);
        for (const auto& rec : ds.records)
          snaps.push_back(
              snapshot_from_outcomes(marginal_outcomes(rec, support), SnapshotKind::standard));
      }
      indep_pool[idx] = detail::make_batches_ragged(snaps, m);
    });
  }

  // Per-task estimates, arm-major inside each slot.
  std::vector<std::vector<detail::RepEstimate>> results(g_count * reps);
  detail::parallel_for(g_count * reps, [&](std::size_t task) {
    const std::size_t g = task / reps, rep = task % reps;
    const int nu = cfg.nu_grid[g];
    const std::uint64_t data_seed = derive_stream(cfg.seed, kStreamExpData, g, rep);

    std::vector<MeasurementSetting> settings;
    std::vector<SupportOutcomes> ocs;
    settings.reserve(static_cast<std::size_t>(nu));
    ocs.reserve(static_cast<std::size_t>(nu));
    if (cfg.exact) {
      for (int r = 1; r <= nu; ++r) {
        settings.push_back(sample_setting(data_seed, r, n));
        ocs.push_back(exact_outcomes(reduced_main, settings.back(), support));
      }
    } else {
      const Dataset ds = sample_dataset(rho, nu, cfg.nm, data_seed);
      for (const auto& rec : ds.records) {
        settings.push_back(rec.setting);
        ocs.push_back(marginal_outcomes(rec, support));
      }
    }

    std::vector<detail::RepEstimate> ests;
    ests.reserve(arms.size());

    if (cfg.experiment == ExperimentKind::fidelity) {
      for (const auto& arm : arms) {
        const EstimateReport rep_report = estimate_fidelity(ocs, arm.sigma, arm.target, support);
        ests.push_back({rep_report.value, rep_report.std_error});
      }
      results[task] = std::move(ests);
      return;
    }

    // Entropy-flavored experiments share the standard snapshots across arms.
    std::vector<Snapshot> std_snaps;
    std_snaps.reserve(ocs.size());
    for (const auto& oc : ocs)
      std_snaps.push_back(snapshot_from_outcomes(oc, SnapshotKind::standard));
    const std::vector<BatchShadow> std_batches = make_batches(std_snaps, m);

    std::vector<BatchShadow> shared_batches;
    if (cfg.experiment == ExperimentKind::companion) {
      const std::uint64_t shared_seed = derive_stream(cfg.seed, kStreamExpShared, g, rep);
      std::vector<Snapshot> sig_snaps;
      sig_snaps.reserve(ocs.size());
      if (cfg.exact) {
        for (const auto& ms : settings)
          sig_snaps.push_back(snapshot_from_outcomes(exact_outcomes(reduced_comp, ms, support),
                                                     SnapshotKind::standard));
      } else {
        const Dataset ds =
            sample_dataset_with_settings(*companion, settings, cfg.nm_prime, shared_seed);
        for (const auto& rec : ds.records)
          sig_snaps.push_back(
              snapshot_from_outcomes(marginal_outcomes(rec, support), SnapshotKind::standard));
      }
      shared_batches = make_batches(sig_snaps, m);
    }

    for (std::size_t a = 0; a < arms.size(); ++a) {
      const auto& arm = arms[a];
      EstimateReport rep_report;
      if (arm.estimator == "standard") {
        rep_report = estimate_entropy_poly(std_batches, cfg.n_max);
      } else if (arm.estimator == "crm") {
        std::vector<Snapshot> crm_snaps;
        crm_snaps.reserve(ocs.size());
        for (std::size_t i = 0; i < ocs.size(); ++i) {
          const Snapshot sig = caches[a]->get(ocs[i].setting);
          crm_snaps.push_back(build_crm_snapshot(std_snaps[i], sig, caches[a]->sigma()));
        }
        rep_report = estimate_entropy_poly(make_batches(crm_snaps, m), cfg.n_max);
      } else {
        const auto& indep = indep_pool[rep * cfg.nu_prime.size() + arm.indep_slot];
        const std::vector<BatchShadow> comp =
            build_companion_batches(std_batches, shared_batches, indep);
        rep_report = estimate_entropy_poly(comp, cfg.n_max);
      }
      ests.push_back({rep_report.value, rep_report.std_error});
    }
    results[task] = std::move(ests);
  });

  // Aggregate into rows, deterministic nested order.
  ResultTable table;
  const long nm_column = cfg.exact ? 0 : cfg.nm;
  for (std::size_t g = 0; g < g_count; ++g) {
    for (std::size_t a = 0; a < arms.size(); ++a) {
      std::vector<double> values;
      values.reserve(reps);
      for (std::size_t rep = 0; rep < reps; ++rep)
        values.push_back(results[g * reps + rep][a].value);
      const auto [mean, sem] = detail::mean_and_sem(values);
      const double spread = reps >= 2 ? sem : results[g * reps][a].err;

      const auto push_row = [&](double reference) {
        double abs_err = 0;
        for (double v : values) abs_err += std::abs(v - reference) / static_cast<double>(reps);
        ResultRow row;
        row.experiment = std::string(experiment_name(cfg.experiment));
        row.n = n;
        row.n_a = n_a;
        row.nu = cfg.nu_grid[g];
        row.nm = nm_column;
        row.prior = arms[a].label;
        row.estimator = arms[a].estimator;
        row.value = mean;
        row.std_error = spread;
        row.exact_reference = reference;
        row.rel_error = reference != 0.0 ? abs_err / std::abs(reference) : abs_err;
        table.rows.push_back(std::move(row));
      };
      if (subsystem) {
        push_row(ref_poly);
        push_row(ref_exact);
      } else {
        push_row(arms[a].reference);
      }
    }
  }
  return table;
}

}  // namespace crm
