// Command-line front end for the shadow-estimation library.  Subcommands map
// onto the artifact's deliverables: `simulate` writes measurement datasets,
// `estimate` evaluates the estimators on a stored dataset, `exp` runs the
// configured experiment drivers, `coeffs` prints the entropy polynomial, and
// `bounds` evaluates the closed-form variance bounds.
//
// Every failure exits nonzero after printing a single `error: <message>` line
// to stderr; configuration problems name the offending field in the message.

#include <cstdint>
#include <exception>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "crm/experiments.hpp"
#include "crm/variance.hpp"

namespace {

using namespace crm;

std::vector<int> leading_qubits(int k) {
  std::vector<int> q(static_cast<std::size_t>(k));
  std::iota(q.begin(), q.end(), 0);
  return q;
}

// Priors on the command line are either absent or loaded from a state file;
// rank-truncated priors need the simulator state and live in the experiment
// configs instead.
std::optional<PseudoState> parse_prior_flag(const std::string& text,
                                            std::span<const int> support) {
  if (text.empty() || text == "none") return std::nullopt;
  if (text.rfind("file:", 0) == 0) {
    const std::string path = text.substr(5);
    if (path.empty()) throw config_error("prior: file descriptor needs a path");
    Matrix m = load_state_file(path);
    if (m.rows() != (1L << support.size()))
      throw config_error(fmt::format(
          "prior: matrix dimension {} does not match the {}-qubit support", m.rows(),
          support.size()));
    if (!is_hermitian(m)) throw config_error("prior: prior matrix must be hermitian");
    return PseudoState(std::vector<int>(support.begin(), support.end()), std::move(m));
  }
  throw config_error("prior: unknown descriptor '" + text + "' (use none or file:<path>)");
}

void print_report(const EstimateReport& rep) {
  fmt::print("value = {:.12g}\n", rep.value);
  fmt::print("stderr = {:.12g}\n", rep.std_error);
  fmt::print("settings = {}\n", rep.nu);
  fmt::print("shots = {}\n", rep.nm);
}

// Snapshots of a dataset restricted to a support, with or without the
// control-variate shift.
std::vector<Snapshot> dataset_snapshots(const Dataset& ds, std::span<const int> support,
                                        const std::optional<PseudoState>& sigma) {
  std::vector<Snapshot> out;
  out.reserve(ds.records.size());
  for (const auto& rec : ds.records) {
    const SupportOutcomes oc = marginal_outcomes(rec, support);
    out.push_back(sigma ? build_crm_snapshot(oc, *sigma)
                        : snapshot_from_outcomes(oc, SnapshotKind::standard));
  }
  return out;
}

int check_subsystem(const char* field, int k, int n) {
  if (k < 1) throw config_error(std::string(field) + ": subsystem size must be at least 1");
  if (k > n) throw config_error(std::string(field) + ": subsystem exceeds the register");
  return k;
}

struct CoeffsOpts {
  int n_max = 0;
};

void run_coeffs(const CoeffsOpts& o) {
  if (o.n_max < 1 || o.n_max > 12)
    throw config_error("nmax: polynomial degree must be between 1 and 12");
  const EntropyPolynomial poly = entropy_poly_coeffs(o.n_max);
  for (int n = 1; n <= o.n_max; ++n)
    fmt::print("a_{} = {:.12g}\n", n, poly.a[static_cast<std::size_t>(n - 1)]);
  fmt::print("alpha_{} = {:.12g}\n", o.n_max, entropy_error_bound(o.n_max, 1));
}

struct SimulateOpts {
  std::string state;
  int nu = 0;
  long nm = 0;
  std::uint64_t seed = 0;
  std::string out;
};

void run_simulate(const SimulateOpts& o) {
  if (o.nu < 1) throw config_error("nu: setting count must be at least 1");
  if (o.nm < 1) throw config_error("nm: shot count must be at least 1");
  const DensityState st = make_state(o.state);
  const Dataset ds = sample_dataset(st, o.nu, o.nm, o.seed, o.state);
  save_dataset(ds, o.out);
  fmt::print("wrote {} records to {}\n", ds.records.size(), o.out);
}

struct EstimateOpts {
  std::string data;
  std::string prior = "none";
  std::string gamma;   // pauli
  std::string target;  // fidelity
  int n_a = 0;         // moment, entropy
  int order = 0;       // moment
  int n_max = 0;       // entropy
  int batches = 0;     // moment, entropy; 0 picks the minimum usable count
};

void run_estimate_pauli(const EstimateOpts& o) {
  const Dataset ds = load_dataset(o.data);
  PauliString gamma;
  try {
    gamma = PauliString(o.gamma);
  } catch (const std::exception& e) {
    throw config_error(std::string("gamma: ") + e.what());
  }
  if (static_cast<int>(gamma.size()) != ds.meta.n)
    throw config_error("gamma: Pauli string length does not match the dataset register");
  const std::vector<int> support = gamma.support();
  print_report(estimate_pauli(ds, parse_prior_flag(o.prior, support), gamma));
}

void run_estimate_moment(const EstimateOpts& o) {
  const Dataset ds = load_dataset(o.data);
  check_subsystem("na", o.n_a, ds.meta.n);
  if (o.order < 1) throw config_error("order: moment order must be at least 1");
  const int m = o.batches > 0 ? o.batches : o.order;
  const std::vector<int> support = leading_qubits(o.n_a);
  const auto sigma = parse_prior_flag(o.prior, support);
  const auto batches = make_batches(dataset_snapshots(ds, support, sigma), m);
  print_report(estimate_trace_moment(batches, o.order));
}

void run_estimate_entropy(const EstimateOpts& o) {
  const Dataset ds = load_dataset(o.data);
  check_subsystem("na", o.n_a, ds.meta.n);
  if (o.n_max < 1) throw config_error("nmax: polynomial degree must be at least 1");
  const int m = o.batches > 0 ? o.batches : o.n_max;
  const std::vector<int> support = leading_qubits(o.n_a);
  const auto sigma = parse_prior_flag(o.prior, support);
  const auto batches = make_batches(dataset_snapshots(ds, support, sigma), m);
  print_report(estimate_entropy_poly(batches, o.n_max));
}

void run_estimate_fidelity(const EstimateOpts& o) {
  const Dataset ds = load_dataset(o.data);
  const StateDescriptor desc = parse_state_descriptor(o.target, "target");
  // Noiseless circuits stay pure but make_state stores them as matrices,
  // so rebuild the vector directly for that case.
  const DensityState target =
      (desc.kind == StateDescriptor::Kind::circuit && desc.circuit.p == 0.0)
          ? DensityState::from_vector(random_circuit_vector(desc.circuit))
          : make_state(desc);
  if (!target.pure())
    throw config_error("target: fidelity targets must be pure states "
                       "(chain ground states or noiseless circuits)");
  if (target.qubits() != ds.meta.n)
    throw config_error("target: qubit count does not match the dataset register");
  const std::vector<int> support = leading_qubits(ds.meta.n);
  const auto sigma = parse_prior_flag(o.prior, support);
  print_report(estimate_fidelity(ds, sigma, target.vector(), support));
}

struct ExpOpts {
  std::string config;
};

void run_exp(const ExpOpts& o, ExperimentKind expected) {
  const ExperimentConfig cfg = parse_config_file(o.config);
  if (cfg.experiment != expected)
    throw config_error(fmt::format("experiment: config file requests '{}' but the subcommand is '{}'",
                                   experiment_name(cfg.experiment), experiment_name(expected)));
  if (cfg.output.empty())
    throw config_error("output: required when running through the exp subcommand");
  const ResultTable table = run_experiment(cfg);
  write_csv(table, cfg.output);
  fmt::print("wrote {} rows to {}\n", table.rows.size(), cfg.output);
}

struct BoundsOpts {
  int n_a = 0;
  double t = 0;
  double o1_norm_sq = 0;
  double diff_sq = 0;
  int copies = 0;
  double nu = 0;
  double nm = 0;
};

void run_bounds_pauli(const BoundsOpts& o) {
  fmt::print("variance_bound = {:.12g}\n", pauli_variance_bound(o.n_a, o.t, o.nu, o.nm));
}

void run_bounds_mco(const BoundsOpts& o) {
  const VarianceBoundReport rep =
      mco_variance_bound(o.n_a, o.o1_norm_sq, o.diff_sq, o.copies, o.nu, o.nm);
  fmt::print("setting_noise = {:.12g}\n", rep.setting_noise);
  fmt::print("shot_noise = {:.12g}\n", rep.shot_noise);
  fmt::print("variance_bound = {:.12g}\n", rep.bound);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Classical shadows with common randomized measurements"};
  app.require_subcommand(1);

  CoeffsOpts co;
  auto* coeffs = app.add_subcommand(
      "coeffs", "Print the entropy polynomial coefficients and the truncation error per unit rank");
  coeffs->add_option("--nmax", co.n_max, "polynomial degree (1..12)")->required();
  coeffs->callback([&co] { run_coeffs(co); });

  SimulateOpts so;
  auto* simulate =
      app.add_subcommand("simulate", "Sample a randomized-measurement dataset and write it as JSONL");
  simulate->add_option("--state", so.state, "state descriptor, e.g. ising:N=8 or circuit:N=4:d=2:p=0:seed=1")
      ->required();
  simulate->add_option("--nu", so.nu, "number of measurement settings")->required();
  simulate->add_option("--nm", so.nm, "shots per setting")->required();
  simulate->add_option("--seed", so.seed, "sampling seed")->required();
  simulate->add_option("--out", so.out, "output dataset path")->required();
  simulate->callback([&so] { run_simulate(so); });

  EstimateOpts eo;
  auto* estimate = app.add_subcommand("estimate", "Evaluate an estimator on a stored dataset");
  estimate->require_subcommand(1);

  auto* est_pauli = estimate->add_subcommand("pauli", "Pauli expectation value");
  est_pauli->add_option("--data", eo.data, "dataset path")->required();
  est_pauli->add_option("--gamma", eo.gamma, "Pauli string over {I,X,Y,Z}, one letter per qubit")
      ->required();
  est_pauli->add_option("--prior", eo.prior, "none or file:<path> (matrix on the observable support)");
  est_pauli->callback([&eo] { run_estimate_pauli(eo); });

  auto* est_moment = estimate->add_subcommand("moment", "Trace moment of a reduced state");
  est_moment->add_option("--data", eo.data, "dataset path")->required();
  est_moment->add_option("--na", eo.n_a, "subsystem size (leading qubits)")->required();
  est_moment->add_option("--order", eo.order, "moment order n for Tr[rho_A^n]")->required();
  est_moment->add_option("--batches", eo.batches, "batch count (default: the moment order)");
  est_moment->add_option("--prior", eo.prior, "none or file:<path> (matrix on the subsystem)");
  est_moment->callback([&eo] { run_estimate_moment(eo); });

  auto* est_entropy = estimate->add_subcommand("entropy", "Polynomial von Neumann entropy proxy");
  est_entropy->add_option("--data", eo.data, "dataset path")->required();
  est_entropy->add_option("--na", eo.n_a, "subsystem size (leading qubits)")->required();
  est_entropy->add_option("--nmax", eo.n_max, "polynomial degree")->required();
  est_entropy->add_option("--batches", eo.batches, "batch count (default: the polynomial degree)");
  est_entropy->add_option("--prior", eo.prior, "none or file:<path> (matrix on the subsystem)");
  est_entropy->callback([&eo] { run_estimate_entropy(eo); });

  auto* est_fidelity = estimate->add_subcommand("fidelity", "Fidelity with a pure target state");
  est_fidelity->add_option("--data", eo.data, "dataset path")->required();
  est_fidelity->add_option("--target", eo.target, "pure target state descriptor")->required();
  est_fidelity->add_option("--prior", eo.prior, "none or file:<path> (matrix on the full register)");
  est_fidelity->callback([&eo] { run_estimate_fidelity(eo); });

  ExpOpts xo;
  auto* exp = app.add_subcommand("exp", "Run a configured experiment and write its CSV table");
  exp->require_subcommand(1);
  for (const ExperimentKind kind :
       {ExperimentKind::entropy, ExperimentKind::fidelity, ExperimentKind::companion}) {
    auto* sub = exp->add_subcommand(std::string(experiment_name(kind)),
                                    "Experiment driver; see the config file format in the README");
    sub->add_option("--config", xo.config, "key-value config file")->required();
    sub->callback([&xo, kind] { run_exp(xo, kind); });
  }

  BoundsOpts bo;
  auto* bounds = app.add_subcommand("bounds", "Evaluate closed-form variance bounds");
  bounds->require_subcommand(1);

  auto* b_pauli = bounds->add_subcommand(
      "pauli", "Single-copy Pauli bound 3^|A| (t^2 + 1/NM) / NU with t = Tr[gamma (rho - sigma)]");
  b_pauli->add_option("--na", bo.n_a, "observable support size |A|")->required();
  b_pauli->add_option("--t", bo.t, "prior bias Tr[gamma (rho - sigma)]")->required();
  b_pauli->add_option("--nu", bo.nu, "number of settings")->required();
  b_pauli->add_option("--nm", bo.nm, "shots per setting (inf allowed)")->required();
  b_pauli->callback([&bo] { run_bounds_pauli(bo); });

  auto* b_mco = bounds->add_subcommand(
      "mco", "Multi-copy bound n^2 |O1|^2 (3^|A| |rho - sigma|^2 + 2^|A|/NM) / NU");
  b_mco->add_option("--na", bo.n_a, "observable support size |A|")->required();
  b_mco->add_option("--o2", bo.o1_norm_sq, "squared Frobenius norm of the one-copy operator")
      ->required();
  b_mco->add_option("--delta2", bo.diff_sq, "squared Frobenius norm of rho_A - sigma_A")->required();
  b_mco->add_option("--copies", bo.copies, "copy count n of the multi-copy observable")->required();
  b_mco->add_option("--nu", bo.nu, "number of settings")->required();
  b_mco->add_option("--nm", bo.nm, "shots per setting (inf allowed)")->required();
  b_mco->callback([&bo] { run_bounds_mco(bo); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
