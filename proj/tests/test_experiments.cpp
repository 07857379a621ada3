#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "crm/experiments.hpp"
#include "test_helpers.hpp"

using namespace crm;
using crmtest::max_abs_diff;

namespace {

// Runs fn and returns the config_error message, or empty if it did not throw.
template <typename Fn>
std::string config_message(Fn&& fn) {
  try {
    fn();
  } catch (const config_error& e) {
    return e.what();
  }
  return {};
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream is(text);
  return parse_config_text(is);
}

std::string parse_error(const std::string& text) {
  return config_message([&] { parse(text); });
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("configuration files parse explicit fields", "[experiments]") {
  const ExperimentConfig cfg = parse(
      "# chain entropy scan\n"
      "experiment = entropy\n"
      "state = ising:N=8\n"
      "priors = none, mps:chi=2, exact\n"
      "n_max = 2\n"
      "N_A = 4   # half chain\n"
      "N_U = 8,16\n"
      "N_M = 100\n"
      "\n"
      "repetitions = 3\n"
      "seed = 41\n"
      "output = out.csv\n");
  CHECK(cfg.experiment == ExperimentKind::entropy);
  CHECK(cfg.state.text == "ising:N=8");
  CHECK(cfg.priors == std::vector<std::string>{"none", "mps:chi=2", "exact"});
  CHECK(cfg.n_max == 2);
  CHECK(cfg.n_a == 4);
  CHECK(cfg.nu_grid == std::vector<int>{8, 16});
  CHECK(cfg.nm == 100);
  CHECK_FALSE(cfg.exact);
  CHECK(cfg.repetitions == 3);
  CHECK(cfg.seed == 41);
  CHECK(cfg.output == "out.csv");

  const ExperimentConfig comp = parse(
      "experiment = companion\n"
      "state = ising:N=6\n"
      "companion_state = ising:N=6:eps=0.02:seed=4\n"
      "priors = none\n"
      "n_max = 2\n"
      "N_A = 3\n"
      "N_U = 8\n"
      "N_U_prime = 10,200\n"
      "N_M = 50\n"
      "repetitions = 2\n"
      "seed = 7\n");
  CHECK(comp.companion_state.text == "ising:N=6:eps=0.02:seed=4");
  CHECK(comp.nu_prime == std::vector<long>{10, 200});
  CHECK(comp.nm_prime == 50);  // defaults to N_M when absent
  CHECK(comp.output.empty());

  const ExperimentConfig ex = parse(
      "experiment = entropy\nstate = ising:N=4\npriors = none\nn_max = 2\nN_A = 2\n"
      "N_U = 4\nrepetitions = 1\nexact = true\nseed = 3\n");
  CHECK(ex.exact);
  CHECK(ex.nm == 0);
}

TEST_CASE("configuration errors name the offending field", "[experiments]") {
  using Catch::Matchers::ContainsSubstring;
  const std::string base =
      "experiment = entropy\nstate = ising:N=6\npriors = none\nn_max = 2\nN_A = 3\n"
      "N_U = 4\nN_M = 10\nrepetitions = 1\nseed = 5\n";

  CHECK_THAT(parse_error("state = ising:N=4\n"), ContainsSubstring("experiment:"));
  CHECK_THAT(parse_error("experiment = purity\n"), ContainsSubstring("experiment: must be"));
  CHECK_THAT(parse_error("experiment = entropy\n"), ContainsSubstring("state:"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\n"),
             ContainsSubstring("priors:"));
  CHECK_THAT(parse_error(base + "output = a\nN_U = 8\n"), ContainsSubstring("N_U: duplicated"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\npriors = none\n"
                         "n_max = 2\nN_A = 3\nN_M = 10\nrepetitions = 1\nseed = 5\n"),
             ContainsSubstring("N_U:"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\npriors = none\nn_max = 2\n"
                         "N_A = 3\nN_U = 0\nN_M = 10\nrepetitions = 1\nseed = 5\n"),
             ContainsSubstring("N_U: grid values must be at least 1"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\npriors = none\nn_max = 3\n"
                         "N_A = 3\nN_U = 8\nN_M = 10\nrepetitions = 1\nseed = 5\n"),
             ContainsSubstring("multiples of n_max"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\npriors = none\nn_max = 2\n"
                         "N_A = 3\nN_U = 4\nN_M = 10\nseed = 5\n"),
             ContainsSubstring("repetitions:"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\npriors = none\nn_max = 2\n"
                         "N_A = 3\nN_U = 4\nN_M = 10\nrepetitions = 1\n"),
             ContainsSubstring("seed: mandatory"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\npriors = none\nn_max = 2\n"
                         "N_A = 3\nN_U = 4\nrepetitions = 1\nseed = 5\n"),
             ContainsSubstring("N_M: missing"));
  CHECK_THAT(parse_error(base + "exact = true\n"), ContainsSubstring("N_M: not used"));
  CHECK_THAT(parse_error(base + "exact = maybe\n"), ContainsSubstring("exact: expected"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\npriors = none\nn_max = 2\n"
                         "N_U = 4\nN_M = 10\nrepetitions = 1\nseed = 5\n"),
             ContainsSubstring("N_A: subsystem size is required"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ising:N=6\npriors = none\nN_A = 3\n"
                         "N_U = 4\nN_M = 10\nrepetitions = 1\nseed = 5\n"),
             ContainsSubstring("n_max:"));
  CHECK_THAT(parse_error("experiment = fidelity\nstate = ising:N=4\npriors = none\nN_A = 2\n"
                         "N_U = 4\nN_M = 10\nrepetitions = 1\nseed = 5\n"),
             ContainsSubstring("N_A: not used by fidelity"));
  CHECK_THAT(parse_error("experiment = fidelity\nstate = ising:N=4\npriors = none\n"
                         "N_U = 4\nN_M = 10\nrepetitions = 1\nseed = 5\n"),
             ContainsSubstring("priors: fidelity experiments"));
  CHECK_THAT(parse_error(base + "companion_state = ising:N=6\n"),
             ContainsSubstring("companion_state: only used"));
  CHECK_THAT(parse_error(base + "N_U_prime = 4\n"), ContainsSubstring("N_U_prime: only used"));

  const std::string comp_base =
      "experiment = companion\nstate = ising:N=6\npriors = none\nn_max = 2\nN_A = 3\n"
      "N_U = 4\nN_M = 10\nrepetitions = 1\nseed = 5\n";
  CHECK_THAT(parse_error(comp_base), ContainsSubstring("companion_state: required"));
  CHECK_THAT(parse_error(comp_base + "companion_state = ising:N=6\n"),
             ContainsSubstring("N_U_prime: required"));
  CHECK_THAT(parse_error(comp_base + "companion_state = ising:N=6\nN_U_prime = 1\n"),
             ContainsSubstring("N_U_prime: values must be at least n_max"));
  CHECK_THAT(
      parse_error("experiment = companion\nstate = ising:N=6\npriors = exact\nn_max = 2\n"
                  "N_A = 3\nN_U = 4\nN_M = 10\nrepetitions = 1\nseed = 5\n"
                  "companion_state = ising:N=6\nN_U_prime = 4\n"),
      ContainsSubstring("priors: companion experiments"));

  CHECK_THAT(parse_error(base + "chi = 3\n"), ContainsSubstring("unknown key 'chi'"));
  CHECK_THAT(parse_error(base + "just a line\n"), ContainsSubstring("malformed line"));
  CHECK_THAT(parse_error(base + "label =\n"), ContainsSubstring("malformed line"));
  CHECK_THAT(parse_error("experiment = entropy\nstate = ghz:N=4\n"),
             ContainsSubstring("state: unknown state kind"));

  CHECK_THROWS_AS(parse_config_file(temp_path("crm_missing_config.cfg")), config_error);
}

TEST_CASE("exact mode with a perfect prior reproduces the polynomial reference",
          "[experiments]") {
  const ResultTable t = run_experiment(parse(
      "experiment = entropy\nstate = ising:N=6\npriors = none,exact\nn_max = 2\nN_A = 3\n"
      "N_U = 8\nrepetitions = 1\nexact = true\nseed = 5\n"));
  REQUIRE(t.rows.size() == 4);  // two arms, two reference rows each

  const ResultRow& std_poly = t.rows[0];
  const ResultRow& std_full = t.rows[1];
  const ResultRow& crm_poly = t.rows[2];
  const ResultRow& crm_full = t.rows[3];
  CHECK(std_poly.estimator == "standard");
  CHECK(std_poly.prior == "none");
  CHECK(crm_poly.estimator == "crm");
  CHECK(crm_poly.prior == "exact");
  CHECK(std_poly.experiment == "entropy");
  CHECK(std_poly.n == 6);
  CHECK(std_poly.n_a == 3);
  CHECK(std_poly.nu == 8);
  CHECK(std_poly.nm == 0);  // exact mode reports zero shots

  // The truncated-polynomial reference differs from the exact entropy.
  CHECK(std_poly.exact_reference < std_full.exact_reference);
  CHECK(std_poly.exact_reference == crm_poly.exact_reference);

  // A perfect prior in exact mode pins every snapshot to the reduced state.
  CHECK(crm_poly.rel_error < 1e-12);
  CHECK(crm_poly.value == Catch::Approx(crm_poly.exact_reference).margin(1e-12));
  CHECK(crm_poly.std_error == 0.0);
  CHECK(crm_full.value == crm_poly.value);
  CHECK(std_poly.rel_error > 0.01);
}

TEST_CASE("sampled control variates reduce the entropy error on a chain", "[experiments]") {
  const ResultTable t = run_experiment(parse(
      "experiment = entropy\nstate = ising:N=8\npriors = none,exact\nn_max = 2\nN_A = 4\n"
      "N_U = 16\nN_M = 200\nrepetitions = 6\nseed = 31\n"));
  REQUIRE(t.rows.size() == 4);
  const ResultRow& std_poly = t.rows[0];
  const ResultRow& crm_poly = t.rows[2];
  CHECK(crm_poly.rel_error < std_poly.rel_error);
  CHECK(crm_poly.std_error < std_poly.std_error);
  CHECK(std_poly.nm == 200);

  // Identical configuration reproduces identical numbers.
  const ResultTable again = run_experiment(parse(
      "experiment = entropy\nstate = ising:N=8\npriors = none,exact\nn_max = 2\nN_A = 4\n"
      "N_U = 16\nN_M = 200\nrepetitions = 6\nseed = 31\n"));
  REQUIRE(again.rows.size() == t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    CHECK(again.rows[i].value == t.rows[i].value);
    CHECK(again.rows[i].std_error == t.rows[i].std_error);
    CHECK(again.rows[i].rel_error == t.rows[i].rel_error);
  }
}

TEST_CASE("fidelity experiments track the overlap with each prior", "[experiments]") {
  // Noiseless circuit: every prior yields a standard and a control-variate
  // estimate of the same overlap, on the same records.
  const ResultTable clean = run_experiment(parse(
      "experiment = fidelity\nstate = circuit:N=4:d=2:p=0:seed=3\n"
      "priors = exact,mps:chi=4,mps:chi=1\nN_U = 12\nN_M = 200\nrepetitions = 3\nseed = 9\n"));
  REQUIRE(clean.rows.size() == 6);
  for (const ResultRow& r : clean.rows) {
    CHECK(r.experiment == "fidelity");
    CHECK(r.n_a == 4);  // full register
    CHECK(std::abs(r.value - r.exact_reference) <= 3.0 * r.std_error + 1e-9);
  }
  CHECK(clean.rows[0].estimator == "standard");
  CHECK(clean.rows[1].estimator == "crm");
  CHECK(clean.rows[1].prior == "exact");
  // A full-rank truncation is the ideal state again.
  CHECK(clean.rows[0].exact_reference == Catch::Approx(1.0).margin(1e-10));
  CHECK(clean.rows[2].exact_reference == Catch::Approx(1.0).margin(1e-10));
  CHECK(clean.rows[2].value == Catch::Approx(clean.rows[0].value).margin(1e-12));
  // Truncating to a product state lowers the true overlap below 1.
  CHECK(clean.rows[4].exact_reference == Catch::Approx(0.877246).margin(1e-5));
  // The perfect prior removes most of the setting noise.
  CHECK(clean.rows[1].std_error < clean.rows[0].std_error);

  // Depolarized circuit: references drop and stay covered for both priors.
  const ResultTable noisy = run_experiment(parse(
      "experiment = fidelity\nstate = circuit:N=4:d=3:p=0.05:seed=11\npriors = exact,mps:chi=1\n"
      "N_U = 30\nN_M = 500\nrepetitions = 4\nseed = 13\n"));
  REQUIRE(noisy.rows.size() == 4);
  CHECK(noisy.rows[0].exact_reference == Catch::Approx(0.704420).margin(1e-5));
  CHECK(noisy.rows[2].exact_reference == Catch::Approx(0.524727).margin(1e-5));
  for (const ResultRow& r : noisy.rows)
    CHECK(std::abs(r.value - r.exact_reference) <= 3.0 * r.std_error + 1e-9);
}

TEST_CASE("companion pools shrink the error as their budget grows", "[experiments]") {
  const ResultTable t = run_experiment(parse(
      "experiment = companion\nstate = ising:N=6\ncompanion_state = ising:N=6:eps=0.02:seed=4\n"
      "priors = none\nn_max = 2\nN_A = 3\nN_U = 8,16\nN_U_prime = 10,200\nN_M = 100\n"
      "repetitions = 4\nseed = 77\n"));
  // two grid points, three arms (standard + two pools), two reference rows
  REQUIRE(t.rows.size() == 12);
  CHECK(t.rows[0].estimator == "standard");
  CHECK(t.rows[2].prior == "companion:NUp=10");
  CHECK(t.rows[2].estimator == "companion");
  CHECK(t.rows[4].prior == "companion:NUp=200");
  for (int g = 0; g < 2; ++g) {
    const ResultRow& small_pool = t.rows[static_cast<std::size_t>(g * 6 + 2)];
    const ResultRow& large_pool = t.rows[static_cast<std::size_t>(g * 6 + 4)];
    CHECK(large_pool.rel_error < small_pool.rel_error);
  }

  // A distinct companion shot budget shows up in the arm label.
  const ResultTable labeled = run_experiment(parse(
      "experiment = companion\nstate = ising:N=4\ncompanion_state = ising:N=4\n"
      "priors = none\nn_max = 2\nN_A = 2\nN_U = 4\nN_U_prime = 8\nN_M = 20\nN_M_prime = 50\n"
      "repetitions = 1\nseed = 2\n"));
  CHECK(labeled.rows[2].prior == "companion:NUp=8:NMp=50");

  // Exact mode runs all three data sources without shot noise.
  const ResultTable exact = run_experiment(parse(
      "experiment = companion\nstate = ising:N=6\ncompanion_state = ising:N=6\npriors = none\n"
      "n_max = 2\nN_A = 3\nN_U = 8\nN_U_prime = 64\nrepetitions = 2\nexact = true\nseed = 21\n"));
  REQUIRE(exact.rows.size() == 4);
  for (const ResultRow& r : exact.rows) {
    CHECK(r.nm == 0);
    CHECK(std::isfinite(r.value));
  }
}

TEST_CASE("csv output is stable and escapes awkward fields", "[experiments]") {
  const ExperimentConfig cfg = parse(
      "experiment = entropy\nstate = ising:N=6\npriors = none,exact\nn_max = 2\nN_A = 3\n"
      "N_U = 4\nN_M = 50\nrepetitions = 2\nseed = 12\n");
  const ResultTable t = run_experiment(cfg);
  std::ostringstream s1, s2;
  write_csv(t, s1);
  write_csv(run_experiment(cfg), s2);
  CHECK(s1.str() == s2.str());

  std::istringstream lines(s1.str());
  std::string header;
  std::getline(lines, header);
  CHECK(header == "experiment,N,N_A,N_U,N_M,prior,estimator,value,stderr,exact_reference,rel_error");
  std::size_t count = 0;
  for (std::string line; std::getline(lines, line);) ++count;
  CHECK(count == t.rows.size());

  // Fields containing separators are quoted; quotes are doubled.
  ResultTable awkward;
  ResultRow row;
  row.experiment = "entropy";
  row.prior = "file:/tmp/a,b\"c";
  row.estimator = "crm";
  awkward.rows.push_back(row);
  std::ostringstream sa;
  write_csv(awkward, sa);
  CHECK(sa.str().find("\"file:/tmp/a,b\"\"c\"") != std::string::npos);

  // File output round trips through the stream writer.
  const std::string path = temp_path("crm_experiments_out.csv");
  write_csv(t, path);
  std::ifstream back(path);
  std::stringstream file_body;
  file_body << back.rdbuf();
  CHECK(file_body.str() == s1.str());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(write_csv(t, "/nonexistent-dir/out.csv"), validation_error);
}

TEST_CASE("ragged batching covers every snapshot exactly once", "[experiments]") {
  const DensityState rho = crmtest::random_density(2, 606);
  const Dataset ds = sample_dataset(rho, 7, 10, 42);
  std::vector<int> sup{0, 1};
  std::vector<Snapshot> snaps;
  for (const auto& rec : ds.records)
    snaps.push_back(snapshot_from_outcomes(marginal_outcomes(rec, sup), SnapshotKind::standard));

  const auto batches = detail::make_batches_ragged(snaps, 3);
  REQUIRE(batches.size() == 3);
  long total = 0;
  Matrix weighted = Matrix::Zero(4, 4);
  for (const auto& b : batches) {
    CHECK(b.members >= 2);
    total += b.members;
    weighted += b.matrix * static_cast<double>(b.members);
  }
  CHECK(total == 7);
  Matrix direct = Matrix::Zero(4, 4);
  for (const auto& s : snaps) direct += s.matrix;
  CHECK(max_abs_diff(weighted, direct) < 1e-12);

  // A single batch is the plain mean; more batches than snapshots fails.
  const auto one = detail::make_batches_ragged(snaps, 1);
  CHECK(max_abs_diff(one[0].matrix, Matrix(direct / 7.0)) < 1e-14);
  CHECK_THROWS_AS(detail::make_batches_ragged(std::span<const Snapshot>(snaps.data(), 2), 3),
                  std::invalid_argument);
}

TEST_CASE("prior resolution rejects malformed descriptors", "[experiments]") {
  using Catch::Matchers::ContainsSubstring;
  const DensityState rho = DensityState::from_vector(ising_ground_state(IsingSpec::plain(4)));
  const std::optional<Vector> ideal = rho.vector();
  const std::vector<int> sup{0, 1};

  const PseudoState exact = detail::resolve_prior("exact", rho, ideal, sup);
  CHECK(max_abs_diff(exact.matrix, partial_trace(rho, sup)) == 0.0);

  const PseudoState mps = detail::resolve_prior("mps:chi=1", rho, ideal, sup);
  CHECK(mps.matrix.rows() == 4);
  CHECK(std::abs(mps.matrix.trace().real() - 1.0) < 1e-10);

  CHECK_THAT(config_message([&] { detail::resolve_prior("mps:chi=0", rho, ideal, sup); }),
             ContainsSubstring("priors.chi"));
  CHECK_THAT(config_message([&] { detail::resolve_prior("mps:rank=2", rho, ideal, sup); }),
             ContainsSubstring("unknown key"));
  CHECK_THAT(config_message([&] { detail::resolve_prior("mps:chi=2", rho, std::nullopt, sup); }),
             ContainsSubstring("priors:"));
  CHECK_THAT(config_message([&] { detail::resolve_prior("file:", rho, ideal, sup); }),
             ContainsSubstring("priors:"));
  CHECK_THAT(config_message([&] { detail::resolve_prior("tensor:chi=2", rho, ideal, sup); }),
             ContainsSubstring("unknown prior descriptor"));

  // File priors round trip and validate their shape.
  const std::string good = temp_path("crm_prior_good.bin");
  const Matrix h = crmtest::random_hermitian(2, 99);
  save_state_file(good, h);
  const PseudoState from_file = detail::resolve_prior("file:" + good, rho, ideal, sup);
  CHECK(max_abs_diff(from_file.matrix, h) == 0.0);
  std::filesystem::remove(good);

  const std::string wrong = temp_path("crm_prior_wrong.bin");
  save_state_file(wrong, crmtest::random_hermitian(3, 99));
  CHECK_THAT(config_message([&] { detail::resolve_prior("file:" + wrong, rho, ideal, sup); }),
             ContainsSubstring("does not match"));
  std::filesystem::remove(wrong);

  // Fidelity targets reuse the same descriptors but must stay pure.
  const Vector back = detail::resolve_pure_target("exact", ideal);
  CHECK((back - *ideal).norm() == 0.0);
  const Vector trunc = detail::resolve_pure_target("mps:chi=1", ideal);
  CHECK(std::abs(trunc.norm() - 1.0) < 1e-12);
  CHECK_THAT(config_message([&] { detail::resolve_pure_target("exact", std::nullopt); }),
             ContainsSubstring("state: fidelity experiments"));
  CHECK_THAT(config_message([&] { detail::resolve_pure_target("file:x.bin", ideal); }),
             ContainsSubstring("must be pure states"));
}

TEST_CASE("run-level validation names the offending field", "[experiments]") {
  using Catch::Matchers::ContainsSubstring;
  CHECK_THAT(config_message([] {
               run_experiment(parse(
                   "experiment = entropy\nstate = ising:N=4\npriors = none\nn_max = 2\n"
                   "N_A = 6\nN_U = 4\nN_M = 10\nrepetitions = 1\nseed = 1\n"));
             }),
             ContainsSubstring("N_A: subsystem exceeds the register"));
  CHECK_THAT(config_message([] {
               run_experiment(parse(
                   "experiment = companion\nstate = ising:N=4\ncompanion_state = ising:N=6\n"
                   "priors = none\nn_max = 2\nN_A = 2\nN_U = 4\nN_U_prime = 4\nN_M = 10\n"
                   "repetitions = 1\nseed = 1\n"));
             }),
             ContainsSubstring("companion_state: qubit count"));

  const std::string path = temp_path("crm_run_state.bin");
  save_state_file(path, crmtest::random_density_matrix(2, 5));
  CHECK_THAT(config_message([&] {
               run_experiment(parse("experiment = fidelity\nstate = file:" + path +
                                    "\npriors = exact\nN_U = 4\nN_M = 10\nrepetitions = 1\n"
                                    "seed = 1\n"));
             }),
             ContainsSubstring("state: fidelity experiments"));
  std::filesystem::remove(path);
}
