#include "simlab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <sstream>
#include <thread>

#include "estimator.hpp"
#include "seed.hpp"

namespace mlmgof {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

} // namespace

double icc_to_variance(double icc) {
  if (!(icc > 0.0 && icc < 1.0))
    throw std::invalid_argument("icc must be in (0, 1)");
  return icc * (kPi * kPi / 3.0) / (1.0 - icc);
}

MonteCarloBounds monte_carlo_bounds(double alpha, long reps) {
  if (!(alpha > 0.0 && alpha < 1.0) || reps < 1)
    throw std::invalid_argument("need 0 < alpha < 1 and reps >= 1");
  const double half = 1.96 * std::sqrt(alpha * (1.0 - alpha) / static_cast<double>(reps));
  return {std::max(0.0, alpha - half), std::min(1.0, alpha + half)};
}

const char* misspec_name(Misspec m) {
  switch (m) {
    case Misspec::None: return "none";
    case Misspec::Quadratic: return "quadratic";
    case Misspec::Interaction: return "interaction";
    case Misspec::OmittedLevel: return "omitted_level";
  }
  return "unknown";
}

long Scenario::total_rows() const {
  if (!level2_sizes.empty()) {
    long n_total = 0;
    for (int s : level2_sizes) n_total += s;
    return n_total;
  }
  return static_cast<long>(J) * K * n;
}

Dataset generate_dataset(const Scenario& sc, std::uint64_t rep_seed) {
  std::mt19937_64 eng(rep_seed);
  std::uniform_real_distribution<double> x1_dist(-3.0, 3.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> stdnorm(0.0, 1.0);

  RawTable table;
  table.covariate_names = {"x1", "x2"};
  table.rows.reserve(sc.total_rows());

  const double var_total = icc_to_variance(sc.icc);

  if (!sc.level2_sizes.empty()) {
    // Two-level design: level-2 clusters under one synthetic family.
    const double sd_u = std::sqrt(var_total);
    table.has_level3 = false;
    for (std::size_t k = 0; k < sc.level2_sizes.size(); ++k) {
      const double u = sd_u * stdnorm(eng);
      const double w = sc.slope_sd * stdnorm(eng);
      for (int i = 0; i < sc.level2_sizes[k]; ++i) {
        RawRecord r;
        r.level2 = "s" + std::to_string(k + 1);
        const double x1 = x1_dist(eng);
        const double x2 = unif(eng) < 0.5 ? 1.0 : 0.0;
        double eta = sc.beta0 + sc.beta1 * x1 + sc.beta2 * x2 + u + w * x2;
        if (sc.misspec == Misspec::Quadratic) eta += sc.misspec_param * x1 * x1;
        if (sc.misspec == Misspec::Interaction) eta += sc.misspec_param * x1 * x2;
        r.outcome = unif(eng) < invlogit(eta) ? 1.0 : 0.0;
        r.covariates = {x1, x2};
        table.rows.push_back(std::move(r));
      }
    }
    return validate_dataset(table);
  }

  // Three-level design of the main data-generating process: family
  // intercept v_j, subject intercept u_kj, subject slope w_kj on x2, the
  // total latent intercept variance split evenly across the two levels.
  const double sd_v = std::sqrt(var_total / 2.0);
  const double sd_u = std::sqrt(var_total / 2.0);
  table.has_level3 = true;
  for (int j = 0; j < sc.J; ++j) {
    const double v = sd_v * stdnorm(eng);
    const double extra =
        sc.misspec == Misspec::OmittedLevel ? sc.misspec_param * stdnorm(eng) : 0.0;
    for (int k = 0; k < sc.K; ++k) {
      const double u = sd_u * stdnorm(eng);
      const double w = sc.slope_sd * stdnorm(eng);
      for (int i = 0; i < sc.n; ++i) {
        RawRecord r;
        r.level3 = "f" + std::to_string(j + 1);
        r.level2 = "f" + std::to_string(j + 1) + "s" + std::to_string(k + 1);
        const double x1 = x1_dist(eng);
        const double x2 = unif(eng) < 0.5 ? 1.0 : 0.0;
        double eta = sc.beta0 + sc.beta1 * x1 + sc.beta2 * x2 + v + extra + u + w * x2;
        if (sc.misspec == Misspec::Quadratic) eta += sc.misspec_param * x1 * x1;
        if (sc.misspec == Misspec::Interaction) eta += sc.misspec_param * x1 * x2;
        r.outcome = unif(eng) < invlogit(eta) ? 1.0 : 0.0;
        r.covariates = {x1, x2};
        table.rows.push_back(std::move(r));
      }
    }
  }
  return validate_dataset(table);
}

ModelSpec scenario_model_spec(const Scenario& sc) {
  ModelSpec spec;
  spec.fixed = {"x1", "x2"};
  spec.random.level2.intercept = true;
  spec.random.level2.slopes = {"x2"};
  spec.random.level2.structure = CovStructure::Independent;
  if (sc.fit_three_level && sc.level2_sizes.empty() &&
      sc.misspec != Misspec::OmittedLevel) {
    spec.random.level3.intercept = true;
    spec.random.level3.structure = CovStructure::Independent;
  }
  return spec;
}

std::vector<Scenario> scenario_catalog() {
  std::vector<Scenario> out;

  // Part 1: Type I error grid.
  for (int J : {15, 30, 50})
    for (int K : {5, 10})
      for (int n : {10, 20})
        for (double icc : {0.10, 0.30}) {
          Scenario sc;
          sc.part = 1;
          sc.J = J;
          sc.K = K;
          sc.n = n;
          sc.icc = icc;
          std::ostringstream id;
          id << "p1_J" << J << "_K" << K << "_n" << n << "_icc"
             << static_cast<int>(icc * 100);
          sc.id = id.str();
          out.push_back(std::move(sc));
        }

  // Part 2: power grids at J=30, K=5, n=20, ICC=0.20.
  auto part2_base = [] {
    Scenario sc;
    sc.part = 2;
    sc.J = 30;
    sc.K = 5;
    sc.n = 20;
    sc.icc = 0.20;
    return sc;
  };
  for (double b3 : {0.02, 0.05, 0.10, 0.15}) {
    Scenario sc = part2_base();
    sc.misspec = Misspec::Quadratic;
    sc.misspec_param = b3;
    sc.id = "p2_quadratic_" + fmt(b3, 3);
    out.push_back(std::move(sc));
  }
  for (double b3 : {0.3, 0.6, 0.9}) {
    Scenario sc = part2_base();
    sc.misspec = Misspec::Interaction;
    sc.misspec_param = b3;
    sc.id = "p2_interaction_" + fmt(b3, 3);
    out.push_back(std::move(sc));
  }
  for (double se : {0.5, 1.0, 1.5}) {
    Scenario sc = part2_base();
    sc.misspec = Misspec::OmittedLevel;
    sc.misspec_param = se;
    sc.fit_three_level = false;
    sc.id = "p2_omitted_level_" + fmt(se, 3);
    out.push_back(std::move(sc));
  }

  // Part 3: group-rule sensitivity, each design under both rules.
  for (bool balanced : {false, true})
    for (int n_small : {3, 5, 6, 8, 10})
      for (bool forced : {false, true}) {
        Scenario sc;
        sc.part = 3;
        sc.icc = 0.20;
        if (balanced) {
          sc.level2_sizes.assign(50, n_small);
        } else {
          sc.level2_sizes.assign(10, n_small);
          sc.level2_sizes.insert(sc.level2_sizes.end(), 40, 20);
        }
        sc.gof_rule = forced ? GroupRule::fixed(10) : GroupRule::automatic();
        sc.fit_three_level = false;
        std::ostringstream id;
        id << "p3_" << (balanced ? "balanced" : "unbalanced") << "_n" << n_small
           << (forced ? "_g10" : "_auto");
        sc.id = id.str();
        out.push_back(std::move(sc));
      }
  return out;
}

ScenarioSummary run_scenario(const Scenario& sc, long reps,
                             std::uint64_t master_seed, const SimOptions& opts) {
  enum class Outcome : int { Accept, Reject, FailGrouping, FailEstimation };
  std::vector<Outcome> results(reps);

  FitOptions fit_opts;
  fit_opts.nodes = opts.nodes;
  fit_opts.max_iter = opts.max_iter;
  fit_opts.tol = opts.tol;
  const ModelSpec spec = scenario_model_spec(sc);

  auto run_one = [&](long rep) {
    const std::uint64_t seed = derive_seed(master_seed, sc.id, static_cast<std::uint64_t>(rep));
    const Dataset ds = generate_dataset(sc, seed);
    const GofResult res = run_test(ds, spec, sc.gof_rule, fit_opts);
    if (res.ok)
      return res.p_value < opts.alpha ? Outcome::Reject : Outcome::Accept;
    return res.failure == GofFailure::DegenerateIndicators ||
                   res.failure == GofFailure::TooFewObservations
               ? Outcome::FailGrouping
               : Outcome::FailEstimation;
  };

  const int jobs = std::max(1, opts.jobs);
  if (jobs == 1) {
    for (long rep = 0; rep < reps; ++rep) results[rep] = run_one(rep);
  } else {
    std::atomic<long> next{0};
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (int t = 0; t < jobs; ++t)
      pool.emplace_back([&] {
        for (long rep = next.fetch_add(1); rep < reps; rep = next.fetch_add(1))
          results[rep] = run_one(rep);
      });
    for (auto& th : pool) th.join();
  }

  ScenarioSummary s;
  s.replications = reps;
  s.seed = master_seed;
  for (long rep = 0; rep < reps; ++rep) {
    switch (results[rep]) {
      case Outcome::Reject: s.rejections += 1; break;
      case Outcome::Accept: break;
      case Outcome::FailGrouping:
        s.failures += 1;
        s.grouping_failures += 1;
        break;
      case Outcome::FailEstimation:
        s.failures += 1;
        s.estimation_failures += 1;
        break;
    }
  }
  const long valid = reps - s.failures;
  s.rejection_rate = valid > 0 ? static_cast<double>(s.rejections) / valid : 0.0;
  s.failure_rate = static_cast<double>(s.failures) / reps;
  if (valid > 0) {
    const MonteCarloBounds b = monte_carlo_bounds(opts.alpha, valid);
    s.mc_lower = b.lower;
    s.mc_upper = b.upper;
  }
  return s;
}

std::string summary_csv_header() {
  return "scenario_id,part,J,K,n,icc,misspec,param,rule,reps,rejections,"
         "failures,rejection_rate,failure_rate,mc_lower,mc_upper,master_seed";
}

std::string summary_csv_row(const Scenario& sc, const ScenarioSummary& s,
                            long reps, std::uint64_t master_seed) {
  std::ostringstream os;
  os.precision(10);
  const bool part3 = !sc.level2_sizes.empty();
  const long n_small = part3 ? *std::min_element(sc.level2_sizes.begin(),
                                                 sc.level2_sizes.end())
                             : sc.n;
  os << sc.id << "," << sc.part << ","
     << (part3 ? static_cast<long>(sc.level2_sizes.size()) : sc.J) << ","
     << (part3 ? 0 : sc.K) << "," << n_small << "," << sc.icc << ","
     << misspec_name(sc.misspec) << "," << sc.misspec_param << ","
     << sc.gof_rule.label() << "," << reps << "," << s.rejections << ","
     << s.failures << "," << s.rejection_rate << "," << s.failure_rate << ","
     << s.mc_lower << "," << s.mc_upper << "," << master_seed;
  return os.str();
}

} // namespace mlmgof
