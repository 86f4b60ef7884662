#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hibrto/diagnostics.hpp"
#include "hibrto/elliptic.hpp"
#include "hibrto/io.hpp"
#include "hibrto/pet.hpp"
#include "hibrto/samplers.hpp"
#include "hibrto/synthetic.hpp"

namespace hibrto {

using Json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "0.1.0";

struct DataConfig {
  /// "generate" or "file".
  std::string source = "generate";
  std::string path;
  std::uint64_t seed = 1;
  /// Grid size used to generate data (finer than the inversion grid). 0 picks the problem default.
  Index n = 0;
  /// Elliptic: signal-to-noise ratio of the Gaussian noise.
  double snr = 100.0;
  /// PET: photon-count scale λ.
  double lambda_true = 1e4;
};

struct SamplerConfig {
  /// "gibbs", "pm" or "rto-mh".
  std::string type = "gibbs";
  std::size_t steps = 2000;
  std::size_t inner_steps = 1;
  std::size_t samples_per_step = 1;
  /// Defaults to 10% of `steps`.
  std::optional<std::size_t> burn_in;
  std::size_t u_thin = 10;
  /// Fixed θ for rto-mh, starting θ otherwise. Unset entries fall back to data-driven defaults.
  std::optional<HyperParams> theta;
  std::size_t adapt_start = 100;
  double initial_variance = 0.01;
  Index gamma_grid = GammaGrid::kDefaultPoints;

  std::size_t effective_burn_in() const { return burn_in ? *burn_in : steps / 10; }
};

struct ExperimentConfig {
  /// "elliptic1d" or "pet2d".
  std::string problem = "elliptic1d";
  /// Number of unknowns; a perfect square for pet2d.
  Index n = 256;
  DataConfig data;
  HyperPrior hyperprior;
  SamplerConfig sampler;
  TrustRegion trust_region;
  MapOptions map;
  SolverOptions solver;
  std::uint64_t seed = 1;
  /// 0 means HIBRTO_WORKERS or 1.
  int workers = 0;
  std::string output = "out";

  Index default_data_n() const { return problem == "pet2d" ? 6400 : 8192; }
  Index data_n() const { return data.n > 0 ? data.n : default_data_n(); }
};

/// Hyper-prior constants used for a problem kind.
inline HyperPrior default_hyperprior(const std::string& problem) {
  HyperPrior hp;
  if (problem == "pet2d") {
    hp.gamma_lo = 1e-3;
    hp.gamma_hi = 1e2;
  }
  return hp;
}

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors)
      : std::runtime_error(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& e) {
    std::string s = "invalid configuration:";
    for (const auto& x : e) s += "\n  " + x;
    return s;
  }
  std::vector<std::string> errors_;
};

namespace detail {

class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  /// Reports keys of `obj` not in `known`.
  void keys(const Json& obj, const std::string& where, std::initializer_list<const char*> known) {
    if (!obj.is_object()) {
      errors_.push_back((where.empty() ? std::string("config") : where) + " must be an object");
      return;
    }
    std::set<std::string> k(known.begin(), known.end());
    for (const auto& [key, _] : obj.items()) {
      if (!k.count(key)) errors_.push_back("unknown field " + name(where, key));
    }
  }

  template <class T>
  void get(const Json& obj, const std::string& where, const char* key, T& out) {
    if (!obj.is_object() || !obj.contains(key)) return;
    const Json& v = obj.at(key);
    const std::string field = name(where, key);
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return fail(field, "a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return fail(field, "a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return fail(field, "a number");
      out = v.get<double>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) return fail(field, "a non-negative integer");
      out = static_cast<T>(v.get<unsigned long long>());
    } else {
      if (!v.is_number_integer()) return fail(field, "an integer");
      out = static_cast<T>(v.get<long long>());
    }
  }

  static std::string name(const std::string& where, const std::string& key) {
    return where.empty() ? key : where + "." + key;
  }

 private:
  void fail(const std::string& field, const char* what) { errors_.push_back(field + " must be " + what); }
  std::vector<std::string>& errors_;
};

}  // namespace detail

/// Field-level validation; every problem is reported, not just the first.
inline std::vector<std::string> validate(const ExperimentConfig& c) {
  std::vector<std::string> e;
  if (c.problem != "elliptic1d" && c.problem != "pet2d") e.push_back("problem must be 'elliptic1d' or 'pet2d'");
  if (c.problem == "elliptic1d" && c.n < 4) e.push_back("n must be >= 4 for elliptic1d");
  const auto square_ok = [](Index n) {
    const auto s = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n))));
    return n >= 4 && s * s == n;
  };
  if (c.problem == "pet2d" && !square_ok(c.n)) e.push_back("n must be a perfect square >= 4 for pet2d");
  if (c.data.source != "generate" && c.data.source != "file") e.push_back("data.source must be 'generate' or 'file'");
  if (c.data.source == "file") {
    if (c.data.path.empty()) e.push_back("data.path is required when data.source is 'file'");
    else if (!std::filesystem::exists(c.data.path)) e.push_back("data.path '" + c.data.path + "' does not exist");
  }
  if (c.data.source == "generate") {
    if (c.problem == "elliptic1d" && c.data_n() < 4) e.push_back("data.n must be >= 4");
    if (c.problem == "pet2d" && !square_ok(c.data_n())) e.push_back("data.n must be a perfect square >= 4 for pet2d");
    if (!(c.data.snr > 0)) e.push_back("data.snr must be > 0");
    if (!(c.data.lambda_true > 0)) e.push_back("data.lambda_true must be > 0");
  }
  for (auto& s : c.hyperprior.validate()) e.push_back(s);
  const auto& s = c.sampler;
  if (s.type != "gibbs" && s.type != "pm" && s.type != "rto-mh") e.push_back("sampler.type must be 'gibbs', 'pm' or 'rto-mh'");
  if (s.steps < 1) e.push_back("sampler.N must be >= 1");
  if (s.inner_steps < 1) e.push_back("sampler.N_sub must be >= 1");
  if (s.samples_per_step < 1) e.push_back("sampler.K must be >= 1");
  if (s.effective_burn_in() >= s.steps) e.push_back("sampler.burn_in must be < sampler.N");
  if (!(s.initial_variance > 0)) e.push_back("sampler.initial_variance must be > 0");
  if (s.gamma_grid < 2) e.push_back("sampler.gamma_grid must be >= 2");
  if (s.theta) {
    if (!(s.theta->lambda > 0)) e.push_back("sampler.theta.lambda must be > 0");
    if (!(s.theta->delta > 0)) e.push_back("sampler.theta.delta must be > 0");
    if (!(s.theta->gamma >= c.hyperprior.gamma_lo && s.theta->gamma <= c.hyperprior.gamma_hi)) {
      e.push_back("sampler.theta.gamma must lie in [hyperprior.gamma_lo, hyperprior.gamma_hi]");
    }
  }
  if (!(c.trust_region.tau > 0 && c.trust_region.tau < 1)) e.push_back("trust_region.tau must lie in (0, 1)");
  if (c.map.max_iterations < 1) e.push_back("map.max_iterations must be >= 1");
  if (!(c.map.tolerance > 0)) e.push_back("map.tolerance must be > 0");
  if (c.solver.max_iterations < 1) e.push_back("solver.max_iterations must be >= 1");
  if (!(c.solver.tolerance > 0)) e.push_back("solver.tolerance must be > 0");
  if (c.workers < 0) e.push_back("workers must be >= 0");
  return e;
}

/// Parses and validates; throws ConfigError listing every problem found.
inline ExperimentConfig config_from_json(const Json& j) {
  std::vector<std::string> errors;
  detail::Reader r(errors);
  ExperimentConfig c;
  r.keys(j, "", {"problem", "n", "data", "hyperprior", "sampler", "trust_region", "map", "solver", "seed", "workers",
                 "output"});
  r.get(j, "", "problem", c.problem);
  c.hyperprior = default_hyperprior(c.problem);
  r.get(j, "", "n", c.n);
  r.get(j, "", "seed", c.seed);
  r.get(j, "", "workers", c.workers);
  r.get(j, "", "output", c.output);
  if (j.is_object() && j.contains("data")) {
    const Json& d = j["data"];
    r.keys(d, "data", {"source", "path", "seed", "n", "snr", "lambda_true"});
    r.get(d, "data", "source", c.data.source);
    r.get(d, "data", "path", c.data.path);
    r.get(d, "data", "seed", c.data.seed);
    r.get(d, "data", "n", c.data.n);
    r.get(d, "data", "snr", c.data.snr);
    r.get(d, "data", "lambda_true", c.data.lambda_true);
  }
  if (j.is_object() && j.contains("hyperprior")) {
    const Json& h = j["hyperprior"];
    r.keys(h, "hyperprior", {"alpha_lambda", "beta_lambda", "alpha_delta", "beta_delta", "alpha_gamma", "beta_gamma",
                             "gamma_lo", "gamma_hi"});
    r.get(h, "hyperprior", "alpha_lambda", c.hyperprior.alpha_lambda);
    r.get(h, "hyperprior", "beta_lambda", c.hyperprior.beta_lambda);
    r.get(h, "hyperprior", "alpha_delta", c.hyperprior.alpha_delta);
    r.get(h, "hyperprior", "beta_delta", c.hyperprior.beta_delta);
    r.get(h, "hyperprior", "alpha_gamma", c.hyperprior.alpha_gamma);
    r.get(h, "hyperprior", "beta_gamma", c.hyperprior.beta_gamma);
    r.get(h, "hyperprior", "gamma_lo", c.hyperprior.gamma_lo);
    r.get(h, "hyperprior", "gamma_hi", c.hyperprior.gamma_hi);
  }
  if (j.is_object() && j.contains("sampler")) {
    const Json& s = j["sampler"];
    r.keys(s, "sampler", {"type", "N", "N_sub", "K", "burn_in", "u_thin", "theta", "adapt_start", "initial_variance",
                          "gamma_grid"});
    r.get(s, "sampler", "type", c.sampler.type);
    r.get(s, "sampler", "N", c.sampler.steps);
    r.get(s, "sampler", "N_sub", c.sampler.inner_steps);
    r.get(s, "sampler", "K", c.sampler.samples_per_step);
    if (s.is_object() && s.contains("burn_in")) {
      std::size_t b = 0;
      r.get(s, "sampler", "burn_in", b);
      c.sampler.burn_in = b;
    }
    r.get(s, "sampler", "u_thin", c.sampler.u_thin);
    r.get(s, "sampler", "adapt_start", c.sampler.adapt_start);
    r.get(s, "sampler", "initial_variance", c.sampler.initial_variance);
    r.get(s, "sampler", "gamma_grid", c.sampler.gamma_grid);
    if (s.is_object() && s.contains("theta")) {
      const Json& t = s["theta"];
      HyperParams th;
      r.keys(t, "sampler.theta", {"lambda", "delta", "gamma"});
      if (!t.is_object() || !t.contains("lambda") || !t.contains("delta") || !t.contains("gamma")) {
        errors.push_back("sampler.theta needs lambda, delta and gamma");
      }
      r.get(t, "sampler.theta", "lambda", th.lambda);
      r.get(t, "sampler.theta", "delta", th.delta);
      r.get(t, "sampler.theta", "gamma", th.gamma);
      c.sampler.theta = th;
    }
  }
  if (j.is_object() && j.contains("trust_region")) {
    const Json& t = j["trust_region"];
    r.keys(t, "trust_region", {"enabled", "epsilon", "tau"});
    r.get(t, "trust_region", "enabled", c.trust_region.enabled);
    r.get(t, "trust_region", "epsilon", c.trust_region.epsilon);
    r.get(t, "trust_region", "tau", c.trust_region.tau);
  }
  if (j.is_object() && j.contains("map")) {
    const Json& m = j["map"];
    r.keys(m, "map", {"max_iterations", "tolerance"});
    r.get(m, "map", "max_iterations", c.map.max_iterations);
    r.get(m, "map", "tolerance", c.map.tolerance);
  }
  if (j.is_object() && j.contains("solver")) {
    const Json& m = j["solver"];
    r.keys(m, "solver", {"max_iterations", "tolerance", "damping"});
    r.get(m, "solver", "max_iterations", c.solver.max_iterations);
    r.get(m, "solver", "tolerance", c.solver.tolerance);
    r.get(m, "solver", "damping", c.solver.damping);
  }
  if (errors.empty()) errors = validate(c);
  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

/// Canonical form: every field, fixed key order. Used for hashing and the manifest.
inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["problem"] = c.problem;
  j["n"] = c.n;
  j["data"] = {{"source", c.data.source}, {"path", c.data.path},   {"seed", c.data.seed},
               {"n", c.data_n()},         {"snr", c.data.snr},     {"lambda_true", c.data.lambda_true}};
  const auto& h = c.hyperprior;
  j["hyperprior"] = {{"alpha_lambda", h.alpha_lambda}, {"beta_lambda", h.beta_lambda}, {"alpha_delta", h.alpha_delta},
                     {"beta_delta", h.beta_delta},     {"alpha_gamma", h.alpha_gamma}, {"beta_gamma", h.beta_gamma},
                     {"gamma_lo", h.gamma_lo},         {"gamma_hi", h.gamma_hi}};
  const auto& s = c.sampler;
  Json sj = {{"type", s.type},
             {"N", s.steps},
             {"N_sub", s.inner_steps},
             {"K", s.samples_per_step},
             {"burn_in", s.effective_burn_in()},
             {"u_thin", s.u_thin},
             {"adapt_start", s.adapt_start},
             {"initial_variance", s.initial_variance},
             {"gamma_grid", s.gamma_grid}};
  if (s.theta) sj["theta"] = {{"lambda", s.theta->lambda}, {"delta", s.theta->delta}, {"gamma", s.theta->gamma}};
  j["sampler"] = sj;
  j["trust_region"] = {{"enabled", c.trust_region.enabled}, {"epsilon", c.trust_region.epsilon},
                       {"tau", c.trust_region.tau}};
  j["map"] = {{"max_iterations", c.map.max_iterations}, {"tolerance", c.map.tolerance}};
  j["solver"] = {{"max_iterations", c.solver.max_iterations},
                 {"tolerance", c.solver.tolerance},
                 {"damping", c.solver.damping}};
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["output"] = c.output;
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) {
  Json j = config_to_json(c);
  // Neither affects the results.
  j.erase("workers");
  j.erase("output");
  return io::hex64(io::fnv1a(j.dump()));
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw io::ParseError(path.string(), 0, e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Problem assembly

struct Experiment {
  ExperimentConfig config;
  Grid grid;
  std::shared_ptr<const ForwardModel> model;
  std::shared_ptr<const PriorOperators> ops;
  std::optional<SyntheticData> data;
  std::shared_ptr<const BayesProblem> problem;
  /// Node/cell closest to s = 0.5 (1D) or the origin (2D).
  Index probe = 0;
  /// Indices and coordinate along the plotting slice (the whole line in 1D, the diagonal in 2D).
  std::vector<Index> slice;
  std::vector<double> slice_coord;
};

inline Grid make_grid(const std::string& problem, Index n) {
  if (problem == "pet2d") return Grid::square(static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n)))));
  return Grid::interval(n);
}

inline std::shared_ptr<const ForwardModel> make_model(const std::string& problem, const Grid& grid) {
  if (problem == "pet2d") return std::make_shared<PetModel2D>(grid, PetGeometry{});
  return std::make_shared<EllipticModel1D>(grid.size());
}

/// Synthetic data on the (finer) data grid.
inline SyntheticData generate_data(const ExperimentConfig& c) {
  const Grid fine = make_grid(c.problem, c.data_n());
  const auto model = make_model(c.problem, fine);
  const Vector truth = truth_on_grid(fine);
  Rng rng(c.data.seed);
  if (c.problem == "pet2d") return generate_poisson(*model, truth, c.data.lambda_true, rng);
  return generate_gaussian(*model, truth, snr_precision(model->evaluate(truth), c.data.snr), rng);
}

inline void slice_of(const Grid& grid, std::vector<Index>& idx, std::vector<double>& coord) {
  idx.clear();
  coord.clear();
  if (grid.dimension() == 1) {
    for (Index k = 0; k < grid.size(); ++k) {
      idx.push_back(k);
      coord.push_back(grid.point(k)[0]);
    }
  } else {
    for (Index i = 0; i < grid.side(); ++i) {
      idx.push_back(i + grid.side() * i);
      coord.push_back(grid.axis()[static_cast<std::size_t>(i)]);
    }
  }
}

inline Index nearest_point(const Grid& grid, std::array<double, 2> p) {
  Index best = 0;
  double bd = kInf;
  for (Index k = 0; k < grid.size(); ++k) {
    const auto q = grid.point(k);
    const double d = std::hypot(q[0] - p[0], q[1] - p[1]);
    if (d < bd - 1e-12) {
      bd = d;
      best = k;
    }
  }
  return best;
}

inline Experiment build_experiment(const ExperimentConfig& c) {
  Experiment e;
  e.config = c;
  e.grid = make_grid(c.problem, c.n);
  e.model = make_model(c.problem, e.grid);
  e.ops = std::make_shared<const PriorOperators>(e.grid);
  Vector y;
  if (c.data.source == "generate") {
    e.data = generate_data(c);
    y = e.data->y;
  } else {
    const io::Table t = io::read_csv(c.data.path);
    const auto& col = t.column("y");
    y = Eigen::Map<const Vector>(col.data(), static_cast<Index>(col.size()));
  }
  if (y.size() != e.model->output_dim()) {
    throw DomainError("data has " + std::to_string(y.size()) + " entries, the model produces " +
                      std::to_string(e.model->output_dim()));
  }
  const auto kind = c.problem == "pet2d" ? LikelihoodKind::poisson : LikelihoodKind::gaussian;
  e.problem = std::make_shared<const BayesProblem>(e.model, e.ops, Vector::Zero(e.grid.size()), c.hyperprior, y, kind);
  e.probe = nearest_point(e.grid, e.grid.midpoint());
  slice_of(e.grid, e.slice, e.slice_coord);
  return e;
}

/// θ given in the config, else (λ from the data generator or 1, δ = 1, γ = 1 clipped into the support).
inline HyperParams initial_theta(const Experiment& e) {
  if (e.config.sampler.theta) return *e.config.sampler.theta;
  HyperParams t;
  if (e.data) t.lambda = e.data->lambda_true;
  t.gamma = std::clamp(1.0, e.config.hyperprior.gamma_lo, e.config.hyperprior.gamma_hi);
  return t;
}

inline MapSettings map_settings(const ExperimentConfig& c) {
  MapSettings s;
  s.map = c.map;
  s.trust_region = c.trust_region;
  s.solver = c.solver;
  s.workers = resolve_workers(c.workers);
  return s;
}

// ---------------------------------------------------------------------------
// Running and persisting

/// Fixed-θ RTO-MH output recast as a chain record.
inline ChainRecord rto_mh_record(const Experiment& e, const HyperParams& theta, std::uint64_t seed) {
  const auto& s = e.config.sampler;
  const auto t0 = std::chrono::steady_clock::now();
  const RtoMhResult r = rto_mh(*e.problem, theta, s.steps, seed, map_settings(e.config));
  ChainRecord rec;
  rec.seed = seed;
  rec.burn_in = s.effective_burn_in();
  rec.failed_solves = r.failed;
  for (std::size_t i = 1; i <= s.steps; ++i) {
    const auto row = static_cast<Index>(i);
    const Vector u = r.chain.row(row).transpose();
    rec.theta.push_back(theta);
    rec.accept_u.push_back(r.chain.row(row) != r.chain.row(row - 1) ? 1.0 : 0.0);
    rec.accept_gamma.push_back(kNaN);
    rec.accept_theta.push_back(kNaN);
    rec.log_lk.push_back(e.problem->log_likelihood(u, theta.lambda));
    rec.u_probe.push_back(u[e.probe]);
    if (s.u_thin > 0 && i % s.u_thin == 0) {
      rec.u_draws.push_back(u);
      rec.u_steps.push_back(i - 1);
    }
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline ChainRecord run_sampler(const Experiment& e) {
  const auto& c = e.config;
  const auto& s = c.sampler;
  const HyperParams theta = initial_theta(e);
  if (s.type == "rto-mh") return rto_mh_record(e, theta, c.seed);
  if (s.type == "gibbs") {
    GibbsOptions opt;
    opt.steps = s.steps;
    opt.inner_steps = s.inner_steps;
    opt.burn_in = s.effective_burn_in();
    opt.u_thin = s.u_thin;
    opt.probe_index = e.probe;
    opt.gamma_grid_points = s.gamma_grid;
    opt.map = map_settings(c);
    return rto_within_gibbs(*e.problem, theta, e.problem->prior_mean(), opt, c.seed);
  }
  PmOptions opt;
  opt.steps = s.steps;
  opt.samples_per_step = s.samples_per_step;
  opt.burn_in = s.effective_burn_in();
  opt.adapt_start = s.adapt_start;
  opt.initial_variance = s.initial_variance;
  opt.u_thin = s.u_thin;
  opt.probe_index = e.probe;
  opt.map = map_settings(c);
  return rto_pm(*e.problem, theta, opt, c.seed);
}

inline const std::vector<std::string>& chain_columns() {
  static const std::vector<std::string> cols{"lambda", "delta", "gamma", "u_mid"};
  return cols;
}

inline io::Table chain_table(const ChainRecord& r) {
  io::Table t;
  std::vector<double> step(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) step[i] = static_cast<double>(i);
  t.add("step", step);
  t.add("lambda", r.lambda());
  t.add("delta", r.delta());
  t.add("gamma", r.gamma());
  t.add("accept_u", r.accept_u);
  t.add("accept_gamma", r.accept_gamma);
  t.add("accept_theta", r.accept_theta);
  t.add("log_lk", r.log_lk);
  t.add("u_mid", r.u_probe);
  return t;
}

struct ColumnDiagnostics {
  std::string name;
  std::optional<ChainStats> stats;
  std::string error;
};

/// Stats for every column of `t` except `step`, skipping the first `burn_in` rows and NaN-only columns.
inline std::vector<ColumnDiagnostics> diagnose_table(const io::Table& t, std::size_t burn_in, std::size_t maxlag) {
  std::vector<ColumnDiagnostics> out;
  for (std::size_t k = 0; k < t.header.size(); ++k) {
    if (t.header[k] == "step") continue;
    std::vector<double> x;
    bool any = false;
    for (std::size_t i = burn_in; i < t.columns[k].size(); ++i) {
      const double v = t.columns[k][i];
      if (std::isnan(v)) continue;
      any = true;
      x.push_back(v);
    }
    if (!any) continue;
    ColumnDiagnostics d;
    d.name = t.header[k];
    try {
      if (x.size() != t.columns[k].size() - std::min(burn_in, t.columns[k].size())) {
        throw DomainError("column mixes numbers and NaN");
      }
      if (x.size() < 3) throw std::invalid_argument("too few rows after burn-in");
      d.stats = chain_stats(x, std::min(maxlag, x.size() - 1));
    } catch (const std::exception& ex) {
      d.error = ex.what();
    }
    out.push_back(std::move(d));
  }
  return out;
}

inline Json diagnostics_json(const std::vector<ColumnDiagnostics>& cols, std::size_t burn_in) {
  Json j;
  j["burn_in"] = burn_in;
  Json c = Json::object();
  for (const auto& d : cols) {
    if (!d.stats) {
      c[d.name] = {{"error", d.error}};
      continue;
    }
    const auto& s = *d.stats;
    c[d.name] = {{"count", s.count},
                 {"mean", s.mean},
                 {"variance", s.variance},
                 {"iact", s.iact},
                 {"ess", s.ess},
                 {"q025", s.interval.lo},
                 {"median", s.interval.median},
                 {"q975", s.interval.hi}};
  }
  j["columns"] = c;
  return j;
}

inline io::Table acf_table(const std::vector<ColumnDiagnostics>& cols) {
  io::Table t;
  std::size_t lags = 0;
  for (const auto& d : cols) {
    if (d.stats) lags = std::max(lags, d.stats->acf.size());
  }
  std::vector<double> lag(lags);
  for (std::size_t j = 0; j < lags; ++j) lag[j] = static_cast<double>(j);
  t.add("lag", lag);
  for (const auto& d : cols) {
    if (!d.stats) continue;
    std::vector<double> v(lags, kNaN);
    std::copy(d.stats->acf.begin(), d.stats->acf.end(), v.begin());
    t.add(d.name, v);
  }
  return t;
}

inline io::Table band_table(const std::vector<Vector>& draws, const std::vector<Index>& slice,
                            const std::vector<double>& coord) {
  std::vector<Vector> sub;
  sub.reserve(draws.size());
  for (const auto& u : draws) {
    Vector s(static_cast<Index>(slice.size()));
    for (std::size_t k = 0; k < slice.size(); ++k) s[static_cast<Index>(k)] = u[slice[k]];
    sub.push_back(std::move(s));
  }
  const auto bands = credible_bands(sub);
  io::Table t;
  std::vector<double> lo, med, hi;
  for (const auto& b : bands) {
    lo.push_back(b.lo);
    med.push_back(b.median);
    hi.push_back(b.hi);
  }
  t.add("s", coord);
  t.add("q025", lo);
  t.add("median", med);
  t.add("q975", hi);
  return t;
}

inline io::Table data_table(const Vector& y, const Vector* noise_free) {
  io::Table t;
  t.add("y", std::vector<double>(y.data(), y.data() + y.size()));
  if (noise_free) t.add("noise_free", std::vector<double>(noise_free->data(), noise_free->data() + noise_free->size()));
  return t;
}

struct RunResult {
  ChainRecord record;
  std::filesystem::path directory;
  std::vector<std::string> files;
};

/// Runs the configured sampler and writes every artifact into `dir`.
inline RunResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(dir);
  const Experiment e = build_experiment(c);
  RunResult res;
  res.directory = dir;
  const auto write = [&](const std::string& name, std::string_view content) {
    io::write_file(dir / name, content);
    res.files.push_back(name);
  };
  if (e.data) write("data.csv", io::to_csv(data_table(e.data->y, &e.data->noise_free)));
  try {
    res.record = run_sampler(e);
  } catch (const std::exception& ex) {
    Json dump = {{"error", ex.what()},
                 {"config_hash", config_hash(c)},
                 {"seed", c.seed},
                 {"initial_theta", {initial_theta(e).lambda, initial_theta(e).delta, initial_theta(e).gamma}},
                 {"config", config_to_json(c)}};
    io::write_file(dir / "abort.json", dump.dump(2) + "\n");
    throw;
  }
  const ChainRecord& r = res.record;
  const std::size_t burn = c.sampler.effective_burn_in();

  write("chains.csv", io::to_csv(chain_table(r)));
  if (!r.u_draws.empty()) write("u_draws.bin", io::encode_u_matrix(r.u_draws));
  const auto cols = diagnose_table(chain_table(r), burn, 200);
  Json diag = diagnostics_json(cols, burn);
  const auto mean_after = [&](const std::vector<double>& v) { return r.mean_of(v, burn); };
  diag["acceptance"] = {{"u", mean_after(r.accept_u)},
                        {"gamma", mean_after(r.accept_gamma)},
                        {"theta", mean_after(r.accept_theta)}};
  diag["failed_solves"] = r.failed_solves;
  diag["failed_steps"] = r.failed_steps;
  write("diagnostics.json", diag.dump(2) + "\n");
  write("acf.csv", io::to_csv(acf_table(cols)));
  std::vector<Vector> kept;
  for (std::size_t k = 0; k < r.u_draws.size(); ++k) {
    if (r.u_steps[k] >= burn) kept.push_back(r.u_draws[k]);
  }
  if (!kept.empty()) write("bands.csv", io::to_csv(band_table(kept, e.slice, e.slice_coord)));

  Json m;
  m["version"] = kVersion;
  m["config_hash"] = config_hash(c);
  m["config"] = config_to_json(c);
  m["seed"] = c.seed;
  m["n"] = c.n;
  m["m"] = e.model->output_dim();
  m["sampler"] = c.sampler.type;
  m["K"] = c.sampler.samples_per_step;
  m["N_sub"] = c.sampler.inner_steps;
  m["workers"] = map_settings(c).workers;
  if (e.data) m["lambda_true"] = e.data->lambda_true;
  m["probe_index"] = e.probe;
  m["sampler_seconds"] = r.seconds;
  m["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Json files = Json::object();
  for (const auto& f : res.files) files[f] = io::file_hash(dir / f);
  m["files"] = files;
  io::write_file(dir / "manifest.json", m.dump(2) + "\n");
  res.files.push_back("manifest.json");
  return res;
}

}  // namespace hibrto
