#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "hibrto/experiment.hpp"

namespace fs = std::filesystem;
using namespace hibrto;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
};

ExperimentConfig resolve(const Common& o) {
  ExperimentConfig c = load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.workers) c.workers = *o.workers;
  if (!o.out.empty()) c.output = o.out;
  const auto errs = validate(c);
  if (!errs.empty()) throw ConfigError(errs);
  return c;
}

int cmd_run(const Common& o) {
  const ExperimentConfig c = resolve(o);
  const RunResult r = run_experiment(c, c.output);
  std::cout << "wrote";
  for (const auto& f : r.files) std::cout << ' ' << (r.directory / f).string();
  std::cout << '\n';
  return 0;
}

int cmd_gen_data(const Common& o) {
  ExperimentConfig c = resolve(o);
  if (o.seed) c.data.seed = *o.seed;
  const SyntheticData d = generate_data(c);
  fs::create_directories(c.output);
  const fs::path path = fs::path(c.output) / "data.csv";
  io::write_file(path, io::to_csv(data_table(d.y, &d.noise_free)));
  Json meta = {{"problem", c.problem},   {"data_n", c.data_n()},  {"seed", c.data.seed},
               {"lambda_true", d.lambda_true}, {"m", d.y.size()}, {"hash", io::file_hash(path)}};
  io::write_file(fs::path(c.output) / "data.json", meta.dump(2) + "\n");
  std::cout << "wrote " << path.string() << '\n';
  return 0;
}

int cmd_prior_sample(const Common& o, std::size_t count) {
  const ExperimentConfig c = resolve(o);
  const Grid grid = make_grid(c.problem, c.n);
  const PriorOperators ops(grid);
  HyperParams t;
  if (c.sampler.theta) t = *c.sampler.theta;
  t.gamma = std::clamp(t.gamma, c.hyperprior.gamma_lo, c.hyperprior.gamma_hi);
  const PriorModel prior(std::make_shared<const PriorOperators>(ops), Vector::Zero(grid.size()), t.delta, t.gamma);
  Rng rng(c.seed);
  std::vector<Vector> draws;
  for (std::size_t k = 0; k < count; ++k) draws.push_back(prior.sample(rng));
  fs::create_directories(c.output);
  const fs::path path = fs::path(c.output) / "prior_samples.bin";
  io::write_file(path, io::encode_u_matrix(draws));
  std::vector<Index> idx;
  std::vector<double> coord;
  slice_of(grid, idx, coord);
  if (count >= 2) io::write_file(fs::path(c.output) / "prior_bands.csv", io::to_csv(band_table(draws, idx, coord)));
  std::cout << "wrote " << path.string() << '\n';
  return 0;
}

int cmd_diagnose(const std::string& chain, std::size_t burn_in, std::size_t maxlag, const std::string& u_draws,
                 const std::string& slice, const std::string& out) {
  const io::Table t = io::read_csv(chain);
  const auto cols = diagnose_table(t, burn_in, maxlag);
  const fs::path dir = out.empty() ? fs::path(chain).parent_path() : fs::path(out);
  if (!dir.empty()) fs::create_directories(dir);
  io::write_file(dir / "diagnostics.json", diagnostics_json(cols, burn_in).dump(2) + "\n");
  io::write_file(dir / "acf.csv", io::to_csv(acf_table(cols)));
  for (const auto& d : cols) {
    if (!d.stats) std::cerr << "column " << d.name << ": " << d.error << '\n';
  }
  if (!u_draws.empty()) {
    const Matrix u = io::decode_u_matrix(io::read_file(u_draws), u_draws);
    const Index n = u.cols();
    const Grid grid = slice == "diagonal" ? make_grid("pet2d", n) : make_grid("elliptic1d", n);
    if (grid.size() != n) throw DomainError("u-matrix width does not fit a " + slice + " slice");
    std::vector<Index> idx;
    std::vector<double> coord;
    slice_of(grid, idx, coord);
    std::vector<Vector> draws;
    for (Index r = 0; r < u.rows(); ++r) draws.push_back(u.row(r).transpose());
    io::write_file(dir / "bands.csv", io::to_csv(band_table(draws, idx, coord)));
  }
  std::cout << "wrote " << (dir / "diagnostics.json").string() << '\n';
  return 0;
}

void add_common(CLI::App* app, Common& o, bool need_config = true) {
  app->add_option("--config", o.config, "experiment config (JSON)")->required(need_config)->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "override the seed");
  app->add_option("--workers", o.workers, "parallel RTO solves (default: HIBRTO_WORKERS or 1)");
  app->add_option("--out", o.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical Bayesian inversion with randomize-then-optimize samplers"};
  app.require_subcommand(1);

  Common run_o, gen_o, prior_o;
  auto* run = app.add_subcommand("run", "run a sampler and write chains, diagnostics and a manifest");
  add_common(run, run_o);
  auto* gen = app.add_subcommand("gen-data", "write the synthetic data set of a config");
  add_common(gen, gen_o);
  auto* prior = app.add_subcommand("prior-sample", "draw from the prior at the config's theta");
  add_common(prior, prior_o);
  std::size_t count = 10;
  prior->add_option("--count", count, "number of draws")->check(CLI::PositiveNumber);

  auto* diag = app.add_subcommand("diagnose", "ACF, IACT and quantiles of a chains.csv file");
  std::string chain, u_draws, slice = "line", diag_out;
  std::size_t burn_in = 0, maxlag = 200;
  diag->add_option("chain", chain, "chain CSV")->required()->check(CLI::ExistingFile);
  diag->add_option("--burn-in", burn_in, "rows to drop");
  diag->add_option("--maxlag", maxlag, "largest ACF lag reported");
  diag->add_option("--u-draws", u_draws, "u-matrix file for credible bands")->check(CLI::ExistingFile);
  diag->add_option("--slice", slice, "band slice: line (1D) or diagonal (2D)")
      ->check(CLI::IsMember({"line", "diagonal"}));
  diag->add_option("--out", diag_out, "output directory (default: next to the chain)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_o);
    if (*gen) return cmd_gen_data(gen_o);
    if (*prior) return cmd_prior_sample(prior_o, count);
    if (*diag) return cmd_diagnose(chain, burn_in, maxlag, u_draws, slice, diag_out);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 1;
  } catch (const io::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
