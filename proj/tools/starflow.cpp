#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "starflow/experiments.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run(const std::string& name, const Options& o) {
  starflow::Config cfg = o.config.empty() ? starflow::Config{} : starflow::Config::from_file(o.config);
  const std::uint64_t config_seed = cfg.get<std::uint64_t>("seed", 0);
  starflow::RunContext ctx;
  ctx.seed = o.seed.value_or(config_seed);
  ctx.out = o.out.empty() ? std::filesystem::path("runs") / name : std::filesystem::path(o.out);
  const auto metrics = starflow::run_experiment(name, cfg, ctx);
  std::cout << metrics.dump(2) << '\n';
  std::cerr << "artifacts written to " << ctx.out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exact injective normalizing flows on star-like manifolds"};
  app.set_version_flag("--version", std::string(starflow::kVersion));
  app.require_subcommand(1);
  Options opts;
  for (const auto& [name, fn] : starflow::experiments()) {
    (void)fn;
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " experiment");
    sub->add_option("--config", opts.config, "flat JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", opts.out, "output directory (default runs/<experiment>)");
    sub->add_option("--seed", opts.seed, "random seed (overrides the config's seed)");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    return run(name, opts);
  } catch (const starflow::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const starflow::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
