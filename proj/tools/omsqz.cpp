// omsqz command-line front end.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "omsqz/cli.hpp"
#include "omsqz/errors.hpp"

int main(int argc, char** argv) {
  using namespace omsqz;
  CLI::App app{"Two-tone optomechanical squeezing: rates, spectra, synthetic data and fits"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", tool_version());

  std::string config_path;
  std::string out_dir = default_out_dir().string();
  std::string formats = "csv,json";
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  bool quiet = false;
  app.add_option("--out-dir", out_dir, "Output directory (default $OMSQZ_OUT_DIR or .)");
  app.add_option("--format", formats, "Comma-separated subset of csv, json, svg");
  app.add_option("--seed", seed, "Root seed, overrides the config");
  app.add_flag("-q,--quiet", quiet, "Do not list written files");

  const std::vector<std::pair<std::string, std::string>> commands{
      {"rates", "Derived rates and stability of a system config"},
      {"spectrum", "Model heterodyne spectrum and its components"},
      {"synth", "Synthetic drive-on/drive-off spectra"},
      {"fit", "Fit spectra read from CSV"},
      {"sweep", "Observables along a parameter axis"},
      {"experiment", "Repeated synthesize-and-fit campaign"},
      {"bias", "Bias of the fitted s at zero parametric drive"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "INI config file")->required()->check(CLI::ExistingFile);
    if (name == "bias") sub->add_option("--trials", trials, "Number of trials (>= 100)");
  }
  std::string manifest_path;
  auto* rerun = app.add_subcommand("rerun", "Repeat a run from its manifest.json");
  rerun->add_option("-m,--manifest", manifest_path, "manifest.json of an earlier run")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunOptions opt;
    opt.out_dir = out_dir;
    opt.formats = OutputFormats::parse(formats);
    opt.seed = seed;
    opt.trials = trials;
    if (!quiet) opt.log = &std::cerr;
    const auto* sub = app.get_subcommands().front();
    if (sub == rerun) {
      rerun_manifest(manifest_path, opt);
    } else {
      const auto cfg = ConfigFile::load(config_path);
      run_command(sub->get_name(), cfg, opt);
      if (sub->get_name() == "rates") std::cout << cmd_rates(cfg).table();
    }
  } catch (const std::exception& e) {
    const int rc = exit_code(e);
    std::cerr << "omsqz: " << e.what() << "\n";
    return rc;
  }
  return kExitOk;
}
