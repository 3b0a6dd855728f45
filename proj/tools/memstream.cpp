// Command-line front end over the experiment pipeline. Configuration is
// resolved in layers — profile defaults, then MEMSTREAM_OUT, then the config
// file, then flags — echoed to stdout, and frozen next to every artifact.

#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "memstream/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "memstream — memory-augmented world-model experiment pipeline"};
  app.footer(
      "Stages: gen-data, pretrain-codec, train, eval, report, all.\n"
      "Each stage writes its artifacts and a frozen config under --out.");

  std::string stage;
  app.add_option("stage", stage,
                 "Pipeline stage: gen-data | pretrain-codec | train | eval | "
                 "report | all")
      ->required();

  std::string config_path;
  app.add_option("--config", config_path, "key=value config file");

  long seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "master random seed");
  std::string profile;
  auto* profile_opt =
      app.add_option("--profile", profile, "config profile: desk | paper");
  std::string encoder;
  auto* encoder_opt = app.add_option(
      "--encoder", encoder, "memory encoder: cache | ssm | titans | none");
  std::string injector;
  auto* injector_opt = app.add_option(
      "--injector", injector,
      "injector: prepend | additive | xattn | adanorm | lora | none");
  long horizon = 0;
  auto* horizon_opt =
      app.add_option("--horizon", horizon, "report/eval horizon");
  std::string out;
  auto* out_opt = app.add_option("--out", out, "output root directory");
  int parallel = 0;
  auto* parallel_opt = app.add_option(
      "--parallel", parallel, "worker threads for the experiment matrix");

  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::pair<std::string, std::string>> file_pairs;
    if (const char* env = std::getenv("MEMSTREAM_OUT")) {
      // Lowest-precedence default: a config file or --out overrides it.
      file_pairs.emplace_back("out", env);
    }
    if (!config_path.empty()) {
      for (auto& kv : memstream::parse_config_file(config_path)) {
        file_pairs.push_back(std::move(kv));
      }
    }

    std::vector<std::pair<std::string, std::string>> flag_pairs;
    if (*seed_opt) flag_pairs.emplace_back("seed", std::to_string(seed));
    if (*profile_opt) flag_pairs.emplace_back("profile", profile);
    if (*encoder_opt) flag_pairs.emplace_back("encoder", encoder);
    if (*injector_opt) flag_pairs.emplace_back("injector", injector);
    if (*horizon_opt) {
      flag_pairs.emplace_back("horizon", std::to_string(horizon));
    }
    if (*out_opt) flag_pairs.emplace_back("out", out);
    if (*parallel_opt) {
      flag_pairs.emplace_back("parallel", std::to_string(parallel));
    }

    const memstream::ExperimentConfig cfg =
        memstream::resolve_config(file_pairs, flag_pairs);
    std::cout << "# resolved config\n" << cfg.to_text() << std::flush;
    memstream::run_stage(stage, cfg);
    std::cout << "stage '" << stage << "' complete; artifacts under '"
              << cfg.out << "'\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
