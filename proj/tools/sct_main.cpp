#include <iostream>

#include "CLI11.hpp"
#include "sct/commands.hpp"
#include "sct/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Spine MRI context transformer: phantom data, training, evaluation"};
  app.require_subcommand(1);

  sct::CommandArgs args;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Random seed (overrides the config's seed)");
    sub->add_option("--out", args.out, "Output directory")->required();
  };
  CLI::App* synth = app.add_subcommand("synth", "Generate a phantom dataset");
  CLI::App* train = app.add_subcommand("train", "Train a model and write checkpoint + history");
  CLI::App* eval = app.add_subcommand("eval", "Compute metrics and predictions for a checkpoint");
  CLI::App* attribute = app.add_subcommand("attribute", "Export slice/sequence attention and slicewise scores");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every parameter block");
  for (CLI::App* sub : {synth, train, eval, attribute, gradcheck}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : sct::kExitConfig;
  }

  for (CLI::App* sub : {synth, train, eval, attribute, gradcheck}) {
    if (sub->count("--seed") > 0) args.seed = seed;
  }
  try {
    if (*synth) sct::cmd_synth(args);
    if (*train) sct::cmd_train(args);
    if (*eval) sct::cmd_eval(args);
    if (*attribute) sct::cmd_attribute(args);
    if (*gradcheck && !sct::cmd_gradcheck(args)) return sct::kExitGradcheck;
  } catch (const std::exception& e) {
    std::cerr << "sct: " << e.what() << "\n";
    return sct::exit_code_for(e);
  }
  return 0;
}
