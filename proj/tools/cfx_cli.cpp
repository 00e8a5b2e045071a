// cfx: train the GCN, explain predictions, verbalize them through an LLM and score the extraction.
#include <CLI11.hpp>

#include <iostream>

#include "cfx/pipeline.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string backend;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "Override a config key, e.g. --set llm.temperature=0.2")->take_all();
  cmd->add_option("--backend", o.backend, "LLM backend")->check(CLI::IsMember({"mock", "live"}));
  cmd->add_option("--seed", o.seed, "Seed for sampling, training and the mock backend");
}

cfx::RunConfig resolve(const CommonOptions& o) {
  nlohmann::json j = cfx::to_json(o.config.empty() ? cfx::RunConfig{} : cfx::load_run_config(o.config));
  for (const auto& s : o.overrides) cfx::apply_override(j, s);
  if (!o.backend.empty()) j["backend"] = o.backend;
  if (o.seed) {
    j["seed"] = *o.seed;
    j["train"]["seed"] = *o.seed;
  }
  auto c = cfx::run_config_from_json(j);
  cfx::validate(c);
  return c;
}

cfx::GroupBy parse_group_by(const std::string& spec) {
  cfx::GroupBy by{false, false, false};
  std::stringstream ss(spec);
  for (std::string part; std::getline(ss, part, ',');) {
    if (part == "model") by.model_name = true;
    else if (part == "dataset") by.dataset = true;
    else if (part == "explainer") by.explainer = true;
    else throw cfx::ConfigError("unknown --group-by column: " + part);
  }
  return by;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual explanations of GCN predictions, verbalized by an LLM"};
  app.require_subcommand(1);

  CommonOptions train_opts, explain_opts, run_opts;
  auto* train = app.add_subcommand("train", "Train the GCN and write model.json");
  add_common(train, train_opts);

  auto* explain = app.add_subcommand("explain", "Compute counterfactuals for sampled nodes");
  add_common(explain, explain_opts);
  std::string checkpoint;
  explain->add_option("--checkpoint", checkpoint, "Model checkpoint (default: <output_dir>/model.json)")
      ->check(CLI::ExistingFile);

  auto* run = app.add_subcommand("run", "Explain, prompt the LLM, score and report; resumes an existing log");
  add_common(run, run_opts);
  std::optional<std::size_t> max_records;
  run->add_option("--max-records", max_records, "Stop after writing this many new records");

  auto* report = app.add_subcommand("report", "Aggregate a run log into report.md");
  std::string log_path, out_dir, group_by = "model,dataset,explainer";
  report->add_option("--log", log_path, "runs.jsonl to aggregate")->required();
  report->add_option("--out", out_dir, "Output directory (default: the log's directory)");
  report->add_option("--group-by", group_by, "Comma-separated subset of model,dataset,explainer");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      cfx::cmd_train(resolve(train_opts), std::cout);
    } else if (*explain) {
      const auto c = resolve(explain_opts);
      cfx::cmd_explain(c, std::cout,
                       checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint));
    } else if (*run) {
      const auto s = cfx::cmd_run(resolve(run_opts), std::cout, {.max_records = max_records});
      if (s.report) std::cout << '\n' << s.report->markdown;
    } else if (*report) {
      const std::filesystem::path log(log_path);
      auto dir = out_dir.empty() ? log.parent_path() : std::filesystem::path(out_dir);
      if (dir.empty()) dir = ".";
      std::cout << cfx::cmd_report(log, dir, parse_group_by(group_by)).markdown;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
