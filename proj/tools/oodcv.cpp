// oodcv: generate | pretrain | adapt | evaluate | ablate | defaults
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "oodcv/error.hpp"
#include "oodcv/experiment.hpp"

namespace fs = std::filesystem;
using namespace oodcv;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kIo = 3, kContract = 4, kUsage = 64 };

int report_error(const std::string& kind, const std::string& message,
                 const std::string& field, int code) {
  nlohmann::ordered_json j;
  j["error"] = {{"kind", kind}, {"field", field}, {"message", message}};
  std::cerr << j.dump() << std::endl;
  return code;
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;

  ExperimentConfig load() const {
    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
  fs::path data_dir(const ExperimentConfig& c) const {
    return data.empty() ? fs::path(c.output_dir) / "data" : fs::path(data);
  }
};

void add_common(CLI::App* cmd, Common& o, bool with_data) {
  cmd->add_option("--config", o.config_path, "Experiment config (JSON)");
  cmd->add_option("--seed", o.seed, "Root seed; overrides the config");
  cmd->add_option("--out", o.out, "Output directory");
  if (with_data) cmd->add_option("--data", o.data, "Dataset directory (default <output_dir>/data)");
}

void print_table(const MetricsReport& r) { std::cout << format_table(r); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nuisance-shift benchmark: generate, pretrain, adapt, evaluate"};
  app.require_subcommand(1);

  Common go, po, ao, eo, bo;
  auto* gen = app.add_subcommand("generate", "Generate the synthetic benchmark");
  add_common(gen, go, false);

  std::string variant = "STRONG";
  auto* pre = app.add_subcommand("pretrain", "Pretrain one variant");
  add_common(pre, po, true);
  pre->add_option("--variant", variant, "PLAIN | AUTO_CUTMIX | STRONG");

  std::string ckpt;
  AdaptMember member;
  bool p_given = false;
  auto* ada = app.add_subcommand("adapt", "Test-time training on unlabeled test images");
  add_common(ada, ao, true);
  ada->add_option("--checkpoint", ckpt, "Pretrained checkpoint")->required();
  auto* p_opt = ada->add_option("--p", member.p, "Clean-probability threshold");
  ada->add_option("--seed-index", member.seed_index, "TTT seed sub-stream index");

  std::vector<std::string> models;
  std::string mode = "SINGLE", name;
  auto* eva = app.add_subcommand("evaluate", "Evaluate checkpoints on the test splits");
  add_common(eva, eo, true);
  eva->add_option("--checkpoint", models, "Checkpoint file or adapt directory (repeatable)")
      ->required();
  eva->add_option("--mode", mode, "SINGLE | TENCROP | ENSEMBLE");
  eva->add_option("--name", name, "Row label in reports");

  bool ensemble = false;
  auto* abl = app.add_subcommand("ablate", "Full ablation chain");
  add_common(abl, bo, false);
  abl->add_flag("--ensemble", ensemble, "Also run the ensemble members");

  auto* def = app.add_subcommand("defaults", "Print the default config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("usage", e.what(), "", kUsage);
  }

  try {
    if (def->parsed()) {
      std::cout << dump_config(ExperimentConfig{});
    } else if (gen->parsed()) {
      const auto c = go.load();
      const fs::path out = go.out.empty() ? fs::path(c.output_dir) / "data" : fs::path(go.out);
      cmd_generate(c, out);
      std::cout << "generated " << out.string() << "\n";
    } else if (pre->parsed()) {
      const auto c = po.load();
      const Variant v = variant_from_string(variant);
      const fs::path out = po.out.empty() ? fs::path(c.output_dir) / "checkpoints" : fs::path(po.out);
      const auto r = cmd_pretrain(c, po.data_dir(c), v, out);
      std::printf("%s best epoch %d val %.4f -> %s\n", to_string(v).c_str(),
                  r.result.best_epoch, r.result.best_val_accuracy,
                  r.checkpoint.string().c_str());
    } else if (ada->parsed()) {
      const auto c = ao.load();
      p_given = p_opt->count() > 0;
      if (!p_given) member.p = c.ttt.p;
      const fs::path out =
          ao.out.empty() ? fs::path(c.output_dir) / "adapted" / member.name() : fs::path(ao.out);
      const auto r = cmd_adapt(c, ckpt, ao.data_dir(c), out, member);
      for (const auto& h : r.result.history) std::cout << to_json_line(h) << "\n";
      std::cout << "adapted " << out.string() << "\n";
    } else if (eva->parsed()) {
      const auto c = eo.load();
      const EvalMode m = eval_mode_from_string(mode);
      const std::string label = name.empty() ? to_string(m) : name;
      const fs::path out =
          eo.out.empty() ? fs::path(c.output_dir) / "eval" / label : fs::path(eo.out);
      std::vector<fs::path> paths(models.begin(), models.end());
      print_table(cmd_evaluate(c, paths, eo.data_dir(c), m, out, label));
    } else if (abl->parsed()) {
      const auto c = bo.load();
      const fs::path out = bo.out.empty() ? fs::path(c.output_dir) : fs::path(bo.out);
      const auto r = run_ablation(c, out, ensemble);
      std::vector<MetricsReport> rows = r.chain;
      rows.insert(rows.end(), r.members.begin(), r.members.end());
      if (r.ensemble) rows.push_back(*r.ensemble);
      std::cout << format_ablation_table(rows);
      std::printf("IID before TTT %.4f, after %.4f\n", r.iid_before_ttt, r.iid_after_ttt);
    }
  } catch (const ConfigError& e) {
    return report_error("config", e.what(), e.field(), kConfig);
  } catch (const IoError& e) {
    return report_error("io", e.what(), "", kIo);
  } catch (const ContractViolation& e) {
    return report_error("contract", e.what(), "", kContract);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), "", kInternal);
  }
  return kOk;
}
