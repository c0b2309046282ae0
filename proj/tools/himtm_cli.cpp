#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "himtm/config.hpp"
#include "himtm/errors.hpp"
#include "himtm/gradcheck_suite.hpp"
#include "himtm/pipeline.hpp"

namespace {

struct Common {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config = true) {
  auto* opt = cmd->add_option("--config", c.config_path, "run config file (key = value lines)");
  if (needs_config) opt->required();
  cmd->add_option("--out-dir", c.out_dir, "output directory (default: output.dir from config)");
  cmd->add_option("--set", c.overrides, "override one config key, e.g. --set pretrain.epochs=3");
  cmd->add_flag("-q,--quiet", c.quiet, "suppress per-epoch progress");
}

himtm::RunConfig resolve(const Common& c) {
  himtm::RunConfig cfg = himtm::load_config(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw himtm::ConfigError("--set expects key=value, got '" + kv + "'");
    himtm::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  cfg.validate();
  return cfg;
}

himtm::ProgressFn progress(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  for (char ch : s + ",") {
    if (ch == ',') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else if (ch != ' ') {
      item += ch;
    }
  }
  return out;
}

void print_summary(const std::vector<himtm::SummaryRow>& rows) {
  for (const auto& r : rows) {
    std::cout << (r.label.empty() ? "" : r.label + "=") << r.value << " test_mse " << r.test.mse
              << " test_mae " << r.test.mae << " naive_mse " << r.naive_mse << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical multi-scale masked time-series modeling"};
  app.require_subcommand(1);

  Common pre, fin, ev, fc, sw, ab, run;

  auto* pretrain_cmd = app.add_subcommand("pretrain", "masked pre-training; writes pretrain.ckpt and pretrain_loss.csv");
  add_common(pretrain_cmd, pre);

  std::string fin_from;
  bool no_pretrain = false;
  auto* finetune_cmd = app.add_subcommand("finetune", "forecast fine-tuning; writes metrics.csv and finetune.ckpt");
  add_common(finetune_cmd, fin);
  auto* from_opt = finetune_cmd->add_option("--from", fin_from, "pre-trained checkpoint");
  auto* nopre_opt = finetune_cmd->add_flag("--no-pretrain", no_pretrain, "start from random initialization");
  from_opt->excludes(nopre_opt);

  std::string ev_from, ev_out;
  auto* eval_cmd = app.add_subcommand("eval", "MSE/MAE of a fine-tuned checkpoint");
  add_common(eval_cmd, ev);
  eval_cmd->add_option("--from", ev_from, "fine-tuned checkpoint")->required();
  eval_cmd->add_option("--out", ev_out, "metrics file (default: <out-dir>/eval.csv)");

  std::string fc_from, fc_out;
  auto* forecast_cmd = app.add_subcommand("forecast", "per-window test-split forecasts as CSV");
  add_common(forecast_cmd, fc);
  forecast_cmd->add_option("--from", fc_from, "fine-tuned checkpoint")->required();
  forecast_cmd->add_option("--out", fc_out, "forecast CSV")->required();

  std::string scale = "tiny";
  std::uint64_t gc_seed = 7;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck_cmd->add_option("--scale", scale, "suite scale")->check(CLI::IsMember({"tiny"}));
  gradcheck_cmd->add_option("--seed", gc_seed, "seed for random inputs");

  std::string sw_param, sw_values;
  auto* sweep_cmd = app.add_subcommand("sweep", "one pipeline per value; writes sweep.csv");
  add_common(sweep_cmd, sw);
  sweep_cmd->add_option("--param", sw_param, "parameter")
      ->required()
      ->check(CLI::IsMember({"mask_ratio", "lookback", "patch_len", "depth", "width"}));
  sweep_cmd->add_option("--values", sw_values, "comma-separated values")->required();

  std::string ab_drop;
  bool no_baseline = false;
  auto* ablate_cmd = app.add_subcommand("ablate", "drop components; writes ablation.csv");
  add_common(ablate_cmd, ab);
  ablate_cmd->add_option("--drop", ab_drop, "comma-separated subset of hsd,ded,hmt,csa")->required();
  ablate_cmd->add_flag("--no-baseline", no_baseline, "skip the full-model row");

  bool run_no_pretrain = false;
  auto* run_cmd = app.add_subcommand("run", "pretrain + finetune + eval in one output directory");
  add_common(run_cmd, run);
  run_cmd->add_flag("--no-pretrain", run_no_pretrain, "skip pre-training");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*pretrain_cmd) {
      const auto cfg = resolve(pre);
      const auto art = himtm::run_pretrain(cfg, cfg.output_dir, progress(pre));
      std::cout << "checkpoint " << art.checkpoint << "\nloss " << art.loss_csv << '\n';
    } else if (*finetune_cmd) {
      if (fin_from.empty() && !no_pretrain) {
        throw himtm::ConfigError("finetune needs --from CKPT or --no-pretrain");
      }
      const auto cfg = resolve(fin);
      const auto art = himtm::run_finetune(cfg, cfg.output_dir, fin_from, progress(fin));
      std::cout << "best_epoch " << art.result.best_epoch << "\ntest_mse "
                << art.result.test.metrics.mse << "\ntest_mae " << art.result.test.metrics.mae
                << "\nnaive_mse " << art.naive.metrics.mse << "\nmetrics " << art.metrics_csv
                << "\ncheckpoint " << art.checkpoint << '\n';
    } else if (*eval_cmd) {
      const auto cfg = resolve(ev);
      const std::string out = ev_out.empty() ? cfg.output_dir + "/eval.csv" : ev_out;
      const auto art = himtm::run_eval(cfg, ev_from, out);
      std::cout << "test_mse " << art.test.metrics.mse << "\ntest_mae " << art.test.metrics.mae
                << "\nnaive_mse " << art.naive.metrics.mse << "\nmetrics " << out << '\n';
    } else if (*forecast_cmd) {
      const auto cfg = resolve(fc);
      const auto n = himtm::run_forecast(cfg, fc_from, fc_out);
      std::cout << "windows " << n << "\nforecast " << fc_out << '\n';
    } else if (*gradcheck_cmd) {
      const auto res = himtm::run_gradcheck_suite(gc_seed, [](const himtm::SuiteCase& c) {
        std::cout << c.name << ' ' << c.report.max_rel_error << '\n';
      });
      std::cout << "worst " << res.worst << ' ' << res.worst_case << "\nseconds " << res.seconds
                << '\n';
      if (!res.passed()) {
        std::cerr << "error: gradient check exceeded 1e-4 (worst " << res.worst << " in "
                  << res.worst_case << ")\n";
        return 1;
      }
    } else if (*sweep_cmd) {
      const auto cfg = resolve(sw);
      print_summary(himtm::run_sweep(cfg, sw_param, split_csv(sw_values), cfg.output_dir,
                                     progress(sw)));
      std::cout << "table " << cfg.output_dir << "/sweep.csv\n";
    } else if (*ablate_cmd) {
      const auto cfg = resolve(ab);
      print_summary(himtm::run_ablation(cfg, split_csv(ab_drop), !no_baseline, cfg.output_dir,
                                        progress(ab)));
      std::cout << "table " << cfg.output_dir << "/ablation.csv\n";
    } else if (*run_cmd) {
      const auto cfg = resolve(run);
      const auto res = himtm::run_pipeline(cfg, cfg.output_dir, !run_no_pretrain, progress(run));
      std::cout << "test_mse " << res.eval.test.metrics.mse << "\nnaive_mse "
                << res.eval.naive.metrics.mse << '\n';
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "error: " << msg << '\n';
    return 1;
  }
  return 0;
}
