// drseg command-line tool: synthetic data generation, training, evaluation,
// inference, report formatting and the gradient-check harness.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "drseg/checkpoint.hpp"
#include "drseg/config_json.hpp"
#include "drseg/pipeline.hpp"
#include "drseg/verify.hpp"

namespace fs = std::filesystem;
using namespace drseg;

namespace {

struct FullConfig {
  NetConfig net;
  LossWeights loss;
  TrainConfig train;
  SynthConfig synth;
};

FullConfig load_config(const std::string& path) {
  FullConfig cfg;
  cfg.train.net = cfg.net;
  cfg.train.loss = cfg.loss;
  if (path.empty()) return cfg;
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(is);
  detail::check_keys(j, {"net", "loss", "train", "synth"}, "top level");
  if (j.contains("net")) cfg.net = net_config_from_json(j.at("net"));
  if (j.contains("loss")) cfg.loss = loss_weights_from_json(j.at("loss"));
  if (j.contains("synth")) cfg.synth = synth_config_from_json(j.at("synth"));
  cfg.train.net = cfg.net;
  cfg.train.loss = cfg.loss;
  if (j.contains("train")) {
    const nlohmann::json& t = j.at("train");
    detail::check_keys(t,
                       {"initial_lr", "weight_decay", "batch_size", "max_steps", "min_lr", "seed",
                        "early_stop_patience", "val_fraction", "val_interval_steps",
                        "augment_strength", "dropout", "stochastic_depth"},
                       "train");
    detail::get_if(t, "initial_lr", cfg.train.initial_lr);
    detail::get_if(t, "weight_decay", cfg.train.weight_decay);
    detail::get_if(t, "batch_size", cfg.train.batch_size);
    detail::get_if(t, "max_steps", cfg.train.max_steps);
    detail::get_if(t, "min_lr", cfg.train.min_lr);
    detail::get_if(t, "seed", cfg.train.seed);
    detail::get_if(t, "early_stop_patience", cfg.train.early_stop_patience);
    detail::get_if(t, "val_fraction", cfg.train.val_fraction);
    detail::get_if(t, "val_interval_steps", cfg.train.val_interval_steps);
    detail::get_if(t, "augment_strength", cfg.train.augment_strength);
    detail::get_if(t, "dropout", cfg.train.dropout);
    detail::get_if(t, "stochastic_depth", cfg.train.stochastic_depth);
  }
  return cfg;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << content;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-resolution residual lesion segmentation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, ckpt_path;
  uint64_t seed = 0;
  bool seed_set = false;
  bool deterministic = false;
  app.add_option("--config", config_path, "JSON config file (net/loss/train/synth sections)");
  app.add_flag("--deterministic", deterministic,
               "pin the single-threaded deterministic execution mode (default behavior)");

  // ---- synth ----
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset directory");
  int synth_count = 16;
  bool mix_tones = false;
  synth_cmd->add_option("--out", out_dir, "output dataset directory")->required();
  synth_cmd->add_option("--count", synth_count, "number of samples");
  synth_cmd->add_option("--seed", seed, "generator seed")
      ->each([&](const std::string&) { seed_set = true; });
  synth_cmd->add_flag("--mix-tones", mix_tones, "alternate light/dark skin tone per patient");

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset directory");
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--out", out_dir, "output run directory")->required();
  train_cmd->add_option("--seed", seed, "training seed (overrides config)")
      ->each([&](const std::string&) { seed_set = true; });

  // ---- eval ----
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string group_key = "overall", model_label = "ours", compare_run;
  bool tta = false, no_boundary_metrics = false;
  int post_min_area = 0, post_closing_radius = 0;
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval_cmd->add_option("--out", out_dir, "output directory for records/report")->required();
  eval_cmd->add_option("--group", group_key,
                       "stratum key (overall/skin_tone/gender/age_group/site)");
  eval_cmd->add_option("--model-label", model_label, "label for the Model column");
  eval_cmd->add_option("--compare", compare_run,
                       "records.csv (or run dir) of a baseline; emits the CI/p-value table");
  eval_cmd->add_option("--min-area", post_min_area, "postprocess: drop components smaller than this");
  eval_cmd->add_option("--closing-radius", post_closing_radius, "postprocess: closing disk radius");
  eval_cmd->add_flag("--tta", tta, "average predictions over flips");
  eval_cmd->add_flag("--no-boundary-metrics", no_boundary_metrics, "skip BF/ASSD columns");

  // ---- infer ----
  auto* infer_cmd = app.add_subcommand("infer", "segment image files and write masks");
  std::vector<std::string> image_paths;
  double threshold = 0.5;
  infer_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  infer_cmd->add_option("--out", out_dir, "output directory for masks")->required();
  infer_cmd->add_option("--threshold", threshold, "binarization threshold");
  infer_cmd->add_option("--min-area", post_min_area, "postprocess: drop small components");
  infer_cmd->add_option("--closing-radius", post_closing_radius, "postprocess: closing radius");
  infer_cmd->add_flag("--tta", tta, "average predictions over flips");
  infer_cmd->add_option("images", image_paths, "input PNG images")->required();

  // ---- report ----
  auto* report_cmd = app.add_subcommand("report", "format a stratified report from records.csv");
  std::string records_path;
  report_cmd->add_option("--records", records_path, "records.csv from eval")->required();
  report_cmd->add_option("--group", group_key, "stratum key");
  report_cmd->add_option("--model-label", model_label, "label for the Model column");
  report_cmd->add_option("--out", out_dir, "optional output directory");
  report_cmd->add_flag("--no-boundary-metrics", no_boundary_metrics, "skip BF/ASSD columns");

  // ---- gradcheck ----
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  double gc_eps = 1e-3, gc_tol = 1e-4;
  int gc_coords = 200;
  std::string gc_out;
  grad_cmd->add_option("--eps", gc_eps, "finite-difference step");
  grad_cmd->add_option("--tol", gc_tol, "max relative error tolerance");
  grad_cmd->add_option("--coords", gc_coords, "sampled coordinates per loss");
  grad_cmd->add_option("--seed", seed, "fixture/sampling seed")
      ->each([&](const std::string&) { seed_set = true; });
  grad_cmd->add_option("--out", gc_out, "write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  (void)deterministic;  // execution is single-threaded and seeded throughout

  try {
    FullConfig cfg = load_config(config_path);
    if (seed_set) {
      cfg.synth.seed = seed;
      cfg.train.seed = seed;
    }

    if (synth_cmd->parsed()) {
      cfg.synth.validate();
      std::vector<Sample> samples = synth_dataset(cfg.synth, synth_count, mix_tones);
      save_dataset(samples, out_dir);
      std::cout << "wrote " << samples.size() << " samples to " << out_dir << "\n";
      return 0;
    }

    if (train_cmd->parsed()) {
      cfg.train.validate();
      std::vector<std::string> warnings;
      std::vector<Sample> data = load_dataset(data_dir, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
      if (data.empty()) throw std::invalid_argument("train: dataset " + data_dir + " is empty");

      TrainResult res = train(cfg.train, data);
      fs::create_directories(out_dir);
      save_checkpoint((fs::path(out_dir) / "model.drseg").string(), res.checkpoint);
      {
        std::ostringstream os;
        os << "step,lr,loss\n";
        for (const auto& s : res.steps) os << s.step << "," << s.lr << "," << s.loss << "\n";
        write_file(fs::path(out_dir) / "history.csv", os.str());
      }
      if (!res.vals.empty()) {
        std::ostringstream os;
        os << "step,val_dice,val_iou\n";
        for (const auto& v : res.vals)
          os << v.step << "," << v.val_dice << "," << v.val_iou << "\n";
        write_file(fs::path(out_dir) / "validation.csv", os.str());
      }
      std::cout << "trained " << res.steps.size() << " steps; checkpoint step "
                << res.checkpoint.step;
      if (res.best_val_iou >= 0.0) std::cout << "; best val IoU " << res.best_val_iou;
      if (res.stopped_early) std::cout << " (early stop)";
      if (res.diverged) std::cout << " (diverged; last good checkpoint kept)";
      std::cout << "\nwrote " << (fs::path(out_dir) / "model.drseg").string() << "\n";
      return res.diverged ? 2 : 0;
    }

    if (eval_cmd->parsed()) {
      Checkpoint ckpt = load_checkpoint(ckpt_path);
      std::vector<std::string> warnings;
      std::vector<Sample> data = load_dataset(data_dir, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
      if (data.empty()) throw std::invalid_argument("eval: dataset " + data_dir + " is empty");

      EvalOptions opt;
      opt.group_key = group_key;
      opt.model_label = model_label;
      opt.tta = tta;
      opt.with_boundary_metrics = !no_boundary_metrics;
      opt.post_min_area = post_min_area;
      opt.post_closing_radius = post_closing_radius;
      EvalResult res = evaluate(ckpt, data, opt);

      fs::create_directories(out_dir);
      write_file(fs::path(out_dir) / "records.csv", records_to_csv(res.records));
      write_file(fs::path(out_dir) / "report.csv", res.report.to_csv());
      write_file(fs::path(out_dir) / "report.txt", res.report.to_text());
      for (const auto& w : res.report.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << res.report.to_text();

      if (!compare_run.empty()) {
        fs::path other = compare_run;
        if (fs::is_directory(other)) other /= "records.csv";
        std::ifstream is(other);
        if (!is) throw std::invalid_argument("eval --compare: cannot open " + other.string());
        std::stringstream buf;
        buf << is.rdbuf();
        std::vector<SegRecord> baseline = records_from_csv(buf.str());

        ReportTable table;
        table.columns = {"Metric", "MeanDiff", "CI_low", "CI_high", "p_boot", "p_ttest", "N"};
        for (const std::string metric : {"dice", "iou", "precision", "recall", "bf", "assd"}) {
          try {
            CompareResult cr =
                compare_records(res.records, baseline, metric, 1000, cfg.train.seed);
            table.rows.push_back({metric, detail::fmt4(cr.ci.mean_diff),
                                  detail::fmt4(cr.ci.ci_low), detail::fmt4(cr.ci.ci_high),
                                  detail::fmt4(cr.ci.p_value), detail::fmt4(cr.p_ttest),
                                  std::to_string(cr.n_patients)});
          } catch (const std::invalid_argument&) {
            // metric missing from one of the runs
          }
        }
        write_file(fs::path(out_dir) / "compare.csv", table.to_csv());
        std::cout << "\npaired comparison vs " << compare_run << "\n" << table.to_text();
      }
      return 0;
    }

    if (infer_cmd->parsed()) {
      Checkpoint ckpt = load_checkpoint(ckpt_path);
      InferOptions opt;
      opt.tta = tta;
      opt.threshold = threshold;
      opt.post_min_area = post_min_area;
      opt.post_closing_radius = post_closing_radius;
      auto results = infer(ckpt, image_paths, out_dir, opt);
      int failures = 0;
      for (const auto& r : results) {
        if (r.ok)
          std::cout << r.input << " -> " << r.output << "\n";
        else {
          std::cerr << "error: " << r.input << ": " << r.error << "\n";
          ++failures;
        }
      }
      return failures == static_cast<int>(results.size()) && failures > 0 ? 2 : 0;
    }

    if (report_cmd->parsed()) {
      std::ifstream is(records_path);
      if (!is) throw std::invalid_argument("report: cannot open " + records_path);
      std::stringstream buf;
      buf << is.rdbuf();
      std::vector<SegRecord> records = records_from_csv(buf.str());
      ReportTable table = stratified_report(records, group_key, model_label, !no_boundary_metrics);
      for (const auto& w : table.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << table.to_text();
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file(fs::path(out_dir) / "report.csv", table.to_csv());
        write_file(fs::path(out_dir) / "report.txt", table.to_text());
      }
      return 0;
    }

    if (grad_cmd->parsed()) {
      NetConfig net = config_path.empty() ? NetConfig::tiny() : cfg.net;
      std::vector<Sample> fixture = gradcheck_fixture(2, 16, cfg.train.seed + 5);
      ModelParams params = gradcheck_params(net, cfg.train.seed + 1);

      bool all_passed = true;
      nlohmann::json out = nlohmann::json::array();
      for (GradCheckKind kind : {GradCheckKind::kTversky, GradCheckKind::kBoundary,
                                 GradCheckKind::kContrastive, GradCheckKind::kComposite}) {
        GradCheckLossFn fn = make_gradcheck_loss(kind, net, cfg.loss, fixture);
        GradCheckReport rep = grad_check(fn, params, gc_eps, gc_tol, gc_coords, cfg.train.seed);
        all_passed &= rep.passed;
        std::cout << to_string(kind) << ": " << (rep.passed ? "PASS" : "FAIL")
                  << " max_rel_err=" << rep.max_rel_err << " (worst " << rep.worst_param << "["
                  << rep.worst_coord << "], " << rep.coords_checked << " coords)\n";
        nlohmann::json jr = nlohmann::json::parse(rep.to_json());
        jr["loss_kind"] = to_string(kind);
        out.push_back(jr);
      }
      if (!gc_out.empty()) write_file(gc_out, out.dump(2) + "\n");
      return all_passed ? 0 : 2;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
