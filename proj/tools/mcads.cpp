#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "mcads/checkpoint.hpp"
#include "mcads/run.hpp"

namespace fs = std::filesystem;
using namespace mcads;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool f64 = false;
};

RunConfig resolve(const Globals& g, const fs::path& fallback = {}) {
  RunConfig cfg;
  if (!g.config.empty()) {
    cfg = load_config(g.config);
  } else if (!fallback.empty() && fs::exists(fallback)) {
    cfg = load_config(fallback);
  }
  apply_overrides(cfg, g.sets);
  if (g.seed) cfg.train.seed = *g.seed;
  if (g.threads) cfg.threads = *g.threads;
  if (g.f64) cfg.f64 = true;
  validate(cfg);
  return cfg;
}

std::vector<fs::path> image_inputs(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    fs::path p = a;
    if (fs::is_directory(p)) {
      const fs::path images = fs::is_directory(p / "images") ? p / "images" : p;
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(images)) {
        const auto ext = e.path().extension();
        if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  if (out.empty()) throw DataError("no input images");
  return out;
}

void write_json(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) return;
  std::ofstream os(path);
  if (!os) throw DataError("cannot write '" + path + "'");
  os << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmentation network training, inference and verification"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--set", g.sets, "Override a config value, e.g. --set train.lr=1e-3");
  app.add_option("--seed", g.seed, "Training / initialization seed");
  app.add_option("--threads", g.threads, "Worker threads (>= 1)");
  app.add_flag("--f64", g.f64, "Run in double precision");

  auto* train_cmd = app.add_subcommand("train", "Train on a dataset directory or synthetic data");
  train_cmd->fallthrough();

  auto* predict_cmd = app.add_subcommand("predict", "Patch-wise inference writing P5 masks");
  predict_cmd->fallthrough();
  std::string checkpoint, out_dir;
  std::vector<std::string> inputs;
  predict_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (.mct)")->required();
  predict_cmd->add_option("--output", out_dir, "Output directory (default: eval.output_dir)");
  predict_cmd->add_option("inputs", inputs, "Images or directories")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Metric report for predicted vs. ground-truth masks");
  eval_cmd->fallthrough();
  std::string pred_dir, gt_dir, report_path;
  eval_cmd->add_option("--pred", pred_dir, "Directory of predicted <id>.pgm masks")->required();
  eval_cmd->add_option("--gt", gt_dir, "Directory of ground-truth masks (or dataset root)")->required();
  eval_cmd->add_option("--report", report_path, "Also write the JSON report here");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of every primitive and block");
  grad_cmd->fallthrough();
  std::string only, fault;
  grad_cmd->add_option("--only", only, "Run checks whose name contains this");
  grad_cmd->add_option("--inject-fault", fault, "Scale the gradient of this op")->group("");

  auto* summary_cmd = app.add_subcommand("summary", "Parameter and multiply-accumulate counts");
  summary_cmd->fallthrough();
  int size = 0;
  std::string summary_json;
  summary_cmd->add_option("--size", size, "Input extent (default: eval.summary_size)");
  summary_cmd->add_option("--json", summary_json, "Also write the JSON summary here");

  auto* synth_cmd = app.add_subcommand("synth", "Write the synthetic dataset to a directory");
  synth_cmd->fallthrough();
  std::string synth_out;
  synth_cmd->add_option("--output", synth_out, "Dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) {
      const RunConfig cfg = resolve(g);
      Model model(cfg.model, cfg.dtype(), cfg.train.seed);
      const auto res = train(model, cfg, load_samples(cfg), &std::cout);
      std::cout << "wrote " << res.last_checkpoint.string() << ", " << res.best_checkpoint.string() << ", "
                << res.loss_log.string() << '\n';
    } else if (*predict_cmd) {
      const RunConfig cfg = resolve(g, fs::path(checkpoint).parent_path() / "config.json");
      Model model(cfg.model, cfg.dtype(), cfg.train.seed);
      load_store(checkpoint, model.store());
      const auto written = predict_files(model, cfg, image_inputs(inputs), out_dir.empty() ? cfg.eval.output_dir : out_dir);
      for (const auto& p : written) std::cout << p.string() << '\n';
    } else if (*eval_cmd) {
      const auto report = evaluate_dirs(pred_dir, gt_dir).to_json();
      std::cout << report.dump(2) << '\n';
      write_json(report, report_path);
    } else if (*grad_cmd) {
      if (!fault.empty()) inject_gradient_fault(fault, 1.5);
      bool ok = true;
      std::cout << std::left << std::setw(24) << "check" << std::setw(14) << "max_rel_err" << std::setw(10)
                << "tol" << std::setw(8) << "probes" << std::setw(8) << "kinks" << "result\n";
      const auto results = run_gradient_suite({only}, [&](const GradCheckResult& r) {
        ok = ok && r.passed;
        std::cout << std::left << std::setw(24) << r.name << std::setw(14) << std::setprecision(3) << r.max_rel_error
                  << std::setw(10) << r.tolerance << std::setw(8) << r.probes << std::setw(8) << r.kink_skipped
                  << (r.passed ? "ok" : "FAIL " + r.worst) << std::endl;
      });
      if (results.empty()) throw ShapeError("no gradient check matches '" + only + "'");
      return ok ? kOk : kNumeric;
    } else if (*summary_cmd) {
      const RunConfig cfg = resolve(g);
      const auto s = summarize(cfg.model, size > 0 ? size : cfg.eval.summary_size);
      for (const auto& [name, count] : s.modules) std::cout << std::left << std::setw(28) << name << count << '\n';
      std::cout << std::left << std::setw(28) << "total" << s.total_params << '\n'
                << std::setw(28) << "macs" << s.macs << " (" << s.input_size << "x" << s.input_size << ")\n";
      write_json(s.to_json(), summary_json);
    } else if (*synth_cmd) {
      const RunConfig cfg = resolve(g);
      SynthOptions so;
      so.channels = cfg.model.encoder.input_channels;
      save_dataset(synth_out, synth_dataset(cfg.data.synth.n, cfg.data.synth.size, cfg.data.synth.seed, so));
    }
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
