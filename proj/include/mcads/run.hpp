#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcads/config.hpp"
#include "mcads/data.hpp"
#include "mcads/gradcheck.hpp"
#include "mcads/metrics.hpp"
#include "mcads/model.hpp"

namespace mcads {

// ---- training ---------------------------------------------------------------

struct StepLog {
  std::int64_t step = 0;
  double total = 0;
  std::array<double, 6> terms{};  // B1, D5 .. D1
};

struct TrainResult {
  std::vector<StepLog> steps;
  std::vector<double> val_loss;  // per epoch, empty without a validation split
  double best_loss = 0;
  std::filesystem::path best_checkpoint, last_checkpoint, loss_log;
};

// Samples come from data.dataset_dir, or the synthetic generator when it is
// empty; they are split by id and cut into patches.
std::vector<Sample> load_samples(const RunConfig& cfg);

// Trains `model` on the given samples. Writes <checkpoint_dir>/loss.csv,
// last.mct, best.mct (lowest validation loss, or lowest epoch-mean training
// loss without a validation split) and config.json. With
// train.recalibrate_bn, running statistics are recomputed at the end of
// every epoch, before validation and checkpointing. NaN/Inf anywhere in the
// forward pass throws NumericError naming the op.
TrainResult train(Model& model, const RunConfig& cfg, const std::vector<Sample>& samples,
                  std::ostream* progress = nullptr);

// Replaces every batch-norm running statistic with its average over the
// batch statistics of one pass over `patches` (weights unchanged).
void recalibrate_batch_norm(const Model& model, const std::vector<Sample>& patches, int batch);

// ---- inference ----------------------------------------------------------------

struct Prediction {
  Tensor probability;  // (H,W,1) final-head probabilities
  Tensor mask;         // (H,W,1) thresholded
  std::size_t patches = 0;
};

// Patch-wise inference with the final head, averaged reassembly, threshold.
Prediction predict(const Model& model, const RunConfig& cfg, const Tensor& image);

// Whole-image inference (extents divisible by 32) returning all six maps.
SegmentationOutput infer(const Model& model, const Tensor& batch);

// Writes <output_dir>/<id>.pgm masks (and <id>_prob.pgm when enabled).
std::vector<std::filesystem::path> predict_files(const Model& model, const RunConfig& cfg,
                                                 const std::vector<std::filesystem::path>& inputs,
                                                 const std::filesystem::path& output_dir);

// Pairs <pred_dir>/<id>.pgm with <gt_dir>/<id>.pgm (or <gt_dir>/masks/<id>.pgm).
// Ids present on only one side are listed in a DataError.
MetricReport evaluate_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir);

// Mean IoU of thresholded whole-image predictions against the masks.
double mean_iou(const Model& model, const std::vector<Sample>& samples, double threshold = 0.5);

// ---- model summary -------------------------------------------------------------

struct ModelSummary {
  std::int64_t total_params = 0;
  std::int64_t macs = 0;
  int input_size = 0;
  std::vector<std::pair<std::string, std::int64_t>> modules;  // name -> parameter count

  nlohmann::json to_json() const;
};

// Shape-only model: no weights are allocated or initialized.
ModelSummary summarize(const ModelConfig& cfg, int input_size);

// ---- gradient suite --------------------------------------------------------------

struct GradSuiteOptions {
  std::string only;  // run checks whose name contains this, if non-empty
};

// Finite-difference checks at f64 for every primitive and block plus the
// micro-model; each name appears once. Primitives use tolerance 1e-5, blocks
// 1e-4.
std::vector<GradCheckResult> run_gradient_suite(const GradSuiteOptions& opts = {},
                                                const std::function<void(const GradCheckResult&)>& on_result = {});

}  // namespace mcads
