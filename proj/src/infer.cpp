#include <algorithm>
#include <map>
#include <set>

#include "mcads/run.hpp"

namespace mcads {

namespace {

// (1,H,W,1) -> (H,W,1)
Tensor drop_batch(const Tensor& t) { return t.reshaped({t.dim(1), t.dim(2), t.dim(3)}); }

Tensor add_batch(const Tensor& t, DType dtype) {
  return t.to(dtype).reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
}

std::map<std::string, std::filesystem::path> masks_in(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("directory '" + dir.string() + "' not found");
  std::map<std::string, std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pgm") out[e.path().stem().string()] = e.path();
  }
  return out;
}

}  // namespace

SegmentationOutput infer(const Model& model, const Tensor& batch) {
  return model.forward(constant(batch.to(model.store().dtype())), Mode::infer);
}

Prediction predict(const Model& model, const RunConfig& cfg, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != model.config().encoder.input_channels) {
    throw DataError("predict: image " + to_string(image.shape()) + " does not match the model's " +
                    std::to_string(model.config().encoder.input_channels) + " input channels");
  }
  const auto grid = plan_patches(image.dim(0), image.dim(1), cfg.data.patch, cfg.data.stride);
  const auto patches = extract_patches(image, grid);
  std::vector<Tensor> probs;
  probs.reserve(patches.size());
  for (const auto& p : patches) {
    const auto out = infer(model, add_batch(p, model.store().dtype()));
    probs.push_back(drop_batch(out.final().value()));
  }
  Prediction pred;
  pred.patches = patches.size();
  pred.probability = reassemble(probs, grid);
  pred.mask = threshold(pred.probability, cfg.eval.threshold);
  return pred;
}

std::vector<std::filesystem::path> predict_files(const Model& model, const RunConfig& cfg,
                                                 const std::vector<std::filesystem::path>& inputs,
                                                 const std::filesystem::path& output_dir) {
  std::filesystem::create_directories(output_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& in : inputs) {
    const auto pred = predict(model, cfg, read_image(in));
    const auto out = output_dir / (in.stem().string() + ".pgm");
    write_mask(out, pred.mask);
    written.push_back(out);
    if (cfg.eval.write_probabilities) write_image(output_dir / (in.stem().string() + "_prob.pgm"), pred.probability);
  }
  return written;
}

MetricReport evaluate_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir) {
  const auto preds = masks_in(pred_dir);
  const auto gts = masks_in(std::filesystem::is_directory(gt_dir / "masks") ? gt_dir / "masks" : gt_dir);
  std::vector<std::string> only_pred, only_gt;
  for (const auto& [id, p] : preds) {
    if (!gts.count(id)) only_pred.push_back(id);
  }
  for (const auto& [id, p] : gts) {
    if (!preds.count(id)) only_gt.push_back(id);
  }
  if (!only_pred.empty() || !only_gt.empty()) {
    std::string msg = "prediction/ground-truth ids differ;";
    if (!only_pred.empty()) {
      msg += " only in predictions:";
      for (const auto& id : only_pred) msg += " " + id;
      msg += ";";
    }
    if (!only_gt.empty()) {
      msg += " only in ground truth:";
      for (const auto& id : only_gt) msg += " " + id;
    }
    throw DataError(msg);
  }
  if (preds.empty()) throw DataError("no .pgm masks in '" + pred_dir.string() + "'");
  MetricReport report;
  for (const auto& [id, p] : preds) {
    const Tensor pm = read_mask(p), gm = read_mask(gts.at(id));
    if (pm.shape() != gm.shape()) throw DataError("mask sizes differ for '" + id + "'");
    report.add(id, pm, gm);
  }
  return report;
}

double mean_iou(const Model& model, const std::vector<Sample>& samples, double t) {
  if (samples.empty()) throw DataError("mean_iou: no samples");
  double acc = 0;
  for (const auto& s : samples) {
    const auto out = infer(model, add_batch(s.image, model.store().dtype()));
    acc += pixel_metrics(threshold(drop_batch(out.final().value()), t), s.mask).iou;
  }
  return acc / static_cast<double>(samples.size());
}

}  // namespace mcads
