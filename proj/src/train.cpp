#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "mcads/checkpoint.hpp"
#include "mcads/optim.hpp"
#include "mcads/run.hpp"

namespace mcads {

namespace {

std::vector<Sample> to_patches(const std::vector<Sample>& samples, const RunConfig& cfg) {
  std::vector<Sample> out;
  for (const auto& s : samples) {
    if (!s.mask.defined()) throw DataError("training sample '" + s.id + "' has no mask");
    if (s.image.dim(2) != cfg.model.encoder.input_channels) {
      throw DataError("sample '" + s.id + "' has " + std::to_string(s.image.dim(2)) + " channels, model expects " +
                      std::to_string(cfg.model.encoder.input_channels));
    }
    const auto grid = plan_patches(s.image.dim(0), s.image.dim(1), cfg.data.patch, cfg.data.stride);
    for (auto& p : extract_patches(s, grid)) out.push_back(std::move(p));
  }
  return out;
}

void write_csv_row(std::ostream& os, const StepLog& s) {
  os << s.step << ',' << std::setprecision(10) << s.total;
  for (double t : s.terms) os << ',' << t;
  os << '\n';
}

double validation_loss(const Model& model, const std::vector<Sample>& patches, int batch, DType dtype) {
  if (patches.empty()) return 0.0;
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0;
  for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(batch));
    auto [x, y] = make_batch(patches, order, b, e, dtype);
    const auto out = model.forward(constant(std::move(x)), Mode::infer);
    total += deep_supervision_loss(out, y).total.value().item(0) * static_cast<double>(e - b);
  }
  return total / static_cast<double>(patches.size());
}

}  // namespace

void recalibrate_batch_norm(const Model& model, const std::vector<Sample>& patches, int batch) {
  if (patches.empty()) return;
  const ParamStore& store = model.store();
  std::vector<Tensor> acc;
  for (const auto& [name, t] : store.buffers()) acc.push_back(t->zeros_like());
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  int batches = 0;
  for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(batch));
    auto [x, y] = make_batch(patches, order, b, e, store.dtype());
    model.forward(constant(std::move(x)), Mode::calibrate);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i].add_(*store.buffers()[i].second);
    ++batches;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc[i].scale_(1.0 / batches);
    *store.buffers()[i].second = std::move(acc[i]);
  }
}

std::vector<Sample> load_samples(const RunConfig& cfg) {
  if (!cfg.data.dataset_dir.empty()) return load_dataset(cfg.data.dataset_dir, true);
  SynthOptions so;
  so.channels = cfg.model.encoder.input_channels;
  return synth_dataset(cfg.data.synth.n, cfg.data.synth.size, cfg.data.synth.seed, so);
}

TrainResult train(Model& model, const RunConfig& cfg, const std::vector<Sample>& samples, std::ostream* progress) {
  const auto& tc = cfg.train;
  const DType dtype = model.store().dtype();
  auto [train_samples, val_samples] = split_by_id(samples, tc.val_fraction);
  const auto train_patches = to_patches(train_samples, cfg);
  const auto val_patches = to_patches(val_samples, cfg);

  const std::filesystem::path dir = tc.checkpoint_dir;
  std::filesystem::create_directories(dir);
  {
    std::ofstream cj(dir / "config.json");
    cj << to_json(cfg).dump(2) << '\n';
  }
  TrainResult res;
  res.loss_log = dir / "loss.csv";
  res.best_checkpoint = dir / "best.mct";
  res.last_checkpoint = dir / "last.mct";
  std::ofstream csv(res.loss_log);
  if (!csv) throw DataError("cannot write '" + res.loss_log.string() + "'");
  csv << "step,loss_total,loss_b1,loss_d5,loss_d4,loss_d3,loss_d2,loss_d1\n";

  if (progress) {
    *progress << "training on " << train_patches.size() << " patches (" << train_samples.size() << " images), "
              << val_patches.size() << " validation patches, " << model.store().parameter_count()
              << " parameters\n";
  }

  // Shuffling and augmentation draw from one stream so a run is a function
  // of the seed alone.
  std::mt19937_64 rng(derive_seed(tc.seed, "train.shuffle"));
  Adam opt(model.store().parameters(), {.lr = tc.lr});
  Tape tape;
  std::vector<std::size_t> order(train_patches.size());
  res.best_loss = std::numeric_limits<double>::infinity();
  std::int64_t step = 0;
  bool done = tc.max_steps > 0 && step >= tc.max_steps;

  for (int epoch = 0; epoch < tc.epochs && !done; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0;
    std::size_t epoch_count = 0;
    for (std::size_t b = 0; b < order.size() && !done; b += static_cast<std::size_t>(tc.batch)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(tc.batch));
      std::vector<Sample> batch;
      for (std::size_t i = b; i < e; ++i) {
        const Sample& s = train_patches[order[i]];
        batch.push_back(tc.augment ? augment(s, rng) : s);
      }
      std::vector<std::size_t> idx(batch.size());
      std::iota(idx.begin(), idx.end(), 0);
      auto [x, y] = make_batch(batch, idx, 0, batch.size(), dtype);

      StepLog log;
      {
        TapeScope scope(tape);
        const auto out = model.forward(constant(std::move(x)), Mode::train);
        const auto loss = deep_supervision_loss(out, y);
        log.total = loss.total.value().item(0);
        log.terms = loss.terms;
        if (!std::isfinite(log.total)) throw NumericError("training loss is not finite at step " + std::to_string(step));
        tape.backward(loss.total);
      }
      opt.step();
      log.step = ++step;
      write_csv_row(csv, log);
      res.steps.push_back(log);
      epoch_sum += log.total * static_cast<double>(e - b);
      epoch_count += e - b;
      if (tc.max_steps > 0 && step >= tc.max_steps) done = true;
    }

    if (tc.recalibrate_bn) recalibrate_batch_norm(model, train_patches, tc.batch);
    double score = epoch_sum / static_cast<double>(std::max<std::size_t>(epoch_count, 1));
    if (!val_patches.empty()) {
      score = validation_loss(model, val_patches, tc.batch, dtype);
      res.val_loss.push_back(score);
    }
    if (score < res.best_loss) {
      res.best_loss = score;
      save_store(res.best_checkpoint, model.store());
    }
    if (tc.checkpoint_interval > 0 && (epoch + 1) % tc.checkpoint_interval == 0) {
      save_store(dir / ("epoch_" + std::to_string(epoch + 1) + ".mct"), model.store());
    }
    if (progress) {
      *progress << "epoch " << epoch + 1 << " step " << step << " loss " << res.steps.back().total;
      if (!val_patches.empty()) *progress << " val " << score;
      *progress << '\n';
    }
  }
  csv.flush();
  save_store(res.last_checkpoint, model.store());
  if (!std::isfinite(res.best_loss)) {
    // No epoch completed: the initial weights are both best and last.
    save_store(res.best_checkpoint, model.store());
    res.best_loss = 0;
  }
  return res;
}

}  // namespace mcads
