#include "mcads/run.hpp"

namespace mcads {

ModelSummary summarize(const ModelConfig& cfg, int input_size) {
  if (input_size < 32 || input_size % 32 != 0) {
    throw ShapeError("summary: input size " + std::to_string(input_size) + " must be a positive multiple of 32");
  }
  Model model(cfg, DType::f32, 0, InitMode::meta);
  ModelSummary s;
  s.input_size = input_size;
  s.total_params = model.store().parameter_count();
  for (const auto& [name, count] : model.store().count_by_prefix(2)) s.modules.emplace_back(name, count);
  reset_mac_count();
  model.forward(constant(Tensor::meta({1, input_size, input_size, cfg.encoder.input_channels}, DType::f32)),
                Mode::infer);
  s.macs = mac_count();
  return s;
}

nlohmann::json ModelSummary::to_json() const {
  nlohmann::json mods = nlohmann::json::object();
  for (const auto& [name, count] : modules) mods[name] = count;
  return {{"total_params", total_params}, {"macs", macs}, {"input_size", input_size}, {"modules", mods}};
}

}  // namespace mcads
