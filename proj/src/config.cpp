#include "mcads/config.hpp"

#include <fstream>

namespace mcads {

using nlohmann::json;

namespace {

template <std::size_t N, class T>
std::array<T, N> fixed_array(const json& j, const char* path) {
  if (!j.is_array() || j.size() != N) {
    throw ShapeError(std::string(path) + ": expected an array of " + std::to_string(N) + " values");
  }
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = j[i].get<T>();
  return out;
}

const char* kind_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

bool compatible(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

void check_against(const json& user, const json& defaults, const std::string& path) {
  if (!user.is_object()) throw ShapeError("config" + (path.empty() ? "" : " '" + path + "'") + ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ShapeError("config: unknown key '" + p + "'");
    const json& def = defaults.at(key);
    if (!compatible(def, value)) {
      throw ShapeError("config: '" + p + "' must be " + kind_name(def) + ", got " + kind_name(value));
    }
    if (def.is_object()) check_against(value, def, p);
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& e = c.model.encoder;
  const auto& d = c.model.decoder;
  const auto& b = c.model.blocks;
  json ups = json::array();
  for (auto k : d.upsamplers) ups.push_back(to_string(k));
  return {
      {"model",
       {{"encoder",
         {{"stage_filters", e.stage_filters},
          {"rsu_depths", e.rsu_depths},
          {"dilated_last_two", e.dilated_last_two},
          {"inner_attention", e.inner_attention},
          {"casab_per_stage", e.casab_per_stage},
          {"input_channels", e.input_channels}}},
        {"decoder",
         {{"upsamplers", ups},
          {"rlab_iterations", d.rlab_iterations},
          {"enable_upsampler", d.enable_upsampler},
          {"enable_rlab", d.enable_rlab},
          {"enable_casab", d.enable_casab}}},
        {"blocks",
         {{"leaky_slope", b.leaky_slope},
          {"cam_reduction", b.cam_reduction},
          {"attention_token_cap", b.attention_token_cap},
          {"rlab_key_dim", b.rlab_key_dim},
          {"bn_eps", b.bn_eps},
          {"bn_momentum", b.bn_momentum}}}}},
      {"train",
       {{"lr", c.train.lr},
        {"batch", c.train.batch},
        {"epochs", c.train.epochs},
        {"max_steps", c.train.max_steps},
        {"seed", c.train.seed},
        {"checkpoint_dir", c.train.checkpoint_dir},
        {"checkpoint_interval", c.train.checkpoint_interval},
        {"val_fraction", c.train.val_fraction},
        {"augment", c.train.augment},
        {"recalibrate_bn", c.train.recalibrate_bn}}},
      {"data",
       {{"dataset_dir", c.data.dataset_dir},
        {"synth", {{"n", c.data.synth.n}, {"size", c.data.synth.size}, {"seed", c.data.synth.seed}}},
        {"patch", c.data.patch},
        {"stride", c.data.stride}}},
      {"eval",
       {{"threshold", c.eval.threshold},
        {"output_dir", c.eval.output_dir},
        {"write_probabilities", c.eval.write_probabilities},
        {"summary_size", c.eval.summary_size}}},
      {"f64", c.f64},
      {"threads", c.threads},
  };
}

RunConfig config_from_json(const json& user) {
  json j = to_json(RunConfig{});
  check_against(user, j, "");
  j.merge_patch(user);

  RunConfig c;
  try {
    const json& m = j["model"];
    auto& e = c.model.encoder;
    e.stage_filters = fixed_array<6, int>(m["encoder"]["stage_filters"], "model.encoder.stage_filters");
    e.rsu_depths = fixed_array<6, int>(m["encoder"]["rsu_depths"], "model.encoder.rsu_depths");
    e.dilated_last_two = m["encoder"]["dilated_last_two"];
    e.inner_attention = m["encoder"]["inner_attention"];
    e.casab_per_stage = m["encoder"]["casab_per_stage"];
    e.input_channels = m["encoder"]["input_channels"];

    auto& d = c.model.decoder;
    const auto ups = fixed_array<5, std::string>(m["decoder"]["upsamplers"], "model.decoder.upsamplers");
    for (std::size_t i = 0; i < 5; ++i) d.upsamplers[i] = parse_upsampler(ups[i]);
    d.rlab_iterations = fixed_array<5, int>(m["decoder"]["rlab_iterations"], "model.decoder.rlab_iterations");
    d.enable_upsampler = m["decoder"]["enable_upsampler"];
    d.enable_rlab = m["decoder"]["enable_rlab"];
    d.enable_casab = m["decoder"]["enable_casab"];

    auto& b = c.model.blocks;
    b.leaky_slope = m["blocks"]["leaky_slope"];
    b.cam_reduction = m["blocks"]["cam_reduction"];
    b.attention_token_cap = m["blocks"]["attention_token_cap"];
    b.rlab_key_dim = m["blocks"]["rlab_key_dim"];
    b.bn_eps = m["blocks"]["bn_eps"];
    b.bn_momentum = m["blocks"]["bn_momentum"];

    const json& t = j["train"];
    c.train.lr = t["lr"];
    c.train.batch = t["batch"];
    c.train.epochs = t["epochs"];
    c.train.max_steps = t["max_steps"];
    c.train.seed = t["seed"];
    c.train.checkpoint_dir = t["checkpoint_dir"];
    c.train.checkpoint_interval = t["checkpoint_interval"];
    c.train.val_fraction = t["val_fraction"];
    c.train.augment = t["augment"];
    c.train.recalibrate_bn = t["recalibrate_bn"];

    const json& dj = j["data"];
    c.data.dataset_dir = dj["dataset_dir"];
    c.data.synth.n = dj["synth"]["n"];
    c.data.synth.size = dj["synth"]["size"];
    c.data.synth.seed = dj["synth"]["seed"];
    c.data.patch = dj["patch"];
    c.data.stride = dj["stride"];

    const json& ev = j["eval"];
    c.eval.threshold = ev["threshold"];
    c.eval.output_dir = ev["output_dir"];
    c.eval.write_probabilities = ev["write_probabilities"];
    c.eval.summary_size = ev["summary_size"];

    c.f64 = j["f64"];
    c.threads = j["threads"];
  } catch (const json::exception& ex) {
    throw ShapeError(std::string("config: ") + ex.what());
  }
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& ex) {
    throw ShapeError("config '" + path.string() + "': " + ex.what());
  }
  return config_from_json(j);
}

namespace {

json override_patch(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ShapeError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json patch = value;
  std::size_t end = key.size();
  while (true) {
    const auto dot = key.rfind('.', end - 1);
    const std::string part = key.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
    if (part.empty()) throw ShapeError("--set: malformed key '" + key + "'");
    patch = json{{part, patch}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  return patch;
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& assignment) { apply_overrides(cfg, {assignment}); }

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  json current = to_json(cfg);
  for (const auto& a : assignments) {
    const json patch = override_patch(a);
    check_against(patch, current, "");
    current.merge_patch(patch);
  }
  cfg = config_from_json(current);
}

void validate(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw ShapeError("config: " + m); };
  for (int f : c.model.encoder.stage_filters) {
    if (f < 2 || f % 2 != 0) fail("model.encoder.stage_filters must be even and >= 2");
  }
  for (int d : c.model.encoder.rsu_depths) {
    if (d < 2) fail("model.encoder.rsu_depths must be >= 2");
  }
  if (c.model.encoder.input_channels < 1) fail("model.encoder.input_channels must be positive");
  for (int n : c.model.decoder.rlab_iterations) {
    if (n < 1) fail("model.decoder.rlab_iterations must be >= 1");
  }
  if (c.model.blocks.cam_reduction < 1) fail("model.blocks.cam_reduction must be >= 1");
  if (c.model.blocks.attention_token_cap < 0) fail("model.blocks.attention_token_cap must be >= 0");
  if (!(c.model.blocks.bn_eps > 0)) fail("model.blocks.bn_eps must be positive");
  if (!(c.train.lr > 0)) fail("train.lr must be positive");
  if (c.train.batch < 1) fail("train.batch must be >= 1");
  if (c.train.epochs < 0 || c.train.max_steps < 0 || c.train.checkpoint_interval < 0) {
    fail("train.epochs, train.max_steps and train.checkpoint_interval must be >= 0");
  }
  if (c.train.val_fraction < 0 || c.train.val_fraction >= 1) fail("train.val_fraction must be in [0, 1)");
  if (c.data.patch % 32 != 0 || c.data.patch < 32) fail("data.patch must be a positive multiple of 32");
  if (c.data.stride < 1 || c.data.stride > c.data.patch) fail("data.stride must be in [1, patch]");
  if (c.data.synth.n < 1 || c.data.synth.size < 32 || c.data.synth.size % 32 != 0) {
    fail("data.synth needs n >= 1 and a size that is a positive multiple of 32");
  }
  if (c.eval.threshold < 0 || c.eval.threshold > 1) fail("eval.threshold must be in [0, 1]");
  if (c.eval.summary_size < 32 || c.eval.summary_size % 32 != 0) fail("eval.summary_size must be a multiple of 32");
  if (c.threads < 1) fail("threads must be >= 1");
}

}  // namespace mcads
