#include "uolo/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "uolo/errors.hpp"

namespace uolo {

using Json = nlohmann::ordered_json;

namespace {

Json to_tree(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;

  Json& m = j["model"];
  m["input_size"] = c.model.segnet.input_size;
  m["in_channels"] = c.model.segnet.in_channels;
  m["depth"] = c.model.segnet.depth;
  m["base_channels"] = c.model.segnet.base_channels;
  m["channel_growth"] = c.model.segnet.channel_growth;
  m["kernel_size"] = c.model.segnet.kernel_size;
  m["bn_momentum"] = c.model.segnet.bn_momentum;
  m["bn_epsilon"] = c.model.segnet.bn_epsilon;
  m["anchors_per_cell"] = c.model.grid.A;
  m["classes"] = c.model.grid.C;
  Json priors = Json::array();
  for (const AnchorPrior& p : c.model.grid.priors) priors.push_back({p.w, p.h});
  m["priors"] = priors;

  Json& t = j["train"];
  t["n_det"] = c.train.n_det;
  t["n_seg"] = c.train.n_seg;
  t["batch_size"] = c.train.batch_size;
  t["learning_rate"] = c.train.learning_rate;
  t["beta1"] = c.train.beta1;
  t["beta2"] = c.train.beta2;
  t["epsilon"] = c.train.epsilon;
  t["max_steps"] = c.train.max_steps;
  t["validation_fraction"] = c.train.validation_fraction;
  t["eval_every"] = c.train.eval_every;
  t["augment"] = c.train.augment;
  t["flip"] = c.train.augmentation.flip;
  t["translate"] = c.train.augmentation.translate;
  t["max_shift_fraction"] = c.train.augmentation.max_shift_fraction;
  t["lambda_centers"] = c.train.loss_weights.centers;
  t["lambda_dimensions"] = c.train.loss_weights.dimensions;
  t["lambda_confidence"] = c.train.loss_weights.confidence;
  t["lambda_classes"] = c.train.loss_weights.classes;
  t["no_object_scale"] = c.train.loss_weights.no_object;

  Json& d = j["data"];
  d["count"] = c.count;
  d["mask_fraction"] = c.mask_fraction;
  d["fov_crop"] = c.fov_crop;
  d["image_size"] = c.scene.image_size;
  d["channels"] = c.scene.channels;
  d["border"] = c.scene.border;
  d["disc_radius_min"] = c.scene.disc_radius_min;
  d["disc_radius_max"] = c.scene.disc_radius_max;
  d["disc_intensity"] = c.scene.disc_intensity;
  d["spot_radius_min"] = c.scene.spot_radius_min;
  d["spot_radius_max"] = c.scene.spot_radius_max;
  d["spot_intensity"] = c.scene.spot_intensity;
  d["distractor_count"] = c.scene.distractor_count;
  d["distractor_radius_min"] = c.scene.distractor_radius_min;
  d["distractor_radius_max"] = c.scene.distractor_radius_max;
  d["distractor_intensity"] = c.scene.distractor_intensity;
  d["background_level"] = c.scene.background_level;
  d["texture_amplitude"] = c.scene.texture_amplitude;
  d["noise_amplitude"] = c.scene.noise_amplitude;
  d["od_box_side_ref"] = c.scene.od_box_side_ref;
  d["fv_box_side_ref"] = c.scene.fv_box_side_ref;
  d["reference_size"] = c.scene.reference_size;
  d["placement_margin_fraction"] = c.scene.placement_margin_fraction;
  return j;
}

template <typename T>
void get(const Json& j, const char* key, T& out, const std::string& section) {
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key " + section + "." + key + ": " + e.what());
  }
}

RunConfig from_tree(const Json& j) {
  RunConfig c;
  get(j, "seed", c.seed, "");
  const Json& m = j.at("model");
  get(m, "input_size", c.model.segnet.input_size, "model");
  get(m, "in_channels", c.model.segnet.in_channels, "model");
  get(m, "depth", c.model.segnet.depth, "model");
  get(m, "base_channels", c.model.segnet.base_channels, "model");
  get(m, "channel_growth", c.model.segnet.channel_growth, "model");
  get(m, "kernel_size", c.model.segnet.kernel_size, "model");
  get(m, "bn_momentum", c.model.segnet.bn_momentum, "model");
  get(m, "bn_epsilon", c.model.segnet.bn_epsilon, "model");
  get(m, "anchors_per_cell", c.model.grid.A, "model");
  get(m, "classes", c.model.grid.C, "model");
  c.model.grid.priors.clear();
  for (const Json& p : m.at("priors")) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      throw ConfigError("config key model.priors: each prior must be [w, h]");
    }
    c.model.grid.priors.push_back({p[0].get<double>(), p[1].get<double>()});
  }

  const Json& t = j.at("train");
  get(t, "n_det", c.train.n_det, "train");
  get(t, "n_seg", c.train.n_seg, "train");
  get(t, "batch_size", c.train.batch_size, "train");
  get(t, "learning_rate", c.train.learning_rate, "train");
  get(t, "beta1", c.train.beta1, "train");
  get(t, "beta2", c.train.beta2, "train");
  get(t, "epsilon", c.train.epsilon, "train");
  get(t, "max_steps", c.train.max_steps, "train");
  get(t, "validation_fraction", c.train.validation_fraction, "train");
  get(t, "eval_every", c.train.eval_every, "train");
  get(t, "augment", c.train.augment, "train");
  get(t, "flip", c.train.augmentation.flip, "train");
  get(t, "translate", c.train.augmentation.translate, "train");
  get(t, "max_shift_fraction", c.train.augmentation.max_shift_fraction, "train");
  get(t, "lambda_centers", c.train.loss_weights.centers, "train");
  get(t, "lambda_dimensions", c.train.loss_weights.dimensions, "train");
  get(t, "lambda_confidence", c.train.loss_weights.confidence, "train");
  get(t, "lambda_classes", c.train.loss_weights.classes, "train");
  get(t, "no_object_scale", c.train.loss_weights.no_object, "train");

  const Json& d = j.at("data");
  get(d, "count", c.count, "data");
  get(d, "mask_fraction", c.mask_fraction, "data");
  get(d, "fov_crop", c.fov_crop, "data");
  get(d, "image_size", c.scene.image_size, "data");
  get(d, "channels", c.scene.channels, "data");
  get(d, "border", c.scene.border, "data");
  get(d, "disc_radius_min", c.scene.disc_radius_min, "data");
  get(d, "disc_radius_max", c.scene.disc_radius_max, "data");
  get(d, "disc_intensity", c.scene.disc_intensity, "data");
  get(d, "spot_radius_min", c.scene.spot_radius_min, "data");
  get(d, "spot_radius_max", c.scene.spot_radius_max, "data");
  get(d, "spot_intensity", c.scene.spot_intensity, "data");
  get(d, "distractor_count", c.scene.distractor_count, "data");
  get(d, "distractor_radius_min", c.scene.distractor_radius_min, "data");
  get(d, "distractor_radius_max", c.scene.distractor_radius_max, "data");
  get(d, "distractor_intensity", c.scene.distractor_intensity, "data");
  get(d, "background_level", c.scene.background_level, "data");
  get(d, "texture_amplitude", c.scene.texture_amplitude, "data");
  get(d, "noise_amplitude", c.scene.noise_amplitude, "data");
  get(d, "od_box_side_ref", c.scene.od_box_side_ref, "data");
  get(d, "fv_box_side_ref", c.scene.fv_box_side_ref, "data");
  get(d, "reference_size", c.scene.reference_size, "data");
  get(d, "placement_margin_fraction", c.scene.placement_margin_fraction, "data");
  c.finalize();
  return c;
}

bool compatible(const Json& def, const Json& user) {
  if (def.is_number()) return user.is_number() && !user.is_boolean();
  if (def.is_boolean()) return user.is_boolean();
  if (def.is_array()) return user.is_array();
  if (def.is_object()) return user.is_object();
  return def.type() == user.type();
}

// Overlays user onto def, rejecting keys that def does not have.
void merge(Json& def, const Json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config section " + (path.empty() ? "<root>" : path) + " must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!def.contains(it.key())) throw ConfigError("unknown config key " + key);
    Json& slot = def[it.key()];
    if (!compatible(slot, it.value())) throw ConfigError("config key " + key + " has the wrong type");
    if (slot.is_object()) {
      merge(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

void apply_override(Json& user, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* node = &user;
  std::size_t begin = 0;
  while (true) {
    const auto dot = key.find('.', begin);
    const std::string part = key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (part.empty()) throw ConfigError("malformed override key " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    Json& child = (*node)[part];
    if (child.is_null()) child = Json::object();
    if (!child.is_object()) throw ConfigError("override key " + key + " descends into a non-object");
    node = &child;
    begin = dot + 1;
  }
}

}  // namespace

void RunConfig::finalize() {
  train.seed = seed;
  scene.seed = seed;
  model.grid.S = model.segnet.grid_size();
  model.segnet.validate();
  if (model.grid.A < 1 || model.grid.C < 1) throw ConfigError("anchors_per_cell and classes must be positive");
  if (!model.grid.priors.empty()) model.grid.validate();
  train.validate();
  scene.validate();
  if (count < 1) throw ConfigError("data.count must be positive");
  if (!(mask_fraction >= 0 && mask_fraction <= 1)) throw ConfigError("data.mask_fraction must be in [0, 1]");
}

RunConfig default_run_config() {
  RunConfig c;
  c.finalize();
  return c;
}

std::string to_json_text(const RunConfig& config) { return to_tree(config).dump(2) + "\n"; }

RunConfig parse_run_config(const std::string& base_json, const std::vector<std::string>& overrides) {
  Json user = Json::object();
  if (!base_json.empty()) {
    try {
      user = Json::parse(base_json);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  for (const std::string& o : overrides) apply_override(user, o);
  Json tree = to_tree(default_run_config());
  merge(tree, user, "");
  return from_tree(tree);
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), overrides);
}

}  // namespace uolo
