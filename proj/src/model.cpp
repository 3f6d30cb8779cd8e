#include "uolo/model.hpp"

#include <json.hpp>

#include "uolo/errors.hpp"

namespace uolo {

void ModelConfig::validate() const {
  segnet.validate();
  grid.validate();
  if (grid.S != segnet.grid_size()) {
    throw ConfigError("grid size " + std::to_string(grid.S) + " does not match the segnet feature extent " +
                      std::to_string(segnet.grid_size()));
  }
}

std::string architecture_json(const ModelConfig& config) {
  nlohmann::ordered_json j;
  j["input_size"] = config.segnet.input_size;
  j["in_channels"] = config.segnet.in_channels;
  j["depth"] = config.segnet.depth;
  j["base_channels"] = config.segnet.base_channels;
  j["channel_growth"] = config.segnet.channel_growth;
  j["kernel_size"] = config.segnet.kernel_size;
  j["bn_momentum"] = config.segnet.bn_momentum;
  j["bn_epsilon"] = config.segnet.bn_epsilon;
  j["grid_size"] = config.grid.S;
  j["anchors_per_cell"] = config.grid.A;
  j["classes"] = config.grid.C;
  nlohmann::ordered_json priors = nlohmann::ordered_json::array();
  for (const AnchorPrior& p : config.grid.priors) priors.push_back({p.w, p.h});
  j["priors"] = priors;
  return j.dump();
}

ModelConfig parse_architecture_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.segnet.input_size = j.at("input_size").get<int>();
    c.segnet.in_channels = j.at("in_channels").get<int>();
    c.segnet.depth = j.at("depth").get<int>();
    c.segnet.base_channels = j.at("base_channels").get<int>();
    c.segnet.channel_growth = j.at("channel_growth").get<int>();
    c.segnet.kernel_size = j.at("kernel_size").get<int>();
    c.segnet.bn_momentum = j.at("bn_momentum").get<double>();
    c.segnet.bn_epsilon = j.at("bn_epsilon").get<double>();
    c.grid.S = j.at("grid_size").get<int>();
    c.grid.A = j.at("anchors_per_cell").get<int>();
    c.grid.C = j.at("classes").get<int>();
    for (const auto& p : j.at("priors")) {
      c.grid.priors.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed architecture description: ") + e.what());
  }
  return c;
}

UoloModel::UoloModel(const ModelConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)),
      segnet_(config.segnet, seed),
      head_(config.segnet.feature_channels(), config.grid, seed ^ 0x9e3779b97f4a7c15ULL) {}

ModelOutput UoloModel::forward(const Tensor& images, Mode mode) {
  SegNetOutput seg = segnet_.forward(images, mode);
  Tensor raw = head_.forward(seg.features);
  return {seg.soft_mask, seg.features, raw};
}

std::vector<NamedTensor> UoloModel::parameters() const {
  std::vector<NamedTensor> out = segnet_.parameters();
  for (NamedTensor& p : head_.parameters()) out.push_back(std::move(p));
  return out;
}

}  // namespace uolo
