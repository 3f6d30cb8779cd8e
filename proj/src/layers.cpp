#include "uolo/layers.hpp"

#include <cmath>

namespace uolo {

Tensor init_he_truncated(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = z * stddev;
  }
  return Tensor::from_data(std::move(shape), std::move(values), true);
}

Conv2d Conv2d::create(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                      std::size_t stride, std::size_t padding, std::mt19937_64& rng) {
  Conv2d c;
  c.weight = init_he_truncated({out_channels, in_channels, kernel, kernel},
                               in_channels * kernel * kernel, rng);
  c.bias = Tensor::zeros({out_channels}, true);
  c.stride = stride;
  c.padding = padding;
  return c;
}

void Conv2d::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

ConvTranspose2d ConvTranspose2d::create(std::size_t in_channels, std::size_t out_channels,
                                        std::size_t factor, std::mt19937_64& rng) {
  ConvTranspose2d c;
  // Each output pixel receives exactly one tap per input channel.
  c.weight = init_he_truncated({in_channels, out_channels, factor, factor}, in_channels, rng);
  c.stride = factor;
  return c;
}

void ConvTranspose2d::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".weight", weight});
}

BatchNorm2d BatchNorm2d::create(std::size_t channels, double momentum, double epsilon) {
  BatchNorm2d bn;
  bn.state.momentum = momentum;
  bn.state.epsilon = epsilon;
  bn.gamma = Tensor::full({channels}, 1.0, true);
  bn.beta = Tensor::zeros({channels}, true);
  bn.state.running_mean = Tensor::zeros({channels});
  bn.state.running_var = Tensor::full({channels}, 1.0);
  return bn;
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

void BatchNorm2d::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".running_mean", state.running_mean});
  out.push_back({prefix + ".running_var", state.running_var});
}

}  // namespace uolo
