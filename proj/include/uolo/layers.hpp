#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "uolo/tensor.hpp"

namespace uolo {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Truncated normal (cut at two standard deviations) with std sqrt(2 / fan_in).
Tensor init_he_truncated(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

struct Conv2d {
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout]
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2d create(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                       std::size_t stride, std::size_t padding, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// Stride-k transposed convolution with a k x k kernel: exact k x upsampling.
struct ConvTranspose2d {
  Tensor weight;  // [Cin, Cout, k, k]
  std::size_t stride = 2;

  static ConvTranspose2d create(std::size_t in_channels, std::size_t out_channels,
                                std::size_t factor, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const { return conv2d_transpose(x, weight, stride, 0); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  BatchNormState state;

  static BatchNorm2d create(std::size_t channels, double momentum = 0.9, double epsilon = 1e-5);
  Tensor forward(const Tensor& x, Mode mode) { return batch_norm(x, gamma, beta, state, mode); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

}  // namespace uolo
