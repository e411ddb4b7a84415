#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "refprior/ops.hpp"
#include "refprior/rng.hpp"
#include "refprior/tensor.hpp"

namespace refprior {

// Ordered name -> tensor registry. Names are dotted paths ("enc.0.res1.conv1.weight")
// so the set forms a prefix tree mirroring the module structure.
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  // Registers `value` as a trainable leaf. Duplicate names are rejected.
  Tensor add(std::string name, Tensor value);

  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::int64_t count() const;
  std::size_t size() const { return entries_.size(); }
  // dtype of the registered tensors (the default dtype when empty).
  Dtype dtype() const {
    return entries_.empty() ? default_dtype() : entries_.front().second.dtype();
  }

  // Freezes or unfreezes every tensor.
  void set_trainable(bool trainable);
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor fan_in_uniform(const Shape& shape, std::int64_t fan_in, Rng& rng);

struct Conv2d {
  Tensor weight, bias;
  int stride = 1, padding = 0, dilation = 1;

  // "Same" padding for odd kernels: padding = dilation * (kernel / 2).
  static Conv2d create(ParameterSet& params, const std::string& prefix,
                       std::int64_t in_channels, std::int64_t out_channels,
                       int kernel, Rng& rng, int stride = 1, int dilation = 1);
  Tensor operator()(const Tensor& x) const {
    return conv2d(x, weight, bias, stride, padding, dilation);
  }
};

struct Linear {
  Tensor weight, bias;

  static Linear create(ParameterSet& params, const std::string& prefix,
                       std::int64_t in_features, std::int64_t out_features,
                       Rng& rng);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct GroupNorm {
  Tensor gamma, beta;
  int groups = 1;
  double eps = 1e-5;

  static GroupNorm create(ParameterSet& params, const std::string& prefix,
                          std::int64_t channels, int groups);
  Tensor operator()(const Tensor& x) const {
    return group_norm(x, groups, gamma, beta, eps);
  }
};

// conv -> group_norm -> SiLU
struct ConvBlock {
  Conv2d conv;
  GroupNorm norm;

  static ConvBlock create(ParameterSet& params, const std::string& prefix,
                          std::int64_t in_channels, std::int64_t out_channels,
                          int groups, Rng& rng, int stride = 1);
  Tensor operator()(const Tensor& x) const { return silu(norm(conv(x))); }
};

// Parameter counts of the layers above, for closed-form model sizes.
constexpr std::int64_t conv_param_count(std::int64_t in, std::int64_t out,
                                        std::int64_t kernel) {
  return out * in * kernel * kernel + out;
}
constexpr std::int64_t linear_param_count(std::int64_t in, std::int64_t out) {
  return out * in + out;
}
constexpr std::int64_t norm_param_count(std::int64_t channels) {
  return 2 * channels;
}

}  // namespace refprior
