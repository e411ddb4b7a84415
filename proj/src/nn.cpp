#include "refprior/nn.hpp"

#include <algorithm>
#include <cmath>

namespace refprior {

Tensor ParameterSet::add(std::string name, Tensor value) {
  if (contains(name))
    fail(ErrorKind::Usage, "duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  entries_.emplace_back(std::move(name), value);
  return value;
}

const Tensor& ParameterSet::get(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  fail(ErrorKind::Usage, "no parameter named '" + std::string(name) + "'");
}

bool ParameterSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.first == name; });
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::int64_t ParameterSet::count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParameterSet::set_trainable(bool trainable) {
  for (auto& e : entries_) e.second.set_requires_grad(trainable);
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

Tensor fan_in_uniform(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(shape, -bound, bound, rng);
}

Conv2d Conv2d::create(ParameterSet& params, const std::string& prefix,
                      std::int64_t in_channels, std::int64_t out_channels,
                      int kernel, Rng& rng, int stride, int dilation) {
  Conv2d c;
  c.weight = params.add(prefix + ".weight",
                        fan_in_uniform({out_channels, in_channels, kernel, kernel},
                                       in_channels * kernel * kernel, rng));
  c.bias = params.add(prefix + ".bias", Tensor::zeros({out_channels}));
  c.stride = stride;
  c.dilation = dilation;
  c.padding = dilation * (kernel / 2);
  return c;
}

Linear Linear::create(ParameterSet& params, const std::string& prefix,
                      std::int64_t in_features, std::int64_t out_features,
                      Rng& rng) {
  Linear l;
  l.weight = params.add(prefix + ".weight",
                        fan_in_uniform({out_features, in_features}, in_features, rng));
  l.bias = params.add(prefix + ".bias", Tensor::zeros({out_features}));
  return l;
}

GroupNorm GroupNorm::create(ParameterSet& params, const std::string& prefix,
                            std::int64_t channels, int groups) {
  if (groups < 1 || channels % groups != 0)
    fail(ErrorKind::Usage, prefix + ": " + std::to_string(channels) +
                               " channels not divisible into " +
                               std::to_string(groups) + " groups");
  GroupNorm g;
  g.gamma = params.add(prefix + ".gamma", Tensor::full({channels}, 1.0));
  g.beta = params.add(prefix + ".beta", Tensor::zeros({channels}));
  g.groups = groups;
  return g;
}

ConvBlock ConvBlock::create(ParameterSet& params, const std::string& prefix,
                            std::int64_t in_channels, std::int64_t out_channels,
                            int groups, Rng& rng, int stride) {
  ConvBlock b;
  b.conv = Conv2d::create(params, prefix + ".conv", in_channels, out_channels,
                          3, rng, stride);
  b.norm = GroupNorm::create(params, prefix + ".norm", out_channels, groups);
  return b;
}

}  // namespace refprior
