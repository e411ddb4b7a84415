#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "refprior/image.hpp"
#include "refprior/nn.hpp"
#include "refprior/prior.hpp"

namespace refprior {

// Geometry of the prior-conditioned transformer U-Net.
struct PrrnConfig {
  int image_size = 56;
  int base_channels = 32;
  std::vector<int> channel_multipliers{1, 2, 4};
  int resblocks_per_scale = 2;
  int attention_heads = 4;
  int bottleneck_blocks = 1;
  int prior_grid = 7;
  int prior_dim = kPriorDim;
  int norm_groups = 8;
  // Adds a learned multiplicative gate to FWA: F' * (1 + scale) + shift.
  bool fwa_scale = false;

  int scales() const { return static_cast<int>(channel_multipliers.size()); }
  int channels(int scale) const { return base_channels * channel_multipliers.at(scale); }
  int resolution(int scale) const { return image_size >> scale; }

  // Throws Usage when the geometry is inconsistent, including a feature
  // resolution at any scale that the prior grid does not divide.
  void validate() const;
};

void to_json(nlohmann::json& j, const PrrnConfig& c);
void from_json(const nlohmann::json& j, PrrnConfig& c);

// Closed-form parameter count:
//   stem    conv3x3(3 -> C0)
//   encoder per scale s: resblock(C_{s-1} -> C_s), (R-1) x resblock(C_s -> C_s),
//           conv3x3 stride 2 (C_s -> C_s) on every scale but the last
//   middle  bottleneck_blocks x 4 linear(C_last -> C_last)
//   decoder per scale s < last: conv1x1(C_{s+1} + C_s -> C_s), R x resblock(C_s -> C_s)
//   head    conv3x3(C0 -> 3)
// resblock(a -> b) = 2 conv blocks (conv3x3 + group-norm affine),
//   linear(prior_dim -> b) for FWA (twice with fwa_scale), and a 1x1 residual
//   conv(b -> b) only when a != b.
std::int64_t prrn_parameter_count(const PrrnConfig& config);

// Projection of prior features into a feature map's channel space.
struct Fwa {
  Linear shift;
  Linear scale;  // undefined unless the gate is enabled
};

// Conditions `features` [N,C,H,W] on `prior_features` [N,P,P,D]: the
// per-patch projection is nearest-upsampled to HxW and added (and, with the
// gate, also used as a multiplicative 1 + scale factor).
Tensor fwa(const Tensor& features, const Tensor& prior_features, const Fwa& params);

struct Resblock {
  ConvBlock block1;
  ConvBlock block2;
  Fwa conditioning;
  Conv2d residual;  // undefined when in and out channels agree

  // F' = block1(x); out = block2(fwa(F', prior)) + residual(F').
  Tensor operator()(const Tensor& x, const Tensor& prior_features) const;
};

class PrrnModel {
 public:
  PrrnModel(const PrrnConfig& config, std::uint64_t seed);

  const PrrnConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  // images [N,3,H,W], prior_features [N,P,P,prior_dim] -> restored [N,3,H,W] in (0,1).
  Tensor forward(const Tensor& images, const Tensor& prior_features) const;

 private:
  PrrnConfig config_;
  ParameterSet params_;
  Conv2d stem_;
  std::vector<std::vector<Resblock>> encoder_;
  std::vector<Conv2d> downsample_;
  std::vector<AttentionWeights> bottleneck_;
  std::vector<Conv2d> fuse_;                 // indexed by scale
  std::vector<std::vector<Resblock>> decoder_;
  Conv2d head_;
};

// Encodes the prior maps once and runs the network.
Tensor prrn_forward(const Tensor& images, std::span<const PriorMap> priors,
                    const PrrnModel& model);

// Inference helper: no graph, results clamped to [0,1] images.
std::vector<Image> prrn_restore(std::span<const Image> images,
                                std::span<const PriorMap> priors,
                                const PrrnModel& model);

// Mean absolute error.
Tensor prrn_loss(const Tensor& restored, const Tensor& target);

}  // namespace refprior
