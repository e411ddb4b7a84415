#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "json.hpp"
#include "refprior/image.hpp"
#include "refprior/nn.hpp"
#include "refprior/prior.hpp"

namespace refprior {

struct RpenConfig {
  int image_size = 56;
  int stem_channels = 32;
  int feature_grid = 7;
  std::vector<int> aspp_dilations{1, 2, 3};
  int aspp_channels = 16;
  int norm_groups = 8;

  static constexpr int kDownsamplingStages = 3;

  // Channels of the backbone output (4 x stem).
  int feature_channels() const { return 4 * stem_channels; }
  void validate() const;
};

void to_json(nlohmann::json& j, const RpenConfig& c);
void from_json(const nlohmann::json& j, RpenConfig& c);

// Feature extractor producing [N, C, grid, grid] from [N, 3, size, size].
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual Tensor forward(const Tensor& images) const = 0;
  virtual std::int64_t out_channels() const = 0;
};

// Stem conv block at full resolution, then four conv-block stages with
// strides 2, 2, 2, 1 and widths C, 2C, 4C, 4C.
class SmallConvBackbone final : public Backbone {
 public:
  SmallConvBackbone(const RpenConfig& config, ParameterSet& params, Rng& rng);
  Tensor forward(const Tensor& images) const override;
  std::int64_t out_channels() const override { return out_channels_; }

 private:
  ConvBlock stem_;
  std::vector<ConvBlock> stages_;
  std::int64_t out_channels_;
  int image_size_;
};

struct AsppParams {
  std::vector<Conv2d> dilated;  // 3x3, one per dilation
  Conv2d pointwise;             // 1x1 branch
  Linear pooled;                // global-context branch
  Conv2d fuse;                  // concat -> 1 channel
};

// Branch count is dilations + 2 (pointwise and pooled).
//   params = n_d * conv3x3(C -> A) + conv1x1(C -> A) + linear(C -> A)
//            + conv1x1((n_d + 2) A -> 1)
std::int64_t aspp_parameter_count(const RpenConfig& config);
std::int64_t rpen_parameter_count(const RpenConfig& config);

// Global average pool -> linear -> sigmoid: [N,C,g,g] -> [N,1].
Tensor global_intensity_head(const Tensor& features, const Linear& head);

// Parallel SiLU branches concatenated and fused to a one-channel residual
// [N,1,g,g] (unbounded).
Tensor aspp_refine(const Tensor& features, const AsppParams& params);

struct PriorPrediction {
  Tensor global_intensity;  // [N,1]
  Tensor patch_map;         // [N,1,g,g]

  std::vector<PriorMap> patch_maps() const;
  std::vector<double> globals() const;
};

class RpenModel {
 public:
  RpenModel(const RpenConfig& config, std::uint64_t seed);

  const RpenConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const Backbone& backbone() const { return *backbone_; }
  const Linear& global_head() const { return global_head_; }
  const AsppParams& aspp() const { return aspp_; }

  // patch_map = clamp(g + 0.5 * tanh(residual), 0, 1), g broadcast per patch.
  PriorPrediction forward(const Tensor& images) const;

 private:
  RpenConfig config_;
  ParameterSet params_;
  std::unique_ptr<Backbone> backbone_;
  Linear global_head_;
  AsppParams aspp_;
};

PriorPrediction rpen_forward(const Tensor& images, const RpenModel& model);

// Inference helper: predicted patch maps, no graph.
std::vector<PriorMap> rpen_predict(std::span<const Image> images, const RpenModel& model);

// MSE(global, truth_1) + MSE(patch_map, truth_g). truth_global is [N,1],
// truth_patch is [N,1,g,g].
Tensor rpen_loss(const PriorPrediction& prediction, const Tensor& truth_global,
                 const Tensor& truth_patch);
Tensor rpen_loss(const PriorPrediction& prediction, std::span<const PriorMap> truth_1,
                 std::span<const PriorMap> truth_grid);

}  // namespace refprior
