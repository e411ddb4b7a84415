#include "refprior/prrn.hpp"

#include <algorithm>
#include <string>

#include "refprior/rng.hpp"

namespace refprior {

void PrrnConfig::validate() const {
  auto bad = [](const std::string& why) { fail(ErrorKind::Usage, "PRRN config: " + why); };
  if (channel_multipliers.empty()) bad("channel_multipliers must not be empty");
  if (image_size < 1 || base_channels < 1) bad("image_size and base_channels must be positive");
  if (resblocks_per_scale < 1) bad("resblocks_per_scale must be >= 1");
  if (bottleneck_blocks < 0) bad("bottleneck_blocks must be >= 0");
  if (prior_dim < 2 || prior_dim % 2 != 0) bad("prior_dim must be even");
  if (prior_grid < 1) bad("prior_grid must be >= 1");
  const int levels = scales();
  if (image_size % (1 << (levels - 1)) != 0)
    bad("image_size " + std::to_string(image_size) + " not divisible by 2^" +
        std::to_string(levels - 1));
  for (int s = 0; s < levels; ++s) {
    if (channel_multipliers[s] < 1) bad("channel multipliers must be positive");
    if (channels(s) % norm_groups != 0)
      bad(std::to_string(channels(s)) + " channels not divisible into " +
          std::to_string(norm_groups) + " norm groups");
    if (resolution(s) % prior_grid != 0)
      bad("feature resolution " + std::to_string(resolution(s)) + " at scale " +
          std::to_string(s) + " is not divisible by prior grid " +
          std::to_string(prior_grid));
  }
  if (bottleneck_blocks > 0 &&
      (attention_heads < 1 || channels(levels - 1) % attention_heads != 0))
    bad("bottleneck width " + std::to_string(channels(levels - 1)) +
        " not divisible by " + std::to_string(attention_heads) + " heads");
}

void to_json(nlohmann::json& j, const PrrnConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"base_channels", c.base_channels},
                     {"channel_multipliers", c.channel_multipliers},
                     {"resblocks_per_scale", c.resblocks_per_scale},
                     {"attention_heads", c.attention_heads},
                     {"bottleneck_blocks", c.bottleneck_blocks},
                     {"prior_grid", c.prior_grid},
                     {"prior_dim", c.prior_dim},
                     {"norm_groups", c.norm_groups},
                     {"fwa_scale", c.fwa_scale},
                     {"output_activation", "sigmoid"}};
}

void from_json(const nlohmann::json& j, PrrnConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("base_channels").get_to(c.base_channels);
  j.at("channel_multipliers").get_to(c.channel_multipliers);
  j.at("resblocks_per_scale").get_to(c.resblocks_per_scale);
  j.at("attention_heads").get_to(c.attention_heads);
  j.at("bottleneck_blocks").get_to(c.bottleneck_blocks);
  j.at("prior_grid").get_to(c.prior_grid);
  j.at("prior_dim").get_to(c.prior_dim);
  j.at("norm_groups").get_to(c.norm_groups);
  j.at("fwa_scale").get_to(c.fwa_scale);
}

namespace {

std::int64_t resblock_param_count(const PrrnConfig& c, std::int64_t in, std::int64_t out) {
  std::int64_t n = conv_param_count(in, out, 3) + norm_param_count(out) +
                   conv_param_count(out, out, 3) + norm_param_count(out) +
                   linear_param_count(c.prior_dim, out) * (c.fwa_scale ? 2 : 1);
  if (in != out) n += conv_param_count(out, out, 1);
  return n;
}

Resblock make_resblock(const PrrnConfig& c, ParameterSet& params,
                       const std::string& prefix, std::int64_t in,
                       std::int64_t out, Rng& rng) {
  Resblock r;
  r.block1 = ConvBlock::create(params, prefix + ".block1", in, out, c.norm_groups, rng);
  r.block2 = ConvBlock::create(params, prefix + ".block2", out, out, c.norm_groups, rng);
  r.conditioning.shift = Linear::create(params, prefix + ".fwa.shift", c.prior_dim, out, rng);
  if (c.fwa_scale)
    r.conditioning.scale = Linear::create(params, prefix + ".fwa.scale", c.prior_dim, out, rng);
  if (in != out) r.residual = Conv2d::create(params, prefix + ".residual", out, out, 1, rng);
  return r;
}

}  // namespace

std::int64_t prrn_parameter_count(const PrrnConfig& c) {
  c.validate();
  const int levels = c.scales();
  std::int64_t n = conv_param_count(3, c.channels(0), 3);
  for (int s = 0; s < levels; ++s) {
    const std::int64_t in = s == 0 ? c.channels(0) : c.channels(s - 1);
    n += resblock_param_count(c, in, c.channels(s));
    n += (c.resblocks_per_scale - 1) * resblock_param_count(c, c.channels(s), c.channels(s));
    if (s + 1 < levels) n += conv_param_count(c.channels(s), c.channels(s), 3);
  }
  const std::int64_t width = c.channels(levels - 1);
  n += c.bottleneck_blocks * 4 * linear_param_count(width, width);
  for (int s = levels - 2; s >= 0; --s) {
    n += conv_param_count(c.channels(s + 1) + c.channels(s), c.channels(s), 1);
    n += c.resblocks_per_scale * resblock_param_count(c, c.channels(s), c.channels(s));
  }
  n += conv_param_count(c.channels(0), 3, 3);
  return n;
}

Tensor fwa(const Tensor& features, const Tensor& prior_features, const Fwa& params) {
  if (features.rank() != 4 || prior_features.rank() != 4)
    fail(ErrorKind::Shape, "fwa: expected [N,C,H,W] features and [N,P,P,D] priors, got " +
                               shape_str(features.shape()) + " and " +
                               shape_str(prior_features.shape()));
  const std::int64_t h = features.dim(2), w = features.dim(3);
  auto project = [&](const Linear& proj) {
    // [N,P,P,D] -> [N,P,P,C] -> [N,C,P,P] -> [N,C,H,W]
    return nearest_upsample(permute(proj(prior_features), {0, 3, 1, 2}), h, w);
  };
  Tensor shifted = add(features, project(params.shift));
  if (!params.scale.weight.defined()) return shifted;
  return add(shifted, mul(features, project(params.scale)));
}

Tensor Resblock::operator()(const Tensor& x, const Tensor& prior_features) const {
  Tensor f = block1(x);
  Tensor out = block2(fwa(f, prior_features, conditioning));
  return add(out, residual.weight.defined() ? residual(f) : f);
}

PrrnModel::PrrnModel(const PrrnConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, "prrn-init"));
  const int levels = config_.scales();
  stem_ = Conv2d::create(params_, "stem", 3, config_.channels(0), 3, rng);
  encoder_.resize(levels);
  for (int s = 0; s < levels; ++s) {
    const std::string prefix = "enc." + std::to_string(s);
    for (int r = 0; r < config_.resblocks_per_scale; ++r) {
      const std::int64_t in = r > 0 ? config_.channels(s)
                                    : (s == 0 ? config_.channels(0) : config_.channels(s - 1));
      encoder_[s].push_back(make_resblock(config_, params_, prefix + ".res" + std::to_string(r),
                                          in, config_.channels(s), rng));
    }
    if (s + 1 < levels)
      downsample_.push_back(Conv2d::create(params_, prefix + ".down", config_.channels(s),
                                           config_.channels(s), 3, rng, 2));
  }
  const std::int64_t width = config_.channels(levels - 1);
  for (int b = 0; b < config_.bottleneck_blocks; ++b) {
    const std::string prefix = "mid.attn" + std::to_string(b);
    AttentionWeights a;
    auto make = [&](const char* name, Tensor& weight, Tensor& bias) {
      Linear l = Linear::create(params_, prefix + "." + name, width, width, rng);
      weight = l.weight;
      bias = l.bias;
    };
    make("q", a.q_weight, a.q_bias);
    make("k", a.k_weight, a.k_bias);
    make("v", a.v_weight, a.v_bias);
    make("out", a.out_weight, a.out_bias);
    bottleneck_.push_back(a);
  }
  fuse_.resize(std::max(levels - 1, 0));
  decoder_.resize(std::max(levels - 1, 0));
  for (int s = levels - 2; s >= 0; --s) {
    const std::string prefix = "dec." + std::to_string(s);
    fuse_[s] = Conv2d::create(params_, prefix + ".fuse",
                              config_.channels(s + 1) + config_.channels(s),
                              config_.channels(s), 1, rng);
    for (int r = 0; r < config_.resblocks_per_scale; ++r)
      decoder_[s].push_back(make_resblock(config_, params_, prefix + ".res" + std::to_string(r),
                                          config_.channels(s), config_.channels(s), rng));
  }
  head_ = Conv2d::create(params_, "head", config_.channels(0), 3, 3, rng);
}

Tensor PrrnModel::forward(const Tensor& images, const Tensor& prior_features) const {
  const auto size = config_.image_size;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != size ||
      images.dim(3) != size)
    fail(ErrorKind::Shape, "PRRN expects [N,3," + std::to_string(size) + "," +
                               std::to_string(size) + "] images, got " +
                               shape_str(images.shape()));
  if (prior_features.rank() != 4 || prior_features.dim(0) != images.dim(0) ||
      prior_features.dim(1) != config_.prior_grid ||
      prior_features.dim(2) != config_.prior_grid ||
      prior_features.dim(3) != config_.prior_dim)
    fail(ErrorKind::Shape, "PRRN expects prior features [N," +
                               std::to_string(config_.prior_grid) + "," +
                               std::to_string(config_.prior_grid) + "," +
                               std::to_string(config_.prior_dim) + "], got " +
                               shape_str(prior_features.shape()));
  const int levels = config_.scales();
  Tensor x = stem_(images);
  std::vector<Tensor> skips(levels);
  for (int s = 0; s < levels; ++s) {
    for (const auto& block : encoder_[s]) x = block(x, prior_features);
    skips[s] = x;
    if (s + 1 < levels) x = downsample_[s](x);
  }

  if (!bottleneck_.empty()) {
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor tokens = reshape(permute(x, {0, 2, 3, 1}), {n, h * w, c});
    for (const auto& attn : bottleneck_)
      tokens = self_attention(tokens, config_.attention_heads, attn);
    x = permute(reshape(tokens, {n, h, w, c}), {0, 3, 1, 2});
  }

  for (int s = levels - 2; s >= 0; --s) {
    x = nearest_upsample(x, config_.resolution(s), config_.resolution(s));
    const Tensor parts[] = {x, skips[s]};
    x = fuse_[s](concat(parts, 1));
    for (const auto& block : decoder_[s]) x = block(x, prior_features);
  }
  return sigmoid(head_(x));
}

Tensor prrn_forward(const Tensor& images, std::span<const PriorMap> priors,
                    const PrrnModel& model) {
  const auto& c = model.config();
  if (static_cast<std::int64_t>(priors.size()) != images.dim(0))
    fail(ErrorKind::Shape, "prrn_forward: " + std::to_string(priors.size()) +
                               " prior maps for a batch of " +
                               std::to_string(images.dim(0)));
  std::vector<PriorFeatures> features;
  features.reserve(priors.size());
  for (const auto& p : priors) {
    if (p.grid != c.prior_grid)
      fail(ErrorKind::Shape, "prrn_forward: prior grid " + std::to_string(p.grid) +
                                 " but model expects " + std::to_string(c.prior_grid));
    features.push_back(encode_prior(p, c.prior_dim));
  }
  return model.forward(images, features_to_tensor(features, images.dtype()));
}

std::vector<Image> prrn_restore(std::span<const Image> images,
                                std::span<const PriorMap> priors,
                                const PrrnModel& model) {
  NoGradGuard no_grad;
  std::vector<Image> out = tensor_to_images(
      prrn_forward(images_to_tensor(images, model.parameters().dtype()), priors, model));
  for (auto& img : out) img = clamp01(std::move(img));
  return out;
}

Tensor prrn_loss(const Tensor& restored, const Tensor& target) {
  if (restored.shape() != target.shape())
    fail(ErrorKind::Shape, "prrn_loss: shape mismatch " + shape_str(restored.shape()) +
                               " vs " + shape_str(target.shape()));
  return l1_loss(restored, target);
}

}  // namespace refprior
