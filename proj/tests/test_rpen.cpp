#include <cmath>

#include "refprior/gradcheck.hpp"
#include "refprior/harness.hpp"
#include "refprior/rpen.hpp"
#include "support.hpp"

using namespace refprior;
using testing::capture_error;
using testing::random_image;

namespace {

RpenConfig desk() {
  RpenConfig c;
  c.stem_channels = 8;
  return c;
}

PriorMap random_map(int grid, Rng& rng) {
  PriorMap m{grid, {}};
  for (int i = 0; i < grid * grid; ++i) m.values.push_back(rng.uniform());
  return m;
}

void zero(const Tensor& t) {
  Tensor h = t;
  h.storage().fill(0.0);
}

}  // namespace

TEST_SUITE("rpen") {

TEST_CASE("parameter counts follow the branch arithmetic") {
  for (const RpenConfig& c : {RpenConfig{}, desk()}) {
    const RpenModel m(c, 1);
    const std::int64_t C = c.feature_channels(), A = c.aspp_channels;
    const std::int64_t nd = static_cast<std::int64_t>(c.aspp_dilations.size());
    const std::int64_t aspp = nd * (9 * C * A + A) + (C * A + A) + (C * A + A) + ((nd + 2) * A + 1);
    CHECK(aspp_parameter_count(c) == aspp);
    CHECK(m.parameters().count() == rpen_parameter_count(c));
    CHECK(m.aspp().dilated.size() == c.aspp_dilations.size());
  }
  CHECK(rpen_parameter_count(desk()) == 31098);
}

TEST_CASE("configuration errors") {
  RpenConfig wide = desk();
  wide.aspp_dilations = {1, 7};
  const auto e = capture_error([&] { RpenModel m(wide, 0); });
  CHECK(e.kind() == ErrorKind::Usage);
  CHECK(std::string(e.what()).find("dilation 7") != std::string::npos);
  RpenConfig size = desk();
  size.image_size = 64;
  CHECK(capture_error([&] { RpenModel m(size, 0); }).kind() == ErrorKind::Usage);
}

TEST_CASE("backbone shape, determinism and receptive field") {
  const RpenModel model(desk(), 2), twin(desk(), 2);
  Rng rng(2);
  Image a = random_image(56, 56, rng);
  NoGradGuard ng;
  const std::vector<Image> one{a};
  const Tensor fa = model.backbone().forward(images_to_tensor(one));
  CHECK(fa.shape() == Shape{1, 32, 7, 7});
  CHECK(fa.storage() == twin.backbone().forward(images_to_tensor(one)).storage());

  for (auto [cy, cx] : {std::pair{3, 3}, std::pair{0, 5}, std::pair{6, 1}}) {
    Image b = a;
    for (int y = cy * 8; y < cy * 8 + 8; ++y)
      for (int x = cx * 8; x < cx * 8 + 8; ++x)
        for (int c = 0; c < 3; ++c) b.at(y, x, c) = 1.0 - b.at(y, x, c);
    const std::vector<Image> other{b};
    const Tensor fb = model.backbone().forward(images_to_tensor(other));
    int best = -1;
    double best_v = -1.0;
    for (int cell = 0; cell < 49; ++cell) {
      double v = 0.0;
      for (int ch = 0; ch < 32; ++ch)
        v = std::max(v, std::abs(fa.at(ch * 49 + cell) - fb.at(ch * 49 + cell)));
      if (v > best_v) best_v = v, best = cell;
    }
    CAPTURE(best);
    CHECK(std::abs(best / 7 - cy) <= 1);
    CHECK(std::abs(best % 7 - cx) <= 1);
  }

  const std::vector<Image> small{random_image(48, 48, rng)};
  CHECK(capture_error([&] { model.backbone().forward(images_to_tensor(small)); }).kind() ==
        ErrorKind::Shape);
}

TEST_CASE("global head: zero weights give one half, range, gradient") {
  DtypeGuard g(Dtype::f64);
  Rng rng(3);
  ParameterSet ps;
  Linear head = Linear::create(ps, "head", 6, 1, rng);
  const Tensor feats = Tensor::uniform({3, 6, 7, 7}, -5.0, 5.0, rng);
  for (double v : global_intensity_head(feats, head).to_vector()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const auto params = ps.tensors();
  const Tensor target = Tensor::uniform({3, 1}, 0.0, 1.0, rng);
  const auto r = finite_difference_check(
      [&] { return mse_loss(global_intensity_head(feats, head), target); }, params);
  CHECK(r.max_relative_error < 1e-4);

  zero(head.weight);
  zero(head.bias);
  for (double v : global_intensity_head(feats, head).to_vector()) CHECK(v == 0.5);
}

TEST_CASE("aspp: shape and zero fusion") {
  RpenModel model(desk(), 4);
  Rng rng(4);
  const Tensor feats = Tensor::uniform({2, 32, 7, 7}, -1.0, 1.0, rng);
  NoGradGuard ng;
  CHECK(aspp_refine(feats, model.aspp()).shape() == Shape{2, 1, 7, 7});
  zero(model.aspp().fuse.weight);
  zero(model.aspp().fuse.bias);
  for (double v : aspp_refine(feats, model.aspp()).to_vector()) CHECK(v == 0.0);
}

TEST_CASE("rpen_forward: zero heads give 0.5, outputs stay in [0,1]") {
  RpenModel model(desk(), 5);
  Rng rng(5);
  const std::vector<Image> imgs{random_image(56, 56, rng), random_image(56, 56, rng)};
  const Tensor x = images_to_tensor(imgs);
  NoGradGuard ng;

  // Blow up every parameter: clamp and sigmoid must still bound the outputs.
  RpenModel wild(desk(), 6);
  for (auto& [name, t] : wild.parameters().entries()) {
    Tensor h = t;
    for (std::size_t i = 0; i < h.storage().size(); ++i)
      h.storage().set(i, h.storage().get(i) * 50.0);
  }
  for (const RpenModel* m : {&model, &wild}) {
    const PriorPrediction p = rpen_forward(x, *m);
    CHECK(p.global_intensity.shape() == Shape{2, 1});
    CHECK(p.patch_map.shape() == Shape{2, 1, 7, 7});
    for (double v : p.global_intensity.to_vector()) CHECK((v >= 0.0 && v <= 1.0));
    for (double v : p.patch_map.to_vector()) CHECK((v >= 0.0 && v <= 1.0));
  }

  zero(model.global_head().weight);
  zero(model.global_head().bias);
  zero(model.aspp().fuse.weight);
  zero(model.aspp().fuse.bias);
  const PriorPrediction p = rpen_forward(x, model);
  for (double v : p.patch_map.to_vector()) CHECK(v == 0.5);
  CHECK(p.globals() == std::vector<double>{0.5, 0.5});
  CHECK(p.patch_maps().size() == 2);
  CHECK(p.patch_maps()[1].grid == 7);
}

TEST_CASE("rpen_loss definitional and brute-force cases") {
  DtypeGuard g(Dtype::f64);
  Rng rng(6);
  const std::vector<PriorMap> t1{random_map(1, rng), random_map(1, rng)};
  const std::vector<PriorMap> t7{random_map(7, rng), random_map(7, rng)};

  auto prediction = [](const std::vector<PriorMap>& g1, const std::vector<PriorMap>& g7) {
    std::vector<double> gv, pv;
    for (const auto& m : g1) gv.push_back(m.values[0]);
    for (const auto& m : g7) pv.insert(pv.end(), m.values.begin(), m.values.end());
    return PriorPrediction{Tensor::from({2, 1}, gv), Tensor::from({2, 1, 7, 7}, pv)};
  };
  CHECK(rpen_loss(prediction(t1, t7), t1, t7).item() == 0.0);

  const std::vector<PriorMap> half1(2, PriorMap::filled(1, 0.5)), half7(2, PriorMap::filled(7, 0.5));
  const std::vector<PriorMap> zero1(2, PriorMap::filled(1, 0.0)), zero7(2, PriorMap::filled(7, 0.0));
  CHECK(rpen_loss(prediction(half1, half7), zero1, zero7).item() == doctest::Approx(0.5));

  const std::vector<PriorMap> p1{random_map(1, rng), random_map(1, rng)};
  const std::vector<PriorMap> p7{random_map(7, rng), random_map(7, rng)};
  double sg = 0.0, sp = 0.0;
  for (int n = 0; n < 2; ++n) {
    sg += std::pow(p1[n].values[0] - t1[n].values[0], 2);
    for (int i = 0; i < 49; ++i) sp += std::pow(p7[n].values[i] - t7[n].values[i], 2);
  }
  const double expect = sg / 2.0 + sp / 98.0;
  CHECK(std::abs(rpen_loss(prediction(p1, p7), t1, t7).item() - expect) < 1e-7);

  const std::vector<PriorMap> t14(2, PriorMap::filled(14, 0.0));
  CHECK(capture_error([&] { rpen_loss(prediction(p1, p7), t1, t14); }).kind() == ErrorKind::Shape);
}

TEST_CASE("tiny model loss passes a sampled finite-difference check") {
  DtypeGuard g(Dtype::f64);
  RpenConfig c;
  c.image_size = 16;
  c.stem_channels = 2;
  c.feature_grid = 2;
  c.aspp_dilations = {1};
  c.aspp_channels = 2;
  c.norm_groups = 2;
  const RpenModel model(c, 7);
  Rng rng(7);
  const std::vector<Image> imgs{random_image(16, 16, rng)};
  const Tensor x = images_to_tensor(imgs);
  const std::vector<PriorMap> t1{random_map(1, rng)}, t2{random_map(2, rng)};
  GradCheckOptions opt;
  opt.max_elements_per_tensor = 3;
  const auto params = model.parameters().tensors();
  const auto r =
      finite_difference_check([&] { return rpen_loss(rpen_forward(x, model), t1, t2); }, params, opt);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("checkpoint round trip and prediction helper") {
  testing::TempDir dir("rpen-ckpt");
  const RpenModel model(desk(), 8);
  save_rpen(model, dir / "r.ckpt");
  const RpenModel loaded = load_rpen(dir / "r.ckpt");
  Rng rng(8);
  const std::vector<Image> imgs{random_image(56, 56, rng), random_image(56, 56, rng)};
  const auto a = rpen_predict(imgs, model), b = rpen_predict(imgs, loaded);
  REQUIRE(a.size() == 2);
  for (int i = 0; i < 2; ++i) CHECK(a[i].values == b[i].values);
  CHECK(capture_error([&] { load_prrn(dir / "r.ckpt"); }).kind() == ErrorKind::Format);
}

}  // TEST_SUITE
