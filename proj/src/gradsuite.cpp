#include "refprior/gradsuite.hpp"

#include <functional>

#include "refprior/ops.hpp"
#include "refprior/prior.hpp"
#include "refprior/prrn.hpp"
#include "refprior/rng.hpp"
#include "refprior/rpen.hpp"

namespace refprior {

namespace {

struct Case {
  std::function<Tensor()> loss;
  std::vector<Tensor> params;
};

using CaseFactory = std::function<Case(Rng&)>;

int pick(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
}

Tensor leaf(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::uniform(shape, lo, hi, rng, Dtype::f64);
  t.set_requires_grad(true);
  return t;
}

// Magnitudes in [0.2, 1] with random sign: keeps abs/l1 away from their kink.
Tensor leaf_away_from_zero(const Shape& shape, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (double& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
  Tensor t = Tensor::from(shape, v, Dtype::f64);
  t.set_requires_grad(true);
  return t;
}

// sum(out * w) with a fixed random w.
std::function<Tensor()> projected(std::function<Tensor()> op, Rng& rng) {
  Tensor probe = op();
  Tensor w = Tensor::uniform(probe.shape(), -1.0, 1.0, rng, Dtype::f64);
  return [op, w] { return sum(mul(op(), w)); };
}

Shape random_shape(Rng& rng, int rank_lo, int rank_hi, int dim_hi = 4) {
  Shape s(static_cast<std::size_t>(pick(rng, rank_lo, rank_hi)));
  for (auto& d : s) d = pick(rng, 1, dim_hi);
  return s;
}

Case unary_case(Rng& rng, Tensor (*fn)(const Tensor&), bool away_from_zero = false) {
  const Shape s = random_shape(rng, 1, 3);
  Tensor x = away_from_zero ? leaf_away_from_zero(s, rng) : leaf(s, rng, -3.0, 3.0);
  return {projected([=] { return fn(x); }, rng), {x}};
}

Case binary_case(Rng& rng, Tensor (*fn)(const Tensor&, const Tensor&)) {
  const Shape s = random_shape(rng, 1, 3);
  Tensor a = leaf(s, rng), b = leaf(s, rng);
  return {projected([=] { return fn(a, b); }, rng), {a, b}};
}

AttentionWeights random_attention(std::int64_t d, Rng& rng) {
  AttentionWeights w;
  for (Tensor* t : {&w.q_weight, &w.k_weight, &w.v_weight, &w.out_weight}) *t = leaf({d, d}, rng);
  for (Tensor* t : {&w.q_bias, &w.k_bias, &w.v_bias, &w.out_bias}) *t = leaf({d}, rng);
  return w;
}

std::vector<std::pair<std::string, CaseFactory>> primitive_cases() {
  std::vector<std::pair<std::string, CaseFactory>> cases;
  cases.emplace_back("add", [](Rng& r) { return binary_case(r, add); });
  cases.emplace_back("sub", [](Rng& r) { return binary_case(r, sub); });
  cases.emplace_back("mul", [](Rng& r) { return binary_case(r, mul); });
  cases.emplace_back("add_scalar", [](Rng& r) {
    Tensor x = leaf(random_shape(r, 1, 3), r);
    const double c = r.uniform(-2.0, 2.0);
    return Case{projected([=] { return add_scalar(x, c); }, r), {x}};
  });
  cases.emplace_back("mul_scalar", [](Rng& r) {
    Tensor x = leaf(random_shape(r, 1, 3), r);
    const double c = r.uniform(-2.0, 2.0);
    return Case{projected([=] { return mul_scalar(x, c); }, r), {x}};
  });
  cases.emplace_back("silu", [](Rng& r) { return unary_case(r, silu); });
  cases.emplace_back("sigmoid", [](Rng& r) { return unary_case(r, sigmoid); });
  cases.emplace_back("tanh", [](Rng& r) { return unary_case(r, tanh); });
  cases.emplace_back("square", [](Rng& r) { return unary_case(r, square); });
  cases.emplace_back("abs", [](Rng& r) { return unary_case(r, abs, true); });
  cases.emplace_back("clamp", [](Rng& r) {
    // Inputs on a lattice offset from the clamp bounds so no probe crosses a kink.
    const Shape s = random_shape(r, 1, 3);
    std::vector<double> v(static_cast<std::size_t>(numel(s)));
    for (double& x : v) x = -1.45 + 0.1 * static_cast<double>(r.uniform_int(30));
    Tensor x = Tensor::from(s, v, Dtype::f64);
    x.set_requires_grad(true);
    return Case{projected([=] { return clamp(x, -0.5, 0.5); }, r), {x}};
  });
  cases.emplace_back("sum", [](Rng& r) {
    Tensor x = leaf(random_shape(r, 1, 3), r);
    const double c = r.uniform(0.5, 2.0);
    return Case{[=] { return square(mul_scalar(sum(x), c)); }, {x}};
  });
  cases.emplace_back("mean", [](Rng& r) {
    Tensor x = leaf(random_shape(r, 1, 3), r);
    return Case{[=] { return square(mean(x)); }, {x}};
  });
  cases.emplace_back("reshape", [](Rng& r) {
    const std::int64_t a = pick(r, 1, 4), b = pick(r, 1, 4), c = pick(r, 1, 3);
    Tensor x = leaf({a, b, c}, r);
    return Case{projected([=] { return reshape(x, {a * c, b}); }, r), {x}};
  });
  cases.emplace_back("permute", [](Rng& r) {
    Tensor x = leaf(random_shape(r, 3, 3), r);
    std::vector<int> dims{0, 1, 2};
    for (int i = 2; i > 0; --i) std::swap(dims[i], dims[r.uniform_int(i + 1)]);
    return Case{projected([=] { return permute(x, dims); }, r), {x}};
  });
  cases.emplace_back("concat", [](Rng& r) {
    Shape s = random_shape(r, 2, 3);
    const int axis = pick(r, 0, static_cast<int>(s.size()) - 1);
    Tensor a = leaf(s, r);
    s[static_cast<std::size_t>(axis)] = pick(r, 1, 3);
    Tensor b = leaf(s, r);
    return Case{projected([=] { return concat(std::vector<Tensor>{a, b}, axis); }, r), {a, b}};
  });
  cases.emplace_back("bmm", [](Rng& r) {
    const std::int64_t b = pick(r, 1, 3), m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
    Tensor x = leaf({b, m, k}, r), y = leaf({b, k, n}, r);
    return Case{projected([=] { return bmm(x, y); }, r), {x, y}};
  });
  cases.emplace_back("softmax", [](Rng& r) {
    Tensor x = leaf({pick(r, 1, 3), pick(r, 2, 5)}, r, -2.0, 2.0);
    return Case{projected([=] { return softmax(x); }, r), {x}};
  });
  cases.emplace_back("linear", [](Rng& r) {
    const std::int64_t in = pick(r, 1, 5), out = pick(r, 1, 5);
    Tensor x = leaf({pick(r, 1, 3), pick(r, 1, 3), in}, r);
    Tensor w = leaf({out, in}, r), b = leaf({out}, r);
    return Case{projected([=] { return linear(x, w, b); }, r), {x, w, b}};
  });
  cases.emplace_back("conv2d", [](Rng& r) {
    const std::int64_t n = pick(r, 1, 2), cin = pick(r, 1, 3), cout = pick(r, 1, 3);
    const std::int64_t k = r.uniform() < 0.3 ? 1 : 3;
    const int stride = pick(r, 1, 2), dilation = pick(r, 1, 2);
    const int padding = pick(r, 0, dilation * static_cast<int>(k / 2));
    Tensor x = leaf({n, cin, pick(r, 5, 8), pick(r, 5, 8)}, r);
    Tensor w = leaf({cout, cin, k, k}, r), b = leaf({cout}, r);
    return Case{projected([=] { return conv2d(x, w, b, stride, padding, dilation); }, r),
                {x, w, b}};
  });
  cases.emplace_back("group_norm", [](Rng& r) {
    const int groups = pick(r, 1, 3);
    const std::int64_t c = groups * pick(r, 1, 3);
    Tensor x = leaf({pick(r, 1, 2), c, pick(r, 2, 4), pick(r, 2, 4)}, r);
    Tensor gamma = leaf({c}, r, 0.5, 1.5), beta = leaf({c}, r);
    return Case{projected([=] { return group_norm(x, groups, gamma, beta); }, r),
                {x, gamma, beta}};
  });
  cases.emplace_back("nearest_upsample", [](Rng& r) {
    const std::int64_t h = pick(r, 1, 3), w = pick(r, 1, 3);
    const std::int64_t fh = pick(r, 1, 3), fw = pick(r, 1, 3);
    Tensor x = leaf({pick(r, 1, 2), pick(r, 1, 3), h, w}, r);
    return Case{projected([=] { return nearest_upsample(x, h * fh, w * fw); }, r), {x}};
  });
  cases.emplace_back("spatial_mean", [](Rng& r) {
    Tensor x = leaf({pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)}, r);
    return Case{projected([=] { return spatial_mean(x); }, r), {x}};
  });
  cases.emplace_back("self_attention", [](Rng& r) {
    const int heads = pick(r, 1, 2);
    const std::int64_t d = heads * pick(r, 1, 3);
    Tensor x = leaf({pick(r, 1, 2), pick(r, 2, 5), d}, r);
    const AttentionWeights w = random_attention(d, r);
    std::vector<Tensor> params{x,          w.q_weight, w.q_bias,   w.k_weight, w.k_bias,
                               w.v_weight, w.v_bias,   w.out_weight, w.out_bias};
    return Case{projected([=] { return self_attention(x, heads, w); }, r), params};
  });
  cases.emplace_back("mse_loss", [](Rng& r) {
    const Shape s = random_shape(r, 1, 3);
    Tensor a = leaf(s, r), b = leaf(s, r);
    return Case{[=] { return mse_loss(a, b); }, {a, b}};
  });
  cases.emplace_back("l1_loss", [](Rng& r) {
    const Shape s = random_shape(r, 1, 3);
    Tensor a = leaf(s, r);
    // Target = a + nonzero offset so no difference sits at the kink.
    Tensor offset = leaf_away_from_zero(s, r);
    Tensor b = add(a, offset).detach();
    b.set_requires_grad(true);
    return Case{[=] { return l1_loss(a, b); }, {a, b}};
  });
  return cases;
}

std::vector<PriorMap> random_priors(std::int64_t n, int grid, Rng& rng) {
  std::vector<PriorMap> maps;
  for (std::int64_t i = 0; i < n; ++i) {
    PriorMap m = PriorMap::filled(grid, 0.0);
    for (double& v : m.values) v = rng.uniform();
    maps.push_back(std::move(m));
  }
  return maps;
}

Case prrn_case(Rng& r) {
  PrrnConfig c;
  c.image_size = 8;
  c.base_channels = 4;
  c.channel_multipliers = {1, 2};
  c.resblocks_per_scale = 1;
  c.attention_heads = 2;
  c.prior_grid = 2;
  c.prior_dim = 8;
  c.norm_groups = 2;
  c.fwa_scale = r.uniform() < 0.5;
  auto model = std::make_shared<PrrnModel>(c, r.next_u64());
  // Perturb every tensor so zero-initialized biases sit off their init value.
  for (const auto& [name, t] : model->parameters().entries()) {
    Tensor p = t;
    for (std::size_t i = 0; i < static_cast<std::size_t>(p.numel()); ++i)
      p.storage().set(i, p.storage().get(i) + r.uniform(-0.1, 0.1));
  }
  const std::int64_t n = 2;
  Tensor images = Tensor::uniform({n, 3, 8, 8}, 0.0, 1.0, r, Dtype::f64);
  Tensor target = Tensor::uniform({n, 3, 8, 8}, 0.0, 1.0, r, Dtype::f64);
  const auto priors = random_priors(n, 2, r);
  return {[=] { return prrn_loss(prrn_forward(images, priors, *model), target); },
          model->parameters().tensors()};
}

Case rpen_case(Rng& r) {
  RpenConfig c;
  c.image_size = 16;
  c.stem_channels = 2;
  c.feature_grid = 2;
  c.aspp_dilations = {1};
  c.aspp_channels = 2;
  c.norm_groups = 2;
  auto model = std::make_shared<RpenModel>(c, r.next_u64());
  for (const auto& [name, t] : model->parameters().entries()) {
    Tensor p = t;
    for (std::size_t i = 0; i < static_cast<std::size_t>(p.numel()); ++i)
      p.storage().set(i, p.storage().get(i) + r.uniform(-0.1, 0.1));
  }
  const std::int64_t n = 2;
  Tensor images = Tensor::uniform({n, 3, 16, 16}, 0.0, 1.0, r, Dtype::f64);
  const auto truth_1 = random_priors(n, 1, r);
  const auto truth_g = random_priors(n, 2, r);
  return {[=] { return rpen_loss(model->forward(images), truth_1, truth_g); },
          model->parameters().tensors()};
}

GradSuiteEntry run_cases(const std::string& name, const CaseFactory& factory, int count,
                         std::uint64_t seed, const GradCheckOptions& base) {
  GradSuiteEntry entry{name, 0, 0.0, 0};
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, name, static_cast<std::uint64_t>(i)));
    const Case c = factory(rng);
    GradCheckOptions opts = base;
    opts.seed = derive_seed(seed, name + "-probe", static_cast<std::uint64_t>(i));
    const GradCheckResult res = finite_difference_check(c.loss, c.params, opts);
    entry.cases += 1;
    entry.elements_checked += res.elements_checked;
    entry.max_relative_error = std::max(entry.max_relative_error, res.max_relative_error);
  }
  return entry;
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options) {
  DtypeGuard guard(Dtype::f64);
  GradCheckOptions base;
  base.eps = options.eps;
  std::vector<GradSuiteEntry> out;
  for (const auto& [name, factory] : primitive_cases())
    out.push_back(run_cases(name, factory, options.cases_per_primitive, options.seed, base));
  if (options.include_models) {
    GradCheckOptions sampled = base;
    sampled.max_elements_per_tensor = options.model_elements_per_tensor;
    out.push_back(run_cases("prrn_loss", prrn_case, options.model_cases, options.seed, sampled));
    out.push_back(run_cases("rpen_loss", rpen_case, options.model_cases, options.seed, sampled));
  }
  return out;
}

}  // namespace refprior
