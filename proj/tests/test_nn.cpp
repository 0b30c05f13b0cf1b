#include <doctest.h>

#include <cmath>

#include "mbd/errors.hpp"
#include "mbd/nn.hpp"
#include "mbd/rng.hpp"
#include "test_util.hpp"

using namespace mbd;
using namespace mbd::nn;

namespace {

void fill_random(Tensor& t, RandomStream& rng, double scale = 1.0) {
  for (double& v : t.v) v = scale * rng.normal();
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// scalar objective J = sum(r .* f(x)) with a fixed random projection r
double projected(const Tensor& y, const Tensor& r) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.v.size(); ++i) acc += y.v[i] * r.v[i];
  return acc;
}

} // namespace

TEST_CASE("conv2d forward basics") {
  SUBCASE("identity kernel reproduces the input") {
    Conv2d conv(1, 1, 1, true);
    conv.w[4] = 1.0; // center tap
    Tensor x(1, 1, 5, 5);
    RandomStream rng(1);
    fill_random(x, rng);
    Tensor y;
    conv.forward(x, y, 1);
    for (std::size_t i = 0; i < x.v.size(); ++i) CHECK(y.v[i] == doctest::Approx(x.v[i]));
  }
  SUBCASE("all-ones kernel sums the 3x3 neighbourhood") {
    Conv2d conv(1, 1, 1, true);
    std::fill(conv.w.begin(), conv.w.end(), 1.0);
    Tensor x(1, 1, 5, 5);
    for (double& v : x.v) v = 2.0;
    Tensor y;
    conv.forward(x, y, 1);
    CHECK(y.v[2 * 5 + 2] == doctest::Approx(18.0)); // interior: 9 * c
    CHECK(y.v[0] == doctest::Approx(8.0));          // corner: 4 taps inside
  }
  SUBCASE("grouped convolution equals independent per-group convolutions") {
    RandomStream rng(2);
    Conv2d grouped(4, 6, 2, true);
    grouped.init_he_uniform(rng);
    for (double& b : grouped.b) b = rng.normal();

    Tensor x(2, 4, 6, 6);
    fill_random(x, rng);
    Tensor y;
    grouped.forward(x, y, 1);

    // oracle: run each group as an ungrouped convolution
    for (int g = 0; g < 2; ++g) {
      Conv2d part(2, 3, 1, true);
      std::copy(grouped.w.begin() + g * 3 * 2 * 9, grouped.w.begin() + (g + 1) * 3 * 2 * 9,
                part.w.begin());
      std::copy(grouped.b.begin() + g * 3, grouped.b.begin() + (g + 1) * 3, part.b.begin());
      Tensor xg(2, 2, 6, 6);
      for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 2; ++c)
          std::copy(x.plane(n, g * 2 + c), x.plane(n, g * 2 + c) + x.plane_size(),
                    xg.plane(n, c));
      Tensor yg;
      part.forward(xg, yg, 1);
      for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
          for (std::size_t i = 0; i < y.plane_size(); ++i)
            CHECK(y.plane(n, g * 3 + c)[i] == doctest::Approx(yg.plane(n, c)[i]).epsilon(1e-12));
    }
  }
  SUBCASE("channel mismatch is rejected") {
    Conv2d conv(3, 8, 1, true);
    Tensor x(1, 2, 4, 4), y;
    CHECK_THROWS_AS(conv.forward(x, y, 1), ConfigError);
  }
}

TEST_CASE("batchnorm forward basics") {
  BatchNorm2d bn(2);
  bn.gamma = {2.0, 3.0};
  bn.beta = {0.5, -0.5};
  Tensor x(3, 2, 4, 4);
  for (double& v : x.v) v = 7.0; // constant batch
  Tensor y;
  bn.forward(x, y, /*training=*/true);
  // normalized constant batch is 0, so the output is just beta
  for (int n = 0; n < 3; ++n) {
    CHECK(y.plane(n, 0)[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(y.plane(n, 1)[0] == doctest::Approx(-0.5).epsilon(1e-9));
  }
}

TEST_CASE("relu backward zeroes gradients at non-positive activations") {
  Tensor x(1, 1, 2, 2);
  x.v = {-1.0, 0.0, 2.0, 3.0};
  Tensor post = x;
  relu_forward_inplace(post);
  Tensor g(1, 1, 2, 2);
  g.v = {1.0, 1.0, 1.0, 1.0};
  relu_backward_inplace(post, g);
  CHECK(g.v == std::vector<double>{0.0, 0.0, 1.0, 1.0});
}

// --- finite difference oracles ------------------------------------------

namespace {

constexpr double kFdEps = 1e-5;
constexpr double kFdTol = 1e-4;

// checks every parameter of `conv` (and the input) against central
// differences of the projected output
void check_conv_gradients(Conv2d& conv, Tensor& x, RandomStream& rng) {
  Tensor y;
  conv.forward(x, y, 1);
  Tensor r(y.n, y.c, y.h, y.w);
  fill_random(r, rng);

  conv.zero_grads();
  Tensor gx;
  conv.backward(x, r, &gx, 1);

  auto fd_check = [&](double* value, double analytic) {
    const double orig = *value;
    *value = orig + kFdEps;
    conv.forward(x, y, 1);
    const double jp = projected(y, r);
    *value = orig - kFdEps;
    conv.forward(x, y, 1);
    const double jm = projected(y, r);
    *value = orig;
    CHECK(rel_err(analytic, (jp - jm) / (2 * kFdEps)) < kFdTol);
  };

  for (std::size_t i = 0; i < conv.w.size(); ++i) fd_check(&conv.w[i], conv.gw[i]);
  for (std::size_t i = 0; i < conv.b.size(); ++i) fd_check(&conv.b[i], conv.gb[i]);
  for (std::size_t i = 0; i < x.v.size(); ++i) fd_check(&x.v[i], gx.v[i]);
}

} // namespace

TEST_CASE("conv2d gradients match central finite differences") {
  RandomStream rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Conv2d conv(3, 4, 1, true);
    conv.init_he_uniform(rng);
    Tensor x(2, 3, 5, 5);
    fill_random(x, rng);
    check_conv_gradients(conv, x, rng);
  }
}

TEST_CASE("grouped conv2d gradients match central finite differences") {
  RandomStream rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    Conv2d conv(2, 6, 2, true);
    conv.init_he_uniform(rng);
    Tensor x(2, 2, 4, 4);
    fill_random(x, rng);
    check_conv_gradients(conv, x, rng);
  }
}

TEST_CASE("batchnorm gradients match central finite differences") {
  RandomStream rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    BatchNorm2d bn(3);
    for (double& g : bn.gamma) g = 1.0 + 0.3 * rng.normal();
    for (double& b : bn.beta) b = 0.3 * rng.normal();
    Tensor x(2, 3, 4, 4);
    fill_random(x, rng, 2.0);

    Tensor y;
    bn.forward(x, y, true);
    Tensor r(y.n, y.c, y.h, y.w);
    fill_random(r, rng);
    bn.zero_grads();
    Tensor gx;
    bn.backward(x, r, gx);

    auto fd_check = [&](double* value, double analytic) {
      const double orig = *value;
      *value = orig + kFdEps;
      bn.forward(x, y, true);
      const double jp = projected(y, r);
      *value = orig - kFdEps;
      bn.forward(x, y, true);
      const double jm = projected(y, r);
      *value = orig;
      CHECK(rel_err(analytic, (jp - jm) / (2 * kFdEps)) < kFdTol);
    };
    for (std::size_t i = 0; i < bn.gamma.size(); ++i) fd_check(&bn.gamma[i], bn.ggamma[i]);
    for (std::size_t i = 0; i < bn.beta.size(); ++i) fd_check(&bn.beta[i], bn.gbeta[i]);
    for (std::size_t i = 0; i < x.v.size(); ++i) fd_check(&x.v[i], gx.v[i]);
  }
}

TEST_CASE("full network gradients: sampled entries of every parameter tensor") {
  RandomStream rng(14);
  for (NetworkMode mode : {NetworkMode::Residual, NetworkMode::Direct}) {
    Network net({0.0, 1000.0, 4000.0}, 4000.0, mode, 99);
    Tensor x(2, 3, 8, 8), t(2, 1, 8, 8);
    fill_random(x, rng);
    fill_random(t, rng);

    Tensor grad;
    net.zero_grads();
    Tensor y = net.forward(x, true, 1);
    mse_loss(y, t, &grad);
    net.backward(grad, nullptr, 1);

    // copy out analytic grads, then probe random entries per tensor
    auto params = net.params();
    for (auto& p : params) {
      std::vector<double> analytic(p.grads, p.grads + p.size);
      for (int probe = 0; probe < 6; ++probe) {
        const std::size_t i =
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.size) - 1));
        const double orig = p.values[i];
        p.values[i] = orig + kFdEps;
        double jp = mse_loss(net.forward(x, true, 1), t, nullptr);
        p.values[i] = orig - kFdEps;
        double jm = mse_loss(net.forward(x, true, 1), t, nullptr);
        p.values[i] = orig;
        CHECK(rel_err(analytic[i], (jp - jm) / (2 * kFdEps)) < kFdTol);
      }
    }
  }
}

TEST_CASE("network head algebra") {
  RandomStream rng(15);
  SUBCASE("zero-weight residual network is the identity on the target channel") {
    Network net({0.0, 1000.0}, 1000.0, NetworkMode::Residual, 1);
    for (auto& p : net.params())
      for (std::size_t i = 0; i < p.size; ++i) p.values[i] = 0.0;
    Tensor x(1, 2, 6, 6);
    fill_random(x, rng);
    Tensor y = net.forward(x, false, 1);
    for (std::size_t i = 0; i < y.plane_size(); ++i)
      CHECK(y.v[i] == doctest::Approx(x.plane(0, 1)[i]));
  }
  SUBCASE("zero-weight direct network outputs zero") {
    Network net({0.0, 1000.0}, 4000.0, NetworkMode::Direct, 1);
    for (auto& p : net.params())
      for (std::size_t i = 0; i < p.size; ++i) p.values[i] = 0.0;
    Tensor x(1, 2, 6, 6);
    fill_random(x, rng);
    Tensor y = net.forward(x, false, 1);
    for (double v : y.v) CHECK(v == 0.0);
  }
  SUBCASE("residual output plus noise estimate reproduces the input channel exactly") {
    Network net({0.0, 1000.0, 4000.0}, 4000.0, NetworkMode::Residual, 7);
    Tensor x(2, 3, 8, 8);
    fill_random(x, rng, 10.0);
    Tensor y = net.forward(x, false, 1);
    const Tensor& noise = net.last_stack_output();
    for (int n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < y.plane_size(); ++i) {
        const double recon = y.plane(n, 0)[i] + noise.plane(n, 0)[i];
        CHECK(std::abs(recon - x.plane(n, 2)[i]) <= 1e-12 * std::max(1.0, std::abs(recon)));
      }
  }
  SUBCASE("residual mode requires the target among the inputs") {
    CHECK_THROWS_AS(Network({0.0, 1000.0}, 4000.0, NetworkMode::Residual, 1), ConfigError);
  }
  SUBCASE("spatial shape is preserved") {
    Network net({0.0}, 0.0, NetworkMode::Residual, 3);
    Tensor x(1, 1, 17, 23);
    fill_random(x, rng);
    Tensor y = net.forward(x, false, 1);
    CHECK(y.h == 17);
    CHECK(y.w == 23);
  }
  SUBCASE("multithreaded forward/backward is bit-identical to serial") {
    Network net({0.0, 1000.0, 4000.0}, 4000.0, NetworkMode::Residual, 21);
    Tensor x(2, 3, 12, 12), t(2, 1, 12, 12);
    fill_random(x, rng);
    fill_random(t, rng);

    Tensor g1, g2;
    net.zero_grads();
    Tensor y1 = net.forward(x, true, 1);
    mse_loss(y1, t, &g1);
    net.backward(g1, nullptr, 1);
    std::vector<double> grads1;
    for (auto& p : net.params()) grads1.insert(grads1.end(), p.grads, p.grads + p.size);

    net.zero_grads();
    Tensor y2 = net.forward(x, true, 4);
    mse_loss(y2, t, &g2);
    net.backward(g2, nullptr, 4);
    std::vector<double> grads2;
    for (auto& p : net.params()) grads2.insert(grads2.end(), p.grads, p.grads + p.size);

    CHECK(y1.v == y2.v);
    CHECK(grads1 == grads2);
  }
}

TEST_CASE("patch extraction") {
  const auto make_slices = [](int w, int h) {
    Volume input({w, h, 1}, 2);
    Volume target({w, h, 1}, 1);
    RandomStream rng(5);
    for (float& f : input.data) f = static_cast<float>(rng.normal());
    for (float& f : target.data) f = static_cast<float>(rng.normal());
    return std::vector<std::pair<Volume, Volume>>{{input, target}};
  };

  SUBCASE("60x60 slice, size 30, stride 30 -> 4 patches") {
    CHECK(extract_patches(make_slices(60, 60), 30, 30).count() == 4);
  }
  SUBCASE("64x64 slice, size 30, stride 30 -> 4 patches (remainder dropped)") {
    CHECK(extract_patches(make_slices(64, 64), 30, 30).count() == 4);
  }
  SUBCASE("slices smaller than the patch are rejected") {
    CHECK_THROWS_AS(extract_patches(make_slices(20, 20), 30, 30), ConfigError);
  }
}

TEST_CASE("training behaviour") {
  // dataset where the target equals the input channel: a residual network
  // can reach zero loss by predicting zero noise
  const auto identity_dataset = [](int n_patches, std::uint64_t seed) {
    RandomStream rng(seed);
    PatchDataset ds;
    ds.in_channels = 1;
    ds.height = ds.width = 16;
    for (int p = 0; p < n_patches; ++p) {
      std::vector<double> patch(16 * 16);
      for (double& v : patch) v = 5.0 + rng.normal();
      ds.inputs.insert(ds.inputs.end(), patch.begin(), patch.end());
      ds.targets.insert(ds.targets.end(), patch.begin(), patch.end());
    }
    return ds;
  };

  TrainingConfig cfg;
  cfg.patch_size = 16;
  cfg.batch_size = 8;
  cfg.max_epochs = 30;
  cfg.patience = 30;
  cfg.seed = 3;

  SUBCASE("residual net learns the identity (zero noise) on matched pairs") {
    Network net({0.0}, 0.0, NetworkMode::Residual, 5);
    const PatchDataset train_set = identity_dataset(24, 1);
    const PatchDataset val_set = identity_dataset(8, 2);
    const TrainResult res = train(net, train_set, val_set, cfg);
    CHECK(res.best_val_loss < 0.05 * res.initial_val_loss);
  }
  SUBCASE("identical seeds give identical loss curves") {
    const PatchDataset train_set = identity_dataset(16, 1);
    const PatchDataset val_set = identity_dataset(8, 2);
    TrainingConfig quick = cfg;
    quick.max_epochs = 5;

    Network a({0.0}, 0.0, NetworkMode::Residual, 5);
    Network b({0.0}, 0.0, NetworkMode::Residual, 5);
    const TrainResult ra = train(a, train_set, val_set, quick);
    const TrainResult rb = train(b, train_set, val_set, quick);
    CHECK(ra.train_loss == rb.train_loss);
    CHECK(ra.val_loss == rb.val_loss);
  }
  SUBCASE("empty datasets are rejected") {
    Network net({0.0}, 0.0, NetworkMode::Residual, 5);
    PatchDataset empty;
    CHECK_THROWS_AS(train(net, empty, empty, cfg), ConfigError);
  }
}

TEST_CASE("checkpoint round-trip preserves inference") {
  TempDir tmp("ckpt");
  RandomStream rng(33);
  Network net({0.0, 1000.0, 4000.0}, 4000.0, NetworkMode::Residual, 17);
  // give BN stats a non-default state
  for (auto& bn : net.bns())
    for (std::size_t i = 0; i < bn.running_mean.size(); ++i) {
      bn.running_mean[i] = 0.1 * rng.normal();
      bn.running_var[i] = 1.0 + 0.1 * std::abs(rng.normal());
    }

  const std::string path = tmp.str("net.net");
  save_network(net, path);
  Network loaded = load_network(path);
  CHECK(loaded.mode() == net.mode());
  CHECK(loaded.input_bvalues() == net.input_bvalues());
  CHECK(loaded.target_bvalue() == net.target_bvalue());

  Tensor x(1, 3, 10, 10);
  fill_random(x, rng, 3.0);
  Tensor y0 = net.forward(x, false, 1);
  Tensor y1 = loaded.forward(x, false, 1);
  // parameters round through float32 at rest
  for (std::size_t i = 0; i < y0.v.size(); ++i)
    CHECK(y0.v[i] == doctest::Approx(y1.v[i]).epsilon(1e-4));
}
