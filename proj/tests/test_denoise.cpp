#include <doctest.h>

#include <cmath>

#include "mbd/denoise.hpp"
#include "mbd/errors.hpp"
#include "mbd/rng.hpp"
#include "test_util.hpp"

using namespace mbd;
using namespace mbd::denoise;

TEST_CASE("ALGe is exact on noiseless monoexponential volumes") {
  // closed-form oracle: S = 200 exp(-0.8 b / 1000)
  const auto signal = [](double b) { return 200.0 * std::exp(-0.8 * b / 1000.0); };
  Volume s1({8, 8, 4}, 1, static_cast<float>(signal(0)));
  Volume s2({8, 8, 4}, 1, static_cast<float>(signal(1000)));

  const AlgeResult res = alge_extrapolate(s1, 0, s2, 1000, 2000);
  const double expected = 200.0 * std::exp(-1.6); // 40.3793035989310817
  for (float f : res.volume.data) CHECK(std::abs(f - expected) < 1e-4);
  for (float d : res.defects.data) CHECK(d == 0.0f);

  SUBCASE("double-precision path is exact to 1e-9 relative") {
    // evaluate the per-voxel formula directly at double precision
    const double v1 = signal(0), v2 = signal(1000);
    const double d = (std::log(v1) - std::log(v2)) / 1000.0;
    CHECK(std::abs(v1 * std::exp(-2000.0 * d) - expected) <= 1e-9 * expected);
  }
  SUBCASE("b_target == b1 returns S1 exactly") {
    const AlgeResult same = alge_extrapolate(s1, 0, s2, 1000, 0);
    for (std::size_t i = 0; i < s1.data.size(); ++i) CHECK(same.volume.data[i] == s1.data[i]);
  }
}

TEST_CASE("ALGe flags nonpositive voxels instead of clipping") {
  Volume s1({4, 4, 1}, 1, 100.0f);
  Volume s2({4, 4, 1}, 1, 50.0f);
  s2.data[5] = 0.0f;
  const AlgeResult res = alge_extrapolate(s1, 0, s2, 1000, 2000);
  CHECK(res.volume.data[5] == 0.0f);
  CHECK(res.defects.data[5] == 1.0f);
  CHECK(res.defects.data[0] == 0.0f);
  CHECK_THROWS_AS(alge_extrapolate(s1, 1000, s2, 1000, 2000), ConfigError);
}

TEST_CASE("method config invariants") {
  MethodConfig cfg;
  cfg.target_bvalue = 4000;

  cfg.method = Method::MBD;
  cfg.input_bvalues = {0, 1000};
  CHECK_THROWS_AS(cfg.validate(), ConfigError); // target missing
  cfg.input_bvalues = {0, 1000, 4000};
  CHECK_NOTHROW(cfg.validate());

  cfg.method = Method::N2N;
  CHECK_THROWS_AS(cfg.validate(), ConfigError); // more than the target
  cfg.input_bvalues = {4000};
  CHECK_NOTHROW(cfg.validate());

  cfg.method = Method::CNNe;
  cfg.input_bvalues = {0, 1000, 4000};
  CHECK_THROWS_AS(cfg.validate(), ConfigError); // target must be excluded
  cfg.input_bvalues = {0, 1000};
  CHECK_NOTHROW(cfg.validate());

  cfg.method = Method::ALGe;
  cfg.alge_pair = {1000, 1000};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.alge_pair = {0, 1000};
  CHECK_NOTHROW(cfg.validate());
}

namespace {

Volume random_noise_volume(std::array<int, 3> dims, int channels, double sigma,
                           std::uint64_t seed) {
  Volume v(dims, channels);
  RandomStream rng(seed);
  for (float& f : v.data) f = static_cast<float>(sigma * rng.normal());
  return v;
}

double channel_variance(const Volume& v) {
  double sum = 0, sum2 = 0;
  for (float f : v.data) {
    sum += f;
    sum2 += static_cast<double>(f) * f;
  }
  const double n = static_cast<double>(v.data.size());
  return sum2 / n - (sum / n) * (sum / n);
}

} // namespace

TEST_CASE("MPPCA properties") {
  SUBCASE("pure-noise variance is strongly reduced") {
    // Monte-Carlo oracle across >= 100 windows
    const Volume noise = random_noise_volume({12, 12, 10}, 6, 3.0, 101);
    const Volume den = mppca_denoise(noise, 2, 2);
    CHECK(channel_variance(den) < 0.3 * channel_variance(noise));
  }
  SUBCASE("noiseless rank-1 data passes through") {
    Volume v({10, 10, 8}, 4);
    RandomStream rng(7);
    std::vector<double> spatial(v.voxels_per_channel());
    for (double& s : spatial) s = 1.0 + 0.5 * rng.normal();
    const double weights[4] = {1.0, 0.7, 0.4, 0.2};
    for (int c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < spatial.size(); ++i)
        v.channel_ptr(c)[i] = static_cast<float>(weights[c] * spatial[i]);

    const Volume den = mppca_denoise(v, 2, 1);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      CHECK(std::abs(den.data[i] - v.data[i]) <= 1e-8 * std::max(1.0f, std::abs(v.data[i])));
  }
  SUBCASE("rank-1 signal plus noise at SNR 10 improves MSE") {
    Volume clean({12, 12, 10}, 5);
    RandomStream rng(8);
    std::vector<double> spatial(clean.voxels_per_channel());
    for (double& s : spatial) s = 10.0 + 3.0 * rng.normal();
    const double weights[5] = {1.0, 0.8, 0.6, 0.4, 0.2};
    for (int c = 0; c < 5; ++c)
      for (std::size_t i = 0; i < spatial.size(); ++i)
        clean.channel_ptr(c)[i] = static_cast<float>(weights[c] * spatial[i]);

    double mean_abs = 0;
    for (float f : clean.data) mean_abs += std::abs(f);
    mean_abs /= clean.data.size();
    const double sigma = mean_abs / 10.0;

    Volume noisy = clean;
    for (float& f : noisy.data) f += static_cast<float>(sigma * rng.normal());
    const Volume den = mppca_denoise(noisy, 2, 2);

    double mse_noisy = 0, mse_den = 0;
    for (std::size_t i = 0; i < clean.data.size(); ++i) {
      mse_noisy += std::pow(static_cast<double>(noisy.data[i]) - clean.data[i], 2);
      mse_den += std::pow(static_cast<double>(den.data[i]) - clean.data[i], 2);
    }
    CHECK(mse_den < mse_noisy);
  }
  SUBCASE("constant volumes pass through") {
    Volume v({8, 8, 8}, 3, 5.0f);
    const Volume den = mppca_denoise(v, 2, 1);
    for (float f : den.data) CHECK(f == doctest::Approx(5.0f));
  }
  SUBCASE("serial and parallel runs agree bit for bit") {
    const Volume noise = random_noise_volume({10, 10, 8}, 4, 2.0, 55);
    CHECK(mppca_denoise(noise, 2, 1).data == mppca_denoise(noise, 2, 3).data);
  }
  SUBCASE("too few channels rejected") {
    const Volume v = random_noise_volume({8, 8, 8}, 2, 1.0, 1);
    CHECK_THROWS_AS(mppca_denoise(v, 2, 1), ConfigError);
  }
}

TEST_CASE("dispatch") {
  TempDir tmp("dispatch");
  // a 3-channel labeled volume
  Volume dwi({12, 12, 6}, 3);
  dwi.labels = {"b=0", "b=1000", "b=4000"};
  RandomStream rng(9);
  for (float& f : dwi.data) f = static_cast<float>(100.0 + 10.0 * rng.normal());

  SUBCASE("N2N with zero weights returns the noisy target channel") {
    nn::Network net({4000.0}, 4000.0, nn::NetworkMode::Residual, 1);
    for (auto& p : net.params())
      for (std::size_t i = 0; i < p.size; ++i) p.values[i] = 0.0;
    const std::string ckpt = tmp.str("n2n.net");
    nn::save_network(net, ckpt);

    MethodConfig cfg;
    cfg.method = Method::N2N;
    cfg.input_bvalues = {4000};
    cfg.target_bvalue = 4000;
    cfg.checkpoint = ckpt;
    const Volume out = denoise::denoise(cfg, dwi, 1);
    CHECK(out.dims == dwi.dims);
    const std::size_t vox = dwi.voxels_per_channel();
    for (std::size_t i = 0; i < vox; ++i)
      CHECK(out.data[i] == doctest::Approx(dwi.data[2 * vox + i]).epsilon(1e-6));
  }
  SUBCASE("MPPCA dispatch keeps dims and stays finite") {
    MethodConfig cfg;
    cfg.method = Method::MPPCA;
    cfg.target_bvalue = 4000;
    const Volume out = denoise::denoise(cfg, dwi, 1);
    CHECK(out.dims == dwi.dims);
    CHECK(out.channels == 1);
    CHECK_NOTHROW(out.validate());
  }
  SUBCASE("ALGe dispatch") {
    MethodConfig cfg;
    cfg.method = Method::ALGe;
    cfg.target_bvalue = 4000;
    cfg.alge_pair = {0, 1000};
    const Volume out = denoise::denoise(cfg, dwi, 1);
    CHECK(out.dims == dwi.dims);
    CHECK_NOTHROW(out.validate());
  }
  SUBCASE("missing channel label is an error") {
    Volume unlabeled = dwi;
    unlabeled.labels.clear();
    MethodConfig cfg;
    cfg.method = Method::MPPCA;
    cfg.target_bvalue = 4000;
    CHECK_THROWS_AS(denoise::denoise(cfg, unlabeled, 1), ConfigError);
  }
}

TEST_CASE("input combination enumeration") {
  const auto combos = enumerate_input_combinations({0, 1000, 4000}, 4000);
  REQUIRE(combos.size() == 4);
  CHECK(combos[0] == std::vector<double>{4000});
  CHECK(combos[1] == std::vector<double>{0, 4000});
  CHECK(combos[2] == std::vector<double>{1000, 4000});
  CHECK(combos[3] == std::vector<double>{0, 1000, 4000});

  // intermediate target
  const auto mid = enumerate_input_combinations({0, 1000, 4000}, 1000);
  CHECK(mid[0] == std::vector<double>{1000});
  CHECK(mid[1] == std::vector<double>{0, 1000});
  CHECK(mid[2] == std::vector<double>{1000, 4000});
  CHECK(mid[3] == std::vector<double>{0, 1000, 4000});

  CHECK_THROWS_AS(enumerate_input_combinations({0, 1000}, 1000), ConfigError);
  CHECK_THROWS_AS(enumerate_input_combinations({0, 1000, 4000}, 300), ConfigError);
}

TEST_CASE("sweep with repeats=1 matches a single training call") {
  // tiny synthetic dataset: constant signal, independent noise
  const auto builder = [](const std::vector<double>& inputs, double,
                          nn::PatchDataset& train_out, nn::PatchDataset& val_out) {
    const auto make = [&](std::uint64_t seed, int n) {
      RandomStream rng(seed);
      nn::PatchDataset ds;
      ds.in_channels = static_cast<int>(inputs.size());
      ds.height = ds.width = 16;
      for (int p = 0; p < n; ++p) {
        for (std::size_t c = 0; c < inputs.size(); ++c)
          for (int i = 0; i < 16 * 16; ++i) ds.inputs.push_back(50.0 + rng.normal());
        for (int i = 0; i < 16 * 16; ++i) ds.targets.push_back(50.0 + rng.normal());
      }
      return ds;
    };
    train_out = make(1, 8);
    val_out = make(2, 4);
  };

  SweepConfig sc;
  sc.bvalues = {0, 1000, 4000};
  sc.target_bvalue = 4000;
  sc.repeats = 1;
  sc.training.patch_size = 16;
  sc.training.batch_size = 8;
  sc.training.max_epochs = 3;
  sc.training.patience = 3;
  sc.training.seed = 42;

  const SweepResult res = input_configuration_sweep(builder, sc);
  REQUIRE(res.curves.size() == 4);
  CHECK(res.ranking.size() == 4);

  // reproduce combo 0 (N2N-like) manually
  nn::PatchDataset train_set, val_set;
  builder({4000}, 4000, train_set, val_set);
  nn::Network net({4000}, 4000, nn::NetworkMode::Residual, 42);
  const nn::TrainResult tr = nn::train(net, train_set, val_set, sc.training);
  REQUIRE(res.curves[0].mean_val_loss.size() == tr.val_loss.size());
  for (std::size_t e = 0; e < tr.val_loss.size(); ++e)
    CHECK(res.curves[0].mean_val_loss[e] == doctest::Approx(tr.val_loss[e]).epsilon(1e-12));
}
