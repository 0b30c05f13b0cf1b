#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "mbd/errors.hpp"
#include "mbd/rng.hpp"
#include "mbd/simulate.hpp"
#include "test_util.hpp"

using namespace mbd;

namespace {

AcquisitionProtocol paper_protocol() {
  AcquisitionProtocol p;
  p.bvalues = {0, 1000, 4000};
  p.directions = {{1, 0, 0}};
  return p;
}

// independent high-precision evaluation of the spin-echo factor
long double steady_state_oracle(long double k, long double rho, long double T1, long double T2,
                                long double TR, long double TE, long double dT2 = 0) {
  return k * rho * std::exp(-TE / (T2 + dT2)) * (1.0L - std::exp(-TR / T1));
}

} // namespace

TEST_CASE("steady-state factor matches the high-precision oracle") {
  const AcquisitionProtocol proto = paper_protocol();
  const TissueSet tissues;

  const double wm = steady_state_factor(tissues.wm, proto);
  const double gm = steady_state_factor(tissues.gm, proto);
  const double csf = steady_state_factor(tissues.csf, proto);

  CHECK(std::abs(wm - static_cast<double>(steady_state_oracle(1000, 0.77L, 500, 70, 6700, 100))) <=
        1e-10 * wm);
  CHECK(std::abs(gm - static_cast<double>(steady_state_oracle(1000, 0.86L, 833, 83, 6700, 100))) <=
        1e-10 * gm);
  CHECK(std::abs(csf - static_cast<double>(steady_state_oracle(1000, 1.0L, 2569, 329, 6700, 100))) <=
        1e-10 * csf);

  // frozen oracle values (30-digit evaluation)
  CHECK(wm == doctest::Approx(184.531018468657594).epsilon(1e-12));
  CHECK(csf == doctest::Approx(683.528235647177059).epsilon(1e-12));
  CHECK(steady_state_factor(tissues.wm, proto, 30.0) ==
        doctest::Approx(283.266740511426250).epsilon(1e-12));
}

TEST_CASE("steady-state factor rejects nonpositive effective T2") {
  const TissueSet tissues;
  CHECK_THROWS_AS(steady_state_factor(tissues.wm, paper_protocol(), -tissues.wm.T2), NumericError);
}

TEST_CASE("directional diffusivity") {
  SUBCASE("isotropic tensor returns its diffusivity for any direction") {
    const SymTensor3 iso{0.8, 0.8, 0.8, 0, 0, 0};
    RandomStream rng(1);
    for (int i = 0; i < 20; ++i) {
      double z = rng.uniform(-1, 1), phi = rng.uniform(0, 2 * M_PI);
      const double r = std::sqrt(1 - z * z);
      CHECK(directional_diffusivity(iso, {r * std::cos(phi), r * std::sin(phi), z}) ==
            doctest::Approx(0.8).epsilon(1e-12));
    }
  }
  SUBCASE("axis-aligned diagonal tensor") {
    const SymTensor3 d{1.7, 0.3, 0.3, 0, 0, 0};
    CHECK(directional_diffusivity(d, {1, 0, 0}) == doctest::Approx(1.7).epsilon(1e-12));
  }
  SUBCASE("random SPD tensors match the eigendecomposition oracle") {
    RandomStream rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      Eigen::Matrix3d a;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) a(i, j) = rng.normal();
      const Eigen::Matrix3d spd = a * a.transpose() + 0.1 * Eigen::Matrix3d::Identity();
      const SymTensor3 t{spd(0, 0), spd(1, 1), spd(2, 2), spd(0, 1), spd(0, 2), spd(1, 2)};

      Eigen::Vector3d g(rng.normal(), rng.normal(), rng.normal());
      g.normalize();

      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(spd);
      double oracle = 0.0;
      for (int i = 0; i < 3; ++i) {
        const double proj = g.dot(eig.eigenvectors().col(i));
        oracle += eig.eigenvalues()[i] * proj * proj;
      }
      const double got = directional_diffusivity(t, {g[0], g[1], g[2]});
      CHECK(std::abs(got - oracle) <= 1e-12 * std::max(1.0, oracle));
    }
  }
  SUBCASE("non-unit directions are rejected") {
    CHECK_THROWS_AS(directional_diffusivity({1, 1, 1, 0, 0, 0}, {1, 1, 0}), ConfigError);
  }
}

TEST_CASE("direction generation decreases repulsion energy and separates directions") {
  SUBCASE("n=1 returns a unit vector") {
    const auto dirs = generate_directions(1, 9);
    CHECK(dirs.size() == 1);
    const double norm =
        std::sqrt(dirs[0][0] * dirs[0][0] + dirs[0][1] * dirs[0][1] + dirs[0][2] * dirs[0][2]);
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("n=3: energy never increases and the minimum angle improves") {
    // zero iterations returns the random initialization
    const auto init = generate_directions(3, 9, 0);
    const auto converged = generate_directions(3, 9, 400);
    CHECK(repulsion_energy(converged) <= repulsion_energy(init));
    CHECK(min_antipodal_angle_deg(converged) >= min_antipodal_angle_deg(init));
    // three antipodal charges relax to near-orthogonality
    CHECK(min_antipodal_angle_deg(converged) > 80.0);
  }
  SUBCASE("n=16 reaches a conservative minimum-angle bound") {
    const auto dirs = generate_directions(16, 11, 500);
    CHECK(min_antipodal_angle_deg(dirs) >= 25.0);
  }
  SUBCASE("deterministic per seed") {
    CHECK(generate_directions(8, 5, 100) == generate_directions(8, 5, 100));
  }
}

TEST_CASE("rician noise statistics") {
  SUBCASE("sigma = 0 is the identity on nonnegative images") {
    Volume v({16, 16, 4}, 2);
    RandomStream rng(3);
    for (float& f : v.data) f = static_cast<float>(std::abs(rng.normal()) * 100.0);
    const Volume noisy = add_rician_noise(v, 0.0, 1);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      CHECK(noisy.data[i] == doctest::Approx(v.data[i]).epsilon(1e-6));
  }
  SUBCASE("air voxels follow the Rayleigh mean") {
    const double sigma = 5.0;
    Volume v({100, 100, 100}, 1, 0.0f);
    const Volume noisy = add_rician_noise(v, sigma, 17);
    double mean = 0.0;
    for (float f : noisy.data) mean += f;
    mean /= noisy.data.size();
    const double expected = sigma * std::sqrt(M_PI / 2.0); // analytic Rayleigh mean
    CHECK(std::abs(mean - expected) <= 0.01 * expected);
  }
  SUBCASE("high-SNR voxels approach Gaussian std sigma") {
    const double sigma = 5.0;
    Volume v({100, 100, 100}, 1, static_cast<float>(20.0 * sigma));
    const Volume noisy = add_rician_noise(v, sigma, 23);
    double mean = 0.0, mean2 = 0.0;
    for (float f : noisy.data) {
      mean += f;
      mean2 += static_cast<double>(f) * f;
    }
    mean /= noisy.data.size();
    mean2 /= noisy.data.size();
    const double stddev = std::sqrt(mean2 - mean * mean);
    CHECK(std::abs(stddev - sigma) <= 0.02 * sigma);
  }
  SUBCASE("different seeds give uncorrelated noise maps") {
    Volume v({50, 50, 40}, 1, 100.0f);
    const Volume a = add_rician_noise(v, 5.0, 1);
    const Volume b = add_rician_noise(v, 5.0, 2);
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    const std::size_t n = v.data.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = a.data[i] - v.data[i], y = b.data[i] - v.data[i];
      sa += x;
      sb += y;
      saa += x * x;
      sbb += y * y;
      sab += x * y;
    }
    const double cov = sab / n - (sa / n) * (sb / n);
    const double r = cov / std::sqrt((saa / n - sa / n * (sa / n)) * (sbb / n - sb / n * (sb / n)));
    CHECK(std::abs(r) < 0.01);
  }
  SUBCASE("parallel and serial execution agree bit for bit") {
    Volume v({32, 32, 8}, 2, 50.0f);
    const Volume serial = add_rician_noise(v, 7.0, 5, 1);
    const Volume parallel = add_rician_noise(v, 7.0, 5, 4);
    CHECK(serial.data == parallel.data);
  }
}

TEST_CASE("clean simulation signal model") {
  const Phantom phantom = generate_procedural_phantom({40, 40, 40}, 21);
  AcquisitionProtocol proto = paper_protocol();
  proto.directions = generate_directions(2, 3, 200);

  const Volume clean = simulate_clean(phantom, nullptr, proto, 0);

  SUBCASE("pure WM voxels follow the scalar spin-echo model exactly") {
    // hand-built phantom: F_wm = 1 everywhere, axis-aligned tensor
    Phantom wm_only;
    wm_only.csf = Mask({4, 4, 4}, 0.0f);
    wm_only.gm = Mask({4, 4, 4}, 0.0f);
    wm_only.wm = Mask({4, 4, 4}, 1.0f);
    wm_only.wm_binary = Mask({4, 4, 4}, 1.0f);
    wm_only.tensor = Volume({4, 4, 4}, 6);
    for (int c = 0; c < 6; ++c) {
      const float v = c == 0 ? 1.7f : (c < 3 ? 0.3f : 0.0f);
      std::fill(wm_only.tensor.channel_ptr(c), wm_only.tensor.channel_ptr(c) + 64, v);
    }
    AcquisitionProtocol axis = paper_protocol(); // g = (1,0,0)
    const Volume s = simulate_clean(wm_only, nullptr, axis, 0);
    const double ss = steady_state_factor(wm_only.params.wm, axis);
    CHECK(s.at(0, 1, 1, 1) == doctest::Approx(ss).epsilon(1e-6));                    // b=0: exp(0)=1
    CHECK(s.at(1, 1, 1, 1) == doctest::Approx(ss * std::exp(-1.7)).epsilon(1e-6));   // b=1000
    CHECK(s.at(2, 1, 1, 1) == doctest::Approx(ss * std::exp(-6.8)).epsilon(1e-6));   // b=4000
  }
  SUBCASE("attenuation is monotone in b everywhere") {
    for (int z = 0; z < 40; z += 4)
      for (int y = 0; y < 40; y += 4)
        for (int x = 0; x < 40; x += 4) {
          CHECK(clean.at(0, x, y, z) >= clean.at(1, x, y, z));
          CHECK(clean.at(1, x, y, z) >= clean.at(2, x, y, z));
        }
  }
  SUBCASE("channels carry b-value labels") {
    REQUIRE(clean.labels.size() == 3);
    CHECK(clean.labels[0] == "b=0");
    CHECK(clean.labels[2] == "b=4000");
  }
}

TEST_CASE("lesion signal model") {
  const Phantom phantom = generate_procedural_phantom({40, 40, 40}, 22);
  AcquisitionProtocol proto = paper_protocol();
  proto.directions = generate_directions(1, 3, 200);

  const auto shapes = generate_lesion_shapes(6, {5, 9}, {1.0, 2.5}, 4);
  LesionField field = insert_lesions(phantom, shapes, {2, 3}, 77);
  REQUIRE(!field.lesions.empty());

  SUBCASE("pure lesion voxel, f=1: monoexponential in D1 with shifted T2") {
    LesionParams p;
    p.f = 1.0;
    p.D1 = 0.5;
    p.D2 = 1.0;
    p.dT2 = 10.0;
    field.set_all_params(p);
    const Volume les = simulate_clean(phantom, &field, proto, 0);

    std::size_t pure = 0;
    for (std::size_t i = 0; i < field.fraction.size(); ++i)
      if (field.fraction.data[i] >= 1.0f - 1e-6f) {
        pure = i;
        break;
      }
    REQUIRE(field.fraction.data[pure] >= 1.0f - 1e-6f);
    const double ss = steady_state_factor(phantom.params.wm, proto, 10.0);
    const std::size_t vox = les.voxels_per_channel();
    // scalar oracle: ss * exp(-b*D1*1e-3)
    CHECK(les.data[pure] == doctest::Approx(ss).epsilon(1e-6));
    CHECK(les.data[vox + pure] == doctest::Approx(ss * std::exp(-0.5)).epsilon(1e-6));
    CHECK(les.data[2 * vox + pure] == doctest::Approx(ss * std::exp(-2.0)).epsilon(1e-6));
  }

  SUBCASE("f=0.5 with D1 == D2 collapses to the monoexponential model") {
    LesionParams p;
    p.f = 0.5;
    p.D1 = 0.7;
    p.D2 = 0.7;
    p.dT2 = 0.0;
    field.set_all_params(p);
    const Volume biexp = simulate_clean(phantom, &field, proto, 0);

    p.f = 1.0;
    field.set_all_params(p);
    const Volume mono = simulate_clean(phantom, &field, proto, 0);
    for (std::size_t i = 0; i < biexp.data.size(); ++i)
      CHECK(biexp.data[i] == doctest::Approx(mono.data[i]).epsilon(1e-7));
  }

  SUBCASE("lesion and healthy fractions partition the voxel") {
    // at b=0 the lesion-free and lesion signals relate through the lesion
    // fraction: S_les = (1-L)*S_healthy + L*ss_lesion
    LesionParams p;
    p.f = 0.3;
    p.D1 = 0.4;
    p.D2 = 1.2;
    p.dT2 = -20.0;
    field.set_all_params(p);
    const Volume healthy = simulate_clean(phantom, nullptr, proto, 0);
    const Volume les = simulate_clean(phantom, &field, proto, 0);
    const double ss = steady_state_factor(phantom.params.wm, proto, -20.0);
    for (std::size_t i = 0; i < field.fraction.size(); ++i) {
      const double L = field.fraction.data[i];
      if (L <= 0.0) continue;
      const double expected = (1.0 - L) * healthy.data[i] + L * ss;
      CHECK(les.data[i] == doctest::Approx(expected).epsilon(1e-5));
    }
  }
}

TEST_CASE("lesion shapes") {
  SUBCASE("circle of radius 3 rasterizes to 29 lattice voxels") {
    const LesionShape c = rasterize_ellipse(3.0, 3.0, 0.0, {0, 0, 0, 0});
    CHECK(c.area() == 29);
    CHECK(c.connected());
    CHECK(c.width == 7);
    CHECK(c.height == 7);
  }
  SUBCASE("generated shapes are connected and within size bounds") {
    const auto shapes = generate_lesion_shapes(10, {4, 12}, {1.0, 3.0}, 5);
    CHECK(shapes.size() == 10);
    for (const LesionShape& s : shapes) {
      CHECK(s.connected());
      CHECK(s.width >= 4);
      CHECK(s.height >= 4);
      CHECK(s.width <= 21);
      CHECK(s.height <= 21);
    }
  }
  SUBCASE("sizes above the supplement bound are rejected") {
    CHECK_THROWS_AS(generate_lesion_shapes(5, {4, 25}, {1.0, 2.0}, 1), ConfigError);
    CHECK_THROWS_AS(generate_lesion_shapes(5, {2, 10}, {1.0, 2.0}, 1), ConfigError);
  }
  SUBCASE("deterministic per seed") {
    const auto a = generate_lesion_shapes(8, {4, 10}, {1.0, 3.0}, 9);
    const auto b = generate_lesion_shapes(8, {4, 10}, {1.0, 3.0}, 9);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].mask == b[i].mask);
  }
}

TEST_CASE("lesion insertion") {
  const Phantom phantom = generate_procedural_phantom({40, 40, 40}, 25);
  const auto shapes = generate_lesion_shapes(8, {4, 8}, {1.0, 2.5}, 6);

  SUBCASE("empty WM mask is an error") {
    Phantom empty = phantom;
    std::fill(empty.wm_binary.data.begin(), empty.wm_binary.data.end(), 0.0f);
    CHECK_THROWS_AS(insert_lesions(empty, shapes, {2, 4}, 1), ConfigError);
  }
  SUBCASE("fractions are clipped to [0,1] and contain a pure plateau") {
    const LesionField field = insert_lesions(phantom, shapes, {2, 4}, 11);
    REQUIRE(!field.lesions.empty());
    float max_frac = 0.0f;
    std::size_t pure = 0;
    for (float f : field.fraction.data) {
      max_frac = std::max(max_frac, f);
      if (f >= 1.0f - 1e-6f) ++pure;
    }
    CHECK(max_frac <= 1.0f);
    CHECK(pure > 0); // the 3.5x normalization then clip produces 100% voxels
  }
  SUBCASE("supports stay inside WM and are disjoint") {
    const LesionField field = insert_lesions(phantom, shapes, {2, 4}, 12);
    CHECK_NOTHROW(field.validate(phantom.wm_binary));
    for (std::size_t i = 0; i < field.fraction.size(); ++i)
      if (field.fraction.data[i] > 0.0f) CHECK(phantom.wm_binary.data[i] == 1.0f);
  }
  SUBCASE("seed-fixed runs are identical") {
    const LesionField a = insert_lesions(phantom, shapes, {2, 4}, 13);
    const LesionField b = insert_lesions(phantom, shapes, {2, 4}, 13);
    CHECK(a.fraction.data == b.fraction.data);
    CHECK(a.owner == b.owner);
    REQUIRE(a.lesions.size() == b.lesions.size());
    for (std::size_t i = 0; i < a.lesions.size(); ++i) {
      CHECK(a.lesions[i].f == b.lesions[i].f);
      CHECK(a.lesions[i].position == b.lesions[i].position);
    }
  }
  SUBCASE("single-slice insertion stays in that slice") {
    const LesionField field =
        insert_lesions(phantom, shapes, {2, 4}, 14, std::array<int, 2>{20, 20});
    for (const LesionParams& p : field.lesions) CHECK(p.position[2] == 20);
    for (int z = 0; z < 40; ++z) {
      if (z == 20) continue;
      for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) CHECK(field.fraction.at(x, y, z) == 0.0f);
    }
  }
  SUBCASE("field IO round-trip") {
    TempDir tmp("lesions");
    const LesionField field = insert_lesions(phantom, shapes, {2, 4}, 15);
    save_lesion_field(field, tmp.str("field"));
    const LesionField r = load_lesion_field(tmp.str("field"));
    CHECK(r.fraction.data == field.fraction.data);
    CHECK(r.owner == field.owner);
    REQUIRE(r.lesions.size() == field.lesions.size());
    for (std::size_t i = 0; i < r.lesions.size(); ++i) {
      CHECK(r.lesions[i].D1 == field.lesions[i].D1);
      CHECK(r.lesions[i].dT2 == field.lesions[i].dT2);
      CHECK(r.lesions[i].shape_id == field.lesions[i].shape_id);
    }
  }
}

TEST_CASE("lesion parameter sampling") {
  RandomStream rng(31);
  const int n = 100000;
  std::vector<double> fs;
  double d_min = 10, d_max = -10;
  for (int i = 0; i < n; ++i) {
    const LesionParams p = sample_lesion_params(rng);
    CHECK_NOTHROW(p.validate());
    d_min = std::min(d_min, std::min(p.D1, p.D2));
    d_max = std::max(d_max, std::max(p.D1, p.D2));
    const double steps = p.dT2 / 5.0;
    CHECK(steps == std::round(steps));
    CHECK(std::abs(p.dT2) <= 30.0);
    fs.push_back(p.f);
  }
  CHECK(d_min >= 0.3);
  CHECK(d_max < 1.35);

  // Kolmogorov-Smirnov statistic of f against U[0,1]
  std::sort(fs.begin(), fs.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double ecdf_hi = static_cast<double>(i + 1) / n;
    const double ecdf_lo = static_cast<double>(i) / n;
    ks = std::max(ks, std::max(std::abs(ecdf_hi - fs[i]), std::abs(fs[i] - ecdf_lo)));
  }
  CHECK(ks < 0.01);
}
