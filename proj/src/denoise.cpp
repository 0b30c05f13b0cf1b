#include "mbd/denoise.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mbd/config.hpp"
#include "mbd/errors.hpp"
#include "mbd/parallel.hpp"

namespace mbd::denoise {

Method method_from_string(const std::string& s) {
  if (s == "MBD" || s == "mbd") return Method::MBD;
  if (s == "N2N" || s == "n2n") return Method::N2N;
  if (s == "CNNe" || s == "cnne" || s == "CNNE") return Method::CNNe;
  if (s == "ALGe" || s == "alge" || s == "ALGE") return Method::ALGe;
  if (s == "MPPCA" || s == "mppca") return Method::MPPCA;
  throw ConfigError("unknown method: " + s);
}

std::string method_name(Method m) {
  switch (m) {
    case Method::MBD: return "MBD";
    case Method::N2N: return "N2N";
    case Method::CNNe: return "CNNe";
    case Method::ALGe: return "ALGe";
    case Method::MPPCA: return "MPPCA";
  }
  return "?";
}

namespace {

bool contains_bvalue(const std::vector<double>& bvalues, double b) {
  for (double x : bvalues)
    if (std::abs(x - b) <= 1e-9 * std::max(1.0, std::abs(b))) return true;
  return false;
}

} // namespace

void MethodConfig::validate() const {
  switch (method) {
    case Method::MBD:
      if (input_bvalues.size() < 2)
        throw ConfigError("MBD needs at least two input b-values");
      if (!contains_bvalue(input_bvalues, target_bvalue))
        throw ConfigError("MBD needs the target b-value among its inputs (residual channel)");
      break;
    case Method::N2N:
      if (input_bvalues.size() != 1 || !contains_bvalue(input_bvalues, target_bvalue))
        throw ConfigError("N2N input must be exactly the target b-value");
      break;
    case Method::CNNe:
      if (input_bvalues.empty()) throw ConfigError("CNNe needs at least one input b-value");
      if (contains_bvalue(input_bvalues, target_bvalue))
        throw ConfigError("CNNe must not see the target b-value among its inputs");
      break;
    case Method::ALGe:
      if (std::abs(alge_pair[0] - alge_pair[1]) <= 1e-9)
        throw ConfigError("ALGe needs two distinct b-values");
      break;
    case Method::MPPCA:
      if (patch_radius < 1) throw ConfigError("MPPCA patch radius must be >= 1");
      break;
  }
}

int find_bvalue_channel(const Volume& dwi, double bvalue) {
  for (std::size_t c = 0; c < dwi.labels.size(); ++c) {
    const std::string& label = dwi.labels[c];
    if (label.rfind("b=", 0) != 0) continue;
    const double b = std::strtod(label.c_str() + 2, nullptr);
    if (std::abs(b - bvalue) <= 1e-9 * std::max(1.0, std::abs(bvalue))) return static_cast<int>(c);
  }
  throw ConfigError("volume has no channel labeled b=" + std::to_string(bvalue));
}

// --- ALGe ---------------------------------------------------------------

AlgeResult alge_extrapolate(const Volume& s1, double b1, const Volume& s2, double b2,
                            double b_target) {
  s1.validate();
  s2.validate();
  if (!s1.same_grid(s2) || s1.channels != 1 || s2.channels != 1)
    throw ConfigError("ALGe expects two single-channel volumes on the same grid");
  if (std::abs(b1 - b2) <= 1e-9) throw ConfigError("ALGe needs b1 != b2");

  AlgeResult res;
  res.volume = Volume(s1.dims, 1);
  res.volume.voxel_size = s1.voxel_size;
  {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "b=%.10g", b_target);
    res.volume.labels = {buf};
  }
  res.defects = Mask(s1.dims);

  const double inv_db = 1.0 / (b2 - b1);
  for (std::size_t i = 0; i < s1.data.size(); ++i) {
    const double v1 = s1.data[i];
    const double v2 = s2.data[i];
    if (v1 <= 0.0 || v2 <= 0.0) {
      res.volume.data[i] = 0.0f;
      res.defects.data[i] = 1.0f;
      continue;
    }
    const double d = (std::log(v1) - std::log(v2)) * inv_db;
    res.volume.data[i] = static_cast<float>(v1 * std::exp(-(b_target - b1) * d));
  }
  res.volume.validate();
  return res;
}

// --- MPPCA ---------------------------------------------------------------

Volume mppca_denoise(const Volume& dwi, int patch_radius, int threads) {
  dwi.validate();
  const int N = dwi.channels;
  if (N < 3) throw ConfigError("MPPCA needs at least 3 channels");
  if (patch_radius < 1) throw ConfigError("MPPCA patch radius must be >= 1");
  const int side = 2 * patch_radius + 1;
  const auto& dims = dwi.dims;
  if (dims[0] < side || dims[1] < side || dims[2] < side)
    throw ConfigError("volume smaller than the MPPCA patch window");

  const int M = side * side * side;
  const int wx = dims[0] - side + 1, wy = dims[1] - side + 1, wz = dims[2] - side + 1;
  const std::size_t vox = dwi.voxels_per_channel();

  std::vector<double> sum(vox * N, 0.0);
  std::vector<double> count(vox, 0.0);

  // Per z0-plane: reconstruct all windows in parallel into a plane buffer,
  // then accumulate serially in window order so the result is
  // bit-identical for any thread count.
  const std::size_t windows_per_plane = static_cast<std::size_t>(wx) * wy;
  std::vector<double> plane(windows_per_plane * M * N);

  for (int z0 = 0; z0 < wz; ++z0) {
    parallel_for(0, static_cast<int>(windows_per_plane), threads, [&](int widx) {
      const int x0 = widx % wx;
      const int y0 = widx / wx;
      double* out = &plane[static_cast<std::size_t>(widx) * M * N];

      Eigen::MatrixXd X(M, N);
      for (int c = 0; c < N; ++c) {
        int row = 0;
        for (int dz = 0; dz < side; ++dz)
          for (int dy = 0; dy < side; ++dy)
            for (int dx = 0; dx < side; ++dx, ++row)
              X(row, c) = dwi.at(c, x0 + dx, y0 + dy, z0 + dz);
      }

      const Eigen::RowVectorXd mu = X.colwise().mean();
      Eigen::MatrixXd Xc = X.rowwise() - mu;
      const double total_var = Xc.squaredNorm();
      const double scale = std::max(1.0, X.cwiseAbs().maxCoeff());
      if (total_var <= 1e-24 * scale * scale * M * N) {
        // constant window: passthrough
        Eigen::Map<Eigen::MatrixXd>(out, M, N) = X;
        return;
      }

      const Eigen::MatrixXd C = (Xc.transpose() * Xc) / static_cast<double>(M);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
      Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0); // ascending

      // smallest p whose trailing set is MP-consistent: top trailing
      // eigenvalue below the noise edge estimated from the trailing mean
      int keep = N; // fallback: keep everything
      for (int p = 0; p < N; ++p) {
        const int nt = N - p;
        const double sigma2 = lam.head(nt).sum() / nt;
        const double edge = sigma2 * std::pow(1.0 + std::sqrt(static_cast<double>(nt) / M), 2.0);
        if (lam[nt - 1] <= edge) {
          keep = p;
          break;
        }
      }

      Eigen::MatrixXd rec;
      if (keep == 0) {
        rec = Eigen::MatrixXd::Zero(M, N);
      } else if (keep >= N) {
        rec = Xc;
      } else {
        const Eigen::MatrixXd V = eig.eigenvectors().rightCols(keep);
        rec = (Xc * V) * V.transpose();
      }
      rec.rowwise() += mu;
      Eigen::Map<Eigen::MatrixXd>(out, M, N) = rec;
    });

    for (std::size_t widx = 0; widx < windows_per_plane; ++widx) {
      const int x0 = static_cast<int>(widx) % wx;
      const int y0 = static_cast<int>(widx) / wx;
      const double* rec = &plane[widx * M * N];
      for (int c = 0; c < N; ++c) {
        int row = 0;
        for (int dz = 0; dz < side; ++dz)
          for (int dy = 0; dy < side; ++dy)
            for (int dx = 0; dx < side; ++dx, ++row) {
              const std::size_t v = dwi.index(0, x0 + dx, y0 + dy, z0 + dz);
              sum[static_cast<std::size_t>(c) * vox + v] += rec[static_cast<std::size_t>(c) * M + row];
              if (c == 0) count[v] += 1.0;
            }
      }
    }
  }

  Volume out(dims, N);
  out.voxel_size = dwi.voxel_size;
  out.labels = dwi.labels;
  for (int c = 0; c < N; ++c)
    for (std::size_t v = 0; v < vox; ++v)
      out.data[static_cast<std::size_t>(c) * vox + v] =
          static_cast<float>(sum[static_cast<std::size_t>(c) * vox + v] / count[v]);
  out.validate();
  return out;
}

// --- dispatch ------------------------------------------------------------

Volume denoise_with_network(nn::Network& net, const Volume& dwi, int threads) {
  const auto& wanted = net.input_bvalues();
  std::vector<int> channel(wanted.size());
  for (std::size_t i = 0; i < wanted.size(); ++i)
    channel[i] = find_bvalue_channel(dwi, wanted[i]);

  Volume out({dwi.dims[0], dwi.dims[1], dwi.dims[2]}, 1);
  out.voxel_size = dwi.voxel_size;
  {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "b=%.10g", net.target_bvalue());
    out.labels = {buf};
  }

  const std::size_t plane = static_cast<std::size_t>(dwi.dims[0]) * dwi.dims[1];
  Volume slice({dwi.dims[0], dwi.dims[1], 1}, static_cast<int>(wanted.size()));
  for (int z = 0; z < dwi.dims[2]; ++z) {
    for (std::size_t i = 0; i < wanted.size(); ++i) {
      const float* src = dwi.channel_ptr(channel[i]) + static_cast<std::size_t>(z) * plane;
      std::copy(src, src + plane, slice.channel_ptr(static_cast<int>(i)));
    }
    const Volume den = nn::denoise_slice(net, slice, threads);
    std::copy(den.data.begin(), den.data.end(), out.channel_ptr(0) + static_cast<std::size_t>(z) * plane);
  }
  out.validate();
  return out;
}

Volume denoise(const MethodConfig& cfg, const Volume& dwi, int threads) {
  cfg.validate();
  dwi.validate();

  switch (cfg.method) {
    case Method::MBD:
    case Method::N2N:
    case Method::CNNe: {
      if (cfg.checkpoint.empty()) throw ConfigError("NN method needs a checkpoint path");
      nn::Network net = nn::load_network(cfg.checkpoint);
      if (net.input_bvalues() != cfg.input_bvalues)
        throw ConfigError("checkpoint input b-values do not match the method config");
      if (std::abs(net.target_bvalue() - cfg.target_bvalue) > 1e-9)
        throw ConfigError("checkpoint target b-value does not match the method config");
      return denoise_with_network(net, dwi, threads);
    }
    case Method::ALGe: {
      const int c1 = find_bvalue_channel(dwi, cfg.alge_pair[0]);
      const int c2 = find_bvalue_channel(dwi, cfg.alge_pair[1]);
      Volume s1(dwi.dims, 1), s2(dwi.dims, 1);
      s1.voxel_size = s2.voxel_size = dwi.voxel_size;
      std::copy(dwi.channel_ptr(c1), dwi.channel_ptr(c1) + dwi.voxels_per_channel(), s1.data.begin());
      std::copy(dwi.channel_ptr(c2), dwi.channel_ptr(c2) + dwi.voxels_per_channel(), s2.data.begin());
      return alge_extrapolate(s1, cfg.alge_pair[0], s2, cfg.alge_pair[1], cfg.target_bvalue).volume;
    }
    case Method::MPPCA: {
      const Volume den = mppca_denoise(dwi, cfg.patch_radius, threads);
      const int tc = find_bvalue_channel(den, cfg.target_bvalue);
      Volume out(den.dims, 1);
      out.voxel_size = den.voxel_size;
      out.labels = {den.labels[tc]};
      std::copy(den.channel_ptr(tc), den.channel_ptr(tc) + den.voxels_per_channel(),
                out.data.begin());
      return out;
    }
  }
  throw ConfigError("unreachable method");
}

// --- input-configuration sweep ------------------------------------------

std::vector<std::vector<double>> enumerate_input_combinations(const std::vector<double>& bvalues,
                                                              double target_bvalue) {
  if (bvalues.size() != 3) throw ConfigError("the configuration sweep needs three b-values");
  std::vector<double> sorted = bvalues;
  std::sort(sorted.begin(), sorted.end());
  if (sorted[0] >= sorted[1] || sorted[1] >= sorted[2])
    throw ConfigError("the configuration sweep needs three distinct b-values");
  if (!contains_bvalue(sorted, target_bvalue))
    throw ConfigError("sweep target must be one of the available b-values");

  std::vector<double> others;
  for (double b : sorted)
    if (std::abs(b - target_bvalue) > 1e-9) others.push_back(b);

  const auto ascending = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  return {
      ascending({target_bvalue}),
      ascending({others[0], target_bvalue}),
      ascending({others[1], target_bvalue}),
      ascending({others[0], others[1], target_bvalue}),
  };
}

SweepResult input_configuration_sweep(const DatasetBuilder& builder, const SweepConfig& cfg) {
  if (cfg.repeats < 1) throw ConfigError("sweep repeats must be >= 1");
  cfg.training.validate();

  const auto combos = enumerate_input_combinations(cfg.bvalues, cfg.target_bvalue);
  SweepResult result;

  for (const auto& inputs : combos) {
    std::vector<std::vector<double>> curves;
    for (int rep = 0; rep < cfg.repeats; ++rep) {
      nn::TrainingConfig tc = cfg.training;
      tc.seed = cfg.training.seed + static_cast<std::uint64_t>(rep) * 9973ULL;

      nn::PatchDataset train_set, val_set;
      builder(inputs, cfg.target_bvalue, train_set, val_set);
      if (tc.min_delta_abs < 0) {
        // before-training MSE of the validation pairs: all sweep inputs
        // contain the target channel, which carries repetition 0
        int tgt = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i)
          if (std::abs(inputs[i] - cfg.target_bvalue) <= 1e-9) tgt = static_cast<int>(i);
        const std::size_t per_in = static_cast<std::size_t>(val_set.in_channels) *
                                   val_set.height * val_set.width;
        const std::size_t per_tg = static_cast<std::size_t>(val_set.height) * val_set.width;
        double acc = 0.0;
        for (std::size_t p = 0; p < val_set.count(); ++p)
          for (std::size_t i = 0; i < per_tg; ++i) {
            const double d = val_set.inputs[p * per_in + tgt * per_tg + i] -
                             val_set.targets[p * per_tg + i];
            acc += d * d;
          }
        tc.min_delta_abs = acc / (val_set.count() * per_tg);
      }

      nn::Network net(inputs, cfg.target_bvalue, nn::NetworkMode::Residual, tc.seed);
      const nn::TrainResult tr = nn::train(net, train_set, val_set, tc);
      curves.push_back(tr.val_loss);
    }

    std::size_t shortest = curves.front().size();
    for (const auto& c : curves) shortest = std::min(shortest, c.size());

    SweepCurve sc;
    sc.input_bvalues = inputs;
    sc.mean_val_loss.assign(shortest, 0.0);
    for (const auto& c : curves)
      for (std::size_t e = 0; e < shortest; ++e) sc.mean_val_loss[e] += c[e] / curves.size();
    sc.final_loss = *std::min_element(sc.mean_val_loss.begin(), sc.mean_val_loss.end());
    result.curves.push_back(std::move(sc));
  }

  result.ranking.resize(result.curves.size());
  for (std::size_t i = 0; i < result.ranking.size(); ++i) result.ranking[i] = static_cast<int>(i);
  std::stable_sort(result.ranking.begin(), result.ranking.end(), [&](int a, int b) {
    return result.curves[a].final_loss < result.curves[b].final_loss;
  });
  return result;
}

void write_sweep_curves(const std::string& path, const SweepResult& result) {
  std::ostringstream out;
  out << "# rank order (best first):";
  for (int idx : result.ranking) {
    out << " [";
    for (std::size_t i = 0; i < result.curves[idx].input_bvalues.size(); ++i)
      out << (i ? "," : "") << result.curves[idx].input_bvalues[i];
    out << "]";
  }
  out << "\ninputs\tepoch\tmean_val_loss\n";
  char buf[128];
  for (const SweepCurve& c : result.curves) {
    std::string label;
    for (std::size_t i = 0; i < c.input_bvalues.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%s%.10g", i ? "," : "", c.input_bvalues[i]);
      label += buf;
    }
    for (std::size_t e = 0; e < c.mean_val_loss.size(); ++e) {
      std::snprintf(buf, sizeof(buf), "%s\t%zu\t%.10g\n", label.c_str(), e + 1, c.mean_val_loss[e]);
      out << buf;
    }
  }
  write_text_file(path, out.str());
}

} // namespace mbd::denoise
