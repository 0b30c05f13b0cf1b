#include "mbd/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mbd/config.hpp"
#include "mbd/errors.hpp"
#include "mbd/parallel.hpp"
#include "mbd/rng.hpp"

namespace mbd::nn {

namespace {

void require(bool cond, const char* what) {
  if (!cond) throw ConfigError(what);
}

void ensure_shape(Tensor& t, int n, int c, int h, int w) {
  if (t.n != n || t.c != c || t.h != h || t.w != w) t = Tensor(n, c, h, w);
}

} // namespace

// --- Conv2d ---------------------------------------------------------------

Conv2d::Conv2d(int in_c, int out_c, int groups, bool bias)
    : in_c_(in_c), out_c_(out_c), groups_(groups), has_bias_(bias) {
  require(in_c > 0 && out_c > 0 && groups > 0, "conv: channel counts must be positive");
  require(in_c % groups == 0, "conv: groups must divide input channels");
  require(out_c % groups == 0, "conv: groups must divide output channels");
  const int icg = in_c / groups;
  w.assign(static_cast<std::size_t>(out_c) * icg * 9, 0.0);
  gw.assign(w.size(), 0.0);
  if (bias) {
    b.assign(out_c, 0.0);
    gb.assign(out_c, 0.0);
  }
}

void Conv2d::init_he_uniform(RandomStream& rng) {
  const int icg = in_c_ / groups_;
  const double limit = std::sqrt(6.0 / (icg * 9.0));
  for (double& x : w) x = rng.uniform(-limit, limit);
  std::fill(b.begin(), b.end(), 0.0);
}

namespace {

// zero-padded copy of one plane, 1-pixel border
void pad_plane(const double* src, int H, int W, double* dst) {
  const int PW = W + 2;
  std::fill(dst, dst + PW, 0.0);
  for (int y = 0; y < H; ++y) {
    double* row = dst + static_cast<std::size_t>(y + 1) * PW;
    row[0] = 0.0;
    std::copy(src + static_cast<std::size_t>(y) * W, src + static_cast<std::size_t>(y + 1) * W,
              row + 1);
    row[W + 1] = 0.0;
  }
  std::fill(dst + static_cast<std::size_t>(H + 1) * PW, dst + static_cast<std::size_t>(H + 2) * PW,
            0.0);
}

// y += conv(padded, w) with a fused 9-tap inner loop
void accumulate_conv(const double* padded, int H, int W, const double* wk, double* out) {
  const int PW = W + 2;
  for (int y = 0; y < H; ++y) {
    const double* r0 = padded + static_cast<std::size_t>(y) * PW;
    const double* r1 = r0 + PW;
    const double* r2 = r1 + PW;
    double* dst = out + static_cast<std::size_t>(y) * W;
    for (int x = 0; x < W; ++x) {
      dst[x] += wk[0] * r0[x] + wk[1] * r0[x + 1] + wk[2] * r0[x + 2] +
                wk[3] * r1[x] + wk[4] * r1[x + 1] + wk[5] * r1[x + 2] +
                wk[6] * r2[x] + wk[7] * r2[x + 1] + wk[8] * r2[x + 2];
    }
  }
}

} // namespace

void Conv2d::forward(const Tensor& x, Tensor& y, int threads) const {
  require(x.c == in_c_, "conv forward: input channel mismatch");
  ensure_shape(y, x.n, out_c_, x.h, x.w);
  const int H = x.h, W = x.w;
  const int icg = in_c_ / groups_;
  const int ocg = out_c_ / groups_;
  const std::size_t pplane = static_cast<std::size_t>(H + 2) * (W + 2);

  pad_x_.resize(static_cast<std::size_t>(x.n) * in_c_ * pplane);
  parallel_for(0, x.n * in_c_, threads, [&](int job) {
    pad_plane(x.plane(job / in_c_, job % in_c_), H, W, &pad_x_[job * pplane]);
  });

  parallel_for(0, x.n * out_c_, threads, [&](int job) {
    const int in = job / out_c_;
    const int oc = job % out_c_;
    const int g = oc / ocg;
    double* yp = y.plane(in, oc);
    std::fill(yp, yp + y.plane_size(), has_bias_ ? b[oc] : 0.0);
    for (int il = 0; il < icg; ++il) {
      const double* padded = &pad_x_[(static_cast<std::size_t>(in) * in_c_ + g * icg + il) * pplane];
      accumulate_conv(padded, H, W, &w[(static_cast<std::size_t>(oc) * icg + il) * 9], yp);
    }
  });
}

void Conv2d::backward(const Tensor& x, const Tensor& gy, Tensor* gx, int threads) {
  require(x.c == in_c_ && gy.c == out_c_, "conv backward: channel mismatch");
  require(x.n == gy.n && x.h == gy.h && x.w == gy.w, "conv backward: shape mismatch");
  const int H = x.h, W = x.w;
  const int PW = W + 2;
  const int icg = in_c_ / groups_;
  const int ocg = out_c_ / groups_;
  const std::size_t pplane = static_cast<std::size_t>(H + 2) * PW;

  pad_x_.resize(static_cast<std::size_t>(x.n) * in_c_ * pplane);
  parallel_for(0, x.n * in_c_, threads, [&](int job) {
    pad_plane(x.plane(job / in_c_, job % in_c_), H, W, &pad_x_[job * pplane]);
  });

  // weight/bias gradients: one worker per output channel, accumulation in
  // fixed (n, il) order with one fused pass per plane
  parallel_for(0, out_c_, threads, [&](int oc) {
    const int g = oc / ocg;
    double bias_acc = 0.0;
    for (int in = 0; in < x.n; ++in) {
      const double* gp = gy.plane(in, oc);
      if (has_bias_) {
        for (std::size_t i = 0; i < gy.plane_size(); ++i) bias_acc += gp[i];
      }
      for (int il = 0; il < icg; ++il) {
        const double* padded =
            &pad_x_[(static_cast<std::size_t>(in) * in_c_ + g * icg + il) * pplane];
        double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
        for (int yy = 0; yy < H; ++yy) {
          const double* r0 = padded + static_cast<std::size_t>(yy) * PW;
          const double* r1 = r0 + PW;
          const double* r2 = r1 + PW;
          const double* gr = gp + static_cast<std::size_t>(yy) * W;
          for (int xx = 0; xx < W; ++xx) {
            const double gv = gr[xx];
            acc[0] += gv * r0[xx];
            acc[1] += gv * r0[xx + 1];
            acc[2] += gv * r0[xx + 2];
            acc[3] += gv * r1[xx];
            acc[4] += gv * r1[xx + 1];
            acc[5] += gv * r1[xx + 2];
            acc[6] += gv * r2[xx];
            acc[7] += gv * r2[xx + 1];
            acc[8] += gv * r2[xx + 2];
          }
        }
        double* gwk = &gw[(static_cast<std::size_t>(oc) * icg + il) * 9];
        for (int t = 0; t < 9; ++t) gwk[t] += acc[t];
      }
    }
    if (has_bias_) gb[oc] += bias_acc;
  });

  if (!gx) return;
  ensure_shape(*gx, x.n, in_c_, H, W);
  pad_gy_.resize(static_cast<std::size_t>(gy.n) * out_c_ * pplane);
  parallel_for(0, gy.n * out_c_, threads, [&](int job) {
    pad_plane(gy.plane(job / out_c_, job % out_c_), H, W, &pad_gy_[job * pplane]);
  });
  parallel_for(0, x.n * in_c_, threads, [&](int job) {
    const int in = job / in_c_;
    const int ic = job % in_c_;
    const int g = ic / icg;
    const int il = ic % icg;
    double* gxp = gx->plane(in, ic);
    std::fill(gxp, gxp + gx->plane_size(), 0.0);
    for (int ol = 0; ol < ocg; ++ol) {
      const int oc = g * ocg + ol;
      const double* padded = &pad_gy_[(static_cast<std::size_t>(in) * out_c_ + oc) * pplane];
      const double* wk = &w[(static_cast<std::size_t>(oc) * icg + il) * 9];
      // correlation with the flipped kernel
      const double wf[9] = {wk[8], wk[7], wk[6], wk[5], wk[4], wk[3], wk[2], wk[1], wk[0]};
      accumulate_conv(padded, H, W, wf, gxp);
    }
  });
}

void Conv2d::zero_grads() {
  std::fill(gw.begin(), gw.end(), 0.0);
  std::fill(gb.begin(), gb.end(), 0.0);
}

std::vector<ParamView> Conv2d::params() {
  std::vector<ParamView> out;
  out.push_back({w.data(), gw.data(), w.size()});
  if (has_bias_) out.push_back({b.data(), gb.data(), b.size()});
  return out;
}

// --- BatchNorm2d ------------------------------------------------------------

BatchNorm2d::BatchNorm2d(int channels) : c_(channels) {
  require(channels > 0, "batchnorm: channel count must be positive");
  gamma.assign(channels, 1.0);
  beta.assign(channels, 0.0);
  ggamma.assign(channels, 0.0);
  gbeta.assign(channels, 0.0);
  running_mean.assign(channels, 0.0);
  running_var.assign(channels, 1.0);
  mean_.assign(channels, 0.0);
  invstd_.assign(channels, 1.0);
}

void BatchNorm2d::forward(const Tensor& x, Tensor& y, bool training) {
  require(x.c == c_, "batchnorm: channel mismatch");
  require(x.n >= 1, "batchnorm: empty batch");
  ensure_shape(y, x.n, x.c, x.h, x.w);
  const std::size_t plane = x.plane_size();
  const double m = static_cast<double>(x.n) * plane;

  for (int c = 0; c < c_; ++c) {
    double mu, var;
    if (training) {
      double sum = 0.0, sum2 = 0.0;
      for (int in = 0; in < x.n; ++in) {
        const double* xp = x.plane(in, c);
        for (std::size_t i = 0; i < plane; ++i) {
          sum += xp[i];
          sum2 += xp[i] * xp[i];
        }
      }
      mu = sum / m;
      var = std::max(0.0, sum2 / m - mu * mu);
      mean_[c] = mu;
      invstd_[c] = 1.0 / std::sqrt(var + kEps);
      running_mean[c] = (1.0 - kMomentum) * running_mean[c] + kMomentum * mu;
      running_var[c] = (1.0 - kMomentum) * running_var[c] + kMomentum * var;
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    const double inv = training ? invstd_[c] : 1.0 / std::sqrt(var + kEps);
    const double scale = gamma[c] * inv;
    const double shift = beta[c] - scale * mu;
    for (int in = 0; in < x.n; ++in) {
      const double* xp = x.plane(in, c);
      double* yp = y.plane(in, c);
      for (std::size_t i = 0; i < plane; ++i) yp[i] = scale * xp[i] + shift;
    }
  }
}

void BatchNorm2d::backward(const Tensor& x, const Tensor& gy, Tensor& gx) {
  require(x.c == c_ && gy.c == c_, "batchnorm backward: channel mismatch");
  ensure_shape(gx, x.n, x.c, x.h, x.w);
  const std::size_t plane = x.plane_size();
  const double m = static_cast<double>(x.n) * plane;

  for (int c = 0; c < c_; ++c) {
    const double mu = mean_[c];
    const double inv = invstd_[c];
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (int in = 0; in < x.n; ++in) {
      const double* xp = x.plane(in, c);
      const double* gp = gy.plane(in, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_gy += gp[i];
        sum_gy_xhat += gp[i] * (xp[i] - mu) * inv;
      }
    }
    gbeta[c] += sum_gy;
    ggamma[c] += sum_gy_xhat;
    const double k = gamma[c] * inv / m;
    for (int in = 0; in < x.n; ++in) {
      const double* xp = x.plane(in, c);
      const double* gp = gy.plane(in, c);
      double* op = gx.plane(in, c);
      for (std::size_t i = 0; i < plane; ++i) {
        const double xhat = (xp[i] - mu) * inv;
        op[i] = k * (m * gp[i] - sum_gy - xhat * sum_gy_xhat);
      }
    }
  }
}

void BatchNorm2d::zero_grads() {
  std::fill(ggamma.begin(), ggamma.end(), 0.0);
  std::fill(gbeta.begin(), gbeta.end(), 0.0);
}

std::vector<ParamView> BatchNorm2d::params() {
  return {{gamma.data(), ggamma.data(), gamma.size()},
          {beta.data(), gbeta.data(), beta.size()}};
}

// --- activations --------------------------------------------------------------

void relu_forward_inplace(Tensor& t) {
  for (double& x : t.v) x = x > 0.0 ? x : 0.0;
}

void relu_backward_inplace(const Tensor& post_activation, Tensor& gy) {
  require(post_activation.size() == gy.size(), "relu backward: shape mismatch");
  for (std::size_t i = 0; i < gy.v.size(); ++i)
    if (post_activation.v[i] <= 0.0) gy.v[i] = 0.0;
}

// --- Network --------------------------------------------------------------------

Network::Network(std::vector<double> input_bvalues, double target_bvalue, NetworkMode mode,
                 std::uint64_t init_seed)
    : input_bvalues_(std::move(input_bvalues)), target_bvalue_(target_bvalue), mode_(mode) {
  const int in_c = static_cast<int>(input_bvalues_.size());
  require(in_c >= 1, "network needs at least one input channel");
  require(kFeatures % in_c == 0, "input channel count must divide the 54 features");

  for (std::size_t i = 0; i < input_bvalues_.size(); ++i)
    if (input_bvalues_[i] == target_bvalue_) target_channel_ = static_cast<int>(i);
  if (mode_ == NetworkMode::Residual)
    require(target_channel_ >= 0, "residual mode requires the target b-value among the inputs");

  specs_ = {
      {LayerKind::GroupedConvRelu, in_c, kFeatures, in_c},
      {LayerKind::ConvBnRelu, kFeatures, kFeatures, 1},
      {LayerKind::ConvBnRelu, kFeatures, kFeatures, 1},
      {LayerKind::ConvBnRelu, kFeatures, kFeatures, 1},
      {LayerKind::ConvLinear, kFeatures, 1, 1},
  };

  RandomStream rng(init_seed ^ 0x11e7c0deULL);
  convs_.reserve(kDepth);
  convs_.emplace_back(in_c, kFeatures, in_c, true);
  convs_.back().init_he_uniform(rng);
  for (int i = 0; i < 3; ++i) {
    convs_.emplace_back(kFeatures, kFeatures, 1, false); // BN beta provides the shift
    convs_.back().init_he_uniform(rng);
    bns_.emplace_back(kFeatures);
  }
  convs_.emplace_back(kFeatures, 1, 1, true);
  convs_.back().init_he_uniform(rng);

  conv_out_.resize(3);
  block_out_.resize(4);
}

Tensor Network::forward(const Tensor& x, bool training, int threads) {
  require(x.c == static_cast<int>(input_bvalues_.size()), "network forward: channel mismatch");
  input_ = x;

  convs_[0].forward(input_, block_out_[0], threads);
  relu_forward_inplace(block_out_[0]);
  for (int i = 0; i < 3; ++i) {
    convs_[i + 1].forward(block_out_[i], conv_out_[i], threads);
    bns_[i].forward(conv_out_[i], block_out_[i + 1], training);
    relu_forward_inplace(block_out_[i + 1]);
  }
  convs_[4].forward(block_out_[3], stack_out_, threads);
  have_cache_ = training;

  Tensor y(x.n, 1, x.h, x.w);
  if (mode_ == NetworkMode::Residual) {
    for (int in = 0; in < x.n; ++in) {
      const double* tp = input_.plane(in, target_channel_);
      const double* sp = stack_out_.plane(in, 0);
      double* yp = y.plane(in, 0);
      for (std::size_t i = 0; i < y.plane_size(); ++i) yp[i] = tp[i] - sp[i];
    }
  } else {
    y.v = stack_out_.v;
  }
  return y;
}

void Network::backward(const Tensor& gy, Tensor* gx, int threads) {
  require(have_cache_, "network backward requires a preceding training-mode forward");
  require(gy.c == 1 && gy.n == input_.n && gy.h == input_.h && gy.w == input_.w,
          "network backward: gradient shape mismatch");

  Tensor ds = gy;
  if (mode_ == NetworkMode::Residual)
    for (double& v : ds.v) v = -v;

  Tensor g_cur, g_tmp;
  convs_[4].backward(block_out_[3], ds, &g_cur, threads);
  for (int i = 2; i >= 0; --i) {
    relu_backward_inplace(block_out_[i + 1], g_cur);
    bns_[i].backward(conv_out_[i], g_cur, g_tmp);
    convs_[i + 1].backward(block_out_[i], g_tmp, &g_cur, threads);
  }
  relu_backward_inplace(block_out_[0], g_cur);
  convs_[0].backward(input_, g_cur, gx, threads);

  if (gx && mode_ == NetworkMode::Residual) {
    for (int in = 0; in < gy.n; ++in) {
      const double* gp = gy.plane(in, 0);
      double* xp = gx->plane(in, target_channel_);
      for (std::size_t i = 0; i < gy.plane_size(); ++i) xp[i] += gp[i];
    }
  }
}

void Network::zero_grads() {
  for (Conv2d& c : convs_) c.zero_grads();
  for (BatchNorm2d& b : bns_) b.zero_grads();
}

std::vector<ParamView> Network::params() {
  std::vector<ParamView> out;
  for (Conv2d& c : convs_)
    for (ParamView p : c.params()) out.push_back(p);
  for (BatchNorm2d& b : bns_)
    for (ParamView p : b.params()) out.push_back(p);
  return out;
}

// --- losses -------------------------------------------------------------------

double mse_loss(const Tensor& y, const Tensor& target, Tensor* grad) {
  require(y.same_shape(target), "loss: shape mismatch");
  if (grad) ensure_shape(*grad, y.n, y.c, y.h, y.w);
  const double inv_n = 1.0 / static_cast<double>(y.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < y.v.size(); ++i) {
    const double d = y.v[i] - target.v[i];
    acc += d * d;
    if (grad) grad->v[i] = 2.0 * d * inv_n;
  }
  return acc * inv_n;
}

double mae_loss(const Tensor& y, const Tensor& target, Tensor* grad) {
  require(y.same_shape(target), "loss: shape mismatch");
  if (grad) ensure_shape(*grad, y.n, y.c, y.h, y.w);
  const double inv_n = 1.0 / static_cast<double>(y.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < y.v.size(); ++i) {
    const double d = y.v[i] - target.v[i];
    acc += std::abs(d);
    if (grad) grad->v[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv_n;
  }
  return acc * inv_n;
}

// --- optimizer -------------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<ParamView>& params) {
  std::size_t total = 0;
  for (const ParamView& p : params) total += p.size;
  if (m_.size() != total) {
    m_.assign(total, 0.0);
    v_.assign(total, 0.0);
    t_ = 0;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  std::size_t off = 0;
  for (const ParamView& p : params) {
    for (std::size_t i = 0; i < p.size; ++i) {
      const double g = p.grads[i];
      m_[off + i] = beta1_ * m_[off + i] + (1.0 - beta1_) * g;
      v_[off + i] = beta2_ * v_[off + i] + (1.0 - beta2_) * g * g;
      const double mhat = m_[off + i] / bc1;
      const double vhat = v_[off + i] / bc2;
      p.values[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    off += p.size;
  }
}

// --- datasets ----------------------------------------------------------------------

void TrainingConfig::validate() const {
  if (patch_size < 16) throw ConfigError("patch_size must be >= 16");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (min_delta_frac < 0) throw ConfigError("min_delta_frac must be >= 0");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

PatchDataset extract_patches(const std::vector<std::pair<Volume, Volume>>& slice_pairs,
                             int patch_size, int stride) {
  if (patch_size < 1 || stride < 1) throw ConfigError("patch size and stride must be positive");
  PatchDataset ds;
  for (const auto& [input, target] : slice_pairs) {
    if (input.dims[2] != 1 || target.dims[2] != 1)
      throw ConfigError("extract_patches expects 2D slices (nz == 1)");
    if (input.dims != target.dims) throw ConfigError("input/target slice dims mismatch");
    if (target.channels != 1) throw ConfigError("target slices must be single-channel");
    if (input.dims[0] < patch_size || input.dims[1] < patch_size)
      throw ConfigError("slice dims are smaller than the patch size");
    if (ds.in_channels == 0) {
      ds.in_channels = input.channels;
      ds.height = patch_size;
      ds.width = patch_size;
    } else if (ds.in_channels != input.channels) {
      throw ConfigError("inconsistent channel counts across slice pairs");
    }

    const int W = input.dims[0], H = input.dims[1];
    // the non-overlapping grid is centered; border remainders are dropped
    const int span_x = ((W - patch_size) / stride) * stride + patch_size;
    const int span_y = ((H - patch_size) / stride) * stride + patch_size;
    const int off_x = (W - span_x) / 2;
    const int off_y = (H - span_y) / 2;
    for (int oy = off_y; oy + patch_size <= off_y + span_y; oy += stride)
      for (int ox = off_x; ox + patch_size <= off_x + span_x; ox += stride) {
        for (int c = 0; c < input.channels; ++c)
          for (int py = 0; py < patch_size; ++py)
            for (int px = 0; px < patch_size; ++px)
              ds.inputs.push_back(input.at(c, ox + px, oy + py, 0));
        for (int py = 0; py < patch_size; ++py)
          for (int px = 0; px < patch_size; ++px)
            ds.targets.push_back(target.at(0, ox + px, oy + py, 0));
      }
  }
  return ds;
}

namespace {

void fill_batch(const PatchDataset& ds, const std::vector<std::size_t>& order, std::size_t first,
                std::size_t count, Tensor& x, Tensor& t) {
  const std::size_t in_sz = static_cast<std::size_t>(ds.in_channels) * ds.height * ds.width;
  const std::size_t tg_sz = static_cast<std::size_t>(ds.height) * ds.width;
  ensure_shape(x, static_cast<int>(count), ds.in_channels, ds.height, ds.width);
  ensure_shape(t, static_cast<int>(count), 1, ds.height, ds.width);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t idx = order[first + k];
    std::memcpy(x.v.data() + k * in_sz, ds.inputs.data() + idx * in_sz, in_sz * sizeof(double));
    std::memcpy(t.v.data() + k * tg_sz, ds.targets.data() + idx * tg_sz, tg_sz * sizeof(double));
  }
}

double evaluate_loss(Network& net, const PatchDataset& ds, const TrainingConfig& cfg) {
  const std::size_t n = ds.count();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Tensor x, t;
  double acc = 0.0;
  std::size_t pixels = 0;
  for (std::size_t first = 0; first < n; first += cfg.batch_size) {
    const std::size_t count = std::min<std::size_t>(cfg.batch_size, n - first);
    fill_batch(ds, order, first, count, x, t);
    Tensor y = net.forward(x, /*training=*/false, cfg.threads);
    const double loss =
        cfg.loss == TrainingConfig::Loss::MSE ? mse_loss(y, t, nullptr) : mae_loss(y, t, nullptr);
    acc += loss * static_cast<double>(y.size());
    pixels += y.size();
  }
  return acc / static_cast<double>(pixels);
}

struct Snapshot {
  std::vector<double> values;

  static Snapshot capture(Network& net) {
    Snapshot s;
    for (const ParamView& p : net.params())
      s.values.insert(s.values.end(), p.values, p.values + p.size);
    for (const BatchNorm2d& bn : net.bns()) {
      s.values.insert(s.values.end(), bn.running_mean.begin(), bn.running_mean.end());
      s.values.insert(s.values.end(), bn.running_var.begin(), bn.running_var.end());
    }
    return s;
  }

  void restore(Network& net) const {
    std::size_t off = 0;
    for (const ParamView& p : net.params()) {
      std::copy(values.begin() + off, values.begin() + off + p.size, p.values);
      off += p.size;
    }
    for (BatchNorm2d& bn : net.bns()) {
      std::copy(values.begin() + off, values.begin() + off + bn.running_mean.size(),
                bn.running_mean.begin());
      off += bn.running_mean.size();
      std::copy(values.begin() + off, values.begin() + off + bn.running_var.size(),
                bn.running_var.begin());
      off += bn.running_var.size();
    }
  }
};

} // namespace

TrainResult train(Network& net, const PatchDataset& train_set, const PatchDataset& val_set,
                  const TrainingConfig& cfg) {
  cfg.validate();
  if (train_set.count() == 0) throw ConfigError("training dataset is empty");
  if (val_set.count() == 0) throw ConfigError("validation dataset is empty");
  if (train_set.in_channels != static_cast<int>(net.input_bvalues().size()))
    throw ConfigError("dataset channels do not match the network input");

  RandomStream rng(cfg.seed ^ 0x7a31ULL);
  Adam opt(cfg.learning_rate);

  TrainResult res;
  res.initial_val_loss = evaluate_loss(net, val_set, cfg);
  // the random-init loss can sit orders of magnitude above the working
  // range, so an explicit before-training MSE estimate takes precedence
  const double min_delta = cfg.min_delta_abs >= 0 ? cfg.min_delta_frac * cfg.min_delta_abs
                                                  : cfg.min_delta_frac * res.initial_val_loss;

  double best = res.initial_val_loss;
  Snapshot best_snapshot = Snapshot::capture(net);
  int best_epoch = -1;
  int wait = 0;

  const std::size_t n = train_set.count();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  Tensor x, t, grad;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<std::int64_t>(i) - 1)]);

    double train_acc = 0.0;
    std::size_t train_pixels = 0;
    for (std::size_t first = 0; first < n; first += cfg.batch_size) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, n - first);
      fill_batch(train_set, order, first, count, x, t);
      net.zero_grads();
      Tensor y = net.forward(x, /*training=*/true, cfg.threads);
      const double loss =
          cfg.loss == TrainingConfig::Loss::MSE ? mse_loss(y, t, &grad) : mae_loss(y, t, &grad);
      if (!std::isfinite(loss))
        throw NumericError("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
      net.backward(grad, nullptr, cfg.threads);
      opt.step(net.params());
      train_acc += loss * static_cast<double>(y.size());
      train_pixels += y.size();
    }

    const double train_loss = train_acc / static_cast<double>(train_pixels);
    const double val_loss = evaluate_loss(net, val_set, cfg);
    if (!std::isfinite(val_loss))
      throw NumericError("validation loss non-finite at epoch " + std::to_string(epoch));
    res.train_loss.push_back(train_loss);
    res.val_loss.push_back(val_loss);

    if (val_loss < best - min_delta) {
      best = val_loss;
      best_epoch = epoch;
      best_snapshot = Snapshot::capture(net);
      wait = 0;
    } else {
      ++wait;
      if (wait >= cfg.patience) {
        res.early_stopped = true;
        break;
      }
    }
  }

  best_snapshot.restore(net);
  res.best_val_loss = best;
  res.best_epoch = best_epoch;
  return res;
}

void write_loss_curves(const std::string& path, const TrainResult& result) {
  std::ostringstream out;
  out << "epoch\ttrain_loss\tval_loss\n";
  char buf[96];
  for (std::size_t e = 0; e < result.val_loss.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.10g\t%.10g\n", e + 1, result.train_loss[e],
                  result.val_loss[e]);
    out << buf;
  }
  write_text_file(path, out.str());
}

Volume denoise_slice(Network& net, const Volume& input_slice, int threads) {
  input_slice.validate();
  if (input_slice.dims[2] != 1) throw ConfigError("denoise_slice expects a 2D slice");
  if (input_slice.channels != static_cast<int>(net.input_bvalues().size()))
    throw ConfigError("slice channels do not match the network input");

  Tensor x(1, input_slice.channels, input_slice.dims[1], input_slice.dims[0]);
  for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] = input_slice.data[i];
  Tensor y = net.forward(x, /*training=*/false, threads);

  Volume out({input_slice.dims[0], input_slice.dims[1], 1}, 1);
  out.voxel_size = input_slice.voxel_size;
  for (std::size_t i = 0; i < y.v.size(); ++i) out.data[i] = static_cast<float>(y.v[i]);
  return out;
}

// --- checkpoints --------------------------------------------------------------

void save_network(const Network& net, const std::string& path) {
  std::vector<float> blob;
  auto append = [&blob](const std::vector<double>& v) {
    for (double x : v) blob.push_back(static_cast<float>(x));
  };
  for (const Conv2d& c : net.convs()) {
    append(c.w);
    if (c.has_bias()) append(c.b);
  }
  for (const BatchNorm2d& bn : net.bns()) {
    append(bn.gamma);
    append(bn.beta);
    append(bn.running_mean);
    append(bn.running_var);
  }

  std::ostringstream hdr;
  hdr << "mbdnet 1\n";
  hdr << "mode = " << (net.mode() == NetworkMode::Residual ? "residual" : "direct") << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", net.target_bvalue());
  hdr << "target_bvalue = " << buf << "\n";
  hdr << "input_bvalues =";
  for (double b : net.input_bvalues()) {
    std::snprintf(buf, sizeof(buf), " %.17g", b);
    hdr << buf;
  }
  hdr << "\nfeatures = " << Network::kFeatures << "\n";
  hdr << "depth = " << Network::kDepth << "\n";
  hdr << "params = " << blob.size() << "\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const std::string header = hdr.str();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path);
}

Network load_network(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  std::string line;
  std::getline(in, line);
  if (line != "mbdnet 1") throw IoError(path + ": not an mbdnet checkpoint");

  std::string mode_str;
  double target = 0.0;
  std::vector<double> inputs;
  std::size_t param_count = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string key, eq;
    row >> key >> eq;
    if (eq != "=") throw IoError(path + ": malformed header line: " + line);
    if (key == "mode") {
      row >> mode_str;
    } else if (key == "target_bvalue") {
      row >> target;
    } else if (key == "input_bvalues") {
      double b;
      while (row >> b) inputs.push_back(b);
    } else if (key == "params") {
      row >> param_count;
      break;
    } // features/depth are fixed by the architecture
  }
  if (mode_str != "residual" && mode_str != "direct")
    throw IoError(path + ": missing or invalid mode");

  Network net(inputs, target,
              mode_str == "residual" ? NetworkMode::Residual : NetworkMode::Direct, 0);

  std::vector<float> blob(param_count);
  in.read(reinterpret_cast<char*>(blob.data()),
          static_cast<std::streamsize>(param_count * sizeof(float)));
  if (!in) throw IoError(path + ": truncated parameter block");

  std::size_t off = 0;
  auto take = [&](std::vector<double>& v) {
    if (off + v.size() > blob.size()) throw IoError(path + ": parameter block too small");
    for (double& x : v) x = blob[off++];
  };
  for (Conv2d& c : net.convs()) {
    take(c.w);
    if (c.has_bias()) take(c.b);
  }
  for (BatchNorm2d& bn : net.bns()) {
    take(bn.gamma);
    take(bn.beta);
    take(bn.running_mean);
    take(bn.running_var);
  }
  if (off != blob.size()) throw IoError(path + ": parameter block size mismatch");
  return net;
}

} // namespace mbd::nn
