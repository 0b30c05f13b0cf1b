#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbd/volume.hpp"

namespace mbd {
class RandomStream;
}

namespace mbd::nn {

// Dense NCHW tensor, double precision. Training and gradient math run in
// 64-bit; parameters are stored as float32 only at rest (checkpoints).
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

  std::size_t size() const { return v.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }
  double* plane(int in, int ic) { return v.data() + (static_cast<std::size_t>(in) * c + ic) * plane_size(); }
  const double* plane(int in, int ic) const {
    return v.data() + (static_cast<std::size_t>(in) * c + ic) * plane_size();
  }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

enum class LayerKind { GroupedConvRelu, ConvBnRelu, ConvLinear };

struct LayerSpec {
  LayerKind kind = LayerKind::ConvBnRelu;
  int in_channels = 0;
  int out_channels = 0;
  int groups = 1;
};

struct ParamView {
  double* values = nullptr;
  double* grads = nullptr;
  std::size_t size = 0;
};

// 3x3 convolution, zero padding 1, optional channel grouping and bias.
// Output spatial size equals input size.
class Conv2d {
public:
  Conv2d(int in_c, int out_c, int groups, bool bias);

  void init_he_uniform(RandomStream& rng);
  void forward(const Tensor& x, Tensor& y, int threads) const;
  // Accumulates weight/bias gradients; writes input gradients when gx != nullptr.
  void backward(const Tensor& x, const Tensor& gy, Tensor* gx, int threads);
  void zero_grads();
  std::vector<ParamView> params();

  int in_channels() const { return in_c_; }
  int out_channels() const { return out_c_; }
  int groups() const { return groups_; }
  bool has_bias() const { return has_bias_; }

  std::vector<double> w; // [out_c][in_c/groups][3][3]
  std::vector<double> b;
  std::vector<double> gw;
  std::vector<double> gb;

private:
  int in_c_, out_c_, groups_;
  bool has_bias_;
  // padded-plane scratch; instances are not safe for concurrent calls
  mutable std::vector<double> pad_x_;
  std::vector<double> pad_gy_;
};

// Per-channel batch normalization over (N,H,W); epsilon 1e-5. Training
// mode uses biased batch statistics and maintains running averages
// (momentum 0.1) for inference.
class BatchNorm2d {
public:
  explicit BatchNorm2d(int channels);

  void forward(const Tensor& x, Tensor& y, bool training);
  void backward(const Tensor& x, const Tensor& gy, Tensor& gx);
  void zero_grads();
  std::vector<ParamView> params();

  std::vector<double> gamma, beta, ggamma, gbeta;
  std::vector<double> running_mean, running_var;
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

private:
  int c_;
  std::vector<double> mean_, invstd_; // batch stats cached for backward
};

void relu_forward_inplace(Tensor& t);
// gy is masked in place using the post-activation output.
void relu_backward_inplace(const Tensor& post_activation, Tensor& gy);

enum class NetworkMode { Residual, Direct };

// Five-layer DnCNN-style denoiser: grouped conv+ReLU input layer (one
// group per input channel, 54 features total), three conv+BN+ReLU blocks
// (54 features), linear conv output. Residual mode estimates the noise
// and subtracts it from the input channel at the target b-value; direct
// mode emits the estimate itself.
class Network {
public:
  Network(std::vector<double> input_bvalues, double target_bvalue, NetworkMode mode,
          std::uint64_t init_seed);

  // Input (N, |input_bvalues|, H, W) -> output (N, 1, H, W). Training mode
  // caches activations for backward and uses batch statistics in BN.
  Tensor forward(const Tensor& x, bool training, int threads = 1);
  // dL/doutput -> parameter gradients (accumulated); input gradients on demand.
  void backward(const Tensor& gy, Tensor* gx = nullptr, int threads = 1);
  void zero_grads();
  std::vector<ParamView> params();

  const std::vector<LayerSpec>& specs() const { return specs_; }
  const std::vector<double>& input_bvalues() const { return input_bvalues_; }
  double target_bvalue() const { return target_bvalue_; }
  NetworkMode mode() const { return mode_; }
  int target_channel() const { return target_channel_; }
  // Raw output of the convolutional stack from the last forward pass (the
  // noise estimate in residual mode).
  const Tensor& last_stack_output() const { return stack_out_; }

  // friend-free access for checkpointing
  std::vector<Conv2d>& convs() { return convs_; }
  std::vector<BatchNorm2d>& bns() { return bns_; }
  const std::vector<Conv2d>& convs() const { return convs_; }
  const std::vector<BatchNorm2d>& bns() const { return bns_; }

  static constexpr int kFeatures = 54;
  static constexpr int kDepth = 5;

private:
  std::vector<LayerSpec> specs_;
  std::vector<double> input_bvalues_;
  double target_bvalue_;
  NetworkMode mode_;
  int target_channel_ = -1;

  std::vector<Conv2d> convs_;   // one per layer
  std::vector<BatchNorm2d> bns_; // for the middle blocks

  // forward caches (training mode)
  Tensor input_, stack_out_;
  std::vector<Tensor> conv_out_;  // pre-BN output per middle block
  std::vector<Tensor> block_out_; // post-activation output per block
  bool have_cache_ = false;
};

// MSE / MAE over all output pixels; fills grad (dL/dy) when non-null.
double mse_loss(const Tensor& y, const Tensor& target, Tensor* grad);
double mae_loss(const Tensor& y, const Tensor& target, Tensor* grad);

class Adam {
public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(const std::vector<ParamView>& params);

private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<double> m_, v_;
};

struct TrainingConfig {
  int patch_size = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int max_epochs = 200;
  int patience = 10;
  // plateau threshold: min_delta_frac times the before-training MSE
  // (Var[I1-I2] of the repetition pair); min_delta_abs > 0 supplies that
  // product directly when the caller has a floor estimate
  double min_delta_frac = 1e-4;
  double min_delta_abs = -1.0;
  std::uint64_t seed = 0;
  enum class Loss { MSE, MAE } loss = Loss::MSE;
  int threads = 1;

  void validate() const; // patch_size >= 16, positive hyperparameters
};

// Flat patch pairs: inputs carry the configured b-value channels, targets
// the independent-noise repetition at the target b-value.
struct PatchDataset {
  int in_channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> inputs;  // [count][in_channels][h][w]
  std::vector<double> targets; // [count][1][h][w]

  std::size_t count() const {
    const std::size_t per = static_cast<std::size_t>(in_channels) * height * width;
    return per == 0 ? 0 : inputs.size() / per;
  }
};

// Non-overlapping (or strided) patch grid over 2D slice pairs; remainders
// at the slice border are dropped.
PatchDataset extract_patches(const std::vector<std::pair<Volume, Volume>>& slice_pairs,
                             int patch_size, int stride);

struct TrainResult {
  std::vector<double> train_loss; // per epoch
  std::vector<double> val_loss;
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
  int best_epoch = -1; // 0-based
  bool early_stopped = false;
};

// Adam training with per-epoch validation, early stopping on a validation
// plateau, best-weight restore, and a NaN divergence guard. Deterministic
// for a fixed seed; multithreaded runs are bit-identical to serial ones
// because all parallel writes are disjoint and reductions keep a fixed
// order.
TrainResult train(Network& net, const PatchDataset& train_set, const PatchDataset& val_set,
                  const TrainingConfig& cfg);

// Loss curves as delimited text: epoch\ttrain\tval.
void write_loss_curves(const std::string& path, const TrainResult& result);

// Full-slice inference (eval mode, running BN statistics). Input channels
// must match the network's configured b-values.
Volume denoise_slice(Network& net, const Volume& input_slice, int threads = 1);

void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

} // namespace mbd::nn
