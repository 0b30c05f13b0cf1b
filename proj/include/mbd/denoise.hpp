#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mbd/nn.hpp"
#include "mbd/volume.hpp"

namespace mbd::denoise {

enum class Method { MBD, N2N, CNNe, ALGe, MPPCA };

Method method_from_string(const std::string& s);
std::string method_name(Method m);

struct MethodConfig {
  Method method = Method::MBD;
  std::vector<double> input_bvalues;
  double target_bvalue = 0.0;
  std::string checkpoint;              // NN methods
  std::array<double, 2> alge_pair{0.0, 0.0}; // (b1, b2)
  int patch_radius = 2;                // MPPCA

  void validate() const;
};

struct AlgeResult {
  Volume volume;
  Mask defects; // 1 where a nonpositive intensity forced the voxel to 0
};

// Two-point monoexponential extrapolation: per voxel
// D = (log S(b1) - log S(b2)) / (b2 - b1), S(bt) = S(b1) exp(-(bt-b1) D).
// Nonpositive intensities cannot enter the log; those voxels are zeroed
// and recorded in the defect mask instead of being clipped.
AlgeResult alge_extrapolate(const Volume& s1, double b1, const Volume& s2, double b2,
                            double b_target);

// Marchenko-Pastur PCA over sliding (2r+1)^3 windows with the channel
// dimension as features. Each window matrix is centered per channel, its
// covariance eigendecomposed, and the largest trailing eigenvalue set
// consistent with the MP upper edge (top trailing eigenvalue <=
// sigma^2 (1+sqrt(Nt/M))^2 with sigma^2 the trailing mean) is removed.
// Overlapping reconstructions are averaged uniformly; constant windows
// pass through.
Volume mppca_denoise(const Volume& dwi, int patch_radius = 2, int threads = 1);

// Uniform dispatch. `dwi` carries one channel per b-value (labels
// "b=<value>"); the result is a single-channel volume at the target
// b-value. NN methods run slice-wise with running BN statistics.
Volume denoise(const MethodConfig& cfg, const Volume& dwi, int threads = 1);

// NN inference with an already loaded network (checkpoint reuse across
// many volumes).
Volume denoise_with_network(nn::Network& net, const Volume& dwi, int threads = 1);

int find_bvalue_channel(const Volume& dwi, double bvalue);

// --- input-configuration sweep -----------------------------------------

struct SweepConfig {
  std::vector<double> bvalues; // the three available b-values
  double target_bvalue = 0.0;
  int repeats = 10;
  nn::TrainingConfig training;
};

struct SweepCurve {
  std::vector<double> input_bvalues;
  std::vector<double> mean_val_loss; // averaged over repeats, cropped to the shortest run
  double final_loss = 0.0;           // minimum of the averaged curve
};

struct SweepResult {
  std::vector<SweepCurve> curves; // one per input combination
  std::vector<int> ranking;       // curve indices, best first
};

// Enumerates the input combinations for one target b-value ({bt},
// {b0,bt}, {bmid,bt}, {b0,bmid,bt} when three b-values are available),
// trains each combination `repeats` times with shifted seeds, averages
// the validation curves (cropped to the shortest session) and ranks by
// the minimal averaged loss.
using DatasetBuilder =
    std::function<void(const std::vector<double>& input_bvalues, double target_bvalue,
                       nn::PatchDataset& train_out, nn::PatchDataset& val_out)>;

std::vector<std::vector<double>> enumerate_input_combinations(const std::vector<double>& bvalues,
                                                              double target_bvalue);

SweepResult input_configuration_sweep(const DatasetBuilder& builder, const SweepConfig& cfg);

void write_sweep_curves(const std::string& path, const SweepResult& result);

} // namespace mbd::denoise
