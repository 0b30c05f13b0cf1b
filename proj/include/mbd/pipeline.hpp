#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbd/config.hpp"
#include "mbd/denoise.hpp"
#include "mbd/nn.hpp"
#include "mbd/phantom.hpp"
#include "mbd/simulate.hpp"

namespace mbd::pipeline {

// Full experiment description, parsed from a structured-text config.
// Every stage recomputes its inputs deterministically from the recorded
// seeds, so staged CLI invocations and the end-to-end run agree bit for
// bit.
struct ExperimentConfig {
  // phantom
  std::string phantom_source = "procedural"; // procedural | directory
  std::array<int, 3> phantom_dims{48, 48, 48};
  std::uint64_t phantom_seed = 11;
  std::string phantom_dir;

  // protocol
  std::vector<double> bvalues{0.0, 1000.0, 4000.0};
  double sigma_abs = -1.0;          // < 0: derive from the WM fraction below
  double sigma_frac_wm_b0 = 0.07;   // sigma as a fraction of clean WM b=0 intensity
  int n_train_directions = 2;       // one extra direction is held out for testing
  std::uint64_t direction_seed = 5;
  int direction_iterations = 300;
  std::uint64_t noise_seed = 17;

  // lesions
  std::uint64_t shape_seed = 7;
  int shape_pool = 24;
  std::array<int, 2> test_shape_range{0, 9};    // inclusive index ranges into the pool
  std::array<int, 2> train_shape_range{10, 23}; // must be disjoint from the test range
  std::array<int, 2> lesion_count_range{4, 10};
  std::array<int, 2> shape_size_range{4, 9};
  std::array<double, 2> shape_elongation{1.0, 3.0};
  std::uint64_t lesion_seed = 23;

  // training
  std::vector<denoise::Method> methods{denoise::Method::MBD, denoise::Method::N2N,
                                       denoise::Method::CNNe};
  double target_bvalue = -1.0; // < 0: the highest b-value
  nn::TrainingConfig training;
  int stride = -1; // < 0: non-overlapping (stride == patch_size)
  int n_val_slices = 8;

  // evaluation
  int n_paramsets = 200;
  std::uint64_t eval_seed = 900;
  int test_slice = -1; // < 0: center slice

  // sweep
  int sweep_repeats = 3;

  int threads = 1;

  static ExperimentConfig from_file(const std::string& path);
  static ExperimentConfig from_kv(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const; // canonical form; hash() identifies the experiment
  void validate() const;        // reports offending field paths

  double resolved_target_bvalue() const;
  int resolved_stride() const;
};

// Shared deterministic context: phantom, directions, noise level.
struct ExperimentContext {
  Phantom phantom;
  AcquisitionProtocol protocol; // directions: train 0..n-1, test at index n
  double sigma = 0.0;
  double target_bvalue = 0.0;
  std::vector<LesionShape> train_shapes;
  std::vector<LesionShape> test_shapes;
};

ExperimentContext build_context(const ExperimentConfig& cfg);

// One simulated training direction: lesion field, clean volume, two noisy
// repetitions (input and Noise2Noise target).
struct DirectionData {
  LesionField lesions;
  Volume clean;
  Volume rep0;
  Volume rep1;
};

DirectionData simulate_direction(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                                 int direction_index);

// Patch datasets for one method input configuration, plus the validation
// floor estimate (MSE of the target-channel repetition pair halved).
struct MethodDataset {
  nn::PatchDataset train_set;
  nn::PatchDataset val_set;
  double floor_mse = 0.0;
};

MethodDataset build_method_dataset(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                                   const std::vector<double>& input_bvalues);

std::vector<double> method_input_bvalues(const ExperimentConfig& cfg, denoise::Method m);

// --- stages -------------------------------------------------------------

// phantom/ + sim/ artifacts.
void write_simulation_stage(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                            const std::string& out_dir);

struct TrainingSummaryRow {
  denoise::Method method;
  double best_val_mse = 0.0;
  double floor_mse = 0.0;
  int epochs = 0;
};

// checkpoints/<method>.net, loss curves, training_summary.tsv.
std::vector<TrainingSummaryRow> run_training(const ExperimentConfig& cfg,
                                             const ExperimentContext& ctx,
                                             const std::string& out_dir,
                                             std::optional<denoise::Method> only = std::nullopt);

// eval/ artifacts: metrics.tsv, hist_mean.tsv, hist_abs.tsv,
// attribution.tsv, map images. Requires checkpoints for cfg.methods.
void run_evaluation(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                    const std::string& out_dir);

// eval/sweep.tsv: the four-input-combination comparison for one target.
denoise::SweepResult run_sweep(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                               const std::string& out_dir);

// Full chain: simulate + train + evaluate + manifest. Rerunning with the
// same config reproduces every metric file byte-identically.
void run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir);

} // namespace mbd::pipeline
