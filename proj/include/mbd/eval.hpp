#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mbd/denoise.hpp"
#include "mbd/simulate.hpp"
#include "mbd/volume.hpp"

namespace mbd::eval {

enum class LossKind { MSE, MAE };

// Minimum achievable Noise2Noise loss, estimated from two noisy
// repetitions of the same clean signal: MSE floor = Var[I1-I2]/2,
// MAE floor = std[I1-I2]/sqrt(2).
double theoretical_floor(const Volume& i1, const Volume& i2, LossKind loss);

// Mean over repetitions of |denoised - clean|; the masked variant keeps
// only voxels with non-zero lesion fraction (others set to 0).
Volume error_map(const std::vector<Volume>& denoised, const Volume& clean_reference,
                 const Mask* lesion_mask);

// mapB - mapA: positive where A had lower error.
Volume error_difference_map(const Volume& map_a, const Volume& map_b);

// Integer-indexed histogram: bin i covers [i*bin_width, (i+1)*bin_width).
struct Histogram {
  double bin_width = 1.0;
  std::map<long, std::size_t> counts;
  std::size_t total = 0;

  void add(double value);
};

struct LesionErrorReport {
  Histogram signed_hist; // bin width 0.01
  Histogram abs_hist;    // bin width 1
  double mean = 0.0;
  double stddev = 0.0;
  double abs_mean = 0.0;          // |mean| of the signed errors
  double mae = 0.0;               // mean of |error|
  double fraction_abs_in_unit = 0.0; // fraction of |error| in [0,1)
  std::size_t sample_count = 0;
};

// Error statistics over pure-lesion voxels (signed errors as sampled
// across voxels and repetitions). Throws when `errors` is empty.
LesionErrorReport lesion_error_histograms(const std::vector<double>& errors);

// Voxels counted as pure lesion: fraction >= 1 - 1e-6.
std::vector<std::size_t> pure_lesion_voxels(const Mask& lesion_fraction);

// --- best-method attribution -------------------------------------------

struct AttributionRecord {
  int paramset_id = 0;
  LesionParams params;
  double b0_intensity = 0.0;   // mean clean lesion intensity per b-value
  double b1_intensity = 0.0;
  double b2_intensity = 0.0;
  std::vector<double> mae;     // aligned with the method list
  int winner = -1;             // index into the method list
  bool tie = false;
};

struct AttributionSummary {
  std::vector<denoise::Method> methods;
  std::vector<AttributionRecord> records;
  std::vector<double> win_percent; // per method
};

// Argmin of per-paramset MAEs; ties broken by the fixed method order and
// flagged. Requires >= 2 methods.
AttributionSummary best_method_attribution(const std::vector<denoise::Method>& methods,
                                           std::vector<AttributionRecord> records);

void write_attribution_tsv(const std::string& path, const AttributionSummary& summary);
void write_histogram_tsv(const std::string& path, const Histogram& hist);

// Difference between denoising results with and without lesions; reveals
// each method's lesion response. Grids (and noise seeds, by protocol)
// must match.
Volume lesion_conspicuity_diff(const Volume& denoised_with_lesions,
                               const Volume& denoised_without_lesions);

} // namespace mbd::eval
