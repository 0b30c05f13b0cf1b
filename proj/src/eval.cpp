#include "mbd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mbd/config.hpp"
#include "mbd/errors.hpp"

namespace mbd::eval {

double theoretical_floor(const Volume& i1, const Volume& i2, LossKind loss) {
  i1.validate();
  i2.validate();
  if (!i1.same_grid(i2) || i1.channels != i2.channels)
    throw ConfigError("floor estimation needs two volumes on the same grid");

  const std::size_t n = i1.data.size();
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i1.data[i]) - i2.data[i];
    sum += d;
    sum2 += d * d;
  }
  const double mean = sum / n;
  const double var = std::max(0.0, sum2 / n - mean * mean);
  return loss == LossKind::MSE ? var / 2.0 : std::sqrt(var) / std::sqrt(2.0);
}

Volume error_map(const std::vector<Volume>& denoised, const Volume& clean_reference,
                 const Mask* lesion_mask) {
  if (denoised.empty()) throw ConfigError("error map needs at least one repetition");
  clean_reference.validate();
  if (lesion_mask && lesion_mask->dims != clean_reference.dims)
    throw ConfigError("lesion mask dims do not match the reference");

  const std::size_t n = clean_reference.data.size();
  std::vector<double> acc(n, 0.0);
  for (const Volume& d : denoised) {
    if (!d.same_grid(clean_reference) || d.channels != clean_reference.channels)
      throw ConfigError("denoised volume grid does not match the reference");
    for (std::size_t i = 0; i < n; ++i)
      acc[i] += std::abs(static_cast<double>(d.data[i]) - clean_reference.data[i]);
  }

  Volume out(clean_reference.dims, clean_reference.channels);
  out.voxel_size = clean_reference.voxel_size;
  const std::size_t vox = out.voxels_per_channel();
  for (std::size_t i = 0; i < n; ++i) {
    double v = acc[i] / denoised.size();
    if (lesion_mask && lesion_mask->data[i % vox] <= 0.0f) v = 0.0;
    out.data[i] = static_cast<float>(v);
  }
  return out;
}

Volume error_difference_map(const Volume& map_a, const Volume& map_b) {
  map_a.validate();
  map_b.validate();
  if (!map_a.same_grid(map_b) || map_a.channels != map_b.channels)
    throw ConfigError("error maps must share a grid");
  Volume out(map_a.dims, map_a.channels);
  out.voxel_size = map_a.voxel_size;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = map_b.data[i] - map_a.data[i];
  return out;
}

void Histogram::add(double value) {
  const long bin = static_cast<long>(std::floor(value / bin_width));
  ++counts[bin];
  ++total;
}

LesionErrorReport lesion_error_histograms(const std::vector<double>& errors) {
  if (errors.empty()) throw ConfigError("no qualifying pure-lesion voxels");

  LesionErrorReport rep;
  rep.signed_hist.bin_width = 0.01;
  rep.abs_hist.bin_width = 1.0;

  double sum = 0.0, sum2 = 0.0, abs_sum = 0.0;
  std::size_t in_unit = 0;
  for (double e : errors) {
    rep.signed_hist.add(e);
    rep.abs_hist.add(std::abs(e));
    sum += e;
    sum2 += e * e;
    abs_sum += std::abs(e);
    if (std::abs(e) < 1.0) ++in_unit;
  }
  const double n = static_cast<double>(errors.size());
  rep.mean = sum / n;
  rep.stddev = std::sqrt(std::max(0.0, sum2 / n - rep.mean * rep.mean));
  rep.abs_mean = std::abs(rep.mean);
  rep.mae = abs_sum / n;
  rep.fraction_abs_in_unit = static_cast<double>(in_unit) / n;
  rep.sample_count = errors.size();
  return rep;
}

std::vector<std::size_t> pure_lesion_voxels(const Mask& lesion_fraction) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < lesion_fraction.data.size(); ++i)
    if (lesion_fraction.data[i] >= 1.0f - 1e-6f) out.push_back(i);
  return out;
}

AttributionSummary best_method_attribution(const std::vector<denoise::Method>& methods,
                                           std::vector<AttributionRecord> records) {
  if (methods.size() < 2) throw ConfigError("attribution needs at least two methods");

  AttributionSummary summary;
  summary.methods = methods;
  std::vector<std::size_t> wins(methods.size(), 0);

  for (AttributionRecord& r : records) {
    if (r.mae.size() != methods.size())
      throw ConfigError("attribution record has a wrong number of MAE entries");
    int best = 0;
    bool tie = false;
    for (std::size_t m = 1; m < r.mae.size(); ++m) {
      if (r.mae[m] < r.mae[best]) {
        best = static_cast<int>(m);
        tie = false;
      } else if (r.mae[m] == r.mae[best]) {
        tie = true; // fixed order keeps the earlier method
      }
    }
    r.winner = best;
    r.tie = tie;
    ++wins[best];
  }

  summary.records = std::move(records);
  summary.win_percent.resize(methods.size());
  const double total = std::max<std::size_t>(1, summary.records.size());
  for (std::size_t m = 0; m < methods.size(); ++m)
    summary.win_percent[m] = 100.0 * static_cast<double>(wins[m]) / total;
  return summary;
}

void write_attribution_tsv(const std::string& path, const AttributionSummary& summary) {
  std::ostringstream out;
  out << "paramset\tf\tD1\tD2\tdT2\tb0_intensity\tb1_intensity\tb2_intensity";
  for (denoise::Method m : summary.methods) out << "\tmae_" << denoise::method_name(m);
  out << "\twinner\ttie\n";
  char buf[512];
  for (const AttributionRecord& r : summary.records) {
    std::snprintf(buf, sizeof(buf), "%d\t%.6g\t%.6g\t%.6g\t%.6g\t%.8g\t%.8g\t%.8g", r.paramset_id,
                  r.params.f, r.params.D1, r.params.D2, r.params.dT2, r.b0_intensity,
                  r.b1_intensity, r.b2_intensity);
    out << buf;
    for (double m : r.mae) {
      std::snprintf(buf, sizeof(buf), "\t%.8g", m);
      out << buf;
    }
    out << "\t" << denoise::method_name(summary.methods[r.winner]) << "\t" << (r.tie ? 1 : 0)
        << "\n";
  }
  write_text_file(path, out.str());
}

void write_histogram_tsv(const std::string& path, const Histogram& hist) {
  std::ostringstream out;
  out << "bin_left\tcount\n";
  char buf[96];
  for (const auto& [bin, count] : hist.counts) {
    std::snprintf(buf, sizeof(buf), "%.10g\t%zu\n", bin * hist.bin_width, count);
    out << buf;
  }
  write_text_file(path, out.str());
}

Volume lesion_conspicuity_diff(const Volume& denoised_with_lesions,
                               const Volume& denoised_without_lesions) {
  denoised_with_lesions.validate();
  denoised_without_lesions.validate();
  if (!denoised_with_lesions.same_grid(denoised_without_lesions) ||
      denoised_with_lesions.channels != denoised_without_lesions.channels)
    throw ConfigError("conspicuity difference needs matching grids");
  Volume out(denoised_with_lesions.dims, denoised_with_lesions.channels);
  out.voxel_size = denoised_with_lesions.voxel_size;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = denoised_with_lesions.data[i] - denoised_without_lesions.data[i];
  return out;
}

} // namespace mbd::eval
