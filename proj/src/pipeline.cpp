#include "mbd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mbd/errors.hpp"
#include "mbd/eval.hpp"
#include "mbd/png_io.hpp"
#include "mbd/rng.hpp"

namespace mbd::pipeline {

namespace fs = std::filesystem;

namespace {

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  char buf[48];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%s%.17g", i ? " " : "", v[i]);
    out += buf;
  }
  return out;
}

Volume extract_zrange(const Volume& v, int z0, int z1) {
  if (z0 < 0 || z1 >= v.dims[2] || z0 > z1) throw ConfigError("z range out of bounds");
  Volume out({v.dims[0], v.dims[1], z1 - z0 + 1}, v.channels);
  out.voxel_size = v.voxel_size;
  out.labels = v.labels;
  const std::size_t plane = static_cast<std::size_t>(v.dims[0]) * v.dims[1];
  for (int c = 0; c < v.channels; ++c)
    for (int z = z0; z <= z1; ++z)
      std::copy(v.channel_ptr(c) + static_cast<std::size_t>(z) * plane,
                v.channel_ptr(c) + static_cast<std::size_t>(z + 1) * plane,
                out.channel_ptr(c) + static_cast<std::size_t>(z - z0) * plane);
  return out;
}

Volume single_channel(const Volume& v, int channel) {
  Volume out(v.dims, 1);
  out.voxel_size = v.voxel_size;
  if (channel < static_cast<int>(v.labels.size())) out.labels = {v.labels[channel]};
  std::copy(v.channel_ptr(channel), v.channel_ptr(channel) + v.voxels_per_channel(),
            out.data.begin());
  return out;
}

} // namespace

// --- config ----------------------------------------------------------------

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  return from_kv(KeyValueConfig::parse_file(path));
}

ExperimentConfig ExperimentConfig::from_kv(const KeyValueConfig& kv) {
  ExperimentConfig c;
  c.phantom_source = kv.get_string_or("phantom.source", c.phantom_source);
  if (kv.has("phantom.dims")) {
    const auto d = kv.get_int_list("phantom.dims");
    if (d.size() != 3) throw ConfigError("phantom.dims must have 3 entries");
    c.phantom_dims = {static_cast<int>(d[0]), static_cast<int>(d[1]), static_cast<int>(d[2])};
  }
  c.phantom_seed = static_cast<std::uint64_t>(kv.get_int_or("phantom.seed", c.phantom_seed));
  c.phantom_dir = kv.get_string_or("phantom.dir", c.phantom_dir);

  if (kv.has("protocol.bvalues")) c.bvalues = kv.get_double_list("protocol.bvalues");
  c.sigma_abs = kv.get_double_or("protocol.sigma", c.sigma_abs);
  c.sigma_frac_wm_b0 = kv.get_double_or("protocol.sigma_frac_wm_b0", c.sigma_frac_wm_b0);
  c.n_train_directions =
      static_cast<int>(kv.get_int_or("protocol.n_train_directions", c.n_train_directions));
  c.direction_seed = static_cast<std::uint64_t>(kv.get_int_or("protocol.direction_seed", c.direction_seed));
  c.direction_iterations =
      static_cast<int>(kv.get_int_or("protocol.direction_iterations", c.direction_iterations));
  c.noise_seed = static_cast<std::uint64_t>(kv.get_int_or("protocol.noise_seed", c.noise_seed));

  c.shape_seed = static_cast<std::uint64_t>(kv.get_int_or("lesions.shape_seed", c.shape_seed));
  c.shape_pool = static_cast<int>(kv.get_int_or("lesions.shape_pool", c.shape_pool));
  const auto read_range = [&kv](const char* key, std::array<int, 2> fallback) {
    if (!kv.has(key)) return fallback;
    const auto r = kv.get_int_list(key);
    if (r.size() != 2) throw ConfigError(std::string(key) + " must have 2 entries");
    return std::array<int, 2>{static_cast<int>(r[0]), static_cast<int>(r[1])};
  };
  c.test_shape_range = read_range("lesions.test_shapes", c.test_shape_range);
  c.train_shape_range = read_range("lesions.train_shapes", c.train_shape_range);
  c.lesion_count_range = read_range("lesions.count_range", c.lesion_count_range);
  c.shape_size_range = read_range("lesions.size_range", c.shape_size_range);
  if (kv.has("lesions.elongation")) {
    const auto e = kv.get_double_list("lesions.elongation");
    if (e.size() != 2) throw ConfigError("lesions.elongation must have 2 entries");
    c.shape_elongation = {e[0], e[1]};
  }
  c.lesion_seed = static_cast<std::uint64_t>(kv.get_int_or("lesions.seed", c.lesion_seed));

  if (kv.has("training.methods")) {
    c.methods.clear();
    for (const std::string& s : kv.get_string_list("training.methods"))
      c.methods.push_back(denoise::method_from_string(s));
  }
  c.target_bvalue = kv.get_double_or("training.target_bvalue", c.target_bvalue);
  c.training.patch_size = static_cast<int>(kv.get_int_or("training.patch_size", c.training.patch_size));
  c.training.batch_size = static_cast<int>(kv.get_int_or("training.batch_size", c.training.batch_size));
  c.training.learning_rate = kv.get_double_or("training.learning_rate", c.training.learning_rate);
  c.training.max_epochs = static_cast<int>(kv.get_int_or("training.max_epochs", c.training.max_epochs));
  c.training.patience = static_cast<int>(kv.get_int_or("training.patience", c.training.patience));
  c.training.min_delta_frac = kv.get_double_or("training.min_delta_frac", c.training.min_delta_frac);
  c.training.seed = static_cast<std::uint64_t>(kv.get_int_or("training.seed", c.training.seed));
  const std::string loss = kv.get_string_or("training.loss", "MSE");
  if (loss == "MSE")
    c.training.loss = nn::TrainingConfig::Loss::MSE;
  else if (loss == "MAE")
    c.training.loss = nn::TrainingConfig::Loss::MAE;
  else
    throw ConfigError("training.loss must be MSE or MAE");
  c.stride = static_cast<int>(kv.get_int_or("training.stride", c.stride));
  c.n_val_slices = static_cast<int>(kv.get_int_or("training.n_val_slices", c.n_val_slices));

  c.n_paramsets = static_cast<int>(kv.get_int_or("evaluation.n_paramsets", c.n_paramsets));
  c.eval_seed = static_cast<std::uint64_t>(kv.get_int_or("evaluation.seed", c.eval_seed));
  c.test_slice = static_cast<int>(kv.get_int_or("evaluation.test_slice", c.test_slice));

  c.sweep_repeats = static_cast<int>(kv.get_int_or("sweep.repeats", c.sweep_repeats));
  c.threads = static_cast<int>(kv.get_int_or("threads", c.threads));
  c.training.threads = c.threads;
  return c;
}

KeyValueConfig ExperimentConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("phantom.source", phantom_source);
  {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%d %d %d", phantom_dims[0], phantom_dims[1], phantom_dims[2]);
    kv.set("phantom.dims", buf);
  }
  kv.set_int("phantom.seed", static_cast<std::int64_t>(phantom_seed));
  if (!phantom_dir.empty()) kv.set("phantom.dir", phantom_dir);

  kv.set("protocol.bvalues", join_doubles(bvalues));
  kv.set_double("protocol.sigma", sigma_abs);
  kv.set_double("protocol.sigma_frac_wm_b0", sigma_frac_wm_b0);
  kv.set_int("protocol.n_train_directions", n_train_directions);
  kv.set_int("protocol.direction_seed", static_cast<std::int64_t>(direction_seed));
  kv.set_int("protocol.direction_iterations", direction_iterations);
  kv.set_int("protocol.noise_seed", static_cast<std::int64_t>(noise_seed));

  kv.set_int("lesions.shape_seed", static_cast<std::int64_t>(shape_seed));
  kv.set_int("lesions.shape_pool", shape_pool);
  kv.set("lesions.test_shapes", std::to_string(test_shape_range[0]) + " " + std::to_string(test_shape_range[1]));
  kv.set("lesions.train_shapes", std::to_string(train_shape_range[0]) + " " + std::to_string(train_shape_range[1]));
  kv.set("lesions.count_range", std::to_string(lesion_count_range[0]) + " " + std::to_string(lesion_count_range[1]));
  kv.set("lesions.size_range", std::to_string(shape_size_range[0]) + " " + std::to_string(shape_size_range[1]));
  kv.set("lesions.elongation", join_doubles({shape_elongation[0], shape_elongation[1]}));
  kv.set_int("lesions.seed", static_cast<std::int64_t>(lesion_seed));

  {
    std::string m;
    for (std::size_t i = 0; i < methods.size(); ++i)
      m += (i ? " " : "") + denoise::method_name(methods[i]);
    kv.set("training.methods", m);
  }
  kv.set_double("training.target_bvalue", target_bvalue);
  kv.set_int("training.patch_size", training.patch_size);
  kv.set_int("training.batch_size", training.batch_size);
  kv.set_double("training.learning_rate", training.learning_rate);
  kv.set_int("training.max_epochs", training.max_epochs);
  kv.set_int("training.patience", training.patience);
  kv.set_double("training.min_delta_frac", training.min_delta_frac);
  kv.set_int("training.seed", static_cast<std::int64_t>(training.seed));
  kv.set("training.loss", training.loss == nn::TrainingConfig::Loss::MSE ? "MSE" : "MAE");
  kv.set_int("training.stride", stride);
  kv.set_int("training.n_val_slices", n_val_slices);

  kv.set_int("evaluation.n_paramsets", n_paramsets);
  kv.set_int("evaluation.seed", static_cast<std::int64_t>(eval_seed));
  kv.set_int("evaluation.test_slice", test_slice);
  kv.set_int("sweep.repeats", sweep_repeats);
  return kv; // thread count is execution detail, not experiment identity
}

double ExperimentConfig::resolved_target_bvalue() const {
  if (target_bvalue >= 0) return target_bvalue;
  return *std::max_element(bvalues.begin(), bvalues.end());
}

int ExperimentConfig::resolved_stride() const { return stride > 0 ? stride : training.patch_size; }

void ExperimentConfig::validate() const {
  if (phantom_source != "procedural" && phantom_source != "directory")
    throw ConfigError("phantom.source: must be `procedural` or `directory`");
  if (phantom_source == "directory" && phantom_dir.empty())
    throw ConfigError("phantom.dir: required when phantom.source = directory");
  if (phantom_source == "procedural")
    for (int d : phantom_dims)
      if (d < 32) throw ConfigError("phantom.dims: procedural phantom needs >= 32 voxels per axis");

  if (bvalues.size() < 3)
    throw ConfigError("protocol.bvalues: the evaluation protocol needs at least three b-values");
  for (std::size_t i = 1; i < bvalues.size(); ++i)
    if (bvalues[i] <= bvalues[i - 1])
      throw ConfigError("protocol.bvalues: must be strictly ascending");
  if (bvalues.front() < 0) throw ConfigError("protocol.bvalues: must be >= 0");
  if (sigma_abs < 0 && sigma_frac_wm_b0 <= 0)
    throw ConfigError("protocol.sigma_frac_wm_b0: must be positive when protocol.sigma is unset");
  if (n_train_directions < 1)
    throw ConfigError("protocol.n_train_directions: must be >= 1");

  const auto check_range = [this](const char* name, const std::array<int, 2>& r) {
    if (r[0] < 0 || r[1] < r[0] || r[1] >= shape_pool)
      throw ConfigError(std::string(name) + ": must satisfy 0 <= lo <= hi < lesions.shape_pool");
  };
  check_range("lesions.test_shapes", test_shape_range);
  check_range("lesions.train_shapes", train_shape_range);
  if (test_shape_range[0] <= train_shape_range[1] && train_shape_range[0] <= test_shape_range[1])
    throw ConfigError("lesions.train_shapes: training and test shape pools must be disjoint");
  if (lesion_count_range[0] < 1 || lesion_count_range[1] < lesion_count_range[0])
    throw ConfigError("lesions.count_range: must satisfy 1 <= lo <= hi");

  if (methods.empty()) throw ConfigError("training.methods: at least one method required");
  for (denoise::Method m : methods)
    if (m == denoise::Method::ALGe || m == denoise::Method::MPPCA)
      throw ConfigError("training.methods: only NN methods (MBD, N2N, CNNe) are trainable");
  training.validate();
  const double target = resolved_target_bvalue();
  bool found = false;
  for (double b : bvalues)
    if (std::abs(b - target) <= 1e-9) found = true;
  if (!found) throw ConfigError("training.target_bvalue: must be one of protocol.bvalues");
  if (n_val_slices < 1) throw ConfigError("training.n_val_slices: must be >= 1");

  if (n_paramsets < 1) throw ConfigError("evaluation.n_paramsets: must be >= 1");
  const int zc = test_slice < 0 ? phantom_dims[2] / 2 : test_slice;
  if (phantom_source == "procedural" && (zc < 2 || zc > phantom_dims[2] - 3))
    throw ConfigError("evaluation.test_slice: needs two neighbouring slices on each side (MPPCA window)");
  if (sweep_repeats < 1) throw ConfigError("sweep.repeats: must be >= 1");
  if (threads < 1) throw ConfigError("threads: must be >= 1");
}

// --- context -----------------------------------------------------------------

ExperimentContext build_context(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentContext ctx;
  ctx.phantom = cfg.phantom_source == "procedural"
                    ? generate_procedural_phantom(cfg.phantom_dims, cfg.phantom_seed)
                    : load_phantom(cfg.phantom_dir);

  ctx.protocol.bvalues = cfg.bvalues;
  ctx.protocol.directions = generate_directions(cfg.n_train_directions + 1, cfg.direction_seed,
                                                cfg.direction_iterations);
  ctx.protocol.repetitions = 2;

  ctx.sigma = cfg.sigma_abs >= 0
                  ? cfg.sigma_abs
                  : cfg.sigma_frac_wm_b0 * steady_state_factor(ctx.phantom.params.wm, ctx.protocol);
  ctx.protocol.sigma = ctx.sigma;
  ctx.target_bvalue = cfg.resolved_target_bvalue();

  const auto pool = generate_lesion_shapes(cfg.shape_pool, cfg.shape_size_range,
                                           cfg.shape_elongation, cfg.shape_seed);
  for (int i = cfg.train_shape_range[0]; i <= cfg.train_shape_range[1]; ++i)
    ctx.train_shapes.push_back(pool[i]);
  for (int i = cfg.test_shape_range[0]; i <= cfg.test_shape_range[1]; ++i)
    ctx.test_shapes.push_back(pool[i]);
  return ctx;
}

DirectionData simulate_direction(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                                 int direction_index) {
  DirectionData d;
  d.lesions = insert_lesions(ctx.phantom, ctx.train_shapes, cfg.lesion_count_range,
                             cfg.lesion_seed + 131ULL * static_cast<std::uint64_t>(direction_index));
  d.clean = simulate_clean(ctx.phantom, &d.lesions, ctx.protocol, direction_index, cfg.threads);
  d.rep0 = add_rician_noise(d.clean, ctx.sigma,
                            cfg.noise_seed + 1000ULL * static_cast<std::uint64_t>(direction_index),
                            cfg.threads);
  d.rep1 = add_rician_noise(d.clean, ctx.sigma,
                            cfg.noise_seed + 1000ULL * static_cast<std::uint64_t>(direction_index) + 1,
                            cfg.threads);
  return d;
}

std::vector<double> method_input_bvalues(const ExperimentConfig& cfg, denoise::Method m) {
  const double target = cfg.resolved_target_bvalue();
  switch (m) {
    case denoise::Method::MBD: return cfg.bvalues;
    case denoise::Method::N2N: return {target};
    case denoise::Method::CNNe: {
      std::vector<double> inputs;
      for (double b : cfg.bvalues)
        if (std::abs(b - target) > 1e-9) inputs.push_back(b);
      return inputs;
    }
    default: throw ConfigError("not an NN method");
  }
}

MethodDataset build_method_dataset(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                                   const std::vector<double>& input_bvalues) {
  const double target = cfg.resolved_target_bvalue();

  // slice list shared by all methods for one config: (direction, z) pairs
  // restricted to slices that contain lesion tissue
  std::vector<DirectionData> dirs;
  std::vector<std::pair<int, int>> slices;
  for (int d = 0; d < cfg.n_train_directions; ++d) {
    dirs.push_back(simulate_direction(cfg, ctx, d));
    const LesionField& lf = dirs.back().lesions;
    for (int z = 0; z < ctx.phantom.dims()[2]; ++z) {
      bool has_lesion = false;
      for (int y = 0; y < lf.fraction.dims[1] && !has_lesion; ++y)
        for (int x = 0; x < lf.fraction.dims[0] && !has_lesion; ++x)
          if (lf.fraction.at(x, y, z) > 0.0f) has_lesion = true;
      if (has_lesion) slices.emplace_back(d, z);
    }
  }
  if (slices.size() < 2)
    throw ConfigError("not enough lesion-bearing slices to split into train and validation sets");

  // validation split: deterministic for the configured seed, shared across
  // methods so their floors and losses are comparable
  RandomStream split_rng(cfg.training.seed ^ 0x5b1137ULL);
  std::vector<std::size_t> order(slices.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1)]);
  const std::size_t n_val = std::min<std::size_t>(cfg.n_val_slices, slices.size() - 1);

  const auto make_pair = [&](const std::pair<int, int>& slice_id) {
    const auto& [d, z] = slice_id;
    const Volume in_full = slice_extract(dirs[d].rep0, Axis::Z, z);
    const Volume tg_full = slice_extract(dirs[d].rep1, Axis::Z, z);
    Volume input({in_full.dims[0], in_full.dims[1], 1}, static_cast<int>(input_bvalues.size()));
    input.voxel_size = in_full.voxel_size;
    for (std::size_t i = 0; i < input_bvalues.size(); ++i) {
      const int c = denoise::find_bvalue_channel(in_full, input_bvalues[i]);
      std::copy(in_full.channel_ptr(c), in_full.channel_ptr(c) + in_full.voxels_per_channel(),
                input.channel_ptr(static_cast<int>(i)));
    }
    const Volume tgt = single_channel(tg_full, denoise::find_bvalue_channel(tg_full, target));
    return std::make_pair(input, tgt);
  };

  std::vector<std::pair<Volume, Volume>> val_pairs, train_pairs, floor_pairs;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& slice_id = slices[order[i]];
    if (i < n_val) {
      val_pairs.push_back(make_pair(slice_id));
      const auto& [d, z] = slice_id;
      const Volume r0 = slice_extract(dirs[d].rep0, Axis::Z, z);
      const Volume r1 = slice_extract(dirs[d].rep1, Axis::Z, z);
      floor_pairs.emplace_back(single_channel(r0, denoise::find_bvalue_channel(r0, target)),
                               single_channel(r1, denoise::find_bvalue_channel(r1, target)));
    } else {
      train_pairs.push_back(make_pair(slice_id));
    }
  }

  MethodDataset ds;
  ds.train_set = nn::extract_patches(train_pairs, cfg.training.patch_size, cfg.resolved_stride());
  ds.val_set = nn::extract_patches(val_pairs, cfg.training.patch_size, cfg.resolved_stride());

  // floor over the same patch grid as the validation loss: the repetition
  // pair of the target channel
  const nn::PatchDataset floor_patches =
      nn::extract_patches(floor_pairs, cfg.training.patch_size, cfg.resolved_stride());
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < floor_patches.inputs.size(); ++i) {
    const double d = floor_patches.inputs[i] - floor_patches.targets[i];
    sum += d;
    sum2 += d * d;
  }
  const double n = static_cast<double>(floor_patches.inputs.size());
  const double mean = sum / n;
  ds.floor_mse = std::max(0.0, sum2 / n - mean * mean) / 2.0;
  return ds;
}

// --- stages -------------------------------------------------------------------

void write_simulation_stage(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                            const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "sim");
  save_phantom(ctx.phantom, (fs::path(out_dir) / "phantom").string());

  std::ostringstream dir_tsv;
  dir_tsv << "index\tgx\tgy\tgz\trole\n";
  char buf[160];
  for (std::size_t i = 0; i < ctx.protocol.directions.size(); ++i) {
    const Direction& g = ctx.protocol.directions[i];
    std::snprintf(buf, sizeof(buf), "%zu\t%.17g\t%.17g\t%.17g\t%s\n", i, g[0], g[1], g[2],
                  i + 1 == ctx.protocol.directions.size() ? "test" : "train");
    dir_tsv << buf;
  }
  write_text_file((fs::path(out_dir) / "sim" / "directions.tsv").string(), dir_tsv.str());

  for (int d = 0; d < cfg.n_train_directions; ++d) {
    const DirectionData data = simulate_direction(cfg, ctx, d);
    const fs::path base = fs::path(out_dir) / "sim" / ("dir" + std::to_string(d));
    fs::create_directories(base);
    save_lesion_field(data.lesions, (base / "lesions").string());
    save_volume(data.clean, (base / "clean").string());
    save_volume(data.rep0, (base / "rep0").string());
    save_volume(data.rep1, (base / "rep1").string());
  }
}

std::vector<TrainingSummaryRow> run_training(const ExperimentConfig& cfg,
                                             const ExperimentContext& ctx,
                                             const std::string& out_dir,
                                             std::optional<denoise::Method> only) {
  fs::create_directories(fs::path(out_dir) / "checkpoints");
  std::vector<TrainingSummaryRow> rows;

  for (denoise::Method m : cfg.methods) {
    if (only && m != *only) continue;
    const std::vector<double> inputs = method_input_bvalues(cfg, m);
    const MethodDataset ds = build_method_dataset(cfg, ctx, inputs);

    const nn::NetworkMode mode =
        m == denoise::Method::CNNe ? nn::NetworkMode::Direct : nn::NetworkMode::Residual;
    nn::Network net(inputs, ctx.target_bvalue, mode, cfg.training.seed);
    nn::TrainingConfig tc = cfg.training;
    tc.min_delta_abs = 2.0 * ds.floor_mse; // the before-training MSE of the repetition pair
    const nn::TrainResult tr = nn::train(net, ds.train_set, ds.val_set, tc);

    const fs::path base = fs::path(out_dir) / "checkpoints";
    nn::save_network(net, (base / (denoise::method_name(m) + ".net")).string());
    nn::write_loss_curves((base / (denoise::method_name(m) + "_curves.tsv")).string(), tr);
    rows.push_back({m, tr.best_val_loss, ds.floor_mse, static_cast<int>(tr.val_loss.size())});
  }

  if (!only) {
    std::ostringstream tsv;
    tsv << "method\tbest_val_mse\tfloor_mse\tepochs\n";
    char buf[160];
    for (const TrainingSummaryRow& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s\t%.10g\t%.10g\t%d\n", denoise::method_name(r.method).c_str(),
                    r.best_val_mse, r.floor_mse, r.epochs);
      tsv << buf;
    }
    write_text_file((fs::path(out_dir) / "checkpoints" / "training_summary.tsv").string(), tsv.str());
  }
  return rows;
}

namespace {

std::map<std::string, TrainingSummaryRow> read_training_summary(const std::string& out_dir) {
  const fs::path path = fs::path(out_dir) / "checkpoints" / "training_summary.tsv";
  if (!fs::exists(path))
    throw ConfigError("missing " + path.string() + "; run the training stage first");
  std::istringstream in(read_text_file(path.string()));
  std::string line;
  std::getline(in, line);
  std::map<std::string, TrainingSummaryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string name;
    TrainingSummaryRow r;
    row >> name >> r.best_val_mse >> r.floor_mse >> r.epochs;
    if (!row) throw IoError("malformed training summary row: " + line);
    r.method = denoise::method_from_string(name);
    rows[name] = r;
  }
  return rows;
}

} // namespace

void run_evaluation(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                    const std::string& out_dir) {
  const fs::path eval_dir = fs::path(out_dir) / "eval";
  fs::create_directories(eval_dir);
  const auto training_summary = read_training_summary(out_dir);

  const int test_dir = cfg.n_train_directions;
  const auto dims = ctx.phantom.dims();
  const int zc = cfg.test_slice < 0 ? dims[2] / 2 : cfg.test_slice;
  const double target = ctx.target_bvalue;

  // fixed method order (also the attribution tie-break order)
  std::vector<denoise::Method> methods;
  for (denoise::Method m : {denoise::Method::MBD, denoise::Method::N2N, denoise::Method::CNNe})
    if (std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end())
      methods.push_back(m);
  methods.push_back(denoise::Method::MPPCA);
  methods.push_back(denoise::Method::ALGe);

  // loaded NN checkpoints
  std::map<int, nn::Network> nets;
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    const denoise::Method m = methods[mi];
    if (m == denoise::Method::MPPCA || m == denoise::Method::ALGe) continue;
    const fs::path ckpt = fs::path(out_dir) / "checkpoints" / (denoise::method_name(m) + ".net");
    if (!fs::exists(ckpt))
      throw ConfigError("missing checkpoint " + ckpt.string() + "; run the training stage first");
    nets.emplace(static_cast<int>(mi), nn::load_network(ckpt.string()));
  }

  // test lesions: fixed shapes and locations in the test slice, parameters
  // re-randomized per instance
  LesionField test_field = insert_lesions(ctx.phantom, ctx.test_shapes, cfg.lesion_count_range,
                                          cfg.eval_seed ^ 0x7e57ULL, std::array<int, 2>{zc, zc});
  const Mask test_slice_fraction = [&] {
    Mask m({dims[0], dims[1], 1});
    const std::size_t plane = static_cast<std::size_t>(dims[0]) * dims[1];
    std::copy(test_field.fraction.data.begin() + static_cast<std::size_t>(zc) * plane,
              test_field.fraction.data.begin() + static_cast<std::size_t>(zc + 1) * plane,
              m.data.begin());
    return m;
  }();
  const std::vector<std::size_t> pure_voxels = eval::pure_lesion_voxels(test_slice_fraction);
  if (pure_voxels.empty())
    throw NumericError("test lesion field produced no pure-lesion voxels");

  const int b_target_idx = [&] {
    for (std::size_t i = 0; i < cfg.bvalues.size(); ++i)
      if (std::abs(cfg.bvalues[i] - target) <= 1e-9) return static_cast<int>(i);
    throw ConfigError("target b-value not in protocol");
  }();

  RandomStream param_rng(cfg.eval_seed);
  std::vector<std::vector<double>> errors_raw(methods.size());
  std::vector<std::vector<double>> errors_norm(methods.size());
  std::vector<eval::AttributionRecord> records;
  const std::size_t plane = static_cast<std::size_t>(dims[0]) * dims[1];
  std::vector<std::vector<double>> err_map_acc(methods.size(), std::vector<double>(plane, 0.0));
  std::vector<LesionParams> paramsets;

  const auto denoise_instance = [&](const Volume& noisy_full, std::size_t mi) {
    const denoise::Method m = methods[mi];
    if (m == denoise::Method::MPPCA) {
      const Volume slab = extract_zrange(noisy_full, zc - 2, zc + 2);
      const Volume den = denoise::mppca_denoise(slab, 2, cfg.threads);
      return single_channel(slice_extract(den, Axis::Z, 2),
                            denoise::find_bvalue_channel(den, target));
    }
    const Volume center = slice_extract(noisy_full, Axis::Z, zc);
    if (m == denoise::Method::ALGe) {
      denoise::MethodConfig mc;
      mc.method = denoise::Method::ALGe;
      mc.target_bvalue = target;
      mc.alge_pair = {cfg.bvalues[0], cfg.bvalues[1]};
      return denoise::denoise(mc, center, cfg.threads);
    }
    return denoise::denoise_with_network(nets.at(static_cast<int>(mi)), center, cfg.threads);
  };

  for (int ps = 0; ps < cfg.n_paramsets; ++ps) {
    const LesionParams params = sample_lesion_params(param_rng);
    paramsets.push_back(params);
    test_field.set_all_params(params);

    const Volume clean = simulate_clean(ctx.phantom, &test_field, ctx.protocol, test_dir, cfg.threads);
    const Volume noisy = add_rician_noise(clean, ctx.sigma,
                                          cfg.noise_seed ^ (0xE0A1ULL + static_cast<std::uint64_t>(ps)),
                                          cfg.threads);
    const Volume clean_center = slice_extract(clean, Axis::Z, zc);
    const Volume clean_target = single_channel(clean_center, b_target_idx);

    eval::AttributionRecord rec;
    rec.paramset_id = ps;
    rec.params = params;
    double acc[3] = {0.0, 0.0, 0.0};
    for (std::size_t v : pure_voxels)
      for (int bi = 0; bi < std::min(3, static_cast<int>(cfg.bvalues.size())); ++bi)
        acc[bi] += clean_center.data[static_cast<std::size_t>(bi) * plane + v];
    rec.b0_intensity = acc[0] / pure_voxels.size();
    rec.b1_intensity = acc[1] / pure_voxels.size();
    rec.b2_intensity = acc[2] / pure_voxels.size();

    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const Volume den = denoise_instance(noisy, mi);
      double abs_acc = 0.0;
      for (std::size_t v : pure_voxels) {
        const double e = static_cast<double>(den.data[v]) - clean_target.data[v];
        errors_raw[mi].push_back(e);
        errors_norm[mi].push_back(e / ctx.sigma);
        abs_acc += std::abs(e);
      }
      rec.mae.push_back(abs_acc / pure_voxels.size());
      for (std::size_t v = 0; v < plane; ++v)
        err_map_acc[mi][v] += std::abs(static_cast<double>(den.data[v]) - clean_target.data[v]);
    }
    records.push_back(std::move(rec));
  }

  const eval::AttributionSummary attribution = eval::best_method_attribution(methods, records);
  eval::write_attribution_tsv((eval_dir / "attribution.tsv").string(), attribution);

  // histograms over pure-lesion voxels, paper protocol (raw intensity units)
  std::vector<eval::LesionErrorReport> raw_reports, norm_reports;
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    raw_reports.push_back(eval::lesion_error_histograms(errors_raw[mi]));
    norm_reports.push_back(eval::lesion_error_histograms(errors_norm[mi]));
  }

  const auto write_hists = [&](const std::string& name, bool absolute) {
    std::ostringstream out;
    out << "method\tbin_left\tcount\n";
    char buf[128];
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const eval::Histogram& h =
          absolute ? raw_reports[mi].abs_hist : raw_reports[mi].signed_hist;
      for (const auto& [bin, count] : h.counts) {
        std::snprintf(buf, sizeof(buf), "%s\t%.10g\t%zu\n",
                      denoise::method_name(methods[mi]).c_str(), bin * h.bin_width, count);
        out << buf;
      }
    }
    write_text_file((eval_dir / name).string(), out.str());
  };
  write_hists("hist_mean.tsv", false);
  write_hists("hist_abs.tsv", true);

  // error maps (mean absolute error across instances) and MBD-vs-others
  // difference maps
  std::vector<Volume> mean_maps;
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    Volume map({dims[0], dims[1], 1}, 1);
    for (std::size_t v = 0; v < plane; ++v)
      map.data[v] = static_cast<float>(err_map_acc[mi][v] / cfg.n_paramsets);
    mean_maps.push_back(map);
    const std::string name = "error_map_" + denoise::method_name(methods[mi]);
    save_volume(map, (eval_dir / name).string());
    write_slice_png_gray((eval_dir / (name + ".png")).string(), map);

    Volume masked = map;
    for (std::size_t v = 0; v < plane; ++v)
      if (test_slice_fraction.data[v] <= 0.0f) masked.data[v] = 0.0f;
    write_slice_png_gray((eval_dir / (name + "_lesion.png")).string(), masked);
  }
  for (std::size_t mi = 1; mi < methods.size(); ++mi) {
    const Volume diff = eval::error_difference_map(mean_maps[0], mean_maps[mi]);
    const std::string name =
        "error_diff_" + denoise::method_name(methods[0]) + "_vs_" + denoise::method_name(methods[mi]);
    save_volume(diff, (eval_dir / name).string());
    write_slice_png_diverging((eval_dir / (name + ".png")).string(), diff);
  }

  // lesion conspicuity: paramset 0 against the lesion-free twin under the
  // same noise seed
  {
    test_field.set_all_params(paramsets.front());
    const Volume clean_les = simulate_clean(ctx.phantom, &test_field, ctx.protocol, test_dir, cfg.threads);
    const Volume clean_free = simulate_clean(ctx.phantom, nullptr, ctx.protocol, test_dir, cfg.threads);
    const Volume noisy_les = add_rician_noise(clean_les, ctx.sigma, cfg.noise_seed ^ 0xE0A1ULL, cfg.threads);
    const Volume noisy_free = add_rician_noise(clean_free, ctx.sigma, cfg.noise_seed ^ 0xE0A1ULL, cfg.threads);
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const Volume den_les = denoise_instance(noisy_les, mi);
      const Volume den_free = denoise_instance(noisy_free, mi);
      const Volume diff = eval::lesion_conspicuity_diff(den_les, den_free);
      const std::string name = "conspicuity_" + denoise::method_name(methods[mi]);
      save_volume(diff, (eval_dir / name).string());
      write_slice_png_diverging((eval_dir / (name + ".png")).string(), diff);
    }
    const Volume noisy_center = slice_extract(noisy_les, Axis::Z, zc);
    for (std::size_t bi = 0; bi < cfg.bvalues.size(); ++bi) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "noisy_b%.10g.png", cfg.bvalues[bi]);
      write_slice_png_gray((eval_dir / buf).string(), single_channel(noisy_center, static_cast<int>(bi)));
    }
    write_slice_png_gray((eval_dir / "clean_target.png").string(),
                         single_channel(slice_extract(clean_les, Axis::Z, zc), b_target_idx));
  }

  // metrics table
  {
    std::ostringstream out;
    out << "method\tval_mse\tfloor_mse\ttest_mae_lesion\tmean_err\tstd_err\tfrac_abs_lt_sigma\twin_pct\n";
    char buf[256];
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const std::string name = denoise::method_name(methods[mi]);
      double mae_mean = 0.0;
      for (const eval::AttributionRecord& r : attribution.records) mae_mean += r.mae[mi];
      mae_mean /= attribution.records.size();

      const auto it = training_summary.find(name);
      std::string val = "-", floor = "-";
      if (it != training_summary.end()) {
        std::snprintf(buf, sizeof(buf), "%.10g", it->second.best_val_mse);
        val = buf;
        std::snprintf(buf, sizeof(buf), "%.10g", it->second.floor_mse);
        floor = buf;
      }
      std::snprintf(buf, sizeof(buf), "%s\t%s\t%s\t%.10g\t%.10g\t%.10g\t%.10g\t%.10g\n",
                    name.c_str(), val.c_str(), floor.c_str(), mae_mean, raw_reports[mi].mean,
                    raw_reports[mi].stddev, norm_reports[mi].fraction_abs_in_unit,
                    attribution.win_percent[mi]);
      out << buf;
    }
    write_text_file((eval_dir / "metrics.tsv").string(), out.str());
  }
}

denoise::SweepResult run_sweep(const ExperimentConfig& cfg, const ExperimentContext& ctx,
                               const std::string& out_dir) {
  if (cfg.bvalues.size() != 3)
    throw ConfigError("protocol.bvalues: the input-configuration sweep needs exactly three b-values");

  denoise::SweepConfig sc;
  sc.bvalues = cfg.bvalues;
  sc.target_bvalue = ctx.target_bvalue;
  sc.repeats = cfg.sweep_repeats;
  sc.training = cfg.training;

  const denoise::DatasetBuilder builder = [&](const std::vector<double>& inputs, double,
                                              nn::PatchDataset& train_out, nn::PatchDataset& val_out) {
    MethodDataset ds = build_method_dataset(cfg, ctx, inputs);
    train_out = std::move(ds.train_set);
    val_out = std::move(ds.val_set);
  };

  const denoise::SweepResult result = denoise::input_configuration_sweep(builder, sc);
  fs::create_directories(fs::path(out_dir) / "eval");
  denoise::write_sweep_curves((fs::path(out_dir) / "eval" / "sweep.tsv").string(), result);
  return result;
}

void run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir) {
  const ExperimentContext ctx = build_context(cfg);
  fs::create_directories(out_dir);

  write_simulation_stage(cfg, ctx, out_dir);
  run_training(cfg, ctx, out_dir);
  run_evaluation(cfg, ctx, out_dir);

  // manifest last: config hash, seeds, and every artifact in the tree
  std::ostringstream manifest;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(cfg.to_kv().hash()));
  manifest << "config_hash = " << buf << "\n";
  manifest << "seeds = phantom:" << cfg.phantom_seed << " directions:" << cfg.direction_seed
           << " noise:" << cfg.noise_seed << " shapes:" << cfg.shape_seed
           << " lesions:" << cfg.lesion_seed << " training:" << cfg.training.seed
           << " eval:" << cfg.eval_seed << "\n";
  manifest << "files:\n";
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(out_dir))
    if (entry.is_regular_file() && entry.path().filename() != "manifest.txt")
      files.push_back(fs::relative(entry.path(), out_dir).generic_string());
  std::sort(files.begin(), files.end());
  for (const std::string& f : files) manifest << "  " << f << "\n";
  write_text_file((fs::path(out_dir) / "manifest.txt").string(), manifest.str());
}

} // namespace mbd::pipeline
