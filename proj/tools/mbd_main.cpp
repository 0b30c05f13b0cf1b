// mbd: synthetic multi-b-value DWI denoising experiments.
//
// Subcommands wrap the library stages: phantom-gen, simulate, lesions,
// train, denoise, evaluate, sweep, run. Exit codes: 0 success, 2 config
// error, 3 numeric/runtime failure. MBD_OUTPUT_ROOT prefixes relative
// output paths.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "mbd/denoise.hpp"
#include "mbd/errors.hpp"
#include "mbd/eval.hpp"
#include "mbd/nn.hpp"
#include "mbd/phantom.hpp"
#include "mbd/pipeline.hpp"
#include "mbd/simulate.hpp"
#include "mbd/volume.hpp"

namespace fs = std::filesystem;
using namespace mbd;

namespace {

std::string resolve_out(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  const char* root = std::getenv("MBD_OUTPUT_ROOT");
  if (!root || !*root) return path;
  return (fs::path(root) / path).string();
}

pipeline::ExperimentConfig load_config(const std::string& path, std::uint64_t seed_override,
                                       bool has_seed, int threads) {
  pipeline::ExperimentConfig cfg = pipeline::ExperimentConfig::from_file(path);
  if (has_seed) {
    cfg.training.seed = seed_override;
    cfg.noise_seed = seed_override + 1;
    cfg.lesion_seed = seed_override + 2;
    cfg.eval_seed = seed_override + 3;
  }
  cfg.threads = threads;
  cfg.training.threads = threads;
  cfg.validate();
  return cfg;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic multi-b-value DWI denoising toolkit"};
  app.require_subcommand(1);

  int threads = 1;
  app.add_option("--threads", threads, "Worker threads (1 = fully serial)")->capture_default_str();
  

  // phantom-gen
  auto* cmd_phantom = app.add_subcommand("phantom-gen", "Generate a procedural phantom")->fallthrough();
  std::vector<int> pg_dims{48, 48, 48};
  std::uint64_t pg_seed = 1;
  std::string pg_out;
  cmd_phantom->add_option("--dims", pg_dims, "Voxel counts nx ny nz")->expected(3);
  cmd_phantom->add_option("--seed", pg_seed, "Generator seed");
  cmd_phantom->add_option("--out", pg_out, "Output phantom directory")->required();

  // simulate
  auto* cmd_sim = app.add_subcommand("simulate", "Synthesize clean + noisy multi-b-value volumes")->fallthrough();
  std::string sim_phantom, sim_out, sim_lesions;
  std::vector<double> sim_bvalues{0, 1000, 4000};
  double sim_sigma = -1.0, sim_sigma_frac = 0.07;
  int sim_ndirs = 3, sim_dir_index = 0, sim_reps = 2;
  std::uint64_t sim_seed = 17, sim_dir_seed = 5;
  cmd_sim->add_option("--phantom", sim_phantom, "Phantom directory")->required();
  cmd_sim->add_option("--out", sim_out, "Output directory")->required();
  cmd_sim->add_option("--bvalues", sim_bvalues, "b-values in s/mm^2");
  cmd_sim->add_option("--sigma", sim_sigma, "Absolute noise std");
  cmd_sim->add_option("--sigma-frac", sim_sigma_frac,
                      "Noise std as a fraction of clean WM b=0 intensity");
  cmd_sim->add_option("--directions", sim_ndirs, "Number of encoding directions to generate");
  cmd_sim->add_option("--direction-index", sim_dir_index, "Which direction to simulate");
  cmd_sim->add_option("--direction-seed", sim_dir_seed, "Direction generator seed");
  cmd_sim->add_option("--repetitions", sim_reps, "Noisy repetitions");
  cmd_sim->add_option("--seed", sim_seed, "Noise seed");
  cmd_sim->add_option("--lesions", sim_lesions, "Lesion field base path (optional)");

  // lesions
  auto* cmd_les = app.add_subcommand("lesions", "Generate shapes and insert lesions into WM")->fallthrough();
  std::string les_phantom, les_out;
  int les_shapes = 12, les_slice = -1;
  std::vector<int> les_count{4, 10}, les_size{4, 9};
  std::uint64_t les_seed = 23, les_shape_seed = 7;
  cmd_les->add_option("--phantom", les_phantom, "Phantom directory")->required();
  cmd_les->add_option("--out", les_out, "Output lesion field base path")->required();
  cmd_les->add_option("--shapes", les_shapes, "Shape pool size");
  cmd_les->add_option("--shape-seed", les_shape_seed, "Shape generator seed");
  cmd_les->add_option("--count-range", les_count, "Lesions per slice, lo hi")->expected(2);
  cmd_les->add_option("--size-range", les_size, "Shape bounding box sides, lo hi")->expected(2);
  cmd_les->add_option("--seed", les_seed, "Placement seed");
  cmd_les->add_option("--slice", les_slice, "Restrict insertion to one z slice (-1 = all)");

  // train
  auto* cmd_train = app.add_subcommand("train", "Train denoiser networks from an experiment config")->fallthrough();
  std::string train_cfg, train_out, train_method;
  std::uint64_t train_seed = 0;
  bool train_has_seed = false;
  cmd_train->add_option("--config", train_cfg, "Experiment config file")->required();
  cmd_train->add_option("--out", train_out, "Experiment output directory")->required();
  cmd_train->add_option("--method", train_method, "Train only this method (MBD|N2N|CNNe)");
  cmd_train->add_option("--seed", train_seed, "Override the experiment seeds")
      ->each([&](const std::string&) { train_has_seed = true; });

  // denoise
  auto* cmd_den = app.add_subcommand("denoise", "Denoise one multi-b-value volume")->fallthrough();
  std::string den_method, den_input, den_output, den_checkpoint;
  std::vector<double> den_inputs;
  double den_target = 0.0;
  int den_patch_radius = 2;
  cmd_den->add_option("--method", den_method, "MBD|N2N|CNNe|ALGe|MPPCA")->required();
  cmd_den->add_option("--input", den_input, "Input volume base path")->required();
  cmd_den->add_option("--output", den_output, "Output volume base path")->required();
  cmd_den->add_option("--inputs", den_inputs, "Input b-values (e.g. 0 1000 4000)");
  cmd_den->add_option("--target", den_target, "Target b-value")->required();
  cmd_den->add_option("--checkpoint", den_checkpoint, "Network checkpoint (NN methods)");
  cmd_den->add_option("--patch-radius", den_patch_radius, "MPPCA patch radius");

  // evaluate
  auto* cmd_eval = app.add_subcommand("evaluate", "Run the lesion evaluation protocol")->fallthrough();
  std::string eval_cfg, eval_out;
  std::uint64_t eval_seed = 0;
  bool eval_has_seed = false;
  cmd_eval->add_option("--config", eval_cfg, "Experiment config file")->required();
  cmd_eval->add_option("--out", eval_out, "Experiment output directory")->required();
  cmd_eval->add_option("--seed", eval_seed, "Override the experiment seeds")
      ->each([&](const std::string&) { eval_has_seed = true; });

  // sweep
  auto* cmd_sweep = app.add_subcommand("sweep", "Input-configuration sweep for one target b-value")->fallthrough();
  std::string sweep_cfg, sweep_out, sweep_target = "max";
  std::uint64_t sweep_seed = 0;
  bool sweep_has_seed = false;
  cmd_sweep->add_option("--config", sweep_cfg, "Experiment config file")->required();
  cmd_sweep->add_option("--out", sweep_out, "Experiment output directory")->required();
  cmd_sweep->add_option("--target-b", sweep_target, "Target b-value or `max`");
  cmd_sweep->add_option("--seed", sweep_seed, "Override the experiment seeds")
      ->each([&](const std::string&) { sweep_has_seed = true; });

  // run
  auto* cmd_run = app.add_subcommand("run", "Full pipeline: simulate, train, denoise, evaluate")->fallthrough();
  std::string run_cfg, run_out;
  std::uint64_t run_seed = 0;
  bool run_has_seed = false;
  cmd_run->add_option("--config", run_cfg, "Experiment config file")->required();
  cmd_run->add_option("--out", run_out, "Experiment output directory")->required();
  cmd_run->add_option("--seed", run_seed, "Override the experiment seeds")
      ->each([&](const std::string&) { run_has_seed = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_phantom) {
      const Phantom p = generate_procedural_phantom({pg_dims[0], pg_dims[1], pg_dims[2]}, pg_seed);
      save_phantom(p, resolve_out(pg_out));
      std::cout << "phantom written to " << resolve_out(pg_out) << "\n";
    } else if (*cmd_sim) {
      const Phantom phantom = load_phantom(sim_phantom);
      AcquisitionProtocol proto;
      proto.bvalues = sim_bvalues;
      proto.directions = generate_directions(sim_ndirs, sim_dir_seed);
      proto.repetitions = sim_reps;
      proto.sigma = sim_sigma >= 0
                        ? sim_sigma
                        : sim_sigma_frac * steady_state_factor(phantom.params.wm, proto);
      proto.validate();

      std::optional<LesionField> lesions;
      if (!sim_lesions.empty()) lesions = load_lesion_field(sim_lesions);

      const std::string out = resolve_out(sim_out);
      fs::create_directories(out);
      const Volume clean = simulate_clean(phantom, lesions ? &*lesions : nullptr, proto,
                                          sim_dir_index, threads);
      save_volume(clean, (fs::path(out) / "clean").string());
      for (int rep = 0; rep < sim_reps; ++rep) {
        const Volume noisy = add_rician_noise(clean, proto.sigma, sim_seed + rep, threads);
        save_volume(noisy, (fs::path(out) / ("rep" + std::to_string(rep))).string());
      }
      std::cout << "simulated direction " << sim_dir_index << " at sigma " << proto.sigma
                << " into " << out << "\n";
    } else if (*cmd_les) {
      const Phantom phantom = load_phantom(les_phantom);
      const auto shapes = generate_lesion_shapes(les_shapes, {les_size[0], les_size[1]},
                                                 {1.0, 3.0}, les_shape_seed);
      std::optional<std::array<int, 2>> slice_range;
      if (les_slice >= 0) slice_range = std::array<int, 2>{les_slice, les_slice};
      const LesionField field = insert_lesions(phantom, shapes, {les_count[0], les_count[1]},
                                               les_seed, slice_range);
      save_lesion_field(field, resolve_out(les_out));
      std::cout << "placed " << field.lesions.size() << " lesions\n";
    } else if (*cmd_train) {
      const auto cfg = load_config(train_cfg, train_seed, train_has_seed, threads);
      const auto ctx = pipeline::build_context(cfg);
      std::optional<denoise::Method> only;
      if (!train_method.empty()) only = denoise::method_from_string(train_method);
      const auto rows = pipeline::run_training(cfg, ctx, resolve_out(train_out), only);
      for (const auto& r : rows)
        std::cout << denoise::method_name(r.method) << ": best val MSE " << r.best_val_mse
                  << " (floor " << r.floor_mse << ", " << r.epochs << " epochs)\n";
    } else if (*cmd_den) {
      denoise::MethodConfig mc;
      mc.method = denoise::method_from_string(den_method);
      mc.input_bvalues = den_inputs;
      mc.target_bvalue = den_target;
      mc.checkpoint = den_checkpoint;
      mc.patch_radius = den_patch_radius;
      if (mc.method == denoise::Method::ALGe) {
        if (den_inputs.size() != 2)
          throw ConfigError("ALGe needs exactly two --inputs b-values");
        mc.alge_pair = {den_inputs[0], den_inputs[1]};
      }
      const Volume dwi = load_volume(den_input);
      const Volume out = denoise::denoise(mc, dwi, threads);
      save_volume(out, resolve_out(den_output));
      std::cout << "denoised with " << den_method << " -> " << resolve_out(den_output) << "\n";
    } else if (*cmd_eval) {
      const auto cfg = load_config(eval_cfg, eval_seed, eval_has_seed, threads);
      const auto ctx = pipeline::build_context(cfg);
      pipeline::run_evaluation(cfg, ctx, resolve_out(eval_out));
      std::cout << "evaluation written to " << resolve_out(eval_out) << "/eval\n";
    } else if (*cmd_sweep) {
      auto cfg = load_config(sweep_cfg, sweep_seed, sweep_has_seed, threads);
      if (sweep_target != "max") cfg.target_bvalue = std::stod(sweep_target);
      const auto ctx = pipeline::build_context(cfg);
      const auto result = pipeline::run_sweep(cfg, ctx, resolve_out(sweep_out));
      std::cout << "sweep ranking (best first):";
      for (int idx : result.ranking) {
        std::cout << " [";
        const auto& in = result.curves[idx].input_bvalues;
        for (std::size_t i = 0; i < in.size(); ++i) std::cout << (i ? "," : "") << in[i];
        std::cout << "]";
      }
      std::cout << "\n";
    } else if (*cmd_run) {
      const auto cfg = load_config(run_cfg, run_seed, run_has_seed, threads);
      pipeline::run_pipeline(cfg, resolve_out(run_out));
      std::cout << "experiment written to " << resolve_out(run_out) << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
