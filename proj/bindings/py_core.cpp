// Python bindings for the main operations: phantom generation, DWI
// simulation, lesion insertion, network training/inference, the reference
// denoisers and the evaluation helpers. Volumes cross the boundary as
// numpy float32 arrays with shape (channels, nz, ny, nx).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mbd/denoise.hpp"
#include "mbd/errors.hpp"
#include "mbd/eval.hpp"
#include "mbd/nn.hpp"
#include "mbd/phantom.hpp"
#include "mbd/pipeline.hpp"
#include "mbd/simulate.hpp"
#include "mbd/volume.hpp"

namespace py = pybind11;
using namespace mbd;

namespace {

py::array_t<float> volume_to_array(const Volume& v) {
  py::array_t<float> out({v.channels, v.dims[2], v.dims[1], v.dims[0]});
  std::copy(v.data.begin(), v.data.end(), out.mutable_data());
  return out;
}

Volume array_to_volume(py::array_t<float, py::array::c_style | py::array::forcecast> arr,
                       std::vector<std::string> labels = {},
                       std::array<double, 3> voxel_size = {1.0, 1.0, 1.0}) {
  if (arr.ndim() != 4)
    throw py::value_error("expected a (channels, nz, ny, nx) float array");
  Volume v({static_cast<int>(arr.shape(3)), static_cast<int>(arr.shape(2)),
            static_cast<int>(arr.shape(1))},
           static_cast<int>(arr.shape(0)));
  v.voxel_size = voxel_size;
  v.labels = std::move(labels);
  std::copy(arr.data(), arr.data() + arr.size(), v.data.begin());
  v.validate();
  return v;
}

py::array_t<float> mask_to_array(const Mask& m) {
  py::array_t<float> out({m.dims[2], m.dims[1], m.dims[0]});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

std::vector<std::string> bvalue_labels(const std::vector<double>& bvalues) {
  std::vector<std::string> labels;
  char buf[48];
  for (double b : bvalues) {
    std::snprintf(buf, sizeof(buf), "b=%.10g", b);
    labels.emplace_back(buf);
  }
  return labels;
}

nn::PatchDataset dataset_from_arrays(
    py::array_t<double, py::array::c_style | py::array::forcecast> inputs,
    py::array_t<double, py::array::c_style | py::array::forcecast> targets) {
  if (inputs.ndim() != 4 || targets.ndim() != 4)
    throw py::value_error("expected (n, c, h, w) arrays");
  if (inputs.shape(0) != targets.shape(0) || targets.shape(1) != 1 ||
      inputs.shape(2) != targets.shape(2) || inputs.shape(3) != targets.shape(3))
    throw py::value_error("input/target shapes disagree");
  nn::PatchDataset ds;
  ds.in_channels = static_cast<int>(inputs.shape(1));
  ds.height = static_cast<int>(inputs.shape(2));
  ds.width = static_cast<int>(inputs.shape(3));
  ds.inputs.assign(inputs.data(), inputs.data() + inputs.size());
  ds.targets.assign(targets.data(), targets.data() + targets.size());
  return ds;
}

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Synthetic multi-b-value DWI denoising toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);

  // --- volume IO ---------------------------------------------------------
  m.def(
      "save_volume",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> data,
         const std::string& path, std::vector<std::string> labels,
         std::array<double, 3> voxel_size) {
        save_volume(array_to_volume(data, std::move(labels), voxel_size), path);
      },
      py::arg("data"), py::arg("path"), py::arg("labels") = std::vector<std::string>{},
      py::arg("voxel_size") = std::array<double, 3>{1.0, 1.0, 1.0});
  m.def("load_volume", [](const std::string& path) {
    const Volume v = load_volume(path);
    return py::make_tuple(volume_to_array(v), v.labels, v.voxel_size);
  });

  // --- phantom -----------------------------------------------------------
  py::class_<Phantom>(m, "Phantom")
      .def_property_readonly("dims", [](const Phantom& p) { return p.dims(); })
      .def_property_readonly("csf", [](const Phantom& p) { return mask_to_array(p.csf); })
      .def_property_readonly("gm", [](const Phantom& p) { return mask_to_array(p.gm); })
      .def_property_readonly("wm", [](const Phantom& p) { return mask_to_array(p.wm); })
      .def_property_readonly("wm_binary",
                             [](const Phantom& p) { return mask_to_array(p.wm_binary); })
      .def_property_readonly("tensor", [](const Phantom& p) { return volume_to_array(p.tensor); })
      .def("save", &save_phantom, py::arg("dir"));
  m.def(
      "generate_procedural_phantom",
      [](std::array<int, 3> dims, std::uint64_t seed) {
        return generate_procedural_phantom(dims, seed);
      },
      py::arg("dims"), py::arg("seed"));
  m.def("load_phantom", &load_phantom, py::arg("dir"));

  // --- protocol / signal model --------------------------------------------
  py::class_<AcquisitionProtocol>(m, "AcquisitionProtocol")
      .def(py::init<>())
      .def_readwrite("k", &AcquisitionProtocol::k)
      .def_readwrite("TR", &AcquisitionProtocol::TR)
      .def_readwrite("TE", &AcquisitionProtocol::TE)
      .def_readwrite("bvalues", &AcquisitionProtocol::bvalues)
      .def_readwrite("directions", &AcquisitionProtocol::directions)
      .def_readwrite("sigma", &AcquisitionProtocol::sigma)
      .def_readwrite("repetitions", &AcquisitionProtocol::repetitions)
      .def("validate", &AcquisitionProtocol::validate);

  py::class_<TissueParams>(m, "TissueParams")
      .def_readwrite("rho", &TissueParams::rho)
      .def_readwrite("T1", &TissueParams::T1)
      .def_readwrite("T2", &TissueParams::T2);
  py::class_<TissueSet>(m, "TissueSet")
      .def(py::init<>())
      .def_readwrite("csf", &TissueSet::csf)
      .def_readwrite("gm", &TissueSet::gm)
      .def_readwrite("wm", &TissueSet::wm);

  m.def("steady_state_factor", &steady_state_factor, py::arg("tissue"), py::arg("protocol"),
        py::arg("dT2") = 0.0);
  m.def(
      "directional_diffusivity",
      [](std::array<double, 6> tensor, std::array<double, 3> g) {
        return directional_diffusivity(tensor, g);
      },
      py::arg("tensor"), py::arg("g"));
  m.def("generate_directions", &generate_directions, py::arg("n"), py::arg("seed"),
        py::arg("iterations") = 300);
  m.def("repulsion_energy", &repulsion_energy);
  m.def("min_antipodal_angle_deg", &min_antipodal_angle_deg);

  // --- lesions -------------------------------------------------------------
  py::class_<LesionParams>(m, "LesionParams")
      .def(py::init<>())
      .def_readwrite("f", &LesionParams::f)
      .def_readwrite("D1", &LesionParams::D1)
      .def_readwrite("D2", &LesionParams::D2)
      .def_readwrite("dT2", &LesionParams::dT2)
      .def_readonly("shape_id", &LesionParams::shape_id)
      .def_readonly("position", &LesionParams::position);
  py::class_<LesionShape>(m, "LesionShape")
      .def_property_readonly("width", [](const LesionShape& s) { return s.width; })
      .def_property_readonly("height", [](const LesionShape& s) { return s.height; })
      .def_property_readonly("area", &LesionShape::area)
      .def("connected", &LesionShape::connected);
  py::class_<LesionField>(m, "LesionField")
      .def_property_readonly("fraction",
                             [](const LesionField& f) { return mask_to_array(f.fraction); })
      .def_property_readonly("lesions", [](const LesionField& f) { return f.lesions; })
      .def("set_all_params", &LesionField::set_all_params);

  m.def("generate_lesion_shapes", &generate_lesion_shapes, py::arg("n"), py::arg("size_range"),
        py::arg("elongation_range"), py::arg("seed"));
  m.def(
      "insert_lesions",
      [](const Phantom& p, const std::vector<LesionShape>& shapes, std::array<int, 2> count_range,
         std::uint64_t seed, std::optional<std::array<int, 2>> slice_range) {
        return insert_lesions(p, shapes, count_range, seed, slice_range);
      },
      py::arg("phantom"), py::arg("shapes"), py::arg("count_range"), py::arg("seed"),
      py::arg("slice_range") = std::nullopt);
  m.def("sample_lesion_params",
        [](std::uint64_t seed) { return sample_lesion_params(seed); });

  // --- synthesis -------------------------------------------------------------
  m.def(
      "simulate_clean",
      [](const Phantom& phantom, std::optional<LesionField> lesions,
         const AcquisitionProtocol& proto, int direction_index, int threads) {
        return volume_to_array(
            simulate_clean(phantom, lesions ? &*lesions : nullptr, proto, direction_index, threads));
      },
      py::arg("phantom"), py::arg("lesions"), py::arg("protocol"), py::arg("direction_index"),
      py::arg("threads") = 1);
  m.def(
      "add_rician_noise",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> clean, double sigma,
         std::uint64_t seed, int threads) {
        return volume_to_array(add_rician_noise(array_to_volume(clean), sigma, seed, threads));
      },
      py::arg("clean"), py::arg("sigma"), py::arg("seed"), py::arg("threads") = 1);

  // --- networks ----------------------------------------------------------------
  py::class_<nn::TrainingConfig> tc(m, "TrainingConfig");
  tc.def(py::init<>())
      .def_readwrite("patch_size", &nn::TrainingConfig::patch_size)
      .def_readwrite("batch_size", &nn::TrainingConfig::batch_size)
      .def_readwrite("learning_rate", &nn::TrainingConfig::learning_rate)
      .def_readwrite("max_epochs", &nn::TrainingConfig::max_epochs)
      .def_readwrite("patience", &nn::TrainingConfig::patience)
      .def_readwrite("seed", &nn::TrainingConfig::seed)
      .def_readwrite("threads", &nn::TrainingConfig::threads);

  py::class_<nn::TrainResult>(m, "TrainResult")
      .def_readonly("train_loss", &nn::TrainResult::train_loss)
      .def_readonly("val_loss", &nn::TrainResult::val_loss)
      .def_readonly("initial_val_loss", &nn::TrainResult::initial_val_loss)
      .def_readonly("best_val_loss", &nn::TrainResult::best_val_loss)
      .def_readonly("best_epoch", &nn::TrainResult::best_epoch)
      .def_readonly("early_stopped", &nn::TrainResult::early_stopped);

  py::class_<nn::Network>(m, "Network")
      .def(py::init([](std::vector<double> inputs, double target, const std::string& mode,
                       std::uint64_t seed) {
             return nn::Network(std::move(inputs), target,
                                mode == "direct" ? nn::NetworkMode::Direct
                                                 : nn::NetworkMode::Residual,
                                seed);
           }),
           py::arg("input_bvalues"), py::arg("target_bvalue"), py::arg("mode") = "residual",
           py::arg("seed") = 0)
      .def_property_readonly("input_bvalues", &nn::Network::input_bvalues)
      .def_property_readonly("target_bvalue", &nn::Network::target_bvalue)
      .def("save", [](const nn::Network& net, const std::string& path) { save_network(net, path); });
  m.def("load_network", &nn::load_network, py::arg("path"));

  m.def(
      "train",
      [](nn::Network& net, py::array_t<double, py::array::c_style | py::array::forcecast> tr_in,
         py::array_t<double, py::array::c_style | py::array::forcecast> tr_tg,
         py::array_t<double, py::array::c_style | py::array::forcecast> va_in,
         py::array_t<double, py::array::c_style | py::array::forcecast> va_tg,
         const nn::TrainingConfig& cfg) {
        return nn::train(net, dataset_from_arrays(tr_in, tr_tg), dataset_from_arrays(va_in, va_tg),
                         cfg);
      },
      py::arg("net"), py::arg("train_inputs"), py::arg("train_targets"), py::arg("val_inputs"),
      py::arg("val_targets"), py::arg("config"));

  m.def(
      "denoise_slice",
      [](nn::Network& net, py::array_t<float, py::array::c_style | py::array::forcecast> slice,
         std::vector<std::string> labels, int threads) {
        return volume_to_array(nn::denoise_slice(net, array_to_volume(slice, std::move(labels)), threads));
      },
      py::arg("net"), py::arg("slice"), py::arg("labels") = std::vector<std::string>{},
      py::arg("threads") = 1);

  // --- reference denoisers ---------------------------------------------------
  m.def(
      "alge_extrapolate",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> s1, double b1,
         py::array_t<float, py::array::c_style | py::array::forcecast> s2, double b2,
         double b_target) {
        const denoise::AlgeResult r =
            denoise::alge_extrapolate(array_to_volume(s1), b1, array_to_volume(s2), b2, b_target);
        return py::make_tuple(volume_to_array(r.volume), mask_to_array(r.defects));
      },
      py::arg("s1"), py::arg("b1"), py::arg("s2"), py::arg("b2"), py::arg("b_target"));
  m.def(
      "mppca_denoise",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> dwi, int patch_radius,
         int threads) {
        return volume_to_array(denoise::mppca_denoise(array_to_volume(dwi), patch_radius, threads));
      },
      py::arg("dwi"), py::arg("patch_radius") = 2, py::arg("threads") = 1);
  m.def(
      "denoise",
      [](const std::string& method, py::array_t<float, py::array::c_style | py::array::forcecast> dwi,
         std::vector<double> bvalues, std::vector<double> input_bvalues, double target_bvalue,
         const std::string& checkpoint, int patch_radius, int threads) {
        denoise::MethodConfig cfg;
        cfg.method = denoise::method_from_string(method);
        cfg.input_bvalues = std::move(input_bvalues);
        cfg.target_bvalue = target_bvalue;
        cfg.checkpoint = checkpoint;
        cfg.patch_radius = patch_radius;
        if (cfg.method == denoise::Method::ALGe) {
          if (cfg.input_bvalues.size() != 2)
            throw py::value_error("ALGe needs exactly two input b-values");
          cfg.alge_pair = {cfg.input_bvalues[0], cfg.input_bvalues[1]};
        }
        return volume_to_array(
            denoise::denoise(cfg, array_to_volume(dwi, bvalue_labels(bvalues)), threads));
      },
      py::arg("method"), py::arg("dwi"), py::arg("bvalues"), py::arg("input_bvalues"),
      py::arg("target_bvalue"), py::arg("checkpoint") = "", py::arg("patch_radius") = 2,
      py::arg("threads") = 1);

  // --- evaluation ----------------------------------------------------------------
  m.def(
      "theoretical_floor",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> i1,
         py::array_t<float, py::array::c_style | py::array::forcecast> i2, const std::string& loss) {
        return eval::theoretical_floor(array_to_volume(i1), array_to_volume(i2),
                                       loss == "MAE" ? eval::LossKind::MAE : eval::LossKind::MSE);
      },
      py::arg("i1"), py::arg("i2"), py::arg("loss") = "MSE");
  m.def("lesion_error_histograms", [](const std::vector<double>& errors) {
    const eval::LesionErrorReport r = eval::lesion_error_histograms(errors);
    py::dict out;
    out["mean"] = r.mean;
    out["stddev"] = r.stddev;
    out["abs_mean"] = r.abs_mean;
    out["mae"] = r.mae;
    out["fraction_abs_in_unit"] = r.fraction_abs_in_unit;
    out["sample_count"] = r.sample_count;
    return out;
  });

  // --- experiment driver -----------------------------------------------------------
  m.def(
      "run_pipeline",
      [](const std::string& config_path, const std::string& out_dir, int threads) {
        pipeline::ExperimentConfig cfg = pipeline::ExperimentConfig::from_file(config_path);
        cfg.threads = threads;
        cfg.training.threads = threads;
        pipeline::run_pipeline(cfg, out_dir);
      },
      py::arg("config_path"), py::arg("out_dir"), py::arg("threads") = 1);
}
