#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbd/phantom.hpp"
#include "mbd/volume.hpp"

namespace mbd {

using Direction = std::array<double, 3>;

// Acquisition description: spin-echo constants, diffusion weightings and
// encoding directions, plus the Gaussian noise level feeding the Rician
// magnitude model.
struct AcquisitionProtocol {
  double k = 1000.0;  // signal gain
  double TR = 6700.0; // ms
  double TE = 100.0;  // ms
  std::vector<double> bvalues;   // s/mm^2, ascending, >= 0
  std::vector<Direction> directions; // unit vectors
  double sigma = 0.0; // noise std in image-intensity units
  int repetitions = 1;

  void validate() const;
};

struct LesionParams {
  double f = 0.5;      // compartment fraction in [0,1]
  double D1 = 0.7;     // 1e-3 mm^2/s, in [0.3, 1.35)
  double D2 = 0.7;
  double dT2 = 0.0;    // ms, on the grid {-30,-25,...,30}
  int shape_id = -1;
  std::array<int, 3> position{0, 0, 0}; // stamp origin voxel

  void validate() const;
};

// Fuzzy lesion content per voxel plus per-lesion parameters. Supports of
// distinct lesions are disjoint and lie strictly inside the WM binary
// mask; `owner` maps each voxel to its lesion index (-1 for none).
struct LesionField {
  Mask fraction;
  std::vector<std::int32_t> owner;
  std::vector<LesionParams> lesions;

  void validate(const Mask& wm_binary) const;
  void set_all_params(const LesionParams& p); // shared params (test protocol)
};

// Small binary 2D stamp used as a lesion shape.
struct LesionShape {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> mask; // row-major, 0/1

  std::size_t area() const;
  bool connected() const;
};

// --- signal model -----------------------------------------------------

// k * rho * exp(-TE/(T2+dT2)) * (1 - exp(-TR/T1)). Throws on T2+dT2 <= 0.
double steady_state_factor(const TissueParams& tissue, const AcquisitionProtocol& proto,
                           double dT2 = 0.0);

// g^T D g for a unit direction; clamps tiny negative results to 0, rejects
// values below -1e-12 and non-unit directions.
double directional_diffusivity(const SymTensor3& tensor, const Direction& g);

// Electrostatic-repulsion direction set on the hemisphere: projected
// gradient descent on the antipodally symmetrized 1/r Coulomb energy with
// backtracking steps, so the energy never increases. Deterministic per seed.
std::vector<Direction> generate_directions(int n, std::uint64_t seed, int iterations = 300);

// Antipodally symmetrized Coulomb energy (sum over pairs of 1/|gi-gj| +
// 1/|gi+gj|). Exposed for energy-descent checks.
double repulsion_energy(const std::vector<Direction>& dirs);

// Smallest pairwise angle in degrees after folding antipodes together.
double min_antipodal_angle_deg(const std::vector<Direction>& dirs);

// --- synthesis --------------------------------------------------------

// Clean multi-b-value volume for one encoding direction. One channel per
// b-value, labeled "b=<value>". Healthy tissue follows the monoexponential
// spin-echo model with the voxel's directional diffusivity; lesion content
// follows the biexponential model with WM relaxation constants shifted by
// dT2, and healthy fractions are scaled by (1 - lesion fraction).
Volume simulate_clean(const Phantom& phantom, const LesionField* lesions,
                      const AcquisitionProtocol& proto, int direction_index,
                      int threads = 1);

// Rician magnitude noise: |S/sqrt(2) + n1 + i(S/sqrt(2) + n2)|, n1,n2 ~
// N(0,sigma) independent. Per-slice substreams keep parallel and serial
// runs bit-identical.
Volume add_rician_noise(const Volume& clean, double sigma, std::uint64_t seed,
                        int threads = 1);

// --- lesions ----------------------------------------------------------

// Lattice rasterization of a (possibly harmonically perturbed) ellipse:
// a point is inside when its normalized elliptical radius is <= the
// boundary 1 + h0 cos t + h1 sin t + h2 cos 2t + h3 sin 2t.
LesionShape rasterize_ellipse(double a, double b, double angle,
                              const std::array<double, 4>& harmonics);

// Random connected ellipse/blob rasterizations with bounding boxes within
// [4,21] voxels per side. Deterministic per seed.
std::vector<LesionShape> generate_lesion_shapes(int n, std::array<int, 2> size_range,
                                                std::array<double, 2> elongation_range,
                                                std::uint64_t seed);

// Per-slice placement: for every z slice whose WM region can host lesions,
// draws a count from count_range, picks shapes without replacement, places
// them uniformly at random with support inside WM and disjoint from
// previously placed lesions (200 attempts per lesion, then the count is
// reduced with a warning). Each stamp is Gaussian-blurred (sigma 0.7,
// kernel truncated at 4 sigma), scaled so its mean pre-blur intensity maps
// to 3.5, and clipped to [0,1]; the clipped plateau provides pure-lesion
// voxels. Parameters are sampled per lesion.
LesionField insert_lesions(const Phantom& phantom, const std::vector<LesionShape>& shapes,
                           std::array<int, 2> count_range, std::uint64_t seed,
                           std::optional<std::array<int, 2>> slice_range = std::nullopt);

LesionParams sample_lesion_params(std::uint64_t seed);
LesionParams sample_lesion_params(class RandomStream& rng);

// Lesion field IO: 2-channel volume (fraction, owner index as float) plus
// a tsv of per-lesion parameters.
void save_lesion_field(const LesionField& field, const std::string& base_path);
LesionField load_lesion_field(const std::string& base_path);

} // namespace mbd
