"""Synthetic multi-b-value DWI denoising toolkit.

Thin wrapper over the C++ core. Volumes cross the boundary as numpy
float32 arrays shaped (channels, nz, ny, nx).
"""

from mbd._core import (  # noqa: F401
    AcquisitionProtocol,
    ConfigError,
    IoError,
    LesionField,
    LesionParams,
    LesionShape,
    Network,
    NumericError,
    Phantom,
    TissueParams,
    TissueSet,
    TrainingConfig,
    TrainResult,
    add_rician_noise,
    alge_extrapolate,
    denoise,
    denoise_slice,
    directional_diffusivity,
    generate_directions,
    generate_lesion_shapes,
    generate_procedural_phantom,
    insert_lesions,
    lesion_error_histograms,
    load_network,
    load_phantom,
    load_volume,
    min_antipodal_angle_deg,
    mppca_denoise,
    repulsion_energy,
    run_pipeline,
    sample_lesion_params,
    save_volume,
    simulate_clean,
    steady_state_factor,
    theoretical_floor,
    train,
)

__version__ = "0.1.0"
