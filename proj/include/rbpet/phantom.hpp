#pragma once

#include <cstdint>

#include "rbpet/kernel_ops.hpp"
#include "rbpet/kinetics.hpp"
#include "rbpet/transport.hpp"
#include "rbpet/volume.hpp"

namespace rbpet {

// Blood input function C_b(t) = A * t^alpha * exp(-t/beta_s), t in seconds.
struct GammaVariate {
    double amplitude = 50.0;  // Bq/ml scale
    double alpha = 2.0;       // shape
    double beta_s = 25.0;     // scale, seconds
};

// Ellipsoidal left-ventricle phantom: blood cavity, myocardial shell, and a
// low-uptake background filling the rest of the volume.
struct PhantomSpec {
    Dims dims{64, 64, 32};
    VoxelSize voxel{2.0, 2.0, 2.0};
    double cavity_rx_mm = 18.0;  // cavity ellipsoid semi-axes
    double cavity_ry_mm = 18.0;
    double cavity_rz_mm = 14.0;
    double shell_thickness_mm = 8.0;
    KineticParams myocardium{0.8, 1.2, 0.30};
    KineticParams background{0.15, 0.4, 0.05};
    GammaVariate input;
    std::uint64_t seed = 0;

    void validate() const;  // throws on bad geometry or kinetic parameters
};

// Region labels per voxel.
enum class Region : std::uint8_t { Background = 0, Myocardium = 1, Cavity = 2 };

std::vector<std::uint8_t> phantom_labels(const PhantomSpec& spec);
VoiMask region_mask(const PhantomSpec& spec, Region region, const std::string& label);

struct NoiseModel {
    double scale = 1.0;          // SD multiplier; 0 disables noise
    double half_life_s = 75.0;   // activity decay half-life driving the variance
    double duration_exp = 1.0;   // variance ~ duration^{-duration_exp}
};

struct PhantomTruth {
    DynamicSeries series;      // noiseless, blur-free activity
    ParametricImage params;    // ground-truth kinetic maps (residual = 0)
    TimeActivityCurve cb;      // frame-averaged input function
};

// Frame-averaged gamma-variate input function.
TimeActivityCurve make_input_function(const GammaVariate& params, const FrameSchedule& schedule);

// Noiseless dynamic phantom: cavity voxels carry C_b exactly (Vb = 1), the
// shell and background follow the one-tissue model with their true parameters.
PhantomTruth make_phantom(const PhantomSpec& spec, const FrameSchedule& schedule);

// Blur each frame with the kernel and add Gaussian noise with per-voxel
// SD = scale * sqrt(max(blurred, 0) * 2^{-t_mid/half_life} / duration^exp).
// Deterministic per seed; each frame uses a derived sub-seed.
DynamicSeries degrade(const DynamicSeries& truth, const RangeKernel& kernel,
                      const NoiseModel& noise, std::uint64_t seed);

}  // namespace rbpet
