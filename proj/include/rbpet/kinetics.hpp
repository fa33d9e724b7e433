#pragma once

#include <string>
#include <vector>

#include "rbpet/volume.hpp"

namespace rbpet {

// One-tissue compartment parameters. Rates are per-minute; K1 in ml/min/g.
struct KineticParams {
    double k1 = 0.0;
    double k2 = 0.0;
    double vb = 0.0;  // fractional blood volume in [0, 1]

    void validate() const;
};

// C_T(t) = Vb Cb(t) + (1-Vb) K1 (e^{-k2 t} (x) Cb)(t), evaluated on a fine
// internal grid (0.5 s) and averaged over the frames of cb's schedule.
TimeActivityCurve tac_model(const KineticParams& params, const TimeActivityCurve& cb);

// 100 log-spaced efflux values spanning [0.01, 6.0] per-minute.
std::vector<double> default_k2_grid();

struct BasisSet {
    FrameSchedule schedule;
    std::vector<double> k2_grid;             // per-minute, strictly increasing
    std::vector<std::vector<double>> basis;  // [j][frame]: (e^{-k2_j t} (x) Cb) frame-averaged
    std::vector<double> cb_frames;           // blood regressor per frame
    std::vector<double> weights;             // duration-proportional, sum 1
};

BasisSet build_basis(const TimeActivityCurve& cb, const std::vector<double>& k2_grid);

struct VoxelFit {
    KineticParams params;
    double residual = 0.0;  // weighted sum of squared residuals
    bool blood = false;     // Vb > 0.995 guard fired (K1 reported 0)
    int basis_index = -1;
};

// Constrained linear least squares over the basis: for each k2_j solve for
// (Vb, theta2 = (1-Vb) K1) with 0 <= Vb <= 1, theta2 >= 0; pick the j with
// the smallest weighted residual (ties: smallest k2).
VoxelFit fit_voxel(const TimeActivityCurve& ct, const BasisSet& basis);

struct ParametricImage {
    Volume3 k1, k2, vb, residual;
};

// Voxel-wise fit, data-parallel; voxels outside the mask are zero-filled.
// Per-voxel failures are recorded as -1 in the residual layer.
ParametricImage fit_parametric(const DynamicSeries& series, const BasisSet& basis,
                               const VoiMask* mask = nullptr, int threads = 0);

struct FlowResult {
    double mbf = 0.0;  // ml/min/g
    std::string source;  // "rb82" | "water"
    std::string region;
};

// K1 = MBF (1 - a e^{-b/MBF}) with a = 0.74, b = 0.51.
double renkin_crone_forward(double mbf);

// Numerical inversion by bisection on [k1, k1/(1-a)].
double mbf_from_k1(double k1);

// MBF = p k2 with partition coefficient p = 0.91 ml/g.
double water_mbf(double k2_water);

double mfr(double stress_mbf, double rest_mbf);

}  // namespace rbpet
