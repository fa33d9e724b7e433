#pragma once

#include "rbpet/transport.hpp"
#include "rbpet/volume.hpp"

namespace rbpet {

enum class Padding { Zero, Reflect };
enum class ConvBackend { Direct, Fft };

struct ConvSpec {
    Padding padding = Padding::Reflect;
    ConvBackend backend = ConvBackend::Fft;
};

// Linear shift-invariant convolution of a volume with a centered kernel.
// Direct and FFT backends produce the same result (padding applied explicitly
// before either backend runs).
Volume3 convolve3(const Volume3& vol, const RangeKernel& kernel, const ConvSpec& spec = {});

// Cross-correlation with the kernel (convolution with the flipped kernel).
Volume3 correlate3(const Volume3& vol, const RangeKernel& kernel, const ConvSpec& spec = {});

struct FactorizeOptions {
    double learning_rate = 1e-2;  // step along the max-normalized MAE gradient
    int max_iters = 5000;
    double improvement_tol = 1e-9;
    double residual_threshold = 1e-3;  // final MAE above this is non-convergence
};

struct FactorizeResult {
    RangeKernel kernel;
    double mae = 0.0;
    int iterations = 0;
};

// Find K minimizing MAE(h_small (*) K, h_big) by projected gradient descent on
// the nonnegative sum-1 simplex. h_big must be at least as broad as h_small.
FactorizeResult factorize_kernel(const RangeKernel& h_small, const RangeKernel& h_big,
                                 const FactorizeOptions& opts = {});

struct RlOptions {
    ConvSpec conv = {Padding::Reflect, ConvBackend::Fft};
    double epsilon = 1e-12;  // guard for the multiplicative ratio
};

// Standard multiplicative Richardson-Lucy deconvolution. Input is clamped to
// zero where negative; output is nonnegative.
Volume3 richardson_lucy(const Volume3& blurred, const RangeKernel& kernel, int iters,
                        const RlOptions& opts = {});

// Second moment of a kernel about its centroid along one axis, voxel^2.
double kernel_second_moment(const RangeKernel& k, int axis);

}  // namespace rbpet
