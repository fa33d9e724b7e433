#include "rbpet/kernel_ops.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numeric>
#include <stdexcept>

namespace rbpet {

namespace {

std::mutex g_fftw_mutex;  // FFTW plan creation is not thread-safe

int next_fast_size(int n) {
    for (;; ++n) {
        int m = n;
        for (int p : {2, 3, 5, 7})
            while (m % p == 0) m /= p;
        if (m == 1) return n;
    }
}

struct PaddedVolume {
    int nx, ny, nz;  // padded dims
    int rx, ry, rz;  // pad radii
    std::vector<double> data;
};

PaddedVolume pad_volume(const Volume3& vol, int rx, int ry, int rz, Padding mode) {
    const int nx = vol.dims.nx, ny = vol.dims.ny, nz = vol.dims.nz;
    PaddedVolume p{nx + 2 * rx, ny + 2 * ry, nz + 2 * rz, rx, ry, rz, {}};
    p.data.assign(std::size_t(p.nx) * p.ny * p.nz, 0.0);

    auto reflect = [](int i, int n) {
        // half-sample reflection: -1 -> 0, n -> n-1
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - 1 - i;
        }
        return i;
    };

    for (int z = 0; z < p.nz; ++z) {
        const int sz = mode == Padding::Reflect ? reflect(z - rz, nz) : z - rz;
        if (mode == Padding::Zero && (sz < 0 || sz >= nz)) continue;
        for (int y = 0; y < p.ny; ++y) {
            const int sy = mode == Padding::Reflect ? reflect(y - ry, ny) : y - ry;
            if (mode == Padding::Zero && (sy < 0 || sy >= ny)) continue;
            for (int x = 0; x < p.nx; ++x) {
                const int sx = mode == Padding::Reflect ? reflect(x - rx, nx) : x - rx;
                if (mode == Padding::Zero && (sx < 0 || sx >= nx)) continue;
                p.data[std::size_t(x) + std::size_t(p.nx) * (std::size_t(y) + std::size_t(p.ny) * z)] =
                    vol.at(sx, sy, sz);
            }
        }
    }
    return p;
}

void check_kernel_fits(const Volume3& vol, const RangeKernel& kernel) {
    const auto& kd = kernel.vol.dims;
    if (kd.nx > vol.dims.nx || kd.ny > vol.dims.ny || kd.nz > vol.dims.nz)
        throw std::invalid_argument("convolve3: kernel larger than volume");
}

Volume3 convolve_direct(const Volume3& vol, const Volume3& k, Padding padding) {
    const int rx = k.dims.nx / 2, ry = k.dims.ny / 2, rz = k.dims.nz / 2;
    PaddedVolume p = pad_volume(vol, rx, ry, rz, padding);
    Volume3 out(vol.dims, vol.voxel, 0.0);

    for (int z = 0; z < vol.dims.nz; ++z)
        for (int y = 0; y < vol.dims.ny; ++y)
            for (int x = 0; x < vol.dims.nx; ++x) {
                double acc = 0.0;
                for (int kz = 0; kz < k.dims.nz; ++kz)
                    for (int ky = 0; ky < k.dims.ny; ++ky) {
                        const double* row =
                            &p.data[std::size_t(p.nx) *
                                    (std::size_t(y + 2 * ry - ky) + std::size_t(p.ny) * (z + 2 * rz - kz))];
                        const double* kr = &k.data[k.index(0, ky, kz)];
                        for (int kx = 0; kx < k.dims.nx; ++kx)
                            acc += kr[kx] * row[x + 2 * rx - kx];
                    }
                out.at(x, y, z) = acc;
            }
    return out;
}

Volume3 convolve_fft(const Volume3& vol, const Volume3& k, Padding padding) {
    const int rx = k.dims.nx / 2, ry = k.dims.ny / 2, rz = k.dims.nz / 2;
    PaddedVolume p = pad_volume(vol, rx, ry, rz, padding);

    const int fx = next_fast_size(p.nx + k.dims.nx - 1);
    const int fy = next_fast_size(p.ny + k.dims.ny - 1);
    const int fz = next_fast_size(p.nz + k.dims.nz - 1);
    const std::size_t n_real = std::size_t(fx) * fy * fz;
    const std::size_t n_cplx = std::size_t(fx / 2 + 1) * fy * fz;

    std::vector<double> a(n_real, 0.0), b(n_real, 0.0);
    for (int z = 0; z < p.nz; ++z)
        for (int y = 0; y < p.ny; ++y)
            for (int x = 0; x < p.nx; ++x)
                a[std::size_t(x) + std::size_t(fx) * (std::size_t(y) + std::size_t(fy) * z)] =
                    p.data[std::size_t(x) + std::size_t(p.nx) * (std::size_t(y) + std::size_t(p.ny) * z)];
    for (int z = 0; z < k.dims.nz; ++z)
        for (int y = 0; y < k.dims.ny; ++y)
            for (int x = 0; x < k.dims.nx; ++x)
                b[std::size_t(x) + std::size_t(fx) * (std::size_t(y) + std::size_t(fy) * z)] =
                    k.at(x, y, z);

    std::vector<std::complex<double>> fa(n_cplx), fb(n_cplx);
    {
        std::lock_guard<std::mutex> lock(g_fftw_mutex);
        fftw_plan pa = fftw_plan_dft_r2c_3d(fz, fy, fx, a.data(),
                                            reinterpret_cast<fftw_complex*>(fa.data()), FFTW_ESTIMATE);
        fftw_plan pb = fftw_plan_dft_r2c_3d(fz, fy, fx, b.data(),
                                            reinterpret_cast<fftw_complex*>(fb.data()), FFTW_ESTIMATE);
        fftw_execute(pa);
        fftw_execute(pb);
        fftw_destroy_plan(pa);
        fftw_destroy_plan(pb);
    }
    for (std::size_t i = 0; i < n_cplx; ++i) fa[i] *= fb[i];
    {
        std::lock_guard<std::mutex> lock(g_fftw_mutex);
        fftw_plan pc = fftw_plan_dft_c2r_3d(fz, fy, fx, reinterpret_cast<fftw_complex*>(fa.data()),
                                            a.data(), FFTW_ESTIMATE);
        fftw_execute(pc);
        fftw_destroy_plan(pc);
    }

    const double scale = 1.0 / double(n_real);
    Volume3 out(vol.dims, vol.voxel, 0.0);
    // full convolution of padded input and kernel; valid output starts at 2r
    for (int z = 0; z < vol.dims.nz; ++z)
        for (int y = 0; y < vol.dims.ny; ++y)
            for (int x = 0; x < vol.dims.nx; ++x)
                out.at(x, y, z) =
                    a[std::size_t(x + 2 * rx) +
                      std::size_t(fx) * (std::size_t(y + 2 * ry) + std::size_t(fy) * (z + 2 * rz))] *
                    scale;
    return out;
}

Volume3 flipped(const Volume3& k) {
    Volume3 f(k.dims, k.voxel, 0.0);
    for (int z = 0; z < k.dims.nz; ++z)
        for (int y = 0; y < k.dims.ny; ++y)
            for (int x = 0; x < k.dims.nx; ++x)
                f.at(x, y, z) = k.at(k.dims.nx - 1 - x, k.dims.ny - 1 - y, k.dims.nz - 1 - z);
    return f;
}

Volume3 dispatch(const Volume3& vol, const Volume3& k, const ConvSpec& spec) {
    return spec.backend == ConvBackend::Direct ? convolve_direct(vol, k, spec.padding)
                                               : convolve_fft(vol, k, spec.padding);
}

// Euclidean projection onto { x >= 0, sum x = 1 }
void project_simplex(std::vector<double>& x) {
    std::vector<double> u = x;
    std::sort(u.begin(), u.end(), std::greater<double>());
    double css = 0.0, tau = 0.0;
    int rho = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        css += u[i];
        const double t = (css - 1.0) / double(i + 1);
        if (u[i] - t > 0.0) {
            rho = int(i + 1);
            tau = t;
        }
    }
    (void)rho;
    for (double& v : x) v = std::max(0.0, v - tau);
}

double mean_abs(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s / double(v.size());
}

}  // namespace

Volume3 convolve3(const Volume3& vol, const RangeKernel& kernel, const ConvSpec& spec) {
    check_kernel_fits(vol, kernel);
    return dispatch(vol, kernel.vol, spec);
}

Volume3 correlate3(const Volume3& vol, const RangeKernel& kernel, const ConvSpec& spec) {
    check_kernel_fits(vol, kernel);
    return dispatch(vol, flipped(kernel.vol), spec);
}

double kernel_second_moment(const RangeKernel& k, int axis) {
    const auto& v = k.vol;
    double m1 = 0.0;
    for (int z = 0; z < v.dims.nz; ++z)
        for (int y = 0; y < v.dims.ny; ++y)
            for (int x = 0; x < v.dims.nx; ++x) {
                const int c = axis == 0 ? x : axis == 1 ? y : z;
                m1 += v.at(x, y, z) * c;
            }
    double m2 = 0.0;
    for (int z = 0; z < v.dims.nz; ++z)
        for (int y = 0; y < v.dims.ny; ++y)
            for (int x = 0; x < v.dims.nx; ++x) {
                const int c = axis == 0 ? x : axis == 1 ? y : z;
                m2 += v.at(x, y, z) * (c - m1) * (c - m1);
            }
    return m2;
}

FactorizeResult factorize_kernel(const RangeKernel& h_small, const RangeKernel& h_big,
                                 const FactorizeOptions& opts) {
    if (!h_small.vol.same_geometry(h_big.vol))
        throw std::invalid_argument("factorize_kernel: kernels must share grid");
    for (int axis = 0; axis < 3; ++axis)
        if (kernel_second_moment(h_big, axis) + 1e-9 < kernel_second_moment(h_small, axis))
            throw std::invalid_argument("factorize_kernel: h_big must be at least as broad as h_small");

    const ConvSpec spec{Padding::Zero, ConvBackend::Fft};
    const std::size_t n = h_big.vol.data.size();

    Volume3 k = h_big.vol;  // start from the broad kernel
    project_simplex(k.data);

    auto residual = [&](const Volume3& cand) {
        Volume3 r = dispatch(cand, h_small.vol, spec);
        for (std::size_t i = 0; i < n; ++i) r.data[i] -= h_big.vol.data[i];
        return r;
    };

    // fixed relative step: learning_rate of the kernel peak along the
    // max-normalized MAE subgradient, halved whenever a step would not improve
    const double kscale = *std::max_element(k.data.begin(), k.data.end());
    double step = opts.learning_rate * kscale;

    Volume3 res = residual(k);
    double mae = mean_abs(res.data);
    int it = 0;
    for (; it < opts.max_iters; ++it) {
        Volume3 sgn(res.dims, res.voxel, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            sgn.data[i] = res.data[i] > 0.0 ? 1.0 : res.data[i] < 0.0 ? -1.0 : 0.0;
        Volume3 grad = dispatch(sgn, flipped(h_small.vol), spec);
        double gmax = 0.0;
        for (double g : grad.data) gmax = std::max(gmax, std::abs(g));
        if (gmax == 0.0) break;

        Volume3 cand = k;
        double mae_new = mae;
        bool accepted = false;
        while (step > 1e-15) {
            cand = k;
            for (std::size_t i = 0; i < n; ++i) cand.data[i] -= step * grad.data[i] / gmax;
            project_simplex(cand.data);
            Volume3 res_new = residual(cand);
            mae_new = mean_abs(res_new.data);
            if (mae_new < mae) {
                k = std::move(cand);
                res = std::move(res_new);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted || mae - mae_new < opts.improvement_tol) {
            mae = std::min(mae, mae_new);
            break;
        }
        mae = mae_new;
    }

    if (mae > opts.residual_threshold)
        throw std::runtime_error("factorize_kernel: did not converge, residual MAE " +
                                 std::to_string(mae));

    FactorizeResult result{RangeKernel{std::move(k)}, mae, it};
    result.kernel.validate();
    return result;
}

Volume3 richardson_lucy(const Volume3& blurred, const RangeKernel& kernel, int iters,
                        const RlOptions& opts) {
    if (iters < 1) throw std::invalid_argument("richardson_lucy: iters must be >= 1");
    kernel.validate();
    check_kernel_fits(blurred, kernel);

    Volume3 data = blurred;
    for (double& v : data.data) v = std::max(v, 0.0);
    if (data.total() == 0.0) return Volume3(blurred.dims, blurred.voxel, 0.0);

    Volume3 est = data;
    const Volume3 kflip = flipped(kernel.vol);
    for (int it = 0; it < iters; ++it) {
        Volume3 reblur = dispatch(est, kernel.vol, opts.conv);
        for (std::size_t i = 0; i < reblur.data.size(); ++i) {
            const double d = std::max(reblur.data[i], opts.epsilon);
            reblur.data[i] = data.data[i] / d;
        }
        Volume3 corr = dispatch(reblur, kflip, opts.conv);
        for (std::size_t i = 0; i < est.data.size(); ++i) {
            est.data[i] = std::max(est.data[i] * corr.data[i], 0.0);
            if (!std::isfinite(est.data[i]))
                throw std::runtime_error("richardson_lucy: non-finite estimate at iteration " +
                                         std::to_string(it + 1));
        }
    }
    return est;
}

}  // namespace rbpet
