#include "rbpet/kinetics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

namespace rbpet {

namespace {

constexpr double kFineDtS = 0.5;  // internal quadrature step, seconds

// Piecewise-constant blood curve sampled at fine-interval midpoints, plus the
// exact convolution with e^{-k2 t} for that staircase (k2 per-minute, t in
// minutes). Returns per-frame averages of the convolution.
struct FineGrid {
    std::vector<double> cb_mid;          // staircase value per fine interval
    std::vector<std::size_t> frame_lo;   // fine-interval range per frame
    std::vector<std::size_t> frame_hi;
    std::size_t n = 0;
};

FineGrid make_fine_grid(const TimeActivityCurve& cb) {
    const auto& frames = cb.schedule.frames;
    const double t_end = frames.back().end_s;
    FineGrid g;
    g.n = std::size_t(std::ceil(t_end / kFineDtS - 1e-9));
    g.cb_mid.assign(g.n, 0.0);
    std::size_t f = 0;
    for (std::size_t i = 0; i < g.n; ++i) {
        const double mid = (double(i) + 0.5) * kFineDtS;
        while (f < frames.size() && mid >= frames[f].end_s) ++f;
        if (f < frames.size() && mid >= frames[f].start_s) g.cb_mid[i] = cb.values[f];
    }
    g.frame_lo.resize(frames.size());
    g.frame_hi.resize(frames.size());
    for (std::size_t k = 0; k < frames.size(); ++k) {
        g.frame_lo[k] = std::size_t(std::llround(frames[k].start_s / kFineDtS));
        g.frame_hi[k] = std::size_t(std::llround(frames[k].end_s / kFineDtS));
        if (g.frame_hi[k] > g.n) g.frame_hi[k] = g.n;
        if (g.frame_hi[k] <= g.frame_lo[k])
            throw std::runtime_error("kinetics: frame narrower than the internal grid step");
    }
    return g;
}

// frame-averaged (e^{-k2 t} (x) Cb)(t); exact for the staircase Cb
std::vector<double> basis_curve(const FineGrid& g, double k2_per_min) {
    const double dt_min = kFineDtS / 60.0;
    std::vector<double> conv_mid(g.n);
    double y = 0.0;  // convolution value at the current interval start
    if (k2_per_min > 0.0) {
        const double eh = std::exp(-k2_per_min * dt_min / 2.0);
        const double ef = eh * eh;
        const double gh = (1.0 - eh) / k2_per_min;
        const double gf = (1.0 - ef) / k2_per_min;
        for (std::size_t i = 0; i < g.n; ++i) {
            conv_mid[i] = y * eh + g.cb_mid[i] * gh;
            y = y * ef + g.cb_mid[i] * gf;
        }
    } else {
        for (std::size_t i = 0; i < g.n; ++i) {  // running integral
            conv_mid[i] = y + g.cb_mid[i] * dt_min / 2.0;
            y += g.cb_mid[i] * dt_min;
        }
    }
    std::vector<double> out(g.frame_lo.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        double s = 0.0;
        for (std::size_t i = g.frame_lo[k]; i < g.frame_hi[k]; ++i) s += conv_mid[i];
        out[k] = s / double(g.frame_hi[k] - g.frame_lo[k]);
    }
    return out;
}

struct Candidate {
    double t1 = 0.0, t2 = 0.0;  // (Vb, theta2)
    bool feasible = false;
};

}  // namespace

void KineticParams::validate() const {
    if (k1 < 0.0 || k2 < 0.0 || vb < 0.0 || vb > 1.0)
        throw std::invalid_argument("KineticParams: K1 >= 0, k2 >= 0, 0 <= Vb <= 1 required");
}

TimeActivityCurve tac_model(const KineticParams& params, const TimeActivityCurve& cb) {
    params.validate();
    auto g = make_fine_grid(cb);
    auto conv = basis_curve(g, params.k2);
    TimeActivityCurve out(cb.schedule, std::vector<double>(cb.values.size(), 0.0));
    for (std::size_t f = 0; f < out.values.size(); ++f)
        out.values[f] =
            params.vb * cb.values[f] + (1.0 - params.vb) * params.k1 * conv[f];
    return out;
}

std::vector<double> default_k2_grid() {
    const int n = 100;
    std::vector<double> grid(n);
    const double lo = std::log(0.01), hi = std::log(6.0);
    for (int i = 0; i < n; ++i) grid[i] = std::exp(lo + (hi - lo) * i / double(n - 1));
    return grid;
}

BasisSet build_basis(const TimeActivityCurve& cb, const std::vector<double>& k2_grid) {
    if (k2_grid.empty()) throw std::invalid_argument("build_basis: empty k2 grid");
    for (std::size_t j = 1; j < k2_grid.size(); ++j)
        if (k2_grid[j] <= k2_grid[j - 1])
            throw std::invalid_argument("build_basis: k2 grid must be strictly increasing");
    bool any = false;
    for (double v : cb.values) any = any || v != 0.0;
    if (!any) throw std::invalid_argument("build_basis: degenerate constant-zero blood curve");

    BasisSet bs;
    bs.schedule = cb.schedule;
    bs.k2_grid = k2_grid;
    bs.cb_frames = cb.values;
    auto g = make_fine_grid(cb);
    bs.basis.reserve(k2_grid.size());
    for (double k2 : k2_grid) bs.basis.push_back(basis_curve(g, k2));

    double total = 0.0;
    for (const auto& f : cb.schedule.frames) total += f.duration();
    for (const auto& f : cb.schedule.frames) bs.weights.push_back(f.duration() / total);
    return bs;
}

VoxelFit fit_voxel(const TimeActivityCurve& ct, const BasisSet& bs) {
    if (!(ct.schedule == bs.schedule))
        throw std::invalid_argument("fit_voxel: schedule mismatch with basis");
    const std::size_t nf = ct.values.size();
    const auto& w = bs.weights;
    const auto& cb = bs.cb_frames;

    double a11 = 0.0, b1 = 0.0, syy = 0.0;
    for (std::size_t f = 0; f < nf; ++f) {
        a11 += w[f] * cb[f] * cb[f];
        b1 += w[f] * cb[f] * ct.values[f];
        syy += w[f] * ct.values[f] * ct.values[f];
    }
    if (a11 <= 0.0) throw std::runtime_error("fit_voxel: degenerate blood regressor");

    VoxelFit best;
    best.residual = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < bs.k2_grid.size(); ++j) {
        const auto& bj = bs.basis[j];
        double a12 = 0.0, a22 = 0.0, b2 = 0.0;
        for (std::size_t f = 0; f < nf; ++f) {
            a12 += w[f] * cb[f] * bj[f];
            a22 += w[f] * bj[f] * bj[f];
            b2 += w[f] * bj[f] * ct.values[f];
        }

        // candidate minimizers of the constrained quadratic
        Candidate cands[6];
        int nc = 0;
        const double det = a11 * a22 - a12 * a12;
        if (det > 1e-300) {  // interior stationary point
            cands[nc++] = {(b1 * a22 - b2 * a12) / det, (a11 * b2 - a12 * b1) / det, true};
        }
        if (a22 > 0.0) {
            cands[nc++] = {0.0, std::max(0.0, b2 / a22), true};             // Vb = 0 edge
            cands[nc++] = {1.0, std::max(0.0, (b2 - a12) / a22), true};     // Vb = 1 edge
        }
        cands[nc++] = {std::clamp(b1 / a11, 0.0, 1.0), 0.0, true};          // theta2 = 0 edge
        cands[nc++] = {0.0, 0.0, true};
        cands[nc++] = {1.0, 0.0, true};

        double best_sse = std::numeric_limits<double>::infinity();
        double t1 = 0.0, t2 = 0.0;
        for (int c = 0; c < nc; ++c) {
            const auto& cd = cands[c];
            if (cd.t1 < -1e-12 || cd.t1 > 1.0 + 1e-12 || cd.t2 < -1e-12) continue;
            const double x1 = std::clamp(cd.t1, 0.0, 1.0), x2 = std::max(cd.t2, 0.0);
            const double sse = syy - 2.0 * (x1 * b1 + x2 * b2) + x1 * x1 * a11 +
                               2.0 * x1 * x2 * a12 + x2 * x2 * a22;
            if (sse < best_sse) {
                best_sse = sse;
                t1 = x1;
                t2 = x2;
            }
        }
        if (best_sse < best.residual - 1e-15) {  // strict improvement: smallest k2 wins ties
            best.residual = std::max(best_sse, 0.0);
            best.basis_index = int(j);
            best.params.vb = t1;
            best.params.k2 = bs.k2_grid[j];
            if (t1 > 0.995) {
                best.params.k1 = 0.0;
                best.blood = true;
            } else {
                best.params.k1 = t2 / (1.0 - t1);
                best.blood = false;
            }
        }
    }
    if (best.params.k1 == 0.0 && !best.blood) best.params.k2 = 0.0;
    return best;
}

ParametricImage fit_parametric(const DynamicSeries& series, const BasisSet& bs,
                               const VoiMask* mask, int threads) {
    if (!(series.schedule == bs.schedule))
        throw std::invalid_argument("fit_parametric: schedule mismatch with basis");
    const Dims dims = series.volumes.front().dims;
    const VoxelSize vx = series.volumes.front().voxel;
    if (mask && !(mask->dims == dims))
        throw std::invalid_argument("fit_parametric: mask geometry mismatch");

    ParametricImage out{Volume3(dims, vx, 0.0), Volume3(dims, vx, 0.0), Volume3(dims, vx, 0.0),
                        Volume3(dims, vx, 0.0)};
    const std::size_t nvox = dims.count();
    const std::size_t nf = series.volumes.size();

    int nthreads = threads > 0 ? threads : int(std::thread::hardware_concurrency());
    if (nthreads < 1) nthreads = 1;

    auto worker = [&](std::size_t lo, std::size_t hi) {
        TimeActivityCurve ct(bs.schedule, std::vector<double>(nf, 0.0));
        for (std::size_t v = lo; v < hi; ++v) {
            if (mask && !mask->mask[v]) continue;
            for (std::size_t f = 0; f < nf; ++f) ct.values[f] = series.volumes[f].data[v];
            try {
                auto fit = fit_voxel(ct, bs);
                out.k1.data[v] = fit.params.k1;
                out.k2.data[v] = fit.params.k2;
                out.vb.data[v] = fit.params.vb;
                out.residual.data[v] = fit.residual;
            } catch (const std::exception&) {
                out.residual.data[v] = -1.0;  // failure sentinel
            }
        }
    };

    if (nthreads == 1) {
        worker(0, nvox);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (nvox + nthreads - 1) / nthreads;
        for (int t = 0; t < nthreads; ++t) {
            const std::size_t lo = std::size_t(t) * chunk;
            if (lo >= nvox) break;
            pool.emplace_back(worker, lo, std::min(lo + chunk, nvox));
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

double renkin_crone_forward(double mbf) {
    if (mbf <= 0.0) throw std::invalid_argument("renkin_crone_forward: MBF must be positive");
    return mbf * (1.0 - 0.74 * std::exp(-0.51 / mbf));
}

double mbf_from_k1(double k1) {
    if (k1 <= 0.0) throw std::invalid_argument("mbf_from_k1: K1 must be positive");
    double lo = k1, hi = k1 / 0.26;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double f = renkin_crone_forward(mid) - k1;
        if (std::abs(f) < 1e-10) return mid;
        if (f < 0.0)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

double water_mbf(double k2_water) {
    if (k2_water < 0.0) throw std::invalid_argument("water_mbf: k2 must be nonnegative");
    return 0.91 * k2_water;
}

double mfr(double stress_mbf, double rest_mbf) {
    if (rest_mbf <= 0.0) throw std::invalid_argument("mfr: rest MBF must be positive");
    return stress_mbf / rest_mbf;
}

}  // namespace rbpet
