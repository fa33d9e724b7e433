#include <doctest.h>

#include <cmath>
#include <random>

#include "rbpet/kinetics.hpp"
#include "rbpet/rng.hpp"

using namespace rbpet;

namespace {

FrameSchedule long_schedule() {
    // 0..600 s in 40 x 15 s frames, then a narrow frame around t = 600 s
    std::vector<Frame> frames;
    for (int i = 0; i < 40; ++i) frames.push_back({15.0 * i, 15.0 * (i + 1)});
    frames.push_back({600.0, 600.5});
    return FrameSchedule(frames);
}

TimeActivityCurve unit_step_cb(const FrameSchedule& sched) {
    return TimeActivityCurve(sched, std::vector<double>(sched.size(), 1.0));
}

// gamma-variate-like blood curve on the standard schedule
TimeActivityCurve demo_cb() {
    auto sched = standard_rb82_schedule();
    std::vector<double> v;
    for (const auto& f : sched.frames) {
        const double t = 0.5 * (f.start_s + f.end_s);
        v.push_back(2000.0 * std::pow(t / 30.0, 2.0) * std::exp(-t / 30.0) + 1.0);
    }
    return TimeActivityCurve(sched, v);
}

// Independent oracle: exhaustive grid search over (Vb, theta2) at fixed k2_j.
VoxelFit brute_force_fit(const TimeActivityCurve& ct, const BasisSet& bs) {
    VoxelFit best;
    best.residual = 1e300;
    for (std::size_t j = 0; j < bs.k2_grid.size(); ++j) {
        double best_sse = 1e300, bt1 = 0.0, bt2 = 0.0;
        for (int i1 = 0; i1 <= 200; ++i1)
            for (int i2 = 0; i2 <= 400; ++i2) {
                const double t1 = i1 / 200.0;
                const double t2 = i2 / 400.0 * 2.0;  // theta2 in [0, 2]
                double sse = 0.0;
                for (std::size_t f = 0; f < ct.values.size(); ++f) {
                    const double pred = t1 * bs.cb_frames[f] + t2 * bs.basis[j][f];
                    const double r = ct.values[f] - pred;
                    sse += bs.weights[f] * r * r;
                }
                if (sse < best_sse) {
                    best_sse = sse;
                    bt1 = t1;
                    bt2 = t2;
                }
            }
        if (best_sse < best.residual - 1e-15) {
            best.residual = best_sse;
            best.basis_index = int(j);
            best.params.vb = bt1;
            best.params.k2 = bs.k2_grid[j];
            best.params.k1 = bt1 > 0.995 ? 0.0 : bt2 / (1.0 - bt1);
        }
    }
    return best;
}

}  // namespace

TEST_CASE("tac_model degenerate cases and step response") {
    auto sched = long_schedule();
    auto cb = unit_step_cb(sched);

    // Vb = 1: C_T = C_b exactly
    auto pure_blood = tac_model({0.3, 0.2, 1.0}, cb);
    for (std::size_t f = 0; f < cb.values.size(); ++f)
        CHECK(pure_blood.values[f] == doctest::Approx(cb.values[f]).epsilon(1e-12));

    // K1 = 0, Vb = 0: identically zero
    auto nothing = tac_model({0.0, 0.5, 0.0}, cb);
    for (double v : nothing.values) CHECK(v == 0.0);

    // unit step, K1 = 0.5, k2 = 0.1 /min, Vb = 0:
    // C_T(10 min) = (K1/k2)(1 - e^{-k2 t}) = 5 (1 - e^{-1}) = 3.1606
    auto step = tac_model({0.5, 0.1, 0.0}, cb);
    CHECK(step.values.back() == doctest::Approx(5.0 * (1.0 - std::exp(-1.0))).epsilon(1e-3));

    CHECK_THROWS(tac_model({-0.1, 0.1, 0.0}, cb));
    CHECK_THROWS(tac_model({0.1, 0.1, 1.5}, cb));
}

TEST_CASE("tac_model linearity in the blood curve") {
    auto cb = demo_cb();
    TimeActivityCurve cb2(cb.schedule, cb.values);
    for (auto& v : cb2.values) v *= 3.0;
    KineticParams p{0.8, 0.4, 0.25};
    auto a = tac_model(p, cb);
    auto b = tac_model(p, cb2);
    for (std::size_t f = 0; f < a.values.size(); ++f)
        CHECK(b.values[f] == doctest::Approx(3.0 * a.values[f]).epsilon(1e-12));
}

TEST_CASE("build_basis properties") {
    auto sched = long_schedule();
    auto cb = unit_step_cb(sched);
    std::vector<double> grid{0.0, 0.05, 0.2, 1.0, 4.0};
    // grid containing k2 = 0: basis is the running integral of C_b
    auto bs = build_basis(cb, grid);
    // unit step: integral at frame [15i, 15(i+1)) midpoint = (i + 0.5) * 15 / 60 min
    for (int i = 0; i < 40; ++i)
        CHECK(bs.basis[0][i] == doctest::Approx((i + 0.5) * 15.0 / 60.0).epsilon(1e-9));

    // nonnegative basis curves, pointwise non-increasing in k2 for step C_b
    for (std::size_t j = 0; j < grid.size(); ++j)
        for (std::size_t f = 0; f < cb.values.size(); ++f) {
            CHECK(bs.basis[j][f] >= 0.0);
            if (j > 0) CHECK(bs.basis[j][f] <= bs.basis[j - 1][f] + 1e-12);
        }

    // weights are duration-proportional and sum to 1
    double wsum = 0.0;
    for (double w : bs.weights) wsum += w;
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bs.weights[40] / bs.weights[0] == doctest::Approx(0.5 / 15.0).epsilon(1e-12));

    CHECK_THROWS(build_basis(cb, {}));
    CHECK_THROWS(build_basis(cb, {0.2, 0.1}));
    TimeActivityCurve zero_cb(sched, std::vector<double>(sched.size(), 0.0));
    CHECK_THROWS(build_basis(zero_cb, {0.1}));
}

TEST_CASE("fit_voxel recovers noiseless model parameters on the grid") {
    auto cb = demo_cb();
    auto grid = default_k2_grid();
    auto bs = build_basis(cb, grid);

    const double true_k2 = grid[60];
    KineticParams truth{0.6, true_k2, 0.3};
    auto ct = tac_model(truth, cb);
    auto fit = fit_voxel(ct, bs);

    CHECK(fit.params.k1 == doctest::Approx(truth.k1).epsilon(0.01));
    CHECK(fit.params.k2 == doctest::Approx(truth.k2).epsilon(0.01));
    CHECK(fit.params.vb == doctest::Approx(truth.vb).epsilon(0.01));
    CHECK_FALSE(fit.blood);

    // pure blood voxel: Vb = 1 fit, K1 reported 0 by the guard
    auto blood_fit = fit_voxel(cb, bs);
    CHECK(blood_fit.params.vb > 0.995);
    CHECK(blood_fit.params.k1 == 0.0);
    CHECK(blood_fit.blood);

    // zero voxel
    TimeActivityCurve zeros(cb.schedule, std::vector<double>(cb.values.size(), 0.0));
    auto zero_fit = fit_voxel(zeros, bs);
    CHECK(zero_fit.params.k1 == 0.0);
    CHECK(zero_fit.params.vb == 0.0);
    CHECK(zero_fit.residual == doctest::Approx(0.0));
}

TEST_CASE("fit_voxel agrees with the brute-force grid-search oracle") {
    auto cb = demo_cb();
    // coarse grid so the oracle stays cheap
    std::vector<double> grid{0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2};
    auto bs = build_basis(cb, grid);
    // rescale so theta2 in [0,2] covers the truth
    auto rng = make_rng(99);
    std::uniform_real_distribution<double> uk1(0.1, 1.2), uvb(0.0, 0.6);
    std::uniform_int_distribution<int> uj(0, int(grid.size()) - 1);
    std::normal_distribution<double> noise(0.0, 0.02);

    for (int trial = 0; trial < 20; ++trial) {
        KineticParams p{uk1(rng), grid[uj(rng)], uvb(rng)};
        auto ct = tac_model(p, cb);
        // normalize to keep the oracle's theta2 range valid
        double peak = 0.0;
        for (double v : cb.values) peak = std::max(peak, v);
        for (auto& v : ct.values) v /= peak;
        TimeActivityCurve cbn(cb.schedule, cb.values);
        for (auto& v : cbn.values) v /= peak;
        auto bsn = build_basis(cbn, grid);
        for (auto& v : ct.values) v += noise(rng) * 0.05;

        auto fast = fit_voxel(ct, bsn);
        auto slow = brute_force_fit(ct, bsn);
        CHECK(fast.basis_index == slow.basis_index);
        CHECK(fast.residual <= slow.residual + 1e-9);
    }
}

TEST_CASE("fit_parametric maps voxels and honors the mask") {
    auto cb = demo_cb();
    std::vector<double> grid{0.1, 0.3, 0.9, 2.7};
    auto bs = build_basis(cb, grid);

    // two-region phantom: region A and region B TACs
    KineticParams pa{0.5, 0.3, 0.2}, pb{1.0, 0.9, 0.1};
    auto ta = tac_model(pa, cb), tb = tac_model(pb, cb);

    Dims dims{6, 6, 2};
    std::vector<Volume3> frames;
    for (std::size_t f = 0; f < cb.values.size(); ++f) {
        Volume3 v(dims, {2, 2, 2}, 0.0);
        for (int i = 0; i < 36; ++i) v.data[i] = ta.values[f];
        for (int i = 36; i < 72; ++i) v.data[i] = tb.values[f];
        frames.push_back(v);
    }
    DynamicSeries series(cb.schedule, frames);
    auto img = fit_parametric(series, bs, nullptr, 2);

    CHECK(img.k1.data[0] == doctest::Approx(pa.k1).epsilon(0.02));
    CHECK(img.k2.data[0] == doctest::Approx(pa.k2).epsilon(0.02));
    CHECK(img.vb.data[0] == doctest::Approx(pa.vb).epsilon(0.02));
    CHECK(img.k1.data[40] == doctest::Approx(pb.k1).epsilon(0.02));
    CHECK(img.k2.data[40] == doctest::Approx(pb.k2).epsilon(0.02));
    CHECK(img.vb.data[40] == doctest::Approx(pb.vb).epsilon(0.02));

    // homogeneous region is constant
    for (int i = 1; i < 36; ++i) CHECK(img.k1.data[i] == doctest::Approx(img.k1.data[0]));

    // thread count does not change results
    auto img1 = fit_parametric(series, bs, nullptr, 1);
    CHECK(img1.k1.data == img.k1.data);
    CHECK(img1.residual.data == img.residual.data);

    // mask: unmasked voxels zero-filled
    std::vector<std::uint8_t> m(72, 0);
    m[3] = 1;
    VoiMask mask(dims, m, "one");
    auto masked = fit_parametric(series, bs, &mask, 2);
    CHECK(masked.k1.data[3] == img.k1.data[3]);
    CHECK(masked.k1.data[4] == 0.0);
    CHECK(masked.residual.data[4] == 0.0);
}

TEST_CASE("renkin-crone forward, asymptotes, inversion") {
    // direct evaluation with the stated constants
    CHECK(renkin_crone_forward(1.0) ==
          doctest::Approx(1.0 - 0.74 * std::exp(-0.51)).epsilon(1e-12));

    // extraction limits
    CHECK(renkin_crone_forward(1e-4) / 1e-4 == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(renkin_crone_forward(1e6) / 1e6 == doctest::Approx(0.26).epsilon(1e-6));

    // strictly increasing on a grid
    double prev = 0.0;
    for (int i = 1; i <= 1000; ++i) {
        const double v = renkin_crone_forward(0.1 * i);
        CHECK(v > prev);
        prev = v;
    }

    // inversion roundtrip over k1 in [0.05, 3] on 100 points
    for (int i = 0; i < 100; ++i) {
        const double mbf_true = 0.05 + (3.0 - 0.05) * i / 99.0;
        const double k1 = renkin_crone_forward(mbf_true);
        const double mbf = mbf_from_k1(k1);
        CHECK(std::abs(mbf - mbf_true) < 1e-6);
        CHECK(std::abs(renkin_crone_forward(mbf) - k1) < 1e-8);
    }

    // monotone inversion
    CHECK(mbf_from_k1(0.6) > mbf_from_k1(0.3));
    CHECK_THROWS(mbf_from_k1(0.0));
    CHECK_THROWS(renkin_crone_forward(0.0));
}

TEST_CASE("water MBF and MFR") {
    CHECK(water_mbf(1.0) == doctest::Approx(0.91).epsilon(1e-15));
    CHECK(water_mbf(0.0) == 0.0);
    CHECK(water_mbf(2.0) == doctest::Approx(2.0 * water_mbf(1.0)).epsilon(1e-15));
    CHECK_THROWS(water_mbf(-0.1));

    CHECK(mfr(2.0, 1.0) == doctest::Approx(2.0));
    CHECK(mfr(1.3, 1.3) == doctest::Approx(1.0));
    CHECK(mfr(3.0 * 1.7, 1.5 * 1.7) == doctest::Approx(mfr(3.0, 1.5)).epsilon(1e-15));
    CHECK_THROWS(mfr(1.0, 0.0));
}
