#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "rbpet/kernel_ops.hpp"
#include "rbpet/rng.hpp"
#include "rbpet/selfsup.hpp"

using namespace rbpet;

namespace {

Volume3 random_volume(Dims dims, std::uint64_t seed, double lo = 0.0, double hi = 10.0) {
    auto rng = make_rng(seed);
    std::uniform_real_distribution<double> uni(lo, hi);
    Volume3 v(dims, {1, 1, 1}, 0.0);
    for (auto& x : v.data) x = uni(rng);
    return v;
}

ConvWeights random_weights(int k, int c_in, int c_out, std::uint64_t seed) {
    ConvWeights w;
    w.k = k;
    w.c_in = c_in;
    w.c_out = c_out;
    auto rng = make_rng(seed);
    std::normal_distribution<double> gauss(0.0, 0.3);
    w.w.resize(w.w_count());
    for (auto& x : w.w) x = gauss(rng);
    w.b.resize(c_out);
    for (auto& x : w.b) x = gauss(rng);
    return w;
}

AttentionDense random_dense(int hidden, int out, std::uint64_t seed) {
    AttentionDense d;
    d.hidden = hidden;
    d.out = out;
    auto rng = make_rng(seed);
    std::normal_distribution<double> gauss(0.0, 0.5);
    d.w1.resize(hidden);
    d.b1.resize(hidden);
    d.w2.resize(std::size_t(out) * hidden);
    d.b2.resize(out);
    for (auto* vec : {&d.w1, &d.b1, &d.w2, &d.b2})
        for (auto& x : *vec) x = gauss(rng);
    return d;
}

}  // namespace

TEST_CASE("n2v_mask fraction, determinism, zero propagation") {
    auto vol = random_volume({16, 16, 16}, 5);

    // empirical masked share within [0.45, 0.55] over 100 seeds
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto [masked, pattern] = n2v_mask(vol, 0.5, seed);
        const double f = pattern.masked_fraction();
        CHECK(f > 0.45);
        CHECK(f < 0.55);
        for (std::size_t i = 0; i < vol.data.size(); ++i)
            CHECK(masked.data[i] == (pattern.masked[i] ? 0.0 : vol.data[i]));
    }

    // same seed twice -> identical pattern
    auto [m1, p1] = n2v_mask(vol, 0.5, 42);
    auto [m2, p2] = n2v_mask(vol, 0.5, 42);
    CHECK(p1.masked == p2.masked);
    CHECK(m1.data == m2.data);

    // all-zero volume stays all-zero
    Volume3 zeros({8, 8, 8}, {1, 1, 1}, 0.0);
    auto [mz, pz] = n2v_mask(zeros, 0.5, 7);
    for (double v : mz.data) CHECK(v == 0.0);

    CHECK_THROWS(n2v_mask(vol, 0.0, 1));
    CHECK_THROWS(n2v_mask(vol, 1.0, 1));
}

TEST_CASE("ema_update fixed point, direct value, limits") {
    std::vector<double> t{1.0, 1.0}, s{1.0, 1.0};
    ema_update(t, s, 0.99);
    CHECK(t[0] == 1.0);  // theta_T == theta_S is a fixed point

    t = {1.0};
    s = {0.0};
    ema_update(t, s, 0.99);
    CHECK(t[0] == doctest::Approx(0.99).epsilon(1e-15));

    t = {5.0};
    s = {-3.0};
    ema_update(t, s, 0.0);
    CHECK(t[0] == -3.0);

    std::vector<double> bad{1.0, 2.0, 3.0};
    CHECK_THROWS(ema_update(bad, std::vector<double>{1.0}, 0.5));
}

TEST_CASE("ema geometric convergence identity is exact") {
    // ||theta_T(t) - theta_S|| = alpha^t ||theta_T(0) - theta_S||
    const double alpha = 0.99;
    std::vector<double> theta_t{3.0, -2.0, 0.5};
    const std::vector<double> theta_s{1.0, 1.0, 1.0};
    auto norm_diff = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < theta_t.size(); ++i)
            s += (theta_t[i] - theta_s[i]) * (theta_t[i] - theta_s[i]);
        return std::sqrt(s);
    };
    const double d0 = norm_diff();
    for (int step = 1; step <= 50; ++step) {
        ema_update(theta_t, theta_s, alpha);
        CHECK(norm_diff() == doctest::Approx(std::pow(alpha, step) * d0).epsilon(1e-12));
    }
}

TEST_CASE("teacher_pseudo_label mean and linearity") {
    auto x = random_volume({8, 8, 4}, 9);
    VolumeModel identity = [](const Volume3& v) { return v; };

    // M=1: pseudo-label is the single pass
    auto one = teacher_pseudo_label(identity, x, 1, 3);
    CHECK(one.per_pass.size() == 1);
    CHECK(one.mean.data == one.per_pass[0].data);

    // deterministic model, fixed masks: mean equals hand-computed average
    auto pl = teacher_pseudo_label(identity, x, 4, 3);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double avg = 0.0;
        for (const auto& p : pl.per_pass) avg += p.data[i];
        avg /= 4.0;
        CHECK(pl.mean.data[i] == doctest::Approx(avg).epsilon(1e-15));
    }

    // identity model on a constant volume: per-voxel expectation c*(1-fraction)
    Volume3 c({12, 12, 12}, {1, 1, 1}, 2.0);
    double grand = 0.0;
    int trials = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto p = teacher_pseudo_label(identity, c, 8, seed);
        for (double v : p.mean.data) grand += v;
        trials += int(p.mean.data.size());
    }
    CHECK(grand / trials == doctest::Approx(1.0).epsilon(0.02));  // 2.0 * 0.5

    // linear model: mean of passes equals model(mean of masked inputs)
    auto k = RangeKernel::normalized(Volume3({3, 3, 3}, {1, 1, 1}, 1.0));
    VolumeModel linear = [&](const Volume3& v) {
        return convolve3(v, k, {Padding::Reflect, ConvBackend::Direct});
    };
    std::vector<Volume3> masked_inputs;
    for (int m = 0; m < 4; ++m)
        masked_inputs.push_back(n2v_mask(x, 0.5, derive_seed(11, m)).first);
    Volume3 mean_in(x.dims, x.voxel, 0.0);
    for (const auto& mi : masked_inputs)
        for (std::size_t i = 0; i < mi.data.size(); ++i) mean_in.data[i] += mi.data[i] / 4.0;
    auto expected = linear(mean_in);
    auto pl2 = teacher_pseudo_label(linear, x, 4, 11);
    for (std::size_t i = 0; i < expected.data.size(); ++i)
        CHECK(pl2.mean.data[i] == doctest::Approx(expected.data[i]).epsilon(1e-10));

    CHECK_THROWS(teacher_pseudo_label(identity, x, 0, 1));
}

TEST_CASE("teacher_uncertainty dispersion and range") {
    // all passes identical -> u = 0 everywhere
    auto x = random_volume({6, 6, 4}, 13);
    std::vector<Volume3> same{x, x, x};
    auto u0 = teacher_uncertainty(same, x);
    for (double v : u0.data) CHECK(v == 0.0);

    // two passes (0, 2) at one voxel: MAD 1 before normalization; that voxel
    // has the largest dispersion so its u is MAD/(MAD+eps) ~ 1
    Volume3 a({4, 4, 2}, {1, 1, 1}, 5.0), b({4, 4, 2}, {1, 1, 1}, 5.0);
    a.data[7] = 0.0;
    b.data[7] = 2.0;
    Volume3 mean({4, 4, 2}, {1, 1, 1}, 5.0);
    mean.data[7] = 1.0;
    auto u = teacher_uncertainty({a, b}, mean);
    CHECK(u.data[7] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(u.data[7] < 1.0);
    CHECK(u.data[0] == 0.0);

    // u in [0, 1) for random passes
    std::vector<Volume3> passes;
    Volume3 m({6, 6, 4}, {1, 1, 1}, 0.0);
    for (int i = 0; i < 5; ++i) {
        passes.push_back(random_volume({6, 6, 4}, 20 + i));
        for (std::size_t j = 0; j < m.data.size(); ++j)
            m.data[j] += passes.back().data[j] / 5.0;
    }
    auto ur = teacher_uncertainty(passes, m);
    for (double v : ur.data) {
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }

    CHECK_THROWS(teacher_uncertainty({x}, x));
}

TEST_CASE("consistency_loss hand examples and reduction to MAE") {
    auto yt = random_volume({5, 5, 4}, 31);
    auto ys = random_volume({5, 5, 4}, 32);
    Volume3 u0(yt.dims, yt.voxel, 0.0);

    // y_hat_T == y_S -> 0
    CHECK(consistency_loss(yt, yt, u0) == 0.0);

    // u == 0 -> plain MAE, exact
    CHECK(consistency_loss(yt, ys, u0) == doctest::Approx(mae(yt, ys)).epsilon(1e-15));

    // 2-voxel example: yT=(1,0), yS=(0,0), u=(0.5,0.5) -> 0.5
    Volume3 t2({2, 1, 1}, {1, 1, 1}, 0.0), s2({2, 1, 1}, {1, 1, 1}, 0.0),
        u2({2, 1, 1}, {1, 1, 1}, 0.5);
    t2.data[0] = 1.0;
    CHECK(consistency_loss(t2, s2, u2) == doctest::Approx(0.5).epsilon(1e-15));

    // degenerate u == 1
    Volume3 u1(yt.dims, yt.voxel, 1.0);
    CHECK_THROWS(consistency_loss(yt, ys, u1));
}

TEST_CASE("consistency_loss invariant under joint voxel permutation") {
    auto yt = random_volume({4, 4, 2}, 41);
    auto ys = random_volume({4, 4, 2}, 42);
    auto u = random_volume({4, 4, 2}, 43, 0.0, 0.9);
    const double ref = consistency_loss(yt, ys, u);

    // reverse all three jointly
    Volume3 yt2 = yt, ys2 = ys, u2 = u;
    std::reverse(yt2.data.begin(), yt2.data.end());
    std::reverse(ys2.data.begin(), ys2.data.end());
    std::reverse(u2.data.begin(), u2.data.end());
    CHECK(consistency_loss(yt2, ys2, u2) == doctest::Approx(ref).epsilon(1e-13));
}

TEST_CASE("noise_encoding values and bound") {
    Volume3 zeros({4, 4, 4}, {1, 1, 1}, 0.0);
    CHECK(noise_encoding(zeros).value == doctest::Approx(1.0).epsilon(1e-15));  // sin0+cos0

    // total = pi/2 spread over identical nonzero voxels -> SD 0 -> 1 + 1 = 2
    Volume3 v({2, 1, 1}, {1, 1, 1}, std::numbers::pi / 4.0);
    CHECK(noise_encoding(v).value == doctest::Approx(2.0).epsilon(1e-12));

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const double e = noise_encoding(random_volume({6, 6, 6}, 100 + seed, -50.0, 50.0)).value;
        CHECK(e >= -2.0);
        CHECK(e <= 2.0);
    }
}

TEST_CASE("denoise_loss composition and bookkeeping") {
    auto x = random_volume({5, 5, 4}, 51);
    auto ys = random_volume({5, 5, 4}, 52);
    auto yt = random_volume({5, 5, 4}, 53);
    auto u = random_volume({5, 5, 4}, 54, 0.0, 0.8);

    // perfect student on clean data -> total 0 with default hook
    Volume3 u0(x.dims, x.voxel, 0.0);
    auto perfect = denoise_loss(x, x, x, u0);
    CHECK(perfect.total == 0.0);

    // lambda_a = 0 -> total = tsc + mae
    auto r0 = denoise_loss(x, ys, yt, u, 0.0);
    CHECK(r0.total == doctest::Approx(r0.tsc + r0.mae_identity).epsilon(1e-15));

    // total equals recomputed weighted sum within 1e-12, with a nonzero hook
    AdversarialHook hook = [](const Volume3& v) { return v.data[0] * v.data[0]; };
    auto r = denoise_loss(x, ys, yt, u, 0.05, hook);
    CHECK(std::abs(r.total - (r.tsc + r.lambda_a * r.adv + r.mae_identity)) < 1e-12);
    CHECK(r.adv == ys.data[0] * ys.data[0]);
}

TEST_CASE("prc_losses fixed points and composition") {
    auto ys = random_volume({10, 10, 8}, 61);
    auto fdg = random_volume({10, 10, 8}, 62);
    auto delta = delta_kernel({3, 3, 3}, {1, 1, 1});
    VolumeModel identity = [](const Volume3& v) { return v; };

    // H_rb = delta and y_prc = y_S: prc = 0, idt = 0; identity model with
    // delta H_f2rb: pkc = 0
    auto r = prc_losses(ys, ys, delta, fdg, delta, 0.5, identity);
    CHECK(r.prc == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.idt == 0.0);
    CHECK(r.pkc == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::abs(r.total - (r.prc + r.lambda_b * r.idt + r.pkc)) < 1e-12);

    // y_prc such that y_prc (x) H_rb = y_S exactly: take y_prc random, blur it
    Volume3 vol({15, 15, 15}, {1, 1, 1}, 1.0);
    const int c = 7;
    Volume3 g({7, 7, 7}, {1, 1, 1}, 0.0);
    for (int z = 0; z < 7; ++z)
        for (int y = 0; y < 7; ++y)
            for (int x = 0; x < 7; ++x)
                g.at(x, y, z) = std::exp(-((x - 3) * (x - 3) + (y - 3) * (y - 3) +
                                           (z - 3) * (z - 3)) /
                                         4.0);
    auto hk = RangeKernel::normalized(std::move(g));
    auto y_prc = random_volume({12, 12, 10}, 63);
    auto blurred = convolve3(y_prc, hk, {Padding::Reflect, ConvBackend::Fft});
    auto r2 = prc_losses(blurred, y_prc, hk, random_volume({12, 12, 10}, 64), delta, 0.5, identity);
    CHECK(r2.prc == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(r2.idt > 0.0);
    (void)c;
}

TEST_CASE("loss_report_jsonl emits valid single-line json") {
    LossReport r;
    r.tsc = 1.5;
    r.total = 2.0;
    auto line = loss_report_jsonl(r, 7);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(line.find("\"step\":7") != std::string::npos);
    CHECK(line.find("\"tsc\":1.5") != std::string::npos);
}

TEST_CASE("attention_weights ranges, zero case, finite-difference gradient") {
    AttentionParams p;
    p.spa = random_dense(4, 27, 71);
    p.in = random_dense(4, 2, 72);
    p.out = random_dense(4, 3, 73);

    auto t = attention_weights(0.37, p);
    REQUIRE(t.att_spa.size() == 27);
    REQUIRE(t.att_in.size() == 2);
    REQUIRE(t.att_out.size() == 3);
    for (const auto* vec : {&t.att_spa, &t.att_in, &t.att_out})
        for (double a : *vec) {
            CHECK(a > 0.0);
            CHECK(a < 1.0);
        }

    // W2 = 0, b2 = 0 -> all attentions = sigmoid(0) = 0.5
    AttentionParams pz = p;
    std::fill(pz.spa.w2.begin(), pz.spa.w2.end(), 0.0);
    std::fill(pz.spa.b2.begin(), pz.spa.b2.end(), 0.0);
    auto tz = attention_weights(1.23, pz);
    for (double a : tz.att_spa) CHECK(a == 0.5);

    // analytic d att / d encoding vs central differences
    const double e = 0.37, h = 1e-4;
    auto g = attention_encoding_gradient(e, p);
    auto plus = attention_weights(e + h, p);
    auto minus = attention_weights(e - h, p);
    auto check_head = [&](const std::vector<double>& ga, const std::vector<double>& pa,
                          const std::vector<double>& ma) {
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const double fd = (pa[i] - ma[i]) / (2.0 * h);
            const double scale = std::max({std::abs(fd), std::abs(ga[i]), 1e-8});
            CHECK(std::abs(fd - ga[i]) / scale < 1e-4);
        }
    };
    check_head(g.att_spa, plus.att_spa, minus.att_spa);
    check_head(g.att_in, plus.att_in, minus.att_in);
    check_head(g.att_out, plus.att_out, minus.att_out);
}

TEST_CASE("dynamic_conv reduces to plain convolution at unit attentions") {
    auto w = random_weights(3, 2, 3, 81);
    FeatureMap in(2, {6, 6, 4});
    auto rv = random_volume({6, 6, 4}, 82);
    auto rv2 = random_volume({6, 6, 4}, 83);
    std::copy(rv.data.begin(), rv.data.end(), in.data.begin());
    std::copy(rv2.data.begin(), rv2.data.end(), in.data.begin() + rv.data.size());

    auto a = plain_conv(in, w);
    auto b = dynamic_conv(in, w, unit_attention(3, 2, 3));
    for (std::size_t i = 0; i < a.data.size(); ++i)
        CHECK(std::abs(a.data[i] - b.data[i]) < 1e-12);
}

TEST_CASE("dynamic_conv zero attentions give bias, scalars factorize") {
    auto w = random_weights(3, 1, 2, 91);
    FeatureMap in(1, {5, 5, 4});
    auto rv = random_volume({5, 5, 4}, 92);
    in.data = rv.data;

    // all attentions 0 -> output = bias everywhere
    AttentionTriple zero;
    zero.att_spa.assign(27, 0.0);
    zero.att_in.assign(1, 0.0);
    zero.att_out.assign(2, 0.0);
    auto bias_only = dynamic_conv(in, w, zero);
    for (int co = 0; co < 2; ++co)
        for (int z = 0; z < 4; ++z)
            for (int y = 0; y < 5; ++y)
                for (int x = 0; x < 5; ++x)
                    CHECK(bias_only.at(co, x, y, z) == doctest::Approx(w.b[co]).epsilon(1e-14));

    // scalar attentions a, b, c scale the linear part by (a+b+c)/3
    AttentionTriple sc;
    const double a = 0.3, bb = 0.6, cc = 0.9;
    sc.att_spa.assign(27, a);
    sc.att_in.assign(1, bb);
    sc.att_out.assign(2, cc);
    auto scaled = dynamic_conv(in, w, sc);
    auto plain = plain_conv(in, w);
    const double factor = (a + bb + cc) / 3.0;
    for (int co = 0; co < 2; ++co)
        for (std::size_t i = 0; i < in.dims.count(); ++i) {
            const std::size_t idx = std::size_t(co) * in.dims.count() + i;
            const double expect = (plain.data[idx] - w.b[co]) * factor + w.b[co];
            CHECK(scaled.data[idx] == doctest::Approx(expect).epsilon(1e-11));
        }
}

TEST_CASE("conv shape errors") {
    auto w = random_weights(3, 2, 1, 95);
    FeatureMap in(1, {5, 5, 4});  // channel mismatch
    CHECK_THROWS(plain_conv(in, w));

    FeatureMap in2(2, {5, 5, 4});
    AttentionTriple bad = unit_attention(3, 2, 1);
    bad.att_spa.resize(10);
    CHECK_THROWS(dynamic_conv(in2, w, bad));
}
