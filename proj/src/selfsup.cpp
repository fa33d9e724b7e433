#include "rbpet/selfsup.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "rbpet/kernel_ops.hpp"
#include "rbpet/rng.hpp"

namespace rbpet {

std::pair<Volume3, MaskPattern> n2v_mask(const Volume3& vol, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("n2v_mask: fraction must be in (0,1)");
    MaskPattern pattern;
    pattern.dims = vol.dims;
    pattern.target_fraction = fraction;
    pattern.seed = seed;
    pattern.masked.resize(vol.data.size(), 0);

    auto rng = make_rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    Volume3 out = vol;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        if (uni(rng) < fraction) {
            pattern.masked[i] = 1;
            out.data[i] = 0.0;
        }
    }
    return {std::move(out), std::move(pattern)};
}

void ema_update(std::vector<double>& theta_teacher, std::span<const double> theta_student,
                double alpha) {
    if (theta_teacher.size() != theta_student.size())
        throw std::invalid_argument("ema_update: parameter shape mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("ema_update: alpha must be in [0,1]");
    for (std::size_t i = 0; i < theta_teacher.size(); ++i)
        theta_teacher[i] = alpha * theta_teacher[i] + (1.0 - alpha) * theta_student[i];
}

PseudoLabel teacher_pseudo_label(const VolumeModel& model, const Volume3& x, int m_passes,
                                 std::uint64_t seed, double mask_fraction) {
    if (m_passes < 1) throw std::invalid_argument("teacher_pseudo_label: M must be >= 1");
    PseudoLabel out;
    out.per_pass.reserve(m_passes);
    for (int m = 0; m < m_passes; ++m) {
        auto [masked, pattern] = n2v_mask(x, mask_fraction, derive_seed(seed, std::uint64_t(m)));
        out.per_pass.push_back(model(masked));
        if (!out.per_pass.back().same_geometry(x))
            throw std::invalid_argument("teacher_pseudo_label: model changed geometry");
    }
    out.mean = Volume3(x.dims, x.voxel, 0.0);
    for (const auto& p : out.per_pass)
        for (std::size_t i = 0; i < p.data.size(); ++i) out.mean.data[i] += p.data[i];
    for (auto& v : out.mean.data) v /= double(m_passes);
    return out;
}

Volume3 teacher_uncertainty(const std::vector<Volume3>& per_pass, const Volume3& mean) {
    if (per_pass.size() < 2)
        throw std::invalid_argument("teacher_uncertainty: needs at least 2 passes");
    for (const auto& p : per_pass)
        if (!p.same_geometry(mean))
            throw std::invalid_argument("teacher_uncertainty: geometry mismatch");

    // per-voxel mean absolute deviation about the pass mean
    Volume3 mad(mean.dims, mean.voxel, 0.0);
    for (const auto& p : per_pass)
        for (std::size_t i = 0; i < mad.data.size(); ++i)
            mad.data[i] += std::abs(p.data[i] - mean.data[i]);
    for (auto& v : mad.data) v /= double(per_pass.size());

    const double max_mad = *std::max_element(mad.data.begin(), mad.data.end());
    const double denom = max_mad + 1e-12;
    for (auto& v : mad.data) v /= denom;  // into [0, 1)
    return mad;
}

double consistency_loss(const Volume3& y_teacher, const Volume3& y_student, const Volume3& u) {
    if (!y_teacher.same_geometry(y_student) || !y_teacher.same_geometry(u))
        throw std::invalid_argument("consistency_loss: geometry mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < u.data.size(); ++i) {
        const double w = 1.0 - u.data[i];
        num += w * std::abs(y_teacher.data[i] - y_student.data[i]);
        den += w;
    }
    if (den <= 0.0) throw std::runtime_error("consistency_loss: degenerate weights (u == 1)");
    return num / den;
}

double mae(const Volume3& a, const Volume3& b) {
    if (!a.same_geometry(b)) throw std::invalid_argument("mae: geometry mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
    return s / double(a.data.size());
}

NoiseEncoding noise_encoding(const Volume3& vol) {
    double total = 0.0;
    double sum = 0.0, sum2 = 0.0;
    std::size_t n_nonzero = 0;
    for (double v : vol.data) {
        total += v;
        if (v != 0.0) {
            sum += v;
            sum2 += v * v;
            ++n_nonzero;
        }
    }
    double sd = 0.0;
    if (n_nonzero > 0) {
        const double m = sum / double(n_nonzero);
        sd = std::sqrt(std::max(0.0, sum2 / double(n_nonzero) - m * m));
    }
    return {std::sin(total) + std::cos(sd)};
}

LossReport denoise_loss(const Volume3& x, const Volume3& y_student, const Volume3& y_teacher,
                        const Volume3& u, double lambda_a, const AdversarialHook& adv_hook) {
    LossReport r;
    r.lambda_a = lambda_a;
    r.tsc = consistency_loss(y_teacher, y_student, u);
    r.mae_identity = mae(x, y_student);
    r.adv = adv_hook ? adv_hook(y_student) : 0.0;
    r.total = r.tsc + lambda_a * r.adv + r.mae_identity;
    return r;
}

LossReport prc_losses(const Volume3& y_student, const Volume3& y_prc, const RangeKernel& h_rb,
                      const Volume3& fdg_img, const RangeKernel& h_f2rb, double lambda_b,
                      const VolumeModel& model) {
    if (!y_student.same_geometry(y_prc))
        throw std::invalid_argument("prc_losses: student/prc geometry mismatch");
    LossReport r;
    r.lambda_b = lambda_b;
    const ConvSpec spec{Padding::Reflect, ConvBackend::Fft};
    r.prc = mae(convolve3(y_prc, h_rb, spec), y_student);
    r.idt = mae(y_student, y_prc);
    Volume3 fdg_blurred = convolve3(fdg_img, h_f2rb, spec);
    r.pkc = mae(model(fdg_blurred), fdg_img);
    r.total = r.prc + lambda_b * r.idt + r.pkc;
    return r;
}

std::string loss_report_jsonl(const LossReport& r, long step) {
    nlohmann::json j{{"step", step},
                     {"tsc", r.tsc},
                     {"mae", r.mae_identity},
                     {"prc", r.prc},
                     {"idt", r.idt},
                     {"pkc", r.pkc},
                     {"adv", r.adv},
                     {"lambda_a", r.lambda_a},
                     {"lambda_b", r.lambda_b},
                     {"total", r.total}};
    return j.dump();
}

// ---------------------------------------------------------------------------
// Dynamic convolution
// ---------------------------------------------------------------------------

FeatureMap to_feature_map(const Volume3& v) {
    FeatureMap f(1, v.dims);
    f.data = v.data;
    return f;
}

Volume3 to_volume(const FeatureMap& f, VoxelSize voxel) {
    if (f.channels != 1) throw std::invalid_argument("to_volume: expected a single channel");
    Volume3 v(f.dims, voxel, 0.0);
    v.data = f.data;
    return v;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void dense_forward(const AttentionDense& d, double e, std::vector<double>& out,
                   std::vector<double>* grad_e) {
    if (int(d.w1.size()) != d.hidden || int(d.b1.size()) != d.hidden ||
        int(d.w2.size()) != d.out * d.hidden || int(d.b2.size()) != d.out)
        throw std::invalid_argument("attention_weights: dense layer shape mismatch");
    std::vector<double> h(d.hidden), hmask(d.hidden);
    for (int i = 0; i < d.hidden; ++i) {
        const double pre = d.w1[i] * e + d.b1[i];
        h[i] = std::max(pre, 0.0);
        hmask[i] = pre > 0.0 ? 1.0 : 0.0;
    }
    out.resize(d.out);
    if (grad_e) grad_e->resize(d.out);
    for (int o = 0; o < d.out; ++o) {
        double pre = d.b2[o];
        for (int i = 0; i < d.hidden; ++i) pre += d.w2[std::size_t(o) * d.hidden + i] * h[i];
        const double s = sigmoid(pre);
        out[o] = s;
        if (grad_e) {
            double dpre = 0.0;
            for (int i = 0; i < d.hidden; ++i)
                dpre += d.w2[std::size_t(o) * d.hidden + i] * hmask[i] * d.w1[i];
            (*grad_e)[o] = s * (1.0 - s) * dpre;
        }
    }
}

void check_conv_shapes(const FeatureMap& in, const ConvWeights& w, const AttentionTriple* att) {
    if (w.k < 1 || w.k % 2 == 0) throw std::invalid_argument("conv: kernel edge must be odd");
    if (in.channels != w.c_in) throw std::invalid_argument("conv: input channel mismatch");
    if (w.w.size() != w.w_count() || int(w.b.size()) != w.c_out)
        throw std::invalid_argument("conv: weight shape mismatch");
    if (att) {
        if (int(att->att_spa.size()) != w.k * w.k * w.k ||
            int(att->att_in.size()) != w.c_in || int(att->att_out.size()) != w.c_out)
            throw std::invalid_argument("dynamic_conv: attention shape mismatch");
    }
}

// reflect (half-sample) index into [0, n)
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    int j = ((i % period) + period) % period;
    return j < n ? j : period - 1 - j;
}

FeatureMap conv_impl(const FeatureMap& in, const ConvWeights& w, const double* kernel) {
    const int r = w.k / 2;
    const Dims d = in.dims;
    FeatureMap out(w.c_out, d);
    for (int co = 0; co < w.c_out; ++co) {
        for (int z = 0; z < d.nz; ++z)
            for (int y = 0; y < d.ny; ++y)
                for (int x = 0; x < d.nx; ++x) {
                    double acc = w.b[co];
                    for (int ci = 0; ci < w.c_in; ++ci)
                        for (int kz = 0; kz < w.k; ++kz) {
                            const int zz = reflect_index(z + kz - r, d.nz);
                            for (int ky = 0; ky < w.k; ++ky) {
                                const int yy = reflect_index(y + ky - r, d.ny);
                                for (int kx = 0; kx < w.k; ++kx) {
                                    const int xx = reflect_index(x + kx - r, d.nx);
                                    acc += kernel[w.w_index(co, ci, kz, ky, kx)] *
                                           in.at(ci, xx, yy, zz);
                                }
                            }
                        }
                    out.at(co, x, y, z) = acc;
                }
    }
    return out;
}

}  // namespace

AttentionTriple attention_weights(double encoding, const AttentionParams& p) {
    AttentionTriple t;
    dense_forward(p.spa, encoding, t.att_spa, nullptr);
    dense_forward(p.in, encoding, t.att_in, nullptr);
    dense_forward(p.out, encoding, t.att_out, nullptr);
    return t;
}

AttentionTriple attention_encoding_gradient(double encoding, const AttentionParams& p) {
    AttentionTriple g;
    std::vector<double> tmp;
    dense_forward(p.spa, encoding, tmp, &g.att_spa);
    dense_forward(p.in, encoding, tmp, &g.att_in);
    dense_forward(p.out, encoding, tmp, &g.att_out);
    return g;
}

AttentionTriple unit_attention(int k, int c_in, int c_out) {
    AttentionTriple t;
    t.att_spa.assign(std::size_t(k) * k * k, 1.0);
    t.att_in.assign(c_in, 1.0);
    t.att_out.assign(c_out, 1.0);
    return t;
}

FeatureMap plain_conv(const FeatureMap& in, const ConvWeights& w) {
    check_conv_shapes(in, w, nullptr);
    return conv_impl(in, w, w.w.data());
}

FeatureMap dynamic_conv(const FeatureMap& in, const ConvWeights& w, const AttentionTriple& att) {
    check_conv_shapes(in, w, &att);
    std::vector<double> mod(w.w.size());
    const int kk = w.k * w.k * w.k;
    for (int co = 0; co < w.c_out; ++co)
        for (int ci = 0; ci < w.c_in; ++ci)
            for (int s = 0; s < kk; ++s) {
                const std::size_t idx = (std::size_t(co) * w.c_in + ci) * kk + s;
                mod[idx] = w.w[idx] *
                           (att.att_spa[s] + att.att_in[ci] + att.att_out[co]) / 3.0;
            }
    return conv_impl(in, w, mod.data());
}

}  // namespace rbpet
