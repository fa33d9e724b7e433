#include "rbpet/models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <fstream>
#include <mutex>
#include <random>
#include <stdexcept>

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include "rbpet/rng.hpp"

namespace rbpet {

namespace {

std::mutex g_models_fftw_mutex;  // FFTW plan creation is not thread-safe

inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    int j = ((i % period) + period) % period;
    return j < n ? j : period - 1 - j;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::size_t dense_param_count(const AttentionDense& d) { return d.param_count(); }

std::size_t layer_param_count(const Layer& l) {
    std::size_t n = l.conv.w_count() + l.conv.c_out;
    if (l.dynamic)
        n += dense_param_count(l.att.spa) + dense_param_count(l.att.in) +
             dense_param_count(l.att.out);
    return n;
}

void append_dense(const AttentionDense& d, std::vector<double>& out) {
    out.insert(out.end(), d.w1.begin(), d.w1.end());
    out.insert(out.end(), d.b1.begin(), d.b1.end());
    out.insert(out.end(), d.w2.begin(), d.w2.end());
    out.insert(out.end(), d.b2.begin(), d.b2.end());
}

std::size_t read_dense(AttentionDense& d, std::span<const double> p, std::size_t off) {
    auto take = [&](std::vector<double>& v) {
        std::copy(p.begin() + off, p.begin() + off + v.size(), v.begin());
        off += v.size();
    };
    take(d.w1);
    take(d.b1);
    take(d.w2);
    take(d.b2);
    return off;
}

struct DenseActivation {
    std::vector<double> h;     // relu(w1 e + b1)
    std::vector<double> mask;  // relu derivative
    std::vector<double> att;   // sigmoid outputs
};

DenseActivation dense_run(const AttentionDense& d, double e) {
    DenseActivation a;
    a.h.resize(d.hidden);
    a.mask.resize(d.hidden);
    a.att.resize(d.out);
    for (int i = 0; i < d.hidden; ++i) {
        const double pre = d.w1[i] * e + d.b1[i];
        a.h[i] = std::max(pre, 0.0);
        a.mask[i] = pre > 0.0 ? 1.0 : 0.0;
    }
    for (int o = 0; o < d.out; ++o) {
        double pre = d.b2[o];
        for (int i = 0; i < d.hidden; ++i) pre += d.w2[std::size_t(o) * d.hidden + i] * a.h[i];
        a.att[o] = sigmoid(pre);
    }
    return a;
}

// grad_att -> gradients into the dense parameters (written at grad[off..])
void dense_backward(const AttentionDense& d, double e, const DenseActivation& act,
                    std::span<const double> grad_att, std::vector<double>& grad,
                    std::size_t off) {
    const std::size_t o_w1 = off, o_b1 = o_w1 + d.hidden, o_w2 = o_b1 + d.hidden,
                      o_b2 = o_w2 + std::size_t(d.out) * d.hidden;
    std::vector<double> dh(d.hidden, 0.0);
    for (int o = 0; o < d.out; ++o) {
        const double s = act.att[o];
        const double dpre2 = grad_att[o] * s * (1.0 - s);
        grad[o_b2 + o] += dpre2;
        for (int i = 0; i < d.hidden; ++i) {
            grad[o_w2 + std::size_t(o) * d.hidden + i] += dpre2 * act.h[i];
            dh[i] += dpre2 * d.w2[std::size_t(o) * d.hidden + i];
        }
    }
    for (int i = 0; i < d.hidden; ++i) {
        const double dpre1 = dh[i] * act.mask[i];
        grad[o_w1 + i] += dpre1 * e;
        grad[o_b1 + i] += dpre1;
    }
}

// effective kernel (modulated for dynamic layers)
std::vector<double> effective_kernel(const Layer& l, const AttentionTriple& att) {
    if (!l.dynamic) return l.conv.w;
    std::vector<double> mod(l.conv.w.size());
    const int kk = l.conv.k * l.conv.k * l.conv.k;
    for (int co = 0; co < l.conv.c_out; ++co)
        for (int ci = 0; ci < l.conv.c_in; ++ci)
            for (int s = 0; s < kk; ++s) {
                const std::size_t idx = (std::size_t(co) * l.conv.c_in + ci) * kk + s;
                mod[idx] = l.conv.w[idx] *
                           (att.att_spa[s] + att.att_in[ci] + att.att_out[co]) / 3.0;
            }
    return mod;
}

// reflected source index tables: tab[x * k + kx] = reflect(x + kx - r)
std::vector<int> reflect_table(int n, int k) {
    const int r = k / 2;
    std::vector<int> tab(std::size_t(n) * k);
    for (int x = 0; x < n; ++x)
        for (int kx = 0; kx < k; ++kx) tab[std::size_t(x) * k + kx] = reflect_index(x + kx - r, n);
    return tab;
}

FeatureMap conv_forward(const FeatureMap& in, const ConvWeights& w, const double* kernel) {
    const Dims d = in.dims;
    const int k = w.k;
    const auto tx = reflect_table(d.nx, k), ty = reflect_table(d.ny, k), tz = reflect_table(d.nz, k);
    const std::size_t plane = std::size_t(d.nx) * d.ny, chan = plane * d.nz;
    FeatureMap out(w.c_out, d);
    for (int co = 0; co < w.c_out; ++co) {
        double* ochan = out.data.data() + std::size_t(co) * chan;
        for (int ci = 0; ci < w.c_in; ++ci) {
            const double* ichan = in.data.data() + std::size_t(ci) * chan;
            const double* kw = kernel + (std::size_t(co) * w.c_in + ci) * k * k * k;
            for (int z = 0; z < d.nz; ++z)
                for (int y = 0; y < d.ny; ++y) {
                    double* orow = ochan + z * plane + std::size_t(y) * d.nx;
                    for (int kz = 0; kz < k; ++kz) {
                        const double* zplane = ichan + std::size_t(tz[std::size_t(z) * k + kz]) * plane;
                        for (int ky = 0; ky < k; ++ky) {
                            const double* irow =
                                zplane + std::size_t(ty[std::size_t(y) * k + ky]) * d.nx;
                            const double* kk = kw + (std::size_t(kz) * k + ky) * k;
                            for (int x = 0; x < d.nx; ++x) {
                                const int* txr = tx.data() + std::size_t(x) * k;
                                double acc = 0.0;
                                for (int kx = 0; kx < k; ++kx) acc += kk[kx] * irow[txr[kx]];
                                orow[x] += acc;
                            }
                        }
                    }
                }
        }
        for (std::size_t i = 0; i < chan; ++i) ochan[i] += w.b[co];
    }
    return out;
}

// Accumulates dkernel/db and returns grad wrt input for one conv.
FeatureMap conv_backward(const FeatureMap& in, const ConvWeights& w, const double* kernel,
                         const FeatureMap& grad_out, std::vector<double>& dkernel,
                         std::vector<double>& dbias) {
    const Dims d = in.dims;
    const int k = w.k;
    const auto tx = reflect_table(d.nx, k), ty = reflect_table(d.ny, k), tz = reflect_table(d.nz, k);
    const std::size_t plane = std::size_t(d.nx) * d.ny, chan = plane * d.nz;
    FeatureMap gin(w.c_in, d);
    for (int co = 0; co < w.c_out; ++co) {
        const double* gchan = grad_out.data.data() + std::size_t(co) * chan;
        for (std::size_t i = 0; i < chan; ++i) dbias[co] += gchan[i];
        for (int ci = 0; ci < w.c_in; ++ci) {
            const double* ichan = in.data.data() + std::size_t(ci) * chan;
            double* gi = gin.data.data() + std::size_t(ci) * chan;
            const std::size_t kbase = (std::size_t(co) * w.c_in + ci) * k * k * k;
            for (int z = 0; z < d.nz; ++z)
                for (int y = 0; y < d.ny; ++y) {
                    const double* grow = gchan + z * plane + std::size_t(y) * d.nx;
                    for (int kz = 0; kz < k; ++kz) {
                        const std::size_t zoff = std::size_t(tz[std::size_t(z) * k + kz]) * plane;
                        for (int ky = 0; ky < k; ++ky) {
                            const std::size_t yoff =
                                zoff + std::size_t(ty[std::size_t(y) * k + ky]) * d.nx;
                            const double* irow = ichan + yoff;
                            double* girow = gi + yoff;
                            const std::size_t kk = kbase + (std::size_t(kz) * k + ky) * k;
                            for (int x = 0; x < d.nx; ++x) {
                                const double g = grow[x];
                                if (g == 0.0) continue;
                                const int* txr = tx.data() + std::size_t(x) * k;
                                for (int kx = 0; kx < k; ++kx) {
                                    const int xx = txr[kx];
                                    dkernel[kk + kx] += g * irow[xx];
                                    girow[xx] += g * kernel[kk + kx];
                                }
                            }
                        }
                    }
                }
        }
    }
    return gin;
}

AttentionDense init_dense(int hidden, int out, std::mt19937_64& rng) {
    AttentionDense d;
    d.hidden = hidden;
    d.out = out;
    std::normal_distribution<double> gauss(0.0, 0.001);
    d.w1.resize(hidden);
    d.b1.resize(hidden);
    d.w2.resize(std::size_t(out) * hidden);
    d.b2.resize(out);
    for (auto& v : d.w1) v = 1.0 + gauss(rng);  // keep hidden units active
    for (auto& v : d.b1) v = 0.5 + gauss(rng);
    for (auto& v : d.w2) v = gauss(rng);
    for (auto& v : d.b2) v = gauss(rng);
    return d;
}

Layer make_layer(bool dynamic, int c_in, int c_out, bool relu_after, double center_gain,
                 double noise_sd, std::mt19937_64& rng) {
    Layer l;
    l.dynamic = dynamic;
    l.relu_after = relu_after;
    l.conv.k = 3;
    l.conv.c_in = c_in;
    l.conv.c_out = c_out;
    l.conv.w.assign(l.conv.w_count(), 0.0);
    l.conv.b.assign(c_out, 0.0);
    std::normal_distribution<double> gauss(0.0, noise_sd);
    for (auto& v : l.conv.w) v = gauss(rng);
    // near-identity: route each input channel straight through the kernel center
    for (int co = 0; co < c_out; ++co) {
        if (c_in == 1) {
            l.conv.w[l.conv.w_index(co, 0, 1, 1, 1)] += center_gain;
        } else if (c_out == 1) {
            for (int ci = 0; ci < c_in; ++ci)
                l.conv.w[l.conv.w_index(0, ci, 1, 1, 1)] += center_gain / double(c_in);
        } else {
            l.conv.w[l.conv.w_index(co, co % c_in, 1, 1, 1)] += center_gain;
        }
    }
    if (dynamic) {
        const int kk = l.conv.k * l.conv.k * l.conv.k;
        l.att.spa = init_dense(4, kk, rng);
        l.att.in = init_dense(4, c_in, rng);
        l.att.out = init_dense(4, c_out, rng);
    }
    return l;
}

// 3^3 kernel approximating the per-layer factor W^{1/L} of the regularized
// inverse W = H/(H^2 + lambda), normalized to unit DC gain so a stack of L
// such layers composes to roughly W. The fit is the inverse-DFT truncation of
// the factor's spectrum on a 32^3 grid, which is the least-squares 3^3 fit.
std::array<double, 27> wiener_layer_core(const RangeKernel& kernel, double lambda, int n_layers) {
    const int n = 32;
    const std::size_t N = std::size_t(n) * n * n;
    const Dims kd = kernel.vol.dims;
    if (kd.nx > n || kd.ny > n || kd.nz > n)
        throw std::invalid_argument("make_prc_model: kernel too large for the spectral fit grid");
    std::vector<double> grid(N, 0.0);
    const int cx = kd.nx / 2, cy = kd.ny / 2, cz = kd.nz / 2;
    for (int z = 0; z < kd.nz; ++z)
        for (int y = 0; y < kd.ny; ++y)
            for (int x = 0; x < kd.nx; ++x)
                grid[(std::size_t((z - cz + n) % n) * n + (y - cy + n) % n) * n +
                     (x - cx + n) % n] += kernel.vol.at(x, y, z);

    const std::size_t nc = std::size_t(n) * n * (n / 2 + 1);
    std::vector<std::complex<double>> freq(nc);
    {
        std::lock_guard<std::mutex> lock(g_models_fftw_mutex);
        fftw_plan p = fftw_plan_dft_r2c_3d(n, n, n, grid.data(),
                                           reinterpret_cast<fftw_complex*>(freq.data()),
                                           FFTW_ESTIMATE);
        fftw_execute(p);
        fftw_destroy_plan(p);
    }
    const double h0 = freq[0].real();
    if (h0 <= 0.0) throw std::invalid_argument("make_prc_model: kernel has no mass");
    const double w0 = h0 / (h0 * h0 + lambda);
    for (auto& f : freq) {
        const double h = f.real();
        const double w = h / (h * h + lambda);
        f = {std::pow(std::max(w / w0, 1e-3), 1.0 / double(n_layers)), 0.0};
    }
    std::vector<double> lag(N);
    {
        std::lock_guard<std::mutex> lock(g_models_fftw_mutex);
        fftw_plan p = fftw_plan_dft_c2r_3d(n, n, n,
                                           reinterpret_cast<fftw_complex*>(freq.data()),
                                           lag.data(), FFTW_ESTIMATE);
        fftw_execute(p);
        fftw_destroy_plan(p);
    }
    std::array<double, 27> core{};
    double dc = 0.0;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const double v =
                    lag[(std::size_t((dz + n) % n) * n + (dy + n) % n) * n + (dx + n) % n] /
                    double(N);
                core[std::size_t((dz + 1) * 3 + dy + 1) * 3 + dx + 1] = v;
                dc += v;
            }
    // truncation discards the inverse's far surround; restore unit DC gain so
    // the stack stays photometrically neutral
    if (dc <= 0.0) throw std::invalid_argument("make_prc_model: degenerate inverse core");
    for (double& v : core) v /= dc;
    return core;
}

}  // namespace

std::size_t Network::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += layer_param_count(l);
    return n;
}

std::vector<double> Network::params() const {
    std::vector<double> out;
    out.reserve(param_count());
    for (const auto& l : layers) {
        out.insert(out.end(), l.conv.w.begin(), l.conv.w.end());
        out.insert(out.end(), l.conv.b.begin(), l.conv.b.end());
        if (l.dynamic) {
            append_dense(l.att.spa, out);
            append_dense(l.att.in, out);
            append_dense(l.att.out, out);
        }
    }
    return out;
}

void Network::set_params(std::span<const double> p) {
    if (p.size() != param_count()) throw std::invalid_argument("set_params: size mismatch");
    std::size_t off = 0;
    for (auto& l : layers) {
        std::copy(p.begin() + off, p.begin() + off + l.conv.w.size(), l.conv.w.begin());
        off += l.conv.w.size();
        std::copy(p.begin() + off, p.begin() + off + l.conv.b.size(), l.conv.b.begin());
        off += l.conv.b.size();
        if (l.dynamic) {
            off = read_dense(l.att.spa, p, off);
            off = read_dense(l.att.in, p, off);
            off = read_dense(l.att.out, p, off);
        }
    }
}

Network make_denoiser(std::uint64_t seed) {
    auto rng = make_rng(derive_seed(seed, 0xD0));
    Network net;
    // attentions start near sigmoid(0)=0.5, so a center gain of 2 keeps the
    // initial map near the identity
    net.layers.push_back(make_layer(true, 1, 8, true, 2.0, 0.0003, rng));
    net.layers.push_back(make_layer(true, 8, 8, true, 2.0, 0.0003, rng));
    net.layers.push_back(make_layer(true, 8, 1, false, 2.0, 0.0003, rng));
    return net;
}

Network make_prc_model(std::uint64_t seed, const RangeKernel* kernel, double wiener_lambda) {
    auto rng = make_rng(derive_seed(seed, 0xBC0));
    Network net;
    net.layers.push_back(make_layer(false, 1, 8, true, 1.0, 0.0003, rng));
    net.layers.push_back(make_layer(false, 8, 8, true, 1.0, 0.0003, rng));
    net.layers.push_back(make_layer(false, 8, 8, true, 1.0, 0.0003, rng));
    net.layers.push_back(make_layer(false, 8, 8, true, 1.0, 0.0003, rng));
    net.layers.push_back(make_layer(false, 8, 1, false, 1.0, 0.0003, rng));
    if (kernel) {
        const auto c3 = wiener_layer_core(*kernel, wiener_lambda, int(net.layers.size()));
        // swap the plain identity route for the fitted per-layer inverse factor
        for (auto& l : net.layers) {
            for (int co = 0; co < l.conv.c_out; ++co) {
                const int route = l.conv.c_in == 1 ? 0 : (l.conv.c_out == 1 ? -1 : co % l.conv.c_in);
                const double r = l.conv.c_out == 1 ? 1.0 / double(l.conv.c_in) : 1.0;
                const int lo = route < 0 ? 0 : route, hi = route < 0 ? l.conv.c_in - 1 : route;
                for (int ci = lo; ci <= hi; ++ci)
                    for (int dz = 0; dz < 3; ++dz)
                        for (int dy = 0; dy < 3; ++dy)
                            for (int dx = 0; dx < 3; ++dx) {
                                const double delta = (dx == 1 && dy == 1 && dz == 1) ? 1.0 : 0.0;
                                l.conv.w[l.conv.w_index(co, ci, dz, dy, dx)] +=
                                    r * (c3[(dz * 3 + dy) * 3 + dx] - delta);
                            }
            }
        }
    }
    return net;
}

FeatureMap net_forward(const Network& net, const FeatureMap& in, double encoding,
                       ForwardCache* cache) {
    if (net.layers.empty()) throw std::invalid_argument("net_forward: empty network");
    if (cache) {
        cache->encoding = encoding;
        cache->inputs.clear();
        cache->pre_act.clear();
        cache->atts.clear();
    }
    FeatureMap cur = in;
    for (const auto& l : net.layers) {
        if (cur.channels != l.conv.c_in)
            throw std::invalid_argument("net_forward: channel mismatch");
        AttentionTriple att;
        if (l.dynamic) att = attention_weights(encoding, l.att);
        auto kernel = effective_kernel(l, att);
        if (cache) {
            cache->inputs.push_back(cur);
            cache->atts.push_back(att);
        }
        FeatureMap out = conv_forward(cur, l.conv, kernel.data());
        if (cache) cache->pre_act.push_back(out);
        if (l.relu_after)
            for (auto& v : out.data) v = std::max(v, 0.0);
        cur = std::move(out);
    }
    for (double v : cur.data)
        if (!std::isfinite(v)) throw std::runtime_error("net_forward: non-finite activation");
    return cur;
}

FeatureMap net_backward(const Network& net, const ForwardCache& cache, const FeatureMap& grad_out,
                        std::vector<double>& grad_params) {
    if (grad_params.size() != net.param_count())
        throw std::invalid_argument("net_backward: gradient buffer size mismatch");
    // per-layer parameter offsets
    std::vector<std::size_t> offsets(net.layers.size());
    std::size_t off = 0;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        offsets[i] = off;
        off += layer_param_count(net.layers[i]);
    }

    FeatureMap g = grad_out;
    for (int li = int(net.layers.size()) - 1; li >= 0; --li) {
        const Layer& l = net.layers[li];
        const FeatureMap& in = cache.inputs[li];
        const FeatureMap& pre = cache.pre_act[li];
        if (l.relu_after)
            for (std::size_t i = 0; i < g.data.size(); ++i)
                if (pre.data[i] <= 0.0) g.data[i] = 0.0;

        auto kernel = effective_kernel(l, cache.atts[li]);
        std::vector<double> dkernel(l.conv.w.size(), 0.0);
        std::vector<double> dbias(l.conv.c_out, 0.0);
        FeatureMap gin = conv_backward(in, l.conv, kernel.data(), g, dkernel, dbias);

        const std::size_t base = offsets[li];
        const std::size_t nw = l.conv.w.size();
        if (!l.dynamic) {
            for (std::size_t i = 0; i < nw; ++i) grad_params[base + i] += dkernel[i];
        } else {
            const AttentionTriple& att = cache.atts[li];
            const int kk = l.conv.k * l.conv.k * l.conv.k;
            std::vector<double> dspa(kk, 0.0), din(l.conv.c_in, 0.0), dout(l.conv.c_out, 0.0);
            for (int co = 0; co < l.conv.c_out; ++co)
                for (int ci = 0; ci < l.conv.c_in; ++ci)
                    for (int s = 0; s < kk; ++s) {
                        const std::size_t idx = (std::size_t(co) * l.conv.c_in + ci) * kk + s;
                        const double a =
                            (att.att_spa[s] + att.att_in[ci] + att.att_out[co]) / 3.0;
                        grad_params[base + idx] += dkernel[idx] * a;
                        const double datt = dkernel[idx] * l.conv.w[idx] / 3.0;
                        dspa[s] += datt;
                        din[ci] += datt;
                        dout[co] += datt;
                    }
            std::size_t doff = base + nw + l.conv.b.size();
            auto spa_act = dense_run(l.att.spa, cache.encoding);
            dense_backward(l.att.spa, cache.encoding, spa_act, dspa, grad_params, doff);
            doff += dense_param_count(l.att.spa);
            auto in_act = dense_run(l.att.in, cache.encoding);
            dense_backward(l.att.in, cache.encoding, in_act, din, grad_params, doff);
            doff += dense_param_count(l.att.in);
            auto out_act = dense_run(l.att.out, cache.encoding);
            dense_backward(l.att.out, cache.encoding, out_act, dout, grad_params, doff);
        }
        for (int co = 0; co < l.conv.c_out; ++co)
            grad_params[base + nw + co] += dbias[co];

        g = std::move(gin);
    }
    for (double v : grad_params)
        if (!std::isfinite(v)) throw std::runtime_error("net_backward: non-finite gradient");
    return g;
}

Volume3 apply_model(const Network& net, const Volume3& vol) {
    const double enc = noise_encoding(vol).value;
    auto out = net_forward(net, to_feature_map(vol), enc, nullptr);
    return to_volume(out, vol.voxel);
}

// ---------------------------------------------------------------------------
// Reflect-padded kernel convolution with exact adjoint
// ---------------------------------------------------------------------------

Volume3 conv_kernel_reflect(const Volume3& v, const RangeKernel& k) {
    const Dims d = v.dims;
    const Dims kd = k.vol.dims;
    const int rx = kd.nx / 2, ry = kd.ny / 2, rz = kd.nz / 2;
    Volume3 out(d, v.voxel, 0.0);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                double acc = 0.0;
                for (int kz = 0; kz < kd.nz; ++kz) {
                    const int zz = reflect_index(z + rz - kz, d.nz);
                    for (int ky = 0; ky < kd.ny; ++ky) {
                        const int yy = reflect_index(y + ry - ky, d.ny);
                        for (int kx = 0; kx < kd.nx; ++kx)
                            acc += k.vol.at(kx, ky, kz) *
                                   v.at(reflect_index(x + rx - kx, d.nx), yy, zz);
                    }
                }
                out.at(x, y, z) = acc;
            }
    return out;
}

Volume3 conv_kernel_reflect_adjoint(const Volume3& g, const RangeKernel& k) {
    const Dims d = g.dims;
    const Dims kd = k.vol.dims;
    const int rx = kd.nx / 2, ry = kd.ny / 2, rz = kd.nz / 2;
    Volume3 out(d, g.voxel, 0.0);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const double gv = g.at(x, y, z);
                if (gv == 0.0) continue;
                for (int kz = 0; kz < kd.nz; ++kz) {
                    const int zz = reflect_index(z + rz - kz, d.nz);
                    for (int ky = 0; ky < kd.ny; ++ky) {
                        const int yy = reflect_index(y + ry - ky, d.ny);
                        for (int kx = 0; kx < kd.nx; ++kx)
                            out.at(reflect_index(x + rx - kx, d.nx), yy, zz) +=
                                gv * k.vol.at(kx, ky, kz);
                    }
                }
            }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

Volume3 patch_of(const Volume3& vol, Dims pdims, int ox, int oy, int oz) {
    Volume3 p(pdims, vol.voxel, 0.0);
    for (int z = 0; z < pdims.nz; ++z)
        for (int y = 0; y < pdims.ny; ++y)
            for (int x = 0; x < pdims.nx; ++x)
                p.at(x, y, z) = vol.at(ox + x, oy + y, oz + z);
    return p;
}

double zero_fraction(const Volume3& v) {
    std::size_t n = 0;
    for (double x : v.data) n += (x == 0.0);
    return double(n) / double(v.data.size());
}

// Samples a training patch; skips majority-zero patches when possible.
Volume3 sample_patch(const Volume3& vol, Dims patch, std::mt19937_64& rng) {
    Dims p{std::min(patch.nx, vol.dims.nx), std::min(patch.ny, vol.dims.ny),
           std::min(patch.nz, vol.dims.nz)};
    std::uniform_int_distribution<int> dx(0, vol.dims.nx - p.nx), dy(0, vol.dims.ny - p.ny),
        dz(0, vol.dims.nz - p.nz);
    Volume3 best;
    for (int attempt = 0; attempt < 16; ++attempt) {
        Volume3 cand = patch_of(vol, p, dx(rng), dy(rng), dz(rng));
        if (zero_fraction(cand) <= 0.5) return cand;
        if (attempt == 0) best = cand;
    }
    return best;  // all-zero-ish data: fall back to the first draw
}

Volume3 mae_grad(const Volume3& pred, const Volume3& target) {
    Volume3 g(pred.dims, pred.voxel, 0.0);
    const double n = double(pred.data.size());
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        const double r = pred.data[i] - target.data[i];
        g.data[i] = r > 0.0 ? 1.0 / n : (r < 0.0 ? -1.0 / n : 0.0);
    }
    return g;
}

void sgd_step(Network& net, const std::vector<double>& grad, double lr) {
    auto p = net.params();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
    net.set_params(p);
}

bool all_zero_series(const DynamicSeries& series) {
    for (const auto& f : series.volumes)
        for (double v : f.data)
            if (v != 0.0) return false;
    return true;
}

// One denoising step on a patch: composite objective, student update, teacher EMA.
LossReport denoise_step(ModelState& st, const Volume3& patch, const TrainConfig& cfg,
                        std::uint64_t step_seed, double lr) {
    VolumeModel teacher_model = [&](const Volume3& v) { return apply_model(st.teacher, v); };
    auto pl = teacher_pseudo_label(teacher_model, patch, cfg.m_passes, step_seed);
    Volume3 u = cfg.m_passes >= 2 ? teacher_uncertainty(pl.per_pass, pl.mean)
                                  : Volume3(patch.dims, patch.voxel, 0.0);

    const double enc = noise_encoding(patch).value;
    ForwardCache cache;
    auto y_s_map = net_forward(st.student, to_feature_map(patch), enc, &cache);
    Volume3 y_s = to_volume(y_s_map, patch.voxel);

    LossReport rep = denoise_loss(patch, y_s, pl.mean, u, cfg.lambda_a);

    // d total / d y_S: weighted-MAE consistency term + identity MAE term
    Volume3 g(patch.dims, patch.voxel, 0.0);
    double wsum = 0.0;
    for (double uv : u.data) wsum += 1.0 - uv;
    const double n = double(patch.data.size());
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        const double rc = y_s.data[i] - pl.mean.data[i];
        const double w = 1.0 - u.data[i];
        g.data[i] += (rc > 0.0 ? w : (rc < 0.0 ? -w : 0.0)) / wsum;
        const double rm = y_s.data[i] - patch.data[i];
        g.data[i] += (rm > 0.0 ? 1.0 : (rm < 0.0 ? -1.0 : 0.0)) / n;
    }

    std::vector<double> grad(st.student.param_count(), 0.0);
    net_backward(st.student, cache, to_feature_map(g), grad);
    sgd_step(st.student, grad, lr);

    auto teacher_params = st.teacher.params();
    ema_update(teacher_params, st.student.params(), cfg.alpha);
    st.teacher.set_params(teacher_params);
    return rep;
}

// One range-correction step: composite loss on a static image + FDG-like image.
LossReport prc_step(ModelState& st, const Volume3& y_s, const RangeKernel& h_rb,
                    const RangeKernel& h_f2rb, const Volume3& fdg, const TrainConfig& cfg,
                    double lr) {
    std::vector<double> grad(st.student.param_count(), 0.0);
    LossReport rep;
    rep.lambda_b = cfg.lambda_b;

    // prc + idt terms on the static image
    {
        const double enc = noise_encoding(y_s).value;
        ForwardCache cache;
        auto y_prc = to_volume(net_forward(st.student, to_feature_map(y_s), enc, &cache),
                               y_s.voxel);
        Volume3 reblurred = conv_kernel_reflect(y_prc, h_rb);
        rep.prc = mae(reblurred, y_s);
        rep.idt = mae(y_s, y_prc);

        Volume3 g = conv_kernel_reflect_adjoint(mae_grad(reblurred, y_s), h_rb);
        Volume3 g_idt = mae_grad(y_prc, y_s);
        for (std::size_t i = 0; i < g.data.size(); ++i)
            g.data[i] += cfg.lambda_b * g_idt.data[i];
        net_backward(st.student, cache, to_feature_map(g), grad);
    }

    // pseudo-label consistency term on the FDG-like image
    {
        Volume3 fdg_blurred = conv_kernel_reflect(fdg, h_f2rb);
        const double enc = noise_encoding(fdg_blurred).value;
        ForwardCache cache;
        auto recovered = to_volume(net_forward(st.student, to_feature_map(fdg_blurred), enc, &cache),
                                   fdg.voxel);
        rep.pkc = mae(recovered, fdg);
        net_backward(st.student, cache, to_feature_map(mae_grad(recovered, fdg)), grad);
    }

    rep.total = rep.prc + cfg.lambda_b * rep.idt + rep.pkc;
    sgd_step(st.student, grad, lr);
    return rep;
}

}  // namespace

ModelState train_denoiser(const DynamicSeries& series, const TrainConfig& cfg) {
    if (series.volumes.empty() || all_zero_series(series))
        throw std::invalid_argument("train_denoiser: degenerate (empty or all-zero) series");
    if (cfg.epochs <= 0 || cfg.learning_rate <= 0.0)
        throw std::invalid_argument("train_denoiser: epochs and learning rate must be positive");

    ModelState st;
    st.seed = cfg.seed;
    st.student = make_denoiser(cfg.seed);
    st.teacher = st.student;

    auto rng = make_rng(derive_seed(cfg.seed, 0x7EA17));
    std::uniform_int_distribution<std::size_t> pick(0, series.volumes.size() - 1);
    for (int step = 0; step < cfg.epochs; ++step) {
        const Volume3& frame = series.volumes[pick(rng)];
        Volume3 patch = sample_patch(frame, cfg.patch, rng);
        const double lr = cfg.learning_rate * std::pow(cfg.lr_gamma, step) / (1.0 + cfg.lr_decay * step);
        auto rep = denoise_step(st, patch, cfg, derive_seed(cfg.seed, 1000 + step), lr);
        st.log.push_back(rep);
        if (cfg.record_trajectory) st.student_trajectory.push_back(st.student.params());
        ++st.step;
    }
    return st;
}

ModelState train_prc(const std::vector<Volume3>& static_imgs, const RangeKernel& h_rb,
                     const RangeKernel& h_f2rb, const std::vector<Volume3>& fdg_like,
                     const TrainConfig& cfg) {
    if (static_imgs.empty() || fdg_like.empty())
        throw std::invalid_argument("train_prc: needs static and FDG-like images");
    if (cfg.epochs <= 0 || cfg.learning_rate <= 0.0)
        throw std::invalid_argument("train_prc: epochs and learning rate must be positive");
    h_rb.validate();
    h_f2rb.validate();

    ModelState st;
    st.seed = cfg.seed;
    st.student = make_prc_model(cfg.seed, &h_rb);
    st.teacher = st.student;

    auto rng = make_rng(derive_seed(cfg.seed, 0x9C17));
    std::uniform_int_distribution<std::size_t> ps(0, static_imgs.size() - 1),
        pf(0, fdg_like.size() - 1);
    for (int step = 0; step < cfg.epochs; ++step) {
        Volume3 y_s = sample_patch(static_imgs[ps(rng)], cfg.patch, rng);
        Volume3 fdg = sample_patch(fdg_like[pf(rng)], cfg.patch, rng);
        const double lr = cfg.learning_rate * std::pow(cfg.lr_gamma, step) / (1.0 + cfg.lr_decay * step);
        st.log.push_back(prc_step(st, y_s, h_rb, h_f2rb, fdg, cfg, lr));
        if (cfg.record_trajectory) st.student_trajectory.push_back(st.student.params());
        ++st.step;
    }
    return st;
}

void train_joint(ModelState& denoiser, ModelState& prc, const DynamicSeries& series,
                 const RangeKernel& h_rb, const RangeKernel& h_f2rb,
                 const std::vector<Volume3>& fdg_like, const TrainConfig& cfg) {
    if (series.volumes.empty() || fdg_like.empty())
        throw std::invalid_argument("train_joint: needs frames and FDG-like images");

    auto rng = make_rng(derive_seed(cfg.seed, 0x101A7));
    std::uniform_int_distribution<std::size_t> pick(0, series.volumes.size() - 1),
        pf(0, fdg_like.size() - 1);
    for (int step = 0; step < cfg.epochs; ++step) {
        Volume3 patch = sample_patch(series.volumes[pick(rng)], cfg.patch, rng);
        const std::uint64_t step_seed = derive_seed(cfg.seed, 5000 + step);

        // teacher pseudo-label for the denoising part of the objective
        VolumeModel teacher_model = [&](const Volume3& v) {
            return apply_model(denoiser.teacher, v);
        };
        auto pl = teacher_pseudo_label(teacher_model, patch, cfg.m_passes, step_seed);
        Volume3 u = teacher_uncertainty(pl.per_pass, pl.mean);

        const double enc = noise_encoding(patch).value;
        ForwardCache den_cache;
        auto y_den_map = net_forward(denoiser.student, to_feature_map(patch), enc, &den_cache);
        Volume3 y_den = to_volume(y_den_map, patch.voxel);

        const double enc2 = noise_encoding(y_den).value;
        ForwardCache prc_cache;
        auto y_prc = to_volume(net_forward(prc.student, y_den_map, enc2, &prc_cache), patch.voxel);

        LossReport rep = denoise_loss(patch, y_den, pl.mean, u, cfg.lambda_a);
        Volume3 reblurred = conv_kernel_reflect(y_prc, h_rb);
        rep.prc = mae(reblurred, y_den);
        rep.idt = mae(y_den, y_prc);
        rep.lambda_b = cfg.lambda_b;
        rep.total += rep.prc + cfg.lambda_b * rep.idt;

        // gradient wrt y_prc, then back through the range-correction model
        Volume3 g_prc = conv_kernel_reflect_adjoint(mae_grad(reblurred, y_den), h_rb);
        Volume3 g_idt = mae_grad(y_prc, y_den);
        for (std::size_t i = 0; i < g_prc.data.size(); ++i)
            g_prc.data[i] += cfg.lambda_b * g_idt.data[i];
        std::vector<double> prc_grad(prc.student.param_count(), 0.0);
        FeatureMap g_into_den =
            net_backward(prc.student, prc_cache, to_feature_map(g_prc), prc_grad);

        // gradient wrt y_den: denoising terms plus the flow-through term; the
        // prc/idt terms also see y_den directly as their target, with
        // d mae(a, y_den)/d y_den = -sign(a - y_den)/N
        Volume3 g_den = to_volume(g_into_den, patch.voxel);
        double wsum = 0.0;
        for (double uv : u.data) wsum += 1.0 - uv;
        const double n = double(patch.data.size());
        for (std::size_t i = 0; i < g_den.data.size(); ++i) {
            const double rc = y_den.data[i] - pl.mean.data[i];
            const double w = 1.0 - u.data[i];
            g_den.data[i] += (rc > 0.0 ? w : (rc < 0.0 ? -w : 0.0)) / wsum;
            const double rm = y_den.data[i] - patch.data[i];
            g_den.data[i] += (rm > 0.0 ? 1.0 : (rm < 0.0 ? -1.0 : 0.0)) / n;
            const double rp = reblurred.data[i] - y_den.data[i];
            g_den.data[i] -= (rp > 0.0 ? 1.0 : (rp < 0.0 ? -1.0 : 0.0)) / n;
            const double ri = y_prc.data[i] - y_den.data[i];
            g_den.data[i] -= cfg.lambda_b * (ri > 0.0 ? 1.0 : (ri < 0.0 ? -1.0 : 0.0)) / n;
        }
        std::vector<double> den_grad(denoiser.student.param_count(), 0.0);
        net_backward(denoiser.student, den_cache, to_feature_map(g_den), den_grad);

        // pkc term updates the range-correction model as in the prc stage
        {
            Volume3 fdg = sample_patch(fdg_like[pf(rng)], cfg.patch, rng);
            Volume3 fdg_blurred = conv_kernel_reflect(fdg, h_f2rb);
            ForwardCache c;
            auto rec = to_volume(net_forward(prc.student, to_feature_map(fdg_blurred),
                                             noise_encoding(fdg_blurred).value, &c),
                                 fdg.voxel);
            rep.pkc = mae(rec, fdg);
            rep.total += rep.pkc;
            net_backward(prc.student, c, to_feature_map(mae_grad(rec, fdg)), prc_grad);
        }

        sgd_step(denoiser.student, den_grad, cfg.learning_rate);
        sgd_step(prc.student, prc_grad, cfg.learning_rate);
        auto tp = denoiser.teacher.params();
        ema_update(tp, denoiser.student.params(), cfg.alpha);
        denoiser.teacher.set_params(tp);

        denoiser.log.push_back(rep);
        ++denoiser.step;
        ++prc.step;
    }
}

DynamicSeries apply_pipeline(const DynamicSeries& series, const ModelState& denoiser,
                             const ModelState& prc) {
    std::vector<Volume3> out;
    out.reserve(series.volumes.size());
    for (const auto& frame : series.volumes) {
        Volume3 den = apply_model(denoiser.student, frame);
        out.push_back(apply_model(prc.student, den));
    }
    return DynamicSeries(series.schedule, std::move(out));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

nlohmann::json net_spec(const Network& net) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : net.layers)
        layers.push_back({{"dynamic", l.dynamic},
                          {"relu_after", l.relu_after},
                          {"k", l.conv.k},
                          {"c_in", l.conv.c_in},
                          {"c_out", l.conv.c_out},
                          {"att_hidden", l.dynamic ? l.att.spa.hidden : 0}});
    return layers;
}

Network net_from_spec(const nlohmann::json& layers) {
    Network net;
    for (const auto& j : layers) {
        Layer l;
        l.dynamic = j.at("dynamic").get<bool>();
        l.relu_after = j.at("relu_after").get<bool>();
        l.conv.k = j.at("k").get<int>();
        l.conv.c_in = j.at("c_in").get<int>();
        l.conv.c_out = j.at("c_out").get<int>();
        l.conv.w.assign(l.conv.w_count(), 0.0);
        l.conv.b.assign(l.conv.c_out, 0.0);
        if (l.dynamic) {
            const int hidden = j.at("att_hidden").get<int>();
            auto blank = [&](int out) {
                AttentionDense d;
                d.hidden = hidden;
                d.out = out;
                d.w1.assign(hidden, 0.0);
                d.b1.assign(hidden, 0.0);
                d.w2.assign(std::size_t(out) * hidden, 0.0);
                d.b2.assign(out, 0.0);
                return d;
            };
            l.att.spa = blank(l.conv.k * l.conv.k * l.conv.k);
            l.att.in = blank(l.conv.c_in);
            l.att.out = blank(l.conv.c_out);
        }
        net.layers.push_back(std::move(l));
    }
    return net;
}

void write_f32(std::ofstream& os, const std::vector<double>& v) {
    std::vector<float> f(v.begin(), v.end());
    os.write(reinterpret_cast<const char*>(f.data()),
             std::streamsize(f.size() * sizeof(float)));
}

std::vector<double> read_f32(std::ifstream& is, std::size_t n) {
    std::vector<float> f(n);
    is.read(reinterpret_cast<char*>(f.data()), std::streamsize(n * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated parameter payload");
    return {f.begin(), f.end()};
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
    nlohmann::json header{{"format", "rbpet-checkpoint-v1"},
                          {"layers", net_spec(state.student)},
                          {"step", state.step},
                          {"seed", state.seed},
                          {"dtype", "float32"},
                          {"byte_order", "little"}};
    {
        std::ofstream h(path);
        if (!h) throw std::runtime_error("checkpoint: cannot write " + path.string());
        h << header.dump(2) << "\n";
    }
    auto raw = path;
    raw.replace_extension(".params");
    std::ofstream p(raw, std::ios::binary);
    if (!p) throw std::runtime_error("checkpoint: cannot write " + raw.string());
    write_f32(p, state.student.params());
    write_f32(p, state.teacher.params());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream h(path);
    if (!h) throw std::runtime_error("checkpoint: cannot read " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(h);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: malformed header: " + std::string(e.what()));
    }
    ModelState st;
    st.student = net_from_spec(header.at("layers"));
    st.teacher = st.student;
    st.step = header.at("step").get<long>();
    st.seed = header.at("seed").get<std::uint64_t>();

    auto raw = path;
    raw.replace_extension(".params");
    std::ifstream p(raw, std::ios::binary);
    if (!p) throw std::runtime_error("checkpoint: cannot read " + raw.string());
    const std::size_t n = st.student.param_count();
    st.student.set_params(read_f32(p, n));
    st.teacher.set_params(read_f32(p, n));
    return st;
}

}  // namespace rbpet
