#include "rbpet/transport.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "rbpet/rng.hpp"

namespace rbpet {

namespace {

constexpr double kElectronMassMev = 0.5109989;
constexpr double kFineStructure = 1.0 / 137.035999;
constexpr double kWaterRadLenGcm2 = 36.08;  // radiation length of water, g/cm^2
constexpr double kWaterZOverA = 0.5551;

// Katz-Penfold CSDA range in water-equivalent medium, g/cm^2.
double csda_range_gcm2(double e_mev) {
    if (e_mev <= 0.0) return 0.0;
    if (e_mev <= 2.5) return 0.412 * std::pow(e_mev, 1.265 - 0.0954 * std::log(e_mev));
    return 0.530 * e_mev - 0.106;
}

double momentum_mev(double e_kin) {
    const double etot = e_kin + kElectronMassMev;
    return std::sqrt(etot * etot - kElectronMassMev * kElectronMassMev);
}

double beta_velocity(double e_kin) {
    return momentum_mev(e_kin) / (e_kin + kElectronMassMev);
}

// Nonrelativistic Fermi function for beta-plus decay (eta < 0 suppresses
// low-energy positrons).
double fermi_function(int daughter_z, double e_kin) {
    const double beta = std::max(beta_velocity(e_kin), 1e-6);
    const double eta = -double(daughter_z) * kFineStructure / beta;
    const double x = 2.0 * M_PI * eta;
    if (std::abs(x) < 1e-12) return 1.0;
    return x / (1.0 - std::exp(-x));
}

struct Vec3 {
    double x, y, z;
};

// Rotate `dir` (unit) by polar angle theta and azimuth phi about itself.
Vec3 rotate(const Vec3& dir, double theta, double phi) {
    // orthonormal frame around dir
    Vec3 u;
    if (std::abs(dir.z) < 0.9)
        u = {-dir.y, dir.x, 0.0};
    else
        u = {0.0, -dir.z, dir.y};
    const double un = std::sqrt(u.x * u.x + u.y * u.y + u.z * u.z);
    u = {u.x / un, u.y / un, u.z / un};
    const Vec3 v = {dir.y * u.z - dir.z * u.y, dir.z * u.x - dir.x * u.z,
                    dir.x * u.y - dir.y * u.x};
    const double st = std::sin(theta), ct = std::cos(theta);
    const double cp = std::cos(phi), sp = std::sin(phi);
    return {ct * dir.x + st * (cp * u.x + sp * v.x),
            ct * dir.y + st * (cp * u.y + sp * v.y),
            ct * dir.z + st * (cp * u.z + sp * v.z)};
}

// Highland multiple-scattering angle for a step of mass thickness t (g/cm^2).
double highland_theta0(double e_kin, double t_gcm2) {
    const double pc = momentum_mev(e_kin);
    const double beta = beta_velocity(e_kin);
    const double ratio = std::max(t_gcm2 / kWaterRadLenGcm2, 1e-12);
    const double corr = std::max(1.0 + 0.038 * std::log(ratio), 0.25);
    return 13.6 / (beta * pc) * std::sqrt(ratio) * corr;
}

std::array<double, 3> transport_one(const Isotope& iso, const Tissue& tissue,
                                    const TransportConfig& cfg, std::mt19937_64& rng) {
    const double energy = sample_beta_energy(iso, rng);

    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // isotropic initial direction
    const double cz = 2.0 * uni(rng) - 1.0;
    const double sz = std::sqrt(std::max(0.0, 1.0 - cz * cz));
    const double az = 2.0 * M_PI * uni(rng);
    Vec3 dir = {sz * std::cos(az), sz * std::sin(az), cz};

    // mass thickness -> mm conversion, with Z/A stopping-power correction
    const double mm_per_gcm2 = 10.0 / tissue.density_g_cm3 * (kWaterZOverA / tissue.z_over_a);

    Vec3 pos = {0.0, 0.0, 0.0};
    const int n = cfg.steps;
    for (int i = 0; i < n; ++i) {
        const double e_hi = energy * double(n - i) / n;
        const double e_lo = energy * double(n - i - 1) / n;
        const double t = csda_range_gcm2(e_hi) - csda_range_gcm2(e_lo);
        if (t <= 0.0) break;
        const double step_mm = t * mm_per_gcm2;
        pos = {pos.x + dir.x * step_mm, pos.y + dir.y * step_mm, pos.z + dir.z * step_mm};

        const double e_mid = 0.5 * (e_hi + e_lo);
        if (e_mid <= 0.0) break;
        const double escale = std::pow(e_mid / cfg.scatter_ref_mev, cfg.scatter_energy_exp);
        const double theta0 = cfg.scatter_scale * escale * highland_theta0(e_mid, t);
        const double gx = gauss(rng) * theta0;
        const double gy = gauss(rng) * theta0;
        const double theta = std::sqrt(gx * gx + gy * gy);
        const double phi = std::atan2(gy, gx);
        dir = rotate(dir, theta, phi);
        // renormalize against drift
        const double dn = std::sqrt(dir.x * dir.x + dir.y * dir.y + dir.z * dir.z);
        dir = {dir.x / dn, dir.y / dn, dir.z / dn};
    }
    return {pos.x, pos.y, pos.z};
}

}  // namespace

Isotope isotope_f18() { return {"f18", 0.6335, 8}; }
Isotope isotope_rb82() { return {"rb82", 3.378, 36}; }

Isotope isotope_by_name(const std::string& name) {
    if (name == "f18") return isotope_f18();
    if (name == "rb82") return isotope_rb82();
    throw std::invalid_argument("unknown isotope: " + name);
}

Tissue tissue_lung() { return {"lung", 0.3, 0.5503}; }
Tissue tissue_soft() { return {"soft", 1.0, 0.5500}; }
Tissue tissue_skeletal_muscle() { return {"skeletal", 1.04, 0.5500}; }
Tissue tissue_striated_muscle() { return {"striated", 1.04, 0.5510}; }

Tissue tissue_by_name(const std::string& name) {
    if (name == "lung") return tissue_lung();
    if (name == "soft") return tissue_soft();
    if (name == "skeletal") return tissue_skeletal_muscle();
    if (name == "striated") return tissue_striated_muscle();
    throw std::invalid_argument("unknown tissue: " + name);
}

double beta_spectrum_density(const Isotope& iso, double e) {
    if (e <= 0.0 || e >= iso.endpoint_mev) return 0.0;
    const double etot = e + kElectronMassMev;
    const double p = momentum_mev(e);
    const double q = iso.endpoint_mev - e;
    return fermi_function(iso.daughter_z, e) * p * etot * q * q;
}

double sample_beta_energy(const Isotope& iso, std::mt19937_64& rng) {
    if (!(iso.endpoint_mev > 0.0)) throw std::invalid_argument("isotope endpoint must be positive");
    // rejection sampling against a uniform proposal; density maximum found on a grid
    double fmax = 0.0;
    for (int i = 1; i < 256; ++i)
        fmax = std::max(fmax, beta_spectrum_density(iso, iso.endpoint_mev * i / 256.0));
    fmax *= 1.05;

    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (;;) {
        const double e = uni(rng) * iso.endpoint_mev;
        if (uni(rng) * fmax <= beta_spectrum_density(iso, e)) return e;
    }
}

AnnihilationCloud simulate_positrons(const Isotope& iso, const Tissue& tissue, std::size_t n,
                                     std::uint64_t seed, const TransportConfig& cfg) {
    if (n < 1) throw std::invalid_argument("simulate_positrons: n must be >= 1");
    if (!(tissue.density_g_cm3 > 0.0)) throw std::invalid_argument("tissue density must be positive");

    AnnihilationCloud cloud;
    cloud.endpoints.resize(n);

    // one rng stream per positron index: merged result is independent of
    // the worker partition
    auto worker = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            auto rng = make_rng(seed, i);
            cloud.endpoints[i] = transport_one(iso, tissue, cfg, rng);
        }
    };

    unsigned nthreads = cfg.threads > 0 ? unsigned(cfg.threads)
                                        : std::max(1u, std::thread::hardware_concurrency());
    nthreads = std::min<unsigned>(nthreads, unsigned(n));
    if (nthreads <= 1) {
        worker(0, n);
    } else {
        std::vector<std::thread> threads;
        const std::size_t chunk = (n + nthreads - 1) / nthreads;
        for (unsigned t = 0; t < nthreads; ++t) {
            const std::size_t lo = t * chunk;
            const std::size_t hi = std::min(n, lo + chunk);
            if (lo < hi) threads.emplace_back(worker, lo, hi);
        }
        for (auto& th : threads) th.join();
    }
    return cloud;
}

double mean_range_mm(const AnnihilationCloud& cloud) {
    if (cloud.endpoints.empty()) throw std::invalid_argument("mean_range_mm: empty cloud");
    double sum = 0.0;
    for (const auto& p : cloud.endpoints)
        sum += std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    return sum / double(cloud.endpoints.size());
}

RangeKernel RangeKernel::normalized(Volume3 v) {
    RangeKernel k{std::move(v)};
    double sum = 0.0;
    for (double x : k.vol.data) {
        if (x < 0.0) throw std::invalid_argument("RangeKernel: negative entry");
        sum += x;
    }
    if (!(sum > 0.0)) throw std::invalid_argument("RangeKernel: zero kernel");
    for (double& x : k.vol.data) x /= sum;
    return k;
}

void RangeKernel::validate() const {
    if (vol.dims.nx % 2 == 0 || vol.dims.ny % 2 == 0 || vol.dims.nz % 2 == 0)
        throw std::invalid_argument("RangeKernel: dims must be odd");
    double sum = 0.0;
    for (double x : vol.data) {
        if (x < 0.0) throw std::invalid_argument("RangeKernel: negative entry");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("RangeKernel: kernel does not sum to 1");
}

RangeKernel delta_kernel(Dims dims, VoxelSize voxel) {
    Volume3 v(dims, voxel, 0.0);
    v.at(dims.nx / 2, dims.ny / 2, dims.nz / 2) = 1.0;
    RangeKernel k{std::move(v)};
    k.validate();
    return k;
}

RangeKernel build_kernel(const AnnihilationCloud& cloud, VoxelSize voxel, Dims dims) {
    if (dims.nx % 2 == 0 || dims.ny % 2 == 0 || dims.nz % 2 == 0)
        throw std::invalid_argument("build_kernel: dims must be odd");
    if (cloud.endpoints.empty()) throw std::invalid_argument("build_kernel: empty cloud");

    std::vector<double> acc(dims.count(), 0.0);
    const int cx = dims.nx / 2, cy = dims.ny / 2, cz = dims.nz / 2;
    std::size_t escaped = 0;

    for (const auto& p : cloud.endpoints) {
        const double fx = p[0] / voxel.dx + cx;
        const double fy = p[1] / voxel.dy + cy;
        const double fz = p[2] / voxel.dz + cz;
        const int ix = int(std::floor(fx)), iy = int(std::floor(fy)), iz = int(std::floor(fz));
        if (ix < 0 || iy < 0 || iz < 0 || ix + 1 >= dims.nx || iy + 1 >= dims.ny || iz + 1 >= dims.nz) {
            ++escaped;
            continue;
        }
        const double wx = fx - ix, wy = fy - iy, wz = fz - iz;
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const double w = (dx ? wx : 1.0 - wx) * (dy ? wy : 1.0 - wy) * (dz ? wz : 1.0 - wz);
                    acc[std::size_t(ix + dx) +
                        std::size_t(dims.nx) * (std::size_t(iy + dy) + std::size_t(dims.ny) * (iz + dz))] += w;
                }
    }

    const double escape_frac = double(escaped) / double(cloud.endpoints.size());
    if (escape_frac > 0.005)
        throw std::runtime_error("build_kernel: kernel support too small, escaping fraction " +
                                 std::to_string(escape_frac));

    double sum = 0.0;
    for (double a : acc) sum += a;
    Volume3 v(dims, voxel, 0.0);
    for (std::size_t i = 0; i < acc.size(); ++i) v.data[i] = acc[i] / sum;
    RangeKernel k{std::move(v)};
    k.validate();
    return k;
}

}  // namespace rbpet
