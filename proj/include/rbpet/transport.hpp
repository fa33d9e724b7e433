#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rbpet/volume.hpp"

namespace rbpet {

// Allowed beta-plus spectrum description of one isotope. Endpoint energies
// and daughter atomic numbers are nuclear-data inputs (see data/nuclear_data.json).
struct Isotope {
    std::string name;
    double endpoint_mev = 0.0;  // maximum positron kinetic energy
    int daughter_z = 0;         // atomic number of the daughter nucleus
};

struct Tissue {
    std::string name;
    double density_g_cm3 = 0.0;
    double z_over_a = 0.555;  // effective Z/A, scales mass stopping power vs water
};

Isotope isotope_f18();
Isotope isotope_rb82();
Isotope isotope_by_name(const std::string& name);

Tissue tissue_lung();
Tissue tissue_soft();
Tissue tissue_skeletal_muscle();
Tissue tissue_striated_muscle();
Tissue tissue_by_name(const std::string& name);

struct AnnihilationCloud {
    // displacement vectors from the emission point, mm
    std::vector<std::array<double, 3>> endpoints;
    std::size_t count() const { return endpoints.size(); }
};

struct RangeKernel {
    Volume3 vol;  // odd dims, nonnegative, sums to 1, centered at the middle voxel

    static RangeKernel normalized(Volume3 v);
    void validate() const;
    int cx() const { return vol.dims.nx / 2; }
    int cy() const { return vol.dims.ny / 2; }
    int cz() const { return vol.dims.nz / 2; }
};

RangeKernel delta_kernel(Dims dims, VoxelSize voxel);

struct TransportConfig {
    int steps = 48;              // condensed-history steps per positron
    double scatter_scale = 1.19;      // multiplier on the Highland scattering angle
    double scatter_ref_mev = 0.75;    // reference energy of the empirical scatter power law
    double scatter_energy_exp = 0.752;  // exponent of the empirical scatter power law
    int threads = 0;             // 0 = hardware concurrency
};

// Sample a positron kinetic energy (MeV) from the Fermi-corrected allowed spectrum.
double sample_beta_energy(const Isotope& iso, std::mt19937_64& rng);

// Allowed-spectrum density (unnormalized), exposed for test oracles.
double beta_spectrum_density(const Isotope& iso, double energy_mev);

AnnihilationCloud simulate_positrons(const Isotope& iso, const Tissue& tissue, std::size_t n,
                                     std::uint64_t seed, const TransportConfig& cfg = {});

double mean_range_mm(const AnnihilationCloud& cloud);

// Trilinear deposition of endpoints into an odd-dims grid centered at the origin,
// normalized to sum 1. Throws if more than 0.5% of endpoints escape the support.
RangeKernel build_kernel(const AnnihilationCloud& cloud, VoxelSize voxel, Dims dims);

}  // namespace rbpet
