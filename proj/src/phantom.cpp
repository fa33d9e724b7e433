#include "rbpet/phantom.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "rbpet/rng.hpp"

namespace rbpet {

namespace {

double gamma_variate(const GammaVariate& p, double t_s) {
    if (t_s <= 0.0) return 0.0;
    return p.amplitude * std::pow(t_s, p.alpha) * std::exp(-t_s / p.beta_s);
}

double sq(double x) { return x * x; }

}  // namespace

void PhantomSpec::validate() const {
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0)
        throw std::invalid_argument("PhantomSpec: dims must be positive");
    if (!(cavity_rx_mm > 0.0) || !(cavity_ry_mm > 0.0) || !(cavity_rz_mm > 0.0))
        throw std::invalid_argument("PhantomSpec: cavity semi-axes must be positive");
    if (!(shell_thickness_mm > 0.0))
        throw std::invalid_argument("PhantomSpec: shell thickness must be positive");
    const double hx = 0.5 * dims.nx * voxel.dx;
    const double hy = 0.5 * dims.ny * voxel.dy;
    const double hz = 0.5 * dims.nz * voxel.dz;
    if (cavity_rx_mm + shell_thickness_mm > hx || cavity_ry_mm + shell_thickness_mm > hy ||
        cavity_rz_mm + shell_thickness_mm > hz)
        throw std::invalid_argument("PhantomSpec: shell does not fit inside the volume");
    if (!(input.amplitude >= 0.0) || !(input.alpha > 0.0) || !(input.beta_s > 0.0))
        throw std::invalid_argument("PhantomSpec: bad input-function parameters");
    myocardium.validate();
    background.validate();
}

std::vector<std::uint8_t> phantom_labels(const PhantomSpec& spec) {
    spec.validate();
    const Dims d = spec.dims;
    std::vector<std::uint8_t> labels(d.count(), std::uint8_t(Region::Background));
    const double ox = spec.cavity_rx_mm + spec.shell_thickness_mm;
    const double oy = spec.cavity_ry_mm + spec.shell_thickness_mm;
    const double oz = spec.cavity_rz_mm + spec.shell_thickness_mm;
    std::size_t idx = 0;
    for (int iz = 0; iz < d.nz; ++iz) {
        const double pz = (iz + 0.5 - 0.5 * d.nz) * spec.voxel.dz;
        for (int iy = 0; iy < d.ny; ++iy) {
            const double py = (iy + 0.5 - 0.5 * d.ny) * spec.voxel.dy;
            for (int ix = 0; ix < d.nx; ++ix, ++idx) {
                const double px = (ix + 0.5 - 0.5 * d.nx) * spec.voxel.dx;
                const double rin = sq(px / spec.cavity_rx_mm) + sq(py / spec.cavity_ry_mm) +
                                   sq(pz / spec.cavity_rz_mm);
                if (rin <= 1.0) {
                    labels[idx] = std::uint8_t(Region::Cavity);
                    continue;
                }
                const double rout = sq(px / ox) + sq(py / oy) + sq(pz / oz);
                if (rout <= 1.0) labels[idx] = std::uint8_t(Region::Myocardium);
            }
        }
    }
    return labels;
}

VoiMask region_mask(const PhantomSpec& spec, Region region, const std::string& label) {
    auto labels = phantom_labels(spec);
    std::vector<std::uint8_t> mask(labels.size(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i)
        mask[i] = (labels[i] == std::uint8_t(region)) ? 1 : 0;
    return VoiMask(spec.dims, std::move(mask), label);
}

TimeActivityCurve make_input_function(const GammaVariate& params, const FrameSchedule& schedule) {
    if (!(params.amplitude >= 0.0) || !(params.alpha > 0.0) || !(params.beta_s > 0.0))
        throw std::invalid_argument("make_input_function: bad gamma-variate parameters");
    std::vector<double> values(schedule.size(), 0.0);
    for (std::size_t f = 0; f < schedule.size(); ++f) {
        // Composite Simpson over the frame; the integrand is smooth so a few
        // hundred panels keep the quadrature error far below 0.1%.
        const Frame& fr = schedule[f];
        const int n = 400;  // even
        const double h = fr.duration() / n;
        double s = gamma_variate(params, fr.start_s) + gamma_variate(params, fr.end_s);
        for (int i = 1; i < n; ++i)
            s += (i % 2 ? 4.0 : 2.0) * gamma_variate(params, fr.start_s + i * h);
        values[f] = (s * h / 3.0) / fr.duration();
    }
    return TimeActivityCurve(schedule, std::move(values));
}

PhantomTruth make_phantom(const PhantomSpec& spec, const FrameSchedule& schedule) {
    spec.validate();
    TimeActivityCurve cb = make_input_function(spec.input, schedule);
    const KineticParams cavity{0.0, 0.0, 1.0};
    const TimeActivityCurve tac_cavity = tac_model(cavity, cb);
    const TimeActivityCurve tac_myo = tac_model(spec.myocardium, cb);
    const TimeActivityCurve tac_bg = tac_model(spec.background, cb);
    const auto labels = phantom_labels(spec);

    std::vector<Volume3> frames;
    frames.reserve(schedule.size());
    for (std::size_t f = 0; f < schedule.size(); ++f) {
        Volume3 vol(spec.dims, spec.voxel);
        const double by_region[3] = {tac_bg.values[f], tac_myo.values[f], tac_cavity.values[f]};
        for (std::size_t i = 0; i < labels.size(); ++i) vol.data[i] = by_region[labels[i]];
        frames.push_back(std::move(vol));
    }

    ParametricImage truth;
    truth.k1 = Volume3(spec.dims, spec.voxel);
    truth.k2 = Volume3(spec.dims, spec.voxel);
    truth.vb = Volume3(spec.dims, spec.voxel);
    truth.residual = Volume3(spec.dims, spec.voxel);
    const KineticParams by_region[3] = {spec.background, spec.myocardium, cavity};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const KineticParams& p = by_region[labels[i]];
        truth.k1.data[i] = p.k1;
        truth.k2.data[i] = p.k2;
        truth.vb.data[i] = p.vb;
    }

    return PhantomTruth{DynamicSeries(schedule, std::move(frames)), std::move(truth),
                        std::move(cb)};
}

DynamicSeries degrade(const DynamicSeries& truth, const RangeKernel& kernel,
                      const NoiseModel& noise, std::uint64_t seed) {
    if (!(noise.half_life_s > 0.0))
        throw std::invalid_argument("degrade: half-life must be positive");
    std::vector<Volume3> frames;
    frames.reserve(truth.nframes());
    for (std::size_t f = 0; f < truth.nframes(); ++f) {
        Volume3 blurred = convolve3(truth.volumes[f], kernel);
        if (noise.scale > 0.0) {
            const Frame& fr = truth.schedule[f];
            const double decay = std::exp2(-fr.mid() / noise.half_life_s);
            const double dur = std::pow(fr.duration(), noise.duration_exp);
            auto rng = make_rng(seed, f);
            std::normal_distribution<double> gauss(0.0, 1.0);
            for (double& v : blurred.data) {
                const double sd = noise.scale * std::sqrt(std::max(v, 0.0) * decay / dur);
                v += sd * gauss(rng);
            }
        }
        frames.push_back(std::move(blurred));
    }
    return DynamicSeries(truth.schedule, std::move(frames));
}

}  // namespace rbpet
