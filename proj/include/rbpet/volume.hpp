#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rbpet {

struct Dims {
    int nx = 0, ny = 0, nz = 0;
    bool operator==(const Dims&) const = default;
    std::size_t count() const { return std::size_t(nx) * ny * nz; }
};

struct VoxelSize {
    double dx = 1.0, dy = 1.0, dz = 1.0;  // mm
    bool operator==(const VoxelSize&) const = default;
};

// Dense 3-D activity volume in Bq/ml, x-fastest layout.
struct Volume3 {
    Dims dims;
    VoxelSize voxel;
    std::vector<double> data;

    Volume3() = default;
    Volume3(Dims d, VoxelSize v, double fill = 0.0)
        : dims(d), voxel(v), data(check_geometry(d, v), fill) {}
    Volume3(Dims d, VoxelSize v, std::vector<double> values)
        : dims(d), voxel(v), data(std::move(values)) {
        if (data.size() != check_geometry(d, v))
            throw std::invalid_argument("Volume3: payload length does not match dims");
    }

    std::size_t index(int ix, int iy, int iz) const {
        return std::size_t(ix) + std::size_t(dims.nx) * (std::size_t(iy) + std::size_t(dims.ny) * iz);
    }
    double at(int ix, int iy, int iz) const { return data[index(ix, iy, iz)]; }
    double& at(int ix, int iy, int iz) { return data[index(ix, iy, iz)]; }

    bool same_geometry(const Volume3& o) const { return dims == o.dims && voxel == o.voxel; }

    void require_finite(const std::string& what = "Volume3") const {
        for (double v : data)
            if (!std::isfinite(v)) throw std::runtime_error(what + ": non-finite voxel value");
    }

    double total() const {
        double s = 0.0;
        for (double v : data) s += v;
        return s;
    }

private:
    static std::size_t check_geometry(const Dims& d, const VoxelSize& v) {
        if (d.nx <= 0 || d.ny <= 0 || d.nz <= 0)
            throw std::invalid_argument("Volume3: dims must be positive");
        if (!(v.dx > 0.0) || !(v.dy > 0.0) || !(v.dz > 0.0))
            throw std::invalid_argument("Volume3: voxel size must be positive");
        return d.count();
    }
};

struct Frame {
    double start_s = 0.0;
    double end_s = 0.0;
    double duration() const { return end_s - start_s; }
    double mid() const { return 0.5 * (start_s + end_s); }
    bool operator==(const Frame&) const = default;
};

struct FrameSchedule {
    std::vector<Frame> frames;

    FrameSchedule() = default;
    explicit FrameSchedule(std::vector<Frame> f) : frames(std::move(f)) { validate(); }

    std::size_t size() const { return frames.size(); }
    const Frame& operator[](std::size_t i) const { return frames[i]; }
    bool operator==(const FrameSchedule&) const = default;

    void validate() const {
        for (std::size_t i = 0; i < frames.size(); ++i) {
            if (!(frames[i].end_s > frames[i].start_s))
                throw std::invalid_argument("FrameSchedule: frame duration must be positive");
            if (i > 0 && frames[i].start_s < frames[i - 1].end_s - 1e-9)
                throw std::invalid_argument("FrameSchedule: frames must be sorted and non-overlapping");
        }
    }
};

// Standard Rb-82 dynamic protocol: 20x3s, 6x10s, 12x20s.
FrameSchedule standard_rb82_schedule();

struct DynamicSeries {
    FrameSchedule schedule;
    std::vector<Volume3> volumes;

    DynamicSeries() = default;
    DynamicSeries(FrameSchedule s, std::vector<Volume3> v)
        : schedule(std::move(s)), volumes(std::move(v)) {
        if (volumes.size() != schedule.size())
            throw std::invalid_argument("DynamicSeries: frame count mismatch");
        for (const auto& vol : volumes)
            if (!vol.same_geometry(volumes.front()))
                throw std::invalid_argument("DynamicSeries: volumes must share geometry");
    }

    std::size_t nframes() const { return volumes.size(); }
};

struct VoiMask {
    Dims dims;
    std::vector<std::uint8_t> mask;
    std::string label;

    VoiMask() = default;
    VoiMask(Dims d, std::vector<std::uint8_t> m, std::string l)
        : dims(d), mask(std::move(m)), label(std::move(l)) {
        if (mask.size() != dims.count())
            throw std::invalid_argument("VoiMask: mask length mismatch");
        if (voxel_count() == 0) throw std::invalid_argument("VoiMask: mask has no voxels");
    }

    std::size_t voxel_count() const {
        std::size_t n = 0;
        for (auto m : mask) n += (m != 0);
        return n;
    }
};

struct TimeActivityCurve {
    FrameSchedule schedule;
    std::vector<double> values;  // Bq/ml per frame

    TimeActivityCurve() = default;
    TimeActivityCurve(FrameSchedule s, std::vector<double> v)
        : schedule(std::move(s)), values(std::move(v)) {
        if (values.size() != schedule.size())
            throw std::invalid_argument("TimeActivityCurve: length mismatch");
        for (double x : values)
            if (!std::isfinite(x)) throw std::invalid_argument("TimeActivityCurve: non-finite value");
    }

    std::size_t size() const { return values.size(); }
};

TimeActivityCurve extract_voi_tac(const DynamicSeries& series, const VoiMask& mask);

// Per-frame value = mean of AIF samples whose time falls in [start_s, end_s).
TimeActivityCurve resample_aif_to_frames(const std::vector<double>& aif_times_s,
                                         const std::vector<double>& aif_values,
                                         const FrameSchedule& schedule);

}  // namespace rbpet
