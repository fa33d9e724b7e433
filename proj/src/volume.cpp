#include "rbpet/volume.hpp"

namespace rbpet {

FrameSchedule standard_rb82_schedule() {
    std::vector<Frame> frames;
    double t = 0.0;
    auto add = [&](int n, double dur) {
        for (int i = 0; i < n; ++i) {
            frames.push_back({t, t + dur});
            t += dur;
        }
    };
    add(20, 3.0);
    add(6, 10.0);
    add(12, 20.0);
    return FrameSchedule(std::move(frames));
}

TimeActivityCurve extract_voi_tac(const DynamicSeries& series, const VoiMask& mask) {
    if (series.volumes.empty()) throw std::invalid_argument("extract_voi_tac: empty series");
    if (!(series.volumes.front().dims == mask.dims))
        throw std::invalid_argument("extract_voi_tac: mask geometry mismatch");
    const std::size_t n = mask.voxel_count();
    if (n == 0) throw std::invalid_argument("extract_voi_tac: empty mask");

    std::vector<double> values(series.nframes(), 0.0);
    for (std::size_t f = 0; f < series.nframes(); ++f) {
        const auto& vol = series.volumes[f];
        double sum = 0.0;
        for (std::size_t i = 0; i < vol.data.size(); ++i)
            if (mask.mask[i]) sum += vol.data[i];
        values[f] = sum / double(n);
    }
    return TimeActivityCurve(series.schedule, std::move(values));
}

TimeActivityCurve resample_aif_to_frames(const std::vector<double>& aif_times_s,
                                         const std::vector<double>& aif_values,
                                         const FrameSchedule& schedule) {
    if (aif_times_s.size() != aif_values.size())
        throw std::invalid_argument("resample_aif_to_frames: time/value length mismatch");
    for (std::size_t i = 1; i < aif_times_s.size(); ++i)
        if (!(aif_times_s[i] > aif_times_s[i - 1]))
            throw std::invalid_argument("resample_aif_to_frames: times must be strictly increasing");

    std::vector<double> values(schedule.size(), 0.0);
    std::size_t cursor = 0;
    for (std::size_t f = 0; f < schedule.size(); ++f) {
        const Frame& fr = schedule[f];
        while (cursor < aif_times_s.size() && aif_times_s[cursor] < fr.start_s) ++cursor;
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t i = cursor; i < aif_times_s.size() && aif_times_s[i] < fr.end_s; ++i) {
            sum += aif_values[i];
            ++count;
        }
        if (count == 0)
            throw std::runtime_error("resample_aif_to_frames: frame has no covered samples");
        values[f] = sum / double(count);
    }
    return TimeActivityCurve(schedule, std::move(values));
}

}  // namespace rbpet
