#include "rbpet/volume_io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace rbpet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path payload_path(const fs::path& header) {
    fs::path p = header;
    p.replace_extension(".raw");
    return p;
}

void write_payload(const fs::path& path, const std::vector<double>& values) {
    std::vector<float> f32(values.begin(), values.end());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open payload for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(f32.data()), std::streamsize(f32.size() * sizeof(float)));
    if (!out) throw std::runtime_error("payload write failed: " + path.string());
}

std::vector<double> read_payload(const fs::path& path, std::size_t expected) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open payload: " + path.string());
    const auto bytes = std::size_t(in.tellg());
    if (bytes != expected * sizeof(float))
        throw std::runtime_error("payload size mismatch: " + path.string() + " has " +
                                 std::to_string(bytes / sizeof(float)) + " values, header implies " +
                                 std::to_string(expected));
    in.seekg(0);
    std::vector<float> f32(expected);
    in.read(reinterpret_cast<char*>(f32.data()), std::streamsize(bytes));
    if (!in) throw std::runtime_error("payload read failed: " + path.string());
    for (float v : f32)
        if (!std::isfinite(v)) throw std::runtime_error("payload has non-finite values: " + path.string());
    return std::vector<double>(f32.begin(), f32.end());
}

json header_base(const Volume3& vol) {
    json h;
    h["dims"] = {vol.dims.nx, vol.dims.ny, vol.dims.nz};
    h["voxel_size_mm"] = {vol.voxel.dx, vol.voxel.dy, vol.voxel.dz};
    h["units"] = "Bq/ml";
    h["byte_order"] = "little";
    return h;
}

void parse_geometry(const json& h, Dims& dims, VoxelSize& voxel) {
    auto d = h.at("dims");
    auto v = h.at("voxel_size_mm");
    if (!d.is_array() || d.size() != 3 || !v.is_array() || v.size() != 3)
        throw std::runtime_error("malformed volume header: dims/voxel_size_mm");
    dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    voxel = {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0)
        throw std::runtime_error("malformed volume header: empty dims");
}

void write_header(const json& h, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open header for writing: " + path.string());
    out << h.dump(2) << "\n";
}

json read_header(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open header: " + path.string());
    json h;
    try {
        in >> h;
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed volume header " + path.string() + ": " + e.what());
    }
    return h;
}

}  // namespace

void store_volume(const Volume3& vol, const fs::path& path) {
    vol.require_finite("store_volume");
    write_header(header_base(vol), path);
    write_payload(payload_path(path), vol.data);
}

Volume3 load_volume(const fs::path& path) {
    json h = read_header(path);
    Dims dims;
    VoxelSize voxel;
    parse_geometry(h, dims, voxel);
    return Volume3(dims, voxel, read_payload(payload_path(path), dims.count()));
}

void store_series(const DynamicSeries& series, const fs::path& path) {
    if (series.volumes.empty()) throw std::invalid_argument("store_series: empty series");
    json h = header_base(series.volumes.front());
    json sched = json::array();
    for (const Frame& f : series.schedule.frames) sched.push_back({f.start_s, f.end_s});
    h["frame_schedule_s"] = sched;
    write_header(h, path);

    std::vector<double> all;
    all.reserve(series.volumes.front().data.size() * series.nframes());
    for (const auto& vol : series.volumes) {
        vol.require_finite("store_series");
        all.insert(all.end(), vol.data.begin(), vol.data.end());
    }
    write_payload(payload_path(path), all);
}

DynamicSeries load_series(const fs::path& path) {
    json h = read_header(path);
    Dims dims;
    VoxelSize voxel;
    parse_geometry(h, dims, voxel);
    if (!h.contains("frame_schedule_s"))
        throw std::runtime_error("load_series: header has no frame_schedule_s: " + path.string());
    std::vector<Frame> frames;
    for (const auto& f : h["frame_schedule_s"])
        frames.push_back({f.at(0).get<double>(), f.at(1).get<double>()});
    FrameSchedule schedule(std::move(frames));

    const std::size_t per_frame = dims.count();
    auto all = read_payload(payload_path(path), per_frame * schedule.size());
    std::vector<Volume3> volumes;
    volumes.reserve(schedule.size());
    for (std::size_t f = 0; f < schedule.size(); ++f)
        volumes.emplace_back(dims, voxel,
                             std::vector<double>(all.begin() + f * per_frame,
                                                 all.begin() + (f + 1) * per_frame));
    return DynamicSeries(std::move(schedule), std::move(volumes));
}

void store_tac_csv(const TimeActivityCurve& tac, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open TAC csv for writing: " + path.string());
    out << "time_start_s,time_end_s,value_bq_ml\n";
    out.precision(17);
    for (std::size_t i = 0; i < tac.size(); ++i)
        out << tac.schedule[i].start_s << "," << tac.schedule[i].end_s << "," << tac.values[i] << "\n";
}

TimeActivityCurve load_tac_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open TAC csv: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("time_start_s,time_end_s,value_bq_ml", 0) != 0)
        throw std::runtime_error("TAC csv missing header row: " + path.string());
    std::vector<Frame> frames;
    std::vector<double> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        double a, b, v;
        char c1, c2;
        if (!(ss >> a >> c1 >> b >> c2 >> v) || c1 != ',' || c2 != ',')
            throw std::runtime_error("malformed TAC csv row: " + line);
        frames.push_back({a, b});
        values.push_back(v);
    }
    return TimeActivityCurve(FrameSchedule(std::move(frames)), std::move(values));
}

}  // namespace rbpet
