#pragma once

#include <filesystem>
#include <string>

#include "rbpet/volume.hpp"

namespace rbpet {

// Volume files are a JSON header (path as given) plus a raw little-endian
// float32 payload next to it with the extension replaced by ".raw".
// Dynamic series reuse the same format with frame_schedule_s in the header
// and the frames concatenated in the payload.

void store_volume(const Volume3& vol, const std::filesystem::path& path);
Volume3 load_volume(const std::filesystem::path& path);

void store_series(const DynamicSeries& series, const std::filesystem::path& path);
DynamicSeries load_series(const std::filesystem::path& path);

// CSV with header row: time_start_s,time_end_s,value_bq_ml
void store_tac_csv(const TimeActivityCurve& tac, const std::filesystem::path& path);
TimeActivityCurve load_tac_csv(const std::filesystem::path& path);

}  // namespace rbpet
