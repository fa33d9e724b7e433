#include "rbpet/idif.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rbpet {

namespace {
constexpr double kTailStartS = 129.6;  // 2.16 min
constexpr double kTailEndS = 240.0;    // 4 min
}  // namespace

double auc(const TimeActivityCurve& tac) {
    double s = 0.0;
    for (std::size_t f = 0; f < tac.values.size(); ++f)
        s += tac.values[f] * tac.schedule[f].duration();
    return s;
}

double peak(const TimeActivityCurve& tac) {
    if (tac.values.empty()) throw std::invalid_argument("peak: empty curve");
    return *std::max_element(tac.values.begin(), tac.values.end());
}

double tail(const TimeActivityCurve& tac) {
    double num = 0.0, den = 0.0;
    for (std::size_t f = 0; f < tac.values.size(); ++f) {
        const auto& fr = tac.schedule[f];
        const double overlap =
            std::min(fr.end_s, kTailEndS) - std::max(fr.start_s, kTailStartS);
        if (overlap > 0.0) {
            num += tac.values[f] * overlap;
            den += overlap;
        }
    }
    if (den <= 0.0)
        throw std::invalid_argument("tail: schedule does not overlap the 129.6-240 s window");
    return num / den;
}

IfComparison compare(const TimeActivityCurve& idif, const TimeActivityCurve& aif) {
    if (!(idif.schedule == aif.schedule))
        throw std::invalid_argument("compare: curves must share a schedule");
    auto pct = [](double a, double ref) {
        if (ref == 0.0) throw std::invalid_argument("compare: reference metric is zero");
        return 100.0 * std::abs(a - ref) / ref;
    };
    return {pct(auc(idif), auc(aif)), pct(peak(idif), peak(aif)), pct(tail(idif), tail(aif))};
}

}  // namespace rbpet
