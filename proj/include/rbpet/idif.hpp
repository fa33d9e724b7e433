#pragma once

#include "rbpet/volume.hpp"

namespace rbpet {

struct IfComparison {
    double auc_pct_diff = 0.0;
    double peak_pct_diff = 0.0;
    double tail_pct_diff = 0.0;
};

// Rectangle rule: frame values are interval averages, so this is exact.
double auc(const TimeActivityCurve& tac);  // Bq*s/ml

double peak(const TimeActivityCurve& tac);  // max frame value

// Overlap-weighted mean over the window [129.6 s, 240 s] (2.16-4 min).
double tail(const TimeActivityCurve& tac);

// Absolute percentage differences, AIF as reference denominator.
IfComparison compare(const TimeActivityCurve& idif, const TimeActivityCurve& aif);

}  // namespace rbpet
