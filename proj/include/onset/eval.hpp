#pragma once

#include <cstdint>
#include <vector>

#include "onset/common.hpp"

namespace onset {

// Mann-Whitney AUC with exact tie credit: (#(pos>neg) + 0.5*#(pos=neg))/(P*N),
// computed by rank averaging but equal to the pairwise definition.
double auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// Max precision among distinct-score thresholds whose recall >= r.
double precision_at_recall(const std::vector<double>& scores,
                           const std::vector<std::uint8_t>& labels, double r);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;

    bool operator==(const RocPoint&) const = default;
};

// One point per distinct score, from (0,0) to (1,1); trapezoidal area
// matches auc() to 1e-12.
std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<std::uint8_t>& labels);

double trapezoid_area(const std::vector<RocPoint>& points);

}  // namespace onset
