#include "onset/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace onset {

namespace {

void check_input(const std::vector<double>& scores,
                 const std::vector<std::uint8_t>& labels, bool need_both_classes) {
    if (scores.size() != labels.size())
        throw ShapeError("eval: scores and labels differ in length");
    if (scores.empty()) throw EmptyInputError("eval: empty scored set");
    for (double s : scores)
        if (!std::isfinite(s)) throw ContractError("eval: non-finite score");
    long long pos = 0;
    for (auto l : labels) pos += l ? 1 : 0;
    if (need_both_classes && (pos == 0 || pos == static_cast<long long>(labels.size())))
        throw DegenerateInputError("eval: need at least one positive and one negative");
    if (!need_both_classes && pos == 0)
        throw DegenerateInputError("eval: need at least one positive");
}

}  // namespace

double auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    check_input(scores, labels, true);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average 1-based ranks within tie groups; rank sums stay exact in
    // float64 (integers and halves)
    double pos_rank_sum = 0.0;
    long long p = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) {
                pos_rank_sum += avg_rank;
                ++p;
            }
        }
        i = j;
    }
    const long long nn = static_cast<long long>(n) - p;
    double wins = pos_rank_sum - static_cast<double>(p) * (static_cast<double>(p) + 1.0) / 2.0;
    return wins / (static_cast<double>(p) * static_cast<double>(nn));
}

double precision_at_recall(const std::vector<double>& scores,
                           const std::vector<std::uint8_t>& labels, double r) {
    if (!(r > 0.0 && r <= 1.0))
        throw ContractError("precision_at_recall: recall target must be in (0, 1]");
    check_input(scores, labels, false);

    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    long long total_pos = 0;
    for (auto l : labels) total_pos += l ? 1 : 0;

    double best = -1.0;
    long long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) ++tp;
            else ++fp;
        }
        double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        if (recall >= r) {
            double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
            best = std::max(best, precision);
        }
        i = j;
    }
    // recall reaches 1 at the lowest threshold, so some threshold qualified
    return best;
}

std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<std::uint8_t>& labels) {
    check_input(scores, labels, true);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    long long total_pos = 0;
    for (auto l : labels) total_pos += l ? 1 : 0;
    const long long total_neg = static_cast<long long>(n) - total_pos;

    std::vector<RocPoint> out;
    out.push_back({0.0, 0.0});
    long long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) ++tp;
            else ++fp;
        }
        out.push_back({static_cast<double>(fp) / static_cast<double>(total_neg),
                       static_cast<double>(tp) / static_cast<double>(total_pos)});
        i = j;
    }
    return out;
}

double trapezoid_area(const std::vector<RocPoint>& points) {
    if (points.size() < 2) throw ContractError("trapezoid_area: need at least 2 points");
    double area = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i)
        area += 0.5 * (points[i].tpr + points[i - 1].tpr) *
                (points[i].fpr - points[i - 1].fpr);
    return area;
}

}  // namespace onset
