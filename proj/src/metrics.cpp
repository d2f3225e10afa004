#include "vesselnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace vesselnet {

HardConfusion confusion(const Tensor& p, const Tensor& y, const Tensor* mask,
                        float threshold) {
    if (!(p.shape == y.shape))
        throw ShapeError("confusion: prediction " + p.shape.str() + " vs target " +
                         y.shape.str());
    if (mask && !(mask->shape == y.shape))
        throw ShapeError("confusion: mask shape " + mask->shape.str() + " vs " +
                         y.shape.str());
    HardConfusion c;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        if (mask && mask->data[i] == 0.0f) continue;
        const float yi = y.data[i];
        if (yi != 0.0f && yi != 1.0f)
            throw ContractError("confusion: targets must be exactly 0 or 1");
        const bool pred = p.data[i] >= threshold;
        const bool pos = yi == 1.0f;
        if (pred && pos) ++c.tp;
        else if (pred && !pos) ++c.fp;
        else if (!pred && pos) ++c.fn;
        else ++c.tn;
    }
    return c;
}

MetricSuite metric_suite(const HardConfusion& c) {
    MetricSuite m;
    const double tp = double(c.tp), fp = double(c.fp), fn = double(c.fn), tn = double(c.tn);
    bool deg = false;
    auto safe = [&deg](double num, double den) {
        if (den == 0.0) {
            deg = true;
            return 0.0;
        }
        return num / den;
    };
    m.f1 = safe(2 * tp, 2 * tp + fp + fn);
    m.jacc = safe(tp, tp + fp + fn);
    m.sen = safe(tp, tp + fn);
    m.spe = safe(tn, tn + fp);
    m.acc = safe(tp + tn, double(c.total()));
    const double denom2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (denom2 > 0) {
        m.mcc = (tp * tn - fp * fn) / std::sqrt(denom2);
    } else {
        deg = true;
        m.mcc = 0.0;
    }
    m.degenerate = deg;
    return m;
}

double auc(const Tensor& p, const Tensor& y, const Tensor* mask) {
    if (!(p.shape == y.shape))
        throw ShapeError("auc: prediction " + p.shape.str() + " vs target " +
                         y.shape.str());
    std::vector<std::pair<float, float>> scored;
    scored.reserve(p.data.size());
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        if (mask && mask->data[i] == 0.0f) continue;
        scored.emplace_back(p.data[i], y.data[i]);
    }
    std::int64_t npos = 0;
    for (const auto& [s, l] : scored) npos += (l == 1.0f);
    const std::int64_t nneg = static_cast<std::int64_t>(scored.size()) - npos;
    if (npos == 0 || nneg == 0)
        throw DegenerateError("auc: need at least one positive and one negative pixel");

    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    // average ranks over tied score groups
    double rank_sum_pos = 0;
    std::size_t i = 0;
    while (i < scored.size()) {
        std::size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        const double avg_rank = 0.5 * (double(i + 1) + double(j));  // 1-based
        for (std::size_t k = i; k < j; ++k)
            if (scored[k].second == 1.0f) rank_sum_pos += avg_rank;
        i = j;
    }
    return (rank_sum_pos - 0.5 * double(npos) * double(npos + 1)) /
           (double(npos) * double(nneg));
}

}  // namespace vesselnet
