#pragma once

#include <cstdint>

#include "vesselnet/tensor.hpp"

namespace vesselnet {

struct HardConfusion {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::int64_t total() const { return tp + fp + fn + tn; }
    HardConfusion& operator+=(const HardConfusion& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

struct MetricSuite {
    double f1 = 0, jacc = 0, sen = 0, spe = 0, acc = 0, mcc = 0;
    // set when the corresponding ratio was 0/0 and defined as 0
    bool degenerate = false;
};

// Pixel counted iff mask (when given) is nonzero; predicted positive iff
// p >= threshold. Targets must be binary.
HardConfusion confusion(const Tensor& p, const Tensor& y, const Tensor* mask,
                        float threshold = 0.5f);

MetricSuite metric_suite(const HardConfusion& c);

// Mann-Whitney AUC with tie correction (average ranks), O(n log n).
// Throws DegenerateError when the masked pixels are single-class.
double auc(const Tensor& p, const Tensor& y, const Tensor* mask);

}  // namespace vesselnet
