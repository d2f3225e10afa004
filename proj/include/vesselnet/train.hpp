#pragma once

#include <string>
#include <vector>

#include "vesselnet/data.hpp"
#include "vesselnet/loss.hpp"
#include "vesselnet/model.hpp"

namespace vesselnet {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

struct AdamState {
    AdamConfig cfg;
    ParamStore m;
    ParamStore v;
    std::uint64_t t = 0;

    static AdamState init(const ParamStore& params, AdamConfig cfg = {});
};

// Standard bias-corrected update; throws ContractError when a parameter has
// no gradient entry.
void adam_step(ParamStore& params, const ParamStore& grads, AdamState& state);

struct TrainPlan {
    int max_epochs = 150;
    int patience = 20;
    int batch_size = 8;
    LossWeights loss{0.5f, 0.5f};
    float lr = 1e-3f;
    std::uint64_t seed = 42;

    void validate() const {
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (patience < 1 || patience >= max_epochs)
            throw ConfigError("patience must be in [1, max_epochs)");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        loss.validate();
    }
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double seconds = 0;
};

struct TrainResult {
    Checkpoint best;  // no optimizer state
    Checkpoint last;  // with optimizer state, resumable
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val_loss = 0;
};

// Stacks samples [lo, hi) into batch tensors (image, label).
std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples, std::size_t lo,
                                     std::size_t hi);

// Epoch loop with per-epoch reshuffling, eval-mode validation after each
// epoch, early stopping on the validation loss (restore-best), and a NaN
// guard that names the first non-finite tensor. When out_dir is non-empty,
// writes best.sau2, last.sau2 and history.csv there.
TrainResult train(const TrainPlan& plan, const ModelConfig& config,
                  const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const std::string& out_dir = {}, bool verbose = false);

}  // namespace vesselnet
