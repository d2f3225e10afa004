#include "vesselnet/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

namespace vesselnet {

AdamState AdamState::init(const ParamStore& params, AdamConfig cfg) {
    AdamState st;
    st.cfg = cfg;
    for (const auto& [name, tensor] : params) {
        st.m.emplace(name, Tensor(tensor.shape));
        st.v.emplace(name, Tensor(tensor.shape));
    }
    return st;
}

void adam_step(ParamStore& params, const ParamStore& grads, AdamState& state) {
    state.t += 1;
    const float b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    const float bc1 = 1.0f - std::pow(b1, float(state.t));
    const float bc2 = 1.0f - std::pow(b2, float(state.t));
    const float lr = state.cfg.lr, eps = state.cfg.eps;
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw ContractError("adam_step: missing gradient for " + name);
        const Tensor& g = git->second;
        if (!(g.shape == p.shape))
            throw ShapeError("adam_step: gradient shape mismatch for " + name);
        Tensor& m = state.m.at(name);
        Tensor& v = state.v.at(name);
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const float gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0f - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0f - b2) * gi * gi;
            const float mhat = m.data[i] / bc1;
            const float vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples, std::size_t lo,
                                     std::size_t hi) {
    if (lo >= hi || hi > samples.size()) throw ContractError("make_batch: bad range");
    const Shape is = samples[lo].image.shape;
    const Shape ls = samples[lo].label.shape;
    const int b = int(hi - lo);
    Tensor images(Shape{b, is.c, is.h, is.w});
    Tensor labels(Shape{b, ls.c, ls.h, ls.w});
    for (std::size_t i = lo; i < hi; ++i) {
        const Sample& s = samples[i];
        if (!(s.image.shape == is) || !(s.label.shape == ls))
            throw ShapeError("make_batch: sample " + s.id + " has mismatched shape");
        std::copy(s.image.data.begin(), s.image.data.end(),
                  images.data.begin() + std::int64_t(i - lo) * is.numel());
        std::copy(s.label.data.begin(), s.label.data.end(),
                  labels.data.begin() + std::int64_t(i - lo) * ls.numel());
    }
    return {std::move(images), std::move(labels)};
}

namespace {

double batch_loss_eval(const ParamStore& params, const ModelConfig& cfg,
                       const LossWeights& weights, const Tensor& x, const Tensor& y) {
    Tape<float> tape;
    auto vars = bind_params(tape, params);
    Var out = forward_graph(tape, vars, cfg, tape.leaf(x, "input"), Mode::kEval, Rng(0));
    Var loss = total_loss(tape, out, tape.leaf(y, "target"), weights);
    return double(tape.value(loss).data[0]);
}

}  // namespace

TrainResult train(const TrainPlan& plan, const ModelConfig& config,
                  const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const std::string& out_dir, bool verbose) {
    plan.validate();
    config.validate();
    if (train_set.empty()) throw ContractError("train: empty training set");
    if (val_set.empty()) throw ContractError("train: empty validation set");

    Rng root(plan.seed);
    ParamStore params = build(config, root.split(0));
    AdamConfig adam_cfg;
    adam_cfg.lr = plan.lr;
    AdamState state = AdamState::init(params, adam_cfg);

    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    int stale_epochs = 0;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<Sample> shuffled;

    for (int epoch = 1; epoch <= plan.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng = root.split(1).split(std::uint64_t(epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

        double loss_sum = 0;
        std::int64_t sample_count = 0;
        std::size_t batch_index = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += plan.batch_size, ++batch_index) {
            const std::size_t hi = std::min(order.size(), lo + plan.batch_size);
            shuffled.clear();
            for (std::size_t i = lo; i < hi; ++i) shuffled.push_back(train_set[order[i]]);
            auto [x, y] = make_batch(shuffled, 0, shuffled.size());

            Tape<float> tape;
            auto vars = bind_params(tape, params);
            Rng step_rng = root.split(2).split(std::uint64_t(epoch)).split(batch_index);
            Var out = forward_graph(tape, vars, config, tape.leaf(x, "input"), Mode::kTrain,
                                    step_rng);
            Var loss = total_loss(tape, out, tape.leaf(y, "target"), plan.loss);
            const double loss_value = double(tape.value(loss).data[0]);
            if (!std::isfinite(loss_value)) {
                std::string where = "loss";
                if (auto bad = tape.first_non_finite())
                    where = "tape node " + std::to_string(bad->first) + " (" + bad->second + ")";
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + " batch " +
                                   std::to_string(batch_index) + "; first non-finite: " + where);
            }
            tape.backward(loss);
            ParamStore grads;
            for (const auto& [name, var] : vars) grads.emplace(name, tape.grad(var));
            adam_step(params, grads, state);
            loss_sum += loss_value * double(hi - lo);
            sample_count += std::int64_t(hi - lo);
        }

        // validation in eval mode, batches averaged by sample count
        double val_sum = 0;
        std::int64_t val_count = 0;
        for (std::size_t lo = 0; lo < val_set.size(); lo += plan.batch_size) {
            const std::size_t hi = std::min(val_set.size(), lo + plan.batch_size);
            auto [x, y] = make_batch(val_set, lo, hi);
            val_sum += batch_loss_eval(params, config, plan.loss, x, y) * double(hi - lo);
            val_count += std::int64_t(hi - lo);
        }
        const double train_loss = loss_sum / double(sample_count);
        const double val_loss = val_sum / double(val_count);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back({epoch, train_loss, val_loss, seconds});
        if (verbose)
            std::fprintf(stderr, "epoch %3d  train %.6f  val %.6f  (%.1fs)\n", epoch,
                         train_loss, val_loss, seconds);

        if (val_loss < result.best_val_loss) {
            result.best_val_loss = val_loss;
            result.best_epoch = epoch;
            result.best = Checkpoint{config, params, false, 0, {}, {}};
            stale_epochs = 0;
        } else {
            ++stale_epochs;
            if (stale_epochs >= plan.patience) break;
        }
    }

    result.last = Checkpoint{config, params, true, state.t, state.m, state.v};
    if (result.best_epoch == 0) {  // never improved on +inf: impossible, but stay safe
        result.best = result.last;
        result.best.has_optimizer = false;
        result.best_epoch = int(result.history.size());
    }

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        save_checkpoint((std::filesystem::path(out_dir) / "best.sau2").string(), result.best);
        save_checkpoint((std::filesystem::path(out_dir) / "last.sau2").string(), result.last);
        std::ofstream hist(std::filesystem::path(out_dir) / "history.csv");
        for (const auto& rec : result.history) {
            char line[160];
            std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.3f\n", rec.epoch, rec.train_loss,
                          rec.val_loss, rec.seconds);
            hist << line;
        }
        hist << "best," << result.best_epoch << "\n";
    }
    return result;
}

}  // namespace vesselnet
