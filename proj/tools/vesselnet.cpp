#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "vesselnet/data.hpp"
#include "vesselnet/gradcheck.hpp"
#include "vesselnet/metrics.hpp"
#include "vesselnet/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vesselnet;

namespace {

constexpr const char* kVersion = "vesselnet 1.0.0";

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIngest = 3;
constexpr int kExitFormat = 4;
constexpr int kExitNumeric = 5;

std::array<int, 4> parse_channels(const std::string& s) {
    std::array<int, 4> ch{};
    std::stringstream ss(s);
    std::string tok;
    for (int i = 0; i < 4; ++i) {
        if (!std::getline(ss, tok, ','))
            throw ConfigError("--channels needs 4 comma-separated values, got '" + s + "'");
        ch[i] = std::stoi(tok);
    }
    if (std::getline(ss, tok, ',')) throw ConfigError("--channels takes exactly 4 values");
    return ch;
}

struct ModelFlags {
    std::string channels = "16,32,48,64";
    std::string skip_attention = "csa";
    std::string activation = "silu";
    bool no_bottleneck_attention = false;
    int norm_groups = 8;
    float dropblock_rate = 0.15f;
    int dropblock_size = 7;

    void attach(CLI::App* cmd) {
        cmd->add_option("--channels", channels, "encoder channel widths c1,c2,c3,c4");
        cmd->add_option("--skip-attention", skip_attention, "skip fusion gate: none|sa|csa");
        cmd->add_option("--activation", activation, "conv block activation: silu|relu");
        cmd->add_flag("--no-bottleneck-attention", no_bottleneck_attention,
                      "disable the bottleneck SA gate");
        cmd->add_option("--norm-groups", norm_groups, "group count for group norm");
        cmd->add_option("--dropblock-rate", dropblock_rate, "dropblock drop rate");
        cmd->add_option("--dropblock-size", dropblock_size, "dropblock block size (odd)");
    }

    ModelConfig config() const {
        ModelConfig cfg;
        cfg.channels = parse_channels(channels);
        cfg.skip_attention = skip_attention_from(skip_attention);
        cfg.activation = activation_from(activation);
        cfg.bottleneck_attention = !no_bottleneck_attention;
        cfg.norm_groups = norm_groups;
        cfg.dropblock = DropBlockConfig{dropblock_rate, dropblock_size};
        cfg.validate();
        return cfg;
    }
};

Tensor load_input_image(const std::string& path) {
    ImageU8 img = read_image(path);
    if (img.channels == 1) {
        ImageU8 rgb;
        rgb.width = img.width;
        rgb.height = img.height;
        rgb.channels = 3;
        rgb.pixels.resize(rgb.size_bytes());
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            rgb.pixels[i * 3] = rgb.pixels[i * 3 + 1] = rgb.pixels[i * 3 + 2] = img.pixels[i];
        img = std::move(rgb);
    }
    return image_to_tensor(img);
}

// Benchmark-protocol canvases for the two native fundus sizes; otherwise the
// smallest multiple-of-8 canvas.
std::pair<int, int> auto_pad_target(int h, int w) {
    if (h == 584 && w == 565) return {592, 592};
    if (h == 605 && w == 700) return {704, 704};
    return {round_up8(h), round_up8(w)};
}

void write_manifest(const std::string& path, const json& j) {
    std::ofstream f(path);
    f << j.dump(2) << "\n";
}

// -------------------------------------------------------------------------
// train
// -------------------------------------------------------------------------

struct TrainArgs {
    std::string data_dir;
    std::string dataset = "drive";
    std::string out = "runs/out";
    std::string cache_dir;
    ModelFlags model;
    std::uint64_t seed = 42;
    int epochs = 150;
    int patience = 20;
    int batch_size = 0;  // 0 = dataset default
    float lambda_bce = 0.5f;
    float lambda_mcc = 0.5f;
    float lr = 1e-3f;
    double val_fraction = 0.10;
    int augment_multiplier = 9;
    int threads = 0;
    bool quiet = false;
};

int run_train(const TrainArgs& a) {
    if (a.threads > 0) set_thread_count(a.threads);
    DatasetSpec spec = DatasetSpec::parse(a.dataset);
    ModelConfig cfg = a.model.config();

    TrainPlan plan;
    plan.max_epochs = a.epochs;
    plan.patience = a.patience;
    plan.batch_size = a.batch_size > 0 ? a.batch_size
                      : spec.kind == DatasetKind::kDrive ? 8
                                                         : 2;
    plan.loss = LossWeights{a.lambda_bce, a.lambda_mcc};
    plan.lr = a.lr;
    plan.seed = a.seed;
    plan.validate();

    Dataset ds = load_dataset(a.data_dir, spec);
    int pad_h = spec.pad_h, pad_w = spec.pad_w;
    if (pad_h == 0) {  // custom: common multiple-of-8 canvas over the set
        for (const Sample& s : ds.train) {
            pad_h = std::max(pad_h, round_up8(s.image.shape.h));
            pad_w = std::max(pad_w, round_up8(s.image.shape.w));
        }
    }
    std::vector<Sample> padded;
    padded.reserve(ds.train.size());
    for (const Sample& s : ds.train) padded.push_back(pad(s, pad_h, pad_w));

    Rng pipeline_rng = Rng(a.seed).split(100);
    std::vector<Sample> augmented =
        augment(padded, a.augment_multiplier, pipeline_rng.split(0));
    if (!a.cache_dir.empty()) write_augmented_cache(a.cache_dir, augmented, a.seed);
    auto [train_set, val_set] =
        split_validation(std::move(augmented), a.val_fraction, pipeline_rng.split(1));
    if (!a.quiet)
        std::fprintf(stderr, "train %zu / val %zu samples at %dx%d, batch %d\n",
                     train_set.size(), val_set.size(), pad_h, pad_w, plan.batch_size);

    TrainResult result = train(plan, cfg, train_set, val_set, a.out, !a.quiet);

    json manifest{{"tool", kVersion},
                  {"command", "train"},
                  {"dataset", spec.name()},
                  {"data_dir", a.data_dir},
                  {"seed", a.seed},
                  {"threads", thread_count()},
                  {"pad", {pad_h, pad_w}},
                  {"model_config", cfg.canonical_text()},
                  {"plan",
                   {{"epochs", plan.max_epochs},
                    {"patience", plan.patience},
                    {"batch_size", plan.batch_size},
                    {"lambda_bce", plan.loss.lambda_bce},
                    {"lambda_mcc", plan.loss.lambda_mcc},
                    {"lr", plan.lr},
                    {"val_fraction", a.val_fraction},
                    {"augment_multiplier", a.augment_multiplier}}},
                  {"best_epoch", result.best_epoch},
                  {"best_val_loss", result.best_val_loss}};
    write_manifest((fs::path(a.out) / "manifest.json").string(), manifest);
    std::printf("best_epoch=%d best_val_loss=%.6f out=%s\n", result.best_epoch,
                result.best_val_loss, a.out.c_str());
    return kExitOk;
}

// -------------------------------------------------------------------------
// predict
// -------------------------------------------------------------------------

struct PredictArgs {
    std::string model;
    std::string input;
    std::string output;
    std::string mask_output;
    std::string pad_to;
    float threshold = 0.5f;
    bool timing = false;
    int threads = 0;
};

int run_predict(const PredictArgs& a) {
    if (a.threads > 0) set_thread_count(a.threads);
    Checkpoint ckpt = load_checkpoint(a.model);

    if (a.timing) {
        Tensor x;
        if (!a.input.empty()) {
            Tensor raw = load_input_image(a.input);
            auto [ph, pw] = auto_pad_target(raw.shape.h, raw.shape.w);
            x = pad_tensor(raw, ph, pw);
        } else {
            Rng r(7);
            x = random_uniform<float>(Shape{1, 3, 592, 592}, r, 0.0f, 1.0f);
        }
        if (x.shape.h != 592 || x.shape.w != 592)
            std::fprintf(stderr, "note: timing input is %dx%d, protocol size is 592x592\n",
                         x.shape.h, x.shape.w);
        // one untimed warm-up pass
        forward_eval(ckpt.params, ckpt.config, x);
        const int runs = 20;
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < runs; ++i) forward_eval(ckpt.params, ckpt.config, x);
        const double mean =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / runs;
        std::printf("mean_s=%.4f over %d runs\n", mean, runs);
        if (a.input.empty() || a.output.empty()) return kExitOk;
    }

    if (a.input.empty()) throw ConfigError("predict: --input is required (or use --timing)");
    if (a.output.empty()) throw ConfigError("predict: --output is required");

    Tensor raw = load_input_image(a.input);
    int ph, pw;
    if (!a.pad_to.empty()) {
        auto comma = a.pad_to.find(',');
        if (comma == std::string::npos) throw ConfigError("--pad-to expects H,W");
        ph = std::stoi(a.pad_to.substr(0, comma));
        pw = std::stoi(a.pad_to.substr(comma + 1));
    } else {
        std::tie(ph, pw) = auto_pad_target(raw.shape.h, raw.shape.w);
    }
    Tensor x = pad_tensor(raw, ph, pw);
    Tensor prob = forward_eval(ckpt.params, ckpt.config, x);
    Tensor cropped = crop_back(prob, raw.shape.h, raw.shape.w);
    write_png(a.output, tensor_to_image(cropped));
    if (!a.mask_output.empty()) {
        Tensor mask(cropped.shape);
        for (std::size_t i = 0; i < mask.data.size(); ++i)
            mask.data[i] = cropped.data[i] >= a.threshold ? 1.0f : 0.0f;
        write_png(a.mask_output, tensor_to_image(mask));
    }
    json manifest{{"tool", kVersion},        {"command", "predict"},
                  {"model", a.model},        {"input", a.input},
                  {"threshold", a.threshold}, {"pad", {ph, pw}}};
    write_manifest(a.output + ".manifest.json", manifest);
    std::printf("wrote %s (%dx%d)\n", a.output.c_str(), cropped.shape.w, cropped.shape.h);
    return kExitOk;
}

// -------------------------------------------------------------------------
// eval
// -------------------------------------------------------------------------

struct EvalArgs {
    std::string model;
    std::string data_dir;
    std::string dataset = "drive";
    float threshold = 0.5f;
    bool fov = false;
    bool no_fov = false;
    std::string average = "micro";
    int threads = 0;
};

int run_eval(const EvalArgs& a) {
    if (a.threads > 0) set_thread_count(a.threads);
    Checkpoint ckpt = load_checkpoint(a.model);
    DatasetSpec spec = DatasetSpec::parse(a.dataset);
    Dataset ds = load_dataset(a.data_dir, spec);
    if (ds.test.empty()) throw IngestError("eval: dataset has no test split");

    bool use_fov;
    if (a.fov && a.no_fov) throw ConfigError("eval: --fov and --no-fov are exclusive");
    if (a.fov) {
        for (const Sample& s : ds.test)
            if (!s.fov) throw IngestError("eval: --fov requested but sample " + s.id +
                                          " has no fov mask");
        use_fov = true;
    } else if (a.no_fov) {
        use_fov = false;
    } else {
        use_fov = !ds.test.empty() &&
                  std::all_of(ds.test.begin(), ds.test.end(),
                              [](const Sample& s) { return s.fov.has_value(); });
    }

    HardConfusion pooled;
    std::vector<float> all_p, all_y;
    MetricSuite macro_sum;
    double macro_auc_sum = 0;
    const std::size_t n_images = ds.test.size();
    for (const Sample& s : ds.test) {
        const int ph = spec.pad_h > 0 ? spec.pad_h : round_up8(s.image.shape.h);
        const int pw = spec.pad_w > 0 ? spec.pad_w : round_up8(s.image.shape.w);
        Tensor x = pad_tensor(s.image, ph, pw);
        Tensor prob = crop_back(forward_eval(ckpt.params, ckpt.config, x), s.orig_h, s.orig_w);
        const Tensor* mask = use_fov && s.fov ? &*s.fov : nullptr;
        HardConfusion c = confusion(prob, s.label, mask, a.threshold);
        pooled += c;
        MetricSuite m = metric_suite(c);
        macro_sum.f1 += m.f1;
        macro_sum.jacc += m.jacc;
        macro_sum.sen += m.sen;
        macro_sum.spe += m.spe;
        macro_sum.acc += m.acc;
        macro_sum.mcc += m.mcc;
        macro_auc_sum += auc(prob, s.label, mask);
        for (std::size_t i = 0; i < prob.data.size(); ++i) {
            if (mask && mask->data[i] == 0.0f) continue;
            all_p.push_back(prob.data[i]);
            all_y.push_back(s.label.data[i]);
        }
    }

    MetricSuite m;
    double auc_value;
    if (a.average == "macro") {
        const double inv = 1.0 / double(n_images);
        m.f1 = macro_sum.f1 * inv;
        m.jacc = macro_sum.jacc * inv;
        m.sen = macro_sum.sen * inv;
        m.spe = macro_sum.spe * inv;
        m.acc = macro_sum.acc * inv;
        m.mcc = macro_sum.mcc * inv;
        auc_value = macro_auc_sum * inv;
    } else if (a.average == "micro") {
        m = metric_suite(pooled);
        const int n_pixels = int(all_p.size());
        Tensor tp(Shape{1, 1, 1, n_pixels}, std::move(all_p));
        Tensor ty(Shape{1, 1, 1, n_pixels}, std::move(all_y));
        auc_value = auc(tp, ty, nullptr);
    } else {
        throw ConfigError("eval: --average must be micro or macro");
    }

    std::printf(
        "dataset=%s fov=%d threshold=%.4f f1=%.4f jacc=%.4f sen=%.4f spe=%.4f acc=%.4f "
        "mcc=%.4f auc=%.4f\n",
        spec.name().c_str(), use_fov ? 1 : 0, a.threshold, m.f1, m.jacc, m.sen, m.spe, m.acc,
        m.mcc, auc_value);
    std::printf("\n  %-12s %8s\n", "metric", "value");
    std::printf("  %-12s %8.4f\n", "f1", m.f1);
    std::printf("  %-12s %8.4f\n", "jaccard", m.jacc);
    std::printf("  %-12s %8.4f\n", "sensitivity", m.sen);
    std::printf("  %-12s %8.4f\n", "specificity", m.spe);
    std::printf("  %-12s %8.4f\n", "accuracy", m.acc);
    std::printf("  %-12s %8.4f\n", "mcc", m.mcc);
    std::printf("  %-12s %8.4f\n", "auc", auc_value);
    std::printf("  (%s over %zu test images, %lld pixels)\n", a.average.c_str(), n_images,
                static_cast<long long>(pooled.total()));
    return kExitOk;
}

// -------------------------------------------------------------------------
// summary / gradcheck
// -------------------------------------------------------------------------

struct SummaryArgs {
    ModelFlags model;
    int height = 592;
    int width = 592;
    bool breakdown = false;
};

int run_summary(const SummaryArgs& a) {
    ModelConfig cfg = a.model.config();
    ParamStore params = build(cfg, Rng(0));
    const std::int64_t n = count_params(params);
    std::vector<std::pair<std::string, double>> breakdown;
    const double flops = count_flops(cfg, a.height, a.width, a.breakdown ? &breakdown : nullptr);
    std::printf("params=%lld (%.2fM)\n", static_cast<long long>(n), double(n) / 1e6);
    std::printf("gflops=%.2f at %dx%dx%d\n", flops / 1e9, a.height, a.width, cfg.in_channels);
    std::printf("checkpoint_bytes=%lld (%.2f MB)\n",
                static_cast<long long>(checkpoint_size_bytes(cfg)),
                double(checkpoint_size_bytes(cfg)) / 1e6);
    if (a.breakdown) {
        std::printf("\n  %-20s %12s\n", "layer", "flops");
        for (const auto& [name, value] : breakdown)
            std::printf("  %-20s %12.0f\n", name.c_str(), value);
    }
    return kExitOk;
}

int run_gradcheck(std::uint64_t seed) {
    auto reports = run_gradient_checks(seed);
    bool all_pass = true;
    for (const auto& r : reports) {
        std::printf("%-28s max_rel_err=%.3e %s\n", r.name.c_str(), r.max_rel_err,
                    r.pass ? "ok" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    std::printf("gradcheck: %s (%zu checks)\n", all_pass ? "all passed" : "FAILURES",
                reports.size());
    return all_pass ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SA-UNetv2 retinal vessel segmentation micro-engine"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* cmd_train = app.add_subcommand("train", "train a model");
    cmd_train->add_option("--data-dir", train_args.data_dir, "dataset root")->required();
    cmd_train->add_option("--dataset", train_args.dataset, "drive|stare|custom");
    cmd_train->add_option("--out", train_args.out, "output directory");
    cmd_train->add_option("--seed", train_args.seed, "run seed");
    cmd_train->add_option("--epochs", train_args.epochs, "max epochs");
    cmd_train->add_option("--patience", train_args.patience, "early stopping patience");
    cmd_train->add_option("--batch-size", train_args.batch_size,
                          "batch size (default: 8 drive, 2 stare/custom)");
    cmd_train->add_option("--lambda-bce", train_args.lambda_bce, "BCE loss weight");
    cmd_train->add_option("--lambda-mcc", train_args.lambda_mcc, "MCC loss weight");
    cmd_train->add_option("--lr", train_args.lr, "Adam learning rate");
    cmd_train->add_option("--val-fraction", train_args.val_fraction, "validation fraction");
    cmd_train->add_option("--augment", train_args.augment_multiplier,
                          "augmentation multiplier (1 = originals only)");
    cmd_train->add_option("--cache-dir", train_args.cache_dir,
                          "write the augmented set as PNGs + manifest");
    cmd_train->add_option("--threads", train_args.threads, "worker threads (1 = bit-exact)");
    cmd_train->add_flag("--quiet", train_args.quiet, "suppress progress lines");
    train_args.model.attach(cmd_train);

    PredictArgs predict_args;
    auto* cmd_predict = app.add_subcommand("predict", "segment one image");
    cmd_predict->add_option("--model", predict_args.model, "checkpoint path")->required();
    cmd_predict->add_option("--input", predict_args.input, "input image (png/pnm)");
    cmd_predict->add_option("--output", predict_args.output, "probability map png");
    cmd_predict->add_option("--mask-output", predict_args.mask_output,
                            "optional binarized mask png");
    cmd_predict->add_option("--threshold", predict_args.threshold, "binarization threshold");
    cmd_predict->add_option("--pad-to", predict_args.pad_to, "override padded size H,W");
    cmd_predict->add_flag("--timing", predict_args.timing,
                          "report mean forward seconds over 20 runs at 592x592x3");
    cmd_predict->add_option("--threads", predict_args.threads, "worker threads");

    EvalArgs eval_args;
    auto* cmd_eval = app.add_subcommand("eval", "evaluate on a dataset test split");
    cmd_eval->add_option("--model", eval_args.model, "checkpoint path")->required();
    cmd_eval->add_option("--data-dir", eval_args.data_dir, "dataset root")->required();
    cmd_eval->add_option("--dataset", eval_args.dataset, "drive|stare|custom");
    cmd_eval->add_option("--threshold", eval_args.threshold, "binarization threshold");
    cmd_eval->add_flag("--fov", eval_args.fov, "require and use FOV masks");
    cmd_eval->add_flag("--no-fov", eval_args.no_fov, "ignore FOV masks");
    cmd_eval->add_option("--average", eval_args.average, "micro|macro pixel pooling");
    cmd_eval->add_option("--threads", eval_args.threads, "worker threads");

    SummaryArgs summary_args;
    auto* cmd_summary = app.add_subcommand("summary", "parameter and FLOPs accounting");
    summary_args.model.attach(cmd_summary);
    cmd_summary->add_option("--height", summary_args.height, "input rows");
    cmd_summary->add_option("--width", summary_args.width, "input cols");
    cmd_summary->add_flag("--breakdown", summary_args.breakdown, "per-layer FLOPs table");

    std::uint64_t gradcheck_seed = 20240817;
    auto* cmd_gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    cmd_gradcheck->add_option("--seed", gradcheck_seed, "check seed");

    try {
        app.parse(argc, argv);
        if (cmd_train->parsed()) return run_train(train_args);
        if (cmd_predict->parsed()) return run_predict(predict_args);
        if (cmd_eval->parsed()) return run_eval(eval_args);
        if (cmd_summary->parsed()) return run_summary(summary_args);
        if (cmd_gradcheck->parsed()) return run_gradcheck(gradcheck_seed);
        return kExitConfig;
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFormat;
    } catch (const IngestError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIngest;
    } catch (const DegenerateError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIngest;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    } catch (const Error& e) {  // Config/Shape/Axis/Contract
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
