// Acceptance suite: runs every release criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Exits nonzero if any fail.
//
// usage: acceptance <path-to-vesselnet-cli> <work-dir>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vesselnet/data.hpp"
#include "vesselnet/gradcheck.hpp"
#include "vesselnet/metrics.hpp"
#include "vesselnet/train.hpp"
#include "testutil.hpp"

using namespace vesselnet;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& what, bool pass, const std::string& detail) {
    std::printf("[%s] criterion-%d %s%s%s\n", pass ? "PASS" : "FAIL", criterion, what.c_str(),
                detail.empty() ? "" : ": ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

struct CommandResult {
    int exit_code = -1;
    std::string output;
};

CommandResult run_command(const std::string& cmd) {
    CommandResult r;
    FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
    const int st = pclose(pipe);
    r.exit_code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::vector<Sample> smoke_set(int count, int size) {
    std::vector<Sample> out;
    for (int i = 0; i < count; ++i) {
        auto [image, label] = testutil::synth_vessel_image(size, size, 4000 + i);
        Sample s;
        s.image = std::move(image);
        s.label = std::move(label);
        s.id = "synth" + std::to_string(i);
        s.orig_h = size;
        s.orig_w = size;
        out.push_back(std::move(s));
    }
    return out;
}

std::int64_t closed_form_params(std::array<int, 4> ch, SkipAttention skip,
                                bool bottleneck_sa) {
    auto conv = [](int oc, int ic, int k, bool bias) {
        return std::int64_t(oc) * ic * k * k + (bias ? oc : 0);
    };
    auto unit = [&](int ic, int oc) { return conv(oc, ic, 3, true) + 2 * oc; };
    auto block = [&](int ic, int oc) { return unit(ic, oc) + unit(oc, oc); };
    std::int64_t total = block(3, ch[0]) + block(ch[0], ch[1]) + block(ch[1], ch[2]);
    total += unit(ch[2], ch[3]) + (bottleneck_sa ? conv(1, 2, 7, false) : 0) +
             unit(ch[3], ch[3]);
    for (int level = 3; level >= 1; --level) {
        total += conv(ch[level - 1], ch[level], 3, true);
        if (skip != SkipAttention::kNone) total += conv(1, 2, 7, false);
        total += block(2 * ch[level - 1], ch[level - 1]);
    }
    return total + conv(1, ch[0], 1, true);
}

// ---- criteria -------------------------------------------------------------

void criterion_1_parameters(const std::string& cli) {
    ModelConfig def;
    const std::int64_t n_def = count_params(build(def, Rng(1)));
    ModelConfig sa_unet;
    sa_unet.channels = {16, 32, 64, 128};
    sa_unet.skip_attention = SkipAttention::kNone;
    const std::int64_t n_sa = count_params(build(sa_unet, Rng(1)));

    const std::int64_t cf_def = closed_form_params({16, 32, 48, 64}, SkipAttention::kCsa, true);
    const std::int64_t cf_sa = closed_form_params({16, 32, 64, 128}, SkipAttention::kNone, true);

    auto s1 = run_command(cli + " summary");
    auto s2 = run_command(cli + " summary --channels 16,32,64,128 --skip-attention none");
    const bool cli_ok = s1.exit_code == 0 && s2.exit_code == 0 &&
                        s1.output.find("params=260521 (0.26M)") != std::string::npos &&
                        s2.output.find("params=537299 (0.54M)") != std::string::npos;

    const bool pass = n_def == 260521 && n_sa == 537299 && cf_def == 260521 &&
                      cf_sa == 537299 && cli_ok;
    report(1, "parameter reconciliation", pass,
           "built=" + std::to_string(n_def) + "/" + std::to_string(n_sa) + " closed-form=" +
               std::to_string(cf_def) + "/" + std::to_string(cf_sa) +
               (cli_ok ? ", summary agrees" : ", summary MISMATCH"));
}

void criterion_2_attention_budget() {
    bool pass = true;
    int blocks = 0;
    for (SkipAttention mode : {SkipAttention::kSa, SkipAttention::kCsa}) {
        ModelConfig cfg;
        cfg.skip_attention = mode;
        ParamStore store = build(cfg, Rng(1));
        for (const auto& [name, tensor] : store)
            if (name.find("conv7") != std::string::npos) {
                ++blocks;
                pass = pass && tensor.numel() == 98;
            }
    }
    report(2, "attention blocks cost exactly 98 parameters", pass && blocks == 8,
           std::to_string(blocks) + " blocks checked");
}

void criterion_3_flops() {
    ModelConfig cfg;
    const double flops = count_flops(cfg, 592, 592, nullptr);
    const double target = 21.19e9;
    const double dev = std::abs(flops - target) / target;
    report(3, "FLOPs within 15% of 21.19 G", dev <= 0.15,
           "counted " + std::to_string(flops / 1e9) + " G, deviation " +
               std::to_string(dev * 100.0) + "%");
}

void criterion_4_gradients() {
    auto reports = run_gradient_checks(991);
    bool pass = true;
    double worst = 0;
    std::string failed;
    for (const auto& r : reports) {
        worst = std::max(worst, r.max_rel_err);
        if (!r.pass) {
            pass = false;
            failed += " " + r.name;
        }
    }
    report(4, "finite-difference gradient suite", pass,
           std::to_string(reports.size()) + " checks, worst rel-err " +
               std::to_string(worst) + (failed.empty() ? "" : ", failed:" + failed));
}

void criterion_5_oracles() {
    Rng rng(881);
    bool pass = true;
    std::string detail;

    {  // conv vs naive
        Tensor x = random_uniform<float>(Shape{1, 2, 4, 4}, rng, -1.f, 1.f);
        Tensor w = random_uniform<float>(Shape{3, 2, 3, 3}, rng, -1.f, 1.f);
        Tensor b = random_uniform<float>(Shape{1, 3, 1, 1}, rng, -1.f, 1.f);
        Tape<float> t;
        auto got = t.value(conv2d_same(t, t.leaf(x), t.leaf(w), t.leaf(b)));
        Tensor ref = testutil::naive_conv2d(x, w, &b, 1, 1);
        bool ok = true;
        for (std::size_t i = 0; i < ref.data.size(); ++i)
            ok = ok && std::abs(got.data[i] - ref.data[i]) <= 1e-6f;
        pass = pass && ok;
        if (!ok) detail += " conv2d";
    }
    {  // maxpool vs naive
        Tensor x = random_uniform<float>(Shape{1, 1, 8, 8}, rng, -2.f, 2.f);
        Tape<float> t;
        bool ok = t.value(maxpool2(t, t.leaf(x))).data == testutil::naive_maxpool2(x).data;
        pass = pass && ok;
        if (!ok) detail += " maxpool";
    }
    {  // channel mean vs naive
        Tensor x = random_uniform<float>(Shape{1, 48, 8, 8}, rng, -1.f, 1.f);
        Tape<float> t;
        auto got = t.value(channel_mean(t, t.leaf(x)));
        Tensor ref = testutil::naive_channel_mean(x);
        bool ok = true;
        for (std::size_t i = 0; i < ref.data.size(); ++i)
            ok = ok && std::abs(got.data[i] - ref.data[i]) <= 1e-6f;
        pass = pass && ok;
        if (!ok) detail += " channel_mean";
    }
    {  // group norm statistics
        Tensor x = random_uniform<float>(Shape{2, 16, 4, 4}, rng, -3.f, 3.f);
        Tape<float> t;
        auto y = t.value(group_norm(t, t.leaf(x), t.leaf(Tensor::full(Shape{1, 16, 1, 1}, 1.f)),
                                    t.leaf(Tensor(Shape{1, 16, 1, 1})), 8, 1e-5f));
        bool ok = true;
        for (int n = 0; n < 2; ++n)
            for (int g = 0; g < 8; ++g) {
                auto st = testutil::naive_group_stats(y, 8, n, g);
                ok = ok && std::abs(st.mean) < 1e-5 && std::abs(st.var - 1.0) < 1e-3;
            }
        pass = pass && ok;
        if (!ok) detail += " group_norm";
    }
    {  // AUC vs pairwise oracle, n = 1000
        const int n = 1000;
        std::vector<float> pv(n), yv(n);
        for (int i = 0; i < n; ++i) {
            yv[i] = rng.uniform() < 0.3f ? 1.0f : 0.0f;
            pv[i] = std::round(rng.uniform() * 64.0f) / 64.0f;
        }
        Tensor p(Shape{1, 1, 1, n}, std::vector<float>(pv));
        Tensor y(Shape{1, 1, 1, n}, std::vector<float>(yv));
        bool ok = std::abs(auc(p, y, nullptr) - testutil::naive_auc(pv, yv)) <= 1e-9;
        pass = pass && ok;
        if (!ok) detail += " auc";
    }
    {  // hard MCC vs 1 - soft loss on binary inputs
        bool ok = true;
        for (int rep = 0; rep < 5; ++rep) {
            Tensor y(Shape{1, 1, 8, 8});
            Tensor p(y.shape);
            Rng r(300 + rep);
            for (auto& v : y.data) v = r.uniform() < 0.3f ? 1.0f : 0.0f;
            for (auto& v : p.data) v = r.uniform() < 0.4f ? 1.0f : 0.0f;
            Tape<float> t;
            const double soft = 1.0 - double(t.value(mcc_loss(t, t.leaf(p), t.leaf(y))).data[0]);
            const double hard = metric_suite(confusion(p, y, nullptr)).mcc;
            ok = ok && std::abs(soft - hard) <= 1e-6;
        }
        pass = pass && ok;
        if (!ok) detail += " mcc-consistency";
    }
    {  // metric hand case
        MetricSuite m = metric_suite(HardConfusion{8, 2, 2, 88});
        bool ok = std::abs(m.f1 - 0.800) < 5e-4 && std::abs(m.jacc - 0.6667) < 5e-5 &&
                  std::abs(m.mcc - 0.7778) < 5e-5;
        pass = pass && ok;
        if (!ok) detail += " metric-hand-case";
    }
    report(5, "oracle equivalence", pass, detail.empty() ? "all oracles agree" : detail);
}

void criterion_6_dropblock() {
    const DropBlockConfig cfg{0.15f, 7};
    Tensor x = Tensor::full(Shape{1, 1, 64, 64}, 1.0f);
    Rng rng(771);
    double zero_sum = 0;
    const int draws = 200;
    for (int d = 0; d < draws; ++d) {
        Tape<float> t;
        Rng r = rng.split(d);
        auto out = t.value(dropblock(t, t.leaf(x), cfg, Mode::kTrain, r));
        std::int64_t zeros = 0;
        for (float v : out.data) zeros += (v == 0.0f);
        zero_sum += double(zeros) / double(out.numel());
    }
    const double frac = zero_sum / draws;

    Tape<float> t;
    Var xv = t.leaf(x);
    Rng r2(1);
    const bool identity = dropblock(t, xv, cfg, Mode::kEval, r2).id == xv.id;

    report(6, "dropblock statistics", frac >= 0.13 && frac <= 0.17 && identity,
           "zero fraction " + std::to_string(frac) + ", eval identity " +
               (identity ? "bitwise" : "BROKEN"));
}

void criterion_7_overfit_smoke() {
    auto samples = smoke_set(2, 64);
    ModelConfig cfg;
    cfg.dropblock.drop_rate = 0.0f;  // the smoke test isolates the learning path
    ParamStore params = build(cfg, Rng(3));
    AdamState state = AdamState::init(params);
    auto [x, y] = make_batch(samples, 0, samples.size());

    std::vector<double> losses;
    for (int step = 0; step < 200; ++step) {
        Tape<float> t;
        auto vars = bind_params(t, params);
        Var out = forward_graph(t, vars, cfg, t.leaf(x, "input"), Mode::kTrain, Rng(1));
        Var loss = total_loss(t, out, t.leaf(y, "target"), LossWeights{0.5f, 0.5f});
        losses.push_back(double(t.value(loss).data[0]));
        t.backward(loss);
        ParamStore grads;
        for (const auto& [name, var] : vars) grads.emplace(name, t.grad(var));
        adam_step(params, grads, state);
    }
    Tensor prob = forward_eval(params, cfg, x);
    const double f1 = metric_suite(confusion(prob, y, nullptr, 0.5f)).f1;
    const bool trend = losses[50] < losses[0];
    report(7, "overfit smoke training", f1 > 0.95 && trend,
           "train F1 " + std::to_string(f1) + ", loss " + std::to_string(losses[0]) +
               " -> " + std::to_string(losses[50]) + " (step 50) -> " +
               std::to_string(losses.back()));
}

void write_smoke_dataset(const fs::path& root) {
    fs::create_directories(root / "training" / "images");
    fs::create_directories(root / "training" / "labels");
    for (const Sample& s : smoke_set(2, 64)) {
        write_png((root / "training" / "images" / (s.id + ".png")).string(),
                  tensor_to_image(s.image));
        write_png((root / "training" / "labels" / (s.id + ".png")).string(),
                  tensor_to_image(s.label));
    }
}

void criterion_8_determinism(const std::string& cli, const fs::path& work) {
    const fs::path data = work / "smoke";
    write_smoke_dataset(data);
    const std::string base = cli + " train --data-dir " + data.string() +
                             " --dataset custom --seed 7 --threads 1 --epochs 12"
                             " --patience 11 --batch-size 4 --quiet --out ";
    auto r1 = run_command(base + (work / "run1").string());
    auto r2 = run_command(base + (work / "run2").string());
    if (r1.exit_code != 0 || r2.exit_code != 0) {
        report(8, "single-thread training determinism", false,
               "train exited " + std::to_string(r1.exit_code) + "/" +
                   std::to_string(r2.exit_code) + "\n" + r1.output);
        return;
    }
    const std::string b1 = slurp(work / "run1" / "best.sau2");
    const std::string b2 = slurp(work / "run2" / "best.sau2");
    report(8, "single-thread training determinism", !b1.empty() && b1 == b2,
           "best.sau2 " + std::to_string(b1.size()) + " bytes, " +
               (b1 == b2 ? "byte-identical" : "DIFFER"));
}

void criterion_9_latency(const std::string& cli, const fs::path& work) {
    ModelConfig cfg;
    const fs::path ckpt = work / "timing.sau2";
    save_checkpoint(ckpt.string(), Checkpoint{cfg, build(cfg, Rng(5)), false, 0, {}, {}});
    auto r = run_command(cli + " predict --model " + ckpt.string() + " --timing");
    double mean_s = -1;
    const auto pos = r.output.find("mean_s=");
    if (pos != std::string::npos) mean_s = std::atof(r.output.c_str() + pos + 7);
    report(9, "inference latency (published reference 0.95 s)",
           r.exit_code == 0 && mean_s > 0 && mean_s <= 3.0,
           "mean " + std::to_string(mean_s) + " s per 592x592x3 image over 20 runs");
}

void criterion_10_checkpoint(const fs::path& work) {
    ModelConfig cfg;
    ParamStore params = build(cfg, Rng(9));
    const fs::path p1 = work / "c1.sau2";
    const fs::path p2 = work / "c2.sau2";
    save_checkpoint(p1.string(), Checkpoint{cfg, params, false, 0, {}, {}});
    Checkpoint loaded = load_checkpoint(p1.string());
    save_checkpoint(p2.string(), loaded);
    const std::string b1 = slurp(p1), b2 = slurp(p2);

    bool magic_ok = false;
    std::string corrupted = b1;
    corrupted[0] = 'Z';
    const fs::path p3 = work / "c3.sau2";
    std::ofstream(p3, std::ios::binary).write(corrupted.data(), std::streamsize(corrupted.size()));
    try {
        load_checkpoint(p3.string());
    } catch (const FormatError& e) {
        magic_ok = std::string(e.what()).find("offset 0") != std::string::npos;
    }

    const bool pass = !b1.empty() && b1 == b2 && b1.size() <= 1300000 && magic_ok;
    report(10, "checkpoint byte stability and size", pass,
           std::to_string(b1.size()) + " bytes (limit 1300000), round-trip " +
               (b1 == b2 ? "identical" : "DIFFER") + ", bad magic " +
               (magic_ok ? "caught at offset 0" : "NOT caught"));
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 3) {
        std::fprintf(stderr, "usage: acceptance <vesselnet-cli> <work-dir>\n");
        return 2;
    }
    const std::string cli = argv[1];
    const fs::path work = argv[2];
    fs::remove_all(work);
    fs::create_directories(work);

    criterion_1_parameters(cli);
    criterion_2_attention_budget();
    criterion_3_flops();
    criterion_4_gradients();
    criterion_5_oracles();
    criterion_6_dropblock();
    criterion_7_overfit_smoke();
    criterion_8_determinism(cli, work);
    criterion_9_latency(cli, work);
    criterion_10_checkpoint(work);

    std::printf("acceptance: %d criteria failed\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
