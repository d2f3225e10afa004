#include "vesselnet/model.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vesselnet {

// ---------------------------------------------------------------------------
// Config text
// ---------------------------------------------------------------------------

std::string to_string(SkipAttention m) {
    switch (m) {
        case SkipAttention::kNone: return "none";
        case SkipAttention::kSa: return "sa";
        case SkipAttention::kCsa: return "csa";
    }
    return "csa";
}

std::string to_string(Activation a) {
    return a == Activation::kSilu ? "silu" : "relu";
}

SkipAttention skip_attention_from(const std::string& s) {
    if (s == "none") return SkipAttention::kNone;
    if (s == "sa") return SkipAttention::kSa;
    if (s == "csa") return SkipAttention::kCsa;
    throw ConfigError("unknown skip attention mode: " + s);
}

Activation activation_from(const std::string& s) {
    if (s == "silu") return Activation::kSilu;
    if (s == "relu") return Activation::kRelu;
    throw ConfigError("unknown activation: " + s);
}

void ModelConfig::validate() const {
    for (int c : channels) {
        if (c < 1) throw ConfigError("channels must be strictly positive");
        if (norm_groups < 1 || c % norm_groups != 0)
            throw ConfigError("channel width " + std::to_string(c) +
                              " not divisible by norm_groups " + std::to_string(norm_groups));
    }
    if (in_channels < 1 || out_channels < 1)
        throw ConfigError("in/out channel counts must be >= 1");
    dropblock.validate();
}

namespace {
std::string float_str(float v) {
    char buf[48];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}
}  // namespace

std::string ModelConfig::canonical_text() const {
    std::ostringstream os;
    os << "channels=" << channels[0] << "," << channels[1] << "," << channels[2] << ","
       << channels[3] << "\n";
    os << "skip_attention=" << to_string(skip_attention) << "\n";
    os << "bottleneck_attention=" << (bottleneck_attention ? "true" : "false") << "\n";
    os << "activation=" << to_string(activation) << "\n";
    os << "norm_groups=" << norm_groups << "\n";
    os << "dropblock_rate=" << float_str(dropblock.drop_rate) << "\n";
    os << "dropblock_block=" << dropblock.block_size << "\n";
    os << "in_channels=" << in_channels << "\n";
    os << "out_channels=" << out_channels << "\n";
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("config: malformed line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "channels") {
            std::istringstream cs(val);
            std::string tok;
            for (int i = 0; i < 4; ++i) {
                if (!std::getline(cs, tok, ','))
                    throw FormatError("config: channels needs 4 entries");
                cfg.channels[i] = std::stoi(tok);
            }
        } else if (key == "skip_attention") {
            cfg.skip_attention = skip_attention_from(val);
        } else if (key == "bottleneck_attention") {
            cfg.bottleneck_attention = (val == "true");
        } else if (key == "activation") {
            cfg.activation = activation_from(val);
        } else if (key == "norm_groups") {
            cfg.norm_groups = std::stoi(val);
        } else if (key == "dropblock_rate") {
            float f = 0;
            auto res = std::from_chars(val.data(), val.data() + val.size(), f);
            if (res.ec != std::errc{}) throw FormatError("config: bad float: " + val);
            cfg.dropblock.drop_rate = f;
        } else if (key == "dropblock_block") {
            cfg.dropblock.block_size = std::stoi(val);
        } else if (key == "in_channels") {
            cfg.in_channels = std::stoi(val);
        } else if (key == "out_channels") {
            cfg.out_channels = std::stoi(val);
        } else {
            throw FormatError("config: unknown key: " + key);
        }
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// build / counting
// ---------------------------------------------------------------------------

namespace {
std::uint64_t name_stream(const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}
}  // namespace

ParamStore build(const ModelConfig& cfg, Rng rng) {
    cfg.validate();
    ParamStore store;

    // streams are keyed by layer name, so layers common to two configs get
    // identical weights for the same seed (the ablation axes stay comparable)
    auto conv = [&](const std::string& name, int out_c, int in_c, int k, bool bias) {
        const float stddev = std::sqrt(2.0f / (float(in_c) * k * k));
        Rng layer_rng = rng.split(name_stream(name));
        store[name + ".weight"] =
            random_normal<float>(Shape{out_c, in_c, k, k}, layer_rng, stddev);
        if (bias) store[name + ".bias"] = Tensor(Shape{1, out_c, 1, 1});
    };
    auto norm = [&](const std::string& name, int c) {
        store[name + ".gamma"] = Tensor::full(Shape{1, c, 1, 1}, 1.0f);
        store[name + ".beta"] = Tensor(Shape{1, c, 1, 1});
    };
    auto unit = [&](const std::string& prefix, int idx, int in_c, int out_c) {
        conv(prefix + ".conv" + std::to_string(idx), out_c, in_c, 3, true);
        norm(prefix + ".gn" + std::to_string(idx), out_c);
    };
    auto block = [&](const std::string& prefix, int in_c, int out_c) {
        unit(prefix, 1, in_c, out_c);
        unit(prefix, 2, out_c, out_c);
    };

    const auto& ch = cfg.channels;
    block("enc1", cfg.in_channels, ch[0]);
    block("enc2", ch[0], ch[1]);
    block("enc3", ch[1], ch[2]);

    unit("bottleneck", 1, ch[2], ch[3]);
    if (cfg.bottleneck_attention) conv("bottleneck.sa.conv7", 1, 2, kAttentionKernel, false);
    unit("bottleneck", 2, ch[3], ch[3]);

    for (int level = 3; level >= 1; --level) {
        const std::string lvl = std::to_string(level);
        conv("up" + lvl, ch[level - 1], ch[level], 3, true);
        if (cfg.skip_attention == SkipAttention::kCsa)
            conv("skip" + lvl + ".csa.conv7", 1, 2, kAttentionKernel, false);
        else if (cfg.skip_attention == SkipAttention::kSa)
            conv("skip" + lvl + ".sa.conv7", 1, 2, kAttentionKernel, false);
        block("dec" + lvl, 2 * ch[level - 1], ch[level - 1]);
    }
    conv("head.conv", cfg.out_channels, ch[0], 1, true);
    return store;
}

std::int64_t count_params(const ParamStore& params) {
    std::int64_t total = 0;
    for (const auto& [name, tensor] : params) total += tensor.numel();
    return total;
}

double count_flops(const ModelConfig& cfg, int h, int w,
                   std::vector<std::pair<std::string, double>>* breakdown) {
    cfg.validate();
    if (h % 8 != 0 || w % 8 != 0)
        throw ShapeError("count_flops: spatial dims must be divisible by 8");
    double total = 0;
    auto add = [&](const std::string& name, double v) {
        total += v;
        if (breakdown) breakdown->emplace_back(name, v);
    };
    const double act_cost = cfg.activation == Activation::kSilu ? 5.0 : 1.0;

    auto conv_unit = [&](const std::string& name, int in_c, int out_c, double hw) {
        add(name + ".conv", (2.0 * 9 * in_c * out_c + out_c) * hw);
        add(name + ".gn", 8.0 * out_c * hw);
        add(name + ".act", act_cost * out_c * hw);
    };
    auto attention = [&](const std::string& name, int gated_c, int ctx_c, double hw) {
        // two pooled planes, 7x7 conv, sigmoid, gate multiply
        add(name + ".pool", double(gated_c + ctx_c) * hw);
        add(name + ".conv7", 2.0 * kAttentionKernel * kAttentionKernel * 2 * hw);
        add(name + ".sigmoid", 4.0 * hw);
        add(name + ".gate", double(gated_c) * hw);
    };

    const auto& ch = cfg.channels;
    const double hw1 = double(h) * w, hw2 = hw1 / 4, hw3 = hw1 / 16, hw4 = hw1 / 64;
    const std::array<double, 4> hw{hw1, hw2, hw3, hw4};

    conv_unit("enc1.1", cfg.in_channels, ch[0], hw1);
    conv_unit("enc1.2", ch[0], ch[0], hw1);
    add("pool1", 3.0 * ch[0] * hw1);
    conv_unit("enc2.1", ch[0], ch[1], hw2);
    conv_unit("enc2.2", ch[1], ch[1], hw2);
    add("pool2", 3.0 * ch[1] * hw2);
    conv_unit("enc3.1", ch[1], ch[2], hw3);
    conv_unit("enc3.2", ch[2], ch[2], hw3);
    add("pool3", 3.0 * ch[2] * hw3);

    conv_unit("bottleneck.1", ch[2], ch[3], hw4);
    if (cfg.bottleneck_attention) attention("bottleneck.sa", ch[3], ch[3], hw4);
    conv_unit("bottleneck.2", ch[3], ch[3], hw4);

    for (int level = 3; level >= 1; --level) {
        const std::string lvl = std::to_string(level);
        const int c_out = ch[level - 1], c_in = ch[level];
        const double hw_in = hw[level], hw_out = hw[level - 1];
        add("up" + lvl, 2.0 * 9 * c_in * c_out * hw_in + double(c_out) * hw_out);
        if (cfg.skip_attention == SkipAttention::kCsa)
            attention("skip" + lvl + ".csa", c_out, c_out, hw_out);
        else if (cfg.skip_attention == SkipAttention::kSa)
            attention("skip" + lvl + ".sa", c_out, c_out, hw_out);
        conv_unit("dec" + lvl + ".1", 2 * c_out, c_out, hw_out);
        conv_unit("dec" + lvl + ".2", c_out, c_out, hw_out);
    }

    add("head.conv", (2.0 * cfg.channels[0] * cfg.out_channels + cfg.out_channels) * hw1);
    add("head.sigmoid", 4.0 * cfg.out_channels * hw1);
    return total;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads assume a little-endian host");

namespace {

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char(v >> 8));
}
void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_tensors(std::string& out, const ParamStore& store) {
    put_u32(out, std::uint32_t(store.size()));
    for (const auto& [name, tensor] : store) {
        if (name.size() > 0xffff) throw ContractError("tensor name too long: " + name);
        put_u16(out, std::uint16_t(name.size()));
        out.append(name);
        out.push_back(char(4));  // rank
        put_u32(out, std::uint32_t(tensor.shape.n));
        put_u32(out, std::uint32_t(tensor.shape.c));
        put_u32(out, std::uint32_t(tensor.shape.h));
        put_u32(out, std::uint32_t(tensor.shape.w));
        const std::size_t bytes = tensor.data.size() * sizeof(float);
        const std::size_t off = out.size();
        out.resize(off + bytes);
        std::memcpy(out.data() + off, tensor.data.data(), bytes);
    }
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw FormatError(std::string("checkpoint truncated reading ") + what +
                              " at offset " + std::to_string(pos));
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = std::uint8_t(buf[pos]) | (std::uint16_t(std::uint8_t(buf[pos + 1])) << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return std::uint8_t(buf[pos++]);
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

ParamStore read_tensors(Reader& r) {
    ParamStore store;
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("tensor name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const std::uint8_t rank = r.u8("tensor rank");
        if (rank != 4)
            throw FormatError("checkpoint: unsupported tensor rank " + std::to_string(rank) +
                              " at offset " + std::to_string(r.pos - 1));
        Shape s;
        s.n = int(r.u32("dim"));
        s.c = int(r.u32("dim"));
        s.h = int(r.u32("dim"));
        s.w = int(r.u32("dim"));
        s.validate();
        const std::size_t bytes = std::size_t(s.numel()) * sizeof(float);
        r.need(bytes, "tensor payload");
        Tensor t(s);
        std::memcpy(t.data.data(), r.buf.data() + r.pos, bytes);
        r.pos += bytes;
        store.emplace(name, std::move(t));
    }
    return store;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out.append("SAU2");
    put_u32(out, 1);  // version
    const std::string cfg = ckpt.config.canonical_text();
    put_u32(out, std::uint32_t(cfg.size()));
    out.append(cfg);
    out.push_back(char(ckpt.has_optimizer ? 1 : 0));
    put_tensors(out, ckpt.params);
    if (ckpt.has_optimizer) {
        put_u64(out, ckpt.adam_step);
        ParamStore state;
        for (const auto& [name, t] : ckpt.adam_m) state.emplace(name + ".m", t);
        for (const auto& [name, t] : ckpt.adam_v) state.emplace(name + ".v", t);
        put_tensors(out, state);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IngestError("cannot write checkpoint: " + path);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw IngestError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{buf};
    const std::string magic = r.bytes(4, "magic");
    if (magic != "SAU2") throw FormatError("checkpoint: bad magic at offset 0");
    const std::uint32_t version = r.u32("version");
    if (version != 1)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                          " at offset 4");
    const std::uint32_t cfg_len = r.u32("config length");
    Checkpoint ckpt;
    ckpt.config = ModelConfig::from_text(r.bytes(cfg_len, "config text"));
    ckpt.has_optimizer = r.u8("optimizer flag") != 0;
    ckpt.params = read_tensors(r);
    if (ckpt.has_optimizer) {
        ckpt.adam_step = r.u64("optimizer step");
        ParamStore state = read_tensors(r);
        for (auto& [name, t] : state) {
            if (name.size() > 2 && name.ends_with(".m"))
                ckpt.adam_m.emplace(name.substr(0, name.size() - 2), std::move(t));
            else if (name.size() > 2 && name.ends_with(".v"))
                ckpt.adam_v.emplace(name.substr(0, name.size() - 2), std::move(t));
            else
                throw FormatError("checkpoint: stray optimizer tensor: " + name);
        }
    }
    if (r.pos != buf.size())
        throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.pos));
    return ckpt;
}

std::int64_t checkpoint_size_bytes(const ModelConfig& cfg) {
    ParamStore store = build(cfg, Rng(0));
    std::int64_t size = 4 + 4 + 4 + std::int64_t(cfg.canonical_text().size()) + 1 + 4;
    for (const auto& [name, tensor] : store)
        size += 2 + std::int64_t(name.size()) + 1 + 16 + tensor.numel() * 4;
    return size;
}

}  // namespace vesselnet
