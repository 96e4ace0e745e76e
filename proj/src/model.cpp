#include "dfb/nn/model.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "dfb/io.hpp"

namespace dfb::nn {

bool known_classifier_arch(const std::string& arch) {
    return arch == "small-cnn" || arch == "resnet18" || arch == "resnet34" || arch == "vgg16" ||
           arch == "vgg19";
}

namespace {

// Conv-bn-relu unit used by the plain (non-residual) architectures.
void add_cbr(Sequential& net, int64_t in_ch, int64_t out_ch) {
    net.add<Conv2d>(in_ch, out_ch, 3, 1, 1, false);
    net.add<BatchNorm2d>(out_ch);
    net.add<ReLU>();
}

int64_t build_small_cnn(Sequential& net, int64_t c, int64_t& h, int64_t& w) {
    add_cbr(net, c, 16);
    net.add<MaxPool2d>(2);
    h /= 2;
    w /= 2;
    add_cbr(net, 16, 32);
    net.add<MaxPool2d>(2);
    h /= 2;
    w /= 2;
    add_cbr(net, 32, 32);
    return 32;
}

int64_t build_resnet(Sequential& net, int64_t c, const std::vector<int>& blocks) {
    add_cbr(net, c, 16);
    const int64_t widths[4] = {16, 32, 64, 64};
    int64_t in_ch = 16;
    for (size_t stage = 0; stage < blocks.size(); ++stage) {
        const int64_t out_ch = widths[stage];
        for (int b = 0; b < blocks[stage]; ++b) {
            const int64_t stride = (b == 0 && stage > 0) ? 2 : 1;
            net.add<ResidualBlock>(in_ch, out_ch, stride);
            in_ch = out_ch;
        }
    }
    return in_ch;
}

int64_t build_vgg(Sequential& net, int64_t c, int64_t& h, int64_t& w,
                  const std::vector<std::vector<int64_t>>& stages) {
    int64_t in_ch = c;
    for (const auto& stage : stages) {
        for (int64_t out_ch : stage) {
            add_cbr(net, in_ch, out_ch);
            in_ch = out_ch;
        }
        // Pool only while the map stays even; small inputs skip the deeper pools.
        if (h % 2 == 0 && w % 2 == 0 && h > 2 && w > 2) {
            net.add<MaxPool2d>(2);
            h /= 2;
            w /= 2;
        }
    }
    return in_ch;
}

}  // namespace

Classifier::Classifier(const std::string& arch, std::vector<int64_t> input_chw,
                       int64_t num_classes, uint64_t seed) {
    if (!known_classifier_arch(arch))
        throw std::invalid_argument("unknown classifier architecture: " + arch);
    if (input_chw.size() != 3) throw std::invalid_argument("classifier input shape must be CHW");
    if (num_classes < 2) throw std::invalid_argument("classifier needs at least 2 classes");
    meta.kind = "classifier";
    meta.arch = arch;
    meta.input_chw = input_chw;
    meta.num_outputs = num_classes;
    meta.seed = seed;

    int64_t c = input_chw[0], h = input_chw[1], w = input_chw[2];
    if (arch == "small-cnn") {
        if (h % 4 != 0 || w % 4 != 0)
            throw std::invalid_argument("small-cnn needs spatial dims divisible by 4");
        feature_channels_ = build_small_cnn(net_, c, h, w);
    } else if (arch == "resnet18") {
        feature_channels_ = build_resnet(net_, c, {2, 2, 2, 2});
    } else if (arch == "resnet34") {
        feature_channels_ = build_resnet(net_, c, {3, 4, 6, 3});
    } else if (arch == "vgg16") {
        feature_channels_ =
            build_vgg(net_, c, h, w, {{32, 32}, {64, 64}, {64, 64, 64}, {64, 64, 64}, {64, 64, 64}});
    } else {  // vgg19
        feature_channels_ = build_vgg(
            net_, c, h, w,
            {{32, 32}, {64, 64}, {64, 64, 64, 64}, {64, 64, 64, 64}, {64, 64, 64, 64}});
    }
    mask_ = net_.add<ChannelMask>(feature_channels_);
    mask_index_ = net_.size() - 1;
    net_.add<GlobalAvgPool>();
    net_.add<Linear>(feature_channels_, num_classes);

    Rng rng(seed);
    net_.init(rng);
}

Tensor Classifier::forward(const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != meta.input_chw[0] || x.dim(2) != meta.input_chw[1] ||
        x.dim(3) != meta.input_chw[2])
        throw std::invalid_argument("classifier input shape mismatch: got " + x.shape_str());
    return net_.forward(x);
}

Tensor Classifier::backward(const Tensor& dy) { return net_.backward(dy); }

ResidualEncoder::ResidualEncoder(std::vector<int64_t> input_chw, float bound, uint64_t seed)
    : bound_(bound),
      pre_conv_(input_chw.at(0), 16, 3, 1, 1, false),
      pre_bn_(16),
      down_conv_(16, 32, 3, 2, 1, false),
      down_bn_(32),
      mid_conv_(32, 32, 3, 1, 1, false),
      mid_bn_(32),
      up_conv_(32, 16, 3, 1, 1, false),
      up_bn_(16),
      head_conv_(16, input_chw.at(0), 3, 1, 1, true),
      out_(bound) {
    if (input_chw.size() != 3) throw std::invalid_argument("encoder input shape must be CHW");
    if (input_chw[1] % 2 != 0 || input_chw[2] % 2 != 0)
        throw std::invalid_argument("encoder needs even spatial dims");
    if (bound < 0.0f) throw std::invalid_argument("encoder bound must be non-negative");
    meta.kind = "encoder";
    meta.arch = "unet-small";
    meta.input_chw = input_chw;
    meta.num_outputs = input_chw[0];
    meta.out_bound = bound;
    meta.seed = seed;
    Rng rng(seed);
    pre_conv_.init(rng);
    down_conv_.init(rng);
    mid_conv_.init(rng);
    up_conv_.init(rng);
    head_conv_.init(rng);
}

Tensor ResidualEncoder::forward(const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != meta.input_chw[0] || x.dim(2) != meta.input_chw[1] ||
        x.dim(3) != meta.input_chw[2])
        throw std::invalid_argument("encoder input shape mismatch: got " + x.shape_str());
    Tensor a = pre_relu_.forward(pre_bn_.forward(pre_conv_.forward(x)));
    Tensor d = down_relu_.forward(down_bn_.forward(down_conv_.forward(a)));
    Tensor m = mid_relu_.forward(mid_bn_.forward(mid_conv_.forward(d)));
    Tensor u = up_relu_.forward(up_bn_.forward(up_conv_.forward(up_.forward(m))));
    add_scaled_inplace(u, a, 1.0f);  // full-resolution skip
    return out_.forward(head_conv_.forward(u));
}

Tensor ResidualEncoder::backward(const Tensor& dy) {
    Tensor du = head_conv_.backward(out_.backward(dy));
    Tensor da = du;  // skip branch
    Tensor dm = up_.backward(up_conv_.backward(up_bn_.backward(up_relu_.backward(du))));
    Tensor dd = mid_conv_.backward(mid_bn_.backward(mid_relu_.backward(dm)));
    Tensor da2 = down_conv_.backward(down_bn_.backward(down_relu_.backward(dd)));
    add_scaled_inplace(da, da2, 1.0f);
    return pre_conv_.backward(pre_bn_.backward(pre_relu_.backward(da)));
}

std::vector<ParamRef> ResidualEncoder::params() {
    std::vector<ParamRef> out;
    pre_conv_.collect_params("pre_conv", out);
    pre_bn_.collect_params("pre_bn", out);
    down_conv_.collect_params("down_conv", out);
    down_bn_.collect_params("down_bn", out);
    mid_conv_.collect_params("mid_conv", out);
    mid_bn_.collect_params("mid_bn", out);
    up_conv_.collect_params("up_conv", out);
    up_bn_.collect_params("up_bn", out);
    head_conv_.collect_params("head_conv", out);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> ResidualEncoder::state_entries() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& pr : params()) out.emplace_back(pr.name, pr.value);
    for (auto [name, bn] : {std::pair<const char*, BatchNorm2d*>{"pre_bn", &pre_bn_},
                            {"down_bn", &down_bn_},
                            {"mid_bn", &mid_bn_},
                            {"up_bn", &up_bn_}}) {
        out.emplace_back(std::string(name) + ".running_mean", &bn->running_mean);
        out.emplace_back(std::string(name) + ".running_var", &bn->running_var);
    }
    return out;
}

void ResidualEncoder::set_train(bool t) {
    pre_conv_.set_train(t);
    pre_bn_.set_train(t);
    pre_relu_.set_train(t);
    down_conv_.set_train(t);
    down_bn_.set_train(t);
    down_relu_.set_train(t);
    mid_conv_.set_train(t);
    mid_bn_.set_train(t);
    mid_relu_.set_train(t);
    up_.set_train(t);
    up_conv_.set_train(t);
    up_bn_.set_train(t);
    up_relu_.set_train(t);
    head_conv_.set_train(t);
    out_.set_train(t);
}

namespace {

constexpr char kCkptMagic[4] = {'D', 'F', 'B', 'C'};

using StateEntries = std::vector<std::pair<std::string, Tensor*>>;

void collect_running_stats(Layer& layer, const std::string& prefix, StateEntries& out) {
    if (auto* bn = dynamic_cast<BatchNorm2d*>(&layer)) {
        out.emplace_back(prefix + ".running_mean", &bn->running_mean);
        out.emplace_back(prefix + ".running_var", &bn->running_var);
    } else if (auto* rb = dynamic_cast<ResidualBlock*>(&layer)) {
        rb->collect_running_stats(prefix, out);
    } else if (auto* cm = dynamic_cast<ChannelMask*>(&layer)) {
        out.emplace_back(prefix + ".mask", &cm->mask_tensor());
    }
}

// Persisted state = optimizable params plus norm running statistics.
StateEntries classifier_state(Classifier& m) {
    StateEntries s;
    for (auto& p : m.params()) s.emplace_back(p.name, p.value);
    auto& net = m.net();
    for (int i = 0; i < net.size(); ++i)
        collect_running_stats(net.layer(i), "layer" + std::to_string(i), s);
    return s;
}

void write_checkpoint(const std::filesystem::path& p, const ModelMeta& meta,
                      const std::vector<std::pair<std::string, Tensor*>>& entries) {
    json header;
    header["format"] = "dfbc-1";
    header["kind"] = meta.kind;
    header["arch"] = meta.arch;
    header["input_chw"] = meta.input_chw;
    header["num_outputs"] = meta.num_outputs;
    header["out_bound"] = meta.out_bound;
    header["seed"] = meta.seed;
    header["train_config_hash"] = meta.train_config_hash;
    json names = json::array();
    for (const auto& [name, t] : entries) names.push_back(name);
    header["tensors"] = names;
    const std::string head = canonical_dump(header);

    std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + p.string());
    os.write(kCkptMagic, 4);
    const uint64_t hlen = head.size();
    os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    os.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& [name, t] : entries) write_tensor(os, *t);
    if (!os) throw std::runtime_error("checkpoint write failed: " + p.string());
}

json read_checkpoint_header(std::istream& is, const std::filesystem::path& p) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kCkptMagic, 4))
        throw std::runtime_error("not a checkpoint file: " + p.string());
    uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string head(hlen, '\0');
    is.read(head.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw std::runtime_error("truncated checkpoint header: " + p.string());
    return json::parse(head);
}

void load_entries(std::istream& is, const json& header,
                  std::vector<std::pair<std::string, Tensor*>>& entries,
                  const std::filesystem::path& p) {
    const auto names = header.at("tensors").get<std::vector<std::string>>();
    if (names.size() != entries.size())
        throw std::runtime_error("checkpoint tensor count mismatch: " + p.string());
    for (size_t i = 0; i < names.size(); ++i) {
        if (names[i] != entries[i].first)
            throw std::runtime_error("checkpoint tensor order mismatch at " + names[i]);
        Tensor t = read_tensor(is);
        if (!t.same_shape(*entries[i].second))
            throw std::runtime_error("checkpoint shape mismatch at " + names[i]);
        *entries[i].second = std::move(t);
    }
}

}  // namespace

void save_classifier(const std::filesystem::path& p, Classifier& m) {
    write_checkpoint(p, m.meta, classifier_state(m));
}

std::unique_ptr<Classifier> load_classifier(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + p.string());
    json header = read_checkpoint_header(is, p);
    if (header.at("kind").get<std::string>() != "classifier")
        throw std::runtime_error("checkpoint is not a classifier: " + p.string());
    auto m = std::make_unique<Classifier>(header.at("arch").get<std::string>(),
                                          header.at("input_chw").get<std::vector<int64_t>>(),
                                          header.at("num_outputs").get<int64_t>(),
                                          header.at("seed").get<uint64_t>());
    m->meta.train_config_hash = header.value("train_config_hash", "");
    auto state = classifier_state(*m);
    load_entries(is, header, state, p);
    return m;
}

void save_encoder(const std::filesystem::path& p, ResidualEncoder& m) {
    auto entries = m.state_entries();
    write_checkpoint(p, m.meta, entries);
}

std::unique_ptr<ResidualEncoder> load_encoder(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + p.string());
    json header = read_checkpoint_header(is, p);
    if (header.at("kind").get<std::string>() != "encoder")
        throw std::runtime_error("checkpoint is not an encoder: " + p.string());
    auto m = std::make_unique<ResidualEncoder>(header.at("input_chw").get<std::vector<int64_t>>(),
                                               header.at("out_bound").get<float>(),
                                               header.at("seed").get<uint64_t>());
    m->meta.train_config_hash = header.value("train_config_hash", "");
    auto entries = m->state_entries();
    load_entries(is, header, entries, p);
    return m;
}

}  // namespace dfb::nn
