#include "dfb/nn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace dfb::nn {

float lr_at(const LrSchedule& s, int epoch) {
    if (s.kind == "constant") return s.base_lr;
    if (s.kind == "step") {
        float lr = s.base_lr;
        for (int m : s.milestones)
            if (epoch >= m) lr *= s.gamma;
        return lr;
    }
    if (s.kind == "cosine") {
        const double frac = s.total_epochs > 1
                                ? static_cast<double>(epoch) / static_cast<double>(s.total_epochs)
                                : 0.0;
        return static_cast<float>(s.base_lr * 0.5 * (1.0 + std::cos(M_PI * frac)));
    }
    throw std::invalid_argument("unknown lr schedule: " + s.kind);
}

Sgd::Sgd(std::vector<ParamRef> params, float momentum, float weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (auto& p : params_) velocity_.emplace_back(p.value->shape());
}

void Sgd::zero_grad() {
    for (auto& p : params_) p.grad->fill(0.0f);
}

void Sgd::step(float lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        Tensor& vel = velocity_[i];
        const float wd = p.decay ? weight_decay_ : 0.0f;
        float* w = p.value->data();
        const float* g = p.grad->data();
        float* v = vel.data();
        const int64_t n = p.value->numel();
        for (int64_t j = 0; j < n; ++j) {
            const float grad = g[j] + wd * w[j];
            v[j] = momentum_ * v[j] + grad;
            w[j] -= lr * v[j];
        }
    }
}

Adam::Adam(std::vector<ParamRef> params, float beta1, float beta2, float eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params_) {
        m_.emplace_back(p.value->shape());
        v_.emplace_back(p.value->shape());
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.grad->fill(0.0f);
}

void Adam::step(float lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        float* w = params_[i].value->data();
        const float* g = params_[i].grad->data();
        float* m = m_[i].data();
        float* v = v_[i].data();
        const int64_t n = params_[i].value->numel();
        for (int64_t j = 0; j < n; ++j) {
            m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

json Hyper::to_json() const {
    json j;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["momentum"] = momentum;
    j["weight_decay"] = weight_decay;
    j["schedule"] = schedule;
    j["milestones"] = milestones;
    j["gamma"] = gamma;
    j["seed"] = seed;
    json aug = json::array();
    if (augment.random_crop) aug.push_back("random_crop(pad=" + std::to_string(augment.crop_pad) + ")");
    if (augment.random_hflip) aug.push_back("random_hflip");
    j["augmentation"] = aug;
    return j;
}

Hyper Hyper::from_json(const json& j) {
    Hyper h;
    h.epochs = j.value("epochs", h.epochs);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.lr = j.value("lr", h.lr);
    h.momentum = j.value("momentum", h.momentum);
    h.weight_decay = j.value("weight_decay", h.weight_decay);
    h.schedule = j.value("schedule", h.schedule);
    h.milestones = j.value("milestones", h.milestones);
    h.gamma = j.value("gamma", h.gamma);
    h.seed = j.value("seed", h.seed);
    if (j.contains("augmentation"))
        h.augment = data::parse_augmentation(j.at("augmentation").get<std::vector<std::string>>());
    return h;
}

Tensor gather_rows(const Tensor& images, std::span<const int64_t> indices) {
    const int64_t row = images.numel() / images.dim(0);
    std::vector<int64_t> shape = images.shape();
    shape[0] = static_cast<int64_t>(indices.size());
    Tensor out(shape);
    for (size_t i = 0; i < indices.size(); ++i)
        std::memcpy(out.data() + static_cast<int64_t>(i) * row,
                    images.data() + indices[i] * row, static_cast<size_t>(row) * sizeof(float));
    return out;
}

Tensor predict_logits(Classifier& model, const Tensor& images, int batch_size) {
    model.set_train(false);
    const int64_t n = images.dim(0);
    Tensor logits({n, model.meta.num_outputs});
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t len = std::min<int64_t>(batch_size, n - start);
        std::vector<int64_t> idx(static_cast<size_t>(len));
        std::iota(idx.begin(), idx.end(), start);
        Tensor out = model.forward(gather_rows(images, idx));
        std::memcpy(logits.data() + start * model.meta.num_outputs, out.data(),
                    static_cast<size_t>(out.numel()) * sizeof(float));
    }
    return logits;
}

double accuracy(Classifier& model, const Tensor& images, std::span<const int32_t> labels,
                int batch_size) {
    const Tensor logits = predict_logits(model, images, batch_size);
    const auto pred = argmax_rows(logits);
    int64_t hits = 0;
    for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == labels[i]) ++hits;
    return labels.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(labels.size());
}

namespace {

std::pair<double, double> eval_loss_acc(Classifier& model, const Tensor& images,
                                        std::span<const int32_t> labels, int batch_size) {
    model.set_train(false);
    const int64_t n = images.dim(0);
    double loss_sum = 0.0;
    int64_t hits = 0;
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t len = std::min<int64_t>(batch_size, n - start);
        std::vector<int64_t> idx(static_cast<size_t>(len));
        std::iota(idx.begin(), idx.end(), start);
        Tensor out = model.forward(gather_rows(images, idx));
        auto ce = softmax_cross_entropy(out, labels.subspan(static_cast<size_t>(start),
                                                            static_cast<size_t>(len)),
                                        false);
        loss_sum += ce.loss * static_cast<double>(len);
        auto pred = argmax_rows(out);
        for (int64_t i = 0; i < len; ++i)
            if (pred[static_cast<size_t>(i)] == labels[static_cast<size_t>(start + i)]) ++hits;
    }
    return {loss_sum / static_cast<double>(n), static_cast<double>(hits) / static_cast<double>(n)};
}

void append_epoch_log(const std::filesystem::path& path, const EpochRecord& r) {
    if (path.empty()) return;
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::app);
    json j;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["train_loss"] = r.train_loss;
    j["train_acc"] = r.train_acc;
    if (r.val_acc >= 0.0) {
        j["val_loss"] = r.val_loss;
        j["val_acc"] = r.val_acc;
    }
    os << j.dump() << "\n";
}

}  // namespace

TrainResult fit_classifier(Classifier& model, const Tensor& images,
                           std::span<const int32_t> labels, const Hyper& hyper,
                           const FitOptions& opts) {
    const int64_t n = images.dim(0);
    if (n == 0) throw std::invalid_argument("empty training set");
    if (static_cast<size_t>(n) != labels.size())
        throw std::invalid_argument("image/label count mismatch");
    for (int32_t y : labels)
        if (y < 0 || y >= model.meta.num_outputs)
            throw std::invalid_argument("label out of range for " +
                                        std::to_string(model.meta.num_outputs) + " classes");

    Sgd opt(model.params(), hyper.momentum, hyper.weight_decay);
    LrSchedule sched{hyper.schedule, hyper.lr, hyper.epochs, hyper.milestones, hyper.gamma};
    Rng rng(hyper.seed);

    TrainResult res;
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), static_cast<int64_t>(0));

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        const float lr = lr_at(sched, epoch);
        model.set_train(true);
        Rng erng = rng.fork("epoch" + std::to_string(epoch));
        erng.shuffle(order);

        double loss_sum = 0.0;
        int64_t hits = 0;
        for (int64_t start = 0; start < n; start += hyper.batch_size) {
            const int64_t len = std::min<int64_t>(hyper.batch_size, n - start);
            std::span<const int64_t> idx(order.data() + start, static_cast<size_t>(len));
            Tensor batch = gather_rows(images, idx);
            std::vector<int32_t> by(static_cast<size_t>(len));
            for (int64_t i = 0; i < len; ++i) by[static_cast<size_t>(i)] = labels[idx[i]];
            if (!hyper.augment.identity()) batch = data::augment_batch(batch, hyper.augment, erng);

            opt.zero_grad();
            Tensor logits = model.forward(batch);
            auto ce = softmax_cross_entropy(logits, by, true);
            if (!std::isfinite(ce.loss))
                throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                         std::to_string(epoch));
            model.backward(ce.grad);
            opt.step(lr);

            loss_sum += ce.loss * static_cast<double>(len);
            auto pred = argmax_rows(logits);
            for (int64_t i = 0; i < len; ++i)
                if (pred[static_cast<size_t>(i)] == by[static_cast<size_t>(i)]) ++hits;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / static_cast<double>(n);
        rec.train_acc = static_cast<double>(hits) / static_cast<double>(n);
        if (opts.val_images && opts.val_images->dim(0) > 0) {
            auto [vl, va] = eval_loss_acc(model, *opts.val_images, opts.val_labels,
                                          hyper.batch_size);
            rec.val_loss = vl;
            rec.val_acc = va;
        }
        append_epoch_log(opts.log_path, rec);
        res.log.push_back(rec);
    }

    res.final_train_acc = accuracy(model, images, labels, std::max(hyper.batch_size, 64));
    if (opts.val_images && opts.val_images->dim(0) > 0)
        res.final_val_acc = accuracy(model, *opts.val_images, opts.val_labels,
                                     std::max(hyper.batch_size, 64));
    model.set_train(false);
    return res;
}

DecoderOutcome train_decoder(const data::BinaryOodDataset& data, const std::string& arch,
                             const Hyper& hyper, const std::filesystem::path& log_path) {
    if (data.size() == 0) throw std::invalid_argument("decoder training set is empty");
    if (data.n_target == 0 || data.n_nontarget == 0)
        throw std::invalid_argument("decoder training set must contain both labels");

    const auto& shp = data.images.shape();
    DecoderOutcome out;
    out.model = std::make_unique<Classifier>(arch, std::vector<int64_t>{shp[1], shp[2], shp[3]},
                                             2, hyper.seed);

    // Seeded 10% holdout for validation reporting.
    const int64_t n = data.size();
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), static_cast<int64_t>(0));
    Rng rng(hyper.seed);
    Rng srng = rng.fork("decoder-valsplit");
    srng.shuffle(order);
    const int64_t n_val = std::min<int64_t>(std::max<int64_t>(n / 10, n >= 10 ? 1 : 0), n - 1);
    std::vector<int64_t> val_idx(order.begin(), order.begin() + n_val);
    std::vector<int64_t> tr_idx(order.begin() + n_val, order.end());

    Tensor tr_images = gather_rows(data.images, tr_idx);
    Tensor val_images = gather_rows(data.images, val_idx);
    std::vector<int32_t> tr_labels, val_labels;
    tr_labels.reserve(tr_idx.size());
    val_labels.reserve(val_idx.size());
    for (int64_t i : tr_idx) tr_labels.push_back(data.labels[static_cast<size_t>(i)]);
    for (int64_t i : val_idx) val_labels.push_back(data.labels[static_cast<size_t>(i)]);

    FitOptions opts;
    opts.val_images = &val_images;
    opts.val_labels = val_labels;
    opts.log_path = log_path;
    out.result = fit_classifier(*out.model, tr_images, tr_labels, hyper, opts);
    out.model->meta.train_config_hash = json_hash(hyper.to_json());
    return out;
}

std::unique_ptr<Classifier> train_victim(const data::LabeledDataset& data, const std::string& arch,
                                         int64_t num_classes, const Hyper& hyper,
                                         TrainResult* out_result,
                                         const std::filesystem::path& log_path) {
    const auto& shp = data.images.shape();
    auto model = std::make_unique<Classifier>(
        arch, std::vector<int64_t>{shp[1], shp[2], shp[3]}, num_classes, hyper.seed);
    FitOptions opts;
    opts.log_path = log_path;
    TrainResult res = fit_classifier(*model, data.images, data.labels, hyper, opts);
    model->meta.train_config_hash = json_hash(hyper.to_json());
    if (out_result) *out_result = res;
    return model;
}

Tensor forward_encoder(ResidualEncoder& model, const Tensor& images, int batch_size) {
    model.set_train(false);
    const int64_t n = images.dim(0);
    Tensor out(images.shape());
    const int64_t row = images.numel() / std::max<int64_t>(n, 1);
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t len = std::min<int64_t>(batch_size, n - start);
        std::vector<int64_t> idx(static_cast<size_t>(len));
        std::iota(idx.begin(), idx.end(), start);
        Tensor res = model.forward(gather_rows(images, idx));
        std::memcpy(out.data() + start * row, res.data(),
                    static_cast<size_t>(res.numel()) * sizeof(float));
    }
    return out;
}

}  // namespace dfb::nn
