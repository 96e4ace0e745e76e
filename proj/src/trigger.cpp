#include "dfb/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dfb/io.hpp"

namespace dfb::trigger {

namespace {

// clip01 with gradient gate: slope 1 strictly inside the pixel range.
Tensor clip01_forward(const Tensor& x, std::vector<uint8_t>& pass) {
    Tensor y = x;
    pass.assign(static_cast<size_t>(x.numel()), 0);
    for (int64_t i = 0; i < y.numel(); ++i) {
        float v = y[i];
        if (v < 0.0f)
            y[i] = 0.0f;
        else if (v > 1.0f)
            y[i] = 1.0f;
        else
            pass[static_cast<size_t>(i)] = 1;
    }
    return y;
}

std::vector<int32_t> nontarget_labels(int64_t n) { return std::vector<int32_t>(static_cast<size_t>(n), 0); }

}  // namespace

EncoderTrainResult train_encoder(nn::ResidualEncoder& encoder, nn::Classifier& decoder,
                                 const Tensor& pood_target_images, const nn::Hyper& hyper,
                                 const std::filesystem::path& log_path) {
    const int64_t n = pood_target_images.dim(0);
    if (n == 0) throw std::invalid_argument("encoder training needs a non-empty target set");
    if (decoder.meta.num_outputs != 2)
        throw std::invalid_argument("decoder must be a binary classifier");

    decoder.set_train(false);  // frozen; running statistics only
    nn::Sgd opt(encoder.params(), hyper.momentum, hyper.weight_decay);
    nn::LrSchedule sched{hyper.schedule, hyper.lr, hyper.epochs, hyper.milestones, hyper.gamma};
    Rng rng(hyper.seed);

    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), static_cast<int64_t>(0));

    EncoderTrainResult res;
    std::ofstream log;
    if (!log_path.empty()) {
        std::filesystem::create_directories(log_path.parent_path());
        log.open(log_path);
    }

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        const float lr = lr_at(sched, epoch);
        encoder.set_train(true);
        Rng erng = rng.fork("epoch" + std::to_string(epoch));
        erng.shuffle(order);

        double loss_sum = 0.0;
        for (int64_t start = 0; start < n; start += hyper.batch_size) {
            const int64_t len = std::min<int64_t>(hyper.batch_size, n - start);
            std::span<const int64_t> idx(order.data() + start, static_cast<size_t>(len));
            Tensor batch = nn::gather_rows(pood_target_images, idx);

            opt.zero_grad();
            Tensor delta = encoder.forward(batch);
            Tensor mixed = batch;
            add_scaled_inplace(mixed, delta, 1.0f);
            std::vector<uint8_t> pass;
            Tensor clipped = clip01_forward(mixed, pass);

            Tensor logits = decoder.forward(clipped);
            auto ce = nn::softmax_cross_entropy(logits, nontarget_labels(len), true);
            if (!std::isfinite(ce.loss))
                throw std::runtime_error("encoder training diverged: non-finite loss at epoch " +
                                         std::to_string(epoch));
            Tensor dx = decoder.backward(ce.grad);
            for (int64_t i = 0; i < dx.numel(); ++i)
                if (!pass[static_cast<size_t>(i)]) dx[i] = 0.0f;
            encoder.backward(dx);
            opt.step(lr);
            loss_sum += ce.loss * static_cast<double>(len);
        }

        EncoderEpoch rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(n);
        rec.erase_rate = erase_rate(encoder, decoder, pood_target_images);
        res.curve.push_back(rec);
        if (log.is_open()) {
            json j;
            j["epoch"] = rec.epoch;
            j["loss"] = rec.loss;
            j["erase_rate"] = rec.erase_rate;
            log << j.dump() << "\n";
        }
    }

    res.final_erase_rate = erase_rate(encoder, decoder, pood_target_images);
    encoder.set_train(false);
    return res;
}

double erase_rate(nn::ResidualEncoder& encoder, nn::Classifier& decoder,
                  const Tensor& pood_target_images) {
    const int64_t n = pood_target_images.dim(0);
    if (n == 0) return 0.0;
    encoder.set_train(false);
    decoder.set_train(false);
    Tensor delta = nn::forward_encoder(encoder, pood_target_images);
    Tensor mixed = pood_target_images;
    add_scaled_inplace(mixed, delta, 1.0f);
    clip_inplace(mixed, 0.0f, 1.0f);
    Tensor logits = nn::predict_logits(decoder, mixed);
    auto pred = nn::argmax_rows(logits);
    int64_t erased = 0;
    for (int32_t p : pred)
        if (p != 1) ++erased;
    return static_cast<double>(erased) / static_cast<double>(n);
}

std::vector<CandidateScore> score_candidates(nn::ResidualEncoder& encoder,
                                             nn::Classifier& decoder, const Tensor& candidates) {
    const int64_t n = candidates.dim(0);
    if (n == 0) throw std::invalid_argument("candidate set is empty");
    encoder.set_train(false);
    decoder.set_train(false);

    std::vector<CandidateScore> scores;
    scores.reserve(static_cast<size_t>(n));
    const std::vector<int32_t> y0{0};
    for (int64_t i = 0; i < n; ++i) {
        const std::vector<int64_t> idx{i};
        Tensor x = nn::gather_rows(candidates, idx);
        Tensor delta = encoder.forward(x);
        Tensor mixed = x;
        add_scaled_inplace(mixed, delta, 1.0f);
        clip_inplace(mixed, 0.0f, 1.0f);

        CandidateScore cs;
        cs.index = i;
        cs.loss_clean = nn::softmax_cross_entropy(decoder.forward(x), y0, false).loss;
        cs.loss_triggered = nn::softmax_cross_entropy(decoder.forward(mixed), y0, false).loss;
        cs.score = cs.loss_clean - cs.loss_triggered;
        if (!std::isfinite(cs.score)) throw std::runtime_error("non-finite candidate score");
        scores.push_back(cs);
    }
    return scores;
}

namespace {

Trigger select_by(nn::ResidualEncoder& encoder, nn::Classifier& decoder, const Tensor& candidates,
                  bool take_max) {
    auto scores = score_candidates(encoder, decoder, candidates);
    size_t best = 0;
    for (size_t i = 1; i < scores.size(); ++i) {
        if (take_max ? scores[i].score > scores[best].score
                     : scores[i].score < scores[best].score)
            best = i;  // strict comparison keeps the lowest index on ties
    }

    const std::vector<int64_t> idx{scores[best].index};
    Tensor x = nn::gather_rows(candidates, idx);
    Tensor residual = encoder.forward(x);
    residual.reshape({candidates.dim(1), candidates.dim(2), candidates.dim(3)});

    Trigger t;
    t.mode = "fixed";
    t.residual = std::move(residual);
    t.eps_gen = encoder.bound();
    t.selected_index = scores[best].index;
    t.selected_score = scores[best].score;
    return t;
}

}  // namespace

Trigger select_fixed_trigger(nn::ResidualEncoder& encoder, nn::Classifier& decoder,
                             const Tensor& candidates) {
    return select_by(encoder, decoder, candidates, true);
}

Trigger select_min_loss_trigger(nn::ResidualEncoder& encoder, nn::Classifier& decoder,
                                const Tensor& candidates) {
    return select_by(encoder, decoder, candidates, false);
}

Trigger make_dynamic_trigger(std::shared_ptr<nn::ResidualEncoder> encoder) {
    if (!encoder) throw std::invalid_argument("dynamic trigger needs an encoder");
    Trigger t;
    t.mode = "dynamic";
    t.eps_gen = encoder->bound();
    t.encoder = std::move(encoder);
    return t;
}

Tensor generate_dynamic_residuals(nn::ResidualEncoder& encoder, const Tensor& images) {
    return nn::forward_encoder(encoder, images);
}

namespace {
constexpr char kTrigMagic[4] = {'D', 'F', 'B', 'G'};
}

void save_trigger(const std::filesystem::path& p, const Trigger& t) {
    json header;
    header["format"] = "dfbg-1";
    header["mode"] = t.mode;
    header["eps_gen"] = t.eps_gen;
    header["pood_source_id"] = t.pood_source_id;
    header["selected_index"] = t.selected_index;
    header["selected_score"] = t.selected_score;
    header["decoder_hash"] = t.decoder_hash;
    header["encoder_hash"] = t.encoder_hash;
    header["encoder_ref"] = t.encoder_ref;
    header["has_residual"] = t.mode == "fixed";
    const std::string head = canonical_dump(header);

    std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write trigger: " + p.string());
    os.write(kTrigMagic, 4);
    const uint64_t hlen = head.size();
    os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    os.write(head.data(), static_cast<std::streamsize>(head.size()));
    if (t.mode == "fixed") write_tensor(os, t.residual);
    if (!os) throw std::runtime_error("trigger write failed: " + p.string());
}

Trigger load_trigger(const std::filesystem::path& p, bool load_enc) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open trigger: " + p.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kTrigMagic, 4))
        throw std::runtime_error("not a trigger file: " + p.string());
    uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string head(hlen, '\0');
    is.read(head.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw std::runtime_error("truncated trigger header: " + p.string());
    json header = json::parse(head);

    Trigger t;
    t.mode = header.at("mode").get<std::string>();
    t.eps_gen = header.at("eps_gen").get<float>();
    t.pood_source_id = header.value("pood_source_id", "");
    t.selected_index = header.value("selected_index", int64_t{-1});
    t.selected_score = header.value("selected_score", 0.0);
    t.decoder_hash = header.value("decoder_hash", "");
    t.encoder_hash = header.value("encoder_hash", "");
    t.encoder_ref = header.value("encoder_ref", "");
    if (header.value("has_residual", false)) t.residual = read_tensor(is);
    if (t.mode == "dynamic" && load_enc) {
        if (t.encoder_ref.empty())
            throw std::runtime_error("dynamic trigger lacks an encoder reference: " + p.string());
        std::filesystem::path enc_path(t.encoder_ref);
        if (enc_path.is_relative()) enc_path = p.parent_path() / enc_path;
        t.encoder = nn::load_encoder(enc_path);
    }
    return t;
}

}  // namespace dfb::trigger
