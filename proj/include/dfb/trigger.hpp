#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dfb/nn/train.hpp"

namespace dfb::trigger {

// Per-candidate outcome of the fixed-trigger scan: how much the candidate's
// residual moves the decoder toward the non-target verdict.
struct CandidateScore {
    int64_t index = -1;       // into the candidate image set
    double loss_clean = 0.0;  // CE of decoder(x) toward label 0
    double loss_triggered = 0.0;
    double score = 0.0;  // loss_clean - loss_triggered
};

struct Trigger {
    std::string mode;  // "fixed" | "dynamic"
    Tensor residual;   // {C,H,W}, fixed mode only
    float eps_gen = 0.0f;

    // Provenance
    std::string pood_source_id;
    int64_t selected_index = -1;
    double selected_score = 0.0;
    std::string decoder_hash;
    std::string encoder_hash;
    std::string encoder_ref;  // checkpoint path, dynamic mode

    // In-memory encoder for dynamic application; loaded on demand.
    std::shared_ptr<nn::ResidualEncoder> encoder;
};

struct EncoderEpoch {
    int epoch = 0;
    double loss = 0.0;
    double erase_rate = 0.0;
};

struct EncoderTrainResult {
    std::vector<EncoderEpoch> curve;
    double final_erase_rate = 0.0;
};

// Trains the encoder against the frozen decoder so that decoder(clip01(x + E(x)))
// is pushed toward the non-target label. Pixel clipping participates in the
// gradient (zero slope outside [0,1]).
EncoderTrainResult train_encoder(nn::ResidualEncoder& encoder, nn::Classifier& decoder,
                                 const Tensor& pood_target_images, const nn::Hyper& hyper,
                                 const std::filesystem::path& log_path = {});

// Fraction of target samples the decoder classifies as non-target once the
// encoder's residual is applied.
double erase_rate(nn::ResidualEncoder& encoder, nn::Classifier& decoder,
                  const Tensor& pood_target_images);

// Scores every candidate one at a time (deterministic, order-independent).
std::vector<CandidateScore> score_candidates(nn::ResidualEncoder& encoder,
                                             nn::Classifier& decoder, const Tensor& candidates);

// Fixed-trigger selection: argmax of score, ties broken by lowest index.
Trigger select_fixed_trigger(nn::ResidualEncoder& encoder, nn::Classifier& decoder,
                             const Tensor& candidates);
// Ablation variant: argmin of score, same tie-break.
Trigger select_min_loss_trigger(nn::ResidualEncoder& encoder, nn::Classifier& decoder,
                                const Tensor& candidates);

// Dynamic-trigger carrier; residuals are generated per input at use time.
Trigger make_dynamic_trigger(std::shared_ptr<nn::ResidualEncoder> encoder);

// Per-sample residuals for a batch of images.
Tensor generate_dynamic_residuals(nn::ResidualEncoder& encoder, const Tensor& images);

// Trigger artifact: container file with metadata header and the residual blob.
void save_trigger(const std::filesystem::path& p, const Trigger& t);
Trigger load_trigger(const std::filesystem::path& p, bool load_encoder = true);

}  // namespace dfb::trigger
