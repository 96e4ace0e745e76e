#pragma once

#include <string>
#include <vector>

#include "dfb/nn/layers.hpp"

namespace dfb::nn {

// Learning-rate schedules over optimizer steps are expressed per epoch.
struct LrSchedule {
    std::string kind = "cosine";  // cosine | step | constant
    float base_lr = 0.05f;
    int total_epochs = 1;
    std::vector<int> milestones;  // step schedule boundaries (epoch indices)
    float gamma = 0.1f;
};

float lr_at(const LrSchedule& s, int epoch);

// SGD with classical momentum and decoupled-from-nothing L2 weight decay
// (decay is added to the gradient, the usual formulation).
class Sgd {
public:
    Sgd(std::vector<ParamRef> params, float momentum, float weight_decay);
    void zero_grad();
    void step(float lr);

private:
    std::vector<ParamRef> params_;
    std::vector<Tensor> velocity_;
    float momentum_, weight_decay_;
};

// Adam on raw tensors; used by input-space optimizers where the variables
// are images/masks rather than network weights.
class Adam {
public:
    Adam(std::vector<ParamRef> params, float beta1 = 0.9f, float beta2 = 0.999f,
         float eps = 1e-8f);
    void zero_grad();
    void step(float lr);

private:
    std::vector<ParamRef> params_;
    std::vector<Tensor> m_, v_;
    float beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace dfb::nn
