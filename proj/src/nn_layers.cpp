#include "dfb/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include <Eigen/Dense>

namespace dfb::nn {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatCM = Eigen::MatrixXf;
using MapRM = Eigen::Map<MatRM>;
using MapCRM = Eigen::Map<const MatRM>;
using MapCM = Eigen::Map<MatCM>;
using MapCCM = Eigen::Map<const MatCM>;

void he_init(Tensor& w, int64_t fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (float& v : w.flat()) v = static_cast<float>(rng.gaussian() * std);
}

// ------------------------------------------------------------------ Conv2d

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int64_t ksize, int64_t stride, int64_t pad, bool bias)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      k_(ksize),
      stride_(stride),
      pad_(pad < 0 ? ksize / 2 : pad),
      has_bias_(bias) {
    weight = Tensor({out_ch_, in_ch_, k_, k_});
    grad_weight = Tensor({out_ch_, in_ch_, k_, k_});
    if (has_bias_) {
        this->bias = Tensor({out_ch_});
        grad_bias = Tensor({out_ch_});
    }
}

void Conv2d::init(Rng& rng) { he_init(weight, in_ch_ * k_ * k_, rng); }

namespace {

// col is {K, N*P} column-major: one column per output pixel.
void im2col(const float* x, int64_t n, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride,
            int64_t pad, int64_t ho, int64_t wo, float* col) {
    const int64_t patch = c * k * k;
    for (int64_t img = 0; img < n; ++img) {
        const float* xi = x + img * c * h * w;
        float* coli = col + img * ho * wo * patch;
        int64_t colidx = 0;
        for (int64_t oy = 0; oy < ho; ++oy) {
            for (int64_t ox = 0; ox < wo; ++ox, ++colidx) {
                float* dst = coli + colidx * patch;
                for (int64_t ch = 0; ch < c; ++ch) {
                    const float* plane = xi + ch * h * w;
                    for (int64_t ky = 0; ky < k; ++ky) {
                        int64_t sy = oy * stride + ky - pad;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            int64_t sx = ox * stride + kx - pad;
                            *dst++ = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                         ? plane[sy * w + sx]
                                         : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

void col2im(const float* col, int64_t n, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride,
            int64_t pad, int64_t ho, int64_t wo, float* x) {
    const int64_t patch = c * k * k;
    std::memset(x, 0, static_cast<size_t>(n * c * h * w) * sizeof(float));
    for (int64_t img = 0; img < n; ++img) {
        float* xi = x + img * c * h * w;
        const float* coli = col + img * ho * wo * patch;
        int64_t colidx = 0;
        for (int64_t oy = 0; oy < ho; ++oy) {
            for (int64_t ox = 0; ox < wo; ++ox, ++colidx) {
                const float* src = coli + colidx * patch;
                for (int64_t ch = 0; ch < c; ++ch) {
                    float* plane = xi + ch * h * w;
                    for (int64_t ky = 0; ky < k; ++ky) {
                        int64_t sy = oy * stride + ky - pad;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            int64_t sx = ox * stride + kx - pad;
                            float v = *src++;
                            if (sy >= 0 && sy < h && sx >= 0 && sx < w) plane[sy * w + sx] += v;
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != in_ch_)
        throw std::invalid_argument("Conv2d: bad input shape " + x.shape_str());
    const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int64_t ho = (h + 2 * pad_ - k_) / stride_ + 1;
    const int64_t wo = (w + 2 * pad_ - k_) / stride_ + 1;
    if (ho < 1 || wo < 1) throw std::invalid_argument("Conv2d: output would be empty");
    const int64_t patch = in_ch_ * k_ * k_, p = ho * wo;
    x_shape_ = x.shape();
    col_ = Tensor({patch, n * p});
    im2col(x.data(), n, in_ch_, h, w, k_, stride_, pad_, ho, wo, col_.data());

    Tensor y({n, out_ch_, ho, wo});
    MapCCM colm(col_.data(), patch, n * p);
    MapCRM wm(weight.data(), out_ch_, patch);
    MatCM ym = wm * colm;  // {out_ch, n*p}
    for (int64_t img = 0; img < n; ++img)
        MapRM(y.data() + img * out_ch_ * p, out_ch_, p) = ym.middleCols(img * p, p);
    if (has_bias_) {
        for (int64_t img = 0; img < n; ++img)
            for (int64_t co = 0; co < out_ch_; ++co) {
                float b = bias[co];
                float* dst = y.data() + (img * out_ch_ + co) * p;
                for (int64_t i = 0; i < p; ++i) dst[i] += b;
            }
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
    const int64_t n = x_shape_[0], h = x_shape_[2], w = x_shape_[3];
    const int64_t ho = dy.dim(2), wo = dy.dim(3), p = ho * wo;
    const int64_t patch = in_ch_ * k_ * k_;

    MatCM dym(out_ch_, n * p);
    for (int64_t img = 0; img < n; ++img)
        dym.middleCols(img * p, p) = MapCRM(dy.data() + img * out_ch_ * p, out_ch_, p);

    MapCCM colm(col_.data(), patch, n * p);
    MapRM gw(grad_weight.data(), out_ch_, patch);
    gw.noalias() += dym * colm.transpose();
    if (has_bias_)
        for (int64_t co = 0; co < out_ch_; ++co) grad_bias[co] += dym.row(co).sum();

    MatCM dcol = MapCRM(weight.data(), out_ch_, patch).transpose() * dym;  // {patch, n*p}
    Tensor dx(x_shape_);
    col2im(dcol.data(), n, in_ch_, h, w, k_, stride_, pad_, ho, wo, dx.data());
    return dx;
}

void Conv2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".weight", &weight, &grad_weight, true});
    if (has_bias_) out.push_back({prefix + ".bias", &bias, &grad_bias, false});
}

// ------------------------------------------------------------------ Linear

Linear::Linear(int64_t in, int64_t out) : in_(in), out_(out) {
    weight = Tensor({out, in});
    bias = Tensor({out});
    grad_weight = Tensor({out, in});
    grad_bias = Tensor({out});
}

void Linear::init(Rng& rng) { he_init(weight, in_, rng); }

Tensor Linear::forward(const Tensor& x) {
    if (x.rank() != 2 || x.dim(1) != in_)
        throw std::invalid_argument("Linear: bad input shape " + x.shape_str());
    x_ = x;
    const int64_t n = x.dim(0);
    Tensor y({n, out_});
    MapCRM xm(x.data(), n, in_);
    MapCRM wm(weight.data(), out_, in_);
    MapRM ym(y.data(), n, out_);
    ym.noalias() = xm * wm.transpose();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < out_; ++o) y[i * out_ + o] += bias[o];
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    const int64_t n = dy.dim(0);
    MapCRM dym(dy.data(), n, out_);
    MapCRM xm(x_.data(), n, in_);
    MapRM gw(grad_weight.data(), out_, in_);
    gw.noalias() += dym.transpose() * xm;
    for (int64_t o = 0; o < out_; ++o) grad_bias[o] += dym.col(o).sum();
    Tensor dx({n, in_});
    MapRM(dx.data(), n, in_).noalias() = dym * MapCRM(weight.data(), out_, in_);
    return dx;
}

void Linear::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".weight", &weight, &grad_weight, true});
    out.push_back({prefix + ".bias", &bias, &grad_bias, false});
}

// ------------------------------------------------------------- activations

Tensor ReLU::forward(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.flat()) v = v > 0.0f ? v : 0.0f;
    y_ = y;
    return y;
}

Tensor ReLU::backward(const Tensor& dy) {
    Tensor dx = dy;
    for (int64_t i = 0; i < dx.numel(); ++i)
        if (y_[i] <= 0.0f) dx[i] = 0.0f;
    return dx;
}

Tensor Tanh::forward(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.flat()) v = std::tanh(v);
    y_ = y;
    return y;
}

Tensor Tanh::backward(const Tensor& dy) {
    Tensor dx = dy;
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] *= 1.0f - y_[i] * y_[i];
    return dx;
}

Tensor ScaledTanh::forward(const Tensor& x) {
    t_ = x;
    for (float& v : t_.flat()) v = std::tanh(v);
    Tensor y = t_;
    scale_inplace(y, bound_);
    return y;
}

Tensor ScaledTanh::backward(const Tensor& dy) {
    Tensor dx = dy;
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] *= bound_ * (1.0f - t_[i] * t_[i]);
    return dx;
}

// ------------------------------------------------------------------ pooling

Tensor MaxPool2d::forward(const Tensor& x) {
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % k_ != 0 || w % k_ != 0)
        throw std::invalid_argument("MaxPool2d: spatial dims must be divisible by kernel");
    const int64_t ho = h / k_, wo = w / k_;
    x_shape_ = x.shape();
    Tensor y({n, c, ho, wo});
    argmax_.assign(static_cast<size_t>(y.numel()), 0);
    for (int64_t img = 0; img < n; ++img) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const float* plane = x.data() + (img * c + ch) * h * w;
            float* out = y.data() + (img * c + ch) * ho * wo;
            int64_t* am = argmax_.data() + (img * c + ch) * ho * wo;
            for (int64_t oy = 0; oy < ho; ++oy) {
                for (int64_t ox = 0; ox < wo; ++ox) {
                    float best = -std::numeric_limits<float>::infinity();
                    int64_t best_idx = 0;
                    for (int64_t ky = 0; ky < k_; ++ky) {
                        for (int64_t kx = 0; kx < k_; ++kx) {
                            int64_t idx = (oy * k_ + ky) * w + ox * k_ + kx;
                            if (plane[idx] > best) {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oy * wo + ox] = best;
                    am[oy * wo + ox] = best_idx;
                }
            }
        }
    }
    return y;
}

Tensor MaxPool2d::backward(const Tensor& dy) {
    const int64_t n = x_shape_[0], c = x_shape_[1], h = x_shape_[2], w = x_shape_[3];
    const int64_t ho = h / k_, wo = w / k_;
    Tensor dx(x_shape_);
    for (int64_t img = 0; img < n; ++img) {
        for (int64_t ch = 0; ch < c; ++ch) {
            float* dplane = dx.data() + (img * c + ch) * h * w;
            const float* dout = dy.data() + (img * c + ch) * ho * wo;
            const int64_t* am = argmax_.data() + (img * c + ch) * ho * wo;
            for (int64_t i = 0; i < ho * wo; ++i) dplane[am[i]] += dout[i];
        }
    }
    return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x) {
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    x_shape_ = x.shape();
    Tensor y({n, c});
    for (int64_t i = 0; i < n * c; ++i) {
        const float* src = x.data() + i * hw;
        double acc = 0.0;
        for (int64_t j = 0; j < hw; ++j) acc += src[j];
        y[i] = static_cast<float>(acc / static_cast<double>(hw));
    }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
    const int64_t n = x_shape_[0], c = x_shape_[1], hw = x_shape_[2] * x_shape_[3];
    Tensor dx(x_shape_);
    const float inv = 1.0f / static_cast<float>(hw);
    for (int64_t i = 0; i < n * c; ++i) {
        float g = dy[i] * inv;
        float* dst = dx.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) dst[j] = g;
    }
    return dx;
}

Tensor UpsampleNearest2x::forward(const Tensor& x) {
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    x_shape_ = x.shape();
    Tensor y({n, c, 2 * h, 2 * w});
    for (int64_t i = 0; i < n * c; ++i) {
        const float* src = x.data() + i * h * w;
        float* dst = y.data() + i * 4 * h * w;
        for (int64_t yy = 0; yy < 2 * h; ++yy)
            for (int64_t xx = 0; xx < 2 * w; ++xx)
                dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
    }
    return y;
}

Tensor UpsampleNearest2x::backward(const Tensor& dy) {
    const int64_t n = x_shape_[0], c = x_shape_[1], h = x_shape_[2], w = x_shape_[3];
    Tensor dx(x_shape_);
    for (int64_t i = 0; i < n * c; ++i) {
        const float* src = dy.data() + i * 4 * h * w;
        float* dst = dx.data() + i * h * w;
        for (int64_t yy = 0; yy < 2 * h; ++yy)
            for (int64_t xx = 0; xx < 2 * w; ++xx)
                dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
    }
    return dx;
}

// -------------------------------------------------------------- batch norm

BatchNorm2d::BatchNorm2d(int64_t channels, float momentum, float eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
    gamma = Tensor::full({channels}, 1.0f);
    beta = Tensor({channels});
    grad_gamma = Tensor({channels});
    grad_beta = Tensor({channels});
    running_mean = Tensor({channels});
    running_var = Tensor::full({channels}, 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x) {
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (c != channels_) throw std::invalid_argument("BatchNorm2d: channel mismatch");
    x_shape_ = x.shape();
    const int64_t m = n * hw;
    Tensor y(x.shape());
    used_batch_stats_ = train_;
    if (train_) {
        xhat_ = Tensor(x.shape());
        invstd_.assign(static_cast<size_t>(c), 0.0f);
        for (int64_t ch = 0; ch < c; ++ch) {
            double sum = 0.0, sq = 0.0;
            for (int64_t img = 0; img < n; ++img) {
                const float* src = x.data() + (img * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                    sum += src[j];
                    sq += static_cast<double>(src[j]) * src[j];
                }
            }
            const double mean = sum / static_cast<double>(m);
            const double var = std::max(0.0, sq / static_cast<double>(m) - mean * mean);
            const float istd = static_cast<float>(1.0 / std::sqrt(var + eps_));
            invstd_[static_cast<size_t>(ch)] = istd;
            running_mean[ch] = (1 - momentum_) * running_mean[ch] + momentum_ * static_cast<float>(mean);
            running_var[ch] = (1 - momentum_) * running_var[ch] + momentum_ * static_cast<float>(var);
            const float g = gamma[ch], b = beta[ch], mu = static_cast<float>(mean);
            for (int64_t img = 0; img < n; ++img) {
                const float* src = x.data() + (img * c + ch) * hw;
                float* xh = xhat_.data() + (img * c + ch) * hw;
                float* dst = y.data() + (img * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                    xh[j] = (src[j] - mu) * istd;
                    dst[j] = g * xh[j] + b;
                }
            }
        }
    } else {
        xhat_ = Tensor(x.shape());
        invstd_.assign(static_cast<size_t>(c), 0.0f);
        for (int64_t ch = 0; ch < c; ++ch) {
            const float istd = 1.0f / std::sqrt(running_var[ch] + eps_);
            invstd_[static_cast<size_t>(ch)] = istd;
            const float g = gamma[ch], b = beta[ch], mu = running_mean[ch];
            for (int64_t img = 0; img < n; ++img) {
                const float* src = x.data() + (img * c + ch) * hw;
                float* xh = xhat_.data() + (img * c + ch) * hw;
                float* dst = y.data() + (img * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                    xh[j] = (src[j] - mu) * istd;
                    dst[j] = g * xh[j] + b;
                }
            }
        }
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
    const int64_t n = x_shape_[0], c = x_shape_[1], hw = x_shape_[2] * x_shape_[3];
    const int64_t m = n * hw;
    Tensor dx(x_shape_);
    if (!used_batch_stats_) {
        // eval-mode: frozen affine transform
        for (int64_t ch = 0; ch < c; ++ch) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            const float scale = gamma[ch] * invstd_[static_cast<size_t>(ch)];
            for (int64_t img = 0; img < n; ++img) {
                const float* dsrc = dy.data() + (img * c + ch) * hw;
                const float* xh = xhat_.data() + (img * c + ch) * hw;
                float* ddst = dx.data() + (img * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                    sum_dy += dsrc[j];
                    sum_dy_xhat += static_cast<double>(dsrc[j]) * xh[j];
                    ddst[j] = dsrc[j] * scale;
                }
            }
            grad_beta[ch] += static_cast<float>(sum_dy);
            grad_gamma[ch] += static_cast<float>(sum_dy_xhat);
        }
        return dx;
    }
    for (int64_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int64_t img = 0; img < n; ++img) {
            const float* dsrc = dy.data() + (img * c + ch) * hw;
            const float* xh = xhat_.data() + (img * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) {
                sum_dy += dsrc[j];
                sum_dy_xhat += static_cast<double>(dsrc[j]) * xh[j];
            }
        }
        grad_beta[ch] += static_cast<float>(sum_dy);
        grad_gamma[ch] += static_cast<float>(sum_dy_xhat);
        const float g = gamma[ch], istd = invstd_[static_cast<size_t>(ch)];
        const float mean_dy = static_cast<float>(sum_dy / static_cast<double>(m));
        const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(m));
        for (int64_t img = 0; img < n; ++img) {
            const float* dsrc = dy.data() + (img * c + ch) * hw;
            const float* xh = xhat_.data() + (img * c + ch) * hw;
            float* ddst = dx.data() + (img * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j)
                ddst[j] = g * istd * (dsrc[j] - mean_dy - xh[j] * mean_dy_xhat);
        }
    }
    return dx;
}

void BatchNorm2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".gamma", &gamma, &grad_gamma, false});
    out.push_back({prefix + ".beta", &beta, &grad_beta, false});
}

// ------------------------------------------------------------ channel mask

Tensor ChannelMask::forward(const Tensor& x) {
    if (identity()) return x;
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor y = x;
    for (int64_t img = 0; img < n; ++img)
        for (int64_t ch = 0; ch < c; ++ch) {
            float m = mask_.data()[ch];
            if (m == 1.0f) continue;
            float* dst = y.data() + (img * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) dst[j] *= m;
        }
    return y;
}

Tensor ChannelMask::backward(const Tensor& dy) {
    if (identity()) return dy;
    const int64_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    Tensor dx = dy;
    for (int64_t img = 0; img < n; ++img)
        for (int64_t ch = 0; ch < c; ++ch) {
            float m = mask_.data()[ch];
            if (m == 1.0f) continue;
            float* dst = dx.data() + (img * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) dst[j] *= m;
        }
    return dx;
}

bool ChannelMask::identity() const {
    for (float m : mask_.flat())
        if (m != 1.0f) return false;
    return true;
}

// ----------------------------------------------------------------- flatten

Tensor Flatten::forward(const Tensor& x) {
    x_shape_ = x.shape();
    Tensor y = x;
    y.reshape({x.dim(0), x.numel() / x.dim(0)});
    return y;
}

Tensor Flatten::backward(const Tensor& dy) {
    Tensor dx = dy;
    dx.reshape(x_shape_);
    return dx;
}

// ---------------------------------------------------------- residual block

ResidualBlock::ResidualBlock(int64_t in_ch, int64_t out_ch, int64_t stride)
    : conv1_(in_ch, out_ch, 3, stride, 1, false),
      conv2_(out_ch, out_ch, 3, 1, 1, false),
      bn1_(out_ch),
      bn2_(out_ch) {
    if (stride != 1 || in_ch != out_ch) {
        proj_ = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, false);
        proj_bn_ = std::make_unique<BatchNorm2d>(out_ch);
    }
}

void ResidualBlock::init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (proj_) proj_->init(rng);
}

Tensor ResidualBlock::forward(const Tensor& x) {
    x_ = x;
    Tensor h = relu1_.forward(bn1_.forward(conv1_.forward(x)));
    Tensor main = bn2_.forward(conv2_.forward(h));
    Tensor skip = proj_ ? proj_bn_->forward(proj_->forward(x)) : x;
    add_scaled_inplace(main, skip, 1.0f);
    return relu2_.forward(main);
}

Tensor ResidualBlock::backward(const Tensor& dy) {
    Tensor d = relu2_.backward(dy);
    Tensor d_main = bn2_.backward(d);  // keep d intact for the skip branch
    Tensor dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(d_main))));
    if (proj_) {
        Tensor dskip = proj_->backward(proj_bn_->backward(d));
        add_scaled_inplace(dx, dskip, 1.0f);
    } else {
        add_scaled_inplace(dx, d, 1.0f);
    }
    return dx;
}

void ResidualBlock::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    conv1_.collect_params(prefix + ".conv1", out);
    bn1_.collect_params(prefix + ".bn1", out);
    conv2_.collect_params(prefix + ".conv2", out);
    bn2_.collect_params(prefix + ".bn2", out);
    if (proj_) {
        proj_->collect_params(prefix + ".proj", out);
        proj_bn_->collect_params(prefix + ".proj_bn", out);
    }
}

void ResidualBlock::collect_running_stats(const std::string& prefix,
                                          std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + ".bn1.running_mean", &bn1_.running_mean);
    out.emplace_back(prefix + ".bn1.running_var", &bn1_.running_var);
    out.emplace_back(prefix + ".bn2.running_mean", &bn2_.running_mean);
    out.emplace_back(prefix + ".bn2.running_var", &bn2_.running_var);
    if (proj_bn_) {
        out.emplace_back(prefix + ".proj_bn.running_mean", &proj_bn_->running_mean);
        out.emplace_back(prefix + ".proj_bn.running_var", &proj_bn_->running_var);
    }
}

void ResidualBlock::set_train(bool t) {
    Layer::set_train(t);
    conv1_.set_train(t);
    conv2_.set_train(t);
    bn1_.set_train(t);
    bn2_.set_train(t);
    relu1_.set_train(t);
    relu2_.set_train(t);
    if (proj_) {
        proj_->set_train(t);
        proj_bn_->set_train(t);
    }
}

// -------------------------------------------------------------- sequential

Tensor Sequential::forward(const Tensor& x) {
    input_ = x;
    acts_.clear();
    acts_.reserve(layers_.size());
    Tensor cur = x;
    for (auto& l : layers_) {
        cur = l->forward(cur);
        acts_.push_back(cur);
    }
    return cur;
}

const Tensor& Sequential::activation(int i) const {
    if (i < 0) return input_;
    return acts_.at(static_cast<size_t>(i));
}

Tensor Sequential::backward(const Tensor& dy) { return backward_until(dy, -1); }

Tensor Sequential::backward_until(const Tensor& dy, int stop_at) {
    Tensor cur = dy;
    for (int i = static_cast<int>(layers_.size()) - 1; i > stop_at; --i)
        cur = layers_[static_cast<size_t>(i)]->backward(cur);
    return cur;
}

std::vector<ParamRef> Sequential::params(const std::string& prefix) {
    std::vector<ParamRef> out;
    for (size_t i = 0; i < layers_.size(); ++i)
        layers_[i]->collect_params(prefix + "layer" + std::to_string(i), out);
    return out;
}

void Sequential::set_train(bool t) {
    for (auto& l : layers_) l->set_train(t);
}

void Sequential::init(Rng& rng) {
    for (auto& l : layers_) {
        if (auto* c = dynamic_cast<Conv2d*>(l.get())) c->init(rng);
        if (auto* li = dynamic_cast<Linear*>(l.get())) li->init(rng);
        if (auto* r = dynamic_cast<ResidualBlock*>(l.get())) r->init(rng);
    }
}

// ------------------------------------------------------------------ losses

Tensor softmax(const Tensor& logits) {
    const int64_t n = logits.dim(0), k = logits.dim(1);
    Tensor p(logits.shape());
    for (int64_t i = 0; i < n; ++i) {
        const float* row = logits.data() + i * k;
        float* out = p.data() + i * k;
        float mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        for (int64_t j = 0; j < k; ++j)
            out[j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
    return p;
}

CeResult softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> labels,
                               bool want_grad) {
    const int64_t n = logits.dim(0), k = logits.dim(1);
    CeResult res;
    if (want_grad) res.grad = Tensor(logits.shape());
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float* row = logits.data() + i * k;
        float mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        const int32_t y = labels[static_cast<size_t>(i)];
        total += std::log(z) - static_cast<double>(row[y] - mx);
        if (want_grad) {
            float* g = res.grad.data() + i * k;
            for (int64_t j = 0; j < k; ++j) {
                double p = std::exp(static_cast<double>(row[j] - mx)) / z;
                g[j] = static_cast<float>((p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
            }
        }
    }
    res.loss = total / static_cast<double>(n);
    return res;
}

std::vector<int32_t> argmax_rows(const Tensor& logits) {
    const int64_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int32_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const float* row = logits.data() + i * k;
        int32_t best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (row[j] > row[best]) best = static_cast<int32_t>(j);
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const int32_t> labels) {
    const int64_t n = logits.dim(0), k = logits.dim(1);
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const float* row = logits.data() + i * k;
        float mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        const int32_t y = labels[static_cast<size_t>(i)];
        out[static_cast<size_t>(i)] = std::log(z) - static_cast<double>(row[y] - mx);
    }
    return out;
}

}  // namespace dfb::nn
