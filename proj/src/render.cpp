#include "dfb/render.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace dfb::render {

namespace {

const cv::Scalar kPalette[] = {
    {180, 119, 31},  // blue-ish (BGR)
    {14, 127, 255},  // orange
    {44, 160, 44},   // green
    {40, 39, 214},   // red
    {189, 103, 148}, // purple
    {75, 86, 140},   // brown
};

constexpr int kW = 640, kH = 440;
constexpr int kMarginL = 70, kMarginR = 20, kMarginT = 40, kMarginB = 50;

struct AxisRange {
    double lo = 0.0, hi = 1.0;
    void widen(double v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
};

cv::Point2i to_px(double x, double y, const AxisRange& xr, const AxisRange& yr) {
    const double fx = (xr.hi > xr.lo) ? (x - xr.lo) / (xr.hi - xr.lo) : 0.5;
    const double fy = (yr.hi > yr.lo) ? (y - yr.lo) / (yr.hi - yr.lo) : 0.5;
    return {kMarginL + static_cast<int>(fx * (kW - kMarginL - kMarginR)),
            kH - kMarginB - static_cast<int>(fy * (kH - kMarginT - kMarginB))};
}

void draw_axes(cv::Mat& img, const AxisRange& xr, const AxisRange& yr, const std::string& title,
               const std::string& xlabel, const std::string& ylabel) {
    img.setTo(cv::Scalar(255, 255, 255));
    cv::rectangle(img, {kMarginL, kMarginT}, {kW - kMarginR, kH - kMarginB},
                  cv::Scalar(60, 60, 60));
    const int ticks = 5;
    for (int i = 0; i <= ticks; ++i) {
        const double tx = xr.lo + (xr.hi - xr.lo) * i / ticks;
        const double ty = yr.lo + (yr.hi - yr.lo) * i / ticks;
        cv::Point2i px = to_px(tx, yr.lo, xr, yr);
        cv::Point2i py = to_px(xr.lo, ty, xr, yr);
        cv::line(img, px, {px.x, px.y + 4}, cv::Scalar(60, 60, 60));
        cv::line(img, py, {py.x - 4, py.y}, cv::Scalar(60, 60, 60));
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3g", tx);
        cv::putText(img, buf, {px.x - 14, px.y + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.38,
                    cv::Scalar(0, 0, 0));
        std::snprintf(buf, sizeof(buf), "%.3g", ty);
        cv::putText(img, buf, {8, py.y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.38, cv::Scalar(0, 0, 0));
    }
    cv::putText(img, title, {kMarginL, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.55, cv::Scalar(0, 0, 0),
                1);
    cv::putText(img, xlabel, {kW / 2 - 40, kH - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0));
    cv::putText(img, ylabel, {6, kMarginT - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0));
}

void write_png(const std::filesystem::path& p, const cv::Mat& img) {
    std::filesystem::create_directories(p.parent_path());
    if (!cv::imwrite(p.string(), img))
        throw std::runtime_error("cannot write image: " + p.string());
}

}  // namespace

void line_plot(const std::filesystem::path& p, const std::vector<Series>& series,
               const std::string& title, const std::string& xlabel, const std::string& ylabel) {
    AxisRange xr{1e300, -1e300}, yr{1e300, -1e300};
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xr.widen(s.x[i]);
            yr.widen(s.y[i]);
        }
    if (xr.lo > xr.hi) xr = {0.0, 1.0};
    if (yr.lo > yr.hi) yr = {0.0, 1.0};
    if (xr.lo == xr.hi) xr.hi = xr.lo + 1.0;
    if (yr.lo == yr.hi) yr.hi = yr.lo + 1.0;

    cv::Mat img(kH, kW, CV_8UC3);
    draw_axes(img, xr, yr, title, xlabel, ylabel);
    for (size_t si = 0; si < series.size(); ++si) {
        const auto color = kPalette[si % std::size(kPalette)];
        const auto& s = series[si];
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            cv::line(img, to_px(s.x[i], s.y[i], xr, yr), to_px(s.x[i + 1], s.y[i + 1], xr, yr),
                     color, 2, cv::LINE_AA);
        for (size_t i = 0; i < s.x.size(); ++i)
            cv::circle(img, to_px(s.x[i], s.y[i], xr, yr), 3, color, cv::FILLED, cv::LINE_AA);
        cv::putText(img, s.name, {kW - kMarginR - 150, kMarginT + 18 + 18 * static_cast<int>(si)},
                    cv::FONT_HERSHEY_SIMPLEX, 0.42, color, 1);
    }
    write_png(p, img);
}

void histogram(const std::filesystem::path& p, const std::vector<std::vector<double>>& groups,
               const std::vector<std::string>& names, int bins, const std::string& title,
               const std::string& xlabel) {
    AxisRange vr{1e300, -1e300};
    for (const auto& g : groups)
        for (double v : g) vr.widen(v);
    if (vr.lo > vr.hi) vr = {0.0, 1.0};
    if (vr.lo == vr.hi) vr.hi = vr.lo + 1.0;

    std::vector<std::vector<int>> counts(groups.size(), std::vector<int>(bins, 0));
    int peak = 1;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        for (double v : groups[gi]) {
            int b = static_cast<int>((v - vr.lo) / (vr.hi - vr.lo) * bins);
            b = std::clamp(b, 0, bins - 1);
            peak = std::max(peak, ++counts[gi][static_cast<size_t>(b)]);
        }
    }

    AxisRange yr{0.0, static_cast<double>(peak)};
    cv::Mat img(kH, kW, CV_8UC3);
    draw_axes(img, vr, yr, title, xlabel, "count");
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        const auto color = kPalette[gi % std::size(kPalette)];
        for (int b = 0; b < bins; ++b) {
            const double x0 = vr.lo + (vr.hi - vr.lo) * b / bins;
            const double x1 = vr.lo + (vr.hi - vr.lo) * (b + 1) / bins;
            const int c = counts[gi][static_cast<size_t>(b)];
            if (c == 0) continue;
            cv::Point2i p0 = to_px(x0, 0.0, vr, yr);
            cv::Point2i p1 = to_px(x1, static_cast<double>(c), vr, yr);
            cv::rectangle(img, {p0.x + 1, p1.y}, {p1.x - 1, p0.y}, color, 2);
        }
        cv::putText(img, names.size() > gi ? names[gi] : "group",
                    {kW - kMarginR - 170, kMarginT + 18 + 18 * static_cast<int>(gi)},
                    cv::FONT_HERSHEY_SIMPLEX, 0.42, color, 1);
    }
    write_png(p, img);
}

namespace {

cv::Mat chw_to_mat(const Tensor& t, int64_t img_idx) {
    const int64_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
    cv::Mat m(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            auto px = [&](int64_t ch) {
                float v = t[((img_idx * c + std::min(ch, c - 1)) * h + y) * w + x];
                return static_cast<uint8_t>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
            };
            // RGB planes to BGR bytes.
            m.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x)) =
                cv::Vec3b(px(2), px(1), px(0));
        }
    return m;
}

}  // namespace

void image_grid(const std::filesystem::path& p, const Tensor& images, int cols, int upscale) {
    if (images.rank() != 4 || images.dim(0) == 0)
        throw std::invalid_argument("image_grid expects a non-empty {N,C,H,W} batch");
    const int64_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
    const int rows = static_cast<int>((n + cols - 1) / cols);
    const int pad = 2;
    cv::Mat canvas(rows * (static_cast<int>(h) * upscale + pad) + pad,
                   cols * (static_cast<int>(w) * upscale + pad) + pad, CV_8UC3,
                   cv::Scalar(30, 30, 30));
    for (int64_t i = 0; i < n; ++i) {
        cv::Mat cell = chw_to_mat(images, i);
        cv::Mat big;
        cv::resize(cell, big, {}, upscale, upscale, cv::INTER_NEAREST);
        const int r = static_cast<int>(i) / cols, col = static_cast<int>(i) % cols;
        big.copyTo(canvas(cv::Rect(pad + col * (big.cols + pad), pad + r * (big.rows + pad),
                                   big.cols, big.rows)));
    }
    write_png(p, canvas);
}

void heatmap_overlay(const std::filesystem::path& p, const Tensor& image_chw, const Tensor& heat,
                     int upscale) {
    const int64_t h = image_chw.dim(1), w = image_chw.dim(2);
    Tensor batch = image_chw;
    batch.reshape({1, image_chw.dim(0), h, w});
    cv::Mat base = chw_to_mat(batch, 0);
    cv::Mat hm(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            hm.at<uint8_t>(static_cast<int>(y), static_cast<int>(x)) =
                static_cast<uint8_t>(std::clamp(heat[y * w + x], 0.0f, 1.0f) * 255.0f + 0.5f);
    cv::Mat color;
    cv::applyColorMap(hm, color, cv::COLORMAP_JET);
    cv::Mat blended;
    cv::addWeighted(base, 0.55, color, 0.45, 0.0, blended);
    cv::Mat big;
    cv::resize(blended, big, {}, upscale, upscale, cv::INTER_NEAREST);
    write_png(p, big);
}

Tensor residual_to_visual(const Tensor& residual_chw) {
    Tensor out = residual_chw;
    float m = linf_norm(out);
    if (m <= 0.0f) m = 1.0f;
    for (float& v : out.flat()) v = 0.5f + v / (2.0f * m);
    return out;
}

}  // namespace dfb::render
