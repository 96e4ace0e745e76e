#include "dfb/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace dfb {

Tensor decode_image_file(const std::filesystem::path& p, int channels) {
    cv::Mat img = cv::imread(p.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
    if (img.empty())
        throw std::runtime_error("decode_image_file: undecodable image " + p.string());
    if (channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
    Tensor t({channels, img.rows, img.cols});
    const int64_t plane = static_cast<int64_t>(img.rows) * img.cols;
    for (int y = 0; y < img.rows; ++y) {
        for (int x = 0; x < img.cols; ++x) {
            if (channels == 1) {
                t[static_cast<int64_t>(y) * img.cols + x] = img.at<uint8_t>(y, x) / 255.0f;
            } else {
                const auto& px = img.at<cv::Vec3b>(y, x);
                for (int c = 0; c < 3; ++c)
                    t[c * plane + static_cast<int64_t>(y) * img.cols + x] = px[c] / 255.0f;
            }
        }
    }
    return t;
}

void save_image_png(const std::filesystem::path& p, const Tensor& chw) {
    if (chw.rank() != 3) throw std::invalid_argument("save_image_png: expected {C,H,W}");
    const int c = static_cast<int>(chw.dim(0));
    const int h = static_cast<int>(chw.dim(1));
    const int w = static_cast<int>(chw.dim(2));
    if (c != 1 && c != 3) throw std::invalid_argument("save_image_png: 1 or 3 channels");
    const int64_t plane = static_cast<int64_t>(h) * w;
    cv::Mat img(h, w, c == 1 ? CV_8UC1 : CV_8UC3);
    auto to_byte = [](float v) {
        v = std::min(std::max(v, 0.0f), 1.0f);
        return static_cast<uint8_t>(std::lround(v * 255.0f));
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int64_t off = static_cast<int64_t>(y) * w + x;
            if (c == 1) {
                img.at<uint8_t>(y, x) = to_byte(chw[off]);
            } else {
                // OpenCV stores BGR
                img.at<cv::Vec3b>(y, x) =
                    cv::Vec3b(to_byte(chw[2 * plane + off]), to_byte(chw[plane + off]), to_byte(chw[off]));
            }
        }
    }
    if (!cv::imwrite(p.string(), img))
        throw std::runtime_error("save_image_png: cannot write " + p.string());
}

}  // namespace dfb
