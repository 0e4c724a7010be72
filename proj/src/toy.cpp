#include "s2i/toy.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <random>
#include <stdexcept>

#include "s2i/augment.hpp"

namespace s2i::toy {
namespace {

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
}

cv::Scalar random_color(std::mt19937_64& rng, double lo, double hi) {
  const double b = lo + (hi - lo) * unit(rng);
  const double g = lo + (hi - lo) * unit(rng);
  const double r = lo + (hi - lo) * unit(rng);
  return {255.0 * b, 255.0 * g, 255.0 * r};
}

struct Style {
  cv::Scalar background;
  cv::Scalar background2;
  std::vector<cv::Scalar> fills;
  cv::Scalar outline;
  double stripe_freq;
  double stripe_angle;
};

Style draw_style(std::mt19937_64& rng) {
  Style s;
  s.background = random_color(rng, 0.3, 1.0);
  s.background2 = random_color(rng, 0.3, 1.0);
  for (int i = 0; i < 3; ++i) s.fills.push_back(random_color(rng, 0.0, 1.0));
  s.outline = random_color(rng, 0.0, 0.3);
  s.stripe_freq = 0.1 + 0.4 * unit(rng);
  s.stripe_angle = M_PI * unit(rng);
  return s;
}

cv::Mat render_rgb(int res, std::mt19937_64& style_rng, std::mt19937_64& layout_rng) {
  const Style st = draw_style(style_rng);
  cv::Mat img(res, res, CV_8UC3);
  const double ca = std::cos(st.stripe_angle), sa = std::sin(st.stripe_angle);
  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      const double t = 0.5 + 0.5 * std::sin(st.stripe_freq * (x * ca + y * sa));
      auto& px = img.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        px[c] = cv::saturate_cast<uchar>(st.background[c] * t + st.background2[c] * (1 - t));
      }
    }
  }
  const int shapes = uniform_int(layout_rng, 2, 4);
  const int thick = std::max(1, res / 48);
  for (int i = 0; i < shapes; ++i) {
    const int kind = uniform_int(layout_rng, 0, 2);
    const int cx = uniform_int(layout_rng, res / 6, res - res / 6);
    const int cy = uniform_int(layout_rng, res / 6, res - res / 6);
    const int r = uniform_int(layout_rng, res / 10, res / 4);
    const auto& fill = st.fills[static_cast<size_t>(i) % st.fills.size()];
    if (kind == 0) {
      cv::circle(img, {cx, cy}, r, fill, cv::FILLED, cv::LINE_AA);
      cv::circle(img, {cx, cy}, r, st.outline, thick, cv::LINE_AA);
    } else if (kind == 1) {
      const int rw = uniform_int(layout_rng, res / 10, res / 4);
      cv::rectangle(img, {cx - r, cy - rw}, {cx + r, cy + rw}, fill, cv::FILLED, cv::LINE_AA);
      cv::rectangle(img, {cx - r, cy - rw}, {cx + r, cy + rw}, st.outline, thick, cv::LINE_AA);
    } else {
      std::vector<cv::Point> tri{{cx, cy - r}, {cx - r, cy + r}, {cx + r, cy + r}};
      cv::fillConvexPoly(img, tri, fill, cv::LINE_AA);
      cv::polylines(img, tri, true, st.outline, thick, cv::LINE_AA);
    }
  }
  return img;
}

cv::Mat render_sketch(int res, std::mt19937_64& rng) {
  cv::Mat img(res, res, CV_8UC1, cv::Scalar(255));
  const int strokes = uniform_int(rng, 3, 6);
  const int thick = uniform_int(rng, 1, std::max(1, res / 32));
  const int ink = uniform_int(rng, 0, 60);
  for (int s = 0; s < strokes; ++s) {
    std::vector<cv::Point> pts;
    const bool closed = unit(rng) < 0.5;
    const double cx = res * (0.2 + 0.6 * unit(rng));
    const double cy = res * (0.2 + 0.6 * unit(rng));
    const double r = res * (0.08 + 0.2 * unit(rng));
    const int n = 24;
    const double wobble = 0.05 + 0.15 * unit(rng);
    const double span = closed ? 2 * M_PI : M_PI * (0.3 + 0.7 * unit(rng));
    const double phase = 2 * M_PI * unit(rng);
    for (int i = 0; i < n; ++i) {
      const double a = phase + span * i / (closed ? n : n - 1);
      const double rr = r * (1.0 + wobble * (2 * unit(rng) - 1));
      pts.emplace_back(static_cast<int>(std::lround(cx + rr * std::cos(a))),
                       static_cast<int>(std::lround(cy + rr * std::sin(a))));
    }
    cv::polylines(img, pts, closed, cv::Scalar(ink), thick, cv::LINE_AA);
  }
  return img;
}

std::string indexed(const char* prefix, int64_t i) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%04lld.png", prefix, static_cast<long long>(i));
  return name;
}

void check(const ToyOptions& opts, int64_t count) {
  if (opts.resolution < 16 || count < 0) {
    throw std::invalid_argument("toy: resolution must be >= 16 and count >= 0");
  }
}

}  // namespace

std::vector<fs::path> write_rgb_corpus(const fs::path& dir, int64_t count, const ToyOptions& opts) {
  check(opts, count);
  fs::create_directories(dir);
  std::vector<fs::path> out;
  for (int64_t i = 0; i < count; ++i) {
    const auto ui = static_cast<uint64_t>(i);
    std::mt19937_64 style_rng(augment::derive_seed(opts.seed, 1, ui));
    std::mt19937_64 layout_rng(augment::derive_seed(opts.seed, 2, ui));
    const auto img = render_rgb(static_cast<int>(opts.resolution), style_rng, layout_rng);
    out.push_back(dir / indexed("toy", i));
    if (!cv::imwrite(out.back().string(), img)) {
      throw std::runtime_error("toy: cannot write " + out.back().string());
    }
  }
  return out;
}

std::vector<fs::path> write_sketch_bank(const fs::path& dir, int64_t count,
                                        const ToyOptions& opts) {
  check(opts, count);
  fs::create_directories(dir);
  std::vector<fs::path> out;
  for (int64_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(augment::derive_seed(opts.seed, 3, static_cast<uint64_t>(i)));
    const auto img = render_sketch(static_cast<int>(opts.resolution), rng);
    out.push_back(dir / indexed("bank", i));
    if (!cv::imwrite(out.back().string(), img)) {
      throw std::runtime_error("toy: cannot write " + out.back().string());
    }
  }
  return out;
}

}  // namespace s2i::toy
