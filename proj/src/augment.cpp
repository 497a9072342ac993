#include "sm3/augment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sm3/errors.hpp"

namespace sm3 {

AugmentationPolicy AugmentationPolicy::identity() {
  AugmentationPolicy p;
  p.noise_std = 0.0;
  p.mask_prob = 0.0;
  p.scale_range = {1.0, 1.0};
  return p;
}

namespace {

void check_probability(double p, const char* field) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ValidationError(std::string("augment.") + field + " must be in [0, 1]");
  }
}

void check_interval(const Interval& r, const char* field, bool strictly_positive) {
  bool ok = std::isfinite(r.lo) && std::isfinite(r.hi) && r.lo <= r.hi &&
            (strictly_positive ? r.lo > 0.0 : r.lo >= 0.0);
  if (!ok) {
    throw ValidationError(std::string("augment.") + field + " must satisfy " +
                          (strictly_positive ? "0 < lo <= hi" : "0 <= lo <= hi"));
  }
}

void augment_vector(std::span<double> x, const AugmentationPolicy& policy, Rng& rng) {
  for (double& v : x) {
    if (rng.bernoulli(policy.mask_prob)) v = 0.0;
  }
  if (policy.noise_std > 0.0) {
    for (double& v : x) v += policy.noise_std * rng.normal();
  }
  const double s = rng.uniform(policy.scale_range.lo, policy.scale_range.hi);
  for (double& v : x) v *= s;
}

// Image helpers operate on a C x H x W buffer.
struct ImageView {
  std::size_t c, h, w;
  std::span<double> data;
  double& at(std::size_t ch, std::size_t y, std::size_t x) { return data[(ch * h + y) * w + x]; }
};

void resized_crop(ImageView img, const Interval& area, Rng& rng) {
  const double fraction = rng.uniform(area.lo, area.hi);
  const double side = std::sqrt(fraction);
  const auto ch = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(static_cast<double>(img.h) * side)), 1, img.h);
  const auto cw = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(static_cast<double>(img.w) * side)), 1, img.w);
  const std::size_t top = rng.index(img.h - ch + 1);
  const std::size_t left = rng.index(img.w - cw + 1);
  if (ch == img.h && cw == img.w) return;

  std::vector<double> src(img.data.begin(), img.data.end());
  auto sample = [&](std::size_t c, double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(ch - 1));
    x = std::clamp(x, 0.0, static_cast<double>(cw - 1));
    auto y0 = static_cast<std::size_t>(std::floor(y));
    auto x0 = static_cast<std::size_t>(std::floor(x));
    std::size_t y1 = std::min(y0 + 1, ch - 1);
    std::size_t x1 = std::min(x0 + 1, cw - 1);
    double fy = y - static_cast<double>(y0);
    double fx = x - static_cast<double>(x0);
    auto px = [&](std::size_t yy, std::size_t xx) {
      return src[(c * img.h + top + yy) * img.w + left + xx];
    };
    return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
           fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
  };
  const double sy = static_cast<double>(ch) / static_cast<double>(img.h);
  const double sx = static_cast<double>(cw) / static_cast<double>(img.w);
  for (std::size_t c = 0; c < img.c; ++c) {
    for (std::size_t y = 0; y < img.h; ++y) {
      for (std::size_t x = 0; x < img.w; ++x) {
        img.at(c, y, x) = sample(c, (static_cast<double>(y) + 0.5) * sy - 0.5,
                                 (static_cast<double>(x) + 0.5) * sx - 0.5);
      }
    }
  }
}

void horizontal_flip(ImageView img) {
  for (std::size_t c = 0; c < img.c; ++c) {
    for (std::size_t y = 0; y < img.h; ++y) {
      for (std::size_t x = 0; x < img.w / 2; ++x) std::swap(img.at(c, y, x), img.at(c, y, img.w - 1 - x));
    }
  }
}

void color_jitter(ImageView img, double strength, Rng& rng) {
  const double brightness = rng.uniform(1.0 - strength, 1.0 + strength);
  const double contrast = rng.uniform(1.0 - strength, 1.0 + strength);
  double mean = 0.0;
  for (double v : img.data) mean += v * brightness;
  mean /= static_cast<double>(img.data.size());
  for (double& v : img.data) v = (v * brightness - mean) * contrast + mean;
}

void gaussian_blur(ImageView img, double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    double k = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = k;
    total += k;
  }
  for (double& k : kernel) k /= total;

  auto clamp_index = [](std::ptrdiff_t i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  std::vector<double> tmp(img.data.size());
  // Horizontal pass into tmp, vertical pass back into the image.
  for (std::size_t c = 0; c < img.c; ++c) {
    for (std::size_t y = 0; y < img.h; ++y) {
      for (std::size_t x = 0; x < img.w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 img.at(c, y, clamp_index(static_cast<std::ptrdiff_t>(x) + i, img.w));
        }
        tmp[(c * img.h + y) * img.w + x] = acc;
      }
    }
  }
  for (std::size_t c = 0; c < img.c; ++c) {
    for (std::size_t y = 0; y < img.h; ++y) {
      for (std::size_t x = 0; x < img.w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 tmp[(c * img.h + clamp_index(static_cast<std::ptrdiff_t>(y) + i, img.h)) * img.w + x];
        }
        img.at(c, y, x) = acc;
      }
    }
  }
}

void augment_image(Tensor& t, const AugmentationPolicy& policy, Rng& rng) {
  if (t.rank() != 3) throw ShapeError("image augmentation expects a C x H x W tensor");
  ImageView img{t.dim(0), t.dim(1), t.dim(2), t.values()};
  resized_crop(img, policy.crop_fraction_range, rng);
  if (rng.bernoulli(policy.flip_prob)) horizontal_flip(img);
  if (policy.jitter_strength > 0.0) color_jitter(img, policy.jitter_strength, rng);
  const double sigma = rng.uniform(policy.blur_sigma_range.lo, policy.blur_sigma_range.hi);
  if (sigma > 0.0) gaussian_blur(img, sigma);
}

}  // namespace

void AugmentationPolicy::validate() const {
  if (!(noise_std >= 0.0 && std::isfinite(noise_std))) {
    throw ValidationError("augment.noise_std must be a finite value >= 0");
  }
  check_probability(mask_prob, "mask_prob");
  check_interval(scale_range, "scale_range", true);
  check_interval(crop_fraction_range, "crop_fraction_range", true);
  if (crop_fraction_range.hi > 1.0) throw ValidationError("augment.crop_fraction_range must lie in (0, 1]");
  check_probability(flip_prob, "flip_prob");
  if (!(jitter_strength >= 0.0 && jitter_strength < 1.0)) {
    throw ValidationError("augment.jitter_strength must be in [0, 1)");
  }
  check_interval(blur_sigma_range, "blur_sigma_range", false);
}

Tensor augment(const Tensor& sample, const AugmentationPolicy& policy, Rng& rng, AugmentMode mode) {
  if (!sample.all_finite()) throw NonFiniteError("augment: non-finite sample");
  Tensor out(sample.shape(), std::vector<double>(sample.values().begin(), sample.values().end()));
  if (mode == AugmentMode::vector) {
    augment_vector(out.values(), policy, rng);
  } else {
    augment_image(out, policy, rng);
  }
  return out;
}

Matrix augment_rows(const Matrix& batch, std::span<const std::size_t> sample_ids,
                    const AugmentationPolicy& policy, std::uint64_t seed, std::uint64_t view,
                    std::uint64_t epoch) {
  if (static_cast<std::size_t>(batch.rows()) != sample_ids.size()) {
    throw ShapeError("augment_rows: one sample id per row required");
  }
  Matrix out = batch;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    Rng rng(derive_seed(seed, "augment", {sample_ids[static_cast<std::size_t>(i)], view, epoch}));
    std::span<double> row(out.row(i).data(), static_cast<std::size_t>(out.cols()));
    augment_vector(row, policy, rng);
  }
  return out;
}

}  // namespace sm3
