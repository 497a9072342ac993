#pragma once

#include <cstdint>

#include "sm3/rng.hpp"
#include "sm3/tensor.hpp"

namespace sm3 {

struct Interval {
  double lo = 1.0;
  double hi = 1.0;
};

/// Stochastic view generator. Vector mode uses mask/noise/scale; image mode
/// (rank-3 C x H x W tensors) uses crop/flip/jitter/blur.
struct AugmentationPolicy {
  double noise_std = 0.1;
  double mask_prob = 0.1;
  Interval scale_range{0.9, 1.1};

  /// Fraction of the image area kept by the random crop.
  Interval crop_fraction_range{1.0, 1.0};
  double flip_prob = 0.0;
  /// Brightness and contrast factors are drawn from [1 - s, 1 + s].
  double jitter_strength = 0.0;
  Interval blur_sigma_range{0.0, 0.0};

  static AugmentationPolicy identity();

  /// Throws ValidationError naming the first offending field.
  void validate() const;
};

enum class AugmentMode { vector, image };

/// Applies, in order: Bernoulli(mask_prob) zero-masking per coordinate,
/// additive N(0, noise_std^2), and one global scale drawn from scale_range
/// (vector mode); or random resized crop, horizontal flip, color jitter and
/// Gaussian blur (image mode). Output shape equals input shape.
Tensor augment(const Tensor& sample, const AugmentationPolicy& policy, Rng& rng,
               AugmentMode mode = AugmentMode::vector);

/// Vector-mode augmentation of every row of `batch`; row i uses the seed
/// derive_seed(seed, "augment", {sample_ids[i], view, epoch}).
Matrix augment_rows(const Matrix& batch, std::span<const std::size_t> sample_ids,
                    const AugmentationPolicy& policy, std::uint64_t seed, std::uint64_t view,
                    std::uint64_t epoch);

}  // namespace sm3
