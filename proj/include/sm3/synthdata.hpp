#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "sm3/rng.hpp"
#include "sm3/tensor.hpp"

namespace sm3 {

/// Paired two-modality generator with planted multi-label ground truth.
///
///   u_i      ~ N(0, I_latent)
///   label k  = quantile bin of w_k . u_i (|w_k| = 1) under N(0, 1), with
///              equal-probability bins unless class_priors[k] is given
///   w_k      = normalize(sqrt(rho) w_0 + sqrt(1 - rho) g_k), rho the
///              label_correlation, so labels share a common factor
///   x_derm   = phi(M_d u_i) + noise_std * eps,   M_d entries N(0, 1/latent)
///   x_clinic = phi(M_c u_i) + noise_std * eps'
///
/// phi is the identity, or x + sin(2x) when `nonlinear` is set. All matrices
/// are fixed per seed; both modalities of a sample share u_i.
struct GeneratorConfig {
  int n_samples = 1250;
  int latent_dim = 8;
  int derm_dim = 64;
  int clinic_dim = 64;
  std::vector<int> class_counts{3, 2, 3, 3, 3, 3, 3, 5};
  double noise_std = 1.0;
  bool nonlinear = true;
  double label_correlation = 0.0;
  /// Optional per-label class priors (each row sums to 1); an empty list or
  /// an empty row means uniform.
  std::vector<std::vector<double>> class_priors;
  /// Split proportions (test takes the remainder); 413/1011 and 203/1011.
  double train_fraction = 413.0 / 1011.0;
  double val_fraction = 203.0 / 1011.0;
  std::uint64_t seed = 0;

  int label_count() const { return static_cast<int>(class_counts.size()); }
  void validate() const;
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

struct ModalityPairSample {
  Tensor derm;
  Tensor clinic;
  std::vector<int> labels;
};

struct Dataset {
  GeneratorConfig config;
  Matrix latent;       // n x latent_dim
  Matrix derm;         // n x derm_dim
  Matrix clinic;       // n x clinic_dim
  IndexMatrix labels;  // n x K
  std::vector<std::size_t> train, val, test;

  std::size_t size() const { return static_cast<std::size_t>(derm.rows()); }
  int label_count() const { return static_cast<int>(labels.cols()); }
  ModalityPairSample sample(std::size_t i) const;

  friend bool operator==(const Dataset& a, const Dataset& b);
};

/// Rows `index` of m, in order.
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> index);
IndexMatrix gather_rows(const IndexMatrix& m, std::span<const std::size_t> index);

Dataset generate(const GeneratorConfig& config, Rng& rng);
/// generate(config, Rng(config.seed))
Dataset generate(const GeneratorConfig& config);

inline constexpr int kDatasetVersion = 1;

/// Manifest at `path` (JSON) plus a float32 blob beside it.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace sm3
