#include "sm3/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <boost/math/distributions/normal.hpp>

#include "sm3/errors.hpp"
#include "sm3/io.hpp"
#include "sm3/json_fields.hpp"

namespace sm3 {

using nlohmann::json;

void GeneratorConfig::validate() const {
  auto positive = [](long v, const char* field) {
    if (v <= 0) throw ValidationError(std::string("generator.") + field + " must be positive");
  };
  positive(n_samples, "n_samples");
  positive(latent_dim, "latent_dim");
  positive(derm_dim, "derm_dim");
  positive(clinic_dim, "clinic_dim");
  if (class_counts.empty()) throw ValidationError("generator.class_counts must name at least one label");
  for (std::size_t k = 0; k < class_counts.size(); ++k) {
    if (class_counts[k] < 2) throw ValidationError("generator.class_counts[" + std::to_string(k) + "] must be >= 2");
  }
  if (!(noise_std >= 0.0 && std::isfinite(noise_std))) throw ValidationError("generator.noise_std must be >= 0");
  if (!(label_correlation >= 0.0 && label_correlation < 1.0)) {
    throw ValidationError("generator.label_correlation must be in [0, 1)");
  }
  if (!class_priors.empty()) {
    if (class_priors.size() != class_counts.size()) {
      throw ValidationError("generator.class_priors must have one row per label");
    }
    for (std::size_t k = 0; k < class_priors.size(); ++k) {
      const auto& p = class_priors[k];
      if (p.empty()) continue;
      double total = std::accumulate(p.begin(), p.end(), 0.0);
      bool ok = static_cast<int>(p.size()) == class_counts[k] && std::abs(total - 1.0) < 1e-9 &&
                std::all_of(p.begin(), p.end(), [](double v) { return v > 0.0; });
      if (!ok) {
        throw ValidationError("generator.class_priors[" + std::to_string(k) +
                              "] must hold class_counts[k] positive values summing to 1");
      }
    }
  }
  if (!(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction < 1.0)) {
    throw ValidationError("generator.train_fraction/val_fraction must leave a non-empty test split");
  }
}

json to_json(const GeneratorConfig& c) {
  return json{{"n_samples", c.n_samples},
              {"latent_dim", c.latent_dim},
              {"derm_dim", c.derm_dim},
              {"clinic_dim", c.clinic_dim},
              {"class_counts", c.class_counts},
              {"noise_std", c.noise_std},
              {"nonlinear", c.nonlinear},
              {"label_correlation", c.label_correlation},
              {"class_priors", c.class_priors},
              {"train_fraction", c.train_fraction},
              {"val_fraction", c.val_fraction},
              {"seed", c.seed}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig c;
  FieldReader r(j, "generator");
  r("n_samples", c.n_samples)("latent_dim", c.latent_dim)("derm_dim", c.derm_dim)("clinic_dim", c.clinic_dim);
  r("class_counts", c.class_counts)("noise_std", c.noise_std)("nonlinear", c.nonlinear)("label_correlation", c.label_correlation);
  r("class_priors", c.class_priors)("train_fraction", c.train_fraction)("val_fraction", c.val_fraction);
  r("seed", c.seed);
  r.finish();
  return c;
}

ModalityPairSample Dataset::sample(std::size_t i) const {
  if (i >= size()) throw ShapeError("sample index out of range");
  const auto r = static_cast<Eigen::Index>(i);
  ModalityPairSample s;
  s.derm = Tensor({static_cast<std::size_t>(derm.cols())},
                  std::vector<double>(derm.row(r).data(), derm.row(r).data() + derm.cols()));
  s.clinic = Tensor({static_cast<std::size_t>(clinic.cols())},
                    std::vector<double>(clinic.row(r).data(), clinic.row(r).data() + clinic.cols()));
  for (Eigen::Index k = 0; k < labels.cols(); ++k) s.labels.push_back(labels(r, k));
  return s;
}

bool operator==(const Dataset& a, const Dataset& b) {
  return to_json(a.config) == to_json(b.config) && a.latent == b.latent && a.derm == b.derm &&
         a.clinic == b.clinic && a.labels == b.labels && a.train == b.train && a.val == b.val && a.test == b.test;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), m.cols());
  for (std::size_t i = 0; i < index.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(index[i]));
  return out;
}

IndexMatrix gather_rows(const IndexMatrix& m, std::span<const std::size_t> index) {
  IndexMatrix out(static_cast<Eigen::Index>(index.size()), m.cols());
  for (std::size_t i = 0; i < index.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(index[i]));
  return out;
}

namespace {

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

double nonlinearity(double x) { return x + std::sin(2.0 * x); }

std::vector<double> bin_edges(int classes, const std::vector<double>* priors) {
  boost::math::normal_distribution<double> standard;
  std::vector<double> edges;
  double cumulative = 0.0;
  for (int c = 0; c + 1 < classes; ++c) {
    cumulative += priors != nullptr ? (*priors)[static_cast<std::size_t>(c)] : 1.0 / classes;
    edges.push_back(boost::math::quantile(standard, std::min(cumulative, 1.0 - 1e-12)));
  }
  return edges;
}

}  // namespace

Dataset generate(const GeneratorConfig& config, Rng& rng) {
  config.validate();
  Rng structure(rng.next_u64());
  Rng samples(rng.next_u64());
  Rng splits(rng.next_u64());

  const int n = config.n_samples;
  const int d = config.latent_dim;
  const int k_labels = config.label_count();
  const double mix_std = 1.0 / std::sqrt(static_cast<double>(d));

  Matrix mix_derm = gaussian_matrix(config.derm_dim, d, mix_std, structure);
  Matrix mix_clinic = gaussian_matrix(config.clinic_dim, d, mix_std, structure);
  Matrix shared_dir = gaussian_matrix(1, d, 1.0, structure);
  shared_dir.row(0).normalize();
  Matrix label_dirs = gaussian_matrix(k_labels, d, 1.0, structure);
  for (Eigen::Index k = 0; k < label_dirs.rows(); ++k) {
    label_dirs.row(k).normalize();
    label_dirs.row(k) = std::sqrt(config.label_correlation) * shared_dir.row(0) +
                        std::sqrt(1.0 - config.label_correlation) * label_dirs.row(k);
    label_dirs.row(k).normalize();
  }
  std::vector<std::vector<double>> edges;
  for (int k = 0; k < k_labels; ++k) {
    const std::vector<double>* priors = config.class_priors.empty() || config.class_priors[static_cast<std::size_t>(k)].empty()
                                             ? nullptr
                                             : &config.class_priors[static_cast<std::size_t>(k)];
    edges.push_back(bin_edges(config.class_counts[static_cast<std::size_t>(k)], priors));
  }

  Dataset ds;
  ds.config = config;
  ds.latent = gaussian_matrix(n, d, 1.0, samples);
  round_to_float(ds.latent);

  auto observe = [&](const Matrix& mix) {
    Matrix x = ds.latent * mix.transpose();
    if (config.nonlinear) x = x.unaryExpr(&nonlinearity);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += config.noise_std * samples.normal();
    round_to_float(x);
    return x;
  };
  ds.derm = observe(mix_derm);
  ds.clinic = observe(mix_clinic);

  ds.labels.resize(n, k_labels);
  Matrix scores = ds.latent * label_dirs.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < k_labels; ++k) {
      const auto& e = edges[static_cast<std::size_t>(k)];
      ds.labels(i, k) = static_cast<int>(std::upper_bound(e.begin(), e.end(), scores(i, k)) - e.begin());
    }
  }

  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});
  splits.shuffle(std::span(order));
  auto n_train = static_cast<std::size_t>(std::lround(config.train_fraction * n));
  auto n_val = static_cast<std::size_t>(std::lround(config.val_fraction * n));
  n_train = std::min(n_train, order.size());
  n_val = std::min(n_val, order.size() - n_train);
  ds.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  ds.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.val.begin(), ds.val.end());
  std::sort(ds.test.begin(), ds.test.end());
  return ds;
}

Dataset generate(const GeneratorConfig& config) {
  Rng rng(config.seed);
  return generate(config, rng);
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  io::BlobWriter blob;
  blob.add("latent", dataset.latent);
  blob.add("derm", dataset.derm);
  blob.add("clinic", dataset.clinic);
  blob.add("labels", dataset.labels);
  json manifest{{"format", "sm3-dataset"},
                {"version", kDatasetVersion},
                {"generator", to_json(dataset.config)},
                {"n_samples", dataset.size()},
                {"class_counts", dataset.config.class_counts},
                {"splits", {{"train", dataset.train}, {"val", dataset.val}, {"test", dataset.test}}}};
  io::save_manifest_and_blob(path, std::move(manifest), blob);
}

Dataset load_dataset(const std::filesystem::path& path) {
  io::LoadedBlob loaded = io::load_manifest_and_blob(path, "sm3-dataset", kDatasetVersion);
  const json& m = loaded.manifest;
  Dataset ds;
  std::size_t n = 0;
  try {
    ds.config = generator_config_from_json(m.at("generator"));
    n = m.at("n_samples").get<std::size_t>();
    ds.train = m.at("splits").at("train").get<std::vector<std::size_t>>();
    ds.val = m.at("splits").at("val").get<std::vector<std::size_t>>();
    ds.test = m.at("splits").at("test").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  ds.latent = io::read_matrix(loaded.blob, io::find_entry(loaded.entries, "latent"));
  ds.derm = io::read_matrix(loaded.blob, io::find_entry(loaded.entries, "derm"));
  ds.clinic = io::read_matrix(loaded.blob, io::find_entry(loaded.entries, "clinic"));
  Matrix labels = io::read_matrix(loaded.blob, io::find_entry(loaded.entries, "labels"));
  ds.labels = labels.cast<int>();

  const auto rows = static_cast<Eigen::Index>(n);
  if (ds.latent.rows() != rows || ds.derm.rows() != rows || ds.clinic.rows() != rows || ds.labels.rows() != rows) {
    throw FormatError(path.string() + ": manifest declares " + std::to_string(n) +
                      " samples but the tensors hold a different number of records");
  }
  if (ds.derm.cols() != ds.config.derm_dim || ds.clinic.cols() != ds.config.clinic_dim ||
      ds.latent.cols() != ds.config.latent_dim || ds.labels.cols() != ds.config.label_count()) {
    throw FormatError(path.string() + ": tensor widths disagree with the generator config");
  }
  std::vector<bool> seen(n, false);
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (std::size_t i : *split) {
      if (i >= n || seen[i]) throw FormatError(path.string() + ": splits overlap or index past n_samples");
      seen[i] = true;
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw FormatError(path.string() + ": splits do not cover every sample");
  }
  for (Eigen::Index k = 0; k < ds.labels.cols(); ++k) {
    int c = ds.config.class_counts[static_cast<std::size_t>(k)];
    if (ds.labels.col(k).minCoeff() < 0 || ds.labels.col(k).maxCoeff() >= c) {
      throw FormatError(path.string() + ": label column " + std::to_string(k) + " out of range");
    }
  }
  return ds;
}

}  // namespace sm3
