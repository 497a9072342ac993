#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <filesystem>
#include <fstream>

#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "sm3/errors.hpp"
#include "sm3/io.hpp"
#include "sm3/synthdata.hpp"

using namespace sm3;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

GeneratorConfig small_config(std::uint64_t seed = 3) {
  GeneratorConfig g;
  g.n_samples = 200;
  g.derm_dim = 12;
  g.clinic_dim = 10;
  g.seed = seed;
  return g;
}

void edit_manifest(const fs::path& path, const std::function<void(nlohmann::json&)>& edit) {
  nlohmann::json m = nlohmann::json::parse(io::read_text(path));
  edit(m);
  io::write_text(path, m.dump(2));
}

}  // namespace

TEST_CASE("generation is bitwise deterministic per seed") {
  Dataset a = generate(small_config());
  Dataset b = generate(small_config());
  CHECK(a == b);
  Dataset c = generate(small_config(4));
  CHECK_FALSE(a == c);
}

TEST_CASE("dataset shapes, splits and label ranges") {
  GeneratorConfig g;
  Dataset ds = generate(g);
  CHECK(ds.size() == 1250);
  CHECK(ds.derm.cols() == 64);
  CHECK(ds.clinic.cols() == 64);
  CHECK(ds.latent.cols() == 8);
  CHECK(ds.label_count() == 8);

  std::vector<int> seen(ds.size(), 0);
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (std::size_t i : *split) ++seen[i];
  }
  for (int s : seen) CHECK(s == 1);
  const double n = static_cast<double>(ds.size());
  CHECK(std::abs(ds.train.size() / n - 413.0 / 1011.0) < 0.002);
  CHECK(std::abs(ds.val.size() / n - 203.0 / 1011.0) < 0.002);
  CHECK(std::abs(ds.test.size() / n - 395.0 / 1011.0) < 0.002);

  for (int k = 0; k < 8; ++k) {
    const int c = g.class_counts[static_cast<std::size_t>(k)];
    CHECK(ds.labels.col(k).minCoeff() >= 0);
    CHECK(ds.labels.col(k).maxCoeff() < c);
    for (int cls = 0; cls < c; ++cls) {
      const double count = static_cast<double>((ds.labels.col(k).array() == cls).count());
      CHECK(std::abs(count - n / c) <= 3.0 * std::sqrt(n));
    }
  }
  CHECK(all_finite(ds.derm));
  CHECK(all_finite(ds.clinic));

  ModalityPairSample s = ds.sample(5);
  CHECK(s.derm.size() == 64);
  CHECK(s.labels.size() == 8);
  CHECK(s.derm.to_matrix() == ds.derm.row(5));
}

TEST_CASE("noise-free linear data determines the latent") {
  GeneratorConfig g = small_config();
  g.noise_std = 0.0;
  g.nonlinear = false;
  Dataset ds = generate(g);
  // Recover the mixing matrix by least squares, then reconstruct u from x.
  Matrix m = ds.latent.colPivHouseholderQr().solve(ds.derm);
  Matrix u = m.transpose().colPivHouseholderQr().solve(ds.derm.transpose()).transpose();
  CHECK((u - ds.latent).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("paired samples share their latent") {
  Dataset ds = generate(small_config());
  double across = 0.0;
  int pairs = 0;
  for (Eigen::Index i = 0; i < 50; ++i) {
    CHECK(testing::brute_cos(ds.latent, i, ds.latent, i) == doctest::Approx(1.0));
    for (Eigen::Index j = i + 1; j < 50; ++j) {
      across += testing::brute_cos(ds.latent, i, ds.latent, j);
      ++pairs;
    }
  }
  CHECK(std::abs(across / pairs) < 0.1);
}

TEST_CASE("raw dermoscopy features predict labels above chance") {
  Dataset ds = generate(GeneratorConfig{});
  // Nearest class mean on raw features, label 0 (three classes).
  const int c = 3;
  Matrix means = Matrix::Zero(c, ds.derm.cols());
  std::vector<double> counts(c, 0.0);
  for (std::size_t i : ds.train) {
    means.row(ds.labels(static_cast<Eigen::Index>(i), 0)) += ds.derm.row(static_cast<Eigen::Index>(i));
    counts[static_cast<std::size_t>(ds.labels(static_cast<Eigen::Index>(i), 0))] += 1.0;
  }
  for (int k = 0; k < c; ++k) means.row(k) /= counts[static_cast<std::size_t>(k)];
  int correct = 0;
  for (std::size_t i : ds.test) {
    Eigen::Index best = 0;
    (means.rowwise() - ds.derm.row(static_cast<Eigen::Index>(i))).rowwise().squaredNorm().minCoeff(&best);
    correct += best == ds.labels(static_cast<Eigen::Index>(i), 0);
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(ds.test.size()) > 1.0 / c + 0.1);
}

TEST_CASE("class priors shift the marginals") {
  GeneratorConfig g = small_config();
  g.n_samples = 2000;
  g.class_counts = {2, 3};
  g.class_priors = {{0.8, 0.2}, {}};
  Dataset ds = generate(g);
  const double share = static_cast<double>((ds.labels.col(0).array() == 0).count()) / 2000.0;
  CHECK(std::abs(share - 0.8) < 0.05);
}

TEST_CASE("generator validation names the field") {
  GeneratorConfig g;
  g.class_counts[1] = 1;
  CHECK_THROWS_WITH_AS(g.validate(), "generator.class_counts[1] must be >= 2", ValidationError);
  g = GeneratorConfig{};
  g.noise_std = -1.0;
  CHECK_THROWS_AS(g.validate(), ValidationError);
  g = GeneratorConfig{};
  g.label_correlation = 1.0;
  CHECK_THROWS_AS(g.validate(), ValidationError);
  g = GeneratorConfig{};
  g.train_fraction = 0.9;
  g.val_fraction = 0.2;
  CHECK_THROWS_AS(g.validate(), ValidationError);
  g = GeneratorConfig{};
  g.class_priors = {{0.5, 0.6, -0.1}};
  CHECK_THROWS_AS(g.validate(), ValidationError);
}

TEST_CASE("generator config json roundtrip and unknown keys") {
  GeneratorConfig g = small_config();
  g.class_priors = {{0.5, 0.5}, {}, {0.2, 0.3, 0.5}};
  g.class_counts = {2, 4, 3};
  GeneratorConfig back = generator_config_from_json(to_json(g));
  CHECK(to_json(back) == to_json(g));
  nlohmann::json j = to_json(g);
  j["noise"] = 1.0;
  CHECK_THROWS_WITH_AS(generator_config_from_json(j), "generator.noise is not a known setting", ValidationError);
  j = to_json(g);
  j["n_samples"] = "many";
  CHECK_THROWS_AS(generator_config_from_json(j), ValidationError);
}

TEST_CASE("dataset save/load roundtrip is bitwise") {
  TempDir dir("sm3_synth_roundtrip");
  Dataset ds = generate(small_config());
  save_dataset(ds, dir.path / "d.json");
  Dataset back = load_dataset(dir.path / "d.json");
  CHECK(back == ds);
  CHECK(std::memcmp(back.derm.data(), ds.derm.data(), sizeof(double) * ds.derm.size()) == 0);
  save_dataset(back, dir.path / "e.json");
  CHECK(io::sha256_file(dir.path / "d.bin") == io::sha256_file(dir.path / "e.bin"));
  CHECK(io::read_text(dir.path / "d.json") != io::read_text(dir.path / "e.json"));
}

TEST_CASE("damaged dataset files are rejected") {
  TempDir dir("sm3_synth_damage");
  Dataset ds = generate(small_config());
  const fs::path manifest = dir.path / "d.json";
  const fs::path blob = dir.path / "d.bin";

  SUBCASE("truncated blob fails the checksum") {
    save_dataset(ds, manifest);
    fs::resize_file(blob, fs::file_size(blob) - 4);
    CHECK_THROWS_AS(load_dataset(manifest), ChecksumError);
  }
  SUBCASE("flipped byte fails the checksum") {
    save_dataset(ds, manifest);
    auto bytes = io::read_bytes(blob);
    bytes[bytes.size() / 2] ^= 0x10;
    io::write_bytes(blob, bytes);
    CHECK_THROWS_AS(load_dataset(manifest), ChecksumError);
  }
  SUBCASE("declared sample count disagrees with the records") {
    GeneratorConfig g = small_config();
    g.n_samples = 10;
    Dataset ten = generate(g);
    save_dataset(ten, manifest);
    edit_manifest(manifest, [](nlohmann::json& m) { m["n_samples"] = 11; });
    CHECK_THROWS_AS(load_dataset(manifest), FormatError);
  }
  SUBCASE("version mismatch") {
    save_dataset(ds, manifest);
    edit_manifest(manifest, [](nlohmann::json& m) { m["version"] = 2; });
    CHECK_THROWS_AS(load_dataset(manifest), VersionError);
  }
  SUBCASE("wrong format tag") {
    save_dataset(ds, manifest);
    edit_manifest(manifest, [](nlohmann::json& m) { m["format"] = "sm3-checkpoint"; });
    CHECK_THROWS_AS(load_dataset(manifest), FormatError);
  }
  SUBCASE("overlapping splits") {
    save_dataset(ds, manifest);
    edit_manifest(manifest, [&](nlohmann::json& m) { m["splits"]["val"].push_back(ds.train.front()); });
    CHECK_THROWS_AS(load_dataset(manifest), FormatError);
  }
  SUBCASE("malformed json") {
    save_dataset(ds, manifest);
    io::write_text(manifest, "{\"format\": ");
    CHECK_THROWS_AS(load_dataset(manifest), FormatError);
  }
  SUBCASE("missing files") {
    CHECK_THROWS_AS(load_dataset(dir.path / "nothing.json"), IoError);
    save_dataset(ds, manifest);
    fs::remove(blob);
    CHECK_THROWS_AS(load_dataset(manifest), IoError);
  }
}
