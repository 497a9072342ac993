#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "sm3/cli.hpp"
#include "sm3/errors.hpp"
#include "sm3/eval.hpp"
#include "sm3/losses.hpp"
#include "sm3/pseudolabel.hpp"
#include "sm3/synthdata.hpp"

namespace py = pybind11;
using namespace sm3;

namespace {

py::dict dataset_dict(const Dataset& ds) {
  py::dict d;
  d["derm"] = ds.derm;
  d["clinic"] = ds.clinic;
  d["latent"] = ds.latent;
  d["labels"] = ds.labels;
  d["train"] = ds.train;
  d["val"] = ds.val;
  d["test"] = ds.test;
  d["config"] = to_json(ds.config).dump();
  return d;
}

double nt_xent_value(const Matrix& z1, const Matrix& z2, double tau, bool symmetric) {
  Tape t;
  Var a = t.constant(z1), b = t.constant(z2);
  return (symmetric ? nt_xent_symmetric(a, b, tau) : nt_xent(a, b, tau)).item();
}

double l_mm_value(const Matrix& zd1, const Matrix& zd2, const Matrix& zc1, const Matrix& zc2, double tau,
                  bool mirror) {
  Tape t;
  return l_mm(t.constant(zd1), t.constant(zd2), t.constant(zc1), t.constant(zc2), tau, mirror).item();
}

py::dict pair_match_dict(const Matrix& zd, const Matrix& zc) {
  PairMatchReport r = pair_match(zd, zc);
  py::dict d;
  d["avg_rank"] = r.avg_rank;
  d["acc_at_1"] = r.acc_at_1;
  d["acc_at_5"] = r.acc_at_5;
  d["m"] = r.m;
  d["ranks"] = r.ranks;
  return d;
}

py::dict confusion_dict(const std::vector<int>& pred, const std::vector<int>& labels, int positive) {
  ConfusionMetrics c = confusion_metrics(pred, labels, positive);
  py::dict d;
  d["tp"] = c.tp;
  d["fn"] = c.fn;
  d["tn"] = c.tn;
  d["fp"] = c.fp;
  d["sensitivity"] = c.sensitivity;
  d["specificity"] = c.specificity;
  d["precision"] = c.precision;
  d["precision_undefined"] = c.precision_undefined;
  return d;
}

py::dict kmeans_dict(const Matrix& points, int k, std::uint64_t seed, int restarts) {
  Rng rng(seed);
  ClusterModel m = kmeans(points, k, rng, restarts);
  py::dict d;
  d["assignment"] = m.assignment;
  d["centroids"] = m.centroids;
  d["inertia"] = m.inertia;
  d["inertia_history"] = m.inertia_history;
  d["iterations"] = m.iterations;
  return d;
}

py::tuple cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  int code;
  {
    py::gil_scoped_release release;
    code = run_cli(args, out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Paired two-modality contrastive pretraining core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<ValidationError>(m, "ValidationError", base);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<ChecksumError>(m, "ChecksumError", base);
  py::register_exception<VersionError>(m, "VersionError", base);
  py::register_exception<IoError>(m, "IoError", base);

  m.def(
      "generate",
      [](const std::string& config_json) {
        GeneratorConfig g = generator_config_from_json(nlohmann::json::parse(config_json));
        return dataset_dict(generate(g));
      },
      py::arg("config_json") = "{}", "Synthetic paired dataset from a JSON generator config");
  m.def("nt_xent", &nt_xent_value, py::arg("z1"), py::arg("z2"), py::arg("tau"), py::arg("symmetric") = false);
  m.def("l_mm", &l_mm_value, py::arg("zd1"), py::arg("zd2"), py::arg("zc1"), py::arg("zc2"), py::arg("tau"),
        py::arg("mirror") = false);
  m.def("pair_match", &pair_match_dict, py::arg("z_derm"), py::arg("z_clinic"));
  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) { return auc(scores, labels); },
      py::arg("scores"), py::arg("labels"));
  m.def("confusion_metrics", &confusion_dict, py::arg("predictions"), py::arg("labels"), py::arg("positive_class"));
  m.def("kmeans", &kmeans_dict, py::arg("points"), py::arg("k"), py::arg("seed") = 0, py::arg("restarts") = 10);
  m.def("run_cli", &cli, py::arg("args"), "Runs one CLI subcommand; returns (exit_code, stdout, stderr)");
}
