// Copyright 2026 The MoSARe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mosare/evaluation.hpp"
#include "mosare/training.hpp"

namespace py = pybind11;

namespace mosare {
namespace {

std::map<std::string, std::string> dict_to_kv(const py::dict& d) {
  std::map<std::string, std::string> kv;
  for (auto item : d) {
    const std::string key = py::cast<std::string>(py::str(item.first));
    if (py::isinstance<py::bool_>(item.second)) {
      kv[key] = py::cast<bool>(item.second) ? "true" : "false";
    } else {
      kv[key] = py::cast<std::string>(py::str(item.second));
    }
  }
  return kv;
}

RunConfig config_from_dict(const py::dict& d) { return RunConfig::from_map(dict_to_kv(d)); }

std::vector<const SampleRecord*> pointers(const Dataset& ds) {
  std::vector<const SampleRecord*> out;
  for (const SampleRecord& r : ds.records) out.push_back(&r);
  return out;
}

py::dict metrics_dict(const EpochMetrics& m) {
  py::dict loss;
  loss["total"] = m.loss.total;
  loss["symcl"] = m.loss.symcl;
  loss["mcl"] = m.loss.mcl;
  loss["rec"] = m.loss.rec;
  loss["cls_global"] = m.loss.cls_global;
  loss["cls_local"] = m.loss.cls_local;
  loss["cls_agg"] = m.loss.cls_agg;
  py::dict out;
  out["epoch"] = m.epoch;
  out["split"] = m.split;
  out["loss"] = loss;
  out["auc"] = m.auc;
  out["f1"] = m.f1;
  out["acc"] = m.acc;
  return out;
}

py::dict report_dict(const MetricReport& r) {
  py::dict out;
  out["auc_mean"] = r.auc_mean;
  out["auc_std"] = r.auc_std;
  out["f1_mean"] = r.f1_mean;
  out["f1_std"] = r.f1_std;
  out["acc_mean"] = r.acc_mean;
  out["acc_std"] = r.acc_std;
  out["scenario"] = r.scenario;
  out["mask_fraction"] = r.mask_fraction;
  out["applicable"] = r.applicable;
  py::list folds;
  for (const FoldMetrics& f : r.folds) {
    py::dict fd;
    fd["fold"] = f.fold;
    fd["auc"] = f.auc;
    fd["f1"] = f.f1;
    fd["acc"] = f.acc;
    folds.append(fd);
  }
  out["folds"] = folds;
  return out;
}

// Owning wrappers keep the pybind surface small while the C++ types stay
// free of Python details.
struct PyDataset {
  Dataset ds;
};

struct PyModel {
  std::unique_ptr<MosareModel> model;
};

PyDataset synth(int classes, int per_class, int dim, int c, int nh, double separation,
                double correlation, double noise, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_classes = classes;
  spec.samples_per_class = per_class;
  spec.D = dim;
  spec.C = c;
  spec.N_h = nh;
  spec.class_separation = separation;
  spec.modality_correlation = correlation;
  spec.noise_std = noise;
  spec.seed = seed;
  return PyDataset{generate_synthetic(spec)};
}

}  // namespace

PYBIND11_MODULE(_mosare, m) {
  m.doc() = "Multimodal mixture-of-experts classifier with missing-modality support";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      if (e.user_error())
        PyErr_SetString(PyExc_ValueError, e.what());
      else
        PyErr_SetString(PyExc_RuntimeError, e.what());
    }
  });

  py::class_<PyDataset>(m, "Dataset")
      .def_property_readonly("n_samples",
                             [](const PyDataset& d) { return d.ds.manifest.n_samples; })
      .def_property_readonly("n_classes",
                             [](const PyDataset& d) { return d.ds.manifest.n_classes; })
      .def_property_readonly("dim", [](const PyDataset& d) { return d.ds.manifest.D; })
      .def_property_readonly("labels",
                             [](const PyDataset& d) {
                               std::vector<int> out;
                               for (const SampleRecord& r : d.ds.records) out.push_back(r.label);
                               return out;
                             })
      .def("save", [](const PyDataset& d, const std::string& dir) { save_dataset(d.ds, dir); },
           py::arg("dir"))
      .def_static("load", [](const std::string& dir) { return PyDataset{ingest(dir).dataset}; },
                  py::arg("dir"));

  py::class_<PyModel>(m, "Model")
      .def_property_readonly("config",
                             [](const PyModel& p) {
                               py::dict out;
                               for (const auto& [k, v] : p.model->config().to_map()) out[k.c_str()] = v;
                               return out;
                             })
      .def("predict_proba",
           [](PyModel& p, const PyDataset& d) {
             return p.model->predict_proba(pointers(d.ds), 64);
           },
           py::arg("dataset"))
      .def("outputs",
           [](PyModel& p, const PyDataset& d) {
             return p.model->collect_outputs(pointers(d.ds), 64);
           },
           py::arg("dataset"))
      .def("save",
           [](const PyModel& p, const std::string& path) { save_checkpoint(path, *p.model, {}); },
           py::arg("path"))
      .def_static("load",
                  [](const std::string& path) {
                    return PyModel{model_from_checkpoint(load_checkpoint(path))};
                  },
                  py::arg("path"));

  m.def("synth", &synth, py::arg("classes") = 3, py::arg("per_class") = 40, py::arg("dim") = 32,
        py::arg("c") = 16, py::arg("nh") = 16, py::arg("separation") = 4.0,
        py::arg("correlation") = 0.3, py::arg("noise") = 1.0, py::arg("seed") = 0,
        "Three-modality Gaussian synthetic dataset with stratified folds.");

  m.def("default_config",
        [] {
          py::dict out;
          for (const auto& [k, v] : RunConfig().to_map()) out[k.c_str()] = v;
          return out;
        },
        "All tunables at their default values, as flat dotted keys.");

  m.def("train",
        [](const PyDataset& d, const py::dict& config, const std::string& checkpoint_path,
           const std::string& metrics_path) {
          TrainOptions opts;
          opts.checkpoint_path = checkpoint_path;
          opts.metrics_path = metrics_path;
          TrainResult r = train(d.ds, config_from_dict(config), opts);
          py::list history;
          for (const EpochMetrics& e : r.history) history.append(metrics_dict(e));
          return py::make_tuple(PyModel{std::move(r.model)}, history);
        },
        py::arg("dataset"), py::arg("config") = py::dict(), py::arg("checkpoint_path") = "",
        py::arg("metrics_path") = "",
        "Trains one model with one fold held out; returns (model, epoch history).");

  m.def("run_cv",
        [](const PyDataset& d, const py::dict& config, int folds) {
          return report_dict(run_cv(d.ds, config_from_dict(config), folds));
        },
        py::arg("dataset"), py::arg("config") = py::dict(), py::arg("folds") = 5,
        "Cross-validated metrics over rotated held-out folds.");

  m.def("cma",
        [](const Mat& a, const Mat& b, const Mat& c) {
          ad::Tape t;
          CmaRows rows = cma_rows({t.constant(a), t.constant(b), t.constant(c)});
          py::list per;
          for (const ad::Var& v : rows.per_modality) per.append(Mat(v.val()));
          return py::make_tuple(per, Mat(rows.agg.val()));
        },
        py::arg("a"), py::arg("b"), py::arg("c"),
        "Row-wise residual cross-attention over three aligned batches; returns "
        "(per-modality fused rows, their sum).");

  m.def("route_gate",
        [](const Vec& gate_probs, int top_k, bool renormalize) {
          GateDecision d = route_gate(gate_probs, top_k, renormalize);
          return py::make_tuple(d.picks, Vec(d.weights));
        },
        py::arg("gate_probs"), py::arg("top_k") = 2, py::arg("renormalize") = true,
        "Sparse top-k gate routing; returns (ascending picks, aligned weights).");

  m.def("sinkhorn_balance", &sinkhorn_balance, py::arg("log_r"), py::arg("iters"),
        py::arg("reg") = 1.0,
        "Balances responsibilities so rows sum to one and columns to rows/cols.");

  m.def("symcl", &symcl_loss_values, py::arg("a"), py::arg("b"), py::arg("tau"),
        py::arg("tau_multiplies") = true,
        "Symmetric InfoNCE between row-aligned batches, averaged over directions.");
}

}  // namespace mosare
