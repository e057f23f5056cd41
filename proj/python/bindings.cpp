// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mosld/accounting.hpp"
#include "mosld/checkpoint.hpp"
#include "mosld/cli.hpp"
#include "mosld/config.hpp"
#include "mosld/error.hpp"
#include "mosld/manifest.hpp"
#include "mosld/routing.hpp"
#include "mosld/tasks.hpp"

namespace py = pybind11;
using namespace mosld;

namespace {

std::vector<Arm> parse_arms(const std::vector<std::string>& names) {
    std::vector<Arm> arms;
    for (const std::string& n : names) {
        arms.push_back(parse_arm(n));
    }
    return arms;
}

py::list count_params_py(std::uint64_t layers, std::uint64_t d_in, std::uint64_t d_out, std::uint64_t rank,
                         std::uint64_t targets, std::uint64_t experts, std::vector<std::uint64_t> experts_per_layer,
                         std::uint64_t top_k, std::uint64_t base_params, const std::vector<std::string>& methods) {
    GeometrySpec g;
    g.layers = layers;
    g.d_in = d_in;
    g.d_out = d_out;
    g.rank = rank;
    g.targets = targets;
    g.experts = experts;
    g.experts_per_layer = std::move(experts_per_layer);
    g.top_k = top_k;
    g.base_params = base_params;
    py::list out;
    for (const ParamReport& r : report_table(g, parse_arms(methods))) {
        py::dict row;
        row["method"] = to_string(r.method);
        row["trainable"] = r.trainable;
        row["forward"] = r.forward;
        row["formula"] = r.formula;
        out.append(row);
    }
    return out;
}

py::dict gate_py(const std::vector<double>& logits, std::size_t k) {
    const GateResult g = gate_from_logits(logits, k);
    py::dict d;
    d["indices"] = g.indices;
    d["scores"] = g.scores;
    d["probs"] = g.full_probs;
    return d;
}

py::tuple read_checkpoint_py(const std::string& path) {
    const Checkpoint ck = read_checkpoint(path);
    py::dict tensors;
    for (const TensorRecord& r : ck.tensors) {
        std::vector<py::ssize_t> shape(r.dims.begin(), r.dims.end());
        py::array_t<double> arr(shape);
        std::copy(r.data.begin(), r.data.end(), arr.mutable_data());
        tensors[py::str(r.name)] = arr;
    }
    return py::make_tuple(ck.meta, tensors);
}

py::tuple run_cli_py(const std::vector<std::string>& args) {
    std::ostringstream out;
    std::ostringstream err;
    int code = 0;
    {
        py::gil_scoped_release release;
        code = run_cli(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
}

py::list task_examples(const std::string& task, std::size_t seq_len, std::size_t n, std::uint64_t seed,
                       std::size_t modulus) {
    const TaskSuite suite = default_suite(seq_len, n, 0, modulus);
    const TaskKind kind = parse_task(task);
    TaskSpec spec = kind == TaskKind::Succ ? *suite.ood : TaskSpec{};
    for (const TaskSpec& s : suite.in_domain) {
        if (s.kind == kind) {
            spec = s;
        }
    }
    spec.n_train = n;
    spec.n_test = 0;
    Rng rng(seed);
    py::list out;
    for (const Example& e : gen_task(spec, rng).train.examples) {
        out.append(py::make_tuple(e.prompt, e.answer));
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Bindings for the mosld C++ core";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<MissingArtifactError>(m, "MissingArtifactError", PyExc_FileNotFoundError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    m.def("version", &tool_version);
    m.def("count_params", &count_params_py, py::arg("layers") = 32, py::arg("d_in") = 4096,
          py::arg("d_out") = 4096, py::arg("rank") = 8, py::arg("targets") = 2, py::arg("experts") = 5,
          py::arg("experts_per_layer") = std::vector<std::uint64_t>{}, py::arg("top_k") = 2,
          py::arg("base_params") = GeometrySpec{}.base_params,
          py::arg("methods") = std::vector<std::string>{"lora", "mola", "mosl", "mosld"},
          "Trainable and forward parameter counts per method.");
    m.def("gate", &gate_py, py::arg("logits"), py::arg("k"),
          "Softmax, top-k selection and renormalization of one logit vector.");
    m.def(
        "load_balance_loss",
        [](const std::vector<double>& f, const std::vector<double>& p) {
            if (f.size() != p.size()) {
                throw ConfigError("load_balance_loss: f and p differ in length");
            }
            LoadBalanceStats s;
            s.n_experts = f.size();
            s.token_fraction = f;
            s.mean_prob = p;
            return load_balance_loss(s);
        },
        py::arg("f"), py::arg("p"));
    m.def("git_blob_hash", [](const std::string& s) { return git_blob_hash(s); }, py::arg("content"));
    m.def(
        "canonical_config",
        [](const std::string& text, const std::vector<std::string>& overrides) {
            ConfigDoc doc = parse_config(text);
            for (const std::string& o : overrides) {
                apply_override(doc, o);
            }
            return canonical_config(experiment_from(doc));
        },
        py::arg("text"), py::arg("overrides") = std::vector<std::string>{},
        "Effective config in canonical form; its git blob hash is the manifest hash.");
    m.def("read_checkpoint", &read_checkpoint_py, py::arg("path"),
          "Returns (metadata dict, {name: ndarray}).");
    m.def("task_examples", &task_examples, py::arg("task"), py::arg("seq_len") = 4, py::arg("n") = 10,
          py::arg("seed") = 0, py::arg("modulus") = 100, "Distinct (prompt, answer) pairs for one task.");
    m.def("run_cli", &run_cli_py, py::arg("args"), "Runs the command-line tool in-process: (exit code, stdout, stderr).");
}
