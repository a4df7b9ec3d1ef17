#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lengen/experiment.hpp"

namespace py = pybind11;
using namespace lengen;

namespace {

DigitString to_digits(const py::handle& v) {
  if (py::isinstance<py::str>(v)) return DigitString(v.cast<std::string>());
  return DigitString(py::str(v).cast<std::string>());
}

py::object to_int(const DigitString& d) { return py::int_(py::str(d.str())); }

py::dict metric_dict(const MetricRow& r) {
  py::dict d;
  d["step"] = r.step;
  d["epoch"] = r.epoch;
  d["length"] = r.length;
  d["exact_match"] = r.exact_match;
  d["malformed_rate"] = r.malformed_rate;
  d["per_position"] = r.per_position;
  d["sample_count"] = r.sample_count;
  return d;
}

py::list metric_list(const std::vector<MetricRow>& rows) {
  py::list out;
  for (const auto& r : rows) out.append(metric_dict(r));
  return out;
}

std::map<int, std::pair<std::size_t, double>> buckets(const std::map<int, BucketStat>& b) {
  std::map<int, std::pair<std::size_t, double>> out;
  for (const auto& [k, s] : b) out[k] = {s.count, s.accuracy()};
  return out;
}

py::dict report_dict(const FailureReport& r) {
  py::dict d;
  d["total"] = r.total;
  d["wrong"] = r.wrong;
  d["single_errors"] = r.single_errors;
  d["has_carry_buckets"] = r.has_carry_buckets;
  d["by_nc"] = buckets(r.by_nc);
  d["by_mc"] = buckets(r.by_mc);
  d["wrong_digit_count_hist"] = r.wrong_digit_count_hist;
  d["single_error_position_hist"] = r.single_error_position_hist;
  return d;
}

std::tuple<py::object, py::object, py::object> example_tuple(const Example& e) {
  return {to_int(e.x1), to_int(e.x2), to_int(e.y)};
}

Example example_from(const py::handle& x1, const py::handle& x2, const TaskSpec& task) {
  auto a = to_digits(x1), b = to_digits(x2);
  return {a, b, task.apply(a, b)};
}

// A loaded checkpoint evaluated in 64-bit.
struct PyModel {
  Model<double> model;
  KeyValues metadata;
  std::optional<TaskSpec> task;

  static PyModel load(const std::filesystem::path& path) {
    auto ck = load_checkpoint<double>(path);
    PyModel m{std::move(ck.model), std::move(ck.metadata), std::nullopt};
    if (m.metadata.contains("task.kind")) m.task = task_from_metadata(m.metadata);
    return m;
  }

  py::array_t<double> logits(py::array_t<TokenId, py::array::c_style | py::array::forcecast> ids) {
    if (ids.ndim() != 2) throw std::invalid_argument("ids must be a 2-D [batch, seq] array");
    const auto B = static_cast<std::size_t>(ids.shape(0));
    const auto L = static_cast<std::size_t>(ids.shape(1));
    auto t = model.logits(std::span<const TokenId>(ids.data(), B * L), B, L);
    py::array_t<double> out({t.shape[0], t.shape[1], t.shape[2]});
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
  }

  std::vector<py::object> predict(const py::list& pairs) {
    if (!task) throw std::invalid_argument("checkpoint carries no task metadata");
    std::vector<Example> ex;
    for (const auto& p : pairs) {
      auto t = p.cast<py::tuple>();
      ex.push_back(example_from(t[0], t[1], *task));
    }
    auto preds = predict_examples(model, *task, ex);
    std::vector<py::object> out;
    for (std::size_t r = 0; r < preds.rows(); ++r) {
      auto d = decode_output(preds.row(r), *task);
      out.push_back(d ? to_int(*d) : py::none());
    }
    return out;
  }
};

}  // namespace

PYBIND11_MODULE(_lengen, m) {
  m.doc() = "Arithmetic transformer length-generalization toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.def("add", [](py::handle a, py::handle b) { return to_int(ds_add(to_digits(a), to_digits(b))); });
  m.def("mul", [](py::handle a, py::handle b) { return to_int(ds_mul(to_digits(a), to_digits(b))); });
  m.def("mod", [](py::handle a, std::uint64_t c) { return to_int(ds_mod(to_digits(a), c)); });
  m.def("elementwise_add", [](py::handle a, py::handle b) {
    return to_int(ds_elementwise_add(to_digits(a), to_digits(b)));
  });
  m.def("carry_profile", [](py::handle a, py::handle b) {
    auto p = carry_profile(to_digits(a), to_digits(b));
    return std::pair{p.nc, p.mc};
  }, "(total carries, longest carry run) of a + b");

  py::class_<TaskSpec>(m, "TaskSpec")
      .def(py::init([](const std::string& kind, int n_test, int n2_max, std::uint64_t modulus) {
             return TaskSpec::make(parse_task_kind(kind), n_test, n2_max, modulus);
           }),
           py::arg("kind"), py::arg("n_test"), py::arg("n2_max") = 3, py::arg("modulus") = 0)
      .def_property_readonly("kind", [](const TaskSpec& t) { return std::string(to_string(t.kind)); })
      .def_readonly("n_test", &TaskSpec::n_test)
      .def_readonly("n2_max", &TaskSpec::n2_max)
      .def_readonly("modulus", &TaskSpec::modulus)
      .def_property_readonly("n_out", &TaskSpec::n_out)
      .def_property_readonly("input_length", &TaskSpec::input_length)
      .def("apply", [](const TaskSpec& t, py::handle a, py::handle b) {
        return to_int(t.apply(to_digits(a), to_digits(b)));
      })
      .def("encode", [](const TaskSpec& t, py::handle a, py::handle b) {
        auto enc = encode_example(example_from(a, b, t), t);
        return std::pair{vocab::render(enc.input), vocab::render(enc.target)};
      }, "Rendered (input, target) token strings")
      .def("decode", [](const TaskSpec& t, const std::string& input, const std::string& target) {
        auto ex = decode_example({vocab::parse(input), vocab::parse(target)}, t);
        if (!ex) return py::object(py::none());
        return py::object(py::cast(example_tuple(*ex)));
      })
      .def("eval_set", [](const TaskSpec& t, int n, int count, std::uint64_t seed, int n_train) {
        Rng rng = derive_rng(seed, streams::kEval);
        auto set = make_eval_set(t, n, count, rng, n_train);
        std::vector<std::tuple<py::object, py::object, py::object>> out;
        for (const auto& e : set.examples) out.push_back(example_tuple(e));
        return out;
      }, py::arg("n"), py::arg("count"), py::arg("seed") = 0, py::arg("n_train") = 0)
      .def("__repr__", [](const TaskSpec& t) {
        return "TaskSpec(" + std::string(to_string(t.kind)) + ", n_test=" +
               std::to_string(t.n_test) + ")";
      });

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_static("preset", &ExperimentConfig::preset)
      .def_static("preset_names", &ExperimentConfig::preset_names)
      .def_static("load", &ExperimentConfig::load)
      .def("set", &ExperimentConfig::set)
      .def("get", &ExperimentConfig::get)
      .def("values", &ExperimentConfig::values)
      .def("validate", &ExperimentConfig::validate)
      .def("dump", &ExperimentConfig::dump)
      .def("save", &ExperimentConfig::save)
      .def("__setitem__", &ExperimentConfig::set)
      .def("__getitem__", &ExperimentConfig::get);

  m.def("train", [](const ExperimentConfig& cfg, const std::filesystem::path& out,
                    std::optional<LogFn> log) {
    RunOutcome o;
    {
      py::gil_scoped_release release;
      LogFn fn;
      if (log) {
        fn = [&](const std::string& line) {
          py::gil_scoped_acquire acquire;
          (*log)(line);
        };
      }
      o = cmd_train(cfg, out, fn);
    }
    py::dict d;
    d["dir"] = o.dir;
    d["status"] = o.manifest.status;
    d["diagnostic"] = o.manifest.diagnostic;
    d["steps"] = o.record.steps;
    d["wall_seconds"] = o.record.wall_seconds;
    d["metrics"] = metric_list(o.record.metrics);
    return d;
  }, py::arg("config"), py::arg("out_dir"), py::arg("log") = py::none(),
     "Train per the config; returns a summary dict and writes the run directory");

  m.def("evaluate", [](const std::filesystem::path& ckpt, std::vector<int> lengths, int n_test,
                       std::uint64_t seed, bool failure_report, const std::filesystem::path& out) {
    EvalOptions o;
    o.lengths = std::move(lengths);
    o.N_test = n_test;
    o.seed = seed;
    o.precision = read_checkpoint_header(ckpt).at("dtype") == "f64" ? Precision::f64 : Precision::f32;
    o.failure_report = failure_report;
    o.write_predictions = failure_report;
    std::vector<MetricRow> rows;
    {
      py::gil_scoped_release release;
      rows = cmd_eval(ckpt, o, out);
    }
    return metric_list(rows);
  }, py::arg("checkpoint"), py::arg("lengths"), py::arg("n_test") = 10000, py::arg("seed") = 0,
     py::arg("failure_report") = false, py::arg("out_dir"));

  m.def("generate", &cmd_gen, py::arg("config"), py::arg("out_dir"));

  m.def("report", [](const std::filesystem::path& predictions, const TaskSpec& task,
                     const std::filesystem::path& csv, const std::string& run_id) {
    return report_dict(cmd_report(predictions, task, csv, run_id));
  }, py::arg("predictions"), py::arg("task"), py::arg("failure_csv"), py::arg("run_id") = "report");

  m.def("failure_report", [](const TaskSpec& task, const py::list& rows) {
    std::vector<Example> ex;
    TokenMatrix preds{static_cast<std::size_t>(task.n_out()), {}};
    for (const auto& r : rows) {
      auto t = r.cast<py::tuple>();
      ex.push_back(example_from(t[0], t[1], task));
      auto ids = vocab::parse(t[2].cast<std::string>());
      if (ids.size() != preds.cols) throw std::invalid_argument("prediction width != n_out");
      preds.ids.insert(preds.ids.end(), ids.begin(), ids.end());
    }
    return report_dict(failure_report(
        ex, preds, task, task.add_family() ? CarryBuckets::include : CarryBuckets::skip));
  }, py::arg("task"), py::arg("rows"), "rows: (x1, x2, rendered predicted tokens)");

  m.def("read_metrics", [](const std::filesystem::path& p) {
    auto t = read_metrics_csv(p);
    py::list out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      auto d = metric_dict(t.rows[i]);
      d["run_id"] = t.run_ids[i];
      out.append(d);
    }
    return out;
  });

  m.def("threshold_length", &threshold_length, py::arg("accuracy_by_length"),
        py::arg("threshold") = 0.75);
  m.def("bisect_priming_rate", &bisect_priming_rate, py::arg("success"), py::arg("lo"),
        py::arg("hi"), py::arg("step"));

  py::class_<PyModel>(m, "Model")
      .def_static("load", &PyModel::load)
      .def_property_readonly("config", [](const PyModel& pm) { return pm.model.config().to_kv(); })
      .def_property_readonly("metadata", [](const PyModel& pm) { return pm.metadata; })
      .def_property_readonly("task", [](const PyModel& pm) { return pm.task; })
      .def_property_readonly("parameter_count", [](const PyModel& pm) { return pm.model.parameter_count(); })
      .def("logits", &PyModel::logits, "Logits [batch, n_out, vocab] for token ids [batch, seq]")
      .def("predict", &PyModel::predict, "Decoded results for (x1, x2) pairs; None if malformed");

  std::vector<std::string> names;
  for (TokenId t = 0; t < vocab::kSize; ++t) names.emplace_back(vocab::name(t));
  m.attr("VOCAB") = names;
  m.attr("__version__") = code_version();
}
