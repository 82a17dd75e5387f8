#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fddcsi/config_io.hpp"
#include "fddcsi/eval.hpp"
#include "fddcsi/store.hpp"
#include "fddcsi/verify.hpp"

namespace py = pybind11;
using namespace fddcsi;

namespace {

// Configs cross the boundary as JSON text; the Python side wraps them in dicts.
ExperimentConfig profile_config(const std::string& profile, const std::string& overrides) {
  ExperimentConfig cfg;
  if (profile == "desk")
    cfg = ExperimentConfig::desk();
  else if (profile == "paper")
    cfg = ExperimentConfig::paper_defaults();
  else if (profile == "smoke")
    cfg = ExperimentConfig::smoke();
  else
    throw std::invalid_argument("unknown profile '" + profile + "' (expected desk, paper or smoke)");
  if (!overrides.empty()) update_from_json(cfg, json::parse(overrides));
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg = experiment_from_json(json::parse(text));
  cfg.validate();
  return cfg;
}

Eigen::MatrixXd stack(const TaskDataset& ds, RealVector SamplePair::*field) {
  if (ds.empty()) return {};
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ds.size()), (ds.pairs.front().*field).size());
  for (std::size_t i = 0; i < ds.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = (ds.pairs[i].*field).transpose();
  return out;
}

py::dict dataset_dict(const TaskDataset& ds) {
  std::vector<double> f_up, f_down;
  std::vector<std::int64_t> users;
  for (const auto& p : ds.pairs) {
    f_up.push_back(p.f_up);
    f_down.push_back(p.f_down);
    users.push_back(p.user);
  }
  py::dict d;
  d["env_id"] = ds.env_id;
  d["role"] = to_string(ds.role);
  d["x"] = stack(ds, &SamplePair::x);
  d["y"] = stack(ds, &SamplePair::y);
  d["y_clean"] = stack(ds, &SamplePair::y_clean);
  d["f_up"] = f_up;
  d["f_down"] = f_down;
  d["user"] = users;
  return d;
}

// Rows of x and y become samples; y doubles as the clean label.
TaskDataset dataset_from_arrays(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, Role role) {
  if (x.rows() != y.rows() || x.cols() != y.cols())
    throw std::invalid_argument("x and y must have the same shape");
  TaskDataset ds;
  ds.role = role;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    SamplePair p;
    p.x = x.row(i).transpose();
    p.y = y.row(i).transpose();
    p.y_clean = p.y;
    p.user = i;
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

py::list gradcheck(int probe_count, int seeds, std::uint64_t seed) {
  GradcheckConfig cfg;
  cfg.probe_count = probe_count;
  cfg.seeds = seeds;
  cfg.seed = seed;
  py::list out;
  for (const auto& r : run_gradcheck(cfg)) {
    py::dict d;
    d["name"] = r.name;
    d["max_rel_error"] = r.max_rel_error;
    d["tolerance"] = r.tolerance;
    d["probes"] = r.probes;
    d["skipped"] = r.skipped;
    d["pass"] = r.pass;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Uplink-to-downlink channel prediction with meta-learning";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def(
      "config_json",
      [](const std::string& profile, const std::string& overrides) {
        return to_json(profile_config(profile, overrides)).dump();
      },
      py::arg("profile") = "desk", py::arg("overrides") = "");

  m.def(
      "generate_dataset",
      [](const std::string& config, std::int64_t env_id, const std::string& role, int n) {
        const ExperimentConfig cfg = parse_config(config);
        const Environment env = sample_environment(env_id, cfg.generator, cfg.train.seed);
        const Role r = role_from_string(role);
        EnvironmentSampler sampler(env, cfg.array, cfg.data);
        return dataset_dict(r == Role::Adaption ? sampler.draw(r, n, cfg.adaption_noise) : sampler.draw(r, n));
      },
      py::arg("config"), py::arg("env_id"), py::arg("role"), py::arg("n"));

  m.def(
      "nmse",
      [](const ComplexChannel& h_true, const ComplexChannel& h_hat) { return nmse(h_true, h_hat); },
      py::arg("h_true"), py::arg("h_hat"));

  py::class_<TrainedModel>(m, "Model")
      .def_property_readonly("provenance", [](const TrainedModel& t) { return to_string(t.provenance); })
      .def_property_readonly("steps", [](const TrainedModel& t) { return t.steps; })
      .def_property_readonly("converged", [](const TrainedModel& t) { return t.converged; })
      .def_property_readonly("derivative_order", [](const TrainedModel& t) { return t.derivative_order; })
      .def_property_readonly("loss_history", [](const TrainedModel& t) { return t.loss_history; })
      .def_property_readonly("similarity_history", [](const TrainedModel& t) { return t.similarity_history; })
      .def_property_readonly("widths", [](const TrainedModel& t) { return t.spec.sizes; })
      .def_property_readonly("config_json", [](const TrainedModel& t) { return to_json(t.config).dump(); })
      .def_property_readonly("weights",
                             [](const TrainedModel& t) {
                               py::list out;
                               for (const auto& l : t.params.layers) out.append(py::make_tuple(l.W, l.b));
                               return out;
                             })
      .def(
          "predict",
          [](const TrainedModel& t, const Eigen::MatrixXd& x) {
            return Eigen::MatrixXd(Network(t.spec).predict(t.params, Eigen::MatrixXd(x.transpose())).transpose());
          },
          py::arg("x"), "Predict downlink rows from uplink rows (shape n x 2M).")
      .def(
          "nmse",
          [](const TrainedModel& t, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
            return test_model(t, dataset_from_arrays(x, y, Role::Test));
          },
          py::arg("x"), py::arg("y_true"))
      .def("save", [](const TrainedModel& t, const std::filesystem::path& p) { write_checkpoint(p, t); })
      .def_static("load", [](const std::filesystem::path& p) { return read_checkpoint(p); });

  m.def(
      "train_models",
      [](const std::string& config) {
        const ExperimentConfig cfg = parse_config(config);
        py::gil_scoped_release release;
        TrainedPair pair = train_models(cfg);
        return std::make_pair(std::move(pair.no_transfer), std::move(pair.meta));
      },
      py::arg("config"), "Train the pooled and the meta-learned model on the source tasks of `config`.");

  m.def(
      "adapt",
      [](const TrainedModel& base, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const std::string& config,
         const std::string& rule) {
        const ExperimentConfig cfg = parse_config(config);
        const TaskDataset ds = dataset_from_arrays(x, y, Role::Adaption);
        if (rule == "auto")
          return base.provenance == Provenance::Meta ? meta_adapt(base, ds, cfg.train) : direct_adapt(base, ds, cfg.train);
        return adapt(base, ds, cfg.train, adapt_rule_from_string(rule));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("config"), py::arg("rule") = "auto");

  m.def(
      "sweep",
      [](const std::string& config, const std::string& variable, const std::vector<double>& grid) {
        const ExperimentConfig cfg = parse_config(config);
        const Sweep sweep{sweep_variable_from_string(variable), grid};
        py::gil_scoped_release release;
        return run_three_way(cfg, sweep).to_csv();
      },
      py::arg("config"), py::arg("variable") = "none", py::arg("grid") = std::vector<double>{},
      "Three-way comparison; returns the CSV report.");

  m.def("gradcheck", &gradcheck, py::arg("probe_count") = 100, py::arg("seeds") = 5, py::arg("seed") = 1);

  m.def(
      "width_probe",
      [](const std::vector<int>& widths, int max_steps) {
        ProbeConfig cfg;
        cfg.max_steps = max_steps;
        std::vector<std::pair<int, double>> out;
        for (const auto& r : proposition1_probe(widths, cfg)) out.emplace_back(r.width, r.final_loss);
        return out;
      },
      py::arg("widths"), py::arg("max_steps") = 6000);
}
