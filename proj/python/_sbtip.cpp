// Python bindings. Arrays cross the boundary as float64 numpy arrays; point
// sets are (n, 2).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <sstream>

#include "sbtip/config.hpp"
#include "sbtip/error.hpp"
#include "sbtip/experiment.hpp"
#include "sbtip/indicator.hpp"
#include "sbtip/io.hpp"
#include "sbtip/morris_lecar.hpp"
#include "sbtip/rng.hpp"
#include "sbtip/sdot.hpp"

namespace py = pybind11;
using namespace sbtip;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<Vec2> to_points(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 2) throw py::value_error("expected an (n, 2) array of points");
  auto r = a.unchecked<2>();
  std::vector<Vec2> out(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out[static_cast<std::size_t>(i)] = {r(i, 0), r(i, 1)};
  return out;
}

py::array_t<double> from_points(const std::vector<Vec2>& pts) {
  py::array_t<double> a({static_cast<py::ssize_t>(pts.size()), py::ssize_t{2}});
  auto w = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    w(static_cast<py::ssize_t>(i), 0) = pts[i].x;
    w(static_cast<py::ssize_t>(i), 1) = pts[i].y;
  }
  return a;
}

py::array_t<double> from_vector(const std::vector<double>& v) { return py::array_t<double>(v.size(), v.data()); }

// (slices, ny, nx)
py::array_t<double> stack(const std::vector<DensityField>& fields) {
  const Grid2D& g = fields.front().grid();
  py::array_t<double> a({static_cast<py::ssize_t>(fields.size()), static_cast<py::ssize_t>(g.ny()),
                         static_cast<py::ssize_t>(g.nx())});
  double* out = a.mutable_data();
  for (const auto& f : fields)
    for (double m : f.mass()) *out++ = m;
  return a;
}

py::dict grid_dict(const Grid2D& g) {
  py::dict d;
  d["xmin"] = g.xmin();
  d["xmax"] = g.xmax();
  d["ymin"] = g.ymin();
  d["ymax"] = g.ymax();
  d["nx"] = g.nx();
  d["ny"] = g.ny();
  return d;
}

py::list detections_list(const std::vector<Detection>& ds) {
  py::list out;
  for (const auto& d : ds) {
    py::dict e;
    e["index"] = d.index;
    e["t"] = d.t;
    e["jump"] = d.jump;
    out.append(e);
  }
  return out;
}

py::dict series_dict(const IndicatorSeries& s) {
  py::dict d;
  d["times"] = from_vector(s.times);
  d["cost"] = from_vector(s.cost);
  d["I"] = from_vector(s.I);
  return d;
}

ChildPlan child_at(const ExperimentConfig& cfg, std::size_t index) {
  const auto plan = plan_children(cfg);
  if (index >= plan.size()) throw py::index_error("child index out of range");
  return plan[index];
}

ExperimentConfig config_from_string(const std::string& text, const std::string& base_dir) {
  std::istringstream in(text);
  return parse_config(in, base_dir);
}

}  // namespace

PYBIND11_MODULE(_sbtip, m) {
  m.doc() = "Native core of sbtip";
  m.attr("__version__") = kVersion;

  static py::exception<Error> base(m, "Error");
  static py::exception<ParseError> parse_exc(m, "ParseError", base.ptr());
  static py::exception<ValidationError> validation_exc(m, "ValidationError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ParseError& e) {
      py::set_error(parse_exc, e.what());
    } catch (const ValidationError& e) {
      py::set_error(validation_exc, e.what());
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  py::class_<ExperimentConfig>(m, "Config")
      .def_static("from_preset", &load_preset, py::arg("name"))
      .def_static("from_file", &load_config, py::arg("path"))
      .def_static("from_string", &config_from_string, py::arg("text"), py::arg("base_dir") = ".")
      .def("to_ini", &ExperimentConfig::to_ini)
      .def("echo", [](const ExperimentConfig& c) {
        py::dict d;
        for (const auto& [k, v] : c.echo()) d[py::str(k)] = v;
        return d;
      })
      .def_readwrite("name", &ExperimentConfig::name)
      .def_readwrite("output_dir", &ExperimentConfig::output_dir)
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def("children", [](const ExperimentConfig& c) {
        py::list out;
        for (const auto& p : plan_children(c)) {
          py::dict d;
          d["index"] = p.index;
          d["name"] = p.name;
          d["sigma"] = p.sigma;
          d["T"] = p.horizon;
          d["seed"] = p.seed;
          out.append(d);
        }
        return out;
      });

  m.def("preset_names", &preset_names);
  m.def("preset_text", &preset_text, py::arg("name"));
  m.def("schema", [] {
    py::dict d;
    for (const auto& e : config_schema()) d[py::str(e.key)] = e.help;
    return d;
  });
  m.def("derive_seed", &derive_seed, py::arg("master"), py::arg("index"));

  m.def(
      "solve_bridge_ipf",
      [](const ExperimentConfig& cfg, std::size_t child, const std::string& out_dir) {
        const auto plan = child_at(cfg, child);
        std::optional<BridgeRun> run;
        {
          py::gil_scoped_release release;
          run = run_ipf_bridge(cfg, plan, out_dir);
        }
        const BridgeRun& r = *run;
        py::dict d;
        d["grid"] = grid_dict(r.solution.grid());
        d["marginals"] = stack(r.solution.marginals);
        d["indicator"] = series_dict(r.indicator);
        d["detections"] = detections_list(r.detections);
        d["metrics"] = r.metrics;
        d["iterations"] = r.solution.iterations;
        d["error_history"] = from_vector(r.solution.error_history);
        return d;
      },
      py::arg("config"), py::arg("child") = 0, py::arg("out_dir"));

  m.def(
      "run_experiment",
      [](const ExperimentConfig& cfg) {
        RunSummary s;
        {
          py::gil_scoped_release release;
          s = run_experiment(cfg);
        }
        py::dict d;
        d["dir"] = s.dir;
        d["failed"] = s.failed;
        d["wall_seconds"] = s.wall_seconds;
        py::list children;
        for (const auto& c : s.children) {
          py::dict e;
          e["name"] = c.plan.name;
          e["dir"] = c.dir;
          e["sigma"] = c.plan.sigma;
          e["T"] = c.plan.horizon;
          e["failed"] = c.failed;
          e["error"] = c.error;
          e["metrics"] = c.metrics;
          children.append(e);
        }
        d["children"] = children;
        return d;
      },
      py::arg("config"));

  m.def(
      "morris_lecar_equilibria",
      [](int cls) {
        py::list out;
        for (const auto& e : find_equilibria(MLParams::named(std::to_string(cls)))) {
          py::dict d;
          d["v"] = e.state.x;
          d["w"] = e.state.y;
          d["eigenvalues"] = std::vector<std::complex<double>>(e.eigenvalues.begin(), e.eigenvalues.end());
          d["kind"] = to_string(e.kind);
          d["stable"] = is_stable(e.kind);
          out.append(d);
        }
        return out;
      },
      py::arg("cls"));
  m.def(
      "morris_lecar_cycle",
      [](int cls) {
        const auto orbit = sample_invariant_cycle(MLParams::named(std::to_string(cls)), 500.0, 400.0, 0.01, {0.0, 0.3});
        const auto n = first_period_length(orbit);
        return from_points(std::vector<Vec2>(orbit.begin(), orbit.begin() + static_cast<std::ptrdiff_t>(n)));
      },
      py::arg("cls"), "One revolution of the deterministic orbit as (n, 2) states (v [mV], w).");

  m.def(
      "synthetic_cohort",
      [](std::uint64_t seed) {
        const auto c = synthetic_cohort(seed);
        return py::make_tuple(from_points(c.source.points), from_points(c.target.points),
                              py::array_t<int>(c.target.labels.size(), c.target.labels.data()));
      },
      py::arg("seed"), "(source points, target points, target labels)");

  m.def(
      "fit_heights",
      [](const Array& source, const Array& targets, const Array& weights, std::size_t samples, std::uint64_t seed) {
        const auto src = to_points(source);
        const auto tgt = to_points(targets);
        auto wv = weights.unchecked<1>();
        std::vector<double> w(static_cast<std::size_t>(wv.shape(0)));
        for (py::ssize_t i = 0; i < wv.shape(0); ++i) w[static_cast<std::size_t>(i)] = wv(i);
        const auto target = DiscreteTarget::normalized(tgt, w);
        FitOptions o;
        o.samples = samples;
        o.seed = seed;
        FitResult fit;
        std::vector<double> cell(src.size());
        {
          py::gil_scoped_release release;
          fit = fit_heights(source_sampler(src, SourceMeasure::Empirical), target, o);
          for (std::size_t i = 0; i < src.size(); ++i) cell[i] = static_cast<double>(assign_cell(src[i], target, fit.h));
        }
        py::dict d;
        d["heights"] = from_vector(fit.h);
        d["weights"] = from_vector(fit.weights);
        d["energy"] = from_vector(fit.energy_history);
        d["steps"] = fit.steps;
        d["assignment"] = from_vector(cell);
        return d;
      },
      py::arg("source"), py::arg("targets"), py::arg("weights"), py::arg("samples") = 100000,
      py::arg("seed") = 0, "Semi-discrete heights from an empirical source to weighted atoms.");

  m.def(
      "indicator_from_costs",
      [](std::vector<double> times, std::vector<double> cost) {
        return series_dict(series_from_costs(std::move(times), std::move(cost)));
      },
      py::arg("times"), py::arg("cost"));
  m.def(
      "detect_tipping",
      [](const std::vector<double>& times, const std::vector<double>& values, int step_offset,
         std::optional<double> threshold) {
        return detections_list(
            detect_tipping(times, values, step_offset, threshold ? *threshold : default_threshold(values)));
      },
      py::arg("times"), py::arg("values"), py::arg("step_offset") = 1, py::arg("threshold") = py::none());
}
