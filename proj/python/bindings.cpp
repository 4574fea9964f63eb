#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "wifiloc/eval.hpp"

namespace py = pybind11;
using namespace wifiloc;

namespace {

using PyFingerprint = std::vector<std::pair<std::string, double>>;

Fingerprint to_fingerprint(const PyFingerprint& entries) {
  Fingerprint fp;
  for (const auto& [mac, rss] : entries) fp.entries.push_back({MacId::parse(mac), rss});
  return fp;
}

PyFingerprint from_fingerprint(const Fingerprint& fp) {
  PyFingerprint out;
  for (const auto& o : fp.entries) out.emplace_back(o.mac.str(), o.rss);
  return out;
}

py::tuple fix(const GaussianLocation& g) { return py::make_tuple(g.mu.x, g.mu.y, g.sigma); }

eval::ExperimentConfig parse_experiment(const std::string& text) {
  return eval::ExperimentConfig::from_config(KeyValueConfig::parse(text));
}

py::array_t<double> rows_to_array(const std::vector<std::vector<double>>& rows, std::size_t cols) {
  py::array_t<double> a({rows.size(), cols});
  auto m = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = rows[i][j];
  return a;
}

std::vector<eval::TimedLocation> to_timed(const py::array_t<double>& a) {
  const auto m = a.unchecked<2>();
  if (m.shape(1) < 3) throw ValidationError("expected columns t, x, y");
  std::vector<eval::TimedLocation> out;
  for (py::ssize_t i = 0; i < m.shape(0); ++i) out.push_back({m(i, 0), {m(i, 1), m(i, 2)}});
  return out;
}

/// Events as tuples: ("odometry", t, dx, dy), ("wifi", t, fingerprint), ("kidnap", t).
py::list events_to_py(const std::vector<sim::StreamEvent>& events) {
  py::list out;
  for (const auto& e : events) {
    switch (e.kind) {
      case sim::EventKind::Odometry:
        out.append(py::make_tuple("odometry", e.t, e.odometry.dx, e.odometry.dy));
        break;
      case sim::EventKind::Wifi:
        out.append(py::make_tuple("wifi", e.t, from_fingerprint(e.fingerprint)));
        break;
      case sim::EventKind::Kidnap:
        out.append(py::make_tuple("kidnap", e.t));
        break;
    }
  }
  return out;
}

/// Filter input tuples: ("odometry", t, dx, dy) and ("fix", t, x, y, sigma).
std::vector<fusion::FilterEvent> filter_events_from_py(const py::list& events) {
  std::vector<fusion::FilterEvent> out;
  for (const auto& item : events) {
    const auto t = item.cast<py::tuple>();
    const auto kind = t[0].cast<std::string>();
    if (kind == "odometry") {
      out.push_back(sim::OdometryStep{t[2].cast<double>(), t[3].cast<double>(), t[1].cast<double>()});
    } else if (kind == "fix") {
      out.push_back(fusion::Measurement{t[1].cast<double>(),
                                        {{t[2].cast<double>(), t[3].cast<double>()}, t[4].cast<double>()}});
    } else {
      throw ValidationError("unknown filter event kind '" + kind + "'");
    }
  }
  return out;
}

py::dict report_dict(const eval::ErrorReport& r) {
  py::dict d;
  d["n"] = r.errors.size();
  d["mean"] = r.mean;
  d["median"] = r.median;
  d["max"] = r.max;
  d["p95"] = r.p95;
  return d;
}

}  // namespace

PYBIND11_MODULE(_wifiloc, m) {
  m.doc() = "Crowdsourced WiFi localization with odometry fusion";
  m.attr("__version__") = eval::kVersion;

  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  static py::exception<ValidationError> validation(m, "ValidationError", base.ptr());
  static py::exception<ParseError> parse(m, "ParseError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ValidationError& e) {
      py::set_error(validation, e.what());
    } catch (const ParseError& e) {
      py::set_error(parse, e.what());
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  py::class_<RadioMap>(m, "RadioMap")
      .def_static("load", [](const std::filesystem::path& p) { return load_radio_map(p); })
      .def_static("from_samples",
                  [](const std::vector<std::pair<PyFingerprint, std::pair<double, double>>>& samples) {
                    std::vector<Sample> s;
                    for (const auto& [fp, loc] : samples) s.push_back({to_fingerprint(fp), {loc.first, loc.second}});
                    return RadioMap::from_samples(std::move(s));
                  })
      .def("save", [](const RadioMap& r, const std::filesystem::path& p) { save_radio_map(r, p); })
      .def("__len__", &RadioMap::size)
      .def_property_readonly("bounds",
                             [](const RadioMap& r) {
                               const auto& b = r.bounds();
                               return py::make_tuple(b.min_x, b.min_y, b.max_x, b.max_y);
                             })
      .def_property_readonly("macs",
                             [](const RadioMap& r) {
                               std::vector<std::string> out;
                               for (const auto& mac : r.mac_table().macs()) out.push_back(mac.str());
                               return out;
                             })
      .def("sample", [](const RadioMap& r, std::size_t i) {
        const auto& s = r.samples().at(i);
        return py::make_tuple(from_fingerprint(s.fingerprint), py::make_tuple(s.location.x, s.location.y));
      });

  m.def(
      "simulate",
      [](const std::string& config, int trial) {
        const auto cfg = parse_experiment(config);
        const auto world = sim::generate_world(cfg.scenario.world);
        auto map = sim::crowdsource_radio_map(world, cfg.scenario.map, cfg.scenario.map_seed).map;
        const auto t = eval::make_trial(world, cfg.scenario, eval::trial_seed(cfg.seed, trial));
        std::vector<std::vector<double>> truth;
        for (const auto& p : t.trajectory.poses) truth.push_back({p.t, p.location.x, p.location.y});
        py::dict d;
        d["radio_map"] = std::move(map);
        d["truth"] = rows_to_array(truth, 3);
        d["events"] = events_to_py(t.events);
        return d;
      },
      py::arg("config"), py::arg("trial") = 0,
      "Radio map, truth array (t, x, y) and event stream of one trial of a config text.");

  py::class_<WknnLocalizer>(m, "Wknn")
      .def(py::init([](const RadioMap& map, int k) { return WknnLocalizer(map, {k, -100.0, 0.5}); }), py::arg("map"),
           py::arg("k") = 50, py::keep_alive<1, 2>())
      .def("localize", [](const WknnLocalizer& w, const PyFingerprint& fp) { return fix(w.localize(to_fingerprint(fp))); });

  py::class_<nn::WifiLocalizer>(m, "Localizer")
      .def_static(
          "load",
          [](const std::filesystem::path& checkpoint, const RadioMap& map) {
            return nn::make_localizer(nn::load_checkpoint(checkpoint), map);
          },
          py::arg("checkpoint"), py::arg("radio_map"))
      .def("localize",
           [](const nn::WifiLocalizer& l, const PyFingerprint& fp) { return fix(l.localize(to_fingerprint(fp))); })
      .def("embeddings", [](const nn::WifiLocalizer& l) {
        const nn::Mat e = l.model().mac_embeddings(l.inputs());
        py::array_t<double> a({static_cast<py::ssize_t>(e.rows()), static_cast<py::ssize_t>(e.cols())});
        auto v = a.mutable_unchecked<2>();
        for (Eigen::Index i = 0; i < e.rows(); ++i)
          for (Eigen::Index j = 0; j < e.cols(); ++j) v(i, j) = e(i, j);
        return a;
      });

  py::class_<PriorMap>(m, "PriorMap")
      .def("query", [](const PriorMap& p, double x, double y) { return p.query({x, y}); })
      .def_property_readonly("values",
                             [](const PriorMap& p) {
                               const auto& g = p.geometry();
                               py::array_t<double> a({g.rows, g.cols});
                               auto v = a.mutable_unchecked<2>();
                               for (int r = 0; r < g.rows; ++r)
                                 for (int c = 0; c < g.cols; ++c) v(r, c) = p.grid().values[g.index(r, c)];
                               return a;
                             })
      .def_property_readonly("origin",
                             [](const PriorMap& p) { return py::make_tuple(p.geometry().origin.x, p.geometry().origin.y); })
      .def_property_readonly("cell_size", [](const PriorMap& p) { return p.geometry().cell_size; });

  m.def(
      "build_prior",
      [](const RadioMap& map, double bandwidth, double beta, double cell_size) {
        return build_prior(map, {bandwidth, beta, cell_size, PriorNormalization::Max});
      },
      py::arg("radio_map"), py::arg("bandwidth") = 1.0, py::arg("beta") = 1e-4, py::arg("cell_size") = 0.25);

  m.def(
      "run_filter",
      [](const py::list& events, const std::string& config, const PriorMap* prior) {
        const auto cfg = fusion::FilterConfig::from_config(KeyValueConfig::parse(config));
        const auto ev = filter_events_from_py(events);
        const auto est = fusion::run_filter(ev, cfg, prior);
        std::vector<std::vector<double>> rows;
        for (const auto& e : est) rows.push_back({e.t, e.location.x, e.location.y, e.spread, e.n_eff});
        return rows_to_array(rows, 5);
      },
      py::arg("events"), py::arg("config") = "", py::arg("prior") = nullptr,
      "Runs ekpf, ekf or pf on odometry and fix tuples; returns rows (t, x, y, spread, n_eff).");

  m.def(
      "metrics",
      [](const py::array_t<double>& estimates, const py::array_t<double>& truth, double warmup, double tolerance) {
        return report_dict(eval::compute_metrics(to_timed(estimates), to_timed(truth), warmup, tolerance));
      },
      py::arg("estimates"), py::arg("truth"), py::arg("warmup") = 60.0, py::arg("tolerance") = 0.2);

  m.def(
      "run_experiment",
      [](const std::string& config, const std::filesystem::path& out,
         const std::optional<std::filesystem::path>& checkpoint) {
        const auto res = eval::run_experiment(parse_experiment(config), out, checkpoint);
        py::dict d;
        for (const auto& s : res.methods) d[py::str(s.method)] = report_dict(s.report);
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("checkpoint") = std::nullopt,
      "Runs every configured method and returns per-method error summaries.");

  m.def("uncertainty_loss", [](double ex, double ey, double sigma) { return nn::uncertainty_loss({ex, ey}, sigma, {0, 0}); });
}
