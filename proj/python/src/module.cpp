#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "lmunet/cli.hpp"
#include "lmunet/config_io.hpp"
#include "lmunet/cost.hpp"
#include "lmunet/data_io.hpp"
#include "lmunet/error.hpp"
#include "lmunet/network.hpp"
#include "lmunet/ssm.hpp"
#include "lmunet/train.hpp"

namespace py = pybind11;
using namespace lmunet;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array<T> to_array(const Tensor<T>& t) {
  Array<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// configs cross the boundary as JSON text; the python side wraps them in dicts
net::NetworkConfig network(const std::string& text, int rank) {
  return cfgio::network_from_json(cfgio::json::parse(text), net::NetworkConfig::defaults(rank));
}

py::dict report(const cost::CostReport& r) {
  py::list rows;
  for (const auto& row : r.rows) rows.append(py::make_tuple(row.name, row.params, row.flops, row.macs));
  py::dict d;
  d["params"] = r.total_params;
  d["flops"] = r.total_flops;
  d["macs"] = r.total_macs;
  d["convention"] = r.convention;
  d["rows"] = rows;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core: cost model, forward pass, selective scans, metrics, CLI.";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<LoadError>(m, "LoadError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def("default_config", [](int rank) { return cfgio::to_json(net::NetworkConfig::defaults(rank)).dump(); },
        py::arg("rank"));
  m.def("resolve_config", [](const std::string& text, int rank) { return cfgio::to_json(network(text, rank)).dump(); },
        py::arg("config"), py::arg("rank"));

  m.def("count_params", [](const std::string& text, int rank) { return report(cost::count_params(network(text, rank))); },
        py::arg("config"), py::arg("rank"));
  m.def("count_flops",
        [](const std::string& text, int rank, const Shape& spatial) {
          return report(cost::count_flops(network(text, rank), spatial));
        },
        py::arg("config"), py::arg("rank"), py::arg("spatial"));

  m.def("forward",
        [](const std::string& text, int rank, std::uint64_t seed, const Array<float>& image) {
          auto cfg = network(text, rank);
          auto weights = net::build<float>(cfg, seed);
          auto x = to_tensor(image);
          Tensor<float> y;
          {
            py::gil_scoped_release release;
            y = net::forward(weights, cfg, x);
          }
          return to_array(y);
        },
        py::arg("config"), py::arg("rank"), py::arg("seed"), py::arg("image"));

  m.def("selective_scan",
        [](const Array<double>& x, const py::dict& p, const std::string& kernel) {
          ssm::SsmParams<double> sp{to_tensor(p["a_log"].cast<Array<double>>()),
                                    to_tensor(p["d_skip"].cast<Array<double>>()),
                                    to_tensor(p["w_bc"].cast<Array<double>>()),
                                    to_tensor(p["w_dt_down"].cast<Array<double>>()),
                                    to_tensor(p["w_dt_up"].cast<Array<double>>()),
                                    to_tensor(p["dt_bias"].cast<Array<double>>())};
          auto xt = to_tensor(x);
          if (kernel == "sequential") return to_array(ssm::selective_scan_seq(xt, sp));
          if (kernel == "parallel") return to_array(ssm::selective_scan_par(xt, sp));
          throw ContractError("selective_scan: kernel must be 'sequential' or 'parallel', got '" + kernel + "'");
        },
        py::arg("x"), py::arg("params"), py::arg("kernel") = "sequential");
  m.def("init_scan_params",
        [](std::size_t channels, std::size_t state, std::size_t dt_rank, std::uint64_t seed) {
          std::mt19937_64 rng(seed);
          auto p = ssm::init_params<double>(channels, state, dt_rank, rng);
          py::dict d;
          d["a_log"] = to_array(p.a_log);
          d["d_skip"] = to_array(p.d_skip);
          d["w_bc"] = to_array(p.w_bc);
          d["w_dt_down"] = to_array(p.w_dt_down);
          d["w_dt_up"] = to_array(p.w_dt_up);
          d["dt_bias"] = to_array(p.dt_bias);
          return d;
        },
        py::arg("channels"), py::arg("state"), py::arg("dt_rank"), py::arg("seed"));

  m.def("synth_sample",
        [](std::uint64_t seed, std::size_t index, const Shape& extents, std::size_t num_classes) {
          auto s = data::synth_sample(seed, index, extents, num_classes);
          return py::make_tuple(to_array(s.image), to_array(s.mask));
        },
        py::arg("seed"), py::arg("index"), py::arg("extents"), py::arg("num_classes") = 3);

  m.def("dice_ce_loss",
        [](const Array<double>& logits, const Array<std::uint16_t>& target) {
          return train::dice_ce_loss(to_tensor(logits), to_tensor(target));
        },
        py::arg("logits"), py::arg("target"));
  m.def("dsc",
        [](const Array<std::uint16_t>& pred, const Array<std::uint16_t>& gt, std::size_t k) {
          return train::dsc(to_tensor(pred), to_tensor(gt), k);
        },
        py::arg("pred"), py::arg("gt"), py::arg("num_classes"));
  m.def("argmax_classes", [](const Array<float>& logits) { return to_array(train::argmax_classes(to_tensor(logits))); },
        py::arg("logits"));

  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code;
          {
            py::gil_scoped_release release;
            code = cli::run(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
