#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "trajaux/error.hpp"
#include "trajaux/schedule.hpp"
#include "trajaux/session.hpp"

namespace py = pybind11;
using namespace trajaux;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I64 = py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

TrajectoryBatch to_batch(const F64& hidden, const I64& spans, const std::optional<I32>& labels) {
  if (hidden.ndim() != 3) throw ShapeError("hidden must be B x S x D");
  const std::size_t B = hidden.shape(0), S = hidden.shape(1), D = hidden.shape(2);
  if (spans.ndim() != 2 || static_cast<std::size_t>(spans.shape(0)) != B || spans.shape(1) != 2)
    throw ShapeError("spans must be B x 2");
  TrajectoryBatch b;
  b.hidden = Tensor({B, S, D}, std::vector<double>(hidden.data(), hidden.data() + hidden.size()));
  auto sp = spans.unchecked<2>();
  for (std::size_t i = 0; i < B; ++i) {
    if (sp(i, 0) < 0 || sp(i, 1) < 0) throw DataError("negative span bound");
    b.spans.push_back({static_cast<std::size_t>(sp(i, 0)), static_cast<std::size_t>(sp(i, 1))});
  }
  if (labels) {
    if (static_cast<std::size_t>(labels->size()) != B * S) throw ShapeError("labels must be B x S");
    b.labels.assign(labels->data(), labels->data() + labels->size());
  }
  b.validate();
  return b;
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_trajaux, m) {
  auto base = py::register_exception<Error>(m, "TrajauxError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());

  py::class_<Session>(m, "Session")
      .def(py::init([](const std::string& loss, std::size_t D, const std::string& hyper, std::uint64_t seed) {
             return std::make_unique<Session>(loss, D, parse_hyper(hyper), seed);
           }),
           py::arg("loss"), py::arg("D"), py::arg("hyper") = "", py::arg("seed") = 0)
      .def_property_readonly("loss_id", &Session::loss_id)
      .def_property_readonly("D", &Session::D)
      .def("set_head",
           [](Session& s, const F64& W, double temperature) {
             if (W.ndim() != 2) throw ShapeError("head must be V x D");
             ToyLMHead h;
             h.W = Tensor({static_cast<std::size_t>(W.shape(0)), static_cast<std::size_t>(W.shape(1))},
                          std::vector<double>(W.data(), W.data() + W.size()));
             h.temperature = temperature;
             s.set_head(std::move(h));
           },
           py::arg("W"), py::arg("temperature") = 1.0)
      .def("eval_with_grad",
           [](Session& s, const F64& hidden, const I64& spans, std::optional<I32> labels, std::uint64_t seed) {
             const DualValue dv = s.eval_with_grad(to_batch(hidden, spans, labels), seed);
             py::dict grads;
             for (const auto& [name, g] : dv.grads) grads[py::str(name)] = to_numpy(g);
             return py::make_tuple(dv.value, grads, std::vector<std::string>(dv.flags.begin(), dv.flags.end()));
           },
           py::arg("hidden"), py::arg("spans"), py::arg("labels") = py::none(), py::arg("seed") = 0)
      .def("step", &Session::step, py::arg("lr"))
      .def("ema_tick", &Session::ema_tick)
      .def("bank_insert",
           [](Session& s, const F64& hidden, const I64& spans) { s.bank_insert(to_batch(hidden, spans, {})); },
           py::arg("hidden"), py::arg("spans"))
      .def("diagnose",
           [](Session& s, const F64& hidden, const I64& spans, std::optional<I32> labels, std::uint64_t seed) {
             return diagnostics_json(s.diagnose(to_batch(hidden, spans, labels), seed)).dump();
           },
           py::arg("hidden"), py::arg("spans"), py::arg("labels") = py::none(), py::arg("seed") = 0);
}
