// Python bindings for the main operations: modulation algebra, the core
// tensor ops, the counting metrics, and the synthetic scene renderer.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "movie/metrics.hpp"
#include "movie/modulation.hpp"
#include "movie/optim.hpp"
#include "movie/synth.hpp"
#include "movie/tensor.hpp"

namespace py = pybind11;
using namespace movie;

namespace {

Tensor<double> to_tensor(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i)
    shape[i] = std::size_t(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor<double>(std::move(shape), std::move(data), false);
}

py::array_t<double> to_array(const Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

}  // namespace

PYBIND11_MODULE(_movie, m) {
  m.doc() = "query-modulated counting: core operations";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);

  // modulation algebra
  m.def(
      "film",
      [](const Arr& v, const Arr& dgamma, const Arr& beta) {
        return to_array(film(to_tensor(v), to_tensor(dgamma), to_tensor(beta)));
      },
      py::arg("v"), py::arg("dgamma"), py::arg("beta"),
      "v * (1 + dgamma) + beta");
  m.def(
      "movie",
      [](const Arr& v, const Arr& dgamma, const Arr& w, bool residual) {
        return to_array(
            movie_vec(to_tensor(v), to_tensor(dgamma), to_tensor(w), residual));
      },
      py::arg("v"), py::arg("dgamma"), py::arg("w"), py::arg("residual") = true,
      "W^T (v * dgamma), plus v when residual");

  // tensor ops
  m.def(
      "conv2d",
      [](const Arr& x, const Arr& kernel, std::size_t stride,
         std::size_t padding) {
        return to_array(conv2d(to_tensor(x), to_tensor(kernel), stride, padding));
      },
      py::arg("x"), py::arg("kernel"), py::arg("stride") = 1,
      py::arg("padding") = 0);
  m.def("relu", [](const Arr& x) { return to_array(relu(to_tensor(x))); });
  m.def(
      "channel_norm",
      [](const Arr& x, const Arr& gain, const Arr& bias) {
        return to_array(
            channel_norm(to_tensor(x), to_tensor(gain), to_tensor(bias)));
      },
      py::arg("x"), py::arg("gain"), py::arg("bias"));
  m.def(
      "softmax_cross_entropy",
      [](const Arr& logits, std::size_t target) {
        return softmax_cross_entropy(to_tensor(logits), target).item();
      },
      py::arg("logits"), py::arg("target"));
  m.def(
      "grad_softmax_cross_entropy",
      [](const Arr& logits, std::size_t target) {
        Tensor<double> t = to_tensor(logits);
        t.node()->requires_grad = true;
        t.zero_grad();
        backward(softmax_cross_entropy(t, target));
        Tensor<double> g(t.shape(), t.grad(), false);
        return to_array(g);
      },
      py::arg("logits"), py::arg("target"),
      "d loss / d logits via the reverse-mode tape");

  // metrics
  m.def("accuracy", &accuracy);
  m.def("rmse", &rmse);
  m.def("rmse_nz", &rmse_nz);
  m.def("rel_rmse", &rel_rmse);
  m.def("rel_rmse_nz", &rel_rmse_nz);
  m.def("metrics_csv", [](const std::vector<int>& preds,
                          const std::vector<int>& gts) {
    return to_csv(report(preds, gts));
  });

  // schedule
  m.def(
      "lr_at",
      [](std::size_t epoch, double base_lr, double warmup_start_lr,
         std::size_t warmup_epochs, std::size_t decay_epoch,
         double decay_factor, std::size_t total_epochs) {
        LrSchedule s{base_lr,     warmup_start_lr, warmup_epochs,
                     decay_epoch, decay_factor,    total_epochs};
        return lr_at(epoch, s);
      },
      py::arg("epoch"), py::arg("base_lr") = 1e-4,
      py::arg("warmup_start_lr") = 2.5e-5, py::arg("warmup_epochs") = 3,
      py::arg("decay_epoch") = 10, py::arg("decay_factor") = 0.1,
      py::arg("total_epochs") = 13);

  // synthetic benchmark
  m.def("vocabulary", &synth::vocabulary);
  m.def(
      "render_scene",
      [](std::uint64_t seed, std::size_t max_objects, std::size_t canvas) {
        Rng rng(seed);
        synth::SceneGeometry geo;
        geo.canvas_size = canvas;
        auto spec = synth::sample_scene(rng, max_objects, geo);
        auto img = synth::render_scene(spec, canvas);
        py::array_t<float> out({std::size_t(3), canvas, canvas});
        std::copy(img.begin(), img.end(), out.mutable_data());
        return out;
      },
      py::arg("seed"), py::arg("max_objects") = 9, py::arg("canvas") = 64,
      "sample and rasterize a random scene, returns a 3xSxS float image");
}
