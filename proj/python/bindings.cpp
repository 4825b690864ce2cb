#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "lrlab/analytics.hpp"
#include "lrlab/checkpoint.hpp"
#include "lrlab/config.hpp"
#include "lrlab/errors.hpp"
#include "lrlab/linalg.hpp"
#include "lrlab/schemes.hpp"
#include "lrlab/verify.hpp"

namespace py = pybind11;
using namespace lrlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() == 1) {
    Matrix m(static_cast<std::size_t>(a.shape(0)), 1);
    std::memcpy(m.data().data(), a.data(), m.size() * sizeof(double));
    return m;
  }
  if (a.ndim() != 2) throw ShapeError("expected a 1-D or 2-D array");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::memcpy(m.data().data(), a.data(), m.size() * sizeof(double));
  return m;
}

Array to_array(const Matrix& m) {
  Array a({m.rows(), m.cols()});
  std::memcpy(a.mutable_data(), m.data().data(), m.size() * sizeof(double));
  return a;
}

py::dict params_to_dict(const ParamSet& params) {
  py::dict d;
  for (const auto& [name, value] : params.entries()) d[py::str(name)] = to_array(value);
  return d;
}

}  // namespace

PYBIND11_MODULE(_lrlab, m) {
  m.doc() = "Low-rank training laboratory: linear algebra, initialisation and analytics";

  py::register_exception<NumericsError>(m, "NumericsError");
  py::register_exception<Error>(m, "LrlabError", PyExc_ValueError);

  m.def("svd", [](const Array& a) {
    const SvdResult s = svd(to_matrix(a));
    return py::make_tuple(to_array(s.u), s.sigma, to_array(s.v));
  }, "Thin SVD (u, sigma, v) with a = u diag(sigma) vᵀ.");
  m.def("singular_values", [](const Array& a) { return singular_values(to_matrix(a)); });
  m.def("effective_rank", [](const Array& a) { return effective_rank(to_matrix(a)); });

  m.def("spectral_init", [](const Array& w, std::size_t r) {
    const FactorizedParam p = spectral_init(to_matrix(w), r);
    return py::make_tuple(to_array(p.u), to_array(p.v));
  });
  m.def("spectral_ones_init", [](const Array& w, std::size_t r) {
    const FactorizedParam p = spectral_ones_init(to_matrix(w), r);
    return py::make_tuple(to_array(p.u), to_array(p.v));
  });
  m.def("frobenius_decay_penalty", [](const Array& u, const Array& v, double lambda) {
    const PenaltyResult p = frobenius_decay_penalty(to_matrix(u), to_matrix(v), lambda);
    return py::make_tuple(p.loss, to_array(p.grad_u), to_array(p.grad_v));
  });

  m.def("mp_edges", [](double sigma2, std::size_t n_rows, std::size_t n_cols) {
    const MpEdges e = mp_edges({sigma2, n_rows, n_cols});
    return py::make_tuple(e.lambda_minus, e.lambda_plus);
  });
  m.def("mp_density", [](double lambda, double sigma2, std::size_t n_rows, std::size_t n_cols) {
    return mp_density(lambda, {sigma2, n_rows, n_cols});
  });
  m.def("mp_cdf", [](double lambda, double sigma2, std::size_t n_rows, std::size_t n_cols) {
    return mp_cdf(lambda, {sigma2, n_rows, n_cols});
  });
  m.def("esd_ks_distance", [](const Array& w, double assumed_std) {
    return esd_vs_mp(to_matrix(w), assumed_std).ks_distance;
  });

  m.def("update_identity_check", [](const Array& u, const Array& v, const Array& g, double alpha) {
    return update_identity_check(to_matrix(u), to_matrix(v), to_matrix(g), alpha);
  });
  m.def("normalized_update_ratios", [](const Array& w, const Array& g, std::vector<double> alphas) {
    return normalized_update_check(to_matrix(w), to_matrix(g), alphas).ratios;
  });

  m.def("dense_cost", [](std::size_t mm, std::size_t n, std::size_t r) {
    const CostReport c = dense_cost(mm, n, r);
    py::dict d;
    d["full_flops"] = c.full_flops;
    d["fact_flops"] = c.fact_flops;
    d["full_params"] = c.full_params;
    d["fact_params"] = c.fact_params;
    d["breakeven_rank"] = c.breakeven_rank;
    d["economical"] = c.economical;
    return d;
  });

  m.def("run_verify_suite", [](std::uint64_t seed) {
    py::list out;
    for (const CheckResult& c : run_verify_suite(seed)) {
      py::dict d;
      d["name"] = c.name;
      d["passed"] = c.passed;
      d["value"] = c.value;
      d["threshold"] = c.threshold;
      d["detail"] = c.detail;
      out.append(d);
    }
    return out;
  }, py::arg("seed") = 0);

  m.def("load_checkpoint", [](const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    return py::make_tuple(ck.step, to_hex(ck.digest), params_to_dict(ck.params));
  }, "Returns (step, architecture digest hex, {name: array}).");

  m.def("materialize_config", [](const std::string& json_text) {
    return materialize_config(parse_config(json_text));
  });
}
