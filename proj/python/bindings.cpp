// Python view of the core: metrics, scoring, prompts, knowledge cache, MoE
// adapters, the synthetic generator, the latency harness and the CLI.

#include "cli.hpp"

#include "laser/dataio.hpp"
#include "laser/error.hpp"
#include "laser/evalbench.hpp"
#include "laser/knowledge.hpp"
#include "laser/lmcore.hpp"
#include "laser/metrics.hpp"
#include "laser/prompts.hpp"

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace laser;

namespace {

CtrSample make_sample(const std::vector<std::pair<std::string, int>>& history, const std::string& target) {
  CtrSample s;
  s.target_title = target;
  std::int64_t t = 0;
  for (const auto& [title, rating] : history) {
    HistoryEntry h;
    h.item_id = ++t;
    h.item_title = title;
    h.rating = rating;
    h.timestamp = t;
    s.history.push_back(h);
  }
  s.timestamp = t + 1;
  return s;
}

py::array_t<double> to_numpy(const ad::Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  auto v = out.mutable_unchecked<2>();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) v(r, c) = m(r, c);
  }
  return out;
}

ad::Matrix from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw InvalidArgument("expected a 2-d array");
  auto v = a.unchecked<2>();
  ad::Matrix m(v.shape(0), v.shape(1));
  for (py::ssize_t r = 0; r < v.shape(0); ++r) {
    for (py::ssize_t c = 0; c < v.shape(1); ++c) m(r, c) = v(r, c);
  }
  return m;
}

Side parse_side(const std::string& s) {
  if (s == "user") return Side::user;
  if (s == "item") return Side::item;
  throw InvalidArgument("side must be 'user' or 'item'");
}

}  // namespace

PYBIND11_MODULE(_laser_core, m) {
  m.doc() = "Laser core: LLM-augmented CTR prediction at desk scale";

  auto base = py::register_exception<Error>(m, "LaserError");
  py::register_exception<InvalidArgument>(m, "InvalidArgument", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<MismatchError>(m, "MismatchError", base.ptr());
  py::register_exception<NotFoundError>(m, "NotFoundError", base.ptr());
  py::register_exception<UndefinedMetric>(m, "UndefinedMetric", base.ptr());

  m.def("two_way_softmax", &two_way_softmax, py::arg("s_yes"), py::arg("s_no"),
        "Click probability from the Yes/No answer logits.");
  m.def("auc", [](const std::vector<double>& s, const std::vector<int>& y) { return auc(s, y); },
        py::arg("scores"), py::arg("labels"));
  m.def("logloss",
        [](const std::vector<double>& s, const std::vector<int>& y, double eps) { return logloss(s, y, eps); },
        py::arg("scores"), py::arg("labels"), py::arg("eps") = kLogLossEps);
  m.def("rel_improvement", &rel_improvement, py::arg("new_auc"), py::arg("base_auc"));
  m.def("format_percent", &format_percent);

  m.def(
      "render_sample_prompt",
      [](const std::vector<std::pair<std::string, int>>& history, const std::string& target,
         const std::string& domain) {
        return render_sample_prompt(make_sample(history, target), TemplateSet::defaults(parse_domain(domain)));
      },
      py::arg("history"), py::arg("target"), py::arg("domain") = "movies",
      "Scoring prompt for a chronological [(title, rating)] history and a target title.");

  m.def(
      "synth_generate",
      [](int n_users, int n_items, int n_latent_attrs, int samples, double strength, std::uint64_t seed) {
        SynthConfig c{n_users, n_items, n_latent_attrs, samples, strength, seed};
        auto corpus = synth_generate(c);
        py::list rows;
        for (size_t k = 0; k < corpus.records.size(); ++k) {
          const auto& r = corpus.records[k];
          py::dict d;
          d["user_id"] = r.user_id;
          d["item_id"] = r.item_id;
          d["rating"] = r.rating;
          d["timestamp"] = r.timestamp;
          d["title"] = r.item_title;
          d["category"] = r.item_category;
          d["click_probability"] = corpus.click_probability[k];
          rows.append(d);
        }
        return rows;
      },
      py::arg("n_users") = 500, py::arg("n_items") = 2000, py::arg("n_latent_attrs") = 4,
      py::arg("samples") = 50000, py::arg("text_signal_strength") = 1.0, py::arg("seed") = 0);

  m.def(
      "bench_latency",
      [](std::size_t n, const std::function<void(std::size_t, std::size_t)>& runner, std::size_t batch_size,
         int warmup, int repeats) {
        auto r = bench_latency(n, runner, batch_size, warmup, repeats);
        py::dict d;
        d["latency_mean_s"] = r.latency_mean_s;
        d["per_repeat_s"] = r.per_repeat_s;
        return d;
      },
      py::arg("n_samples"), py::arg("runner"), py::arg("batch_size") = 128, py::arg("warmup_batches") = 3,
      py::arg("repeats") = 5, "Per-sample latency of runner(begin, end) over n_samples.");

  m.def(
      "cache_write",
      [](const std::filesystem::path& path, const std::string& side, const std::vector<std::int64_t>& ids,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& vectors,
         const std::string& template_version) {
        const ad::Matrix v = from_numpy(vectors);
        if (static_cast<size_t>(v.rows()) != ids.size()) throw InvalidArgument("one row per id expected");
        std::vector<KnowledgeVector> kv;
        for (size_t i = 0; i < ids.size(); ++i) {
          KnowledgeVector k{parse_side(side), ids[i], {}, template_version};
          for (Eigen::Index c = 0; c < v.cols(); ++c) k.vector.push_back(static_cast<float>(v(static_cast<Eigen::Index>(i), c)));
          kv.push_back(std::move(k));
        }
        return KnowledgeCache::write(kv, path).count();
      },
      py::arg("path"), py::arg("side"), py::arg("ids"), py::arg("vectors"), py::arg("template_version"));
  m.def(
      "cache_read",
      [](const std::filesystem::path& path, std::int64_t id) { return cache_read(path, id).vector; },
      py::arg("path"), py::arg("entity_id"));

  py::class_<MoeAdapter>(m, "MoeAdapter")
      .def(py::init([](const std::string& side, int input_dim, int output_dim, int experts, int hidden_width,
                       std::uint64_t seed) {
             return MoeAdapter(MoeConfig{parse_side(side), input_dim, output_dim, experts, hidden_width, seed});
           }),
           py::arg("side"), py::arg("input_dim"), py::arg("output_dim") = 16, py::arg("experts") = 4,
           py::arg("hidden_width") = 0, py::arg("seed") = 0)
      .def_property_readonly("input_dim", &MoeAdapter::input_dim)
      .def_property_readonly("output_dim", &MoeAdapter::output_dim)
      .def_property_readonly("experts", &MoeAdapter::experts)
      .def(
          "forward",
          [](const MoeAdapter& a, const py::array_t<double, py::array::c_style | py::array::forcecast>& h) {
            ad::NoGradGuard ng;
            ad::Tensor alpha;
            ad::Matrix z = a.forward(ad::Tensor::constant(from_numpy(h)), &alpha).value();
            return py::make_tuple(to_numpy(z), to_numpy(alpha.value()));
          },
          py::arg("h"), "Returns (z, gate weights) for a batch of knowledge vectors.");

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "laser");
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        py::gil_scoped_release release;
        return cli::run(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "Runs a laser subcommand; returns its exit code.");
}
