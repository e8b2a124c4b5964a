#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "stackdiff/corpus.hpp"
#include "stackdiff/diffusion.hpp"
#include "stackdiff/embedders.hpp"
#include "stackdiff/instructor.hpp"
#include "stackdiff/metrics.hpp"
#include "stackdiff/service.hpp"
#include "stackdiff/stacking.hpp"
#include "stackdiff/synthetic.hpp"
#include "stackdiff/trainer.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace stackdiff;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

LatentGrid grid_from(const F64& a) {
  if (a.ndim() != 3) throw ShapeError("expected a C x H x W array");
  LatentGrid g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), g.values.begin());
  return g;
}

F64 grid_to(const LatentGrid& g) {
  F64 out({g.channels, g.height, g.width});
  std::copy(g.values.begin(), g.values.end(), out.mutable_data());
  return out;
}

Image image_from(const U8& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("expected an H x W x 3 uint8 array");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

U8 image_to(const Image& img) {
  U8 out({img.height, img.width, 3});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

std::vector<Vector> rows_from(const F64& a) {
  if (a.ndim() != 2) throw ShapeError("expected an n x d array");
  std::vector<Vector> out;
  const auto d = a.shape(1);
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out.push_back(Eigen::Map<const Vector>(a.data() + i * d, d));
  return out;
}

Vector vector_from(const F64& a) { return Eigen::Map<const Vector>(a.data(), a.size()); }

Eigen::MatrixXd matrix_from(const F64& a) {
  if (a.ndim() != 2) throw ShapeError("expected a square matrix");
  return Eigen::Map<const RowMatrix>(a.data(), a.shape(0), a.shape(1));
}

CodecConfig codec_config(const std::string& kind, int spatial_reduction, int pool) {
  return json{{"kind", kind}, {"spatial_reduction", spatial_reduction}, {"pool", pool}}.get<CodecConfig>();
}

py::dict article_to(const corpus::Article& a) {
  py::dict d;
  d["goal_id"] = a.goal_id;
  d["goal"] = a.goal;
  d["steps"] = a.steps;
  py::list images;
  for (const auto& img : a.images) images.append(image_to(img));
  d["images"] = images;
  return d;
}

py::tuple reply(const service::ApiResponse& r) { return py::make_tuple(r.status, to_py(json::parse(r.body))); }

class StubService {
 public:
  StubService(const std::string& store_root, int sampler_steps) {
    service::ServiceConfig cfg;
    cfg.store_root = store_root;
    cfg.stub = true;
    cfg.generation.sampler.steps = sampler_steps;
    auto assets = service::make_stub_assets();
    api_ = std::make_unique<service::Api>(cfg, assets.bundle, assets.llm);
  }

  py::tuple create_article(const py::object& body) {
    const auto text = from_py(body).dump();
    return call([&] { return api_->create_article(text); });
  }
  py::tuple follow_up(const std::string& id, const py::object& body) {
    const auto text = from_py(body).dump();
    return call([&] { return api_->follow_up(id, text); });
  }
  py::tuple get_article(const std::string& id) { return call([&] { return api_->get_article(id); }); }
  py::tuple get_session(const std::string& id) { return call([&] { return api_->get_session(id); }); }
  py::tuple healthz() { return call([&] { return api_->healthz(); }); }

 private:
  template <class F>
  py::tuple call(F&& f) {
    service::ApiResponse r;
    {
      py::gil_scoped_release release;
      r = f();
    }
    return reply(r);
  }

  std::unique_ptr<service::Api> api_;
};

}  // namespace

PYBIND11_MODULE(_stackdiff, m) {
  m.doc() = "StackedDiffusion illustrated instructions core";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.def("tile", [](const std::vector<F64>& grids) {
    std::vector<LatentGrid> gs;
    for (const auto& g : grids) gs.push_back(grid_from(g));
    return grid_to(tile(gs));
  }, py::arg("latents"), "Stack per-step C x H x W latents along height.");
  m.def("untile", [](const F64& stack, int n_steps) {
    LatentStack s;
    static_cast<LatentGrid&>(s) = grid_from(stack);
    s.n_steps = n_steps;
    std::vector<F64> out;
    for (const auto& g : untile(s, n_steps)) out.push_back(grid_to(g));
    return out;
  }, py::arg("stack"), py::arg("n_steps"));

  m.def("codec_encode", [](const U8& image, const std::string& kind, int spatial_reduction, int pool) {
    return grid_to(PatchCodec(codec_config(kind, spatial_reduction, pool)).encode(image_from(image)));
  }, py::arg("image"), py::arg("kind") = "pooled_patch", py::arg("spatial_reduction") = 8, py::arg("pool") = 4);
  m.def("codec_decode", [](const F64& latent, const std::string& kind, int spatial_reduction, int pool) {
    return image_to(PatchCodec(codec_config(kind, spatial_reduction, pool)).decode(grid_from(latent)));
  }, py::arg("latent"), py::arg("kind") = "pooled_patch", py::arg("spatial_reduction") = 8, py::arg("pool") = 4);

  m.def("alpha_bar", [](const std::string& kind, int T, bool zero_terminal_snr) {
    auto s = diffusion::make_schedule(diffusion::parse_schedule_kind(kind), T);
    if (zero_terminal_snr) s = diffusion::rescale_zero_terminal_snr(s);
    return s.alpha_bar;
  }, py::arg("kind") = "linear", py::arg("T") = 1000, py::arg("zero_terminal_snr") = true);
  m.def("cfg_combine", [](const F64& uncond, const F64& cond, double w) {
    if (uncond.size() != cond.size()) throw ShapeError("predictions differ in size");
    LatentStack u(1, 1, static_cast<int>(uncond.size()), 1), c(1, 1, static_cast<int>(cond.size()), 1);
    std::copy(uncond.data(), uncond.data() + uncond.size(), u.values.begin());
    std::copy(cond.data(), cond.data() + cond.size(), c.values.begin());
    const auto r = diffusion::cfg_combine(u, c, w);
    F64 out(std::vector<py::ssize_t>(cond.shape(), cond.shape() + cond.ndim()));
    std::copy(r.values.begin(), r.values.end(), out.mutable_data());
    return out;
  }, py::arg("uncond"), py::arg("cond"), py::arg("w"));

  m.def("step_positional_code", [](int index, int dim, double gain) {
    const Vector v = step_positional_code(index, dim, gain);
    return std::vector<double>(v.data(), v.data() + v.size());
  }, py::arg("index"), py::arg("dim"), py::arg("gain") = 1.0);
  m.def("condition_texts", [](const std::string& goal, const std::vector<std::string>& steps, int dim, bool positional) {
    embed::HashTextEncoder enc(dim);
    ConditioningOptions opts;
    opts.positional = positional;
    const auto c = condition_texts(enc, goal, steps, opts);
    F64 rows({c.length(), c.dim()});
    std::copy(c.vectors.data(), c.vectors.data() + c.vectors.size(), rows.mutable_data());
    return py::make_tuple(rows, c.segments);
  }, py::arg("goal"), py::arg("steps"), py::arg("dim") = 64, py::arg("positional") = true,
     "Token rows and segment ids for a goal and its steps under the hash text encoder.");

  m.def("fid", [](const F64& generated, const F64& reference) {
    return metrics::fid(rows_from(generated), rows_from(reference));
  }, py::arg("generated"), py::arg("reference"));
  m.def("frechet_distance", [](const F64& mu1, const F64& cov1, const F64& mu2, const F64& cov2) {
    return metrics::frechet_distance(vector_from(mu1), matrix_from(cov1), vector_from(mu2), matrix_from(cov2));
  });
  m.def("cross_image_consistency", [](const std::vector<F64>& articles, bool normalize) {
    std::vector<std::vector<Vector>> sets;
    for (const auto& a : articles) sets.push_back(rows_from(a));
    return metrics::cross_image_consistency(sets, normalize).mean;
  }, py::arg("articles"), py::arg("normalize") = false);
  m.def("win_rate", [](const std::vector<std::tuple<std::string, std::string, std::string>>& annotations,
                       const std::string& method_x, const std::string& method_y,
                       const std::map<std::string, std::string>& method_of_a) {
    std::vector<metrics::AnnotationRecord> records;
    for (const auto& [goal, annotator, choice] : annotations) records.push_back({goal, annotator, metrics::parse_choice(choice)});
    return to_py(metrics::to_json(metrics::win_rate(records, {method_x, method_y, method_of_a})));
  }, py::arg("annotations"), py::arg("method_x"), py::arg("method_y"), py::arg("method_of_a"));
  m.def("evaluate", [](const std::string& generated, const std::string& reference, int k, std::uint64_t seed) {
    const auto semantic = embed::make_semantic_embedder({{"kind", "oracle"}});
    const auto visual = embed::make_visual_embedder({{"kind", "pooled"}});
    metrics::EvalOptions opts;
    opts.k = k;
    opts.seed = seed;
    json j = metrics::evaluate(corpus::load_corpus(generated), corpus::load_corpus(reference), *semantic, *visual, opts);
    return to_py(j);
  }, py::arg("generated"), py::arg("reference"), py::arg("k") = 4, py::arg("seed") = 0,
     "GF, SF, CIC and FID of two corpus directories under the synthetic oracle embedder.");

  m.def("prompt_template", &instruct::prompt_template, py::arg("max_steps") = instruct::kDefaultMaxSteps);
  m.def("render_prompt", [](const std::string& text, int max_steps) { return instruct::render_prompt(text, max_steps); },
        py::arg("user_text"), py::arg("max_steps") = instruct::kDefaultMaxSteps);
  m.def("parse_plan", [](const std::string& text, int max_steps) { return to_py(json(instruct::parse_plan(text, max_steps))); },
        py::arg("text"), py::arg("max_steps") = instruct::kDefaultMaxSteps);
  m.def("format_plan", [](const std::string& goal, const std::vector<std::string>& steps) {
    return instruct::format_plan({goal, steps, {}, false});
  });

  m.def("synthetic_corpus", [](std::size_t articles, int n_steps, std::uint64_t seed) {
    synthetic::SyntheticSpec spec;
    spec.articles = articles;
    spec.n_steps = n_steps;
    py::list out;
    for (const auto& a : synthetic::generate_synthetic_corpus(spec, seed)) out.append(article_to(a));
    return out;
  }, py::arg("articles") = 16, py::arg("n_steps") = 3, py::arg("seed") = 0);
  m.def("write_synthetic_corpus", [](const std::string& out, std::size_t articles, int n_steps, std::uint64_t seed) {
    synthetic::SyntheticSpec spec;
    spec.articles = articles;
    spec.n_steps = n_steps;
    corpus::write_corpus(synthetic::generate_synthetic_corpus(spec, seed), out);
  }, py::arg("out"), py::arg("articles") = 16, py::arg("n_steps") = 3, py::arg("seed") = 0);

  m.def("train_synthetic", [](const py::object& config, const std::string& out_dir) {
    const json root = from_py(config);
    auto cfg = root.value("train", json::object()).get<train::TrainConfig>();
    cfg.validate();
    if (cfg.embedders.empty() && root.contains("embedders")) cfg.embedders = root.at("embedders");
    synthetic::SyntheticSpec spec;
    if (root.contains("synthetic")) spec = root.at("synthetic").get<synthetic::SyntheticSpec>();
    json summary;
    {
      py::gil_scoped_release release;
      const auto split = corpus::split_corpus(synthetic::generate_synthetic_corpus(spec, cfg.seed), {}, cfg.seed);
      auto encoder = embed::make_text_encoder(cfg.embedders.value("text_encoder", json::object()));
      train::TrainOptions opts;
      opts.out_dir = out_dir;
      const auto result = train::train(split.train, cfg, *encoder, opts);
      summary = {{"steps", result.meta.step}, {"losses", json::array()}, {"checkpoint", (std::filesystem::path(out_dir) / "model.ckpt").string()}};
      for (const auto& s : result.log.steps) summary["losses"].push_back(s.loss);
    }
    return to_py(summary);
  }, py::arg("config"), py::arg("out_dir"), "Trains on the synthetic corpus described by config; writes model.ckpt.");

  m.def("generate_stub", [](const std::string& user_text, const std::string& mode, std::uint64_t seed, int sampler_steps) {
    auto assets = service::make_stub_assets();
    instruct::GenerationConfig gen;
    gen.sampler.steps = sampler_steps;
    gen.sampler.seed = seed;
    const auto m = instruct::parse_mode(mode);
    const int n = m == instruct::Mode::Stacked && assets.bundle.stacked ? assets.bundle.stacked->n_steps : instruct::kDefaultMaxSteps;
    const auto plan = instruct::plan(user_text, *assets.llm, 2, n);
    const auto article = instruct::generate_article(plan, m, assets.bundle, gen);
    auto d = article_to(article.as_article());
    d["mode"] = instruct::to_string(article.mode);
    return d;
  }, py::arg("user_text"), py::arg("mode") = "stacked", py::arg("seed") = 0, py::arg("sampler_steps") = 10,
     "Plans with the synthetic LLM and illustrates with the untrained stub model.");

  py::class_<StubService>(m, "StubService", "The /v1 API in stub mode, without the socket layer.")
      .def(py::init<const std::string&, int>(), py::arg("store_root"), py::arg("sampler_steps") = 10)
      .def("create_article", &StubService::create_article)
      .def("follow_up", &StubService::follow_up)
      .def("get_article", &StubService::get_article)
      .def("get_session", &StubService::get_session)
      .def("healthz", &StubService::healthz);
}
