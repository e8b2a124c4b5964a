// Command-line front end: training, evaluation, generation, human-eval helpers,
// corpus utilities and the HTTP service.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stackdiff/corpus.hpp"
#include "stackdiff/denoiser.hpp"
#include "stackdiff/embedders.hpp"
#include "stackdiff/instructor.hpp"
#include "stackdiff/metrics.hpp"
#include "stackdiff/service.hpp"
#include "stackdiff/synthetic.hpp"
#include "stackdiff/trainer.hpp"
#include "stackdiff/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stackdiff;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON configuration file");
  cmd->add_option("--seed", c.seed, "Random seed");
}

json load_config(const Common& c) {
  if (c.config_path.empty()) return json::object();
  try {
    auto j = json::parse(read_file(c.config_path));
    if (!j.is_object()) throw ConfigError("config root must be an object");
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid config " + c.config_path + ": " + e.what());
  }
}

json section(const json& config, const char* key) { return config.contains(key) ? config.at(key) : json::object(); }

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

std::vector<corpus::Article> load_data(const std::string& dir) {
  std::size_t skipped = 0;
  auto articles = corpus::load_corpus(dir, &skipped);
  if (skipped) std::cerr << json{{"warning", "skipped unreadable articles"}, {"count", skipped}}.dump() << std::endl;
  return articles;
}

std::shared_ptr<instruct::LlmClient> make_llm(const std::string& spec, const json& config) {
  std::string kind = spec;
  if (kind == "auto") kind = std::getenv("STACKDIFF_LLM_URL") ? "http" : "synthetic";
  synthetic::SyntheticSpec synth;
  if (config.contains("synthetic")) synth = config.at("synthetic").get<synthetic::SyntheticSpec>();
  if (kind == "http") return std::make_shared<instruct::HttpLlmClient>(instruct::HttpLlmConfig::from_env());
  if (kind == "synthetic") return std::make_shared<instruct::SyntheticLlmClient>(synth);
  if (kind.rfind("canned:", 0) == 0) {
    auto canned = std::make_shared<instruct::CannedLlmClient>(std::make_shared<instruct::SyntheticLlmClient>(synth));
    canned->load(json::parse(read_file(kind.substr(7))));
    return canned;
  }
  throw ConfigError("unknown --llm '" + spec + "' (auto, http, synthetic, canned:FILE)");
}

instruct::DiffusionModel load_model(const std::string& path) {
  auto ck = load_checkpoint(path);
  const json emb = ck.meta.extra.value("embedders", json::object());
  auto encoder = embed::make_text_encoder(emb.value("text_encoder", json::object()));
  return instruct::DiffusionModel::from_checkpoint(std::move(ck), std::move(encoder));
}

struct GenerateArgs {
  std::string input, from_corpus, mode = "stacked", checkpoint, frozen, finetuned, out, retrieval_corpus;
  std::string llm = "auto";
  std::optional<int> sampler_steps;
  std::optional<double> guidance;
  bool stub = false;
};

instruct::GenerationConfig generation_config(const json& config, const GenerateArgs& a, std::optional<std::uint64_t> seed) {
  instruct::GenerationConfig g;
  if (config.contains("generation")) g = config.at("generation").get<instruct::GenerationConfig>();
  if (a.sampler_steps) g.sampler.steps = *a.sampler_steps;
  if (a.guidance) g.sampler.guidance_scale = *a.guidance;
  if (seed) g.sampler.seed = *seed;
  return g;
}

instruct::ModelBundle make_bundle(const GenerateArgs& a, const json& config) {
  instruct::ModelBundle b;
  if (a.stub) b = service::make_stub_assets().bundle;
  if (!a.checkpoint.empty()) b.stacked = load_model(a.checkpoint);
  if (!a.frozen.empty()) b.frozen = load_model(a.frozen);
  if (!a.finetuned.empty()) b.finetuned = load_model(a.finetuned);
  if (!a.retrieval_corpus.empty())
    b.retrieval = std::make_shared<instruct::RetrievalIndex>(
        load_data(a.retrieval_corpus), embed::make_semantic_embedder(section(section(config, "embedders"), "semantic")));
  return b;
}

int cmd_generate(const GenerateArgs& a, const Common& c) {
  const json config = load_config(c);
  const auto mode = instruct::parse_mode(a.mode);
  const auto gen = generation_config(config, a, c.seed);
  if (a.input.empty() == a.from_corpus.empty()) throw ConfigError("give exactly one of --input or --from-corpus");
  const auto bundle = make_bundle(a, config);

  if (!a.from_corpus.empty()) {
    // Ground-truth plans from a corpus; output is itself a corpus for `evaluate`.
    std::vector<corpus::Article> out;
    for (const auto& ref : load_data(a.from_corpus)) {
      instruct::ParsedPlan plan{ref.goal, ref.steps, instruct::format_plan({ref.goal, ref.steps, "", false}), false};
      auto g = gen;
      g.sampler.seed = derive_seed(gen.sampler.seed, {fnv1a(ref.goal_id)});
      auto art = instruct::generate_article(plan, mode, bundle, g).as_article(ref.goal_id);
      art.category = ref.category;
      out.push_back(std::move(art));
    }
    corpus::write_corpus(out, a.out);
    print({{"articles", out.size()}, {"out", a.out}, {"mode", a.mode}});
    return 0;
  }

  auto llm = make_llm(a.llm, config);
  const int n = mode == instruct::Mode::Stacked && bundle.stacked ? bundle.stacked->n_steps : instruct::kDefaultMaxSteps;
  const auto plan = instruct::plan(a.input, *llm, config.value("llm_retries", 2), n);
  const auto article = instruct::generate_article(plan, mode, bundle, gen);
  instruct::write_article_bundle(article, plan, a.out);
  auto record = instruct::article_record(article);
  record["out"] = a.out;
  print(record);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"StackedDiffusion illustrated instructions toolkit"};
  app.require_subcommand(1);

  // train / resume
  Common train_c;
  std::string train_data, train_out;
  bool train_synthetic = false;
  std::optional<int> train_steps;
  auto* train = app.add_subcommand("train", "Train a denoiser");
  add_common(train, train_c);
  train->add_option("--data", train_data, "Corpus directory (manifest.jsonl)");
  train->add_flag("--synthetic", train_synthetic, "Generate the synthetic corpus from the config's \"synthetic\" section");
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--steps", train_steps, "Override the number of optimizer steps");

  Common resume_c;
  std::string resume_ckpt, resume_data, resume_out;
  bool resume_synthetic = false;
  std::optional<int> resume_steps;
  auto* resume = app.add_subcommand("resume", "Continue training from a checkpoint");
  add_common(resume, resume_c);
  resume->add_option("--checkpoint", resume_ckpt)->required();
  resume->add_option("--data", resume_data);
  resume->add_flag("--synthetic", resume_synthetic);
  resume->add_option("--out", resume_out)->required();
  resume->add_option("--steps", resume_steps, "Total optimizer steps to reach");

  // evaluate
  Common eval_c;
  std::string eval_gen, eval_ref, eval_out, eval_store, eval_id;
  int eval_k = 4;
  bool eval_normalize = false;
  auto* evaluate = app.add_subcommand("evaluate", "Compute GF, SF, CIC and FID");
  add_common(evaluate, eval_c);
  evaluate->add_option("--generated", eval_gen)->required();
  evaluate->add_option("--reference", eval_ref)->required();
  evaluate->add_option("--k", eval_k, "MCQ size for goal faithfulness");
  evaluate->add_flag("--normalize-cic", eval_normalize);
  evaluate->add_option("--out", eval_out, "Write the report here");
  evaluate->add_option("--store", eval_store, "Also save into a service store");
  evaluate->add_option("--id", eval_id, "Report id inside the store");

  // generate
  Common gen_c;
  GenerateArgs gen_a;
  auto* generate = app.add_subcommand("generate", "Plan and illustrate an article");
  add_common(generate, gen_c);
  generate->add_option("--input", gen_a.input, "User text");
  generate->add_option("--from-corpus", gen_a.from_corpus, "Illustrate every article of a corpus with its own steps");
  generate->add_option("--mode", gen_a.mode,
                       "stacked, independent_frozen, independent_finetuned, retrieval_step, retrieval_goal");
  generate->add_option("--checkpoint", gen_a.checkpoint, "Stacked model checkpoint");
  generate->add_option("--frozen-checkpoint", gen_a.frozen);
  generate->add_option("--finetuned-checkpoint", gen_a.finetuned);
  generate->add_option("--corpus", gen_a.retrieval_corpus, "Corpus for the retrieval modes");
  generate->add_option("--llm", gen_a.llm, "auto, http, synthetic or canned:FILE");
  generate->add_option("--sampler-steps", gen_a.sampler_steps);
  generate->add_option("--guidance", gen_a.guidance);
  generate->add_flag("--stub", gen_a.stub, "Use the untrained stub model and synthetic retrieval index");
  generate->add_option("--out", gen_a.out)->required();

  // render-comparison
  Common cmp_c;
  std::string cmp_a, cmp_b, cmp_out;
  auto* compare = app.add_subcommand("render-comparison", "Render a blinded side-by-side comparison page");
  add_common(compare, cmp_c);
  compare->add_option("--a", cmp_a, "Article directory A")->required();
  compare->add_option("--b", cmp_b, "Article directory B")->required();
  compare->add_option("--out", cmp_out, "HTML output")->required();

  // win-rate
  Common win_c;
  std::string win_ann, win_assign, win_x = "X", win_y = "Y";
  auto* win = app.add_subcommand("win-rate", "Majority win rate from annotations");
  add_common(win, win_c);
  win->add_option("--annotations", win_ann, "CSV with goal_id,annotator_id,choice")->required();
  win->add_option("--assignment", win_assign, "JSON {method_x, method_y, method_of_a}");
  win->add_option("--method-x", win_x, "Method shown as A when no assignment is given");
  win->add_option("--method-y", win_y);

  // serve
  Common serve_c;
  GenerateArgs serve_a;
  std::string serve_host = "127.0.0.1", serve_store = "store", serve_static, serve_canned;
  int serve_port = 8080;
  std::size_t serve_queue = 8;
  double serve_budget = 60.0;
  auto* serve = app.add_subcommand("serve", "Run the /v1 HTTP service");
  add_common(serve, serve_c);
  serve->add_flag("--stub", serve_a.stub, "No network, no trained checkpoint");
  serve->add_option("--host", serve_host);
  serve->add_option("--port", serve_port);
  serve->add_option("--store", serve_store);
  serve->add_option("--static", serve_static, "Directory served at /");
  serve->add_option("--checkpoint", serve_a.checkpoint);
  serve->add_option("--frozen-checkpoint", serve_a.frozen);
  serve->add_option("--finetuned-checkpoint", serve_a.finetuned);
  serve->add_option("--corpus", serve_a.retrieval_corpus);
  serve->add_option("--llm", serve_a.llm);
  serve->add_option("--canned", serve_canned, "Canned transcript table for stub mode");
  serve->add_option("--mode", serve_a.mode, "Default generation mode");
  serve->add_option("--sampler-steps", serve_a.sampler_steps);
  serve->add_option("--queue-depth", serve_queue);
  serve->add_option("--budget", serve_budget, "Seconds before answering 202 with a job");

  // corpus
  auto* corpus_cmd = app.add_subcommand("corpus", "Corpus utilities");
  corpus_cmd->require_subcommand(1);
  Common stats_c, split_c, synth_c;
  std::string stats_data, split_data, split_out, synth_out;
  std::vector<double> split_ratios{0.8, 0.1, 0.1};
  auto* stats = corpus_cmd->add_subcommand("stats", "Step-count histogram");
  add_common(stats, stats_c);
  stats->add_option("--data", stats_data)->required();
  auto* split = corpus_cmd->add_subcommand("split", "Goal-disjoint train/val/test split");
  add_common(split, split_c);
  split->add_option("--data", split_data)->required();
  split->add_option("--out", split_out)->required();
  split->add_option("--ratios", split_ratios)->expected(3);
  auto* synth = corpus_cmd->add_subcommand("synth", "Write the synthetic corpus");
  add_common(synth, synth_c);
  synth->add_option("--out", synth_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", {{"kind", "usage"}, {"message", e.what()}}}}.dump() << std::endl;
    return 2;
  }

  try {
    if (*train || *resume) {
      const bool is_train = static_cast<bool>(*train);
      const Common& c = is_train ? train_c : resume_c;
      const json root = load_config(c);
      auto cfg = (root.contains("train") ? root.at("train") : root).get<train::TrainConfig>();
      if (c.seed) cfg.seed = *c.seed;
      const auto& steps = is_train ? train_steps : resume_steps;
      if (steps) cfg.steps = *steps;
      cfg.validate();
      const std::string& data = is_train ? train_data : resume_data;
      const bool synthetic = is_train ? train_synthetic : resume_synthetic;
      if (data.empty() == !synthetic) throw ConfigError("give exactly one of --data or --synthetic");
      std::vector<corpus::Article> articles;
      if (synthetic) {
        synthetic::SyntheticSpec spec;
        if (root.contains("synthetic")) spec = root.at("synthetic").get<synthetic::SyntheticSpec>();
        auto split_set = corpus::split_corpus(synthetic::generate_synthetic_corpus(spec, cfg.seed), {}, cfg.seed);
        articles = std::move(split_set.train);
      } else {
        articles = load_data(data);
      }
      if (cfg.embedders.empty() && root.contains("embedders")) cfg.embedders = root.at("embedders");
      auto encoder = embed::make_text_encoder(section(cfg.embedders, "text_encoder"));
      train::TrainOptions opts;
      opts.out_dir = is_train ? train_out : resume_out;
      opts.on_step = [](const train::StepRecord& r) {
        if (r.step % 100 == 0)
          std::cerr << json{{"step", r.step}, {"loss", r.loss}, {"grad_norm", r.grad_norm}}.dump() << std::endl;
      };
      auto result = is_train ? train::train(articles, cfg, *encoder, opts)
                             : train::resume(load_checkpoint(resume_ckpt), articles, cfg, *encoder, opts);
      const auto& log = result.log;
      json summary = {{"steps", result.meta.step}, {"out", opts.out_dir}, {"config_hash", result.model->hash()}};
      if (log.steps.size() >= 2) {
        const std::size_t w = std::min<std::size_t>(100, log.steps.size() / 2);
        summary["first_window_loss"] = log.mean_loss(0, w);
        summary["final_window_loss"] = log.mean_loss(log.steps.size() - w, w);
      }
      print(summary);
      return 0;
    }

    if (*evaluate) {
      const json config = load_config(eval_c);
      json emb = section(config, "embedders");
      if (!emb.contains("semantic")) emb["semantic"] = {{"kind", "oracle"}};
      if (!emb.contains("visual")) emb["visual"] = {{"kind", "pooled"}};
      const auto semantic = embed::make_semantic_embedder(emb.at("semantic"));
      const auto visual = embed::make_visual_embedder(emb.at("visual"));
      metrics::EvalOptions opts;
      opts.k = eval_k;
      opts.seed = eval_c.seed.value_or(0);
      opts.normalize_cic = eval_normalize;
      const auto report = metrics::evaluate(load_data(eval_gen), load_data(eval_ref), *semantic, *visual, opts);
      const json j = report;
      if (!eval_out.empty()) write_file_atomic(eval_out, j.dump(2) + "\n");
      if (!eval_store.empty()) {
        if (eval_id.empty()) eval_id = "eval-" + to_hex(fnv1a(j.dump()));
        service::Store(eval_store).put("eval_reports", eval_id, j.dump());
      }
      print(j);
      return 0;
    }

    if (*generate) return cmd_generate(gen_a, gen_c);

    if (*compare) {
      const auto page = metrics::render_comparison_page(instruct::read_article_bundle(cmp_a),
                                                        instruct::read_article_bundle(cmp_b), cmp_c.seed.value_or(0));
      write_file_atomic(cmp_out, page.html);
      print({{"out", cmp_out}, {"a_on_left", page.a_on_left}, {"missing_images", page.missing_images}});
      return 0;
    }

    if (*win) {
      const auto records = metrics::parse_annotations(read_file(win_ann));
      metrics::Assignment assignment;
      if (!win_assign.empty()) {
        const json j = json::parse(read_file(win_assign));
        assignment.method_x = j.at("method_x").get<std::string>();
        assignment.method_y = j.at("method_y").get<std::string>();
        assignment.method_of_a = j.at("method_of_a").get<std::map<std::string, std::string>>();
      } else {
        assignment.method_x = win_x;
        assignment.method_y = win_y;
        for (const auto& r : records) assignment.method_of_a[r.goal_id] = win_x;
      }
      print(metrics::to_json(metrics::win_rate(records, assignment)));
      return 0;
    }

    if (*serve) {
      const json config = load_config(serve_c);
      service::ServiceConfig sc;
      sc.store_root = serve_store;
      sc.stub = serve_a.stub;
      sc.default_mode = instruct::parse_mode(serve_a.mode);
      sc.generation = generation_config(config, serve_a, serve_c.seed);
      if (serve_a.stub && !serve_a.sampler_steps && !config.contains("generation")) sc.generation.sampler.steps = 10;
      sc.queue_depth = serve_queue;
      sc.sync_budget_s = serve_budget;
      sc.llm_retries = config.value("llm_retries", 2);

      instruct::ModelBundle bundle;
      std::shared_ptr<instruct::LlmClient> llm;
      if (serve_a.stub) {
        auto assets = service::make_stub_assets(serve_canned.empty() ? json::object() : json::parse(read_file(serve_canned)));
        bundle = assets.bundle;
        llm = assets.llm;
      }
      GenerateArgs model_args = serve_a;
      model_args.stub = false;
      auto extra = make_bundle(model_args, config);
      if (extra.stacked) bundle.stacked = extra.stacked;
      if (extra.frozen) bundle.frozen = extra.frozen;
      if (extra.finetuned) bundle.finetuned = extra.finetuned;
      if (extra.retrieval) bundle.retrieval = extra.retrieval;
      if (!llm) llm = make_llm(serve_a.llm, config);

      service::Api api(sc, std::move(bundle), llm);
      service::HttpServer server(api, serve_static);
      std::cerr << json{{"listening", serve_host + ":" + std::to_string(serve_port)}, {"stub", sc.stub}}.dump()
                << std::endl;
      server.listen(serve_host, serve_port);
      return 0;
    }

    if (*stats) {
      const auto h = corpus::corpus_stats(load_data(stats_data));
      json counts = json::object();
      for (const auto& [n, k] : h.counts) counts[std::to_string(n)] = k;
      print({{"total", h.total}, {"counts", counts}, {"mean_steps", h.mean_steps()}});
      return 0;
    }

    if (*split) {
      const auto s = corpus::split_corpus(load_data(split_data), {split_ratios[0], split_ratios[1], split_ratios[2]},
                                          split_c.seed.value_or(0));
      corpus::write_corpus(s.train, fs::path(split_out) / "train");
      corpus::write_corpus(s.val, fs::path(split_out) / "val");
      corpus::write_corpus(s.test, fs::path(split_out) / "test");
      print({{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}, {"seed", s.seed}});
      return 0;
    }

    if (*synth) {
      const json config = load_config(synth_c);
      synthetic::SyntheticSpec spec;
      if (config.contains("synthetic")) spec = config.at("synthetic").get<synthetic::SyntheticSpec>();
      const auto articles = synthetic::generate_synthetic_corpus(spec, synth_c.seed.value_or(0));
      corpus::write_corpus(articles, synth_out);
      print({{"articles", articles.size()}, {"out", synth_out}});
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << std::endl;
    return 1;
  } catch (const json::exception& e) {
    std::cerr << json{{"error", {{"kind", "config_error"}, {"message", e.what()}}}}.dump() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << std::endl;
    return 1;
  }
  return 0;
}
