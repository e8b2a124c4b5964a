#include <algorithm>
#include <filesystem>

#include "doctest.h"
#include "stackdiff/image.hpp"
#include "stackdiff/instructor.hpp"
#include "stackdiff/synthetic.hpp"
#include "stackdiff/util.hpp"
#include "test_support.hpp"

using namespace stackdiff;
using namespace stackdiff::instruct;
using nlohmann::json;

namespace {

std::vector<json> transcripts() {
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(testing::data_path("golden/transcripts")))
    if (e.path().extension() == ".json") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<json> out;
  for (const auto& p : paths) out.push_back(json::parse(read_file(p)));
  return out;
}

DiffusionModel tiny_model(int n_steps) {
  DiffusionModel m;
  auto cfg = testing::tiny_denoiser_config(12, 8);
  m.denoiser = std::make_shared<Denoiser>(cfg);
  m.encoder = std::make_shared<embed::HashTextEncoder>(8);
  m.codec = CodecConfig{};
  m.schedule = diffusion::rescale_zero_terminal_snr(diffusion::make_schedule(diffusion::ScheduleKind::Linear, 10));
  m.n_steps = n_steps;
  m.image_size = 32;
  return m;
}

GenerationConfig tiny_generation(std::uint64_t seed = 5) {
  GenerationConfig g;
  g.sampler.steps = 10;
  g.sampler.seed = seed;
  g.sampler.guidance_scale = 2.0;
  return g;
}

ParsedPlan make_plan(std::string goal, std::vector<std::string> steps) {
  ParsedPlan p;
  p.goal = std::move(goal);
  p.steps = std::move(steps);
  return p;
}

}  // namespace

TEST_CASE("prompt template is byte exact") {
  auto stored = read_file(testing::data_path("prompt_template.txt"));
  REQUIRE(!stored.empty());
  CHECK(stored.back() == '\n');
  stored.pop_back();
  CHECK(prompt_template() == stored);
  CHECK(render_prompt("What should I pack for a hike?") == "What should I pack for a hike? " + format_instruction());
  CHECK(render_prompt("  make colored ice ") == "How can I make colored ice? " + format_instruction());
  CHECK(render_prompt("Fold a paper crane").rfind("How can I fold a paper crane? ", 0) == 0);
  CHECK(render_prompt("DIY a shelf").rfind("How can I DIY a shelf? ", 0) == 0);
  CHECK(render_prompt("make tea", 3).find("at most 3 steps.") != std::string::npos);
  CHECK(is_bare_goal("make tea"));
  CHECK_FALSE(is_bare_goal("Make tea."));
  CHECK_THROWS_AS(render_prompt("   "), Error);
  CHECK_THROWS_AS(render_prompt("x", 0), Error);
}

TEST_CASE("golden transcripts replay and round trip") {
  const auto all = transcripts();
  REQUIRE(all.size() == 10);
  for (const auto& t : all) {
    INFO(t.at("name").get<std::string>());
    const int max_steps = t.at("max_steps");
    const auto prompts = t.at("prompts").get<std::vector<std::string>>();
    const auto responses = t.at("responses").get<std::vector<std::string>>();
    REQUIRE(prompts.size() == responses.size());

    std::string first;
    if (t.contains("previous")) {
      first = render_follow_up_prompt(t.at("previous").get<ParsedPlan>(), t.at("input").get<std::string>(), max_steps);
    } else {
      first = render_prompt(t.at("input").get<std::string>(), max_steps);
    }
    CHECK(first == prompts[0]);
    for (std::size_t i = 1; i < prompts.size(); ++i) CHECK(prompts[i] == prompts[0] + kFormatReminder);

    CannedLlmClient client;
    for (std::size_t i = 0; i < prompts.size(); ++i) client.add(prompts[i], responses[i]);
    const auto got = plan_from_prompt(first, client, t.at("retries"), max_steps);
    const auto& want = t.at("expected");
    CHECK(got.goal == want.at("goal").get<std::string>());
    CHECK(got.steps == want.at("steps").get<std::vector<std::string>>());
    CHECK(got.truncated == want.at("truncated").get<bool>());
    CHECK(got.raw == responses.back());
    CHECK(client.calls() == responses.size());

    auto again = parse_plan(format_plan(got), max_steps);
    CHECK(again.goal == got.goal);
    CHECK(again.steps == got.steps);
    CHECK_FALSE(again.truncated);
    json j = got;
    CHECK(j.get<ParsedPlan>() == got);
  }
}

TEST_CASE("parsing rejects responses without a goal or steps") {
  CHECK_THROWS_AS(parse_plan("1. do a thing"), PlanParseError);
  CHECK_THROWS_AS(parse_plan("Goal: nothing to do"), PlanParseError);
  CHECK_THROWS_AS(parse_plan(""), PlanParseError);
  try {
    parse_plan("just chatting");
    FAIL("expected a parse error");
  } catch (const PlanParseError& e) {
    CHECK(e.raw() == "just chatting");
  }
  // Numbered lines before the goal are preamble.
  auto p = parse_plan("1. ignored\nGoal: G\n1. kept");
  CHECK(p.steps == std::vector<std::string>{"kept"});
}

TEST_CASE("retries stop after the configured attempts") {
  const auto prompt = render_prompt("make colored ice");
  CannedLlmClient client;
  client.add(prompt, "no plan here");
  client.add(prompt + kFormatReminder, "still no plan");
  try {
    plan_from_prompt(prompt, client, 0, 6);
    FAIL("expected a plan error");
  } catch (const PlanError& e) {
    CHECK(e.attempts() == std::vector<std::string>{"no plan here"});
  }
  CHECK(client.calls() == 1);
  try {
    plan_from_prompt(prompt, client, 2, 6);
    FAIL("expected a plan error");
  } catch (const PlanError& e) {
    CHECK(e.attempts().size() == 3);
    CHECK(e.attempts()[1] == "still no plan");
  }
  CHECK(client.calls() == 4);

  CannedLlmClient empty;
  CHECK_THROWS_AS(plan_from_prompt(prompt, empty, 0, 6), NotFoundError);
}

TEST_CASE("canned client serves repeated keys in order") {
  CannedLlmClient c;
  c.load({{prompt_key("p"), json::array({"a", "b"})}, {prompt_key("q"), "z"}});
  CHECK(c.complete({"p"}).text == "a");
  CHECK(c.complete({"p"}).text == "b");
  CHECK(c.complete({"p"}).text == "b");
  CHECK(c.complete({"q"}).text == "z");
  auto fallback = std::make_shared<CannedLlmClient>();
  fallback->add("r", "from fallback");
  CannedLlmClient chained(fallback);
  CHECK(chained.complete({"r"}).text == "from fallback");
}

TEST_CASE("synthetic client plans the fill sequence") {
  synthetic::SyntheticSpec spec;
  SyntheticLlmClient client(spec);
  synthetic::Generator gen(spec);
  const auto& v = gen.vocabulary();
  const auto p = plan("make a " + v.colors[1].name + " " + v.shapes[2], client, 0, static_cast<int>(v.levels.size()));
  CHECK(p.goal == gen.goal_text(1, 2));
  // The spec's N highest fill levels, lowest first.
  const int levels = static_cast<int>(v.levels.size());
  REQUIRE(static_cast<int>(p.steps.size()) == spec.n_steps);
  for (int i = 0; i < spec.n_steps; ++i) CHECK(p.steps[i] == gen.step_text(levels - spec.n_steps + i));
  const auto short_plan = plan("anything", client, 0, 2);
  CHECK(short_plan.steps.size() == 2);
  CHECK(short_plan.goal == gen.goal_text(0, 0));
}

TEST_CASE("stacked generation is reproducible and drops dummy bands") {
  auto model = tiny_model(3);
  auto plan2 = make_plan("red circle", {"fill the bottom", "fill the top"});
  auto a = generate_stacked(plan2, model, tiny_generation());
  auto b = generate_stacked(plan2, model, tiny_generation());
  REQUIRE(a.images.size() == 2);
  CHECK(a.images[0].width == 32);
  CHECK(a.images[0].height == 32);
  CHECK(a.images == b.images);
  CHECK(a.band_deviation.size() == 3);
  CHECK(a.trimmed == 1);
  CHECK(a.mode == Mode::Stacked);
  auto c = generate_stacked(plan2, model, tiny_generation(6));
  CHECK(c.images != a.images);
  CHECK_THROWS_AS(generate_stacked(make_plan("g", {"a", "b", "c", "d"}), model, tiny_generation()), Error);
  CHECK_THROWS_AS(generate_stacked(make_plan("g", {}), model, tiny_generation()), Error);
}

TEST_CASE("independent generation samples each step on its own") {
  auto model = tiny_model(3);
  auto p = make_plan("blue square", {"one", "two"});
  const auto gen = tiny_generation(9);
  auto out = generate_independent(p, model, gen);
  REQUIRE(out.images.size() == 2);
  const PatchCodec codec(model.codec);
  for (std::size_t i = 0; i < 2; ++i) {
    auto sampler = gen.sampler;
    sampler.seed = derive_seed(gen.sampler.seed, {i + 1});
    CHECK(out.details.at("step_seeds")[i].get<std::uint64_t>() == sampler.seed);
    std::vector<std::string> steps{p.steps[i], corpus::kDummyStepText, corpus::kDummyStepText};
    const auto cond = condition_texts(*model.encoder, p.goal, steps, model.conditioning);
    const auto uncond = null_conditioning(*model.encoder, model.conditioning);
    const auto z = diffusion::sample(*model.denoiser, cond, uncond, model.schedule, model.parameterization, sampler, 12, 4,
                                     4, 3);
    CHECK(out.images[i] == codec.decode(untile(z, 3).front()));
  }
  // Plans longer than N are fine when every step is sampled alone.
  CHECK(generate_independent(make_plan("g", {"a", "b", "c", "d"}), model, gen).images.size() == 4);
}

TEST_CASE("generate_article dispatches by mode") {
  ModelBundle bundle;
  bundle.stacked = tiny_model(2);
  auto p = make_plan("green triangle", {"a", "b"});
  auto gen = tiny_generation();
  auto fin = generate_article(p, Mode::IndependentFinetuned, bundle, gen);
  CHECK(fin.details.at("fallback_to_stacked") == true);
  CHECK(fin.images == generate_independent(p, *bundle.stacked, gen).images);

  synthetic::SyntheticSpec spec;
  spec.articles = 6;
  auto arts = synthetic::generate_synthetic_corpus(spec, 1);
  auto oracle = std::make_shared<embed::OracleSemanticEmbedder>(spec);
  bundle.retrieval = std::make_shared<RetrievalIndex>(arts, oracle);
  auto goal = generate_article(make_plan(arts[3].goal, {"x"}), Mode::RetrievalGoal, bundle, gen);
  CHECK(goal.goal == arts[3].goal);
  CHECK(goal.steps == arts[3].steps);
  CHECK(goal.images == arts[3].images);
  auto step = generate_article(make_plan(arts[2].goal, {arts[2].steps[1]}), Mode::RetrievalStep, bundle, gen);
  REQUIRE(step.images.size() == 1);
  CHECK(step.images[0] == arts[2].images[1]);

  ModelBundle none;
  CHECK_THROWS_AS(generate_article(p, Mode::Stacked, none, gen), ConfigError);
  CHECK_THROWS_AS(generate_article(p, Mode::RetrievalGoal, none, gen), ConfigError);
  CHECK(parse_mode(to_string(Mode::RetrievalStep)) == Mode::RetrievalStep);
  CHECK_THROWS(parse_mode("nope"));
}

TEST_CASE("sessions append turns and keep earlier ones") {
  ModelBundle bundle;
  bundle.stacked = tiny_model(3);
  SyntheticLlmClient client;
  auto s = start_session("s1", "make a red circle", client, Mode::Stacked, bundle, tiny_generation());
  REQUIRE(s.turns.size() == 1);
  CHECK(s.turns[0].prompt == render_prompt("make a red circle", 3));
  const auto first = s.turns[0].article.images;
  follow_up(s, "now do it in blue", client, Mode::Stacked, bundle, tiny_generation());
  REQUIRE(s.turns.size() == 2);
  CHECK(s.turns[0].article.images == first);
  CHECK(s.turns[1].prompt == render_follow_up_prompt(s.turns[0].plan, "now do it in blue", 3));
  CHECK(s.created_at.size() == 20);
  CHECK_THROWS_AS(follow_up(s, "  ", client, Mode::Stacked, bundle, tiny_generation()), Error);
  Session blank;
  CHECK_THROWS_AS(follow_up(blank, "x", client, Mode::Stacked, bundle, tiny_generation()), Error);
}

TEST_CASE("html page and article bundle") {
  GeneratedArticle a;
  a.goal = "Make <ice>";
  a.steps = {"Pour & wait", "Freeze", "Serve"};
  a.images = {Image(8, 8, 10), Image(8, 8, 20), Image(8, 8, 30)};
  const auto html = render_article_html(a, {"a.png", "b.png", "c.png"});
  CHECK(html == render_article_html(a, {"a.png", "b.png", "c.png"}));
  std::size_t blocks = 0;
  for (auto pos = html.find("<li class=\"step\">"); pos != std::string::npos; pos = html.find("<li class=\"step\">", pos + 1))
    ++blocks;
  CHECK(blocks == 3);
  CHECK(html.find("Make &lt;ice&gt;") != std::string::npos);
  CHECK(html.find("Pour &amp; wait") != std::string::npos);
  CHECK_THROWS_AS(render_article_html(a, {"a.png"}), Error);

  testing::TempDir dir("bundle");
  const std::filesystem::path root = dir.path();
  CHECK_THROWS_AS(render_article_html(a, {"a.png", "b.png", "c.png"}, &root), NotFoundError);

  write_article_bundle(a, make_plan(a.goal, a.steps), dir / "article");
  CHECK(std::filesystem::exists(dir / "article/index.html"));
  auto back = read_article_bundle(dir / "article");
  CHECK(back.goal == a.goal);
  CHECK(back.steps == a.steps);
  CHECK(back.images == a.images);
  std::filesystem::remove(dir / "article/step_02.png");
  CHECK(read_article_bundle(dir / "article").images[1].empty());
  CHECK_THROWS_AS(read_article_bundle(dir / "missing"), NotFoundError);
}
