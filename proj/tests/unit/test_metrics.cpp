#include <cmath>
#include <random>

#include "doctest.h"
#include "stackdiff/error.hpp"
#include "stackdiff/metrics.hpp"
#include "stackdiff/synthetic.hpp"
#include "test_support.hpp"

using namespace stackdiff;
using namespace stackdiff::metrics;

namespace {

embed::SemanticEmbedding unit(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x[i++] = d;
  return embed::make_semantic(x, embed::Modality::Text);
}

embed::SemanticEmbedding random_unit(Rng& rng, int dim = 16) {
  std::normal_distribution<double> n;
  Vector x(dim);
  for (int i = 0; i < dim; ++i) x[i] = n(rng);
  return embed::make_semantic(x, embed::Modality::Text);
}

Vector vec(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x[i++] = d;
  return x;
}

std::vector<AnnotationRecord> votes(const std::string& goal, std::initializer_list<Choice> choices) {
  std::vector<AnnotationRecord> out;
  int k = 0;
  for (auto c : choices) out.push_back({goal, "ann" + std::to_string(k++), c});
  return out;
}

void append(std::vector<AnnotationRecord>& dst, const std::vector<AnnotationRecord>& src) { dst.insert(dst.end(), src.begin(), src.end()); }

}  // namespace

TEST_CASE("mcq scoring uses the strict maximum with lowest-index ties") {
  auto probe = unit({1, 0});
  CHECK(score_mcq({probe, {unit({1, 0}), unit({0, 1})}, 0}));
  CHECK_FALSE(score_mcq({probe, {unit({1, 0}), unit({0, 1})}, 1}));
  CHECK(score_mcq({probe, {unit({1, 0}), unit({1, 0})}, 0}));
  CHECK_FALSE(score_mcq({probe, {unit({1, 0}), unit({1, 0})}, 1}));
  CHECK_THROWS(score_mcq({probe, {unit({1, 0})}, 0}));
  CHECK_THROWS(score_mcq({probe, {unit({1, 0}), unit({0, 1})}, 2}));
}

TEST_CASE("goal faithfulness sits at chance for random embeddings") {
  Rng rng(1);
  std::vector<embed::SemanticEmbedding> pool;
  for (int i = 0; i < 50; ++i) pool.push_back(random_unit(rng));
  std::vector<std::pair<embed::SemanticEmbedding, std::size_t>> probes;
  for (int i = 0; i < 10000; ++i) probes.push_back({random_unit(rng), static_cast<std::size_t>(i % 50)});
  auto t = goal_faithfulness(probes, pool, 4, 7);
  CHECK(t.total == 10000);
  CHECK(std::abs(t.accuracy() - 0.25) <= 0.03);
  CHECK(goal_faithfulness(probes, pool, 4, 7).correct == t.correct);

  std::vector<std::pair<embed::SemanticEmbedding, std::size_t>> exact;
  for (std::size_t i = 0; i < pool.size(); ++i) exact.push_back({pool[i], i});
  CHECK(goal_faithfulness(exact, pool, 4, 7).accuracy() == 1.0);
  CHECK_THROWS(goal_faithfulness(exact, std::vector<embed::SemanticEmbedding>(pool.begin(), pool.begin() + 3), 4, 7));
}

TEST_CASE("the correct goal lands in every position") {
  // A constant probe equally similar to everything only scores when the correct goal comes first.
  std::vector<embed::SemanticEmbedding> pool(8, unit({1, 0}));
  std::vector<std::pair<embed::SemanticEmbedding, std::size_t>> probes;
  for (int i = 0; i < 10000; ++i) probes.push_back({unit({1, 0}), static_cast<std::size_t>(i % 8)});
  CHECK(std::abs(goal_faithfulness(probes, pool, 4, 3).accuracy() - 0.25) <= 0.03);
}

TEST_CASE("oracle embedder is perfect on the synthetic corpus") {
  synthetic::SyntheticSpec spec;
  spec.articles = 40;
  auto arts = synthetic::generate_synthetic_corpus(spec, 9);
  embed::OracleSemanticEmbedder oracle(spec);
  std::vector<GoalImage> items;
  std::vector<std::string> pool;
  std::uint64_t s = 0;
  for (const auto& a : arts) {
    pool.push_back(a.goal);
    for (const auto& img : a.images) items.push_back({&img, a.goal, s++});
  }
  CHECK(goal_faithfulness(items, pool, oracle, 4, 1).accuracy() == 1.0);
  auto sf = step_faithfulness(arts, oracle);
  CHECK(sf.overall.accuracy() == 1.0);
  CHECK(sf.overall.total == 120);
  CHECK(sf.by_step_count.at(3).total == 120);
}

TEST_CASE("step faithfulness at chance and skips singletons") {
  embed::HashSemanticEmbedder h(32, 5);
  std::vector<corpus::Article> arts;
  for (int i = 0; i < 2500; ++i) {
    corpus::Article a;
    for (int k = 0; k < 4; ++k) {
      a.steps.push_back("step " + std::to_string(i) + "-" + std::to_string(k));
      a.images.push_back(Image(2, 2, static_cast<std::uint8_t>((i * 4 + k) % 251)));
      a.images.back().set(0, 0, static_cast<std::uint8_t>(i % 256), static_cast<std::uint8_t>(i / 256), static_cast<std::uint8_t>(k));
    }
    arts.push_back(a);
  }
  corpus::Article single;
  single.steps = {"alone"};
  single.images = {Image(2, 2)};
  arts.push_back(single);
  auto sf = step_faithfulness(arts, h);
  CHECK(sf.overall.total == 10000);
  CHECK(sf.skipped_articles == 1);
  CHECK(std::abs(sf.overall.accuracy() - 0.25) <= 0.03);
}

TEST_CASE("cross-image consistency fixtures") {
  CHECK(cross_image_consistency(std::vector<std::vector<Vector>>{{vec({0, 0}), vec({3, 4})}}).mean == 5.0);
  auto three = cross_image_consistency(std::vector<std::vector<Vector>>{{vec({0, 0}), vec({3, 4}), vec({6, 8})}});
  CHECK(three.mean == doctest::Approx(20.0 / 3.0));
  auto mixed = cross_image_consistency(std::vector<std::vector<Vector>>{{vec({0, 0}), vec({3, 4})}, {vec({1, 1}), vec({1, 1})}, {vec({9, 9})}});
  CHECK(mixed.mean == 2.5);
  CHECK(mixed.articles == 2);
  CHECK(mixed.skipped_articles == 1);
  auto normalized = cross_image_consistency(std::vector<std::vector<Vector>>{{vec({2, 0}), vec({0, 5})}}, true);
  CHECK(normalized.mean == doctest::Approx(std::sqrt(2.0)));

  embed::PooledPixelEmbedder p(2);
  CHECK(cross_image_consistency(std::vector<std::vector<Image>>{{Image(4, 4, 7), Image(4, 4, 7)}}, p).mean == 0.0);
}

TEST_CASE("frechet distance: self, closed form, analytic 2x2") {
  auto xs = testing::frechet_samples(3, 200, 6, 0.5);
  CHECK(fid(xs, xs) <= 1e-6);

  const int d = 5;
  Vector mu1 = Vector::Zero(d), mu2 = Vector::LinSpaced(d, 1.0, 2.0);
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  CHECK(frechet_distance(mu1, I, mu2, 4.0 * I) == doctest::Approx(mu2.squaredNorm() + d).epsilon(1e-12));

  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 0, 0, 4;
  b << 2, 1, 1, 2;
  // For 2x2 PSD M: tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)).
  const double tr_sqrt = std::sqrt(10.0 + 2.0 * std::sqrt(12.0));
  CHECK(frechet_distance(Vector::Zero(2), a, Vector::Zero(2), b) == doctest::Approx(5.0 + 4.0 - 2.0 * tr_sqrt).epsilon(1e-12));

  // Equal covariance sigma^2 I by construction: the second set is the first shifted.
  Rng rng(4);
  std::normal_distribution<double> n(0.0, 1.5);
  std::vector<Vector> ref, gen;
  const Vector shift = vec({0.5, -1.0, 2.0, 0.0, 0.25, 1.0, -0.5, 0.75});
  for (int i = 0; i < 5000; ++i) {
    Vector v(8);
    for (int k = 0; k < 8; ++k) v[k] = n(rng);
    ref.push_back(v);
    gen.push_back(v + shift);
  }
  CHECK(std::abs(fid(gen, ref) - shift.squaredNorm()) <= 1e-4);
  CHECK(frechet_distance(Vector::Zero(8), 2.25 * Eigen::MatrixXd::Identity(8, 8), shift, 2.25 * Eigen::MatrixXd::Identity(8, 8)) ==
        doctest::Approx(shift.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("frechet distance agrees with the oracle script") {
  for (const auto& k : testing::load_json("oracles/frechet.json").at("cases")) {
    const int n = k.at("n"), d = k.at("d");
    auto x = testing::frechet_samples(k.at("seed_a"), n, d, 0.0);
    auto y = testing::frechet_samples(k.at("seed_b"), n, d, k.at("shift"));
    const auto first = k.at("first").get<std::vector<double>>();
    for (int j = 0; j < 4; ++j) CHECK(x[0][j] == first[static_cast<std::size_t>(j)]);
    CHECK(std::abs(fid(x, y) - k.at("fid").get<double>()) <= 1e-4);
  }
}

TEST_CASE("singular covariances are jittered, not rejected") {
  std::vector<Vector> flat{vec({1, 0}), vec({2, 0}), vec({3, 0})};
  std::vector<Vector> other{vec({1, 1}), vec({2, 1}), vec({3, 1})};
  const double v = fid(flat, other);
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  CHECK_THROWS_AS(fid(std::vector<Vector>{vec({1, 2})}, other), Error);
  CHECK_THROWS_AS(fid(flat, std::vector<Vector>{vec({1, 2, 3}), vec({1, 2, 4})}), ShapeError);
}

TEST_CASE("comparison pages randomize sides by seed") {
  corpus::Article a, b;
  a.goal = "make <ice>";
  a.steps = {"fill", "freeze"};
  a.images = {Image(4, 4, 10), Image{}};
  b.goal = "bake bread";
  b.steps = {"mix", "bake"};
  b.images = {Image(4, 4, 20), Image(4, 4, 30)};
  auto p = render_comparison_page(a, b, 5);
  CHECK(render_comparison_page(a, b, 5).html == p.html);
  CHECK(p.missing_images == 1);
  CHECK(p.html.find("make &lt;ice&gt;") != std::string::npos);
  CHECK(p.html.find(kComparisonCriteria) != std::string::npos);
  CHECK(p.html.find("justification") != std::string::npos);
  std::size_t rows = 0;
  for (std::size_t pos = 0; (pos = p.html.find("class=\"step-row\"", pos)) != std::string::npos; ++pos) ++rows;
  CHECK(rows == 4);
  const auto first_goal = p.html.find("make &lt;ice&gt;"), second_goal = p.html.find("bake bread");
  CHECK((first_goal < second_goal) == p.a_on_left);

  int left = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) left += render_comparison_page(a, b, s).a_on_left;
  CHECK(std::abs(left - 500) <= 50);
}

TEST_CASE("win rate: unanimous, 70/30, ties removed") {
  Assignment asg{"X", "Y", {}};
  std::vector<AnnotationRecord> all;
  for (int g = 0; g < 10; ++g) {
    const auto id = "g" + std::to_string(g);
    asg.method_of_a[id] = g % 2 ? "X" : "Y";
    const Choice x = g % 2 ? Choice::A : Choice::B;
    append(all, votes(id, {x, x, x}));
  }
  auto r = win_rate(all, asg);
  CHECK(*r.win_rate.at("X") == 100.0);
  CHECK(*r.win_rate.at("Y") == 0.0);

  std::vector<AnnotationRecord> split;
  for (int g = 0; g < 10; ++g) {
    const auto id = "g" + std::to_string(g);
    const bool x_is_a = asg.method_of_a[id] == "X";
    const Choice x = x_is_a ? Choice::A : Choice::B, y = x_is_a ? Choice::B : Choice::A;
    append(split, g < 7 ? votes(id, {x, y, x}) : votes(id, {y, Choice::Tie, y}));
  }
  auto s = win_rate(split, asg);
  CHECK(*s.win_rate.at("X") == 70.0);
  CHECK(*s.win_rate.at("Y") == 30.0);
  CHECK(s.tied == 0);
  CHECK(s.annotators_per_goal == 3);

  auto with_ties = split;
  asg.method_of_a["t1"] = "X";
  asg.method_of_a["t2"] = "Y";
  append(with_ties, votes("t1", {Choice::A, Choice::B, Choice::Tie}));
  append(with_ties, votes("t2", {Choice::Tie, Choice::Tie, Choice::A}));
  auto t = win_rate(with_ties, asg);
  CHECK(t.tied == 2);
  CHECK(t.goals == 12);
  CHECK(*t.win_rate.at("X") == 70.0);

  Assignment two{"X", "Y", {{"a", "X"}, {"b", "X"}}};
  std::vector<AnnotationRecord> even;
  append(even, votes("a", {Choice::A, Choice::B}));
  append(even, votes("b", {Choice::A, Choice::A}));
  auto e = win_rate(even, two);
  CHECK(e.tied == 1);
  CHECK(*e.win_rate.at("X") == 100.0);

  Assignment only_tie{"X", "Y", {{"a", "X"}}};
  CHECK_FALSE(win_rate(votes("a", {Choice::Tie, Choice::Tie, Choice::Tie}), only_tie).win_rate.at("X").has_value());
}

TEST_CASE("win rate input errors") {
  Assignment asg{"X", "Y", {{"a", "X"}, {"b", "Y"}}};
  std::vector<AnnotationRecord> uneven;
  append(uneven, votes("a", {Choice::A, Choice::A, Choice::A}));
  append(uneven, votes("b", {Choice::A, Choice::A}));
  CHECK_THROWS_AS(win_rate(uneven, asg), Error);
  auto dup = votes("a", {Choice::A, Choice::A});
  dup[1].annotator_id = dup[0].annotator_id;
  CHECK_THROWS_AS(win_rate(dup, asg), Error);
  CHECK_THROWS_AS(win_rate(votes("c", {Choice::A}), asg), Error);
  CHECK_THROWS_AS(win_rate({}, Assignment{"X", "X", {}}), Error);
}

TEST_CASE("annotation files round trip") {
  std::vector<AnnotationRecord> recs{{"g,1", "ann \"q\"", Choice::A}, {"g2", "b", Choice::Tie}};
  auto text = format_annotations(recs);
  auto back = parse_annotations(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].goal_id == "g,1");
  CHECK(back[0].annotator_id == "ann \"q\"");
  CHECK(back[1].choice == Choice::Tie);
  CHECK(parse_annotations("choice,goal_id,annotator_id\nB,x,y\n")[0].choice == Choice::B);
  CHECK_THROWS_AS(parse_annotations("goal_id,choice\n"), ParseError);
  try {
    parse_annotations("goal_id,annotator_id,choice\nx,y,maybe\n");
    FAIL("expected parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("evaluate on the reference itself") {
  synthetic::SyntheticSpec spec;
  spec.articles = 30;
  auto arts = synthetic::generate_synthetic_corpus(spec, 2);
  embed::OracleSemanticEmbedder oracle(spec);
  embed::PooledPixelEmbedder visual(4);
  auto r = evaluate(arts, arts, oracle, visual, {4, 11, false});
  CHECK(r.gf_accuracy() == 1.0);
  CHECK(r.sf_accuracy() == 1.0);
  CHECK(r.fid <= 1e-6);
  std::vector<std::vector<Image>> imgs;
  for (const auto& a : arts) imgs.push_back(a.images);
  CHECK(r.cic_mean == cross_image_consistency(imgs, visual).mean);
  CHECK(r.generated_images == 90);
  CHECK(r.fingerprint.at("seed") == 11);

  nlohmann::json j = r;
  auto again = evaluate(arts, arts, oracle, visual, {4, 11, false});
  CHECK(nlohmann::json(again) == j);
  CHECK(nlohmann::json(j.get<EvalReport>()) == j);
}
