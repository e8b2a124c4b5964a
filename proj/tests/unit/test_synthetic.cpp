#include <set>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "stackdiff/error.hpp"
#include "stackdiff/synthetic.hpp"

using namespace stackdiff;
using namespace stackdiff::synthetic;

TEST_CASE("toy corpus has the requested size") {
  SyntheticSpec spec;
  auto arts = generate_synthetic_corpus(spec, 1);
  CHECK(arts.size() == 256);
  std::size_t images = 0;
  for (const auto& a : arts) {
    CHECK(a.steps.size() == 3);
    CHECK(a.images.size() == a.steps.size());
    for (const auto& img : a.images) {
      CHECK(img.width == 48);
      CHECK(img.height == 48);
    }
    images += a.images.size();
  }
  CHECK(images == 768);
}

TEST_CASE("same seed gives bit-identical corpora") {
  SyntheticSpec spec;
  spec.articles = 20;
  auto a = generate_synthetic_corpus(spec, 3);
  auto b = generate_synthetic_corpus(spec, 3);
  auto c = generate_synthetic_corpus(spec, 4);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].goal == b[i].goal);
    CHECK(a[i].steps == b[i].steps);
    CHECK(a[i].images == b[i].images);
    any_diff = any_diff || a[i].goal != c[i].goal || a[i].steps != c[i].steps;
  }
  CHECK(any_diff);
}

TEST_CASE("goal colour changes only the shape's colours") {
  Generator gen(SyntheticSpec{});
  const auto& v = gen.vocabulary();
  int red = 0, blue = 0, circle = 0;
  for (std::size_t i = 0; i < v.colors.size(); ++i) {
    if (v.colors[i].name == "red") red = static_cast<int>(i);
    if (v.colors[i].name == "blue") blue = static_cast<int>(i);
  }
  CHECK(gen.goal_text(red, circle) == "red circle");
  const auto r = gen.render({red, circle, 1});
  const auto b = gen.render({blue, circle, 1});
  std::array<double, 3> mean_r{}, mean_b{};
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      const bool bg_r = r.at(x, y, 0) == kBackground[0] && r.at(x, y, 1) == kBackground[1] && r.at(x, y, 2) == kBackground[2];
      const bool bg_b = b.at(x, y, 0) == kBackground[0] && b.at(x, y, 1) == kBackground[1] && b.at(x, y, 2) == kBackground[2];
      CHECK(bg_r == bg_b);
      for (int c = 0; c < 3; ++c) {
        mean_r[static_cast<std::size_t>(c)] += r.at(x, y, c);
        mean_b[static_cast<std::size_t>(c)] += b.at(x, y, c);
      }
    }
  CHECK(mean_r[0] > mean_b[0]);
  CHECK(mean_r[2] < mean_b[2]);
}

TEST_CASE("fill level is visible and classifiable") {
  SyntheticSpec spec;
  Generator gen(spec);
  const auto& v = gen.vocabulary();
  for (int c = 0; c < static_cast<int>(v.colors.size()); ++c)
    for (int s = 0; s < static_cast<int>(v.shapes.size()); ++s) {
      std::set<std::vector<std::uint8_t>> distinct;
      for (int l = 0; l < static_cast<int>(v.levels.size()); ++l) {
        Attributes a{c, s, l};
        const auto img = gen.render(a);
        distinct.insert(img.pixels);
        CHECK(gen.classify(img) == a);
      }
      CHECK(distinct.size() == v.levels.size());
    }
}

TEST_CASE("keyword parsing prefers the longest match") {
  Generator gen(SyntheticSpec{});
  CHECK(gen.parse_level("fill three quarters of it") == 2);
  CHECK(gen.parse_level("fill the bottom quarter") == 0);
  CHECK(gen.parse_level("nothing here") == std::nullopt);
  CHECK(gen.parse_color("A Green diamond") == 3);
  CHECK(gen.parse_shape("A Green diamond") == 3);
}

TEST_CASE("variable length corpora respect min_steps") {
  SyntheticSpec spec;
  spec.articles = 64;
  spec.n_steps = 4;
  spec.min_steps = 2;
  std::set<std::size_t> lengths;
  for (const auto& a : generate_synthetic_corpus(spec, 2)) {
    CHECK(a.steps.size() >= 2);
    CHECK(a.steps.size() <= 4);
    lengths.insert(a.steps.size());
  }
  CHECK(lengths.size() == 3);
}

TEST_CASE("invalid specs are rejected") {
  SyntheticSpec s;
  s.n_steps = 5;
  CHECK_THROWS_AS(Generator{s}, ConfigError);
  s = {};
  s.block = 5;
  CHECK_THROWS_AS(Generator{s}, ConfigError);
  s = {};
  s.colors = {"mauve"};
  CHECK_THROWS_AS(Generator{s}, ConfigError);
  s = {};
  s.articles = 0;
  CHECK_THROWS_AS(Generator{s}, ConfigError);
}

TEST_CASE("spec json round trip") {
  SyntheticSpec s;
  s.articles = 12;
  s.colors = {"red", "blue"};
  s.min_steps = 1;
  nlohmann::json j = s;
  auto back = j.get<SyntheticSpec>();
  CHECK(back.articles == 12);
  CHECK(back.colors == s.colors);
  CHECK(back.min_steps == 1);
}
