#include "stackdiff/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "stackdiff/error.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff::synthetic {

Vocabulary Vocabulary::standard() {
  Vocabulary v;
  v.colors = {
      {"red", {215, 48, 39}},   {"orange", {245, 140, 30}}, {"yellow", {235, 215, 40}}, {"green", {40, 165, 60}},
      {"cyan", {40, 195, 205}}, {"blue", {45, 85, 215}},    {"purple", {145, 60, 185}}, {"pink", {240, 110, 180}},
  };
  v.shapes = {"circle", "square", "triangle", "diamond"};
  v.levels = {
      {0.25, "fill the bottom quarter", "quarter"},
      {0.50, "fill the bottom half", "half"},
      {0.75, "fill three quarters of it", "three quarters"},
      {1.00, "fill it to the top", "to the top"},
  };
  return v;
}

Vocabulary Vocabulary::subset(const std::vector<std::string>& colors, const std::vector<std::string>& shapes,
                              int level_count) {
  auto full = standard();
  Vocabulary v;
  if (colors.empty()) {
    v.colors = full.colors;
  } else {
    for (const auto& name : colors) {
      auto it = std::find_if(full.colors.begin(), full.colors.end(), [&](const auto& c) { return c.name == name; });
      if (it == full.colors.end()) throw ConfigError("unknown synthetic color '" + name + "'");
      v.colors.push_back(*it);
    }
  }
  if (shapes.empty()) {
    v.shapes = full.shapes;
  } else {
    for (const auto& name : shapes) {
      if (std::find(full.shapes.begin(), full.shapes.end(), name) == full.shapes.end())
        throw ConfigError("unknown synthetic shape '" + name + "'");
      v.shapes.push_back(name);
    }
  }
  if (level_count < 2 || level_count > static_cast<int>(full.levels.size()))
    throw ConfigError("synthetic level count must be in [2, " + std::to_string(full.levels.size()) + "]");
  v.levels.assign(full.levels.begin(), full.levels.begin() + level_count);
  return v;
}

void SyntheticSpec::validate() const {
  if (articles == 0) throw ConfigError("synthetic spec: article count must be positive");
  if (n_steps < 1) throw ConfigError("synthetic spec: n_steps must be >= 1");
  if (n_steps > levels) throw ConfigError("synthetic spec: n_steps exceeds the number of distinct fill levels");
  if (min_steps < 0 || min_steps > n_steps) throw ConfigError("synthetic spec: min_steps must be in [0, n_steps]");
  if (block < 1 || image_size % block != 0) throw ConfigError("synthetic spec: block must divide image_size");
  if (image_size / block < 8) throw ConfigError("synthetic spec: need at least 8 cells per side");
  if (categories.empty()) throw ConfigError("synthetic spec: at least one category is required");
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"articles", s.articles}, {"n_steps", s.n_steps}, {"min_steps", s.min_steps},
                     {"image_size", s.image_size}, {"block", s.block}, {"colors", s.colors},
                     {"shapes", s.shapes}, {"levels", s.levels}, {"categories", s.categories}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  SyntheticSpec d;
  s.articles = j.value("articles", d.articles);
  s.n_steps = j.value("n_steps", d.n_steps);
  s.min_steps = j.value("min_steps", d.min_steps);
  s.image_size = j.value("image_size", d.image_size);
  s.block = j.value("block", d.block);
  s.colors = j.value("colors", d.colors);
  s.shapes = j.value("shapes", d.shapes);
  s.levels = j.value("levels", d.levels);
  s.categories = j.value("categories", d.categories);
}

namespace {

bool inside_shape(const std::string& shape, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5;
  if (shape == "circle") return du * du + dv * dv <= 0.40 * 0.40;
  if (shape == "square") return std::abs(du) <= 0.34 && std::abs(dv) <= 0.34;
  if (shape == "triangle") return v >= 0.10 && v <= 0.90 && std::abs(du) <= 0.42 * (v - 0.10) / 0.80;
  if (shape == "diamond") return std::abs(du) + std::abs(dv) <= 0.44;
  throw ConfigError("unknown shape " + shape);
}

std::array<std::uint8_t, 3> tint(const std::array<std::uint8_t, 3>& c) {
  std::array<std::uint8_t, 3> out{};
  for (int k = 0; k < 3; ++k) out[k] = static_cast<std::uint8_t>(std::lround(0.35 * c[k] + 0.65 * 255.0));
  return out;
}

}  // namespace

Generator::Generator(SyntheticSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  vocab_ = Vocabulary::subset(spec_.colors, spec_.shapes, spec_.levels);
  for (int c = 0; c < static_cast<int>(vocab_.colors.size()); ++c)
    for (int s = 0; s < static_cast<int>(vocab_.shapes.size()); ++s)
      for (int l = 0; l < static_cast<int>(vocab_.levels.size()); ++l) {
        Attributes a{c, s, l};
        templates_.push_back(cell_means(render(a)));
        template_attrs_.push_back(a);
      }
}

std::string Generator::goal_text(int color, int shape) const {
  return vocab_.colors.at(static_cast<std::size_t>(color)).name + " " + vocab_.shapes.at(static_cast<std::size_t>(shape));
}

std::string Generator::step_text(int level) const { return vocab_.levels.at(static_cast<std::size_t>(level)).phrase; }

Image Generator::render(const Attributes& a) const {
  const int g = spec_.grid();
  const auto& shape = vocab_.shapes.at(static_cast<std::size_t>(a.shape));
  const auto color = vocab_.colors.at(static_cast<std::size_t>(a.color)).rgb;
  const auto light = tint(color);

  std::vector<char> mask(static_cast<std::size_t>(g * g), 0);
  int top = g, bottom = -1;
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) {
      const double u = (x + 0.5) / g, v = (y + 0.5) / g;
      if (inside_shape(shape, u, v)) {
        mask[static_cast<std::size_t>(y * g + x)] = 1;
        top = std::min(top, y);
        bottom = std::max(bottom, y);
      }
    }
  const int rows = bottom - top + 1;
  const int filled = std::max(1, static_cast<int>(std::lround(vocab_.levels.at(static_cast<std::size_t>(a.level)).fraction * rows)));
  const int fill_from = bottom - filled + 1;

  Image img(spec_.image_size, spec_.image_size);
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) {
      std::array<std::uint8_t, 3> c = kBackground;
      if (mask[static_cast<std::size_t>(y * g + x)]) c = (y >= fill_from) ? color : light;
      for (int py = 0; py < spec_.block; ++py)
        for (int px = 0; px < spec_.block; ++px)
          img.set(x * spec_.block + px, y * spec_.block + py, c[0], c[1], c[2]);
    }
  return img;
}

std::vector<corpus::Article> Generator::generate(std::uint64_t seed) const {
  const int n_colors = static_cast<int>(vocab_.colors.size());
  const int n_shapes = static_cast<int>(vocab_.shapes.size());
  const int combos = n_colors * n_shapes;
  const int min_steps = spec_.min_steps == 0 ? spec_.n_steps : spec_.min_steps;

  Rng order_rng = make_rng(seed, {0xc0105});
  std::vector<int> order(static_cast<std::size_t>(combos));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), order_rng);

  std::vector<corpus::Article> out;
  out.reserve(spec_.articles);
  for (std::size_t i = 0; i < spec_.articles; ++i) {
    Rng rng = make_rng(seed, {0xa271c1e, i});
    const int combo = order[i % order.size()];
    const int color = combo / n_shapes;
    const int shape = combo % n_shapes;
    const int count = min_steps + static_cast<int>(rng() % static_cast<std::uint64_t>(spec_.n_steps - min_steps + 1));
    std::vector<int> levels(vocab_.levels.size());
    std::iota(levels.begin(), levels.end(), 0);
    std::shuffle(levels.begin(), levels.end(), rng);

    corpus::Article a;
    char id[32];
    std::snprintf(id, sizeof(id), "syn-%05zu", i);
    a.goal_id = id;
    a.goal = goal_text(color, shape);
    a.category = spec_.categories[static_cast<std::size_t>(combo) % spec_.categories.size()];
    for (int s = 0; s < count; ++s) {
      const int level = levels[static_cast<std::size_t>(s)];
      a.steps.push_back(step_text(level));
      a.images.push_back(render({color, shape, level}));
    }
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<double> Generator::cell_means(const Image& raw) const {
  const Image image = resize_nearest(raw, spec_.image_size, spec_.image_size);
  const int g = spec_.grid();
  std::vector<double> means(static_cast<std::size_t>(g * g * 3), 0.0);
  const double inv = 1.0 / (spec_.block * spec_.block);
  for (int y = 0; y < spec_.image_size; ++y)
    for (int x = 0; x < spec_.image_size; ++x)
      for (int c = 0; c < 3; ++c)
        means[static_cast<std::size_t>(((y / spec_.block) * g + x / spec_.block) * 3 + c)] += image.at(x, y, c) * inv;
  return means;
}

Attributes Generator::classify(const Image& image) const {
  const auto means = cell_means(image);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_idx = 0;
  for (std::size_t t = 0; t < templates_.size(); ++t) {
    double d = 0.0;
    const auto& tm = templates_[t];
    for (std::size_t k = 0; k < tm.size(); ++k) {
      const double diff = means[k] - tm[k];
      d += diff * diff;
    }
    if (d < best) {
      best = d;
      best_idx = t;
    }
  }
  return template_attrs_[best_idx];
}

std::optional<int> Generator::parse_color(const std::string& text) const {
  const auto lower = to_lower(text);
  for (int c = 0; c < static_cast<int>(vocab_.colors.size()); ++c)
    if (lower.find(vocab_.colors[static_cast<std::size_t>(c)].name) != std::string::npos) return c;
  return std::nullopt;
}

std::optional<int> Generator::parse_shape(const std::string& text) const {
  const auto lower = to_lower(text);
  for (int s = 0; s < static_cast<int>(vocab_.shapes.size()); ++s)
    if (lower.find(vocab_.shapes[static_cast<std::size_t>(s)]) != std::string::npos) return s;
  return std::nullopt;
}

std::optional<int> Generator::parse_level(const std::string& text) const {
  const auto lower = to_lower(text);
  // Longest keyword first so "three quarters" is not read as "quarter".
  std::vector<int> idx(vocab_.levels.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return vocab_.levels[static_cast<std::size_t>(a)].keyword.size() > vocab_.levels[static_cast<std::size_t>(b)].keyword.size();
  });
  for (int l : idx)
    if (lower.find(vocab_.levels[static_cast<std::size_t>(l)].keyword) != std::string::npos) return l;
  return std::nullopt;
}

std::vector<corpus::Article> generate_synthetic_corpus(const SyntheticSpec& spec, std::uint64_t seed) {
  return Generator(spec).generate(seed);
}

}  // namespace stackdiff::synthetic
