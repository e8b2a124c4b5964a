#include "stackdiff/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "stackdiff/error.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff::corpus {

using nlohmann::json;

double StepHistogram::fraction_at_most(int k) const {
  if (total == 0) return 0.0;
  std::size_t n = 0;
  for (const auto& [steps, count] : counts)
    if (steps <= k) n += count;
  return static_cast<double>(n) / static_cast<double>(total);
}

double StepHistogram::mean_steps() const {
  if (total == 0) return 0.0;
  double sum = 0.0;
  for (const auto& [steps, count] : counts) sum += static_cast<double>(steps) * static_cast<double>(count);
  return sum / static_cast<double>(total);
}

namespace {

std::string require_string(const json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) throw ParseError(std::string("missing string field '") + key + "'", line);
  return it->get<std::string>();
}

}  // namespace

std::vector<StepRecord> parse_manifest(const std::string& text) {
  std::vector<StepRecord> records;
  auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (trim(lines[i]).empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed manifest record: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw ParseError("manifest record is not an object", line_no);
    StepRecord r;
    r.goal_id = require_string(j, "goal_id", line_no);
    r.goal_text = require_string(j, "goal_text", line_no);
    r.category = j.value("category", std::string{});
    r.step_text = require_string(j, "step_text", line_no);
    r.image_path = require_string(j, "image_path", line_no);
    auto idx = j.find("step_index");
    if (idx == j.end() || !idx->is_number_integer()) throw ParseError("missing integer field 'step_index'", line_no);
    r.step_index = idx->get<int>();
    if (r.step_index < 1) throw ParseError("step_index must be >= 1", line_no);
    if (r.step_text.empty()) throw ParseError("step_text must be nonempty", line_no);
    records.push_back(std::move(r));
  }
  return records;
}

std::string format_record(const StepRecord& r) {
  json j = {{"goal_id", r.goal_id},     {"goal_text", r.goal_text}, {"category", r.category},
            {"step_index", r.step_index}, {"step_text", r.step_text}, {"image_path", r.image_path}};
  return j.dump();
}

std::vector<Article> regroup_by_goal(const std::vector<StepRecord>& records, const ImageLoader& load) {
  std::map<std::string, std::vector<const StepRecord*>> by_goal;
  for (const auto& r : records) by_goal[r.goal_id].push_back(&r);

  std::vector<Article> articles;
  articles.reserve(by_goal.size());
  for (auto& [goal_id, rows] : by_goal) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const StepRecord* a, const StepRecord* b) { return a->step_index < b->step_index; });
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i]->step_index == rows[i - 1]->step_index)
        throw IntegrityError("duplicate step " + std::to_string(rows[i]->step_index) + " for goal " + goal_id);
    Article a;
    a.goal_id = goal_id;
    a.goal = rows.front()->goal_text;
    a.category = rows.front()->category;
    for (const auto* r : rows) {
      a.steps.push_back(r->step_text);
      a.images.push_back(load(*r));
    }
    articles.push_back(std::move(a));
  }
  return articles;
}

std::vector<Article> load_corpus(const std::filesystem::path& root, std::size_t* skipped) {
  const auto manifest = root / kManifestName;
  if (!std::filesystem::exists(manifest)) throw IoError("no manifest at " + manifest.string());
  auto records = parse_manifest(read_file(manifest));
  auto articles = regroup_by_goal(records, [&](const StepRecord& r) -> Image {
    const auto path = root / r.image_path;
    try {
      if (!std::filesystem::exists(path)) throw RecordError(r.goal_id, "missing image " + r.image_path);
      try {
        return read_png(path);
      } catch (const IoError& e) {
        throw RecordError(r.goal_id, e.what());
      }
    } catch (const RecordError&) {
      if (!skipped) throw;
      return Image{};
    }
  });
  if (skipped) {
    const auto before = articles.size();
    std::erase_if(articles, [](const Article& a) {
      return std::any_of(a.images.begin(), a.images.end(), [](const Image& i) { return i.empty(); });
    });
    *skipped = before - articles.size();
  }
  return articles;
}

void write_corpus(const std::vector<Article>& articles, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "images");
  std::string manifest;
  for (const auto& a : articles) {
    if (a.steps.size() != a.images.size()) throw IntegrityError("article " + a.goal_id + " has mismatched steps/images");
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
      StepRecord r{a.goal_id, a.goal, a.category, static_cast<int>(i + 1), a.steps[i],
                   "images/" + a.goal_id + "_" + std::to_string(i + 1) + ".png"};
      write_png(a.images[i], root / r.image_path);
      manifest += format_record(r);
      manifest += '\n';
    }
  }
  write_file_atomic(root / kManifestName, manifest);
}

std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += out[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  // Ties go to the earlier bucket.
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[remainders[k % remainders.size()].second];
  return out;
}

CorpusSplit split_corpus(std::vector<Article> articles, const SplitRatios& ratios, std::uint64_t seed) {
  const std::vector<double> w{ratios.train, ratios.val, ratios.test};
  for (double r : w)
    if (!(r > 0.0)) throw ConfigError("split ratios must be positive");
  if (std::abs(w[0] + w[1] + w[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  if (articles.size() < w.size()) throw ConfigError("fewer articles than splits");

  std::set<std::string> ids;
  for (const auto& a : articles)
    if (!ids.insert(a.goal_id).second) throw IntegrityError("goal " + a.goal_id + " appears in two articles");

  std::sort(articles.begin(), articles.end(), [](const Article& a, const Article& b) { return a.goal_id < b.goal_id; });
  Rng rng = make_rng(seed, {0x5b117});
  std::shuffle(articles.begin(), articles.end(), rng);

  const auto sizes = apportion(articles.size(), w);
  CorpusSplit split;
  split.seed = seed;
  split.ratios = ratios;
  auto it = std::make_move_iterator(articles.begin());
  split.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  split.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  split.test.assign(it, it + static_cast<std::ptrdiff_t>(sizes[2]));
  return split;
}

std::vector<Article> filter_category(const std::vector<Article>& articles, const std::string& category) {
  std::vector<Article> out;
  std::copy_if(articles.begin(), articles.end(), std::back_inserter(out),
               [&](const Article& a) { return a.category == category; });
  return out;
}

namespace {

template <typename A>
PaddedArticle normalize_impl(const A& article, int real_available, int n_steps) {
  if (n_steps < 1) throw ConfigError("step count N must be >= 1");
  if (article.images.empty()) throw IntegrityError("cannot normalize an article without images");
  PaddedArticle out;
  out.goal_id = article.goal_id;
  out.goal = article.goal;
  out.real_count = std::min(real_available, n_steps);
  const int w = article.images.front().width;
  const int h = article.images.front().height;
  for (int i = 0; i < n_steps; ++i) {
    if (i < out.real_count) {
      out.steps.push_back(article.steps[static_cast<std::size_t>(i)]);
      out.images.push_back(article.images[static_cast<std::size_t>(i)]);
    } else {
      out.steps.push_back(kDummyStepText);
      out.images.push_back(empty_frame(w, h));
    }
  }
  return out;
}

}  // namespace

PaddedArticle normalize_length(const Article& article, int n_steps) {
  return normalize_impl(article, static_cast<int>(article.steps.size()), n_steps);
}

PaddedArticle normalize_length(const PaddedArticle& article, int n_steps) {
  return normalize_impl(article, article.real_count, n_steps);
}

StepHistogram corpus_stats(const std::vector<Article>& articles) {
  StepHistogram h;
  for (const auto& a : articles) ++h.counts[static_cast<int>(a.steps.size())];
  h.total = articles.size();
  return h;
}

}  // namespace stackdiff::corpus
