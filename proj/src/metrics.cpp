#include "stackdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "stackdiff/error.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff::metrics {

using embed::SemanticEmbedding;

bool score_mcq(const McqItem& item) {
  if (item.candidates.size() < 2) throw Error("an MCQ needs at least two candidates", "invalid_argument");
  if (item.correct_index < 0 || item.correct_index >= static_cast<int>(item.candidates.size()))
    throw Error("MCQ correct index out of range", "invalid_argument");
  int best = 0;
  double best_score = embed::semantic_similarity(item.probe, item.candidates[0]);
  for (std::size_t i = 1; i < item.candidates.size(); ++i) {
    const double s = embed::semantic_similarity(item.probe, item.candidates[i]);
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(i);
    }
  }
  return best == item.correct_index;
}

namespace {

// Correct candidate plus k-1 distinct distractors, shuffled. Returns the pool
// indices in presentation order and the position of the correct one.
std::pair<std::vector<std::size_t>, int> draw_candidates(std::size_t correct, const std::vector<std::size_t>& eligible,
                                                         int k, Rng& rng) {
  std::vector<std::size_t> others;
  others.reserve(eligible.size());
  for (auto i : eligible)
    if (i != correct) others.push_back(i);
  if (static_cast<int>(others.size()) < k - 1)
    throw Error("goal pool has " + std::to_string(others.size()) + " distractors, need " + std::to_string(k - 1),
                "insufficient_distractors");
  // Partial Fisher-Yates: the first k-1 entries become a uniform sample without replacement.
  for (int i = 0; i < k - 1; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, others.size() - 1);
    std::swap(others[i], others[pick(rng)]);
  }
  std::vector<std::size_t> chosen(others.begin(), others.begin() + (k - 1));
  chosen.push_back(correct);
  std::shuffle(chosen.begin(), chosen.end(), rng);
  const int at = static_cast<int>(std::find(chosen.begin(), chosen.end(), correct) - chosen.begin());
  return {chosen, at};
}

constexpr std::uint64_t kGoalStream = 0x6f41;

}  // namespace

Tally goal_faithfulness(const std::vector<std::pair<SemanticEmbedding, std::size_t>>& probes,
                        const std::vector<SemanticEmbedding>& pool, int k, std::uint64_t seed) {
  if (k < 2) throw Error("k must be at least 2", "invalid_argument");
  std::vector<std::size_t> eligible(pool.size());
  std::iota(eligible.begin(), eligible.end(), 0);
  Tally tally;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const auto& [probe, correct] = probes[p];
    if (correct >= pool.size()) throw Error("probe refers to a goal outside the pool", "invalid_argument");
    Rng rng = make_rng(seed, {kGoalStream, p});
    auto [order, at] = draw_candidates(correct, eligible, k, rng);
    McqItem item{probe, {}, at};
    for (auto i : order) item.candidates.push_back(pool[i]);
    tally.add(score_mcq(item));
  }
  return tally;
}

Tally goal_faithfulness(const std::vector<GoalImage>& images, const std::vector<std::string>& goal_pool,
                        const embed::SemanticEmbedder& embedder, int k, std::uint64_t seed) {
  if (k < 2) throw Error("k must be at least 2", "invalid_argument");
  std::vector<std::string> texts;
  std::map<std::string, std::size_t> index;
  auto intern = [&](const std::string& g) {
    auto [it, fresh] = index.emplace(g, texts.size());
    if (fresh) texts.push_back(g);
    return it->second;
  };
  std::set<std::size_t> pool_set;
  for (const auto& g : goal_pool) pool_set.insert(intern(g));
  for (const auto& gi : images) intern(gi.goal);
  const std::vector<std::size_t> eligible(pool_set.begin(), pool_set.end());

  std::vector<SemanticEmbedding> text_emb;
  text_emb.reserve(texts.size());
  for (const auto& t : texts) text_emb.push_back(embedder.embed_text(t));

  Tally tally;
  for (const auto& gi : images) {
    if (!gi.image) throw Error("goal faithfulness item without an image", "invalid_argument");
    const std::size_t correct = index.at(gi.goal);
    Rng rng = make_rng(seed, {kGoalStream, gi.stream});
    auto [order, at] = draw_candidates(correct, eligible, k, rng);
    McqItem item{embedder.embed_image(*gi.image), {}, at};
    for (auto i : order) item.candidates.push_back(text_emb[i]);
    tally.add(score_mcq(item));
  }
  return tally;
}

StepFaithfulness step_faithfulness(const std::vector<corpus::Article>& articles, const embed::SemanticEmbedder& embedder) {
  StepFaithfulness out;
  for (const auto& a : articles) {
    const std::size_t n = std::min(a.steps.size(), a.images.size());
    if (n < 2) {
      ++out.skipped_articles;
      continue;
    }
    std::vector<SemanticEmbedding> texts;
    for (std::size_t i = 0; i < n; ++i) texts.push_back(embedder.embed_text(a.steps[i]));
    for (std::size_t i = 0; i < n; ++i) {
      const bool ok = score_mcq({embedder.embed_image(a.images[i]), texts, static_cast<int>(i)});
      out.overall.add(ok);
      out.by_step_count[static_cast<int>(n)].add(ok);
    }
  }
  return out;
}

Consistency cross_image_consistency(const std::vector<std::vector<Vector>>& embeddings, bool normalize) {
  Consistency out;
  double sum = 0.0;
  for (const auto& article : embeddings) {
    if (article.size() < 2) {
      ++out.skipped_articles;
      continue;
    }
    std::vector<Vector> v = article;
    if (normalize)
      for (auto& x : v) {
        const double n = x.norm();
        if (n > 0) x /= n;
      }
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = i + 1; j < v.size(); ++j) {
        if (v[i].size() != v[j].size()) throw ShapeError("visual embeddings differ in dimension");
        total += (v[i] - v[j]).norm();
        ++pairs;
      }
    sum += total / static_cast<double>(pairs);
    ++out.articles;
  }
  out.mean = out.articles ? sum / static_cast<double>(out.articles) : 0.0;
  return out;
}

Consistency cross_image_consistency(const std::vector<std::vector<Image>>& images, const embed::VisualEmbedder& embedder,
                                    bool normalize) {
  std::vector<std::vector<Vector>> emb;
  emb.reserve(images.size());
  for (const auto& article : images) {
    auto& row = emb.emplace_back();
    for (const auto& img : article) row.push_back(embedder.embed(img).vector);
  }
  return cross_image_consistency(emb, normalize);
}

GaussianFit fit_gaussian(const std::vector<Vector>& samples) {
  if (samples.size() < 2) throw Error("a Gaussian fit needs at least two samples", "invalid_argument");
  const auto d = samples.front().size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].size() != d) throw ShapeError("samples differ in dimension");
    X.row(static_cast<Eigen::Index>(i)) = samples[i].transpose();
  }
  GaussianFit fit;
  fit.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd centered = X.rowwise() - fit.mean.transpose();
  fit.cov = (centered.transpose() * centered) / static_cast<double>(samples.size() - 1);
  return fit;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

bool singular(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double hi = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() <= 1e-12 * hi;
}

}  // namespace

double frechet_distance(const Vector& mu1, const Eigen::MatrixXd& cov1, const Vector& mu2, const Eigen::MatrixXd& cov2) {
  const auto d = mu1.size();
  if (mu2.size() != d || cov1.rows() != d || cov1.cols() != d || cov2.rows() != d || cov2.cols() != d)
    throw ShapeError("frechet_distance: mismatched dimensions");
  Eigen::MatrixXd c1 = cov1, c2 = cov2;
  if (singular(c1) || singular(c2)) {
    c1 += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    c2 += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  }
  const Eigen::MatrixXd s1 = psd_sqrt(c1);
  const Eigen::MatrixXd m = s1 * c2 * s1;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu1 - mu2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

double fid(const std::vector<Vector>& generated, const std::vector<Vector>& reference) {
  const auto a = fit_gaussian(generated);
  const auto b = fit_gaussian(reference);
  if (a.mean.size() != b.mean.size()) throw ShapeError("fid: embedding dimensions differ");
  return frechet_distance(a.mean, a.cov, b.mean, b.cov);
}

double fid(const std::vector<Image>& generated, const std::vector<Image>& reference, const embed::VisualEmbedder& embedder) {
  std::vector<Vector> g, r;
  for (const auto& img : generated) g.push_back(embedder.embed(img).vector);
  for (const auto& img : reference) r.push_back(embedder.embed(img).vector);
  return fid(g, r);
}

// ---------------------------------------------------------------------------

const char* const kComparisonCriteria =
    "Which article better shows how to achieve the goal? Consider whether the images match the goal, "
    "whether each image matches its own step, and whether the images look consistent with each other.";

namespace {

int render_side(std::ostringstream& os, const corpus::Article& a, const char* label) {
  int missing = 0;
  os << "<section class=\"side\" data-side=\"" << label << "\">\n<h2>Article " << label << "</h2>\n"
     << "<h3 class=\"goal\">" << html_escape(a.goal) << "</h3>\n<ol class=\"steps\">\n";
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    os << "<li class=\"step-row\"><p>" << html_escape(a.steps[i]) << "</p>";
    if (i < a.images.size() && !a.images[i].empty()) {
      os << "<img alt=\"step " << i + 1 << "\" src=\"data:image/png;base64,"
         << base64_encode(encode_png(a.images[i])) << "\">";
    } else {
      os << "<div class=\"tile missing\" data-missing=\"true\">image unavailable</div>";
      ++missing;
    }
    os << "</li>\n";
  }
  os << "</ol>\n</section>\n";
  return missing;
}

}  // namespace

ComparisonPage render_comparison_page(const corpus::Article& a, const corpus::Article& b, std::uint64_t layout_seed) {
  ComparisonPage page;
  Rng rng = make_rng(layout_seed, {0x1a7047});
  page.a_on_left = (rng() & 1u) == 0;
  const corpus::Article& left = page.a_on_left ? a : b;
  const corpus::Article& right = page.a_on_left ? b : a;

  std::ostringstream os;
  os << "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Comparison</title>\n"
     << "<style>body{font-family:sans-serif}.pair{display:flex;gap:2em}.side{flex:1}"
        ".step-row img,.tile{width:128px;height:128px;image-rendering:pixelated}"
        ".tile.missing{background:#ddd;display:flex;align-items:center;justify-content:center}</style>\n"
     << "</head><body>\n<p class=\"criteria\">" << html_escape(kComparisonCriteria) << "</p>\n"
     << "<div class=\"pair\" data-layout-seed=\"" << layout_seed << "\">\n";
  page.missing_images += render_side(os, left, "1");
  page.missing_images += render_side(os, right, "2");
  os << "</div>\n<form class=\"judgement\">\n"
     << "<label><input type=\"radio\" name=\"choice\" value=\"1\"> Article 1</label>\n"
     << "<label><input type=\"radio\" name=\"choice\" value=\"2\"> Article 2</label>\n"
     << "<label><input type=\"radio\" name=\"choice\" value=\"tie\"> Tie</label>\n"
     << "<textarea name=\"justification\" required placeholder=\"Explain your choice\"></textarea>\n"
     << "</form>\n</body></html>\n";
  page.html = os.str();
  return page;
}

std::string to_string(Choice c) {
  switch (c) {
    case Choice::A: return "A";
    case Choice::B: return "B";
    case Choice::Tie: return "tie";
  }
  return "tie";
}

Choice parse_choice(const std::string& s) {
  const std::string v = to_lower(trim(s));
  if (v == "a") return Choice::A;
  if (v == "b") return Choice::B;
  if (v == "tie") return Choice::Tie;
  throw ParseError("unknown choice '" + s + "'");
}

namespace {

std::vector<std::string> split_csv_row(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c != '\r') {
      fields.back() += c;
    }
  }
  if (quoted) throw ParseError("unterminated quote", line_no);
  return fields;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

std::vector<AnnotationRecord> parse_annotations(const std::string& text) {
  const auto lines = split_lines(text);
  std::size_t i = 0;
  while (i < lines.size() && trim(lines[i]).empty()) ++i;
  if (i == lines.size()) throw ParseError("annotations: missing header");
  const auto header = split_csv_row(lines[i], i + 1);
  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) col[to_lower(trim(header[c]))] = c;
  for (const char* name : {"goal_id", "annotator_id", "choice"})
    if (!col.count(name)) throw ParseError(std::string("annotations: header lacks ") + name, i + 1);

  std::vector<AnnotationRecord> out;
  for (++i; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv_row(lines[i], i + 1);
    if (f.size() != header.size()) throw ParseError("annotations: wrong field count", i + 1);
    AnnotationRecord r;
    r.goal_id = trim(f[col["goal_id"]]);
    r.annotator_id = trim(f[col["annotator_id"]]);
    try {
      r.choice = parse_choice(f[col["choice"]]);
    } catch (const ParseError& e) {
      throw ParseError(std::string("annotations: ") + e.what(), i + 1);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_annotations(const std::vector<AnnotationRecord>& records) {
  std::string out = "goal_id,annotator_id,choice\n";
  for (const auto& r : records) out += csv_field(r.goal_id) + "," + csv_field(r.annotator_id) + "," + to_string(r.choice) + "\n";
  return out;
}

WinRateReport win_rate(const std::vector<AnnotationRecord>& annotations, const Assignment& assignment) {
  if (assignment.method_x.empty() || assignment.method_y.empty() || assignment.method_x == assignment.method_y)
    throw Error("win_rate needs two distinct method names", "invalid_argument");
  std::map<std::string, std::map<std::string, Choice>> by_goal;
  for (const auto& r : annotations) {
    if (!by_goal[r.goal_id].emplace(r.annotator_id, r.choice).second)
      throw Error("duplicate annotation for goal " + r.goal_id + " by " + r.annotator_id, "invalid_annotations");
  }
  WinRateReport report;
  report.wins[assignment.method_x] = 0;
  report.wins[assignment.method_y] = 0;
  for (const auto& [goal, votes] : by_goal) {
    const int n = static_cast<int>(votes.size());
    if (report.annotators_per_goal == 0) report.annotators_per_goal = n;
    if (n != report.annotators_per_goal)
      throw Error("goal " + goal + " has " + std::to_string(n) + " annotators, expected " +
                      std::to_string(report.annotators_per_goal),
                  "invalid_annotations");
    auto it = assignment.method_of_a.find(goal);
    if (it == assignment.method_of_a.end()) throw Error("no method assignment for goal " + goal, "invalid_annotations");
    if (it->second != assignment.method_x && it->second != assignment.method_y)
      throw Error("goal " + goal + " assigns unknown method " + it->second, "invalid_annotations");
    const std::string& method_a = it->second;
    const std::string& method_b = method_a == assignment.method_x ? assignment.method_y : assignment.method_x;

    int a = 0, b = 0;
    for (const auto& [who, c] : votes) {
      a += c == Choice::A;
      b += c == Choice::B;
    }
    ++report.goals;
    if (2 * a > n) {
      ++report.wins[method_a];
    } else if (2 * b > n) {
      ++report.wins[method_b];
    } else {
      ++report.tied;
    }
  }
  const std::size_t decided = report.wins[assignment.method_x] + report.wins[assignment.method_y];
  for (const auto& m : {assignment.method_x, assignment.method_y}) {
    if (decided)
      report.win_rate[m] = 100.0 * static_cast<double>(report.wins[m]) / static_cast<double>(decided);
    else
      report.win_rate[m] = std::nullopt;
  }
  return report;
}

nlohmann::json to_json(const WinRateReport& r) {
  nlohmann::json j;
  j["goals"] = r.goals;
  j["tied"] = r.tied;
  j["annotators_per_goal"] = r.annotators_per_goal;
  j["wins"] = r.wins;
  auto& rates = j["win_rate"] = nlohmann::json::object();
  for (const auto& [m, v] : r.win_rate) rates[m] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json tally_json(const Tally& t) {
  return {{"correct", t.correct}, {"total", t.total}, {"accuracy", t.accuracy()}};
}

Tally tally_from(const nlohmann::json& j) {
  return {j.at("correct").get<std::size_t>(), j.at("total").get<std::size_t>()};
}

}  // namespace

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  j["gf"] = tally_json(r.gf);
  j["sf"] = tally_json(r.sf);
  auto& strata = j["sf_by_step_count"] = nlohmann::json::object();
  for (const auto& [n, t] : r.sf_by_step_count) strata[std::to_string(n)] = tally_json(t);
  j["sf_skipped"] = r.sf_skipped;
  j["cic_mean"] = r.cic_mean;
  j["cic_articles"] = r.cic_articles;
  j["fid"] = r.fid;
  j["generated_images"] = r.generated_images;
  j["reference_images"] = r.reference_images;
  j["fingerprint"] = r.fingerprint;
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r.gf = tally_from(j.at("gf"));
  r.sf = tally_from(j.at("sf"));
  r.sf_by_step_count.clear();
  for (const auto& [n, t] : j.at("sf_by_step_count").items()) r.sf_by_step_count[std::stoi(n)] = tally_from(t);
  r.sf_skipped = j.at("sf_skipped").get<std::size_t>();
  r.cic_mean = j.at("cic_mean").get<double>();
  r.cic_articles = j.at("cic_articles").get<std::size_t>();
  r.fid = j.at("fid").get<double>();
  r.generated_images = j.at("generated_images").get<std::size_t>();
  r.reference_images = j.at("reference_images").get<std::size_t>();
  r.fingerprint = j.at("fingerprint");
}

EvalReport evaluate(const std::vector<corpus::Article>& generated, const std::vector<corpus::Article>& reference,
                    const embed::SemanticEmbedder& semantic, const embed::VisualEmbedder& visual,
                    const EvalOptions& options) {
  EvalReport report;

  std::vector<std::string> pool;
  for (const auto& a : reference) pool.push_back(a.goal);
  std::vector<GoalImage> items;
  std::uint64_t stream = 0;
  for (const auto& a : generated)
    for (const auto& img : a.images) items.push_back({&img, a.goal, stream++});
  report.gf = goal_faithfulness(items, pool, semantic, options.k, options.seed);

  const auto sf = step_faithfulness(generated, semantic);
  report.sf = sf.overall;
  report.sf_by_step_count = sf.by_step_count;
  report.sf_skipped = sf.skipped_articles;

  std::vector<std::vector<Vector>> per_article;
  std::vector<Vector> gen_all, ref_all;
  for (const auto& a : generated) {
    auto& row = per_article.emplace_back();
    for (const auto& img : a.images) {
      row.push_back(visual.embed(img).vector);
      gen_all.push_back(row.back());
    }
  }
  for (const auto& a : reference)
    for (const auto& img : a.images) ref_all.push_back(visual.embed(img).vector);
  const auto cic = cross_image_consistency(per_article, options.normalize_cic);
  report.cic_mean = cic.mean;
  report.cic_articles = cic.articles;
  report.fid = fid(gen_all, ref_all);
  report.generated_images = gen_all.size();
  report.reference_images = ref_all.size();

  report.fingerprint = {{"semantic_embedder", semantic.identity()},
                        {"visual_embedder", visual.identity()},
                        {"seed", options.seed},
                        {"k", options.k},
                        {"normalize_cic", options.normalize_cic}};
  return report;
}

}  // namespace stackdiff::metrics
