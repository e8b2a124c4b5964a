#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stackdiff/corpus.hpp"
#include "stackdiff/embedders.hpp"

namespace stackdiff::metrics {

struct McqItem {
  embed::SemanticEmbedding probe;
  std::vector<embed::SemanticEmbedding> candidates;
  int correct_index = 0;
};

// Correct only if the correct candidate is the lowest-index maximum.
bool score_mcq(const McqItem& item);

struct Tally {
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  void add(bool ok) {
    correct += ok ? 1 : 0;
    ++total;
  }
};

struct GoalImage {
  const Image* image = nullptr;
  std::string goal;
  std::uint64_t stream = 0;  // distinguishes distractor draws per image
};

// Builds a k-way MCQ per image: the correct goal plus k-1 distinct distractor
// goals from `goal_pool`, in a seeded random order.
Tally goal_faithfulness(const std::vector<GoalImage>& images, const std::vector<std::string>& goal_pool,
                        const embed::SemanticEmbedder& embedder, int k, std::uint64_t seed);

// Same harness on precomputed embeddings; pool entries are text embeddings.
Tally goal_faithfulness(const std::vector<std::pair<embed::SemanticEmbedding, std::size_t>>& probes,
                        const std::vector<embed::SemanticEmbedding>& pool, int k, std::uint64_t seed);

struct StepFaithfulness {
  Tally overall;
  std::map<int, Tally> by_step_count;
  std::size_t skipped_articles = 0;  // fewer than two real steps
};

StepFaithfulness step_faithfulness(const std::vector<corpus::Article>& articles, const embed::SemanticEmbedder& embedder);

struct Consistency {
  double mean = 0.0;
  std::size_t articles = 0;
  std::size_t skipped_articles = 0;
};

Consistency cross_image_consistency(const std::vector<std::vector<Vector>>& embeddings, bool normalize = false);
Consistency cross_image_consistency(const std::vector<std::vector<Image>>& images, const embed::VisualEmbedder& embedder,
                                    bool normalize = false);

struct GaussianFit {
  Vector mean;
  Eigen::MatrixXd cov;  // unbiased sample covariance
};

GaussianFit fit_gaussian(const std::vector<Vector>& samples);

double frechet_distance(const Vector& mu1, const Eigen::MatrixXd& cov1, const Vector& mu2, const Eigen::MatrixXd& cov2);
double fid(const std::vector<Vector>& generated, const std::vector<Vector>& reference);
double fid(const std::vector<Image>& generated, const std::vector<Image>& reference, const embed::VisualEmbedder& embedder);

// ---------------------------------------------------------------------------
// Human evaluation

struct ComparisonPage {
  std::string html;
  bool a_on_left = true;
  int missing_images = 0;
};

extern const char* const kComparisonCriteria;

ComparisonPage render_comparison_page(const corpus::Article& a, const corpus::Article& b, std::uint64_t layout_seed);

enum class Choice { A, B, Tie };

std::string to_string(Choice c);
Choice parse_choice(const std::string& s);

struct AnnotationRecord {
  std::string goal_id;
  std::string annotator_id;
  Choice choice = Choice::Tie;
};

// Delimited text with header goal_id,annotator_id,choice.
std::vector<AnnotationRecord> parse_annotations(const std::string& text);
std::string format_annotations(const std::vector<AnnotationRecord>& records);

struct Assignment {
  std::string method_x;
  std::string method_y;
  std::map<std::string, std::string> method_of_a;  // goal_id -> method shown as A
};

struct WinRateReport {
  std::map<std::string, std::size_t> wins;
  std::map<std::string, std::optional<double>> win_rate;  // percent; empty when every goal tied
  std::size_t goals = 0;
  std::size_t tied = 0;
  int annotators_per_goal = 0;
};

WinRateReport win_rate(const std::vector<AnnotationRecord>& annotations, const Assignment& assignment);
nlohmann::json to_json(const WinRateReport& r);

// ---------------------------------------------------------------------------

struct EvalReport {
  Tally gf;
  Tally sf;
  std::map<int, Tally> sf_by_step_count;
  std::size_t sf_skipped = 0;
  double cic_mean = 0.0;
  std::size_t cic_articles = 0;
  double fid = 0.0;
  std::size_t generated_images = 0;
  std::size_t reference_images = 0;
  nlohmann::json fingerprint = nlohmann::json::object();

  double gf_accuracy() const { return gf.accuracy(); }
  double sf_accuracy() const { return sf.accuracy(); }
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

struct EvalOptions {
  int k = 4;
  std::uint64_t seed = 0;
  bool normalize_cic = false;
};

// GF distractors come from the reference goals; FID compares against every reference image.
EvalReport evaluate(const std::vector<corpus::Article>& generated, const std::vector<corpus::Article>& reference,
                    const embed::SemanticEmbedder& semantic, const embed::VisualEmbedder& visual,
                    const EvalOptions& options = {});

}  // namespace stackdiff::metrics
