#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stackdiff/image.hpp"

namespace stackdiff::corpus {

// One (goal, step, image) row as it appears in a manifest, before grouping.
struct StepRecord {
  std::string goal_id;
  std::string goal_text;
  std::string category;
  int step_index = 1;  // 1-based
  std::string step_text;
  std::string image_path;  // relative to the corpus root
};

struct Article {
  std::string goal_id;
  std::string goal;
  std::vector<std::string> steps;
  std::vector<Image> images;
  std::string category;
};

// Dummy steps carry the empty string and the uniform mid-gray frame.
inline const std::string kDummyStepText;

struct PaddedArticle {
  std::string goal_id;
  std::string goal;
  std::vector<std::string> steps;
  std::vector<Image> images;
  int real_count = 0;
};

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct CorpusSplit {
  std::vector<Article> train;
  std::vector<Article> val;
  std::vector<Article> test;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

struct StepHistogram {
  std::map<int, std::size_t> counts;  // step count -> number of articles
  std::size_t total = 0;

  double fraction_at_most(int k) const;
  double mean_steps() const;
};

using ImageLoader = std::function<Image(const StepRecord&)>;

constexpr const char* kManifestName = "manifest.jsonl";

// Parses manifest text (one JSON object per line; blank lines ignored).
std::vector<StepRecord> parse_manifest(const std::string& text);
std::string format_record(const StepRecord& record);

std::vector<Article> regroup_by_goal(const std::vector<StepRecord>& records, const ImageLoader& load);
// With `skipped`, articles whose images cannot be read are dropped and counted
// instead of raising RecordError.
std::vector<Article> load_corpus(const std::filesystem::path& root, std::size_t* skipped = nullptr);

// Writes PNGs under root/images and a manifest describing them.
void write_corpus(const std::vector<Article>& articles, const std::filesystem::path& root);

CorpusSplit split_corpus(std::vector<Article> articles, const SplitRatios& ratios, std::uint64_t seed);

std::vector<Article> filter_category(const std::vector<Article>& articles, const std::string& category);

PaddedArticle normalize_length(const Article& article, int n_steps);
PaddedArticle normalize_length(const PaddedArticle& article, int n_steps);

StepHistogram corpus_stats(const std::vector<Article>& articles);

// Largest-remainder apportionment of `total` items over `weights`.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights);

}  // namespace stackdiff::corpus
