#pragma once

// Interaction logs -> chronological CTR samples -> deterministic splits.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace laser {

using UserAttributes = std::map<std::string, std::string>;

struct InteractionRecord {
  std::int64_t user_id = 0;
  std::int64_t item_id = 0;
  int rating = 0;  // 1..5
  std::int64_t timestamp = 0;
  std::string item_title;
  std::string item_category;
  UserAttributes user_attributes;

  bool operator==(const InteractionRecord&) const = default;
};

enum class InputFormat { movielens_dat, bookcrossing_csv, canonical_tsv };

InputFormat parse_input_format(std::string_view name);
std::string_view to_string(InputFormat format);

struct ParseResult {
  std::vector<InteractionRecord> records;
  std::size_t malformed_count = 0;
  // Well-formed lines intentionally not turned into records (BookCrossing implicit
  // feedback, rating 0).
  std::size_t skipped_count = 0;
  // 1-based line numbers of the first few malformed lines, for error reporting.
  std::vector<std::size_t> malformed_lines;
};

// Reads a raw log. For movielens_dat and bookcrossing_csv `path` is either the
// dataset directory or the ratings file; metadata files are looked up next to it.
// Throws IoError if unreadable and FormatError when more than half of the lines
// are malformed.
ParseResult parse_interactions(const std::filesystem::path& path, InputFormat format);

// Canonical TSV: header + one record per line.
inline constexpr std::string_view kCanonicalHeader =
    "user_id\titem_id\trating\ttimestamp\ttitle\tcategory\tattrs_json";
std::string to_canonical_line(const InteractionRecord& r);
void write_canonical_tsv(const std::filesystem::path& path,
                         const std::vector<InteractionRecord>& records);

struct HistoryEntry {
  std::int64_t item_id = 0;
  std::string item_title;
  int rating = 0;
  std::string item_category;
  std::int64_t timestamp = 0;
  // Vocabulary indices, assigned when the sample is encoded against a split vocab.
  int item_index = 0;
  int category_index = 0;

  bool operator==(const HistoryEntry&) const = default;
};

struct IdFeature {
  std::string field;
  int index = 0;
  bool operator==(const IdFeature&) const = default;
};

struct CtrSample {
  std::int64_t user_id = 0;
  std::int64_t target_item_id = 0;
  std::int64_t timestamp = 0;
  int rating = 0;
  int label = 0;
  std::string target_title;
  std::string target_category;
  UserAttributes user_attributes;
  std::vector<IdFeature> id_features;  // empty until encoded
  std::vector<HistoryEntry> history;   // chronological, most recent last

  bool operator==(const CtrSample&) const = default;
};

// Categorical vocabulary of one field. Index 0 is reserved for unseen values.
class FieldVocab {
 public:
  FieldVocab() = default;
  FieldVocab(std::string name, std::vector<std::string> values);

  const std::string& name() const { return name_; }
  const std::vector<std::string>& values() const { return values_; }
  int lookup(const std::string& value) const;
  int size() const { return static_cast<int>(values_.size()) + 1; }

 private:
  std::string name_;
  std::vector<std::string> values_;
  std::unordered_map<std::string, int> index_;
};

struct Vocabulary {
  std::vector<FieldVocab> fields;

  const FieldVocab& field(std::string_view name) const;
  std::optional<int> position(std::string_view name) const;
};

inline constexpr std::string_view kUserField = "user_id";
inline constexpr std::string_view kItemField = "item_id";
inline constexpr std::string_view kCategoryField = "category";
inline constexpr std::string_view kUserAttrPrefix = "user:";

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<CtrSample> train;
  std::vector<CtrSample> validation;
  std::vector<CtrSample> test;
  Vocabulary vocab;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

inline constexpr int kDefaultHistoryLength = 30;
inline constexpr int kDefaultRatingThreshold = 3;

// label = rating > threshold; history = up to `max_history` strictly earlier
// interactions of the same user. Interactions without any earlier interaction
// yield no sample.
std::vector<CtrSample> build_samples(const std::vector<InteractionRecord>& records,
                                     int max_history = kDefaultHistoryLength,
                                     int threshold = kDefaultRatingThreshold);

// Global chronological split; the seed only breaks timestamp ties.
DatasetSplit split_chronological(std::vector<CtrSample> samples, SplitRatios ratios,
                                 std::uint64_t seed);

// Encodes raw categorical values of `sample` into id_features and history indices.
void encode_sample(CtrSample& sample, const Vocabulary& vocab);

DatasetSplit subsample_train(const DatasetSplit& split, double fraction, std::uint64_t seed);

// Stable text form of a sample list, used for hashing and determinism checks.
std::string serialize_samples(const std::vector<CtrSample>& samples);
std::string samples_digest(const std::vector<CtrSample>& samples);

struct SplitManifest {
  std::uint64_t seed = 0;
  SplitRatios ratios;
  int threshold = kDefaultRatingThreshold;
  int history_length = kDefaultHistoryLength;
  std::string dataset;
  std::string domain = "movies";
};

// Writes interactions.tsv, {train,validation,test}.tsv, vocab.json and manifest.json.
void write_split(const std::filesystem::path& dir, const DatasetSplit& split,
                 const std::vector<InteractionRecord>& records, const SplitManifest& manifest);

struct LoadedSplit {
  DatasetSplit split;
  SplitManifest manifest;
  std::vector<InteractionRecord> records;
};

LoadedSplit load_split(const std::filesystem::path& dir);

}  // namespace laser
