#include "laser/dataio.hpp"

#include "laser/digest.hpp"
#include "laser/error.hpp"
#include "laser/io_util.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

namespace laser {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class Int>
bool parse_int(std::string_view s, Int& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '"' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::string_view> split_on(std::string_view line, std::string_view delim) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + delim.size();
  }
}

// BookCrossing CSV: ';' separated, fields optionally quoted, "" escapes a quote.
std::vector<std::string> split_quoted(std::string_view line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

bool is_valid_utf8(std::string_view s) {
  size_t i = 0;
  while (i < s.size()) {
    auto c = static_cast<unsigned char>(s[i]);
    size_t n = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xe ? 3 : (c >> 3) == 0x1e ? 4 : 0;
    if (n == 0 || i + n > s.size()) return false;
    for (size_t k = 1; k < n; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xc0) != 0x80) return false;
    }
    i += n;
  }
  return true;
}

// MovieLens and BookCrossing ship Latin-1 text.
std::string to_utf8(std::string_view s) {
  if (is_valid_utf8(s)) return std::string(s);
  std::string out;
  out.reserve(s.size() + 8);
  for (char ch : s) {
    auto c = static_cast<unsigned char>(ch);
    if (c < 0x80) {
      out.push_back(ch);
    } else {
      out.push_back(static_cast<char>(0xc0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
    }
  }
  return out;
}

std::string sanitize_field(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  return out;
}

bool record_valid(const InteractionRecord& r) {
  return r.rating >= 1 && r.rating <= 5 && r.timestamp >= 0 && !r.item_title.empty();
}

class LineCounter {
 public:
  explicit LineCounter(ParseResult& result) : result_(result) {}
  void malformed(size_t line_no) {
    ++result_.malformed_count;
    if (result_.malformed_lines.size() < 20) result_.malformed_lines.push_back(line_no);
  }
  void accept(InteractionRecord r, size_t line_no) {
    if (record_valid(r)) {
      result_.records.push_back(std::move(r));
    } else {
      malformed(line_no);
    }
  }

 private:
  ParseResult& result_;
};

void check_malformed_ratio(const ParseResult& result, const fs::path& path) {
  const size_t total = result.records.size() + result.malformed_count + result.skipped_count;
  if (total > 0 && result.malformed_count * 2 > total) {
    std::ostringstream msg;
    msg << path.string() << ": " << result.malformed_count << " of " << total
        << " lines are malformed; first at line "
        << (result.malformed_lines.empty() ? 0 : result.malformed_lines.front())
        << " (format mismatch?)";
    throw FormatError(msg.str());
  }
}

fs::path resolve_in_dir(const fs::path& path, const char* file_name) {
  if (fs::is_directory(path)) return path / file_name;
  return path;
}

fs::path sibling(const fs::path& path, const char* file_name) {
  if (fs::is_directory(path)) return path / file_name;
  return path.parent_path() / file_name;
}

ParseResult parse_movielens(const fs::path& path) {
  const fs::path ratings = resolve_in_dir(path, "ratings.dat");
  const fs::path movies = sibling(path, "movies.dat");
  const fs::path users = sibling(path, "users.dat");

  std::unordered_map<std::int64_t, std::pair<std::string, std::string>> movie_meta;
  if (fs::exists(movies)) {
    for (const std::string& raw : read_lines(movies)) {
      auto f = split_on(raw, "::");
      std::int64_t id = 0;
      if (f.size() != 3 || !parse_int(f[0], id)) continue;
      std::string genres(f[2]);
      while (!genres.empty() && genres.back() == '\r') genres.pop_back();
      std::string first_genre = genres.substr(0, genres.find('|'));
      movie_meta[id] = {sanitize_field(to_utf8(f[1])), sanitize_field(to_utf8(first_genre))};
    }
  }
  std::unordered_map<std::int64_t, UserAttributes> user_meta;
  if (fs::exists(users)) {
    for (const std::string& raw : read_lines(users)) {
      auto f = split_on(raw, "::");
      std::int64_t id = 0;
      if (f.size() < 4 || !parse_int(f[0], id)) continue;
      user_meta[id] = {{"gender", std::string(f[1])},
                       {"age", std::string(f[2])},
                       {"occupation", std::string(f[3])}};
    }
  }

  ParseResult result;
  LineCounter counter(result);
  size_t line_no = 0;
  for (const std::string& raw : read_lines(ratings)) {
    ++line_no;
    if (raw.empty() || raw == "\r") continue;
    auto f = split_on(raw, "::");
    InteractionRecord r;
    if (f.size() != 4 || !parse_int(f[0], r.user_id) || !parse_int(f[1], r.item_id) ||
        !parse_int(f[2], r.rating) || !parse_int(f[3], r.timestamp)) {
      counter.malformed(line_no);
      continue;
    }
    if (auto it = movie_meta.find(r.item_id); it != movie_meta.end()) {
      r.item_title = it->second.first;
      r.item_category = it->second.second;
    }
    if (auto it = user_meta.find(r.user_id); it != user_meta.end()) r.user_attributes = it->second;
    counter.accept(std::move(r), line_no);
  }
  check_malformed_ratio(result, ratings);
  return result;
}

ParseResult parse_bookcrossing(const fs::path& path) {
  const fs::path ratings = resolve_in_dir(path, "BX-Book-Ratings.csv");
  const fs::path books = sibling(path, "BX-Books.csv");
  const fs::path users = sibling(path, "BX-Users.csv");

  std::unordered_map<std::string, std::pair<std::string, std::string>> book_meta;
  if (fs::exists(books)) {
    bool header = true;
    for (const std::string& raw : read_lines(books)) {
      if (std::exchange(header, false)) continue;
      auto f = split_quoted(raw, ';');
      if (f.size() < 5) continue;
      book_meta[f[0]] = {sanitize_field(to_utf8(f[1])), sanitize_field(to_utf8(f[4]))};
    }
  }
  std::unordered_map<std::int64_t, UserAttributes> user_meta;
  if (fs::exists(users)) {
    bool header = true;
    for (const std::string& raw : read_lines(users)) {
      if (std::exchange(header, false)) continue;
      auto f = split_quoted(raw, ';');
      std::int64_t id = 0;
      if (f.size() < 3 || !parse_int(f[0], id)) continue;
      UserAttributes attrs{{"location", sanitize_field(to_utf8(f[1]))}};
      if (f[2] != "NULL") attrs["age"] = f[2];
      user_meta[id] = std::move(attrs);
    }
  }

  ParseResult result;
  LineCounter counter(result);
  std::unordered_map<std::string, std::int64_t> isbn_ids;
  size_t line_no = 0;
  for (const std::string& raw : read_lines(ratings)) {
    ++line_no;
    if (line_no == 1) continue;  // header
    if (raw.empty() || raw == "\r") continue;
    auto f = split_quoted(raw, ';');
    InteractionRecord r;
    int rating10 = 0;
    if (f.size() != 3 || !parse_int(std::string_view(f[0]), r.user_id) || f[1].empty() ||
        !parse_int(std::string_view(f[2]), rating10) || rating10 < 0 || rating10 > 10) {
      counter.malformed(line_no);
      continue;
    }
    if (rating10 == 0) {  // implicit interaction, no explicit rating
      ++result.skipped_count;
      continue;
    }
    auto [it, inserted] = isbn_ids.try_emplace(f[1], static_cast<std::int64_t>(isbn_ids.size()) + 1);
    r.item_id = it->second;
    r.rating = (rating10 + 1) / 2;
    r.timestamp = static_cast<std::int64_t>(line_no);
    if (auto m = book_meta.find(f[1]); m != book_meta.end()) {
      r.item_title = m->second.first;
      r.item_category = m->second.second;
    }
    if (auto u = user_meta.find(r.user_id); u != user_meta.end()) r.user_attributes = u->second;
    counter.accept(std::move(r), line_no);
  }
  check_malformed_ratio(result, ratings);
  return result;
}

bool parse_canonical_line(std::string_view line, InteractionRecord& r) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  auto f = split_on(line, "\t");
  if (f.size() != 7) return false;
  if (!parse_int(f[0], r.user_id) || !parse_int(f[1], r.item_id) || !parse_int(f[2], r.rating) ||
      !parse_int(f[3], r.timestamp)) {
    return false;
  }
  r.item_title = std::string(f[4]);
  r.item_category = std::string(f[5]);
  r.user_attributes.clear();
  if (!f[6].empty()) {
    json attrs = json::parse(f[6], nullptr, /*allow_exceptions=*/false);
    if (!attrs.is_object()) return false;
    for (auto& [k, v] : attrs.items()) {
      if (!v.is_string()) return false;
      r.user_attributes[k] = v.get<std::string>();
    }
  }
  return true;
}

ParseResult parse_canonical(const fs::path& path) {
  ParseResult result;
  LineCounter counter(result);
  size_t line_no = 0;
  for (const std::string& raw : read_lines(path)) {
    ++line_no;
    if (line_no == 1 && std::string_view(raw).starts_with("user_id\t")) continue;
    if (raw.empty() || raw == "\r") continue;
    InteractionRecord r;
    if (!parse_canonical_line(raw, r)) {
      counter.malformed(line_no);
      continue;
    }
    counter.accept(std::move(r), line_no);
  }
  check_malformed_ratio(result, path);
  return result;
}

using SampleKey = std::tuple<std::int64_t, std::int64_t, std::int64_t>;

SampleKey key_of(const CtrSample& s) { return {s.user_id, s.target_item_id, s.timestamp}; }
SampleKey key_of(const InteractionRecord& r) { return {r.user_id, r.item_id, r.timestamp}; }

InteractionRecord record_of(const CtrSample& s) {
  return InteractionRecord{s.user_id,        s.target_item_id,  s.rating,         s.timestamp,
                           s.target_title,   s.target_category, s.user_attributes};
}

std::string user_attr_field(const std::string& key) {
  return std::string(kUserAttrPrefix) + key;
}

}  // namespace

InputFormat parse_input_format(std::string_view name) {
  if (name == "movielens_dat") return InputFormat::movielens_dat;
  if (name == "bookcrossing_csv") return InputFormat::bookcrossing_csv;
  if (name == "canonical_tsv") return InputFormat::canonical_tsv;
  throw InvalidArgument("unknown input format '" + std::string(name) + "'");
}

std::string_view to_string(InputFormat format) {
  switch (format) {
    case InputFormat::movielens_dat: return "movielens_dat";
    case InputFormat::bookcrossing_csv: return "bookcrossing_csv";
    case InputFormat::canonical_tsv: return "canonical_tsv";
  }
  return "?";
}

ParseResult parse_interactions(const fs::path& path, InputFormat format) {
  if (!fs::exists(path)) throw IoError("cannot read " + path.string() + ": no such file");
  switch (format) {
    case InputFormat::movielens_dat: return parse_movielens(path);
    case InputFormat::bookcrossing_csv: return parse_bookcrossing(path);
    case InputFormat::canonical_tsv: return parse_canonical(path);
  }
  throw InvalidArgument("unknown input format");
}

std::string to_canonical_line(const InteractionRecord& r) {
  json attrs = json::object();
  for (const auto& [k, v] : r.user_attributes) attrs[k] = v;
  std::ostringstream os;
  os << r.user_id << '\t' << r.item_id << '\t' << r.rating << '\t' << r.timestamp << '\t'
     << sanitize_field(r.item_title) << '\t' << sanitize_field(r.item_category) << '\t'
     << attrs.dump();
  return os.str();
}

void write_canonical_tsv(const fs::path& path, const std::vector<InteractionRecord>& records) {
  std::string text(kCanonicalHeader);
  text.push_back('\n');
  for (const auto& r : records) {
    text += to_canonical_line(r);
    text.push_back('\n');
  }
  write_file_atomic(path, text);
}

FieldVocab::FieldVocab(std::string name, std::vector<std::string> values)
    : name_(std::move(name)), values_(std::move(values)) {
  for (size_t i = 0; i < values_.size(); ++i) index_.emplace(values_[i], static_cast<int>(i) + 1);
}

int FieldVocab::lookup(const std::string& value) const {
  auto it = index_.find(value);
  return it == index_.end() ? 0 : it->second;
}

const FieldVocab& Vocabulary::field(std::string_view name) const {
  for (const auto& f : fields) {
    if (f.name() == name) return f;
  }
  throw NotFoundError("vocabulary has no field '" + std::string(name) + "'");
}

std::optional<int> Vocabulary::position(std::string_view name) const {
  for (size_t i = 0; i < fields.size(); ++i) {
    if (fields[i].name() == name) return static_cast<int>(i);
  }
  return std::nullopt;
}

std::vector<CtrSample> build_samples(const std::vector<InteractionRecord>& records,
                                     int max_history, int threshold) {
  if (max_history < 1) throw InvalidArgument("history length must be >= 1");
  if (threshold < 1 || threshold > 5) throw InvalidArgument("rating threshold must be in [1,5]");

  // Last occurrence of a (user, item, timestamp) key wins.
  std::map<std::int64_t, std::map<std::pair<std::int64_t, std::int64_t>, const InteractionRecord*>>
      by_user;
  for (const auto& r : records) by_user[r.user_id][{r.timestamp, r.item_id}] = &r;

  std::vector<CtrSample> samples;
  for (const auto& [user, events] : by_user) {
    std::vector<const InteractionRecord*> seq;
    seq.reserve(events.size());
    for (const auto& [key, rec] : events) seq.push_back(rec);
    size_t first_at_time = 0;
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i > 0 && seq[i]->timestamp != seq[i - 1]->timestamp) first_at_time = i;
      if (first_at_time == 0) continue;  // nothing strictly earlier
      const InteractionRecord& t = *seq[i];
      CtrSample s;
      s.user_id = user;
      s.target_item_id = t.item_id;
      s.timestamp = t.timestamp;
      s.rating = t.rating;
      s.label = t.rating > threshold ? 1 : 0;
      s.target_title = t.item_title;
      s.target_category = t.item_category;
      s.user_attributes = t.user_attributes;
      size_t begin = first_at_time > static_cast<size_t>(max_history)
                         ? first_at_time - static_cast<size_t>(max_history)
                         : 0;
      for (size_t h = begin; h < first_at_time; ++h) {
        const InteractionRecord& p = *seq[h];
        s.history.push_back(HistoryEntry{p.item_id, p.item_title, p.rating, p.item_category,
                                         p.timestamp});
      }
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

void encode_sample(CtrSample& sample, const Vocabulary& vocab) {
  sample.id_features.clear();
  for (const auto& f : vocab.fields) {
    std::string value;
    if (f.name() == kUserField) {
      value = std::to_string(sample.user_id);
    } else if (f.name() == kItemField) {
      value = std::to_string(sample.target_item_id);
    } else if (f.name() == kCategoryField) {
      value = sample.target_category;
    } else if (f.name().starts_with(kUserAttrPrefix)) {
      auto it = sample.user_attributes.find(f.name().substr(kUserAttrPrefix.size()));
      if (it != sample.user_attributes.end()) value = it->second;
    }
    sample.id_features.push_back(IdFeature{f.name(), f.lookup(value)});
  }
  const FieldVocab& items = vocab.field(kItemField);
  const FieldVocab& cats = vocab.field(kCategoryField);
  for (auto& h : sample.history) {
    h.item_index = items.lookup(std::to_string(h.item_id));
    h.category_index = cats.lookup(h.item_category);
  }
}

namespace {

Vocabulary build_vocab(const std::vector<CtrSample>& train, const std::set<std::string>& attr_keys) {
  std::set<std::string> users, items, cats;
  std::map<std::string, std::set<std::string>> attrs;
  for (const auto& s : train) {
    users.insert(std::to_string(s.user_id));
    items.insert(std::to_string(s.target_item_id));
    cats.insert(s.target_category);
    for (const auto& h : s.history) {
      items.insert(std::to_string(h.item_id));
      cats.insert(h.item_category);
    }
    for (const auto& k : attr_keys) {
      auto it = s.user_attributes.find(k);
      attrs[k].insert(it == s.user_attributes.end() ? std::string() : it->second);
    }
  }
  auto vec = [](const std::set<std::string>& s) { return std::vector<std::string>(s.begin(), s.end()); };
  Vocabulary v;
  v.fields.emplace_back(std::string(kUserField), vec(users));
  v.fields.emplace_back(std::string(kItemField), vec(items));
  v.fields.emplace_back(std::string(kCategoryField), vec(cats));
  for (const auto& k : attr_keys) v.fields.emplace_back(user_attr_field(k), vec(attrs[k]));
  return v;
}

}  // namespace

DatasetSplit split_chronological(std::vector<CtrSample> samples, SplitRatios ratios,
                                 std::uint64_t seed) {
  if (samples.size() < 3) throw InvalidArgument("split needs at least 3 samples");
  if (ratios.train <= 0 || ratios.validation <= 0 || ratios.test <= 0 ||
      std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw InvalidArgument("split ratios must be positive and sum to 1");
  }

  std::mt19937_64 rng(seed);
  std::vector<std::uint64_t> tie(samples.size());
  for (auto& t : tie) t = rng();
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return std::tie(samples[a].timestamp, tie[a]) < std::tie(samples[b].timestamp, tie[b]);
  });

  const auto n = static_cast<long>(samples.size());
  long n_train = std::lround(static_cast<double>(n) * ratios.train);
  long n_val = std::lround(static_cast<double>(n) * (ratios.train + ratios.validation)) - n_train;
  n_train = std::clamp(n_train, 1L, n - 2);
  n_val = std::clamp(n_val, 1L, n - n_train - 1);

  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  std::set<std::string> attr_keys;
  for (long i = 0; i < n; ++i) {
    CtrSample& s = samples[order[static_cast<size_t>(i)]];
    for (const auto& [k, v] : s.user_attributes) attr_keys.insert(k);
    auto& dest = i < n_train ? split.train : i < n_train + n_val ? split.validation : split.test;
    dest.push_back(std::move(s));
  }
  split.vocab = build_vocab(split.train, attr_keys);
  for (auto* part : {&split.train, &split.validation, &split.test}) {
    for (auto& s : *part) encode_sample(s, split.vocab);
  }
  return split;
}

DatasetSplit subsample_train(const DatasetSplit& split, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("fraction must be in (0, 1]");
  const size_t n = split.train.size();
  const auto k = static_cast<size_t>(std::llround(fraction * static_cast<double>(n)));
  if (k == 0) throw InvalidArgument("subsampled training set would be empty");
  DatasetSplit out;
  out.validation = split.validation;
  out.test = split.test;
  out.vocab = split.vocab;
  out.seed = split.seed;
  out.ratios = split.ratios;
  if (k == n) {
    out.train = split.train;
    return out;
  }
  // Partial Fisher-Yates; chosen samples keep their chronological order.
  std::mt19937_64 rng(seed);
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  out.train.reserve(k);
  for (size_t i : idx) out.train.push_back(split.train[i]);
  return out;
}

std::string serialize_samples(const std::vector<CtrSample>& samples) {
  std::ostringstream os;
  for (const auto& s : samples) {
    os << to_canonical_line(record_of(s)) << '\t' << s.label << '\t';
    for (const auto& f : s.id_features) os << f.field << '=' << f.index << ',';
    os << '\t';
    for (const auto& h : s.history) {
      os << h.item_id << ':' << h.timestamp << ':' << h.rating << ':' << h.item_index << ':'
         << h.category_index << '|';
    }
    os << '\n';
  }
  return os.str();
}

std::string samples_digest(const std::vector<CtrSample>& samples) {
  return sha256_hex(serialize_samples(samples));
}

namespace {

json vocab_to_json(const Vocabulary& v) {
  json fields = json::array();
  for (const auto& f : v.fields) fields.push_back({{"name", f.name()}, {"values", f.values()}});
  return json{{"fields", fields}};
}

Vocabulary vocab_from_json(const json& j) {
  Vocabulary v;
  for (const auto& f : j.at("fields")) {
    v.fields.emplace_back(f.at("name").get<std::string>(),
                          f.at("values").get<std::vector<std::string>>());
  }
  return v;
}

std::vector<InteractionRecord> records_of(const std::vector<CtrSample>& samples) {
  std::vector<InteractionRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(record_of(s));
  return out;
}

}  // namespace

void write_split(const fs::path& dir, const DatasetSplit& split,
                 const std::vector<InteractionRecord>& records, const SplitManifest& manifest) {
  fs::create_directories(dir);
  write_canonical_tsv(dir / "interactions.tsv", records);
  write_canonical_tsv(dir / "train.tsv", records_of(split.train));
  write_canonical_tsv(dir / "validation.tsv", records_of(split.validation));
  write_canonical_tsv(dir / "test.tsv", records_of(split.test));
  write_file_atomic(dir / "vocab.json", vocab_to_json(split.vocab).dump(1) + "\n");
  json m = {
      {"seed", manifest.seed},
      {"ratios",
       {{"train", manifest.ratios.train},
        {"validation", manifest.ratios.validation},
        {"test", manifest.ratios.test}}},
      {"threshold", manifest.threshold},
      {"K", manifest.history_length},
      {"dataset", manifest.dataset},
      {"domain", manifest.domain},
      {"counts",
       {{"interactions", records.size()},
        {"train", split.train.size()},
        {"validation", split.validation.size()},
        {"test", split.test.size()}}},
  };
  write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

LoadedSplit load_split(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) {
    throw NotFoundError("no split manifest in " + dir.string());
  }
  LoadedSplit out;
  json m = json::parse(read_file(dir / "manifest.json"));
  out.manifest.seed = m.at("seed").get<std::uint64_t>();
  out.manifest.ratios = {m.at("ratios").at("train").get<double>(),
                         m.at("ratios").at("validation").get<double>(),
                         m.at("ratios").at("test").get<double>()};
  out.manifest.threshold = m.at("threshold").get<int>();
  out.manifest.history_length = m.at("K").get<int>();
  out.manifest.dataset = m.value("dataset", "");
  out.manifest.domain = m.value("domain", "movies");

  out.records = parse_interactions(dir / "interactions.tsv", InputFormat::canonical_tsv).records;
  std::vector<CtrSample> samples =
      build_samples(out.records, out.manifest.history_length, out.manifest.threshold);
  std::map<SampleKey, size_t> by_key;
  for (size_t i = 0; i < samples.size(); ++i) by_key[key_of(samples[i])] = i;

  DatasetSplit& split = out.split;
  split.seed = out.manifest.seed;
  split.ratios = out.manifest.ratios;
  split.vocab = vocab_from_json(json::parse(read_file(dir / "vocab.json")));
  auto fill = [&](const char* name, std::vector<CtrSample>& dest) {
    auto part = parse_interactions(dir / name, InputFormat::canonical_tsv);
    if (part.malformed_count > 0) throw FormatError(dir.string() + "/" + name + ": malformed lines");
    for (const auto& r : part.records) {
      auto it = by_key.find(key_of(r));
      if (it == by_key.end()) {
        throw FormatError(dir.string() + "/" + name + ": record without a sample (user " +
                          std::to_string(r.user_id) + ", item " + std::to_string(r.item_id) + ")");
      }
      CtrSample s = samples[it->second];
      encode_sample(s, split.vocab);
      dest.push_back(std::move(s));
    }
  };
  fill("train.tsv", split.train);
  fill("validation.tsv", split.validation);
  fill("test.tsv", split.test);
  return out;
}

}  // namespace laser
