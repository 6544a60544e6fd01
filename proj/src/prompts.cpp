#include "laser/prompts.hpp"

#include "laser/digest.hpp"
#include "laser/io_util.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace laser {

namespace {

constexpr std::string_view kMovieSample =
    "The user watched the following movies in order in the past and rated them: {history_list}. "
    "Please deduce whether the user will like the movie {target_title}. "
    "You should ONLY tell me yes or no.";
constexpr std::string_view kMovieUser =
    "Given a user with profile ({user_attrs}) who recently watched the following movies: "
    "{history_list}. Summarize the preferences of this user on movies.";
constexpr std::string_view kMovieItem =
    "Introduce the movie {target_title}, which belongs to the category {item_category}, "
    "and describe its attributes and features.";

constexpr std::string_view kBookSample =
    "The user read the following books in order in the past and rated them: {history_list}. "
    "Please deduce whether the user will like the book {target_title}. "
    "You should ONLY tell me yes or no.";
constexpr std::string_view kBookUser =
    "Given a user with profile ({user_attrs}) who recently read the following books: "
    "{history_list}. Summarize the preferences of this user on books.";
constexpr std::string_view kBookItem =
    "Introduce the book {target_title}, which belongs to the category {item_category}, "
    "and describe its attributes and features.";

constexpr std::string_view kTemplateVersionPrefix = "kp1-";

std::string strip_trailing_newlines(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

std::string title_list(const std::vector<std::string>& titles) {
  std::string out = "[";
  for (size_t i = 0; i < titles.size(); ++i) {
    if (i) out += ", ";
    out += "'" + std::to_string(i) + ". " + titles[i] + "'";
  }
  out += "]";
  return out;
}

}  // namespace

Domain parse_domain(std::string_view name) {
  if (name == "movies") return Domain::movies;
  if (name == "books") return Domain::books;
  throw InvalidArgument("unknown domain '" + std::string(name) + "' (expected movies|books)");
}

std::string_view to_string(Domain d) { return d == Domain::movies ? "movies" : "books"; }

TemplateSet TemplateSet::defaults(Domain domain) {
  if (domain == Domain::books) {
    return {std::string(kBookSample), std::string(kBookUser), std::string(kBookItem)};
  }
  return {std::string(kMovieSample), std::string(kMovieUser), std::string(kMovieItem)};
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
  return {strip_trailing_newlines(read_file(dir / "sample.txt")),
          strip_trailing_newlines(read_file(dir / "user.txt")),
          strip_trailing_newlines(read_file(dir / "item.txt"))};
}

std::string TemplateSet::version() const {
  std::string digest = sha256_hex(user + '\x1f' + item);
  return std::string(kTemplateVersionPrefix) + digest.substr(0, 16);
}

std::string fill_template(std::string_view tmpl,
                          const std::map<std::string, std::string, std::less<>>& values) {
  std::string out;
  out.reserve(tmpl.size() + 64);
  size_t i = 0;
  while (i < tmpl.size()) {
    size_t open = tmpl.find('{', i);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(i));
      break;
    }
    out.append(tmpl.substr(i, open - i));
    size_t close = tmpl.find('}', open);
    if (close == std::string_view::npos) {
      throw InvalidArgument("unterminated placeholder in template");
    }
    std::string_view name = tmpl.substr(open + 1, close - open - 1);
    auto it = values.find(name);
    if (it == values.end()) {
      throw InvalidArgument("unknown placeholder {" + std::string(name) + "}");
    }
    out.append(it->second);
    i = close + 1;
  }
  return out;
}

std::string render_rated_history(const std::vector<HistoryEntry>& history) {
  std::string out = "[";
  for (size_t i = 0; i < history.size(); ++i) {
    if (i) out += ", ";
    out += "'" + std::to_string(i) + ". " + history[i].item_title + " (" +
           std::to_string(history[i].rating) + " stars)'";
  }
  out += "]";
  return out;
}

std::string render_sample_prompt(const CtrSample& sample, const TemplateSet& templates) {
  if (sample.history.empty()) {
    throw InvalidArgument("cannot render a scoring prompt for a sample without history");
  }
  return fill_template(templates.sample, {{"history_list", render_rated_history(sample.history)},
                                          {"target_title", sample.target_title}});
}

std::string render_sample_prompt(const CtrSample& sample) {
  static const TemplateSet kDefault = TemplateSet::defaults(Domain::movies);
  return render_sample_prompt(sample, kDefault);
}

std::optional<std::string> drop_oldest_history(std::string_view prompt) {
  const size_t open = prompt.find("['");
  if (open == std::string_view::npos) return std::nullopt;
  const size_t close = prompt.find("']", open);
  if (close == std::string_view::npos) return std::nullopt;
  std::string_view body = prompt.substr(open + 2, close - open - 2);

  std::vector<std::string_view> entries;
  size_t start = 0;
  while (true) {
    size_t sep = body.find("', '", start);
    entries.push_back(body.substr(start, sep == std::string_view::npos ? sep : sep - start));
    if (sep == std::string_view::npos) break;
    start = sep + 4;
  }
  entries.erase(entries.begin());

  std::string list = "[";
  for (size_t i = 0; i < entries.size(); ++i) {
    std::string_view e = entries[i];
    size_t dot = e.find(". ");
    bool numbered = dot != std::string_view::npos && dot > 0 &&
                    std::all_of(e.begin(), e.begin() + static_cast<long>(dot),
                                [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
    if (numbered) e.remove_prefix(dot + 2);
    if (i) list += ", ";
    list += "'";
    if (numbered) list += std::to_string(i) + ". ";
    list += e;
    list += "'";
  }
  list += "]";

  std::string out(prompt.substr(0, open));
  out += list;
  out += prompt.substr(close + 2);
  return out;
}

ProfileBook ProfileBook::build(const std::vector<CtrSample>& train,
                               std::initializer_list<const std::vector<CtrSample>*> others,
                               int max_titles) {
  ProfileBook book;
  // Latest training sample per user: its history plus its own target.
  std::map<std::int64_t, const CtrSample*> latest;
  for (const auto& s : train) {
    auto [it, inserted] = latest.try_emplace(s.user_id, &s);
    if (!inserted && s.timestamp >= it->second->timestamp) it->second = &s;
  }
  for (const auto& [user, s] : latest) {
    UserProfile p{s->user_attributes, {}};
    for (const auto& h : s->history) p.titles.push_back(h.item_title);
    p.titles.push_back(s->target_title);
    if (static_cast<int>(p.titles.size()) > max_titles) {
      p.titles.erase(p.titles.begin(), p.titles.end() - max_titles);
    }
    book.profiles_.emplace(user, std::move(p));
  }
  // Users never seen in training: history of their earliest sample, which precedes
  // every one of their targets.
  std::map<std::int64_t, const CtrSample*> earliest;
  for (const auto* part : others) {
    for (const auto& s : *part) {
      if (book.profiles_.count(s.user_id)) continue;
      auto [it, inserted] = earliest.try_emplace(s.user_id, &s);
      if (!inserted && s.timestamp < it->second->timestamp) it->second = &s;
    }
  }
  for (const auto& [user, s] : earliest) {
    UserProfile p{s->user_attributes, {}};
    for (const auto& h : s->history) p.titles.push_back(h.item_title);
    if (static_cast<int>(p.titles.size()) > max_titles) {
      p.titles.erase(p.titles.begin(), p.titles.end() - max_titles);
    }
    book.profiles_.emplace(user, std::move(p));
  }
  return book;
}

const UserProfile* ProfileBook::find(std::int64_t user_id) const {
  auto it = profiles_.find(user_id);
  return it == profiles_.end() ? nullptr : &it->second;
}

std::string render_user_attrs(const UserAttributes& attrs) {
  if (attrs.empty()) return "unknown";
  std::string out;
  for (const auto& [k, v] : attrs) {
    if (!out.empty()) out += ", ";
    out += k + ": " + v;
  }
  return out;
}

std::string render_user_prompt(const UserProfile& profile, const TemplateSet& templates) {
  return fill_template(templates.user, {{"user_attrs", render_user_attrs(profile.attributes)},
                                        {"history_list", title_list(profile.titles)}});
}

std::string render_item_prompt(std::string_view title, std::string_view category,
                               const TemplateSet& templates) {
  return fill_template(templates.item, {{"target_title", std::string(title)},
                                        {"item_category", std::string(category)}});
}

KnowledgePrompts render_knowledge_prompts(const CtrSample& sample, const ProfileBook& profiles,
                                          const TemplateSet& templates) {
  const UserProfile* p = profiles.find(sample.user_id);
  UserProfile fallback{sample.user_attributes, {}};
  return {render_user_prompt(p ? *p : fallback, templates),
          render_item_prompt(sample.target_title, sample.target_category, templates)};
}

std::string label_to_answer(int label) {
  if (label == 1) return "Yes";
  if (label == 0) return "No";
  throw InvalidArgument("label must be 0 or 1");
}

int answer_to_label(std::string_view answer) {
  size_t b = 0;
  while (b < answer.size() && std::isspace(static_cast<unsigned char>(answer[b]))) ++b;
  size_t e = b;
  while (e < answer.size() && std::isalpha(static_cast<unsigned char>(answer[e]))) ++e;
  std::string word(answer.substr(b, e - b));
  std::transform(word.begin(), word.end(), word.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (word == "yes") return 1;
  if (word == "no") return 0;
  throw UnparseableAnswer("cannot read a yes/no answer from '" + std::string(answer) + "'");
}

}  // namespace laser
