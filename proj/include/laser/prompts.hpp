#pragma once

// Textual views of a CTR sample: the yes/no scoring prompt and the user-side and
// item-side knowledge prompts.

#include "laser/dataio.hpp"
#include "laser/error.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace laser {

class UnparseableAnswer : public Error {
 public:
  using Error::Error;
};

enum class Domain { movies, books };

Domain parse_domain(std::string_view name);
std::string_view to_string(Domain d);

// Template texts with {placeholder} slots. Known placeholders: history_list,
// target_title, user_attrs, item_category.
struct TemplateSet {
  std::string sample;
  std::string user;
  std::string item;

  static TemplateSet defaults(Domain domain);
  // Reads sample.txt, user.txt and item.txt from `dir`.
  static TemplateSet load(const std::filesystem::path& dir);

  // Tag of the knowledge-prompt wording; changes whenever user or item wording does.
  std::string version() const;
};

// Replaces every {name} in `tmpl`. Values are inserted verbatim and never rescanned.
// Throws InvalidArgument on an unknown or unterminated placeholder.
std::string fill_template(std::string_view tmpl,
                          const std::map<std::string, std::string, std::less<>>& values);

inline constexpr std::string_view kAnswerClause = "You should ONLY tell me yes or no.";

// "['0. Title (4 stars)', '1. Other (5 stars)']"
std::string render_rated_history(const std::vector<HistoryEntry>& history);

// Throws InvalidArgument when the sample has no history.
std::string render_sample_prompt(const CtrSample& sample, const TemplateSet& templates);
std::string render_sample_prompt(const CtrSample& sample);

// Removes the oldest entry of the bracketed history list and renumbers the rest.
// Returns nullopt when there is no entry left to drop.
std::optional<std::string> drop_oldest_history(std::string_view prompt);

// User-side text: attributes plus a fixed list of past titles (no ratings).
struct UserProfile {
  UserAttributes attributes;
  std::vector<std::string> titles;
};

// One profile per user, derived so that every sample of a user sees the same text.
// The profile history is the user's most recent interactions within `train`
// (falling back to the earliest sample of the user in `others`).
class ProfileBook {
 public:
  ProfileBook() = default;
  static ProfileBook build(const std::vector<CtrSample>& train,
                           std::initializer_list<const std::vector<CtrSample>*> others,
                           int max_titles = kDefaultHistoryLength);

  const UserProfile* find(std::int64_t user_id) const;
  const std::map<std::int64_t, UserProfile>& profiles() const { return profiles_; }

 private:
  std::map<std::int64_t, UserProfile> profiles_;
};

std::string render_user_attrs(const UserAttributes& attrs);
std::string render_user_prompt(const UserProfile& profile, const TemplateSet& templates);
std::string render_item_prompt(std::string_view title, std::string_view category,
                               const TemplateSet& templates);

struct KnowledgePrompts {
  std::string user_prompt;
  std::string item_prompt;
};

// user_prompt depends only on the user (via `profiles`), item_prompt only on the
// target item, so both are cacheable per entity.
KnowledgePrompts render_knowledge_prompts(const CtrSample& sample, const ProfileBook& profiles,
                                          const TemplateSet& templates);

std::string label_to_answer(int label);
int answer_to_label(std::string_view answer);

}  // namespace laser
