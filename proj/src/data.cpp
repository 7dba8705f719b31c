#include "bsarec/data.hpp"

#include <fstream>
#include <sstream>

namespace bsarec {

namespace {

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream stream(line);
  std::string token;
  while (stream >> token) tokens.push_back(std::move(token));
  return tokens;
}

}  // namespace

InteractionCorpus parse_corpus(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw DataError("cannot open corpus file: " + path);

  InteractionCorpus corpus;
  corpus.item_tokens.push_back("<pad>");

  std::unordered_map<std::string, std::size_t> seen_users;
  std::string line;
  std::size_t line_number = 0;
  std::size_t parsed_lines = 0;

  while (std::getline(file, line)) {
    ++line_number;
    const std::vector<std::string> tokens = split_tokens(line);
    if (tokens.empty()) continue;  // blank lines are permitted
    ++parsed_lines;

    const std::string& user_token = tokens.front();
    auto [it, inserted] = seen_users.try_emplace(user_token, line_number);
    if (!inserted)
      throw DataError(path + ":" + std::to_string(line_number) +
                      ": duplicate user id '" + user_token +
                      "' (first seen on line " + std::to_string(it->second) + ")");

    if (tokens.size() - 1 < 3) {
      ++corpus.dropped_short_users;
      continue;
    }

    UserHistory history;
    history.user_id = user_token;
    history.items.reserve(tokens.size() - 1);
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      auto [vit, fresh] = corpus.item_vocabulary.try_emplace(
          tokens[i], static_cast<ItemId>(corpus.item_tokens.size()));
      if (fresh) corpus.item_tokens.push_back(tokens[i]);
      history.items.push_back(vit->second);
    }
    corpus.users.push_back(std::move(history));
  }

  if (parsed_lines == 0) throw DataError("corpus file is empty: " + path);
  return corpus;
}

void load_category_map(const std::string& path, InteractionCorpus& corpus) {
  std::ifstream file(path);
  if (!file) throw DataError("cannot open category map: " + path);

  std::unordered_map<std::string, std::string> item_to_label;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(file, line)) {
    ++line_number;
    const std::vector<std::string> tokens = split_tokens(line);
    if (tokens.empty()) continue;
    if (tokens.size() != 2)
      throw DataError(path + ":" + std::to_string(line_number) +
                      ": expected 'item_token category_label'");
    const bool inserted = item_to_label.try_emplace(tokens[0], tokens[1]).second;
    if (!inserted) ++corpus.duplicate_category_rows;  // first listing wins
  }

  std::unordered_map<std::string, std::int32_t> label_ids;
  corpus.category_labels.assign(1, "<none>");
  corpus.item_category.assign(corpus.item_tokens.size(), 0);

  for (ItemId id = 1; id < static_cast<ItemId>(corpus.item_tokens.size()); ++id) {
    const std::string& token = corpus.item_tokens[id];
    const auto it = item_to_label.find(token);
    // Unmapped items form a singleton category named after the item itself.
    const std::string& label = (it != item_to_label.end()) ? it->second : token;
    auto [lit, fresh] = label_ids.try_emplace(
        label, static_cast<std::int32_t>(corpus.category_labels.size()));
    if (fresh) corpus.category_labels.push_back(label);
    corpus.item_category[id] = lit->second;
  }

  for (UserHistory& user : corpus.users) {
    user.categories.resize(user.items.size());
    for (std::size_t i = 0; i < user.items.size(); ++i)
      user.categories[i] = corpus.item_category[user.items[i]];
  }
}

DatasetStats compute_stats(const InteractionCorpus& corpus) {
  DatasetStats stats;
  stats.user_count = corpus.users.size();
  stats.item_count = static_cast<std::size_t>(corpus.item_count());
  for (const UserHistory& user : corpus.users)
    stats.interaction_count += user.items.size();
  if (stats.user_count > 0)
    stats.average_length =
        static_cast<double>(stats.interaction_count) / stats.user_count;
  if (stats.user_count > 0 && stats.item_count > 0)
    stats.sparsity = 1.0 - static_cast<double>(stats.interaction_count) /
                               (static_cast<double>(stats.user_count) *
                                static_cast<double>(stats.item_count));
  return stats;
}

namespace {

// Window over the last max_len items of history[0..prefix_len), padded.
SplitExample make_example(const InteractionCorpus& corpus, Index user_index,
                          Index prefix_len, ItemId target, Index max_len,
                          PaddingMode mode, std::size_t& fallbacks) {
  const std::vector<ItemId>& items = corpus.users[user_index].items;
  const Index keep = std::min<Index>(prefix_len, max_len);
  std::vector<ItemId> recent(items.begin() + (prefix_len - keep),
                             items.begin() + prefix_len);

  bool fell_back = false;
  SplitExample example;
  example.user_index = user_index;
  example.input_window =
      pad_history(recent, static_cast<std::size_t>(max_len), mode, &fell_back);
  if (fell_back) ++fallbacks;
  example.target = target;
  example.prefix_len = prefix_len;
  example.position_mask.assign(static_cast<std::size_t>(max_len), 0);
  for (Index t = max_len - keep; t < max_len; ++t)
    example.position_mask[static_cast<std::size_t>(t)] = 1;
  return example;
}

}  // namespace

SplitSet leave_last_out_split(const InteractionCorpus& corpus, Index max_len,
                              PaddingMode mode) {
  if (max_len < 1)
    throw std::invalid_argument("leave_last_out_split: max_len must be >= 1");

  SplitSet splits;
  splits.max_len = max_len;
  splits.padding = mode;

  for (Index u = 0; u < static_cast<Index>(corpus.users.size()); ++u) {
    const Index n = static_cast<Index>(corpus.users[u].items.size());
    const std::vector<ItemId>& items = corpus.users[u].items;

    splits.test.push_back(make_example(corpus, u, n - 1, items[n - 1], max_len,
                                       mode, splits.empty_history_fallbacks));
    splits.valid.push_back(make_example(corpus, u, n - 2, items[n - 2], max_len,
                                        mode, splits.empty_history_fallbacks));
    // Train on the prefix before the validation label: inputs h_1..h_{n-3},
    // dense next-item targets ending at h_{n-2}. Length-3 histories have no
    // trainable position and contribute valid/test examples only.
    if (n >= 4)
      splits.train.push_back(make_example(corpus, u, n - 3, items[n - 3],
                                          max_len, mode,
                                          splits.empty_history_fallbacks));
  }
  return splits;
}

}  // namespace bsarec
