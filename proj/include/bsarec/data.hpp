#pragma once

// Corpus ingestion and splitting. The canonical corpus format is one user per
// line: whitespace-separated tokens, first token the user id, the rest the
// chronologically ordered item tokens. A category map file holds one
// "item_token category_label" pair per line.

#include "bsarec/signal.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace bsarec {

using ItemId = std::int32_t;
inline constexpr ItemId kPadItem = 0;

// Raised for unreadable or malformed input files (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UserHistory {
  std::string user_id;
  std::vector<ItemId> items;            // chronological, ids in 1..item_count
  std::vector<std::int32_t> categories; // aligned with items; empty until a
                                        // category map is loaded
};

struct InteractionCorpus {
  std::vector<UserHistory> users;
  std::vector<std::string> item_tokens;  // index = item id; [0] is the pad slot
  std::unordered_map<std::string, ItemId> item_vocabulary;
  std::vector<std::string> category_labels;  // index = category id (1-based)
  std::vector<std::int32_t> item_category;   // item id -> category id
  std::size_t dropped_short_users = 0;
  std::size_t duplicate_category_rows = 0;

  Index item_count() const { return static_cast<Index>(item_tokens.size()) - 1; }
  bool has_categories() const { return !item_category.empty(); }
};

struct DatasetStats {
  std::size_t user_count = 0;
  std::size_t item_count = 0;
  std::size_t interaction_count = 0;
  double average_length = 0.0;
  double sparsity = 0.0;  // 1 - interactions / (users * items)
};

// One model input: a window of exactly `max_len` item ids, right-aligned.
// position_mask marks the genuine history suffix (mirror/cyclic pads hold
// real item ids but are still masked out). For train examples the dense
// next-item targets are the window shifted left by one, with `target` as the
// final one; for valid/test examples `target` is the single held-out label.
struct SplitExample {
  Index user_index = 0;
  std::vector<ItemId> input_window;
  ItemId target = kPadItem;
  std::vector<std::uint8_t> position_mask;
  Index prefix_len = 0;  // history items preceding the target
};

struct SplitSet {
  std::vector<SplitExample> train, valid, test;
  Index max_len = 0;
  PaddingMode padding = PaddingMode::Zero;
  std::size_t empty_history_fallbacks = 0;
};

InteractionCorpus parse_corpus(const std::string& path);

// Attaches category labels to every history. Items absent from the map get a
// singleton category equal to their own token; repeated rows keep the first.
void load_category_map(const std::string& path, InteractionCorpus& corpus);

DatasetStats compute_stats(const InteractionCorpus& corpus);

// Leave-last-out: per user the last item is the test target, the second-to-
// last the validation target, and the prefix before those trains with dense
// next-item targets. Inputs keep the max_len most recent items, then are
// left-padded with the given mode.
SplitSet leave_last_out_split(const InteractionCorpus& corpus, Index max_len,
                              PaddingMode mode);

}  // namespace bsarec
