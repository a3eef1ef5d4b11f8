#pragma once

// Working-alliance rating: every turn is compared with each inventory item by
// embedding cosine, and the per-item scores are folded into the task, bond
// and goal scales through the inventory's sign key.

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "r2d2/corpus.hpp"
#include "r2d2/embed.hpp"
#include "r2d2/error.hpp"
#include "r2d2/serialize.hpp"

namespace r2d2::alliance {

enum class Scale { task = 0, bond = 1, goal = 2 };

inline constexpr std::array<Scale, 3> kScales = {Scale::task, Scale::bond, Scale::goal};

inline std::string_view to_string(Scale s) {
  switch (s) {
    case Scale::task: return "task";
    case Scale::bond: return "bond";
    case Scale::goal: return "goal";
  }
  return "task";
}

inline std::optional<Scale> parse_scale(std::string_view s) {
  for (auto scale : kScales)
    if (s == to_string(scale)) return scale;
  return std::nullopt;
}

struct InventoryItem {
  int id = 0;
  std::string text;
  Scale scale = Scale::task;
  int sign = 1;

  friend bool operator==(const InventoryItem&, const InventoryItem&) = default;
};

class Inventory {
 public:
  Inventory() = default;

  /// Validates ids (unique, contiguous from 1), signs, and scale coverage.
  /// Items are kept in id order regardless of input order.
  explicit Inventory(std::vector<InventoryItem> items) : items_(std::move(items)) {
    std::set<int> seen;
    for (const auto& item : items_) {
      if (item.sign != 1 && item.sign != -1)
        throw ValidationError("item " + std::to_string(item.id) + ": sign must be +1 or -1, got " +
                              std::to_string(item.sign));
      if (!seen.insert(item.id).second)
        throw ValidationError("item " + std::to_string(item.id) + ": duplicate item id");
      if (corpus::trim(item.text).empty())
        throw ValidationError("item " + std::to_string(item.id) + ": empty text");
    }
    std::sort(items_.begin(), items_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < items_.size(); ++i)
      if (items_[i].id != static_cast<int>(i) + 1)
        throw ValidationError("item " + std::to_string(items_[i].id) + ": ids must be contiguous from 1");
    for (auto s : kScales)
      if (member_count(s) == 0) throw ValidationError("scale '" + std::string(to_string(s)) + "' has no items");
  }

  const std::vector<InventoryItem>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t member_count(Scale s) const {
    return static_cast<std::size_t>(
        std::count_if(items_.begin(), items_.end(), [s](const auto& it) { return it.scale == s; }));
  }

  /// Embeds every item text with `e`; scoring requires a matching binding.
  void bind(const embed::TextEmbedder& e) {
    item_vectors_.clear();
    item_vectors_.reserve(items_.size());
    for (const auto& item : items_) item_vectors_.push_back(e.embed(item.text).vector);
    bound_fingerprint_ = e.fingerprint();
  }

  bool bound_to(const embed::TextEmbedder& e) const {
    return bound_fingerprint_ && *bound_fingerprint_ == e.fingerprint() &&
           item_vectors_.size() == items_.size() &&
           (items_.empty() || static_cast<std::size_t>(item_vectors_.front().size()) == e.dimension());
  }

  const std::vector<embed::Vector>& item_vectors() const { return item_vectors_; }

  friend bool operator==(const Inventory& a, const Inventory& b) { return a.items_ == b.items_; }

 private:
  std::vector<InventoryItem> items_;
  std::vector<embed::Vector> item_vectors_;
  std::optional<std::uint64_t> bound_fingerprint_;
};

struct AllianceScore {
  std::vector<double> per_item;
  double task = 0.0;
  double bond = 0.0;
  double goal = 0.0;
  bool degenerate = false;

  double operator[](Scale s) const {
    switch (s) {
      case Scale::task: return task;
      case Scale::bond: return bond;
      case Scale::goal: return goal;
    }
    return 0.0;
  }
};

/// Scale sums divided by member counts; for display only.
inline std::array<double, 3> normalized(const AllianceScore& score, const Inventory& inv) {
  std::array<double, 3> out{};
  for (auto s : kScales)
    out[static_cast<int>(s)] = score[s] / static_cast<double>(inv.member_count(s));
  return out;
}

inline AllianceScore score_text(const Inventory& inv, const embed::TextEmbedder& e, std::string_view text) {
  if (!inv.bound_to(e)) throw ContractError("inventory vectors were not computed with this embedder");
  const auto embedded = e.embed(text);
  AllianceScore score;
  score.degenerate = embedded.degenerate;
  score.per_item.assign(inv.size(), 0.0);
  if (embedded.degenerate) return score;
  for (std::size_t i = 0; i < inv.size(); ++i) {
    const double c = embed::cosine(embedded.vector, inv.item_vectors()[i]);
    score.per_item[i] = c;
    const auto& item = inv.items()[i];
    const double contribution = item.sign * c;
    switch (item.scale) {
      case Scale::task: score.task += contribution; break;
      case Scale::bond: score.bond += contribution; break;
      case Scale::goal: score.goal += contribution; break;
    }
  }
  return score;
}

inline AllianceScore score_turn(const Inventory& inv, const embed::TextEmbedder& e, const corpus::Turn& turn) {
  return score_text(inv, e, turn.text);
}

inline std::vector<AllianceScore> score_session(const Inventory& inv, const embed::TextEmbedder& e,
                                                const corpus::Session& session) {
  std::vector<AllianceScore> out;
  out.reserve(session.turns.size());
  for (const auto& t : session.turns) out.push_back(score_turn(inv, e, t));
  return out;
}

// Inventory files: one JSON record per line with id, text, scale and sign.
inline Inventory read_inventory(std::istream& in, const std::string& source = "<stream>") {
  std::vector<InventoryItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (corpus::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(source, line_no, std::string("invalid JSON: ") + e.what());
    }
    for (const char* field : {"id", "text", "scale", "sign"})
      if (!j.contains(field)) throw ParseError(source, line_no, std::string("missing field '") + field + "'");
    if (!j["id"].is_number_integer()) throw ParseError(source, line_no, "field 'id' is not an integer");
    InventoryItem item;
    item.id = j["id"].get<int>();
    if (!j["text"].is_string()) throw ParseError(source, line_no, "field 'text' is not a string");
    item.text = j["text"].get<std::string>();
    const auto scale = j["scale"].is_string() ? parse_scale(j["scale"].get<std::string>()) : std::nullopt;
    if (!scale)
      throw ValidationError("item " + std::to_string(item.id) + ": unknown scale " + j["scale"].dump());
    item.scale = *scale;
    const auto& sign = j["sign"];
    if (sign.is_number_integer()) item.sign = sign.get<int>();
    else if (sign.is_string() && sign == "+1") item.sign = 1;
    else if (sign.is_string() && sign == "-1") item.sign = -1;
    else item.sign = 0;
    if (item.sign != 1 && item.sign != -1)
      throw ValidationError("item " + std::to_string(item.id) + ": sign must be +1 or -1, got " + sign.dump());
    items.push_back(std::move(item));
  }
  return Inventory(std::move(items));
}

inline Inventory load_inventory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open inventory file '" + path.string() + "'");
  return read_inventory(in, path.string());
}

inline void write_inventory(std::ostream& out, const Inventory& inv) {
  for (const auto& item : inv.items()) {
    nlohmann::json j;
    j["id"] = item.id;
    j["text"] = item.text;
    j["scale"] = std::string(to_string(item.scale));
    j["sign"] = item.sign;
    out << j.dump() << '\n';
  }
}

inline void write(io::Writer& w, const Inventory& inv) {
  w.tag("INVT");
  w.u64(inv.size());
  for (const auto& item : inv.items()) {
    w.i64(item.id);
    w.str(item.text);
    w.u8(static_cast<std::uint8_t>(item.scale));
    w.i64(item.sign);
  }
}

inline Inventory read_inventory_binary(io::Reader& r) {
  r.expect_tag("INVT");
  const auto n = r.u64();
  std::vector<InventoryItem> items;
  for (std::uint64_t i = 0; i < n; ++i) {
    InventoryItem item;
    item.id = static_cast<int>(r.i64());
    item.text = r.str();
    const auto scale = r.u8();
    if (scale > 2) throw DataError("checkpoint inventory: bad scale code");
    item.scale = static_cast<Scale>(scale);
    item.sign = static_cast<int>(r.i64());
    items.push_back(std::move(item));
  }
  return Inventory(std::move(items));
}

/// Synthetic 36-item stand-in: ids cycle task, bond, goal; each scale has
/// eight positively keyed and four negatively keyed items.
inline Inventory default_inventory() {
  static const std::array<const char*, 36> texts = {
      "the activities we practice in session feel useful",
      "i feel my therapist genuinely cares about me",
      "we agree about what i want to achieve",
      "our sessions give me clear steps to try at home",
      "i trust the person i talk with here",
      "we share the same hopes for my future",
      "working through exercises together makes sense to me",
      "we respect each other and speak openly",
      "we are aiming toward outcomes that matter to me",
      "the homework we plan helps me make progress",
      "i feel appreciated and accepted in our conversations",
      "our objectives for therapy are agreed and important",
      "i understand how this practice connects to change",
      "there is warmth and honesty between us",
      "i know what we are trying to accomplish",
      "we choose tasks that fit what i need",
      "i feel safe sharing difficult feelings",
      "the changes we seek are the right ones",
      "trying the techniques we discuss feels worthwhile",
      "my counselor understands and supports me",
      "we set meaningful targets together",
      "the methods we use here are helpful and practical",
      "i like talking with my therapist",
      "we have a common vision of improvement",
      "the assignments we do seem pointless and confusing",
      "i feel judged and dismissed during sessions",
      "we disagree about what therapy should change",
      "i doubt these routines will ever work",
      "i am uncomfortable and guarded around my therapist",
      "my wishes and my therapist priorities conflict",
      "our sessions waste time on irrelevant drills",
      "sometimes i feel ignored or misunderstood",
      "i am unsure why we are here",
      "the plan feels muddled and unclear to me",
      "there is tension and distance between us",
      "we seem headed in different directions",
  };
  std::vector<InventoryItem> items;
  for (int i = 0; i < 36; ++i) {
    InventoryItem item;
    item.id = i + 1;
    item.text = texts[static_cast<std::size_t>(i)];
    item.scale = kScales[static_cast<std::size_t>(i % 3)];
    item.sign = i < 24 ? 1 : -1;
    items.push_back(std::move(item));
  }
  return Inventory(std::move(items));
}

}  // namespace r2d2::alliance
