#pragma once

// Dialogue data model: turns, sessions, canonical patient/therapist pairing,
// line-delimited corpus files, and session-level train/test splitting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "r2d2/error.hpp"
#include "r2d2/random.hpp"

namespace r2d2::corpus {

enum class Speaker { patient, therapist };

enum class Condition { anxiety, depression, schizophrenia, suicidal, unlabeled };

inline std::string_view to_string(Speaker s) {
  return s == Speaker::patient ? "patient" : "therapist";
}

inline std::optional<Speaker> parse_speaker(std::string_view s) {
  if (s == "patient") return Speaker::patient;
  if (s == "therapist") return Speaker::therapist;
  return std::nullopt;
}

inline std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::anxiety: return "anxiety";
    case Condition::depression: return "depression";
    case Condition::schizophrenia: return "schizophrenia";
    case Condition::suicidal: return "suicidal";
    case Condition::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

inline std::optional<Condition> parse_condition(std::string_view s) {
  for (auto c : {Condition::anxiety, Condition::depression, Condition::schizophrenia,
                 Condition::suicidal, Condition::unlabeled})
    if (s == to_string(c)) return c;
  return std::nullopt;
}

struct Turn {
  std::string session_id;
  std::size_t index = 0;
  Speaker speaker = Speaker::patient;
  std::string text;
  std::optional<std::int64_t> timestamp_ms;

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct TurnPair {
  Turn patient_turn;
  Turn therapist_turn;

  friend bool operator==(const TurnPair&, const TurnPair&) = default;
};

struct Session {
  std::string session_id;
  Condition condition = Condition::unlabeled;
  std::vector<Turn> turns;

  friend bool operator==(const Session&, const Session&) = default;
};

struct CorpusSplit {
  std::vector<Session> train;
  std::vector<Session> test;
  std::uint64_t seed = 0;
};

enum class Format { jsonl, tsv };

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

namespace detail {

struct RawRecord {
  std::string session_id;
  std::optional<Condition> condition;
  Speaker speaker = Speaker::patient;
  std::string text;
  std::optional<std::size_t> index;
  std::optional<std::int64_t> timestamp_ms;
  std::size_t line = 0;
};

inline std::optional<RawRecord> parse_json_record(std::string_view line, std::size_t line_no,
                                                  const std::string& source) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source, line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(source, line_no, "record is not an object");
  // Service logs interleave other event records; only turn records are corpus data.
  if (j.contains("type") && j["type"] != "turn") return std::nullopt;

  auto require_string = [&](const char* field) -> std::string {
    if (!j.contains(field)) throw ParseError(source, line_no, std::string("missing field '") + field + "'");
    if (!j[field].is_string())
      throw ParseError(source, line_no, std::string("field '") + field + "' is not a string");
    return j[field].get<std::string>();
  };

  RawRecord r;
  r.line = line_no;
  r.session_id = require_string("session_id");
  const auto speaker = require_string("speaker");
  const auto parsed_speaker = parse_speaker(speaker);
  if (!parsed_speaker) throw ParseError(source, line_no, "unknown speaker '" + speaker + "'");
  r.speaker = *parsed_speaker;
  r.text = require_string("text");
  if (j.contains("condition") && !j["condition"].is_null()) {
    if (!j["condition"].is_string()) throw ParseError(source, line_no, "field 'condition' is not a string");
    const auto c = parse_condition(j["condition"].get<std::string>());
    if (!c) throw ParseError(source, line_no, "unknown condition '" + j["condition"].get<std::string>() + "'");
    r.condition = *c;
  }
  if (j.contains("index") && !j["index"].is_null()) {
    if (!j["index"].is_number_unsigned()) throw ParseError(source, line_no, "field 'index' is not a non-negative integer");
    r.index = j["index"].get<std::size_t>();
  }
  if (j.contains("timestamp") && !j["timestamp"].is_null()) {
    if (!j["timestamp"].is_number_integer()) throw ParseError(source, line_no, "field 'timestamp' is not an integer");
    r.timestamp_ms = j["timestamp"].get<std::int64_t>();
  }
  return r;
}

inline std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace detail

/// Parses a corpus stream. JSONL records carry session_id, speaker, text and
/// optionally condition, index, timestamp; TSV files need a header row naming
/// the same columns.
inline std::vector<Session> read_corpus(std::istream& in, Format format,
                                        const std::string& source = "<stream>") {
  std::vector<detail::RawRecord> records;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (format == Format::jsonl) {
      if (auto r = detail::parse_json_record(line, line_no, source)) records.push_back(std::move(*r));
      continue;
    }
    auto cells = detail::split_tabs(line);
    if (header.empty()) {
      header = std::move(cells);
      for (const char* needed : {"session_id", "speaker", "text"})
        if (std::find(header.begin(), header.end(), needed) == header.end())
          throw ParseError(source, line_no, std::string("header lacks column '") + needed + "'");
      continue;
    }
    if (cells.size() != header.size())
      throw ParseError(source, line_no, "expected " + std::to_string(header.size()) + " columns");
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (cells[c].empty()) continue;
      if (header[c] == "index" || header[c] == "timestamp") {
        try {
          std::size_t used = 0;
          const long long v = std::stoll(cells[c], &used);
          if (used != cells[c].size()) throw std::invalid_argument("trailing");
          if (header[c] == "index" && v >= 0) j[header[c]] = static_cast<std::uint64_t>(v);
          else j[header[c]] = v;
        } catch (const std::exception&) {
          throw ParseError(source, line_no, "column '" + header[c] + "' is not an integer");
        }
      } else {
        j[header[c]] = cells[c];
      }
    }
    if (auto r = detail::parse_json_record(j.dump(), line_no, source)) records.push_back(std::move(*r));
  }
  if (records.empty()) throw DataError(source + ": empty corpus");

  std::vector<Session> sessions;
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<std::vector<std::size_t>> lines_of;
  for (auto& r : records) {
    if (trim(r.text).empty()) throw ParseError(source, r.line, "turn text is empty");
    auto [it, inserted] = slot.try_emplace(r.session_id, sessions.size());
    if (inserted) {
      sessions.push_back(Session{r.session_id, Condition::unlabeled, {}});
      lines_of.emplace_back();
    }
    Session& s = sessions[it->second];
    if (r.condition) {
      if (s.turns.empty() || s.condition == Condition::unlabeled) s.condition = *r.condition;
      else if (s.condition != *r.condition)
        throw ParseError(source, r.line, "condition conflicts with earlier records of session '" + r.session_id + "'");
    }
    Turn t;
    t.session_id = r.session_id;
    t.index = r.index.value_or(s.turns.size());
    t.speaker = r.speaker;
    t.text = std::move(r.text);
    t.timestamp_ms = r.timestamp_ms;
    s.turns.push_back(std::move(t));
    lines_of[it->second].push_back(r.line);
  }
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    auto& turns = sessions[i].turns;
    std::vector<std::size_t> order(turns.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return turns[a].index < turns[b].index; });
    std::vector<Turn> sorted;
    sorted.reserve(turns.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (k > 0 && turns[order[k]].index == turns[order[k - 1]].index)
        throw ParseError(source, lines_of[i][order[k]],
                         "duplicate turn index " + std::to_string(turns[order[k]].index) + " in session '" +
                             sessions[i].session_id + "'");
      sorted.push_back(std::move(turns[order[k]]));
    }
    turns = std::move(sorted);
  }
  return sessions;
}

inline std::vector<Session> load_corpus(const std::filesystem::path& path, Format format = Format::jsonl) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file '" + path.string() + "'");
  return read_corpus(in, format, path.string());
}

inline nlohmann::json turn_record(const Session& s, const Turn& t) {
  nlohmann::json j;
  j["session_id"] = t.session_id;
  j["condition"] = std::string(to_string(s.condition));
  j["speaker"] = std::string(to_string(t.speaker));
  j["text"] = t.text;
  j["index"] = t.index;
  if (t.timestamp_ms) j["timestamp"] = *t.timestamp_ms;
  return j;
}

inline void write_corpus(std::ostream& out, const std::vector<Session>& sessions) {
  for (const auto& s : sessions)
    for (const auto& t : s.turns) out << turn_record(s, t).dump() << '\n';
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<Session>& sessions) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write corpus file '" + path.string() + "'");
  write_corpus(out, sessions);
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

/// Merges runs of same-speaker turns (joined by one space), drops a leading
/// therapist turn, and pairs each patient turn with the therapist turn that
/// follows it. A trailing unanswered patient turn yields no pair.
inline std::vector<TurnPair> pair_turns(const Session& session) {
  std::vector<Turn> merged;
  for (const auto& t : session.turns) {
    if (!merged.empty() && merged.back().speaker == t.speaker) {
      merged.back().text += ' ';
      merged.back().text += t.text;
    } else {
      merged.push_back(t);
    }
  }
  std::vector<TurnPair> pairs;
  for (std::size_t i = 0; i + 1 < merged.size(); ++i) {
    if (merged[i].speaker == Speaker::patient && merged[i + 1].speaker == Speaker::therapist) {
      pairs.push_back(TurnPair{merged[i], merged[i + 1]});
      ++i;
    }
  }
  return pairs;
}

inline CorpusSplit split_corpus(const std::vector<Session>& sessions, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ArgumentError("test_fraction must lie in (0, 1), got " + std::to_string(test_fraction));
  if (sessions.size() < 2) throw ArgumentError("splitting needs at least 2 sessions");
  const std::size_t n = sessions.size();
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  n_test = std::clamp<std::size_t>(n_test, 1, n - 1);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  std::vector<bool> is_test(n, false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;

  CorpusSplit split;
  split.seed = seed;
  for (std::size_t i = 0; i < n; ++i) (is_test[i] ? split.test : split.train).push_back(sessions[i]);
  return split;
}

inline std::vector<Session> filter_condition(const std::vector<Session>& sessions, Condition c) {
  std::vector<Session> out;
  for (const auto& s : sessions)
    if (s.condition == c) out.push_back(s);
  return out;
}

}  // namespace r2d2::corpus
