#pragma once

// Multi-annotator emphasis data and static word-embedding tables.
//
// Emphasis file: blocks separated by a blank line, optional `#id <string>`
// first line, then one row per word: `token\tL1\t...\tL9` with Li in {B,I,O}.
// Embedding file: `token v1 ... vd` per line, single-space separated.

#include <array>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "emphasis/tensor.hpp"

namespace emphasis {

// Malformed input file; carries the 1-based line (and optional character offset).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t offset = 0)
      : std::runtime_error(format(what, line, offset)), line_(line), offset_(offset) {}
  std::size_t line() const { return line_; }
  std::size_t offset() const { return offset_; }

  // Same location with a file name in front of the message.
  ParseError in_file(const std::string& path) const { return ParseError(path + ": " + what(), line_, offset_, Raw{}); }

 private:
  struct Raw {};
  ParseError(const std::string& msg, std::size_t line, std::size_t offset, Raw)
      : std::runtime_error(msg), line_(line), offset_(offset) {}

  static std::string format(const std::string& what, std::size_t line, std::size_t offset) {
    std::string msg = "line " + std::to_string(line);
    if (offset) msg += ", offset " + std::to_string(offset);
    return msg + ": " + what;
  }
  std::size_t line_;
  std::size_t offset_;
};

// Class order matches the three outputs of the classifier head.
enum class EmphasisLabel : std::uint8_t { B = 0, I = 1, O = 2 };

inline constexpr std::size_t kAnnotators = 9;
inline constexpr std::size_t kNumClasses = 3;

inline std::optional<EmphasisLabel> label_from_string(std::string_view s) {
  if (s == "B") return EmphasisLabel::B;
  if (s == "I") return EmphasisLabel::I;
  if (s == "O") return EmphasisLabel::O;
  return std::nullopt;
}

inline char label_char(EmphasisLabel l) {
  switch (l) {
    case EmphasisLabel::B:
      return 'B';
    case EmphasisLabel::I:
      return 'I';
    case EmphasisLabel::O:
      return 'O';
  }
  return '?';
}

inline bool is_emphasized(EmphasisLabel l) { return l != EmphasisLabel::O; }

using Annotation = std::vector<EmphasisLabel>;

struct SentenceRecord {
  std::string id;
  std::vector<std::string> tokens;
  std::array<Annotation, kAnnotators> annotations;
  std::vector<double> emphasis_freq;

  std::size_t size() const { return tokens.size(); }
};

// Position-wise fraction of annotators labelling the word B or I.
inline std::vector<double> aggregate_emphasis(std::span<const Annotation> annotations) {
  if (annotations.size() != kAnnotators) {
    throw ContractError("aggregate_emphasis: expected 9 annotations, got " + std::to_string(annotations.size()));
  }
  const std::size_t n = annotations.front().size();
  std::vector<double> freq(n, 0.0);
  for (const Annotation& a : annotations) {
    if (a.size() != n) throw ContractError("aggregate_emphasis: annotation lengths disagree");
  }
  for (std::size_t i = 0; i < n; ++i) {
    int count = 0;
    for (const Annotation& a : annotations) count += is_emphasized(a[i]) ? 1 : 0;
    freq[i] = static_cast<double>(count) / static_cast<double>(kAnnotators);
  }
  return freq;
}

// Non-fatal findings while parsing, such as I without an earlier B.
struct ParseDiagnostics {
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

inline bool is_blank(std::string_view s) {
  return s.find_first_not_of(" \t") == std::string_view::npos;
}

}  // namespace detail

inline std::vector<SentenceRecord> parse_emphasis_file(std::istream& in, ParseDiagnostics* diagnostics = nullptr) {
  std::vector<SentenceRecord> records;
  SentenceRecord current;
  bool open = false;
  std::size_t block_line = 0;

  auto close_block = [&](std::size_t line_no) {
    if (!open) return;
    if (current.tokens.empty()) throw ParseError("block has an id but no rows", line_no);
    for (std::size_t a = 0; a < kAnnotators; ++a) {
      bool seen_b = false;
      for (std::size_t i = 0; i < current.tokens.size(); ++i) {
        auto l = current.annotations[a][i];
        if (l == EmphasisLabel::B) seen_b = true;
        if (l == EmphasisLabel::I && !seen_b && diagnostics) {
          diagnostics->warnings.push_back("block at line " + std::to_string(block_line) + ", annotator " +
                                          std::to_string(a + 1) + ": I at word " + std::to_string(i + 1) +
                                          " without an earlier B");
        }
      }
    }
    current.emphasis_freq = aggregate_emphasis(current.annotations);
    records.push_back(std::move(current));
    current = SentenceRecord{};
    open = false;
  };

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (detail::is_blank(line)) {
      close_block(line_no);
      continue;
    }
    if (!open) {
      open = true;
      block_line = line_no;
      if (line.rfind("#id", 0) == 0 && (line.size() == 3 || line[3] == ' ')) {
        current.id = line.size() > 4 ? line.substr(4) : std::string();
        continue;
      }
    }
    auto cols = detail::split(line, '\t');
    if (cols.size() != 1 + kAnnotators) {
      throw ParseError("expected token and 9 annotation columns, got " + std::to_string(cols.size()) +
                           " columns (each block needs exactly 9 annotations)",
                       line_no);
    }
    if (cols[0].empty()) throw ParseError("empty token", line_no);
    current.tokens.emplace_back(cols[0]);
    for (std::size_t a = 0; a < kAnnotators; ++a) {
      auto label = label_from_string(cols[a + 1]);
      if (!label) throw ParseError("unknown label symbol '" + std::string(cols[a + 1]) + "'", line_no);
      current.annotations[a].push_back(*label);
    }
  }
  close_block(line_no + 1);
  return records;
}

inline std::vector<SentenceRecord> parse_emphasis_text(const std::string& text, ParseDiagnostics* diagnostics = nullptr) {
  std::istringstream in(text);
  return parse_emphasis_file(in, diagnostics);
}

// Canonical text form: one blank line between blocks, `#id` only when set.
inline std::string serialize_emphasis_file(std::span<const SentenceRecord> records) {
  std::string out;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const SentenceRecord& rec = records[r];
    if (r) out += '\n';
    if (!rec.id.empty()) out += "#id " + rec.id + '\n';
    for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
      out += rec.tokens[i];
      for (const Annotation& a : rec.annotations) {
        out += '\t';
        out += label_char(a[i]);
      }
      out += '\n';
    }
  }
  return out;
}

// One training sample per (sentence, annotator).
struct TrainSample {
  std::size_t sentence = 0;  // index into the record list
  std::size_t annotator = 0;
  Annotation labels;
};

inline std::vector<TrainSample> make_samples(std::span<const SentenceRecord> records) {
  std::vector<TrainSample> samples;
  samples.reserve(records.size() * kAnnotators);
  for (std::size_t s = 0; s < records.size(); ++s) {
    for (std::size_t a = 0; a < kAnnotators; ++a) samples.push_back({s, a, records[s].annotations[a]});
  }
  return samples;
}

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

struct EmbeddingTable {
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> entries;
  std::vector<double> oov_vector;
  std::size_t duplicates = 0;

  std::size_t size() const { return entries.size(); }

  // Key under which the token is found: exact, then lowercased.
  std::optional<std::string> resolve(std::string_view token) const {
    std::string exact(token);
    if (entries.count(exact)) return exact;
    std::string lower = ascii_lower(token);
    if (entries.count(lower)) return lower;
    return std::nullopt;
  }

  std::span<const double> lookup(std::string_view token) const {
    if (auto key = resolve(token)) return entries.at(*key);
    return oov_vector;
  }
};

namespace detail {

inline double parse_double(std::string_view field, std::size_t line_no) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw ParseError("invalid number '" + std::string(field) + "'", line_no);
  }
  return v;
}

}  // namespace detail

// Duplicate tokens keep their first vector; the count lands in `duplicates`.
inline EmbeddingTable load_embeddings(std::istream& in, std::size_t expected_dim) {
  if (expected_dim == 0) throw ContractError("load_embeddings: dimension must be positive");
  EmbeddingTable table;
  table.dim = expected_dim;
  std::vector<double> total(expected_dim, 0.0);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    auto fields = detail::split(line, ' ');
    if (fields.size() != 1 + expected_dim) {
      throw ParseError("expected token and " + std::to_string(expected_dim) + " values, got " +
                           std::to_string(fields.size() - 1),
                       line_no);
    }
    std::vector<double> vec(expected_dim);
    for (std::size_t k = 0; k < expected_dim; ++k) vec[k] = detail::parse_double(fields[k + 1], line_no);
    auto [it, inserted] = table.entries.try_emplace(std::string(fields[0]), std::move(vec));
    if (!inserted) {
      ++table.duplicates;
      continue;
    }
    for (std::size_t k = 0; k < expected_dim; ++k) total[k] += it->second[k];
  }
  if (table.entries.empty()) throw ParseError("embedding file has no entries", line_no);
  table.oov_vector.resize(expected_dim);
  for (std::size_t k = 0; k < expected_dim; ++k) {
    table.oov_vector[k] = total[k] / static_cast<double>(table.entries.size());
  }
  return table;
}

inline EmbeddingTable load_embeddings_text(const std::string& text, std::size_t expected_dim) {
  std::istringstream in(text);
  return load_embeddings(in, expected_dim);
}

// Static vectors of a sentence, one row per token.
inline Tensor lookup_sequence(const SentenceRecord& record, const EmbeddingTable& table) {
  if (record.tokens.empty()) throw ContractError("lookup_sequence: empty sentence");
  Tensor out(Shape{record.tokens.size(), table.dim});
  for (std::size_t i = 0; i < record.tokens.size(); ++i) {
    auto v = table.lookup(record.tokens[i]);
    std::copy(v.begin(), v.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace emphasis
