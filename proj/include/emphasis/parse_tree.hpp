#pragma once

// Penn-bracketed constituency trees and the sentence structure graph derived
// from them: the tree with its word leaves removed, one node per tag.

#include <algorithm>
#include <cstddef>
#include <istream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "emphasis/corpus.hpp"

namespace emphasis {

struct TreeNode {
  std::string label;  // tag symbol, or the word itself for leaves
  bool is_word = false;
  std::vector<std::size_t> children;
};

class ParseTree {
 public:
  ParseTree() = default;
  ParseTree(std::vector<TreeNode> nodes, std::size_t root) : nodes_(std::move(nodes)), root_(root) {}

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(std::size_t i) const { return nodes_[i]; }
  std::size_t root() const { return root_; }

  // Tag node whose only child is a word.
  bool is_preterminal(std::size_t i) const {
    const TreeNode& n = nodes_[i];
    return !n.is_word && n.children.size() == 1 && nodes_[n.children[0]].is_word;
  }

  // Word leaves left to right.
  std::vector<std::string> words() const {
    std::vector<std::string> out;
    visit_preorder([&](std::size_t i) {
      if (nodes_[i].is_word) out.push_back(nodes_[i].label);
    });
    return out;
  }

  template <typename Fn>
  void visit_preorder(Fn&& fn) const {
    std::vector<std::size_t> stack{root_};
    while (!stack.empty()) {
      std::size_t i = stack.back();
      stack.pop_back();
      fn(i);
      const auto& ch = nodes_[i].children;
      for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back(*it);
    }
  }

 private:
  std::vector<TreeNode> nodes_;
  std::size_t root_ = 0;
};

namespace detail {

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

}  // namespace detail

// Parses one bracketed tree, e.g. `(S (NP (PRP I)) (VP (VBP love)))`. A
// nameless outer wrapper `( (S ...) )` is unwrapped. Offsets in errors are
// 0-based character positions; `line` is reported back unchanged.
inline ParseTree parse_sexpr(std::string_view text, std::size_t line = 1) {
  std::vector<TreeNode> nodes;
  std::vector<std::size_t> open;  // indices of unclosed tag nodes
  std::vector<std::size_t> open_at;
  std::size_t root = 0;
  bool have_root = false;
  std::size_t pos = 0;

  auto skip_ws = [&] {
    while (pos < text.size() && detail::is_space(text[pos])) ++pos;
  };
  auto read_atom = [&] {
    std::size_t start = pos;
    while (pos < text.size() && !detail::is_space(text[pos]) && text[pos] != '(' && text[pos] != ')') ++pos;
    return std::string(text.substr(start, pos - start));
  };

  skip_ws();
  if (pos == text.size()) throw ParseError("empty tree", line, pos);
  while (true) {
    skip_ws();
    if (pos == text.size()) break;
    const char c = text[pos];
    if (have_root && open.empty()) throw ParseError("trailing content after the tree", line, pos);
    if (c == '(') {
      const std::size_t at = pos;
      ++pos;
      skip_ws();
      std::string label;
      if (pos < text.size() && text[pos] != '(' && text[pos] != ')') label = read_atom();
      TreeNode n;
      n.label = std::move(label);
      nodes.push_back(std::move(n));
      const std::size_t idx = nodes.size() - 1;
      if (!open.empty()) {
        TreeNode& parent = nodes[open.back()];
        if (!parent.children.empty() && nodes[parent.children.front()].is_word) {
          throw ParseError("word must be the only child of its tag", line, at);
        }
        parent.children.push_back(idx);
      } else {
        root = idx;
        have_root = true;
      }
      open.push_back(idx);
      open_at.push_back(at);
    } else if (c == ')') {
      if (open.empty()) throw ParseError("unbalanced ')'", line, pos);
      TreeNode& n = nodes[open.back()];
      if (n.children.empty()) throw ParseError("tag node without children", line, open_at.back());
      if (n.label.empty() && (n.children.size() != 1 || nodes[n.children[0]].is_word)) {
        throw ParseError("node without a tag", line, open_at.back());
      }
      open.pop_back();
      open_at.pop_back();
      ++pos;
    } else {
      const std::size_t at = pos;
      std::string word = read_atom();
      if (open.empty()) throw ParseError("naked word '" + word + "' at top level", line, at);
      TreeNode& parent = nodes[open.back()];
      if (!parent.children.empty()) throw ParseError("word must be the only child of its tag", line, at);
      TreeNode leaf;
      leaf.label = std::move(word);
      leaf.is_word = true;
      nodes.push_back(std::move(leaf));
      nodes[open.back()].children.push_back(nodes.size() - 1);
    }
  }
  if (!open.empty()) throw ParseError("unbalanced '(': missing ')'", line, open_at.back());
  while (nodes[root].label.empty()) root = nodes[root].children.front();
  if (nodes[root].children.empty() || nodes[root].is_word) throw ParseError("empty tree", line, 0);
  return ParseTree(std::move(nodes), root);
}

// Canonical single-line form: `(TAG child child)` with one space separators.
inline std::string serialize_tree(const ParseTree& tree) {
  std::string out;
  auto emit = [&](auto&& self, std::size_t i) -> void {
    const TreeNode& n = tree.node(i);
    if (n.is_word) {
      out += n.label;
      return;
    }
    out += '(';
    out += n.label;
    for (auto c : n.children) {
      out += ' ';
      self(self, c);
    }
    out += ')';
  };
  emit(emit, tree.root());
  return out;
}

// One tree per line; blank lines are skipped.
inline std::vector<ParseTree> parse_tree_file(std::istream& in) {
  std::vector<ParseTree> trees;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_blank(line) || (line.size() == 1 && line[0] == '\r')) continue;
    trees.push_back(parse_sexpr(line, line_no));
  }
  return trees;
}

// Dense ids for tag symbols. Id 0 is the reserved unknown tag.
class TagVocab {
 public:
  static constexpr std::size_t kUnknown = 0;
  static constexpr const char* kUnknownSymbol = "<unk>";

  TagVocab() { add(kUnknownSymbol); }

  std::size_t add(const std::string& symbol) {
    auto [it, inserted] = ids_.try_emplace(symbol, symbols_.size());
    if (inserted) symbols_.push_back(symbol);
    return it->second;
  }

  std::size_t id(const std::string& symbol) const {
    auto it = ids_.find(symbol);
    return it == ids_.end() ? kUnknown : it->second;
  }

  const std::string& symbol(std::size_t id) const { return symbols_.at(id); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  std::size_t size() const { return symbols_.size(); }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// Every tag symbol of the given trees, in first-appearance order.
inline TagVocab build_tag_vocab(std::span<const ParseTree> trees) {
  TagVocab vocab;
  for (const ParseTree& t : trees) {
    t.visit_preorder([&](std::size_t i) {
      if (!t.node(i).is_word) vocab.add(t.node(i).label);
    });
  }
  return vocab;
}

// Tag nodes in preorder. `edges` holds the parent-child tree edges;
// `neighbors[i]` is the attention neighbourhood: the node itself, its parent
// and its children.
struct StructureGraph {
  std::vector<std::size_t> node_tags;
  std::vector<std::string> node_symbols;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::vector<std::vector<std::size_t>> neighbors;
  std::vector<std::size_t> word_alignment;

  std::size_t num_nodes() const { return node_tags.size(); }
  std::size_t num_tree_edges() const { return edges.size(); }
  std::size_t num_self_loops() const { return node_tags.size(); }
};

inline StructureGraph build_ssg(const ParseTree& tree, const TagVocab& tags) {
  StructureGraph g;
  std::vector<std::size_t> to_graph(tree.nodes().size(), static_cast<std::size_t>(-1));
  tree.visit_preorder([&](std::size_t i) {
    const TreeNode& n = tree.node(i);
    if (n.is_word) return;
    to_graph[i] = g.node_tags.size();
    g.node_tags.push_back(tags.id(n.label));
    g.node_symbols.push_back(n.label);
  });
  g.neighbors.resize(g.node_tags.size());
  for (std::size_t k = 0; k < g.neighbors.size(); ++k) g.neighbors[k].push_back(k);
  tree.visit_preorder([&](std::size_t i) {
    const TreeNode& n = tree.node(i);
    if (n.is_word) return;
    if (tree.is_preterminal(i)) g.word_alignment.push_back(to_graph[i]);
    for (auto c : n.children) {
      if (tree.node(c).is_word) continue;
      const std::size_t a = to_graph[i], b = to_graph[c];
      g.edges.emplace_back(a, b);
      g.neighbors[a].push_back(b);
      g.neighbors[b].push_back(a);
    }
  });
  for (auto& nb : g.neighbors) std::sort(nb.begin(), nb.end());
  return g;
}

// Preterminal tag of each word in order.
inline std::vector<std::string> derive_pos_tags(const ParseTree& tree) {
  std::vector<std::string> tags;
  tree.visit_preorder([&](std::size_t i) {
    if (tree.is_preterminal(i)) tags.push_back(tree.node(i).label);
  });
  return tags;
}

struct AlignmentReport {
  bool ok = true;
  std::vector<std::size_t> mismatches;  // positions where leaf and token differ or one side is missing
  std::vector<std::string> leaves;
  std::vector<std::string> tokens;

  std::string describe() const {
    if (ok) return "ok";
    std::ostringstream oss;
    oss << "tree leaves and tokens disagree at position";
    oss << (mismatches.size() > 1 ? "s" : "");
    for (auto m : mismatches) oss << ' ' << m;
    oss << "\n  leaves:";
    for (const auto& s : leaves) oss << ' ' << s;
    oss << "\n  tokens:";
    for (const auto& s : tokens) oss << ' ' << s;
    return oss.str();
  }
};

// Compares tree leaves with sentence tokens, exact or case-insensitively.
inline AlignmentReport validate_alignment(const ParseTree& tree, std::span<const std::string> tokens) {
  AlignmentReport report;
  report.leaves = tree.words();
  report.tokens.assign(tokens.begin(), tokens.end());
  const std::size_t n = std::max(report.leaves.size(), report.tokens.size());
  for (std::size_t i = 0; i < n; ++i) {
    const bool both = i < report.leaves.size() && i < report.tokens.size();
    if (both && (report.leaves[i] == report.tokens[i] ||
                 ascii_lower(report.leaves[i]) == ascii_lower(report.tokens[i]))) {
      continue;
    }
    report.mismatches.push_back(i);
  }
  report.ok = report.mismatches.empty();
  return report;
}

}  // namespace emphasis
