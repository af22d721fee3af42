#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nli/common.hpp"
#include "nli/tensor.hpp"

namespace nli {

enum class Label : int { entailment = 0, contradiction = 1, neutral = 2 };
inline constexpr int kNumClasses = 3;

inline const char* label_name(Label y) {
  switch (y) {
    case Label::entailment: return "entailment";
    case Label::contradiction: return "contradiction";
    case Label::neutral: return "neutral";
  }
  return "?";
}

inline std::optional<Label> label_from(const std::string& s) {
  if (s == "entailment") return Label::entailment;
  if (s == "contradiction") return Label::contradiction;
  if (s == "neutral") return Label::neutral;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Parse trees

struct ParseNode {
  int left = -1;   // node index, -1 iff leaf
  int right = -1;
  std::string token;  // leaves only
  bool pad = false;   // inserted full-binary-tree padding leaf
  bool leaf() const { return left < 0; }
};

/// Strictly binary tree stored in preorder: root at index 0, then the whole
/// left subtree, then the right. Figure-style node ids are index + 1.
struct ParseTree {
  std::vector<ParseNode> nodes;

  bool empty() const { return nodes.empty(); }
  std::size_t node_count() const { return nodes.size(); }
  const ParseNode& root() const { return nodes.front(); }

  std::size_t leaf_count() const {
    std::size_t n = 0;
    for (const auto& node : nodes) n += node.leaf();
    return n;
  }

  /// Leaf tokens in sentence order, padding leaves skipped.
  std::vector<std::string> leaf_tokens() const {
    std::vector<std::string> out;
    walk_leaves(0, [&](const ParseNode& n) {
      if (!n.pad) out.push_back(n.token);
    });
    return out;
  }

  std::size_t depth() const { return depth_from(0); }

  template <class Fn>
  void walk_leaves(int at, Fn&& fn) const {
    const ParseNode& n = nodes[at];
    if (n.leaf()) {
      fn(n);
      return;
    }
    walk_leaves(n.left, fn);
    walk_leaves(n.right, fn);
  }

 private:
  std::size_t depth_from(int at) const {
    const ParseNode& n = nodes[at];
    if (n.leaf()) return 1;
    return 1 + std::max(depth_from(n.left), depth_from(n.right));
  }
};

namespace detail {

struct SexprToken {
  std::string text;
  std::size_t offset;
};

inline std::vector<SexprToken> lex_sexpr(const std::string& text) {
  std::vector<SexprToken> toks;
  std::size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '(' || c == ')') {
      toks.push_back({std::string(1, c), i});
      ++i;
    } else {
      std::size_t start = i;
      while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i])) &&
             text[i] != '(' && text[i] != ')')
        ++i;
      toks.push_back({text.substr(start, i - start), start});
    }
  }
  return toks;
}

inline int parse_sexpr_node(const std::vector<SexprToken>& toks, std::size_t& pos,
                            ParseTree& tree) {
  if (pos >= toks.size())
    throw ParseError("unbalanced parentheses", toks.empty() ? 0 : toks.back().offset);
  const SexprToken& tok = toks[pos];
  if (tok.text == ")") throw ParseError("unexpected ')'", tok.offset);
  if (tok.text != "(") {
    int idx = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({-1, -1, tok.text, false});
    ++pos;
    return idx;
  }
  const std::size_t open_off = tok.offset;
  ++pos;  // consume '('
  int idx = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back({});  // reserve the parent slot so children follow in preorder
  std::vector<int> children;
  while (true) {
    if (pos >= toks.size()) throw ParseError("unbalanced parentheses", open_off);
    if (toks[pos].text == ")") {
      ++pos;
      break;
    }
    children.push_back(parse_sexpr_node(toks, pos, tree));
  }
  if (children.size() != 2)
    throw ParseError("internal node with " + std::to_string(children.size()) +
                         " children, expected 2",
                     open_off);
  tree.nodes[idx].left = children[0];
  tree.nodes[idx].right = children[1];
  return idx;
}

}  // namespace detail

/// Parse a binarized constituency tree written as a parenthesized
/// s-expression, e.g. "( ( A man ) running )". A bare token is a one-leaf
/// tree.
inline ParseTree parse_sexpr(const std::string& text) {
  auto toks = detail::lex_sexpr(text);
  if (toks.empty()) throw ParseError("empty input", 0);
  ParseTree tree;
  std::size_t pos = 0;
  detail::parse_sexpr_node(toks, pos, tree);
  if (pos != toks.size()) throw ParseError("trailing content", toks[pos].offset);
  return tree;
}

inline std::string serialize(const ParseTree& tree) {
  std::string out;
  auto rec = [&](auto&& self, int at) -> void {
    const ParseNode& n = tree.nodes[at];
    if (n.leaf()) {
      out += n.token;
      return;
    }
    out += "( ";
    self(self, n.left);
    out += ' ';
    self(self, n.right);
    out += " )";
  };
  rec(rec, 0);
  return out;
}

/// Merge adjacent nodes level by level, left to right; an unpaired rightmost
/// node is joined with an inserted padding leaf.
inline ParseTree build_full_binary_tree(const std::vector<std::string>& tokens) {
  if (tokens.empty()) throw ContractError("cannot build a tree over zero tokens");

  struct Tmp {
    int left = -1, right = -1;
    std::string token;
    bool pad = false;
  };
  std::vector<Tmp> pool;
  std::vector<int> level;
  for (const auto& t : tokens) {
    pool.push_back({-1, -1, t, false});
    level.push_back(static_cast<int>(pool.size()) - 1);
  }
  while (level.size() > 1) {
    std::vector<int> next;
    for (std::size_t i = 0; i + 1 < level.size(); i += 2) {
      pool.push_back({level[i], level[i + 1], "", false});
      next.push_back(static_cast<int>(pool.size()) - 1);
    }
    if (level.size() % 2 == 1) {
      pool.push_back({-1, -1, "", true});
      int pad = static_cast<int>(pool.size()) - 1;
      pool.push_back({level.back(), pad, "", false});
      next.push_back(static_cast<int>(pool.size()) - 1);
    }
    level = std::move(next);
  }

  ParseTree tree;
  auto emit = [&](auto&& self, int at) -> int {
    int idx = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({-1, -1, pool[at].token, pool[at].pad});
    if (pool[at].left >= 0) {
      tree.nodes[idx].left = self(self, pool[at].left);
      tree.nodes[idx].right = self(self, pool[at].right);
    }
    return idx;
  };
  emit(emit, level[0]);
  return tree;
}

// ---------------------------------------------------------------------------
// Sentence pairs

struct SentencePair {
  std::vector<std::string> premise;
  std::vector<std::string> hypothesis;
  std::optional<ParseTree> premise_tree;
  std::optional<ParseTree> hypothesis_tree;
  Label label = Label::entailment;
};

struct CorpusLoad {
  std::vector<SentencePair> pairs;
  std::size_t dropped = 0;  // consensus-lacking or out-of-category labels
};

struct CorpusConfig {
  bool lowercase = false;    // normalize tokens before vocabulary lookup
  bool strip_punct = false;  // drop pure-punctuation tokens on the parse-free route
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline std::string lowered(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline bool punct_only(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::ispunct(c) != 0;
  });
}

inline void apply_config_tokens(std::vector<std::string>& toks, const CorpusConfig& cfg,
                                bool parse_free, std::size_t line_no) {
  if (cfg.strip_punct && parse_free) {
    toks.erase(std::remove_if(toks.begin(), toks.end(), punct_only), toks.end());
    if (toks.empty())
      throw DataError("line " + std::to_string(line_no) +
                      ": stripping punctuation emptied a sentence");
  }
  if (cfg.lowercase)
    for (auto& t : toks) t = lowered(t);
}

inline void apply_config_tree(ParseTree& tree, const CorpusConfig& cfg) {
  if (!cfg.lowercase) return;
  for (auto& n : tree.nodes)
    if (n.leaf() && !n.pad) n.token = lowered(n.token);
}

}  // namespace detail

/// SNLI-style JSON lines. Labels outside the three classes are dropped and
/// counted. Parse fields, when present and non-empty, are authoritative for
/// tokenization; otherwise sentences are whitespace-split.
inline CorpusLoad load_jsonl(const std::string& path, const CorpusConfig& cfg = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  CorpusLoad out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw ParseError("line " + std::to_string(line_no) + ": malformed JSON", 0);
    for (const char* field : {"gold_label", "sentence1", "sentence2"})
      if (!j.contains(field) || !j[field].is_string())
        throw DataError("line " + std::to_string(line_no) + ": missing field " + field);

    auto label = label_from(j["gold_label"].get<std::string>());
    if (!label) {
      ++out.dropped;
      continue;
    }

    SentencePair pair;
    pair.label = *label;
    auto side = [&](const char* sent_field, const char* parse_field,
                    std::vector<std::string>& toks, std::optional<ParseTree>& tree) {
      std::string parse_text;
      if (j.contains(parse_field) && j[parse_field].is_string())
        parse_text = j[parse_field].get<std::string>();
      if (parse_text.find_first_not_of(" \t") != std::string::npos) {
        ParseTree t;
        try {
          t = parse_sexpr(parse_text);
        } catch (const ParseError& e) {
          throw ParseError("line " + std::to_string(line_no) + ": " + e.what(), e.offset);
        }
        detail::apply_config_tree(t, cfg);
        toks = t.leaf_tokens();
        detail::apply_config_tokens(toks, cfg, false, line_no);
        tree = std::move(t);
      } else {
        toks = detail::split_ws(j[sent_field].get<std::string>());
        detail::apply_config_tokens(toks, cfg, true, line_no);
      }
      if (toks.empty())
        throw DataError("line " + std::to_string(line_no) + ": empty sentence");
    };
    side("sentence1", "sentence1_binary_parse", pair.premise, pair.premise_tree);
    side("sentence2", "sentence2_binary_parse", pair.hypothesis, pair.hypothesis_tree);
    out.pairs.push_back(std::move(pair));
  }
  return out;
}

/// Parse-free fallback: three tab-separated columns, label first.
inline CorpusLoad load_tsv(const std::string& path, const CorpusConfig& cfg = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  CorpusLoad out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 3)
      throw ParseError("line " + std::to_string(line_no) + ": expected 3 tab-separated columns, got " +
                           std::to_string(cols.size()),
                       0);
    auto label = label_from(cols[0]);
    if (!label) {
      ++out.dropped;
      continue;
    }
    SentencePair pair;
    pair.label = *label;
    pair.premise = detail::split_ws(cols[1]);
    pair.hypothesis = detail::split_ws(cols[2]);
    detail::apply_config_tokens(pair.premise, cfg, true, line_no);
    detail::apply_config_tokens(pair.hypothesis, cfg, true, line_no);
    if (pair.premise.empty() || pair.hypothesis.empty())
      throw DataError("line " + std::to_string(line_no) + ": empty sentence");
    out.pairs.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary and embeddings

/// Token to row map plus the embedding matrix. Row 0 is the all-zero padding
/// row (frozen during training), row 1 the unknown token.
struct Vocabulary {
  static constexpr std::size_t pad_index = 0;
  static constexpr std::size_t unk_index = 1;

  std::vector<std::string> tokens;  // aligned with embedding rows
  std::unordered_map<std::string, std::size_t> index;
  Tensor embeddings;  // [V x dim]
  std::size_t pretrained_hits = 0;

  std::size_t size() const { return tokens.size(); }
  std::size_t dim() const { return embeddings.cols(); }

  std::size_t lookup(const std::string& token) const {
    auto it = index.find(token);
    if (it != index.end()) return it->second;
    it = index.find(detail::lowered(token));
    if (it != index.end()) return it->second;
    return unk_index;
  }
};

/// Distinct tokens of both sides of every pair, in first-appearance order.
inline std::vector<std::string> collect_tokens(const std::vector<SentencePair>& pairs) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  auto take = [&](const std::vector<std::string>& toks) {
    for (const auto& t : toks)
      if (seen.insert(t).second) out.push_back(t);
  };
  for (const auto& p : pairs) {
    take(p.premise);
    take(p.hypothesis);
  }
  return out;
}

/// Build the vocabulary over `corpus_tokens`, filling rows from a pretrained
/// text file ("token v1 ... v_dim" per line; exact match first, lowercase
/// fallback second) and sampling N(0, 0.1^2) rows for the rest. An empty
/// path skips the file and samples every row.
inline Vocabulary load_embeddings(const std::string& path, std::size_t dim,
                                  const std::vector<std::string>& corpus_tokens, Rng& rng) {
  std::unordered_map<std::string, std::vector<double>> file_rows;
  std::unordered_map<std::string, std::string> lower_alias;  // lowered -> original key
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::unordered_set<std::string> wanted, wanted_lower;
    for (const auto& t : corpus_tokens) {
      wanted.insert(t);
      wanted_lower.insert(detail::lowered(t));
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::size_t sp = line.find(' ');
      std::string token = line.substr(0, sp);
      bool want = wanted.count(token) > 0;
      std::string low = detail::lowered(token);
      if (!want && !wanted_lower.count(low)) continue;
      std::istringstream rest(sp == std::string::npos ? "" : line.substr(sp + 1));
      std::vector<double> row;
      row.reserve(dim);
      double v;
      while (rest >> v) row.push_back(v);
      if (row.size() != dim)
        throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                             " components, got " + std::to_string(row.size()),
                         0);
      if (!file_rows.count(token)) {
        file_rows.emplace(token, std::move(row));
        lower_alias.emplace(low, token);
      }
    }
  }

  Vocabulary vocab;
  vocab.tokens = {"<pad>", "<unk>"};
  for (const auto& t : corpus_tokens) vocab.tokens.push_back(t);
  const std::size_t v = vocab.tokens.size();
  vocab.embeddings = Tensor::zeros({v, dim}, true);
  for (std::size_t r = 0; r < v; ++r) {
    vocab.index.emplace(vocab.tokens[r], r);
    if (r == Vocabulary::pad_index) continue;  // stays all-zero
    const std::vector<double>* row = nullptr;
    if (r != Vocabulary::unk_index) {
      auto hit = file_rows.find(vocab.tokens[r]);
      if (hit == file_rows.end()) {
        auto alias = lower_alias.find(detail::lowered(vocab.tokens[r]));
        if (alias != lower_alias.end()) hit = file_rows.find(alias->second);
      }
      if (hit != file_rows.end()) row = &hit->second;
    }
    if (row) {
      ++vocab.pretrained_hits;
      std::copy(row->begin(), row->end(), vocab.embeddings.data() + r * dim);
    } else {
      for (std::size_t j = 0; j < dim; ++j)
        vocab.embeddings.data()[r * dim + j] = rng.gaussian(0.0, 0.1);
    }
  }
  return vocab;
}

}  // namespace nli
