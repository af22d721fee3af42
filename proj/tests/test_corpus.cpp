#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <string>
#include <vector>

#include "nli/corpus.hpp"
#include "support/tmpdir.hpp"

using nli::ParseTree;
using nli::SentencePair;
using nli::testing::TempDir;

namespace {

// Figure-style worked example trees: premise 29 nodes / 15 leaves,
// hypothesis 17 nodes / 9 leaves, ids = preorder position + 1.
const char* kPremiseParse =
    "( A ( man ( wearing ( ( ( ( a ( white shirt ) ) and ) ( a ( blue jeans ) ) ) "
    "( reading ( a ( newspaper ( while standing ) ) ) ) ) ) ) )";
const char* kHypothesisParse =
    "( ( A man ) ( ( is ( ( sitting down ) ( reading ( a newspaper ) ) ) ) . ) )";

std::string join(const std::vector<std::string>& toks) {
  std::string out;
  for (const auto& t : toks) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

}  // namespace

TEST_CASE("parse_sexpr builds the worked two-level tree") {
  ParseTree t = nli::parse_sexpr("( ( A man ) running )");
  REQUIRE_EQ(t.node_count(), 5);
  CHECK_FALSE(t.root().leaf());
  // preorder: root, left internal, A, man, running
  CHECK_EQ(t.nodes[0].left, 1);
  CHECK_EQ(t.nodes[0].right, 4);
  CHECK_EQ(t.nodes[1].left, 2);
  CHECK_EQ(t.nodes[1].right, 3);
  CHECK_EQ(t.nodes[2].token, "A");
  CHECK_EQ(t.nodes[3].token, "man");
  CHECK_EQ(t.nodes[4].token, "running");
  CHECK_EQ(join(t.leaf_tokens()), "A man running");
}

TEST_CASE("parse_sexpr accepts a bare token as a one-leaf tree") {
  ParseTree t = nli::parse_sexpr("dog");
  REQUIRE_EQ(t.node_count(), 1);
  CHECK(t.root().leaf());
  CHECK_EQ(t.root().token, "dog");
}

TEST_CASE("figure premise tree has 29 preorder-numbered nodes") {
  ParseTree t = nli::parse_sexpr(kPremiseParse);
  CHECK_EQ(t.node_count(), 29);
  CHECK_EQ(t.leaf_count(), 15);
  CHECK_EQ(join(t.leaf_tokens()),
           "A man wearing a white shirt and a blue jeans reading a newspaper while standing");
  // spot-check figure ids (index + 1): 2=A, 4=man, 6=wearing, 29=standing
  CHECK_EQ(t.nodes[1].token, "A");
  CHECK_EQ(t.nodes[3].token, "man");
  CHECK_EQ(t.nodes[5].token, "wearing");
  CHECK_EQ(t.nodes[28].token, "standing");
  CHECK_EQ(t.nodes[27].token, "while");

  ParseTree h = nli::parse_sexpr(kHypothesisParse);
  CHECK_EQ(h.node_count(), 17);
  CHECK_EQ(h.leaf_count(), 9);
  CHECK_EQ(join(h.leaf_tokens()), "A man is sitting down reading a newspaper .");
  // ids 10 and 11 are "sitting" and "down" in the figure
  CHECK_EQ(h.nodes[9].token, "sitting");
  CHECK_EQ(h.nodes[10].token, "down");
  CHECK_EQ(h.nodes[16].token, ".");
}

TEST_CASE("parse_sexpr reports errors with byte offsets") {
  CHECK_THROWS_AS(nli::parse_sexpr(""), nli::ParseError);
  CHECK_THROWS_AS(nli::parse_sexpr("   "), nli::ParseError);
  try {
    nli::parse_sexpr("( A )");
    FAIL("unary node accepted");
  } catch (const nli::ParseError& e) {
    CHECK_EQ(e.offset, 0);
    CHECK(std::string(e.what()).find("1 children") != std::string::npos);
  }
  CHECK_THROWS_AS(nli::parse_sexpr("( A B C )"), nli::ParseError);
  CHECK_THROWS_AS(nli::parse_sexpr("( ( A B )"), nli::ParseError);
  try {
    nli::parse_sexpr("A ) B");
    FAIL("trailing content accepted");
  } catch (const nli::ParseError& e) {
    CHECK_EQ(e.offset, 2);
  }
}

TEST_CASE("serialize then parse is the identity on valid trees") {
  for (const char* text : {"( ( A man ) running )", kPremiseParse, kHypothesisParse, "dog"}) {
    ParseTree t = nli::parse_sexpr(text);
    std::string s = nli::serialize(t);
    CHECK_EQ(s, text);
    ParseTree t2 = nli::parse_sexpr(s);
    REQUIRE_EQ(t2.node_count(), t.node_count());
    for (std::size_t i = 0; i < t.node_count(); ++i) {
      CHECK_EQ(t.nodes[i].left, t2.nodes[i].left);
      CHECK_EQ(t.nodes[i].right, t2.nodes[i].right);
      CHECK_EQ(t.nodes[i].token, t2.nodes[i].token);
    }
  }
}

TEST_CASE("tree node count is 2 x leaves - 1") {
  for (const char* text : {"( ( A man ) running )", kPremiseParse, kHypothesisParse}) {
    ParseTree t = nli::parse_sexpr(text);
    CHECK_EQ(t.node_count(), 2 * t.leaf_count() - 1);
  }
}

TEST_CASE("build_full_binary_tree pairs adjacent nodes with padding") {
  ParseTree one = nli::build_full_binary_tree({"w1"});
  CHECK_EQ(one.node_count(), 1);
  CHECK_EQ(one.root().token, "w1");

  ParseTree three = nli::build_full_binary_tree({"w1", "w2", "w3"});
  REQUIRE_EQ(three.node_count(), 7);
  const auto& n = three.nodes;
  CHECK_FALSE(n[0].leaf());
  // preorder: root, (w1 w2) internal, w1, w2, (w3 PAD) internal, w3, PAD
  CHECK_EQ(n[2].token, "w1");
  CHECK_EQ(n[3].token, "w2");
  CHECK_EQ(n[5].token, "w3");
  CHECK(n[6].pad);
  CHECK_EQ(join(three.leaf_tokens()), "w1 w2 w3");  // pads skipped
  CHECK_EQ(three.leaf_count(), 4);                  // pads counted as structural leaves

  ParseTree four = nli::build_full_binary_tree({"w1", "w2", "w3", "w4"});
  CHECK_EQ(four.node_count(), 7);
  for (const auto& node : four.nodes) CHECK_FALSE(node.pad);

  CHECK_THROWS_AS(nli::build_full_binary_tree({}), nli::ContractError);
}

TEST_CASE("full binary tree depth is ceil(log2 l) + 1 levels") {
  for (std::size_t l = 2; l <= 33; ++l) {
    std::vector<std::string> toks;
    for (std::size_t i = 0; i < l; ++i) toks.push_back("t" + std::to_string(i));
    ParseTree t = nli::build_full_binary_tree(toks);
    std::size_t levels = 1, cap = 1;
    while (cap < l) {
      cap *= 2;
      ++levels;
    }
    CHECK_EQ(t.depth(), levels);
    CHECK_EQ(t.node_count(), 2 * t.leaf_count() - 1);
    CHECK_EQ(join(t.leaf_tokens()), join(toks));
  }
}

TEST_CASE("load_jsonl keeps consensus pairs and counts dropped ones") {
  TempDir dir;
  std::string path = dir.file("snli.jsonl",
      R"json({"gold_label": "entailment", "sentence1": "A man runs", "sentence2": "A man moves", "sentence1_binary_parse": "( ( A man ) runs )", "sentence2_binary_parse": "( ( A man ) moves )"}
{"gold_label": "-", "sentence1": "x y", "sentence2": "z w", "sentence1_binary_parse": "( x y )", "sentence2_binary_parse": "( z w )"}
{"gold_label": "contradiction", "sentence1": "Dogs bark loudly", "sentence2": "Cats are silent", "sentence1_binary_parse": "( Dogs ( bark loudly ) )", "sentence2_binary_parse": "( Cats ( are silent ) )"}
{"gold_label": "neutral", "sentence1": "It rains", "sentence2": "It pours"}
)json");
  nli::CorpusLoad load = nli::load_jsonl(path);
  REQUIRE_EQ(load.pairs.size(), 3);
  CHECK_EQ(load.dropped, 1);
  CHECK_EQ(load.pairs[0].label, nli::Label::entailment);
  CHECK_EQ(load.pairs[1].label, nli::Label::contradiction);
  CHECK_EQ(load.pairs[2].label, nli::Label::neutral);
  // parses authoritative for tokens
  CHECK_EQ(join(load.pairs[0].premise), "A man runs");
  REQUIRE(load.pairs[0].premise_tree.has_value());
  CHECK_EQ(load.pairs[0].premise_tree->leaf_count(), 3);
  // parse-free line falls back to whitespace tokens
  CHECK_FALSE(load.pairs[2].premise_tree.has_value());
  CHECK_EQ(join(load.pairs[2].premise), "It rains");
}

TEST_CASE("loaded parse leaves always equal the token sequence") {
  TempDir dir;
  std::string path = dir.file("snli.jsonl",
      R"json({"gold_label": "neutral", "sentence1": "ignored text here", "sentence2": "also ignored", "sentence1_binary_parse": "( ( The dog ) ( runs fast ) )", "sentence2_binary_parse": "( It runs )"}
)json");
  auto load = nli::load_jsonl(path);
  REQUIRE_EQ(load.pairs.size(), 1);
  const SentencePair& p = load.pairs[0];
  CHECK_EQ(join(p.premise), join(p.premise_tree->leaf_tokens()));
  CHECK_EQ(join(p.hypothesis), join(p.hypothesis_tree->leaf_tokens()));
}

TEST_CASE("load_jsonl rejects malformed lines with their line number") {
  TempDir dir;
  std::string good = R"json({"gold_label": "neutral", "sentence1": "a b", "sentence2": "c d"})json";
  try {
    nli::load_jsonl(dir.file("bad.jsonl", good + "\n{not json}\n"));
    FAIL("malformed line accepted");
  } catch (const nli::ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  try {
    nli::load_jsonl(dir.file("missing.jsonl", good + "\n{\"gold_label\": \"neutral\", \"sentence1\": \"a\"}\n"));
    FAIL("missing field accepted");
  } catch (const nli::DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    CHECK(std::string(e.what()).find("sentence2") != std::string::npos);
  }
  CHECK_THROWS_AS(nli::load_jsonl(dir.name("nonexistent.jsonl")), nli::IoError);
}

TEST_CASE("load_tsv reads three columns and applies the same label policy") {
  TempDir dir;
  std::string path = dir.file("pairs.tsv",
                              "entailment\tA man runs fast\tA man moves\n"
                              "-\tskip me\tplease\n"
                              "contradiction\tDogs bark\tCats meow\n");
  auto load = nli::load_tsv(path);
  REQUIRE_EQ(load.pairs.size(), 2);
  CHECK_EQ(load.dropped, 1);
  CHECK_EQ(join(load.pairs[0].premise), "A man runs fast");
  CHECK_FALSE(load.pairs[0].premise_tree.has_value());

  try {
    nli::load_tsv(dir.file("bad.tsv", "entailment\tonly two columns\n"));
    FAIL("two-column line accepted");
  } catch (const nli::ParseError& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
}

TEST_CASE("corpus config lowercases everywhere and strips punctuation on the parse-free route") {
  TempDir dir;
  nli::CorpusConfig cfg;
  cfg.lowercase = true;
  cfg.strip_punct = true;
  std::string path = dir.file("mix.jsonl",
      R"json({"gold_label": "neutral", "sentence1": "The Dog runs .", "sentence2": "ignored", "sentence2_binary_parse": "( IT ( Runs . ) )"}
)json");
  auto load = nli::load_jsonl(path, cfg);
  REQUIRE_EQ(load.pairs.size(), 1);
  CHECK_EQ(join(load.pairs[0].premise), "the dog runs");            // stripped + lowered
  CHECK_EQ(join(load.pairs[0].hypothesis), "it runs .");            // parses keep punctuation
  CHECK_EQ(load.pairs[0].hypothesis_tree->leaf_tokens()[0], "it");  // tree leaves lowered too
}

TEST_CASE("collect_tokens is deduplicated in first-appearance order") {
  SentencePair p1;
  p1.premise = {"a", "man", "runs"};
  p1.hypothesis = {"a", "man", "sits"};
  SentencePair p2;
  p2.premise = {"runs", "dog"};
  p2.hypothesis = {"man"};
  auto toks = nli::collect_tokens({p1, p2});
  CHECK_EQ(join(toks), "a man runs sits dog");
}

TEST_CASE("load_embeddings fills known rows, falls back to lowercase, samples the rest") {
  TempDir dir;
  std::string path = dir.file("vecs.txt",
                              "dog 1 2 3\n"
                              "Cat 4 5 6\n"
                              "irrelevant 7 8 9\n");
  nli::Rng rng(99);
  nli::Vocabulary vocab = nli::load_embeddings(path, 3, {"dog", "cat", "zebra"}, rng);
  REQUIRE_EQ(vocab.size(), 5);  // pad, unk, dog, cat, zebra
  CHECK_EQ(vocab.dim(), 3);
  CHECK_EQ(vocab.pretrained_hits, 2);

  // padding row all zero
  for (std::size_t j = 0; j < 3; ++j) CHECK_EQ(vocab.embeddings.at(nli::Vocabulary::pad_index, j), 0.0);
  // exact match
  std::size_t dog = vocab.lookup("dog");
  CHECK_EQ(vocab.embeddings.at(dog, 0), 1.0);
  // lowercase fallback to the file's "Cat" row
  std::size_t cat = vocab.lookup("cat");
  CHECK_EQ(vocab.embeddings.at(cat, 0), 4.0);
  // OOV row sampled, small and nonzero
  std::size_t zebra = vocab.lookup("zebra");
  bool nonzero = false;
  for (std::size_t j = 0; j < 3; ++j) {
    nonzero = nonzero || vocab.embeddings.at(zebra, j) != 0.0;
    CHECK_LT(std::abs(vocab.embeddings.at(zebra, j)), 1.0);
  }
  CHECK(nonzero);
  // unseen tokens resolve to unk; capitalized corpus words resolve via lowercase
  CHECK_EQ(vocab.lookup("qqq"), nli::Vocabulary::unk_index);
  CHECK_EQ(vocab.lookup("Dog"), dog);
  CHECK(vocab.embeddings.requires_grad());
}

TEST_CASE("load_embeddings rejects rows with the wrong component count") {
  TempDir dir;
  std::string path = dir.file("vecs.txt", "dog 1 2 3\ncat 4 5\n");
  nli::Rng rng(1);
  try {
    nli::load_embeddings(path, 3, {"dog", "cat"}, rng);
    FAIL("short row accepted");
  } catch (const nli::ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("vocabulary construction is reproducible given order and seed") {
  TempDir dir;
  std::string path = dir.file("vecs.txt", "dog 1 2 3\n");
  auto build = [&]() {
    nli::Rng rng(2024);
    return nli::load_embeddings(path, 3, {"dog", "zebra", "ox"}, rng);
  };
  nli::Vocabulary a = build();
  nli::Vocabulary b = build();
  REQUIRE_EQ(a.size(), b.size());
  CHECK(a.tokens == b.tokens);
  CHECK_EQ(std::memcmp(a.embeddings.data(), b.embeddings.data(),
                       a.embeddings.size() * sizeof(double)),
           0);
}
