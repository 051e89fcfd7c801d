#include "nao/arch_space.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <map>
#include <unordered_set>

#include "nao/errors.hpp"

namespace nao {
namespace {

Cell cell_of(std::vector<NodeInputs> nodes) { return Cell(std::move(nodes)); }

Cell all_identity_from_inputs(int b) {
  std::vector<NodeInputs> nodes;
  for (int i = 0; i < b; ++i) nodes.push_back({{0, OpKind::Identity}, {1, OpKind::Identity}});
  return cell_of(nodes);
}

TEST(Codec, PaperExamplePrefix) {
  Cell normal = cell_of({{{0, OpKind::SepConv3x3}, {1, OpKind::MaxPool3x3}},
                         {{2, OpKind::Identity}, {0, OpKind::AvgPool3x3}}});
  Architecture arch(normal, all_identity_from_inputs(2));
  const TokenSequence seq = encode_tokens(arch);
  const std::vector<Token> expected = {Token::Node0, Token::SepConv, Token::Size3,
                                       Token::Node1, Token::MaxPool, Token::Size3};
  EXPECT_TRUE(std::equal(expected.begin(), expected.end(), seq.tokens.begin()));
  EXPECT_EQ(to_string(seq).substr(0, 45), "NODE_0 SEP_CONV SIZE_3 NODE_1 MAX_POOL SIZE_3");
}

TEST(Codec, LengthIsTwelveB) {
  Rng rng(3);
  for (int b = 1; b <= kMaxNodes; ++b) {
    EXPECT_EQ(encode_tokens(random_architecture(rng, b)).size(), static_cast<std::size_t>(12 * b));
  }
  EXPECT_EQ(sequence_length(5), 60u);
}

TEST(Codec, AllIdentityUsesNoneSize) {
  Architecture arch(all_identity_from_inputs(2), all_identity_from_inputs(2));
  const TokenSequence seq = encode_tokens(arch);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i % 3 == 1) EXPECT_EQ(seq.tokens[i], Token::Identity);
    if (i % 3 == 2) EXPECT_EQ(seq.tokens[i], Token::SizeNone);
  }
}

TEST(Codec, RoundTripsRandomArchitectures) {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const Architecture arch = random_architecture(rng, 1 + i % kMaxNodes);
    EXPECT_EQ(decode_tokens(encode_tokens(arch)), arch);
  }
}

TEST(Codec, RejectsSourceNotEarlier) {
  Rng rng(5);
  TokenSequence seq = encode_tokens(random_architecture(rng, 5));
  seq.tokens[0] = Token::Node3;
  try {
    decode_tokens(seq);
    FAIL() << "expected GrammarError";
  } catch (const GrammarError& e) {
    EXPECT_EQ(e.position(), 0u);
  }
}

TEST(Codec, RejectsSizeMismatch) {
  Rng rng(5);
  TokenSequence seq = encode_tokens(random_architecture(rng, 5));
  seq.tokens[1] = Token::SepConv;
  seq.tokens[2] = Token::SizeNone;
  try {
    decode_tokens(seq);
    FAIL() << "expected GrammarError";
  } catch (const GrammarError& e) {
    EXPECT_EQ(e.position(), 2u);
  }
  seq.tokens[1] = Token::AvgPool;
  seq.tokens[2] = Token::Size5;
  EXPECT_THROW(decode_tokens(seq), GrammarError);
}

TEST(Codec, RejectsWrongLengthAndClass) {
  Rng rng(5);
  TokenSequence seq = encode_tokens(random_architecture(rng, 2));
  TokenSequence shorter = seq;
  shorter.tokens.pop_back();
  EXPECT_THROW(decode_tokens(shorter), GrammarError);
  EXPECT_THROW(decode_tokens(TokenSequence{}), GrammarError);

  TokenSequence wrong_class = seq;
  wrong_class.tokens[4] = Token::Size3;  // op position
  try {
    decode_tokens(wrong_class);
    FAIL();
  } catch (const GrammarError& e) {
    EXPECT_EQ(e.position(), 4u);
  }
  TokenSequence start = seq;
  start.tokens[3] = Token::Start;
  EXPECT_THROW(decode_tokens(start), GrammarError);
}

// Property: any mutation either decodes to something that re-encodes to the
// mutated sequence (no silent repair) or is rejected.
TEST(Codec, MutationsNeverSilentlyRepaired) {
  Rng rng(99);
  std::uniform_int_distribution<int> tok(0, kVocabSize - 1);
  int rejected = 0;
  for (int i = 0; i < 5000; ++i) {
    TokenSequence seq = encode_tokens(random_architecture(rng, 5));
    std::uniform_int_distribution<std::size_t> pos(0, seq.size() - 1);
    seq.tokens[pos(rng)] = static_cast<Token>(tok(rng));
    try {
      EXPECT_EQ(encode_tokens(decode_tokens(seq)), seq);
    } catch (const GrammarError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 0);
}

TEST(Codec, AllowedTokensMatchDecoder) {
  // Position 0 of B=3 is node 2's first source: NODE_0, NODE_1 only.
  EXPECT_EQ(allowed_tokens(0, 3, Token::Identity), 0b11u);
  // Node 4 (third node) sources: NODE_0..NODE_3.
  EXPECT_EQ(allowed_tokens(12, 3, Token::Identity), 0b1111u);
  // Reduction cell restarts at node 2.
  EXPECT_EQ(allowed_tokens(18, 3, Token::Identity), 0b11u);
  const std::uint32_t sep_sizes = allowed_tokens(2, 3, Token::SepConv);
  EXPECT_EQ(sep_sizes, (1u << static_cast<int>(Token::Size3)) | (1u << static_cast<int>(Token::Size5)));
  EXPECT_EQ(allowed_tokens(2, 3, Token::Identity), 1u << static_cast<int>(Token::SizeNone));
}

TEST(Sampling, DeterministicGivenSeed) {
  Rng a(42), b(42);
  EXPECT_EQ(random_architecture(a, 5), random_architecture(b, 5));
}

TEST(Sampling, AlwaysValid) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const Architecture arch = random_architecture(rng, 5);
    for (const Cell* c : {&arch.normal(), &arch.reduction()}) {
      for (int node = 2; node <= c->last_index(); ++node) {
        EXPECT_LT(c->node(node).first.source, node);
        EXPECT_LT(c->node(node).second.source, node);
      }
    }
  }
}

TEST(Sampling, FirstEdgeUniformOverTenChoices) {
  // Oracle: exact uniform 1/10 over (source in {0,1}) x (5 ops).
  Rng rng(2024);
  std::map<std::pair<int, int>, int> counts;
  constexpr int kSamples = 100000;
  for (int i = 0; i < kSamples; ++i) {
    const Edge e = random_architecture(rng, 2).normal().node(2).first;
    ++counts[{e.source, static_cast<int>(e.op)}];
  }
  ASSERT_EQ(counts.size(), 10u);
  double chi2 = 0;
  for (const auto& [key, n] : counts) {
    const double freq = static_cast<double>(n) / kSamples;
    EXPECT_NEAR(freq, 0.1, 0.01);
    chi2 += (n - kSamples * 0.1) * (n - kSamples * 0.1) / (kSamples * 0.1);
  }
  EXPECT_LT(chi2, 27.88);  // chi-square 9 dof, p = 0.001
}

TEST(Enumeration, CellCountsMatchFormula) {
  // prod_{j=2}^{B+1} (5j)^2
  EXPECT_DOUBLE_EQ(cell_space_size(1), 100.0);
  EXPECT_DOUBLE_EQ(cell_space_size(2), 22500.0);
  EXPECT_DOUBLE_EQ(cell_space_size(5), 5.0625e12);
  for (int b : {1, 2}) {
    CellEnumerator it(b);
    std::unordered_set<std::string> seen;
    while (auto c = it.next()) {
      seen.insert(to_string(encode_tokens(Architecture(*c, *c))));
    }
    EXPECT_EQ(static_cast<double>(seen.size()), cell_space_size(b));
  }
}

TEST(Enumeration, FullSpaceB1) {
  ArchitectureEnumerator it(1);
  std::unordered_set<std::string> seen;
  while (auto a = it.next()) seen.insert(to_string(encode_tokens(*a)));
  EXPECT_EQ(seen.size(), 10000u);
}

TEST(Enumeration, GuardsLargeSpaces) {
  EXPECT_THROW(CellEnumerator(3), SpaceTooLarge);
  EXPECT_THROW(ArchitectureEnumerator(5), SpaceTooLarge);
}

TEST(LooseEnds, Chain) {
  // node 2 <- (0, 0); node 3 <- (2, 2)
  Cell c = cell_of({{{0, OpKind::Identity}, {0, OpKind::SepConv3x3}},
                    {{2, OpKind::MaxPool3x3}, {2, OpKind::Identity}}});
  EXPECT_EQ(loose_ends(c), (std::set<int>{1, 3}));
}

TEST(LooseEnds, InputsOnly) {
  EXPECT_EQ(loose_ends(all_identity_from_inputs(5)), (std::set<int>{2, 3, 4, 5, 6}));
}

TEST(LooseEnds, NeverEmpty) {
  Rng rng(8);
  for (int i = 0; i < 2000; ++i) {
    const Cell c = random_cell(rng, 1 + i % 5);
    const auto ends = loose_ends(c);
    ASSERT_FALSE(ends.empty());
    EXPECT_TRUE(ends.count(c.last_index()));
  }
}

TEST(Dot, TwoBalancedDigraphs) {
  Rng rng(4);
  const std::string dot = to_dot(random_architecture(rng, 5));
  EXPECT_EQ(std::count(dot.begin(), dot.end(), '{'), 2);
  EXPECT_EQ(std::count(dot.begin(), dot.end(), '}'), 2);
  std::size_t graphs = 0;
  for (std::size_t p = dot.find("digraph"); p != std::string::npos; p = dot.find("digraph", p + 1)) ++graphs;
  EXPECT_EQ(graphs, 2u);
}

TEST(Dot, EdgeCountsAndLabels) {
  Architecture ident(all_identity_from_inputs(1), all_identity_from_inputs(1));
  const std::string dot = to_dot(ident);
  std::size_t labeled = 0, to_out = 0;
  for (std::size_t p = dot.find("->"); p != std::string::npos; p = dot.find("->", p + 1)) {
    const std::string line = dot.substr(p, dot.find('\n', p) - p);
    if (line.find("label=\"identity\"") != std::string::npos) ++labeled;
    if (line.find("out") != std::string::npos) ++to_out;
  }
  EXPECT_EQ(labeled, 4u);  // 2 per cell
  EXPECT_EQ(to_out, 2u);   // 1 per cell

  Cell normal = cell_of({{{0, OpKind::SepConv3x3}, {1, OpKind::MaxPool3x3}}});
  EXPECT_NE(to_dot(Architecture(normal, normal)).find("sep_conv_3x3"), std::string::npos);
}

TEST(Json, RoundTripAndErrors) {
  Rng rng(12);
  const Architecture arch = random_architecture(rng, 5);
  const std::string text = to_json_text(arch);
  EXPECT_EQ(architecture_from_json_text(text), arch);
  EXPECT_NE(text.find("\"version\":1"), std::string::npos);

  EXPECT_THROW(architecture_from_json_text("{"), FormatError);
  EXPECT_THROW(architecture_from_json_text(R"({"version":2,"B":1,"normal":[],"reduction":[]})"),
               FormatError);
  EXPECT_THROW(architecture_from_json_text(
                   R"({"version":1,"B":1,"normal":[[0,"sep_conv",0],[1,"identity",0]],)"
                   R"("reduction":[[0,"identity",0],[1,"identity",0]]})"),
               GrammarError);
  EXPECT_THROW(architecture_from_json_text(
                   R"({"version":1,"B":1,"normal":[[0,"conv",3],[1,"identity",0]],)"
                   R"("reduction":[[0,"identity",0],[1,"identity",0]]})"),
               FormatError);
}

}  // namespace
}  // namespace nao
