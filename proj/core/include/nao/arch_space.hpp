#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace nao {

/// Candidate operations applied on a cell edge.
enum class OpKind : std::uint8_t { Identity, SepConv3x3, SepConv5x5, AvgPool3x3, MaxPool3x3 };

inline constexpr int kNumOps = 5;
inline constexpr std::array<OpKind, kNumOps> kAllOps = {OpKind::Identity, OpKind::SepConv3x3,
                                                       OpKind::SepConv5x5, OpKind::AvgPool3x3,
                                                       OpKind::MaxPool3x3};

std::string_view op_name(OpKind op);  // "sep_conv_3x3", ...
bool is_conv(OpKind op);

/// Largest number of intermediate nodes the token vocabulary can express.
inline constexpr int kMaxNodes = 5;

struct Edge {
  int source = 0;
  OpKind op = OpKind::Identity;

  friend bool operator==(const Edge&, const Edge&) = default;
};

/// The two ordered input edges of one intermediate node.
struct NodeInputs {
  Edge first;
  Edge second;

  friend bool operator==(const NodeInputs&, const NodeInputs&) = default;
};

/// A cell DAG. Nodes 0 and 1 are the cell inputs; nodes()[i] describes node i + 2.
class Cell {
 public:
  /// Throws std::invalid_argument if an edge reads from a node that is not
  /// strictly earlier, or if the node count is outside [1, kMaxNodes].
  explicit Cell(std::vector<NodeInputs> nodes);

  int num_intermediate() const noexcept { return static_cast<int>(nodes_.size()); }
  const std::vector<NodeInputs>& nodes() const noexcept { return nodes_; }
  const NodeInputs& node(int index) const { return nodes_.at(static_cast<std::size_t>(index - 2)); }
  /// Index of the last intermediate node (B + 1).
  int last_index() const noexcept { return num_intermediate() + 1; }

  friend bool operator==(const Cell&, const Cell&) = default;

 private:
  std::vector<NodeInputs> nodes_;
};

class Architecture {
 public:
  /// Throws std::invalid_argument when the two cells disagree on B.
  Architecture(Cell normal, Cell reduction);

  const Cell& normal() const noexcept { return normal_; }
  const Cell& reduction() const noexcept { return reduction_; }
  int num_intermediate() const noexcept { return normal_.num_intermediate(); }

  friend bool operator==(const Architecture&, const Architecture&) = default;

 private:
  Cell normal_;
  Cell reduction_;
};

// ---------------------------------------------------------------------------
// Token vocabulary and codec

enum class Token : std::uint8_t {
  Node0 = 0,
  Node1,
  Node2,
  Node3,
  Node4,
  Node5,
  SepConv,
  AvgPool,
  MaxPool,
  Identity,
  Size3,
  Size5,
  SizeNone,
  Start,  // decoder start-of-sequence; never part of an encoded architecture
};

inline constexpr int kVocabSize = 14;
/// Tokens that may appear inside a sequence (everything but Start).
inline constexpr int kOutputVocab = 13;

enum class TokenClass : std::uint8_t { Source, OpType, OpSize };

std::string_view token_name(Token t);
inline Token node_token(int index) { return static_cast<Token>(index); }

struct TokenSequence {
  std::vector<Token> tokens;

  std::size_t size() const noexcept { return tokens.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Number of tokens for an architecture with `num_intermediate` nodes per cell.
constexpr std::size_t sequence_length(int num_intermediate) {
  return static_cast<std::size_t>(12 * num_intermediate);
}

/// Where a sequence position sits in the architecture.
struct TokenSlot {
  int cell;        // 0 = normal, 1 = reduction
  int node_index;  // owning node, 2..B+1
  int edge;        // 0 or 1
  TokenClass cls;
};

TokenSlot slot_at(std::size_t position, int num_intermediate);

/// Bit i set iff Token(i) is grammatical at `position`. For size positions the
/// preceding op token selects the admissible sizes; it is ignored elsewhere.
std::uint32_t allowed_tokens(std::size_t position, int num_intermediate, Token preceding_op);

TokenSequence encode_tokens(const Architecture& arch);

/// Inverse of encode_tokens. Throws GrammarError on any violation; never repairs.
Architecture decode_tokens(const TokenSequence& seq);

/// Space-separated token names, e.g. "NODE_0 SEP_CONV SIZE_3 ...".
std::string to_string(const TokenSequence& seq);

// ---------------------------------------------------------------------------
// Sampling and enumeration

using Rng = std::mt19937_64;

/// Uniform over ordered edges: source uniform in [0, owner), op uniform over five kinds.
Architecture random_architecture(Rng& rng, int num_intermediate);
Cell random_cell(Rng& rng, int num_intermediate);

/// Number of distinct cells with B intermediate nodes: prod_{j=2}^{B+1} (5j)^2.
double cell_space_size(int num_intermediate);

/// Streams every cell with B intermediate nodes once, in mixed-radix order.
class CellEnumerator {
 public:
  /// Throws SpaceTooLarge for B > 2.
  explicit CellEnumerator(int num_intermediate);

  std::optional<Cell> next();

 private:
  int num_intermediate_;
  std::vector<int> digits_;  // one digit per edge, radix 5 * owner
  bool done_ = false;
};

/// Streams the product of two CellEnumerators (normal-major order).
class ArchitectureEnumerator {
 public:
  /// Throws SpaceTooLarge for B > 2.
  explicit ArchitectureEnumerator(int num_intermediate);

  std::optional<Architecture> next();

 private:
  int num_intermediate_;
  std::vector<Cell> cells_;
  std::size_t normal_ = 0;
  std::size_t reduction_ = 0;
};

/// Nodes (inputs included) that no edge consumes. Never empty.
std::set<int> loose_ends(const Cell& cell);

/// Two DOT digraphs, one per cell; loose ends feed a synthetic "out" node.
std::string to_dot(const Architecture& arch);

// ---------------------------------------------------------------------------
// JSON file format: {"version":1,"B":5,"normal":[[src,op,size],...],"reduction":[...]}

std::string to_json_text(const Architecture& arch);
/// Throws FormatError on malformed documents and GrammarError on illegal cells.
Architecture architecture_from_json_text(std::string_view text);

Architecture load_architecture(const std::string& path);
void save_architecture(const Architecture& arch, const std::string& path);

}  // namespace nao
