#include "nao/arch_space.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "nao/errors.hpp"

namespace nao {

namespace {

struct OpTokens {
  Token type;
  Token size;
};

OpTokens op_tokens(OpKind op) {
  switch (op) {
    case OpKind::Identity: return {Token::Identity, Token::SizeNone};
    case OpKind::SepConv3x3: return {Token::SepConv, Token::Size3};
    case OpKind::SepConv5x5: return {Token::SepConv, Token::Size5};
    case OpKind::AvgPool3x3: return {Token::AvgPool, Token::Size3};
    case OpKind::MaxPool3x3: return {Token::MaxPool, Token::Size3};
  }
  throw std::logic_error("unknown OpKind");
}

constexpr std::uint32_t bit(Token t) { return 1u << static_cast<unsigned>(t); }

constexpr std::uint32_t kOpTypeMask =
    bit(Token::SepConv) | bit(Token::AvgPool) | bit(Token::MaxPool) | bit(Token::Identity);

std::uint32_t sizes_for(Token op_type) {
  switch (op_type) {
    case Token::SepConv: return bit(Token::Size3) | bit(Token::Size5);
    case Token::AvgPool:
    case Token::MaxPool: return bit(Token::Size3);
    case Token::Identity: return bit(Token::SizeNone);
    default: return 0;
  }
}

OpKind op_from_tokens(Token type, Token size) {
  switch (type) {
    case Token::Identity: return OpKind::Identity;
    case Token::AvgPool: return OpKind::AvgPool3x3;
    case Token::MaxPool: return OpKind::MaxPool3x3;
    case Token::SepConv: return size == Token::Size5 ? OpKind::SepConv5x5 : OpKind::SepConv3x3;
    default: throw std::logic_error("not an op token");
  }
}

std::string_view class_name(TokenClass c) {
  switch (c) {
    case TokenClass::Source: return "source-node";
    case TokenClass::OpType: return "op-type";
    case TokenClass::OpSize: return "op-size";
  }
  return "?";
}

}  // namespace

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::Identity: return "identity";
    case OpKind::SepConv3x3: return "sep_conv_3x3";
    case OpKind::SepConv5x5: return "sep_conv_5x5";
    case OpKind::AvgPool3x3: return "avg_pool_3x3";
    case OpKind::MaxPool3x3: return "max_pool_3x3";
  }
  return "?";
}

bool is_conv(OpKind op) { return op == OpKind::SepConv3x3 || op == OpKind::SepConv5x5; }

Cell::Cell(std::vector<NodeInputs> nodes) : nodes_(std::move(nodes)) {
  if (nodes_.empty() || nodes_.size() > static_cast<std::size_t>(kMaxNodes)) {
    throw std::invalid_argument("cell must have between 1 and " + std::to_string(kMaxNodes) +
                                " intermediate nodes");
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const int owner = static_cast<int>(i) + 2;
    for (const Edge& e : {nodes_[i].first, nodes_[i].second}) {
      if (e.source < 0 || e.source >= owner) {
        throw std::invalid_argument("node " + std::to_string(owner) + " reads from node " +
                                    std::to_string(e.source));
      }
      if (static_cast<int>(e.op) >= kNumOps) throw std::invalid_argument("bad op kind");
    }
  }
}

Architecture::Architecture(Cell normal, Cell reduction)
    : normal_(std::move(normal)), reduction_(std::move(reduction)) {
  if (normal_.num_intermediate() != reduction_.num_intermediate()) {
    throw std::invalid_argument("normal and reduction cells must have the same node count");
  }
}

std::string_view token_name(Token t) {
  static constexpr std::array<std::string_view, kVocabSize> names = {
      "NODE_0",  "NODE_1",   "NODE_2",   "NODE_3",  "NODE_4", "NODE_5",    "SEP_CONV",
      "AVG_POOL", "MAX_POOL", "IDENTITY", "SIZE_3", "SIZE_5", "SIZE_NONE", "START"};
  return names.at(static_cast<std::size_t>(t));
}

TokenSlot slot_at(std::size_t position, int num_intermediate) {
  const std::size_t per_cell = 6 * static_cast<std::size_t>(num_intermediate);
  const std::size_t within = position % per_cell;
  return TokenSlot{static_cast<int>(position / per_cell), static_cast<int>(within / 6) + 2,
                   static_cast<int>((within % 6) / 3), static_cast<TokenClass>(position % 3)};
}

std::uint32_t allowed_tokens(std::size_t position, int num_intermediate, Token preceding_op) {
  const TokenSlot slot = slot_at(position, num_intermediate);
  switch (slot.cls) {
    case TokenClass::Source: return (1u << static_cast<unsigned>(slot.node_index)) - 1u;
    case TokenClass::OpType: return kOpTypeMask;
    case TokenClass::OpSize: return sizes_for(preceding_op);
  }
  return 0;
}

TokenSequence encode_tokens(const Architecture& arch) {
  TokenSequence seq;
  seq.tokens.reserve(sequence_length(arch.num_intermediate()));
  for (const Cell* cell : {&arch.normal(), &arch.reduction()}) {
    for (const NodeInputs& node : cell->nodes()) {
      for (const Edge& e : {node.first, node.second}) {
        const OpTokens ot = op_tokens(e.op);
        seq.tokens.push_back(node_token(e.source));
        seq.tokens.push_back(ot.type);
        seq.tokens.push_back(ot.size);
      }
    }
  }
  return seq;
}

Architecture decode_tokens(const TokenSequence& seq) {
  const std::size_t n = seq.size();
  if (n == 0 || n % 12 != 0 || n / 12 > static_cast<std::size_t>(kMaxNodes)) {
    throw GrammarError(n, "length " + std::to_string(n) + " is not 12*B for B in [1, " +
                              std::to_string(kMaxNodes) + "]");
  }
  const int num_intermediate = static_cast<int>(n / 12);

  std::array<std::vector<NodeInputs>, 2> cells;
  Token op_type = Token::Identity;
  Edge edge;
  NodeInputs node;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const Token t = seq.tokens[pos];
    const TokenSlot slot = slot_at(pos, num_intermediate);
    const std::uint32_t allowed = allowed_tokens(pos, num_intermediate, op_type);
    if (static_cast<unsigned>(t) >= static_cast<unsigned>(kOutputVocab)) {
      throw GrammarError(pos, "token id " + std::to_string(static_cast<int>(t)) +
                                  " is not a sequence token");
    }
    if ((allowed & bit(t)) == 0) {
      std::string reason;
      if (slot.cls == TokenClass::Source && static_cast<int>(t) < kMaxNodes + 1) {
        reason = "source " + std::string(token_name(t)) + " is not earlier than node " +
                 std::to_string(slot.node_index);
      } else if (slot.cls == TokenClass::OpSize && (bit(t) & (bit(Token::Size3) | bit(Token::Size5) |
                                                              bit(Token::SizeNone))) != 0) {
        reason = std::string(token_name(t)) + " does not fit op " + std::string(token_name(op_type));
      } else {
        reason = "expected a " + std::string(class_name(slot.cls)) + " token, got " +
                 std::string(token_name(t));
      }
      throw GrammarError(pos, reason);
    }
    switch (slot.cls) {
      case TokenClass::Source: edge.source = static_cast<int>(t); break;
      case TokenClass::OpType: op_type = t; break;
      case TokenClass::OpSize:
        edge.op = op_from_tokens(op_type, t);
        if (slot.edge == 0) {
          node.first = edge;
        } else {
          node.second = edge;
          cells[static_cast<std::size_t>(slot.cell)].push_back(node);
        }
        break;
    }
  }
  return Architecture(Cell(std::move(cells[0])), Cell(std::move(cells[1])));
}

std::string to_string(const TokenSequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += token_name(seq.tokens[i]);
  }
  return out;
}

Cell random_cell(Rng& rng, int num_intermediate) {
  if (num_intermediate < 1) throw std::invalid_argument("B must be >= 1");
  std::uniform_int_distribution<int> pick_op(0, kNumOps - 1);
  std::vector<NodeInputs> nodes;
  nodes.reserve(static_cast<std::size_t>(num_intermediate));
  for (int owner = 2; owner < num_intermediate + 2; ++owner) {
    std::uniform_int_distribution<int> pick_source(0, owner - 1);
    NodeInputs node;
    for (Edge* e : {&node.first, &node.second}) {
      e->source = pick_source(rng);
      e->op = kAllOps[static_cast<std::size_t>(pick_op(rng))];
    }
    nodes.push_back(node);
  }
  return Cell(std::move(nodes));
}

Architecture random_architecture(Rng& rng, int num_intermediate) {
  Cell normal = random_cell(rng, num_intermediate);
  Cell reduction = random_cell(rng, num_intermediate);
  return Architecture(std::move(normal), std::move(reduction));
}

double cell_space_size(int num_intermediate) {
  double count = 1.0;
  for (int j = 2; j <= num_intermediate + 1; ++j) count *= (5.0 * j) * (5.0 * j);
  return count;
}

CellEnumerator::CellEnumerator(int num_intermediate) : num_intermediate_(num_intermediate) {
  if (num_intermediate > 2) {
    throw SpaceTooLarge("enumeration is limited to B <= 2 (got B=" +
                        std::to_string(num_intermediate) + ")");
  }
  if (num_intermediate < 1) throw std::invalid_argument("B must be >= 1");
  digits_.assign(2 * static_cast<std::size_t>(num_intermediate), 0);
}

std::optional<Cell> CellEnumerator::next() {
  if (done_) return std::nullopt;
  std::vector<NodeInputs> nodes(static_cast<std::size_t>(num_intermediate_));
  for (std::size_t d = 0; d < digits_.size(); ++d) {
    const int owner = static_cast<int>(d / 2) + 2;
    const Edge e{digits_[d] % owner, kAllOps[static_cast<std::size_t>(digits_[d] / owner)]};
    (d % 2 == 0 ? nodes[d / 2].first : nodes[d / 2].second) = e;
  }
  // Advance, last digit fastest.
  std::size_t d = digits_.size();
  while (d-- > 0) {
    const int radix = kNumOps * (static_cast<int>(d / 2) + 2);
    if (++digits_[d] < radix) break;
    digits_[d] = 0;
    if (d == 0) done_ = true;
  }
  return Cell(std::move(nodes));
}

ArchitectureEnumerator::ArchitectureEnumerator(int num_intermediate)
    : num_intermediate_(num_intermediate) {
  CellEnumerator cells(num_intermediate);
  while (auto c = cells.next()) cells_.push_back(std::move(*c));
}

std::optional<Architecture> ArchitectureEnumerator::next() {
  if (normal_ >= cells_.size()) return std::nullopt;
  Architecture arch(cells_[normal_], cells_[reduction_]);
  if (++reduction_ == cells_.size()) {
    reduction_ = 0;
    ++normal_;
  }
  return arch;
}

std::set<int> loose_ends(const Cell& cell) {
  std::vector<bool> consumed(static_cast<std::size_t>(cell.last_index() + 1), false);
  for (const NodeInputs& node : cell.nodes()) {
    consumed[static_cast<std::size_t>(node.first.source)] = true;
    consumed[static_cast<std::size_t>(node.second.source)] = true;
  }
  std::set<int> out;
  for (int i = 0; i <= cell.last_index(); ++i) {
    if (!consumed[static_cast<std::size_t>(i)]) out.insert(i);
  }
  return out;
}

std::string to_dot(const Architecture& arch) {
  std::ostringstream os;
  const std::array<std::pair<const char*, const Cell*>, 2> cells = {
      std::pair{"normal", &arch.normal()}, std::pair{"reduction", &arch.reduction()}};
  for (const auto& [name, cell] : cells) {
    os << "digraph " << name << " {\n";
    os << "  rankdir=LR;\n";
    os << "  n0 [label=\"c[k-2]\", shape=box];\n";
    os << "  n1 [label=\"c[k-1]\", shape=box];\n";
    for (int i = 2; i <= cell->last_index(); ++i) os << "  n" << i << " [label=\"" << i << "\"];\n";
    os << "  out [label=\"c[k]\", shape=box];\n";
    for (int i = 2; i <= cell->last_index(); ++i) {
      const NodeInputs& node = cell->node(i);
      for (const Edge& e : {node.first, node.second}) {
        os << "  n" << e.source << " -> n" << i << " [label=\"" << op_name(e.op) << "\"];\n";
      }
    }
    for (int i : loose_ends(*cell)) os << "  n" << i << " -> out;\n";
    os << "}\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// JSON

namespace {

using nlohmann::json;

json cell_to_json(const Cell& cell) {
  json edges = json::array();
  for (const NodeInputs& node : cell.nodes()) {
    for (const Edge& e : {node.first, node.second}) {
      const OpTokens ot = op_tokens(e.op);
      const char* type = ot.type == Token::SepConv    ? "sep_conv"
                         : ot.type == Token::AvgPool  ? "avg_pool"
                         : ot.type == Token::MaxPool  ? "max_pool"
                                                      : "identity";
      const int size = ot.size == Token::Size3 ? 3 : ot.size == Token::Size5 ? 5 : 0;
      edges.push_back(json::array({e.source, type, size}));
    }
  }
  return edges;
}

}  // namespace

std::string to_json_text(const Architecture& arch) {
  json doc;
  doc["version"] = 1;
  doc["B"] = arch.num_intermediate();
  doc["normal"] = cell_to_json(arch.normal());
  doc["reduction"] = cell_to_json(arch.reduction());
  return doc.dump();
}

Architecture architecture_from_json_text(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("architecture JSON: ") + e.what());
  }
  try {
    if (doc.at("version").get<int>() != 1) throw FormatError("architecture JSON: unsupported version");
    const int b = doc.at("B").get<int>();
    if (b < 1 || b > kMaxNodes) throw FormatError("architecture JSON: B out of range");
    // Route through the token codec so the JSON file obeys the same grammar.
    TokenSequence seq;
    for (const char* key : {"normal", "reduction"}) {
      const json& edges = doc.at(key);
      if (!edges.is_array() || edges.size() != 2 * static_cast<std::size_t>(b)) {
        throw FormatError(std::string("architecture JSON: '") + key + "' must list 2*B edges");
      }
      for (const json& e : edges) {
        if (!e.is_array() || e.size() != 3) {
          throw FormatError("architecture JSON: edge must be [src, op, size]");
        }
        const int src = e[0].get<int>();
        const std::string op = e[1].get<std::string>();
        const int size = e[2].get<int>();
        if (src < 0 || src > kMaxNodes) throw FormatError("architecture JSON: bad source index");
        seq.tokens.push_back(node_token(src));
        if (op == "sep_conv") seq.tokens.push_back(Token::SepConv);
        else if (op == "avg_pool") seq.tokens.push_back(Token::AvgPool);
        else if (op == "max_pool") seq.tokens.push_back(Token::MaxPool);
        else if (op == "identity") seq.tokens.push_back(Token::Identity);
        else throw FormatError("architecture JSON: unknown op '" + op + "'");
        if (size == 3) seq.tokens.push_back(Token::Size3);
        else if (size == 5) seq.tokens.push_back(Token::Size5);
        else if (size == 0) seq.tokens.push_back(Token::SizeNone);
        else throw FormatError("architecture JSON: unknown size " + std::to_string(size));
      }
    }
    return decode_tokens(seq);
  } catch (const json::exception& e) {
    throw FormatError(std::string("architecture JSON: ") + e.what());
  }
}

Architecture load_architecture(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return architecture_from_json_text(ss.str());
}

void save_architecture(const Architecture& arch, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << to_json_text(arch) << '\n';
}

}  // namespace nao
