#include "nao/child_network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "nao/checkpoint.hpp"
#include "nao/errors.hpp"
#include "nao/seed.hpp"

namespace nao {

void NetworkConfig::validate() const {
  if (num_cells < 3) throw ConfigError("network.L must be >= 3 (got " + std::to_string(num_cells) + ")");
  if (channels < 1) throw ConfigError("network.C must be >= 1");
  if (num_classes < 2) throw ConfigError("network.num_classes must be >= 2");
  if (input_height < 1 || input_width < 1) throw ConfigError("network input size must be positive");
  if (epochs < 0) throw ConfigError("network.epochs must be >= 0");
  if (batch_size < 2) throw ConfigError("network.batch_size must be >= 2");
  if (!(sgd.lr >= 0.0)) throw ConfigError("network.lr must be >= 0");
}

namespace {

int halve(int n) { return (n + 1) / 2; }

int kernel_of(OpKind op) {
  switch (op) {
    case OpKind::SepConv3x3: return 3;
    case OpKind::SepConv5x5: return 5;
    default: return 0;
  }
}

}  // namespace

BnIds ChildNetwork::add_bn(const std::string& name, int channels) {
  BnIds ids;
  ids.gamma = params_.add(name + "/gamma", TensorF({channels}, 1.0F));
  ids.beta = params_.add(name + "/beta", TensorF({channels}, 0.0F));
  ids.mean = params_.add(name + "/running_mean", TensorF({channels}, 0.0F), false);
  ids.var = params_.add(name + "/running_var", TensorF({channels}, 1.0F), false);
  return ids;
}

Var ChildNetwork::apply_bn(GraphF& g, Var x, const BnIds& ids, bool training) {
  BatchNormState<float> st;
  st.running_mean = &params_[ids.mean];
  st.running_var = &params_[ids.var];
  return g.batch_norm(x, g.param(params_[ids.gamma]), g.param(params_[ids.beta]), st, training);
}

void ChildNetwork::add_factorized_reduce(const std::string& name, int in_c, int out_c, ParamId (&w)[2],
                                         BnIds& bn) {
  std::mt19937_64 rng(derive_seed(cfg_.seed, params_.size()));
  const int half = out_c / 2;
  w[0] = params_.add(name + "/conv_a", fan_in_uniform<float>({half, in_c, 1, 1}, in_c, rng));
  w[1] = params_.add(name + "/conv_b", fan_in_uniform<float>({out_c - half, in_c, 1, 1}, in_c, rng));
  bn = add_bn(name + "/bn", out_c);
}

Var ChildNetwork::factorized_reduce(GraphF& g, Var x, const ParamId (&w)[2], const BnIds& bn, bool training) {
  const Var a = g.conv2d(x, g.param(params_[w[0]]), 2, 0, true);
  const Var b = g.conv2d(g.shift_crop(x), g.param(params_[w[1]]), 2, 0, true);
  const Var parts[2] = {a, b};
  return apply_bn(g, g.concat_channels(parts), bn, training);
}

ChildNetwork::ChildNetwork(const Architecture& arch, const NetworkConfig& cfg) : arch_(arch), cfg_(cfg) {
  cfg_.validate();
  auto rng_for = [&] { return std::mt19937_64(derive_seed(cfg_.seed, params_.size())); };
  auto conv = [&](const std::string& name, int out_c, int in_c, int k) {
    auto rng = rng_for();
    return params_.add(name, fan_in_uniform<float>({out_c, in_c, k, k}, in_c * k * k, rng));
  };
  auto dwconv = [&](const std::string& name, int c, int k) {
    auto rng = rng_for();
    return params_.add(name, fan_in_uniform<float>({c, 1, k, k}, k * k, rng));
  };

  const int C = cfg_.channels;
  stem_w_ = conv("stem/conv", C, 1, 3);
  stem_bn_ = add_bn("stem/bn", C);
  stem_height_ = cfg_.input_height;
  stem_width_ = cfg_.input_width;

  const int L = cfg_.num_cells;
  const int r1 = L / 3, r2 = 2 * L / 3;
  // (channels, height, width) of the two most recent outputs: s0 = k-2, s1 = k-1.
  int c0 = C, h0 = stem_height_, w0 = stem_width_;
  int c1 = C, h1 = stem_height_, w1 = stem_width_;
  int ck = C;
  for (int k = 0; k < L; ++k) {
    CellLayer cell;
    cell.reduction = (k == r1 || k == r2);
    if (cell.reduction) ck *= 2;
    cell.channels = ck;
    const std::string pre = "cell" + std::to_string(k);
    cell.reduce_s0 = h0 != h1 || w0 != w1;
    if (cell.reduce_s0) {
      add_factorized_reduce(pre + "/pre0", c0, ck, cell.pre0_fr, cell.pre0_bn);
    } else {
      cell.pre0 = conv(pre + "/pre0/conv", ck, c0, 1);
      cell.pre0_bn = add_bn(pre + "/pre0/bn", ck);
    }
    cell.pre1 = conv(pre + "/pre1/conv", ck, c1, 1);
    cell.pre1_bn = add_bn(pre + "/pre1/bn", ck);

    const Cell& def = cell.reduction ? arch_.reduction() : arch_.normal();
    for (int node = 2; node <= def.last_index(); ++node) {
      const NodeInputs& in = def.node(node);
      for (int j = 0; j < 2; ++j) {
        const Edge& e = j == 0 ? in.first : in.second;
        EdgeLayer el;
        el.op = e.op;
        el.source = e.source;
        el.stride = cell.reduction && e.source < 2 ? 2 : 1;
        el.kernel = kernel_of(e.op);
        const std::string name = pre + "/node" + std::to_string(node) + "/edge" + std::to_string(j);
        if (is_conv(e.op)) {
          for (int rep = 0; rep < 2; ++rep) {
            const std::string r = name + "/sep" + std::to_string(rep);
            el.dw[rep] = dwconv(r + "/depthwise", ck, el.kernel);
            el.pw[rep] = conv(r + "/pointwise", ck, ck, 1);
            el.bn[rep] = add_bn(r + "/bn", ck);
          }
        } else if (e.op == OpKind::Identity && el.stride == 2) {
          add_factorized_reduce(name + "/reduce", ck, ck, el.fr, el.fr_bn);
        }
        cell.edges.push_back(el);
      }
    }
    const std::set<int> ends = loose_ends(def);
    cell.outputs.assign(ends.begin(), ends.end());
    if (cell.reduction) {
      for (int input : cell.outputs) {
        if (input < 2) {
          add_factorized_reduce(pre + "/out_reduce" + std::to_string(input), ck, ck, cell.out_fr[input],
                                cell.out_fr_bn[input]);
        }
      }
    }
    cell.out_channels = ck * static_cast<int>(cell.outputs.size());
    cell.height = cell.reduction ? halve(h1) : h1;
    cell.width = cell.reduction ? halve(w1) : w1;
    c0 = c1, h0 = h1, w0 = w1;
    c1 = cell.out_channels, h1 = cell.height, w1 = cell.width;
    cells_.push_back(std::move(cell));
  }
  auto rng = rng_for();
  head_w_ = params_.add("head/w", fan_in_uniform<float>({c1, cfg_.num_classes}, c1, rng));
  head_b_ = params_.add("head/b", TensorF({cfg_.num_classes}, 0.0F));
}

std::vector<int> ChildNetwork::reduction_indices() const {
  std::vector<int> out;
  for (std::size_t k = 0; k < cells_.size(); ++k)
    if (cells_[k].reduction) out.push_back(static_cast<int>(k));
  return out;
}

std::vector<std::array<int, 3>> ChildNetwork::feature_shapes() const {
  std::vector<std::array<int, 3>> out;
  out.push_back({cfg_.channels, stem_height_, stem_width_});
  for (const auto& c : cells_) out.push_back({c.out_channels, c.height, c.width});
  return out;
}

Var ChildNetwork::edge_forward(GraphF& g, Var x, const EdgeLayer& e, bool training) {
  switch (e.op) {
    case OpKind::SepConv3x3:
    case OpKind::SepConv5x5: {
      Var y = x;
      for (int rep = 0; rep < 2; ++rep) {
        y = g.depthwise_conv2d(y, g.param(params_[e.dw[rep]]), rep == 0 ? e.stride : 1, e.kernel / 2, true);
        y = g.conv2d(y, g.param(params_[e.pw[rep]]), 1, 0);
        y = apply_bn(g, y, e.bn[rep], training);
      }
      return y;
    }
    case OpKind::AvgPool3x3: return g.avg_pool3x3(x, e.stride);
    case OpKind::MaxPool3x3: return g.max_pool3x3(x, e.stride);
    case OpKind::Identity: return e.stride == 1 ? x : factorized_reduce(g, x, e.fr, e.fr_bn, training);
  }
  return x;
}

Var ChildNetwork::forward(GraphF& g, Var x, bool training) {
  const auto& shape = g.value(x).shape();
  if (shape.size() != 4 || shape[1] != 1 || shape[2] != cfg_.input_height || shape[3] != cfg_.input_width) {
    throw ShapeError("network input must be [N, 1, " + std::to_string(cfg_.input_height) + ", " +
                     std::to_string(cfg_.input_width) + "], got " + TensorF::shape_string(shape));
  }
  Var stem = apply_bn(g, g.conv2d(x, g.param(params_[stem_w_]), 1, 1), stem_bn_, training);
  Var s0 = stem, s1 = stem;
  for (const CellLayer& cell : cells_) {
    std::vector<Var> nodes(static_cast<std::size_t>(cell.edges.size() / 2 + 2));
    nodes[0] = cell.reduce_s0 ? factorized_reduce(g, s0, cell.pre0_fr, cell.pre0_bn, training)
                              : apply_bn(g, g.conv2d(s0, g.param(params_[cell.pre0]), 1, 0, true), cell.pre0_bn, training);
    nodes[1] = apply_bn(g, g.conv2d(s1, g.param(params_[cell.pre1]), 1, 0, true), cell.pre1_bn, training);
    for (std::size_t i = 0; i < cell.edges.size(); i += 2) {
      const EdgeLayer& a = cell.edges[i];
      const EdgeLayer& b = cell.edges[i + 1];
      nodes[i / 2 + 2] = g.add(edge_forward(g, nodes[static_cast<std::size_t>(a.source)], a, training),
                               edge_forward(g, nodes[static_cast<std::size_t>(b.source)], b, training));
    }
    std::vector<Var> outs;
    for (int idx : cell.outputs) {
      Var v = nodes[static_cast<std::size_t>(idx)];
      if (cell.reduction && idx < 2) v = factorized_reduce(g, v, cell.out_fr[idx], cell.out_fr_bn[idx], training);
      outs.push_back(v);
    }
    s0 = s1;
    s1 = outs.size() == 1 ? outs.front() : g.concat_channels(outs);
  }
  return g.affine(g.global_avg_pool(s1), g.param(params_[head_w_]), g.param(params_[head_b_]));
}

ChildNetwork build_network(const Architecture& arch, const NetworkConfig& cfg) { return ChildNetwork(arch, cfg); }

std::size_t count_params(const ChildNetwork& net) { return net.params().trainable_count(); }

// ---------------------------------------------------------------------------

namespace {

TensorF gather_batch(const FeatureSplit& split, std::span<const std::size_t> idx, int h, int w,
                     std::vector<int>& labels) {
  const std::size_t item = static_cast<std::size_t>(h) * w;
  if (item != static_cast<std::size_t>(kFeatureSize)) {
    throw ShapeError("network input size does not match the feature map size");
  }
  TensorF x({static_cast<int>(idx.size()), 1, h, w});
  labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(split.item(idx[i]), item, x.data() + i * item);
    labels[i] = split.labels[idx[i]];
  }
  return x;
}

}  // namespace

std::vector<int> predict_classes(ChildNetwork& net, const FeatureSplit& split) {
  const auto& cfg = net.config();
  std::vector<int> out;
  out.reserve(split.size());
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < split.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end = std::min(split.size(), start + static_cast<std::size_t>(cfg.batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    GraphF g;
    const Var logits = net.forward(g, g.input(gather_batch(split, idx, cfg.input_height, cfg.input_width, labels)), false);
    const TensorF& v = g.value(logits);
    const int k = v.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = v.data() + i * static_cast<std::size_t>(k);
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

double evaluate_network(ChildNetwork& net, const FeatureSplit& split) {
  if (split.size() == 0) return 0.0;
  const auto pred = predict_classes(net, split);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == split.labels[i];
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

std::vector<EpochStats> train_network(ChildNetwork& net, const FeatureDataset& data, const EpochCallback& on_epoch) {
  const NetworkConfig& cfg = net.config();
  if (data.num_classes() > cfg.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes but the network only " +
                      std::to_string(cfg.num_classes));
  }
  std::vector<EpochStats> history;
  if (cfg.epochs == 0) return history;
  if (data.train.size() == 0) throw ConfigError("training split is empty");
  std::vector<std::size_t> order(data.train.size());
  std::vector<int> labels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    SgdConfig sgd = cfg.sgd;
    sgd.lr = 0.5 * cfg.sgd.lr * (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(cfg.seed, 1'000'000 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    try {
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        if (end - start < 2) continue;  // batch statistics need two items
        const std::span<const std::size_t> idx(order.data() + start, end - start);
        GraphF g;
        const Var logits = net.forward(g, g.input(gather_batch(data.train, idx, cfg.input_height, cfg.input_width, labels)), true);
        const Var total = g.softmax_cross_entropy(logits, labels);
        loss_sum += g.value(total).item();
        const Var mean = g.scale(total, 1.0F / static_cast<float>(idx.size()));
        net.params().zero_grad();
        g.backward(mean);
        sgd_momentum_step(net.params(), sgd);
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(e.what(), epoch + 1);
    }
    EpochStats s;
    s.epoch = epoch + 1;
    s.train_loss = loss_sum / static_cast<double>(order.size());
    s.val_acc = evaluate_network(net, data.validation);
    history.push_back(s);
    if (on_epoch) on_epoch(s);
  }
  return history;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history,
                       const std::vector<std::string>& header_comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& line : header_comment) out << "# " << line << '\n';
  out << "epoch,train_loss,val_acc\n";
  char buf[96];
  for (const auto& s : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", s.epoch, s.train_loss, s.val_acc);
    out << buf;
  }
  if (!out) throw IoError("write failed for " + path);
}

void save_network(const ChildNetwork& net, const std::string& path) {
  std::vector<NamedTensor> tensors = export_params(net.params(), "child/");
  const TokenSequence seq = encode_tokens(net.architecture());
  TensorF tokens({static_cast<int>(seq.size())});
  for (std::size_t i = 0; i < seq.size(); ++i) tokens[i] = static_cast<float>(seq.tokens[i]);
  const auto& c = net.config();
  tensors.push_back({"child_meta/tokens", tokens});
  tensors.push_back({"child_meta/config",
                     TensorF({5}, std::vector<float>{static_cast<float>(c.num_cells), static_cast<float>(c.channels),
                                                     static_cast<float>(c.num_classes),
                                                     static_cast<float>(c.input_height),
                                                     static_cast<float>(c.input_width)})});
  write_checkpoint(path, tensors);
}

ChildNetwork load_network(const std::string& path) {
  const auto tensors = read_checkpoint(path);
  const NamedTensor* tokens = nullptr;
  const NamedTensor* config = nullptr;
  for (const auto& t : tensors) {
    if (t.name == "child_meta/tokens") tokens = &t;
    if (t.name == "child_meta/config") config = &t;
  }
  if (!tokens || !config || config->value.size() != 5) {
    throw FormatError(path + ": not a child-network checkpoint (missing child_meta entries)");
  }
  TokenSequence seq;
  for (float v : tokens->value.values()) {
    if (v < 0 || v >= kOutputVocab) throw FormatError(path + ": bad architecture token");
    seq.tokens.push_back(static_cast<Token>(static_cast<int>(v)));
  }
  NetworkConfig cfg;
  cfg.num_cells = static_cast<int>(config->value[0]);
  cfg.channels = static_cast<int>(config->value[1]);
  cfg.num_classes = static_cast<int>(config->value[2]);
  cfg.input_height = static_cast<int>(config->value[3]);
  cfg.input_width = static_cast<int>(config->value[4]);
  ChildNetwork net(decode_tokens(seq), cfg);
  import_params(net.params(), tensors, "child/");
  return net;
}

}  // namespace nao
