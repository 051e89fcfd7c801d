#include "nao/surrogate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <tuple>

#include "nao/errors.hpp"
#include "nao/graph.hpp"

namespace nao {

namespace {

constexpr const char* kPrefix = "surrogate/";

struct Bound {
  Var enc_embedding, enc_w, enc_b;
  Var pred_w1, pred_b1, pred_w2, pred_b2;
  Var dec_embedding, dec_w, dec_b;
  Var att_keys, att_query, att_v;
  Var out_w, out_b;
};

template <class Leaf>
Bound bind_with(const SurrogateModel::Ids& ids, Leaf&& leaf) {
  Bound b;
  b.enc_embedding = leaf(ids.enc_embedding);
  b.enc_w = leaf(ids.enc_w);
  b.enc_b = leaf(ids.enc_b);
  b.pred_w1 = leaf(ids.pred_w1);
  b.pred_b1 = leaf(ids.pred_b1);
  b.pred_w2 = leaf(ids.pred_w2);
  b.pred_b2 = leaf(ids.pred_b2);
  b.dec_embedding = leaf(ids.dec_embedding);
  b.dec_w = leaf(ids.dec_w);
  b.dec_b = leaf(ids.dec_b);
  b.att_keys = leaf(ids.att_keys);
  b.att_query = leaf(ids.att_query);
  b.att_v = leaf(ids.att_v);
  b.out_w = leaf(ids.out_w);
  b.out_b = leaf(ids.out_b);
  return b;
}

/// Parameters as constants: no gradient reaches the store.
Bound bind_frozen(GraphF& g, const SurrogateModel& m) {
  return bind_with(m.ids(), [&](ParamId id) { return g.input(m.params()[id].value); });
}

Bound bind_trainable(GraphF& g, SurrogateModel& m) {
  return bind_with(m.ids(), [&](ParamId id) { return g.param(m.params()[id]); });
}

Var zeros(GraphF& g, int n, int d) { return g.input(TensorF({n, d})); }

void check_lengths(const SurrogateModel& m, const std::vector<TokenSequence>& seqs) {
  for (const auto& s : seqs) {
    if (s.size() != m.sequence_length()) {
      throw GrammarError(std::min(s.size(), m.sequence_length()),
                         "sequence length " + std::to_string(s.size()) + " does not match model length " +
                             std::to_string(m.sequence_length()));
    }
  }
}

/// [N, T, H] unit-norm code from the encoder LSTM.
Var encoder_graph(GraphF& g, const Bound& b, const SurrogateModel& m,
                  const std::vector<TokenSequence>& seqs) {
  const int n = static_cast<int>(seqs.size());
  const int hid = m.dims().hidden;
  const int len = static_cast<int>(m.sequence_length());
  Var h = zeros(g, n, hid);
  Var c = zeros(g, n, hid);
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(len));
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (int t = 0; t < len; ++t) {
    for (int r = 0; r < n; ++r) ids[static_cast<std::size_t>(r)] = static_cast<int>(seqs[static_cast<std::size_t>(r)].tokens[static_cast<std::size_t>(t)]);
    Var x = g.embedding(b.enc_embedding, ids);
    std::tie(h, c) = g.lstm_cell(x, h, c, b.enc_w, b.enc_b);
    outs.push_back(g.l2_normalize(h));
  }
  return g.stack_sequence(outs);
}

Var predictor_graph(GraphF& g, const Bound& b, Var code) {
  Var pooled = g.mean_over_sequence(code);
  Var hidden = g.tanh(g.affine(pooled, b.pred_w1, b.pred_b1));
  return g.sigmoid(g.affine(hidden, b.pred_w2, b.pred_b2));
}

struct DecoderRun {
  GraphF& g;
  const Bound& b;
  Var code;
  Var keys;
  Var h;
  Var c;

  DecoderRun(GraphF& graph, const Bound& bound, Var code_var, int len)
      : g(graph), b(bound), code(code_var) {
    keys = g.affine(code, b.att_keys, Var{});
    h = g.sequence_step(code, len - 1);
    const TensorF& hv = g.value(h);
    c = zeros(g, hv.dim(0), hv.dim(1));
  }

  /// Logits [N, kOutputVocab] for the next position given the previous tokens.
  Var step(const std::vector<int>& prev) {
    Var x = g.embedding(b.dec_embedding, prev);
    std::tie(h, c) = g.lstm_cell(x, h, c, b.dec_w, b.dec_b);
    Var ctx = g.additive_attention(h, keys, code, b.att_query, b.att_v);
    const std::array<Var, 2> parts{h, ctx};
    return g.affine(g.concat_channels(parts), b.out_w, b.out_b);
  }
};

void fill_mask(std::uint8_t* row, std::uint32_t bits) {
  for (int k = 0; k < kOutputVocab; ++k) row[k] = (bits >> k) & 1U;
}

Token preceding_op(const std::vector<Token>& tokens, std::size_t pos) {
  return pos == 0 ? Token::Start : tokens[pos - 1];
}

/// Sum over positions of the masked cross-entropy of `targets`.
Var reconstruction_graph(GraphF& g, const Bound& b, Var code, const SurrogateModel& m,
                         const std::vector<TokenSequence>& targets) {
  const int n = static_cast<int>(targets.size());
  const int len = static_cast<int>(m.sequence_length());
  const int nodes = m.num_intermediate();
  DecoderRun dec(g, b, code, len);
  std::vector<int> prev(static_cast<std::size_t>(n), static_cast<int>(Token::Start));
  std::vector<int> tgt(static_cast<std::size_t>(n));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * kOutputVocab);
  Var total;
  for (int t = 0; t < len; ++t) {
    Var logits = dec.step(prev);
    for (int r = 0; r < n; ++r) {
      const auto& toks = targets[static_cast<std::size_t>(r)].tokens;
      const auto pos = static_cast<std::size_t>(t);
      tgt[static_cast<std::size_t>(r)] = static_cast<int>(toks[pos]);
      fill_mask(mask.data() + static_cast<std::size_t>(r) * kOutputVocab,
                allowed_tokens(pos, nodes, preceding_op(toks, pos)));
    }
    Var ce = g.softmax_cross_entropy(logits, tgt, mask);
    total = total.valid() ? g.add(total, ce) : ce;
    prev = tgt;
  }
  return total;
}

TensorF code_tensor(const std::vector<LatentCode>& codes) {
  const int n = static_cast<int>(codes.size());
  const int len = codes.front().steps;
  const int dim = codes.front().dim;
  TensorF t({n, len, dim});
  for (int r = 0; r < n; ++r) {
    const auto& c = codes[static_cast<std::size_t>(r)];
    if (c.steps != len || c.dim != dim) throw ShapeError("latent codes in a batch differ in shape");
    std::copy(c.hidden.begin(), c.hidden.end(), t.data() + static_cast<std::size_t>(r) * len * dim);
  }
  return t;
}

void check_code(const SurrogateModel& m, const LatentCode& c) {
  if (c.steps != static_cast<int>(m.sequence_length()) || c.dim != m.dims().hidden ||
      c.hidden.size() != static_cast<std::size_t>(c.steps) * c.dim) {
    throw ShapeError("latent code shape does not match the surrogate");
  }
}

std::vector<LatentCode> split_codes(const TensorF& t) {
  const int n = t.dim(0), len = t.dim(1), dim = t.dim(2);
  std::vector<LatentCode> out(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    auto& c = out[static_cast<std::size_t>(r)];
    c.steps = len;
    c.dim = dim;
    const float* src = t.data() + static_cast<std::size_t>(r) * len * dim;
    c.hidden.assign(src, src + static_cast<std::size_t>(len) * dim);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

SurrogateModel::SurrogateModel(int num_intermediate, std::uint64_t seed, SurrogateDims dims)
    : num_intermediate_(num_intermediate), dims_(dims) {
  if (num_intermediate < 1 || num_intermediate > kMaxNodes) {
    throw std::invalid_argument("surrogate: B must be in [1, " + std::to_string(kMaxNodes) + "]");
  }
  std::mt19937_64 rng(seed);
  const int e = dims.embedding, h = dims.hidden, a = dims.attention, p = dims.predictor_hidden;
  auto lstm_bias = [h] {
    TensorF b({4 * h});
    for (int j = h; j < 2 * h; ++j) b[static_cast<std::size_t>(j)] = 1.0F;
    return b;
  };
  auto& ps = params_;
  ids_.enc_embedding = ps.add("enc/embedding", uniform_tensor<float>({kVocabSize, e}, 1.0, rng));
  ids_.enc_w = ps.add("enc/lstm_w", fan_in_uniform<float>({e + h, 4 * h}, e + h, rng));
  ids_.enc_b = ps.add("enc/lstm_b", lstm_bias());
  ids_.pred_w1 = ps.add("pred/w1", fan_in_uniform<float>({h, p}, h, rng));
  ids_.pred_b1 = ps.add("pred/b1", TensorF({p}));
  ids_.pred_w2 = ps.add("pred/w2", fan_in_uniform<float>({p, 1}, p, rng));
  ids_.pred_b2 = ps.add("pred/b2", TensorF({1}));
  ids_.dec_embedding = ps.add("dec/embedding", uniform_tensor<float>({kVocabSize, e}, 1.0, rng));
  ids_.dec_w = ps.add("dec/lstm_w", fan_in_uniform<float>({e + h, 4 * h}, e + h, rng));
  ids_.dec_b = ps.add("dec/lstm_b", lstm_bias());
  ids_.att_keys = ps.add("att/w_keys", fan_in_uniform<float>({h, a}, h, rng));
  ids_.att_query = ps.add("att/w_query", fan_in_uniform<float>({h, a}, h, rng));
  ids_.att_v = ps.add("att/v", fan_in_uniform<float>({a}, a, rng));
  ids_.out_w = ps.add("out/w", fan_in_uniform<float>({2 * h, kOutputVocab}, 2 * h, rng));
  ids_.out_b = ps.add("out/b", TensorF({kOutputVocab}));
}

std::vector<LatentCode> encode_batch(const SurrogateModel& model,
                                     const std::vector<TokenSequence>& seqs) {
  if (seqs.empty()) return {};
  check_lengths(model, seqs);
  GraphF g;
  const Bound b = bind_frozen(g, model);
  return split_codes(g.value(encoder_graph(g, b, model, seqs)));
}

LatentCode encode(const SurrogateModel& model, const TokenSequence& seq) {
  return encode_batch(model, {seq}).front();
}

float predict(const SurrogateModel& model, const LatentCode& code) {
  check_code(model, code);
  GraphF g;
  const Bound b = bind_frozen(g, model);
  Var c = g.input(code_tensor({code}));
  return g.value(predictor_graph(g, b, c))[0];
}

LatentCode predictor_gradient(const SurrogateModel& model, const LatentCode& code) {
  check_code(model, code);
  GraphF g;
  const Bound b = bind_frozen(g, model);
  Var c = g.input(code_tensor({code}), true);
  Var y = predictor_graph(g, b, c);
  g.backward(y);
  LatentCode out{code.steps, code.dim, std::vector<float>(code.hidden.size(), 0.0F)};
  const TensorF& gr = g.grad(c);
  if (!gr.empty()) std::copy(gr.values().begin(), gr.values().end(), out.hidden.begin());
  return out;
}

std::vector<Decoded> decode_greedy_batch(const SurrogateModel& model,
                                         const std::vector<LatentCode>& codes) {
  if (codes.empty()) return {};
  for (const auto& c : codes) check_code(model, c);
  const int n = static_cast<int>(codes.size());
  const int len = static_cast<int>(model.sequence_length());
  const int nodes = model.num_intermediate();
  GraphF g;
  const Bound b = bind_frozen(g, model);
  DecoderRun dec(g, b, g.input(code_tensor(codes)), len);
  std::vector<Decoded> out(static_cast<std::size_t>(n));
  for (auto& d : out) d.seq.tokens.reserve(static_cast<std::size_t>(len));
  std::vector<int> prev(static_cast<std::size_t>(n), static_cast<int>(Token::Start));
  for (int t = 0; t < len; ++t) {
    const TensorF& logits = g.value(dec.step(prev));
    for (int r = 0; r < n; ++r) {
      auto& d = out[static_cast<std::size_t>(r)];
      const std::uint32_t bits =
          allowed_tokens(static_cast<std::size_t>(t), nodes, preceding_op(d.seq.tokens, static_cast<std::size_t>(t)));
      const float* row = logits.data() + static_cast<std::size_t>(r) * kOutputVocab;
      int best = -1;
      float mx = -std::numeric_limits<float>::infinity();
      for (int k = 0; k < kOutputVocab; ++k) {
        if (((bits >> k) & 1U) && (best < 0 || row[k] > mx)) {
          best = k;
          mx = row[k];
        }
      }
      double z = 0;
      for (int k = 0; k < kOutputVocab; ++k) {
        if ((bits >> k) & 1U) z += std::exp(static_cast<double>(row[k]) - mx);
      }
      d.log_prob -= std::log(z);
      d.seq.tokens.push_back(static_cast<Token>(best));
      prev[static_cast<std::size_t>(r)] = best;
    }
  }
  return out;
}

Decoded decode_greedy(const SurrogateModel& model, const LatentCode& code) {
  return decode_greedy_batch(model, {code}).front();
}

double teacher_forced_log_prob(const SurrogateModel& model, const LatentCode& code,
                               const TokenSequence& target) {
  check_code(model, code);
  check_lengths(model, {target});
  (void)decode_tokens(target);
  GraphF g;
  const Bound b = bind_frozen(g, model);
  Var c = g.input(code_tensor({code}));
  return -static_cast<double>(g.value(reconstruction_graph(g, b, c, model, {target}))[0]);
}

namespace {

struct JointVars {
  Var total, pred, rec;
};

JointVars joint_graph(GraphF& g, const Bound& b, const SurrogateModel& m,
                      const std::vector<TrainPair>& pairs, double lambda) {
  std::vector<TokenSequence> seqs;
  std::vector<float> scores;
  seqs.reserve(pairs.size());
  for (const auto& p : pairs) {
    seqs.push_back(p.seq);
    scores.push_back(p.score);
  }
  check_lengths(m, seqs);
  Var code = encoder_graph(g, b, m, seqs);
  Var pred = g.squared_error(predictor_graph(g, b, code), scores);
  Var rec = reconstruction_graph(g, b, code, m, seqs);
  Var total = g.add(g.scale(pred, static_cast<float>(lambda)), g.scale(rec, static_cast<float>(1.0 - lambda)));
  return {total, pred, rec};
}

JointLoss read_loss(const GraphF& g, const JointVars& v) {
  return {g.value(v.total)[0], g.value(v.pred)[0], g.value(v.rec)[0]};
}

}  // namespace

JointLoss loss_joint(const SurrogateModel& model, const std::vector<TrainPair>& pairs, double lambda) {
  if (pairs.empty()) throw std::invalid_argument("loss_joint: empty pool");
  GraphF g;
  const Bound b = bind_frozen(g, model);
  return read_loss(g, joint_graph(g, b, model, pairs, lambda));
}

std::vector<JointLoss> train_surrogate(SurrogateModel& model, const std::vector<TrainPair>& pairs,
                                       const SurrogateTrainConfig& cfg,
                                       const std::function<void(int, const JointLoss&)>& on_epoch) {
  if (pairs.size() < 2) throw std::invalid_argument("train_surrogate: need at least two pairs");
  std::vector<JointLoss> curve;
  curve.reserve(static_cast<std::size_t>(std::max(cfg.epochs, 0)));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    model.params().zero_grad();
    JointLoss loss;
    try {
      GraphF g;
      const Bound b = bind_trainable(g, model);
      const JointVars v = joint_graph(g, b, model, pairs, cfg.lambda);
      loss = read_loss(g, v);
      g.backward(v.total);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(e.what(), epoch);
    }
    adam_step(model.params(), cfg.adam);
    curve.push_back(loss);
    if (on_epoch) on_epoch(epoch, loss);
  }
  return curve;
}

LatentCode latent_ascend(const SurrogateModel& model, const LatentCode& code, double eta,
                         int max_steps) {
  check_code(model, code);
  if (eta == 0.0 || max_steps <= 0) return code;
  const TokenSequence start = decode_greedy(model, code).seq;
  const float start_score = predict(model, code);
  LatentCode cur = code;
  for (int s = 0; s < max_steps; ++s) {
    const LatentCode grad = predictor_gradient(model, cur);
    for (int t = 0; t < cur.steps; ++t) {
      float* h = cur.hidden.data() + static_cast<std::size_t>(t) * cur.dim;
      const float* gr = grad.step(t);
      double norm = 0;
      for (int j = 0; j < cur.dim; ++j) {
        h[j] += static_cast<float>(eta) * gr[j];
        norm += static_cast<double>(h[j]) * h[j];
      }
      norm = std::sqrt(norm);
      if (norm > 0) {
        for (int j = 0; j < cur.dim; ++j) h[j] = static_cast<float>(h[j] / norm);
      }
    }
    if (decode_greedy(model, cur).seq != start) break;
  }
  return predict(model, cur) >= start_score ? cur : code;
}

std::vector<float> normalize_scores(const std::vector<double>& raw) {
  if (raw.empty()) throw std::invalid_argument("normalize_scores: empty pool");
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  std::vector<float> out(raw.size(), 0.5F);
  if (*hi > *lo) {
    for (std::size_t i = 0; i < raw.size(); ++i) {
      out[i] = static_cast<float>((raw[i] - *lo) / (*hi - *lo));
    }
  }
  return out;
}

double reconstruction_accuracy(const SurrogateModel& model, const std::vector<TrainPair>& pairs) {
  if (pairs.empty()) return 0.0;
  std::vector<TokenSequence> seqs;
  for (const auto& p : pairs) seqs.push_back(p.seq);
  const auto decoded = decode_greedy_batch(model, encode_batch(model, seqs));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) hits += decoded[i].seq == seqs[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(seqs.size());
}

void save_surrogate(const SurrogateModel& model, const std::string& path) {
  write_checkpoint(path, export_params(model.params(), kPrefix));
}

void load_surrogate(SurrogateModel& model, const std::string& path) {
  import_params(model.params(), read_checkpoint(path), kPrefix);
}

}  // namespace nao
