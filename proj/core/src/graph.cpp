#include "nao/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Core>

namespace nao {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;
template <class T>
using CRowVec = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <class T>
std::string shp(const Tensor<T>& t) {
  return Tensor<T>::shape_string(t.shape());
}

int out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

template <class T>
T sigm(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

/// cols[(c * k + kh) * k + kw][oh * Wo + ow] = x[c][oh * s - p + kh][ow * s - p + kw]
template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, bool relu,
            T* cols) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* row = cols + static_cast<std::size_t>((c * k + kh) * k + kw) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + kh;
          T* out = row + static_cast<std::size_t>(oh) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(out, out + Wo, T(0));
            continue;
          }
          const T* in = x + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kw;
            T v = (iw < 0 || iw >= W) ? T(0) : in[iw];
            out[ow] = relu && v < T(0) ? T(0) : v;
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* dx) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* row = cols + static_cast<std::size_t>((c * k + kh) * k + kw) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          T* out = dx + (static_cast<std::size_t>(c) * H + ih) * W;
          const T* in = row + static_cast<std::size_t>(oh) * Wo;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < W) out[iw] += in[ow];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape plumbing

template <class T>
Var Graph<T>::push(Tensor<T> value, bool requires_grad, std::function<void()> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
bool Graph<T>::needs_grad(std::initializer_list<Var> vs) const {
  for (Var v : vs) {
    if (v.valid() && node(v).requires_grad) return true;
  }
  return false;
}

template <class T>
Tensor<T>& Graph<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <class T>
void Graph<T>::check_finite(const Tensor<T>& t, const char* op) const {
  if (!Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(t.data(), static_cast<Eigen::Index>(t.size())).allFinite()) {
    throw NonFiniteError(std::string("non-finite output from ") + op);
  }
}

template <class T>
Var Graph<T>::input(Tensor<T> value, bool requires_grad) {
  Var v = push(std::move(value), requires_grad);
  node(v).leaf = true;
  return v;
}

template <class T>
Var Graph<T>::param(Parameter<T>& p) {
  Var v = push(p.value, p.trainable);
  node(v).leaf = true;
  node(v).param = &p;
  return v;
}

template <class T>
void Graph<T>::backward(Var loss) {
  require(node(loss).value.size() == 1, "backward() needs a scalar loss, got " + shp(value(loss)));
  grad_buffer(loss)[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward) n.backward();
    if (n.param != nullptr && !n.grad.empty()) {
      Tensor<T>& pg = n.param->grad;
      if (pg.size() != n.grad.size()) pg = Tensor<T>(n.param->value.shape());
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
    if (!n.leaf) {
      n.value.release();
      n.grad.release();
      n.backward = nullptr;
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var Graph<T>::relu(Var x) {
  Tensor<T> y = value(x);
  for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    const Tensor<T>& xv = value(x);
    Tensor<T>& gx = grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += xv[i] > T(0) ? gy[i] : T(0);
  });
}

template <class T>
Var Graph<T>::tanh(Var x) {
  Tensor<T> y = value(x);
  for (auto& v : y.values()) v = std::tanh(v);
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    const Tensor<T>& yv = value(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (T(1) - yv[i] * yv[i]);
  });
}

template <class T>
Var Graph<T>::sigmoid(Var x) {
  Tensor<T> y = value(x);
  for (auto& v : y.values()) v = sigm(v);
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    const Tensor<T>& yv = value(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
  });
}

template <class T>
Var Graph<T>::add(Var a, Var b) {
  require(value(a).shape() == value(b).shape(),
          "add: shape mismatch " + shp(value(a)) + " vs " + shp(value(b)));
  Tensor<T> y = value(a);
  const Tensor<T>& bv = value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  check_finite(y, "add");
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({a, b}), [this, a, b, out] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    for (Var v : {a, b}) {
      if (!node(v).requires_grad) continue;
      Tensor<T>& gv = grad_buffer(v);
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += gy[i];
    }
  });
}

template <class T>
Var Graph<T>::scale(Var x, T factor) {
  Tensor<T> y = value(x);
  for (auto& v : y.values()) v *= factor;
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out, factor] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * gy[i];
  });
}

// ---------------------------------------------------------------------------
// Dense / sequence

template <class T>
Var Graph<T>::embedding(Var table, std::span<const int> ids) {
  const Tensor<T>& tv = value(table);
  require(tv.rank() == 2, "embedding: table must be [V, E], got " + shp(tv));
  const int vocab = tv.dim(0);
  const int e = tv.dim(1);
  const int n = static_cast<int>(ids.size());
  Tensor<T> y({n, e});
  for (int r = 0; r < n; ++r) {
    require(ids[static_cast<std::size_t>(r)] >= 0 && ids[static_cast<std::size_t>(r)] < vocab,
            "embedding: id out of range");
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(r)]) * e, e,
                y.data() + static_cast<std::size_t>(r) * e);
  }
  const int out = static_cast<int>(nodes_.size());
  std::vector<int> idv(ids.begin(), ids.end());
  return push(std::move(y), needs_grad({table}), [this, table, out, idv = std::move(idv), e] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    Tensor<T>& gt = grad_buffer(table);
    for (std::size_t r = 0; r < idv.size(); ++r) {
      T* dst = gt.data() + static_cast<std::size_t>(idv[r]) * e;
      const T* src = gy.data() + r * static_cast<std::size_t>(e);
      for (int k = 0; k < e; ++k) dst[k] += src[k];
    }
  });
}

template <class T>
Var Graph<T>::affine(Var x, Var w, Var b) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& wv = value(w);
  require(wv.rank() == 2, "affine: weight must be [in, out], got " + shp(wv));
  const int in = wv.dim(0);
  const int outd = wv.dim(1);
  require(xv.rank() >= 1 && xv.shape().back() == in,
          "affine: input " + shp(xv) + " does not end in " + std::to_string(in));
  if (b.valid()) {
    require(value(b).size() == static_cast<std::size_t>(outd), "affine: bias size mismatch");
  }
  const int rows = static_cast<int>(xv.size() / static_cast<std::size_t>(in));
  std::vector<int> shape = xv.shape();
  shape.back() = outd;
  Tensor<T> y(shape);
  MapR<T> Y(y.data(), rows, outd);
  Y.noalias() = CMapR<T>(xv.data(), rows, in) * CMapR<T>(wv.data(), in, outd);
  if (b.valid()) Y.rowwise() += CRowVec<T>(value(b).data(), outd);
  check_finite(y, "affine");
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x, w, b}), [this, x, w, b, out, rows, in, outd] {
    if (!has_grad(Var{out})) return;
    CMapR<T> G(grad(Var{out}).data(), rows, outd);
    if (node(x).requires_grad) {
      MapR<T>(grad_buffer(x).data(), rows, in).noalias() +=
          G * CMapR<T>(value(w).data(), in, outd).transpose();
    }
    if (node(w).requires_grad) {
      MapR<T>(grad_buffer(w).data(), in, outd).noalias() +=
          CMapR<T>(value(x).data(), rows, in).transpose() * G;
    }
    if (b.valid() && node(b).requires_grad) {
      MapR<T>(grad_buffer(b).data(), 1, outd) += G.colwise().sum();
    }
  });
}

template <class T>
std::pair<Var, Var> Graph<T>::lstm_cell(Var x, Var h, Var c, Var weight, Var bias) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& hv = value(h);
  const Tensor<T>& cv = value(c);
  const Tensor<T>& wv = value(weight);
  require(xv.rank() == 2 && hv.rank() == 2 && cv.rank() == 2, "lstm_cell: inputs must be rank 2");
  const int n = xv.dim(0);
  const int in = xv.dim(1);
  const int hid = hv.dim(1);
  require(hv.dim(0) == n && cv.shape() == hv.shape(), "lstm_cell: h/c shape mismatch");
  require(wv.rank() == 2 && wv.dim(0) == in + hid && wv.dim(1) == 4 * hid,
          "lstm_cell: weight must be [" + std::to_string(in + hid) + ", " + std::to_string(4 * hid) +
              "], got " + shp(wv));
  require(value(bias).size() == static_cast<std::size_t>(4 * hid), "lstm_cell: bias size");

  MatR<T> xh(n, in + hid);
  xh.leftCols(in) = CMapR<T>(xv.data(), n, in);
  xh.rightCols(hid) = CMapR<T>(hv.data(), n, hid);
  MatR<T> gates = xh * CMapR<T>(wv.data(), in + hid, 4 * hid);
  gates.rowwise() += CRowVec<T>(value(bias).data(), 4 * hid);

  gates.leftCols(2 * hid) = gates.leftCols(2 * hid).array().logistic();
  gates.middleCols(2 * hid, hid) = gates.middleCols(2 * hid, hid).array().tanh();
  gates.rightCols(hid) = gates.rightCols(hid).array().logistic();
  Tensor<T> hn({n, hid});
  Tensor<T> cn({n, hid});
  MapR<T> C(cn.data(), n, hid);
  C = gates.middleCols(hid, hid).cwiseProduct(CMapR<T>(cv.data(), n, hid)) +
      gates.leftCols(hid).cwiseProduct(gates.middleCols(2 * hid, hid));
  MatR<T> tanh_c = C.array().tanh().matrix();
  MapR<T>(hn.data(), n, hid) = gates.rightCols(hid).cwiseProduct(tanh_c);
  check_finite(cn, "lstm_cell");
  const bool rg = needs_grad({x, h, c, weight, bias});
  Var c_out = push(std::move(cn), rg);
  const int h_id = static_cast<int>(nodes_.size());
  Var h_out = push(std::move(hn), rg,
                   [this, x, h, c, weight, bias, c_out, h_id, n, in, hid, xh = std::move(xh),
                    gates = std::move(gates), tanh_c = std::move(tanh_c)] {
                     const bool gh = has_grad(Var{h_id});
                     const bool gc = has_grad(c_out);
                     if (!gh && !gc) return;
                     const Tensor<T>& cv = value(c);
                     MatR<T> dz(n, 4 * hid);
                     MatR<T> dc_prev(n, hid);
                     for (int r = 0; r < n; ++r) {
                       for (int j = 0; j < hid; ++j) {
                         const std::size_t k = static_cast<std::size_t>(r) * hid + j;
                         const T dh = gh ? grad(Var{h_id})[k] : T(0);
                         const T dco = gc ? grad(c_out)[k] : T(0);
                         const T i = gates(r, j), f = gates(r, hid + j), g = gates(r, 2 * hid + j),
                                 o = gates(r, 3 * hid + j);
                         const T tc = tanh_c(r, j);
                         const T dc = dco + dh * o * (T(1) - tc * tc);
                         dz(r, j) = dc * g * i * (T(1) - i);
                         dz(r, hid + j) = dc * cv[k] * f * (T(1) - f);
                         dz(r, 2 * hid + j) = dc * i * (T(1) - g * g);
                         dz(r, 3 * hid + j) = dh * tc * o * (T(1) - o);
                         dc_prev(r, j) = dc * f;
                       }
                     }
                     if (node(weight).requires_grad) {
                       MapR<T>(grad_buffer(weight).data(), in + hid, 4 * hid).noalias() +=
                           xh.transpose() * dz;
                     }
                     if (node(bias).requires_grad) {
                       MapR<T>(grad_buffer(bias).data(), 1, 4 * hid) += dz.colwise().sum();
                     }
                     if (node(x).requires_grad || node(h).requires_grad) {
                       MatR<T> dxh =
                           dz * CMapR<T>(value(weight).data(), in + hid, 4 * hid).transpose();
                       if (node(x).requires_grad) {
                         MapR<T>(grad_buffer(x).data(), n, in) += dxh.leftCols(in);
                       }
                       if (node(h).requires_grad) {
                         MapR<T>(grad_buffer(h).data(), n, hid) += dxh.rightCols(hid);
                       }
                     }
                     if (node(c).requires_grad) {
                       MapR<T>(grad_buffer(c).data(), n, hid) += dc_prev;
                     }
                   });
  return {h_out, c_out};
}

template <class T>
Var Graph<T>::additive_attention(Var query, Var keys, Var values, Var w_query, Var v) {
  const Tensor<T>& qv = value(query);
  const Tensor<T>& kv = value(keys);
  const Tensor<T>& vv = value(values);
  const Tensor<T>& wq = value(w_query);
  require(qv.rank() == 2 && kv.rank() == 3 && vv.rank() == 3, "attention: bad input ranks");
  const int n = qv.dim(0);
  const int hq = qv.dim(1);
  const int steps = kv.dim(1);
  const int a = kv.dim(2);
  const int hv = vv.dim(2);
  require(kv.dim(0) == n && vv.dim(0) == n && vv.dim(1) == steps, "attention: batch/length mismatch");
  require(wq.rank() == 2 && wq.dim(0) == hq && wq.dim(1) == a, "attention: w_query must be [" +
                                                                   std::to_string(hq) + ", " +
                                                                   std::to_string(a) + "]");
  require(value(v).size() == static_cast<std::size_t>(a), "attention: v size mismatch");

  MatR<T> q = CMapR<T>(qv.data(), n, hq) * CMapR<T>(wq.data(), hq, a);
  const T* vvec = value(v).data();
  MatR<T> u(static_cast<Eigen::Index>(n) * steps, a);
  MatR<T> alpha(n, steps);
  Tensor<T> ctx({n, hv});
  const auto vcol = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(vvec, a);
  for (int r = 0; r < n; ++r) {
    auto ur = u.middleRows(static_cast<Eigen::Index>(r) * steps, steps);
    ur = (CMapR<T>(kv.data() + static_cast<std::size_t>(r) * steps * a, steps, a).rowwise() + q.row(r))
             .array()
             .tanh();
    alpha.row(r) = (ur * vcol).transpose();
    const T mx = alpha.row(r).maxCoeff();
    T z = 0;
    for (int t = 0; t < steps; ++t) {
      alpha(r, t) = std::exp(alpha(r, t) - mx);
      z += alpha(r, t);
    }
    for (int t = 0; t < steps; ++t) alpha(r, t) /= z;
    MapR<T>(ctx.data() + static_cast<std::size_t>(r) * hv, 1, hv).noalias() =
        alpha.row(r) * CMapR<T>(vv.data() + static_cast<std::size_t>(r) * steps * hv, steps, hv);
  }
  check_finite(ctx, "additive_attention");
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(ctx), needs_grad({query, keys, values, w_query, v}),
              [this, query, keys, values, w_query, v, out, n, hq, steps, a, hv, u = std::move(u),
               alpha = std::move(alpha)] {
                if (!has_grad(Var{out})) return;
                const Tensor<T>& gctx = grad(Var{out});
                const Tensor<T>& vv = value(values);
                MatR<T> dq = MatR<T>::Zero(n, a);
                using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;
                const auto vcol = Eigen::Map<const Col>(value(v).data(), a);
                T* gvals = node(values).requires_grad ? grad_buffer(values).data() : nullptr;
                T* gkeys = node(keys).requires_grad ? grad_buffer(keys).data() : nullptr;
                T* gv = node(v).requires_grad ? grad_buffer(v).data() : nullptr;
                for (int r = 0; r < n; ++r) {
                  const std::size_t off = static_cast<std::size_t>(r) * steps;
                  const CRowVec<T> gc(gctx.data() + static_cast<std::size_t>(r) * hv, hv);
                  const CMapR<T> vals(vv.data() + off * hv, steps, hv);
                  const Col dalpha = vals * gc.transpose();
                  const T dot = alpha.row(r).dot(dalpha.transpose());
                  if (gvals) MapR<T>(gvals + off * hv, steps, hv).noalias() += alpha.row(r).transpose() * gc;
                  const Col ds = alpha.row(r).transpose().cwiseProduct(dalpha.array().matrix() - Col::Constant(steps, dot));
                  const auto ur = u.middleRows(static_cast<Eigen::Index>(off), steps);
                  const MatR<T> d = ((ds * vcol.transpose()).array() * (T(1) - ur.array().square())).matrix();
                  if (gv) Eigen::Map<Col>(gv, a).noalias() += ur.transpose() * ds;
                  dq.row(r) += d.colwise().sum();
                  if (gkeys) MapR<T>(gkeys + off * a, steps, a) += d;
                }
                if (node(w_query).requires_grad) {
                  MapR<T>(grad_buffer(w_query).data(), hq, a).noalias() +=
                      CMapR<T>(value(query).data(), n, hq).transpose() * dq;
                }
                if (node(query).requires_grad) {
                  MapR<T>(grad_buffer(query).data(), n, hq).noalias() +=
                      dq * CMapR<T>(value(w_query).data(), hq, a).transpose();
                }
              });
}

template <class T>
Var Graph<T>::mean_over_sequence(Var x) {
  const Tensor<T>& xv = value(x);
  require(xv.rank() == 3, "mean_over_sequence: expected [N, T, H], got " + shp(xv));
  const int n = xv.dim(0), steps = xv.dim(1), hid = xv.dim(2);
  Tensor<T> y({n, hid});
  const T inv = T(1) / static_cast<T>(steps);
  for (int r = 0; r < n; ++r) {
    for (int t = 0; t < steps; ++t) {
      const T* src = xv.data() + (static_cast<std::size_t>(r) * steps + t) * hid;
      T* dst = y.data() + static_cast<std::size_t>(r) * hid;
      for (int j = 0; j < hid; ++j) dst[j] += src[j] * inv;
    }
  }
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out, n, steps, hid, inv] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (int r = 0; r < n; ++r) {
      for (int t = 0; t < steps; ++t) {
        T* dst = gx.data() + (static_cast<std::size_t>(r) * steps + t) * hid;
        const T* src = gy.data() + static_cast<std::size_t>(r) * hid;
        for (int j = 0; j < hid; ++j) dst[j] += src[j] * inv;
      }
    }
  });
}

template <class T>
Var Graph<T>::stack_sequence(std::span<const Var> steps) {
  require(!steps.empty(), "stack_sequence: no steps");
  const Tensor<T>& first = value(steps[0]);
  require(first.rank() == 2, "stack_sequence: steps must be [N, H]");
  const int n = first.dim(0), hid = first.dim(1), len = static_cast<int>(steps.size());
  Tensor<T> y({n, len, hid});
  bool rg = false;
  for (int t = 0; t < len; ++t) {
    const Tensor<T>& sv = value(steps[static_cast<std::size_t>(t)]);
    require(sv.shape() == first.shape(), "stack_sequence: step shape mismatch");
    rg = rg || node(steps[static_cast<std::size_t>(t)]).requires_grad;
    for (int r = 0; r < n; ++r) {
      std::copy_n(sv.data() + static_cast<std::size_t>(r) * hid, hid,
                  y.data() + (static_cast<std::size_t>(r) * len + t) * hid);
    }
  }
  const int out = static_cast<int>(nodes_.size());
  std::vector<Var> sv(steps.begin(), steps.end());
  return push(std::move(y), rg, [this, sv = std::move(sv), out, n, len, hid] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    for (int t = 0; t < len; ++t) {
      const Var s = sv[static_cast<std::size_t>(t)];
      if (!node(s).requires_grad) continue;
      Tensor<T>& gs = grad_buffer(s);
      for (int r = 0; r < n; ++r) {
        const T* src = gy.data() + (static_cast<std::size_t>(r) * len + t) * hid;
        T* dst = gs.data() + static_cast<std::size_t>(r) * hid;
        for (int j = 0; j < hid; ++j) dst[j] += src[j];
      }
    }
  });
}

template <class T>
Var Graph<T>::sequence_step(Var x, int t) {
  const Tensor<T>& xv = value(x);
  require(xv.rank() == 3 && t >= 0 && t < xv.dim(1), "sequence_step: bad input or step");
  const int n = xv.dim(0), len = xv.dim(1), hid = xv.dim(2);
  Tensor<T> y({n, hid});
  for (int r = 0; r < n; ++r) {
    std::copy_n(xv.data() + (static_cast<std::size_t>(r) * len + t) * hid, hid,
                y.data() + static_cast<std::size_t>(r) * hid);
  }
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out, n, len, hid, t] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (int r = 0; r < n; ++r) {
      T* dst = gx.data() + (static_cast<std::size_t>(r) * len + t) * hid;
      const T* src = gy.data() + static_cast<std::size_t>(r) * hid;
      for (int j = 0; j < hid; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Var Graph<T>::l2_normalize(Var x) {
  const Tensor<T>& xv = value(x);
  require(xv.rank() >= 1, "l2_normalize: scalar input");
  const int d = xv.shape().back();
  const std::size_t rows = xv.size() / static_cast<std::size_t>(d);
  Tensor<T> y(xv.shape());
  AlignedVector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * d;
    T s = 0;
    for (int j = 0; j < d; ++j) s += src[j] * src[j];
    const T nrm = std::sqrt(s);
    norms[r] = nrm;
    if (nrm > T(0)) {
      T* dst = y.data() + r * d;
      for (int j = 0; j < d; ++j) dst[j] = src[j] / nrm;
    }
  }
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out, rows, d, norms = std::move(norms)] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    const Tensor<T>& yv = value(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] <= T(0)) continue;
      const T* g = gy.data() + r * d;
      const T* yy = yv.data() + r * d;
      T dot = 0;
      for (int j = 0; j < d; ++j) dot += g[j] * yy[j];
      T* dst = gx.data() + r * d;
      for (int j = 0; j < d; ++j) dst[j] += (g[j] - yy[j] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutional

template <class T>
Var Graph<T>::conv2d(Var x, Var w, int stride, int pad, bool relu_input) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& wv = value(w);
  require(xv.rank() == 4, "conv2d: input must be [N, C, H, W], got " + shp(xv));
  require(wv.rank() == 4 && wv.dim(1) == xv.dim(1) && wv.dim(2) == wv.dim(3),
          "conv2d: weight " + shp(wv) + " does not fit input " + shp(xv));
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int o = wv.dim(0), k = wv.dim(2);
  const int ho = out_size(h, k, stride, pad), wo = out_size(wd, k, stride, pad);
  require(ho > 0 && wo > 0, "conv2d: empty output");
  const int ckk = c * k * k;
  const std::size_t in_plane = static_cast<std::size_t>(c) * h * wd;
  const std::size_t out_plane = static_cast<std::size_t>(o) * ho * wo;
  const bool direct = k == 1 && stride == 1 && pad == 0 && !relu_input;

  Tensor<T> y({n, o, ho, wo});
  CMapR<T> W(wv.data(), o, ckk);
  AlignedVector<T> cols(direct ? 0 : static_cast<std::size_t>(ckk) * ho * wo);
  for (int s = 0; s < n; ++s) {
    const T* xs = xv.data() + s * in_plane;
    const T* src = xs;
    if (!direct) {
      im2col(xs, c, h, wd, k, stride, pad, ho, wo, relu_input, cols.data());
      src = cols.data();
    }
    MapR<T>(y.data() + s * out_plane, o, ho * wo).noalias() = W * CMapR<T>(src, ckk, ho * wo);
  }
  check_finite(y, "conv2d");
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x, w}),
              [this, x, w, out, n, c, h, wd, o, k, ho, wo, stride, pad, relu_input, direct, ckk,
               in_plane, out_plane] {
                if (!has_grad(Var{out})) return;
                const Tensor<T>& gy = grad(Var{out});
                const Tensor<T>& xv = value(x);
                CMapR<T> W(value(w).data(), o, ckk);
                const bool gx_needed = node(x).requires_grad;
                const bool gw_needed = node(w).requires_grad;
                T* gx = gx_needed ? grad_buffer(x).data() : nullptr;
                T* gw = gw_needed ? grad_buffer(w).data() : nullptr;
                AlignedVector<T> cols(static_cast<std::size_t>(ckk) * ho * wo);
                AlignedVector<T> dx_tmp(relu_input ? in_plane : 0);
                for (int s = 0; s < n; ++s) {
                  const T* xs = xv.data() + s * in_plane;
                  CMapR<T> G(gy.data() + s * out_plane, o, ho * wo);
                  if (gw_needed) {
                    const T* src = xs;
                    if (!direct) {
                      im2col(xs, c, h, wd, k, stride, pad, ho, wo, relu_input, cols.data());
                      src = cols.data();
                    }
                    MapR<T>(gw, o, ckk).noalias() += G * CMapR<T>(src, ckk, ho * wo).transpose();
                  }
                  if (!gx_needed) continue;
                  if (direct) {
                    MapR<T>(gx + s * in_plane, c, h * wd).noalias() += W.transpose() * G;
                    continue;
                  }
                  MapR<T>(cols.data(), ckk, ho * wo).noalias() = W.transpose() * G;
                  T* dst = relu_input ? dx_tmp.data() : gx + s * in_plane;
                  if (relu_input) std::fill(dx_tmp.begin(), dx_tmp.end(), T(0));
                  col2im(cols.data(), c, h, wd, k, stride, pad, ho, wo, dst);
                  if (relu_input) {
                    T* g = gx + s * in_plane;
                    for (std::size_t i = 0; i < in_plane; ++i) {
                      if (xs[i] > T(0)) g[i] += dx_tmp[i];
                    }
                  }
                }
              });
}

namespace {

/// Copies one [h, w] plane into a zero-bordered [h + 2p, w + 2p] buffer.
template <class T>
void pad_plane(const T* x, int h, int w, int pad, bool relu, T* out) {
  const int wp = w + 2 * pad;
  for (int i = 0; i < h; ++i) {
    T* dst = out + static_cast<std::size_t>(i + pad) * wp + pad;
    const T* src = x + static_cast<std::size_t>(i) * w;
    if (relu) {
      for (int j = 0; j < w; ++j) dst[j] = src[j] > T(0) ? src[j] : T(0);
    } else {
      std::copy_n(src, w, dst);
    }
  }
}

}  // namespace

template <class T>
Var Graph<T>::depthwise_conv2d(Var x, Var w, int stride, int pad, bool relu_input) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& wv = value(w);
  require(xv.rank() == 4, "depthwise_conv2d: input must be [N, C, H, W], got " + shp(xv));
  require(wv.rank() == 4 && wv.dim(0) == xv.dim(1) && wv.dim(1) == 1 && wv.dim(2) == wv.dim(3),
          "depthwise_conv2d: weight " + shp(wv) + " does not fit input " + shp(xv));
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3), k = wv.dim(2);
  const int ho = out_size(h, k, stride, pad), wo = out_size(wd, k, stride, pad);
  require(ho > 0 && wo > 0, "depthwise_conv2d: empty output");
  require(k <= 8, "depthwise_conv2d: kernels above 8x8 are not supported");
  Tensor<T> y({n, c, ho, wo});
  const int hp = h + 2 * pad, wp = wd + 2 * pad;
  AlignedVector<T> padded(static_cast<std::size_t>(hp) * wp, T(0));
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const T* xp = xv.data() + (static_cast<std::size_t>(s) * c + ch) * h * wd;
      pad_plane(xp, h, wd, pad, relu_input, padded.data());
      T* yp = y.data() + (static_cast<std::size_t>(s) * c + ch) * ho * wo;
      const T* kp = wv.data() + static_cast<std::size_t>(ch) * k * k;
      for (int oh = 0; oh < ho; ++oh) {
        T* yrow = yp + static_cast<std::size_t>(oh) * wo;
        for (int kh = 0; kh < k; ++kh) {
          const T* prow = padded.data() + static_cast<std::size_t>(oh * stride + kh) * wp;
          for (int kw = 0; kw < k; ++kw) {
            const T wgt = kp[kh * k + kw];
            const T* src = prow + kw;
            if (stride == 1) {
              for (int ow = 0; ow < wo; ++ow) yrow[ow] += wgt * src[ow];
            } else {
              for (int ow = 0; ow < wo; ++ow) yrow[ow] += wgt * src[ow * stride];
            }
          }
        }
      }
    }
  }
  check_finite(y, "depthwise_conv2d");
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x, w}),
              [this, x, w, out, n, c, h, wd, k, ho, wo, stride, pad, relu_input] {
                if (!has_grad(Var{out})) return;
                const Tensor<T>& gy = grad(Var{out});
                const Tensor<T>& xv = value(x);
                const Tensor<T>& wv = value(w);
                T* gx = node(x).requires_grad ? grad_buffer(x).data() : nullptr;
                T* gw = node(w).requires_grad ? grad_buffer(w).data() : nullptr;
                const int hp = h + 2 * pad, wp = wd + 2 * pad;
                AlignedVector<T> padded(static_cast<std::size_t>(hp) * wp, T(0));
                AlignedVector<T> gpad(static_cast<std::size_t>(hp) * wp);
                for (int s = 0; s < n; ++s) {
                  for (int ch = 0; ch < c; ++ch) {
                    const std::size_t in_off = (static_cast<std::size_t>(s) * c + ch) * h * wd;
                    const T* xp = xv.data() + in_off;
                    pad_plane(xp, h, wd, pad, relu_input, padded.data());
                    std::fill(gpad.begin(), gpad.end(), T(0));
                    const T* gp = gy.data() + (static_cast<std::size_t>(s) * c + ch) * ho * wo;
                    const T* kp = wv.data() + static_cast<std::size_t>(ch) * k * k;
                    T wacc[64] = {};
                    for (int oh = 0; oh < ho; ++oh) {
                      const T* grow = gp + static_cast<std::size_t>(oh) * wo;
                      for (int kh = 0; kh < k; ++kh) {
                        const std::size_t off = static_cast<std::size_t>(oh * stride + kh) * wp;
                        for (int kw = 0; kw < k; ++kw) {
                          const T wgt = kp[kh * k + kw];
                          const T* src = padded.data() + off + kw;
                          T* dst = gpad.data() + off + kw;
                          T acc = 0;
                          if (stride == 1) {
                            for (int ow = 0; ow < wo; ++ow) {
                              acc += grow[ow] * src[ow];
                              dst[ow] += grow[ow] * wgt;
                            }
                          } else {
                            for (int ow = 0; ow < wo; ++ow) {
                              acc += grow[ow] * src[ow * stride];
                              dst[ow * stride] += grow[ow] * wgt;
                            }
                          }
                          wacc[kh * k + kw] += acc;
                        }
                      }
                    }
                    if (gw) {
                      for (int i = 0; i < k * k; ++i) gw[static_cast<std::size_t>(ch) * k * k + i] += wacc[i];
                    }
                    if (gx) {
                      for (int ih = 0; ih < h; ++ih) {
                        const T* grow = gpad.data() + static_cast<std::size_t>(ih + pad) * wp + pad;
                        const T* xrow = xp + static_cast<std::size_t>(ih) * wd;
                        T* gxrow = gx + in_off + static_cast<std::size_t>(ih) * wd;
                        for (int iw = 0; iw < wd; ++iw) {
                          if (!relu_input || xrow[iw] > T(0)) gxrow[iw] += grow[iw];
                        }
                      }
                    }
                  }
                }
              });
}

template <class T>
Var Graph<T>::batch_norm(Var x, Var gamma, Var beta, const BatchNormState<T>& state, bool training) {
  const Tensor<T>& xv = value(x);
  require(xv.rank() == 2 || xv.rank() == 4, "batch_norm: input must be [N, C] or [N, C, H, W]");
  const int n = xv.dim(0), c = xv.dim(1);
  const int plane = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  require(value(gamma).size() == static_cast<std::size_t>(c) &&
              value(beta).size() == static_cast<std::size_t>(c),
          "batch_norm: gamma/beta must have C entries");
  require(state.running_mean && state.running_var, "batch_norm: missing running statistics");
  const double m = static_cast<double>(n) * plane;
  require(!training || m > 1, "batch_norm: training mode needs more than one value per channel");

  AlignedVector<T> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  Tensor<T>& rm = state.running_mean->value;
  Tensor<T>& rv = state.running_var->value;
  const double updates = static_cast<double>(state.running_mean->steps);
  const double keep = std::min(state.momentum, updates / (updates + 1.0));
  for (int ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0, ss = 0;
      for (int r = 0; r < n; ++r) {
        const T* p = xv.data() + (static_cast<std::size_t>(r) * c + ch) * plane;
        for (int i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / m;
      for (int r = 0; r < n; ++r) {
        const T* p = xv.data() + (static_cast<std::size_t>(r) * c + ch) * plane;
        for (int i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / m;
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      rm[ch] = static_cast<T>(keep * rm[ch] + (1.0 - keep) * mu);
      rv[ch] = static_cast<T>(keep * rv[ch] + (1.0 - keep) * var * m / (m - 1));
    } else {
      mean[ch] = rm[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + state.eps));
    }
  }
  if (training) {
    ++state.running_mean->steps;
    ++state.running_var->steps;
  }
  const T* g = value(gamma).data();
  const T* b = value(beta).data();
  Tensor<T> y(xv.shape());
  for (int r = 0; r < n; ++r) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(r) * c + ch) * plane;
      const T sc = g[ch] * inv_std[ch];
      const T sh = b[ch] - mean[ch] * sc;
      for (int i = 0; i < plane; ++i) y[off + i] = xv[off + i] * sc + sh;
    }
  }
  check_finite(y, "batch_norm");
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x, gamma, beta}),
              [this, x, gamma, beta, out, n, c, plane, m, training, mean = std::move(mean),
               inv_std = std::move(inv_std)] {
                if (!has_grad(Var{out})) return;
                const Tensor<T>& gy = grad(Var{out});
                const Tensor<T>& xv = value(x);
                const T* g = value(gamma).data();
                T* gg = node(gamma).requires_grad ? grad_buffer(gamma).data() : nullptr;
                T* gb = node(beta).requires_grad ? grad_buffer(beta).data() : nullptr;
                T* gx = node(x).requires_grad ? grad_buffer(x).data() : nullptr;
                for (int ch = 0; ch < c; ++ch) {
                  double sum_dy = 0, sum_dy_xhat = 0;
                  for (int r = 0; r < n; ++r) {
                    const std::size_t off = (static_cast<std::size_t>(r) * c + ch) * plane;
                    for (int i = 0; i < plane; ++i) {
                      const double xhat = (xv[off + i] - mean[ch]) * inv_std[ch];
                      sum_dy += gy[off + i];
                      sum_dy_xhat += gy[off + i] * xhat;
                    }
                  }
                  if (gg) gg[ch] += static_cast<T>(sum_dy_xhat);
                  if (gb) gb[ch] += static_cast<T>(sum_dy);
                  if (!gx) continue;
                  for (int r = 0; r < n; ++r) {
                    const std::size_t off = (static_cast<std::size_t>(r) * c + ch) * plane;
                    for (int i = 0; i < plane; ++i) {
                      if (training) {
                        const double xhat = (xv[off + i] - mean[ch]) * inv_std[ch];
                        gx[off + i] += static_cast<T>(g[ch] * inv_std[ch] / m *
                                                      (m * gy[off + i] - sum_dy - xhat * sum_dy_xhat));
                      } else {
                        gx[off + i] += g[ch] * inv_std[ch] * gy[off + i];
                      }
                    }
                  }
                }
              });
}

template <class T>
Var Graph<T>::avg_pool3x3(Var x, int stride) {
  const Tensor<T>& xv = value(x);
  require(xv.rank() == 4, "avg_pool3x3: input must be [N, C, H, W]");
  const int nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int ho = out_size(h, 3, stride, 1), wo = out_size(wd, 3, stride, 1);
  Tensor<T> y({xv.dim(0), xv.dim(1), ho, wo});
  for (int p = 0; p < nc; ++p) {
    const T* xp = xv.data() + static_cast<std::size_t>(p) * h * wd;
    T* yp = y.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int oh = 0; oh < ho; ++oh) {
      const int h0 = std::max(oh * stride - 1, 0), h1 = std::min(oh * stride + 2, h);
      for (int ow = 0; ow < wo; ++ow) {
        const int w0 = std::max(ow * stride - 1, 0), w1 = std::min(ow * stride + 2, wd);
        T s = 0;
        for (int i = h0; i < h1; ++i)
          for (int j = w0; j < w1; ++j) s += xp[static_cast<std::size_t>(i) * wd + j];
        yp[static_cast<std::size_t>(oh) * wo + ow] = s / static_cast<T>((h1 - h0) * (w1 - w0));
      }
    }
  }
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out, nc, h, wd, ho, wo, stride] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (int p = 0; p < nc; ++p) {
      T* gp = gx.data() + static_cast<std::size_t>(p) * h * wd;
      const T* yp = gy.data() + static_cast<std::size_t>(p) * ho * wo;
      for (int oh = 0; oh < ho; ++oh) {
        const int h0 = std::max(oh * stride - 1, 0), h1 = std::min(oh * stride + 2, h);
        for (int ow = 0; ow < wo; ++ow) {
          const int w0 = std::max(ow * stride - 1, 0), w1 = std::min(ow * stride + 2, wd);
          const T share = yp[static_cast<std::size_t>(oh) * wo + ow] /
                          static_cast<T>((h1 - h0) * (w1 - w0));
          for (int i = h0; i < h1; ++i)
            for (int j = w0; j < w1; ++j) gp[static_cast<std::size_t>(i) * wd + j] += share;
        }
      }
    }
  });
}

template <class T>
Var Graph<T>::max_pool3x3(Var x, int stride) {
  const Tensor<T>& xv = value(x);
  require(xv.rank() == 4, "max_pool3x3: input must be [N, C, H, W]");
  const int nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int ho = out_size(h, 3, stride, 1), wo = out_size(wd, 3, stride, 1);
  Tensor<T> y({xv.dim(0), xv.dim(1), ho, wo});
  // Winner index per output; first maximum in scan order wins ties.
  std::vector<int> arg(y.size());
  for (int p = 0; p < nc; ++p) {
    const T* xp = xv.data() + static_cast<std::size_t>(p) * h * wd;
    for (int oh = 0; oh < ho; ++oh) {
      const int h0 = std::max(oh * stride - 1, 0), h1 = std::min(oh * stride + 2, h);
      for (int ow = 0; ow < wo; ++ow) {
        const int w0 = std::max(ow * stride - 1, 0), w1 = std::min(ow * stride + 2, wd);
        int best = h0 * wd + w0;
        for (int i = h0; i < h1; ++i)
          for (int j = w0; j < w1; ++j)
            if (xp[i * wd + j] > xp[best]) best = i * wd + j;
        const std::size_t o = static_cast<std::size_t>(p) * ho * wo + static_cast<std::size_t>(oh) * wo + ow;
        y[o] = xp[best];
        arg[o] = best;
      }
    }
  }
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out, nc, h, wd, ho, wo, arg = std::move(arg)] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    const std::size_t per = static_cast<std::size_t>(ho) * wo;
    for (int p = 0; p < nc; ++p) {
      for (std::size_t o = 0; o < per; ++o) {
        const std::size_t k = static_cast<std::size_t>(p) * per + o;
        gx[static_cast<std::size_t>(p) * h * wd + static_cast<std::size_t>(arg[k])] += gy[k];
      }
    }
  });
}

template <class T>
Var Graph<T>::shift_crop(Var x) {
  const Tensor<T>& xv = value(x);
  require(xv.rank() == 4, "shift_crop: input must be [N, C, H, W]");
  const int nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  Tensor<T> y(xv.shape());
  for (int p = 0; p < nc; ++p) {
    const T* xp = xv.data() + static_cast<std::size_t>(p) * h * wd;
    T* yp = y.data() + static_cast<std::size_t>(p) * h * wd;
    for (int i = 0; i + 1 < h; ++i)
      for (int j = 0; j + 1 < wd; ++j) yp[i * wd + j] = xp[(i + 1) * wd + j + 1];
  }
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out, nc, h, wd] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (int p = 0; p < nc; ++p) {
      T* gp = gx.data() + static_cast<std::size_t>(p) * h * wd;
      const T* yp = gy.data() + static_cast<std::size_t>(p) * h * wd;
      for (int i = 0; i + 1 < h; ++i)
        for (int j = 0; j + 1 < wd; ++j) gp[(i + 1) * wd + j + 1] += yp[i * wd + j];
    }
  });
}

template <class T>
Var Graph<T>::concat_channels(std::span<const Var> xs) {
  require(!xs.empty(), "concat_channels: no inputs");
  const Tensor<T>& first = value(xs[0]);
  require(first.rank() >= 2, "concat_channels: inputs must have rank >= 2");
  const int n = first.dim(0);
  const std::size_t inner = first.size() / (static_cast<std::size_t>(n) * first.dim(1));
  std::vector<int> chans;
  int total = 0;
  bool rg = false;
  for (Var v : xs) {
    const Tensor<T>& t = value(v);
    require(t.rank() == first.rank() && t.dim(0) == n &&
                std::equal(t.shape().begin() + 2, t.shape().end(), first.shape().begin() + 2),
            "concat_channels: " + shp(t) + " does not match " + shp(first));
    chans.push_back(t.dim(1));
    total += t.dim(1);
    rg = rg || node(v).requires_grad;
  }
  std::vector<int> shape = first.shape();
  shape[1] = total;
  Tensor<T> y(shape);
  for (int r = 0; r < n; ++r) {
    std::size_t dst = static_cast<std::size_t>(r) * total * inner;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const std::size_t len = static_cast<std::size_t>(chans[i]) * inner;
      std::copy_n(value(xs[i]).data() + r * len, len, y.data() + dst);
      dst += len;
    }
  }
  const int out = static_cast<int>(nodes_.size());
  std::vector<Var> inputs(xs.begin(), xs.end());
  return push(std::move(y), rg,
              [this, inputs = std::move(inputs), chans = std::move(chans), out, n, total, inner] {
                if (!has_grad(Var{out})) return;
                const Tensor<T>& gy = grad(Var{out});
                for (int r = 0; r < n; ++r) {
                  std::size_t src = static_cast<std::size_t>(r) * total * inner;
                  for (std::size_t i = 0; i < inputs.size(); ++i) {
                    const std::size_t len = static_cast<std::size_t>(chans[i]) * inner;
                    if (node(inputs[i]).requires_grad) {
                      T* g = grad_buffer(inputs[i]).data() + r * len;
                      for (std::size_t k = 0; k < len; ++k) g[k] += gy[src + k];
                    }
                    src += len;
                  }
                }
              });
}

template <class T>
Var Graph<T>::global_avg_pool(Var x) {
  const Tensor<T>& xv = value(x);
  require(xv.rank() == 4, "global_avg_pool: input must be [N, C, H, W]");
  const int n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<T> y({n, c});
  for (int p = 0; p < n * c; ++p) {
    T s = 0;
    const T* xp = xv.data() + static_cast<std::size_t>(p) * plane;
    for (int i = 0; i < plane; ++i) s += xp[i];
    y[static_cast<std::size_t>(p)] = s / static_cast<T>(plane);
  }
  const int out = static_cast<int>(nodes_.size());
  return push(std::move(y), needs_grad({x}), [this, x, out, n, c, plane] {
    if (!has_grad(Var{out})) return;
    const Tensor<T>& gy = grad(Var{out});
    Tensor<T>& gx = grad_buffer(x);
    for (int p = 0; p < n * c; ++p) {
      const T share = gy[static_cast<std::size_t>(p)] / static_cast<T>(plane);
      T* gp = gx.data() + static_cast<std::size_t>(p) * plane;
      for (int i = 0; i < plane; ++i) gp[i] += share;
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Var Graph<T>::softmax_cross_entropy(Var logits, std::span<const int> targets,
                                    std::span<const std::uint8_t> mask) {
  const Tensor<T>& lv = value(logits);
  require(lv.rank() == 2, "softmax_cross_entropy: logits must be [N, K]");
  const int n = lv.dim(0), k = lv.dim(1);
  require(targets.size() == static_cast<std::size_t>(n), "softmax_cross_entropy: target count");
  require(mask.empty() || mask.size() == lv.size(), "softmax_cross_entropy: mask size");
  Tensor<T> probs(lv.shape());
  double loss = 0;
  for (int r = 0; r < n; ++r) {
    const T* row = lv.data() + static_cast<std::size_t>(r) * k;
    const std::uint8_t* mrow = mask.empty() ? nullptr : mask.data() + static_cast<std::size_t>(r) * k;
    const int tgt = targets[static_cast<std::size_t>(r)];
    require(tgt >= 0 && tgt < k && (!mrow || mrow[tgt]),
            "softmax_cross_entropy: target outside the allowed set");
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < k; ++j)
      if (!mrow || mrow[j]) mx = std::max(mx, row[j]);
    double z = 0;
    T* p = probs.data() + static_cast<std::size_t>(r) * k;
    for (int j = 0; j < k; ++j) {
      p[j] = (!mrow || mrow[j]) ? std::exp(row[j] - mx) : T(0);
      z += p[j];
    }
    for (int j = 0; j < k; ++j) p[j] = static_cast<T>(p[j] / z);
    loss += -(static_cast<double>(row[tgt]) - mx - std::log(z));
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(loss));
  check_finite(y, "softmax_cross_entropy");
  const int out = static_cast<int>(nodes_.size());
  std::vector<int> tv(targets.begin(), targets.end());
  return push(std::move(y), needs_grad({logits}),
              [this, logits, out, n, k, tv = std::move(tv), probs = std::move(probs)] {
                if (!has_grad(Var{out})) return;
                const T g = grad(Var{out})[0];
                Tensor<T>& gl = grad_buffer(logits);
                for (int r = 0; r < n; ++r) {
                  const std::size_t base = static_cast<std::size_t>(r) * k;
                  for (int j = 0; j < k; ++j) gl[base + j] += g * probs[base + j];
                  gl[base + tv[static_cast<std::size_t>(r)]] -= g;
                }
              });
}

template <class T>
Var Graph<T>::squared_error(Var pred, std::span<const T> targets) {
  const Tensor<T>& pv = value(pred);
  require(pv.size() == targets.size(), "squared_error: prediction/target count mismatch");
  T loss = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) loss += (pv[i] - targets[i]) * (pv[i] - targets[i]);
  const int out = static_cast<int>(nodes_.size());
  std::vector<T> tv(targets.begin(), targets.end());
  return push(Tensor<T>::scalar(loss), needs_grad({pred}), [this, pred, out, tv = std::move(tv)] {
    if (!has_grad(Var{out})) return;
    const T g = grad(Var{out})[0];
    const Tensor<T>& pv = value(pred);
    Tensor<T>& gp = grad_buffer(pred);
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * T(2) * (pv[i] - tv[i]);
  });
}

template class Graph<float>;
template class Graph<double>;

}  // namespace nao
