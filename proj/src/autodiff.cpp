// Copyright 2026 The pasdl Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pasdl/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace pasdl::diff {

std::uint64_t Parameter::next_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1);
}

NodeId Graph::push(Array4 value, std::vector<NodeId> inputs,
                   std::function<void(Graph&, Node&)> bw) {
  if (!value.all_finite())
    throw NumericError("graph: non-finite value produced by node " +
                       std::to_string(nodes_.size()));
  auto n = std::make_unique<Node>();
  n->value = std::move(value);
  n->requires_grad = any_requires_grad(inputs);
  n->inputs = std::move(inputs);
  n->backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

bool Graph::any_requires_grad(const std::vector<NodeId>& ids) const {
  for (NodeId id : ids)
    if (nodes_[id]->requires_grad) return true;
  return false;
}

NodeId Graph::constant(Array4 v) { return push(std::move(v), {}, nullptr); }

NodeId Graph::param(Parameter& p) {
  NodeId id = push(p.value, {}, [](Graph&, Node& self) {
    double* g = self.bound->grad.data();
    const double* ng = self.grad.data();
    const std::int64_t n = self.grad.numel();
    for (std::int64_t i = 0; i < n; ++i) g[i] += ng[i];
  });
  nodes_[id]->requires_grad = true;
  nodes_[id]->bound = &p;
  return id;
}

void Graph::backward(NodeId loss) {
  Node& ln = node(loss);
  if (ln.value.numel() != 1)
    throw ConfigError("backward: loss node is not scalar, shape " +
                      ln.value.shape().str());
  for (auto& n : nodes_) {
    if (n->requires_grad) {
      n->grad = Array4(n->value.shape());
    }
  }
  if (!ln.requires_grad) return;  // loss does not depend on any parameter
  ln.grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.requires_grad && n.backward) n.backward(*this, n);
  }
}

// ---------------------------------------------------------------------------
// conv2d

static int conv_out_dim(int in, int pad, int k, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

NodeId Graph::conv2d(NodeId x, NodeId w, NodeId bias, std::pair<int, int> stride,
                     std::pair<int, int> pad) {
  const Array4& xv = value(x);
  const Array4& wv = value(w);
  const Shape4 xs = xv.shape(), ws = wv.shape();
  const auto [sh, sw] = stride;
  const auto [ph, pw] = pad;
  if (xs.c != ws.c)
    throw ConfigError("conv2d: input channels " + xs.str() +
                      " do not match weight " + ws.str());
  if (sh < 1 || sw < 1) throw ConfigError("conv2d: stride must be positive");
  const int Ho = conv_out_dim(xs.h, ph, ws.h, sh);
  const int Wo = conv_out_dim(xs.w, pw, ws.w, sw);
  if (Ho <= 0 || Wo <= 0)
    throw ConfigError("conv2d: empty output for input " + xs.str() +
                      " weight " + ws.str());

  Array4 out({xs.b, ws.b, Ho, Wo});
  if (bias >= 0) {
    const Array4& bv = value(bias);
    if (bv.shape() != Shape4{1, ws.b, 1, 1})
      throw ConfigError("conv2d: bias shape " + bv.shape().str() +
                        " must be (1," + std::to_string(ws.b) + ",1,1)");
    for (int b = 0; b < xs.b; ++b)
      for (int co = 0; co < ws.b; ++co) {
        double* o = &out.at(b, co, 0, 0);
        const double bval = bv[co];
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i)
          o[i] = bval;
      }
  }
  for (int b = 0; b < xs.b; ++b)
    for (int co = 0; co < ws.b; ++co)
      for (int ci = 0; ci < xs.c; ++ci)
        for (int kh = 0; kh < ws.h; ++kh)
          for (int kw = 0; kw < ws.w; ++kw) {
            const double wval = wv.at(co, ci, kh, kw);
            if (wval == 0.0) continue;
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * sh - ph + kh;
              if (ih < 0 || ih >= xs.h) continue;
              double* orow = &out.at(b, co, oh, 0);
              const double* xrow = &xv.at(b, ci, ih, 0);
              for (int ow = 0; ow < Wo; ++ow) {
                const int iw = ow * sw - pw + kw;
                if (iw < 0 || iw >= xs.w) continue;
                orow[ow] += wval * xrow[iw];
              }
            }
          }

  std::vector<NodeId> ins = {x, w};
  if (bias >= 0) ins.push_back(bias);
  return push(std::move(out), std::move(ins),
              [x, w, bias, sh, sw, ph, pw](Graph& g, Node& self) {
                Node& xn = g.node(x);
                Node& wn = g.node(w);
                const Array4& xv = xn.value;
                const Array4& wv = wn.value;
                const Array4& gy = self.grad;
                const Shape4 xs = xv.shape(), ws = wv.shape(),
                             ys = self.value.shape();
                if (bias >= 0 && g.node(bias).requires_grad) {
                  Array4& gb = g.node(bias).grad;
                  for (int b = 0; b < ys.b; ++b)
                    for (int co = 0; co < ys.c; ++co) {
                      const double* grow = &gy.at(b, co, 0, 0);
                      double s = 0.0;
                      for (std::int64_t i = 0;
                           i < static_cast<std::int64_t>(ys.h) * ys.w; ++i)
                        s += grow[i];
                      gb[co] += s;
                    }
                }
                const bool need_dx = xn.requires_grad;
                const bool need_dw = wn.requires_grad;
                for (int b = 0; b < ys.b; ++b)
                  for (int co = 0; co < ys.c; ++co)
                    for (int ci = 0; ci < xs.c; ++ci)
                      for (int kh = 0; kh < ws.h; ++kh)
                        for (int kw = 0; kw < ws.w; ++kw) {
                          const double wval = wv.at(co, ci, kh, kw);
                          double wgrad = 0.0;
                          for (int oh = 0; oh < ys.h; ++oh) {
                            const int ih = oh * sh - ph + kh;
                            if (ih < 0 || ih >= xs.h) continue;
                            const double* grow = &gy.at(b, co, oh, 0);
                            const double* xrow = &xv.at(b, ci, ih, 0);
                            double* dxrow = need_dx ? &xn.grad.at(b, ci, ih, 0) : nullptr;
                            for (int ow = 0; ow < ys.w; ++ow) {
                              const int iw = ow * sw - pw + kw;
                              if (iw < 0 || iw >= xs.w) continue;
                              const double gv = grow[ow];
                              if (need_dx) dxrow[iw] += gv * wval;
                              if (need_dw) wgrad += gv * xrow[iw];
                            }
                          }
                          if (need_dw) wn.grad.at(co, ci, kh, kw) += wgrad;
                        }
              });
}

NodeId Graph::conv2d_roi(NodeId x, NodeId w, Rect roi) {
  const Array4& xv = value(x);
  const Array4& wv = value(w);
  const Shape4 xs = xv.shape(), ws = wv.shape();
  if (xs.c != ws.c)
    throw ConfigError("conv2d_roi: input channels " + xs.str() +
                      " do not match weight " + ws.str());
  if (ws.h % 2 == 0 || ws.w % 2 == 0)
    throw ConfigError("conv2d_roi: kernel dims must be odd");
  if (roi.r0 < 0 || roi.c0 < 0 || roi.r1 > xs.h || roi.c1 > xs.w || roi.empty())
    throw ConfigError("conv2d_roi: roi out of bounds");
  const int ph = ws.h / 2, pw = ws.w / 2;

  Array4 out({xs.b, ws.b, roi.rows(), roi.cols()});
  for (int b = 0; b < xs.b; ++b)
    for (int co = 0; co < ws.b; ++co)
      for (int ci = 0; ci < xs.c; ++ci)
        for (int kh = 0; kh < ws.h; ++kh)
          for (int kw = 0; kw < ws.w; ++kw) {
            const double wval = wv.at(co, ci, kh, kw);
            for (int r = roi.r0; r < roi.r1; ++r) {
              const int ih = r - ph + kh;
              if (ih < 0 || ih >= xs.h) continue;
              double* orow = &out.at(b, co, r - roi.r0, 0);
              const double* xrow = &xv.at(b, ci, ih, 0);
              for (int c = roi.c0; c < roi.c1; ++c) {
                const int iw = c - pw + kw;
                if (iw < 0 || iw >= xs.w) continue;
                orow[c - roi.c0] += wval * xrow[iw];
              }
            }
          }

  return push(std::move(out), {x, w}, [x, w, roi, ph, pw](Graph& g, Node& self) {
    Node& xn = g.node(x);
    Node& wn = g.node(w);
    const Array4& xv = xn.value;
    const Array4& wv = wn.value;
    const Array4& gy = self.grad;
    const Shape4 xs = xv.shape(), ws = wv.shape();
    for (int b = 0; b < xs.b; ++b)
      for (int co = 0; co < ws.b; ++co)
        for (int ci = 0; ci < xs.c; ++ci)
          for (int kh = 0; kh < ws.h; ++kh)
            for (int kw = 0; kw < ws.w; ++kw) {
              const double wval = wv.at(co, ci, kh, kw);
              double wgrad = 0.0;
              for (int r = roi.r0; r < roi.r1; ++r) {
                const int ih = r - ph + kh;
                if (ih < 0 || ih >= xs.h) continue;
                const double* grow = &gy.at(b, co, r - roi.r0, 0);
                const double* xrow = &xv.at(b, ci, ih, 0);
                double* dxrow = xn.requires_grad ? &xn.grad.at(b, ci, ih, 0) : nullptr;
                for (int c = roi.c0; c < roi.c1; ++c) {
                  const int iw = c - pw + kw;
                  if (iw < 0 || iw >= xs.w) continue;
                  const double gv = grow[c - roi.c0];
                  if (dxrow) dxrow[iw] += gv * wval;
                  wgrad += gv * xrow[iw];
                }
              }
              if (wn.requires_grad) wn.grad.at(co, ci, kh, kw) += wgrad;
            }
  });
}

// ---------------------------------------------------------------------------
// pooling / activation / resampling

NodeId Graph::maxpool_1x2(NodeId x) {
  const Array4& xv = value(x);
  const Shape4 s = xv.shape();
  if (s.w % 2 != 0)
    throw ConfigError("maxpool_1x2: width must be even, got " + s.str());
  Array4 out({s.b, s.c, s.h, s.w / 2});
  auto arg = std::make_shared<std::vector<std::uint8_t>>(out.numel());
  const double* in = xv.data();
  double* o = out.data();
  std::uint8_t* a = arg->data();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double l = in[2 * i], r = in[2 * i + 1];
    // ties go to the lower (left) index
    if (l >= r) {
      o[i] = l;
      a[i] = 0;
    } else {
      o[i] = r;
      a[i] = 1;
    }
  }
  return push(std::move(out), {x}, [x, arg](Graph& g, Node& self) {
    Node& xn = g.node(x);
    if (!xn.requires_grad) return;
    double* gx = xn.grad.data();
    const double* gy = self.grad.data();
    const std::uint8_t* a = arg->data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      gx[2 * i + a[i]] += gy[i];
  });
}

NodeId Graph::relu(NodeId x) {
  const Array4& xv = value(x);
  Array4 out(xv.shape());
  for (std::int64_t i = 0; i < xv.numel(); ++i)
    out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return push(std::move(out), {x}, [x](Graph& g, Node& self) {
    Node& xn = g.node(x);
    if (!xn.requires_grad) return;
    const double* xvp = xn.value.data();
    double* gx = xn.grad.data();
    const double* gy = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      if (xvp[i] > 0.0) gx[i] += gy[i];
  });
}

NodeId Graph::upsample_nn2(NodeId x) {
  const Array4& xv = value(x);
  const Shape4 s = xv.shape();
  Array4 out({s.b, s.c, s.h * 2, s.w * 2});
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < 2 * s.h; ++h) {
        const double* irow = &xv.at(b, c, h / 2, 0);
        double* orow = &out.at(b, c, h, 0);
        for (int w = 0; w < 2 * s.w; ++w) orow[w] = irow[w / 2];
      }
  return push(std::move(out), {x}, [x](Graph& g, Node& self) {
    Node& xn = g.node(x);
    if (!xn.requires_grad) return;
    const Shape4 s = xn.value.shape();
    for (int b = 0; b < s.b; ++b)
      for (int c = 0; c < s.c; ++c)
        for (int h = 0; h < 2 * s.h; ++h) {
          double* grow = &xn.grad.at(b, c, h / 2, 0);
          const double* gyrow = &self.grad.at(b, c, h, 0);
          for (int w = 0; w < 2 * s.w; ++w) grow[w / 2] += gyrow[w];
        }
  });
}

NodeId Graph::softmax_all(NodeId x) {
  const Array4& xv = value(x);
  const Shape4 s = xv.shape();
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  Array4 out(s);
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c) {
      const double* in = &xv.at(b, c, 0, 0);
      double* o = &out.at(b, c, 0, 0);
      double m = in[0];
      for (std::int64_t i = 1; i < hw; ++i) m = std::max(m, in[i]);
      double sum = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) {
        o[i] = std::exp(in[i] - m);
        sum += o[i];
      }
      for (std::int64_t i = 0; i < hw; ++i) o[i] /= sum;
    }
  return push(std::move(out), {x}, [x, hw](Graph& g, Node& self) {
    Node& xn = g.node(x);
    if (!xn.requires_grad) return;
    const Shape4 s = self.value.shape();
    for (int b = 0; b < s.b; ++b)
      for (int c = 0; c < s.c; ++c) {
        const double* y = &self.value.at(b, c, 0, 0);
        const double* gy = &self.grad.at(b, c, 0, 0);
        double* gx = &xn.grad.at(b, c, 0, 0);
        double dot = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) dot += gy[i] * y[i];
        for (std::int64_t i = 0; i < hw; ++i) gx[i] += y[i] * (gy[i] - dot);
      }
  });
}

NodeId Graph::concat_channels(NodeId a, NodeId b) {
  const Array4& av = value(a);
  const Array4& bv = value(b);
  const Shape4 as = av.shape(), bs = bv.shape();
  if (as.b != bs.b || as.h != bs.h || as.w != bs.w)
    throw ConfigError("concat_channels: spatial/batch mismatch " + as.str() +
                      " vs " + bs.str());
  Array4 out({as.b, as.c + bs.c, as.h, as.w});
  const std::int64_t hw = static_cast<std::int64_t>(as.h) * as.w;
  for (int bi = 0; bi < as.b; ++bi) {
    std::copy_n(&av.at(bi, 0, 0, 0), as.c * hw, &out.at(bi, 0, 0, 0));
    std::copy_n(&bv.at(bi, 0, 0, 0), bs.c * hw, &out.at(bi, as.c, 0, 0));
  }
  return push(std::move(out), {a, b}, [a, b, hw](Graph& g, Node& self) {
    Node& an = g.node(a);
    Node& bn = g.node(b);
    const Shape4 as = an.value.shape(), bs = bn.value.shape();
    for (int bi = 0; bi < as.b; ++bi) {
      if (an.requires_grad) {
        const double* gy = &self.grad.at(bi, 0, 0, 0);
        double* ga = &an.grad.at(bi, 0, 0, 0);
        for (std::int64_t i = 0; i < as.c * hw; ++i) ga[i] += gy[i];
      }
      if (bn.requires_grad) {
        const double* gy = &self.grad.at(bi, as.c, 0, 0);
        double* gb = &bn.grad.at(bi, 0, 0, 0);
        for (std::int64_t i = 0; i < bs.c * hw; ++i) gb[i] += gy[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// batch norm

NodeId Graph::batchnorm2d(NodeId x, NodeId gamma, NodeId beta,
                          BatchNormState& state, BnMode mode) {
  const Array4& xv = value(x);
  const Shape4 s = xv.shape();
  const int C = s.c;
  if (static_cast<int>(state.running_mean.size()) != C)
    throw ConfigError("batchnorm2d: state channels " +
                      std::to_string(state.running_mean.size()) +
                      " vs input " + s.str());
  const Shape4 want{1, C, 1, 1};
  if (value(gamma).shape() != want || value(beta).shape() != want)
    throw ConfigError("batchnorm2d: gamma/beta must be (1,C,1,1)");

  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  const std::int64_t n = static_cast<std::int64_t>(s.b) * hw;
  auto mean = std::make_shared<std::vector<double>>(C);
  auto inv_std = std::make_shared<std::vector<double>>(C);

  if (mode == BnMode::kTrain) {
    for (int c = 0; c < C; ++c) {
      double m = 0.0;
      for (int b = 0; b < s.b; ++b) {
        const double* p = &xv.at(b, c, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) m += p[i];
      }
      m /= static_cast<double>(n);
      double v = 0.0;
      for (int b = 0; b < s.b; ++b) {
        const double* p = &xv.at(b, c, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(n);
      (*mean)[c] = m;
      (*inv_std)[c] = 1.0 / std::sqrt(v + state.eps);
      const double v_unbiased = n > 1 ? v * static_cast<double>(n) / (n - 1) : v;
      state.running_mean[c] =
          (1.0 - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] =
          (1.0 - state.momentum) * state.running_var[c] + state.momentum * v_unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[c] = state.running_mean[c];
      (*inv_std)[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  const Array4& gv = value(gamma);
  const Array4& bv = value(beta);
  Array4 out(s);
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < C; ++c) {
      const double* p = &xv.at(b, c, 0, 0);
      double* o = &out.at(b, c, 0, 0);
      const double m = (*mean)[c], is = (*inv_std)[c], ga = gv[c], be = bv[c];
      for (std::int64_t i = 0; i < hw; ++i) o[i] = ga * (p[i] - m) * is + be;
    }

  const bool train = mode == BnMode::kTrain;
  return push(std::move(out), {x, gamma, beta},
              [x, gamma, beta, mean, inv_std, train, hw, n](Graph& g, Node& self) {
                Node& xn = g.node(x);
                Node& gn = g.node(gamma);
                Node& bn = g.node(beta);
                const Shape4 s = xn.value.shape();
                for (int c = 0; c < s.c; ++c) {
                  const double m = (*mean)[c], is = (*inv_std)[c];
                  const double ga = gn.value[c];
                  double sum_gy = 0.0, sum_gy_xhat = 0.0;
                  for (int b = 0; b < s.b; ++b) {
                    const double* gy = &self.grad.at(b, c, 0, 0);
                    const double* xp = &xn.value.at(b, c, 0, 0);
                    for (std::int64_t i = 0; i < hw; ++i) {
                      sum_gy += gy[i];
                      sum_gy_xhat += gy[i] * (xp[i] - m) * is;
                    }
                  }
                  if (gn.requires_grad) gn.grad[c] += sum_gy_xhat;
                  if (bn.requires_grad) bn.grad[c] += sum_gy;
                  if (!xn.requires_grad) continue;
                  if (train) {
                    // d/dx of ((x - mu(x)) * inv_std(x)): batch statistics
                    // participate in the gradient.
                    const double k1 = ga * is;
                    const double mean_gy = sum_gy / static_cast<double>(n);
                    const double mean_gy_xhat = sum_gy_xhat / static_cast<double>(n);
                    for (int b = 0; b < s.b; ++b) {
                      const double* gy = &self.grad.at(b, c, 0, 0);
                      const double* xp = &xn.value.at(b, c, 0, 0);
                      double* gx = &xn.grad.at(b, c, 0, 0);
                      for (std::int64_t i = 0; i < hw; ++i) {
                        const double xhat = (xp[i] - m) * is;
                        gx[i] += k1 * (gy[i] - mean_gy - xhat * mean_gy_xhat);
                      }
                    }
                  } else {
                    const double k1 = ga * is;
                    for (int b = 0; b < s.b; ++b) {
                      const double* gy = &self.grad.at(b, c, 0, 0);
                      double* gx = &xn.grad.at(b, c, 0, 0);
                      for (std::int64_t i = 0; i < hw; ++i) gx[i] += k1 * gy[i];
                    }
                  }
                }
              });
}

// ---------------------------------------------------------------------------
// elementwise / reductions

NodeId Graph::add(NodeId a, NodeId b) {
  const Array4& av = value(a);
  const Array4& bv = value(b);
  if (!(av.shape() == bv.shape()))
    throw ConfigError("add: shape mismatch " + av.shape().str() + " vs " +
                      bv.shape().str());
  Array4 out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  return push(std::move(out), {a, b}, [a, b](Graph& g, Node& self) {
    for (NodeId id : {a, b}) {
      Node& n = g.node(id);
      if (!n.requires_grad) continue;
      double* gx = n.grad.data();
      const double* gy = self.grad.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) gx[i] += gy[i];
    }
  });
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Array4& av = value(a);
  const Array4& bv = value(b);
  if (!(av.shape() == bv.shape()))
    throw ConfigError("sub: shape mismatch " + av.shape().str() + " vs " +
                      bv.shape().str());
  Array4 out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
  return push(std::move(out), {a, b}, [a, b](Graph& g, Node& self) {
    Node& an = g.node(a);
    Node& bn = g.node(b);
    const double* gy = self.grad.data();
    const std::int64_t n = self.grad.numel();
    if (an.requires_grad) {
      double* gx = an.grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i];
    }
    if (bn.requires_grad) {
      double* gx = bn.grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] -= gy[i];
    }
  });
}

NodeId Graph::square(NodeId a) {
  const Array4& av = value(a);
  Array4 out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * av[i];
  return push(std::move(out), {a}, [a](Graph& g, Node& self) {
    Node& an = g.node(a);
    if (!an.requires_grad) return;
    const double* xv = an.value.data();
    double* gx = an.grad.data();
    const double* gy = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      gx[i] += 2.0 * xv[i] * gy[i];
  });
}

NodeId Graph::scale(NodeId a, double s) {
  const Array4& av = value(a);
  Array4 out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = s * av[i];
  return push(std::move(out), {a}, [a, s](Graph& g, Node& self) {
    Node& an = g.node(a);
    if (!an.requires_grad) return;
    double* gx = an.grad.data();
    const double* gy = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) gx[i] += s * gy[i];
  });
}

NodeId Graph::mul_const(NodeId a, Array4 m) {
  const Array4& av = value(a);
  if (!(av.shape() == m.shape()))
    throw ConfigError("mul_const: shape mismatch " + av.shape().str() + " vs " +
                      m.shape().str());
  auto mm = std::make_shared<Array4>(std::move(m));
  Array4 out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * (*mm)[i];
  return push(std::move(out), {a}, [a, mm](Graph& g, Node& self) {
    Node& an = g.node(a);
    if (!an.requires_grad) return;
    double* gx = an.grad.data();
    const double* gy = self.grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      gx[i] += (*mm)[i] * gy[i];
  });
}

NodeId Graph::hypot_eps(NodeId a, NodeId b) {
  constexpr double kEps = 1e-24;
  const Array4& av = value(a);
  const Array4& bv = value(b);
  if (!(av.shape() == bv.shape()))
    throw ConfigError("hypot_eps: shape mismatch");
  Array4 out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i)
    out[i] = std::sqrt(av[i] * av[i] + bv[i] * bv[i] + kEps);
  return push(std::move(out), {a, b}, [a, b](Graph& g, Node& self) {
    Node& an = g.node(a);
    Node& bn = g.node(b);
    const double* gy = self.grad.data();
    const double* y = self.value.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      const double inv = gy[i] / y[i];
      if (an.requires_grad) an.grad[i] += an.value[i] * inv;
      if (bn.requires_grad) bn.grad[i] += bn.value[i] * inv;
    }
  });
}

NodeId Graph::sum_all(NodeId a) {
  const Array4& av = value(a);
  Array4 out({1, 1, 1, 1});
  out[0] = av.sum();
  return push(std::move(out), {a}, [a](Graph& g, Node& self) {
    Node& an = g.node(a);
    if (!an.requires_grad) return;
    const double gy = self.grad[0];
    double* gx = an.grad.data();
    for (std::int64_t i = 0; i < an.grad.numel(); ++i) gx[i] += gy;
  });
}

// ---------------------------------------------------------------------------
// heads

NodeId Graph::dsnt(NodeId h) {
  const Array4& hv = value(h);
  const Shape4 s = hv.shape();
  auto ygrid = std::make_shared<std::vector<double>>(s.h);
  auto xgrid = std::make_shared<std::vector<double>>(s.w);
  for (int r = 0; r < s.h; ++r)
    (*ygrid)[r] = s.h > 1 ? -1.0 + 2.0 * r / (s.h - 1) : 0.0;
  for (int c = 0; c < s.w; ++c)
    (*xgrid)[c] = s.w > 1 ? -1.0 + 2.0 * c / (s.w - 1) : 0.0;

  Array4 out({s.b, s.c, 1, 2});
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c) {
      double sum = 0.0, lat = 0.0, ax = 0.0;
      for (int r = 0; r < s.h; ++r) {
        const double* row = &hv.at(b, c, r, 0);
        double rowsum = 0.0, rowax = 0.0;
        for (int w = 0; w < s.w; ++w) {
          rowsum += row[w];
          rowax += row[w] * (*xgrid)[w];
        }
        sum += rowsum;
        lat += rowsum * (*ygrid)[r];
        ax += rowax;
      }
      if (std::fabs(sum - 1.0) > 1e-6)
        throw NumericError("dsnt: channel (" + std::to_string(b) + "," +
                           std::to_string(c) + ") sums to " + std::to_string(sum));
      out.at(b, c, 0, 0) = lat;
      out.at(b, c, 0, 1) = ax;
    }
  return push(std::move(out), {h}, [h, ygrid, xgrid](Graph& g, Node& self) {
    Node& hn = g.node(h);
    if (!hn.requires_grad) return;
    const Shape4 s = hn.value.shape();
    for (int b = 0; b < s.b; ++b)
      for (int c = 0; c < s.c; ++c) {
        const double glat = self.grad.at(b, c, 0, 0);
        const double gax = self.grad.at(b, c, 0, 1);
        for (int r = 0; r < s.h; ++r) {
          double* grow = &hn.grad.at(b, c, r, 0);
          const double gy = glat * (*ygrid)[r];
          for (int w = 0; w < s.w; ++w) grow[w] += gy + gax * (*xgrid)[w];
        }
      }
  });
}

namespace {
constexpr double kJsFloor = 1e-12;
}

NodeId Graph::js_divergence(NodeId p, NodeId q, const std::vector<double>& mask) {
  const Array4& pv = value(p);
  const Array4& qv = value(q);
  const Shape4 s = pv.shape();
  if (!(s == qv.shape()))
    throw ConfigError("js_divergence: shape mismatch " + s.str() + " vs " +
                      qv.shape().str());
  if (static_cast<int>(mask.size()) != s.b * s.c)
    throw ConfigError("js_divergence: mask length must be batch*channels");
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  auto msk = std::make_shared<std::vector<double>>(mask);

  double total = 0.0;
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c) {
      const double mval = mask[b * s.c + c];
      if (mval == 0.0) continue;
      const double* pp = &pv.at(b, c, 0, 0);
      const double* qq = &qv.at(b, c, 0, 0);
      double js = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) {
        if (pp[i] < 0.0 || qq[i] < 0.0)
          throw NumericError("js_divergence: negative entry");
        const double m = 0.5 * (pp[i] + qq[i]);
        const double lm = std::log(std::max(m, kJsFloor));
        if (pp[i] > 0.0) js += 0.5 * pp[i] * (std::log(std::max(pp[i], kJsFloor)) - lm);
        if (qq[i] > 0.0) js += 0.5 * qq[i] * (std::log(std::max(qq[i], kJsFloor)) - lm);
      }
      total += mval * js;
    }

  Array4 out({1, 1, 1, 1});
  out[0] = total;
  return push(std::move(out), {p, q}, [p, q, msk, hw](Graph& g, Node& self) {
    Node& pn = g.node(p);
    Node& qn = g.node(q);
    const double go = self.grad[0];
    const Shape4 s = pn.value.shape();
    for (int b = 0; b < s.b; ++b)
      for (int c = 0; c < s.c; ++c) {
        const double mval = (*msk)[b * s.c + c];
        if (mval == 0.0) continue;
        const double* pp = &pn.value.at(b, c, 0, 0);
        const double* qq = &qn.value.at(b, c, 0, 0);
        double* gp = pn.requires_grad ? &pn.grad.at(b, c, 0, 0) : nullptr;
        double* gq = qn.requires_grad ? &qn.grad.at(b, c, 0, 0) : nullptr;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double m = 0.5 * (pp[i] + qq[i]);
          const double lm = std::log(std::max(m, kJsFloor));
          // exact derivative of the floored forward: the +1/2 from p*L'(p)
          // and the -1/2 from the mixture term cancel only above the floor
          const double cm = m > kJsFloor ? 0.5 : 0.0;
          if (gp) {
            const double cp = pp[i] > kJsFloor ? 0.5 : 0.0;
            gp[i] += go * mval *
                     (0.5 * (std::log(std::max(pp[i], kJsFloor)) - lm) + cp - cm);
          }
          if (gq) {
            const double cq = qq[i] > kJsFloor ? 0.5 : 0.0;
            gq[i] += go * mval *
                     (0.5 * (std::log(std::max(qq[i], kJsFloor)) - lm) + cq - cm);
          }
        }
      }
  });
}

}  // namespace pasdl::diff
