#pragma once

#include "stacklab/params.hpp"
#include "stacklab/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace stacklab {

// Base sequence controllers: multi-layer simple RNN, multi-layer LSTM, and a
// pre-norm transformer encoder with causal masking. The transformer prepends
// a reserved bos token whose output position provides the first-token logits;
// input and output embeddings are tied.

struct RnnConfig {
  int layers = 3;
  Index width = 0;
  double dropout = 0.0;
  Index vocab = 0;  // |Sigma|; logits span |Sigma|+1 (eos)
};
using LstmConfig = RnnConfig;

struct TransformerConfig {
  int layers = 5;
  Index width = 0;
  int heads = 4;
  double dropout = 0.0;
  Index vocab = 0;
  std::vector<int> stack_layers;  // 1-based indices of stack attention sublayers
};

template <class S> struct ControllerState {
  std::vector<Tensor<S>> h;
  std::vector<Tensor<S>> c;  // LSTM memory cells; empty for simple RNNs
};

// ---------------------------------------------------------------------------
// Initialization (per the training recipe: Xavier uniform for fully-connected
// layers outside recurrent updates and standard attention; layer-norm gain 1
// and bias 0; everything else uniform on [-0.1, 0.1]).
// ---------------------------------------------------------------------------

enum class InitKind { xavier, uniform01, ln_gain, ln_bias };

inline double xavier_bound(Index rows, Index cols) {
  return std::sqrt(6.0 / static_cast<double>(rows + cols));
}

template <class S> Matrix<S> init_matrix(Index rows, Index cols, InitKind kind, RngStream& rng) {
  Matrix<S> m(rows, cols);
  switch (kind) {
    case InitKind::ln_gain: m.setOnes(); return m;
    case InitKind::ln_bias: m.setZero(); return m;
    case InitKind::xavier: {
      const double b = xavier_bound(rows, cols);
      for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = static_cast<S>(rng.uniform(-b, b));
      return m;
    }
    case InitKind::uniform01:
      for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = static_cast<S>(rng.uniform(-0.1, 0.1));
      return m;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Simple RNN and LSTM steps
// ---------------------------------------------------------------------------

template <class S> struct RnnLayerParams {
  Tensor<S> W, b, h0;
};

template <class S> struct LstmLayerParams {
  Tensor<S> Wi, bi, Wf, bf, Wg, bg, Wo, bo, h0;
};

template <class S> ControllerState<S> rnn_initial_state(const std::vector<RnnLayerParams<S>>& layers) {
  ControllerState<S> st;
  for (const auto& l : layers) st.h.push_back(tanh(l.h0));
  return st;
}

template <class S> ControllerState<S> lstm_initial_state(const std::vector<LstmLayerParams<S>>& layers) {
  ControllerState<S> st;
  for (const auto& l : layers) {
    st.h.push_back(tanh(l.h0));
    st.c.push_back(Tensor<S>::zeros(l.h0.rows(), 1));
  }
  return st;
}

// `input` is the already-dropped step input (embedding, possibly concatenated
// with a stack reading). Dropout sits between layers, not on the recurrent
// path.
template <class S>
ControllerState<S> rnn_step(const std::vector<RnnLayerParams<S>>& layers, const ControllerState<S>& prev,
                            const Tensor<S>& input, double dropout_rate, RngStream& rng, bool training) {
  require(prev.h.size() == layers.size(), "rnn_step: state layer count mismatch");
  ControllerState<S> next;
  Tensor<S> below = input;
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& lp = layers[l];
    require(lp.W.cols() == below.rows() + prev.h[l].rows(),
            "rnn_step: layer " + std::to_string(l + 1) + " expects input width " +
                std::to_string(lp.W.cols() - prev.h[l].rows()) + ", got " + std::to_string(below.rows()));
    Tensor<S> h = tanh(affine(concat<S>({below, prev.h[l]}), lp.W, lp.b));
    next.h.push_back(h);
    if (l + 1 < layers.size()) below = dropout(h, dropout_rate, rng, training);
  }
  return next;
}

template <class S>
ControllerState<S> lstm_step(const std::vector<LstmLayerParams<S>>& layers, const ControllerState<S>& prev,
                             const Tensor<S>& input, double dropout_rate, RngStream& rng, bool training) {
  require(prev.h.size() == layers.size() && prev.c.size() == layers.size(),
          "lstm_step: state layer count mismatch");
  ControllerState<S> next;
  Tensor<S> below = input;
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& lp = layers[l];
    require(lp.Wi.cols() == below.rows() + prev.h[l].rows(),
            "lstm_step: layer " + std::to_string(l + 1) + " expects input width " +
                std::to_string(lp.Wi.cols() - prev.h[l].rows()) + ", got " + std::to_string(below.rows()));
    Tensor<S> zin = concat<S>({below, prev.h[l]});
    Tensor<S> i = logistic(affine(zin, lp.Wi, lp.bi));
    Tensor<S> f = logistic(affine(zin, lp.Wf, lp.bf));
    Tensor<S> g = tanh(affine(zin, lp.Wg, lp.bg));
    Tensor<S> o = logistic(affine(zin, lp.Wo, lp.bo));
    Tensor<S> c = add(mul(f, prev.c[l]), mul(i, g));
    Tensor<S> h = mul(o, tanh(c));
    next.h.push_back(h);
    next.c.push_back(c);
    if (l + 1 < layers.size()) below = dropout(h, dropout_rate, rng, training);
  }
  return next;
}

// ---------------------------------------------------------------------------
// Transformer pieces
// ---------------------------------------------------------------------------

template <class S> struct AttentionParams {
  Tensor<S> in_w, in_b;    // (3d x d), (3d)
  Tensor<S> out_w, out_b;  // (d x d), (d)
};

template <class S> struct FeedForwardParams {
  Tensor<S> W1, b1, W2, b2;  // (2d x d), (2d), (d x 2d), (d)
};

inline Matrix<double> sinusoidal_encoding(Index positions, Index width) {
  Matrix<double> pe(positions, width);
  for (Index pos = 0; pos < positions; ++pos)
    for (Index i = 0; i < width; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, 2.0 * std::floor(i / 2.0) / static_cast<double>(width));
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

// Causally masked multi-head scaled dot-product attention over already
// layer-normed inputs (n x d). Dropout on attention probabilities and nothing
// else; the sublayer wrapper owns output dropout and the residual.
template <class S>
Tensor<S> attention_sublayer(const Tensor<S>& inputs, const AttentionParams<S>& p, int heads,
                             double dropout_rate, RngStream& rng, bool training) {
  const Index d = inputs.cols();
  require(d % heads == 0, "attention_sublayer: width not divisible by head count");
  const Index dh = d / heads;
  Tensor<S> qkv = linear_rows(inputs, p.in_w, p.in_b);  // (n x 3d)
  std::vector<Tensor<S>> ctx;
  ctx.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor<S> q = cols_of(qkv, h * dh, dh);
    Tensor<S> k = cols_of(qkv, d + h * dh, dh);
    Tensor<S> v = cols_of(qkv, 2 * d + h * dh, dh);
    Tensor<S> scores = scale(matmul_nt(q, k), S(1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor<S> probs = dropout(causal_softmax_rows(scores), dropout_rate, rng, training);
    ctx.push_back(matmul(probs, v));
  }
  return linear_rows(hstack_cols(ctx), p.out_w, p.out_b);
}

template <class S>
Tensor<S> feedforward_sublayer(const Tensor<S>& inputs, const FeedForwardParams<S>& p, double dropout_rate,
                               RngStream& rng, bool training) {
  Tensor<S> hidden = dropout(relu(linear_rows(inputs, p.W1, p.b1)), dropout_rate, rng, training);
  return linear_rows(hidden, p.W2, p.b2);
}

}  // namespace stacklab
