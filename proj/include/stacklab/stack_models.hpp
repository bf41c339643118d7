#pragma once

#include "stacklab/controllers.hpp"
#include "stacklab/nd_stack.hpp"
#include "stacklab/params.hpp"
#include "stacklab/sup_stack.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace stacklab {

// ---------------------------------------------------------------------------
// Architecture specs ("Tf+Nd+Nd", "LSTM+Sup+R", ...)
// ---------------------------------------------------------------------------

enum class BaseKind { rnn, lstm, transformer };
enum class StackKind { sup, nd };

struct ArchitectureSpec {
  BaseKind base = BaseKind::transformer;
  std::vector<StackKind> stacks;  // 0-2 slots for Tf, 0-1 for RNN/LSTM
  bool short_circuit = false;     // +R (RNN/LSTM with a stack only)
  Index width = 0;                // d; 0 until solved

  // Stack hyperparameters; defaults are the experiment settings.
  Index sup_m = 50;
  int nd_states = 3;
  int nd_symbols = 3;
  Index nd_m = 5;

  int layers() const { return base == BaseKind::transformer ? 5 : 3; }
  bool has_stack() const { return !stacks.empty(); }
  StackKind stack_kind() const { return stacks.at(0); }
  VpdaLayout nd_layout() const { return {nd_states, nd_symbols}; }

  Index reading_width() const {
    if (!has_stack()) return 0;
    return stack_kind() == StackKind::sup ? sup_m
                                          : static_cast<Index>(nd_layout().configs()) * nd_m;
  }
  Index action_count() const {
    if (!has_stack()) return 0;
    return stack_kind() == StackKind::sup ? 3 : nd_layout().num_actions();
  }
  Index stack_elem_width() const { return stack_kind() == StackKind::sup ? sup_m : nd_m; }

  // Transformer layers carrying stack attention: one stack goes to layer 3,
  // two go to layers 2 and 4.
  std::vector<int> stack_positions() const {
    if (base != BaseKind::transformer || stacks.empty()) return {};
    return stacks.size() == 1 ? std::vector<int>{3} : std::vector<int>{2, 4};
  }

  std::string to_string() const {
    std::string s = base == BaseKind::rnn ? "RNN" : base == BaseKind::lstm ? "LSTM" : "Tf";
    for (auto k : stacks) s += k == StackKind::sup ? "+Sup" : "+Nd";
    if (short_circuit) s += "+R";
    return s;
  }
};

inline ArchitectureSpec parse_arch_spec(const std::string& text) {
  ArchitectureSpec spec;
  std::vector<std::string> parts;
  size_t at = 0;
  while (at <= text.size()) {
    const size_t plus = text.find('+', at);
    parts.push_back(text.substr(at, plus == std::string::npos ? std::string::npos : plus - at));
    if (plus == std::string::npos) break;
    at = plus + 1;
  }
  require(!parts.empty(), "architecture spec: empty string");
  if (parts[0] == "RNN")
    spec.base = BaseKind::rnn;
  else if (parts[0] == "LSTM")
    spec.base = BaseKind::lstm;
  else if (parts[0] == "Tf")
    spec.base = BaseKind::transformer;
  else
    fail_contract("architecture spec: unknown base '" + parts[0] + "' in '" + text + "'");
  for (size_t i = 1; i < parts.size(); ++i) {
    if (parts[i] == "Sup")
      spec.stacks.push_back(StackKind::sup);
    else if (parts[i] == "Nd")
      spec.stacks.push_back(StackKind::nd);
    else if (parts[i] == "R")
      spec.short_circuit = true;
    else
      fail_contract("architecture spec: unknown suffix '+" + parts[i] + "' in '" + text + "'");
  }
  // Validity rules.
  if (spec.base == BaseKind::transformer) {
    require(!spec.short_circuit, "architecture spec: +R applies to RNN/LSTM only: " + text);
    require(spec.stacks.size() <= 2, "architecture spec: transformers take at most two stacks: " + text);
    if (spec.stacks.size() == 2)
      require(spec.stacks[0] == spec.stacks[1],
              "architecture spec: transformer stack pair must be homogeneous: " + text);
  } else {
    require(spec.stacks.size() <= 1, "architecture spec: RNN/LSTM take at most one stack: " + text);
    if (spec.short_circuit)
      require(!spec.stacks.empty(), "architecture spec: +R requires a stack: " + text);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Parameter shapes (single source for building, counting, and solve_width)
// ---------------------------------------------------------------------------

struct ParamShape {
  std::string name;
  Index rows = 0, cols = 0;
  InitKind init = InitKind::uniform01;
};

inline std::vector<ParamShape> parameter_shapes(const ArchitectureSpec& spec, Index vocab) {
  require(spec.width >= 1, "parameter_shapes: width unresolved");
  const Index d = spec.width;
  const Index r = spec.reading_width();
  const Index a = spec.action_count();
  std::vector<ParamShape> out;

  if (spec.base == BaseKind::transformer) {
    out.push_back({"embedding", vocab + 2, d, InitKind::uniform01});  // rows: tokens, eos, bos
    const auto stack_pos = spec.stack_positions();
    for (int l = 1; l <= spec.layers(); ++l) {
      const std::string p = "tf.l" + std::to_string(l) + ".";
      const bool is_stack = std::find(stack_pos.begin(), stack_pos.end(), l) != stack_pos.end();
      out.push_back({p + "ln1.g", d, 1, InitKind::ln_gain});
      out.push_back({p + "ln1.b", d, 1, InitKind::ln_bias});
      if (is_stack) {
        out.push_back({p + "stack.Wa", a, d, InitKind::xavier});
        out.push_back({p + "stack.Wv", spec.stack_elem_width(), d, InitKind::xavier});
        out.push_back({p + "stack.Wy", d, r, InitKind::xavier});
        if (spec.stack_kind() == StackKind::nd)
          out.push_back({p + "stack.v0", spec.nd_m, 1, InitKind::uniform01});
      } else {
        out.push_back({p + "attn.in_w", 3 * d, d, InitKind::uniform01});
        out.push_back({p + "attn.in_b", 3 * d, 1, InitKind::uniform01});
        out.push_back({p + "attn.out_w", d, d, InitKind::uniform01});
        out.push_back({p + "attn.out_b", d, 1, InitKind::uniform01});
      }
      out.push_back({p + "ln2.g", d, 1, InitKind::ln_gain});
      out.push_back({p + "ln2.b", d, 1, InitKind::ln_bias});
      out.push_back({p + "ff.W1", 2 * d, d, InitKind::xavier});
      out.push_back({p + "ff.b1", 2 * d, 1, InitKind::uniform01});
      out.push_back({p + "ff.W2", d, 2 * d, InitKind::xavier});
      out.push_back({p + "ff.b2", d, 1, InitKind::uniform01});
    }
    out.push_back({"tf.lnf.g", d, 1, InitKind::ln_gain});
    out.push_back({"tf.lnf.b", d, 1, InitKind::ln_bias});
    return out;
  }

  const Index ew = d + (spec.short_circuit ? r : 0);  // embedding width (+R widens outputs)
  const Index in1 = ew + (spec.has_stack() ? r : 0);  // layer-1 input width
  out.push_back({"embedding", vocab + 1, ew, InitKind::uniform01});
  const std::string base = spec.base == BaseKind::rnn ? "rnn" : "lstm";
  for (int l = 1; l <= spec.layers(); ++l) {
    const std::string p = base + ".l" + std::to_string(l) + ".";
    const Index in = (l == 1 ? in1 : d) + d;
    if (spec.base == BaseKind::rnn) {
      out.push_back({p + "W", d, in, InitKind::uniform01});
      out.push_back({p + "b", d, 1, InitKind::uniform01});
    } else {
      for (const char* g : {"Wi", "Wf", "Wg", "Wo"}) out.push_back({p + g, d, in, InitKind::uniform01});
      for (const char* g : {"bi", "bf", "bg", "bo"}) out.push_back({p + g, d, 1, InitKind::uniform01});
    }
    out.push_back({p + "h0", d, 1, InitKind::uniform01});
  }
  if (spec.has_stack()) {
    out.push_back({"stack.Wa", a, d, InitKind::xavier});
    out.push_back({"stack.ba", a, 1, InitKind::uniform01});
    out.push_back({"stack.Wv", spec.stack_elem_width(), d, InitKind::xavier});
    out.push_back({"stack.bv", spec.stack_elem_width(), 1, InitKind::uniform01});
    if (spec.stack_kind() == StackKind::nd) out.push_back({"stack.v0", spec.nd_m, 1, InitKind::uniform01});
  }
  return out;
}

inline long count_parameters(const ArchitectureSpec& spec, Index vocab) {
  long n = 0;
  for (const auto& s : parameter_shapes(spec, vocab)) n += static_cast<long>(s.rows * s.cols);
  return n;
}

// Scans widths (transformers: multiples of the head count) and returns the d
// whose enumerated count is closest to the target; ties break small.
inline Index solve_width(ArchitectureSpec spec, Index vocab, long target_params = 200000,
                         Index max_width = 2048) {
  const Index step = spec.base == BaseKind::transformer ? 4 : 1;
  Index best_d = 0;
  long best_err = -1;
  for (Index d = step; d <= max_width; d += step) {
    spec.width = d;
    const long err = std::abs(count_parameters(spec, vocab) - target_params);
    if (best_err < 0 || err < best_err) {
      best_err = err;
      best_d = d;
    }
  }
  require(best_d > 0, "solve_width: empty feasible width range");
  return best_d;
}

// ---------------------------------------------------------------------------
// Stack attention (the sublayer function of a stack-bearing transformer
// layer): per position t, action logits Wa h_t and pushed vector
// logistic(Wv h_t) drive a stack running left to right from its initial
// state; the sublayer output at t is Wy r_t. None of the maps carries a bias.
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> stack_attention_rows(const Tensor<S>& Xn, const Tensor<S>& Wa, const Tensor<S>& Wv,
                               const Tensor<S>& Wy, const ArchitectureSpec& spec,
                               const Tensor<S>* v0_param) {
  Tensor<S> lam = matmul_nt(Xn, Wa);             // (n x a)
  Tensor<S> push = logistic(matmul_nt(Xn, Wv));  // (n x m)
  std::optional<SupStackState<S>> sup;
  std::optional<NdStackState<S>> nd;
  if (spec.stack_kind() == StackKind::sup)
    sup = SupStackState<S>::initial(spec.sup_m);
  else
    nd = nd_initial_state<S>(spec.nd_layout(), spec.nd_m, log_logistic(*v0_param));
  std::vector<Tensor<S>> readings;
  readings.reserve(Xn.rows());
  for (Index t = 0; t < Xn.rows(); ++t) {
    Tensor<S> r;
    if (sup) {
      *sup = sup_step(*sup, row(lam, t), row(push, t));
      r = sup->reading();
    } else {
      r = nd_step(*nd, row(lam, t), row(push, t));
    }
    readings.push_back(transpose(r));
  }
  return matmul_nt(vstack_rows(readings), Wy);
}

// ---------------------------------------------------------------------------
// Assembled language model
// ---------------------------------------------------------------------------

template <class S> class Model {
 public:
  Model(const ArchitectureSpec& spec, Index vocab, std::uint64_t init_seed)
      : spec_(spec), vocab_(vocab) {
    require(spec_.width >= 1, "Model: width unresolved; run solve_width first");
    if (spec_.base == BaseKind::transformer)
      require(spec_.width % 4 == 0, "Model: transformer width must be divisible by the head count");
    RngStream rng(init_seed, RngPurpose::init);
    for (const auto& sh : parameter_shapes(spec_, vocab_))
      params_.add(sh.name, init_matrix<S>(sh.rows, sh.cols, sh.init, rng));
  }

  const ArchitectureSpec& spec() const { return spec_; }
  Index vocab() const { return vocab_; }
  Index eos_id() const { return vocab_; }
  Index logit_width() const { return vocab_ + 1; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }

  // Next-token logits at every prefix position: element t of the result is
  // z_t, the logits after reading tokens[0..t).
  std::vector<Tensor<S>> lm_logits(const std::vector<int>& tokens, bool training, RngStream& rng) {
    check_tokens(tokens);
    if (spec_.base == BaseKind::transformer) {
      Tensor<S> rows = transformer_logits(tokens, training, rng);
      std::vector<Tensor<S>> out;
      out.reserve(tokens.size() + 1);
      for (size_t t = 0; t <= tokens.size(); ++t) out.push_back(row(rows, static_cast<Index>(t)));
      return out;
    }
    return recurrent_logits(tokens, training, rng);
  }

  // Training loss: -log p(tokens, eos appended).
  Tensor<S> sequence_loss(const std::vector<int>& tokens, bool training, RngStream& rng) {
    check_tokens(tokens);
    std::vector<int> targets(tokens.begin(), tokens.end());
    targets.push_back(static_cast<int>(eos_id()));
    if (spec_.base == BaseKind::transformer)
      return sequence_nll_rows(transformer_logits(tokens, training, rng), targets);
    return sequence_nll(recurrent_logits(tokens, training, rng), targets);
  }

  // Evaluation-mode log p(b | prefix) at every position, as a plain matrix.
  Matrix<S> log_probs(const std::vector<int>& tokens) {
    NoGradGuard ng;
    RngStream rng(0, RngPurpose::dropout);
    Matrix<S> out(static_cast<Index>(tokens.size()) + 1, logit_width());
    if (spec_.base == BaseKind::transformer) {
      out = transformer_logits(tokens, false, rng).value();
    } else {
      auto zs = recurrent_logits(tokens, false, rng);
      for (size_t t = 0; t < zs.size(); ++t) out.row(static_cast<Index>(t)) = zs[t].value().transpose();
    }
    for (Index i = 0; i < out.rows(); ++i) {
      const auto r = out.row(i).array();
      const S m = r.maxCoeff();
      out.row(i) = (r - (m + std::log((r - m).exp().sum()))).matrix();
    }
    return out;
  }

  // softmax of the logits at the prefix frontier.
  Vector<S> conditional_next_distribution(const std::vector<int>& prefix) {
    Matrix<S> lp = log_probs(prefix);
    return lp.row(lp.rows() - 1).array().exp().matrix().transpose();
  }

  void save_checkpoint(const std::string& path) const { save_archive_file(path, params_, spec_.to_string()); }

  void load_checkpoint(const std::string& path) {
    Archive a = load_archive_file(path);
    require(a.header == spec_.to_string(), "checkpoint architecture '" + a.header +
                                               "' does not match model '" + spec_.to_string() + "'");
    load_into(a, params_);
  }

 private:
  void check_tokens(const std::vector<int>& tokens) const {
    for (int t : tokens)
      require(t >= 0 && t < vocab_, "token id " + std::to_string(t) + " outside vocabulary [0," +
                                        std::to_string(vocab_) + ")");
  }

  // --- recurrent (RNN/LSTM) path -----------------------------------------

  struct StackDriver {
    // Exactly one of these is live, matching the spec's stack kind.
    std::optional<SupStackState<S>> sup;
    std::optional<NdStackState<S>> nd;
    Tensor<S> reading;

    Tensor<S> step(const Tensor<S>& logits, const Tensor<S>& pushed) {
      if (sup) {
        *sup = sup_step(*sup, logits, pushed);
        reading = sup->reading();
      } else {
        reading = nd_step(*nd, logits, pushed);
      }
      return reading;
    }
  };

  StackDriver make_stack() {
    StackDriver drv;
    if (spec_.stack_kind() == StackKind::sup) {
      drv.sup = SupStackState<S>::initial(spec_.sup_m);
      drv.reading = drv.sup->reading();
    } else {
      drv.nd = nd_initial_state<S>(spec_.nd_layout(), spec_.nd_m,
                                   log_logistic(params_.at("stack.v0")));
      drv.reading = drv.nd->reading;
    }
    return drv;
  }

  std::vector<Tensor<S>> recurrent_logits(const std::vector<int>& tokens, bool training, RngStream& rng) {
    const double p = dropout_rate;
    auto& E = params_.at("embedding");
    const bool is_rnn = spec_.base == BaseKind::rnn;
    std::vector<RnnLayerParams<S>> rnn_layers;
    std::vector<LstmLayerParams<S>> lstm_layers;
    const std::string base = is_rnn ? "rnn" : "lstm";
    for (int l = 1; l <= spec_.layers(); ++l) {
      const std::string pre = base + ".l" + std::to_string(l) + ".";
      if (is_rnn)
        rnn_layers.push_back({params_.at(pre + "W"), params_.at(pre + "b"), params_.at(pre + "h0")});
      else
        lstm_layers.push_back({params_.at(pre + "Wi"), params_.at(pre + "bi"), params_.at(pre + "Wf"),
                               params_.at(pre + "bf"), params_.at(pre + "Wg"), params_.at(pre + "bg"),
                               params_.at(pre + "Wo"), params_.at(pre + "bo"), params_.at(pre + "h0")});
    }
    ControllerState<S> state = is_rnn ? rnn_initial_state(rnn_layers) : lstm_initial_state(lstm_layers);

    const bool stacked = spec_.has_stack();
    StackDriver stack;
    if (stacked) stack = make_stack();

    std::vector<Tensor<S>> logits;
    logits.reserve(tokens.size() + 1);
    auto output_of = [&](const ControllerState<S>& st, const Tensor<S>& reading) {
      Tensor<S> h = st.h.back();
      Tensor<S> o = spec_.short_circuit ? dropout(concat<S>({h, reading}), p, rng, training)
                                        : dropout(h, p, rng, training);
      return matmul(E, o);
    };
    logits.push_back(output_of(state, stacked ? stack.reading : Tensor<S>()));

    for (int w : tokens) {
      Tensor<S> x = dropout(embedding_lookup(E, w), p, rng, training);
      Tensor<S> input = stacked ? concat<S>({x, stack.reading}) : x;
      state = is_rnn ? rnn_step(rnn_layers, state, input, p, rng, training)
                     : lstm_step(lstm_layers, state, input, p, rng, training);
      if (stacked) {
        Tensor<S> h = state.h.back();
        Tensor<S> act = affine(h, params_.at("stack.Wa"), params_.at("stack.ba"));
        Tensor<S> pushed = logistic(affine(h, params_.at("stack.Wv"), params_.at("stack.bv")));
        stack.step(act, pushed);
      }
      logits.push_back(output_of(state, stacked ? stack.reading : Tensor<S>()));
    }
    return logits;
  }

  // --- transformer path ----------------------------------------------------

  Tensor<S> transformer_logits(const std::vector<int>& tokens, bool training, RngStream& rng) {
    const double p = dropout_rate;
    const Index d = spec_.width;
    auto& E = params_.at("embedding");
    std::vector<int> rows_ids;
    rows_ids.reserve(tokens.size() + 1);
    rows_ids.push_back(static_cast<int>(vocab_ + 1));  // bos row
    for (int t : tokens) rows_ids.push_back(t);
    const Index n1 = static_cast<Index>(rows_ids.size());

    Matrix<S> pe = sinusoidal_encoding(n1, d).template cast<S>();
    Tensor<S> X = dropout(
        add(scale(embedding_rows(E, rows_ids), S(std::sqrt(static_cast<double>(d)))),
            Tensor<S>::from_matrix(pe)),
        p, rng, training);

    const auto stack_pos = spec_.stack_positions();
    for (int l = 1; l <= spec_.layers(); ++l) {
      const std::string pre = "tf.l" + std::to_string(l) + ".";
      Tensor<S> Xn = layer_norm_rows(X, params_.at(pre + "ln1.g"), params_.at(pre + "ln1.b"));
      Tensor<S> F;
      if (std::find(stack_pos.begin(), stack_pos.end(), l) != stack_pos.end())
        F = stack_attention_sublayer(Xn, pre);
      else
        F = attention_sublayer(Xn,
                               AttentionParams<S>{params_.at(pre + "attn.in_w"), params_.at(pre + "attn.in_b"),
                                                  params_.at(pre + "attn.out_w"), params_.at(pre + "attn.out_b")},
                               4, p, rng, training);
      X = add(X, dropout(F, p, rng, training));
      Tensor<S> Xn2 = layer_norm_rows(X, params_.at(pre + "ln2.g"), params_.at(pre + "ln2.b"));
      Tensor<S> FF = feedforward_sublayer(
          Xn2,
          FeedForwardParams<S>{params_.at(pre + "ff.W1"), params_.at(pre + "ff.b1"),
                               params_.at(pre + "ff.W2"), params_.at(pre + "ff.b2")},
          p, rng, training);
      X = add(X, dropout(FF, p, rng, training));
    }
    X = layer_norm_rows(X, params_.at("tf.lnf.g"), params_.at("tf.lnf.b"));
    return matmul_nt(X, rows_of(E, 0, vocab_ + 1));  // tied output embedding
  }

  Tensor<S> stack_attention_sublayer(const Tensor<S>& Xn, const std::string& pre) {
    const bool is_nd = spec_.stack_kind() == StackKind::nd;
    Tensor<S> v0;
    if (is_nd) v0 = params_.at(pre + "stack.v0");
    return stack_attention_rows(Xn, params_.at(pre + "stack.Wa"), params_.at(pre + "stack.Wv"),
                                params_.at(pre + "stack.Wy"), spec_, is_nd ? &v0 : nullptr);
  }

 public:
  double dropout_rate = 0.1;

 private:
  ArchitectureSpec spec_;
  Index vocab_;
  ParamSet<S> params_;
};

}  // namespace stacklab
