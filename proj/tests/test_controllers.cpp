#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stacklab/controllers.hpp"
#include "stacklab/grad_check.hpp"
#include "stacklab/stack_models.hpp"

using namespace stacklab;

namespace {

Matrix<double> rand_mat(Index r, Index c, RngStream& rng, double lo = -1, double hi = 1) {
  Matrix<double> m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

}  // namespace

TEST_CASE("rnn_step: zero weights give tanh(0)=0; hand-set single neuron") {
  RngStream rng(1, RngPurpose::dropout);
  std::vector<RnnLayerParams<double>> layers;
  layers.push_back({Tensor<double>::from_matrix(Matrix<double>::Zero(2, 4)),
                    Tensor<double>::from_vector(Vector<double>::Zero(2)),
                    Tensor<double>::from_vector((Vector<double>(2) << 0.3, -0.2).finished())});
  auto st0 = rnn_initial_state(layers);
  CHECK(st0.h[0].value()(0, 0) == doctest::Approx(std::tanh(0.3)));
  auto st1 = rnn_step(layers, st0, Tensor<double>::from_vector(Vector<double>::Ones(2)), 0.0, rng, false);
  CHECK(st1.h[0].value().cwiseAbs().maxCoeff() == 0.0);  // zero weights, zero bias

  // 1-layer, 1-dim input, hand numbers
  std::vector<RnnLayerParams<double>> one;
  one.push_back({Tensor<double>::from_matrix((Matrix<double>(1, 2) << 0.8, -0.5).finished()),
                 Tensor<double>::from_vector((Vector<double>(1) << 0.1).finished()),
                 Tensor<double>::from_vector((Vector<double>(1) << 0.4).finished())});
  auto s0 = rnn_initial_state(one);
  const double h0 = std::tanh(0.4);
  auto s1 = rnn_step(one, s0, Tensor<double>::from_vector((Vector<double>(1) << 0.9).finished()), 0.0, rng, false);
  CHECK(s1.h[0].value()(0, 0) == doctest::Approx(std::tanh(0.8 * 0.9 - 0.5 * h0 + 0.1)).epsilon(1e-14));

  // evaluation mode is deterministic and repeatable
  auto s1b = rnn_step(one, s0, Tensor<double>::from_vector((Vector<double>(1) << 0.9).finished()), 0.5, rng, false);
  CHECK(s1.h[0].value()(0, 0) == s1b.h[0].value()(0, 0));

  CHECK_THROWS_AS(
      rnn_step(one, s0, Tensor<double>::from_vector(Vector<double>::Zero(3)), 0.0, rng, false),
      ContractViolation);
}

TEST_CASE("lstm_step: gate semantics and a hand-evaluated unit") {
  RngStream rng(2, RngPurpose::dropout);
  // forget gate ~1 and input gate ~0 via bias saturation: cell unchanged
  auto zeros14 = Tensor<double>::from_matrix(Matrix<double>::Zero(1, 2));
  std::vector<LstmLayerParams<double>> frozen;
  frozen.push_back({zeros14, Tensor<double>::from_vector((Vector<double>(1) << -1000.0).finished()),  // i
                    zeros14, Tensor<double>::from_vector((Vector<double>(1) << 1000.0).finished()),   // f
                    zeros14, Tensor<double>::from_vector(Vector<double>::Zero(1)),                    // g
                    zeros14, Tensor<double>::from_vector(Vector<double>::Zero(1)),                    // o
                    Tensor<double>::from_vector((Vector<double>(1) << 0.7).finished())});
  auto st = lstm_initial_state(frozen);
  st.c[0] = Tensor<double>::from_vector((Vector<double>(1) << 0.42).finished());
  auto in = Tensor<double>::from_vector((Vector<double>(1) << 0.5).finished());
  for (int steps = 0; steps < 3; ++steps) {
    st = lstm_step(frozen, st, in, 0.0, rng, false);
    CHECK(st.c[0].value()(0, 0) == doctest::Approx(0.42).epsilon(1e-12));
  }

  // zero initial cell, output gate forced to 0: hidden output 0
  std::vector<LstmLayerParams<double>> gated = frozen;
  gated[0].bo = Tensor<double>::from_vector((Vector<double>(1) << -1000.0).finished());
  auto st2 = lstm_initial_state(gated);
  st2 = lstm_step(gated, st2, in, 0.0, rng, false);
  CHECK(st2.h[0].value()(0, 0) == doctest::Approx(0.0).epsilon(1e-12));

  // hand-evaluated gate equations on a 1-unit LSTM
  RngStream prng(3, RngPurpose::init);
  std::vector<LstmLayerParams<double>> hand;
  hand.push_back({Tensor<double>::from_matrix(rand_mat(1, 2, prng)), Tensor<double>::from_vector(rand_mat(1, 1, prng)),
                  Tensor<double>::from_matrix(rand_mat(1, 2, prng)), Tensor<double>::from_vector(rand_mat(1, 1, prng)),
                  Tensor<double>::from_matrix(rand_mat(1, 2, prng)), Tensor<double>::from_vector(rand_mat(1, 1, prng)),
                  Tensor<double>::from_matrix(rand_mat(1, 2, prng)), Tensor<double>::from_vector(rand_mat(1, 1, prng)),
                  Tensor<double>::from_vector(rand_mat(1, 1, prng))});
  auto hs = lstm_initial_state(hand);
  const double x = 0.3;
  auto hs1 = lstm_step(hand, hs, Tensor<double>::from_vector((Vector<double>(1) << x).finished()), 0.0, rng, false);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double hprev = std::tanh(hand[0].h0.value()(0, 0));
  auto gate = [&](const Tensor<double>& W, const Tensor<double>& b) {
    return W.value()(0, 0) * x + W.value()(0, 1) * hprev + b.value()(0, 0);
  };
  const double i = sig(gate(hand[0].Wi, hand[0].bi));
  const double f = sig(gate(hand[0].Wf, hand[0].bf));
  const double g = std::tanh(gate(hand[0].Wg, hand[0].bg));
  const double o = sig(gate(hand[0].Wo, hand[0].bo));
  const double c = f * 0.0 + i * g;
  CHECK(hs1.c[0].value()(0, 0) == doctest::Approx(c).epsilon(1e-14));
  CHECK(hs1.h[0].value()(0, 0) == doctest::Approx(o * std::tanh(c)).epsilon(1e-14));
}

TEST_CASE("sinusoidal positional encodings match the closed form") {
  auto pe = sinusoidal_encoding(4, 6);
  for (Index i = 0; i < 6; i += 2) CHECK(pe(0, i) == 0.0);
  for (Index i = 1; i < 6; i += 2) CHECK(pe(0, i) == 1.0);
  CHECK(pe(3, 0) == doctest::Approx(std::sin(3.0)).epsilon(1e-14));
  CHECK(pe(3, 1) == doctest::Approx(std::cos(3.0)).epsilon(1e-14));
  CHECK(pe(2, 4) == doctest::Approx(std::sin(2.0 / std::pow(10000.0, 4.0 / 6.0))).epsilon(1e-12));
  CHECK(pe(2, 5) == doctest::Approx(std::cos(2.0 / std::pow(10000.0, 4.0 / 6.0))).epsilon(1e-12));
}

TEST_CASE("attention_sublayer: self-attention base cases and direct formula") {
  RngStream rng(5, RngPurpose::init);
  RngStream drop(5, RngPurpose::dropout);
  const Index d = 4;
  AttentionParams<double> p{Tensor<double>::from_matrix(rand_mat(3 * d, d, rng)),
                            Tensor<double>::from_vector(rand_mat(3 * d, 1, rng)),
                            Tensor<double>::from_matrix(rand_mat(d, d, rng)),
                            Tensor<double>::from_vector(rand_mat(d, 1, rng))};

  // single position attends only to itself: output = out-proj of its value
  auto x1 = Tensor<double>::from_matrix(rand_mat(1, d, rng));
  auto y1 = attention_sublayer(x1, p, 2, 0.0, drop, false);
  Vector<double> qkv = p.in_w.value() * x1.value().transpose() + p.in_b.value();
  Vector<double> v = qkv.segment(2 * d, d);
  Vector<double> want = p.out_w.value() * v + p.out_b.value();
  CHECK((y1.value().transpose() - want).cwiseAbs().maxCoeff() < 1e-12);

  // identical keys (and values): uniform attention over the prefix
  Matrix<double> same = rand_mat(1, d, rng).colwise().replicate(3);
  auto ys = attention_sublayer(Tensor<double>::from_matrix(same), p, 2, 0.0, drop, false);
  for (Index t = 0; t < 3; ++t)
    CHECK((ys.value().row(t) - ys.value().row(0)).cwiseAbs().maxCoeff() < 1e-12);

  // three positions against the direct masked formula, one head
  auto X = Tensor<double>::from_matrix(rand_mat(3, d, rng));
  auto y = attention_sublayer(X, p, 1, 0.0, drop, false);
  Matrix<double> QKV = X.value() * p.in_w.value().transpose();
  QKV.rowwise() += p.in_b.value().col(0).transpose();
  Matrix<double> Q = QKV.leftCols(d), K = QKV.middleCols(d, d), V = QKV.rightCols(d);
  Matrix<double> ref(3, d);
  for (Index t = 0; t < 3; ++t) {
    Vector<double> scores = (K.topRows(t + 1) * Q.row(t).transpose()) / std::sqrt(double(d));
    Vector<double> w = (scores.array() - scores.maxCoeff()).exp();
    w /= w.sum();
    ref.row(t) = (w.transpose() * V.topRows(t + 1));
  }
  Matrix<double> refout = ref * p.out_w.value().transpose();
  refout.rowwise() += p.out_b.value().col(0).transpose();
  CHECK((y.value() - refout).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("init_parameters: layer-norm exact, Xavier bounds, Monte-Carlo variance") {
  ArchitectureSpec spec = parse_arch_spec("Tf+Nd");
  spec.width = 16;
  Model<double> model(spec, 11, 42);
  for (const auto& sh : parameter_shapes(spec, 11)) {
    const auto& v = model.params().at(sh.name).value();
    if (sh.init == InitKind::ln_gain) CHECK((v.array() == 1.0).all());
    if (sh.init == InitKind::ln_bias) CHECK((v.array() == 0.0).all());
    if (sh.init == InitKind::xavier) {
      const double bound = xavier_bound(sh.rows, sh.cols);
      CHECK(v.cwiseAbs().maxCoeff() <= bound);
    }
    if (sh.init == InitKind::uniform01) CHECK(v.cwiseAbs().maxCoeff() <= 0.1);
  }

  RngStream rng(7, RngPurpose::init);
  auto big = init_matrix<double>(200, 300, InitKind::xavier, rng);
  const double want_var = 2.0 / (200 + 300);
  const double got_var = (big.array() - big.mean()).square().mean();
  CHECK(std::abs(got_var - want_var) / want_var < 0.2);
}

TEST_CASE("parameter counts: closed forms and enumeration agree") {
  const Index V = 200;
  ArchitectureSpec rnn = parse_arch_spec("RNN");
  rnn.width = 170;
  CHECK(count_parameters(rnn, V) == 6 * 170 * 170 + 6 * 170 + (V + 1) * 170);

  ArchitectureSpec lstm = parse_arch_spec("LSTM");
  lstm.width = 90;
  CHECK(count_parameters(lstm, V) == 24 * 90 * 90 + 15 * 90 + (V + 1) * 90);

  ArchitectureSpec tf = parse_arch_spec("Tf");
  tf.width = 68;
  CHECK(count_parameters(tf, V) == 40 * 68 * 68 + (V + 59) * 68);

  // built models expose exactly the enumerated count
  for (const char* name : {"RNN", "LSTM+Sup+R", "Tf+Nd"}) {
    ArchitectureSpec spec = parse_arch_spec(name);
    spec.width = spec.base == BaseKind::transformer ? 8 : 7;
    spec.sup_m = 4;
    spec.nd_states = 2;
    spec.nd_symbols = 2;
    spec.nd_m = 2;
    Model<double> m(spec, V, 1);
    CHECK(m.params().total_values() == count_parameters(spec, V));
  }
}

TEST_CASE("solve_width returns the global argmin with small-d tie breaking") {
  const Index V = 50;
  ArchitectureSpec rnn = parse_arch_spec("RNN");
  const Index d = solve_width(rnn, V, 20000, 256);
  long best = -1;
  Index best_d = 0;
  for (Index cand = 1; cand <= 256; ++cand) {
    ArchitectureSpec s = rnn;
    s.width = cand;
    const long err = std::abs(count_parameters(s, V) - 20000);
    if (best < 0 || err < best) {
      best = err;
      best_d = cand;
    }
  }
  CHECK(d == best_d);

  ArchitectureSpec tf = parse_arch_spec("Tf");
  CHECK(solve_width(tf, V, 50000, 512) % 4 == 0);
}

TEST_CASE("architecture spec parsing: labels round-trip and invalid combinations throw") {
  for (const char* name : {"Tf", "Tf+Sup", "Tf+Sup+Sup", "Tf+Nd", "Tf+Nd+Nd", "RNN", "RNN+Sup",
                           "RNN+Sup+R", "RNN+Nd", "RNN+Nd+R", "LSTM", "LSTM+Sup", "LSTM+Sup+R",
                           "LSTM+Nd", "LSTM+Nd+R"}) {
    CHECK(parse_arch_spec(name).to_string() == name);
  }
  CHECK_THROWS_AS(parse_arch_spec("Tf+R"), ContractViolation);
  CHECK_THROWS_AS(parse_arch_spec("RNN+Sup+Sup"), ContractViolation);
  CHECK_THROWS_AS(parse_arch_spec("Tf+Sup+Nd"), ContractViolation);
  CHECK_THROWS_AS(parse_arch_spec("GRU"), ContractViolation);
  CHECK_THROWS_AS(parse_arch_spec("RNN+R"), ContractViolation);
}
