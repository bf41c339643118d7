#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stacklab/grad_check.hpp"
#include "stacklab/nd_stack.hpp"
#include "stacklab/sup_stack.hpp"

#include <sstream>

using namespace stacklab;

namespace {

Vector<double> vec1(double a) { return (Vector<double>(1) << a).finished(); }

Vector<double> random_unit_interval(Index n, RngStream& rng) {
  Vector<double> v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.uniform(0.05, 0.95);
  return v;
}

Vector<double> random_vec(Index n, RngStream& rng, double lo, double hi) {
  Vector<double> v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

// Softmax in plain doubles for building oracle action distributions.
Vector<double> softmax3(const Vector<double>& logits) {
  Vector<double> e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

TEST_CASE("sup_step: deterministic push, push-then-pop, mixed interpolation") {
  auto st = SupStackState<double>::initial(1);
  auto push_logits = Tensor<double>::from_vector((Vector<double>(3) << 1000, 0, 0).finished());
  auto st1 = sup_step(st, push_logits, Tensor<double>::from_vector(vec1(0.8)));
  CHECK(st1.reading().value()(0, 0) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(st1.mat.rows() == 2);

  auto pop_logits = Tensor<double>::from_vector((Vector<double>(3) << 0, 0, 1000).finished());
  auto st2 = sup_step(st1, pop_logits, Tensor<double>::from_vector(vec1(0.5)));
  CHECK(st2.reading().value()(0, 0) == doctest::Approx(0.0).epsilon(1e-12));

  // actions (0.5 push, 0, 0.5 pop) after a sure push of 0.8, pushing 0.2
  auto half_logits = Tensor<double>::from_vector((Vector<double>(3) << 0, -1000, 0).finished());
  auto st3 = sup_step(st1, half_logits, Tensor<double>::from_vector(vec1(0.2)));
  CHECK(st3.reading().value()(0, 0) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("sup_reading_oracle: sure push, resolved single-step convention, mixed case") {
  std::vector<Vector<double>> acts = {(Vector<double>(3) << 1, 0, 0).finished()};
  std::vector<Vector<double>> push = {vec1(0.7)};
  CHECK(sup_reading_oracle<double>(acts, push)(0) == doctest::Approx(0.7).epsilon(1e-12));

  // Resolved run-set convention: the reading equals the matrix semantics, so a
  // single step with push weight p reads p*v_1 (not v_1).
  acts[0] = (Vector<double>(3) << 0.6, 0.3, 0.1).finished();
  CHECK(sup_reading_oracle<double>(acts, push)(0) == doctest::Approx(0.6 * 0.7).epsilon(1e-12));

  // the hand-simulated two-step case
  std::vector<Vector<double>> acts2 = {(Vector<double>(3) << 1, 0, 0).finished(),
                                       (Vector<double>(3) << 0.5, 0, 0.5).finished()};
  std::vector<Vector<double>> push2 = {vec1(0.8), vec1(0.2)};
  CHECK(sup_reading_oracle<double>(acts2, push2)(0) == doctest::Approx(0.1).epsilon(1e-12));

  std::vector<Vector<double>> zero = {(Vector<double>(3) << 0, 0, 0).finished()};
  CHECK_THROWS_AS(sup_reading_oracle<double>(zero, push), ContractViolation);
}

TEST_CASE("sup oracle equivalence on random instances (t<=8, m<=4)") {
  RngStream rng(101, RngPurpose::init);
  for (int trial = 0; trial < 30; ++trial) {
    const Index t = 1 + static_cast<Index>(rng.next_below(8));
    const Index m = 1 + static_cast<Index>(rng.next_below(4));
    auto st = SupStackState<double>::initial(m);
    std::vector<Vector<double>> acts, push;
    for (Index s = 0; s < t; ++s) {
      Vector<double> logits = random_vec(3, rng, -3, 3);
      acts.push_back(softmax3(logits));
      push.push_back(random_unit_interval(m, rng));
      st = sup_step(st, Tensor<double>::from_vector(logits), Tensor<double>::from_vector(push.back()));
    }
    Vector<double> want = sup_reading_oracle<double>(acts, push);
    CHECK((st.reading().value().col(0) - want).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("sup readings stay in [0,1) and the stack is differentiable") {
  RngStream rng(103, RngPurpose::init);
  const Index m = 3, t = 4;
  std::vector<Tensor<double>> logit_params, push_params;
  for (Index s = 0; s < t; ++s) {
    logit_params.push_back(Tensor<double>::parameter(random_vec(3, rng, -1, 1)));
    push_params.push_back(Tensor<double>::parameter(random_vec(m, rng, -2, 2)));
  }
  auto forward = [&] {
    auto st = SupStackState<double>::initial(m);
    Tensor<double> acc = Tensor<double>::scalar(0);
    for (Index s = 0; s < t; ++s) {
      st = sup_step(st, logit_params[s], logistic(push_params[s]));
      RngStream wrng(7 + static_cast<std::uint64_t>(s), RngPurpose::init);
      Vector<double> w = random_vec(m, wrng, -1, 1);
      acc = add(acc, matmul(Tensor<double>::from_matrix(Matrix<double>(w.transpose())), st.reading()));
      CHECK(st.reading().value().minCoeff() >= 0.0);
      CHECK(st.reading().value().maxCoeff() < 1.0);
    }
    return acc;
  };
  std::vector<Tensor<double>> params = logit_params;
  params.insert(params.end(), push_params.begin(), push_params.end());
  auto rep = finite_difference_check<double>(forward, params);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("sup saturation matches the discrete stack") {
  RngStream rng(107, RngPurpose::init);
  for (int trial = 0; trial < 5; ++trial) {
    const Index t = 1 + static_cast<Index>(rng.next_below(7));
    const Index m = 1 + static_cast<Index>(rng.next_below(3));
    auto st = SupStackState<double>::initial(m);
    std::vector<SupAction> chosen;
    std::vector<Vector<double>> push;
    Index depth = 0;
    for (Index s = 0; s < t; ++s) {
      SupAction a = static_cast<SupAction>(rng.next_below(3));
      if (a == SupAction::pop && depth == 0) a = SupAction::noop;
      depth += (a == SupAction::push) ? 1 : (a == SupAction::pop ? -1 : 0);
      chosen.push_back(a);
      push.push_back(random_unit_interval(m, rng));
      Vector<double> logits = Vector<double>::Zero(3);
      logits(static_cast<int>(a)) = 1000.0;
      st = sup_step(st, Tensor<double>::from_vector(logits), Tensor<double>::from_vector(push.back()));
    }
    Vector<double> want = sup_discrete_top<double>(chosen, push);
    CHECK((st.reading().value().col(0) - want).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("action layout: counts and round-trip bijection") {
  VpdaLayout l11{1, 1};
  CHECK(l11.num_actions() == 3);
  VpdaLayout l33{3, 3};
  CHECK(l33.num_actions() == 189);  // 2*81 + 27
  for (VpdaLayout lay : {VpdaLayout{1, 1}, VpdaLayout{2, 3}, VpdaLayout{3, 2}, VpdaLayout{3, 3}}) {
    for (int i = 0; i < lay.num_actions(); ++i) CHECK(lay.to_index(lay.from_index(i)) == i);
  }
}

namespace {

// Logits that saturate a single transition per step.
Vector<double> saturating_logits(const VpdaLayout& lay, const VpdaTransition& tr, double strength = 1000) {
  Vector<double> v = Vector<double>::Constant(lay.num_actions(), -strength);
  v(lay.to_index(tr)) = strength;
  return v;
}

}  // namespace

TEST_CASE("nd_step: sure push then sure pop recover pushed vector and bottom") {
  VpdaLayout lay{1, 2};  // states {q0}, symbols {bot, x}
  const Index m = 2;
  Vector<double> v0 = (Vector<double>(2) << 0.25, 0.5).finished();
  auto st = nd_initial_state_linear<double>(lay, m, v0);

  // initial reading exposes the bottom slice only
  CHECK(st.reading.value()(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(st.reading.value()(1, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(st.reading.value()(2, 0) == doctest::Approx(0.0).epsilon(1e-12));

  Vector<double> v1 = (Vector<double>(2) << 0.9, 0.1).finished();
  auto logits_push = saturating_logits(lay, {VpdaActionKind::push, 0, 0, 0, 1});
  auto r1 = nd_step(st, Tensor<double>::from_vector(logits_push), Tensor<double>::from_vector(v1));
  // slice (q0, x) holds v1; slice (q0, bot) is ~0
  CHECK(r1.value()(2, 0) == doctest::Approx(0.9).epsilon(1e-9));
  CHECK(r1.value()(3, 0) == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(r1.value()(0, 0) == doctest::Approx(0.0).epsilon(1e-9));

  auto logits_pop = saturating_logits(lay, {VpdaActionKind::pop, 0, 1, 0, -1});
  auto r2 = nd_step(st, Tensor<double>::from_vector(logits_pop),
                    Tensor<double>::from_vector((Vector<double>(2) << 0.5, 0.5).finished()));
  CHECK(r2.value()(0, 0) == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(r2.value()(1, 0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(r2.value()(2, 0) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("nd_step: two-run interpolation (push weight 3, replace weight 1)") {
  VpdaLayout lay{1, 2};
  const Index m = 1;
  Vector<double> v0 = vec1(0.5);
  auto st = nd_initial_state_linear<double>(lay, m, v0);
  Vector<double> logits = Vector<double>::Constant(lay.num_actions(), -1000.0);
  logits(lay.to_index({VpdaActionKind::push, 0, 0, 0, 1})) = std::log(3.0);
  logits(lay.to_index({VpdaActionKind::replace, 0, 0, 0, 0})) = 0.0;
  auto r = nd_step(st, Tensor<double>::from_vector(logits), Tensor<double>::from_vector(vec1(0.8)));
  // slice (q0,x) = (3/4) v1, slice (q0,bot) = (1/4) v0
  CHECK(r.value()(1, 0) == doctest::Approx(0.75 * 0.8).epsilon(1e-9));
  CHECK(r.value()(0, 0) == doctest::Approx(0.25 * 0.5).epsilon(1e-9));
}

TEST_CASE("nd oracle equivalence on random instances (t<=6, |Q|<=2, |Gamma|<=2, m<=3)") {
  RngStream rng(109, RngPurpose::init);
  for (int trial = 0; trial < 25; ++trial) {
    const int Q = 1 + static_cast<int>(rng.next_below(2));
    const int G = 1 + static_cast<int>(rng.next_below(2));
    const Index t = 1 + static_cast<Index>(rng.next_below(6));
    const Index m = 1 + static_cast<Index>(rng.next_below(3));
    VpdaLayout lay{Q, G};
    Vector<double> v0 = random_unit_interval(m, rng);
    auto st = nd_initial_state_linear<double>(lay, m, v0);
    std::vector<Vector<double>> logits, push;
    Tensor<double> reading;
    for (Index s = 0; s < t; ++s) {
      logits.push_back(random_vec(lay.num_actions(), rng, -2, 2));
      push.push_back(random_unit_interval(m, rng));
      reading = nd_step(st, Tensor<double>::from_vector(logits.back()),
                        Tensor<double>::from_vector(push.back()));
    }
    Vector<double> want = nd_reading_oracle<double>(logits, push, lay, v0);
    for (Index i = 0; i < want.rows(); ++i) {
      if (want(i) == 0.0) {
        CHECK(std::abs(reading.value()(i, 0)) < 1e-12);
      } else {
        CHECK(std::abs(reading.value()(i, 0) - want(i)) / std::abs(want(i)) < 1e-6);
      }
    }
  }
}

TEST_CASE("nd saturation matches discrete_vpda_simulate on scripted runs") {
  RngStream rng(113, RngPurpose::init);
  for (int trial = 0; trial < 6; ++trial) {
    const int Q = 1 + static_cast<int>(rng.next_below(2));
    const int G = 1 + static_cast<int>(rng.next_below(2));
    const Index t = 1 + static_cast<Index>(rng.next_below(5));
    const Index m = 1 + static_cast<Index>(rng.next_below(3));
    VpdaLayout lay{Q, G};
    Vector<double> v0 = random_unit_interval(m, rng);
    auto st = nd_initial_state_linear<double>(lay, m, v0);

    std::vector<VpdaTransition> run;
    std::vector<Vector<double>> push;
    int state = 0;
    Index depth = 1;
    for (Index s = 0; s < t; ++s) {
      int top = run.empty() ? 0 : 0;  // recomputed below from simulation
      VpdaConfig<double> cfg = discrete_vpda_simulate<double>(run, push, lay, v0);
      state = cfg.state;
      top = cfg.stack.back().first;
      depth = static_cast<Index>(cfg.stack.size());
      VpdaTransition tr{};
      const int kind = depth >= 2 ? static_cast<int>(rng.next_below(3)) : static_cast<int>(rng.next_below(2));
      tr.kind = static_cast<VpdaActionKind>(kind);
      tr.state = state;
      tr.top = top;
      tr.next_state = static_cast<int>(rng.next_below(Q));
      tr.pushed_symbol = tr.kind == VpdaActionKind::pop ? -1 : static_cast<int>(rng.next_below(G));
      run.push_back(tr);
      push.push_back(random_unit_interval(m, rng));
      nd_step(st, Tensor<double>::from_vector(saturating_logits(lay, tr)),
              Tensor<double>::from_vector(push.back()));
    }
    VpdaConfig<double> fin = discrete_vpda_simulate<double>(run, push, lay, v0);
    const int cfg_idx = lay.config(fin.state, fin.stack.back().first);
    for (Index c = 0; c < m; ++c)
      CHECK(std::abs(st.reading.value()(cfg_idx * m + c, 0) - fin.stack.back().second(c)) < 1e-6);
  }
}

TEST_CASE("discrete_vpda_simulate: replace preserves payload; invalid runs are named") {
  VpdaLayout lay{1, 2};
  Vector<double> v0 = vec1(0.5);
  std::vector<Vector<double>> push = {vec1(0.9), vec1(0.8), vec1(0.7)};
  std::vector<VpdaTransition> run = {{VpdaActionKind::push, 0, 0, 0, 1},
                                     {VpdaActionKind::replace, 0, 1, 0, 0}};
  auto cfg = discrete_vpda_simulate<double>(run, push, lay, v0);
  CHECK(cfg.stack.back().first == 0);
  CHECK(cfg.stack.back().second(0) == 0.9);  // vector preserved under replace

  std::vector<VpdaTransition> run2 = {{VpdaActionKind::push, 0, 0, 0, 0},
                                      {VpdaActionKind::push, 0, 0, 0, 1},
                                      {VpdaActionKind::pop, 0, 1, 0, -1}};
  auto cfg2 = discrete_vpda_simulate<double>(run2, push, lay, v0);
  CHECK(cfg2.stack.back().first == 0);
  CHECK(cfg2.stack.back().second(0) == 0.9);

  std::vector<VpdaTransition> bad = {{VpdaActionKind::pop, 0, 0, 0, -1}};
  CHECK_THROWS_WITH_AS(discrete_vpda_simulate<double>(bad, push, lay, v0), doctest::Contains("step 1"),
                       ContractViolation);
  std::vector<VpdaTransition> mismatch = {{VpdaActionKind::push, 0, 1, 0, 1}};
  CHECK_THROWS_WITH_AS(discrete_vpda_simulate<double>(mismatch, push, lay, v0),
                       doctest::Contains("top symbol mismatch"), ContractViolation);
}

TEST_CASE("reduction: dVPDA with unit pre-push replaces equals literal push-run enumeration") {
  RngStream rng(127, RngPurpose::init);
  VpdaLayout lay{1, 1};
  for (int trial = 0; trial < 20; ++trial) {
    const Index t = 1 + static_cast<Index>(rng.next_below(6));
    const Index m = 1 + static_cast<Index>(rng.next_below(3));
    std::vector<Vector<double>> acts, push, logits;
    for (Index s = 0; s < t; ++s) {
      Vector<double> a = softmax3(random_vec(3, rng, -2, 2));
      acts.push_back(a);
      push.push_back(random_unit_interval(m, rng));
      Vector<double> lg(3);
      lg(lay.to_index({VpdaActionKind::push, 0, 0, 0, 0})) = std::log(a(0));
      lg(lay.to_index({VpdaActionKind::replace, 0, 0, 0, 0})) = std::log(a(1));
      lg(lay.to_index({VpdaActionKind::pop, 0, 0, 0, -1})) = std::log(a(2));
      logits.push_back(lg);
    }
    Vector<double> nd = nd_reading_oracle<double>(logits, push, lay, Vector<double>::Zero(m),
                                                  /*unit_replace_before_first_push=*/true);
    Vector<double> sup = sup_reading_push_runs<double>(acts, push);
    CHECK((nd - sup).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("nd chart is differentiable end to end (logits, pushed vectors, v0)") {
  RngStream rng(131, RngPurpose::init);
  VpdaLayout lay{2, 2};
  const Index m = 2, t = 3;
  std::vector<Tensor<double>> logit_params, push_params;
  for (Index s = 0; s < t; ++s) {
    logit_params.push_back(Tensor<double>::parameter(random_vec(lay.num_actions(), rng, -1, 1)));
    push_params.push_back(Tensor<double>::parameter(random_vec(m, rng, -1, 1)));
  }
  auto u0 = Tensor<double>::parameter(random_vec(m, rng, -0.1, 0.1));
  Vector<double> w = random_vec(lay.configs() * m, rng, -1, 1);
  auto forward = [&] {
    auto st = nd_initial_state<double>(lay, m, log_logistic(u0));
    Tensor<double> reading;
    for (Index s = 0; s < t; ++s)
      reading = nd_step(st, logit_params[s], logistic(push_params[s]));
    return matmul(Tensor<double>::from_matrix(Matrix<double>(w.transpose())), reading);
  };
  std::vector<Tensor<double>> params = logit_params;
  params.insert(params.end(), push_params.begin(), push_params.end());
  params.push_back(u0);
  auto rep = finite_difference_check<double>(forward, params);
  INFO("worst=", rep.worst);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("nd readings are convex and the chart dump emits rows") {
  RngStream rng(137, RngPurpose::init);
  VpdaLayout lay{2, 2};
  const Index m = 2;
  Vector<double> v0 = random_unit_interval(m, rng);
  auto st = nd_initial_state_linear<double>(lay, m, v0);
  for (Index s = 0; s < 4; ++s) {
    auto r = nd_step(st, Tensor<double>::from_vector(random_vec(lay.num_actions(), rng, -2, 2)),
                     Tensor<double>::from_vector(random_unit_interval(m, rng)));
    CHECK(r.value().minCoeff() >= 0.0);
    CHECK(r.value().maxCoeff() < 1.0);
    // per-coordinate sum across slices is a convex combination of (0,1) values
    for (Index c = 0; c < m; ++c) {
      double s_c = 0;
      for (int cfg = 0; cfg < lay.configs(); ++cfg) s_c += r.value()(cfg * m + c, 0);
      CHECK(s_c < 1.0);
      CHECK(s_c >= 0.0);
    }
  }
  std::ostringstream dump;
  dump_chart(st, dump);
  CHECK(dump.str().find("gamma") != std::string::npos);
  CHECK(dump.str().find('\t') != std::string::npos);
}

TEST_CASE("nd_step signals total-weight underflow as a numerical failure") {
  VpdaLayout lay{1, 1};
  auto st = nd_initial_state_linear<double>(lay, 1, vec1(0.5));
  Vector<double> bad = Vector<double>::Constant(3, neg_inf<double>());
  CHECK_THROWS_AS(nd_step(st, Tensor<double>::from_vector(bad), Tensor<double>::from_vector(vec1(0.5))),
                  NumericalFailure);
}
