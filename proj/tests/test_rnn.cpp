#include <doctest.h>

#include <cmath>
#include <random>

#include "trajectwin/rnn.hpp"

using namespace trajectwin;
using namespace trajectwin::rnn;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

RNNConfig small_config(int input, int hidden, int layers) {
  RNNConfig c;
  c.input_dimension = input;
  c.hidden_size = hidden;
  c.layers = layers;
  return c;
}

Example random_example(Rng& rng, int input, int length) {
  std::normal_distribution<double> n(0.0, 1.0);
  Example ex;
  for (int t = 0; t < length; ++t) ex.inputs.push_back(Vector::NullaryExpr(input, [&]() { return n(rng); }));
  ex.target = {n(rng), n(rng), int(std::uniform_int_distribution<int>(0, 2)(rng))};
  return ex;
}

}  // namespace

TEST_CASE("zero network gives zero outputs and uniform logits") {
  const auto p = RNNParameters::zeros(small_config(3, 4, 2));
  const auto out = forward({Vector::Ones(3), Vector::Ones(3)}, p);
  CHECK(out.adas13 == 0.0);
  CHECK(out.ventricles == 0.0);
  for (double l : out.logits) CHECK(l == 0.0);
  Vector g;
  const double l = loss_and_gradient({{Vector::Ones(3)}, {0.0, 0.0, 1}}, p, g);
  CHECK(l == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(g.allFinite());
  CHECK(gradient_check(p, {{Vector::Ones(3)}, {0.5, -0.5, 2}}) < 1e-4);
}

TEST_CASE("single LSTM cell by hand") {
  RNNParameters p(1, 1, 1);
  // Gate order input, forget, cell, output.
  p.W(0) << 0.5, -0.3, 0.8, 0.2;
  p.U(0) << 0.1, 0.1, 0.1, 0.1;
  p.b(0) << 0.1, 0.0, -0.2, 0.3;
  p.W_reg() << 2.0, -1.0;
  p.b_reg() << 0.5, 0.25;
  p.W_cls() << 1.0, 0.0, -1.0;
  p.b_cls() << 0.0, 0.1, 0.2;
  const double x = 1.5;
  const double i = sigmoid(0.5 * x + 0.1), g = std::tanh(0.8 * x - 0.2), o = sigmoid(0.2 * x + 0.3);
  const double c = i * g;  // forget gate multiplies the zero initial cell
  const double h = o * std::tanh(c);
  const auto out = forward({Vector::Constant(1, x)}, p);
  CHECK(out.adas13 == doctest::Approx(2.0 * h + 0.5).epsilon(1e-14));
  CHECK(out.ventricles == doctest::Approx(-h + 0.25).epsilon(1e-14));
  CHECK(out.logits[0] == doctest::Approx(h).epsilon(1e-14));
  CHECK(out.logits[1] == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(out.logits[2] == doctest::Approx(0.2 - h).epsilon(1e-14));
}

TEST_CASE("loss arithmetic") {
  Outputs zero;
  CHECK(loss(zero, {0.0, 0.0, 1}) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(loss(zero, {1.0, 2.0, 0}) == doctest::Approx(1.0 + 4.0 + std::log(3.0)).epsilon(1e-14));
  CHECK(loss(zero, {1.0, 2.0, 0}) == doctest::Approx(6.0986).epsilon(1e-4));

  Outputs perfect{0.7, -0.2, {0.0, 1e6, 0.0}};
  CHECK(loss(perfect, {0.7, -0.2, 1}) == doctest::Approx(0.0));
  CHECK(std::isfinite(loss(perfect, {0.7, -0.2, 0})));

  // Matching regression targets leave only the cross-entropy term.
  Outputs any{0.3, 0.9, {0.2, -1.0, 0.5}};
  const double z = std::exp(0.2) + std::exp(-1.0) + std::exp(0.5);
  CHECK(loss(any, {0.3, 0.9, 2}) == doctest::Approx(std::log(z) - 0.5).epsilon(1e-14));
  CHECK(loss(any, {1.3, 0.9, 2}, {2.0, 1.0, 0.0}) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("eval mode is deterministic and ignores the dropout generator") {
  Rng rng(4);
  const auto p = RNNParameters::random(small_config(5, 6, 2), 11);
  const auto ex = random_example(rng, 5, 4);
  const auto a = forward(ex.inputs, p);
  const auto b = forward(ex.inputs, p);
  CHECK(a.adas13 == b.adas13);
  CHECK(a.logits == b.logits);
  Rng r1(1), r2(2);
  const auto c = forward(ex.inputs, p, Mode::Eval, 0.5, &r1);
  const auto d = forward(ex.inputs, p, Mode::Eval, 0.5, &r2);
  CHECK(c.adas13 == a.adas13);
  CHECK(d.ventricles == a.ventricles);

  Vector g1, g2;
  Rng r3(3);
  const double eval = loss_and_gradient(ex, p, g1);
  const double train = loss_and_gradient(ex, p, g2, {1.0, 1.0, 1.0}, Mode::Train, 0.0, &r3);
  CHECK(eval == train);
  CHECK(g1 == g2);
}

TEST_CASE("analytic gradients match central differences") {
  Rng rng(21);
  for (int trial = 0; trial < 8; ++trial) {
    const int hidden = 1 + trial, input = 1 + trial % 4, layers = 1 + trial % 3;
    const auto p = RNNParameters::random(small_config(input, hidden, layers), 100 + trial);
    const auto ex = random_example(rng, input, 1 + trial % 5);
    GradientCheckOptions opt;
    opt.coordinates = 200;
    opt.seed = std::uint64_t(trial);
    CHECK(gradient_check(p, ex, opt, {1.0, 0.5, 2.0}) < 1e-4);
  }
}

TEST_CASE("linear head gradients are exact") {
  Rng rng(8);
  const auto p = RNNParameters::random(small_config(3, 4, 2), 5);
  GradientCheckOptions opt;
  opt.heads_only = true;
  opt.coordinates = 1000;
  CHECK(gradient_check(p, random_example(rng, 3, 3), opt) < 1e-7);
}

TEST_CASE("batch gradient is the mean of per-example gradients") {
  Rng rng(6);
  const auto p = RNNParameters::random(small_config(2, 3, 1), 9);
  const auto a = random_example(rng, 2, 2), b = random_example(rng, 2, 4);
  Vector ga, gb, gab;
  const double la = loss_and_gradient(a, p, ga), lb = loss_and_gradient(b, p, gb);
  const double lab = batch_loss_and_gradient({&a, &b}, p, gab, {1.0, 1.0, 1.0}, Mode::Eval, 0.0, nullptr);
  CHECK(lab == doctest::Approx(0.5 * (la + lb)).epsilon(1e-14));
  CHECK((gab - 0.5 * (ga + gb)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("training memorizes a repeated pair") {
  Rng rng(12);
  const auto ex = random_example(rng, 4, 3);
  std::vector<Example> data(10, ex);
  auto cfg = small_config(4, 8, 2);
  cfg.batch_size = 5;
  cfg.learning_rate = 1e-2;
  cfg.seed = 3;
  const auto res = train(data, {}, cfg);
  REQUIRE(res.trace.train_loss.size() == 20);
  REQUIRE(res.trace.validation_loss.size() == 20);
  CHECK(res.trace.train_loss.back() < res.trace.train_loss.front());
  CHECK(mean_loss(data, res.params) < mean_loss(data, RNNParameters::random(cfg, cfg.seed)));
  CHECK(std::isnan(res.trace.validation_loss.front()));
}

TEST_CASE("training is seed-deterministic") {
  Rng rng(13);
  std::vector<Example> data;
  for (int i = 0; i < 30; ++i) data.push_back(random_example(rng, 3, 1 + i % 4));
  auto cfg = small_config(3, 5, 2);
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.seed = 99;
  const auto a = train(data, data, cfg);
  const auto b = train(data, data, cfg);
  CHECK(a.trace.train_loss == b.trace.train_loss);
  CHECK(a.trace.validation_loss == b.trace.validation_loss);
  CHECK(a.params.flat() == b.params.flat());
  cfg.seed = 100;
  CHECK(train(data, data, cfg).trace.train_loss != a.trace.train_loss);
}

TEST_CASE("configuration and shape errors") {
  auto cfg = small_config(3, 4, 2);
  CHECK_NOTHROW(cfg.validate());
  cfg.dropout_rate = 1.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = small_config(3, 0, 2);
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  const auto p = RNNParameters::zeros(small_config(3, 4, 2));
  CHECK_THROWS_AS(forward({}, p), ShapeError);
  CHECK_THROWS_AS(forward({Vector::Ones(2)}, p), ShapeError);
  Rng rng(1);
  CHECK_THROWS_AS(forward({Vector::Ones(3)}, p, Mode::Train, 0.3, nullptr), UsageError);
  CHECK_THROWS_AS(train({}, {}, small_config(3, 4, 2)), DataError);
}

TEST_CASE("parameters serialize losslessly") {
  const auto p = RNNParameters::random(small_config(4, 3, 2), 7);
  const auto back = RNNParameters::from_json(p.to_json());
  CHECK(back.input_dimension() == 4);
  CHECK(back.hidden_size() == 3);
  CHECK(back.layers() == 2);
  CHECK(back.flat() == p.flat());
  CHECK(p.size() == 4 * 3 * (4 + 3 + 1) + 4 * 3 * (3 + 3 + 1) + 2 * 3 + 2 + 3 * 3 + 3);
}
