#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "trajectwin/tensor.hpp"

using namespace trajectwin;
using namespace trajectwin::tensor;

namespace {

double relative_error(const Matrix& estimate, const Matrix& truth) {
  return (estimate - truth).norm() / truth.norm();
}

Matrix rank_two_truth() {
  Vector u1(5), v1(4), u2(5), v2(4);
  u1 << 1.0, -0.5, 0.8, 0.0, 1.2;
  v1 << 0.7, 1.0, -0.4, 0.3;
  u2 << 0.2, 1.1, -0.6, 0.9, -0.3;
  v2 << -0.8, 0.1, 0.9, 0.6;
  return u1 * v1.transpose() + u2 * v2.transpose();
}

}  // namespace

TEST_CASE("noiseless rank-1 coefficient is recovered") {
  Matrix C(2, 2);
  C << 3.0, 4.0, 6.0, 8.0;
  const auto data = simulate_dataset(C, 1.5, 200, 0.0, 3);
  const auto fit = cp_fit(data, 1, 0.0);
  CHECK(relative_error(fit.model.coefficient(), C) < 1e-6);
  CHECK(fit.model.intercept == doctest::Approx(1.5).epsilon(1e-6));
}

TEST_CASE("heavy ridge shrinks predictions to the outcome mean") {
  Matrix C(3, 2);
  C << 1.0, 2.0, -1.0, 0.5, 0.0, 1.0;
  const auto data = simulate_dataset(C, 0.0, 100, 0.1, 4);
  const auto fit = cp_fit(data, 1, 1e9);
  const double ybar = std::accumulate(data.y.begin(), data.y.end(), 0.0) / double(data.size());
  for (std::size_t i = 0; i < data.size(); i += 10) CHECK(cp_predict(fit.model, data.X[i]) == doctest::Approx(ybar).epsilon(1e-4));
}

TEST_CASE("noisy rank-2 coefficient is recovered within 5%") {
  const Matrix C = rank_two_truth();
  const auto data = simulate_dataset(C, -0.4, 500, 0.01, 11);
  const auto fit = cp_fit(data, 2, 1e-6);
  CHECK(relative_error(fit.model.coefficient(), C) < 0.05);
}

TEST_CASE("prediction edge cases") {
  CPFactorModel m;
  m.A = {Vector::Unit(3, 0)};
  m.B = {Vector::Unit(2, 1)};
  m.intercept = 0.25;
  CHECK(cp_predict(m, Matrix::Zero(3, 2)) == 0.25);
  Matrix X = Matrix::Zero(3, 2);
  X(0, 1) = 5.0;
  m.intercept = 0.0;
  CHECK(cp_predict(m, X) == 5.0);
  CHECK_THROWS_AS(cp_predict(m, Matrix::Zero(2, 2)), ShapeError);
}

TEST_CASE("factored and reconstructed predictions agree") {
  const auto data = simulate_dataset(rank_two_truth(), 0.3, 80, 0.2, 5);
  const auto fit = cp_fit(data, 3, 0.1);
  for (std::size_t i = 0; i < data.size(); ++i)
    CHECK(std::abs(cp_predict(fit.model, data.X[i]) - cp_predict_reconstructed(fit.model, data.X[i])) < 1e-12);
}

TEST_CASE("ALS objective never increases") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto data = simulate_dataset(rank_two_truth(), 0.0, 60, 0.5, seed);
    for (int rank : {1, 2, 4}) {
      CpConfig cfg;
      cfg.seed = seed;
      cfg.max_iters = 50;
      const auto fit = cp_fit(data, rank, 0.05, cfg);
      REQUIRE(fit.objective.size() >= 2);
      for (std::size_t k = 1; k < fit.objective.size(); ++k)
        CHECK(fit.objective[k] <= fit.objective[k - 1] * (1.0 + 1e-9) + 1e-9);
      CHECK(fit.objective.back() == doctest::Approx(objective(fit.model, data)).epsilon(1e-9));
    }
  }
}

TEST_CASE("rebalancing preserves the coefficient and predictions") {
  CPFactorModel m;
  m.A = {Vector::Constant(3, 10.0), Vector::LinSpaced(3, -1.0, 1.0)};
  m.B = {Vector::Constant(2, 0.1), Vector::Constant(2, 4.0)};
  const Matrix before = m.coefficient();
  Matrix X(3, 2);
  X << 1.0, 2.0, 3.0, 4.0, 5.0, 6.0;
  const double pred = cp_predict(m, X);
  m.rebalance();
  CHECK((m.coefficient() - before).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(cp_predict(m, X) == doctest::Approx(pred).epsilon(1e-12));
  for (int r = 0; r < m.rank(); ++r) CHECK(m.A[r].norm() == doctest::Approx(m.B[r].norm()).epsilon(1e-12));
}

TEST_CASE("rank selection") {
  Vector a(4), b(3);
  a << 1.0, -1.0, 0.5, 2.0;
  b << 0.5, 1.0, -1.5;
  const Matrix C = a * b.transpose();
  const auto data = simulate_dataset(C, 0.0, 400, 0.1, 8);
  const std::vector<double> grid = {1e-4, 1e-2, 1.0};
  const auto sel = rank_select(data, 3, grid);
  CHECK(sel.rank == 1);
  CHECK(sel.candidates.size() == 9);
  CHECK(sel.candidates.front().rank == 1);
  CHECK(sel.candidates.back().rank == 3);
  CHECK(sel.model.rank() == 1);
  CHECK(sel.model.residual_variance > 0.0);

  SUBCASE("pure noise selects deterministically") {
    const auto noise = simulate_dataset(Matrix::Zero(4, 3), 0.0, 100, 1.0, 9);
    const auto s1 = rank_select(noise, 3, grid);
    RankSelectConfig cfg;
    cfg.threads = 3;
    const auto s2 = rank_select(noise, 3, grid, cfg);
    CHECK(s1.rank == s2.rank);
    CHECK(s1.lambda == s2.lambda);
    for (std::size_t k = 0; k < s1.candidates.size(); ++k)
      CHECK(s1.candidates[k].validation_mse == s2.candidates[k].validation_mse);
  }
  SUBCASE("a single candidate is returned as is") {
    const auto s = rank_select(data, 1, {0.5});
    CHECK(s.rank == 1);
    CHECK(s.lambda == 0.5);
    CHECK(s.candidates.size() == 1);
  }
  CHECK_THROWS_AS(rank_select(data, 0, grid), UsageError);
  CHECK_THROWS_AS(rank_select(data, 2, {}), UsageError);
}

TEST_CASE("dataset CSV round trip and errors") {
  const auto data = simulate_dataset(rank_two_truth(), 0.0, 7, 0.3, 2);
  std::stringstream ss;
  write_dataset_csv(ss, data);
  const auto back = read_dataset_csv(ss);
  REQUIRE(back.size() == data.size());
  CHECK(back.rows() == 5);
  CHECK(back.cols() == 4);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back.X[i] == data.X[i]);
    CHECK(back.y[i] == data.y[i]);
  }

  std::istringstream bad_shape("rows,2,2\nh\n");
  CHECK_THROWS_AS(read_dataset_csv(bad_shape), SchemaError);
  std::istringstream short_row("shape,1,2\nx0,x1,y\n1,2\n");
  CHECK_THROWS_AS(read_dataset_csv(short_row), SchemaError);
  std::istringstream text("shape,1,2\nx0,x1,y\n1,abc,3\n");
  CHECK_THROWS_AS(read_dataset_csv(text), DataError);
  std::istringstream empty("shape,1,2\nx0,x1,y\n");
  CHECK_THROWS_AS(read_dataset_csv(empty), DataError);
}

TEST_CASE("model JSON round trip and fit argument errors") {
  const auto data = simulate_dataset(rank_two_truth(), 0.2, 50, 0.1, 6);
  const auto fit = cp_fit(data, 2, 0.01);
  const auto back = CPFactorModel::from_json(fit.model.to_json());
  CHECK(back.rank() == 2);
  CHECK(back.intercept == fit.model.intercept);
  CHECK(back.coefficient() == fit.model.coefficient());
  CHECK_THROWS_AS(CPFactorModel::from_json(io::json{{"A", io::json::array()}}), SchemaError);
  CHECK_THROWS_AS(cp_fit(data, 0, 0.1), UsageError);
  CHECK_THROWS_AS(cp_fit(data, 5, 0.1), UsageError);
  CHECK_THROWS_AS(cp_fit(data, 1, -1.0), UsageError);
}
