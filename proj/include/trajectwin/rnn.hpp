#pragma once

// Stacked LSTM next-visit predictor with two regression heads (ADAS13,
// Ventricles) and a three-class diagnosis head, trained by hand-written
// backpropagation through time and Adam.

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "trajectwin/common.hpp"
#include "trajectwin/io.hpp"

namespace trajectwin::rnn {

struct RNNConfig {
  int layers = 2;
  int hidden_size = 64;
  double dropout_rate = 0.3;
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 20;
  std::uint64_t seed = 0;
  int input_dimension = 0;
  // Weights of the ADAS13, Ventricles and cross-entropy loss terms.
  std::array<double, 3> loss_weights{1.0, 1.0, 1.0};
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const;
};

// All weights live in one flat vector; the accessors are views into it so
// that Adam and finite-difference checks operate on a single buffer.
class RNNParameters {
 public:
  RNNParameters() = default;
  RNNParameters(int input_dimension, int hidden_size, int layers);

  static RNNParameters zeros(const RNNConfig& config);
  // Uniform(-1/sqrt(H), 1/sqrt(H)) for every weight and bias.
  static RNNParameters random(const RNNConfig& config, std::uint64_t seed);

  int input_dimension() const { return input_dim_; }
  int hidden_size() const { return hidden_; }
  int layers() const { return layers_; }
  Eigen::Index size() const { return theta_.size(); }

  Vector& flat() { return theta_; }
  const Vector& flat() const { return theta_; }

  // Gate blocks are stacked in the order input, forget, cell, output.
  Eigen::Map<Matrix> W(int layer);        // 4H x in
  Eigen::Map<Matrix> U(int layer);        // 4H x H
  Eigen::Map<Vector> b(int layer);        // 4H
  Eigen::Map<Matrix> W_reg();             // 2 x H
  Eigen::Map<Vector> b_reg();             // 2
  Eigen::Map<Matrix> W_cls();             // 3 x H
  Eigen::Map<Vector> b_cls();             // 3
  Eigen::Map<const Matrix> W(int layer) const;
  Eigen::Map<const Matrix> U(int layer) const;
  Eigen::Map<const Vector> b(int layer) const;
  Eigen::Map<const Matrix> W_reg() const;
  Eigen::Map<const Vector> b_reg() const;
  Eigen::Map<const Matrix> W_cls() const;
  Eigen::Map<const Vector> b_cls() const;

  // Offset of the first head coordinate in flat().
  Eigen::Index head_offset() const;

  io::json to_json() const;
  static RNNParameters from_json(const io::json& j);

 private:
  Eigen::Index layer_offset(int layer) const;
  int layer_input(int layer) const { return layer == 0 ? input_dim_ : hidden_; }

  int input_dim_ = 0;
  int hidden_ = 0;
  int layers_ = 0;
  Vector theta_;
};

struct Outputs {
  double adas13 = 0.0;
  double ventricles = 0.0;
  std::array<double, 3> logits{};
};

struct Target {
  double adas13 = 0.0;
  double ventricles = 0.0;
  int diagnosis = 0;  // 0 CN, 1 MCI, 2 AD
};

struct Example {
  std::vector<Vector> inputs;  // one feature vector per history visit
  Target target;
};

enum class Mode { Eval, Train };

// In Train mode `dropout_rng` must be non-null; masks are drawn from it.
Outputs forward(const std::vector<Vector>& history, const RNNParameters& params, Mode mode = Mode::Eval,
                double dropout_rate = 0.0, Rng* dropout_rng = nullptr);

double loss(const Outputs& out, const Target& target,
            const std::array<double, 3>& weights = {1.0, 1.0, 1.0});

// Loss and its gradient with respect to params.flat() for one example.
double loss_and_gradient(const Example& example, const RNNParameters& params, Vector& gradient,
                         const std::array<double, 3>& weights = {1.0, 1.0, 1.0}, Mode mode = Mode::Eval,
                         double dropout_rate = 0.0, Rng* dropout_rng = nullptr);

// Mean loss and mean gradient over a batch, accumulated in batch order.
double batch_loss_and_gradient(const std::vector<const Example*>& batch, const RNNParameters& params,
                               Vector& gradient, const std::array<double, 3>& weights, Mode mode,
                               double dropout_rate, Rng* dropout_rng);

struct TrainingTrace {
  std::vector<double> train_loss;       // mean dropout-mode loss over each epoch's batches
  std::vector<double> validation_loss;  // eval-mode mean loss after each epoch (NaN if no validation data)
};

struct TrainResult {
  RNNParameters params;
  TrainingTrace trace;
};

TrainResult train(const std::vector<Example>& training, const std::vector<Example>& validation,
                  const RNNConfig& config);

double mean_loss(const std::vector<Example>& examples, const RNNParameters& params,
                 const std::array<double, 3>& weights = {1.0, 1.0, 1.0});

struct GradientCheckOptions {
  double step = 1e-5;
  std::size_t coordinates = 100;
  std::uint64_t seed = 0;
  bool heads_only = false;  // sample coordinates from the output heads only
};

// Max over sampled coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-6),
// with the numeric derivative taken by central differences in eval mode.
double gradient_check(const RNNParameters& params, const Example& example,
                      const GradientCheckOptions& options = {},
                      const std::array<double, 3>& weights = {1.0, 1.0, 1.0});

}  // namespace trajectwin::rnn
