#include "trajectwin/rnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace trajectwin::rnn {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::array<double, 3> softmax(const std::array<double, 3>& z) {
  const double mx = std::max({z[0], z[1], z[2]});
  std::array<double, 3> p{};
  double s = 0.0;
  for (int k = 0; k < 3; ++k) s += (p[k] = std::exp(z[k] - mx));
  for (auto& v : p) v /= s;
  return p;
}

double log_sum_exp(const std::array<double, 3>& z) {
  const double mx = std::max({z[0], z[1], z[2]});
  return mx + std::log(std::exp(z[0] - mx) + std::exp(z[1] - mx) + std::exp(z[2] - mx));
}

struct StepCache {
  Vector x;       // layer input (after dropout, for layers above the first)
  Vector i, f, g, o;
  Vector c, c_prev, h_prev, tanh_c;
};

struct ForwardCache {
  std::vector<std::vector<StepCache>> steps;  // [layer][time]
  std::vector<std::vector<Vector>> masks;     // [layer][time], scaled masks for layers >= 1
  Vector h_top;
  Outputs out;
};

ForwardCache run_forward(const std::vector<Vector>& history, const RNNParameters& p, Mode mode,
                         double rate, Rng* rng) {
  if (history.empty()) throw ShapeError("forward: empty history");
  const int H = p.hidden_size();
  const auto T = history.size();
  for (const auto& x : history)
    if (x.size() != p.input_dimension())
      throw ShapeError("forward: feature width " + std::to_string(x.size()) + " != input dimension " +
                       std::to_string(p.input_dimension()));
  const bool dropout = mode == Mode::Train && rate > 0.0;
  if (dropout && rng == nullptr) throw UsageError("forward: train mode requires a dropout generator");
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = dropout ? 1.0 / (1.0 - rate) : 1.0;

  ForwardCache cache;
  cache.steps.resize(static_cast<std::size_t>(p.layers()));
  cache.masks.resize(static_cast<std::size_t>(p.layers()));
  std::vector<Vector> below = history;
  for (int l = 0; l < p.layers(); ++l) {
    const auto W = p.W(l);
    const auto U = p.U(l);
    const auto b = p.b(l);
    auto& steps = cache.steps[static_cast<std::size_t>(l)];
    steps.resize(T);
    Vector h = Vector::Zero(H), c = Vector::Zero(H);
    std::vector<Vector> outputs(T);
    for (std::size_t t = 0; t < T; ++t) {
      StepCache& s = steps[t];
      s.x = below[t];
      if (l > 0 && dropout) {
        Vector mask(H);
        for (int k = 0; k < H; ++k) mask(k) = keep(*rng) ? scale : 0.0;
        s.x = s.x.cwiseProduct(mask);
        cache.masks[static_cast<std::size_t>(l)].push_back(std::move(mask));
      }
      const Vector a = W * s.x + U * h + b;
      s.i = a.segment(0, H).unaryExpr(&sigmoid);
      s.f = a.segment(H, H).unaryExpr(&sigmoid);
      s.g = a.segment(2 * H, H).array().tanh();
      s.o = a.segment(3 * H, H).unaryExpr(&sigmoid);
      s.c_prev = c;
      s.h_prev = h;
      c = s.f.cwiseProduct(c) + s.i.cwiseProduct(s.g);
      s.c = c;
      s.tanh_c = c.array().tanh();
      h = s.o.cwiseProduct(s.tanh_c);
      outputs[t] = h;
    }
    below = std::move(outputs);
  }
  cache.h_top = below.back();
  const Vector reg = p.W_reg() * cache.h_top + p.b_reg();
  const Vector cls = p.W_cls() * cache.h_top + p.b_cls();
  cache.out.adas13 = reg(0);
  cache.out.ventricles = reg(1);
  for (int k = 0; k < 3; ++k) cache.out.logits[static_cast<std::size_t>(k)] = cls(k);
  return cache;
}

}  // namespace

void RNNConfig::validate() const {
  if (layers < 1 || hidden_size < 1 || batch_size < 1 || epochs < 0 || input_dimension < 1)
    throw UsageError("RNN config: layers, hidden size, batch size and input dimension must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw UsageError("RNN config: dropout must lie in [0, 1)");
  if (!(learning_rate > 0.0)) throw UsageError("RNN config: learning rate must be positive");
}

RNNParameters::RNNParameters(int input_dimension, int hidden_size, int layers)
    : input_dim_(input_dimension), hidden_(hidden_size), layers_(layers) {
  if (input_dimension < 1 || hidden_size < 1 || layers < 1) throw ShapeError("RNN: dimensions must be positive");
  theta_ = Vector::Zero(head_offset() + 2 * hidden_ + 2 + 3 * hidden_ + 3);
}

RNNParameters RNNParameters::zeros(const RNNConfig& config) {
  return RNNParameters(config.input_dimension, config.hidden_size, config.layers);
}

RNNParameters RNNParameters::random(const RNNConfig& config, std::uint64_t seed) {
  RNNParameters p = zeros(config);
  Rng rng(derive_seed(seed, "rnn-init"));
  const double k = 1.0 / std::sqrt(static_cast<double>(config.hidden_size));
  std::uniform_real_distribution<double> u(-k, k);
  for (Eigen::Index i = 0; i < p.theta_.size(); ++i) p.theta_(i) = u(rng);
  return p;
}

Eigen::Index RNNParameters::layer_offset(int layer) const {
  Eigen::Index off = 0;
  for (int l = 0; l < layer; ++l) off += 4 * hidden_ * (layer_input(l) + hidden_ + 1);
  return off;
}

Eigen::Index RNNParameters::head_offset() const { return layer_offset(layers_); }

Eigen::Map<Matrix> RNNParameters::W(int l) {
  return {theta_.data() + layer_offset(l), 4 * hidden_, layer_input(l)};
}
Eigen::Map<Matrix> RNNParameters::U(int l) {
  return {theta_.data() + layer_offset(l) + 4 * hidden_ * layer_input(l), 4 * hidden_, hidden_};
}
Eigen::Map<Vector> RNNParameters::b(int l) {
  return {theta_.data() + layer_offset(l) + 4 * hidden_ * (layer_input(l) + hidden_), 4 * hidden_};
}
Eigen::Map<Matrix> RNNParameters::W_reg() { return {theta_.data() + head_offset(), 2, hidden_}; }
Eigen::Map<Vector> RNNParameters::b_reg() { return {theta_.data() + head_offset() + 2 * hidden_, 2}; }
Eigen::Map<Matrix> RNNParameters::W_cls() { return {theta_.data() + head_offset() + 2 * hidden_ + 2, 3, hidden_}; }
Eigen::Map<Vector> RNNParameters::b_cls() { return {theta_.data() + head_offset() + 5 * hidden_ + 2, 3}; }

Eigen::Map<const Matrix> RNNParameters::W(int l) const {
  return {theta_.data() + layer_offset(l), 4 * hidden_, layer_input(l)};
}
Eigen::Map<const Matrix> RNNParameters::U(int l) const {
  return {theta_.data() + layer_offset(l) + 4 * hidden_ * layer_input(l), 4 * hidden_, hidden_};
}
Eigen::Map<const Vector> RNNParameters::b(int l) const {
  return {theta_.data() + layer_offset(l) + 4 * hidden_ * (layer_input(l) + hidden_), 4 * hidden_};
}
Eigen::Map<const Matrix> RNNParameters::W_reg() const { return {theta_.data() + head_offset(), 2, hidden_}; }
Eigen::Map<const Vector> RNNParameters::b_reg() const { return {theta_.data() + head_offset() + 2 * hidden_, 2}; }
Eigen::Map<const Matrix> RNNParameters::W_cls() const {
  return {theta_.data() + head_offset() + 2 * hidden_ + 2, 3, hidden_};
}
Eigen::Map<const Vector> RNNParameters::b_cls() const { return {theta_.data() + head_offset() + 5 * hidden_ + 2, 3}; }

io::json RNNParameters::to_json() const {
  io::json layers = io::json::array();
  for (int l = 0; l < layers_; ++l) {
    layers.push_back({{"W", io::matrix_to_json(W(l))}, {"U", io::matrix_to_json(U(l))}, {"b", io::matrix_to_json(b(l))}});
  }
  return {{"format", "trajectwin.rnn"},
          {"version", 1},
          {"input_dimension", input_dim_},
          {"hidden_size", hidden_},
          {"layers", std::move(layers)},
          {"gate_order", "input,forget,cell,output"},
          {"W_reg", io::matrix_to_json(W_reg())},
          {"b_reg", io::matrix_to_json(b_reg())},
          {"W_cls", io::matrix_to_json(W_cls())},
          {"b_cls", io::matrix_to_json(b_cls())}};
}

RNNParameters RNNParameters::from_json(const io::json& j) {
  io::require_document(j, "trajectwin.rnn", 1);
  try {
    const auto& layers = j.at("layers");
    RNNParameters p(j.at("input_dimension").get<int>(), j.at("hidden_size").get<int>(),
                    static_cast<int>(layers.size()));
    auto assign = [](auto&& dst, const Matrix& src) {
      if (dst.rows() != src.rows() || dst.cols() != src.cols()) throw SchemaError("RNN document: matrix shape mismatch");
      dst = src;
    };
    for (int l = 0; l < p.layers(); ++l) {
      const auto& layer = layers[static_cast<std::size_t>(l)];
      assign(p.W(l), io::matrix_from_json(layer.at("W")));
      assign(p.U(l), io::matrix_from_json(layer.at("U")));
      assign(p.b(l), io::matrix_from_json(layer.at("b")));
    }
    assign(p.W_reg(), io::matrix_from_json(j.at("W_reg")));
    assign(p.b_reg(), io::matrix_from_json(j.at("b_reg")));
    assign(p.W_cls(), io::matrix_from_json(j.at("W_cls")));
    assign(p.b_cls(), io::matrix_from_json(j.at("b_cls")));
    require_finite(p.flat(), "RNN parameters");
    return p;
  } catch (const io::json::exception& e) {
    throw SchemaError(std::string("RNN document: ") + e.what());
  }
}

Outputs forward(const std::vector<Vector>& history, const RNNParameters& params, Mode mode, double dropout_rate,
                Rng* dropout_rng) {
  return run_forward(history, params, mode, dropout_rate, dropout_rng).out;
}

double loss(const Outputs& out, const Target& target, const std::array<double, 3>& w) {
  const double ea = out.adas13 - target.adas13;
  const double ev = out.ventricles - target.ventricles;
  const double ce = log_sum_exp(out.logits) - out.logits[static_cast<std::size_t>(target.diagnosis)];
  return w[0] * ea * ea + w[1] * ev * ev + w[2] * ce;
}

double loss_and_gradient(const Example& ex, const RNNParameters& p, Vector& grad, const std::array<double, 3>& w,
                         Mode mode, double rate, Rng* rng) {
  if (ex.target.diagnosis < 0 || ex.target.diagnosis > 2) throw ShapeError("loss: diagnosis class out of range");
  const auto cache = run_forward(ex.inputs, p, mode, rate, rng);
  const int H = p.hidden_size();
  const auto T = ex.inputs.size();
  grad = Vector::Zero(p.size());
  RNNParameters g(p.input_dimension(), H, p.layers());

  const double ea = cache.out.adas13 - ex.target.adas13;
  const double ev = cache.out.ventricles - ex.target.ventricles;
  Vector dreg(2);
  dreg << 2.0 * w[0] * ea, 2.0 * w[1] * ev;
  const auto prob = softmax(cache.out.logits);
  Vector dcls(3);
  for (int k = 0; k < 3; ++k)
    dcls(k) = w[2] * (prob[static_cast<std::size_t>(k)] - (k == ex.target.diagnosis ? 1.0 : 0.0));
  g.W_reg() = dreg * cache.h_top.transpose();
  g.b_reg() = dreg;
  g.W_cls() = dcls * cache.h_top.transpose();
  g.b_cls() = dcls;

  // Gradient flowing into each layer's hidden outputs, indexed by time.
  std::vector<Vector> dh_ext(T, Vector::Zero(H));
  dh_ext[T - 1] = p.W_reg().transpose() * dreg + p.W_cls().transpose() * dcls;

  for (int l = p.layers() - 1; l >= 0; --l) {
    const auto& steps = cache.steps[static_cast<std::size_t>(l)];
    const auto W = p.W(l);
    const auto U = p.U(l);
    auto gW = g.W(l);
    auto gU = g.U(l);
    auto gb = g.b(l);
    std::vector<Vector> dx(T);
    Vector dh_next = Vector::Zero(H), dc_next = Vector::Zero(H);
    Vector da(4 * H);
    for (std::size_t t = T; t-- > 0;) {
      const auto& s = steps[t];
      const Vector dh = dh_ext[t] + dh_next;
      const Vector d_o = dh.cwiseProduct(s.tanh_c);
      const Vector dc =
          dh.cwiseProduct(s.o).cwiseProduct((1.0 - s.tanh_c.array().square()).matrix()) + dc_next;
      da.segment(0, H) = dc.cwiseProduct(s.g).cwiseProduct(s.i.cwiseProduct((1.0 - s.i.array()).matrix()));
      da.segment(H, H) = dc.cwiseProduct(s.c_prev).cwiseProduct(s.f.cwiseProduct((1.0 - s.f.array()).matrix()));
      da.segment(2 * H, H) = dc.cwiseProduct(s.i).cwiseProduct((1.0 - s.g.array().square()).matrix());
      da.segment(3 * H, H) = d_o.cwiseProduct(s.o.cwiseProduct((1.0 - s.o.array()).matrix()));
      gW.noalias() += da * s.x.transpose();
      gU.noalias() += da * s.h_prev.transpose();
      gb += da;
      dc_next = dc.cwiseProduct(s.f);
      dh_next = U.transpose() * da;
      if (l > 0) dx[t] = W.transpose() * da;
    }
    if (l > 0) {
      const auto& masks = cache.masks[static_cast<std::size_t>(l)];
      for (std::size_t t = 0; t < T; ++t) dh_ext[t] = masks.empty() ? dx[t] : Vector(dx[t].cwiseProduct(masks[t]));
    }
  }
  grad = g.flat();
  return loss(cache.out, ex.target, w);
}

double batch_loss_and_gradient(const std::vector<const Example*>& batch, const RNNParameters& params, Vector& gradient,
                               const std::array<double, 3>& weights, Mode mode, double rate, Rng* rng) {
  gradient = Vector::Zero(params.size());
  if (batch.empty()) return 0.0;
  Vector g;
  double total = 0.0;
  for (const auto* ex : batch) {
    total += loss_and_gradient(*ex, params, g, weights, mode, rate, rng);
    gradient += g;
  }
  const double n = static_cast<double>(batch.size());
  gradient /= n;
  return total / n;
}

double mean_loss(const std::vector<Example>& examples, const RNNParameters& params, const std::array<double, 3>& w) {
  if (examples.empty()) return std::nan("");
  double total = 0.0;
  for (const auto& ex : examples) total += loss(forward(ex.inputs, params), ex.target, w);
  return total / static_cast<double>(examples.size());
}

TrainResult train(const std::vector<Example>& training, const std::vector<Example>& validation,
                  const RNNConfig& config) {
  config.validate();
  if (training.empty()) throw DataError("train: no training pairs");
  for (const auto& ex : training)
    for (const auto& x : ex.inputs)
      if (x.size() != config.input_dimension) throw ShapeError("train: training pairs do not share the feature width");

  TrainResult res{RNNParameters::random(config, config.seed), {}};
  auto& p = res.params;
  Rng shuffle_rng(derive_seed(config.seed, "rnn-shuffle"));
  Rng dropout_rng(derive_seed(config.seed, "rnn-dropout"));
  Vector m1 = Vector::Zero(p.size()), m2 = Vector::Zero(p.size()), grad;
  std::vector<std::size_t> order(training.size());
  std::iota(order.begin(), order.end(), 0);
  long long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<const Example*> batch;
      for (auto k = start; k < end; ++k) batch.push_back(&training[order[k]]);
      const double l = batch_loss_and_gradient(batch, p, grad, config.loss_weights, Mode::Train,
                                               config.dropout_rate, &dropout_rng);
      if (!std::isfinite(l) || !grad.allFinite())
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batches + 1));
      ++step;
      m1 = config.adam_beta1 * m1 + (1.0 - config.adam_beta1) * grad;
      m2 = config.adam_beta2 * m2 + (1.0 - config.adam_beta2) * grad.cwiseProduct(grad);
      const double c1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(step));
      p.flat().array() -= config.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + config.adam_epsilon);
      epoch_loss += l;
      ++batches;
    }
    res.trace.train_loss.push_back(epoch_loss / static_cast<double>(batches));
    res.trace.validation_loss.push_back(mean_loss(validation, p, config.loss_weights));
  }
  return res;
}

double gradient_check(const RNNParameters& params, const Example& example, const GradientCheckOptions& options,
                      const std::array<double, 3>& weights) {
  Vector analytic;
  loss_and_gradient(example, params, analytic, weights);
  const Eigen::Index first = options.heads_only ? params.head_offset() : 0;
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(params.size() - first));
  std::iota(coords.begin(), coords.end(), first);
  Rng rng(derive_seed(options.seed, "gradient-check"));
  std::shuffle(coords.begin(), coords.end(), rng);
  if (coords.size() > options.coordinates) coords.resize(options.coordinates);

  RNNParameters probe = params;
  double worst = 0.0;
  for (auto k : coords) {
    const double orig = probe.flat()(k);
    probe.flat()(k) = orig + options.step;
    const double up = loss(forward(example.inputs, probe), example.target, weights);
    probe.flat()(k) = orig - options.step;
    const double down = loss(forward(example.inputs, probe), example.target, weights);
    probe.flat()(k) = orig;
    const double numeric = (up - down) / (2.0 * options.step);
    const double denom = std::max({std::abs(analytic(k)), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic(k) - numeric) / denom);
  }
  return worst;
}

}  // namespace trajectwin::rnn
