#include "fddcsi/net.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace fddcsi {

namespace {

std::string shape_str(Eigen::Index r, Eigen::Index c) { return std::to_string(r) + "x" + std::to_string(c); }

Eigen::MatrixXd relu_mask(const Eigen::MatrixXd& z) { return (z.array() > 0.0).cast<double>().matrix(); }

}  // namespace

LayerSpec LayerSpec::mlp(int io_width, const std::vector<int>& hidden) { return mlp(io_width, hidden, io_width); }

LayerSpec LayerSpec::mlp(int in_width, const std::vector<int>& hidden, int out_width) {
  LayerSpec spec;
  spec.sizes.push_back(in_width);
  for (int h : hidden) {
    spec.sizes.push_back(h);
    spec.activations.push_back(Activation::Relu);
  }
  spec.sizes.push_back(out_width);
  spec.activations.push_back(Activation::Linear);
  return spec;
}

void LayerSpec::validate() const {
  if (sizes.size() < 2) throw std::invalid_argument("LayerSpec: need at least input and output widths");
  if (activations.size() + 1 != sizes.size())
    throw std::invalid_argument("LayerSpec: expected " + std::to_string(sizes.size() - 1) + " activations, got " +
                                std::to_string(activations.size()));
  for (int n : sizes)
    if (n < 1) throw std::invalid_argument("LayerSpec: layer widths must be positive");
}

std::size_t NetParams::size() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.W.size() + l.b.size());
  return n;
}

NetParams NetParams::zeros_like() const {
  NetParams out;
  out.layers.reserve(layers.size());
  for (const auto& l : layers)
    out.layers.push_back({Eigen::MatrixXd::Zero(l.W.rows(), l.W.cols()), Eigen::VectorXd::Zero(l.b.size())});
  return out;
}

bool NetParams::same_shape(const NetParams& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    const auto& b = other.layers[i];
    if (a.W.rows() != b.W.rows() || a.W.cols() != b.W.cols() || a.b.size() != b.b.size()) return false;
  }
  return true;
}

Eigen::VectorXd NetParams::flatten() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(size()));
  Eigen::Index k = 0;
  for (const auto& l : layers)
    for (Eigen::Index r = 0; r < l.W.rows(); ++r)
      for (Eigen::Index c = 0; c < l.W.cols(); ++c) flat[k++] = l.W(r, c);
  for (const auto& l : layers)
    for (Eigen::Index r = 0; r < l.b.size(); ++r) flat[k++] = l.b[r];
  return flat;
}

void NetParams::assign_flat(const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != size())
    throw std::invalid_argument("assign_flat: expected " + std::to_string(size()) + " values, got " +
                                std::to_string(flat.size()));
  Eigen::Index k = 0;
  for (auto& l : layers)
    for (Eigen::Index r = 0; r < l.W.rows(); ++r)
      for (Eigen::Index c = 0; c < l.W.cols(); ++c) l.W(r, c) = flat[k++];
  for (auto& l : layers)
    for (Eigen::Index r = 0; r < l.b.size(); ++r) l.b[r] = flat[k++];
}

double& NetParams::at(std::size_t flat_index) {
  std::size_t k = flat_index;
  for (auto& l : layers) {
    const auto n = static_cast<std::size_t>(l.W.size());
    if (k < n) {
      const auto cols = static_cast<std::size_t>(l.W.cols());
      return l.W(static_cast<Eigen::Index>(k / cols), static_cast<Eigen::Index>(k % cols));
    }
    k -= n;
  }
  for (auto& l : layers) {
    const auto n = static_cast<std::size_t>(l.b.size());
    if (k < n) return l.b[static_cast<Eigen::Index>(k)];
    k -= n;
  }
  throw std::out_of_range("NetParams::at: index " + std::to_string(flat_index) + " out of range");
}

double NetParams::at(std::size_t flat_index) const { return const_cast<NetParams*>(this)->at(flat_index); }

void require_same_shape(const NetParams& a, const NetParams& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": parameter shape mismatch");
}

NetParams& NetParams::operator+=(const NetParams& rhs) { return axpy(1.0, rhs); }

NetParams& NetParams::operator-=(const NetParams& rhs) { return axpy(-1.0, rhs); }

NetParams& NetParams::operator*=(double s) {
  for (auto& l : layers) {
    l.W *= s;
    l.b *= s;
  }
  return *this;
}

NetParams& NetParams::axpy(double s, const NetParams& x) {
  require_same_shape(*this, x, "axpy");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].W += s * x.layers[i].W;
    layers[i].b += s * x.layers[i].b;
  }
  return *this;
}

bool NetParams::all_finite() const {
  for (const auto& l : layers)
    if (!l.W.allFinite() || !l.b.allFinite()) return false;
  return true;
}

bool NetParams::operator==(const NetParams& rhs) const {
  if (!same_shape(rhs)) return false;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].W != rhs.layers[i].W || layers[i].b != rhs.layers[i].b) return false;
  return true;
}

NetParams operator+(NetParams lhs, const NetParams& rhs) { return lhs += rhs; }
NetParams operator-(NetParams lhs, const NetParams& rhs) { return lhs -= rhs; }
NetParams operator*(double s, NetParams p) { return p *= s; }

double dot(const NetParams& a, const NetParams& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    acc += (a.layers[i].W.array() * b.layers[i].W.array()).sum();
    acc += a.layers[i].b.dot(b.layers[i].b);
  }
  return acc;
}

double norm(const NetParams& p) { return std::sqrt(dot(p, p)); }

NetParams zero_params(const LayerSpec& spec) {
  spec.validate();
  NetParams p;
  for (std::size_t l = 0; l + 1 < spec.sizes.size(); ++l)
    p.layers.push_back({Eigen::MatrixXd::Zero(spec.sizes[l + 1], spec.sizes[l]), Eigen::VectorXd::Zero(spec.sizes[l + 1])});
  return p;
}

LayerSpec spec_of(const NetParams& params, const std::vector<Activation>& activations) {
  LayerSpec spec;
  if (params.layers.empty()) throw std::invalid_argument("spec_of: empty parameters");
  spec.sizes.push_back(static_cast<int>(params.layers.front().W.cols()));
  for (const auto& l : params.layers) spec.sizes.push_back(static_cast<int>(l.W.rows()));
  spec.activations = activations;
  spec.validate();
  return spec;
}

NetParams init_params(const LayerSpec& spec, Rng& rng, InitFan fan) {
  NetParams p = zero_params(spec);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& W = p.layers[l].W;
    const double n = fan == InitFan::FanIn ? static_cast<double>(W.cols()) : static_cast<double>(W.rows());
    const double sigma = 1.0 / std::sqrt(n);
    // Row-major fill so the draw order matches the flat layout.
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      for (Eigen::Index c = 0; c < W.cols(); ++c) {
        double g = 0.0;
        do {
          g = standard_normal(rng);
        } while (std::abs(g) > 2.0);
        W(r, c) = sigma * g;
      }
    }
  }
  return p;
}

Network::Network(LayerSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

void Network::check_params(const NetParams& params) const {
  if (params.layers.size() != spec_.weight_layers())
    throw std::invalid_argument("network: expected " + std::to_string(spec_.weight_layers()) + " layers, got " +
                                std::to_string(params.layers.size()));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    if (layer.W.rows() != spec_.sizes[l + 1] || layer.W.cols() != spec_.sizes[l] || layer.b.size() != spec_.sizes[l + 1])
      throw std::invalid_argument("network: layer " + std::to_string(l) + " has W " +
                                  shape_str(layer.W.rows(), layer.W.cols()) + ", expected " +
                                  shape_str(spec_.sizes[l + 1], spec_.sizes[l]));
  }
}

void Network::check_batch(const Batch& batch) const {
  if (batch.xs.cols() == 0) throw std::invalid_argument("network: empty batch");
  if (batch.xs.cols() != batch.ys.cols())
    throw std::invalid_argument("network: batch has " + std::to_string(batch.xs.cols()) + " inputs but " +
                                std::to_string(batch.ys.cols()) + " labels");
  if (batch.xs.rows() != spec_.input_width() || batch.ys.rows() != spec_.output_width())
    throw std::invalid_argument("network: batch vectors have length " + std::to_string(batch.xs.rows()) + "/" +
                                std::to_string(batch.ys.rows()) + ", expected " +
                                std::to_string(spec_.input_width()) + "/" + std::to_string(spec_.output_width()));
}

GradTape Network::forward(const NetParams& params, const Eigen::MatrixXd& xs) const {
  check_params(params);
  if (xs.rows() != spec_.input_width())
    throw std::invalid_argument("forward: input length " + std::to_string(xs.rows()) + ", expected " +
                                std::to_string(spec_.input_width()));
  GradTape tape;
  const std::size_t L = params.layers.size();
  tape.a.reserve(L + 1);
  tape.z.reserve(L);
  tape.a.push_back(xs);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& layer = params.layers[l];
    Eigen::MatrixXd z = layer.W * tape.a.back();
    z.colwise() += layer.b;
    tape.a.push_back(relu(l) ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z);
    tape.z.push_back(std::move(z));
  }
  return tape;
}

Eigen::VectorXd Network::predict(const NetParams& params, const Eigen::VectorXd& x) const {
  return forward(params, Eigen::MatrixXd(x)).output().col(0);
}

Eigen::MatrixXd Network::predict(const NetParams& params, const Eigen::MatrixXd& xs) const {
  return forward(params, xs).output();
}

double Network::mse_loss(const NetParams& params, const Batch& batch) const {
  check_batch(batch);
  const GradTape tape = forward(params, batch.xs);
  return (tape.output() - batch.ys).squaredNorm() / static_cast<double>(batch.count());
}

Network::Gradient Network::backward(const NetParams& params, const Batch& batch) const {
  check_batch(batch);
  const GradTape tape = forward(params, batch.xs);
  const double V = static_cast<double>(batch.count());
  const Eigen::MatrixXd residual = tape.output() - batch.ys;

  Gradient out;
  out.loss = residual.squaredNorm() / V;
  out.grad = params.zeros_like();

  Eigen::MatrixXd delta = (2.0 / V) * residual;  // dLoss/da_l
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    if (relu(l)) delta.array() *= (tape.z[l].array() > 0.0).cast<double>();
    out.grad.layers[l].W.noalias() = delta * tape.a[l].transpose();
    out.grad.layers[l].b = delta.rowwise().sum();
    if (l > 0) delta = params.layers[l].W.transpose() * delta;
  }
  return out;
}

Network::Directional Network::forward_param_jvp(const NetParams& params, const NetParams& direction,
                                                const Batch& batch) const {
  check_batch(batch);
  check_params(params);
  require_same_shape(params, direction, "forward_param_jvp");
  const GradTape tape = forward(params, batch.xs);
  const std::size_t L = params.layers.size();
  const double V = static_cast<double>(batch.count());

  std::vector<Eigen::MatrixXd> masks(L);
  for (std::size_t l = 0; l < L; ++l)
    if (relu(l)) masks[l] = relu_mask(tape.z[l]);

  // Tangent of the activations along `direction`; the input has none.
  std::vector<Eigen::MatrixXd> a_dot(L + 1);
  a_dot[0] = Eigen::MatrixXd::Zero(batch.xs.rows(), batch.xs.cols());
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::MatrixXd z_dot = direction.layers[l].W * tape.a[l];
    z_dot.noalias() += params.layers[l].W * a_dot[l];
    z_dot.colwise() += direction.layers[l].b;
    if (relu(l)) z_dot.array() *= masks[l].array();
    a_dot[l + 1] = std::move(z_dot);
  }

  const Eigen::MatrixXd residual = tape.output() - batch.ys;
  Directional out;
  out.loss = residual.squaredNorm() / V;
  out.grad = params.zeros_like();
  out.hvp = params.zeros_like();

  Eigen::MatrixXd delta = (2.0 / V) * residual;
  Eigen::MatrixXd delta_dot = (2.0 / V) * a_dot[L];
  for (std::size_t l = L; l-- > 0;) {
    if (relu(l)) {
      delta.array() *= masks[l].array();
      delta_dot.array() *= masks[l].array();
    }
    out.grad.layers[l].W.noalias() = delta * tape.a[l].transpose();
    out.grad.layers[l].b = delta.rowwise().sum();
    out.hvp.layers[l].W.noalias() = delta_dot * tape.a[l].transpose();
    out.hvp.layers[l].W.noalias() += delta * a_dot[l].transpose();
    out.hvp.layers[l].b = delta_dot.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd next_dot = direction.layers[l].W.transpose() * delta;
      next_dot.noalias() += params.layers[l].W.transpose() * delta_dot;
      delta = params.layers[l].W.transpose() * delta;
      delta_dot = std::move(next_dot);
    }
  }
  return out;
}

}  // namespace fddcsi
