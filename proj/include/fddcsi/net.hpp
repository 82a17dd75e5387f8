#pragma once

// Fully-connected regression network with hand-written reverse-mode
// gradients and a forward-over-reverse pass for Hessian-vector products.
//
// Layer l maps a_{l-1} -> a_l = r_l(W_l a_{l-1} + b_l). Hidden layers use
// ReLU (derivative 0 at 0), the output layer is linear. The loss over a
// batch of V samples is (1/V) sum_v ||yhat_v - y_v||^2.

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fddcsi/rng.hpp"

namespace fddcsi {

enum class Activation { Relu, Linear };

struct LayerSpec {
  std::vector<int> sizes;               // n_0 .. n_{L-1}
  std::vector<Activation> activations;  // one per weight layer (L-1 entries)

  /// ReLU hidden layers, linear output.
  static LayerSpec mlp(int io_width, const std::vector<int>& hidden);
  static LayerSpec mlp(int in_width, const std::vector<int>& hidden, int out_width);

  std::size_t weight_layers() const { return activations.size(); }
  int input_width() const { return sizes.front(); }
  int output_width() const { return sizes.back(); }
  void validate() const;
  bool operator==(const LayerSpec&) const = default;
};

struct Layer {
  Eigen::MatrixXd W;  // n_l x n_{l-1}
  Eigen::VectorXd b;  // n_l
};

/// Network parameters; the same shape doubles as gradient, direction and
/// optimizer-moment storage.
struct NetParams {
  std::vector<Layer> layers;

  std::size_t size() const;  // total number of scalars
  NetParams zeros_like() const;
  bool same_shape(const NetParams& other) const;

  /// Row-major weights of every layer, then every bias vector.
  Eigen::VectorXd flatten() const;
  void assign_flat(const Eigen::VectorXd& flat);
  double& at(std::size_t flat_index);
  double at(std::size_t flat_index) const;

  NetParams& operator+=(const NetParams& rhs);
  NetParams& operator-=(const NetParams& rhs);
  NetParams& operator*=(double s);
  /// this += s * x
  NetParams& axpy(double s, const NetParams& x);

  bool all_finite() const;
  bool operator==(const NetParams& rhs) const;
};

NetParams operator+(NetParams lhs, const NetParams& rhs);
NetParams operator-(NetParams lhs, const NetParams& rhs);
NetParams operator*(double s, NetParams p);
double dot(const NetParams& a, const NetParams& b);
double norm(const NetParams& p);

/// Throws std::invalid_argument when shapes differ.
void require_same_shape(const NetParams& a, const NetParams& b, const char* what);

/// Shapes implied by `spec`, all zero.
NetParams zero_params(const LayerSpec& spec);
LayerSpec spec_of(const NetParams& params, const std::vector<Activation>& activations);

enum class InitFan { FanIn, FanOut };

/// Weights ~ N(0, 1/n) truncated at +-2 sigma (by rejection), biases zero.
/// n is the layer's fan-in by default, or its own width with InitFan::FanOut.
NetParams init_params(const LayerSpec& spec, Rng& rng, InitFan fan = InitFan::FanIn);

/// Samples are columns.
struct Batch {
  Eigen::MatrixXd xs;
  Eigen::MatrixXd ys;

  Eigen::Index count() const { return xs.cols(); }
};

/// Cached activations of one forward pass. a[0] is the input batch;
/// z[l] and a[l+1] belong to weight layer l.
struct GradTape {
  std::vector<Eigen::MatrixXd> a;
  std::vector<Eigen::MatrixXd> z;

  const Eigen::MatrixXd& output() const { return a.back(); }
};

class Network {
 public:
  explicit Network(LayerSpec spec);

  const LayerSpec& spec() const { return spec_; }

  GradTape forward(const NetParams& params, const Eigen::MatrixXd& xs) const;
  Eigen::VectorXd predict(const NetParams& params, const Eigen::VectorXd& x) const;
  Eigen::MatrixXd predict(const NetParams& params, const Eigen::MatrixXd& xs) const;

  double mse_loss(const NetParams& params, const Batch& batch) const;

  struct Gradient {
    double loss = 0.0;
    NetParams grad;
  };
  Gradient backward(const NetParams& params, const Batch& batch) const;

  struct Directional {
    double loss = 0.0;
    NetParams grad;  // gradient at params
    NetParams hvp;   // d/de grad(params + e * direction) at e = 0
  };
  Directional forward_param_jvp(const NetParams& params, const NetParams& direction, const Batch& batch) const;

  void check_params(const NetParams& params) const;

 private:
  void check_batch(const Batch& batch) const;
  bool relu(std::size_t layer) const { return spec_.activations[layer] == Activation::Relu; }

  LayerSpec spec_;
};

}  // namespace fddcsi
