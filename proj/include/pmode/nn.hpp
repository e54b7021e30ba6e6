#pragma once

#include <cstdint>
#include <new>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pmode/common.hpp"

// Minimal CPU network building blocks. Every layer has an explicit forward that
// optionally fills a cache, and a backward that consumes it and accumulates into
// the parameter gradients.
namespace pmode::nn {

using Rng = std::mt19937_64;

/// 64-byte aligned storage. Vectorized kernels split off unaligned heads, so an
/// unaligned buffer would make float sums depend on the allocation address.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{64}); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// C x H x W float tensor, channel-major.
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  Buffer<float> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_, float fill = 0.0f) : c(c_), h(h_), w(w_), v(std::size_t(c_) * h_ * w_, fill) {}

  std::size_t size() const { return v.size(); }
  int plane() const { return h * w; }
  float* channel(int k) { return v.data() + std::size_t(k) * plane(); }
  const float* channel(int k) const { return v.data() + std::size_t(k) * plane(); }
  float& at(int k, int i, int j) { return v[(std::size_t(k) * h + i) * w + j]; }
  float at(int k, int i, int j) const { return v[(std::size_t(k) * h + i) * w + j]; }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
  void add(const Tensor& o);
  bool all_finite() const;
};

template <typename T>
struct ParameterT {
  std::string name;
  std::vector<int> shape;
  Buffer<T> value;
  Buffer<T> grad;

  ParameterT() = default;
  ParameterT(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

using Parameter = ParameterT<float>;

struct ConvCache {
  // im2col matrix (in*k*k) x (Ho*Wo), or the raw input for 1x1 stride-1 convs.
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> col;
  int in_h = 0;
  int in_w = 0;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride = 1, int pad = -1);

  /// He-normal weights, zero bias.
  void init(Rng& rng, double gain = 2.0);
  Tensor forward(const Tensor& x, ConvCache* cache = nullptr) const;
  /// Accumulates weight/bias gradients. Returns dL/dx when `need_input_grad`.
  Tensor backward(const Tensor& dy, const ConvCache& cache, bool need_input_grad = true);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int output_size(int input) const { return (input + 2 * pad_ - k_) / stride_ + 1; }
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }

  Parameter weight;  // out x (in * k * k)
  Parameter bias;    // out

 private:
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
};

void relu_inplace(Tensor& x);
/// dy *= (y > 0), where y is the ReLU output.
void relu_backward_inplace(Tensor& dy, const Tensor& y);

/// Bilinear resize with half-pixel centers (matches cv::resize INTER_LINEAR when
/// upsampling). The backward pass scatters with the same weights.
class Bilinear {
 public:
  Bilinear() = default;
  Bilinear(int in_h, int in_w, int out_h, int out_w);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& dy) const;
  void forward_plane(const float* in, float* out) const;
  void backward_plane(const float* dout, float* din) const;
  int out_h() const { return out_h_; }
  int out_w() const { return out_w_; }

 private:
  struct Tap {
    int i0, i1;
    float w0, w1;
  };
  static std::vector<Tap> taps(int in, int out);
  int in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
  std::vector<Tap> ty_, tx_;
};

/// Fully connected ReLU network. The last layer is linear.
template <typename T>
class Mlp {
 public:
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  struct Cache {
    std::vector<Vec> inputs;  // input to each layer, post-activation
  };

  Mlp() = default;
  Mlp(const std::string& name, std::vector<int> widths);

  void init(Rng& rng);
  Vec forward(const Vec& x, Cache* cache = nullptr) const;
  /// Accumulates gradients; returns dL/dx.
  Vec backward(const Vec& dy, const Cache& cache);

  const std::vector<int>& widths() const { return widths_; }
  int layers() const { return static_cast<int>(widths_.size()) - 1; }
  std::vector<ParameterT<T>*> parameters();

  std::vector<ParameterT<T>> weights;  // layer l: widths[l+1] x widths[l], row-major
  std::vector<ParameterT<T>> biases;

 private:
  std::vector<int> widths_;
};

extern template class Mlp<float>;
extern template class Mlp<double>;

struct OptimizerConfig {
  std::string kind = "sgd";  // "sgd" or "adam"
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
};

class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {}

  /// Applies one update at `learning_rate` and returns the pre-clip gradient norm.
  double step(const std::vector<Parameter*>& params, double learning_rate);
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long steps_ = 0;
};

/// Cosine decay from `base` to zero over `total` steps.
double cosine_lr(double base, long step, long total);

}  // namespace pmode::nn
