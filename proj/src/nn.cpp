#include "pmode/nn.hpp"

#include <cmath>
#include <numbers>

namespace pmode::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

void im2col(const Tensor& x, int k, int stride, int pad, int ho, int wo, RowMat& col) {
  col.resize(std::size_t(x.c) * k * k, std::size_t(ho) * wo);
  for (int c = 0; c < x.c; ++c) {
    const float* src = x.channel(c);
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        float* dst = col.row((c * k + ki) * k + kj).data();
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          float* drow = dst + oi * wo;
          if (ii < 0 || ii >= x.h) {
            std::fill(drow, drow + wo, 0.0f);
            continue;
          }
          const float* srow = src + ii * x.w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            drow[oj] = (jj >= 0 && jj < x.w) ? srow[jj] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const RowMat& col, int c_in, int h, int w, int k, int stride, int pad, int ho, int wo, Tensor& dx) {
  dx = Tensor(c_in, h, w);
  for (int c = 0; c < c_in; ++c) {
    float* dst = dx.channel(c);
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const float* src = col.row((c * k + ki) * k + kj).data();
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          float* drow = dst + ii * w;
          const float* srow = src + oi * wo;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) drow[jj] += srow[oj];
          }
        }
      }
    }
  }
}

}  // namespace

void Tensor::add(const Tensor& o) {
  if (!same_shape(o)) throw ShapeError("tensor add: shape mismatch");
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
}

bool Tensor::all_finite() const {
  for (float f : v) {
    if (!std::isfinite(f)) return false;
  }
  return true;
}

Conv2d::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad)
    : weight(name + ".weight", {out_channels, in_channels * kernel * kernel}),
      bias(name + ".bias", {out_channels}),
      in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(pad < 0 ? kernel / 2 : pad) {}

void Conv2d::init(Rng& rng, double gain) {
  const double fan_in = static_cast<double>(in_) * k_ * k_;
  std::normal_distribution<double> n(0.0, std::sqrt(gain / fan_in));
  for (auto& w : weight.value) w = static_cast<float>(n(rng));
  std::fill(bias.value.begin(), bias.value.end(), 0.0f);
}

Tensor Conv2d::forward(const Tensor& x, ConvCache* cache) const {
  if (x.c != in_) throw ShapeError("conv " + weight.name + ": expected " + std::to_string(in_) + " channels");
  const int ho = output_size(x.h), wo = output_size(x.w);
  ConvCache local;
  ConvCache& cc = cache ? *cache : local;
  cc.in_h = x.h;
  cc.in_w = x.w;
  if (k_ == 1 && stride_ == 1 && pad_ == 0) {
    cc.col = CMapRow(x.v.data(), x.c, x.plane());
  } else {
    im2col(x, k_, stride_, pad_, ho, wo, cc.col);
  }
  Tensor y(out_, ho, wo);
  MapRow Y(y.v.data(), out_, std::size_t(ho) * wo);
  CMapRow W(weight.value.data(), out_, std::size_t(in_) * k_ * k_);
  Y.noalias() = W * cc.col;
  for (int o = 0; o < out_; ++o) Y.row(o).array() += bias.value[o];
  return y;
}

Tensor Conv2d::backward(const Tensor& dy, const ConvCache& cache, bool need_input_grad) {
  const int ho = dy.h, wo = dy.w;
  CMapRow dY(dy.v.data(), out_, std::size_t(ho) * wo);
  MapRow dW(weight.grad.data(), out_, std::size_t(in_) * k_ * k_);
  dW.noalias() += dY * cache.col.transpose();
  for (int o = 0; o < out_; ++o) bias.grad[o] += dY.row(o).sum();
  Tensor dx;
  if (!need_input_grad) return dx;
  CMapRow W(weight.value.data(), out_, std::size_t(in_) * k_ * k_);
  RowMat dcol = W.transpose() * dY;
  if (k_ == 1 && stride_ == 1 && pad_ == 0) {
    dx = Tensor(in_, cache.in_h, cache.in_w);
    MapRow(dx.v.data(), in_, dx.plane()) = dcol;
  } else {
    col2im(dcol, in_, cache.in_h, cache.in_w, k_, stride_, pad_, ho, wo, dx);
  }
  return dx;
}

void relu_inplace(Tensor& x) {
  for (auto& f : x.v) f = f > 0.0f ? f : 0.0f;
}

void relu_backward_inplace(Tensor& dy, const Tensor& y) {
  for (std::size_t i = 0; i < dy.v.size(); ++i) {
    if (!(y.v[i] > 0.0f)) dy.v[i] = 0.0f;
  }
}

std::vector<Bilinear::Tap> Bilinear::taps(int in, int out) {
  std::vector<Tap> t(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 >= in - 1) {
      t[o] = {in - 1, in - 1, 1.0f, 0.0f};
      continue;
    }
    const float w1 = static_cast<float>(src - i0);
    t[o] = {i0, i0 + 1, 1.0f - w1, w1};
  }
  return t;
}

Bilinear::Bilinear(int in_h, int in_w, int out_h, int out_w)
    : in_h_(in_h), in_w_(in_w), out_h_(out_h), out_w_(out_w), ty_(taps(in_h, out_h)), tx_(taps(in_w, out_w)) {}

void Bilinear::forward_plane(const float* in, float* out) const {
  for (int i = 0; i < out_h_; ++i) {
    const Tap& a = ty_[i];
    const float* r0 = in + a.i0 * in_w_;
    const float* r1 = in + a.i1 * in_w_;
    for (int j = 0; j < out_w_; ++j) {
      const Tap& b = tx_[j];
      out[i * out_w_ + j] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
    }
  }
}

void Bilinear::backward_plane(const float* dout, float* din) const {
  for (int i = 0; i < out_h_; ++i) {
    const Tap& a = ty_[i];
    float* r0 = din + a.i0 * in_w_;
    float* r1 = din + a.i1 * in_w_;
    for (int j = 0; j < out_w_; ++j) {
      const Tap& b = tx_[j];
      const float g = dout[i * out_w_ + j];
      r0[b.i0] += a.w0 * b.w0 * g;
      r0[b.i1] += a.w0 * b.w1 * g;
      r1[b.i0] += a.w1 * b.w0 * g;
      r1[b.i1] += a.w1 * b.w1 * g;
    }
  }
}

Tensor Bilinear::forward(const Tensor& x) const {
  if (x.h != in_h_ || x.w != in_w_) throw ShapeError("bilinear: input size mismatch");
  Tensor y(x.c, out_h_, out_w_);
  for (int k = 0; k < x.c; ++k) forward_plane(x.channel(k), y.channel(k));
  return y;
}

Tensor Bilinear::backward(const Tensor& dy) const {
  Tensor dx(dy.c, in_h_, in_w_);
  for (int k = 0; k < dy.c; ++k) backward_plane(dy.channel(k), dx.channel(k));
  return dx;
}

template <typename T>
Mlp<T>::Mlp(const std::string& name, std::vector<int> widths) : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw PreconditionError("mlp needs at least one layer");
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    weights.emplace_back(name + ".fc" + std::to_string(l) + ".weight", std::vector<int>{widths_[l + 1], widths_[l]});
    biases.emplace_back(name + ".fc" + std::to_string(l) + ".bias", std::vector<int>{widths_[l + 1]});
  }
}

template <typename T>
void Mlp<T>::init(Rng& rng) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const bool last = l + 1 == weights.size();
    std::normal_distribution<double> n(0.0, std::sqrt((last ? 1.0 : 2.0) / widths_[l]));
    for (auto& w : weights[l].value) w = static_cast<T>(n(rng));
    std::fill(biases[l].value.begin(), biases[l].value.end(), T(0));
  }
}

template <typename T>
typename Mlp<T>::Vec Mlp<T>::forward(const Vec& x, Cache* cache) const {
  if (x.size() != widths_.front()) {
    throw ShapeError("mlp: expected input length " + std::to_string(widths_.front()) + ", got " +
                     std::to_string(x.size()));
  }
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (cache) cache->inputs.clear();
  Vec h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (cache) cache->inputs.push_back(h);
    Eigen::Map<const Mat> W(weights[l].value.data(), widths_[l + 1], widths_[l]);
    Eigen::Map<const Vec> b(biases[l].value.data(), widths_[l + 1]);
    Vec z = W * h + b;
    if (l + 1 < weights.size()) z = z.cwiseMax(T(0));
    h = std::move(z);
  }
  return h;
}

template <typename T>
typename Mlp<T>::Vec Mlp<T>::backward(const Vec& dy, const Cache& cache) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Vec g = dy;
  for (int l = static_cast<int>(weights.size()) - 1; l >= 0; --l) {
    const Vec& in = cache.inputs[l];
    Eigen::Map<Mat> dW(weights[l].grad.data(), widths_[l + 1], widths_[l]);
    Eigen::Map<Vec> db(biases[l].grad.data(), widths_[l + 1]);
    dW.noalias() += g * in.transpose();
    db += g;
    Eigen::Map<const Mat> W(weights[l].value.data(), widths_[l + 1], widths_[l]);
    Vec dx = W.transpose() * g;
    if (l > 0) dx = (in.array() > T(0)).select(dx, T(0));
    g = std::move(dx);
  }
  return g;
}

template <typename T>
std::vector<ParameterT<T>*> Mlp<T>::parameters() {
  std::vector<ParameterT<T>*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

template class Mlp<float>;
template class Mlp<double>;

double Optimizer::step(const std::vector<Parameter*>& params, double learning_rate) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0f);
      if (cfg_.kind == "adam") v_[i].assign(params[i]->size(), 0.0f);
    }
  }
  double sq = 0.0;
  for (const auto* p : params) {
    for (float g : p->grad) sq += double(g) * g;
  }
  const double norm = std::sqrt(sq);
  const float clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? static_cast<float>(cfg_.clip_norm / norm) : 1.0f;
  ++steps_;
  const float lr = static_cast<float>(learning_rate);
  const float wd = static_cast<float>(cfg_.weight_decay);
  if (cfg_.kind == "sgd") {
    const float mu = static_cast<float>(cfg_.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto& m = m_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const float g = clip * p.grad[j] + wd * p.value[j];
        m[j] = mu * m[j] + g;
        p.value[j] -= lr * m[j];
      }
    }
  } else if (cfg_.kind == "adam") {
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const float c1 = static_cast<float>(1.0 - std::pow(b1, double(steps_)));
    const float c2 = static_cast<float>(1.0 - std::pow(b2, double(steps_)));
    const float eps = static_cast<float>(cfg_.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const float g = clip * p.grad[j] + wd * p.value[j];
        m[j] = float(b1) * m[j] + float(1.0 - b1) * g;
        v[j] = float(b2) * v[j] + float(1.0 - b2) * g * g;
        p.value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
  } else {
    throw PreconditionError("unknown optimizer '" + cfg_.kind + "'");
  }
  return norm;
}

double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace pmode::nn
