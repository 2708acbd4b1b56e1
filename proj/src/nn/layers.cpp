#include "advnorm/nn/layers.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <random>

#include "advnorm/random.hpp"

namespace advnorm::nn {

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require_rank5(const std::vector<int>& s, const char* who) {
  if (s.size() != 5) throw std::invalid_argument(std::string(who) + " expects [N, C, D, H, W], got " + shape_string(s));
}

struct ConvGeom {
  int c, d, h, w;     // input
  int od, oh, ow;     // output
  int k, s, p;
  std::size_t out_spatial() const { return static_cast<std::size_t>(od) * oh * ow; }
  std::size_t in_spatial() const { return static_cast<std::size_t>(d) * h * w; }
  std::size_t rows() const { return static_cast<std::size_t>(c) * k * k * k; }
};

// col[(ci, kd, kh, kw), (od, oh, ow)]
template <typename T>
void im2col(const T* in, const ConvGeom& g, T* col) {
  const std::size_t P = g.out_spatial();
  std::size_t row = 0;
  for (int ci = 0; ci < g.c; ++ci) {
    const T* src = in + static_cast<std::size_t>(ci) * g.in_spatial();
    for (int kd = 0; kd < g.k; ++kd) {
      for (int kh = 0; kh < g.k; ++kh) {
        for (int kw = 0; kw < g.k; ++kw, ++row) {
          T* dst = col + row * P;
          for (int od = 0; od < g.od; ++od) {
            const int id = od * g.s - g.p + kd;
            for (int oh = 0; oh < g.oh; ++oh) {
              const int ih = oh * g.s - g.p + kh;
              T* out = dst + (static_cast<std::size_t>(od) * g.oh + oh) * g.ow;
              if (id < 0 || id >= g.d || ih < 0 || ih >= g.h) {
                std::fill(out, out + g.ow, T{0});
                continue;
              }
              const T* line = src + (static_cast<std::size_t>(id) * g.h + ih) * g.w;
              if (g.s == 1) {
                const int lo = std::max(0, g.p - kw);
                const int hi = std::min(g.ow, g.w + g.p - kw);
                for (int ow = 0; ow < lo; ++ow) out[ow] = T{0};
                if (hi > lo) std::memcpy(out + lo, line + lo - g.p + kw, sizeof(T) * static_cast<std::size_t>(hi - lo));
                for (int ow = std::max(hi, lo); ow < g.ow; ++ow) out[ow] = T{0};
              } else {
                for (int ow = 0; ow < g.ow; ++ow) {
                  const int iw = ow * g.s - g.p + kw;
                  out[ow] = (iw >= 0 && iw < g.w) ? line[iw] : T{0};
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* in_grad) {
  const std::size_t P = g.out_spatial();
  std::size_t row = 0;
  for (int ci = 0; ci < g.c; ++ci) {
    T* dst = in_grad + static_cast<std::size_t>(ci) * g.in_spatial();
    for (int kd = 0; kd < g.k; ++kd) {
      for (int kh = 0; kh < g.k; ++kh) {
        for (int kw = 0; kw < g.k; ++kw, ++row) {
          const T* src = col + row * P;
          for (int od = 0; od < g.od; ++od) {
            const int id = od * g.s - g.p + kd;
            if (id < 0 || id >= g.d) continue;
            for (int oh = 0; oh < g.oh; ++oh) {
              const int ih = oh * g.s - g.p + kh;
              if (ih < 0 || ih >= g.h) continue;
              const T* in = src + (static_cast<std::size_t>(od) * g.oh + oh) * g.ow;
              T* line = dst + (static_cast<std::size_t>(id) * g.h + ih) * g.w;
              for (int ow = 0; ow < g.ow; ++ow) {
                const int iw = ow * g.s - g.p + kw;
                if (iw >= 0 && iw < g.w) line[iw] += in[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
AlignedVector<T>& scratch(std::size_t n) {
  thread_local AlignedVector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- Conv3d

template <typename T>
Conv3d<T>::Conv3d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding, bool bias,
                  double init_gain)
    : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding), has_bias_(bias) {
  if (in_ < 1 || out_ < 1 || k_ < 1 || stride_ < 1 || pad_ < 0) {
    throw std::invalid_argument("invalid Conv3d geometry for " + name);
  }
  weight_ = Parameter<T>(name + ".weight", {out_, in_ * k_ * k_ * k_}, {InitRule::Kind::Normal, init_gain});
  if (has_bias_) bias_ = Parameter<T>(name + ".bias", {out_});
}

template <typename T>
std::vector<int> Conv3d<T>::output_shape(const std::vector<int>& in) const {
  require_rank5(in, "Conv3d");
  if (in[1] != in_) {
    throw std::invalid_argument(weight_.name + ": expected " + std::to_string(in_) + " input channels, got " +
                                shape_string(in));
  }
  std::vector<int> out{in[0], out_, 0, 0, 0};
  for (int a = 2; a < 5; ++a) {
    const int span = in[a] + 2 * pad_ - k_;
    if (span < 0) throw std::invalid_argument(weight_.name + ": input " + shape_string(in) + " smaller than kernel");
    out[a] = span / stride_ + 1;
  }
  return out;
}

template <typename T>
std::size_t Conv3d<T>::parameter_count() const {
  return weight_.value.size() + (has_bias_ ? bias_.value.size() : 0);
}

template <typename T>
std::vector<Parameter<T>*> Conv3d<T>::parameters() {
  if (has_bias_) return {&weight_, &bias_};
  return {&weight_};
}

template <typename T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x, const RunOptions& opt) {
  const auto oshape = output_shape(x.shape());
  Tensor<T> y(oshape);
  const ConvGeom g{in_, x.dim(2), x.dim(3), x.dim(4), oshape[2], oshape[3], oshape[4], k_, stride_, pad_};
  const std::size_t P = g.out_spatial();
  const std::size_t R = g.rows();
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  T* col = pointwise ? nullptr : scratch<T>(R * P).data();
  ConstMatMap<T> W(weight_.value.data(), out_, static_cast<Eigen::Index>(R));
  for (int n = 0; n < x.dim(0); ++n) {
    const T* xin = x.data() + static_cast<std::size_t>(n) * x.stride_from(1);
    const T* colp = xin;
    if (!pointwise) {
      im2col(xin, g, col);
      colp = col;
    }
    ConstMatMap<T> C(colp, static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
    MatMap<T> Y(y.data() + static_cast<std::size_t>(n) * y.stride_from(1), out_, static_cast<Eigen::Index>(P));
    Y.noalias() = W * C;
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) Y.row(o).array() += bias_.value[static_cast<std::size_t>(o)];
    }
  }
  if (opt.cache) {
    input_ = x;
  } else {
    input_ = Tensor<T>();
  }
  return y;
}

template <typename T>
Tensor<T> Conv3d<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  if (input_.empty()) throw std::logic_error(weight_.name + ": backward without cached forward");
  const Tensor<T>& x = input_;
  const auto oshape = output_shape(x.shape());
  if (grad_out.shape() != oshape) {
    throw std::invalid_argument(weight_.name + ": gradient shape " + shape_string(grad_out.shape()) +
                                " does not match output " + shape_string(oshape));
  }
  const ConvGeom g{in_, x.dim(2), x.dim(3), x.dim(4), oshape[2], oshape[3], oshape[4], k_, stride_, pad_};
  const std::size_t P = g.out_spatial();
  const std::size_t R = g.rows();
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  Tensor<T> dx;
  if (need_input_grad) dx = Tensor<T>(x.shape());
  const bool with_dcol = need_input_grad && !pointwise;
  T* col = pointwise ? nullptr : scratch<T>(R * P * (with_dcol ? 2 : 1)).data();
  T* dcol = with_dcol ? col + R * P : nullptr;
  ConstMatMap<T> W(weight_.value.data(), out_, static_cast<Eigen::Index>(R));
  MatMap<T> dW(weight_.grad.data(), out_, static_cast<Eigen::Index>(R));
  for (int n = 0; n < x.dim(0); ++n) {
    const T* xin = x.data() + static_cast<std::size_t>(n) * x.stride_from(1);
    const T* colp = xin;
    if (!pointwise) {
      im2col(xin, g, col);
      colp = col;
    }
    ConstMatMap<T> C(colp, static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
    ConstMatMap<T> dY(grad_out.data() + static_cast<std::size_t>(n) * grad_out.stride_from(1), out_,
                      static_cast<Eigen::Index>(P));
    dW.noalias() += dY * C.transpose();
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) {
        const T* row = dY.data() + static_cast<std::size_t>(o) * P;
        T s = 0;
        for (std::size_t i = 0; i < P; ++i) s += row[i];
        bias_.grad[static_cast<std::size_t>(o)] += s;
      }
    }
    if (need_input_grad) {
      T* dxn = dx.data() + static_cast<std::size_t>(n) * dx.stride_from(1);
      if (pointwise) {
        MatMap<T> dX(dxn, static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
        dX.noalias() = W.transpose() * dY;
      } else {
        MatMap<T> dC(dcol, static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
        dC.noalias() = W.transpose() * dY;
        col2im(dcol, g, dxn);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- BatchNorm3d

template <typename T>
BatchNorm3d<T>::BatchNorm3d(std::string name, int channels, double momentum, double eps)
    : c_(channels), momentum_(momentum), eps_(eps), name_(std::move(name)) {
  gamma_ = Parameter<T>(name_ + ".gamma", {c_}, {InitRule::Kind::One});
  beta_ = Parameter<T>(name_ + ".beta", {c_});
  gamma_.value.fill(T{1});
  running_mean_ = Tensor<T>({c_}, T{0});
  running_var_ = Tensor<T>({c_}, T{1});
}

template <typename T>
std::vector<Buffer<T>> BatchNorm3d<T>::buffers() {
  return {{name_ + ".running_mean", &running_mean_}, {name_ + ".running_var", &running_var_}};
}

template <typename T>
Tensor<T> BatchNorm3d<T>::forward(const Tensor<T>& x, const RunOptions& opt) {
  require_rank5(x.shape(), "BatchNorm3d");
  if (x.dim(1) != c_) throw std::invalid_argument(name_ + ": channel mismatch " + shape_string(x.shape()));
  const int N = x.dim(0);
  const std::size_t S = x.stride_from(2);
  const std::size_t M = static_cast<std::size_t>(N) * S;
  Tensor<T> y(x.shape());
  const bool batch = opt.phase == Phase::Train;
  std::vector<T> inv(static_cast<std::size_t>(c_));
  if (opt.cache) xhat_ = Tensor<T>(x.shape());
  for (int c = 0; c < c_; ++c) {
    double mean, var;
    if (batch) {
      double sum = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = x.data() + (static_cast<std::size_t>(n) * c_ + c) * S;
        for (std::size_t i = 0; i < S; ++i) sum += p[i];
      }
      mean = sum / static_cast<double>(M);
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = x.data() + (static_cast<std::size_t>(n) * c_ + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(M);
      if (opt.update_running_stats) {
        const double unbiased = M > 1 ? sq / static_cast<double>(M - 1) : var;
        auto& rm = running_mean_[static_cast<std::size_t>(c)];
        auto& rv = running_var_[static_cast<std::size_t>(c)];
        rm = static_cast<T>((1.0 - momentum_) * rm + momentum_ * mean);
        rv = static_cast<T>((1.0 - momentum_) * rv + momentum_ * unbiased);
      }
    } else {
      mean = running_mean_[static_cast<std::size_t>(c)];
      var = running_var_[static_cast<std::size_t>(c)];
    }
    const double is = 1.0 / std::sqrt(var + eps_);
    inv[static_cast<std::size_t>(c)] = static_cast<T>(is);
    const T g = gamma_.value[static_cast<std::size_t>(c)];
    const T b = beta_.value[static_cast<std::size_t>(c)];
    const T m = static_cast<T>(mean);
    const T isT = static_cast<T>(is);
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * c_ + c) * S;
      const T* p = x.data() + off;
      T* q = y.data() + off;
      if (opt.cache) {
        T* h = xhat_.data() + off;
        for (std::size_t i = 0; i < S; ++i) {
          h[i] = (p[i] - m) * isT;
          q[i] = h[i] * g + b;
        }
      } else {
        for (std::size_t i = 0; i < S; ++i) q[i] = (p[i] - m) * isT * g + b;
      }
    }
  }
  if (opt.cache) {
    inv_std_ = inv;
    batch_stats_used_ = batch;
  } else {
    xhat_ = Tensor<T>();
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm3d<T>::backward(const Tensor<T>& grad_out) {
  if (xhat_.empty()) throw std::logic_error(name_ + ": backward without cached forward");
  const int N = grad_out.dim(0);
  const std::size_t S = grad_out.stride_from(2);
  const double M = static_cast<double>(N) * static_cast<double>(S);
  Tensor<T> dx(grad_out.shape());
  for (int c = 0; c < c_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * c_ + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xhat += static_cast<double>(grad_out[off + i]) * xhat_[off + i];
      }
    }
    gamma_.grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
    beta_.grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
    const double g = gamma_.value[static_cast<std::size_t>(c)];
    const double is = inv_std_[static_cast<std::size_t>(c)];
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * c_ + c) * S;
      if (batch_stats_used_) {
        const double a = g * is / M;
        for (std::size_t i = 0; i < S; ++i) {
          dx[off + i] = static_cast<T>(a * (M * grad_out[off + i] - sum_dy - xhat_[off + i] * sum_dy_xhat));
        }
      } else {
        for (std::size_t i = 0; i < S; ++i) dx[off + i] = static_cast<T>(g * is * grad_out[off + i]);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- ConvBnRelu

template <typename T>
ConvBnRelu<T>::ConvBnRelu(const std::string& name, int in_channels, int out_channels)
    : conv_(name + ".conv", in_channels, out_channels, 3, 1, 1, false), bn_(name + ".bn", out_channels) {}

template <typename T>
std::vector<Parameter<T>*> ConvBnRelu<T>::parameters() {
  auto p = conv_.parameters();
  for (auto* q : bn_.parameters()) p.push_back(q);
  return p;
}

template <typename T>
Tensor<T> ConvBnRelu<T>::forward(const Tensor<T>& x, const RunOptions& opt) {
  Tensor<T> y = bn_.forward(conv_.forward(x, opt), opt);
  for (auto& v : y.storage()) v = v > T{0} ? v : T{0};
  if (opt.cache) {
    out_ = y;
  } else {
    out_ = Tensor<T>();
  }
  return y;
}

template <typename T>
Tensor<T> ConvBnRelu<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  if (out_.empty()) throw std::logic_error("ConvBnRelu: backward without cached forward");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(out_[i] > T{0})) g[i] = T{0};
  }
  return conv_.backward(bn_.backward(g), need_input_grad);
}

// ---------------------------------------------------------------- MaxPool2

template <typename T>
Tensor<T> MaxPool2<T>::forward(const Tensor<T>& x, const RunOptions& opt) {
  require_rank5(x.shape(), "MaxPool2");
  const int D = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (D % 2 || H % 2 || W % 2) throw std::invalid_argument("MaxPool2 needs even spatial dims, got " + shape_string(x.shape()));
  const int od = D / 2, oh = H / 2, ow = W / 2;
  const int planes = x.dim(0) * x.dim(1);
  Tensor<T> y({x.dim(0), x.dim(1), od, oh, ow});
  if (opt.cache) argmax_.assign(y.size(), 0);
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * D * H * W;
    T* dst = y.data() + static_cast<std::size_t>(p) * od * oh * ow;
    for (int d = 0; d < od; ++d) {
      for (int h = 0; h < oh; ++h) {
        for (int w = 0; w < ow; ++w) {
          T best = src[(static_cast<std::size_t>(2 * d) * H + 2 * h) * W + 2 * w];
          std::uint8_t arg = 0;
          for (std::uint8_t k = 1; k < 8; ++k) {
            const int dd = 2 * d + (k >> 2), hh = 2 * h + ((k >> 1) & 1), ww = 2 * w + (k & 1);
            const T v = src[(static_cast<std::size_t>(dd) * H + hh) * W + ww];
            if (v > best) {
              best = v;
              arg = k;
            }
          }
          const std::size_t o = (static_cast<std::size_t>(d) * oh + h) * ow + w;
          dst[o] = best;
          if (opt.cache) argmax_[static_cast<std::size_t>(p) * od * oh * ow + o] = arg;
        }
      }
    }
  }
  in_shape_ = opt.cache ? x.shape() : std::vector<int>{};
  return y;
}

template <typename T>
Tensor<T> MaxPool2<T>::backward(const Tensor<T>& grad_out) {
  if (in_shape_.empty()) throw std::logic_error("MaxPool2: backward without cached forward");
  Tensor<T> dx(in_shape_);
  const int H = in_shape_[3], W = in_shape_[4];
  const int od = grad_out.dim(2), oh = grad_out.dim(3), ow = grad_out.dim(4);
  const int planes = grad_out.dim(0) * grad_out.dim(1);
  for (int p = 0; p < planes; ++p) {
    T* dst = dx.data() + static_cast<std::size_t>(p) * in_shape_[2] * H * W;
    for (int d = 0; d < od; ++d) {
      for (int h = 0; h < oh; ++h) {
        for (int w = 0; w < ow; ++w) {
          const std::size_t o = static_cast<std::size_t>(p) * od * oh * ow + (static_cast<std::size_t>(d) * oh + h) * ow + w;
          const std::uint8_t k = argmax_[o];
          const int dd = 2 * d + (k >> 2), hh = 2 * h + ((k >> 1) & 1), ww = 2 * w + (k & 1);
          dst[(static_cast<std::size_t>(dd) * H + hh) * W + ww] += grad_out[o];
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- reshaping ops

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  require_rank5(x.shape(), "upsample2");
  const int D = x.dim(2), H = x.dim(3), W = x.dim(4);
  Tensor<T> y({x.dim(0), x.dim(1), 2 * D, 2 * H, 2 * W});
  const int planes = x.dim(0) * x.dim(1);
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * D * H * W;
    T* dst = y.data() + static_cast<std::size_t>(p) * 8 * D * H * W;
    for (int d = 0; d < 2 * D; ++d) {
      for (int h = 0; h < 2 * H; ++h) {
        const T* line = src + (static_cast<std::size_t>(d / 2) * H + h / 2) * W;
        T* out = dst + (static_cast<std::size_t>(d) * 2 * H + h) * 2 * W;
        for (int w = 0; w < 2 * W; ++w) out[w] = line[w / 2];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& g) {
  require_rank5(g.shape(), "upsample2_backward");
  const int D = g.dim(2) / 2, H = g.dim(3) / 2, W = g.dim(4) / 2;
  Tensor<T> dx({g.dim(0), g.dim(1), D, H, W});
  const int planes = g.dim(0) * g.dim(1);
  for (int p = 0; p < planes; ++p) {
    const T* src = g.data() + static_cast<std::size_t>(p) * 8 * D * H * W;
    T* dst = dx.data() + static_cast<std::size_t>(p) * D * H * W;
    for (int d = 0; d < 2 * D; ++d) {
      for (int h = 0; h < 2 * H; ++h) {
        const T* line = src + (static_cast<std::size_t>(d) * 2 * H + h) * 2 * W;
        T* out = dst + (static_cast<std::size_t>(d / 2) * H + h / 2) * W;
        for (int w = 0; w < 2 * W; ++w) out[w / 2] += line[w];
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) || a.stride_from(2) != b.stride_from(2)) {
    throw std::invalid_argument("cannot concatenate " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  auto shape = a.shape();
  shape[1] += b.dim(1);
  Tensor<T> y(shape);
  const std::size_t sa = a.stride_from(1), sb = b.stride_from(1);
  for (int n = 0; n < a.dim(0); ++n) {
    T* dst = y.data() + static_cast<std::size_t>(n) * (sa + sb);
    std::copy_n(a.data() + static_cast<std::size_t>(n) * sa, sa, dst);
    std::copy_n(b.data() + static_cast<std::size_t>(n) * sb, sb, dst + sa);
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& g, int first, Tensor<T>& ga, Tensor<T>& gb) {
  auto sa_shape = g.shape();
  auto sb_shape = g.shape();
  sa_shape[1] = first;
  sb_shape[1] = g.dim(1) - first;
  ga = Tensor<T>(sa_shape);
  gb = Tensor<T>(sb_shape);
  const std::size_t sa = ga.stride_from(1), sb = gb.stride_from(1);
  for (int n = 0; n < g.dim(0); ++n) {
    const T* src = g.data() + static_cast<std::size_t>(n) * (sa + sb);
    std::copy_n(src, sa, ga.data() + static_cast<std::size_t>(n) * sa);
    std::copy_n(src + sa, sb, gb.data() + static_cast<std::size_t>(n) * sb);
  }
}

// ---------------------------------------------------------------- LeakyRelu / Dropout

template <typename T>
Tensor<T> LeakyRelu<T>::forward(const Tensor<T>& x, const RunOptions& opt) {
  Tensor<T> y = x;
  if (opt.cache) positive_.assign(x.size(), 0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool pos = x[i] > T{0};
    if (!pos) y[i] = x[i] * slope_;
    if (opt.cache) positive_[i] = pos;
  }
  return y;
}

template <typename T>
Tensor<T> LeakyRelu<T>::backward(const Tensor<T>& grad_out) {
  if (positive_.size() != grad_out.size()) throw std::logic_error("LeakyRelu: backward without cached forward");
  Tensor<T> dx = grad_out;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!positive_[i]) dx[i] *= slope_;
  }
  return dx;
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, const RunOptions& opt) {
  if (opt.phase == Phase::Eval || rate_ <= 0.0) {
    scale_.assign(x.size(), T{1});
    return x;
  }
  std::mt19937_64 rng(derive_seed(opt.dropout_seed, {salt_}));
  std::bernoulli_distribution keep(1.0 - rate_);
  const T s = static_cast<T>(1.0 / (1.0 - rate_));
  scale_.resize(x.size());
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    scale_[i] = keep(rng) ? s : T{0};
    y[i] *= scale_[i];
  }
  return y;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_out) {
  if (scale_.size() != grad_out.size()) throw std::logic_error("Dropout: backward without cached forward");
  Tensor<T> dx = grad_out;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= scale_[i];
  return dx;
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(std::string name, int in_features, int out_features, double init_gain)
    : in_(in_features), out_(out_features) {
  weight_ = Parameter<T>(name + ".weight", {out_, in_}, {InitRule::Kind::Normal, init_gain});
  bias_ = Parameter<T>(name + ".bias", {out_});
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, const RunOptions& opt) {
  const int N = x.dim(0);
  if (x.stride_from(1) != static_cast<std::size_t>(in_)) {
    throw std::invalid_argument(weight_.name + ": expected " + std::to_string(in_) + " features, got " +
                                shape_string(x.shape()));
  }
  Tensor<T> y({N, out_});
  ConstMatMap<T> X(x.data(), N, in_);
  ConstMatMap<T> W(weight_.value.data(), out_, in_);
  MatMap<T> Y(y.data(), N, out_);
  Y.noalias() = X * W.transpose();
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < out_; ++o) Y(n, o) += bias_.value[static_cast<std::size_t>(o)];
  input_ = opt.cache ? x : Tensor<T>();
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  if (input_.empty()) throw std::logic_error(weight_.name + ": backward without cached forward");
  const int N = input_.dim(0);
  ConstMatMap<T> X(input_.data(), N, in_);
  ConstMatMap<T> dY(grad_out.data(), N, out_);
  MatMap<T> dW(weight_.grad.data(), out_, in_);
  dW.noalias() += dY.transpose() * X;
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += dY(n, o);
  Tensor<T> dx;
  if (need_input_grad) {
    dx = Tensor<T>(input_.shape());
    ConstMatMap<T> W(weight_.value.data(), out_, in_);
    MatMap<T> dX(dx.data(), N, in_);
    dX.noalias() = dY * W;
  }
  return dx;
}

// ---------------------------------------------------------------- softmax

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const int N = logits.dim(0), C = logits.dim(1);
  const std::size_t S = logits.stride_from(2);
  Tensor<T> p(logits.shape());
  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * S;
    for (std::size_t i = 0; i < S; ++i) {
      T mx = logits[base + i];
      for (int c = 1; c < C; ++c) mx = std::max(mx, logits[base + c * S + i]);
      T sum{0};
      for (int c = 0; c < C; ++c) {
        const T e = std::exp(logits[base + c * S + i] - mx);
        p[base + c * S + i] = e;
        sum += e;
      }
      for (int c = 0; c < C; ++c) p[base + c * S + i] /= sum;
    }
  }
  return p;
}

template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs) {
  const int N = probs.dim(0), C = probs.dim(1);
  const std::size_t S = probs.stride_from(2);
  Tensor<T> g(probs.shape());
  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * S;
    for (std::size_t i = 0; i < S; ++i) {
      T dot{0};
      for (int c = 0; c < C; ++c) dot += probs[base + c * S + i] * grad_probs[base + c * S + i];
      for (int c = 0; c < C; ++c) {
        const std::size_t k = base + c * S + i;
        g[k] = probs[k] * (grad_probs[k] - dot);
      }
    }
  }
  return g;
}

#define ADVNORM_INSTANTIATE(T)                                                                      \
  template class Conv3d<T>;                                                                         \
  template class BatchNorm3d<T>;                                                                    \
  template class ConvBnRelu<T>;                                                                     \
  template class MaxPool2<T>;                                                                       \
  template class LeakyRelu<T>;                                                                      \
  template class Dropout<T>;                                                                        \
  template class Linear<T>;                                                                         \
  template Tensor<T> upsample2<T>(const Tensor<T>&);                                                \
  template Tensor<T> upsample2_backward<T>(const Tensor<T>&);                                       \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template void split_channels<T>(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);                   \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);                                         \
  template Tensor<T> softmax_channels_backward<T>(const Tensor<T>&, const Tensor<T>&);

ADVNORM_INSTANTIATE(float)
ADVNORM_INSTANTIATE(double)

#undef ADVNORM_INSTANTIATE

}  // namespace advnorm::nn
