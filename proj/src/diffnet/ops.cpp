/*
 * Copyright 2026 The e2d Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "diffnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "common/error.hpp"

namespace e2d::diffnet {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_rank4(const Tensor& t, const char* op) {
  require(t.rank() == 4, ErrorKind::Shape,
          std::string(op) + " expects a rank-4 NCHW tensor, got " + t.shape_string());
}

void require_channels(const Tensor& param, int channels, const char* op) {
  require(param.rank() == 1 && param.dim(0) == channels, ErrorKind::Shape,
          std::string(op) + " parameter has shape " + param.shape_string() + ", expected (" +
              std::to_string(channels) + ")");
}

struct ConvGeometry {
  int channels, height, width;
  int kernel_h, kernel_w;
  int stride, padding;
  int out_h, out_w;
};

// cols is (C*KH*KW, OH*OW), row-major.
void im2col(const float* x, const ConvGeometry& geo, float* cols) {
  const int spatial = geo.out_h * geo.out_w;
  for (int c = 0; c < geo.channels; ++c) {
    for (int kh = 0; kh < geo.kernel_h; ++kh) {
      for (int kw = 0; kw < geo.kernel_w; ++kw) {
        float* row = cols + static_cast<std::size_t>((c * geo.kernel_h + kh) * geo.kernel_w + kw) * spatial;
        for (int oh = 0; oh < geo.out_h; ++oh) {
          const int ih = oh * geo.stride - geo.padding + kh;
          float* dst = row + oh * geo.out_w;
          if (ih < 0 || ih >= geo.height) {
            std::fill(dst, dst + geo.out_w, 0.0f);
            continue;
          }
          const float* src = x + (static_cast<std::size_t>(c) * geo.height + ih) * geo.width;
          for (int ow = 0; ow < geo.out_w; ++ow) {
            const int iw = ow * geo.stride - geo.padding + kw;
            dst[ow] = (iw >= 0 && iw < geo.width) ? src[iw] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* cols, const ConvGeometry& geo, float* dx) {
  const int spatial = geo.out_h * geo.out_w;
  for (int c = 0; c < geo.channels; ++c) {
    for (int kh = 0; kh < geo.kernel_h; ++kh) {
      for (int kw = 0; kw < geo.kernel_w; ++kw) {
        const float* row =
            cols + static_cast<std::size_t>((c * geo.kernel_h + kh) * geo.kernel_w + kw) * spatial;
        for (int oh = 0; oh < geo.out_h; ++oh) {
          const int ih = oh * geo.stride - geo.padding + kh;
          if (ih < 0 || ih >= geo.height) continue;
          float* dst = dx + (static_cast<std::size_t>(c) * geo.height + ih) * geo.width;
          const float* src = row + oh * geo.out_w;
          for (int ow = 0; ow < geo.out_w; ++ow) {
            const int iw = ow * geo.stride - geo.padding + kw;
            if (iw >= 0 && iw < geo.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Per-channel sums over (N, H, W) in double.
std::vector<double> channel_sums(const Tensor& t) {
  const int n = t.dim(0), c = t.dim(1);
  const std::size_t hw = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
  std::vector<double> sums(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const float* p = t.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      sums[static_cast<std::size_t>(ch)] += s;
    }
  }
  return sums;
}

// Returns log-softmax rows in double.
std::vector<double> log_softmax_rows(const Tensor& logits) {
  const int n = logits.dim(0), l = logits.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n) * l);
  for (int i = 0; i < n; ++i) {
    const float* z = logits.data() + static_cast<std::size_t>(i) * l;
    double m = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < l; ++j) m = std::max(m, static_cast<double>(z[j]));
    double s = 0.0;
    for (int j = 0; j < l; ++j) s += std::exp(static_cast<double>(z[j]) - m);
    const double lse = m + std::log(s);
    for (int j = 0; j < l; ++j) out[static_cast<std::size_t>(i) * l + j] = z[j] - lse;
  }
  return out;
}

void require_logits(const Tensor& logits, const char* op) {
  require(logits.rank() == 2, ErrorKind::Shape,
          std::string(op) + " expects (N, L) logits, got " + logits.shape_string());
}

} // namespace

void validate_crop(const CropSpec& crop, int image_height, int image_width) {
  const bool inside = crop.top >= 0 && crop.left >= 0 && crop.height >= 1 && crop.width >= 1 &&
                      crop.top + crop.height <= image_height &&
                      crop.left + crop.width <= image_width;
  require(inside, ErrorKind::InvalidArgument,
          "crop (" + std::to_string(crop.top) + ", " + std::to_string(crop.left) + ", " +
              std::to_string(crop.height) + "x" + std::to_string(crop.width) +
              ") outside image " + std::to_string(image_height) + "x" +
              std::to_string(image_width));
  require(crop.out_height >= 1 && crop.out_width >= 1, ErrorKind::InvalidArgument,
          "crop output resolution must be positive");
}

Var conv2d(Graph& g, Var x, Var weight, int stride, int padding) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  require_rank4(xv, "conv2d");
  require(wv.rank() == 4 && wv.dim(1) == xv.dim(1), ErrorKind::Shape,
          "conv2d weight " + wv.shape_string() + " incompatible with input " + xv.shape_string());
  require(stride >= 1 && padding >= 0, ErrorKind::InvalidArgument, "bad conv2d stride/padding");

  ConvGeometry geo{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), stride, padding, 0, 0};
  geo.out_h = (geo.height + 2 * padding - geo.kernel_h) / stride + 1;
  geo.out_w = (geo.width + 2 * padding - geo.kernel_w) / stride + 1;
  require(geo.out_h >= 1 && geo.out_w >= 1, ErrorKind::Shape, "conv2d output would be empty");

  const int batch = xv.dim(0), out_c = wv.dim(0);
  const int patch = geo.channels * geo.kernel_h * geo.kernel_w;
  const int spatial = geo.out_h * geo.out_w;
  const std::size_t in_stride = static_cast<std::size_t>(geo.channels) * geo.height * geo.width;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * spatial;

  Tensor out({batch, out_c, geo.out_h, geo.out_w});
  std::vector<float> cols(static_cast<std::size_t>(patch) * spatial);
  ConstMapMat w_mat(wv.data(), out_c, patch);
  for (int n = 0; n < batch; ++n) {
    im2col(xv.data() + n * in_stride, geo, cols.data());
    MapMat y(out.data() + n * out_stride, out_c, spatial);
    y.noalias() = w_mat * ConstMapMat(cols.data(), patch, spatial);
  }

  return g.emplace("conv2d", std::move(out), {x, weight}, [=](Graph& gr, Var self) {
    const Tensor& xs = gr.value(x);
    const Tensor& ws = gr.value(weight);
    const Tensor dy = gr.grad(self);
    const bool need_w = gr.requires_grad(weight);
    const bool need_x = gr.requires_grad(x);
    ConstMapMat wm(ws.data(), out_c, patch);
    std::vector<float> col(static_cast<std::size_t>(patch) * spatial);
    RowMat dw = RowMat::Zero(need_w ? out_c : 0, need_w ? patch : 0);
    for (int n = 0; n < batch; ++n) {
      ConstMapMat dyn(dy.data() + n * out_stride, out_c, spatial);
      if (need_w) {
        im2col(xs.data() + n * in_stride, geo, col.data());
        dw.noalias() += dyn * ConstMapMat(col.data(), patch, spatial).transpose();
      }
      if (need_x) {
        MapMat dcol(col.data(), patch, spatial);
        dcol.noalias() = wm.transpose() * dyn;
        col2im_add(col.data(), geo, gr.grad_buffer(x).data() + n * in_stride);
      }
    }
    if (need_w) {
      MapMat(gr.grad_buffer(weight).data(), out_c, patch) += dw;
    }
  });
}

Var batch_norm_train(Graph& g, Var x, Var gamma, Var beta, Tensor& running_mean,
                     Tensor& running_var, float momentum, float eps) {
  const Tensor& xv = g.value(x);
  require_rank4(xv, "batch_norm");
  const int batch = xv.dim(0), channels = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  const double m = static_cast<double>(batch) * static_cast<double>(hw);
  require(m > 1.0, ErrorKind::Shape, "batch_norm in train mode needs more than one value per channel");
  require_channels(g.value(gamma), channels, "batch_norm");
  require_channels(g.value(beta), channels, "batch_norm");
  require_channels(running_mean, channels, "batch_norm");
  require_channels(running_var, channels, "batch_norm");

  const std::vector<double> sums = channel_sums(xv);
  std::vector<double> mean(static_cast<std::size_t>(channels)), var(static_cast<std::size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) mean[static_cast<std::size_t>(c)] = sums[static_cast<std::size_t>(c)] / m;
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const float* p = xv.data() + (static_cast<std::size_t>(n) * channels + c) * hw;
      const double mu = mean[static_cast<std::size_t>(c)];
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += (p[k] - mu) * (p[k] - mu);
      var[static_cast<std::size_t>(c)] += s;
    }
  }

  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    const std::size_t ci = static_cast<std::size_t>(c);
    const double biased = var[ci] / m;
    (*inv_std)[ci] = static_cast<float>(1.0 / std::sqrt(biased + eps));
    running_mean[ci] = static_cast<float>((1.0 - momentum) * running_mean[ci] + momentum * mean[ci]);
    running_var[ci] =
        static_cast<float>((1.0 - momentum) * running_var[ci] + momentum * var[ci] / (m - 1.0));
  }

  auto xhat = std::make_shared<Tensor>(xv.shape());
  Tensor out(xv.shape());
  const Tensor& gv = g.value(gamma);
  const Tensor& bv = g.value(beta);
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * hw;
      const float mu = static_cast<float>(mean[static_cast<std::size_t>(c)]);
      const float is = (*inv_std)[static_cast<std::size_t>(c)];
      for (std::size_t k = 0; k < hw; ++k) {
        const float h = (xv[off + k] - mu) * is;
        (*xhat)[off + k] = h;
        out[off + k] = gv[static_cast<std::size_t>(c)] * h + bv[static_cast<std::size_t>(c)];
      }
    }
  }

  return g.emplace("batch_norm", std::move(out), {x, gamma, beta},
                   [=](Graph& gr, Var self) {
                     const Tensor dy = gr.grad(self);
                     const Tensor& gs = gr.value(gamma);
                     std::vector<double> sum_dy(static_cast<std::size_t>(channels), 0.0);
                     std::vector<double> sum_dy_xhat(static_cast<std::size_t>(channels), 0.0);
                     for (int n = 0; n < batch; ++n) {
                       for (int c = 0; c < channels; ++c) {
                         const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * hw;
                         double a = 0.0, b = 0.0;
                         for (std::size_t k = 0; k < hw; ++k) {
                           a += dy[off + k];
                           b += static_cast<double>(dy[off + k]) * (*xhat)[off + k];
                         }
                         sum_dy[static_cast<std::size_t>(c)] += a;
                         sum_dy_xhat[static_cast<std::size_t>(c)] += b;
                       }
                     }
                     if (gr.requires_grad(gamma)) {
                       Tensor& dg = gr.grad_buffer(gamma);
                       for (int c = 0; c < channels; ++c)
                         dg[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy_xhat[static_cast<std::size_t>(c)]);
                     }
                     if (gr.requires_grad(beta)) {
                       Tensor& db = gr.grad_buffer(beta);
                       for (int c = 0; c < channels; ++c)
                         db[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy[static_cast<std::size_t>(c)]);
                     }
                     if (gr.requires_grad(x)) {
                       Tensor& dx = gr.grad_buffer(x);
                       for (int n = 0; n < batch; ++n) {
                         for (int c = 0; c < channels; ++c) {
                           const std::size_t ci = static_cast<std::size_t>(c);
                           const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * hw;
                           const double scale = gs[ci] * (*inv_std)[ci] / m;
                           const double mean_dy = sum_dy[ci];
                           const double mean_dy_xhat = sum_dy_xhat[ci];
                           for (std::size_t k = 0; k < hw; ++k) {
                             dx[off + k] += static_cast<float>(
                                 scale * (m * dy[off + k] - mean_dy - (*xhat)[off + k] * mean_dy_xhat));
                           }
                         }
                       }
                     }
                   });
}

Var batch_norm_eval(Graph& g, Var x, Var gamma, Var beta, const Tensor& running_mean,
                    const Tensor& running_var, float eps) {
  const Tensor& xv = g.value(x);
  require_rank4(xv, "batch_norm");
  const int batch = xv.dim(0), channels = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  require_channels(g.value(gamma), channels, "batch_norm");
  require_channels(g.value(beta), channels, "batch_norm");
  require_channels(running_mean, channels, "batch_norm");
  require_channels(running_var, channels, "batch_norm");

  std::vector<float> inv_std(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    const std::size_t ci = static_cast<std::size_t>(c);
    require(running_var[ci] > 0.0f, ErrorKind::InvalidArgument, "running variance must be positive");
    inv_std[ci] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(running_var[ci]) + eps));
  }
  const Tensor& gv = g.value(gamma);
  const Tensor& bv = g.value(beta);
  std::vector<float> mean(running_mean.values().begin(), running_mean.values().end());
  Tensor out(xv.shape());
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t ci = static_cast<std::size_t>(c);
      const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        out[off + k] = gv[ci] * ((xv[off + k] - mean[ci]) * inv_std[ci]) + bv[ci];
      }
    }
  }

  return g.emplace("batch_norm", std::move(out), {x, gamma, beta},
                   [=](Graph& gr, Var self) {
                     const Tensor dy = gr.grad(self);
                     const Tensor& xs = gr.value(x);
                     const Tensor& gs = gr.value(gamma);
                     const bool need_g = gr.requires_grad(gamma);
                     const bool need_b = gr.requires_grad(beta);
                     const bool need_x = gr.requires_grad(x);
                     for (int c = 0; c < channels; ++c) {
                       const std::size_t ci = static_cast<std::size_t>(c);
                       double sg = 0.0, sb = 0.0;
                       for (int n = 0; n < batch; ++n) {
                         const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * hw;
                         for (std::size_t k = 0; k < hw; ++k) {
                           sb += dy[off + k];
                           sg += static_cast<double>(dy[off + k]) * ((xs[off + k] - mean[ci]) * inv_std[ci]);
                         }
                         if (need_x) {
                           Tensor& dx = gr.grad_buffer(x);
                           const float s = gs[ci] * inv_std[ci];
                           for (std::size_t k = 0; k < hw; ++k) dx[off + k] += s * dy[off + k];
                         }
                       }
                       if (need_g) gr.grad_buffer(gamma)[ci] += static_cast<float>(sg);
                       if (need_b) gr.grad_buffer(beta)[ci] += static_cast<float>(sb);
                     }
                   });
}

Moments channel_moments(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require_rank4(xv, "channel_moments");
  const int batch = xv.dim(0), channels = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  const double m = static_cast<double>(batch) * static_cast<double>(hw);

  const std::vector<double> sums = channel_sums(xv);
  Tensor mean({channels});
  std::vector<double> mean_d(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    mean_d[static_cast<std::size_t>(c)] = sums[static_cast<std::size_t>(c)] / m;
    mean[static_cast<std::size_t>(c)] = static_cast<float>(mean_d[static_cast<std::size_t>(c)]);
  }
  Tensor var({channels}, 0.0f);
  for (int c = 0; c < channels; ++c) {
    double s = 0.0;
    for (int n = 0; n < batch; ++n) {
      const float* p = xv.data() + (static_cast<std::size_t>(n) * channels + c) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        const double d = p[k] - mean_d[static_cast<std::size_t>(c)];
        s += d * d;
      }
    }
    var[static_cast<std::size_t>(c)] = static_cast<float>(s / m);
  }

  Var mean_var = g.emplace("channel_mean", std::move(mean), {x}, [=](Graph& gr, Var self) {
    const Tensor dmean = gr.grad(self);
    Tensor& dx = gr.grad_buffer(x);
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const float d = static_cast<float>(dmean[static_cast<std::size_t>(c)] / m);
        float* p = dx.data() + (static_cast<std::size_t>(n) * channels + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) p[k] += d;
      }
    }
  });
  Var var_var = g.emplace("channel_var", std::move(var), {x}, [=](Graph& gr, Var self) {
    const Tensor dvar = gr.grad(self);
    const Tensor& xs = gr.value(x);
    Tensor& dx = gr.grad_buffer(x);
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const double scale = 2.0 * dvar[static_cast<std::size_t>(c)] / m;
        const double mu = mean_d[static_cast<std::size_t>(c)];
        const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) dx[off + k] += static_cast<float>(scale * (xs[off + k] - mu));
      }
    }
  });
  return {mean_var, var_var};
}

Var relu(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  return g.emplace("relu", std::move(out), {x}, [=](Graph& gr, Var self) {
    const Tensor dy = gr.grad(self);
    const Tensor& xs = gr.value(x);
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (xs[i] > 0.0f) dx[i] += dy[i];
    }
  });
}

Var max_pool2d(Graph& g, Var x, int kernel, int stride) {
  const Tensor& xv = g.value(x);
  require_rank4(xv, "max_pool2d");
  const int batch = xv.dim(0), channels = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  require(kernel >= 1 && stride >= 1 && h >= kernel && w >= kernel, ErrorKind::Shape,
          "max_pool2d kernel larger than input " + xv.shape_string());
  const int oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  Tensor out({batch, channels, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * h * w;
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j, ++o) {
          std::size_t best = base + static_cast<std::size_t>(i * stride) * w + j * stride;
          for (int ki = 0; ki < kernel; ++ki) {
            for (int kj = 0; kj < kernel; ++kj) {
              const std::size_t idx = base + static_cast<std::size_t>(i * stride + ki) * w + j * stride + kj;
              if (xv[idx] > xv[best]) best = idx;
            }
          }
          (*argmax)[o] = best;
          out[o] = xv[best];
        }
      }
    }
  }
  return g.emplace("max_pool2d", std::move(out), {x}, [=](Graph& gr, Var self) {
    const Tensor dy = gr.grad(self);
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[(*argmax)[i]] += dy[i];
  });
}

Var global_avg_pool(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require_rank4(xv, "global_avg_pool");
  const int batch = xv.dim(0), channels = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor out({batch, channels});
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += xv[i * hw + k];
    out[i] = static_cast<float>(s / static_cast<double>(hw));
  }
  return g.emplace("global_avg_pool", std::move(out), {x}, [=](Graph& gr, Var self) {
    const Tensor dy = gr.grad(self);
    Tensor& dx = gr.grad_buffer(x);
    const float inv = 1.0f / static_cast<float>(hw);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      for (std::size_t k = 0; k < hw; ++k) dx[i * hw + k] += dy[i] * inv;
    }
  });
}

Var linear(Graph& g, Var x, Var weight, Var bias) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  const Tensor& bv = g.value(bias);
  require(xv.rank() == 2 && wv.rank() == 2 && wv.dim(1) == xv.dim(1), ErrorKind::Shape,
          "linear weight " + wv.shape_string() + " incompatible with input " + xv.shape_string());
  require_channels(bv, wv.dim(0), "linear");
  const int batch = xv.dim(0), in = xv.dim(1), outf = wv.dim(0);
  Tensor out({batch, outf});
  MapMat y(out.data(), batch, outf);
  y.noalias() = ConstMapMat(xv.data(), batch, in) * ConstMapMat(wv.data(), outf, in).transpose();
  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < outf; ++o) y(n, o) += bv[static_cast<std::size_t>(o)];
  }
  return g.emplace("linear", std::move(out), {x, weight, bias}, [=](Graph& gr, Var self) {
    const Tensor dy = gr.grad(self);
    ConstMapMat dym(dy.data(), batch, outf);
    if (gr.requires_grad(x)) {
      MapMat(gr.grad_buffer(x).data(), batch, in).noalias() +=
          dym * ConstMapMat(gr.value(weight).data(), outf, in);
    }
    if (gr.requires_grad(weight)) {
      MapMat(gr.grad_buffer(weight).data(), outf, in).noalias() +=
          dym.transpose() * ConstMapMat(gr.value(x).data(), batch, in);
    }
    if (gr.requires_grad(bias)) {
      Tensor& db = gr.grad_buffer(bias);
      for (int o = 0; o < outf; ++o) {
        double s = 0.0;
        for (int n = 0; n < batch; ++n) s += dym(n, o);
        db[static_cast<std::size_t>(o)] += static_cast<float>(s);
      }
    }
  });
}

namespace {

struct AxisTap {
  int i0, i1;
  float w0, w1;
};

// Half-pixel source coordinates, clamped to the crop.
std::vector<AxisTap> resize_taps(int start, int extent, int out) {
  std::vector<AxisTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(extent) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > extent - 1) lo = extent - 1;
    const int hi = std::min(lo + 1, extent - 1);
    const double frac = src - lo;
    taps[static_cast<std::size_t>(o)] = {start + lo, start + hi, static_cast<float>(1.0 - frac),
                                         static_cast<float>(frac)};
  }
  return taps;
}

Tensor resample(const Tensor& image, const std::vector<AxisTap>& ty, const std::vector<AxisTap>& tx) {
  const int channels = image.dim(1);
  const int oh = static_cast<int>(ty.size()), ow = static_cast<int>(tx.size());
  Tensor out({1, channels, oh, ow});
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      const AxisTap& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < ow; ++x) {
        const AxisTap& b = tx[static_cast<std::size_t>(x)];
        float v = a.w0 * (b.w0 * image.at(0, c, a.i0, b.i0));
        if (b.w1 != 0.0f) v += a.w0 * (b.w1 * image.at(0, c, a.i0, b.i1));
        if (a.w1 != 0.0f) {
          v += a.w1 * (b.w0 * image.at(0, c, a.i1, b.i0));
          if (b.w1 != 0.0f) v += a.w1 * (b.w1 * image.at(0, c, a.i1, b.i1));
        }
        out.at(0, c, y, x) = v;
      }
    }
  }
  return out;
}

} // namespace

Tensor crop_resize(const Tensor& image, const CropSpec& crop) {
  require(image.rank() == 4 && image.dim(0) == 1, ErrorKind::Shape,
          "crop_resize expects a (1, C, H, W) image, got " + image.shape_string());
  validate_crop(crop, image.dim(2), image.dim(3));
  return resample(image, resize_taps(crop.top, crop.height, crop.out_height),
                  resize_taps(crop.left, crop.width, crop.out_width));
}

Var crop_resize(Graph& g, Var image, const CropSpec& crop) {
  const Tensor& iv = g.value(image);
  require(iv.rank() == 4 && iv.dim(0) == 1, ErrorKind::Shape,
          "crop_resize expects a (1, C, H, W) image, got " + iv.shape_string());
  validate_crop(crop, iv.dim(2), iv.dim(3));
  auto ty = resize_taps(crop.top, crop.height, crop.out_height);
  auto tx = resize_taps(crop.left, crop.width, crop.out_width);
  Tensor out = resample(iv, ty, tx);
  const int channels = iv.dim(1);
  return g.emplace("crop_resize", std::move(out), {image}, [=](Graph& gr, Var self) {
    const Tensor dy = gr.grad(self);
    Tensor& dx = gr.grad_buffer(image);
    for (int c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < ty.size(); ++y) {
        const AxisTap& a = ty[y];
        for (std::size_t x = 0; x < tx.size(); ++x) {
          const AxisTap& b = tx[x];
          const float d = dy.at(0, c, static_cast<int>(y), static_cast<int>(x));
          dx.at(0, c, a.i0, b.i0) += a.w0 * b.w0 * d;
          dx.at(0, c, a.i0, b.i1) += a.w0 * b.w1 * d;
          dx.at(0, c, a.i1, b.i0) += a.w1 * b.w0 * d;
          dx.at(0, c, a.i1, b.i1) += a.w1 * b.w1 * d;
        }
      }
    }
  });
}

Var concat_batch(Graph& g, std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::Shape, "concat_batch needs at least one input");
  const Tensor& first = g.value(parts.front());
  require_rank4(first, "concat_batch");
  int total = 0;
  for (Var p : parts) {
    const Tensor& t = g.value(p);
    require(t.rank() == 4 && t.dim(1) == first.dim(1) && t.dim(2) == first.dim(2) &&
                t.dim(3) == first.dim(3),
            ErrorKind::Shape, "concat_batch inputs differ in (C, H, W)");
    total += t.dim(0);
  }
  std::vector<float> values;
  values.reserve(first.size() / static_cast<std::size_t>(first.dim(0)) * static_cast<std::size_t>(total));
  for (Var p : parts) {
    const Tensor& t = g.value(p);
    values.insert(values.end(), t.values().begin(), t.values().end());
  }
  Tensor out({total, first.dim(1), first.dim(2), first.dim(3)}, std::move(values));
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.emplace("concat_batch", std::move(out), inputs, [inputs](Graph& gr, Var self) {
    const Tensor dy = gr.grad(self);
    std::size_t offset = 0;
    for (Var p : inputs) {
      const std::size_t count = gr.value(p).size();
      if (gr.requires_grad(p)) {
        Tensor& dx = gr.grad_buffer(p);
        for (std::size_t i = 0; i < count; ++i) dx[i] += dy[offset + i];
      }
      offset += count;
    }
  });
}

Var select_sample(Graph& g, Var x, int n) {
  const Tensor& xv = g.value(x);
  Tensor out = xv.sample(n);
  const std::size_t per = out.size();
  return g.emplace("select_sample", std::move(out), {x}, [=](Graph& gr, Var self) {
    const Tensor dy = gr.grad(self);
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < per; ++i) dx[static_cast<std::size_t>(n) * per + i] += dy[i];
  });
}

Var sum(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  double s = 0.0;
  for (float v : xv.values()) s += v;
  return g.emplace("sum", Tensor::scalar(static_cast<float>(s)), {x}, [=](Graph& gr, Var self) {
    const float d = gr.grad(self)[0];
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
  });
}

Var dot(Graph& g, Var x, const Tensor& weights) {
  const Tensor& xv = g.value(x);
  require(xv.size() == weights.size(), ErrorKind::Shape, "dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += static_cast<double>(xv[i]) * weights[i];
  return g.emplace("dot", Tensor::scalar(static_cast<float>(s)), {x}, [x, weights](Graph& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const float d = gr.grad(self)[0];
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d * weights[i];
  });
}

Var weighted_sum(Graph& g, std::span<const Var> terms, std::span<const double> weights) {
  require(terms.size() == weights.size() && !terms.empty(), ErrorKind::InvalidArgument,
          "weighted_sum needs one weight per term");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(g.value(terms[i]).size() == 1, ErrorKind::Shape, "weighted_sum terms must be scalars");
    s += weights[i] * g.value(terms[i])[0];
  }
  std::vector<Var> inputs(terms.begin(), terms.end());
  std::vector<double> w(weights.begin(), weights.end());
  return g.emplace("weighted_sum", Tensor::scalar(static_cast<float>(s)), inputs,
                   [inputs, w](Graph& gr, Var self) {
                     const float d = gr.grad(self)[0];
                     for (std::size_t i = 0; i < inputs.size(); ++i) {
                       if (gr.requires_grad(inputs[i])) {
                         gr.grad_buffer(inputs[i])[0] += static_cast<float>(w[i] * d);
                       }
                     }
                   });
}

Var squared_distance(Graph& g, Var x, const Tensor& target) {
  const Tensor& xv = g.value(x);
  require(xv.size() == target.size(), ErrorKind::Shape, "squared_distance size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double d = static_cast<double>(xv[i]) - target[i];
    s += d * d;
  }
  return g.emplace("squared_distance", Tensor::scalar(static_cast<float>(s)), {x},
                   [x, target](Graph& gr, Var self) {
                     const float d = gr.grad(self)[0];
                     const Tensor& xs = gr.value(x);
                     Tensor& dx = gr.grad_buffer(x);
                     for (std::size_t i = 0; i < xs.size(); ++i) dx[i] += 2.0f * d * (xs[i] - target[i]);
                   });
}

Tensor softmax(const Tensor& logits) {
  require_logits(logits, "softmax");
  const std::vector<double> ls = log_softmax_rows(logits);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < ls.size(); ++i) out[i] = static_cast<float>(std::exp(ls[i]));
  return out;
}

Var cross_entropy(Graph& g, Var logits, std::span<const int> labels, std::vector<double>* per_sample) {
  const Tensor& z = g.value(logits);
  require_logits(z, "cross_entropy");
  const int batch = z.dim(0), classes = z.dim(1);
  require(static_cast<int>(labels.size()) == batch, ErrorKind::Shape,
          "cross_entropy label count does not match batch");
  for (int y : labels) {
    require(y >= 0 && y < classes, ErrorKind::InvalidArgument,
            "label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
  }
  const std::vector<double> ls = log_softmax_rows(z);
  double total = 0.0;
  if (per_sample) per_sample->assign(static_cast<std::size_t>(batch), 0.0);
  for (int n = 0; n < batch; ++n) {
    const double l = -ls[static_cast<std::size_t>(n) * classes + labels[static_cast<std::size_t>(n)]];
    total += l;
    if (per_sample) (*per_sample)[static_cast<std::size_t>(n)] = l;
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return g.emplace("cross_entropy", Tensor::scalar(static_cast<float>(total / batch)), {logits},
                   [=](Graph& gr, Var self) {
                     const double d = gr.grad(self)[0] / static_cast<double>(batch);
                     Tensor& dz = gr.grad_buffer(logits);
                     for (int n = 0; n < batch; ++n) {
                       for (int j = 0; j < classes; ++j) {
                         const std::size_t i = static_cast<std::size_t>(n) * classes + j;
                         const double p = std::exp(ls[i]);
                         dz[i] += static_cast<float>(d * (p - (j == ys[static_cast<std::size_t>(n)] ? 1.0 : 0.0)));
                       }
                     }
                   });
}

Var cross_entropy_soft(Graph& g, Var logits, const Tensor& targets, std::vector<double>* per_sample) {
  const Tensor& z = g.value(logits);
  require_logits(z, "cross_entropy");
  require(targets.same_shape(z), ErrorKind::Shape,
          "soft targets " + targets.shape_string() + " do not match logits " + z.shape_string());
  const int batch = z.dim(0), classes = z.dim(1);
  for (int n = 0; n < batch; ++n) {
    double s = 0.0;
    for (int j = 0; j < classes; ++j) {
      const float t = targets[static_cast<std::size_t>(n) * classes + j];
      require(t >= 0.0f, ErrorKind::InvalidArgument, "soft targets must be non-negative");
      s += t;
    }
    require(std::abs(s - 1.0) <= 1e-5, ErrorKind::InvalidArgument,
            "soft target row " + std::to_string(n) + " sums to " + std::to_string(s));
  }
  const std::vector<double> ls = log_softmax_rows(z);
  double total = 0.0;
  if (per_sample) per_sample->assign(static_cast<std::size_t>(batch), 0.0);
  for (int n = 0; n < batch; ++n) {
    double l = 0.0;
    for (int j = 0; j < classes; ++j) {
      const std::size_t i = static_cast<std::size_t>(n) * classes + j;
      l -= targets[i] * ls[i];
    }
    total += l;
    if (per_sample) (*per_sample)[static_cast<std::size_t>(n)] = l;
  }
  return g.emplace("cross_entropy_soft", Tensor::scalar(static_cast<float>(total / batch)), {logits},
                   [=](Graph& gr, Var self) {
                     const double d = gr.grad(self)[0] / static_cast<double>(batch);
                     Tensor& dz = gr.grad_buffer(logits);
                     for (int n = 0; n < batch; ++n) {
                       double tsum = 0.0;
                       for (int j = 0; j < classes; ++j) tsum += targets[static_cast<std::size_t>(n) * classes + j];
                       for (int j = 0; j < classes; ++j) {
                         const std::size_t i = static_cast<std::size_t>(n) * classes + j;
                         dz[i] += static_cast<float>(d * (std::exp(ls[i]) * tsum - targets[i]));
                       }
                     }
                   });
}

Var kl_divergence(Graph& g, Var student_logits, const Tensor& teacher_logits) {
  const Tensor& z = g.value(student_logits);
  require_logits(z, "kl_divergence");
  require(teacher_logits.same_shape(z), ErrorKind::Shape, "teacher/student logits differ in shape");
  const int batch = z.dim(0), classes = z.dim(1);
  const std::vector<double> ls = log_softmax_rows(z);
  const std::vector<double> lt = log_softmax_rows(teacher_logits);
  double total = 0.0;
  for (std::size_t i = 0; i < ls.size(); ++i) total += std::exp(lt[i]) * (lt[i] - ls[i]);
  return g.emplace("kl_divergence", Tensor::scalar(static_cast<float>(total / batch)), {student_logits},
                   [=](Graph& gr, Var self) {
                     const double d = gr.grad(self)[0] / static_cast<double>(batch);
                     Tensor& dz = gr.grad_buffer(student_logits);
                     for (std::size_t i = 0; i < ls.size(); ++i) {
                       dz[i] += static_cast<float>(d * (std::exp(ls[i]) - std::exp(lt[i])));
                     }
                     (void)classes;
                   });
}

Var mean_squared_error(Graph& g, Var x, const Tensor& target) {
  const Tensor& xv = g.value(x);
  require(target.same_shape(xv), ErrorKind::Shape, "mean_squared_error shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double d = static_cast<double>(xv[i]) - target[i];
    s += d * d;
  }
  const double count = static_cast<double>(xv.size());
  return g.emplace("mean_squared_error", Tensor::scalar(static_cast<float>(s / count)), {x},
                   [x, target, count](Graph& gr, Var self) {
                     const double d = gr.grad(self)[0];
                     const Tensor& xs = gr.value(x);
                     Tensor& dx = gr.grad_buffer(x);
                     for (std::size_t i = 0; i < xs.size(); ++i) {
                       dx[i] += static_cast<float>(2.0 * d * (static_cast<double>(xs[i]) - target[i]) / count);
                     }
                   });
}

} // namespace e2d::diffnet
