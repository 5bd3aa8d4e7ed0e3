#include "bicanet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace bicanet::ops {
namespace {

thread_local BranchRecorder* active_recorder = nullptr;

std::string dims(const Shape& s) { return s.str(); }

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return;
  const char* dim = a.n != b.n ? "batch" : a.c != b.c ? "channels" : a.h != b.h ? "height" : "width";
  throw ShapeError(dim, std::string(op) + ": " + dims(a) + " vs " + dims(b));
}

// Output positions o in [lo, hi) whose input tap o*stride - pad + k lands in [0, in).
struct Range {
  int lo;
  int hi;
};

Range valid_outputs(int out, int in, int k, int stride, int pad) {
  // o*stride >= pad - k  and  o*stride <= in - 1 + pad - k
  const int lo_num = pad - k;
  int lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
  const int hi_num = in - 1 + pad - k;
  int hi = hi_num < 0 ? 0 : hi_num / stride + 1;
  lo = std::clamp(lo, 0, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

struct Lerp {
  int i0;
  int i1;
  double frac;
};

std::vector<Lerp> lerp_table(int in, int ratio) {
  const int out = in * ratio;
  std::vector<Lerp> table(out);
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) / ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    table[d] = {i0, i1, src - i0};
  }
  return table;
}

}  // namespace

int conv_out_extent(int in, int kernel, int stride, int pad, const char* dimension) {
  if (stride <= 0) throw std::invalid_argument(std::string("conv2d: stride must be >= 1 in ") + dimension);
  if (kernel <= 0) throw std::invalid_argument(std::string("conv2d: kernel extent must be >= 1 in ") + dimension);
  if (pad < 0) throw std::invalid_argument(std::string("conv2d: padding must be >= 0 in ") + dimension);
  if (kernel > in + 2 * pad) {
    throw ShapeError(dimension, "conv2d: kernel " + std::to_string(kernel) +
                                    " exceeds padded input " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

BranchRecorder::BranchRecorder() : previous_(active_recorder) { active_recorder = this; }

BranchRecorder::~BranchRecorder() { active_recorder = previous_; }

void BranchRecorder::note(std::uint64_t value) noexcept {
  if (!active_recorder) return;
  auto& h = active_recorder->hash_;
  h = (h ^ value) * 0x100000001b3ULL;
}

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias,
              Conv2dParams p) {
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c) {
    throw ShapeError("channels", "conv2d: input has " + std::to_string(xs.c) +
                                     " channels, weight expects " + std::to_string(ws.c));
  }
  const int oh = conv_out_extent(xs.h, ws.h, p.stride_h, p.pad_h, "height");
  const int ow = conv_out_extent(xs.w, ws.w, p.stride_w, p.pad_w, "width");
  if (bias.defined() && bias.value().size() != static_cast<std::size_t>(ws.n)) {
    throw ShapeError("bias", "conv2d: bias has " + std::to_string(bias.value().size()) +
                                 " entries for " + std::to_string(ws.n) + " output channels");
  }
  const int cin = xs.c, cout = ws.n, kh = ws.h, kw = ws.w, ih = xs.h, iw = xs.w;
  const int sh = p.stride_h, sw = p.stride_w, ph = p.pad_h, pw = p.pad_w;

  std::vector<Range> col_range(kw);
  for (int kx = 0; kx < kw; ++kx) col_range[kx] = valid_outputs(ow, iw, kx, sw, pw);
  std::vector<Range> row_range(kh);
  for (int ky = 0; ky < kh; ++ky) row_range[ky] = valid_outputs(oh, ih, ky, sh, ph);

  Tensor<T> out(Shape{xs.n, cout, oh, ow});
  {
    const auto x = input.value().data();
    const auto wt = weight.value().data();
    std::vector<double> acc(static_cast<std::size_t>(oh) * ow);
    for (int b = 0; b < xs.n; ++b) {
      for (int co = 0; co < cout; ++co) {
        const double b0 = bias.defined() ? static_cast<double>(bias.value()[co]) : 0.0;
        std::fill(acc.begin(), acc.end(), b0);
        for (int ci = 0; ci < cin; ++ci) {
          const T* xp = x.data() + (static_cast<std::size_t>(b) * cin + ci) * ih * iw;
          const T* wp = wt.data() + (static_cast<std::size_t>(co) * cin + ci) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const double wv = wp[ky * kw + kx];
              const Range cr = col_range[kx];
              for (int oy = row_range[ky].lo; oy < row_range[ky].hi; ++oy) {
                const T* row = xp + static_cast<std::size_t>(oy * sh - ph + ky) * iw;
                double* arow = acc.data() + static_cast<std::size_t>(oy) * ow;
                if (sw == 1) {
                  const T* r = row + (kx - pw);
                  for (int ox = cr.lo; ox < cr.hi; ++ox) arow[ox] += wv * r[ox];
                } else {
                  for (int ox = cr.lo; ox < cr.hi; ++ox) arow[ox] += wv * row[ox * sw - pw + kx];
                }
              }
            }
          }
        }
        T* op = out.data().data() + (static_cast<std::size_t>(b) * cout + co) * oh * ow;
        for (std::size_t i = 0; i < acc.size(); ++i) op[i] = static_cast<T>(acc[i]);
      }
    }
  }

  return tape.record(
      "conv2d", std::move(out), {input, weight, bias.defined() ? bias : Var<T>(Tensor<T>())},
      [=](const Tensor<T>& g) {
        const auto x = input.value().data();
        const auto wt = weight.value().data();
        const auto gd = g.data();
        const std::size_t oplane = static_cast<std::size_t>(oh) * ow;
        if (input.requires_grad()) {
          Tensor<T> gx(xs);
          std::vector<double> acc(static_cast<std::size_t>(ih) * iw);
          for (int b = 0; b < xs.n; ++b) {
            for (int ci = 0; ci < cin; ++ci) {
              std::fill(acc.begin(), acc.end(), 0.0);
              for (int co = 0; co < cout; ++co) {
                const T* gp = gd.data() + (static_cast<std::size_t>(b) * cout + co) * oplane;
                const T* wp = wt.data() + (static_cast<std::size_t>(co) * cin + ci) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                  for (int kx = 0; kx < kw; ++kx) {
                    const double wv = wp[ky * kw + kx];
                    const Range cr = col_range[kx];
                    for (int oy = row_range[ky].lo; oy < row_range[ky].hi; ++oy) {
                      double* arow = acc.data() + static_cast<std::size_t>(oy * sh - ph + ky) * iw;
                      const T* grow = gp + static_cast<std::size_t>(oy) * ow;
                      if (sw == 1) {
                        double* a = arow + (kx - pw);
                        for (int ox = cr.lo; ox < cr.hi; ++ox) a[ox] += wv * grow[ox];
                      } else {
                        for (int ox = cr.lo; ox < cr.hi; ++ox) arow[ox * sw - pw + kx] += wv * grow[ox];
                      }
                    }
                  }
                }
              }
              T* dst = gx.data().data() + (static_cast<std::size_t>(b) * cin + ci) * ih * iw;
              for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<T>(acc[i]);
            }
          }
          accumulate(input.node(), gx);
        }
        if (weight.requires_grad()) {
          Tensor<T> gw(ws);
          for (int co = 0; co < cout; ++co) {
            for (int ci = 0; ci < cin; ++ci) {
              for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                  double s = 0.0;
                  const Range cr = col_range[kx];
                  for (int b = 0; b < xs.n; ++b) {
                    const T* gp = gd.data() + (static_cast<std::size_t>(b) * cout + co) * oplane;
                    const T* xp = x.data() + (static_cast<std::size_t>(b) * cin + ci) * ih * iw;
                    for (int oy = row_range[ky].lo; oy < row_range[ky].hi; ++oy) {
                      const T* row = xp + static_cast<std::size_t>(oy * sh - ph + ky) * iw;
                      const T* grow = gp + static_cast<std::size_t>(oy) * ow;
                      if (sw == 1) {
                        const T* r = row + (kx - pw);
                        for (int ox = cr.lo; ox < cr.hi; ++ox) s += static_cast<double>(grow[ox]) * r[ox];
                      } else {
                        for (int ox = cr.lo; ox < cr.hi; ++ox)
                          s += static_cast<double>(grow[ox]) * row[ox * sw - pw + kx];
                      }
                    }
                  }
                  gw[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx] = static_cast<T>(s);
                }
              }
            }
          }
          accumulate(weight.node(), gw);
        }
        if (bias.defined() && bias.requires_grad()) {
          Tensor<T> gb(bias.shape());
          for (int co = 0; co < cout; ++co) {
            double s = 0.0;
            for (int b = 0; b < xs.n; ++b) {
              const T* gp = gd.data() + (static_cast<std::size_t>(b) * cout + co) * oplane;
              for (std::size_t i = 0; i < oplane; ++i) s += gp[i];
            }
            gb[co] = static_cast<T>(s);
          }
          accumulate(bias.node(), gb);
        }
      });
}

template <typename T>
Var<T> bilinear_upsample(Tape<T>& tape, const Var<T>& input, int ratio) {
  if (ratio < 1) throw std::invalid_argument("bilinear_upsample: ratio must be >= 1, got " + std::to_string(ratio));
  const Shape xs = input.shape();
  if (ratio == 1) {
    return tape.record("bilinear_upsample", input.value(), {input},
                       [=](const Tensor<T>& g) { accumulate(input.node(), g); });
  }
  const Shape os{xs.n, xs.c, xs.h * ratio, xs.w * ratio};
  const auto ty = lerp_table(xs.h, ratio);
  const auto tx = lerp_table(xs.w, ratio);
  Tensor<T> out(os);
  const auto x = input.value().data();
  for (int p = 0; p < xs.n * xs.c; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * xs.h * xs.w;
    T* dst = out.data().data() + static_cast<std::size_t>(p) * os.h * os.w;
    for (int y = 0; y < os.h; ++y) {
      const Lerp ly = ty[y];
      const T* r0 = src + static_cast<std::size_t>(ly.i0) * xs.w;
      const T* r1 = src + static_cast<std::size_t>(ly.i1) * xs.w;
      for (int xx = 0; xx < os.w; ++xx) {
        const Lerp lx = tx[xx];
        const double top = (1.0 - lx.frac) * r0[lx.i0] + lx.frac * r0[lx.i1];
        const double bot = (1.0 - lx.frac) * r1[lx.i0] + lx.frac * r1[lx.i1];
        dst[static_cast<std::size_t>(y) * os.w + xx] = static_cast<T>((1.0 - ly.frac) * top + ly.frac * bot);
      }
    }
  }
  return tape.record("bilinear_upsample", std::move(out), {input}, [=](const Tensor<T>& g) {
    std::vector<double> acc(xs.numel(), 0.0);
    const auto gd = g.data();
    for (int p = 0; p < xs.n * xs.c; ++p) {
      double* a = acc.data() + static_cast<std::size_t>(p) * xs.h * xs.w;
      const T* gp = gd.data() + static_cast<std::size_t>(p) * os.h * os.w;
      for (int y = 0; y < os.h; ++y) {
        const Lerp ly = ty[y];
        for (int xx = 0; xx < os.w; ++xx) {
          const Lerp lx = tx[xx];
          const double v = gp[static_cast<std::size_t>(y) * os.w + xx];
          a[ly.i0 * xs.w + lx.i0] += v * (1.0 - ly.frac) * (1.0 - lx.frac);
          a[ly.i0 * xs.w + lx.i1] += v * (1.0 - ly.frac) * lx.frac;
          a[ly.i1 * xs.w + lx.i0] += v * ly.frac * (1.0 - lx.frac);
          a[ly.i1 * xs.w + lx.i1] += v * ly.frac * lx.frac;
        }
      }
    }
    Tensor<T> gx(xs);
    for (std::size_t i = 0; i < acc.size(); ++i) gx[i] = static_cast<T>(acc[i]);
    accumulate(input.node(), gx);
  });
}

template <typename T>
Var<T> channel_max_squeeze(Tape<T>& tape, const Var<T>& input) {
  const Shape xs = input.shape();
  const std::size_t plane = xs.plane();
  Tensor<T> out(Shape{xs.n, 1, xs.h, xs.w});
  std::vector<int> arg(static_cast<std::size_t>(xs.n) * plane, 0);
  const auto& x = input.value();
  for (int b = 0; b < xs.n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      T v = x[static_cast<std::size_t>(b) * xs.c * plane + i];
      for (int c = 1; c < xs.c; ++c) {
        const T cand = x[(static_cast<std::size_t>(b) * xs.c + c) * plane + i];
        if (cand > v) {
          v = cand;
          best = c;
        }
      }
      out[static_cast<std::size_t>(b) * plane + i] = v;
      arg[static_cast<std::size_t>(b) * plane + i] = best;
      BranchRecorder::note(static_cast<std::uint64_t>(best));
    }
  }
  return tape.record("channel_max_squeeze", std::move(out), {input}, [=](const Tensor<T>& g) {
    Tensor<T> gx(xs);
    for (int b = 0; b < xs.n; ++b) {
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = static_cast<std::size_t>(b) * plane + i;
        gx[(static_cast<std::size_t>(b) * xs.c + arg[k]) * plane + i] = g[k];
      }
    }
    accumulate(input.node(), gx);
  });
}

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& input) {
  const Shape xs = input.shape();
  const std::size_t plane = xs.plane();
  Tensor<T> out(Shape{xs.n, xs.c, 1, 1});
  const auto x = input.value().data();
  for (int p = 0; p < xs.n * xs.c; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += x[p * plane + i];
    out[p] = static_cast<T>(s / static_cast<double>(plane));
  }
  return tape.record("global_avg_pool", std::move(out), {input}, [=](const Tensor<T>& g) {
    Tensor<T> gx(xs);
    const double inv = 1.0 / static_cast<double>(plane);
    for (int p = 0; p < xs.n * xs.c; ++p) {
      const T v = static_cast<T>(g[p] * inv);
      std::fill_n(gx.data().begin() + p * plane, plane, v);
    }
    accumulate(input.node(), gx);
  });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  const auto x = a.value().data();
  const auto y = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return tape.record("add", std::move(out), {a, b}, [=](const Tensor<T>& g) {
    accumulate(a.node(), g);
    accumulate(b.node(), g);
  });
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as == bs) {
    Tensor<T> out(as);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return tape.record("mul", std::move(out), {a, b}, [=](const Tensor<T>& g) {
      if (a.requires_grad()) {
        Tensor<T> ga(as);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * b.value()[i];
        accumulate(a.node(), ga);
      }
      if (b.requires_grad()) {
        Tensor<T> gb(bs);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * a.value()[i];
        accumulate(b.node(), gb);
      }
    });
  }
  // Broadcast: identify the full operand and the one that is expanded.
  const bool a_full = as.numel() >= bs.numel();
  const Var<T>& full = a_full ? a : b;
  const Var<T>& small = a_full ? b : a;
  const Shape fs = full.shape();
  const Shape ss = small.shape();
  const bool spatial = ss.n == fs.n && ss.c == 1 && ss.h == fs.h && ss.w == fs.w;
  const bool channel = ss.n == fs.n && ss.c == fs.c && ss.h == 1 && ss.w == 1;
  if (!spatial && !channel) {
    const char* dim = ss.n != fs.n ? "batch" : ss.c != fs.c && ss.c != 1 ? "channels" : "spatial";
    throw ShapeError(dim, "mul: cannot broadcast " + dims(ss) + " against " + dims(fs));
  }
  const std::size_t plane = fs.plane();
  auto small_index = [=](std::size_t i) -> std::size_t {
    const std::size_t b = i / (static_cast<std::size_t>(fs.c) * plane);
    if (spatial) return b * plane + i % plane;
    return i / plane;  // (b, c) flattened
  };
  Tensor<T> out(fs);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = full.value()[i] * small.value()[small_index(i)];
  return tape.record("mul", std::move(out), {full, small}, [=](const Tensor<T>& g) {
    if (full.requires_grad()) {
      Tensor<T> gf(fs);
      for (std::size_t i = 0; i < gf.size(); ++i) gf[i] = g[i] * small.value()[small_index(i)];
      accumulate(full.node(), gf);
    }
    if (small.requires_grad()) {
      std::vector<double> acc(ss.numel(), 0.0);
      for (std::size_t i = 0; i < fs.numel(); ++i)
        acc[small_index(i)] += static_cast<double>(g[i]) * full.value()[i];
      Tensor<T> gs(ss);
      for (std::size_t i = 0; i < acc.size(); ++i) gs[i] = static_cast<T>(acc[i]);
      accumulate(small.node(), gs);
    }
  });
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, double alpha) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(alpha * x.value()[i]);
  return tape.record("scale", std::move(out), {x}, [=](const Tensor<T>& g) {
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = static_cast<T>(alpha * g[i]);
    accumulate(x.node(), gx);
  });
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape first = parts[0].shape();
  int channels = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n != first.n) throw ShapeError("batch", "concat_channels: " + dims(s) + " vs " + dims(first));
    if (s.h != first.h) throw ShapeError("height", "concat_channels: " + dims(s) + " vs " + dims(first));
    if (s.w != first.w) throw ShapeError("width", "concat_channels: " + dims(s) + " vs " + dims(first));
    channels += s.c;
  }
  const Shape os{first.n, channels, first.h, first.w};
  const std::size_t plane = os.plane();
  Tensor<T> out(os);
  for (int b = 0; b < os.n; ++b) {
    int offset = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().c;
      const auto src = p.value().data().subspan(static_cast<std::size_t>(b) * pc * plane, pc * plane);
      std::copy(src.begin(), src.end(), out.data().begin() + (static_cast<std::size_t>(b) * channels + offset) * plane);
      offset += pc;
    }
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return tape.record("concat_channels", std::move(out), inputs, [=](const Tensor<T>& g) {
    int offset = 0;
    for (const auto& p : inputs) {
      const Shape ps = p.shape();
      if (p.requires_grad()) {
        Tensor<T> gp(ps);
        for (int b = 0; b < ps.n; ++b) {
          const auto src = g.data().subspan((static_cast<std::size_t>(b) * channels + offset) * plane, ps.c * plane);
          std::copy(src.begin(), src.end(), gp.data().begin() + static_cast<std::size_t>(b) * ps.c * plane);
        }
        accumulate(p.node(), gp);
      }
      offset += ps.c;
    }
  });
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool on = x.value()[i] > T(0);
    out[i] = on ? x.value()[i] : T(0);
    BranchRecorder::note(on);
  }
  return tape.record("relu", std::move(out), {x}, [=](const Tensor<T>& g) {
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x.value()[i] > T(0) ? g[i] : T(0);
    accumulate(x.node(), gx);
  });
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x.value()[i]))));
  }
  auto y = std::make_shared<Tensor<T>>(out);
  return tape.record("sigmoid", std::move(out), {x}, [=](const Tensor<T>& g) {
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double s = (*y)[i];
      gx[i] = static_cast<T>(g[i] * s * (1.0 - s));
    }
    accumulate(x.node(), gx);
  });
}

template <typename T>
Var<T> softmax_channels(Tape<T>& tape, const Var<T>& x) {
  const Shape xs = x.shape();
  const std::size_t plane = xs.plane();
  Tensor<T> out(xs);
  std::vector<double> e(xs.c);
  for (int b = 0; b < xs.n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = static_cast<std::size_t>(b) * xs.c * plane + i;
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < xs.c; ++c) m = std::max(m, static_cast<double>(x.value()[base + c * plane]));
      double z = 0.0;
      for (int c = 0; c < xs.c; ++c) {
        e[c] = std::exp(x.value()[base + c * plane] - m);
        z += e[c];
      }
      for (int c = 0; c < xs.c; ++c) out[base + c * plane] = static_cast<T>(e[c] / z);
    }
  }
  auto y = std::make_shared<Tensor<T>>(out);
  return tape.record("softmax_channels", std::move(out), {x}, [=](const Tensor<T>& g) {
    Tensor<T> gx(xs);
    for (int b = 0; b < xs.n; ++b) {
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t base = static_cast<std::size_t>(b) * xs.c * plane + i;
        double dot = 0.0;
        for (int c = 0; c < xs.c; ++c) dot += static_cast<double>(g[base + c * plane]) * (*y)[base + c * plane];
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t k = base + c * plane;
          gx[k] = static_cast<T>((*y)[k] * (g[k] - dot));
        }
      }
    }
    accumulate(x.node(), gx);
  });
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  double s = 0.0;
  for (const T v : x.value().data()) s += v;
  return tape.record("sum", Tensor<T>(Shape{}, static_cast<T>(s)), {x}, [=](const Tensor<T>& g) {
    accumulate(x.node(), Tensor<T>(x.shape(), g[0]));
  });
}

template <typename T>
Var<T> crop(Tape<T>& tape, const Var<T>& x, int h, int w) {
  const Shape xs = x.shape();
  if (h < 1 || h > xs.h) throw ShapeError("height", "crop: " + std::to_string(h) + " from " + dims(xs));
  if (w < 1 || w > xs.w) throw ShapeError("width", "crop: " + std::to_string(w) + " from " + dims(xs));
  if (h == xs.h && w == xs.w) {
    return tape.record("crop", x.value(), {x}, [=](const Tensor<T>& g) { accumulate(x.node(), g); });
  }
  const Shape os{xs.n, xs.c, h, w};
  Tensor<T> out(os);
  for (int p = 0; p < xs.n * xs.c; ++p)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(static_cast<std::size_t>(p) * h + y) * w + xx] = x.value()[(static_cast<std::size_t>(p) * xs.h + y) * xs.w + xx];
  return tape.record("crop", std::move(out), {x}, [=](const Tensor<T>& g) {
    Tensor<T> gx(xs);
    for (int p = 0; p < xs.n * xs.c; ++p)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          gx[(static_cast<std::size_t>(p) * xs.h + y) * xs.w + xx] = g[(static_cast<std::size_t>(p) * h + y) * w + xx];
    accumulate(x.node(), gx);
  });
}

template <typename T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                  double momentum, double eps) {
  const Shape xs = x.shape();
  const int channels = xs.c;
  if (gamma.value().size() != static_cast<std::size_t>(channels) ||
      beta.value().size() != static_cast<std::size_t>(channels) ||
      running_mean.size() != static_cast<std::size_t>(channels) ||
      running_var.size() != static_cast<std::size_t>(channels)) {
    throw ShapeError("channels", "batch_norm: parameters do not match " + std::to_string(channels) + " channels");
  }
  const std::size_t plane = xs.plane();
  const double count = static_cast<double>(xs.n) * plane;
  std::vector<double> mean(channels), inv_std(channels);
  for (int c = 0; c < channels; ++c) {
    if (training) {
      double s = 0.0;
      for (int b = 0; b < xs.n; ++b) {
        const T* p = x.value().data().data() + (static_cast<std::size_t>(b) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / count;
      double v = 0.0;
      for (int b = 0; b < xs.n; ++b) {
        const T* p = x.value().data().data() + (static_cast<std::size_t>(b) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / count;
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? v / (count - 1) : var;
      running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * m);
      running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
    } else {
      mean[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
    }
  }
  Tensor<T> out(xs);
  auto xhat = std::make_shared<std::vector<double>>(xs.numel());
  for (int b = 0; b < xs.n; ++b) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(b) * channels + c) * plane;
      const double gm = gamma.value()[c], bt = beta.value()[c];
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (x.value()[base + i] - mean[c]) * inv_std[c];
        (*xhat)[base + i] = h;
        out[base + i] = static_cast<T>(gm * h + bt);
      }
    }
  }
  return tape.record("batch_norm", std::move(out), {x, gamma, beta}, [=](const Tensor<T>& g) {
    Tensor<T> gx(xs);
    Tensor<T> gg(gamma.shape());
    Tensor<T> gb(beta.shape());
    for (int c = 0; c < channels; ++c) {
      double sum_g = 0.0, sum_gh = 0.0;
      for (int b = 0; b < xs.n; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += g[base + i];
          sum_gh += g[base + i] * (*xhat)[base + i];
        }
      }
      gg[c] = static_cast<T>(sum_gh);
      gb[c] = static_cast<T>(sum_g);
      if (!x.requires_grad()) continue;
      const double gm = gamma.value()[c];
      for (int b = 0; b < xs.n; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          double d;
          if (training) {
            d = gm * inv_std[c] / count * (count * g[base + i] - sum_g - (*xhat)[base + i] * sum_gh);
          } else {
            d = gm * inv_std[c] * g[base + i];
          }
          gx[base + i] = static_cast<T>(d);
        }
      }
    }
    accumulate(x.node(), gx);
    accumulate(gamma.node(), gg);
    accumulate(beta.node(), gb);
  });
}

template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, const LabelMap& labels,
                             std::span<const std::uint8_t> mask) {
  const Shape ls = logits.shape();
  if (labels.n != ls.n) throw ShapeError("batch", "cross_entropy: labels batch " + std::to_string(labels.n));
  if (labels.h != ls.h) throw ShapeError("height", "cross_entropy: labels height " + std::to_string(labels.h));
  if (labels.w != ls.w) throw ShapeError("width", "cross_entropy: labels width " + std::to_string(labels.w));
  if (mask.size() != labels.size()) throw ShapeError("mask", "cross_entropy: mask size mismatch");
  const std::size_t plane = ls.plane();
  const int classes = ls.c;
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    if (labels.data[i] >= classes) {
      throw DataError("label " + std::to_string(labels.data[i]) + " at pixel index " +
                      std::to_string(i) + " is outside [0, " + std::to_string(classes) + ")");
    }
    ++count;
  }
  // Per selected pixel softmax is kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(count * classes);
  double total = 0.0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const std::size_t b = i / plane, pix = i % plane;
    const std::size_t base = b * classes * plane + pix;
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) m = std::max(m, static_cast<double>(logits.value()[base + c * plane]));
    double z = 0.0;
    for (int c = 0; c < classes; ++c) {
      const double e = std::exp(logits.value()[base + c * plane] - m);
      (*probs)[k * classes + c] = e;
      z += e;
    }
    for (int c = 0; c < classes; ++c) (*probs)[k * classes + c] /= z;
    const int t = labels.data[i];
    total += -(static_cast<double>(logits.value()[base + t * plane]) - m - std::log(z));
    ++k;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  std::vector<std::uint8_t> mask_copy(mask.begin(), mask.end());
  LabelMap lab = labels;
  return tape.record("softmax_cross_entropy", Tensor<T>(Shape{}, static_cast<T>(loss)), {logits},
                     [=, mask_copy = std::move(mask_copy), lab = std::move(lab)](const Tensor<T>& g) {
                       Tensor<T> gx(ls);
                       if (count) {
                         const double scale_g = g[0] / static_cast<double>(count);
                         std::size_t kk = 0;
                         for (std::size_t i = 0; i < mask_copy.size(); ++i) {
                           if (!mask_copy[i]) continue;
                           const std::size_t b = i / plane, pix = i % plane;
                           const std::size_t base = b * classes * plane + pix;
                           for (int c = 0; c < classes; ++c) {
                             const double target = c == lab.data[i] ? 1.0 : 0.0;
                             gx[base + c * plane] = static_cast<T>(scale_g * ((*probs)[kk * classes + c] - target));
                           }
                           ++kk;
                         }
                       }
                       accumulate(logits.node(), gx);
                     });
}

template <typename T>
std::vector<double> target_probabilities(const Tensor<T>& logits, const LabelMap& labels) {
  const Shape ls = logits.shape();
  if (labels.n != ls.n || labels.h != ls.h || labels.w != ls.w) {
    throw ShapeError("labels", "target_probabilities: labels do not match logits " + dims(ls));
  }
  const std::size_t plane = ls.plane();
  std::vector<double> out(labels.size(), 1.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels.data[i];
    if (t == LabelMap::kIgnore) continue;
    if (t >= ls.c) {
      throw DataError("label " + std::to_string(t) + " at pixel index " + std::to_string(i) +
                      " is outside [0, " + std::to_string(ls.c) + ")");
    }
    const std::size_t base = (i / plane) * ls.c * plane + i % plane;
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < ls.c; ++c) m = std::max(m, static_cast<double>(logits[base + c * plane]));
    double z = 0.0;
    for (int c = 0; c < ls.c; ++c) z += std::exp(logits[base + c * plane] - m);
    out[i] = std::exp(logits[base + t * plane] - m) / z;
  }
  return out;
}

template <typename T>
LabelMap argmax_channels(const Tensor<T>& logits) {
  const Shape ls = logits.shape();
  if (ls.c > LabelMap::kIgnore) throw std::invalid_argument("argmax_channels: too many classes");
  const std::size_t plane = ls.plane();
  LabelMap out(ls.n, ls.h, ls.w);
  for (int b = 0; b < ls.n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = static_cast<std::size_t>(b) * ls.c * plane + i;
      int best = 0;
      for (int c = 1; c < ls.c; ++c)
        if (logits[base + c * plane] > logits[base + best * plane]) best = c;
      out.data[static_cast<std::size_t>(b) * plane + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

#define BICANET_INSTANTIATE_OPS(T)                                                              \
  template Var<T> conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, Conv2dParams); \
  template Var<T> bilinear_upsample(Tape<T>&, const Var<T>&, int);                            \
  template Var<T> channel_max_squeeze(Tape<T>&, const Var<T>&);                               \
  template Var<T> global_avg_pool(Tape<T>&, const Var<T>&);                                   \
  template Var<T> add(Tape<T>&, const Var<T>&, const Var<T>&);                                \
  template Var<T> mul(Tape<T>&, const Var<T>&, const Var<T>&);                                \
  template Var<T> scale(Tape<T>&, const Var<T>&, double);                                     \
  template Var<T> concat_channels(Tape<T>&, std::span<const Var<T>>);                         \
  template Var<T> relu(Tape<T>&, const Var<T>&);                                              \
  template Var<T> sigmoid(Tape<T>&, const Var<T>&);                                           \
  template Var<T> softmax_channels(Tape<T>&, const Var<T>&);                                  \
  template Var<T> sum(Tape<T>&, const Var<T>&);                                               \
  template Var<T> crop(Tape<T>&, const Var<T>&, int, int);                                    \
  template Var<T> batch_norm(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,           \
                             Tensor<T>&, Tensor<T>&, bool, double, double);                   \
  template Var<T> softmax_cross_entropy(Tape<T>&, const Var<T>&, const LabelMap&,             \
                                        std::span<const std::uint8_t>);                       \
  template std::vector<double> target_probabilities(const Tensor<T>&, const LabelMap&);       \
  template LabelMap argmax_channels(const Tensor<T>&);

BICANET_INSTANTIATE_OPS(float)
BICANET_INSTANTIATE_OPS(double)

#undef BICANET_INSTANTIATE_OPS

}  // namespace bicanet::ops
