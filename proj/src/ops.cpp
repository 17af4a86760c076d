#include "numsnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace numsnet {

namespace {

template <class T>
bool track(std::initializer_list<const TensorT<T>*> ins) {
    if (!GradMode::enabled()) return false;
    for (auto* t : ins)
        if (t->impl()->needs_grad()) return true;
    return false;
}

template <class T, class F>
void attach(TensorT<T>& out, const char* op, std::initializer_list<TensorT<T>> inputs, F apply) {
    auto fn = std::make_shared<GradFn<T>>();
    fn->op = op;
    fn->inputs.reserve(inputs.size());
    for (auto& t : inputs) fn->inputs.push_back(t.impl());
    fn->apply = std::move(apply);
    out.impl()->grad_fn = std::move(fn);
}

template <class T>
void check_rank(const char* op, const TensorT<T>& t, std::size_t rank, const char* what) {
    if (!t.defined()) throw ValueError(std::string(op) + ": undefined " + what + " tensor");
    if (t.shape().rank() != rank)
        throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got shape " + t.shape().str());
}

template <class T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.defined() || !b.defined()) throw ValueError(std::string(op) + ": undefined tensor");
    if (a.shape() != b.shape()) {
        const auto& da = a.shape().dims;
        const auto& db = b.shape().dims;
        std::size_t ax = 0;
        while (ax < std::min(da.size(), db.size()) && da[ax] == db[ax]) ++ax;
        throw ShapeError(std::string(op) + ": shape mismatch at axis " + std::to_string(ax) +
                         ": " + a.shape().str() + " vs " + b.shape().str());
    }
}

// C[m][n] += A[m][k] * B[k][n], all row-major contiguous.
template <class T>
void gemm_acc(T* __restrict c, const T* __restrict a, const T* __restrict b, std::int64_t m,
              std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m][n] += dot(A[i][0..len), B[j][0..len)) — B used transposed.
template <class T>
void gemm_abt_acc(T* __restrict c, const T* __restrict a, const T* __restrict b, std::int64_t m,
                  std::int64_t len, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * len;
        T* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * len;
            T acc = T(0);
            for (std::int64_t p = 0; p < len; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// col layout: [cin*kh*kw][oh*ow]
template <class T>
void im2col(const T* x, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t ph, std::int64_t pw, std::int64_t stride,
            std::int64_t oh, std::int64_t ow, T* col) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* xc = x + ci * h * w;
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                T* row = col + ((ci * kh + ki) * kw + kj) * oh * ow;
                for (std::int64_t i = 0; i < oh; ++i) {
                    const std::int64_t ih = i * stride + ki - ph;
                    T* dst = row + i * ow;
                    if (ih < 0 || ih >= h) {
                        std::fill(dst, dst + ow, T(0));
                        continue;
                    }
                    const T* src = xc + ih * w;
                    for (std::int64_t j = 0; j < ow; ++j) {
                        const std::int64_t iw = j * stride + kj - pw;
                        dst[j] = (iw >= 0 && iw < w) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_acc(const T* col, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
                std::int64_t kw, std::int64_t ph, std::int64_t pw, std::int64_t stride,
                std::int64_t oh, std::int64_t ow, T* x) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
        T* xc = x + ci * h * w;
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const T* row = col + ((ci * kh + ki) * kw + kj) * oh * ow;
                for (std::int64_t i = 0; i < oh; ++i) {
                    const std::int64_t ih = i * stride + ki - ph;
                    if (ih < 0 || ih >= h) continue;
                    T* dst = xc + ih * w;
                    const T* src = row + i * ow;
                    for (std::int64_t j = 0; j < ow; ++j) {
                        const std::int64_t iw = j * stride + kj - pw;
                        if (iw >= 0 && iw < w) dst[iw] += src[j];
                    }
                }
            }
        }
    }
}

}  // namespace

// --- conv2d ------------------------------------------------------------------

template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  Padding padding, int stride) {
    check_rank("conv2d", input, 4, "input");
    check_rank("conv2d", weight, 4, "weight");
    check_rank("conv2d", bias, 1, "bias");
    if (stride < 1) throw ValueError("conv2d: stride must be >= 1");

    const std::int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != cin)
        throw ShapeError("conv2d: channel axis mismatch: input has Cin=" + std::to_string(cin) +
                         ", weight expects Cin=" + std::to_string(weight.dim(1)));
    if (bias.dim(0) != cout)
        throw ShapeError("conv2d: bias extent " + std::to_string(bias.dim(0)) +
                         " does not match Cout=" + std::to_string(cout));
    if (padding == Padding::same && (kh % 2 == 0 || kw % 2 == 0))
        throw ShapeError("conv2d: same padding requires odd kernel extents, got " +
                         weight.shape().str());
    const std::int64_t ph = padding == Padding::same ? (kh - 1) / 2 : 0;
    const std::int64_t pw = padding == Padding::same ? (kw - 1) / 2 : 0;
    if (h + 2 * ph < kh)
        throw ShapeError("conv2d: kernel height " + std::to_string(kh) +
                         " exceeds padded input height " + std::to_string(h + 2 * ph));
    if (w + 2 * pw < kw)
        throw ShapeError("conv2d: kernel width " + std::to_string(kw) +
                         " exceeds padded input width " + std::to_string(w + 2 * pw));
    const std::int64_t oh = (h + 2 * ph - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * pw - kw) / stride + 1;
    const std::int64_t ckk = cin * kh * kw;
    const std::int64_t ohw = oh * ow;

    auto out = TensorT<T>::zeros(Shape{n, cout, oh, ow});
    {
        std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
        const T* xd = input.data().data();
        const T* wd = weight.data().data();
        const T* bd = bias.data().data();
        T* od = out.mutable_data().data();
        for (std::int64_t b = 0; b < n; ++b) {
            im2col(xd + b * cin * h * w, cin, h, w, kh, kw, ph, pw, stride, oh, ow, col.data());
            T* ob = od + b * cout * ohw;
            for (std::int64_t oc = 0; oc < cout; ++oc)
                std::fill(ob + oc * ohw, ob + (oc + 1) * ohw, bd[oc]);
            gemm_acc(ob, wd, col.data(), cout, ckk, ohw);
        }
    }

    if (track<T>({&input, &weight, &bias})) {
        auto ix = input.impl();
        auto iw = weight.impl();
        auto ib = bias.impl();
        attach(out, "conv2d", {input, weight, bias},
               [ix, iw, ib, n, cin, h, w, cout, kh, kw, ph, pw, stride, oh, ow, ckk,
                ohw](const std::vector<T>& g) {
                   const bool need_x = ix->needs_grad();
                   const bool need_w = iw->needs_grad();
                   const bool need_b = ib->needs_grad();
                   if (need_b) {
                       ib->ensure_grad();
                       for (std::int64_t b = 0; b < n; ++b)
                           for (std::int64_t oc = 0; oc < cout; ++oc) {
                               const T* go = g.data() + (b * cout + oc) * ohw;
                               T acc = T(0);
                               for (std::int64_t j = 0; j < ohw; ++j) acc += go[j];
                               ib->grad[oc] += acc;
                           }
                   }
                   if (!need_x && !need_w) return;
                   std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
                   std::vector<T> dcol;
                   std::vector<T> wt;
                   if (need_x) {
                       ix->ensure_grad();
                       dcol.resize(static_cast<std::size_t>(ckk * ohw));
                       // W transposed to [ckk][cout] once
                       wt.resize(static_cast<std::size_t>(ckk * cout));
                       for (std::int64_t oc = 0; oc < cout; ++oc)
                           for (std::int64_t r = 0; r < ckk; ++r)
                               wt[r * cout + oc] = iw->data[oc * ckk + r];
                   }
                   if (need_w) iw->ensure_grad();
                   for (std::int64_t b = 0; b < n; ++b) {
                       const T* go = g.data() + b * cout * ohw;
                       if (need_w || need_x)
                           im2col(ix->data.data() + b * cin * h * w, cin, h, w, kh, kw, ph, pw,
                                  stride, oh, ow, col.data());
                       if (need_w) gemm_abt_acc(iw->grad.data(), go, col.data(), cout, ohw, ckk);
                       if (need_x) {
                           std::fill(dcol.begin(), dcol.end(), T(0));
                           gemm_acc(dcol.data(), wt.data(), go, ckk, cout, ohw);
                           col2im_acc(dcol.data(), cin, h, w, kh, kw, ph, pw, stride, oh, ow,
                                      ix->grad.data() + b * cin * h * w);
                       }
                   }
               });
    }
    return out;
}

// --- conv_transpose2d ---------------------------------------------------------

template <class T>
TensorT<T> conv_transpose2d(const TensorT<T>& input, const TensorT<T>& weight,
                            const TensorT<T>& bias) {
    check_rank("conv_transpose2d", input, 4, "input");
    check_rank("conv_transpose2d", weight, 4, "weight");
    check_rank("conv_transpose2d", bias, 1, "bias");
    const std::int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (weight.dim(2) != 2 || weight.dim(3) != 2)
        throw ShapeError("conv_transpose2d: kernel must be 2x2, got " + weight.shape().str());
    if (weight.dim(0) != cin)
        throw ShapeError("conv_transpose2d: channel axis mismatch: input has Cin=" +
                         std::to_string(cin) + ", weight expects Cin=" +
                         std::to_string(weight.dim(0)));
    const std::int64_t cout = weight.dim(1);
    if (bias.dim(0) != cout)
        throw ShapeError("conv_transpose2d: bias extent " + std::to_string(bias.dim(0)) +
                         " does not match Cout=" + std::to_string(cout));
    const std::int64_t hw = h * w;
    const std::int64_t c4 = cout * 4;

    auto out = TensorT<T>::zeros(Shape{n, cout, 2 * h, 2 * w});
    {
        // weight [cin][cout][2][2] transposed to [cout*4][cin]
        std::vector<T> wt(static_cast<std::size_t>(c4 * cin));
        const T* wd = weight.data().data();
        for (std::int64_t ci = 0; ci < cin; ++ci)
            for (std::int64_t q = 0; q < c4; ++q) wt[q * cin + ci] = wd[ci * c4 + q];
        std::vector<T> tmp(static_cast<std::size_t>(c4 * hw));
        const T* xd = input.data().data();
        const T* bd = bias.data().data();
        T* od = out.mutable_data().data();
        for (std::int64_t b = 0; b < n; ++b) {
            std::fill(tmp.begin(), tmp.end(), T(0));
            gemm_acc(tmp.data(), wt.data(), xd + b * cin * hw, c4, cin, hw);
            for (std::int64_t co = 0; co < cout; ++co) {
                T* oc = od + (b * cout + co) * 4 * hw;  // [2h][2w] slab
                for (std::int64_t di = 0; di < 2; ++di)
                    for (std::int64_t dj = 0; dj < 2; ++dj) {
                        const T* src = tmp.data() + ((co * 2 + di) * 2 + dj) * hw;
                        for (std::int64_t i = 0; i < h; ++i) {
                            T* dst = oc + (2 * i + di) * 2 * w + dj;
                            const T* s = src + i * w;
                            for (std::int64_t j = 0; j < w; ++j) dst[2 * j] = s[j] + bd[co];
                        }
                    }
            }
        }
    }

    if (track<T>({&input, &weight, &bias})) {
        auto ix = input.impl();
        auto iw = weight.impl();
        auto ib = bias.impl();
        attach(out, "conv_transpose2d", {input, weight, bias},
               [ix, iw, ib, n, cin, h, w, cout, hw, c4](const std::vector<T>& g) {
                   const bool need_x = ix->needs_grad();
                   const bool need_w = iw->needs_grad();
                   const bool need_b = ib->needs_grad();
                   if (need_x) ix->ensure_grad();
                   if (need_w) iw->ensure_grad();
                   if (need_b) ib->ensure_grad();
                   std::vector<T> dtmp(static_cast<std::size_t>(c4 * hw));
                   for (std::int64_t b = 0; b < n; ++b) {
                       const T* gb = g.data() + b * cout * 4 * hw;
                       for (std::int64_t co = 0; co < cout; ++co) {
                           const T* gc = gb + co * 4 * hw;
                           if (need_b) {
                               T acc = T(0);
                               for (std::int64_t e = 0; e < 4 * hw; ++e) acc += gc[e];
                               ib->grad[co] += acc;
                           }
                           for (std::int64_t di = 0; di < 2; ++di)
                               for (std::int64_t dj = 0; dj < 2; ++dj) {
                                   T* dst = dtmp.data() + ((co * 2 + di) * 2 + dj) * hw;
                                   for (std::int64_t i = 0; i < h; ++i) {
                                       const T* s = gc + (2 * i + di) * 2 * w + dj;
                                       T* d = dst + i * w;
                                       for (std::int64_t j = 0; j < w; ++j) d[j] = s[2 * j];
                                   }
                               }
                       }
                       if (need_x)
                           gemm_acc(ix->grad.data() + b * cin * hw, iw->data.data(), dtmp.data(),
                                    cin, c4, hw);
                       if (need_w)
                           gemm_abt_acc(iw->grad.data(), ix->data.data() + b * cin * hw,
                                        dtmp.data(), cin, hw, c4);
                   }
               });
    }
    return out;
}

// --- maxpool2d -----------------------------------------------------------------

template <class T>
TensorT<T> maxpool2d(const TensorT<T>& input) {
    check_rank("maxpool2d", input, 4, "input");
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % 2 != 0)
        throw ShapeError("maxpool2d: height axis must be even, got " + std::to_string(h));
    if (w % 2 != 0)
        throw ShapeError("maxpool2d: width axis must be even, got " + std::to_string(w));
    const std::int64_t oh = h / 2, ow = w / 2;

    auto out = TensorT<T>::zeros(Shape{n, c, oh, ow});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    {
        const T* xd = input.data().data();
        T* od = out.mutable_data().data();
        std::int64_t o = 0;
        for (std::int64_t bc = 0; bc < n * c; ++bc) {
            const T* plane = xd + bc * h * w;
            for (std::int64_t i = 0; i < oh; ++i)
                for (std::int64_t j = 0; j < ow; ++j, ++o) {
                    std::int64_t base = bc * h * w + 2 * i * w + 2 * j;
                    // first occurrence in row-major order wins ties
                    std::int64_t best = base;
                    T bv = plane[2 * i * w + 2 * j];
                    const std::int64_t cand[3] = {base + 1, base + w, base + w + 1};
                    const T cv[3] = {plane[2 * i * w + 2 * j + 1], plane[(2 * i + 1) * w + 2 * j],
                                     plane[(2 * i + 1) * w + 2 * j + 1]};
                    for (int q = 0; q < 3; ++q)
                        if (cv[q] > bv) {
                            bv = cv[q];
                            best = cand[q];
                        }
                    od[o] = bv;
                    argmax[static_cast<std::size_t>(o)] = best;
                }
        }
    }

    if (track<T>({&input})) {
        auto ix = input.impl();
        attach(out, "maxpool2d", {input},
               [ix, argmax = std::move(argmax)](const std::vector<T>& g) {
                   if (!ix->needs_grad()) return;
                   ix->ensure_grad();
                   for (std::size_t o = 0; o < g.size(); ++o)
                       ix->grad[static_cast<std::size_t>(argmax[o])] += g[o];
               });
    }
    return out;
}

// --- concat / slice --------------------------------------------------------------

template <class T>
TensorT<T> concat_channels(std::span<const TensorT<T>> parts) {
    if (parts.empty()) throw ValueError("concat_channels: no inputs");
    check_rank("concat_channels", parts[0], 4, "input");
    const std::int64_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
    std::int64_t ctotal = 0;
    for (const auto& p : parts) {
        check_rank("concat_channels", p, 4, "input");
        if (p.dim(0) != n)
            throw ShapeError("concat_channels: batch axis mismatch: " + p.shape().str() + " vs " +
                             parts[0].shape().str());
        if (p.dim(2) != h || p.dim(3) != w)
            throw ShapeError("concat_channels: spatial axes mismatch: " + p.shape().str() +
                             " vs " + parts[0].shape().str());
        ctotal += p.dim(1);
    }
    const std::int64_t hw = h * w;
    auto out = TensorT<T>::zeros(Shape{n, ctotal, h, w});
    {
        T* od = out.mutable_data().data();
        for (std::int64_t b = 0; b < n; ++b) {
            std::int64_t coff = 0;
            for (const auto& p : parts) {
                const std::int64_t pc = p.dim(1);
                std::memcpy(od + (b * ctotal + coff) * hw, p.data().data() + b * pc * hw,
                            static_cast<std::size_t>(pc * hw) * sizeof(T));
                coff += pc;
            }
        }
    }

    bool any = false;
    for (const auto& p : parts) any = any || (GradMode::enabled() && p.impl()->needs_grad());
    if (any && GradMode::enabled()) {
        auto fn = std::make_shared<GradFn<T>>();
        fn->op = "concat_channels";
        std::vector<std::int64_t> chans;
        for (const auto& p : parts) {
            fn->inputs.push_back(p.impl());
            chans.push_back(p.dim(1));
        }
        auto inputs = fn->inputs;  // shared copies for the closure
        fn->apply = [inputs, chans, n, ctotal, hw](const std::vector<T>& g) {
            std::int64_t coff = 0;
            for (std::size_t k = 0; k < inputs.size(); ++k) {
                const std::int64_t pc = chans[k];
                auto& in = inputs[k];
                if (in->needs_grad()) {
                    in->ensure_grad();
                    for (std::int64_t b = 0; b < n; ++b) {
                        const T* src = g.data() + (b * ctotal + coff) * hw;
                        T* dst = in->grad.data() + b * pc * hw;
                        for (std::int64_t e = 0; e < pc * hw; ++e) dst[e] += src[e];
                    }
                }
                coff += pc;
            }
        };
        out.impl()->grad_fn = std::move(fn);
    }
    return out;
}

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    const TensorT<T> parts[2] = {a, b};
    return concat_channels(std::span<const TensorT<T>>(parts, 2));
}

template <class T>
TensorT<T> slice_channels(const TensorT<T>& x, std::int64_t c0, std::int64_t c1) {
    check_rank("slice_channels", x, 4, "input");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw ShapeError("slice_channels: invalid channel range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for C=" + std::to_string(c));
    const std::int64_t pc = c1 - c0, hw = h * w;
    auto out = TensorT<T>::zeros(Shape{n, pc, h, w});
    T* od = out.mutable_data().data();
    for (std::int64_t b = 0; b < n; ++b)
        std::memcpy(od + b * pc * hw, x.data().data() + (b * c + c0) * hw,
                    static_cast<std::size_t>(pc * hw) * sizeof(T));

    if (track<T>({&x})) {
        auto ix = x.impl();
        attach(out, "slice_channels", {x}, [ix, n, c, c0, pc, hw](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            ix->ensure_grad();
            for (std::int64_t b = 0; b < n; ++b) {
                const T* src = g.data() + b * pc * hw;
                T* dst = ix->grad.data() + (b * c + c0) * hw;
                for (std::int64_t e = 0; e < pc * hw; ++e) dst[e] += src[e];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> nearest_upsample2d(const TensorT<T>& x, int factor) {
    check_rank("nearest_upsample2d", x, 4, "input");
    if (factor < 1) throw ValueError("nearest_upsample2d: factor must be >= 1");
    if (factor == 1) return x;
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t f = factor;
    auto out = TensorT<T>::zeros(Shape{n, c, h * f, w * f});
    {
        const T* xd = x.data().data();
        T* od = out.mutable_data().data();
        for (std::int64_t bc = 0; bc < n * c; ++bc) {
            const T* src = xd + bc * h * w;
            T* dst = od + bc * h * f * w * f;
            for (std::int64_t i = 0; i < h * f; ++i) {
                const T* s = src + (i / f) * w;
                T* d = dst + i * w * f;
                for (std::int64_t j = 0; j < w * f; ++j) d[j] = s[j / f];
            }
        }
    }
    if (track<T>({&x})) {
        auto ix = x.impl();
        attach(out, "nearest_upsample2d", {x}, [ix, n, c, h, w, f](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            ix->ensure_grad();
            for (std::int64_t bc = 0; bc < n * c; ++bc) {
                const T* src = g.data() + bc * h * f * w * f;
                T* dst = ix->grad.data() + bc * h * w;
                for (std::int64_t i = 0; i < h * f; ++i) {
                    const T* s = src + i * w * f;
                    T* d = dst + (i / f) * w;
                    for (std::int64_t j = 0; j < w * f; ++j) d[j / f] += s[j];
                }
            }
        });
    }
    return out;
}

// --- activations -------------------------------------------------------------------

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    if (!x.defined()) throw ValueError("relu: undefined tensor");
    auto out = TensorT<T>::zeros(x.shape());
    const T* xd = x.data().data();
    T* od = out.mutable_data().data();
    const std::size_t sz = x.data().size();
    for (std::size_t i = 0; i < sz; ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
    if (track<T>({&x})) {
        auto ix = x.impl();
        attach(out, "relu", {x}, [ix](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            ix->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (ix->data[i] > T(0)) ix->grad[i] += g[i];
        });
    }
    return out;
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    if (!x.defined()) throw ValueError("sigmoid: undefined tensor");
    auto out = TensorT<T>::zeros(x.shape());
    const T* xd = x.data().data();
    T* od = out.mutable_data().data();
    const std::size_t sz = x.data().size();
    for (std::size_t i = 0; i < sz; ++i) {
        const T v = xd[i];
        if (v >= T(0)) {
            const T e = std::exp(-v);
            od[i] = T(1) / (T(1) + e);
        } else {
            const T e = std::exp(v);
            od[i] = e / (T(1) + e);
        }
    }
    if (track<T>({&x})) {
        auto ix = x.impl();
        std::weak_ptr<TensorImpl<T>> wout = out.impl();
        attach(out, "sigmoid", {x}, [ix, wout](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            auto o = wout.lock();
            ix->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T y = o->data[i];
                ix->grad[i] += g[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// --- batchnorm2d ----------------------------------------------------------------------

template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       TensorT<T>& running_mean, TensorT<T>& running_var, Mode mode, T momentum,
                       T eps) {
    check_rank("batchnorm2d", x, 4, "input");
    check_rank("batchnorm2d", gamma, 1, "gamma");
    check_rank("batchnorm2d", beta, 1, "beta");
    check_rank("batchnorm2d", running_mean, 1, "running_mean");
    check_rank("batchnorm2d", running_var, 1, "running_var");
    if (eps <= T(0)) throw ValueError("batchnorm2d: eps must be > 0");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    for (const TensorT<T>* t : {&gamma, &beta, static_cast<const TensorT<T>*>(&running_mean),
                                static_cast<const TensorT<T>*>(&running_var)})
        if (t->dim(0) != c)
            throw ShapeError("batchnorm2d: per-channel parameter extent " +
                             std::to_string(t->dim(0)) + " does not match channel axis C=" +
                             std::to_string(c));
    const std::int64_t hw = h * w;
    const std::int64_t m = n * hw;  // elements per channel

    auto out = TensorT<T>::zeros(x.shape());
    const T* xd = x.data().data();
    T* od = out.mutable_data().data();
    const T* gd = gamma.data().data();
    const T* bd = beta.data().data();

    if (mode == Mode::train) {
        std::vector<T> meanv(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
        std::vector<T> xhat(x.data().size());
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (std::int64_t b = 0; b < n; ++b) {
                const T* p = xd + (b * c + ch) * hw;
                for (std::int64_t e = 0; e < hw; ++e) s += p[e];
            }
            const T mu = s / static_cast<T>(m);
            T v = T(0);
            for (std::int64_t b = 0; b < n; ++b) {
                const T* p = xd + (b * c + ch) * hw;
                for (std::int64_t e = 0; e < hw; ++e) {
                    const T d = p[e] - mu;
                    v += d * d;
                }
            }
            const T var = v / static_cast<T>(m);
            meanv[ch] = mu;
            invstd[ch] = T(1) / std::sqrt(var + eps);
            for (std::int64_t b = 0; b < n; ++b) {
                const T* p = xd + (b * c + ch) * hw;
                T* xh = xhat.data() + (b * c + ch) * hw;
                T* o = od + (b * c + ch) * hw;
                for (std::int64_t e = 0; e < hw; ++e) {
                    xh[e] = (p[e] - mu) * invstd[ch];
                    o[e] = gd[ch] * xh[e] + bd[ch];
                }
            }
            running_mean.mutable_data()[ch] =
                momentum * running_mean.data()[ch] + (T(1) - momentum) * mu;
            running_var.mutable_data()[ch] =
                momentum * running_var.data()[ch] + (T(1) - momentum) * var;
        }
        if (track<T>({&x, &gamma, &beta})) {
            auto ix = x.impl();
            auto ig = gamma.impl();
            auto ib = beta.impl();
            attach(out, "batchnorm2d", {x, gamma, beta},
                   [ix, ig, ib, xhat = std::move(xhat), invstd = std::move(invstd), n, c, hw,
                    m](const std::vector<T>& g) {
                       const bool need_x = ix->needs_grad();
                       const bool need_g = ig->needs_grad();
                       const bool need_b = ib->needs_grad();
                       if (need_x) ix->ensure_grad();
                       if (need_g) ig->ensure_grad();
                       if (need_b) ib->ensure_grad();
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           T sum_g = T(0), sum_gx = T(0);
                           for (std::int64_t b = 0; b < n; ++b) {
                               const T* gp = g.data() + (b * c + ch) * hw;
                               const T* xh = xhat.data() + (b * c + ch) * hw;
                               for (std::int64_t e = 0; e < hw; ++e) {
                                   sum_g += gp[e];
                                   sum_gx += gp[e] * xh[e];
                               }
                           }
                           if (need_b) ib->grad[ch] += sum_g;
                           if (need_g) ig->grad[ch] += sum_gx;
                           if (need_x) {
                               const T k = ig->data[ch] * invstd[ch];
                               const T mg = sum_g / static_cast<T>(m);
                               const T mgx = sum_gx / static_cast<T>(m);
                               for (std::int64_t b = 0; b < n; ++b) {
                                   const T* gp = g.data() + (b * c + ch) * hw;
                                   const T* xh = xhat.data() + (b * c + ch) * hw;
                                   T* dx = ix->grad.data() + (b * c + ch) * hw;
                                   for (std::int64_t e = 0; e < hw; ++e)
                                       dx[e] += k * (gp[e] - mg - xh[e] * mgx);
                               }
                           }
                       }
                   });
        }
    } else {
        std::vector<T> scale(static_cast<std::size_t>(c)), rmean(static_cast<std::size_t>(c));
        for (std::int64_t ch = 0; ch < c; ++ch) {
            scale[ch] = T(1) / std::sqrt(running_var.data()[ch] + eps);
            rmean[ch] = running_mean.data()[ch];
        }
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T* p = xd + (b * c + ch) * hw;
                T* o = od + (b * c + ch) * hw;
                const T k = gd[ch] * scale[ch];
                const T shift = bd[ch] - rmean[ch] * k;
                for (std::int64_t e = 0; e < hw; ++e) o[e] = k * p[e] + shift;
            }
        if (track<T>({&x, &gamma, &beta})) {
            auto ix = x.impl();
            auto ig = gamma.impl();
            auto ib = beta.impl();
            attach(out, "batchnorm2d", {x, gamma, beta},
                   [ix, ig, ib, scale = std::move(scale), rmean = std::move(rmean), n, c,
                    hw](const std::vector<T>& g) {
                       const bool need_x = ix->needs_grad();
                       const bool need_g = ig->needs_grad();
                       const bool need_b = ib->needs_grad();
                       if (need_x) ix->ensure_grad();
                       if (need_g) ig->ensure_grad();
                       if (need_b) ib->ensure_grad();
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           const T k = ig->data[ch] * scale[ch];
                           T sum_g = T(0), sum_gx = T(0);
                           for (std::int64_t b = 0; b < n; ++b) {
                               const T* gp = g.data() + (b * c + ch) * hw;
                               const T* xp = ix->data.data() + (b * c + ch) * hw;
                               T* dx = need_x ? ix->grad.data() + (b * c + ch) * hw : nullptr;
                               for (std::int64_t e = 0; e < hw; ++e) {
                                   sum_g += gp[e];
                                   sum_gx += gp[e] * (xp[e] - rmean[ch]) * scale[ch];
                                   if (need_x) dx[e] += gp[e] * k;
                               }
                           }
                           if (need_b) ib->grad[ch] += sum_g;
                           if (need_g) ig->grad[ch] += sum_gx;
                       }
                   });
        }
    }
    return out;
}

// --- dropout --------------------------------------------------------------------------

template <class T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Mode mode, RngStream& rng) {
    if (!x.defined()) throw ValueError("dropout: undefined tensor");
    if (rate < 0.0 || rate >= 1.0)
        throw ValueError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (mode == Mode::infer || rate == 0.0) return x;

    const std::size_t sz = x.data().size();
    std::vector<std::uint8_t> mask(sz);
    for (std::size_t i = 0; i < sz; ++i) mask[i] = rng.uniform() >= rate ? 1 : 0;
    const T scale = T(1) / static_cast<T>(1.0 - rate);

    auto out = TensorT<T>::zeros(x.shape());
    const T* xd = x.data().data();
    T* od = out.mutable_data().data();
    for (std::size_t i = 0; i < sz; ++i) od[i] = mask[i] ? xd[i] * scale : T(0);

    if (track<T>({&x})) {
        auto ix = x.impl();
        attach(out, "dropout", {x}, [ix, mask = std::move(mask), scale](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            ix->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (mask[i]) ix->grad[i] += g[i] * scale;
        });
    }
    return out;
}

// --- elementwise ------------------------------------------------------------------------

namespace {

template <class T, class Fwd, class Bwd>
TensorT<T> unary_op(const char* name, const TensorT<T>& x, Fwd fwd, Bwd bwd) {
    if (!x.defined()) throw ValueError(std::string(name) + ": undefined tensor");
    auto out = TensorT<T>::zeros(x.shape());
    const T* xd = x.data().data();
    T* od = out.mutable_data().data();
    const std::size_t sz = x.data().size();
    for (std::size_t i = 0; i < sz; ++i) od[i] = fwd(xd[i]);
    if (track<T>({&x})) {
        auto ix = x.impl();
        attach(out, name, {x}, [ix, bwd](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            ix->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) ix->grad[i] += g[i] * bwd(ix->data[i]);
        });
    }
    return out;
}

}  // namespace

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("add", a, b);
    auto out = TensorT<T>::zeros(a.shape());
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* od = out.mutable_data().data();
    for (std::size_t i = 0; i < a.data().size(); ++i) od[i] = ad[i] + bd[i];
    if (track<T>({&a, &b})) {
        auto ia = a.impl();
        auto ib = b.impl();
        attach(out, "add", {a, b}, [ia, ib](const std::vector<T>& g) {
            for (auto& in : {ia, ib})
                if (in->needs_grad()) {
                    in->ensure_grad();
                    for (std::size_t i = 0; i < g.size(); ++i) in->grad[i] += g[i];
                }
        });
    }
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("sub", a, b);
    auto out = TensorT<T>::zeros(a.shape());
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* od = out.mutable_data().data();
    for (std::size_t i = 0; i < a.data().size(); ++i) od[i] = ad[i] - bd[i];
    if (track<T>({&a, &b})) {
        auto ia = a.impl();
        auto ib = b.impl();
        attach(out, "sub", {a, b}, [ia, ib](const std::vector<T>& g) {
            if (ia->needs_grad()) {
                ia->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ia->grad[i] += g[i];
            }
            if (ib->needs_grad()) {
                ib->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ib->grad[i] -= g[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("mul", a, b);
    auto out = TensorT<T>::zeros(a.shape());
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* od = out.mutable_data().data();
    for (std::size_t i = 0; i < a.data().size(); ++i) od[i] = ad[i] * bd[i];
    if (track<T>({&a, &b})) {
        auto ia = a.impl();
        auto ib = b.impl();
        attach(out, "mul", {a, b}, [ia, ib](const std::vector<T>& g) {
            if (ia->needs_grad()) {
                ia->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ia->grad[i] += g[i] * ib->data[i];
            }
            if (ib->needs_grad()) {
                ib->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ib->grad[i] += g[i] * ia->data[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> divide(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("divide", a, b);
    auto out = TensorT<T>::zeros(a.shape());
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* od = out.mutable_data().data();
    for (std::size_t i = 0; i < a.data().size(); ++i) od[i] = ad[i] / bd[i];
    if (track<T>({&a, &b})) {
        auto ia = a.impl();
        auto ib = b.impl();
        attach(out, "divide", {a, b}, [ia, ib](const std::vector<T>& g) {
            if (ia->needs_grad()) {
                ia->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ia->grad[i] += g[i] / ib->data[i];
            }
            if (ib->needs_grad()) {
                ib->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const T bv = ib->data[i];
                    ib->grad[i] -= g[i] * ia->data[i] / (bv * bv);
                }
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> neg(const TensorT<T>& x) {
    return unary_op(
        "neg", x, [](T v) { return -v; }, [](T) { return T(-1); });
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& x, T s) {
    return unary_op(
        "add_scalar", x, [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& x, T s) {
    return unary_op(
        "mul_scalar", x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <class T>
TensorT<T> rsub_scalar(T s, const TensorT<T>& x) {
    return unary_op(
        "rsub_scalar", x, [s](T v) { return s - v; }, [](T) { return T(-1); });
}

template <class T>
TensorT<T> log_op(const TensorT<T>& x) {
    return unary_op(
        "log", x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <class T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
    if (lo > hi) throw ValueError("clamp: lo > hi");
    return unary_op(
        "clamp", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T v) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// --- reductions ---------------------------------------------------------------------------

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
    if (!x.defined()) throw ValueError("sum_all: undefined tensor");
    T s = T(0);
    for (T v : x.data()) s += v;
    auto out = TensorT<T>::scalar(s);
    if (track<T>({&x})) {
        auto ix = x.impl();
        attach(out, "sum_all", {x}, [ix](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            ix->ensure_grad();
            for (auto& gv : ix->grad) gv += g[0];
        });
    }
    return out;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
    if (!x.defined()) throw ValueError("mean_all: undefined tensor");
    T s = T(0);
    for (T v : x.data()) s += v;
    const T inv = T(1) / static_cast<T>(x.numel());
    auto out = TensorT<T>::scalar(s * inv);
    if (track<T>({&x})) {
        auto ix = x.impl();
        attach(out, "mean_all", {x}, [ix, inv](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            ix->ensure_grad();
            const T gv = g[0] * inv;
            for (auto& e : ix->grad) e += gv;
        });
    }
    return out;
}

template <class T>
TensorT<T> sum_per_channel(const TensorT<T>& x) {
    check_rank("sum_per_channel", x, 4, "input");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    auto out = TensorT<T>::zeros(Shape{c});
    T* od = out.mutable_data().data();
    const T* xd = x.data().data();
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* p = xd + (b * c + ch) * hw;
            T acc = T(0);
            for (std::int64_t e = 0; e < hw; ++e) acc += p[e];
            od[ch] += acc;
        }
    if (track<T>({&x})) {
        auto ix = x.impl();
        attach(out, "sum_per_channel", {x}, [ix, n, c, hw](const std::vector<T>& g) {
            if (!ix->needs_grad()) return;
            ix->ensure_grad();
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    T* dst = ix->grad.data() + (b * c + ch) * hw;
                    const T gv = g[static_cast<std::size_t>(ch)];
                    for (std::int64_t e = 0; e < hw; ++e) dst[e] += gv;
                }
        });
    }
    return out;
}

// --- explicit instantiations -----------------------------------------------------------

#define NUMSNET_INSTANTIATE_OPS(T)                                                              \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,      \
                                  Padding, int);                                                \
    template TensorT<T> conv_transpose2d<T>(const TensorT<T>&, const TensorT<T>&,               \
                                            const TensorT<T>&);                                 \
    template TensorT<T> maxpool2d<T>(const TensorT<T>&);                                        \
    template TensorT<T> concat_channels<T>(std::span<const TensorT<T>>);                        \
    template TensorT<T> concat_channels<T>(const TensorT<T>&, const TensorT<T>&);               \
    template TensorT<T> slice_channels<T>(const TensorT<T>&, std::int64_t, std::int64_t);       \
    template TensorT<T> nearest_upsample2d<T>(const TensorT<T>&, int);                          \
    template TensorT<T> relu<T>(const TensorT<T>&);                                             \
    template TensorT<T> sigmoid<T>(const TensorT<T>&);                                          \
    template TensorT<T> batchnorm2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, \
                                       TensorT<T>&, TensorT<T>&, Mode, T, T);                   \
    template TensorT<T> dropout<T>(const TensorT<T>&, double, Mode, RngStream&);                \
    template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                           \
    template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                           \
    template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                           \
    template TensorT<T> divide<T>(const TensorT<T>&, const TensorT<T>&);                        \
    template TensorT<T> neg<T>(const TensorT<T>&);                                              \
    template TensorT<T> add_scalar<T>(const TensorT<T>&, T);                                    \
    template TensorT<T> mul_scalar<T>(const TensorT<T>&, T);                                    \
    template TensorT<T> rsub_scalar<T>(T, const TensorT<T>&);                                   \
    template TensorT<T> log_op<T>(const TensorT<T>&);                                           \
    template TensorT<T> clamp<T>(const TensorT<T>&, T, T);                                      \
    template TensorT<T> sum_all<T>(const TensorT<T>&);                                          \
    template TensorT<T> mean_all<T>(const TensorT<T>&);                                         \
    template TensorT<T> sum_per_channel<T>(const TensorT<T>&);

NUMSNET_INSTANTIATE_OPS(float)
NUMSNET_INSTANTIATE_OPS(double)

#undef NUMSNET_INSTANTIATE_OPS

}  // namespace numsnet
