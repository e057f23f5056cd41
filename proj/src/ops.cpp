// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mosld/error.hpp"

namespace mosld {

Vector softmax(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    Vector out(v.size());
    double z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        z += out[i];
    }
    for (double& o : out) {
        o /= z;
    }
    return out;
}

double log_sum_exp(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double z = 0.0;
    for (double x : v) {
        z += std::exp(x - m);
    }
    return m + std::log(z);
}

double cross_entropy(const Matrix& logits, std::span<const std::size_t> targets) {
    if (logits.rows() != targets.size()) {
        throw DataError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(logits.rows()) + " rows");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (targets[i] >= logits.cols()) {
            throw DataError("cross_entropy: target " + std::to_string(targets[i]) + " outside vocabulary of " +
                            std::to_string(logits.cols()));
        }
        total += log_sum_exp(logits.row(i)) - logits(i, targets[i]);
    }
    return total / static_cast<double>(logits.rows());
}

namespace ops {
namespace {

bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
    return std::any_of(vs.begin(), vs.end(), [&](Var v) { return t.requires_grad(v); });
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
    Matrix out = mosld::matmul(t.value(a), t.value(b));
    return t.record(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) {
            tp.grad_buffer(a) += mosld::matmul_nt(g, tp.value(b));
        }
        if (tp.requires_grad(b)) {
            tp.grad_buffer(b) += mosld::matmul_tn(tp.value(a), g);
        }
    });
}

Var matmul_nt(Tape& t, Var a, Var b) {
    Matrix out = mosld::matmul_nt(t.value(a), t.value(b));
    return t.record(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) {
            tp.grad_buffer(a) += mosld::matmul(g, tp.value(b));
        }
        if (tp.requires_grad(b)) {
            tp.grad_buffer(b) += mosld::matmul_tn(g, tp.value(a));
        }
    });
}

Var add(Tape& t, Var a, Var b) {
    if (!t.value(a).same_shape(t.value(b))) {
        throw ConfigError("add: shape mismatch " + t.value(a).shape_str() + " vs " + t.value(b).shape_str());
    }
    Matrix out = t.value(a) + t.value(b);
    return t.record(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) {
            tp.grad_buffer(a) += g;
        }
        if (tp.requires_grad(b)) {
            tp.grad_buffer(b) += g;
        }
    });
}

Var scale(Tape& t, Var a, double s) {
    Matrix out = s * t.value(a);
    return t.record(std::move(out), t.requires_grad(a), [a, s](Tape& tp, const Matrix& g) {
        Matrix& ga = tp.grad_buffer(a);
        auto gd = g.data();
        auto out = ga.data();
        for (std::size_t i = 0; i < gd.size(); ++i) {
            out[i] += s * gd[i];
        }
    });
}

Var masked_scale(Tape& t, Var a, const Matrix& mask, double s) {
    const Matrix& av = t.value(a);
    if (!av.same_shape(mask)) {
        throw ConfigError("masked_scale: mask " + mask.shape_str() + " does not match " + av.shape_str());
    }
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out.data()[i] = mask.data()[i] * av.data()[i] * s;
    }
    return t.record(std::move(out), t.requires_grad(a), [a, mask, s](Tape& tp, const Matrix& g) {
        auto out = tp.grad_buffer(a).data();
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += mask.data()[i] * g.data()[i] * s;
        }
    });
}

Var sum(Tape& t, Var a) {
    double s = 0.0;
    for (double v : t.value(a).data()) {
        s += v;
    }
    return t.record(Matrix(1, 1, s), t.requires_grad(a), [a](Tape& tp, const Matrix& g) {
        for (double& v : tp.grad_buffer(a).data()) {
            v += g(0, 0);
        }
    });
}

Var sum_squares(Tape& t, Var a) {
    double s = 0.0;
    for (double v : t.value(a).data()) {
        s += v * v;
    }
    return t.record(Matrix(1, 1, s), t.requires_grad(a), [a](Tape& tp, const Matrix& g) {
        auto x = tp.value(a).data();
        auto out = tp.grad_buffer(a).data();
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += 2.0 * x[i] * g(0, 0);
        }
    });
}

Var softmax_rows(Tape& t, Var a) {
    const Matrix& av = t.value(a);
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
        const Vector p = softmax(av.row(i));
        std::copy(p.begin(), p.end(), out.row(i).begin());
    }
    const std::size_t self = t.size();
    return t.record(std::move(out), t.requires_grad(a), [a, self](Tape& tp, const Matrix& g) {
        const Matrix& p = tp.value(Var{self});
        Matrix& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < p.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < p.cols(); ++j) {
                dot += g(i, j) * p(i, j);
            }
            for (std::size_t j = 0; j < p.cols(); ++j) {
                ga(i, j) += p(i, j) * (g(i, j) - dot);
            }
        }
    });
}

Var gelu(Tape& t, Var a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    const Matrix& av = t.value(a);
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double x = av.data()[i];
        out.data()[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
    }
    return t.record(std::move(out), t.requires_grad(a), [a](Tape& tp, const Matrix& g) {
        auto x = tp.value(a).data();
        auto out = tp.grad_buffer(a).data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double xi = x[i];
            const double th = std::tanh(c * (xi + k * xi * xi * xi));
            const double d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * c * (1.0 + 3.0 * k * xi * xi);
            out[i] += d * g.data()[i];
        }
    });
}

Var rmsnorm(Tape& t, Var x, Var gain, double eps) {
    const Matrix& xv = t.value(x);
    const Matrix& gv = t.value(gain);
    if (gv.rows() != 1 || gv.cols() != xv.cols()) {
        throw ConfigError("rmsnorm: gain " + gv.shape_str() + " does not match input " + xv.shape_str());
    }
    const std::size_t d = xv.cols();
    Matrix out(xv.rows(), d);
    std::vector<double> inv_rms(xv.rows());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        double ms = 0.0;
        for (double v : xv.row(i)) {
            ms += v * v;
        }
        inv_rms[i] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) {
            out(i, j) = xv(i, j) * inv_rms[i] * gv(0, j);
        }
    }
    return t.record(std::move(out), any_grad(t, {x, gain}),
                    [x, gain, inv_rms = std::move(inv_rms), d](Tape& tp, const Matrix& g) {
                        const Matrix& xv = tp.value(x);
                        const Matrix& gv = tp.value(gain);
                        const bool gx = tp.requires_grad(x);
                        const bool gg = tp.requires_grad(gain);
                        for (std::size_t i = 0; i < xv.rows(); ++i) {
                            const double s = inv_rms[i];
                            if (gg) {
                                Matrix& ggain = tp.grad_buffer(gain);
                                for (std::size_t j = 0; j < d; ++j) {
                                    ggain(0, j) += g(i, j) * xv(i, j) * s;
                                }
                            }
                            if (gx) {
                                double dot = 0.0;
                                for (std::size_t j = 0; j < d; ++j) {
                                    dot += g(i, j) * gv(0, j) * xv(i, j);
                                }
                                const double coef = s * s * s * dot / static_cast<double>(d);
                                Matrix& gxm = tp.grad_buffer(x);
                                for (std::size_t j = 0; j < d; ++j) {
                                    gxm(i, j) += s * gv(0, j) * g(i, j) - coef * xv(i, j);
                                }
                            }
                        }
                    });
}

Var embedding(Tape& t, Var table, std::span<const std::size_t> ids) {
    const Matrix& tv = t.value(table);
    Matrix out(ids.size(), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= tv.rows()) {
            throw DataError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(tv.rows()) + " rows");
        }
        std::copy(tv.row(ids[i]).begin(), tv.row(ids[i]).end(), out.row(i).begin());
    }
    std::vector<std::size_t> saved(ids.begin(), ids.end());
    return t.record(std::move(out), t.requires_grad(table), [table, saved = std::move(saved)](Tape& tp, const Matrix& g) {
        Matrix& gt = tp.grad_buffer(table);
        for (std::size_t i = 0; i < saved.size(); ++i) {
            auto dst = gt.row(saved[i]);
            auto src = g.row(i);
            for (std::size_t j = 0; j < dst.size(); ++j) {
                dst[j] += src[j];
            }
        }
    });
}

Var select_rows(Tape& t, Var x, std::span<const std::size_t> rows) {
    const Matrix& xv = t.value(x);
    Matrix out(rows.size(), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= xv.rows()) {
            throw InternalError("select_rows: row " + std::to_string(rows[i]) + " out of range");
        }
        std::copy(xv.row(rows[i]).begin(), xv.row(rows[i]).end(), out.row(i).begin());
    }
    std::vector<std::size_t> saved(rows.begin(), rows.end());
    return t.record(std::move(out), t.requires_grad(x), [x, saved = std::move(saved)](Tape& tp, const Matrix& g) {
        Matrix& gx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < saved.size(); ++i) {
            auto dst = gx.row(saved[i]);
            auto src = g.row(i);
            for (std::size_t j = 0; j < dst.size(); ++j) {
                dst[j] += src[j];
            }
        }
    });
}

Var cross_entropy(Tape& t, Var logits, std::span<const std::size_t> targets) {
    const Matrix& lv = t.value(logits);
    const double loss = mosld::cross_entropy(lv, targets);
    std::vector<std::size_t> saved(targets.begin(), targets.end());
    return t.record(Matrix(1, 1, loss), t.requires_grad(logits),
                    [logits, saved = std::move(saved)](Tape& tp, const Matrix& g) {
                        const Matrix& lv = tp.value(logits);
                        Matrix& gl = tp.grad_buffer(logits);
                        const double w = g(0, 0) / static_cast<double>(lv.rows());
                        for (std::size_t i = 0; i < lv.rows(); ++i) {
                            const Vector p = softmax(lv.row(i));
                            for (std::size_t j = 0; j < lv.cols(); ++j) {
                                gl(i, j) += w * (p[j] - (j == saved[i] ? 1.0 : 0.0));
                            }
                        }
                    });
}

Var causal_attention(Tape& t, Var q, Var k, Var v, std::span<const std::size_t> lengths, std::size_t n_heads) {
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    if (!qv.same_shape(kv) || !qv.same_shape(vv)) {
        throw ConfigError("causal_attention: q/k/v shapes differ");
    }
    if (n_heads == 0 || qv.cols() % n_heads != 0) {
        throw ConfigError("causal_attention: width " + std::to_string(qv.cols()) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    }
    std::size_t total = 0;
    for (std::size_t len : lengths) {
        total += len;
    }
    if (total != qv.rows()) {
        throw InternalError("causal_attention: sequence lengths do not cover all rows");
    }
    const std::size_t dh = qv.cols() / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    // probs[seq][head] is a lower-triangular len x len block, stored dense.
    std::vector<Matrix> probs;
    probs.reserve(lengths.size() * n_heads);
    Matrix out(qv.rows(), qv.cols());
    std::size_t base = 0;
    for (std::size_t len : lengths) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * dh;
            Matrix p(len, len);
            for (std::size_t i = 0; i < len; ++i) {
                double mx = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        s += qv(base + i, c0 + c) * kv(base + j, c0 + c);
                    }
                    p(i, j) = s * inv_sqrt;
                    mx = std::max(mx, p(i, j));
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    p(i, j) = std::exp(p(i, j) - mx);
                    z += p(i, j);
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    p(i, j) /= z;
                    const double pij = p(i, j);
                    for (std::size_t c = 0; c < dh; ++c) {
                        out(base + i, c0 + c) += pij * vv(base + j, c0 + c);
                    }
                }
            }
            probs.push_back(std::move(p));
        }
        base += len;
    }

    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    return t.record(
        std::move(out), any_grad(t, {q, k, v}),
        [q, k, v, lens = std::move(lens), probs = std::move(probs), n_heads, dh, inv_sqrt](Tape& tp, const Matrix& g) {
            const Matrix& qv = tp.value(q);
            const Matrix& kv = tp.value(k);
            const Matrix& vv = tp.value(v);
            const bool gq = tp.requires_grad(q);
            const bool gk = tp.requires_grad(k);
            const bool gv = tp.requires_grad(v);
            Matrix dq(qv.rows(), qv.cols());
            Matrix dk(qv.rows(), qv.cols());
            Matrix dv(qv.rows(), qv.cols());
            std::size_t base = 0;
            std::size_t block = 0;
            for (std::size_t len : lens) {
                for (std::size_t h = 0; h < n_heads; ++h, ++block) {
                    const Matrix& p = probs[block];
                    const std::size_t c0 = h * dh;
                    std::vector<double> dp(len);
                    for (std::size_t i = 0; i < len; ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) {
                            double s = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                s += g(base + i, c0 + c) * vv(base + j, c0 + c);
                                dv(base + j, c0 + c) += p(i, j) * g(base + i, c0 + c);
                            }
                            dp[j] = s;
                            dot += s * p(i, j);
                        }
                        for (std::size_t j = 0; j <= i; ++j) {
                            const double ds = p(i, j) * (dp[j] - dot) * inv_sqrt;
                            for (std::size_t c = 0; c < dh; ++c) {
                                dq(base + i, c0 + c) += ds * kv(base + j, c0 + c);
                                dk(base + j, c0 + c) += ds * qv(base + i, c0 + c);
                            }
                        }
                    }
                }
                base += len;
            }
            if (gq) {
                tp.grad_buffer(q) += dq;
            }
            if (gk) {
                tp.grad_buffer(k) += dk;
            }
            if (gv) {
                tp.grad_buffer(v) += dv;
            }
        });
}

}  // namespace ops
}  // namespace mosld
