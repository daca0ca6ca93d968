#pragma once

// Reverse-mode autodiff over a flat operation tape. Ops append nodes in
// execution order (inputs always precede users, so the record is already
// topological); backward walks it once in reverse. Gradients accumulate by
// summation and every loop has a fixed iteration order, so a tape replays
// bit-identically.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lethe/common.hpp"
#include "lethe/tensor.hpp"

namespace lethe {

class IndexError : public Error {
public:
    using Error::Error;
};

template <class S>
class Tape {
public:
    struct Var {
        std::size_t idx = static_cast<std::size_t>(-1);
        bool valid() const { return idx != static_cast<std::size_t>(-1); }
    };

    Var leaf(Tensor<S> value) {
        return push(std::move(value), nullptr);
    }

    const Tensor<S>& value(Var v) const { return nodes_[v.idx].val; }

    const Tensor<S>& grad(Var v) const {
        const Node& n = nodes_[v.idx];
        if (n.grad.data.empty() && n.val.numel() > 0) {
            throw ContractError("gradient not computed; call backward first");
        }
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        check_same_shape(a, b, "add");
        Tensor<S> out = value(a);
        const Tensor<S>& vb = value(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
        return push(std::move(out), [this, a, b](const Tensor<S>& g) {
            accumulate(a, g.data.data(), S{1});
            accumulate(b, g.data.data(), S{1});
        });
    }

    Var sub(Var a, Var b) {
        check_same_shape(a, b, "sub");
        Tensor<S> out = value(a);
        const Tensor<S>& vb = value(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
        return push(std::move(out), [this, a, b](const Tensor<S>& g) {
            accumulate(a, g.data.data(), S{1});
            accumulate(b, g.data.data(), S{-1});
        });
    }

    Var mul(Var a, Var b) {
        check_same_shape(a, b, "mul");
        Tensor<S> out = value(a);
        const Tensor<S>& vb = value(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
        return push(std::move(out), [this, a, b](const Tensor<S>& g) {
            const Tensor<S>& va = nodes_[a.idx].val;
            const Tensor<S>& vbb = nodes_[b.idx].val;
            Tensor<S>& ga = nodes_[a.idx].grad;
            Tensor<S>& gb = nodes_[b.idx].grad;
            for (std::size_t i = 0; i < g.numel(); ++i) {
                ga.data[i] += g.data[i] * vbb.data[i];
                gb.data[i] += g.data[i] * va.data[i];
            }
        });
    }

    Var scale(Var a, S c) {
        Tensor<S> out = value(a);
        for (S& v : out.data) v *= c;
        return push(std::move(out), [this, a, c](const Tensor<S>& g) {
            accumulate(a, g.data.data(), c);
        });
    }

    Var sin(Var a) {
        Tensor<S> out = value(a);
        for (S& v : out.data) v = std::sin(v);
        return push(std::move(out), [this, a](const Tensor<S>& g) {
            const Tensor<S>& va = nodes_[a.idx].val;
            Tensor<S>& ga = nodes_[a.idx].grad;
            for (std::size_t i = 0; i < g.numel(); ++i) {
                ga.data[i] += g.data[i] * std::cos(va.data[i]);
            }
        });
    }

    Var gelu(Var a) {
        Tensor<S> out = value(a);
        for (S& v : out.data) {
            const double x = static_cast<double>(v);
            v = static_cast<S>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)));
        }
        return push(std::move(out), [this, a](const Tensor<S>& g) {
            const Tensor<S>& va = nodes_[a.idx].val;
            Tensor<S>& ga = nodes_[a.idx].grad;
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const double x = static_cast<double>(va.data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
                ga.data[i] += g.data[i] * static_cast<S>(cdf + x * pdf);
            }
        });
    }

    // ---- shape ----

    // Reads numel(shape) elements of a 1-D tensor starting at offset.
    Var slice(Var a, std::size_t offset, std::vector<std::size_t> shape) {
        const Tensor<S>& va = value(a);
        const std::size_t n = Tensor<S>::numel_of(shape);
        if (offset + n > va.numel()) {
            throw ShapeError("slice [" + std::to_string(offset) + ", +" + std::to_string(n) +
                             ") out of range for " + shape_str(va.shape));
        }
        Tensor<S> out(std::move(shape));
        for (std::size_t i = 0; i < n; ++i) out.data[i] = va.data[offset + i];
        return push(std::move(out), [this, a, offset](const Tensor<S>& g) {
            Tensor<S>& ga = nodes_[a.idx].grad;
            for (std::size_t i = 0; i < g.numel(); ++i) ga.data[offset + i] += g.data[i];
        });
    }

    // out[i, :] = m[ids[i], :]
    Var gather_rows(Var m, std::vector<std::int32_t> ids) {
        const Tensor<S>& vm = value(m);
        if (vm.shape.size() != 2) {
            throw ShapeError("gather_rows expects a matrix, got " + shape_str(vm.shape));
        }
        const std::size_t d = vm.shape[1];
        Tensor<S> out({ids.size(), d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto r = ids[i];
            if (r < 0 || static_cast<std::size_t>(r) >= vm.shape[0]) {
                throw IndexError("row id " + std::to_string(r) + " out of range for " + shape_str(vm.shape));
            }
            for (std::size_t c = 0; c < d; ++c) out.data[i * d + c] = vm.data[static_cast<std::size_t>(r) * d + c];
        }
        return push(std::move(out), [this, m, ids = std::move(ids), d](const Tensor<S>& g) {
            Tensor<S>& gm = nodes_[m.idx].grad;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                for (std::size_t c = 0; c < d; ++c) {
                    gm.data[static_cast<std::size_t>(ids[i]) * d + c] += g.data[i * d + c];
                }
            }
        });
    }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        Tensor<S> out = matmul_nn(value(a), value(b));
        return push(std::move(out), [this, a, b](const Tensor<S>& g) {
            accumulate_tensor(a, matmul_nt(g, nodes_[b.idx].val));
            accumulate_tensor(b, matmul_tn(nodes_[a.idx].val, g));
        });
    }

    // out = a * b^T
    Var matmul_t(Var a, Var b) {
        Tensor<S> out = matmul_nt(value(a), value(b));
        return push(std::move(out), [this, a, b](const Tensor<S>& g) {
            accumulate_tensor(a, matmul_nn(g, nodes_[b.idx].val));
            accumulate_tensor(b, matmul_tn(g, nodes_[a.idx].val));
        });
    }

    // out[r, :] = x[r, :] + bias
    Var add_bias(Var x, Var bias) {
        const Tensor<S>& vx = value(x);
        const Tensor<S>& vb = value(bias);
        if (vx.shape.size() != 2 || vb.numel() != vx.shape[1]) {
            throw ShapeError("add_bias shape mismatch: " + shape_str(vx.shape) + " vs " + shape_str(vb.shape));
        }
        Tensor<S> out = vx;
        const std::size_t n = vx.shape[1];
        for (std::size_t r = 0; r < vx.shape[0]; ++r) {
            for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += vb.data[c];
        }
        return push(std::move(out), [this, x, bias, n](const Tensor<S>& g) {
            accumulate(x, g.data.data(), S{1});
            Tensor<S>& gb = nodes_[bias.idx].grad;
            for (std::size_t r = 0; r < g.shape[0]; ++r) {
                for (std::size_t c = 0; c < n; ++c) gb.data[c] += g.data[r * n + c];
            }
        });
    }

    // ---- normalization and probabilities ----

    Var layer_norm(Var x, Var gain, Var bias, S eps) {
        if (!(eps > S{0})) throw ContractError("layer_norm eps must be > 0");
        const Tensor<S>& vx = value(x);
        const Tensor<S>& vg = value(gain);
        const Tensor<S>& vb = value(bias);
        if (vx.shape.size() != 2 || vg.numel() != vx.shape[1] || vb.numel() != vx.shape[1]) {
            throw ShapeError("layer_norm shape mismatch: " + shape_str(vx.shape) + " with gain " +
                             shape_str(vg.shape) + ", bias " + shape_str(vb.shape));
        }
        const std::size_t rows = vx.shape[0], n = vx.shape[1];
        auto xhat = std::make_shared<std::vector<S>>(rows * n);
        auto rstd = std::make_shared<std::vector<S>>(rows);
        Tensor<S> out({rows, n});
        for (std::size_t r = 0; r < rows; ++r) {
            const S* xr = vx.data.data() + r * n;
            S mean{0};
            for (std::size_t c = 0; c < n; ++c) mean += xr[c];
            mean /= static_cast<S>(n);
            S var{0};
            for (std::size_t c = 0; c < n; ++c) {
                const S d = xr[c] - mean;
                var += d * d;
            }
            var /= static_cast<S>(n);
            const S rs = S{1} / std::sqrt(var + eps);
            (*rstd)[r] = rs;
            for (std::size_t c = 0; c < n; ++c) {
                const S xh = (xr[c] - mean) * rs;
                (*xhat)[r * n + c] = xh;
                out.data[r * n + c] = xh * vg.data[c] + vb.data[c];
            }
        }
        return push(std::move(out), [this, x, gain, bias, xhat, rstd, n](const Tensor<S>& g) {
            Tensor<S>& gx = nodes_[x.idx].grad;
            Tensor<S>& gg = nodes_[gain.idx].grad;
            Tensor<S>& gb = nodes_[bias.idx].grad;
            const Tensor<S>& vg = nodes_[gain.idx].val;
            const std::size_t rows = g.shape[0];
            for (std::size_t r = 0; r < rows; ++r) {
                const S* gr = g.data.data() + r * n;
                const S* xh = xhat->data() + r * n;
                S sum_dxhat{0};
                S sum_dxhat_xhat{0};
                for (std::size_t c = 0; c < n; ++c) {
                    gg.data[c] += gr[c] * xh[c];
                    gb.data[c] += gr[c];
                    const S dxh = gr[c] * vg.data[c];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh[c];
                }
                const S inv_n = S{1} / static_cast<S>(n);
                const S rs = (*rstd)[r];
                for (std::size_t c = 0; c < n; ++c) {
                    const S dxh = gr[c] * vg.data[c];
                    gx.data[r * n + c] += rs * (dxh - inv_n * sum_dxhat - xh[c] * inv_n * sum_dxhat_xhat);
                }
            }
        });
    }

    Var softmax_rows(Var x) {
        const Tensor<S>& vx = value(x);
        if (vx.shape.size() != 2) {
            throw ShapeError("softmax_rows expects a matrix, got " + shape_str(vx.shape));
        }
        const std::size_t rows = vx.shape[0], n = vx.shape[1];
        Tensor<S> out({rows, n});
        for (std::size_t r = 0; r < rows; ++r) {
            const S* xr = vx.data.data() + r * n;
            S* orow = out.data.data() + r * n;
            S mx = xr[0];
            for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, xr[c]);
            S total{0};
            for (std::size_t c = 0; c < n; ++c) {
                orow[c] = std::exp(xr[c] - mx);
                total += orow[c];
            }
            const S inv = S{1} / total;
            for (std::size_t c = 0; c < n; ++c) orow[c] *= inv;
        }
        return push(std::move(out), [this, x, self = nodes_.size(), n](const Tensor<S>& g) {
            const Tensor<S>& s = nodes_[self].val;
            Tensor<S>& gx = nodes_[x.idx].grad;
            for (std::size_t r = 0; r < g.shape[0]; ++r) {
                const S* gr = g.data.data() + r * n;
                const S* sr = s.data.data() + r * n;
                S dot{0};
                for (std::size_t c = 0; c < n; ++c) dot += gr[c] * sr[c];
                for (std::size_t c = 0; c < n; ++c) gx.data[r * n + c] += sr[c] * (gr[c] - dot);
            }
        });
    }

    // Per-row negative log softmax probability of the target id. A target of
    // -1 marks a row excluded from the loss: value 0, no gradient.
    Var cross_entropy_rows(Var logits, std::vector<std::int32_t> targets) {
        const Tensor<S>& vl = value(logits);
        if (vl.shape.size() != 2 || targets.size() != vl.shape[0]) {
            throw ShapeError("cross_entropy shape mismatch: " + shape_str(vl.shape) + " with " +
                             std::to_string(targets.size()) + " targets");
        }
        const std::size_t rows = vl.shape[0], vocab = vl.shape[1];
        for (std::int32_t t : targets) {
            if (t < -1 || t >= static_cast<std::int32_t>(vocab)) {
                throw IndexError("target " + std::to_string(t) + " out of vocabulary of size " +
                                 std::to_string(vocab));
            }
        }
        auto probs = std::make_shared<std::vector<S>>(rows * vocab);
        Tensor<S> out({rows});
        for (std::size_t r = 0; r < rows; ++r) {
            if (targets[r] < 0) continue;
            const S* lr = vl.data.data() + r * vocab;
            S mx = lr[0];
            for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, lr[c]);
            S total{0};
            S* pr = probs->data() + r * vocab;
            for (std::size_t c = 0; c < vocab; ++c) {
                pr[c] = std::exp(lr[c] - mx);
                total += pr[c];
            }
            const S inv = S{1} / total;
            for (std::size_t c = 0; c < vocab; ++c) pr[c] *= inv;
            // loss = logsumexp - logit[target], never materializes log(0)
            out.data[r] = (std::log(total) + mx) - lr[targets[r]];
        }
        return push(std::move(out), [this, logits, targets = std::move(targets), probs, vocab](const Tensor<S>& g) {
            Tensor<S>& gl = nodes_[logits.idx].grad;
            for (std::size_t r = 0; r < targets.size(); ++r) {
                if (targets[r] < 0) continue;
                const S gr = g.data[r];
                const S* pr = probs->data() + r * vocab;
                S* glr = gl.data.data() + r * vocab;
                for (std::size_t c = 0; c < vocab; ++c) glr[c] += gr * pr[c];
                glr[targets[r]] -= gr;
            }
        });
    }

    // Multi-head causal self-attention over B sequences of length T laid out
    // as consecutive row blocks. Queries attend only to keys at positions
    // <= their own within the same sequence.
    Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads) {
        const Tensor<S>& vq = value(q);
        const Tensor<S>& vk = value(k);
        const Tensor<S>& vv = value(v);
        if (!vq.same_shape(vk) || !vq.same_shape(vv) || vq.shape.size() != 2 ||
            vq.shape[0] != batch * seq || vq.shape[1] % heads != 0) {
            throw ShapeError("causal_attention shape mismatch: q " + shape_str(vq.shape) + " for B=" +
                             std::to_string(batch) + " T=" + std::to_string(seq) + " H=" + std::to_string(heads));
        }
        const std::size_t d = vq.shape[1];
        const std::size_t hd = d / heads;
        const S inv_scale = S{1} / std::sqrt(static_cast<S>(hd));
        auto probs = std::make_shared<std::vector<S>>(batch * heads * seq * seq);
        Tensor<S> out({batch * seq, d});
        std::vector<S> scores(seq);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                S* pbh = probs->data() + (b * heads + h) * seq * seq;
                const std::size_t col = h * hd;
                for (std::size_t i = 0; i < seq; ++i) {
                    const S* qi = vq.data.data() + (b * seq + i) * d + col;
                    S mx = std::numeric_limits<S>::lowest();
                    for (std::size_t j = 0; j <= i; ++j) {
                        const S* kj = vk.data.data() + (b * seq + j) * d + col;
                        S s{0};
                        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                        s *= inv_scale;
                        scores[j] = s;
                        mx = std::max(mx, s);
                    }
                    S total{0};
                    for (std::size_t j = 0; j <= i; ++j) {
                        scores[j] = std::exp(scores[j] - mx);
                        total += scores[j];
                    }
                    const S inv = S{1} / total;
                    S* orow = out.data.data() + (b * seq + i) * d + col;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const S p = scores[j] * inv;
                        pbh[i * seq + j] = p;
                        const S* vj = vv.data.data() + (b * seq + j) * d + col;
                        for (std::size_t c = 0; c < hd; ++c) orow[c] += p * vj[c];
                    }
                }
            }
        }
        return push(std::move(out),
                    [this, q, k, v, probs, batch, seq, heads, hd, d, inv_scale](const Tensor<S>& g) {
            const Tensor<S>& vq = nodes_[q.idx].val;
            const Tensor<S>& vk = nodes_[k.idx].val;
            const Tensor<S>& vv = nodes_[v.idx].val;
            Tensor<S>& gq = nodes_[q.idx].grad;
            Tensor<S>& gk = nodes_[k.idx].grad;
            Tensor<S>& gv = nodes_[v.idx].grad;
            std::vector<S> dp(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const S* pbh = probs->data() + (b * heads + h) * seq * seq;
                    const std::size_t col = h * hd;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const S* grow = g.data.data() + (b * seq + i) * d + col;
                        const S* prow = pbh + i * seq;
                        S dot{0};
                        for (std::size_t j = 0; j <= i; ++j) {
                            const S* vj = vv.data.data() + (b * seq + j) * d + col;
                            S s{0};
                            for (std::size_t c = 0; c < hd; ++c) s += grow[c] * vj[c];
                            dp[j] = s;
                            dot += s * prow[j];
                        }
                        const S* qi = vq.data.data() + (b * seq + i) * d + col;
                        S* gqi = gq.data.data() + (b * seq + i) * d + col;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const S p = prow[j];
                            const S ds = p * (dp[j] - dot) * inv_scale;
                            const S* kj = vk.data.data() + (b * seq + j) * d + col;
                            S* gkj = gk.data.data() + (b * seq + j) * d + col;
                            S* gvj = gv.data.data() + (b * seq + j) * d + col;
                            for (std::size_t c = 0; c < hd; ++c) {
                                gqi[c] += ds * kj[c];
                                gkj[c] += ds * qi[c];
                                gvj[c] += p * grow[c];
                            }
                        }
                    }
                }
            }
        });
    }

    // ---- reductions ----

    Var sum(Var a) {
        const Tensor<S>& va = value(a);
        S total{0};
        for (S v : va.data) total += v;
        Tensor<S> out({1});
        out.data[0] = total;
        return push(std::move(out), [this, a](const Tensor<S>& g) {
            Tensor<S>& ga = nodes_[a.idx].grad;
            for (S& v : ga.data) v += g.data[0];
        });
    }

    // sum(w*x) / sum(w); weights are constants, not tape values.
    Var weighted_mean(Var x, std::vector<S> weights) {
        const Tensor<S>& vx = value(x);
        if (weights.size() != vx.numel()) {
            throw ShapeError("weighted_mean weight count " + std::to_string(weights.size()) +
                             " does not match " + shape_str(vx.shape));
        }
        S wsum{0};
        S acc{0};
        for (std::size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i] * vx.data[i];
            wsum += weights[i];
        }
        if (!(wsum > S{0})) throw ContractError("weighted_mean requires positive total weight");
        Tensor<S> out({1});
        out.data[0] = acc / wsum;
        return push(std::move(out), [this, x, weights = std::move(weights), wsum](const Tensor<S>& g) {
            Tensor<S>& gx = nodes_[x.idx].grad;
            const S scale = g.data[0] / wsum;
            for (std::size_t i = 0; i < weights.size(); ++i) gx.data[i] += scale * weights[i];
        });
    }

    // ---- backward ----

    void backward(Var root) {
        if (!root.valid() || root.idx >= nodes_.size()) {
            throw ContractError("backward root is not on this tape");
        }
        if (!nodes_[root.idx].val.is_scalar()) {
            throw ContractError("backward root must be scalar, got " + shape_str(nodes_[root.idx].val.shape));
        }
        for (std::size_t i = 0; i <= root.idx; ++i) {
            Node& n = nodes_[i];
            n.grad = Tensor<S>(n.val.shape);
        }
        nodes_[root.idx].grad.data[0] = S{1};
        for (std::size_t i = root.idx + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.back) n.back(n.grad);
        }
    }

private:
    struct Node {
        Tensor<S> val;
        Tensor<S> grad;
        std::function<void(const Tensor<S>&)> back;
    };

    std::vector<Node> nodes_;

    Var push(Tensor<S> val, std::function<void(const Tensor<S>&)> back) {
        nodes_.push_back(Node{std::move(val), Tensor<S>{}, std::move(back)});
        return Var{nodes_.size() - 1};
    }

    void check_same_shape(Var a, Var b, const char* op) {
        if (!value(a).same_shape(value(b))) {
            throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(value(a).shape) +
                             " vs " + shape_str(value(b).shape));
        }
    }

    void accumulate(Var target, const S* src, S factor) {
        Tensor<S>& g = nodes_[target.idx].grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += factor * src[i];
    }

    void accumulate_tensor(Var target, const Tensor<S>& t) {
        Tensor<S>& g = nodes_[target.idx].grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += t.data[i];
    }
};

// Central-difference verification of the analytic gradient of a scalar graph.
// Builder receives a fresh tape plus the probe leaf and returns the root.
// Returns max over coordinates of |analytic - fd| / (|analytic| + 1e-12).
template <class S>
double finite_diff_check(const std::function<typename Tape<S>::Var(Tape<S>&, typename Tape<S>::Var)>& build,
                         const Tensor<S>& x, double h) {
    if (!(h >= 1e-7 && h <= 1e-4)) {
        throw ContractError("finite_diff_check step h must lie in [1e-7, 1e-4]");
    }
    Tape<S> tape;
    auto vx = tape.leaf(x);
    auto root = build(tape, vx);
    if (!tape.value(root).is_scalar()) {
        throw ContractError("finite_diff_check function must be scalar-valued");
    }
    tape.backward(root);
    const Tensor<S> analytic = tape.grad(vx);

    auto eval = [&](const Tensor<S>& probe) {
        Tape<S> t;
        auto leaf = t.leaf(probe);
        auto r = build(t, leaf);
        const double y = static_cast<double>(t.value(r).data[0]);
        if (!std::isfinite(y)) throw NumericError("non-finite function value at finite-difference probe");
        return y;
    };

    double worst = 0.0;
    Tensor<S> probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const S orig = probe.data[i];
        probe.data[i] = orig + static_cast<S>(h);
        const double fp = eval(probe);
        probe.data[i] = orig - static_cast<S>(h);
        const double fm = eval(probe);
        probe.data[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double a = static_cast<double>(analytic.data[i]);
        const double err = std::abs(a - fd) / (std::abs(a) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace lethe
