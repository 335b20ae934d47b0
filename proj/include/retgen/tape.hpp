#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "retgen/errors.hpp"
#include "retgen/mask.hpp"
#include "retgen/tensor.hpp"

namespace retgen {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap emap(const Tensor& t) { return ECMap(t.values.data(), t.rows(), t.cols()); }
inline EMap emap(Tensor& t) { return EMap(t.values.data(), t.rows(), t.cols()); }

// Collects per-call attention weight matrices so tests can assert the
// zero-weight property at disallowed positions in every layer.
struct AttentionProbe {
  std::vector<Tensor> weights;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Operations append nodes in execution order, so walking
// ids from the root downward visits every node after all of its consumers.
// Single-threaded within one tape; independent tapes may run concurrently.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr); }

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v) {
    ensure_grad(v);
    return node(v).grad;
  }
  int size() const { return static_cast<int>(nodes_.size()); }

  Var matmul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols() != tb.rows())
      throw DimensionError("matmul inner dimensions disagree: " + shape_str(ta.shape) +
                           " x " + shape_str(tb.shape));
    Tensor out = Tensor::zeros({ta.rows(), tb.cols()});
    emap(out).noalias() = emap(ta) * emap(tb);
    return push(std::move(out), {a, b}, [this, a, b](const Node& n) {
      accumulate(a, [&](Tensor& g) { emap(g).noalias() += emap(n.grad) * emap(value(b)).transpose(); });
      accumulate(b, [&](Tensor& g) { emap(g).noalias() += emap(value(a)).transpose() * emap(n.grad); });
    });
  }

  // a * b^T, with a: [m x k], b: [n x k] -> [m x n]
  Var matmul_nt(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols() != tb.cols())
      throw DimensionError("matmul_nt inner dimensions disagree: " + shape_str(ta.shape) +
                           " x " + shape_str(tb.shape) + "^T");
    Tensor out = Tensor::zeros({ta.rows(), tb.rows()});
    emap(out).noalias() = emap(ta) * emap(tb).transpose();
    return push(std::move(out), {a, b}, [this, a, b](const Node& n) {
      accumulate(a, [&](Tensor& g) { emap(g).noalias() += emap(n.grad) * emap(value(b)); });
      accumulate(b, [&](Tensor& g) { emap(g).noalias() += emap(n.grad).transpose() * emap(value(a)); });
    });
  }

  Var add(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb))
      throw DimensionError("add shape mismatch: " + shape_str(ta.shape) + " vs " +
                           shape_str(tb.shape));
    Tensor out = ta;
    for (size_t i = 0; i < out.values.size(); ++i) out.values[i] += tb.values[i];
    return push(std::move(out), {a, b}, [this, a, b](const Node& n) {
      accumulate(a, [&](Tensor& g) {
        for (size_t i = 0; i < g.values.size(); ++i) g.values[i] += n.grad.values[i];
      });
      accumulate(b, [&](Tensor& g) {
        for (size_t i = 0; i < g.values.size(); ++i) g.values[i] += n.grad.values[i];
      });
    });
  }

  Var scale(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.values) v *= c;
    return push(std::move(out), {a}, [this, a, c](const Node& n) {
      accumulate(a, [&](Tensor& g) {
        for (size_t i = 0; i < g.values.size(); ++i) g.values[i] += c * n.grad.values[i];
      });
    });
  }

  // x: [m x n] plus a [1 x n] row broadcast over every row (bias add).
  Var add_row_broadcast(Var x, Var row) {
    const Tensor& tx = value(x);
    const Tensor& tr = value(row);
    if (tr.rows() != 1 || tr.cols() != tx.cols())
      throw DimensionError("broadcast row must be [1 x " + std::to_string(tx.cols()) +
                           "], got " + shape_str(tr.shape));
    Tensor out = tx;
    for (int i = 0; i < tx.rows(); ++i)
      for (int j = 0; j < tx.cols(); ++j) out.at(i, j) += tr.at(0, j);
    return push(std::move(out), {x, row}, [this, x, row](const Node& n) {
      accumulate(x, [&](Tensor& g) {
        for (size_t i = 0; i < g.values.size(); ++i) g.values[i] += n.grad.values[i];
      });
      accumulate(row, [&](Tensor& g) {
        for (int i = 0; i < n.grad.rows(); ++i)
          for (int j = 0; j < n.grad.cols(); ++j) g.at(0, j) += n.grad.at(i, j);
      });
    });
  }

  Var slice_rows(Var x, int start, int count) {
    const Tensor& tx = value(x);
    if (start < 0 || count < 1 || start + count > tx.rows())
      throw IndexError("row slice [" + std::to_string(start) + "," +
                       std::to_string(start + count) + ") out of range for " +
                       shape_str(tx.shape));
    Tensor out = Tensor::zeros({count, tx.cols()});
    std::copy(tx.row_ptr(start), tx.row_ptr(start) + static_cast<size_t>(count) * tx.cols(),
              out.values.begin());
    return push(std::move(out), {x}, [this, x, start, count](const Node& n) {
      accumulate(x, [&](Tensor& g) {
        const int c = g.cols();
        for (int i = 0; i < count; ++i)
          for (int j = 0; j < c; ++j) g.at(start + i, j) += n.grad.at(i, j);
      });
    });
  }

  Var slice_cols(Var x, int start, int count) {
    const Tensor& tx = value(x);
    if (start < 0 || count < 1 || start + count > tx.cols())
      throw IndexError("column slice [" + std::to_string(start) + "," +
                       std::to_string(start + count) + ") out of range for " +
                       shape_str(tx.shape));
    Tensor out = Tensor::zeros({tx.rows(), count});
    for (int i = 0; i < tx.rows(); ++i)
      for (int j = 0; j < count; ++j) out.at(i, j) = tx.at(i, start + j);
    return push(std::move(out), {x}, [this, x, start, count](const Node& n) {
      accumulate(x, [&](Tensor& g) {
        for (int i = 0; i < n.grad.rows(); ++i)
          for (int j = 0; j < count; ++j) g.at(i, start + j) += n.grad.at(i, j);
      });
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ArgumentError("concat_cols needs at least one part");
    int rows = value(parts[0]).rows();
    int total = 0;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw DimensionError("concat_cols row mismatch");
      total += value(p).cols();
    }
    Tensor out = Tensor::zeros({rows, total});
    int off = 0;
    for (Var p : parts) {
      const Tensor& tp = value(p);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < tp.cols(); ++j) out.at(i, off + j) = tp.at(i, j);
      off += tp.cols();
    }
    auto parts_copy = parts;
    return push(std::move(out), parts, [this, parts_copy](const Node& n) {
      int off = 0;
      for (Var p : parts_copy) {
        const int c = value(p).cols();
        accumulate(p, [&](Tensor& g) {
          for (int i = 0; i < g.rows(); ++i)
            for (int j = 0; j < c; ++j) g.at(i, j) += n.grad.at(i, off + j);
        });
        off += c;
      }
    });
  }

  // Stacks B row vectors [1 x d] into a [B x d] matrix.
  Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw ArgumentError("stack_rows needs at least one row");
    int d = value(rows[0]).cols();
    Tensor out = Tensor::zeros({static_cast<int>(rows.size()), d});
    for (size_t i = 0; i < rows.size(); ++i) {
      const Tensor& tr = value(rows[i]);
      if (tr.rows() != 1 || tr.cols() != d) throw DimensionError("stack_rows expects [1 x d] rows");
      std::copy(tr.values.begin(), tr.values.end(), out.row_ptr(static_cast<int>(i)));
    }
    auto rows_copy = rows;
    return push(std::move(out), rows, [this, rows_copy](const Node& n) {
      for (size_t i = 0; i < rows_copy.size(); ++i) {
        accumulate(rows_copy[i], [&](Tensor& g) {
          for (int j = 0; j < g.cols(); ++j) g.at(0, j) += n.grad.at(static_cast<int>(i), j);
        });
      }
    });
  }

  Var embedding_rows(Var table, const std::vector<int>& ids) {
    const Tensor& tt = value(table);
    const int v = tt.rows(), d = tt.cols();
    for (int id : ids)
      if (id < 0 || id >= v)
        throw IndexError("token id " + std::to_string(id) + " out of range for vocab " +
                         std::to_string(v));
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy(tt.row_ptr(ids[i]), tt.row_ptr(ids[i]) + d, out.row_ptr(static_cast<int>(i)));
    auto ids_copy = ids;
    return push(std::move(out), {table}, [this, table, ids_copy](const Node& n) {
      accumulate(table, [&](Tensor& g) {
        const int d = g.cols();
        for (size_t i = 0; i < ids_copy.size(); ++i)
          for (int j = 0; j < d; ++j) g.at(ids_copy[i], j) += n.grad.at(static_cast<int>(i), j);
      });
    });
  }

  // Row-wise normalization with learned gain/bias, eps 1e-5.
  Var layer_norm(Var x, Var gain, Var bias) {
    constexpr double kEps = 1e-5;
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const Tensor& tb = value(bias);
    const int m = tx.rows(), d = tx.cols();
    if (tg.rows() != 1 || tg.cols() != d || tb.rows() != 1 || tb.cols() != d)
      throw DimensionError("layer_norm gain/bias must be [1 x d]");
    Tensor out = Tensor::zeros({m, d});
    std::vector<double> mean(m), rstd(m);
    for (int i = 0; i < m; ++i) {
      double mu = 0;
      for (int j = 0; j < d; ++j) mu += tx.at(i, j);
      mu /= d;
      double var = 0;
      for (int j = 0; j < d; ++j) {
        double c = tx.at(i, j) - mu;
        var += c * c;
      }
      var /= d;
      double rs = 1.0 / std::sqrt(var + kEps);
      mean[i] = mu;
      rstd[i] = rs;
      for (int j = 0; j < d; ++j)
        out.at(i, j) = (tx.at(i, j) - mu) * rs * tg.at(0, j) + tb.at(0, j);
    }
    return push(std::move(out), {x, gain, bias},
                [this, x, gain, bias, mean, rstd](const Node& n) {
                  const Tensor& tx = value(x);
                  const Tensor& tg = value(gain);
                  const int m = tx.rows(), d = tx.cols();
                  accumulate(gain, [&](Tensor& g) {
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < d; ++j)
                        g.at(0, j) += n.grad.at(i, j) * (tx.at(i, j) - mean[i]) * rstd[i];
                  });
                  accumulate(bias, [&](Tensor& g) {
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < d; ++j) g.at(0, j) += n.grad.at(i, j);
                  });
                  accumulate(x, [&](Tensor& g) {
                    for (int i = 0; i < m; ++i) {
                      double sum_gy = 0, sum_gyx = 0;
                      for (int j = 0; j < d; ++j) {
                        double gy = n.grad.at(i, j) * tg.at(0, j);
                        double xh = (tx.at(i, j) - mean[i]) * rstd[i];
                        sum_gy += gy;
                        sum_gyx += gy * xh;
                      }
                      for (int j = 0; j < d; ++j) {
                        double gy = n.grad.at(i, j) * tg.at(0, j);
                        double xh = (tx.at(i, j) - mean[i]) * rstd[i];
                        g.at(i, j) += rstd[i] * (gy - sum_gy / d - xh * sum_gyx / d);
                      }
                    }
                  });
                });
  }

  Var gelu(Var x) {
    const Tensor& tx = value(x);
    Tensor out = tx;
    for (double& v : out.values) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    return push(std::move(out), {x}, [this, x](const Node& n) {
      accumulate(x, [&](Tensor& g) {
        const Tensor& tx = value(x);
        constexpr double kInvSqrt2Pi = 0.3989422804014327;
        for (size_t i = 0; i < g.values.size(); ++i) {
          double v = tx.values[i];
          double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          g.values[i] += n.grad.values[i] * (cdf + v * pdf);
        }
      });
    });
  }

  // Row-wise softmax with max-subtraction; each output row sums to one.
  Var softmax_rows(Var x) {
    const Tensor& tx = value(x);
    if (!tx.all_finite()) throw NumericError("softmax_rows on non-finite input");
    const int m = tx.rows(), d = tx.cols();
    Tensor out = Tensor::zeros({m, d});
    for (int i = 0; i < m; ++i) {
      double mx = tx.at(i, 0);
      for (int j = 1; j < d; ++j) mx = std::max(mx, tx.at(i, j));
      double sum = 0;
      for (int j = 0; j < d; ++j) {
        double e = std::exp(tx.at(i, j) - mx);
        out.at(i, j) = e;
        sum += e;
      }
      for (int j = 0; j < d; ++j) out.at(i, j) /= sum;
    }
    return push(std::move(out), {x}, [this, x](const Node& n) {
      accumulate(x, [&](Tensor& g) {
        const Tensor& y = n.value;
        for (int i = 0; i < y.rows(); ++i) {
          double inner = 0;
          for (int j = 0; j < y.cols(); ++j) inner += n.grad.at(i, j) * y.at(i, j);
          for (int j = 0; j < y.cols(); ++j)
            g.at(i, j) += y.at(i, j) * (n.grad.at(i, j) - inner);
        }
      });
    });
  }

  // Mean over rows of -log softmax(logits)[target].
  Var cross_entropy(Var logits, const std::vector<int>& targets) {
    const Tensor& tl = value(logits);
    const int n = tl.rows(), v = tl.cols();
    if (static_cast<int>(targets.size()) != n)
      throw DimensionError("cross_entropy targets length " + std::to_string(targets.size()) +
                           " does not match " + std::to_string(n) + " rows");
    for (int t : targets)
      if (t < 0 || t >= v)
        throw IndexError("cross_entropy target " + std::to_string(t) +
                         " out of range for " + std::to_string(v) + " classes");
    Tensor probs = Tensor::zeros({n, v});
    double loss = 0;
    for (int i = 0; i < n; ++i) {
      double mx = tl.at(i, 0);
      for (int j = 1; j < v; ++j) mx = std::max(mx, tl.at(i, j));
      double sum = 0;
      for (int j = 0; j < v; ++j) {
        double e = std::exp(tl.at(i, j) - mx);
        probs.at(i, j) = e;
        sum += e;
      }
      for (int j = 0; j < v; ++j) probs.at(i, j) /= sum;
      loss += (std::log(sum) + mx) - tl.at(i, targets[i]);
    }
    loss /= n;
    auto targets_copy = targets;
    Var out = push(Tensor::scalar(loss), {logits},
                   [this, logits, targets_copy, probs](const Node& n) {
                     accumulate(logits, [&](Tensor& g) {
                       const double gs = n.grad.values[0] / probs.rows();
                       for (int i = 0; i < probs.rows(); ++i) {
                         for (int j = 0; j < probs.cols(); ++j)
                           g.at(i, j) += gs * probs.at(i, j);
                         g.at(i, targets_copy[i]) -= gs;
                       }
                     });
                   });
    return out;
  }

  // Scaled dot-product attention over one head. Disallowed positions get
  // weight exactly zero and their keys/values are never read.
  Var masked_attention(Var q, Var k, Var v, const AttentionMask& mask,
                       AttentionProbe* probe = nullptr) {
    const Tensor& tq = value(q);
    const Tensor& tk = value(k);
    const Tensor& tv = value(v);
    const int t = tq.rows(), d = tq.cols();
    if (tk.rows() != t || tk.cols() != d || tv.rows() != t || tv.cols() != d)
      throw DimensionError("masked_attention expects matching [t x d] q/k/v");
    if (mask.size != t)
      throw DimensionError("mask size " + std::to_string(mask.size) +
                           " does not match sequence length " + std::to_string(t));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor weights = Tensor::zeros({t, t});
    Tensor out = Tensor::zeros({t, d});
    for (int i = 0; i < t; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (int j = 0; j < t; ++j) {
        if (!mask.allow(i, j)) continue;
        any = true;
        double s = dot(tq.row_ptr(i), tk.row_ptr(j), d) * inv_sqrt_d;
        weights.at(i, j) = s;  // raw score, normalized below
        mx = std::max(mx, s);
      }
      if (!any)
        throw MaskError("attention row " + std::to_string(i) + " has no allowed positions");
      double sum = 0;
      for (int j = 0; j < t; ++j) {
        if (!mask.allow(i, j)) continue;
        double e = std::exp(weights.at(i, j) - mx);
        weights.at(i, j) = e;
        sum += e;
      }
      for (int j = 0; j < t; ++j) {
        if (!mask.allow(i, j)) continue;
        weights.at(i, j) /= sum;
        const double w = weights.at(i, j);
        for (int c = 0; c < d; ++c) out.at(i, c) += w * tv.at(j, c);
      }
    }
    if (probe) probe->weights.push_back(weights);
    AttentionMask mask_copy = mask;
    return push(std::move(out), {q, k, v},
                [this, q, k, v, weights, mask_copy, inv_sqrt_d](const Node& n) {
                  const Tensor& tq = value(q);
                  const Tensor& tk = value(k);
                  const Tensor& tv = value(v);
                  const int t = tq.rows(), d = tq.cols();
                  accumulate3(q, k, v, [&](Tensor& gq, Tensor& gk, Tensor& gv) {
                    std::vector<double> gw(t, 0.0);
                    for (int i = 0; i < t; ++i) {
                      double inner = 0;
                      for (int j = 0; j < t; ++j) {
                        if (!mask_copy.allow(i, j)) continue;
                        double gwj = dot(n.grad.row_ptr(i), tv.row_ptr(j), d);
                        gw[j] = gwj;
                        inner += weights.at(i, j) * gwj;
                      }
                      for (int j = 0; j < t; ++j) {
                        if (!mask_copy.allow(i, j)) continue;
                        const double w = weights.at(i, j);
                        for (int c = 0; c < d; ++c) gv.at(j, c) += w * n.grad.at(i, c);
                        const double gs = w * (gw[j] - inner) * inv_sqrt_d;
                        for (int c = 0; c < d; ++c) {
                          gq.at(i, c) += gs * tk.at(j, c);
                          gk.at(j, c) += gs * tq.at(i, c);
                        }
                      }
                    }
                  });
                });
  }

  Var mean_scalars(const std::vector<Var>& xs) {
    if (xs.empty()) throw ArgumentError("mean_scalars needs at least one value");
    double sum = 0;
    for (Var x : xs) sum += value(x).item();
    auto xs_copy = xs;
    return push(Tensor::scalar(sum / xs.size()), xs, [this, xs_copy](const Node& n) {
      const double g = n.grad.values[0] / xs_copy.size();
      for (Var x : xs_copy)
        accumulate(x, [&](Tensor& gx) { gx.values[0] += g; });
    });
  }

  Var sum_all(Var x) {
    const Tensor& tx = value(x);
    double s = 0;
    for (double v : tx.values) s += v;
    return push(Tensor::scalar(s), {x}, [this, x](const Node& n) {
      accumulate(x, [&](Tensor& g) {
        for (double& v : g.values) v += n.grad.values[0];
      });
    });
  }

  // Seeds the scalar root with the given weight and replays the tape in
  // reverse creation order (a valid reverse topological order).
  void backward(Var root, double seed = 1.0) {
    Node& r = mutable_node(root);
    if (!r.value.is_scalar())
      throw DimensionError("backward root must be scalar, got " + shape_str(r.value.shape));
    ensure_grad(root);
    r.grad.values[0] += seed;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.grad_set || !n.back) continue;
      n.back(n);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_set = false;
    std::function<void(const Node&)> back;
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= size()) throw IndexError("invalid tape variable");
    return nodes_[static_cast<size_t>(v.id)];
  }
  Node& mutable_node(Var v) {
    if (!v.valid() || v.id >= size()) throw IndexError("invalid tape variable");
    return nodes_[static_cast<size_t>(v.id)];
  }

  void ensure_grad(Var v) {
    Node& n = mutable_node(v);
    if (!n.grad_set) {
      n.grad = Tensor::zeros(n.value.shape);
      n.grad_set = true;
    }
  }

  template <typename Fn>
  void accumulate(Var v, Fn&& fn) {
    ensure_grad(v);
    fn(mutable_node(v).grad);
  }

  template <typename Fn>
  void accumulate3(Var a, Var b, Var c, Fn&& fn) {
    ensure_grad(a);
    ensure_grad(b);
    ensure_grad(c);
    fn(mutable_node(a).grad, mutable_node(b).grad, mutable_node(c).grad);
  }

  Var push(Tensor value, const std::vector<Var>&, std::function<void(const Node&)> back) {
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace retgen
