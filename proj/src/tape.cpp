// SPDX-License-Identifier: Apache-2.0

#include "mult/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mult/error.hpp"

namespace mult {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::push(Entry entry) {
  entries_.push_back(std::move(entry));
  return Var(this, entries_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Entry e;
  e.op = "constant";
  e.value = std::move(value);
  return push(std::move(e));
}

Var Tape::variable(Tensor value) {
  Entry e;
  e.op = "variable";
  e.value = std::move(value);
  e.needs_grad = grad_enabled_;
  return push(std::move(e));
}

Var Tape::parameter(Parameter& p) {
  Entry e;
  e.op = "parameter";
  e.external = &p.tensor;
  e.param = &p;
  e.needs_grad = grad_enabled_;
  return push(std::move(e));
}

Var Tape::record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Entry e;
  e.op = op;
  e.value = std::move(value);
  if (grad_enabled_) {
    e.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                               [this](std::size_t id) { return entries_[id].needs_grad; });
  }
  if (e.needs_grad) e.backward = std::move(fn);
  e.inputs = std::move(inputs);
  return push(std::move(e));
}

const Tensor& Tape::value(std::size_t id) const {
  const Entry& e = entries_[id];
  return e.external ? *e.external : e.value;
}

std::span<double> Tape::accum(std::size_t id) {
  Entry& e = entries_[id];
  if (!e.needs_grad) return {};
  if (e.grad.empty()) e.grad.assign(value(id).size(), 0.0);
  return e.grad;
}

std::span<const double> Tape::grad(Var v) const { return entries_[v.id()].grad; }

void Tape::backward(Var loss) {
  if (loss.tape().size() == 0 || &loss.tape() != this) throw ContractError("backward: loss is not on this tape");
  if (value(loss.id()).size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_string(value(loss.id()).shape()));
  }
  for (auto& e : entries_) e.grad.clear();
  if (!entries_[loss.id()].needs_grad) return;
  accum(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Entry& e = entries_[i];
    if (e.grad.empty()) continue;
    if (e.param) {
      auto dst = e.param->tensor.grad();
      if (dst.size() != e.grad.size()) {
        e.param->tensor.set_requires_grad(true);
        dst = e.param->tensor.grad();
      }
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += e.grad[k];
    } else if (e.backward) {
      e.backward(e.grad, *this);
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()));
  }
  Tensor C(matrix_shape(m, n));
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  double* pc = C.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const double av = pa[i * k + t];
      const double* brow = pb + t * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(C), {ia, ib},
                         [ia, ib, m, k, n](std::span<const double> g, Tape& t) {
                           const double* pa = t.value(ia).data().data();
                           const double* pb = t.value(ib).data().data();
                           if (auto da = t.accum(ia); !da.empty()) {
                             // da += g B^T, via B^T so the inner loop is contiguous.
                             std::vector<double> bt(k * n);
                             for (std::size_t r = 0; r < k; ++r)
                               for (std::size_t j = 0; j < n; ++j) bt[j * k + r] = pb[r * n + j];
                             for (std::size_t i = 0; i < m; ++i) {
                               const double* grow = g.data() + i * n;
                               double* arow = da.data() + i * k;
                               for (std::size_t j = 0; j < n; ++j) {
                                 const double gv = grow[j];
                                 const double* btrow = bt.data() + j * k;
                                 for (std::size_t r = 0; r < k; ++r) arow[r] += gv * btrow[r];
                               }
                             }
                           }
                           if (auto db = t.accum(ib); !db.empty()) {
                             for (std::size_t i = 0; i < m; ++i) {
                               const double* grow = g.data() + i * n;
                               for (std::size_t r = 0; r < k; ++r) {
                                 const double av = pa[i * k + r];
                                 double* drow = db.data() + r * n;
                                 for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                               }
                             }
                           }
                         });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  if (B.cols() != k) {
    throw DimensionError("matmul_nt: feature dimensions differ, " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()) + "^T");
  }
  Tensor C(matrix_shape(m, n));
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += pa[i * k + t] * pb[j * k + t];
      C.at(i, j) = s;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul_nt", std::move(C), {ia, ib},
                         [ia, ib, m, k, n](std::span<const double> g, Tape& t) {
                           const double* pa = t.value(ia).data().data();
                           const double* pb = t.value(ib).data().data();
                           if (auto da = t.accum(ia); !da.empty()) {
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                 const double gv = g[i * n + j];
                                 for (std::size_t r = 0; r < k; ++r) da[i * k + r] += gv * pb[j * k + r];
                               }
                             }
                           }
                           if (auto db = t.accum(ib); !db.empty()) {
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                 const double gv = g[i * n + j];
                                 for (std::size_t r = 0; r < k; ++r) db[j * k + r] += gv * pa[i * k + r];
                               }
                             }
                           }
                         });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C(matrix_shape(n, m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.at(j, i) = A.at(i, j);
  const std::size_t ia = a.id();
  return a.tape().record("transpose", std::move(C), {ia}, [ia, m, n](std::span<const double> g, Tape& t) {
    auto da = t.accum(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " cannot become " + shape_string(shape));
  }
  Tensor C(std::move(shape), a.value().values());
  const std::size_t ia = a.id();
  return a.tape().record("reshape", std::move(C), {ia}, [ia](std::span<const double> g, Tape& t) {
    auto d = t.accum(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor C = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(C), {ia, ib}, [ia, ib](std::span<const double> g, Tape& t) {
    for (std::size_t id : {ia, ib}) {
      if (auto d = t.accum(id); !d.empty())
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor C = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("sub", std::move(C), {ia, ib}, [ia, ib](std::span<const double> g, Tape& t) {
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    if (auto d = t.accum(ib); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor C = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(C), {ia, ib}, [ia, ib](std::span<const double> g, Tape& t) {
    const auto av = t.value(ia).data();
    const auto bv = t.value(ib).data();
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    if (auto d = t.accum(ib); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
  });
}

Var scale(Var a, double s) {
  Tensor C = a.value();
  for (double& v : C.values()) v *= s;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(C), {ia}, [ia, s](std::span<const double> g, Tape& t) {
    auto d = t.accum(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
  });
}

Var add_row_vector(Var a, Var bias) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  if (bias.value().size() != n) {
    throw DimensionError("add_row_vector: bias " + shape_string(bias.value().shape()) + " vs rows of " +
                         shape_string(A.shape()));
  }
  Tensor C = A;
  const auto bv = bias.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C[i * n + j] += bv[j];
  const std::size_t ia = a.id(), ib = bias.id();
  return a.tape().record("add_row_vector", std::move(C), {ia, ib},
                         [ia, ib, m, n](std::span<const double> g, Tape& t) {
                           if (auto d = t.accum(ia); !d.empty())
                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                           if (auto d = t.accum(ib); !d.empty())
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
                         });
}

Var add_constant(Var a, const Tensor& c) {
  require_same_shape("add_constant", a.value(), c);
  Tensor C = a.value();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += c[i];
  const std::size_t ia = a.id();
  return a.tape().record("add_constant", std::move(C), {ia}, [ia](std::span<const double> g, Tape& t) {
    auto d = t.accum(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var mul_constant(Var a, const Tensor& c) {
  require_same_shape("mul_constant", a.value(), c);
  Tensor C = a.value();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= c[i];
  const std::size_t ia = a.id();
  return a.tape().record("mul_constant", std::move(C), {ia}, [ia, c](std::span<const double> g, Tape& t) {
    auto d = t.accum(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c[i];
  });
}

Var relu(Var a) {
  Tensor C = a.value();
  for (double& v : C.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record("relu", std::move(C), {ia}, [ia](std::span<const double> g, Tape& t) {
    const auto x = t.value(ia).data();
    auto d = t.accum(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) d[i] += g[i];
  });
}

Var tanh(Var a) {
  Tensor C = a.value();
  for (double& v : C.values()) v = std::tanh(v);
  const std::size_t ia = a.id();
  Tensor y = C;
  return a.tape().record("tanh", std::move(C), {ia}, [ia, y = std::move(y)](std::span<const double> g, Tape& t) {
    auto d = t.accum(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {ia}, [ia](std::span<const double> g, Tape& t) {
    auto d = t.accum(ia);
    for (double& v : d) v += g[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var softmax_rows(Var a, const std::vector<bool>& key_valid) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  if (!key_valid.empty() && key_valid.size() != n) {
    throw DimensionError("softmax_rows: mask has " + std::to_string(key_valid.size()) + " entries for " +
                         std::to_string(n) + " columns");
  }
  const bool masked = !key_valid.empty();
  if (masked && std::none_of(key_valid.begin(), key_valid.end(), [](bool b) { return b; })) {
    throw ContractError("softmax_rows: every column is masked");
  }
  Tensor P(matrix_shape(m, n));
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = A.data().data() + i * n;
    double* out = P.data().data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!masked || key_valid[j]) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = (!masked || key_valid[j]) ? std::exp(row[j] - mx) : 0.0;
      z += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= z;
  }
  Tensor saved = P;
  const std::size_t ia = a.id();
  return a.tape().record("softmax_rows", std::move(P), {ia},
                         [ia, m, n, p = std::move(saved)](std::span<const double> g, Tape& t) {
                           auto d = t.accum(ia);
                           for (std::size_t i = 0; i < m; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
                             for (std::size_t j = 0; j < n; ++j) d[i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
                           }
                         });
}

Var log_softmax_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Tensor L(matrix_shape(m, n));
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = A.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) L.at(i, j) = row[j] - lz;
  }
  Tensor saved = L;
  const std::size_t ia = a.id();
  return a.tape().record("log_softmax_rows", std::move(L), {ia},
                         [ia, m, n, l = std::move(saved)](std::span<const double> g, Tape& t) {
                           auto d = t.accum(ia);
                           for (std::size_t i = 0; i < m; ++i) {
                             double gs = 0.0;
                             for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
                             for (std::size_t j = 0; j < n; ++j)
                               d[i * n + j] += g[i * n + j] - std::exp(l[i * n + j]) * gs;
                           }
                         });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths, ids;
  for (const Var& p : parts) {
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row counts differ, " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    widths.push_back(p.cols());
    ids.push_back(p.id());
    n += p.cols();
  }
  Tensor C(matrix_shape(m, n));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) C.at(i, off + j) = P.at(i, j);
    off += widths[k];
  }
  return parts[0].tape().record("concat_cols", std::move(C), ids,
                                [ids, widths, m, n](std::span<const double> g, Tape& t) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (auto d = t.accum(ids[k]); !d.empty()) {
                                      for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < widths[k]; ++j)
                                          d[i * widths[k] + j] += g[i * n + off + j];
                                    }
                                    off += widths[k];
                                  }
                                });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::size_t> sizes, ids;
  std::vector<double> data;
  for (const Var& p : parts) {
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column counts differ, " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    sizes.push_back(p.value().size());
    ids.push_back(p.id());
    m += p.rows();
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  return parts[0].tape().record("concat_rows", Tensor(matrix_shape(m, n), std::move(data)), ids,
                                [ids, sizes](std::span<const double> g, Tape& t) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (auto d = t.accum(ids[k]); !d.empty())
                                      for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += g[off + i];
                                    off += sizes[k];
                                  }
                                });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tensor C = a.value().slice_rows(begin, count);
  const std::size_t n = a.cols();
  const std::size_t ia = a.id();
  return a.tape().record("slice_rows", std::move(C), {ia}, [ia, begin, count, n](std::span<const double> g, Tape& t) {
    auto d = t.accum(ia);
    for (std::size_t i = 0; i < count * n; ++i) d[begin * n + i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  if (count == 0 || begin + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_string(A.shape()));
  }
  Tensor C(matrix_shape(m, count));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) C.at(i, j) = A.at(i, begin + j);
  const std::size_t ia = a.id();
  return a.tape().record("slice_cols", std::move(C), {ia},
                         [ia, begin, count, m, n](std::span<const double> g, Tape& t) {
                           auto d = t.accum(ia);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < count; ++j) d[i * n + begin + j] += g[i * count + j];
                         });
}

Var l1_loss(Var pred, const Tensor& target) {
  if (pred.value().size() != target.size()) {
    throw DimensionError("l1_loss: prediction " + shape_string(pred.shape()) + " vs target " +
                         shape_string(target.shape()));
  }
  const auto p = pred.value().data();
  const double inv = 1.0 / static_cast<double>(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - target[i]);
  const std::size_t ip = pred.id();
  return pred.tape().record("l1_loss", Tensor::scalar(s * inv), {ip}, [ip, target, inv](std::span<const double> g, Tape& t) {
    const auto p = t.value(ip).data();
    auto d = t.accum(ip);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double diff = p[i] - target[i];
      const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : (diff == 0.0 ? 0.0 : diff));
      d[i] += g[0] * inv * sign;
    }
  });
}

Var l2_loss(Var pred, const Tensor& target) {
  if (pred.value().size() != target.size()) {
    throw DimensionError("l2_loss: prediction " + shape_string(pred.shape()) + " vs target " +
                         shape_string(target.shape()));
  }
  const auto p = pred.value().data();
  const double inv = 1.0 / static_cast<double>(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - target[i]) * (p[i] - target[i]);
  const std::size_t ip = pred.id();
  return pred.tape().record("l2_loss", Tensor::scalar(s * inv), {ip}, [ip, target, inv](std::span<const double> g, Tape& t) {
    const auto p = t.value(ip).data();
    auto d = t.accum(ip);
    for (std::size_t i = 0; i < p.size(); ++i) d[i] += g[0] * inv * 2.0 * (p[i] - target[i]);
  });
}

Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (labels.size() != m) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
  }
  for (auto l : labels)
    if (l >= n) throw DimensionError("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
  Var lp = log_softmax_rows(logits);
  const double inv = 1.0 / static_cast<double>(m);
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) s -= lp.value().at(i, labels[i]);
  const std::size_t il = lp.id();
  return logits.tape().record("nll", Tensor::scalar(s * inv), {il},
                              [il, labels, n, inv](std::span<const double> g, Tape& t) {
                                auto d = t.accum(il);
                                for (std::size_t i = 0; i < labels.size(); ++i) d[i * n + labels[i]] -= g[0] * inv;
                              });
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  std::vector<double> analytic;
  {
    Tape tape;
    Var xv = tape.variable(x);
    Var out = f(tape, xv);
    tape.backward(out);
    auto g = tape.grad(xv);
    analytic.assign(g.begin(), g.end());
    if (analytic.empty()) analytic.assign(x.size(), 0.0);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape(false);
    return f(tape, tape.constant(at)).value()[0];
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

GradCheckResult grad_check_parameters(const std::function<Var(Tape&)>& loss, const ParameterList& params,
                                      double eps, std::size_t max_coords_per_param, std::uint64_t seed) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  std::vector<std::vector<double>> saved;
  for (auto* p : params) {
    saved.emplace_back(p->tensor.grad().begin(), p->tensor.grad().end());
    p->tensor.set_requires_grad(true);
    p->tensor.zero_grad();
  }
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  std::vector<std::vector<double>> analytic;
  for (auto* p : params) analytic.emplace_back(p->tensor.grad().begin(), p->tensor.grad().end());

  auto eval = [&]() {
    Tape tape(false);
    return loss(tape).value()[0];
  };

  GradCheckResult result;
  Rng rng(seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k]->tensor;
    std::vector<std::size_t> coords(w.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords_per_param && coords.size() > max_coords_per_param) {
      shuffle(coords, rng);
      coords.resize(max_coords_per_param);
    }
    for (std::size_t i : coords) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double up = eval();
      w[i] = orig - eps;
      const double down = eval();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = err;
        result.worst = params[k]->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto g = params[k]->tensor.grad();
    if (saved[k].size() == g.size()) {
      std::copy(saved[k].begin(), saved[k].end(), g.begin());
    } else {
      params[k]->tensor.zero_grad();
    }
  }
  return result;
}

}  // namespace mult
