#include "vse/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vse {

namespace {

using EMat = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CEMat =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

EMat map(Tensor& t) { return EMat(t.data.data(), t.rows(), t.cols()); }
CEMat cmap(const Tensor& t) { return CEMat(t.data.data(), t.rows(), t.cols()); }
EMat gmap(Tensor& t) { return EMat(t.grad.data(), t.rows(), t.cols()); }
CEMat cgmap(const Tensor& t) { return CEMat(t.grad.data(), t.rows(), t.cols()); }

std::int64_t shape_product(const std::vector<int>& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

}  // namespace

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(std::vector<int> s, bool rg) : shape(std::move(s)), requires_grad(rg) {
  data.assign(static_cast<std::size_t>(shape_product(shape)), 0.0f);
  if (requires_grad) grad.assign(data.size(), 0.0f);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

TensorPtr Tensor::from_values(std::vector<int> shape, std::vector<float> values,
                              bool requires_grad) {
  auto t = std::make_shared<Tensor>(std::move(shape), requires_grad);
  if (static_cast<std::int64_t>(values.size()) != t->size())
    throw DimError("from_values: " + std::to_string(values.size()) + " values for shape " +
                   shape_str(t->shape));
  t->data = std::move(values);
  return t;
}

TensorPtr Tensor::scalar(float v, bool requires_grad) {
  return from_values({1, 1}, {v}, requires_grad);
}

// ---------------------------------------------------------------------------

void Tape::note_leaf(const TensorPtr& t) {
  if (t->requires_grad) {
    t->ensure_grad();
    leaves_.push_back(t);
  }
}

TensorPtr Tape::make_out(std::vector<int> shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad && recording_);
}

void Tape::check_finite(const TensorPtr& t, const char* op) const {
#ifndef NDEBUG
  for (float v : t->data)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite output of ") + op);
#else
  (void)t;
  (void)op;
#endif
}

void Tape::record(TensorPtr out, std::function<void()> backward_fn) {
  if (!recording_ || !out->requires_grad) return;
  out->ensure_grad();
  nodes_.push_back({std::move(out), std::move(backward_fn)});
}

void Tape::backward(const TensorPtr& root) {
  if (!root->is_scalar()) throw ConfigError("backward: root must be scalar, got " + shape_str(root->shape));
  if (nodes_.empty()) throw ConfigError("backward: tape is empty");
  root->ensure_grad();
  root->grad[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if (it->backward_fn) it->backward_fn();
}

void Tape::clear_grads() {
  for (auto& n : nodes_) n.out->zero_grad();
  for (auto& l : leaves_) l->zero_grad();
}

void Tape::reset() {
  nodes_.clear();
  leaves_.clear();
}

// ---------------------------------------------------------------------------
// Linear algebra

TensorPtr Tape::matmul(const TensorPtr& a, const TensorPtr& b) {
  if (a->cols() != b->rows())
    throw DimError("matmul: inner dims disagree, " + shape_str(a->shape) + " vs " +
                   shape_str(b->shape));
  auto out = make_out({a->rows(), b->cols()}, a->requires_grad || b->requires_grad);
  map(*out).noalias() = cmap(*a) * cmap(*b);
  check_finite(out, "matmul");
  record(out, [a, b, out] {
    if (a->requires_grad) gmap(*a).noalias() += cgmap(*out) * cmap(*b).transpose();
    if (b->requires_grad) gmap(*b).noalias() += cmap(*a).transpose() * cgmap(*out);
  });
  return out;
}

TensorPtr Tape::matmul_nt(const TensorPtr& a, const TensorPtr& b) {
  if (a->cols() != b->cols())
    throw DimError("matmul_nt: inner dims disagree, " + shape_str(a->shape) + " vs " +
                   shape_str(b->shape));
  auto out = make_out({a->rows(), b->rows()}, a->requires_grad || b->requires_grad);
  map(*out).noalias() = cmap(*a) * cmap(*b).transpose();
  check_finite(out, "matmul_nt");
  record(out, [a, b, out] {
    if (a->requires_grad) gmap(*a).noalias() += cgmap(*out) * cmap(*b);
    if (b->requires_grad) gmap(*b).noalias() += cgmap(*out).transpose() * cmap(*a);
  });
  return out;
}

TensorPtr Tape::transpose(const TensorPtr& a) {
  auto out = make_out({a->cols(), a->rows()}, a->requires_grad);
  map(*out) = cmap(*a).transpose();
  record(out, [a, out] {
    if (a->requires_grad) gmap(*a) += cgmap(*out).transpose();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise / broadcast

namespace {

enum class BinKind { kSame, kRowBroadcast };

BinKind bin_kind(const Tensor& a, const Tensor& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return BinKind::kSame;
  if (b.rows() == 1 && b.cols() == a.cols()) return BinKind::kRowBroadcast;
  throw DimError("broadcast: incompatible shapes " + shape_str(a.shape) + " and " +
                 shape_str(b.shape));
}

}  // namespace

TensorPtr Tape::add(const TensorPtr& a, const TensorPtr& b) {
  BinKind k = bin_kind(*a, *b);
  auto out = make_out(a->shape, a->requires_grad || b->requires_grad);
  if (k == BinKind::kSame)
    map(*out) = cmap(*a) + cmap(*b);
  else
    map(*out) = cmap(*a).rowwise() + cmap(*b).row(0);
  record(out, [a, b, out, k] {
    if (a->requires_grad) gmap(*a) += cgmap(*out);
    if (b->requires_grad) {
      if (k == BinKind::kSame)
        gmap(*b) += cgmap(*out);
      else
        gmap(*b).row(0) += cgmap(*out).colwise().sum();
    }
  });
  return out;
}

TensorPtr Tape::sub(const TensorPtr& a, const TensorPtr& b) {
  BinKind k = bin_kind(*a, *b);
  auto out = make_out(a->shape, a->requires_grad || b->requires_grad);
  if (k == BinKind::kSame)
    map(*out) = cmap(*a) - cmap(*b);
  else
    map(*out) = cmap(*a).rowwise() - cmap(*b).row(0);
  record(out, [a, b, out, k] {
    if (a->requires_grad) gmap(*a) += cgmap(*out);
    if (b->requires_grad) {
      if (k == BinKind::kSame)
        gmap(*b) -= cgmap(*out);
      else
        gmap(*b).row(0) -= cgmap(*out).colwise().sum();
    }
  });
  return out;
}

TensorPtr Tape::mul(const TensorPtr& a, const TensorPtr& b) {
  BinKind k = bin_kind(*a, *b);
  auto out = make_out(a->shape, a->requires_grad || b->requires_grad);
  if (k == BinKind::kSame)
    map(*out) = cmap(*a).cwiseProduct(cmap(*b));
  else
    map(*out) = cmap(*a).array().rowwise() * cmap(*b).row(0).array();
  record(out, [a, b, out, k] {
    if (k == BinKind::kSame) {
      if (a->requires_grad) gmap(*a) += cgmap(*out).cwiseProduct(cmap(*b));
      if (b->requires_grad) gmap(*b) += cgmap(*out).cwiseProduct(cmap(*a));
    } else {
      if (a->requires_grad)
        gmap(*a).array() += cgmap(*out).array().rowwise() * cmap(*b).row(0).array();
      if (b->requires_grad)
        gmap(*b).row(0) += (cgmap(*out).cwiseProduct(cmap(*a))).colwise().sum();
    }
  });
  return out;
}

TensorPtr Tape::scale(const TensorPtr& a, float s) {
  auto out = make_out(a->shape, a->requires_grad);
  map(*out) = cmap(*a) * s;
  record(out, [a, out, s] {
    if (a->requires_grad) gmap(*a) += cgmap(*out) * s;
  });
  return out;
}

namespace {

template <class Fwd, class Dfdx>
TensorPtr unary_op(Tape& tape, const TensorPtr& a, Fwd f, Dfdx df, const char* name,
                   bool recording) {
  auto out = Tensor::zeros(a->shape, a->requires_grad && recording);
  for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = f(a->data[i]);
  tape.record(out, [a, out, df] {
    if (!a->requires_grad) return;
    for (std::size_t i = 0; i < a->data.size(); ++i)
      a->grad[i] += out->grad[i] * df(a->data[i], out->data[i]);
  });
  (void)name;
  return out;
}

}  // namespace

TensorPtr Tape::relu(const TensorPtr& a) {
  return unary_op(
      *this, a, [](float x) { return x > 0 ? x : 0.0f; },
      [](float x, float) { return x > 0 ? 1.0f : 0.0f; }, "relu", recording_);
}

TensorPtr Tape::gelu(const TensorPtr& a) {
  // tanh approximation
  return unary_op(
      *this, a,
      [](float x) {
        float u = kGeluC * (x + kGeluA * x * x * x);
        return 0.5f * x * (1.0f + std::tanh(u));
      },
      [](float x, float) {
        float u = kGeluC * (x + kGeluA * x * x * x);
        float t = std::tanh(u);
        float du = kGeluC * (1.0f + 3.0f * kGeluA * x * x);
        return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
      },
      "gelu", recording_);
}

TensorPtr Tape::tanh_(const TensorPtr& a) {
  return unary_op(
      *this, a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; },
      "tanh", recording_);
}

TensorPtr Tape::sigmoid(const TensorPtr& a) {
  return unary_op(
      *this, a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
      [](float, float y) { return y * (1.0f - y); }, "sigmoid", recording_);
}

// ---------------------------------------------------------------------------
// Normalizations

TensorPtr Tape::softmax(const TensorPtr& a, int axis) {
  if (axis == 0) return transpose(softmax(transpose(a), 1));
  if (axis != 1 && axis != -1) throw ConfigError("softmax: axis must be 0, 1 or -1");
  const int R = a->rows(), C = a->cols();
  auto out = make_out(a->shape, a->requires_grad);
  for (int r = 0; r < R; ++r) {
    float mx = a->at(r, 0);
    for (int c = 1; c < C; ++c) mx = std::max(mx, a->at(r, c));
    float sum = 0.0f;
    for (int c = 0; c < C; ++c) {
      float e = std::exp(a->at(r, c) - mx);
      out->at(r, c) = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) out->at(r, c) /= sum;
  }
  check_finite(out, "softmax");
  record(out, [a, out, R, C] {
    if (!a->requires_grad) return;
    for (int r = 0; r < R; ++r) {
      float dot = 0.0f;
      for (int c = 0; c < C; ++c) dot += out->grad[r * C + c] * out->data[r * C + c];
      for (int c = 0; c < C; ++c)
        a->grad[r * C + c] += out->data[r * C + c] * (out->grad[r * C + c] - dot);
    }
  });
  return out;
}

TensorPtr Tape::l2_normalize(const TensorPtr& a, int axis, float eps) {
  if (axis == 0) return transpose(l2_normalize(transpose(a), 1, eps));
  if (axis != 1 && axis != -1) throw ConfigError("l2_normalize: axis must be 0, 1 or -1");
  const int R = a->rows(), C = a->cols();
  auto out = make_out(a->shape, a->requires_grad);
  std::vector<float> norms(R);
  for (int r = 0; r < R; ++r) {
    float ss = 0.0f;
    for (int c = 0; c < C; ++c) ss += a->at(r, c) * a->at(r, c);
    float n = std::max(std::sqrt(ss), eps);
    norms[r] = n;
    for (int c = 0; c < C; ++c) out->at(r, c) = a->at(r, c) / n;
  }
  record(out, [a, out, norms, R, C] {
    if (!a->requires_grad) return;
    for (int r = 0; r < R; ++r) {
      float dot = 0.0f;
      for (int c = 0; c < C; ++c) dot += out->grad[r * C + c] * out->data[r * C + c];
      for (int c = 0; c < C; ++c)
        a->grad[r * C + c] += (out->grad[r * C + c] - out->data[r * C + c] * dot) / norms[r];
    }
  });
  return out;
}

TensorPtr Tape::layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                           float eps) {
  const int R = x->rows(), C = x->cols();
  if (gain->size() != C || bias->size() != C)
    throw DimError("layer_norm: gain/bias must have length " + std::to_string(C));
  auto out = make_out(x->shape, x->requires_grad || gain->requires_grad || bias->requires_grad);
  std::vector<float> means(R), istds(R);
  for (int r = 0; r < R; ++r) {
    float mu = 0.0f;
    for (int c = 0; c < C; ++c) mu += x->at(r, c);
    mu /= C;
    float var = 0.0f;
    for (int c = 0; c < C; ++c) {
      float d = x->at(r, c) - mu;
      var += d * d;
    }
    var /= C;
    float istd = 1.0f / std::sqrt(var + eps);
    means[r] = mu;
    istds[r] = istd;
    for (int c = 0; c < C; ++c)
      out->at(r, c) = (x->at(r, c) - mu) * istd * gain->data[c] + bias->data[c];
  }
  record(out, [x, gain, bias, out, means, istds, R, C] {
    for (int r = 0; r < R; ++r) {
      float istd = istds[r], mu = means[r];
      // xhat and the two reductions the input gradient needs
      float sum_dy_g = 0.0f, sum_dy_g_xhat = 0.0f;
      for (int c = 0; c < C; ++c) {
        float xhat = (x->at(r, c) - mu) * istd;
        float dyg = out->grad[r * C + c] * gain->data[c];
        sum_dy_g += dyg;
        sum_dy_g_xhat += dyg * xhat;
        if (gain->requires_grad) gain->grad[c] += out->grad[r * C + c] * xhat;
        if (bias->requires_grad) bias->grad[c] += out->grad[r * C + c];
      }
      if (x->requires_grad) {
        for (int c = 0; c < C; ++c) {
          float xhat = (x->at(r, c) - mu) * istd;
          float dyg = out->grad[r * C + c] * gain->data[c];
          x->grad[r * C + c] += istd * (dyg - sum_dy_g / C - xhat * sum_dy_g_xhat / C);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gather / reductions / slicing

TensorPtr Tape::embedding_lookup(const TensorPtr& table, const std::vector<int>& ids) {
  const int V = table->rows(), E = table->cols();
  for (int id : ids)
    if (id < 0 || id >= V)
      throw DimError("embedding_lookup: id " + std::to_string(id) + " out of range [0, " +
                     std::to_string(V) + ")");
  auto out = make_out({static_cast<int>(ids.size()), E}, table->requires_grad);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table->data.begin() + static_cast<std::size_t>(ids[i]) * E, E,
                out->data.begin() + i * E);
  record(out, [table, out, ids, E] {
    if (!table->requires_grad) return;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int c = 0; c < E; ++c)
        table->grad[static_cast<std::size_t>(ids[i]) * E + c] += out->grad[i * E + c];
  });
  return out;
}

TensorPtr Tape::mean_rows(const TensorPtr& a) {
  const int R = a->rows(), C = a->cols();
  auto out = make_out({1, C}, a->requires_grad);
  map(*out).row(0) = cmap(*a).colwise().mean();
  record(out, [a, out, R, C] {
    if (!a->requires_grad) return;
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) a->grad[r * C + c] += out->grad[c] / R;
  });
  return out;
}

TensorPtr Tape::sum_all(const TensorPtr& a) {
  auto out = make_out({1, 1}, a->requires_grad);
  out->data[0] = cmap(*a).sum();
  record(out, [a, out] {
    if (!a->requires_grad) return;
    for (auto& g : a->grad) g += out->grad[0];
  });
  return out;
}

TensorPtr Tape::mean_all(const TensorPtr& a) { return scale(sum_all(a), 1.0f / a->size()); }

TensorPtr Tape::slice_rows(const TensorPtr& a, int start, int n) {
  const int R = a->rows(), C = a->cols();
  if (start < 0 || n < 0 || start + n > R)
    throw DimError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + n) +
                   ") out of " + std::to_string(R) + " rows");
  auto out = make_out({n, C}, a->requires_grad);
  std::copy_n(a->data.begin() + static_cast<std::size_t>(start) * C, static_cast<std::size_t>(n) * C,
              out->data.begin());
  record(out, [a, out, start, n, C] {
    if (!a->requires_grad) return;
    for (int i = 0; i < n * C; ++i) a->grad[static_cast<std::size_t>(start) * C + i] += out->grad[i];
  });
  return out;
}

TensorPtr Tape::slice_cols(const TensorPtr& a, int start, int n) {
  const int R = a->rows(), C = a->cols();
  if (start < 0 || n < 0 || start + n > C)
    throw DimError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + n) +
                   ") out of " + std::to_string(C) + " cols");
  auto out = make_out({R, n}, a->requires_grad);
  for (int r = 0; r < R; ++r)
    std::copy_n(a->data.begin() + static_cast<std::size_t>(r) * C + start, n,
                out->data.begin() + static_cast<std::size_t>(r) * n);
  record(out, [a, out, start, n, R, C] {
    if (!a->requires_grad) return;
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < n; ++c)
        a->grad[static_cast<std::size_t>(r) * C + start + c] +=
            out->grad[static_cast<std::size_t>(r) * n + c];
  });
  return out;
}

TensorPtr Tape::concat_rows(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no parts");
  const int C = parts[0]->cols();
  int R = 0;
  bool rg = false;
  for (auto& p : parts) {
    if (p->cols() != C) throw DimError("concat_rows: column counts differ");
    R += p->rows();
    rg = rg || p->requires_grad;
  }
  auto out = make_out({R, C}, rg);
  std::size_t off = 0;
  for (auto& p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
    off += p->data.size();
  }
  record(out, [parts, out] {
    std::size_t off = 0;
    for (auto& p : parts) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += out->grad[off + i];
      off += p->data.size();
    }
  });
  return out;
}

TensorPtr Tape::concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no parts");
  const int R = parts[0]->rows();
  int C = 0;
  bool rg = false;
  for (auto& p : parts) {
    if (p->rows() != R) throw DimError("concat_cols: row counts differ");
    C += p->cols();
    rg = rg || p->requires_grad;
  }
  auto out = make_out({R, C}, rg);
  int coff = 0;
  for (auto& p : parts) {
    for (int r = 0; r < R; ++r)
      std::copy_n(p->data.begin() + static_cast<std::size_t>(r) * p->cols(), p->cols(),
                  out->data.begin() + static_cast<std::size_t>(r) * C + coff);
    coff += p->cols();
  }
  record(out, [parts, out, R, C] {
    int coff = 0;
    for (auto& p : parts) {
      if (p->requires_grad)
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < p->cols(); ++c)
            p->grad[static_cast<std::size_t>(r) * p->cols() + c] +=
                out->grad[static_cast<std::size_t>(r) * C + coff + c];
      coff += p->cols();
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Adam

AdamState AdamState::init(const std::vector<TensorPtr>& params, float lr) {
  AdamState s;
  s.lr = lr;
  if (s.lr < 0.0f) throw ConfigError("adam: lr must be >= 0");
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (auto& p : params) {
    s.m.emplace_back(p->data.size(), 0.0f);
    s.v.emplace_back(p->data.size(), 0.0f);
  }
  return s;
}

void adam_step(const std::vector<TensorPtr>& params, AdamState& state) {
  if (state.m.size() != params.size())
    throw ConfigError("adam_step: state holds " + std::to_string(state.m.size()) +
                      " moment buffers for " + std::to_string(params.size()) + " params");
  state.step += 1;
  const float bc1 = 1.0f - std::pow(state.beta1, static_cast<float>(state.step));
  const float bc2 = 1.0f - std::pow(state.beta2, static_cast<float>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (p.grad.size() != p.data.size() || state.m[i].size() != p.data.size())
      throw ConfigError("adam_step: shape mismatch for parameter " + std::to_string(i));
    for (std::size_t j = 0; j < p.data.size(); ++j) {
      float g = p.grad[j];
      state.m[i][j] = state.beta1 * state.m[i][j] + (1.0f - state.beta1) * g;
      state.v[i][j] = state.beta2 * state.v[i][j] + (1.0f - state.beta2) * g * g;
      float mhat = state.m[i][j] / bc1;
      float vhat = state.v[i][j] / bc2;
      p.data[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

std::vector<TensorPtr> param_list(const ParamMap& params) {
  std::vector<TensorPtr> out;
  out.reserve(params.size());
  for (auto& [name, t] : params) out.push_back(t);
  return out;
}

void zero_grads(const ParamMap& params) {
  for (auto& [name, t] : params) t->zero_grad();
}

}  // namespace vse
