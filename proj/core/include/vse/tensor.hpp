#pragma once

// Dense float32 tensors with a reverse-mode gradient tape, plus the Adam
// optimizer. Tensors are at most rank-2 (a vector is a 1xN row); that is
// all the two-tower model needs.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace vse {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape / broadcast mismatch.
class DimError : public Error {
 public:
  using Error::Error;
};

// Bad configuration or contract violation by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Tensor

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
  std::vector<int> shape;   // rank 1 or 2
  std::vector<float> data;  // row-major, product(shape) elements
  bool requires_grad = false;
  std::vector<float> grad;  // same size as data when requires_grad

  Tensor() = default;
  Tensor(std::vector<int> s, bool rg);

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int rows() const { return shape.size() == 2 ? shape[0] : 1; }
  int cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 1 : shape[0]); }
  bool is_scalar() const { return size() == 1; }

  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  void zero_grad();
  void ensure_grad();

  static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
  static TensorPtr from_values(std::vector<int> shape, std::vector<float> values,
                               bool requires_grad = false);
  static TensorPtr scalar(float v, bool requires_grad = false);
};

std::string shape_str(const std::vector<int>& s);

// ---------------------------------------------------------------------------
// Tape

// Records one forward pass. Nodes are appended in execution order, which is
// a topological order by construction; backward() replays them in reverse.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t num_nodes() const { return nodes_.size(); }

  // Core ops. Each returns a fresh tensor; gradients flow to any input
  // with requires_grad set (directly or transitively).
  TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
  // a [MxK] times b^T where b is [NxK]; used for similarity matrices.
  TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);
  TensorPtr transpose(const TensorPtr& a);

  // add/sub/mul: equal shapes, or b a length-N vector broadcast over rows.
  TensorPtr add(const TensorPtr& a, const TensorPtr& b);
  TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
  TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
  TensorPtr scale(const TensorPtr& a, float s);

  TensorPtr relu(const TensorPtr& a);
  TensorPtr gelu(const TensorPtr& a);
  TensorPtr tanh_(const TensorPtr& a);
  TensorPtr sigmoid(const TensorPtr& a);

  // axis 1 (default): over each row; axis 0: over each column.
  TensorPtr softmax(const TensorPtr& a, int axis = 1);
  TensorPtr l2_normalize(const TensorPtr& a, int axis = 1, float eps = 1e-12f);

  TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                       float eps = 1e-5f);

  TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids);

  TensorPtr mean_rows(const TensorPtr& a);  // [RxC] -> [1xC]
  TensorPtr sum_all(const TensorPtr& a);    // -> scalar [1x1]
  TensorPtr mean_all(const TensorPtr& a);   // -> scalar [1x1]

  TensorPtr slice_rows(const TensorPtr& a, int start, int n);
  TensorPtr slice_cols(const TensorPtr& a, int start, int n);
  TensorPtr concat_rows(const std::vector<TensorPtr>& parts);
  TensorPtr concat_cols(const std::vector<TensorPtr>& parts);

  // Hook for composite ops with hand-written backward (e.g. the MH loss).
  // The closure must accumulate into the inputs' grad buffers.
  void record(TensorPtr out, std::function<void()> backward_fn);

  // Propagates d(root)/d(x) into every requires_grad tensor reachable from
  // the recorded nodes. root must be scalar. Nodes are kept; call
  // clear_grads() + backward() again for a bit-identical replay, or
  // reset() to drop the pass.
  void backward(const TensorPtr& root);

  void clear_grads();
  void reset();

 private:
  struct Node {
    TensorPtr out;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  std::vector<TensorPtr> leaves_;  // requires_grad inputs seen by recorded ops
  bool recording_;

  void note_leaf(const TensorPtr& t);
  TensorPtr make_out(std::vector<int> shape, bool requires_grad);
  void check_finite(const TensorPtr& t, const char* op) const;
};

// ---------------------------------------------------------------------------
// Adam

using ParamMap = std::map<std::string, TensorPtr>;

struct AdamState {
  std::int64_t step = 0;
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  std::vector<std::vector<float>> m, v;  // aligned with the param list

  static AdamState init(const std::vector<TensorPtr>& params, float lr);
};

// Standard bias-corrected Adam update over params[i]->grad.
void adam_step(const std::vector<TensorPtr>& params, AdamState& state);

std::vector<TensorPtr> param_list(const ParamMap& params);
void zero_grads(const ParamMap& params);

}  // namespace vse
