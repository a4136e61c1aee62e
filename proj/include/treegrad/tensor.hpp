#pragma once

// Dense row-major tensors over {f64, i64, bool} and the evaluation kernels
// for the primitive operation set. Tensors are immutable; copies share the
// underlying buffer.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace treegrad {

// Shortest round-trip decimal for a double.
inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::string fmt_double_17g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

enum class DType { F64, I64, Bool };

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::F64: return "f64";
    case DType::I64: return "i64";
    case DType::Bool: return "bool";
  }
  return "?";
}

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const { return dims_.size(); }
  std::int64_t dim(std::size_t i) const { return dims_[i]; }
  const std::vector<std::int64_t>& dims() const { return dims_; }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : dims_) n *= d;
    return n;
  }

  bool operator==(const Shape& o) const { return dims_ == o.dims_; }
  bool operator!=(const Shape& o) const { return dims_ != o.dims_; }

  // "()", "(3,)", "(3,2)"
  std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      s += std::to_string(dims_[i]);
      if (i + 1 < dims_.size()) s += ",";
    }
    if (dims_.size() == 1) s += ",";
    s += ")";
    return s;
  }

 private:
  void validate() const {
    for (auto d : dims_)
      if (d < 0) throw std::invalid_argument("[shape] dimensions must be non-negative, got " + str());
  }
  std::vector<std::int64_t> dims_;
};

struct TensorSpec {
  Shape shape;
  DType dtype = DType::F64;

  bool operator==(const TensorSpec& o) const { return shape == o.shape && dtype == o.dtype; }
  bool operator!=(const TensorSpec& o) const { return !(*this == o); }
  std::string str() const { return shape.str() + " " + dtype_name(dtype); }
};

// Trailing-alignment broadcast of two shapes; nullopt when incompatible.
inline std::optional<Shape> broadcast_shapes(const Shape& a, const Shape& b) {
  std::size_t ra = a.rank(), rb = b.rank(), r = std::max(ra, rb);
  std::vector<std::int64_t> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::int64_t da = i < r - ra ? 1 : a.dim(i - (r - ra));
    std::int64_t db = i < r - rb ? 1 : b.dim(i - (r - rb));
    if (da == db)
      out[i] = da;
    else if (da == 1)
      out[i] = db;
    else if (db == 1)
      out[i] = da;
    else
      return std::nullopt;
  }
  return Shape(std::move(out));
}

class Tensor {
  using Buffer = std::variant<std::vector<double>, std::vector<std::int64_t>, std::vector<std::uint8_t>>;

 public:
  static Tensor from_f64(Shape shape, std::vector<double> values) {
    check_count(shape, values.size(), "f64");
    return Tensor(std::move(shape), DType::F64, Buffer(std::move(values)));
  }
  static Tensor from_i64(Shape shape, std::vector<std::int64_t> values) {
    check_count(shape, values.size(), "i64");
    return Tensor(std::move(shape), DType::I64, Buffer(std::move(values)));
  }
  static Tensor from_bool(Shape shape, std::vector<std::uint8_t> values) {
    check_count(shape, values.size(), "bool");
    for (auto& v : values) v = v ? 1 : 0;
    return Tensor(std::move(shape), DType::Bool, Buffer(std::move(values)));
  }

  static Tensor zeros(Shape shape, DType dtype = DType::F64) {
    std::size_t n = static_cast<std::size_t>(shape.numel());
    switch (dtype) {
      case DType::F64: return from_f64(std::move(shape), std::vector<double>(n, 0.0));
      case DType::I64: return from_i64(std::move(shape), std::vector<std::int64_t>(n, 0));
      case DType::Bool: return from_bool(std::move(shape), std::vector<std::uint8_t>(n, 0));
    }
    throw std::logic_error("unreachable");
  }
  static Tensor ones(Shape shape, DType dtype = DType::F64) {
    std::size_t n = static_cast<std::size_t>(shape.numel());
    switch (dtype) {
      case DType::F64: return from_f64(std::move(shape), std::vector<double>(n, 1.0));
      case DType::I64: return from_i64(std::move(shape), std::vector<std::int64_t>(n, 1));
      case DType::Bool: return from_bool(std::move(shape), std::vector<std::uint8_t>(n, 1));
    }
    throw std::logic_error("unreachable");
  }
  static Tensor full(Shape shape, double value) {
    std::size_t n = static_cast<std::size_t>(shape.numel());
    return from_f64(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double value) { return full(Shape{}, value); }
  static Tensor scalar_i64(std::int64_t value) { return from_i64(Shape{}, {value}); }

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  TensorSpec spec() const { return TensorSpec{shape_, dtype_}; }
  std::size_t rank() const { return shape_.rank(); }
  std::int64_t numel() const { return shape_.numel(); }

  std::span<const double> f64() const {
    require(DType::F64);
    return std::get<std::vector<double>>(*buf_);
  }
  std::span<const std::int64_t> i64() const {
    require(DType::I64);
    return std::get<std::vector<std::int64_t>>(*buf_);
  }
  std::span<const std::uint8_t> bools() const {
    require(DType::Bool);
    return std::get<std::vector<std::uint8_t>>(*buf_);
  }

  // Buffer identity; stable across copies of the same tensor.
  const void* buffer_id() const { return buf_.get(); }

  // Little-endian element bytes, row-major.
  void append_le_bytes(std::string& out) const {
    auto put_u64 = [&out](std::uint64_t w) {
      for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((w >> (8 * i)) & 0xff));
    };
    switch (dtype_) {
      case DType::F64:
        for (double v : f64()) put_u64(std::bit_cast<std::uint64_t>(v));
        break;
      case DType::I64:
        for (std::int64_t v : i64()) put_u64(static_cast<std::uint64_t>(v));
        break;
      case DType::Bool:
        for (std::uint8_t v : bools()) out.push_back(static_cast<char>(v));
        break;
    }
  }

  // dtype + shape + raw bytes; equal keys iff tensors are bitwise identical.
  std::string content_key() const {
    std::string k = dtype_name(dtype_);
    k += shape_.str();
    k += ':';
    append_le_bytes(k);
    return k;
  }

  bool bitwise_equal(const Tensor& o) const {
    return dtype_ == o.dtype_ && shape_ == o.shape_ && (buf_ == o.buf_ || content_key() == o.content_key());
  }

  // Same-shape tensor reusing this buffer.
  Tensor with_shape(Shape s) const {
    if (s.numel() != numel())
      throw std::invalid_argument("[reshape] cannot reshape " + shape_.str() + " to " + s.str());
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

 private:
  Tensor(Shape shape, DType dtype, Buffer buf)
      : shape_(std::move(shape)), dtype_(dtype), buf_(std::make_shared<const Buffer>(std::move(buf))) {}

  static void check_count(const Shape& s, std::size_t got, const char* dt) {
    if (static_cast<std::int64_t>(got) != s.numel())
      throw std::invalid_argument(std::string("[tensor] ") + dt + " " + s.str() + " needs " +
                                  std::to_string(s.numel()) + " values, got " + std::to_string(got));
  }
  void require(DType d) const {
    if (dtype_ != d)
      throw std::invalid_argument(std::string("[tensor] expected ") + dtype_name(d) + " data, tensor is " +
                                  dtype_name(dtype_));
  }

  Shape shape_;
  DType dtype_;
  std::shared_ptr<const Buffer> buf_;
};

// ---------------------------------------------------------------------------
// Primitive vocabulary
// ---------------------------------------------------------------------------

enum class PrimOp { Add, Sub, Mul, Div, Neg, Relu, MatMul, ReduceSum, ReduceMean, BroadcastTo, Transpose, Reshape };

struct Primitive {
  PrimOp op;
  std::optional<std::vector<int>> axes{};  // reductions; nullopt = all axes
  Shape shape{};                           // broadcast_to / reshape target
  std::vector<int> perm{};                 // transpose

  static Primitive simple(PrimOp op) { return Primitive{op}; }
  static Primitive reduce(PrimOp op, std::optional<std::vector<int>> axes) {
    Primitive p{op};
    p.axes = std::move(axes);
    return p;
  }
  static Primitive broadcast(Shape target) {
    Primitive p{PrimOp::BroadcastTo};
    p.shape = std::move(target);
    return p;
  }
  static Primitive reshape_to(Shape target) {
    Primitive p{PrimOp::Reshape};
    p.shape = std::move(target);
    return p;
  }
  static Primitive transpose_perm(std::vector<int> perm) {
    Primitive p{PrimOp::Transpose};
    p.perm = std::move(perm);
    return p;
  }

  const char* name() const {
    switch (op) {
      case PrimOp::Add: return "add";
      case PrimOp::Sub: return "sub";
      case PrimOp::Mul: return "mul";
      case PrimOp::Div: return "div";
      case PrimOp::Neg: return "neg";
      case PrimOp::Relu: return "relu";
      case PrimOp::MatMul: return "matmul";
      case PrimOp::ReduceSum: return "reduce_sum";
      case PrimOp::ReduceMean: return "reduce_mean";
      case PrimOp::BroadcastTo: return "broadcast_to";
      case PrimOp::Transpose: return "transpose";
      case PrimOp::Reshape: return "reshape";
    }
    return "?";
  }

  // Attribute text after ';' in graph listings; empty for plain ops.
  std::string params_str() const {
    switch (op) {
      case PrimOp::ReduceSum:
      case PrimOp::ReduceMean: {
        if (!axes) return "axes=all";
        std::string s = "axes=[";
        for (std::size_t i = 0; i < axes->size(); ++i) {
          s += std::to_string((*axes)[i]);
          if (i + 1 < axes->size()) s += ",";
        }
        return s + "]";
      }
      case PrimOp::BroadcastTo:
      case PrimOp::Reshape: return "shape=" + shape.str();
      case PrimOp::Transpose: {
        std::string s = "perm=(";
        for (std::size_t i = 0; i < perm.size(); ++i) {
          s += std::to_string(perm[i]);
          if (i + 1 < perm.size()) s += ",";
        }
        return s + ")";
      }
      default: return "";
    }
  }
};

namespace detail {

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.rank());
  std::int64_t acc = 1;
  for (std::size_t i = s.rank(); i-- > 0;) {
    st[i] = acc;
    acc *= s.dim(i);
  }
  return st;
}

// Strides of `s` right-aligned to `out`, zeroed along broadcast dimensions.
inline std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  auto own = row_major_strides(s);
  std::vector<std::int64_t> st(out.rank(), 0);
  std::size_t off = out.rank() - s.rank();
  for (std::size_t d = 0; d < s.rank(); ++d)
    st[off + d] = (s.dim(d) == 1 && out.dim(off + d) != 1) ? 0 : own[d];
  return st;
}

// Calls f(element_offsets...) for every index of `shape`, where each operand's
// linear offset advances by its (possibly zeroed) strides.
template <class F>
void for_each_offset(const Shape& shape, std::span<const std::vector<std::int64_t>> strides, F&& f) {
  std::int64_t n = shape.numel();
  if (n == 0) return;
  std::size_t r = shape.rank();
  std::vector<std::int64_t> idx(r, 0);
  std::vector<std::int64_t> off(strides.size(), 0);
  for (std::int64_t i = 0;; ++i) {
    f(off);
    if (i + 1 == n) break;
    for (std::size_t d = r; d-- > 0;) {
      idx[d]++;
      for (std::size_t k = 0; k < strides.size(); ++k) off[k] += strides[k][d];
      if (idx[d] < shape.dim(d)) break;
      idx[d] = 0;
      for (std::size_t k = 0; k < strides.size(); ++k) off[k] -= strides[k][d] * shape.dim(d);
    }
  }
}

inline std::int64_t wrap_add(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) + static_cast<std::uint64_t>(b));
}
inline std::int64_t wrap_sub(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) - static_cast<std::uint64_t>(b));
}
inline std::int64_t wrap_mul(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape and dtype inference; the single source of contract errors.
// ---------------------------------------------------------------------------

inline TensorSpec infer_prim(const Primitive& p, std::span<const TensorSpec> in) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      throw std::invalid_argument(std::string("[") + p.name() + "] expects " + std::to_string(n) +
                                  " operands, got " + std::to_string(in.size()));
  };
  auto numeric = [&](const TensorSpec& s) {
    if (s.dtype == DType::Bool)
      throw std::invalid_argument(std::string("[") + p.name() + "] not defined for bool tensors");
  };
  switch (p.op) {
    case PrimOp::Add:
    case PrimOp::Sub:
    case PrimOp::Mul:
    case PrimOp::Div: {
      arity(2);
      if (in[0].dtype != in[1].dtype)
        throw std::invalid_argument(std::string("[") + p.name() + "] dtype mismatch: " +
                                    dtype_name(in[0].dtype) + " vs " + dtype_name(in[1].dtype));
      numeric(in[0]);
      auto out = broadcast_shapes(in[0].shape, in[1].shape);
      if (!out)
        throw std::invalid_argument(std::string("[") + p.name() + "] shapes " + in[0].shape.str() + " and " +
                                    in[1].shape.str() + " are not broadcast-compatible");
      return TensorSpec{*out, in[0].dtype};
    }
    case PrimOp::Neg:
      arity(1);
      numeric(in[0]);
      return in[0];
    case PrimOp::Relu:
      arity(1);
      if (in[0].dtype != DType::F64)
        throw std::invalid_argument("[relu] requires f64, got " + std::string(dtype_name(in[0].dtype)));
      return in[0];
    case PrimOp::MatMul: {
      arity(2);
      if (in[0].dtype != DType::F64 || in[1].dtype != DType::F64)
        throw std::invalid_argument("[matmul] requires f64 operands");
      std::size_t ra = in[0].shape.rank(), rb = in[1].shape.rank();
      if (ra < 1 || ra > 2 || rb < 1 || rb > 2)
        throw std::invalid_argument("[matmul] operands must have rank 1 or 2, got " + in[0].shape.str() +
                                    " and " + in[1].shape.str());
      std::int64_t ka = in[0].shape.dim(ra - 1);
      std::int64_t kb = in[1].shape.dim(0);
      if (ka != kb)
        throw std::invalid_argument("[matmul] inner dimensions " + std::to_string(ka) + " and " +
                                    std::to_string(kb) + " do not agree for " + in[0].shape.str() + " x " +
                                    in[1].shape.str());
      std::vector<std::int64_t> out;
      if (ra == 2) out.push_back(in[0].shape.dim(0));
      if (rb == 2) out.push_back(in[1].shape.dim(1));
      return TensorSpec{Shape(std::move(out)), DType::F64};
    }
    case PrimOp::ReduceSum:
    case PrimOp::ReduceMean: {
      arity(1);
      if (p.op == PrimOp::ReduceMean && in[0].dtype != DType::F64)
        throw std::invalid_argument("[reduce_mean] requires f64, got " + std::string(dtype_name(in[0].dtype)));
      numeric(in[0]);
      if (!p.axes) return TensorSpec{Shape{}, in[0].dtype};
      std::vector<bool> hit(in[0].shape.rank(), false);
      for (int a : *p.axes) {
        if (a < 0 || static_cast<std::size_t>(a) >= in[0].shape.rank())
          throw std::invalid_argument(std::string("[") + p.name() + "] axis " + std::to_string(a) +
                                      " out of range for " + in[0].shape.str());
        if (hit[a]) throw std::invalid_argument(std::string("[") + p.name() + "] duplicate axis " + std::to_string(a));
        hit[a] = true;
      }
      std::vector<std::int64_t> out;
      for (std::size_t d = 0; d < in[0].shape.rank(); ++d)
        if (!hit[d]) out.push_back(in[0].shape.dim(d));
      return TensorSpec{Shape(std::move(out)), in[0].dtype};
    }
    case PrimOp::BroadcastTo: {
      arity(1);
      const Shape& src = in[0].shape;
      const Shape& dst = p.shape;
      if (src.rank() > dst.rank())
        throw std::invalid_argument("[broadcast_to] cannot broadcast " + src.str() + " to " + dst.str());
      std::size_t off = dst.rank() - src.rank();
      for (std::size_t d = 0; d < src.rank(); ++d)
        if (src.dim(d) != dst.dim(off + d) && src.dim(d) != 1)
          throw std::invalid_argument("[broadcast_to] cannot broadcast " + src.str() + " to " + dst.str());
      return TensorSpec{dst, in[0].dtype};
    }
    case PrimOp::Transpose: {
      arity(1);
      if (p.perm.size() != in[0].shape.rank())
        throw std::invalid_argument("[transpose] permutation size " + std::to_string(p.perm.size()) +
                                    " does not match rank of " + in[0].shape.str());
      std::vector<bool> hit(p.perm.size(), false);
      for (int a : p.perm) {
        if (a < 0 || static_cast<std::size_t>(a) >= p.perm.size() || hit[a])
          throw std::invalid_argument("[transpose] invalid permutation");
        hit[a] = true;
      }
      std::vector<std::int64_t> out(p.perm.size());
      for (std::size_t d = 0; d < p.perm.size(); ++d) out[d] = in[0].shape.dim(p.perm[d]);
      return TensorSpec{Shape(std::move(out)), in[0].dtype};
    }
    case PrimOp::Reshape: {
      arity(1);
      if (p.shape.numel() != in[0].shape.numel())
        throw std::invalid_argument("[reshape] cannot reshape " + in[0].shape.str() + " (" +
                                    std::to_string(in[0].shape.numel()) + " elements) to " + p.shape.str() +
                                    " (" + std::to_string(p.shape.numel()) + " elements)");
      return TensorSpec{p.shape, in[0].dtype};
    }
  }
  throw std::logic_error("unreachable");
}

// ---------------------------------------------------------------------------
// Evaluation kernels
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class F>
Tensor ew_binary(const Tensor& a, const Tensor& b, const Shape& out, std::span<const T> av, std::span<const T> bv,
                 F f) {
  std::vector<std::vector<std::int64_t>> strides{broadcast_strides(a.shape(), out),
                                                 broadcast_strides(b.shape(), out)};
  std::vector<T> r;
  r.reserve(static_cast<std::size_t>(out.numel()));
  for_each_offset(out, strides, [&](std::span<const std::int64_t> off) { r.push_back(f(av[off[0]], bv[off[1]])); });
  if constexpr (std::is_same_v<T, double>)
    return Tensor::from_f64(out, std::move(r));
  else
    return Tensor::from_i64(out, std::move(r));
}

}  // namespace detail

inline Tensor eval_prim(const Primitive& p, std::span<const Tensor> in);

inline Tensor add(const Tensor& a, const Tensor& b) {
  return eval_prim(Primitive::simple(PrimOp::Add), std::array{a, b});
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return eval_prim(Primitive::simple(PrimOp::Sub), std::array{a, b});
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return eval_prim(Primitive::simple(PrimOp::Mul), std::array{a, b});
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return eval_prim(Primitive::simple(PrimOp::Div), std::array{a, b});
}
inline Tensor neg(const Tensor& a) { return eval_prim(Primitive::simple(PrimOp::Neg), std::array{a}); }
inline Tensor relu(const Tensor& a) { return eval_prim(Primitive::simple(PrimOp::Relu), std::array{a}); }
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  return eval_prim(Primitive::simple(PrimOp::MatMul), std::array{a, b});
}
inline Tensor reduce_sum(const Tensor& a, std::optional<std::vector<int>> axes = std::nullopt) {
  return eval_prim(Primitive::reduce(PrimOp::ReduceSum, std::move(axes)), std::array{a});
}
inline Tensor reduce_mean(const Tensor& a, std::optional<std::vector<int>> axes = std::nullopt) {
  return eval_prim(Primitive::reduce(PrimOp::ReduceMean, std::move(axes)), std::array{a});
}
inline Tensor broadcast_to(const Tensor& a, Shape target) {
  return eval_prim(Primitive::broadcast(std::move(target)), std::array{a});
}
inline Tensor transpose(const Tensor& a, std::vector<int> perm) {
  return eval_prim(Primitive::transpose_perm(std::move(perm)), std::array{a});
}
inline Tensor reshape(const Tensor& a, Shape target) {
  return eval_prim(Primitive::reshape_to(std::move(target)), std::array{a});
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor eval_prim(const Primitive& p, std::span<const Tensor> in) {
  std::vector<TensorSpec> specs;
  specs.reserve(in.size());
  for (const Tensor& t : in) specs.push_back(t.spec());
  TensorSpec out = infer_prim(p, specs);

  switch (p.op) {
    case PrimOp::Add:
    case PrimOp::Sub:
    case PrimOp::Mul:
    case PrimOp::Div: {
      const Tensor &a = in[0], &b = in[1];
      if (a.dtype() == DType::F64) {
        auto f = [&p](double x, double y) {
          switch (p.op) {
            case PrimOp::Add: return x + y;
            case PrimOp::Sub: return x - y;
            case PrimOp::Mul: return x * y;
            default: return x / y;  // IEEE-754: 0 divisor gives inf/nan
          }
        };
        return detail::ew_binary<double>(a, b, out.shape, a.f64(), b.f64(), f);
      }
      auto f = [&p](std::int64_t x, std::int64_t y) {
        switch (p.op) {
          case PrimOp::Add: return detail::wrap_add(x, y);
          case PrimOp::Sub: return detail::wrap_sub(x, y);
          case PrimOp::Mul: return detail::wrap_mul(x, y);
          default:
            if (y == 0) throw std::invalid_argument("[div] integer division by zero");
            if (y == -1 && x == std::numeric_limits<std::int64_t>::min())
              throw std::invalid_argument("[div] integer overflow");
            return x / y;
        }
      };
      return detail::ew_binary<std::int64_t>(a, b, out.shape, a.i64(), b.i64(), f);
    }
    case PrimOp::Neg: {
      if (in[0].dtype() == DType::F64) {
        std::vector<double> r(in[0].f64().begin(), in[0].f64().end());
        for (auto& v : r) v = -v;
        return Tensor::from_f64(out.shape, std::move(r));
      }
      std::vector<std::int64_t> r(in[0].i64().begin(), in[0].i64().end());
      for (auto& v : r) v = detail::wrap_sub(0, v);
      return Tensor::from_i64(out.shape, std::move(r));
    }
    case PrimOp::Relu: {
      std::vector<double> r(in[0].f64().begin(), in[0].f64().end());
      for (auto& v : r) v = v > 0.0 ? v : 0.0;
      return Tensor::from_f64(out.shape, std::move(r));
    }
    case PrimOp::MatMul: {
      const Tensor &a = in[0], &b = in[1];
      std::size_t ra = a.rank(), rb = b.rank();
      std::int64_t m = ra == 2 ? a.shape().dim(0) : 1;
      std::int64_t k = a.shape().dim(ra - 1);
      std::int64_t n = rb == 2 ? b.shape().dim(1) : 1;
      auto av = a.f64();
      auto bv = b.f64();
      std::vector<double> r(static_cast<std::size_t>(m * n), 0.0);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::int64_t q = 0; q < k; ++q) acc += av[i * k + q] * bv[q * n + j];
          r[i * n + j] = acc;
        }
      return Tensor::from_f64(out.shape, std::move(r));
    }
    case PrimOp::ReduceSum:
    case PrimOp::ReduceMean: {
      const Tensor& a = in[0];
      std::vector<bool> reduced(a.rank(), !p.axes.has_value());
      if (p.axes)
        for (int ax : *p.axes) reduced[ax] = true;
      std::int64_t count = 1;
      for (std::size_t d = 0; d < a.rank(); ++d)
        if (reduced[d]) count *= a.shape().dim(d);
      // strides into the output for each input dimension (0 along reduced dims)
      auto out_strides = detail::row_major_strides(out.shape);
      std::vector<std::int64_t> map(a.rank(), 0);
      std::size_t kept = 0;
      for (std::size_t d = 0; d < a.rank(); ++d)
        if (!reduced[d]) map[d] = out_strides[kept++];
      std::vector<std::vector<std::int64_t>> strides{detail::row_major_strides(a.shape()), map};
      if (a.dtype() == DType::F64) {
        auto av = a.f64();
        std::vector<double> r(static_cast<std::size_t>(out.shape.numel()), 0.0);
        detail::for_each_offset(a.shape(), strides,
                                [&](std::span<const std::int64_t> off) { r[off[1]] += av[off[0]]; });
        if (p.op == PrimOp::ReduceMean)
          for (auto& v : r) v /= static_cast<double>(count);
        return Tensor::from_f64(out.shape, std::move(r));
      }
      auto av = a.i64();
      std::vector<std::int64_t> r(static_cast<std::size_t>(out.shape.numel()), 0);
      detail::for_each_offset(a.shape(), strides, [&](std::span<const std::int64_t> off) {
        r[off[1]] = detail::wrap_add(r[off[1]], av[off[0]]);
      });
      return Tensor::from_i64(out.shape, std::move(r));
    }
    case PrimOp::BroadcastTo: {
      const Tensor& a = in[0];
      std::vector<std::vector<std::int64_t>> strides{detail::broadcast_strides(a.shape(), out.shape)};
      switch (a.dtype()) {
        case DType::F64: {
          auto av = a.f64();
          std::vector<double> r;
          r.reserve(static_cast<std::size_t>(out.shape.numel()));
          detail::for_each_offset(out.shape, strides,
                                  [&](std::span<const std::int64_t> off) { r.push_back(av[off[0]]); });
          return Tensor::from_f64(out.shape, std::move(r));
        }
        case DType::I64: {
          auto av = a.i64();
          std::vector<std::int64_t> r;
          r.reserve(static_cast<std::size_t>(out.shape.numel()));
          detail::for_each_offset(out.shape, strides,
                                  [&](std::span<const std::int64_t> off) { r.push_back(av[off[0]]); });
          return Tensor::from_i64(out.shape, std::move(r));
        }
        case DType::Bool: {
          auto av = a.bools();
          std::vector<std::uint8_t> r;
          r.reserve(static_cast<std::size_t>(out.shape.numel()));
          detail::for_each_offset(out.shape, strides,
                                  [&](std::span<const std::int64_t> off) { r.push_back(av[off[0]]); });
          return Tensor::from_bool(out.shape, std::move(r));
        }
      }
      throw std::logic_error("unreachable");
    }
    case PrimOp::Transpose: {
      const Tensor& a = in[0];
      auto in_strides = detail::row_major_strides(a.shape());
      std::vector<std::int64_t> perm_strides(p.perm.size());
      for (std::size_t d = 0; d < p.perm.size(); ++d) perm_strides[d] = in_strides[p.perm[d]];
      std::vector<std::vector<std::int64_t>> strides{std::move(perm_strides)};
      switch (a.dtype()) {
        case DType::F64: {
          auto av = a.f64();
          std::vector<double> r;
          r.reserve(static_cast<std::size_t>(out.shape.numel()));
          detail::for_each_offset(out.shape, strides,
                                  [&](std::span<const std::int64_t> off) { r.push_back(av[off[0]]); });
          return Tensor::from_f64(out.shape, std::move(r));
        }
        case DType::I64: {
          auto av = a.i64();
          std::vector<std::int64_t> r;
          r.reserve(static_cast<std::size_t>(out.shape.numel()));
          detail::for_each_offset(out.shape, strides,
                                  [&](std::span<const std::int64_t> off) { r.push_back(av[off[0]]); });
          return Tensor::from_i64(out.shape, std::move(r));
        }
        case DType::Bool: {
          auto av = a.bools();
          std::vector<std::uint8_t> r;
          r.reserve(static_cast<std::size_t>(out.shape.numel()));
          detail::for_each_offset(out.shape, strides,
                                  [&](std::span<const std::int64_t> off) { r.push_back(av[off[0]]); });
          return Tensor::from_bool(out.shape, std::move(r));
        }
      }
      throw std::logic_error("unreachable");
    }
    case PrimOp::Reshape:
      return in[0].with_shape(out.shape);
  }
  throw std::logic_error("unreachable");
}

// Row-major flat rendering: "[1, 2.5]", rank-0 as the bare value.
inline std::string render_tensor_values(const Tensor& t, std::size_t max_elems = 16) {
  if (static_cast<std::size_t>(t.numel()) > max_elems) return "<" + std::to_string(t.numel()) + " elems>";
  auto one = [&](std::size_t i) -> std::string {
    switch (t.dtype()) {
      case DType::F64: return fmt_double(t.f64()[i]);
      case DType::I64: return std::to_string(t.i64()[i]);
      case DType::Bool: return t.bools()[i] ? "true" : "false";
    }
    return "?";
  };
  if (t.rank() == 0) return one(0);
  std::string s = "[";
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    s += one(static_cast<std::size_t>(i));
    if (i + 1 < t.numel()) s += ", ";
  }
  return s + "]";
}

}  // namespace treegrad
