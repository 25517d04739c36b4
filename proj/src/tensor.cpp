#include "sosd/tensor.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sosd/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor file I/O assumes a little-endian host");

namespace sosd {

std::int64_t Shape::numel() const {
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

namespace {
void check_shape(const Shape& shape) {
  for (auto d : shape.dims) {
    if (d <= 0) throw ValidationError("tensor shape has non-positive dim " + shape.str());
  }
}
}  // namespace

Tensor Tensor::zeros(Shape shape) {
  check_shape(shape);
  Tensor t;
  t.data_ = std::make_shared<Data>();
  t.data_->values.assign(static_cast<std::size_t>(shape.numel()), 0.0);
  t.data_->shape = std::move(shape);
  return t;
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.values()) v = value;
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ValidationError("tensor values length " + std::to_string(values.size()) +
                          " does not match shape " + shape.str());
  }
  Tensor t;
  t.data_ = std::make_shared<Data>();
  t.data_->shape = std::move(shape);
  t.data_->values = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return from_values(Shape{1}, {value}); }

const Shape& Tensor::shape() const {
  if (!data_) throw ValidationError("use of an undefined tensor");
  return data_->shape;
}

std::span<double> Tensor::values() {
  if (!data_) throw ValidationError("use of an undefined tensor");
  return data_->values;
}

std::span<const double> Tensor::values() const {
  if (!data_) throw ValidationError("use of an undefined tensor");
  return data_->values;
}

double Tensor::value_at(std::int64_t i) const { return values()[static_cast<std::size_t>(i)]; }

std::span<double> Tensor::grad() {
  if (!data_) throw ValidationError("use of an undefined tensor");
  if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

bool Tensor::has_grad() const { return data_ && !data_->grad.empty(); }

void Tensor::zero_grad() {
  if (data_ && !data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

std::span<const double> Tensor::grad_view() const {
  if (!data_) return {};
  return data_->grad;
}

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!data_) throw ValidationError("use of an undefined tensor");
  data_->requires_grad = flag;
  return *this;
}

std::int64_t Tensor::node_id() const { return data_ ? data_->node_id : -1; }

void Tensor::set_node_id(std::int64_t id) {
  if (!data_) throw ValidationError("use of an undefined tensor");
  data_->node_id = id;
}

std::int64_t Tensor::offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  const Shape& s = shape();
  return ((n * s[1] + c) * s[2] + h) * s[3] + w;
}

Tensor Tensor::clone() const {
  if (!data_) return {};
  Tensor t;
  t.data_ = std::make_shared<Data>();
  t.data_->shape = data_->shape;
  t.data_->values = data_->values;
  t.data_->requires_grad = data_->requires_grad;
  return t;
}

namespace {

constexpr char kMagic[4] = {'S', 'O', 'S', 'D'};

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw IoError("truncated tensor file: " + path.string());
  return value;
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  if (!tensor.defined()) throw ValidationError("write_tensor: undefined tensor");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, kTensorFormatVersion);
  write_pod<std::uint8_t>(os, 0);  // dtype 0 = f64
  const Shape& shape = tensor.shape();
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(shape.rank()));
  for (auto d : shape.dims) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  auto vals = tensor.values();
  os.write(reinterpret_cast<const char*>(vals.data()),
           static_cast<std::streamsize>(vals.size() * sizeof(double)));
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is) throw IoError("truncated tensor header: " + path.string());
  // Transport problems are IoError; a readable file with wrong content is a
  // validation failure.
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw ValidationError("bad magic in tensor file: " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kTensorFormatVersion) {
    throw ValidationError("unsupported tensor format version " + std::to_string(version) +
                          " in " + path.string());
  }
  const auto dtype = read_pod<std::uint8_t>(is, path);
  if (dtype != 0) {
    throw ValidationError("unsupported dtype code " + std::to_string(dtype) + " in " +
                          path.string());
  }
  const auto rank = read_pod<std::uint32_t>(is, path);
  if (rank > 8) throw ValidationError("implausible rank in tensor file: " + path.string());
  Shape shape;
  shape.dims.reserve(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.dims.push_back(static_cast<std::int64_t>(read_pod<std::uint64_t>(is, path)));
  }
  if (shape.numel() <= 0) {
    throw ValidationError("non-positive element count in " + path.string());
  }
  std::vector<double> values(static_cast<std::size_t>(shape.numel()));
  is.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!is) throw IoError("truncated tensor payload: " + path.string());
  return Tensor::from_values(std::move(shape), std::move(values));
}

}  // namespace sosd
