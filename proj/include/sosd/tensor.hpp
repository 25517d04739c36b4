#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sosd {

struct Shape {
  std::vector<std::int64_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::int64_t> d) : dims(d) {}
  explicit Shape(std::vector<std::int64_t> d) : dims(std::move(d)) {}

  std::int64_t numel() const;
  std::size_t rank() const { return dims.size(); }
  std::int64_t operator[](std::size_t i) const { return dims[i]; }
  bool operator==(const Shape& other) const { return dims == other.dims; }
  std::string str() const;
};

// Dense f64 grid with a lazily allocated gradient slot. Tensor is a handle:
// copies share the payload, so parameters can live in a model while graphs
// from successive batches read and write the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const { return shape().numel(); }

  std::span<double> values();
  std::span<const double> values() const;
  double value_at(std::int64_t i) const;

  // Gradient storage, zero-filled on first access.
  std::span<double> grad();
  bool has_grad() const;
  void zero_grad();
  std::span<const double> grad_view() const;  // empty span if never touched

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  // Identity of this tensor within the graph that last touched it.
  std::int64_t node_id() const;
  void set_node_id(std::int64_t id);

  // NCHW flat offset helper (rank-4 tensors).
  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;

  // Deep copy of values (grad not copied).
  Tensor clone() const;

  bool same_payload(const Tensor& other) const { return data_ == other.data_; }

 private:
  struct Data {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until touched
    bool requires_grad = false;
    std::int64_t node_id = -1;
  };
  std::shared_ptr<Data> data_;
};

// Binary tensor file: magic "SOSD", u32 LE format version, u8 dtype code
// (0 = f64), u32 LE rank, u64 LE dims, row-major f64 LE payload.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace sosd
