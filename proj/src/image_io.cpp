#include "sosd/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "sosd/errors.hpp"

namespace sosd {
namespace {

unsigned char to_byte(double v) {
  const double scaled = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<unsigned char>(scaled);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return in;
}

// Reads one PNM header token, skipping whitespace and # comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (tok.empty()) throw IoError("truncated PNM header");
  return tok;
}

struct PnmHeader {
  std::int64_t width = 0, height = 0, maxval = 0;
};

PnmHeader read_header(std::istream& in, const char* magic) {
  if (next_token(in) != magic) throw IoError(std::string("expected ") + magic + " file");
  PnmHeader h;
  h.width = std::stoll(next_token(in));
  h.height = std::stoll(next_token(in));
  h.maxval = std::stoll(next_token(in));
  if (h.width < 1 || h.height < 1) throw IoError("PNM: bad dimensions");
  if (h.maxval != 255) throw IoError("PNM: only maxval 255 is supported");
  return h;
}

}  // namespace

void write_image_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.shape().rank() != 3 || image.shape()[2] != 3) {
    throw ValidationError("write_image_ppm: expected HxWx3, got " + image.shape().str());
  }
  const std::int64_t h = image.shape()[0], w = image.shape()[1];
  std::ofstream out = open_out(path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  const double* v = image.values().data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t i = 0; i < w * 3; ++i) row[i] = to_byte(v[y * w * 3 + i]);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write_image_ppm: write failed: " + path.string());
}

void write_grid_pgm(const std::filesystem::path& path, const Tensor& grid) {
  if (grid.shape().rank() != 2) {
    throw ValidationError("write_grid_pgm: expected HxW, got " + grid.shape().str());
  }
  const std::int64_t h = grid.shape()[0], w = grid.shape()[1];
  const double* v = grid.values().data();
  double lo = v[0], hi = v[0];
  for (std::int64_t i = 0; i < h * w; ++i) {
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream out = open_out(path);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) row[x] = to_byte((v[y * w + x] - lo) / span);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write_grid_pgm: write failed: " + path.string());
}

void write_label_ppm(const std::filesystem::path& path, const Tensor& labels,
                     const std::vector<std::array<double, 3>>& palette) {
  if (labels.shape().rank() != 2) {
    throw ValidationError("write_label_ppm: expected HxW, got " + labels.shape().str());
  }
  if (palette.empty()) throw ValidationError("write_label_ppm: empty palette");
  const std::int64_t h = labels.shape()[0], w = labels.shape()[1];
  std::ofstream out = open_out(path);
  out << "P6\n" << w << " " << h << "\n255\n";
  const double* v = labels.values().data();
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto idx = static_cast<std::size_t>(
          std::clamp<double>(v[y * w + x], 0.0, static_cast<double>(palette.size() - 1)));
      row[x * 3 + 0] = to_byte(palette[idx][0]);
      row[x * 3 + 1] = to_byte(palette[idx][1]);
      row[x * 3 + 2] = to_byte(palette[idx][2]);
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write_label_ppm: write failed: " + path.string());
}

Tensor read_image_ppm(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const PnmHeader h = read_header(in, "P6");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h.width) * h.height * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError("read_image_ppm: truncated payload: " + path.string());
  }
  Tensor out = Tensor::zeros(Shape{h.height, h.width, 3});
  double* v = out.values().data();
  for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = bytes[i] / 255.0;
  return out;
}

Tensor read_grid_pgm(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const PnmHeader h = read_header(in, "P5");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h.width) * h.height);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError("read_grid_pgm: truncated payload: " + path.string());
  }
  Tensor out = Tensor::zeros(Shape{h.height, h.width});
  double* v = out.values().data();
  for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = bytes[i] / 255.0;
  return out;
}

}  // namespace sosd
