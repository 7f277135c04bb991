#include "inmars/io.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <memory>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <sstream>

#include "inmars/errors.hpp"

namespace inmars::io {

namespace fs = std::filesystem;

namespace {

double depth_scale(int depth) {
  switch (depth) {
    case CV_8U: return 255.0;
    case CV_16U: return 65535.0;
    case CV_32F:
    case CV_64F: return 1.0;
    default: throw DataError("unsupported image bit depth");
  }
}

std::vector<std::uint8_t> encode_png(const cv::Mat& mat, const fs::path& path) {
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", mat, buf)) throw Error("failed to encode PNG for " + path.string());
  return buf;
}

}  // namespace

Tensor read_image(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("image not found: " + path.string());
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw LoadError("cannot decode image: " + path.string());
  const int c = mat.channels();
  const int h = mat.rows, w = mat.cols;
  const double s = depth_scale(mat.depth());
  cv::Mat f;
  mat.convertTo(f, CV_64F, 1.0 / s);
  Tensor out({c, h, w});
  // OpenCV stores colour as BGR(A); swap to RGB(A).
  for (int y = 0; y < h; ++y) {
    const double* row = f.ptr<double>(y);
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        int src = ch;
        if (c >= 3 && ch < 3) src = 2 - ch;
        out.at(ch, y, x) = row[x * c + src];
      }
    }
  }
  return out;
}

void write_image8(const fs::path& path, const Tensor& image) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != 1 && c != 3 && c != 4) throw ShapeError("write_image8: unsupported channel count");
  cv::Mat mat(h, w, CV_8UC(c));
  for (int y = 0; y < h; ++y) {
    auto* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        int dst = ch;
        if (c >= 3 && ch < 3) dst = 2 - ch;
        const double v = std::clamp(image.at(ch, y, x), 0.0, 1.0);
        row[x * c + dst] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  write_bytes_atomic(path, encode_png(mat, path));
}

Grid<std::int32_t> read_label_png(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("label file not found: " + path.string());
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw LoadError("cannot decode label image: " + path.string());
  if (mat.channels() != 1) throw DataError("label image must be single-channel: " + path.string());
  cv::Mat m32;
  mat.convertTo(m32, CV_32S);
  Grid<std::int32_t> out(m32.rows, m32.cols);
  for (int y = 0; y < m32.rows; ++y)
    for (int x = 0; x < m32.cols; ++x) out.at(y, x) = m32.at<std::int32_t>(y, x);
  return out;
}

void write_label_png16(const fs::path& path, const Grid<std::int32_t>& labels) {
  cv::Mat mat(labels.height(), labels.width(), CV_16UC1);
  for (int y = 0; y < labels.height(); ++y)
    for (int x = 0; x < labels.width(); ++x) {
      const auto v = labels.at(y, x);
      if (v < 0 || v > 65535) throw DataError("label out of 16-bit range in " + path.string());
      mat.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(v);
    }
  write_bytes_atomic(path, encode_png(mat, path));
}

void write_label_png8(const fs::path& path, const Grid<std::int32_t>& labels) {
  cv::Mat mat(labels.height(), labels.width(), CV_8UC1);
  for (int y = 0; y < labels.height(); ++y)
    for (int x = 0; x < labels.width(); ++x) {
      const auto v = labels.at(y, x);
      if (v < 0 || v > 255) throw DataError("label out of 8-bit range in " + path.string());
      mat.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(v);
    }
  write_bytes_atomic(path, encode_png(mat, path));
}

void write_rgb8(const fs::path& path, const Rgb8Image& image) {
  cv::Mat mat(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const std::size_t p = (static_cast<std::size_t>(y) * image.width + x) * 3;
      mat.at<cv::Vec3b>(y, x) = cv::Vec3b(image.pixels[p + 2], image.pixels[p + 1], image.pixels[p]);
    }
  write_bytes_atomic(path, encode_png(mat, path));
}

Rgb8Image read_rgb8(const fs::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (mat.empty()) throw LoadError("cannot decode image: " + path.string());
  Rgb8Image out{mat.rows, mat.cols, std::vector<std::uint8_t>(static_cast<std::size_t>(mat.rows) * mat.cols * 3)};
  for (int y = 0; y < mat.rows; ++y)
    for (int x = 0; x < mat.cols; ++x) {
      const cv::Vec3b v = mat.at<cv::Vec3b>(y, x);
      const std::size_t p = (static_cast<std::size_t>(y) * mat.cols + x) * 3;
      out.pixels[p] = v[2];
      out.pixels[p + 1] = v[1];
      out.pixels[p + 2] = v[0];
    }
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("sha256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_bytes_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace inmars::io
