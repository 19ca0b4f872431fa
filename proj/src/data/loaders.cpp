#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "pefll/data/dataset.hpp"
#include "pefll/nn/bytes.hpp"

namespace pefll::data {

using nn::ParseError;

DatasetFormat parse_dataset_format(const std::string& s) {
  if (s == "cifar-binary") return DatasetFormat::cifar_binary;
  if (s == "idx-pair") return DatasetFormat::idx_pair;
  if (s == "csv") return DatasetFormat::csv;
  throw std::invalid_argument("unknown dataset format '" + s + "' (expected cifar-binary|idx-pair|csv)");
}

std::string to_string(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::cifar_binary: return "cifar-binary";
    case DatasetFormat::idx_pair: return "idx-pair";
    case DatasetFormat::csv: return "csv";
  }
  return "?";
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off) {
  if (off + 4 > b.size()) throw ParseError("truncated IDX header", b.size());
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

struct Idx {
  std::vector<std::size_t> dims;
  std::size_t data_offset = 0;
};

Idx parse_idx_header(std::span<const std::uint8_t> b) {
  if (b.size() < 4) throw ParseError("IDX file shorter than its magic", b.size());
  if (b[0] != 0 || b[1] != 0) throw ParseError("bad IDX magic", 0);
  if (b[2] != 0x08) throw ParseError("IDX element type must be unsigned byte (0x08)", 2);
  Idx idx;
  const std::size_t rank = b[3];
  if (rank == 0) throw ParseError("IDX rank must be >= 1", 3);
  std::size_t count = 1;
  for (std::size_t r = 0; r < rank; ++r) {
    idx.dims.push_back(be32(b, 4 + 4 * r));
    count *= idx.dims.back();
  }
  idx.data_offset = 4 + 4 * rank;
  if (b.size() != idx.data_offset + count)
    throw ParseError("IDX payload length mismatch: expected " + std::to_string(idx.data_offset + count) +
                         " bytes, got " + std::to_string(b.size()),
                     std::min(b.size(), idx.data_offset + count));
  return idx;
}

void finish(Dataset& ds, std::size_t num_classes) {
  std::uint32_t top = 0;
  for (auto l : ds.labels) top = std::max(top, l);
  ds.num_classes = std::max<std::size_t>(num_classes, top + 1);
  ds.validate();
}

}  // namespace

Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, std::size_t num_classes) {
  constexpr std::size_t record = 1 + kPixels;
  if (bytes.size() % record != 0)
    throw ParseError("cifar-binary length " + std::to_string(bytes.size()) + " is not a multiple of " +
                         std::to_string(record) + "; expected " + std::to_string((bytes.size() / record + 1) * record) +
                         " for a complete final record",
                     bytes.size() - bytes.size() % record);
  Dataset ds;
  const std::size_t n = bytes.size() / record;
  ds.labels.reserve(n);
  ds.pixels.reserve(n * kPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = i * record;
    if (bytes[off] >= num_classes)
      throw ParseError("label " + std::to_string(bytes[off]) + " outside [0, " + std::to_string(num_classes) + ")", off);
    ds.labels.push_back(bytes[off]);
    ds.pixels.insert(ds.pixels.end(), bytes.begin() + off + 1, bytes.begin() + off + record);
  }
  ds.num_classes = num_classes;
  ds.validate();
  return ds;
}

Dataset parse_idx_pair(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  const auto im = parse_idx_header(images);
  const auto lb = parse_idx_header(labels);
  if (lb.dims.size() != 1) throw ParseError("labels IDX must be rank 1", 3);
  const std::size_t n = im.dims[0];
  if (lb.dims[0] != n) throw ParseError("labels count differs from images count", 4);
  Dataset ds;
  ds.labels.assign(labels.begin() + lb.data_offset, labels.end());
  ds.pixels.resize(n * kPixels);
  const std::uint8_t* src = images.data() + im.data_offset;
  const std::size_t plane = kSide * kSide;
  const auto& d = im.dims;
  if (d.size() == 4 && d[1] == 3 && d[2] == kSide && d[3] == kSide) {
    std::copy(src, src + n * kPixels, ds.pixels.begin());
  } else if (d.size() == 4 && d[1] == kSide && d[2] == kSide && d[3] == 3) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) ds.pixels[i * kPixels + c * plane + p] = src[i * kPixels + p * 3 + c];
  } else if (d.size() == 3 && d[1] == kSide && d[2] == kSide) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 3; ++c)
        std::copy(src + i * plane, src + (i + 1) * plane, ds.pixels.begin() + i * kPixels + c * plane);
  } else {
    throw ParseError("images IDX must be [N,3,32,32], [N,32,32,3] or [N,32,32]", 4);
  }
  finish(ds, 2);
  return ds;
}

Dataset parse_csv(const std::string& text) {
  std::size_t pos = 0;
  auto line_end = [&](std::size_t from) {
    const auto e = text.find('\n', from);
    return e == std::string::npos ? text.size() : e;
  };
  std::size_t end = line_end(0);
  std::string header = text.substr(0, end);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  std::string expected = "label";
  for (std::size_t k = 0; k < kPixels; ++k) expected += ",p" + std::to_string(k);
  if (header != expected) throw ParseError("csv header must be label,p0,...,p3071", 0);
  pos = end + 1;

  Dataset ds;
  while (pos < text.size()) {
    end = line_end(pos);
    std::size_t stop = end;
    if (stop > pos && text[stop - 1] == '\r') --stop;
    if (stop == pos) {
      pos = end + 1;
      continue;
    }
    std::size_t field = 0, cur = pos;
    while (cur <= stop) {
      std::size_t comma = text.find(',', cur);
      if (comma == std::string::npos || comma > stop) comma = stop;
      if (comma == cur) throw ParseError("empty csv field", cur);
      unsigned long v = 0;
      for (std::size_t k = cur; k < comma; ++k) {
        if (text[k] < '0' || text[k] > '9') throw ParseError("non-numeric csv field", k);
        v = v * 10 + unsigned(text[k] - '0');
        if (v > 1000000) throw ParseError("csv value out of range", cur);
      }
      if (field == 0) {
        ds.labels.push_back(std::uint32_t(v));
      } else {
        if (v > 255) throw ParseError("pixel value above 255", cur);
        if (field > kPixels) throw ParseError("too many csv fields", cur);
        ds.pixels.push_back(std::uint8_t(v));
      }
      ++field;
      cur = comma + 1;
    }
    if (field != kPixels + 1)
      throw ParseError("csv row has " + std::to_string(field) + " fields, expected " + std::to_string(kPixels + 1), pos);
    pos = end + 1;
  }
  finish(ds, 2);
  return ds;
}

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  switch (format) {
    case DatasetFormat::cifar_binary: return parse_cifar_binary(read_file(path));
    case DatasetFormat::idx_pair: return parse_idx_pair(read_file(path / "images.idx"), read_file(path / "labels.idx"));
    case DatasetFormat::csv: {
      const auto bytes = read_file(path);
      return parse_csv(std::string(bytes.begin(), bytes.end()));
    }
  }
  throw std::invalid_argument("unknown dataset format");
}

std::vector<std::array<double, 3>> synth_class_colors(std::size_t num_classes, double margin,
                                                      std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::array<double, 3>> colors;
  for (std::size_t attempt = 0; colors.size() < num_classes; ++attempt) {
    if (attempt > 100000) throw std::invalid_argument("cannot place class colors with the requested margin");
    const std::array<double, 3> c{u(rng), u(rng), u(rng)};
    bool ok = true;
    for (const auto& o : colors) {
      const double d = std::hypot(c[0] - o[0], c[1] - o[1], c[2] - o[2]);
      ok = ok && d >= margin;
    }
    if (ok) colors.push_back(c);
  }
  return colors;
}

Dataset synth_dataset(std::size_t num_classes, std::size_t per_class, std::mt19937_64& rng,
                      const SynthOptions& opt) {
  if (num_classes < 2) throw std::invalid_argument("synthetic dataset needs at least 2 classes");
  const auto colors = synth_class_colors(num_classes, opt.margin, rng);
  Dataset ds;
  ds.num_classes = num_classes;
  ds.pixels.resize(num_classes * per_class * kPixels);
  std::normal_distribution<double> jitter(0.0, opt.color_jitter), noise(0.0, opt.pixel_noise);
  std::uniform_real_distribution<double> where(opt.blob_radius, double(kSide) - opt.blob_radius);
  const double inv = 1.0 / (2.0 * opt.blob_radius * opt.blob_radius / 4.0);
  const std::size_t plane = kSide * kSide;
  std::size_t i = 0;
  for (std::size_t r = 0; r < per_class; ++r) {
    for (std::size_t k = 0; k < num_classes; ++k, ++i) {
      ds.labels.push_back(std::uint32_t(k));
      const double cx = where(rng), cy = where(rng);
      std::array<double, 3> col;
      for (std::size_t c = 0; c < 3; ++c) col[c] = colors[k][c] + jitter(rng);
      std::uint8_t* img = ds.pixels.data() + i * kPixels;
      for (std::size_t y = 0; y < kSide; ++y) {
        for (std::size_t x = 0; x < kSide; ++x) {
          const double dx = double(x) - cx, dy = double(y) - cy;
          const double w = std::exp(-(dx * dx + dy * dy) * inv);
          for (std::size_t c = 0; c < 3; ++c) {
            const double v = 0.5 + w * (col[c] - 0.5) + noise(rng);
            img[c * plane + y * kSide + x] = std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
          }
        }
      }
    }
  }
  return ds;
}

}  // namespace pefll::data
