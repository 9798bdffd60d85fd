#include "dhat/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "dhat/attacks.hpp"
#include "dhat/error.hpp"

namespace dhat {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>((v >> s) & 0xff));
}

struct IdxFile {
  std::vector<std::size_t> dims;
  std::vector<unsigned char> payload;
};

IdxFile parse_idx(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() < 4) throw FormatError(path + ": too short for an IDX header");
  if (bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08) {
    throw FormatError(path + ": bad IDX magic (expected unsigned-byte data)");
  }
  const std::size_t rank = bytes[3];
  if (rank < 1 || bytes.size() < 4 + 4 * rank) throw FormatError(path + ": truncated IDX header");
  IdxFile f;
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    f.dims.push_back(be32(&bytes[4 + 4 * i]));
    total *= f.dims.back();
  }
  const std::size_t offset = 4 + 4 * rank;
  if (bytes.size() - offset != total) {
    throw FormatError(path + ": payload holds " + std::to_string(bytes.size() - offset) +
                      " bytes, header promises " + std::to_string(total));
  }
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return f;
}

unsigned char to_byte(Real v) {
  return static_cast<unsigned char>(std::lround(std::clamp<double>(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void Dataset::validate() const {
  if (labels.empty()) throw FormatError("dataset is empty");
  if (!images.defined() || images.rank() != 4 || images.dim(0) != labels.size()) {
    throw FormatError("dataset images must be [N, C, H, W] with one label per image");
  }
  if (num_classes < 2) throw FormatError("dataset needs at least 2 classes");
  for (Real v : images.data()) {
    if (!(v >= 0 && v <= 1)) throw FormatError("pixel value outside [0, 1]");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw FormatError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  Dataset d = *this;
  d.images = slice_rows(images, begin, end);
  d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                  labels.begin() + static_cast<std::ptrdiff_t>(end));
  return d;
}

Dataset Dataset::take(std::span<const std::size_t> rows) const {
  Dataset d = *this;
  d.images = take_rows(images, rows);
  d.labels.clear();
  for (auto r : rows) d.labels.push_back(labels.at(r));
  return d;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, int num_classes) {
  IdxFile img = parse_idx(images_path);
  IdxFile lab = parse_idx(labels_path);
  if (img.dims.size() != 3 && img.dims.size() != 4) {
    throw FormatError(images_path + ": image file must be 3-D or 4-D");
  }
  if (lab.dims.size() != 1) throw FormatError(labels_path + ": label file must be 1-D");
  if (img.dims[0] != lab.dims[0]) {
    throw FormatError("image count " + std::to_string(img.dims[0]) + " != label count " +
                      std::to_string(lab.dims[0]));
  }
  Shape shape = img.dims.size() == 3 ? Shape{img.dims[0], 1, img.dims[1], img.dims[2]}
                                     : Shape{img.dims[0], img.dims[1], img.dims[2], img.dims[3]};
  std::vector<Real> px(img.payload.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<Real>(img.payload[i]) / Real(255);
  Dataset ds;
  ds.images = Tensor::from(std::move(shape), std::move(px));
  int max_label = 0;
  for (unsigned char b : lab.payload) {
    ds.labels.push_back(b);
    max_label = std::max<int>(max_label, b);
  }
  ds.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  ds.id = images_path;
  ds.validate();
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  ds.validate();
  const auto& s = ds.images.shape();
  std::vector<unsigned char> img;
  if (s[1] == 1) {
    put_be32(img, 0x00000803);
    for (std::size_t d : {s[0], s[2], s[3]}) put_be32(img, static_cast<std::uint32_t>(d));
  } else {
    put_be32(img, 0x00000804);
    for (std::size_t d : s) put_be32(img, static_cast<std::uint32_t>(d));
  }
  for (Real v : ds.images.data()) img.push_back(to_byte(v));
  std::vector<unsigned char> lab;
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) {
    if (y > 255) throw FormatError("IDX labels must fit in one byte");
    lab.push_back(static_cast<unsigned char>(y));
  }
  write_file(images_path, img);
  write_file(labels_path, lab);
}

Dataset load_cifar_binary(const std::vector<std::string>& paths, int num_classes) {
  if (num_classes != 10 && num_classes != 100) {
    throw ArgumentError("CIFAR binary supports 10 or 100 classes");
  }
  const std::size_t label_bytes = num_classes == 100 ? 2 : 1;
  const std::size_t record = label_bytes + 3072;
  std::vector<Real> px;
  Dataset ds;
  for (const auto& path : paths) {
    auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % record != 0) {
      throw FormatError(path + ": size " + std::to_string(bytes.size()) +
                        " is not a multiple of the record size " + std::to_string(record));
    }
    for (std::size_t off = 0; off < bytes.size(); off += record) {
      ds.labels.push_back(bytes[off + label_bytes - 1]);
      for (std::size_t i = 0; i < 3072; ++i) {
        px.push_back(static_cast<Real>(bytes[off + label_bytes + i]) / Real(255));
      }
    }
  }
  if (ds.labels.empty()) throw FormatError("no CIFAR records given");
  ds.images = Tensor::from({ds.labels.size(), 3, 32, 32}, std::move(px));
  ds.num_classes = num_classes;
  ds.id = paths.front();
  ds.validate();
  return ds;
}

Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.num_classes < 2 || spec.samples_per_class < 1 || spec.image_size < 2 ||
      spec.channels < 1 || spec.sigma < 0) {
    throw ArgumentError("invalid synthetic dataset spec");
  }
  const auto C = static_cast<std::size_t>(spec.num_classes);
  const auto ch = static_cast<std::size_t>(spec.channels);
  const auto S = static_cast<std::size_t>(spec.image_size);
  const std::size_t plane = S * S, row = ch * plane;

  // Prototypes: three Gaussian bumps per class, independent amplitudes per channel.
  std::mt19937_64 proto_rng(mix_seed(spec.seed, 0x70726f746fULL));
  std::uniform_real_distribution<double> upos(0.15 * S, 0.85 * S), uwidth(0.08 * S, 0.18 * S),
      uamp(0.5, 1.0);
  std::vector<double> protos(C * row, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (int b = 0; b < 3; ++b) {
      const double cy = upos(proto_rng), cx = upos(proto_rng), w = uwidth(proto_rng);
      std::vector<double> amp(ch);
      for (auto& a : amp) a = uamp(proto_rng);
      for (std::size_t k = 0; k < ch; ++k)
        for (std::size_t i = 0; i < S; ++i)
          for (std::size_t j = 0; j < S; ++j) {
            const double d2 = (i + 0.5 - cy) * (i + 0.5 - cy) + (j + 0.5 - cx) * (j + 0.5 - cx);
            protos[c * row + k * plane + i * S + j] += amp[k] * std::exp(-d2 / (2 * w * w));
          }
    }
  }
  for (auto& v : protos) v = std::min(v, 1.0);

  const std::size_t n = C * static_cast<std::size_t>(spec.samples_per_class);
  std::vector<Real> px(n * row);
  Dataset ds;
  ds.labels.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t c = s % C;
    ds.labels[s] = static_cast<int>(c);
    std::mt19937_64 rng(mix_seed(spec.seed, spec.noise_stream + 1, s));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < row; ++i) {
      const double e = spec.sigma > 0 ? spec.sigma * noise(rng) : 0.0;
      px[s * row + i] = static_cast<Real>(std::clamp(protos[c * row + i] + e, 0.0, 1.0));
    }
  }
  ds.images = Tensor::from({n, ch, S, S}, std::move(px));
  ds.num_classes = spec.num_classes;
  ds.id = "synth:" + std::to_string(spec.seed) + ":" + std::to_string(spec.noise_stream);
  return ds;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, 0x73687566ULL, static_cast<std::uint64_t>(epoch)));
  // Fisher-Yates with an explicit draw so the order is identical across standard libraries.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> rows) {
  Batch b;
  b.x = take_rows(ds.images, rows);
  for (auto r : rows) {
    b.y.push_back(ds.labels.at(r));
    b.ids.push_back(r);
  }
  return b;
}

Tensor augment(const Tensor& images, std::mt19937_64& rng) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const int pad = 4;
  std::vector<Real> out(images.numel(), 0);
  auto in = images.data();
  for (std::size_t s = 0; s < n; ++s) {
    const int dy = static_cast<int>(rng() % (2 * pad + 1)) - pad;
    const int dx = static_cast<int>(rng() % (2 * pad + 1)) - pad;
    const bool flip = (rng() & 1) != 0;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const long si = static_cast<long>(i) + dy;
          long sj = static_cast<long>(j) + dx;
          if (si < 0 || si >= static_cast<long>(h) || sj < 0 || sj >= static_cast<long>(w)) continue;
          if (flip) sj = static_cast<long>(w) - 1 - sj;
          out[((s * c + k) * h + i) * w + j] = in[((s * c + k) * h + si) * w + sj];
        }
  }
  return Tensor::from(images.shape(), std::move(out));
}

}  // namespace dhat
