#include "dhat/evaluation.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "dhat/error.hpp"
#include "dhat/ops.hpp"

namespace dhat {

LogitsFn head_logits(DualHeadNetwork& net, HeadMode mode) {
  return [&net, mode](const Tensor& x) { return net.logits(x, mode, false); };
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows expects [N, C]");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto z = logits.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (z[i * c + k] > z[i * c + best]) best = k;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const LogitsFn& model, const Tensor& images, std::size_t batch_size) {
  if (batch_size == 0) throw ArgumentError("batch_size must be positive");
  NoGradGuard guard;
  std::vector<int> out;
  out.reserve(images.dim(0));
  for (std::size_t b = 0; b < images.dim(0); b += batch_size) {
    auto part = argmax_rows(model(slice_rows(images, b, std::min(images.dim(0), b + batch_size))));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

namespace {

void require_nonempty(const Dataset& ds) {
  if (ds.size() == 0) throw ArgumentError("cannot evaluate on an empty dataset");
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace

double evaluate_clean(const LogitsFn& model, const Dataset& ds, std::size_t batch_size) {
  require_nonempty(ds);
  return accuracy(predict(model, ds.images, batch_size), ds.labels);
}

double evaluate_clean(DualHeadNetwork& net, const Dataset& ds, HeadMode mode, std::size_t batch_size) {
  return evaluate_clean(head_logits(net, mode), ds, batch_size);
}

Tensor generate_adversarial(const LogitsFn& model, const Dataset& ds, const AttackConfig& cfg,
                            const EvalOptions& options) {
  require_nonempty(ds);
  cfg.validate();
  if (options.batch_size == 0) throw ArgumentError("batch_size must be positive");
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < ds.size(); b += options.batch_size) {
    const std::size_t e = std::min(ds.size(), b + options.batch_size);
    Tensor x = slice_rows(ds.images, b, e);
    std::span<const int> y(ds.labels.data() + b, e - b);
    AttackOptions ao;
    ao.seed = options.seed;
    ao.workers = options.workers;
    for (std::size_t i = b; i < e; ++i) ao.sample_ids.push_back(i);
    Tensor reference;
    if (cfg.loss_mode == AttackLoss::KL) {
      NoGradGuard guard;
      reference = model(x);
    }
    parts.push_back(pgd(model, x, y, reference, cfg, ao).x_adv);
  }
  return ops::concat(parts, 0);
}

RobustResult evaluate_robust(const LogitsFn& model, const Dataset& ds, const AttackConfig& cfg,
                             const EvalOptions& options) {
  RobustResult r;
  r.clean_pred = predict(model, ds.images, options.batch_size);
  r.adv_pred = predict(model, generate_adversarial(model, ds, cfg, options), options.batch_size);
  std::size_t robust = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    robust += r.clean_pred[i] == ds.labels[i] && r.adv_pred[i] == ds.labels[i];
  }
  r.clean_accuracy = accuracy(r.clean_pred, ds.labels);
  r.robust_accuracy = static_cast<double>(robust) / static_cast<double>(ds.size());
  return r;
}

RobustResult evaluate_robust(DualHeadNetwork& net, const Dataset& ds, const AttackConfig& cfg,
                             HeadMode mode, const EvalOptions& options) {
  return evaluate_robust(head_logits(net, mode), ds, cfg, options);
}

CrossTable cross_evaluate(const LogitsFn& model_a, const LogitsFn& model_b, const Dataset& ds,
                          const AttackConfig& cfg, const EvalOptions& options) {
  require_nonempty(ds);
  const std::array<const LogitsFn*, 2> models{&model_a, &model_b};
  CrossTable t;
  {
    NoGradGuard guard;
    Tensor probe = slice_rows(ds.images, 0, 1);
    if (model_a(probe).shape() != model_b(probe).shape()) {
      throw DimensionError("cross_evaluate: models disagree on the output shape");
    }
  }
  for (int m = 0; m < 2; ++m) {
    t.clean_predictions[m] = predict(*models[m], ds.images, options.batch_size);
    t.clean_accuracy[m] = accuracy(t.clean_predictions[m], ds.labels);
  }
  for (int s = 0; s < 2; ++s) {
    Tensor adv = generate_adversarial(*models[s], ds, cfg, options);
    for (int m = 0; m < 2; ++m) {
      auto& pred = t.predictions[s][m];
      pred = predict(*models[m], adv, options.batch_size);
      std::size_t robust = 0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        robust += t.clean_predictions[m][i] == ds.labels[i] && pred[i] == ds.labels[i];
      }
      t.accuracy[s][m] = static_cast<double>(robust) / static_cast<double>(ds.size());
    }
  }
  return t;
}

nlohmann::ordered_json cross_table_to_json(const CrossTable& t, bool with_predictions) {
  nlohmann::ordered_json j;
  j["clean_accuracy"] = {t.clean_accuracy[0], t.clean_accuracy[1]};
  j["accuracy"] = {{t.accuracy[0][0], t.accuracy[0][1]}, {t.accuracy[1][0], t.accuracy[1][1]}};
  if (with_predictions) {
    j["clean_predictions"] = {t.clean_predictions[0], t.clean_predictions[1]};
    j["predictions"] = {{t.predictions[0][0], t.predictions[0][1]}, {t.predictions[1][0], t.predictions[1][1]}};
  }
  return j;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Tensor as_chw(const Tensor& t, const char* what) {
  if (t.rank() == 4 && t.dim(0) == 1) return ops::reshape(t, {t.dim(1), t.dim(2), t.dim(3)});
  if (t.rank() == 3) return t;
  throw DimensionError(std::string(what) + " must be [C,H,W] or [1,C,H,W]");
}

}  // namespace

void write_png(const Tensor& image, const std::string& path) {
  Tensor img = as_chw(image, "image");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (c != 1 && c != 3) throw DimensionError("PNG export supports 1 or 3 channels");
  std::vector<png_byte> pixels(h * w * c);
  auto v = img.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) {
      const double x = std::clamp(static_cast<double>(v[ch * h * w + i]), 0.0, 1.0);
      pixels[i * c + ch] = static_cast<png_byte>(std::lround(x * 255.0));
    }
  }
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed to encode '" + path + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < h; ++r) png_write_row(png, pixels.data() + r * w * c);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_byte> pixels;
  png_uint_32 w = 0, h = 0;
  int channels = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("'" + path + "' is not a readable PNG");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) != 8 || (type != PNG_COLOR_TYPE_GRAY && type != PNG_COLOR_TYPE_RGB)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("'" + path + "': only 8-bit grayscale or RGB PNG is supported");
  }
  channels = type == PNG_COLOR_TYPE_GRAY ? 1 : 3;
  pixels.resize(static_cast<std::size_t>(w) * h * channels);
  for (png_uint_32 r = 0; r < h; ++r) png_read_row(png, pixels.data() + r * w * channels, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out = Tensor::zeros({static_cast<std::size_t>(channels), h, w});
  auto dst = out.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < channels; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) dst[ch * plane + i] = pixels[i * channels + ch] / Real(255);
  }
  return out;
}

void export_noise(const Tensor& x, const Tensor& x_adv, double gain, const std::string& prefix) {
  if (!(gain > 0)) throw ArgumentError("gain must be positive");
  Tensor a = as_chw(x, "x"), b = as_chw(x_adv, "x_adv");
  if (a.shape() != b.shape()) throw DimensionError("x and x_adv differ in shape");
  Tensor noise = Tensor::zeros(a.shape());
  auto n = noise.mutable_data();
  auto va = a.data(), vb = b.data();
  for (std::size_t i = 0; i < n.size(); ++i) {
    n[i] = static_cast<Real>(std::clamp(0.5 + gain * (static_cast<double>(vb[i]) - va[i]), 0.0, 1.0));
  }
  write_png(noise, prefix + "_noise.png");
  write_png(b, prefix + "_adv.png");
}

nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["model_id"] = r.model_id;
  j["model_digest"] = r.model_digest;
  j["dataset_id"] = r.dataset_id;
  j["heads"] = r.heads;
  j["clean_accuracy"] = r.clean_accuracy;
  j["attacks"] = nlohmann::ordered_json::array();
  for (const auto& a : r.attacks) {
    auto e = attack_to_json(a.config);
    e["name"] = a.name;
    e["robust_accuracy"] = a.robust_accuracy;
    j["attacks"].push_back(e);
  }
  j["seed"] = r.seed;
  j["wall_time_s"] = r.wall_time_s;
  return j;
}

}  // namespace dhat
