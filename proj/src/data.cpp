#include "muie/data.hpp"

#include "muie/random.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace muie {

namespace fs = std::filesystem;

Image load_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw std::runtime_error("cannot read PNG " + path.string() + ": " + img.message);
  if ((img.format & PNG_FORMAT_FLAG_COLOR) == 0 || (img.format & PNG_FORMAT_FLAG_COLORMAP) != 0) {
    png_image_free(&img);
    throw std::runtime_error("not an RGB PNG: " + path.string());
  }
  if (img.width == 0 || img.height == 0) {
    png_image_free(&img);
    throw std::runtime_error("zero-sized PNG: " + path.string());
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr))
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + img.message);
  const std::int64_t h = img.height, w = img.width;
  Image out(Shape{1, 3, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out(0, c, y, x) = static_cast<float>(buffer[(y * w + x) * 3 + c]) / 255.0f;
  return out;
}

std::uint8_t quantize_byte(float value) {
  const double v = std::clamp(static_cast<double>(value), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

void save_png(const Image& image, const fs::path& path) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0) throw ShapeError("save_png: expected [1,3,H,W], got " + s.str());
  std::vector<png_byte> buffer(static_cast<std::size_t>(s.h * s.w * 3));
  for (std::int64_t y = 0; y < s.h; ++y)
    for (std::int64_t x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) buffer[(y * s.w + x) * 3 + c] = quantize_byte(image(0, c, y, x));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(s.w);
  img.height = static_cast<png_uint_32>(s.h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buffer.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + img.message);
}

std::vector<std::string> read_split_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read split list " + path.string());
  std::vector<std::string> stems;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    if (!line.empty()) stems.push_back(line);
  }
  return stems;
}

namespace {
std::map<std::string, fs::path> png_stems(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") out.emplace(entry.path().stem().string(), entry.path());
  }
  return out;
}
}  // namespace

Dataset load_dataset(const fs::path& root, const std::optional<fs::path>& split_list, Split split) {
  const fs::path raw_dir = root / "raw", ref_dir = root / "reference";
  if (!fs::is_directory(raw_dir) || !fs::is_directory(ref_dir))
    throw std::runtime_error("dataset root " + root.string() + " must contain raw/ and reference/");
  const auto raw = png_stems(raw_dir);
  const auto ref = png_stems(ref_dir);

  std::optional<std::set<std::string>> wanted;
  if (split_list) {
    const auto stems = read_split_list(*split_list);
    wanted.emplace(stems.begin(), stems.end());
  }

  Dataset ds;
  ds.split = split;
  for (const auto& [stem, path] : raw) {
    if (wanted && !wanted->count(stem)) continue;
    if (!ref.count(stem)) {
      ds.warnings.push_back(stem + ": no reference image");
      continue;
    }
    ImagePair pair{load_png(path), load_png(ref.at(stem)), stem};
    if (pair.raw.shape() != pair.reference.shape()) {
      ds.warnings.push_back(stem + ": extents differ (" + pair.raw.shape().str() + " vs " +
                            pair.reference.shape().str() + ")");
      continue;
    }
    ds.pairs.push_back(std::move(pair));
  }
  for (const auto& [stem, path] : ref)
    if (!raw.count(stem) && (!wanted || wanted->count(stem))) ds.warnings.push_back(stem + ": no raw image");
  if (wanted)
    for (const auto& stem : *wanted)
      if (!raw.count(stem) && !ref.count(stem)) ds.warnings.push_back(stem + ": listed but not found");
  if (ds.pairs.empty()) throw std::runtime_error("dataset " + root.string() + " has no usable raw/reference pairs");
  return ds;
}

Image box_blur3(const Image& image) {
  const Shape s = image.shape();
  Image out(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) {
          double acc = 0;
          int count = 0;
          for (std::int64_t dy = -1; dy <= 1; ++dy)
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
              const std::int64_t yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= s.h || xx < 0 || xx >= s.w) continue;
              acc += image(n, c, yy, xx);
              ++count;
            }
          out(n, c, y, x) = static_cast<float>(acc / count);
        }
  return out;
}

Image synth_degrade(const Image& clean, std::uint64_t seed, const DegradeOptions& options) {
  const Shape s = clean.shape();
  if (s.c != 3) throw ShapeError("synth_degrade: expected 3 channels, got " + s.str());
  Rng rng(seed);
  const double depth = rng.uniform(0.4, 1.0);
  const double veil[3] = {rng.uniform(0.05, 0.15), rng.uniform(0.45, 0.65), rng.uniform(0.35, 0.55)};
  Image out = options.blur ? box_blur3(clean) : clean;
  for (std::int64_t n = 0; n < s.n; ++n)
    for (int c = 0; c < 3; ++c) {
      const float t = static_cast<float>(std::exp(-static_cast<double>(options.attenuation[c]) * depth));
      const float v = static_cast<float>(veil[c]);
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) {
          float& px = out(n, c, y, x);
          px = t == 1.0f ? px : std::clamp(t * px + (1.0f - t) * v, 0.0f, 1.0f);
        }
    }
  return out;
}

Image procedural_image(std::int64_t height, std::int64_t width, std::uint64_t seed) {
  Rng rng(seed);
  Image out(Shape{1, 3, height, width});
  for (int c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.25, 0.75);
    const double gy = rng.uniform(-0.2, 0.2), gx = rng.uniform(-0.2, 0.2);
    struct Wave {
      double fy, fx, phase, amp;
    } waves[3];
    for (auto& wv : waves)
      wv = {rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.0, 6.283185307179586), rng.uniform(0.05, 0.15)};
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) {
        const double v = static_cast<double>(y) / height, u = static_cast<double>(x) / width;
        double val = base + gy * (v - 0.5) + gx * (u - 0.5);
        for (const auto& wv : waves) val += wv.amp * std::sin(6.283185307179586 * (wv.fy * v + wv.fx * u) + wv.phase);
        out(0, c, y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
  }
  return out;
}

Tensor<float> reflect_pad(const Tensor<float>& image, std::int64_t multiple) {
  const Shape s = image.shape();
  const std::int64_t h = (s.h + multiple - 1) / multiple * multiple;
  const std::int64_t w = (s.w + multiple - 1) / multiple * multiple;
  if (h == s.h && w == s.w) return image;
  // Folds back and forth, so pads wider than the image still reflect.
  auto reflect = [](std::int64_t i, std::int64_t n) {
    if (n == 1) return std::int64_t{0};
    const std::int64_t period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Tensor<float> out(Shape{s.n, s.c, h, w});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) out(n, c, y, x) = image(n, c, reflect(y, s.h), reflect(x, s.w));
  return out;
}

Tensor<float> crop(const Tensor<float>& image, std::int64_t top, std::int64_t left, std::int64_t height,
                   std::int64_t width) {
  const Shape s = image.shape();
  if (top < 0 || left < 0 || top + height > s.h || left + width > s.w)
    throw ShapeError("crop: window exceeds " + s.str());
  Tensor<float> out(Shape{s.n, s.c, height, width});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < height; ++y)
        std::copy_n(&image(n, c, top + y, left), width, &out(n, c, y, 0));
  return out;
}

Tensor<float> flip_horizontal(const Tensor<float>& image) {
  const Shape s = image.shape();
  Tensor<float> out(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) out(n, c, y, x) = image(n, c, y, s.w - 1 - x);
  return out;
}

Tensor<float> stack(const std::vector<Tensor<float>>& items) {
  if (items.empty()) throw ShapeError("stack: no items");
  const Shape s = items.front().shape();
  Tensor<float> out(Shape{static_cast<std::int64_t>(items.size()) * s.n, s.c, s.h, s.w});
  std::int64_t offset = 0;
  for (const auto& t : items) {
    if (t.shape() != s) throw ShapeError("stack: " + t.shape().str() + " vs " + s.str());
    std::copy_n(t.data(), t.numel(), out.data() + offset);
    offset += t.numel();
  }
  return out;
}

}  // namespace muie
