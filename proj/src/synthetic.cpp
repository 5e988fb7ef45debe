#include "xraysep/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace xraysep {
namespace {

// Raw engine output only, so generated files do not depend on the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::mt19937_64 engine_;
};

using Field = std::vector<double>;

void normalize(Field& f) {
  const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
  const double a = *lo;
  const double span = *hi - *lo;
  for (double& v : f) v = span > 0 ? (v - a) / span : 0.5;
}

// Directional sinusoid mix: elongated bands like brush strokes or grain.
Field banded_field(Rng& rng, std::size_t n) {
  Field f(n * n, 0.0);
  const double base_angle = rng.uniform(-0.3, 0.3);
  for (int k = 0; k < 5; ++k) {
    const double period = rng.uniform(10.0, 40.0);
    const double angle = base_angle + rng.uniform(-0.25, 0.25);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = rng.uniform(0.5, 1.0);
    const double kx = std::cos(angle) * 2.0 * std::numbers::pi / period;
    const double ky = std::sin(angle) * 2.0 * std::numbers::pi / period;
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        f[y * n + x] += amp * std::sin(kx * static_cast<double>(x) +
                                       ky * static_cast<double>(y) + phase);
      }
    }
  }
  normalize(f);
  return f;
}

// Isotropic Gaussian blobs: rounded shapes such as faces or ornaments.
Field blob_field(Rng& rng, std::size_t n) {
  Field f(n * n, 0.0);
  const int blobs = 6 + static_cast<int>(n / 16);
  for (int k = 0; k < blobs; ++k) {
    const double cy = rng.uniform(0.0, static_cast<double>(n));
    const double cx = rng.uniform(0.0, static_cast<double>(n));
    const double radius = rng.uniform(6.0, 18.0);
    const double amp = rng.uniform(-1.0, 1.0);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        f[y * n + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * radius * radius));
      }
    }
  }
  normalize(f);
  return f;
}

struct Palette {
  double r0, r1, g0, g1, b0, b1;
};

ImagePlane paint(const Field& f, std::size_t n, const Palette& p) {
  ImagePlane rgb(3, n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double s = f[y * n + x];
      rgb.at(0, y, x) = static_cast<float>(p.r0 + (p.r1 - p.r0) * s);
      rgb.at(1, y, x) = static_cast<float>(p.g0 + (p.g1 - p.g0) * s * s);
      rgb.at(2, y, x) = static_cast<float>(p.b0 + (p.b1 - p.b0) * std::sqrt(s));
    }
  }
  return rgb;
}

// Denser (brighter in the radiograph) where the paint is lighter.
ImagePlane radiograph(const Field& f, std::size_t n) {
  ImagePlane x(1, n, n);
  for (std::size_t i = 0; i < n * n; ++i) {
    x.pixels()[i] = static_cast<float>(0.05 + 0.4 * f[i]);
  }
  return x;
}

void add_cracks(ImagePlane& x, Rng& rng, std::size_t count) {
  const auto n = static_cast<long>(x.width());
  for (std::size_t c = 0; c < count; ++c) {
    double py = rng.uniform(0.0, static_cast<double>(n));
    double px = rng.uniform(0.0, static_cast<double>(n));
    double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const int steps = static_cast<int>(rng.uniform(0.3, 0.8) * static_cast<double>(n));
    for (int s = 0; s < steps; ++s) {
      const auto iy = static_cast<long>(py);
      const auto ix = static_cast<long>(px);
      if (iy < 0 || iy >= n || ix < 0 || ix >= n) break;
      float& v = x.at(0, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
      v = std::max(0.0f, v - 0.08f);
      heading += rng.uniform(-0.3, 0.3);
      py += std::sin(heading);
      px += std::cos(heading);
    }
  }
}

void add_grain(ImagePlane& x, Rng& rng, double strength) {
  const std::size_t n = x.width();
  const double period = rng.uniform(3.0, 6.0);
  const double wobble = rng.uniform(0.02, 0.06);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t c = 0; c < n; ++c) {
      const double phase = 2.0 * std::numbers::pi *
                           (static_cast<double>(c) / period +
                            wobble * std::sin(static_cast<double>(y) * 0.05));
      float& v = x.at(0, y, c);
      v = static_cast<float>(std::clamp(v + strength * std::sin(phase), 0.0, 0.5));
    }
  }
}

}  // namespace

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "texture-pair") return SyntheticKind::texture_pair;
  if (name == "gradient-pair") return SyntheticKind::gradient_pair;
  throw std::invalid_argument("unknown synthetic kind '" + name +
                              "' (texture-pair | gradient-pair)");
}

SyntheticScene generate_scene(const SyntheticSpec& spec) {
  if (spec.size < 8) throw std::invalid_argument("synthetic size must be >= 8");
  const std::size_t n = spec.size;
  Rng rng(spec.seed);
  Field f1;
  Field f2;
  if (spec.kind == SyntheticKind::texture_pair) {
    f1 = banded_field(rng, n);
    f2 = blob_field(rng, n);
  } else {
    f1.resize(n * n);
    f2.resize(n * n);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        f1[y * n + x] = static_cast<double>(x) / static_cast<double>(n - 1);
        f2[y * n + x] = static_cast<double>(y) / static_cast<double>(n - 1);
      }
    }
  }
  SyntheticScene scene;
  scene.r1 = paint(f1, n, Palette{0.35, 0.95, 0.20, 0.80, 0.10, 0.45});
  scene.r2 = paint(f2, n, Palette{0.35, 0.95, 0.20, 0.80, 0.10, 0.45});
  scene.x1 = radiograph(f1, n);
  scene.x2 = radiograph(f2, n);
  if (spec.cracks > 0) add_cracks(scene.x1, rng, spec.cracks);
  if (spec.grain > 0) add_grain(scene.x2, rng, spec.grain);
  return scene;
}

}  // namespace xraysep
