#include "uolo/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <boost/multiprecision/cpp_int.hpp>

#include "uolo/errors.hpp"
#include "uolo/format.hpp"

namespace uolo {

const char* class_name(int class_id) {
  switch (class_id) {
    case kOpticDisc: return "OD";
    case kFovea: return "FV";
    default: return "unknown";
  }
}

const Box* Sample::find_box(int class_id) const {
  for (const Box& b : boxes) {
    if (b.class_id == class_id) return &b;
  }
  return nullptr;
}

void SceneSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("scene spec: " + what); };
  if (image_size < 8) fail("image_size must be at least 8");
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (!(disc_radius_min > 0) || disc_radius_max < disc_radius_min) fail("bad disc radius range");
  if (!(spot_radius_min > 0) || spot_radius_max < spot_radius_min) fail("bad spot radius range");
  if (distractor_count < 0) fail("distractor_count must be non-negative");
  if (distractor_count > 0 &&
      (!(distractor_radius_min > 0) || distractor_radius_max < distractor_radius_min)) {
    fail("bad distractor radius range");
  }
  if (border < 0) fail("border must be non-negative");
  if (reference_size <= 0 || !(od_box_side_ref > 0) || !(fv_box_side_ref > 0)) fail("bad box sides");
}

namespace {

std::mt19937_64 seeded_rng(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Circle {
  double cx, cy, r;
};

bool inside(const Circle& c, int x, int y) {
  const double dx = x + 0.5 - c.cx, dy = y + 0.5 - c.cy;
  return dx * dx + dy * dy <= c.r * c.r;
}

// Random pixel-centred position keeping `margin` pixels from every edge.
std::pair<double, double> place(std::mt19937_64& rng, int size, double margin) {
  const int lo = static_cast<int>(std::ceil(margin - 0.5));
  const int hi = static_cast<int>(std::floor(size - margin - 0.5));
  if (hi < lo) throw DataError("scene spec: objects do not fit in the image");
  std::uniform_int_distribution<int> pick(lo, hi);
  return {pick(rng) + 0.5, pick(rng) + 0.5};
}

Sample generate_one(const SceneSpec& spec, int index) {
  auto rng = seeded_rng({spec.seed, static_cast<std::uint64_t>(index)});
  const int size = spec.image_size;
  const int full = size + 2 * spec.border;
  const double shift = spec.placement_margin_fraction * size;

  Circle disc{}, spot{};
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    const double rd = uniform(rng, spec.disc_radius_min, spec.disc_radius_max);
    const double rs = uniform(rng, spec.spot_radius_min, spec.spot_radius_max);
    const auto [dx, dy] = place(rng, size, std::max(rd, spec.od_box_side() / 2) + shift);
    const auto [sx, sy] = place(rng, size, std::max(rs, spec.fv_box_side() / 2) + shift);
    disc = {dx, dy, rd};
    spot = {sx, sy, rs};
    const double sep = std::hypot(dx - sx, dy - sy);
    // Separate the objects and keep them in different grid cells' reach.
    placed = sep > rd + rs + 2.0;
  }
  if (!placed) {
    throw DataError("generate: could not place disc and spot without overlap in 100 attempts");
  }
  std::vector<Circle> distractors;
  for (int d = 0; d < spec.distractor_count; ++d) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double r = uniform(rng, spec.distractor_radius_min, spec.distractor_radius_max);
      const auto [x, y] = place(rng, size, r + 1.0);
      const Circle c{x, y, r};
      const bool clear = std::hypot(x - disc.cx, y - disc.cy) > r + disc.r + 2.0 &&
                         std::hypot(x - spot.cx, y - spot.cy) > r + spot.r + 2.0;
      if (clear) {
        distractors.push_back(c);
        break;
      }
    }
  }

  // Low-frequency texture: three random plane waves.
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int w = 0; w < 3; ++w) {
    waves.push_back({uniform(rng, -2.0, 2.0), uniform(rng, -2.0, 2.0),
                     uniform(rng, 0.0, 2 * std::numbers::pi), uniform(rng, 0.5, 1.0)});
  }
  const std::vector<double> tint = spec.channels == 3 ? std::vector<double>{1.0, 0.75, 0.5}
                                                      : std::vector<double>{1.0};

  Sample sample;
  char id[32];
  std::snprintf(id, sizeof(id), "s%05d", index);
  sample.id = id;
  sample.provenance = "synthetic seed=" + std::to_string(spec.seed) + " index=" + std::to_string(index);
  sample.image = Image(full, full, spec.channels, 0.0);
  Mask mask(full, full);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = spec.background_level;
      double t = 0.0;
      for (const Wave& w : waves) {
        t += w.amp * std::sin(2 * std::numbers::pi * (w.fx * x + w.fy * y) / size + w.phase);
      }
      v += spec.texture_amplitude * t / 3.0;
      for (const Circle& c : distractors) {
        if (inside(c, x, y)) v = spec.distractor_intensity;
      }
      if (inside(spot, x, y)) v = spec.spot_intensity;
      const bool in_disc = inside(disc, x, y);
      if (in_disc) v = spec.disc_intensity;
      v += spec.noise_amplitude * uniform(rng, -1.0, 1.0);
      const int fx = x + spec.border, fy = y + spec.border;
      for (int c = 0; c < spec.channels; ++c) {
        sample.image.at(c, fy, fx) = std::clamp(v * tint[static_cast<std::size_t>(c)], 0.0, 1.0);
      }
      mask.at(fy, fx) = in_disc ? 1 : 0;
    }
  }
  quantize(sample.image);
  sample.mask = std::move(mask);
  const double b = spec.border;
  sample.boxes = {{kOpticDisc, disc.cx + b, disc.cy + b, spec.od_box_side()},
                  {kFovea, spot.cx + b, spot.cy + b, spec.fv_box_side()}};
  return sample;
}

}  // namespace

void retain_masks(std::vector<Sample>& samples, std::size_t count) {
  for (std::size_t i = count; i < samples.size(); ++i) samples[i].mask.reset();
}

std::vector<Sample> generate(const SceneSpec& spec, int n) {
  spec.validate();
  if (n < 0) throw ConfigError("generate: sample count must be non-negative");
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) samples.push_back(generate_one(spec, i));
  return samples;
}

// ---------------------------------------------------------------------------

int otsu_threshold(std::span<const std::uint8_t> gray) {
  using boost::multiprecision::int256_t;
  std::array<std::int64_t, 256> hist{};
  for (std::uint8_t v : gray) ++hist[v];
  std::int64_t total = 0, total_sum = 0;
  for (int v = 0; v < 256; ++v) {
    total += hist[static_cast<std::size_t>(v)];
    total_sum += v * hist[static_cast<std::size_t>(v)];
  }
  // Between-class variance for foreground {v >= t} is proportional to
  // (n1*S0 - n0*S1)^2 / (n0*n1); compared exactly by cross-multiplication.
  int best_t = -1;
  int256_t best_num = 0, best_den = 1;
  std::int64_t n0 = 0, s0 = 0;
  for (int t = 1; t < 256; ++t) {
    n0 += hist[static_cast<std::size_t>(t - 1)];
    s0 += (t - 1) * hist[static_cast<std::size_t>(t - 1)];
    const std::int64_t n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const std::int64_t s1 = total_sum - s0;
    const int256_t d = int256_t(n1) * s0 - int256_t(n0) * s1;
    const int256_t num = d * d;
    const int256_t den = int256_t(n0) * n1;
    if (best_t < 0 || num * best_den > best_num * den) {
      best_t = t;
      best_num = num;
      best_den = den;
    }
  }
  if (best_t < 0) throw DataError("otsu_threshold: image has fewer than two gray levels");
  return best_t;
}

Sample crop_and_resize(const Sample& sample, int target_size) {
  if (target_size <= 0) throw ConfigError("crop_and_resize: target size must be positive");
  const Image& src = sample.image;
  const std::vector<std::uint8_t> gray = to_gray_bytes(src);
  int threshold = 0;
  try {
    threshold = otsu_threshold(gray);
  } catch (const DataError&) {
    throw DataError("crop_and_resize: sample " + sample.id + " has no field of view");
  }
  int x0 = src.width, y0 = src.height, x1 = -1, y1 = -1;
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      if (gray[static_cast<std::size_t>(y) * src.width + x] >= threshold) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) throw DataError("crop_and_resize: sample " + sample.id + " has an empty field of view");
  const int cw = x1 - x0 + 1, ch = y1 - y0 + 1;
  const double sx = static_cast<double>(target_size) / cw;
  const double sy = static_cast<double>(target_size) / ch;

  Sample out;
  out.id = sample.id;
  out.provenance = sample.provenance;
  out.od_radius = sample.od_radius;
  if (out.od_radius) *out.od_radius *= (sx + sy) / 2;
  out.image = Image(target_size, target_size, src.channels);
  for (int y = 0; y < target_size; ++y) {
    const double fy = std::clamp((y + 0.5) / sy - 0.5, 0.0, ch - 1.0);
    const int iy = static_cast<int>(fy);
    const double wy = fy - iy;
    for (int x = 0; x < target_size; ++x) {
      const double fx = std::clamp((x + 0.5) / sx - 0.5, 0.0, cw - 1.0);
      const int ix = static_cast<int>(fx);
      const double wx = fx - ix;
      const int ix1 = std::min(ix + 1, cw - 1), iy1 = std::min(iy + 1, ch - 1);
      for (int c = 0; c < src.channels; ++c) {
        const double a = src.at(c, y0 + iy, x0 + ix), b = src.at(c, y0 + iy, x0 + ix1);
        const double d = src.at(c, y0 + iy1, x0 + ix), e = src.at(c, y0 + iy1, x0 + ix1);
        out.image.at(c, y, x) = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * d + wx * e);
      }
    }
  }
  quantize(out.image);
  if (sample.mask) {
    Mask m(target_size, target_size);
    for (int y = 0; y < target_size; ++y) {
      const int iy = std::min(static_cast<int>((y + 0.5) / sy), ch - 1);
      for (int x = 0; x < target_size; ++x) {
        const int ix = std::min(static_cast<int>((x + 0.5) / sx), cw - 1);
        m.at(y, x) = sample.mask->at(y0 + iy, x0 + ix) ? 1 : 0;
      }
    }
    out.mask = std::move(m);
  }
  for (const Box& b : sample.boxes) {
    out.boxes.push_back({b.class_id, (b.cx - x0) * sx, (b.cy - y0) * sy, b.side * (sx + sy) / 2});
  }
  return out;
}

// ---------------------------------------------------------------------------

Transform random_transform(const AugmentConfig& config, int image_size, std::mt19937_64& rng) {
  Transform t;
  std::bernoulli_distribution coin(0.5);
  if (config.flip) {
    t.flip_x = coin(rng);
    t.flip_y = coin(rng);
  }
  if (config.translate) {
    const int max_shift = static_cast<int>(std::floor(config.max_shift_fraction * image_size));
    std::uniform_int_distribution<int> shift(-max_shift, max_shift);
    t.dx = shift(rng);
    t.dy = shift(rng);
  }
  return t;
}

Sample apply_transform(const Sample& sample, const Transform& t) {
  const int w = sample.image.width, h = sample.image.height;
  // Destination (x, y) reads source (sx(x), sy(y)).
  auto source_x = [&](int x) {
    const int fx = x - t.dx;
    return t.flip_x ? w - 1 - fx : fx;
  };
  auto source_y = [&](int y) {
    const int fy = y - t.dy;
    return t.flip_y ? h - 1 - fy : fy;
  };
  Sample out = sample;
  for (int y = 0; y < h; ++y) {
    const int syy = source_y(y);
    for (int x = 0; x < w; ++x) {
      const int sxx = source_x(x);
      const bool valid = sxx >= 0 && sxx < w && syy >= 0 && syy < h;
      for (int c = 0; c < sample.image.channels; ++c) {
        out.image.at(c, y, x) = valid ? sample.image.at(c, syy, sxx) : 0.0;
      }
      if (sample.mask) out.mask->at(y, x) = valid ? sample.mask->at(syy, sxx) : 0;
    }
  }
  for (Box& b : out.boxes) {
    const double fx = t.flip_x ? w - b.cx : b.cx;
    const double fy = t.flip_y ? h - b.cy : b.cy;
    b.cx = std::clamp(fx + t.dx, 0.5, w - 0.5);
    b.cy = std::clamp(fy + t.dy, 0.5, h - 0.5);
  }
  return out;
}

Sample augment(const Sample& sample, const AugmentConfig& config, std::mt19937_64& rng) {
  return apply_transform(sample, random_transform(config, sample.image.width, rng));
}

// ---------------------------------------------------------------------------

namespace {

double parse_number(std::string_view text, std::size_t line) {
  double v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw DataError("manifest line " + std::to_string(line) + ": bad number '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw DataError("cannot write manifest in " + dir.string());
  for (const Sample& s : samples) {
    const std::string image_rel =
        "images/" + s.id + (s.image.channels == 1 ? ".pgm" : ".ppm");
    write_pnm(dir / image_rel, s.image);
    std::string mask_rel = "-";
    if (s.mask) {
      mask_rel = "masks/" + s.id + ".pgm";
      write_mask(dir / mask_rel, *s.mask);
    }
    manifest << s.id << '\t' << image_rel << '\t' << mask_rel << '\t';
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      const Box& b = s.boxes[i];
      manifest << (i ? ";" : "") << b.class_id << ',' << format_number(b.cx) << ','
               << format_number(b.cy) << ',' << format_number(b.side);
    }
    if (s.od_radius) manifest << '\t' << format_number(*s.od_radius);
    manifest << '\n';
  }
  if (!manifest) throw DataError("failed writing manifest in " + dir.string());
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.tsv");
  if (!manifest) throw DataError("no manifest.tsv in " + dir.string());
  std::vector<Sample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() < 4 || fields.size() > 5) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 4 or 5 tab-separated fields");
    }
    Sample s;
    s.id = fields[0];
    if (s.id.empty()) throw DataError("manifest line " + std::to_string(line_no) + ": empty id");
    s.provenance = (dir / "manifest.tsv").string() + ":" + std::to_string(line_no);
    try {
      s.image = read_pnm(dir / fields[1]);
      if (fields[2] != "-") s.mask = read_mask(dir / fields[2]);
    } catch (const DataError& e) {
      throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (s.mask && (s.mask->width != s.image.width || s.mask->height != s.image.height)) {
      throw DataError("manifest line " + std::to_string(line_no) + ": mask size differs from image");
    }
    if (!fields[3].empty()) {
      for (const std::string& spec : split(fields[3], ';')) {
        const auto parts = split(spec, ',');
        if (parts.size() != 4) {
          throw DataError("manifest line " + std::to_string(line_no) + ": box '" + spec +
                          "' is not class,cx,cy,side");
        }
        Box b;
        const double cls = parse_number(parts[0], line_no);
        b.class_id = static_cast<int>(cls);
        if (cls != b.class_id || b.class_id < 0) {
          throw DataError("manifest line " + std::to_string(line_no) + ": bad class id");
        }
        b.cx = parse_number(parts[1], line_no);
        b.cy = parse_number(parts[2], line_no);
        b.side = parse_number(parts[3], line_no);
        if (!(b.side > 0)) throw DataError("manifest line " + std::to_string(line_no) + ": box side must be positive");
        s.boxes.push_back(b);
      }
    }
    if (fields.size() == 5 && !fields[4].empty()) s.od_radius = parse_number(fields[4], line_no);
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ConfigError("make_batch: empty batch");
  const Sample& first = samples.at(indices[0]);
  const std::size_t B = indices.size();
  const auto C = static_cast<std::size_t>(first.image.channels);
  const auto H = static_cast<std::size_t>(first.image.height);
  const auto W = static_cast<std::size_t>(first.image.width);
  std::vector<double> images(B * C * H * W), masks(B * H * W, 0.0);
  Batch batch;
  for (std::size_t b = 0; b < B; ++b) {
    const Sample& s = samples.at(indices[b]);
    if (static_cast<std::size_t>(s.image.channels) != C || static_cast<std::size_t>(s.image.height) != H ||
        static_cast<std::size_t>(s.image.width) != W) {
      throw DataError("make_batch: sample " + s.id + " differs in size from " + first.id);
    }
    std::copy(s.image.pixels.begin(), s.image.pixels.end(), images.begin() + static_cast<std::ptrdiff_t>(b * C * H * W));
    if (s.mask) {
      for (std::size_t i = 0; i < H * W; ++i) masks[b * H * W + i] = s.mask->bits[i];
    }
    batch.has_mask.push_back(s.mask.has_value());
    std::vector<GtBox> boxes;
    for (const Box& bx : s.boxes) boxes.push_back({bx.class_id, bx.cx, bx.cy, bx.side, bx.side});
    batch.boxes.push_back(std::move(boxes));
    batch.sample_indices.push_back(indices[b]);
  }
  batch.images = Tensor::from_data({B, C, H, W}, std::move(images));
  batch.masks = Tensor::from_data({B, 1, H, W}, std::move(masks));
  return batch;
}

Batch make_batch(const std::vector<Sample>& samples) {
  std::vector<std::size_t> indices(samples.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  return make_batch(samples, indices);
}

BatchStream::BatchStream(std::shared_ptr<const std::vector<Sample>> dataset,
                         std::vector<std::size_t> members, std::uint64_t stream_id,
                         const StreamConfig& config)
    : dataset_(std::move(dataset)), members_(std::move(members)), stream_id_(stream_id), config_(config) {
  if (config_.batch_size == 0) throw ConfigError("batch size must be positive");
}

std::size_t BatchStream::member_at(std::uint64_t position) {
  if (members_.empty()) throw ConfigError("batch stream has no members");
  const std::uint64_t epoch = position / members_.size();
  if (epoch != cached_epoch_) {
    permutation_ = members_;
    auto rng = seeded_rng({config_.seed, stream_id_, epoch});
    std::shuffle(permutation_.begin(), permutation_.end(), rng);
    cached_epoch_ = epoch;
  }
  return permutation_[position % members_.size()];
}

Batch BatchStream::next() {
  if (members_.empty()) throw ConfigError("batch stream has no members");
  const std::uint64_t start = consumed_ * config_.batch_size;
  std::vector<Sample> picked;
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < config_.batch_size; ++i) {
    const std::uint64_t position = start + i;
    const std::size_t index = member_at(position);
    indices.push_back(index);
    if (config_.augment) {
      auto rng = seeded_rng({config_.seed, stream_id_, position, 0xa0a0});
      picked.push_back(augment((*dataset_)[index], config_.augmentation, rng));
    } else {
      picked.push_back((*dataset_)[index]);
    }
  }
  ++consumed_;
  Batch batch = make_batch(picked);
  batch.sample_indices = std::move(indices);
  return batch;
}

Streams make_streams(std::shared_ptr<const std::vector<Sample>> dataset, const StreamConfig& config,
                     bool want_detection, bool want_segmentation) {
  std::vector<std::size_t> all(dataset->size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_streams(std::move(dataset), all, config, want_detection, want_segmentation);
}

Streams make_streams(std::shared_ptr<const std::vector<Sample>> dataset,
                     std::span<const std::size_t> members, const StreamConfig& config,
                     bool want_detection, bool want_segmentation) {
  std::vector<std::size_t> det, seg;
  for (std::size_t i : members) {
    if (!(*dataset)[i].boxes.empty()) det.push_back(i);
    if ((*dataset)[i].mask) seg.push_back(i);
  }
  if (want_detection && det.empty()) throw ConfigError("detection stream requested but no sample has boxes");
  if (want_segmentation && seg.empty()) {
    throw ConfigError("segmentation stream requested but no sample has a mask");
  }
  return Streams{BatchStream(dataset, std::move(det), 1, config),
                 BatchStream(dataset, std::move(seg), 2, config)};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_dataset(
    const std::vector<Sample>& samples, double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must be in [0, 1)");
  }
  std::vector<std::size_t> groups[2];
  for (std::size_t i = 0; i < samples.size(); ++i) groups[samples[i].mask ? 1 : 0].push_back(i);
  std::vector<std::size_t> train, validation;
  for (std::uint64_t g = 0; g < 2; ++g) {
    auto& members = groups[g];
    auto rng = seeded_rng({seed, 0x5917, g});
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(members.size())));
    validation.insert(validation.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(validation.begin(), validation.end());
  return {train, validation};
}

}  // namespace uolo
