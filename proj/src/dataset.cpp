#include "owcl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

namespace owcl::data {

nn::Vec rotate90(const nn::Vec& img, int side, int times) {
  if (static_cast<int>(img.size()) != side * side)
    throw std::invalid_argument("rotate90: not a square raster");
  nn::Vec cur = img;
  times = ((times % 4) + 4) % 4;
  for (int t = 0; t < times; ++t) {
    nn::Vec next(cur.size());
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c)
        next[static_cast<std::size_t>(r) * side + c] =
            cur[static_cast<std::size_t>(c) * side + (side - 1 - r)];
    cur = std::move(next);
  }
  return cur;
}

namespace {

std::uint64_t next_id(std::uint64_t& counter) { return counter++; }

}  // namespace

TaskStream gen_gaussian_stream(const GaussianSpec& spec) {
  if (spec.dim < 2) throw std::invalid_argument("gen_gaussian_stream: dim < 2");
  if (!(spec.separation > 0.0))
    throw std::invalid_argument("gen_gaussian_stream: separation must be positive");
  const int n_classes = spec.tasks * spec.classes_per_task + spec.ood_classes;
  std::mt19937_64 rng(spec.seed);

  // Lattice points in the first two coordinates, assignment shuffled by seed.
  const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_classes))));
  std::vector<nn::Vec> means;
  for (int c = 0; c < n_classes; ++c) {
    nn::Vec mu(spec.dim, 0.0);
    mu[0] = spec.separation * static_cast<double>(c % grid);
    mu[1] = spec.separation * static_cast<double>(c / grid);
    means.push_back(std::move(mu));
  }
  std::shuffle(means.begin(), means.end(), rng);

  std::normal_distribution<double> noise(0.0, 1.0);
  std::uint64_t id_counter = 0;
  auto draw = [&](int label) {
    Sample s;
    s.label = label;
    s.id = next_id(id_counter);
    s.x.resize(spec.dim);
    for (int d = 0; d < spec.dim; ++d) s.x[d] = means[label][d] + noise(rng);
    return s;
  };

  TaskStream stream;
  stream.dim = spec.dim;
  for (int k = 0; k < spec.tasks; ++k) {
    TaskData task;
    for (int j = 0; j < spec.classes_per_task; ++j) {
      const int label = k * spec.classes_per_task + j;
      task.classes.push_back(label);
      for (int i = 0; i < spec.train_per_class; ++i) task.train.push_back(draw(label));
      for (int i = 0; i < spec.test_per_class; ++i) task.test.push_back(draw(label));
    }
    stream.tasks.push_back(std::move(task));
  }
  for (int c = 0; c < spec.ood_classes; ++c) {
    const int label = spec.tasks * spec.classes_per_task + c;
    for (int i = 0; i < spec.test_per_class; ++i)
      stream.ood_holdout.push_back(draw(label));
  }
  return stream;
}

// ---------------------------------------------------------------------------
// Procedural shapes

namespace {

constexpr int kShapeFamilies = 14;
constexpr int kShapeBins = 3;

struct Raster {
  int side;
  nn::Vec pix;
  explicit Raster(int s) : side(s), pix(static_cast<std::size_t>(s) * s, 0.0) {}
  void set(int r, int c, double v) {
    if (r >= 0 && r < side && c >= 0 && c < side)
      pix[static_cast<std::size_t>(r) * side + c] = std::max(pix[static_cast<std::size_t>(r) * side + c], v);
  }
};

void draw_family(Raster& im, int family, int dx, int dy, int thick, double v) {
  const int s = im.side;
  const int mid = s / 2;
  auto hline = [&](int row, int c0, int c1) {
    for (int t = 0; t < thick; ++t)
      for (int c = c0; c <= c1; ++c) im.set(row + t, c, v);
  };
  auto vline = [&](int col, int r0, int r1) {
    for (int t = 0; t < thick; ++t)
      for (int r = r0; r <= r1; ++r) im.set(r, col + t, v);
  };
  switch (family) {
    case 0:  // horizontal bar
      hline(mid + dy, 1, s - 2);
      break;
    case 1:  // vertical bar
      vline(mid + dx, 1, s - 2);
      break;
    case 2:  // plus cross
      hline(mid + dy, 2, s - 3);
      vline(mid + dx, 2, s - 3);
      break;
    case 3:  // rectangular frame
      hline(2 + dy, 2 + dx, s - 3 + dx);
      hline(s - 3 + dy, 2 + dx, s - 3 + dx);
      vline(2 + dx, 2 + dy, s - 3 + dy);
      vline(s - 3 + dx, 2 + dy, s - 3 + dy);
      break;
    case 4:  // top-left corner L
      hline(2 + dy, 2 + dx, mid + dx);
      vline(2 + dx, 2 + dy, mid + dy);
      break;
    case 5:  // bottom-right corner L
      hline(s - 3 + dy, mid + dx, s - 3 + dx);
      vline(s - 3 + dx, mid + dy, s - 3 + dy);
      break;
    case 6:  // main diagonal
      for (int i = 1; i < s - 1; ++i)
        for (int t = 0; t < thick; ++t) im.set(i + dy, std::min(i + t + dx, s - 1), v);
      break;
    case 7:  // anti-diagonal
      for (int i = 1; i < s - 1; ++i)
        for (int t = 0; t < thick; ++t)
          im.set(i + dy, std::max(0, s - 1 - i - t + dx), v);
      break;
    case 8: {  // filled center square
      const int half = s / 4;
      for (int r = mid - half + dy; r < mid + half + dy; ++r)
        for (int c = mid - half + dx; c < mid + half + dx; ++c) im.set(r, c, v);
      break;
    }
    case 9: {  // four dots
      const int q = s / 4;
      for (int br : {q, 3 * q - 1})
        for (int bc : {q, 3 * q - 1})
          for (int r = 0; r < thick + 1; ++r)
            for (int c = 0; c < thick + 1; ++c) im.set(br + r + dy, bc + c + dx, v);
      break;
    }
    case 10:  // T shape
      hline(2 + dy, 2 + dx, s - 3 + dx);
      vline(mid + dx, 2 + dy, s - 3 + dy);
      break;
    case 11: {  // ring
      const double rad = s / 3.0;
      for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
          const double d = std::hypot(r - mid - dy + 0.5, c - mid - dx + 0.5);
          if (std::abs(d - rad) < 0.6 * thick + 0.4) im.set(r, c, v);
        }
      break;
    }
    case 12: {  // filled wedge
      for (int r = 2; r < s - 2; ++r)
        for (int c = 2; c <= r; ++c) im.set(r + dy, c + dx, v);
      break;
    }
    case 13:  // double horizontal stripes
      hline(s / 3 + dy, 1, s - 2);
      hline(2 * s / 3 + dy, 1, s - 2);
      break;
    default:
      throw std::invalid_argument("draw_family: unknown family");
  }
}

Sample draw_shape(int side, int label, double noise_amp, std::mt19937_64& rng,
                  std::uint64_t& id_counter) {
  const int family = label % kShapeFamilies;
  const int bin = label / kShapeFamilies;
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::uniform_int_distribution<int> thick_pick(1, 2);
  std::uniform_real_distribution<double> intensity(0.7, 1.0);
  std::uniform_real_distribution<double> pix_noise(0.0, noise_amp);
  // Parameter bins displace the shape systematically so bins are distinct.
  const int bin_dx = (bin == 1) ? 3 : (bin == 2 ? -3 : 0);
  Raster im(side);
  draw_family(im, family, jitter(rng) + bin_dx, jitter(rng), thick_pick(rng),
              intensity(rng));
  Sample s;
  s.label = label;
  s.id = id_counter++;
  s.x = std::move(im.pix);
  for (double& p : s.x) p = std::min(1.0, p + pix_noise(rng));
  return s;
}

}  // namespace

int shape_family_count() { return kShapeFamilies; }

TaskStream gen_shape_image_stream(const ShapeSpec& spec) {
  if (spec.side != 8 && spec.side != 16 && spec.side != 32)
    throw std::invalid_argument("gen_shape_image_stream: side must be 8, 16, or 32");
  const int n_classes = spec.tasks * spec.classes_per_task + spec.ood_classes;
  if (n_classes > kShapeFamilies * kShapeBins)
    throw std::invalid_argument("gen_shape_image_stream: more classes than shape variants");
  std::mt19937_64 rng(spec.seed);
  std::uint64_t id_counter = 0;

  TaskStream stream;
  stream.side = spec.side;
  stream.dim = spec.side * spec.side;
  for (int k = 0; k < spec.tasks; ++k) {
    TaskData task;
    for (int j = 0; j < spec.classes_per_task; ++j) {
      const int label = k * spec.classes_per_task + j;
      task.classes.push_back(label);
      for (int i = 0; i < spec.train_per_class; ++i)
        task.train.push_back(draw_shape(spec.side, label, spec.noise, rng, id_counter));
      for (int i = 0; i < spec.test_per_class; ++i)
        task.test.push_back(draw_shape(spec.side, label, spec.noise, rng, id_counter));
    }
    stream.tasks.push_back(std::move(task));
  }
  for (int c = 0; c < spec.ood_classes; ++c) {
    const int label = spec.tasks * spec.classes_per_task + c;
    for (int i = 0; i < spec.test_per_class; ++i)
      stream.ood_holdout.push_back(draw_shape(spec.side, label, spec.noise, rng, id_counter));
  }
  return stream;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::uint32_t read_be32(std::ifstream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IdxError("idx: truncated " + what);
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace

std::vector<Sample> load_idx_dataset(const std::string& images_path,
                                     const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IdxError("idx: cannot open " + images_path);
  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw IdxError("idx: cannot open " + labels_path);

  if (read_be32(imgs, "image magic") != 0x00000803u)
    throw IdxError("idx: bad image magic in " + images_path);
  if (read_be32(labs, "label magic") != 0x00000801u)
    throw IdxError("idx: bad label magic in " + labels_path);

  const std::uint32_t n_images = read_be32(imgs, "image count");
  const std::uint32_t rows = read_be32(imgs, "rows");
  const std::uint32_t cols = read_be32(imgs, "cols");
  const std::uint32_t n_labels = read_be32(labs, "label count");
  if (n_images != n_labels)
    throw IdxError("idx: image/label count mismatch");

  std::vector<Sample> out;
  out.reserve(n_images);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    imgs.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!imgs) throw IdxError("idx: truncated image data");
    unsigned char lab = 0;
    labs.read(reinterpret_cast<char*>(&lab), 1);
    if (!labs) throw IdxError("idx: truncated label data");
    Sample s;
    s.label = lab;
    s.id = i;
    s.x.resize(buf.size());
    for (std::size_t p = 0; p < buf.size(); ++p) s.x[p] = buf[p] / 255.0;
    out.push_back(std::move(s));
  }
  return out;
}

TaskStream split_into_tasks(std::vector<Sample> samples, int tasks,
                            int classes_per_task, double test_fraction,
                            int side, std::uint64_t seed) {
  std::map<int, std::vector<Sample>> by_label;
  for (Sample& s : samples) by_label[s.label].push_back(std::move(s));
  std::vector<int> labels;
  for (const auto& [lab, _] : by_label) labels.push_back(lab);
  if (static_cast<int>(labels.size()) < tasks * classes_per_task)
    throw std::invalid_argument("split_into_tasks: not enough classes");
  std::mt19937_64 rng(seed);
  std::shuffle(labels.begin(), labels.end(), rng);

  TaskStream stream;
  stream.side = side;
  stream.dim = samples.empty() && !by_label.empty()
                   ? static_cast<int>(by_label.begin()->second.front().x.size())
                   : stream.dim;
  for (int k = 0; k < tasks; ++k) {
    TaskData task;
    for (int j = 0; j < classes_per_task; ++j) {
      const int lab = labels[k * classes_per_task + j];
      task.classes.push_back(lab);
      auto& pool = by_label[lab];
      std::shuffle(pool.begin(), pool.end(), rng);
      const std::size_t n_test =
          static_cast<std::size_t>(test_fraction * static_cast<double>(pool.size()));
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (i < n_test)
          task.test.push_back(pool[i]);
        else
          task.train.push_back(pool[i]);
      }
      if (!pool.empty()) stream.dim = static_cast<int>(pool.front().x.size());
    }
    stream.tasks.push_back(std::move(task));
  }
  // Remaining classes become the open-world holdout.
  for (std::size_t i = static_cast<std::size_t>(tasks) * classes_per_task;
       i < labels.size(); ++i)
    for (Sample& s : by_label[labels[i]]) stream.ood_holdout.push_back(std::move(s));
  return stream;
}

void apply_blurry_boundaries(TaskStream& stream, double fraction,
                             std::uint64_t seed) {
  if (fraction <= 0.0) return;
  std::mt19937_64 rng(seed);
  const int t = static_cast<int>(stream.tasks.size());
  for (int k = 0; k + 1 < t; ++k) {
    auto& train = stream.tasks[k].train;
    std::shuffle(train.begin(), train.end(), rng);
    const std::size_t move_n =
        static_cast<std::size_t>(fraction * static_cast<double>(train.size()));
    std::uniform_int_distribution<int> later(k + 1, t - 1);
    for (std::size_t i = 0; i < move_n; ++i) {
      stream.tasks[later(rng)].train.push_back(std::move(train.back()));
      train.pop_back();
    }
  }
}

}  // namespace owcl::data
