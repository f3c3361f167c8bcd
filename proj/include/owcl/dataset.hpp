#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "owcl/nn.hpp"

// Task streams with disjoint class sets: a seeded Gaussian-blob stream for
// vector data, a procedural grayscale shape stream (square rasters so 90/180/
// 270 degree rotations are exact), and an IDX-format loader for MNIST-style
// files.

namespace owcl::data {

struct Sample {
  nn::Vec x;
  int label = 0;
  std::uint64_t id = 0;
};

struct TaskData {
  std::vector<int> classes;  // global labels owned by this task
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct TaskStream {
  std::vector<TaskData> tasks;
  std::vector<Sample> ood_holdout;  // classes in no task; open-world eval only
  int dim = 0;
  int side = 0;  // > 0 for square rasters
};

// Counter-clockwise quarter-turn rotations of a row-major square raster.
nn::Vec rotate90(const nn::Vec& img, int side, int times);

struct GaussianSpec {
  int tasks = 3;
  int classes_per_task = 2;
  int dim = 2;
  double separation = 10.0;
  int train_per_class = 100;
  int test_per_class = 50;
  int ood_classes = 0;
  std::uint64_t seed = 1;
};

// Class means on a seeded lattice scaled by separation, isotropic unit
// covariance. Requires dim >= 2 and separation > 0.
TaskStream gen_gaussian_stream(const GaussianSpec& spec);

struct ShapeSpec {
  int tasks = 5;
  int classes_per_task = 2;
  int side = 16;  // one of 8, 16, 32
  int train_per_class = 200;
  int test_per_class = 100;
  int ood_classes = 0;
  double noise = 0.35;
  std::uint64_t seed = 1;
};

// Procedural shapes, one family (at a parameter bin) per class. Throws when
// more classes are requested than families x bins.
TaskStream gen_shape_image_stream(const ShapeSpec& spec);

int shape_family_count();

struct IdxError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Big-endian IDX image/label pair; pixel values scaled to [0, 1].
std::vector<Sample> load_idx_dataset(const std::string& images_path,
                                     const std::string& labels_path);

// Splits a flat labeled set into a stream of tasks with classes_per_task
// consecutive labels each (after a seeded label shuffle).
TaskStream split_into_tasks(std::vector<Sample> samples, int tasks,
                            int classes_per_task, double test_fraction,
                            int side, std::uint64_t seed);

// Moves a fraction of each earlier task's training samples into a later
// task's training stream (labels unchanged): blurry task boundaries.
void apply_blurry_boundaries(TaskStream& stream, double fraction,
                             std::uint64_t seed);

}  // namespace owcl::data
