#pragma once

#include "lidet/common.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace lidet {

enum class Generator { two_moons, gaussian_blobs, uniform_manifold };

std::string to_string(Generator g);
Generator generator_from_string(const std::string& name);

/// Parameters of the builtin toy generators. Every generator writes into
/// [0,1]^ambient_dim.
///
/// two_moons         interleaved half circles with Gaussian noise; for
///                   ambient_dim > 2 the plane is embedded by a fixed random
///                   isometry (drawn from embed_seed).
/// gaussian_blobs    num_classes isotropic clusters, centers from embed_seed.
/// uniform_manifold  uniform on an m-cube isometrically embedded in
///                   ambient_dim dimensions; label is the first manifold
///                   coordinate > 0.5.
struct SyntheticSpec {
  Generator generator = Generator::two_moons;
  std::size_t n = 1000;
  Seed seed = 0;
  Seed embed_seed = 0;
  Eigen::Index ambient_dim = 2;
  Eigen::Index manifold_dim = 2;
  double noise = 0.1;
  int num_classes = 2;
  double blob_std = 0.05;
};

Dataset gen_synthetic(const SyntheticSpec& spec);

/// Rows [begin, end) of a dataset.
Dataset slice(const Dataset& data, Eigen::Index begin, Eigen::Index end);
/// Selected rows of a dataset, in the given order.
Dataset take(const Dataset& data, const std::vector<std::size_t>& rows);

/// Features then an integer label per row; an optional non-numeric header
/// line is skipped. Throws ParseError with a 1-based line number.
Dataset load_csv(const std::string& path);
Dataset parse_csv(std::string_view text);
void save_csv(const Dataset& data, const std::string& path);

// CSV helpers shared by the file formats.
std::vector<std::string> split_csv_line(std::string_view line);
/// Shortest representation that round-trips exactly.
std::string format_double(double value);
/// Throws ParseError on anything but a complete finite number.
double parse_double(std::string_view field, std::size_t line);

}  // namespace lidet
