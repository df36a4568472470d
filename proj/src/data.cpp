#include "lidet/data.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace lidet {

namespace {

// Orthonormal ambient x manifold basis drawn from a seed.
Matrix random_isometry(Eigen::Index ambient, Eigen::Index manifold, Seed seed) {
  std::mt19937_64 rng(seed ^ 0x2545f4914f6cdd1dULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(ambient, manifold);
  for (Eigen::Index r = 0; r < ambient; ++r)
    for (Eigen::Index c = 0; c < manifold; ++c) g(r, c) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(ambient, manifold);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::string to_string(Generator g) {
  switch (g) {
    case Generator::two_moons: return "two_moons";
    case Generator::gaussian_blobs: return "gaussian_blobs";
    case Generator::uniform_manifold: return "uniform_manifold";
  }
  return "?";
}

Generator generator_from_string(const std::string& name) {
  for (Generator g : {Generator::two_moons, Generator::gaussian_blobs, Generator::uniform_manifold})
    if (to_string(g) == name) return g;
  throw ValidationError("unknown generator '" + name + "'");
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.n < 10) throw ValidationError("synthetic datasets need n >= 10");
  if (spec.ambient_dim < 1) throw ValidationError("ambient dimension must be positive");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto n = static_cast<Eigen::Index>(spec.n);
  const Eigen::Index d = spec.ambient_dim;

  Dataset out;
  out.features.resize(n, d);
  out.labels.resize(spec.n);

  switch (spec.generator) {
    case Generator::two_moons: {
      if (d < 2) throw ValidationError("two_moons needs ambient_dim >= 2");
      const Matrix basis = d == 2 ? Matrix(Matrix::Identity(2, 2)) : random_isometry(d, 2, spec.embed_seed);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        const double t = std::numbers::pi * unit(rng);
        double u = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
        double v = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
        u += spec.noise * normal(rng);
        v += spec.noise * normal(rng);
        Eigen::Vector2d plane((u + 1.5) / 4.0, (v + 0.9) / 2.3);
        Vector point = d == 2 ? Vector(plane) : Vector(0.5 + (0.7 * (basis * (plane.array() - 0.5).matrix())).array());
        out.features.row(i) = point.cwiseMax(0.0).cwiseMin(1.0).transpose();
        out.labels[static_cast<std::size_t>(i)] = label;
      }
      break;
    }
    case Generator::gaussian_blobs: {
      if (spec.num_classes < 2) throw ValidationError("gaussian_blobs needs at least two classes");
      std::mt19937_64 center_rng(spec.embed_seed);
      std::uniform_real_distribution<double> center_dist(0.25, 0.75);
      Matrix centers(spec.num_classes, d);
      for (Eigen::Index c = 0; c < centers.rows(); ++c)
        for (Eigen::Index j = 0; j < d; ++j) centers(c, j) = center_dist(center_rng);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % spec.num_classes);
        for (Eigen::Index j = 0; j < d; ++j)
          out.features(i, j) = std::clamp(centers(label, j) + spec.blob_std * normal(rng), 0.0, 1.0);
        out.labels[static_cast<std::size_t>(i)] = label;
      }
      break;
    }
    case Generator::uniform_manifold: {
      const Eigen::Index m = spec.manifold_dim;
      if (m < 1 || m > d) throw ValidationError("uniform_manifold needs 1 <= m <= ambient_dim");
      const Matrix basis = random_isometry(d, m, spec.embed_seed);
      const double scale = 0.9 / std::sqrt(static_cast<double>(m));
      Vector u(m);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) u[j] = unit(rng);
        out.features.row(i) = (0.5 + (scale * (basis * (u.array() - 0.5).matrix())).array()).transpose();
        out.labels[static_cast<std::size_t>(i)] = u[0] > 0.5 ? 1 : 0;
      }
      break;
    }
  }
  return out;
}

Dataset slice(const Dataset& data, Eigen::Index begin, Eigen::Index end) {
  if (begin < 0 || end > data.size() || begin > end) throw RangeError("dataset slice out of range");
  Dataset out;
  out.features = data.features.middleRows(begin, end - begin);
  out.labels.assign(data.labels.begin() + begin, data.labels.begin() + end);
  return out;
}

Dataset take(const Dataset& data, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), data.dim());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= static_cast<std::size_t>(data.size())) throw RangeError("row index out of range");
    out.features.row(static_cast<Eigen::Index>(i)) = data.features.row(static_cast<Eigen::Index>(rows[i]));
    out.labels.push_back(data.labels[rows[i]]);
  }
  return out;
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view field, std::size_t line) {
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  if (!field.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, value);
  if (field.empty() || res.ec != std::errc() || res.ptr != last)
    throw ParseError("'" + std::string(field) + "' is not a number", line);
  if (!std::isfinite(value)) throw ParseError("non-finite value", line);
  return value;
}

Dataset parse_csv(std::string_view text) {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t line_no = 0;
  std::size_t width = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (rows.empty() && labels.empty() && line_no == 1) {
      double dummy = 0.0;
      const auto& f = fields.front();
      if (std::from_chars(f.data(), f.data() + f.size(), dummy).ec != std::errc()) continue;  // header
    }
    if (fields.size() < 2) throw ParseError("expected features followed by a label column", line_no);
    if (width == 0) width = fields.size();
    if (fields.size() != width)
      throw ParseError("expected " + std::to_string(width) + " columns, found " + std::to_string(fields.size()), line_no);
    std::vector<double> row;
    for (std::size_t c = 0; c + 1 < fields.size(); ++c) row.push_back(parse_double(fields[c], line_no));
    const double label = parse_double(fields.back(), line_no);
    if (label < 0.0 || label != std::floor(label)) throw ParseError("label must be a non-negative integer", line_no);
    rows.push_back(std::move(row));
    labels.push_back(static_cast<int>(label));
  }
  if (rows.empty()) throw ParseError("no data rows", line_no);
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width - 1));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c + 1 < width; ++c)
      out.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  out.labels = std::move(labels);
  return out;
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str());
}

void save_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (Eigen::Index c = 0; c < data.dim(); ++c) out << 'x' << c << ',';
  out << "label\n";
  for (Eigen::Index r = 0; r < data.size(); ++r) {
    for (Eigen::Index c = 0; c < data.dim(); ++c) out << format_double(data.features(r, c)) << ',';
    out << data.labels[static_cast<std::size_t>(r)] << '\n';
  }
}

}  // namespace lidet
