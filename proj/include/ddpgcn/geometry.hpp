#pragma once

// Vector geometry of directed road links: directions, lengths, end-to-start
// connectivity and the four-way classification of extended-line
// intersections.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ddpgcn/error.hpp"

namespace ddpgcn {

struct Point2 {
  double x = 0.0;  // meters
  double y = 0.0;  // meters

  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator*(double s, Point2 a) { return {s * a.x, s * a.y}; }
  bool operator==(const Point2&) const = default;
};

inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point2 a) { return std::hypot(a.x, a.y); }

struct LinkVector {
  std::size_t id = 0;
  Point2 start;
  Point2 end;

  Point2 vector() const { return end - start; }
};

enum class DirectionConvention {
  standard,   // counterclockwise angle from +x, atan2 style
  paper_eq2,  // arccos(R.ex/|R|) + ((sign(R.ey)+1)/2) * pi, evaluated literally
};

enum class PositionalClass { none, p1, p2, p3, p4 };

inline const char* to_string(PositionalClass c) {
  switch (c) {
    case PositionalClass::p1: return "P1";
    case PositionalClass::p2: return "P2";
    case PositionalClass::p3: return "P3";
    case PositionalClass::p4: return "P4";
    case PositionalClass::none: break;
  }
  return "NONE";
}

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kDefaultParallelTol = 1e-9;
inline constexpr double kDefaultSnapTolerance = 1e-6;

inline double link_length(const LinkVector& link) { return norm(link.vector()); }

inline double wrap_angle(double a) {
  double w = std::fmod(a, kTwoPi);
  if (w < 0.0) w += kTwoPi;
  if (w >= kTwoPi) w = 0.0;
  return w;
}

/// Direction angle of a link in [0, 2pi).
inline double link_direction(const LinkVector& link,
                             DirectionConvention convention = DirectionConvention::standard) {
  const Point2 v = link.vector();
  const double len = norm(v);
  if (!(len > 0.0)) {
    throw DomainError("link_direction: link " + std::to_string(link.id) + " has zero length");
  }
  if (convention == DirectionConvention::standard) {
    return wrap_angle(std::atan2(v.y, v.x));
  }
  const double c = std::clamp(v.x / len, -1.0, 1.0);
  const double sign_y = (v.y > 0.0) ? 1.0 : (v.y < 0.0 ? -1.0 : 0.0);
  return wrap_angle(std::acos(c) + 0.5 * (sign_y + 1.0) * std::numbers::pi);
}

/// Where the infinite extensions of two links meet, relative to each start
/// point: s >= 0 is the forward side of link i, t >= 0 the forward side of j.
/// An intersection lying inside a segment counts as forward.
inline PositionalClass classify_positional(const LinkVector& link_i, const LinkVector& link_j,
                                           double parallel_tol = kDefaultParallelTol) {
  const Point2 vi = link_i.vector();
  const Point2 vj = link_j.vector();
  const double li = norm(vi);
  const double lj = norm(vj);
  if (!(li > 0.0) || !(lj > 0.0)) {
    throw DomainError("classify_positional: zero-length link");
  }
  const Point2 ui = (1.0 / li) * vi;
  const Point2 uj = (1.0 / lj) * vj;
  const double denom = cross(ui, uj);  // sin(angle_i - angle_j) up to sign
  if (std::abs(denom) <= parallel_tol) return PositionalClass::none;

  const Point2 d = link_j.start - link_i.start;
  const double s = cross(d, uj) / denom;
  const double t = cross(d, ui) / denom;
  const bool forward_i = s >= 0.0;
  const bool forward_j = t >= 0.0;
  if (!forward_i && !forward_j) return PositionalClass::p1;
  if (forward_i && forward_j) return PositionalClass::p2;
  if (forward_i) return PositionalClass::p3;
  return PositionalClass::p4;
}

/// Links with dense ids plus the end-to-start connectivity relation.
struct LinkSet {
  std::vector<LinkVector> links;
  std::vector<std::pair<std::size_t, std::size_t>> connectivity;  // (i, j): end_i ~ start_j

  std::size_t size() const { return links.size(); }

  std::vector<double> lengths() const {
    std::vector<double> out;
    out.reserve(links.size());
    for (const auto& l : links) out.push_back(link_length(l));
    return out;
  }

  /// Outgoing adjacency lists derived from `connectivity`.
  std::vector<std::vector<std::size_t>> successors() const {
    std::vector<std::vector<std::size_t>> out(links.size());
    for (auto [i, j] : connectivity) out[i].push_back(j);
    return out;
  }
};

/// Validates ids and lengths, then derives connectivity by snapping end
/// points to start points.
inline LinkSet make_link_set(std::vector<LinkVector> links,
                             double snap_tolerance = kDefaultSnapTolerance) {
  const std::size_t n = links.size();
  std::vector<LinkVector> ordered(n);
  std::vector<bool> seen(n, false);
  for (const auto& l : links) {
    if (l.id >= n || seen[l.id]) {
      throw DataError("link ids must be exactly 0..N-1 without gaps or duplicates (offending id " +
                      std::to_string(l.id) + ")");
    }
    if (!std::isfinite(l.start.x) || !std::isfinite(l.start.y) || !std::isfinite(l.end.x) ||
        !std::isfinite(l.end.y)) {
      throw DataError("link " + std::to_string(l.id) + " has non-finite coordinates");
    }
    if (!(link_length(l) > 0.0)) {
      throw DomainError("link " + std::to_string(l.id) + " has zero length");
    }
    seen[l.id] = true;
    ordered[l.id] = l;
  }
  LinkSet set;
  set.links = std::move(ordered);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (norm(set.links[i].end - set.links[j].start) <= snap_tolerance) {
        set.connectivity.emplace_back(i, j);
      }
    }
  return set;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": cannot parse number '" + s + "'");
  }
}

}  // namespace detail

/// Reads `id,start_x,start_y,end_x,end_y` (meters, one row per link).
inline LinkSet load_link_geometry(const std::string& path,
                                  double snap_tolerance = kDefaultSnapTolerance) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open link geometry file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> expected{"id", "start_x", "start_y", "end_x", "end_y"};
  if (header != expected) {
    throw DataError(path + ": header must be id,start_x,start_y,end_x,end_y");
  }
  std::vector<LinkVector> links;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = path + " row " + std::to_string(row);
    if (cells.size() != 5) throw DataError(where + ": expected 5 columns");
    const double id = detail::parse_double(cells[0], where);
    if (id < 0 || id != std::floor(id)) throw DataError(where + ": id must be a non-negative integer");
    links.push_back({static_cast<std::size_t>(id),
                     {detail::parse_double(cells[1], where), detail::parse_double(cells[2], where)},
                     {detail::parse_double(cells[3], where), detail::parse_double(cells[4], where)}});
  }
  return make_link_set(std::move(links), snap_tolerance);
}

inline void save_link_geometry(const std::string& path, const LinkSet& set) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write link geometry file: " + path);
  out.precision(17);
  out << "id,start_x,start_y,end_x,end_y\n";
  for (const auto& l : set.links) {
    out << l.id << ',' << l.start.x << ',' << l.start.y << ',' << l.end.x << ',' << l.end.y << '\n';
  }
}

}  // namespace ddpgcn
