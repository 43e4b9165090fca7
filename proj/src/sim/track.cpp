#include "cadlab/track.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "json.hpp"

namespace cadlab::sim {

using nlohmann::json;

const char* lane_name(Lane l) { return l == Lane::Right ? "right" : "left"; }

SegmentIndex::SegmentIndex(std::vector<Segment> segments, double cell_size)
    : segments_(std::move(segments)), cell_(cell_size) {
  if (segments_.empty()) return;
  Aabb all = bounds(segments_.front());
  for (const auto& s : segments_) {
    const Aabb b = bounds(s);
    all.lo = {std::min(all.lo.x, b.lo.x), std::min(all.lo.y, b.lo.y)};
    all.hi = {std::max(all.hi.x, b.hi.x), std::max(all.hi.y, b.hi.y)};
  }
  origin_ = all.lo;
  nx_ = static_cast<int>(std::floor((all.hi.x - all.lo.x) / cell_)) + 1;
  ny_ = static_cast<int>(std::floor((all.hi.y - all.lo.y) / cell_)) + 1;
  cells_.assign(static_cast<std::size_t>(nx_) * ny_, {});
  for (std::uint32_t i = 0; i < segments_.size(); ++i) {
    const Aabb b = bounds(segments_[i]);
    const int x0 = static_cast<int>(std::floor((b.lo.x - origin_.x) / cell_));
    const int x1 = static_cast<int>(std::floor((b.hi.x - origin_.x) / cell_));
    const int y0 = static_cast<int>(std::floor((b.lo.y - origin_.y) / cell_));
    const int y1 = static_cast<int>(std::floor((b.hi.y - origin_.y) / cell_));
    for (int gx = x0; gx <= x1; ++gx) {
      for (int gy = y0; gy <= y1; ++gy) {
        cells_[static_cast<std::size_t>(gy) * nx_ + gx].push_back(i);
      }
    }
  }
}

void SegmentIndex::query(const Aabb& box, std::vector<std::uint32_t>& out) const {
  out.clear();
  if (cells_.empty()) return;
  const int x0 = std::max(0, static_cast<int>(std::floor((box.lo.x - origin_.x) / cell_)));
  const int x1 = std::min(nx_ - 1, static_cast<int>(std::floor((box.hi.x - origin_.x) / cell_)));
  const int y0 = std::max(0, static_cast<int>(std::floor((box.lo.y - origin_.y) / cell_)));
  const int y1 = std::min(ny_ - 1, static_cast<int>(std::floor((box.hi.y - origin_.y) / cell_)));
  for (int gy = y0; gy <= y1; ++gy) {
    for (int gx = x0; gx <= x1; ++gx) {
      const auto& cell = cells_[static_cast<std::size_t>(gy) * nx_ + gx];
      out.insert(out.end(), cell.begin(), cell.end());
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
}

double TrackSpec::mu_at(double s) const {
  for (const auto& z : friction_zones) {
    if (s >= z.s_start && s <= z.s_end) return z.mu;
  }
  return default_mu;
}

namespace {

// Index i such that cum_s[i] <= s <= cum_s[i + 1], clamped to the polyline.
std::size_t segment_at(const std::vector<double>& cum, double s) {
  auto it = std::upper_bound(cum.begin(), cum.end(), s);
  std::size_t i = it == cum.begin() ? 0 : static_cast<std::size_t>(it - cum.begin()) - 1;
  return std::min(i, cum.size() - 2);
}

}  // namespace

Vec2 TrackSpec::tangent_at(double s) const {
  const std::size_t i = segment_at(cum_s, s);
  const Vec2 d = centerline[i + 1] - centerline[i];
  return d * (1.0 / norm(d));
}

Pose TrackSpec::pose_at(double s, double lateral) const {
  const std::size_t i = segment_at(cum_s, s);
  const Vec2 a = centerline[i];
  const Vec2 d = centerline[i + 1] - a;
  const Vec2 t = d * (1.0 / norm(d));
  const Vec2 p = a + t * (s - cum_s[i]) + left_normal(t) * lateral;
  return {p, std::atan2(t.y, t.x)};
}

Pose TrackSpec::start_pose(Lane lane) const {
  const double off = lane == Lane::Right ? -lane_width / 2.0 : lane_width / 2.0;
  return pose_at(start_s, off);
}

Projection TrackSpec::project(Vec2 p, double hint_s, double window) const {
  std::size_t lo = 0;
  std::size_t hi = centerline.size() - 1;
  if (window >= 0.0) {
    lo = segment_at(cum_s, hint_s - window);
    hi = std::min(centerline.size() - 1, segment_at(cum_s, hint_s + window) + 1);
  }
  Projection best;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = lo; i < hi; ++i) {
    const Vec2 a = centerline[i];
    const Vec2 d = centerline[i + 1] - a;
    const double len2 = dot(d, d);
    const double t = std::clamp(dot(p - a, d) / len2, 0.0, 1.0);
    const Vec2 q = a + d * t;
    const Vec2 r = p - q;
    const double d2 = dot(r, r);
    if (d2 < best_d2) {
      best_d2 = d2;
      best.s = cum_s[i] + t * (cum_s[i + 1] - cum_s[i]);
      best.lateral = cross(d, r) / std::sqrt(len2);
      best.segment = i;
    }
  }
  return best;
}

namespace {

const json& require(const json& doc, const char* key) {
  auto it = doc.find(key);
  if (it == doc.end()) throw TrackError(std::string("missing field '") + key + "'");
  return *it;
}

Vec2 parse_point(const json& j) {
  if (!j.is_array() || j.size() != 2) throw TrackError("point must be [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

Segment parse_segment(const json& j) {
  if (!j.is_array() || j.size() != 2) throw TrackError("segment must be [[x, y], [x, y]]");
  return {parse_point(j[0]), parse_point(j[1])};
}

std::vector<Vec2> offset_polyline(const std::vector<Vec2>& pts, double offset) {
  std::vector<Vec2> out;
  out.reserve(pts.size());
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 d_prev = i > 0 ? pts[i] - pts[i - 1] : pts[1] - pts[0];
    const Vec2 d_next = i + 1 < n ? pts[i + 1] - pts[i] : pts[n - 1] - pts[n - 2];
    const Vec2 n_prev = left_normal(d_prev * (1.0 / norm(d_prev)));
    const Vec2 n_next = left_normal(d_next * (1.0 / norm(d_next)));
    Vec2 m = n_prev + n_next;
    m = m * (1.0 / norm(m));
    // Miter: keep the perpendicular distance to both adjacent edges.
    const double scale = offset / dot(m, n_next);
    out.push_back(pts[i] + m * scale);
  }
  return out;
}

Gate make_gate(const TrackSpec& t, Lane lane, double s) {
  const Pose c = t.pose_at(s);
  const Pose edge = t.pose_at(s, lane == Lane::Right ? -t.lane_width : t.lane_width);
  return {Segment{c.position, edge.position}, s, t.tangent_at(s)};
}

double segment_station(const TrackSpec& t, const Segment& seg) {
  const Vec2 mid = (seg.a + seg.b) * 0.5;
  return t.project(mid, 0.0, -1.0).s;
}

}  // namespace

namespace {

TrackSpec parse_track(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw TrackError(std::string("malformed track document: ") + e.what());
  }
  if (!doc.is_object()) throw TrackError("track document must be an object");

  TrackSpec t;
  t.source = std::string(document);
  t.format_version = require(doc, "format_version").get<int>();
  if (t.format_version != 1) {
    throw TrackError("unsupported format_version " + std::to_string(t.format_version));
  }
  t.name = doc.value("name", std::string("unnamed"));

  for (const auto& p : require(doc, "centerline")) t.centerline.push_back(parse_point(p));
  if (t.centerline.size() < 2) throw TrackError("centerline needs at least two points");
  t.cum_s.assign(1, 0.0);
  for (std::size_t i = 1; i < t.centerline.size(); ++i) {
    const double len = norm(t.centerline[i] - t.centerline[i - 1]);
    if (!(len > 0.0)) throw TrackError("centerline has repeated points");
    t.cum_s.push_back(t.cum_s.back() + len);
  }
  t.total_length = t.cum_s.back();

  t.lane_width = require(doc, "lane_width").get<double>();
  if (!(t.lane_width > 0.0)) throw TrackError("lane_width must be positive");

  t.default_mu = doc.value("default_mu", 1.0);
  if (!(t.default_mu > 0.0)) throw TrackError("friction coefficient must be positive");

  t.borders[0] = offset_polyline(t.centerline, -t.lane_width);
  t.borders[1] = offset_polyline(t.centerline, t.lane_width);

  t.start_line = parse_segment(require(doc, "start_line"));
  t.finish_line = parse_segment(require(doc, "finish_line"));
  t.start_line_s = segment_station(t, t.start_line);
  t.finish_s = segment_station(t, t.finish_line);
  t.start_s = doc.value("start_s", 0.5 * t.start_line_s);
  if (t.start_s < 0.0 || t.start_s >= t.finish_s) {
    throw TrackError("start_s must lie before the finish line");
  }

  if (auto it = doc.find("checkpoints"); it != doc.end()) {
    for (Lane lane : {Lane::Right, Lane::Left}) {
      const auto& list = require(*it, lane_name(lane));
      double prev = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < list.size(); ++k) {
        const double s = list[k].get<double>();
        if (!(s > prev)) {
          throw TrackError(std::string("checkpoint s values must be strictly increasing (lane ") +
                           lane_name(lane) + ", index " + std::to_string(k) + ")");
        }
        if (s < 0.0 || s > t.total_length) {
          throw TrackError("checkpoint s outside the centerline");
        }
        prev = s;
        t.checkpoints[lane_index(lane)].push_back(make_gate(t, lane, s));
      }
    }
  } else if (auto sp = doc.find("checkpoint_spacing"); sp != doc.end()) {
    t.checkpoint_spacing = sp->get<double>();
    if (!(t.checkpoint_spacing > 0.0)) throw TrackError("checkpoint_spacing must be positive");
    const auto count = static_cast<std::size_t>(std::floor(t.total_length / t.checkpoint_spacing + 1e-9));
    for (Lane lane : {Lane::Right, Lane::Left}) {
      for (std::size_t k = 1; k <= count; ++k) {
        const double s = std::min(t.total_length, static_cast<double>(k) * t.checkpoint_spacing);
        t.checkpoints[lane_index(lane)].push_back(make_gate(t, lane, s));
      }
    }
  } else {
    throw TrackError("missing field 'checkpoints' or 'checkpoint_spacing'");
  }
  for (const auto& lane_gates : t.checkpoints) {
    if (lane_gates.size() > kMaxGatesPerLane) throw TrackError("too many checkpoints in a lane");
  }

  if (auto it = doc.find("friction_zones"); it != doc.end()) {
    for (const auto& z : *it) {
      FrictionZone f{require(z, "s_start").get<double>(), require(z, "s_end").get<double>(),
                     require(z, "mu").get<double>()};
      if (!(f.mu > 0.0)) throw TrackError("friction coefficient must be positive");
      if (!(f.s_end > f.s_start)) throw TrackError("friction zone must have s_end > s_start");
      t.friction_zones.push_back(f);
    }
  }

  if (auto it = doc.find("obstacle_slots"); it != doc.end()) {
    for (const auto& o : *it) {
      ObstacleSlot slot;
      slot.s = require(o, "s").get<double>();
      slot.half_extents = parse_point(require(o, "half_extents"));
      slot.s_jitter = o.value("s_jitter", 0.0);
      t.obstacle_slots.push_back(slot);
    }
  }

  const json& obstacles = require(doc, "obstacles");
  for (std::size_t k = 0; k < obstacles.size(); ++k) {
    const auto& o = obstacles[k];
    Box b{parse_point(require(o, "center")), parse_point(require(o, "half_extents")),
          o.value("heading", 0.0)};
    if (!(b.half_extents.x > 0.0 && b.half_extents.y > 0.0)) {
      throw TrackError("obstacle " + std::to_string(k) + " has non-positive half_extents");
    }
    const Projection pr = t.project(b.center, 0.0, -1.0);
    if (std::abs(pr.lateral) >= t.lane_width || pr.s <= 0.0 || pr.s >= t.total_length) {
      throw TrackError("obstacle " + std::to_string(k) + " lies outside the drivable corridor");
    }
    if (box_segment_overlap(b, t.start_line)) {
      throw TrackError("obstacle " + std::to_string(k) + " overlaps the start line");
    }
    t.obstacles.push_back(b);
  }

  std::vector<Segment> border_segments;
  for (const auto& border : t.borders) {
    for (std::size_t i = 1; i < border.size(); ++i) {
      border_segments.push_back({border[i - 1], border[i]});
    }
  }
  t.border_index = SegmentIndex(std::move(border_segments), 10.0);
  return t;
}

}  // namespace

TrackSpec load_track(std::string_view document) {
  try {
    return parse_track(document);
  } catch (const nlohmann::json::exception& e) {
    throw TrackError(std::string("invalid track document: ") + e.what());
  }
}

TrackSpec load_track_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TrackError("cannot open track file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return load_track(ss.str());
}

std::vector<Box> make_layout(const TrackSpec& track, std::uint64_t seed) {
  if (seed == 0 || track.obstacle_slots.empty()) return track.obstacles;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Box> out;
  for (const auto& slot : track.obstacle_slots) {
    const bool left = unit(rng) < 0.5;
    const double ds = (2.0 * unit(rng) - 1.0) * slot.s_jitter;
    const double dl = (2.0 * unit(rng) - 1.0) * 0.25;
    const double s = std::clamp(slot.s + ds, track.start_line_s + 10.0, track.finish_s - 10.0);
    const double lat = (left ? 1.0 : -1.0) * track.lane_width / 2.0 + dl;
    const Pose p = track.pose_at(s, lat);
    out.push_back(Box{p.position, slot.half_extents, p.heading});
  }
  return out;
}

}  // namespace cadlab::sim
