#!/usr/bin/env python3
"""Generates data/reference_track.json: a point-to-point two-lane course.

The course is assembled from straights and constant-radius arcs, sampled at
roughly 1 m. Run from the repository root:

    python3 tools/make_reference_track.py > data/reference_track.json
"""
import json
import re
import math
import sys

LANE_WIDTH = 3.5
STEP = 1.0

# (kind, length_or_radius, turn_degrees); positive degrees turn left.
SECTIONS = [
    ("straight", 70.0, 0),
    ("arc", 30.0, -90),
    ("straight", 55.0, 0),
    ("arc", 22.0, 90),
    ("straight", 45.0, 0),
    ("arc", 25.0, 90),
    ("straight", 60.0, 0),
    ("arc", 20.0, -120),
    ("straight", 50.0, 0),
    ("arc", 30.0, 60),
    ("arc", 30.0, -60),
    ("straight", 50.0, 0),
]


def build():
    x, y, h = 0.0, 0.0, 0.0
    pts = [(x, y)]
    s = 0.0
    marks = []
    for kind, a, deg in SECTIONS:
        start_s = s
        if kind == "straight":
            n = max(1, int(round(a / STEP)))
            ds = a / n
            for _ in range(n):
                x += ds * math.cos(h)
                y += ds * math.sin(h)
                pts.append((x, y))
            s += a
        else:
            radius = a
            total = math.radians(deg)
            length = abs(total) * radius
            n = max(1, int(round(length / STEP)))
            dh = total / n
            chord = 2.0 * radius * math.sin(abs(dh) / 2.0)
            for _ in range(n):
                h_mid = h + dh / 2.0
                x += chord * math.cos(h_mid)
                y += chord * math.sin(h_mid)
                h += dh
                pts.append((x, y))
            s += n * chord
        marks.append((kind, start_s, s))
    return pts, marks


def check_clearance(pts):
    # Non-adjacent parts of the road must stay well apart.
    cum = [0.0]
    for i in range(1, len(pts)):
        cum.append(cum[-1] + math.dist(pts[i - 1], pts[i]))
    worst = float("inf")
    for i in range(0, len(pts), 2):
        for j in range(i + 1, len(pts), 2):
            if cum[j] - cum[i] < 60.0:
                continue
            worst = min(worst, math.dist(pts[i], pts[j]))
    if worst < 4 * LANE_WIDTH:
        raise SystemExit(f"course folds onto itself: clearance {worst:.2f} m")
    return cum


def pose_at(pts, cum, s):
    for i in range(1, len(pts)):
        if cum[i] >= s:
            t = (s - cum[i - 1]) / (cum[i] - cum[i - 1])
            (ax, ay), (bx, by) = pts[i - 1], pts[i]
            h = math.atan2(by - ay, bx - ax)
            return ax + t * (bx - ax), ay + t * (by - ay), h
    raise ValueError(s)


def cross_line(pts, cum, s):
    x, y, h = pose_at(pts, cum, s)
    nx, ny = -math.sin(h), math.cos(h)
    w = LANE_WIDTH
    return [[round(x - w * nx, 6), round(y - w * ny, 6)],
            [round(x + w * nx, 6), round(y + w * ny, 6)]]


def main():
    pts, marks = build()
    cum = check_clearance(pts)
    total = cum[-1]
    straights = [(a, b) for k, a, b in marks if k == "straight"]
    arcs = [(a, b) for k, a, b in marks if k == "arc"]

    def mid(seg):
        return 0.5 * (seg[0] + seg[1])

    doc = {
        "format_version": 1,
        "name": "reference",
        "lane_width": LANE_WIDTH,
        "default_mu": 1.0,
        "start_s": 5.0,
        "start_line": cross_line(pts, cum, 10.0),
        "finish_line": cross_line(pts, cum, total - 5.0),
        "checkpoint_spacing": 5.0,
        "centerline": [[round(px, 6), round(py, 6)] for px, py in pts],
        "friction_zones": [
            {"s_start": round(arcs[1][0] - 10.0, 3), "s_end": round(arcs[1][1] + 5.0, 3), "mu": 0.3},
            {"s_start": round(arcs[3][0] - 10.0, 3), "s_end": round(arcs[3][1] + 5.0, 3), "mu": 0.25},
        ],
        "obstacle_slots": [
            {"s": round(mid(straights[1]), 3), "half_extents": [1.0, 0.75], "s_jitter": 6.0},
            {"s": round(mid(straights[3]), 3), "half_extents": [1.0, 0.75], "s_jitter": 6.0},
            {"s": round(mid(straights[4]), 3), "half_extents": [1.0, 0.75], "s_jitter": 6.0},
        ],
    }
    # default layout: slots in the right, left, right lane
    obstacles = []
    for slot, side in zip(doc["obstacle_slots"], (-1, 1, -1)):
        x, y, h = pose_at(pts, cum, slot["s"])
        off = side * LANE_WIDTH / 2.0
        obstacles.append({
            "center": [round(x - off * math.sin(h), 6), round(y + off * math.cos(h), 6)],
            "half_extents": slot["half_extents"],
            "heading": round(h, 9),
        })
    doc["obstacles"] = obstacles
    text = json.dumps(doc, indent=1)
    # one [x, y] pair per line
    text = re.sub(r"\[\s*(-?[\d.e-]+),\s*(-?[\d.e-]+)\s*\]", r"[\1, \2]", text)
    sys.stdout.write(text + "\n")
    print(f"total length {total:.2f} m, {len(pts)} points", file=sys.stderr)


if __name__ == "__main__":
    main()
