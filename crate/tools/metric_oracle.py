#!/usr/bin/env python3
"""Hand oracle for the metric arithmetic.

Writes crates/core/tests/fixtures/metric_oracle.json. The acceptance suite
recomputes every case with the Rust implementation and compares.

    python3 tools/metric_oracle.py
"""

import json
import math
import random
from pathlib import Path

UM_PER_PX = 13.6
UM_PER_ROW = 2.6
UM_PER_COL = 5.3
UM_PER_SLICE = 13.6

WAIT_PHASES = {"AWAIT_ILM_GOAL", "AWAIT_SUBRETINAL_GOAL"}


def nav_2d(goal, tip):
    return math.sqrt((goal[0] - tip[0]) ** 2 + (goal[1] - tip[1]) ** 2) * UM_PER_PX


def depth(goal_row, tip_row):
    return abs(goal_row - tip_row) * UM_PER_ROW


def insertion(goal, gt_slice, landed, actual_slice):
    dc = (goal[0] - landed[0]) * UM_PER_COL
    dr = (goal[1] - landed[1]) * UM_PER_ROW
    ds = (gt_slice - actual_slice) * UM_PER_SLICE
    return math.sqrt(dc * dc + dr * dr + ds * ds)


def insertion_distance(goal, tip):
    dc = (goal[0] - tip[0]) * UM_PER_COL
    dr = (goal[1] - tip[1]) * UM_PER_ROW
    return math.sqrt(dc * dc + dr * dr)


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def line_distance(p, origin, direction):
    n = math.sqrt(dot(direction, direction))
    u = [d / n for d in direction]
    rel = [a - b for a, b in zip(p, origin)]
    t = dot(rel, u)
    perp = [r - t * k for r, k in zip(rel, u)]
    return math.sqrt(dot(perp, perp))


def ade_fde(trace, origin, direction):
    if not trace:
        return 0.0, 0.0
    d = [line_distance(p, origin, direction) for p in trace]
    return sum(d) / len(d), d[-1]


def durations(spans):
    per = {}
    total = 0.0
    for phase, start, end in spans:
        per[phase] = per.get(phase, 0.0) + (end - start)
        if phase not in WAIT_PHASES:
            total += end - start
    return per, total


def main():
    rng = random.Random(7)
    cases = {"nav_2d": [], "depth": [], "nav_l2": [], "insertion": [], "insertion_distance": [], "ade_fde": [], "durations": []}

    for goal, tip in [((100.0, 100.0), (100.0, 100.0)), ((102.0, 100.0), (100.0, 100.0))]:
        cases["nav_2d"].append({"goal": goal, "tip": tip, "um": nav_2d(goal, tip)})
    for _ in range(20):
        goal = (rng.uniform(0, 640), rng.uniform(0, 480))
        tip = (goal[0] + rng.uniform(-3, 3), goal[1] + rng.uniform(-3, 3))
        cases["nav_2d"].append({"goal": goal, "tip": tip, "um": nav_2d(goal, tip)})

    for g, t in [(500.0, 500.0), (505.0, 500.0)]:
        cases["depth"].append({"goal_row": g, "tip_row": t, "um": depth(g, t)})
    for _ in range(20):
        g, t = rng.uniform(300, 900), rng.uniform(300, 900)
        cases["depth"].append({"goal_row": g, "tip_row": t, "um": depth(g, t)})

    for n in cases["nav_2d"][2:12]:
        d = rng.uniform(0, 20)
        cases["nav_l2"].append({"nav_2d_um": n["um"], "depth_um": d, "um": math.sqrt(n["um"] ** 2 + d * d)})

    fixed = [((300.0, 640.0), 16, (300.0, 640.0), 16), ((300.0, 644.0), 16, (300.0, 640.0), 17)]
    for goal, gs, landed, acs in fixed:
        cases["insertion"].append({"goal": goal, "gt_slice": gs, "landed": landed, "actual_slice": acs, "um": insertion(goal, gs, landed, acs)})
    for _ in range(20):
        goal = (rng.uniform(0, 512), rng.uniform(0, 1024))
        landed = (goal[0] + rng.uniform(-5, 5), goal[1] + rng.uniform(-8, 8))
        gs, acs = 16, 16 + rng.randint(-2, 2)
        cases["insertion"].append({"goal": goal, "gt_slice": gs, "landed": landed, "actual_slice": acs, "um": insertion(goal, gs, landed, acs)})

    for goal, tip in [((256.0, 640.0), (256.0, 600.0)), ((266.0, 620.0), (256.0, 600.0))]:
        cases["insertion_distance"].append({"goal": goal, "tip": tip, "um": insertion_distance(goal, tip)})
    for _ in range(20):
        tip = (rng.uniform(0, 512), rng.uniform(0, 1024))
        goal = (tip[0] + rng.uniform(-60, 60), tip[1] + rng.uniform(0, 80))
        cases["insertion_distance"].append({"goal": goal, "tip": tip, "um": insertion_distance(goal, tip)})

    origin = [10.0, -20.0, 5.0]
    direction = [0.6, 0.0, -0.8]
    on_line = [[o + s * d for o, d in zip(origin, direction)] for s in (0.0, 20.0, 40.0, 60.0)]
    lateral = [0.0, 3.5, 0.0]
    shifted = [[p + q for p, q in zip(pt, lateral)] for pt in on_line]
    traces = [[], on_line, shifted]
    for _ in range(5):
        o = [rng.uniform(-100, 100) for _ in range(3)]
        d = [rng.uniform(-1, 1) for _ in range(3)]
        pts = [[rng.uniform(-200, 200) for _ in range(3)] for _ in range(rng.randint(1, 12))]
        cases["ade_fde"].append({"trace": pts, "origin": o, "direction": d, "ade": ade_fde(pts, o, d)[0], "fde": ade_fde(pts, o, d)[1]})
    for tr in traces:
        a, f = ade_fde(tr, origin, direction)
        cases["ade_fde"].insert(0, {"trace": tr, "origin": origin, "direction": direction, "ade": a, "fde": f})

    phase_seq = ["AWAIT_ILM_GOAL", "ALIGN_XY", "LOWER_Z", "HOLD", "ALIGN_XY", "LOWER_Z", "AWAIT_SUBRETINAL_GOAL", "INSERT", "DONE"]
    for lengths in ([1.0, 2.5, 0.75, 0.25, 0.5, 1.25, 3.0, 1.5, 0.0], [rng.uniform(0, 5) for _ in phase_seq]):
        t = 0.0
        spans = []
        for p, l in zip(phase_seq, lengths):
            spans.append((p, t, t + l))
            t += l
        per, total = durations(spans)
        cases["durations"].append({"spans": spans, "per_phase": per, "total": total})
    cases["durations"].append({"spans": [], "per_phase": {}, "total": 0.0})

    out = Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/metric_oracle.json"
    out.write_text(json.dumps(cases, indent=1) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
