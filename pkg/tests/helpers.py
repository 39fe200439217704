"""Shared test fixtures: hand-built road segments with known geometry."""

from __future__ import annotations

import numpy as np

from lanegate.roads import RoadSegment


def straight_segment(length=200.0, width=3.5, seg_id="straight"):
    n = int(length) + 1
    x = np.linspace(0.0, length, n)
    centerline = np.column_stack([x, np.zeros(n)])
    return RoadSegment(id=seg_id, length=length, w_min=width, w_max=width,
                       k_min=0.0, k_max=0.0, centerline=centerline)


def widening_segment(length=200.0, w_min=2.78, w_max=3.44, seg_id="widening"):
    n = int(length) + 1
    x = np.linspace(0.0, length, n)
    centerline = np.column_stack([x, np.zeros(n)])
    return RoadSegment(id=seg_id, length=length, w_min=w_min, w_max=w_max,
                       k_min=0.0, k_max=0.0, centerline=centerline)
