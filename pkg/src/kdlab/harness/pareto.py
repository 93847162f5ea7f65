"""Pareto-frontier extraction for (cost, quality) points."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

__all__ = ["ParetoPoint", "pareto_front"]


@dataclass
class ParetoPoint:
    label: str
    cost: float
    quality: float
    dominated: bool = field(default=False, compare=False)


def pareto_front(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated subset, sorted by cost.

    A point is dominated when another has cost <= and quality >= with at
    least one strict inequality; exact ties on both axes all survive. The
    `dominated` flag is set on every input point. Single cost-ascending,
    quality-descending sweep, O(n log n).
    """
    if not points:
        raise ValueError("no points to extract a frontier from")
    for p in points:
        if not (math.isfinite(p.cost) and math.isfinite(p.quality)):
            raise ValueError(f"non-finite point {p.label!r}")

    order = sorted(range(len(points)), key=lambda i: (points[i].cost, -points[i].quality))
    best_quality = -math.inf
    best_cost = math.nan
    front: list[ParetoPoint] = []
    for i in order:
        p = points[i]
        if p.quality > best_quality:
            best_quality, best_cost = p.quality, p.cost
            p.dominated = False
            front.append(p)
        elif p.quality == best_quality and p.cost == best_cost:
            p.dominated = False       # exact tie with the current frontier point
            front.append(p)
        else:
            p.dominated = True
    return front
