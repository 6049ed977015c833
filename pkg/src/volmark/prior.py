"""Distance-ratio statistics over the landmark graph and candidate filtering.

Edge lengths themselves vary with subject scale, so the prior is built on
ratios: either the quotient of two edge lengths, or the normalized
difference (a - b) / (a + b) for a mirrored edge pair. Each ratio is fitted
with a Gaussian over the training sets; a candidate combination is scored
by summing sigma * exp((r - mu)^2 / (2 sigma^2)) over the ratio list, so
deviations from the fitted means blow up exponentially while a perfect
match costs only sum(sigma). The lowest-penalty combination wins.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Detection
from .landmarks import (
    CHIN,
    LEFT_EYE,
    LANDMARK_NAMES,
    MID_EYEBROW,
    NOSE,
    NUM_LANDMARKS,
    RIGHT_EYE,
)

SIGMA_FLOOR = 1e-3


class DegenerateGeometryError(ValueError):
    """A ratio is undefined for the given points (zero or non-finite)."""


class DetectionFailureError(RuntimeError):
    """A landmark class ended up with no candidate boxes."""


def _distance(points: np.ndarray, edge: tuple[int, int]) -> float:
    d = points[edge[0]] - points[edge[1]]
    return float(math.sqrt(float(np.dot(d, d))))


@dataclass(frozen=True)
class RatioDef:
    """One fitted quantity: "asymmetric" is Dist(a)/Dist(b); "symmetric" is
    (Dist(a) - Dist(b)) / (Dist(a) + Dist(b)) for a mirrored edge pair."""

    kind: str
    edge_a: tuple[int, int]
    edge_b: tuple[int, int]

    def __post_init__(self):
        if self.kind not in ("asymmetric", "symmetric"):
            raise ValueError(f"unknown ratio kind {self.kind!r}")
        for edge in (self.edge_a, self.edge_b):
            i, j = edge
            if i == j or not (0 <= i < NUM_LANDMARKS and 0 <= j < NUM_LANDMARKS):
                raise ValueError(f"bad edge {edge}")

    def value(self, points: np.ndarray) -> float:
        da = _distance(points, self.edge_a)
        db = _distance(points, self.edge_b)
        if self.kind == "asymmetric":
            if db <= 0.0:
                raise DegenerateGeometryError(f"zero denominator edge {self.edge_b}")
            r = da / db
        else:
            if da + db <= 0.0:
                raise DegenerateGeometryError(f"coincident edge pair {self.edge_a}/{self.edge_b}")
            r = (da - db) / (da + db)
        if not math.isfinite(r):
            raise DegenerateGeometryError(f"non-finite ratio for {self}")
        return r

    def to_json(self) -> dict:
        return {"kind": self.kind, "a": list(self.edge_a), "b": list(self.edge_b)}

    @classmethod
    def from_json(cls, obj: dict) -> "RatioDef":
        return cls(obj["kind"], tuple(obj["a"]), tuple(obj["b"]))


def default_edges() -> tuple[tuple[int, int], ...]:
    """Complete graph over the five landmarks (10 edges)."""
    return tuple(itertools.combinations(range(NUM_LANDMARKS), 2))


def default_ratios() -> tuple[RatioDef, ...]:
    """Three mirrored-pair ratios plus three edge quotients.

    The mirrored pairs compare the left- and right-eye distances to the
    nose, chin, and eyebrow; the quotients relate the vertical face edges
    to the nose-chin edge.
    """
    return (
        RatioDef("symmetric", (LEFT_EYE, NOSE), (RIGHT_EYE, NOSE)),
        RatioDef("symmetric", (LEFT_EYE, CHIN), (RIGHT_EYE, CHIN)),
        RatioDef("symmetric", (LEFT_EYE, MID_EYEBROW), (RIGHT_EYE, MID_EYEBROW)),
        RatioDef("asymmetric", (MID_EYEBROW, NOSE), (NOSE, CHIN)),
        RatioDef("asymmetric", (LEFT_EYE, RIGHT_EYE), (NOSE, CHIN)),
        RatioDef("asymmetric", (MID_EYEBROW, CHIN), (NOSE, CHIN)),
    )


@dataclass
class LandmarkGraph:
    """Node set (the five landmarks), edge list, and the fitted ratio list."""

    edges: tuple[tuple[int, int], ...] = field(default_factory=default_edges)
    ratios: tuple[RatioDef, ...] = field(default_factory=default_ratios)
    nodes: tuple[str, ...] = LANDMARK_NAMES

    def __post_init__(self):
        self.edges = tuple(tuple(e) for e in self.edges)
        self.ratios = tuple(self.ratios)
        edge_set = {frozenset(e) for e in self.edges}
        for i, j in self.edges:
            if i == j or not (0 <= i < NUM_LANDMARKS and 0 <= j < NUM_LANDMARKS):
                raise ValueError(f"bad edge ({i}, {j})")
        for ratio in self.ratios:
            for edge in (ratio.edge_a, ratio.edge_b):
                if frozenset(edge) not in edge_set:
                    raise ValueError(f"ratio uses edge {edge} missing from the graph")


@dataclass
class PriorModel:
    """Gaussian (mu, sigma) per ratio, with the graph it was fitted on."""

    graph: LandmarkGraph
    mu: np.ndarray
    sigma: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        n = len(self.graph.ratios)
        if self.mu.shape != (n,) or self.sigma.shape != (n,):
            raise ValueError("mu/sigma length must match the graph's ratio list")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")

    def to_json(self) -> str:
        doc = {
            "graph": {
                "edges": [list(e) for e in self.graph.edges],
                "ratios": [r.to_json() for r in self.graph.ratios],
            },
            "params": [
                {"mu": float(m), "sigma": float(s)}
                for m, s in zip(self.mu, self.sigma)
            ],
            "sample_count": self.sample_count,
        }
        return json.dumps(doc, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "PriorModel":
        doc = json.loads(text)
        graph = LandmarkGraph(
            edges=tuple(tuple(e) for e in doc["graph"]["edges"]),
            ratios=tuple(RatioDef.from_json(r) for r in doc["graph"]["ratios"]),
        )
        mu = np.array([p["mu"] for p in doc["params"]], dtype=np.float64)
        sigma = np.array([p["sigma"] for p in doc["params"]], dtype=np.float64)
        return cls(graph, mu, sigma, int(doc["sample_count"]))

    @classmethod
    def load(cls, path) -> "PriorModel":
        return cls.from_json(Path(path).read_text())


def fit_prior(training_landmarks: Sequence[np.ndarray], graph: LandmarkGraph | None = None) -> PriorModel:
    """Fit per-ratio Gaussians (sample mean, unbiased std) over training sets.

    Sigmas are floored at 1e-3 so a zero-variance ratio cannot blow up the
    penalty. Requires at least two training sets; degenerate geometry in
    any set is rejected.
    """
    if graph is None:
        graph = LandmarkGraph()
    sets = [np.asarray(p, dtype=np.float64) for p in training_landmarks]
    if len(sets) < 2:
        raise ValueError(f"need at least 2 training sets, got {len(sets)}")
    for idx, points in enumerate(sets):
        if points.shape != (NUM_LANDMARKS, 3) or not np.all(np.isfinite(points)):
            raise ValueError(f"training set {idx} is not a finite ({NUM_LANDMARKS}, 3) array")
    values = np.array(
        [[ratio.value(points) for ratio in graph.ratios] for points in sets],
        dtype=np.float64,
    )
    mu = values.mean(axis=0)
    sigma = np.maximum(values.std(axis=0, ddof=1), SIGMA_FLOOR)
    return PriorModel(graph, mu, sigma, len(sets))


def penalty(points: np.ndarray, prior: PriorModel) -> float:
    """Sum of sigma * exp((r - mu)^2 / (2 sigma^2)) over the prior's ratios.

    Always >= sum(sigma), with equality exactly when every ratio sits at
    its fitted mean.
    """
    points = np.asarray(points, dtype=np.float64)
    total = 0.0
    for ratio, mu, sigma in zip(prior.graph.ratios, prior.mu, prior.sigma):
        r = ratio.value(points)
        z = (r - mu) / sigma
        # cap the exponent: beyond ~1e304 the ordering of garbage
        # combinations is irrelevant and exp() would overflow
        total += sigma * math.exp(min(0.5 * z * z, 700.0))
    return total


@dataclass
class CandidateSet:
    """Top-k detections per landmark class, score-ordered.

    Classes that produced fewer than k candidates are padded by repeating
    their best one, so every class contributes exactly k entries.
    """

    per_class: tuple[tuple[Detection, ...], ...]
    k: int = 2

    @classmethod
    def build(cls, detections_per_class: Sequence[Sequence[Detection]], k: int = 2) -> "CandidateSet":
        padded = []
        for class_idx, dets in enumerate(detections_per_class):
            dets = sorted(dets, key=lambda d: (-d.score, d.anchor_index))
            if not dets:
                raise DetectionFailureError(
                    f"no candidates for class {LANDMARK_NAMES[class_idx]!r}"
                )
            while len(dets) < k:
                dets.append(dets[0])
            padded.append(tuple(dets[:k]))
        if len(padded) != NUM_LANDMARKS:
            raise ValueError(f"expected {NUM_LANDMARKS} classes, got {len(padded)}")
        return cls(tuple(padded), k)


def select_combination(cands: CandidateSet, prior: PriorModel) -> list[Detection]:
    """Pick one candidate per class minimizing the combination penalty.

    All k^5 combinations are scored; ties go to the higher total
    classification score, then to the lexicographically smaller candidate
    index tuple, so the result does not depend on enumeration order.
    """
    best_key = None
    best_combo = None
    centers = [
        np.array([[d.box.cx, d.box.cy, d.box.cz] for d in class_dets], dtype=np.float64)
        for class_dets in cands.per_class
    ]
    for combo in itertools.product(range(cands.k), repeat=NUM_LANDMARKS):
        points = np.array([centers[c][i] for c, i in enumerate(combo)])
        cost = penalty(points, prior)
        total_score = sum(cands.per_class[c][i].score for c, i in enumerate(combo))
        key = (cost, -total_score, combo)
        if best_key is None or key < best_key:
            best_key = key
            best_combo = combo
    return [cands.per_class[c][i] for c, i in enumerate(best_combo)]
