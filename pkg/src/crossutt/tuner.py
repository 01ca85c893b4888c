"""Seeded random search over fusion / rescoring hyperparameters."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import InputError, SearchError

log = logging.getLogger(__name__)

FUSION_RANGES = {"alpha": (0.0, 1.0), "beta_bonus": (-0.1, 0.8), "cutoff": (-12.0, -4.0)}
RESCORE_RANGES = {"w_first": (0.5, 1.5), "w_tlm": (0.0, 2.0), "length_penalty": (-1.0, 1.0)}


@dataclass
class SearchSpace:
    intervals: Dict[str, Tuple[float, float]]
    trials: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise InputError("trials must be >= 1")
        for name, (lo, hi) in self.intervals.items():
            if lo > hi:
                raise InputError(f"interval for {name} is empty: [{lo}, {hi}]")

    def sample(self) -> List[Dict[str, float]]:
        """All trial parameter sets, drawn up front so order never depends on execution."""
        rng = np.random.default_rng(self.seed)
        names = list(self.intervals)
        lo = np.array([self.intervals[n][0] for n in names])
        hi = np.array([self.intervals[n][1] for n in names])
        draws = rng.uniform(lo, hi, size=(self.trials, len(names)))
        return [dict(zip(names, map(float, row))) for row in draws]


@dataclass
class Trial:
    index: int
    params: Dict[str, float]
    wer: Optional[float]
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_json(self) -> str:
        d = {"trial": self.index, "params": self.params, "wer": self.wer}
        if self.error:
            d["error"] = self.error
        return json.dumps(d)


@dataclass
class SearchResult:
    best_params: Dict[str, float]
    best_wer: float
    trials: List[Trial] = field(default_factory=list)

    def best_so_far(self) -> List[float]:
        out, cur = [], float("inf")
        for t in self.trials:
            if not t.failed:
                cur = min(cur, t.wer)
            out.append(cur)
        return out


def _run(objective, index, params) -> Trial:
    try:
        return Trial(index, params, float(objective(params)))
    except Exception as exc:  # a failing trial must not stop the search
        log.warning("trial %d failed: %s", index, exc)
        return Trial(index, params, None, f"{type(exc).__name__}: {exc}")


def random_search(space: SearchSpace, objective: Callable[[Dict[str, float]], float],
                  workers: int = 1) -> SearchResult:
    """Minimise ``objective`` over uniformly sampled parameter sets.

    The earliest trial wins ties. The returned log is in trial order.
    """
    samples = space.sample()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trials = list(pool.map(lambda ip: _run(objective, *ip), enumerate(samples)))
    else:
        trials = [_run(objective, i, s) for i, s in enumerate(samples)]
    ok = [t for t in trials if not t.failed]
    if not ok:
        raise SearchError(f"all {len(trials)} trials failed")
    best = min(ok, key=lambda t: (t.wer, t.index))
    return SearchResult(best.params, best.wer, trials)
