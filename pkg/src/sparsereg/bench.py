"""Registration benchmark: per-pair errors and aggregate reports."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .icp import FAILURE_THRESHOLD_DEG, IcpConfig, icp_register
from .pose_math import RigidTransform, transform_errors
from .synth import PairSet, RegistrationPair

METHODS = ("icp", "model", "model_twice")


def thread_limit(default: int | None = None) -> int:
    """Worker count, capped by ``SPARSEREG_THREADS`` when set."""
    n = default or os.cpu_count() or 1
    env = os.environ.get("SPARSEREG_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise ValueError(f"SPARSEREG_THREADS must be an integer, got {env!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class PairResult:
    index: int
    identity: str
    rot_err: float  # degrees
    trans_err: float  # mm
    transform: RigidTransform

    @property
    def failed(self) -> bool:
        return self.rot_err > FAILURE_THRESHOLD_DEG


@dataclass
class BenchmarkReport:
    method: str
    regime: str
    results: list[PairResult] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def pair_count(self) -> int:
        return len(self.results)

    def _rot(self) -> np.ndarray:
        return np.array([r.rot_err for r in self.results])

    def _trans(self) -> np.ndarray:
        return np.array([r.trans_err for r in self.results])

    @property
    def mean_rot(self) -> float:
        return float(np.mean(self._rot()))

    @property
    def median_rot(self) -> float:
        return float(np.median(self._rot()))

    @property
    def mean_trans(self) -> float:
        return float(np.mean(self._trans()))

    @property
    def median_trans(self) -> float:
        return float(np.median(self._trans()))

    @property
    def failure_count(self) -> int:
        return int(sum(r.failed for r in self.results))

    @property
    def failure_rate(self) -> float:
        return self.failure_count / self.pair_count

    def aggregates(self) -> dict:
        """Summary fields; wall time is left out so the dict is reproducible."""
        return {
            "method": self.method,
            "regime": self.regime,
            "pairs": self.pair_count,
            "mean_rot_err_deg": self.mean_rot,
            "median_rot_err_deg": self.median_rot,
            "mean_trans_err_mm": self.mean_trans,
            "median_trans_err_mm": self.median_trans,
            "failures": self.failure_count,
            "failure_rate": self.failure_rate,
        }

    def per_pair_csv(self) -> str:
        lines = ["index,identity,rot_err_deg,trans_err_mm,failed,tx,ty,tz,qw,qx,qy,qz"]
        for r in self.results:
            t, q = r.transform.t, r.transform.q.array
            vals = [repr(float(v)) for v in (r.rot_err, r.trans_err, *t, *q)]
            lines.append(f"{r.index},{r.identity},{vals[0]},{vals[1]},{int(r.failed)},{','.join(vals[2:])}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        a = self.aggregates()
        head = f"{'method':<12} {'regime':<10} {'pairs':>6} {'θ_e mean':>9} {'θ_e med':>8} " \
               f"{'t_e mean':>9} {'t_e med':>8} {'fail':>7} {'time s':>8}"
        row = f"{a['method']:<12} {a['regime']:<10} {a['pairs']:>6} {a['mean_rot_err_deg']:>9.3f} " \
              f"{a['median_rot_err_deg']:>8.3f} {a['mean_trans_err_mm']:>9.3f} {a['median_trans_err_mm']:>8.3f} " \
              f"{a['failure_rate']:>7.3f} {self.wall_time:>8.1f}"
        return head + "\n" + row


def read_per_pair_csv(text: str) -> tuple[np.ndarray, np.ndarray]:
    """(rotation errors, translation errors) parsed back from :meth:`per_pair_csv`."""
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    return (np.array([float(r[2]) for r in rows]), np.array([float(r[3]) for r in rows]))


def registration_fn(method: str, params=None, icp_config: IcpConfig = IcpConfig()
                    ) -> Callable[[RegistrationPair], RigidTransform]:
    if method == "icp":
        return lambda p: icp_register(p.source, p.target, icp_config).transform
    if method in ("model", "model_twice"):
        if params is None:
            raise ValueError(f"method {method!r} needs trained parameters")
        from .regressor import register, register_twice

        fn = register if method == "model" else register_twice
        return lambda p: fn(params, p.source, p.target)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def run_benchmark(method: str, pairs: PairSet | Sequence[RegistrationPair], params=None,
                  icp_config: IcpConfig = IcpConfig(), threads: Optional[int] = None,
                  regime: Optional[str] = None) -> BenchmarkReport:
    """Register every pair and score it against its ground truth.

    Pairs are independent; results come back in input order whatever the
    worker count.
    """
    plist = list(pairs.pairs if isinstance(pairs, PairSet) else pairs)
    if not plist:
        raise ValueError("no pairs to evaluate")
    regime = regime or (pairs.regime if isinstance(pairs, PairSet) else "custom")
    register = registration_fn(method, params, icp_config)

    def one(k: int) -> PairResult:
        p = plist[k]
        T = register(p)
        rot, trans = transform_errors(p.gt, T)
        return PairResult(k, p.identity, rot, trans, T)

    start = time.perf_counter()
    workers = thread_limit(threads)
    if workers == 1:
        results = [one(k) for k in range(len(plist))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(plist))))
    return BenchmarkReport(method, regime, results, time.perf_counter() - start)
