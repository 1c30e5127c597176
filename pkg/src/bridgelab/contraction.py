"""Contraction-coefficient toolkit on finite spaces.

Dobrushin coefficients and weighted Kantorovich-Lipschitz operator norms are
computed exactly (finite sups over state pairs); drift and minorization
conditions are verified entrywise; a grid search over the weight-mixing
parameter realizes a contraction certificate when one exists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .divergences import PhiFunction, phi_entropy
from .errors import DomainError

KERNEL_TOL = 1e-9
DEFAULT_GRID = tuple(np.logspace(-4.0, 4.0, 50))


def _as_kernel(k, name: str = "kernel") -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.ndim != 2:
        raise DomainError(f"{name} must be a matrix")
    if np.any(k < -KERNEL_TOL) or not np.all(np.isfinite(k)):
        raise DomainError(f"{name} must have nonnegative finite entries")
    rows = k.sum(axis=1)
    if float(np.max(np.abs(rows - 1.0))) > KERNEL_TOL:
        raise DomainError(f"{name} rows must sum to one")
    return k


def _as_kernel_list(kernels, name: str) -> list[np.ndarray]:
    if isinstance(kernels, np.ndarray) and kernels.ndim == 2:
        return [_as_kernel(kernels, name)]
    if isinstance(kernels, (list, tuple)):
        return [_as_kernel(k, f"{name}[{i}]") for i, k in enumerate(kernels)]
    return [_as_kernel(kernels, name)]


def dobrushin(kernel) -> float:
    """Worst-case total variation distance between two rows of the kernel."""
    k = _as_kernel(kernel)
    worst = 0.0
    for i in range(k.shape[0]):
        diff = np.abs(k[i + 1:] - k[i]).sum(axis=1)
        if diff.size:
            worst = max(worst, 0.5 * float(diff.max()))
    return min(worst, 1.0)


@dataclass(frozen=True)
class ProbeReport:
    dobrushin_bound: float
    max_ratio: float
    samples: int
    violations: tuple[int, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def phi_contraction_probe(kernel, phi: PhiFunction, samples: int, seed: int) -> ProbeReport:
    """Sample measure pairs and test the universal contraction bound.

    For each pair the post-kernel entropy must stay below dob(K) times the
    pre-kernel entropy; the max observed ratio is a lower bound for the
    (uncomputable) phi-contraction coefficient.
    """
    k = _as_kernel(kernel)
    bound = dobrushin(k)
    rng = np.random.Generator(np.random.Philox(key=seed))
    max_ratio = 0.0
    violations: list[int] = []
    for s in range(samples):
        m1 = rng.dirichlet(np.ones(k.shape[0]))
        m2 = rng.dirichlet(np.ones(k.shape[0]))
        before = phi_entropy(phi, m1, m2)
        after = phi_entropy(phi, m1 @ k, m2 @ k)
        if not math.isfinite(before) or before <= 0:
            continue
        ratio = after / before
        max_ratio = max(max_ratio, ratio)
        if after > bound * before + 1e-12:
            violations.append(s)
    return ProbeReport(
        dobrushin_bound=bound,
        max_ratio=max_ratio,
        samples=samples,
        violations=tuple(violations),
    )


def lip_norm(kernel, source_weight, target_weight) -> float:
    """Exact Kantorovich-Lipschitz norm of a kernel between weighted spaces.

    Supremum over state pairs of the target-weighted total variation between
    rows divided by the source weight sum g(x1) + g(x2).
    """
    k = _as_kernel(kernel)
    g = np.asarray(source_weight, dtype=float).reshape(-1)
    h = np.asarray(target_weight, dtype=float).reshape(-1)
    if g.size != k.shape[0] or h.size != k.shape[1]:
        raise DomainError("weight dimensions do not match the kernel")
    if np.any(g <= 0) or np.any(h <= 0):
        raise DomainError("weights must be strictly positive")
    worst = 0.0
    for i in range(k.shape[0]):
        for j in range(i + 1, k.shape[0]):
            num = float(np.sum(h * np.abs(k[i] - k[j])))
            worst = max(worst, num / (g[i] + g[j]))
    return worst


@dataclass(frozen=True)
class WeightPair:
    """Positive weights on the two spaces plus the mixing level a."""

    g: np.ndarray
    h: np.ndarray
    a: float

    def __post_init__(self) -> None:
        g = np.asarray(self.g, dtype=float).reshape(-1)
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if np.any(g <= 0) or np.any(h <= 0):
            raise DomainError("weights must be strictly positive")
        if not self.a > 0:
            raise DomainError("mixing level a must be positive")
        g.flags.writeable = False
        h.flags.writeable = False
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)

    @property
    def g_a(self) -> np.ndarray:
        return 0.5 + self.a * self.g

    @property
    def h_a(self) -> np.ndarray:
        return 0.5 + self.a * self.h


@dataclass(frozen=True)
class DriftReport:
    passed: bool
    worst_slack: float
    worst_state: tuple[str, int]
    rescaled_passed: bool
    rescaled_slack: float


def drift_check(kernel_k, kernel_l, g, h, epsilon: float, c: float) -> DriftReport:
    """Verify the coupled drift inequalities K(h) <= eps g + c, L(g) <= eps h + c."""
    if not 0.0 < epsilon < 1.0:
        raise DomainError("epsilon must lie in (0, 1)")
    if not c > 0:
        raise DomainError("c must be positive")
    k = _as_kernel(kernel_k, "kernel_k")
    l = _as_kernel(kernel_l, "kernel_l")
    g = np.asarray(g, dtype=float).reshape(-1)
    h = np.asarray(h, dtype=float).reshape(-1)
    slack_k = k @ h - (epsilon * g + c)
    slack_l = l @ g - (epsilon * h + c)
    worst = max(float(slack_k.max()), float(slack_l.max()))
    if float(slack_k.max()) >= float(slack_l.max()):
        state = ("K", int(np.argmax(slack_k)))
    else:
        state = ("L", int(np.argmax(slack_l)))
    # Rescaled form: with g = 1/2 + (eps/2c) g, h likewise, the constant drops to 1/2.
    g_bar = 0.5 + (epsilon / (2.0 * c)) * g
    h_bar = 0.5 + (epsilon / (2.0 * c)) * h
    rescaled = max(
        float((k @ h_bar - (epsilon * g_bar + 0.5)).max()),
        float((l @ g_bar - (epsilon * h_bar + 0.5)).max()),
    )
    return DriftReport(
        passed=worst <= 1e-12,
        worst_slack=worst,
        worst_state=state,
        rescaled_passed=rescaled <= 1e-12,
        rescaled_slack=rescaled,
    )


@dataclass(frozen=True)
class MinorizationRow:
    level: float
    iota_k: float
    iota_l: float
    iota: float
    skipped: bool
    note: str = ""


def minorization_table(kernel_k, kernel_l, g, h, levels) -> tuple[MinorizationRow, ...]:
    """Largest sublevel-set minorization mass per level, by entrywise minima.

    For each level l the mass is the total of the entrywise row minimum over
    sources in {g <= l}, restricted to targets in the companion sublevel set;
    this is the largest iota such that every such row dominates iota times a
    common probability measure on the set.
    """
    k = _as_kernel(kernel_k, "kernel_k")
    l_mat = _as_kernel(kernel_l, "kernel_l")
    g = np.asarray(g, dtype=float).reshape(-1)
    h = np.asarray(h, dtype=float).reshape(-1)
    rows: list[MinorizationRow] = []
    for level in levels:
        src_k = g <= level
        tgt_k = h <= level
        src_l = h <= level
        tgt_l = g <= level
        if not (src_k.any() and tgt_k.any() and src_l.any() and tgt_l.any()):
            rows.append(MinorizationRow(
                level=float(level), iota_k=0.0, iota_l=0.0, iota=0.0,
                skipped=True, note="empty sublevel set",
            ))
            continue
        iota_k = float(k[np.ix_(src_k, tgt_k)].min(axis=0).sum())
        iota_l = float(l_mat[np.ix_(src_l, tgt_l)].min(axis=0).sum())
        rows.append(MinorizationRow(
            level=float(level), iota_k=iota_k, iota_l=iota_l,
            iota=min(iota_k, iota_l), skipped=False,
        ))
    return tuple(rows)


@dataclass(frozen=True)
class ContractionCertificate:
    a: float
    rho: float
    epsilon: float
    c: float
    iota_table: tuple[MinorizationRow, ...]

    @property
    def product_bound(self) -> float:
        return self.rho ** 2

    def to_json(self) -> str:
        return json.dumps({
            "a": self.a,
            "rho": self.rho,
            "epsilon": self.epsilon,
            "c": self.c,
            "iota_table": [
                {"level": r.level, "iota_k": r.iota_k, "iota_l": r.iota_l,
                 "iota": r.iota, "skipped": r.skipped}
                for r in self.iota_table
            ],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "ContractionCertificate":
        data = json.loads(payload)
        table = tuple(
            MinorizationRow(level=r["level"], iota_k=r["iota_k"], iota_l=r["iota_l"],
                            iota=r["iota"], skipped=r["skipped"])
            for r in data["iota_table"]
        )
        return cls(a=data["a"], rho=data["rho"], epsilon=data["epsilon"],
                   c=data["c"], iota_table=table)


@dataclass(frozen=True)
class SearchFailure:
    best_a: float
    best_rho: float
    reason: str


def _drift_constants(kernels_k, kernels_l, g, h, epsilon: float = 0.5):
    """Verified-by-construction drift constants for the given weight vectors."""
    worst = 0.0
    for k in kernels_k:
        worst = max(worst, float((k @ h - epsilon * g).max()))
    for l_mat in kernels_l:
        worst = max(worst, float((l_mat @ g - epsilon * h).max()))
    return epsilon, max(worst, 1e-12)


def lyapunov_search(kernel_k, kernel_l, g, h, grid=None,
                    levels=None) -> ContractionCertificate | SearchFailure:
    """Scan mixing levels for a weighted-norm contraction certificate.

    ``kernel_k`` / ``kernel_l`` may be single kernels or sequences; with
    sequences the certificate bounds every pair, which is what time-varying
    iterations need.  Returns the best (a, rho) with rho < 1, ties broken
    toward smaller a, or a :class:`SearchFailure` when no grid point contracts.
    """
    ks = _as_kernel_list(kernel_k, "kernel_k")
    ls = _as_kernel_list(kernel_l, "kernel_l")
    g = np.asarray(g, dtype=float).reshape(-1)
    h = np.asarray(h, dtype=float).reshape(-1)
    grid = DEFAULT_GRID if grid is None else tuple(float(a) for a in grid)
    best_a = math.nan
    best_rho = math.inf
    for a in grid:
        pair = WeightPair(g=g, h=h, a=a)
        rho = 0.0
        for k in ks:
            rho = max(rho, lip_norm(k, pair.g_a, pair.h_a))
        for l_mat in ls:
            rho = max(rho, lip_norm(l_mat, pair.h_a, pair.g_a))
        if rho < best_rho:
            best_rho, best_a = rho, a
    if not best_rho < 1.0:
        return SearchFailure(best_a=best_a, best_rho=best_rho,
                             reason="no grid point produced rho < 1")
    epsilon, c = _drift_constants(ks, ls, g, h)
    if levels is None:
        combined = np.concatenate([g, h])
        levels = np.quantile(combined, [0.5, 0.75, 0.9, 1.0])
    table = minorization_table(ks[0], ls[0], g, h, levels)
    return ContractionCertificate(
        a=float(best_a), rho=float(best_rho), epsilon=epsilon, c=c, iota_table=table,
    )


def reverify(cert: ContractionCertificate, kernel_k, kernel_l, g, h) -> bool:
    """Re-check every inequality a certificate asserts."""
    ks = _as_kernel_list(kernel_k, "kernel_k")
    ls = _as_kernel_list(kernel_l, "kernel_l")
    pair = WeightPair(g=np.asarray(g, float), h=np.asarray(h, float), a=cert.a)
    for k in ks:
        if lip_norm(k, pair.g_a, pair.h_a) > cert.rho + 1e-12:
            return False
    for l_mat in ls:
        if lip_norm(l_mat, pair.h_a, pair.g_a) > cert.rho + 1e-12:
            return False
    report = drift_check(ks[0], ls[0], pair.g, pair.h, cert.epsilon, cert.c)
    return report.passed
