"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    @property
    def skip_fraction(self) -> float:
        total = sum(self.checked.values()) + sum(self.skipped.values())
        return sum(self.skipped.values()) / total if total else 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """Max absolute discrepancy scaled by the larger of the two gradient maxima.

    ``scale`` raises the denominator, e.g. to the magnitude of a whole
    parameter group when only a sample of it was compared. Both gradients
    identically zero gives 0.
    """
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(scale, float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return diff
    return diff / scale


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                     indices=None) -> np.ndarray:
    """(f(x+eps) - f(x-eps)) / 2eps, perturbing ``x`` in place.

    With ``indices`` (flat positions) only those entries are estimated; the
    rest of the returned array is zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def _probe(f, x, idx, offsets):
    """f at x + offset for each flat position in ``idx``; shape (len(idx), len(offsets))."""
    flat = x.reshape(-1)
    out = np.empty((len(idx), len(offsets)))
    for j, i in enumerate(idx):
        orig = flat[i]
        for k, d in enumerate(offsets):
            flat[i] = orig + d
            out[j, k] = f()
        flat[i] = orig
    return out


def _agree(a, b, tol, f0, h):
    """Slopes equal to ``tol`` relative, beyond the rounding floor of a step ``h``."""
    floor = 1e-13 * max(abs(f0), 1.0) / h
    return np.abs(a - b) <= tol * np.maximum(np.abs(a), np.abs(b)) + floor


def grad_check(f: Callable[[], float], arrays: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], eps: float = 1e-5,
               tolerance: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None,
               kink_tol: float | None = None, scale_floor: float = 0.0) -> GradCheckReport:
    """Compare ``analytic[name]`` against finite differences of ``f`` for each array.

    ``f`` must read the arrays in ``arrays`` by reference and be deterministic.
    When ``max_entries`` is set, a random subset of that many entries per
    array is checked (chosen with ``rng``); its discrepancy is scaled by the
    largest analytic entry of the whole array.

    With ``kink_tol`` set, an entry whose forward and backward slopes differ
    by more than ``kink_tol`` times the larger of the two (plus the rounding
    floor) is treated as straddling a ReLU kink at this ``eps`` and left out.
    The screen only looks at ``f``, never at ``analytic``, so it cannot mask
    a wrong backward pass; skipped counts are kept in the report.

    ``eps`` may be a decreasing sequence of steps when ``kink_tol`` is set.
    An entry is then accepted at the first step whose one-sided slopes agree
    and whose central difference also agrees with the one at the next step;
    kinks on both sides can cancel in the slope comparison but still make
    the estimate depend on the step. A bias shifting thousands of
    pre-activations crosses kinks at 1e-5 yet is clean at 1e-6.

    ``scale_floor`` bounds the relative-error denominator from below, for
    arrays whose exact gradient is zero (a bias feeding batch norm).
    """
    for name, a in arrays.items():
        if a.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 arrays, {name} is {a.dtype}")
    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    f0 = f() if kink_tol is not None else None
    for name, x in arrays.items():
        if max_entries is not None and x.size > max_entries:
            idx = np.sort(rng.choice(x.size, size=max_entries, replace=False))
        else:
            idx = np.arange(x.size)
        full = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        ana = full[idx]
        if kink_tol is None:
            num = numeric_gradient(f, x, eps, idx).reshape(-1)[idx]
            keep = np.ones(len(idx), dtype=bool)
        else:
            steps = np.atleast_1d(eps)
            num = np.zeros(len(idx))
            keep = np.zeros(len(idx), dtype=bool)
            todo = np.arange(len(idx))
            prev = None   # (positions, central, one-sided ok) at the previous step
            for k, h in enumerate(steps):
                vals = _probe(f, x, idx[todo], (h, -h))
                fwd = (vals[:, 0] - f0) / h
                bwd = (f0 - vals[:, 1]) / h
                central = 0.5 * (fwd + bwd)
                sided = _agree(fwd, bwd, kink_tol, f0, h)
                if len(steps) == 1:
                    num[todo[sided]] = central[sided]
                    keep[todo[sided]] = True
                    break
                if prev is not None:
                    pos, c_prev, s_prev = prev
                    ok = s_prev & _agree(c_prev, central, kink_tol, f0, h)
                    num[pos[ok]] = c_prev[ok]
                    keep[pos[ok]] = True
                    still = ~ok
                    todo, central, sided = pos[still], central[still], sided[still]
                    if not len(todo):
                        break
                prev = (todo, central, sided)
        report.checked[name] = int(keep.sum())
        report.skipped[name] = int((~keep).sum())
        # a sample of near-zero entries would otherwise be judged on rounding noise
        report.errors[name] = relative_error(
            ana[keep], num[keep], max(scale_floor, float(np.max(np.abs(full), initial=0.0))))
    return report
