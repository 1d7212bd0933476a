"""Note-level precision / recall / F1 with optimal one-to-one matching."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching


@dataclass(frozen=True)
class MatchCriteria:
    onset_tolerance: float = 0.05
    offset_ratio: float = 0.2
    offset_min_tolerance: float = 0.05
    velocity_tolerance: float = 0.1
    use_offset: bool = False
    use_velocity: bool = False
    # "scale": tolerance x 127 after an affine fit; "note": tolerance x reference velocity
    velocity_mode: str = "scale"
    rescale_velocity: bool = True

    def __post_init__(self):
        for name in ("onset_tolerance", "offset_ratio", "offset_min_tolerance",
                     "velocity_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.velocity_mode not in ("scale", "note"):
            raise ValueError("velocity_mode must be 'scale' or 'note'")


ONSET = MatchCriteria()
ONSET_OFFSET = MatchCriteria(use_offset=True)
ONSET_OFFSET_VELOCITY = MatchCriteria(use_offset=True, use_velocity=True)
CRITERIA = {
    "onset": ONSET,
    "onset_offset": ONSET_OFFSET,
    "onset_offset_velocity": ONSET_OFFSET_VELOCITY,
}


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    f1: float
    matched: int
    n_ref: int
    n_est: int


def _arrays(notes):
    if not notes:
        return np.zeros(0), np.zeros(0), np.zeros(0, int), np.zeros(0)
    a = np.array([(n.onset, n.offset, n.pitch, n.velocity) for n in notes], dtype=np.float64)
    return a[:, 0], a[:, 1], a[:, 2].astype(int), a[:, 3]


def _fit_velocity(est_v, ref_v):
    """Least-squares ``a * est + b`` mapping onto reference velocities."""
    if len(est_v) == 0:
        return 1.0, 0.0
    if len(est_v) == 1 or np.ptp(est_v) == 0:
        return 1.0, float(np.mean(ref_v - est_v))
    A = np.stack([est_v, np.ones_like(est_v)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, ref_v, rcond=None)
    return float(a), float(b)


def valid_pairs(reference, estimate, criteria: MatchCriteria = ONSET) -> np.ndarray:
    """Boolean ``[n_ref, n_est]`` matrix of pairs allowed to match."""
    r_on, r_off, r_p, r_v = _arrays(reference)
    e_on, e_off, e_p, e_v = _arrays(estimate)
    ok = r_p[:, None] == e_p[None, :]
    # tiny slack so that tolerances hold exactly at decimal boundaries
    eps = 1e-9
    ok &= np.abs(e_on[None, :] - r_on[:, None]) <= criteria.onset_tolerance + eps
    if criteria.use_offset:
        tol = np.maximum(criteria.offset_min_tolerance, criteria.offset_ratio * (r_off - r_on))
        ok &= np.abs(e_off[None, :] - r_off[:, None]) <= tol[:, None] + eps
    if criteria.use_velocity and ok.any():
        ri, ei = np.nonzero(ok)
        if criteria.rescale_velocity:
            a, b = _fit_velocity(e_v[ei], r_v[ri])
            e_v = a * e_v + b
        if criteria.velocity_mode == "scale":
            vtol = criteria.velocity_tolerance * 127.0
        else:
            vtol = criteria.velocity_tolerance * r_v[:, None]
        ok &= np.abs(e_v[None, :] - r_v[:, None]) <= vtol + eps
    return ok


def max_matching(ok: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-cardinality bipartite matching over a boolean adjacency matrix."""
    if ok.size == 0 or not ok.any():
        return []
    match = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
    return [(r, int(e)) for r, e in enumerate(match) if e >= 0]


def _result(matched, n_ref, n_est) -> EvalResult:
    if n_ref == 0 and n_est == 0:
        return EvalResult(1.0, 1.0, 1.0, 0, 0, 0)
    p = matched / n_est if n_est else 0.0
    r = matched / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return EvalResult(p, r, f, matched, n_ref, n_est)


def match_notes(reference, estimate, criteria: MatchCriteria = ONSET) -> EvalResult:
    pairs = max_matching(valid_pairs(reference, estimate, criteria))
    return _result(len(pairs), len(reference), len(estimate))


def evaluate_all(reference, estimate, **overrides) -> dict[str, EvalResult]:
    """Scores under the onset, onset+offset and onset+offset+velocity criteria."""
    return {name: match_notes(reference, estimate, replace(c, **overrides) if overrides else c)
            for name, c in CRITERIA.items()}


def onset_f1(references, estimates) -> float:
    """Onset F1 over a collection of clips, pooling matches across clips."""
    m = r = e = 0
    for ref, est in zip(references, estimates):
        res = match_notes(ref, est, ONSET)
        m, r, e = m + res.matched, r + res.n_ref, e + res.n_est
    return _result(m, r, e).f1


CSV_HEADER = ["criterion", "precision", "recall", "f1", "matched", "ref", "est"]


def report_csv(results: dict[str, EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for name, r in results.items():
        w.writerow([name, f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}",
                    r.matched, r.n_ref, r.n_est])
    return buf.getvalue()


def report_table(results: dict[str, EvalResult]) -> str:
    lines = [f"{'criterion':<24}{'P':>8}{'R':>8}{'F1':>8}{'matched':>9}{'ref':>6}{'est':>6}"]
    for name, r in results.items():
        lines.append(f"{name:<24}{r.precision:8.4f}{r.recall:8.4f}{r.f1:8.4f}"
                     f"{r.matched:9d}{r.n_ref:6d}{r.n_est:6d}")
    return "\n".join(lines) + "\n"
