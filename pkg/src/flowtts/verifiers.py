"""Analytic reward functions and the rank-based verifier ensemble.

Three verifiers judge a candidate restoration from different angles:

  fid     data fidelity; with ground truth -|x - truth|^2, in blind mode
          the observation-consistency form -|A x - y|^2 / eta^2
  like    exact log-density under the anisotropic posterior oracle
  smooth  negative total variation

Raw scores live on incomparable scales, so candidates are combined by
ordinal rank per verifier (rank 1 = best, ties averaged) and the ensemble
is minus the mean rank, making larger values better.  Ranks are invariant
under any strictly monotone rescaling of a single verifier's raw scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .tasks import RestorationInstance

VERIFIER_NAMES = ("fid", "like", "smooth")


@dataclass(frozen=True)
class VerifierConfig:
    verifiers: tuple = VERIFIER_NAMES
    blind: bool = False

    def __post_init__(self):
        object.__setattr__(self, "verifiers", tuple(self.verifiers))
        if not self.verifiers:
            raise ValueError("need at least one verifier")
        unknown = set(self.verifiers) - set(VERIFIER_NAMES)
        if unknown:
            raise ValueError(f"unknown verifiers {sorted(unknown)}")

    def to_json(self) -> dict:
        return {"verifiers": list(self.verifiers), "blind": self.blind}

    @classmethod
    def from_json(cls, obj: dict) -> "VerifierConfig":
        return cls(verifiers=tuple(obj.get("verifiers", VERIFIER_NAMES)),
                   blind=bool(obj.get("blind", False)))


@dataclass
class RewardReport:
    """Per-candidate raw scores, ordinal ranks, and ensemble value."""

    candidate_id: int
    scores: dict
    ranks: dict
    ensemble: float


def v_fidelity(x0, instance: RestorationInstance, blind: bool = False) -> float:
    """Fidelity reward.  Oracle form -|x0 - truth|^2; blind form scores
    observation consistency -|A x0 - y|^2 / eta^2 (inference never sees
    ground truth)."""
    x0 = np.asarray(x0, dtype=np.float64)
    if blind:
        if x0.shape != (instance.op.dim,):
            raise ValueError("candidate dimension mismatch")
        resid = instance.op.matrix @ x0 - instance.observation
        return float(-(resid @ resid) / instance.op.noise_std ** 2)
    if x0.shape != instance.truth.shape:
        raise ValueError("candidate dimension mismatch")
    diff = x0 - instance.truth
    return float(-(diff @ diff))


def v_likelihood(x0, instance: RestorationInstance) -> float:
    """Realism proxy: exact log-density under the anisotropic posterior."""
    return float(instance.exact.log_density(np.asarray(x0, dtype=np.float64)))


def v_smooth(x0) -> float:
    """Negative total variation -sum |x[i+1] - x[i]|."""
    x0 = np.asarray(x0, dtype=np.float64)
    return float(-np.sum(np.abs(np.diff(x0))))


def raw_scores(x0, instance: RestorationInstance, cfg: VerifierConfig) -> dict:
    out = {}
    for name in cfg.verifiers:
        if name == "fid":
            out[name] = v_fidelity(x0, instance, blind=cfg.blind)
        elif name == "like":
            out[name] = v_likelihood(x0, instance)
        elif name == "smooth":
            out[name] = v_smooth(x0)
    return out


def rank_ensemble(raw, names=VERIFIER_NAMES, candidate_ids=None):
    """Rank-based ensemble over a candidate set.

    ``raw`` is an (N, V) array-like of raw scores (or a list of mappings
    keyed by verifier name).  Rank 1 is the best raw score in a column,
    ties receive the average of the tied positions, and the ensemble is
    -(mean rank) so larger is better.  Any nonempty subset of verifiers is
    accepted; the divisor adjusts.  Output preserves input order.
    """
    if len(raw) == 0:
        raise ValueError("empty candidate set")
    if isinstance(raw[0], dict):
        matrix = np.array([[r[n] for n in names] for r in raw], dtype=np.float64)
    else:
        matrix = np.asarray(raw, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix[:, None]
    n, v = matrix.shape
    if v != len(names):
        raise ValueError(f"expected {len(names)} score columns, got {v}")
    if np.any(np.isnan(matrix)):
        raise ValueError("NaN raw score")
    if candidate_ids is None:
        candidate_ids = list(range(n))
    ranks = np.column_stack([rankdata(-matrix[:, j], method="average")
                             for j in range(v)])
    ensembles = -ranks.mean(axis=1)
    return [RewardReport(candidate_id=int(cid),
                         scores={nm: float(matrix[i, j]) for j, nm in enumerate(names)},
                         ranks={nm: float(ranks[i, j]) for j, nm in enumerate(names)},
                         ensemble=float(ensembles[i]))
            for i, cid in enumerate(candidate_ids)]


def score_candidates(previews, instance: RestorationInstance,
                     cfg: VerifierConfig, candidate_ids=None):
    """Raw-score a stack of candidate previews and rank-ensemble them."""
    previews = np.atleast_2d(np.asarray(previews, dtype=np.float64))
    rows = [raw_scores(p, instance, cfg) for p in previews]
    return rank_ensemble(rows, names=cfg.verifiers, candidate_ids=candidate_ids)
