"""Pairwise-preference statistics: Bradley-Terry fitting and Top-K ratios.

The Bradley-Terry model puts a positive score pi_i on each method with
P(i beats j) = pi_i / (pi_i + pi_j); scores are fitted by maximum
likelihood with the standard minorization-maximization fixed point, which
never decreases the log-likelihood.  Scores are gauge-fixed to sum to 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class ComparisonMatrix:
    """wins[i][j] = number of times method i was preferred over method j."""

    methods: tuple
    wins: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        wins = np.asarray(self.wins, dtype=np.float64)
        wins.flags.writeable = False
        object.__setattr__(self, "wins", wins)
        m = len(self.methods)
        if len(set(self.methods)) != m:
            raise ValueError("method labels must be unique")
        if wins.shape != (m, m):
            raise ValueError("wins must be square over the methods")
        if np.any(wins < 0):
            raise ValueError("win counts must be nonnegative")
        if np.any(np.diag(wins) != 0):
            raise ValueError("diagonal must be zero")


def _connected(n_pairs: np.ndarray) -> bool:
    """BFS connectivity of the comparison graph (edges where any games
    were played)."""
    m = n_pairs.shape[0]
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in range(m):
            if j not in seen and n_pairs[i, j] > 0:
                seen.add(j)
                frontier.append(j)
    return len(seen) == m


def log_likelihood(wins: np.ndarray, p: np.ndarray) -> float:
    """Bradley-Terry log-likelihood of the win counts under scores p."""
    m = len(p)
    ll = 0.0
    for i in range(m):
        for j in range(m):
            if i != j and wins[i, j] > 0:
                ll += wins[i, j] * (np.log(p[i]) - np.log(p[i] + p[j]))
    return float(ll)


@dataclass
class BtFit:
    methods: tuple
    scores: np.ndarray
    iterations: int
    loglik_history: list

    def ranking(self):
        """Method labels sorted by descending score."""
        order = np.argsort(-self.scores, kind="stable")
        return [self.methods[i] for i in order]


def bt_fit(matrix: ComparisonMatrix, tol: float = 1e-10,
           max_iter: int = 10000, smoothing: float = 0.0) -> BtFit:
    """Maximum-likelihood preference scores via the MM fixed point.

    pi_i <- W_i / sum_{j != i} n_ij / (pi_i + pi_j), normalized to sum 1
    each sweep.  Iteration stops when the largest relative change drops
    below tol.  ``smoothing`` adds that many pseudo-wins in both
    directions of every pair (identifiability guard for degenerate
    matrices; off by default).

    Raises ValueError when the comparison graph is disconnected or a
    method has no comparisons at all (the scores are then unidentifiable).
    """
    wins = np.array(matrix.wins)
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    if smoothing > 0:
        off_diag = 1.0 - np.eye(len(matrix.methods))
        wins = wins + smoothing * off_diag
    m = wins.shape[0]
    n_pairs = wins + wins.T
    if m > 1 and not _connected(n_pairs):
        raise ValueError("unidentifiable: comparison graph is disconnected "
                         "(some methods share no chain of comparisons)")
    totals = wins.sum(axis=1)
    p = np.full(m, 1.0 / m)
    history = [log_likelihood(wins, p)]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        denom = np.zeros(m)
        for i in range(m):
            for j in range(m):
                if i != j and n_pairs[i, j] > 0:
                    denom[i] += n_pairs[i, j] / (p[i] + p[j])
        new = np.where(denom > 0, totals / np.maximum(denom, 1e-300), 0.0)
        if new.sum() <= 0:
            raise ValueError("unidentifiable: no wins recorded")
        new /= new.sum()
        history.append(log_likelihood(wins, new))
        change = np.max(np.abs(new - p) / np.maximum(p, 1e-300))
        p = new
        if change < tol:
            break
    return BtFit(methods=matrix.methods, scores=p, iterations=iterations,
                 loglik_history=history)


@dataclass(frozen=True, eq=False)
class SelectionTable:
    """Per image group, the rank of every method (1 = most preferred)."""

    methods: tuple
    ranks: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        ranks = np.asarray(self.ranks, dtype=np.int64)
        ranks.flags.writeable = False
        object.__setattr__(self, "ranks", ranks)
        m = len(self.methods)
        if ranks.ndim != 2 or ranks.shape[1] != m:
            raise ValueError("ranks must be (groups, methods)")
        expected = np.arange(1, m + 1)
        for g, row in enumerate(ranks):
            if not np.array_equal(np.sort(row), expected):
                raise ValueError(f"group {g} must rank all methods exactly once")

    @property
    def n_groups(self) -> int:
        return self.ranks.shape[0]


def top_k_ratio(table: SelectionTable, method: str, k: int) -> float:
    """Fraction of groups in which the method ranks among the top k."""
    if method not in table.methods:
        raise KeyError(f"unknown method {method!r}")
    if not (1 <= k <= len(table.methods)):
        raise ValueError("k must be between 1 and the method count")
    col = table.methods.index(method)
    return float(np.mean(table.ranks[:, col] <= k))


# ---------------------------------------------------------------------------
# CSV interfaces


def read_comparisons_csv(path) -> ComparisonMatrix:
    """Read pairwise comparisons.

    Accepted forms (header row required):
      method_a,method_b,wins_a,wins_b     aggregated counts per pair
      method_a,method_b,winner            one row per trial
    """
    methods = []
    index = {}

    def method_id(name: str) -> int:
        if name not in index:
            index[name] = len(methods)
            methods.append(name)
        return index[name]

    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty comparisons file")
        header = [h.strip().lower() for h in header]
        if header[:4] == ["method_a", "method_b", "wins_a", "wins_b"]:
            form = "aggregate"
        elif header[:3] == ["method_a", "method_b", "winner"]:
            form = "trial"
        else:
            raise ValueError(f"{path}: line 1: unrecognized header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if form == "aggregate":
                    a, b = method_id(row[0].strip()), method_id(row[1].strip())
                    records.append((a, b, float(row[2]), float(row[3])))
                else:
                    a, b = method_id(row[0].strip()), method_id(row[1].strip())
                    winner = row[2].strip()
                    if winner == row[0].strip():
                        records.append((a, b, 1.0, 0.0))
                    elif winner == row[1].strip():
                        records.append((a, b, 0.0, 1.0))
                    else:
                        raise ValueError("winner must name one of the methods")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    wins = np.zeros((len(methods), len(methods)))
    for a, b, wa, wb in records:
        wins[a, b] += wa
        wins[b, a] += wb
    return ComparisonMatrix(methods=tuple(methods), wins=wins)


def write_scores_csv(fit: BtFit, path) -> None:
    """Columns: method, pi, rank (1 = highest score)."""
    order = np.argsort(-fit.scores, kind="stable")
    rank_of = {int(i): r + 1 for r, i in enumerate(order)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "pi", "rank"])
        for i, name in enumerate(fit.methods):
            writer.writerow([name, repr(float(fit.scores[i])), rank_of[i]])


def read_selection_csv(path) -> SelectionTable:
    """Read a ranking table: header 'group,<method>,...'; each row gives
    the rank of every method for one image group."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip().lower() != "group":
            raise ValueError(f"{path}: line 1: expected 'group,<method>,...'")
        methods = tuple(h.strip() for h in header[1:])
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([int(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return SelectionTable(methods=methods, ranks=np.array(rows))


def write_topk_csv(table: SelectionTable, path) -> None:
    """Columns: method, k, ratio, for every method and k."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "k", "ratio"])
        for name in table.methods:
            for k in range(1, len(table.methods) + 1):
                writer.writerow([name, k, repr(top_k_ratio(table, name, k))])
