"""Toy restoration problems with analytic posteriors.

A hidden signal x is drawn from a Gaussian-mixture prior, observed through
a linear operator with Gaussian noise, and the exact Bayesian posterior is
computed by conjugate algebra.  The posterior, projected back to isotropic
components, becomes the conditional FlowSpec that samplers navigate; the
exact anisotropic posterior is kept as an oracle for the likelihood
verifier.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from . import rng as rngmod
from .flows import FlowSpec, _as_readonly


@dataclass(frozen=True, eq=False)
class DegradationOp:
    """Linear degradation y = matrix @ x + noise_std * xi."""

    matrix: np.ndarray
    noise_std: float

    def __post_init__(self):
        object.__setattr__(self, "matrix", _as_readonly(np.atleast_2d(self.matrix)))
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("operator entries must be finite")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")

    @property
    def obs_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def to_json(self) -> dict:
        return {"matrix": self.matrix.tolist(), "noise_std": float(self.noise_std)}

    @classmethod
    def from_json(cls, obj: dict) -> "DegradationOp":
        return cls(np.asarray(obj["matrix"], dtype=np.float64),
                   float(obj["noise_std"]))


def blur_downsample(dim: int, factor: int = 2,
                    taps=(0.25, 0.5, 0.25)) -> np.ndarray:
    """Blur-then-downsample stencil matrix (dim/factor, dim).

    Row i averages positions factor*i + offset with the given taps; indices
    are clamped at the boundary (edge replication).
    """
    if dim % factor != 0:
        raise ValueError("dim must be divisible by factor")
    obs = dim // factor
    half = len(taps) // 2
    mat = np.zeros((obs, dim))
    for i in range(obs):
        center = factor * i
        for j, w in enumerate(taps):
            col = min(max(center + j - half, 0), dim - 1)
            mat[i, col] += w
    return mat


def degrade(truth: np.ndarray, op: DegradationOp,
            rng: np.random.Generator) -> np.ndarray:
    """Apply the degradation operator with fresh observation noise."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != (op.dim,):
        raise ValueError(f"truth shape {truth.shape} incompatible with operator "
                         f"({op.obs_dim}, {op.dim})")
    return op.matrix @ truth + op.noise_std * rng.standard_normal(op.obs_dim)


class MixturePosterior:
    """Exact anisotropic Gaussian-mixture posterior (the oracle form).

    Cholesky factors and log-determinants are precomputed so log_density
    is cheap to evaluate in bulk.
    """

    def __init__(self, weights, means, covs):
        self.weights = _as_readonly(weights)
        self.means = _as_readonly(np.atleast_2d(means))
        self.covs = _as_readonly(covs)
        c, d = self.means.shape
        if self.covs.shape != (c, d, d):
            raise ValueError("covs must be (C, d, d)")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("posterior weights must sum to 1")
        self.dim = d
        self._chol = []
        self._logdet = np.empty(c)
        for i in range(c):
            try:
                fac = cho_factor(self.covs[i], lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError("singular posterior covariance") from exc
            self._chol.append(fac)
            self._logdet[i] = 2.0 * np.sum(np.log(np.diag(fac[0])))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def log_density(self, x) -> np.ndarray:
        """Exact mixture log-density; x is (d,) or (n, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        logs = np.empty((n, self.n_components))
        for i in range(self.n_components):
            diff = x - self.means[i]
            sol = cho_solve(self._chol[i], diff.T)
            quad = np.sum(diff.T * sol, axis=0)
            logs[:, i] = (np.log(self.weights[i])
                          - 0.5 * (self.dim * np.log(2.0 * np.pi)
                                   + self._logdet[i] + quad))
        out = logsumexp(logs, axis=1)
        return out if n > 1 else float(out[0])

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covs": self.covs.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "MixturePosterior":
        return cls(np.asarray(obj["weights"]), np.asarray(obj["means"]),
                   np.asarray(obj["covs"]))


def exact_posterior(prior: FlowSpec, op: DegradationOp,
                    observation: np.ndarray) -> MixturePosterior:
    """Exact mixture posterior of x given y by per-component conjugacy.

    Component c:  precision  I/s_c^2 + A^T A / eta^2
                  mean       Sigma_c (mu_c/s_c^2 + A^T y / eta^2)
    and weights reweighted by the marginal likelihood
    N(y; A mu_c, s_c^2 A A^T + eta^2 I).
    """
    y = np.asarray(observation, dtype=np.float64)
    if y.shape != (op.obs_dim,):
        raise ValueError("observation dimension mismatch")
    if prior.dim != op.dim:
        raise ValueError("prior dimension does not match operator")
    a = op.matrix
    eta2 = op.noise_std ** 2
    ata = a.T @ a
    aat = a @ a.T
    d, m = prior.dim, op.obs_dim
    c = prior.n_components
    means = np.empty((c, d))
    covs = np.empty((c, d, d))
    log_evidence = np.empty(c)
    for i in range(c):
        s2 = prior.scales[i] ** 2
        prec = np.eye(d) / s2 + ata / eta2
        try:
            fac = cho_factor(prec, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular posterior update") from exc
        covs[i] = cho_solve(fac, np.eye(d))
        means[i] = cho_solve(fac, prior.means[i] / s2 + a.T @ y / eta2)
        cov_y = s2 * aat + eta2 * np.eye(m)
        fy = cho_factor(cov_y, lower=True)
        resid = y - a @ prior.means[i]
        quad = resid @ cho_solve(fy, resid)
        logdet = 2.0 * np.sum(np.log(np.diag(fy[0])))
        log_evidence[i] = -0.5 * (m * np.log(2.0 * np.pi) + logdet + quad)
    logw = np.log(prior.weights) + log_evidence
    weights = np.exp(logw - logsumexp(logw))
    return MixturePosterior(weights, means, covs)


def posterior_flow(prior: FlowSpec, op: DegradationOp,
                   observation: np.ndarray) -> FlowSpec:
    """Posterior as a FlowSpec, covariances projected to isotropic.

    The projection matches trace/d per component so the one-parameter
    FlowSpec type stays closed; the anisotropy error is part of what
    inference-time search must overcome.
    """
    exact = exact_posterior(prior, op, observation)
    scales = np.sqrt(np.trace(exact.covs, axis1=1, axis2=2) / prior.dim)
    return FlowSpec(dim=prior.dim, weights=exact.weights, means=exact.means,
                    scales=scales)


@dataclass(frozen=True)
class SuiteConfig:
    """Generation parameters for a suite of restoration instances.

    Defaults give a 1-D "image row" of 16 samples observed through a 3-tap
    blur and 2x downsample; full sweeps run in seconds.
    """

    dim: int = 16
    downsample: int = 2
    noise_std: float = 0.1
    n_components: int = 3
    component_scale: float = 0.5
    mean_amplitude: float = 2.0
    n_harmonics: int = 3
    blur_taps: tuple = (0.25, 0.5, 0.25)

    def to_json(self) -> dict:
        out = asdict(self)
        out["blur_taps"] = list(self.blur_taps)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SuiteConfig":
        obj = dict(obj)
        if "blur_taps" in obj:
            obj["blur_taps"] = tuple(obj["blur_taps"])
        return cls(**obj)


@dataclass(frozen=True)
class RestorationInstance:
    """One problem: hidden truth, observation, and both posterior forms."""

    index: int
    truth: np.ndarray
    observation: np.ndarray
    op: DegradationOp
    posterior: FlowSpec
    exact: MixturePosterior


def _smooth_means(gen: np.random.Generator, cfg: SuiteConfig) -> np.ndarray:
    """Smooth component means from a few random low-frequency harmonics."""
    i = np.arange(cfg.dim)
    means = np.zeros((cfg.n_components, cfg.dim))
    amp = cfg.mean_amplitude / np.sqrt(cfg.n_harmonics)
    for c in range(cfg.n_components):
        for k in range(1, cfg.n_harmonics + 1):
            a, b = gen.standard_normal(2) * amp
            means[c] += (a * np.sin(2.0 * np.pi * k * i / cfg.dim)
                         + b * np.cos(2.0 * np.pi * k * i / cfg.dim))
    return means


def make_prior(seed: int, cfg: SuiteConfig) -> FlowSpec:
    gen = rngmod.stream(seed, rngmod.SUITE, 0)
    means = _smooth_means(gen, cfg)
    weights = np.full(cfg.n_components, 1.0 / cfg.n_components)
    scales = np.full(cfg.n_components, cfg.component_scale)
    return FlowSpec(dim=cfg.dim, weights=weights, means=means, scales=scales)


@dataclass(frozen=True)
class Suite:
    seed: int
    config: SuiteConfig
    prior: FlowSpec
    op: DegradationOp
    instances: tuple


def make_suite(seed: int, count: int, config: "SuiteConfig | None" = None) -> Suite:
    """Deterministic suite of restoration instances.

    Instance generation is pure per (seed, index): each instance draws its
    truth and observation noise from its own substream.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = config or SuiteConfig()
    prior = make_prior(seed, cfg)
    op = DegradationOp(blur_downsample(cfg.dim, cfg.downsample, cfg.blur_taps),
                       cfg.noise_std)
    instances = []
    for i in range(count):
        gen = rngmod.stream(seed, rngmod.SUITE, 1, i)
        comp = gen.choice(prior.n_components, p=prior.weights)
        truth = prior.means[comp] + prior.scales[comp] * gen.standard_normal(cfg.dim)
        obs = degrade(truth, op, gen)
        instances.append(RestorationInstance(
            index=i, truth=_as_readonly(truth), observation=_as_readonly(obs),
            op=op, posterior=posterior_flow(prior, op, obs),
            exact=exact_posterior(prior, op, obs)))
    return Suite(seed=seed, config=cfg, prior=prior, op=op,
                 instances=tuple(instances))


# ---------------------------------------------------------------------------
# serialization

def suite_to_json(suite: Suite) -> dict:
    """Suite as JSON.  Posteriors are recomputed on load, so the document
    stores only the generative facts (prior, operator, truths, observations).
    """
    return {
        "seed": suite.seed,
        "config": suite.config.to_json(),
        "prior": suite.prior.to_json(),
        "op": suite.op.to_json(),
        "instances": [
            {"index": inst.index, "truth": inst.truth.tolist(),
             "observation": inst.observation.tolist()}
            for inst in suite.instances
        ],
    }


def suite_from_json(obj: dict) -> Suite:
    cfg = SuiteConfig.from_json(obj["config"])
    prior = FlowSpec.from_json(obj["prior"])
    op = DegradationOp.from_json(obj["op"])
    instances = []
    for rec in obj["instances"]:
        truth = np.asarray(rec["truth"], dtype=np.float64)
        obs = np.asarray(rec["observation"], dtype=np.float64)
        instances.append(RestorationInstance(
            index=int(rec["index"]), truth=_as_readonly(truth),
            observation=_as_readonly(obs), op=op,
            posterior=posterior_flow(prior, op, obs),
            exact=exact_posterior(prior, op, obs)))
    return Suite(seed=int(obj["seed"]), config=cfg, prior=prior, op=op,
                 instances=tuple(instances))


def load_suite(path) -> Suite:
    """Load a suite file: either a materialized suite document or a
    description {"seed", "count", "config"} materialized on the fly."""
    with open(path) as fh:
        obj = json.load(fh)
    if "instances" in obj:
        return suite_from_json(obj)
    cfg = SuiteConfig.from_json(obj["config"]) if "config" in obj else None
    return make_suite(int(obj["seed"]), int(obj["count"]), cfg)


def save_suite(suite: Suite, path) -> None:
    with open(path, "w") as fh:
        json.dump(suite_to_json(suite), fh, sort_keys=True)
        fh.write("\n")


def suite_to_csv(suite: Suite, path) -> None:
    """CSV export: one row per instance, (id, truth..., observation...)."""
    d, m = suite.op.dim, suite.op.obs_dim
    header = (["instance"] + [f"truth_{i}" for i in range(d)]
              + [f"obs_{i}" for i in range(m)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for inst in suite.instances:
            writer.writerow([inst.index]
                            + [repr(float(v)) for v in inst.truth]
                            + [repr(float(v)) for v in inst.observation])
