"""Experiment sweeps: budget ladders, baselines, verifier ablations.

Methods are compared per instance by rank-ensembling their final outputs
together (the ensemble is defined over a candidate set, so the compared
methods form one).  All runs are paired: the same instance and the same
initial-noise seed feed every method, and reported p-values come from
one-sided paired t-tests on the per-instance ensemble values.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .search import (TtsConfig, best_of_n, nfe_formula, particle_nfe,
                     particle_sampling, tts_run)
from .tasks import Suite, SuiteConfig, make_suite
from .verifiers import VerifierConfig, rank_ensemble, raw_scores, v_fidelity

ABLATION_SUBSETS = (("fid",), ("like",), ("smooth",),
                    ("fid", "like"), ("fid", "smooth"), ("like", "smooth"),
                    ("fid", "like", "smooth"))


def default_ladder() -> tuple:
    """Budget ladder: no search, then increasing (rounds, candidates)."""
    return (TtsConfig(rounds=0),
            TtsConfig(rounds=2, candidates=5),
            TtsConfig(rounds=4, candidates=7),
            TtsConfig(rounds=10, candidates=15))


def point_label(cfg: TtsConfig) -> str:
    if cfg.rounds == 0:
        return "no_tts"
    return f"tts_k{cfg.rounds}_n{cfg.candidates}"


@dataclass(frozen=True)
class SweepConfig:
    suite_seed: int = 0
    suite_count: int = 200
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    ladder: tuple = field(default_factory=default_ladder)
    baselines: tuple = ("best_of_n", "particle")
    repetitions: int = 1
    match_index: int = 2
    verifier: VerifierConfig = field(default_factory=lambda: VerifierConfig(blind=True))
    ablation: bool = True
    ablation_count: int = 50

    def __post_init__(self):
        if not self.ladder:
            raise ValueError("ladder must be nonempty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not (0 <= self.match_index < len(self.ladder)):
            raise ValueError("match_index outside the ladder")

    def to_json(self) -> dict:
        return {
            "suite_seed": self.suite_seed, "suite_count": self.suite_count,
            "suite": self.suite.to_json(),
            "ladder": [c.to_json() for c in self.ladder],
            "baselines": list(self.baselines),
            "repetitions": self.repetitions,
            "match_index": self.match_index,
            "verifiers": list(self.verifier.verifiers),
            "blind": self.verifier.blind,
            "ablation": self.ablation,
            "ablation_count": self.ablation_count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SweepConfig":
        kwargs = {}
        if "suite_seed" in obj:
            kwargs["suite_seed"] = int(obj["suite_seed"])
        if "suite_count" in obj:
            kwargs["suite_count"] = int(obj["suite_count"])
        if "suite" in obj:
            kwargs["suite"] = SuiteConfig.from_json(obj["suite"])
        if "ladder" in obj:
            kwargs["ladder"] = tuple(TtsConfig.from_json(c) for c in obj["ladder"])
        if "baselines" in obj:
            kwargs["baselines"] = tuple(obj["baselines"])
        if "repetitions" in obj:
            kwargs["repetitions"] = int(obj["repetitions"])
        if "match_index" in obj:
            kwargs["match_index"] = int(obj["match_index"])
        kwargs["verifier"] = VerifierConfig.from_json(obj)
        if "ablation" in obj:
            kwargs["ablation"] = bool(obj["ablation"])
        if "ablation_count" in obj:
            kwargs["ablation_count"] = int(obj["ablation_count"])
        return cls(**kwargs)


def run_seed(top_seed: int, rep: int, instance_index: int) -> tuple:
    """Per-(repetition, instance) seed; identical across methods so every
    comparison is paired on the initial noise."""
    return (int(top_seed), int(rep), int(instance_index))


def matched_best_of_n(cfg: TtsConfig) -> int:
    """Candidate count whose full solves match the search NFE most closely."""
    return max(1, round(nfe_formula(cfg) / cfg.base_steps))


def matched_particles(cfg: TtsConfig) -> int:
    return max(1, round(nfe_formula(cfg) / (cfg.base_steps + cfg.rounds)))


# ---------------------------------------------------------------------------
# jobs (module-level so they pickle for process pools)


def _run_tts_point(suite: Suite, cfg: TtsConfig, vcfg: VerifierConfig,
                   top_seed: int, rep: int, count: "int | None" = None):
    finals, nfe = [], []
    for inst in suite.instances[:count]:
        res = tts_run(inst, inst.posterior, cfg, vcfg,
                      run_seed(top_seed, rep, inst.index))
        finals.append(res.x0)
        nfe.append(res.ledger.velocity_total)
    return np.stack(finals), nfe


def _run_baseline(suite: Suite, kind: str, matched: TtsConfig,
                  vcfg: VerifierConfig, top_seed: int, rep: int):
    finals, nfe = [], []
    for inst in suite.instances:
        seed = run_seed(top_seed, rep, inst.index)
        if kind == "best_of_n":
            res = best_of_n(inst, inst.posterior, matched_best_of_n(matched),
                            vcfg, seed, steps=matched.base_steps)
        elif kind == "particle":
            res = particle_sampling(inst, inst.posterior,
                                    matched_particles(matched), matched,
                                    vcfg, seed)
        else:
            raise ValueError(f"unknown baseline {kind!r}")
        finals.append(res.x0)
        nfe.append(res.ledger.velocity_total)
    return np.stack(finals), nfe


def _run_job(args):
    kind = args[0]
    if kind == "point":
        _, suite, cfg, vcfg, seed, rep, count = args
        return _run_tts_point(suite, cfg, vcfg, seed, rep, count)
    _, suite, baseline, matched, vcfg, seed, rep = args
    return _run_baseline(suite, baseline, matched, vcfg, seed, rep)


# ---------------------------------------------------------------------------
# evaluation


def joint_ensembles(finals_by_method, instances, vcfg: VerifierConfig):
    """Rank-ensemble the methods' outputs jointly, instance by instance.

    finals_by_method: list of (n_instances, d) arrays, one per method.
    Returns an (n_methods, n_instances) array of ensemble values.
    """
    n_methods = len(finals_by_method)
    n_inst = len(instances)
    out = np.empty((n_methods, n_inst))
    for j, inst in enumerate(instances):
        rows = [raw_scores(finals_by_method[m][j], inst, vcfg)
                for m in range(n_methods)]
        reports = rank_ensemble(rows, names=vcfg.verifiers)
        for m in range(n_methods):
            out[m, j] = reports[m].ensemble
    return out


def paired_p_greater(x, y) -> float:
    """One-sided paired t-test p-value for mean(x) > mean(y)."""
    d = np.asarray(x) - np.asarray(y)
    if np.std(d) == 0.0:
        m = float(np.mean(d))
        return 0.5 if m == 0 else (0.0 if m > 0 else 1.0)
    return float(stats.ttest_rel(x, y, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# the sweep


def run_sweep(cfg: SweepConfig, workers: int = 1) -> dict:
    """Run the ladder, baselines, and the verifier ablation.

    Returns a result dict with per-method statistics, pairwise p-values,
    the monotone-trend flag, and the raw rows for CSV export.  Everything
    is deterministic given the config; with workers > 1 the jobs run in a
    process pool and are merged by index.
    """
    suite = make_suite(cfg.suite_seed, cfg.suite_count, cfg.suite)
    matched = cfg.ladder[cfg.match_index]
    reps = cfg.repetitions

    jobs = []
    for p, point in enumerate(cfg.ladder):
        for rep in range(reps):
            jobs.append(("point", suite, point, cfg.verifier,
                         cfg.suite_seed, rep, None))
    for baseline in cfg.baselines:
        for rep in range(reps):
            jobs.append(("baseline", suite, baseline, matched, cfg.verifier,
                         cfg.suite_seed, rep))
    ablation_jobs = []
    if cfg.ablation:
        count = min(cfg.ablation_count, cfg.suite_count)
        for subset in ABLATION_SUBSETS:
            sub_v = VerifierConfig(verifiers=subset, blind=cfg.verifier.blind)
            ablation_jobs.append(("point", suite, matched, sub_v,
                                  cfg.suite_seed, 0, count))

    all_jobs = jobs + ablation_jobs
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, all_jobs))
    else:
        results = [_run_job(j) for j in all_jobs]

    # Reassemble by construction order: ladder points, then baselines.
    cursor = 0
    ladder_finals = []   # per point: (reps * n_inst, d)
    ladder_nfe = []
    for point in cfg.ladder:
        per_rep = []
        nfe_vals = []
        for rep in range(reps):
            finals, nfe = results[cursor]
            cursor += 1
            per_rep.append(finals)
            nfe_vals.extend(nfe)
        ladder_finals.append(np.concatenate(per_rep, axis=0))
        ladder_nfe.append(nfe_vals)
    baseline_finals = {}
    baseline_nfe = {}
    for baseline in cfg.baselines:
        per_rep = []
        nfe_vals = []
        for rep in range(reps):
            finals, nfe = results[cursor]
            cursor += 1
            per_rep.append(finals)
            nfe_vals.extend(nfe)
        baseline_finals[baseline] = np.concatenate(per_rep, axis=0)
        baseline_nfe[baseline] = nfe_vals
    ablation_finals = [results[cursor + i][0] for i in range(len(ablation_jobs))]

    # Paired instances repeated per rep.
    eval_instances = list(suite.instances) * reps

    ladder_ens = joint_ensembles(ladder_finals, eval_instances, cfg.verifier)
    means = ladder_ens.mean(axis=1)
    monotone = bool(np.all(np.diff(means) >= -1e-12))

    point_rows = []
    for p, point in enumerate(cfg.ladder):
        p_vs_first = (None if p == 0 else
                      paired_p_greater(ladder_ens[p], ladder_ens[0]))
        point_rows.append({
            "label": point_label(point), "pool": "ladder",
            "K": point.rounds, "N": point.candidates, "M": point.survivors,
            "S": point.rollout_steps, "T": point.base_steps,
            "nfe_velocity": int(np.mean(ladder_nfe[p])),
            "nfe_predicted": nfe_formula(point),
            "mean_reward": float(means[p]),
            "std_reward": float(ladder_ens[p].std()),
            "p_vs_no_tts": p_vs_first,
        })

    baseline_rows = []
    matched_finals = ladder_finals[cfg.match_index]
    for baseline in cfg.baselines:
        pair = joint_ensembles([matched_finals, baseline_finals[baseline]],
                               eval_instances, cfg.verifier)
        n_used = (matched_best_of_n(matched) if baseline == "best_of_n"
                  else matched_particles(matched))
        baseline_rows.append({
            "label": f"{baseline}[n={n_used}]",
            "pool": f"vs_{point_label(matched)}",
            "K": "", "N": n_used, "M": "", "S": "", "T": matched.base_steps,
            "nfe_velocity": int(np.mean(baseline_nfe[baseline])),
            "nfe_predicted": (n_used * matched.base_steps
                              if baseline == "best_of_n"
                              else particle_nfe(n_used, matched)),
            "mean_reward": float(pair[1].mean()),
            "std_reward": float(pair[1].std()),
            "p_vs_no_tts": None,
            "tts_mean_in_pool": float(pair[0].mean()),
            "p_tts_beats_baseline": paired_p_greater(pair[0], pair[1]),
        })

    ablation_rows = []
    if cfg.ablation:
        count = min(cfg.ablation_count, cfg.suite_count)
        abl_instances = list(suite.instances)[:count]
        abl_ens = joint_ensembles(ablation_finals, abl_instances, cfg.verifier)
        for i, subset in enumerate(ABLATION_SUBSETS):
            oracle = np.mean([v_fidelity(ablation_finals[i][j], inst)
                              for j, inst in enumerate(abl_instances)])
            ablation_rows.append({
                "verifiers": "+".join(subset),
                "mean_ensemble": float(abl_ens[i].mean()),
                "mean_oracle_fid": float(oracle),
                "nfe_velocity": nfe_formula(matched),
            })

    nfe_ratio = nfe_formula(matched) / nfe_formula(cfg.ladder[0])
    return {
        "config": cfg.to_json(),
        "points": point_rows,
        "baselines": baseline_rows,
        "ablation": ablation_rows,
        "monotone_ladder": monotone,
        "nfe_ratio_match_vs_first": float(nfe_ratio),
        "checks_pass": monotone,
    }
