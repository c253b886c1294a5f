"""Erasure/preservation metrics against the exact mixture oracles.

The Bayes classifier plays the detector, a closed-form 2-Wasserstein distance
between fitted Gaussians plays the FID stand-in, and the off-manifold
fraction (log-density below a data-calibrated percentile) quantifies samples
that left the data manifold.  W2 and off-manifold are stand-ins, not
reproductions of any image-space metric.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffusion
from .mixture import MixtureSpec, bayes_classify_batch, log_density_batch, sample_dataset

__all__ = [
    "EvalReport",
    "accuracy",
    "harmonic_mean_hc",
    "off_manifold_fraction",
    "off_manifold_threshold",
    "w2_gaussian",
    "evaluate",
    "save_eval_report",
]

log = logging.getLogger(__name__)


def _max_workers() -> int:
    env = os.environ.get("ANT_LAB_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


@dataclass
class EvalReport:
    per_concept_acc: dict
    acc_e: float
    acc_p: float
    h_c: float
    off_manifold_frac: float
    w2_per_preserved: dict
    n_samples: int
    seed: int
    guidance: diffusion.GuidanceSpec
    erased: list = field(default_factory=list)


def accuracy(net, params, schedule, guidance, concepts, n: int, seed: int,
             oracle: MixtureSpec, adapter=None):
    """Per-concept fraction of n conditional samples the Bayes oracle returns as
    the conditioning concept.  Deterministic per (seed, concept)."""
    if n < 100:
        raise ValueError("need n >= 100 samples per concept")

    def one(k):
        pts = diffusion.sample(net, params, schedule, guidance, (k, None), n,
                               _concept_seed(seed, k), adapter=adapter)
        return float(np.mean(bayes_classify_batch(oracle, pts) == k))

    with ThreadPoolExecutor(max_workers=_max_workers()) as ex:
        fracs = list(ex.map(one, concepts))
    return {k: f for k, f in zip(concepts, fracs)}


def _concept_seed(seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, k])


def harmonic_mean_hc(acc_e: float, acc_p: float) -> float:
    """Harmonic mean of erasure success (1 - acc_e) and preservation acc_p.

    Carries the conventional factor 2, which is what reproduces the reference
    values this score is calibrated against.
    """
    if not 0 <= acc_e <= 1 or not 0 <= acc_p <= 1:
        raise ValueError("accuracies must lie in [0, 1]")
    if acc_e >= 1.0 or acc_p <= 0.0:
        return 0.0
    return 2.0 / (1.0 / (1.0 - acc_e) + 1.0 / acc_p)


def off_manifold_threshold(oracle: MixtureSpec, seed: int = 12345,
                           n_draw: int = 100_000, percentile: float = 1.0) -> float:
    """Log-density threshold: the given percentile over a fresh oracle draw."""
    ds = sample_dataset(oracle, n_draw, seed)
    return float(np.percentile(log_density_batch(oracle, ds.points), percentile))


def off_manifold_fraction(samples, oracle: MixtureSpec, threshold: float | None = None) -> float:
    if threshold is None:
        threshold = off_manifold_threshold(oracle)
    ld = log_density_batch(oracle, np.asarray(samples, dtype=float))
    return float(np.mean(ld < threshold))


def _sqrtm_2x2(m: np.ndarray) -> np.ndarray:
    # principal square root of a 2x2 SPD matrix
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    s = np.sqrt(max(det, 0.0))
    tr = m[0, 0] + m[1, 1]
    denom = np.sqrt(tr + 2.0 * s)
    if denom == 0.0:
        return np.zeros((2, 2))
    return (m + s * np.eye(2)) / denom


def _fit_gaussian(x: np.ndarray):
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    if np.linalg.det(cov) <= 0 or not np.all(np.isfinite(cov)):
        log.warning("degenerate sample covariance; adding 1e-9 jitter")
        cov = cov + 1e-9 * np.eye(2)
    return mu, cov


def w2_gaussian(samples_a, samples_b) -> float:
    """Squared 2-Wasserstein distance between Gaussians fitted to each set."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples on each side")
    mu1, s1 = _fit_gaussian(a)
    mu2, s2 = _fit_gaussian(b)
    r2 = _sqrtm_2x2(s2)
    cross = _sqrtm_2x2(r2 @ s1 @ r2)
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2.0 * cross))
    return max(val, 0.0)


def evaluate(net, params, schedule, guidance, oracle: MixtureSpec, erased,
             n: int = 1000, seed: int = 0, adapter=None) -> EvalReport:
    """Full report: per-concept accuracy, Acc_e/Acc_p aggregates, H_c,
    off-manifold fraction over all samples, and per-preserved-concept W2
    against oracle draws restricted to that concept."""
    K = net.config.n_concepts
    concepts = list(range(K))
    accs = accuracy(net, params, schedule, guidance, concepts, n, seed, oracle, adapter)
    erased = list(erased)
    preserved = [k for k in concepts if k not in erased]
    acc_e = float(np.mean([accs[k] for k in erased])) if erased else 0.0
    acc_p = float(np.mean([accs[k] for k in preserved])) if preserved else 0.0

    threshold = off_manifold_threshold(oracle)
    all_pts = []
    w2s = {}
    ref = sample_dataset(oracle, max(n, 2000), 54321)
    for k in concepts:
        pts = diffusion.sample(net, params, schedule, guidance, (k, None), n,
                               _concept_seed(seed, k), adapter=adapter)
        all_pts.append(pts)
        if k in preserved:
            ref_k = ref.points[ref.concepts == k]
            if len(ref_k) >= 2:
                w2s[k] = w2_gaussian(pts, ref_k)
    off = off_manifold_fraction(np.concatenate(all_pts), oracle, threshold)
    return EvalReport(accs, acc_e, acc_p, harmonic_mean_hc(acc_e, acc_p), off,
                      w2s, n, seed, guidance, erased)


def save_eval_report(report: EvalReport, path) -> None:
    with open(path, "w") as f:
        f.write("concept,role,accuracy,w2_vs_oracle\n")
        for k in sorted(report.per_concept_acc):
            role = "erased" if k in report.erased else "preserved"
            w2 = report.w2_per_preserved.get(k)
            w2s = f"{w2:.17g}" if w2 is not None else ""
            f.write(f"{k},{role},{report.per_concept_acc[k]:.17g},{w2s}\n")
        f.write(f"aggregate,acc_e,{report.acc_e:.17g},\n")
        f.write(f"aggregate,acc_p,{report.acc_p:.17g},\n")
        f.write(f"aggregate,h_c,{report.h_c:.17g},\n")
        f.write(f"aggregate,off_manifold_frac,{report.off_manifold_frac:.17g},\n")
