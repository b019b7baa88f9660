"""Monte Carlo and deterministic experiments built on the simulator and samplers.

* :func:`invariance_test` -- paired check that ``mu_N`` is preserved by the flow.
* :func:`tail_test` -- Gaussian tail of the H^s norm under the free measure.
* :func:`convergence_study` -- truncation error against a high-resolution reference.
* :func:`norm_growth` -- ensemble quantiles of an H^sigma norm along the flow.

Every report carries the resolved configuration and master seed in ``config``
and serializes to JSON (``to_dict``) and CSV (``write_csv``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from . import streams
from .dynamics import IntegratorConfig, default_dt, evolve_batch
from .measures import (
    MeasureConfig,
    Observable,
    SampleBatch,
    default_observables,
    draw_gibbs,
    gaussian_ensemble,
)
from .spectral import (
    ModelParams,
    SpectralState,
    extend,
    power_law_state,
    project,
    sobolev_norm,
)

# trajectories are integrated in chunks of this many samples
EVOLVE_CHUNK = 512


def _write_rows(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x
                        for x in row])


def _dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _normalized_weights(log_weights: np.ndarray) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if not finite.any():
        raise ValueError("all weights are zero")
    w = np.where(finite, np.exp(lw - lw[finite].max()), 0.0)
    return w / w.sum()


def _ess(wn: np.ndarray) -> float:
    return float(1.0 / np.sum(wn ** 2))


def _evolve_chunk(params, integrator, T, checkpoints, coeffs):
    return evolve_batch(coeffs, params, integrator, T, checkpoints)


def evolve_ensemble(coeffs: np.ndarray, params: ModelParams, integrator: IntegratorConfig,
                    T: float, checkpoints: Sequence[float] = (), workers: int = 1):
    """Evolve an ensemble in fixed-size chunks; same result for any ``workers``."""
    chunks = [coeffs[a:b] for a, b in streams.chunked(len(coeffs), EVOLVE_CHUNK)]
    parts = streams.ordered_map(
        partial(_evolve_chunk, params, integrator, T, tuple(checkpoints)), chunks, workers)
    final = np.concatenate([p[0] for p in parts])
    snaps = [np.concatenate([p[1][j] for p in parts]) for j in range(len(checkpoints))]
    return final, snaps


# ---------------------------------------------------------------------------
# invariance

@dataclass(frozen=True)
class PairedStat:
    mean_diff: float
    std_error: float
    z_score: float


@dataclass
class InvarianceReport:
    stats: dict[str, PairedStat]
    T: float
    n_modes: int
    count: int
    ess: float
    scheme: str
    dt: float
    config: dict = field(default_factory=dict)
    nested: dict[int, "InvarianceReport"] = field(default_factory=dict)

    @property
    def underpowered(self) -> bool:
        return self.ess < 30

    def max_abs_z(self, exclude: Sequence[str] = ()) -> float:
        return max(abs(v.z_score) for k, v in self.stats.items() if k not in exclude)

    def to_dict(self) -> dict:
        return {
            "config": self.config, "T": self.T, "n_modes": self.n_modes, "count": self.count,
            "ess": self.ess, "scheme": self.scheme, "dt": self.dt,
            "underpowered": self.underpowered,
            "observables": {k: vars(v) for k, v in self.stats.items()},
            "nested": {str(k): v.to_dict() for k, v in self.nested.items()},
        }

    def write_csv(self, path) -> None:
        _write_rows(path, ["observable", "mean_diff", "std_error", "z_score"],
                    [(k, v.mean_diff, v.std_error, v.z_score) for k, v in self.stats.items()])


def paired_statistic(before: np.ndarray, after: np.ndarray, wn: np.ndarray) -> PairedStat:
    """Weighted mean of ``after - before`` with its delta-method standard error."""
    d = np.asarray(after, dtype=float) - np.asarray(before, dtype=float)
    mean = float(np.dot(wn, d))
    se = float(math.sqrt(np.sum(wn ** 2 * (d - mean) ** 2)))
    z = mean / se if se > 0 else 0.0
    return PairedStat(mean, se, z)


def invariance_test(config: MeasureConfig, T: float, count: int,
                    observables: dict[str, Observable] | None = None,
                    integrator: IntegratorConfig | None = None, seed: int = 0,
                    workers: int = 1, samples: SampleBatch | None = None,
                    nested: Sequence[int] = ()) -> InvarianceReport:
    """Paired test of ``E[phi(S_N(T) u) - phi(u)] = 0`` for ``u ~ mu_N``.

    Args:
        config: Measure to sample (its ``params`` also drive the flow).
        T: Flow time.
        count: Number of (weighted) samples, at least 100.
        observables: Name -> vectorized function of coefficients; defaults to
            :func:`fracnls.measures.default_observables`.
        integrator: Time stepper; defaults to Strang with ``dt = 1e-3``.
        seed: Master seed of the sampler.
        workers: Parallel worker processes (results do not depend on it).
        samples: Reuse an existing ensemble instead of sampling.
        nested: Smaller counts whose reports, computed on the leading samples
            of the same ensemble, are attached as ``report.nested[k]``.
    """
    if count < 100:
        raise ValueError("count must be >= 100")
    params = config.params
    integrator = integrator or IntegratorConfig("strang", 1e-3)
    observables = observables or default_observables(params)
    if not observables:
        raise ValueError("observables must be nonempty")
    if any(not 0 < k <= count for k in nested):
        raise ValueError("nested counts must lie in (0, count]")
    batch = samples if samples is not None else draw_gibbs(config, seed, count, workers)
    if len(batch) != count:
        raise ValueError("sample batch does not match count")
    cT, _ = evolve_ensemble(batch.coeffs, params, integrator, T, workers=workers)

    def report(k):
        lw = batch.log_weights[:k]
        keep = np.isfinite(lw)
        wn = _normalized_weights(lw[keep])
        a, b = batch.coeffs[:k][keep], cT[:k][keep]
        stats = {name: paired_statistic(f(a), f(b), wn) for name, f in observables.items()}
        resolved = dict(config.to_dict(), T=T, count=k, seed=seed,
                        scheme=integrator.scheme, dt=integrator.dt, substep=integrator.substep,
                        observables=list(observables))
        return InvarianceReport(stats, T, params.n_modes, k, _ess(wn),
                                integrator.scheme, integrator.dt, resolved)

    out = report(count)
    out.nested = {int(k): report(int(k)) for k in nested}
    return out


# ---------------------------------------------------------------------------
# Gaussian tails

def gaussian_tail_bound(K) -> np.ndarray:
    return np.exp(-np.asarray(K, dtype=float) ** 2 / 4)


@dataclass
class TailReport:
    K: np.ndarray
    prob: np.ndarray
    std_error: np.ndarray
    bound: np.ndarray
    constant: float
    holds: bool
    monotone: bool
    config: dict = field(default_factory=dict)

    def rows(self):
        return zip(self.K, self.prob, self.std_error, self.bound)

    def to_dict(self) -> dict:
        return {
            "config": self.config, "constant": self.constant, "holds": self.holds,
            "monotone": self.monotone,
            "rows": [{"K": float(k), "empirical_prob": float(p), "std_error": float(e),
                      "bound": float(b)} for k, p, e, b in self.rows()],
        }

    def write_csv(self, path) -> None:
        _write_rows(path, ["K", "empirical_prob", "std_error", "bound"], self.rows())


def exceedance(norms: np.ndarray, k_grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ``P(norm > K)`` and its binomial standard error for each K."""
    n = len(norms)
    srt = np.sort(norms)
    above = n - np.searchsorted(srt, k_grid, side="right")
    p = above / n
    return p, np.sqrt(p * (1 - p) / n)


def tail_test(config: MeasureConfig, k_grid: Sequence[float], count: int, seed: int = 0,
              workers: int = 1, n_se: float = 3.0) -> TailReport:
    """Empirical ``P(||u||_{H^s} > K)`` under the Gaussian measure vs ``C exp(-K^2/4)``.

    ``C`` is fitted on the even-indexed samples as the largest ratio of the
    empirical probability to the Gaussian bound; the inequality is then
    checked on the odd-indexed samples, allowing ``n_se`` binomial standard
    errors.  The reported probabilities use the full ensemble.
    """
    ks = np.asarray(k_grid, dtype=float)
    if ks.ndim != 1 or len(ks) == 0 or np.any(ks < 0) or np.any(np.diff(ks) <= 0):
        raise ValueError("k_grid must be nonnegative and strictly ascending")
    if count < 2:
        raise ValueError("count must be >= 2")
    s = config.params.s
    c = gaussian_ensemble(config, seed, count, workers)
    norms = sobolev_norm(c, s)
    prob, se = exceedance(norms, ks)
    bound = gaussian_tail_bound(ks)
    p_fit, _ = exceedance(norms[0::2], ks)
    p_chk, se_chk = exceedance(norms[1::2], ks)
    constant = float(np.max(p_fit / bound))
    holds = bool(np.all(p_chk <= constant * bound + n_se * se_chk))
    monotone = bool(np.all(np.diff(prob) <= 0))
    resolved = dict(config.to_dict(), k_grid=[float(k) for k in ks], count=count, seed=seed)
    return TailReport(ks, prob, se, bound, constant, holds, monotone, resolved)


def log_tail_concave(report: TailReport) -> bool:
    """Whether ``log P`` is concave and decreasing in ``K^2`` where it is positive."""
    pos = report.prob > 0
    x = report.K[pos] ** 2
    y = np.log(report.prob[pos])
    if len(x) < 3:
        return True
    slopes = np.diff(y) / np.diff(x)
    return bool(np.all(slopes <= 0) and np.all(np.diff(slopes) <= 1e-12))


# ---------------------------------------------------------------------------
# truncation convergence

@dataclass
class ConvergenceTable:
    n_list: list[int]
    errors: list[float]
    slope: float
    residual: float
    config: dict = field(default_factory=dict)

    def rows(self):
        return zip(self.n_list, self.errors)

    def to_dict(self) -> dict:
        return {"config": self.config, "slope": self.slope, "residual": self.residual,
                "rows": [{"N": n, "error": e} for n, e in self.rows()]}

    def write_csv(self, path) -> None:
        _write_rows(path, ["N", "error"], self.rows())


def fit_loglog(ns: Sequence[int], errors: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of ``log error`` vs ``log N`` and the RMS residual."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    if len(x) < 2 or not np.all(np.isfinite(y)):
        return float("nan"), float("nan")
    coef, res, *_ = np.polyfit(x, y, 1, full=True)
    rms = math.sqrt(res[0] / len(x)) if len(res) else 0.0
    return float(coef[0]), rms


def convergence_study(params: ModelParams, s: float, s_prime: float, n_list: Sequence[int],
                      n_ref: int, T: float, delta: float = 0.01, seed: int = 0,
                      dt: float | None = None, scheme: str = "rk4",
                      initial: SpectralState | None = None) -> ConvergenceTable:
    """Error ``||u_ref(T) - u_N(T)||_{H^s'}`` of Galerkin truncations.

    The initial datum is :func:`fracnls.spectral.power_law_state` at order
    ``n_ref`` (unless ``initial`` is given); each truncation starts from its
    projection and is integrated with the same scheme and step as the
    reference, then zero-extended to ``n_ref`` for comparison.
    """
    ns = [int(n) for n in n_list]
    if not ns or any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n_list must be strictly increasing")
    if not s_prime < s:
        raise ValueError("need s' < s")
    if n_ref < ns[-1]:
        raise ValueError("n_ref must be at least max(n_list)")
    ref_params = params.with_modes(n_ref)
    dt = dt if dt is not None else default_dt(ref_params)
    integ = IntegratorConfig(scheme, dt)
    u0 = initial if initial is not None else power_law_state(n_ref, s, delta, seed)
    if u0.n_modes != n_ref:
        raise ValueError("initial state must have order n_ref")
    ref, _ = evolve_batch(u0.coeffs, ref_params, integ, T)
    errors = []
    for n in ns:
        start = project(u0.coeffs, n, reindex=True)
        un, _ = evolve_batch(start, params.with_modes(n), integ, T)
        errors.append(float(sobolev_norm(ref - extend(un, n_ref), s_prime)))
    fit_ns = [n for n, e in zip(ns, errors) if e > 0]
    slope, resid = fit_loglog(fit_ns, [e for e in errors if e > 0])
    resolved = {"alpha": params.alpha, "gamma": params.gamma, "s": s, "s_prime": s_prime,
                "n_list": ns, "n_ref": n_ref, "T": T, "delta": delta, "seed": seed,
                "dt": dt, "scheme": scheme}
    return ConvergenceTable(ns, errors, slope, resid, resolved)


def truncation_tail(n_modes: int, s: float, s_prime: float, delta: float = 0.01,
                    n_ref: int | None = None) -> float:
    """``||u_0 - P_N u_0||_{H^s'}`` for the power-law datum, summed directly."""
    top = n_ref if n_ref is not None else 10 ** 7
    n = np.arange(n_modes + 1, top + 1, dtype=float)
    terms = 2 * (1 + n ** 2) ** s_prime * n ** (-2 * s - 1 - 2 * delta)
    return float(math.sqrt(np.sum(terms)))


# ---------------------------------------------------------------------------
# norm growth

def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    """Inverse of the weighted empirical CDF (smallest x with F(x) >= q)."""
    order = np.argsort(values, kind="stable")
    v = np.asarray(values)[order]
    cw = np.cumsum(np.asarray(weights, dtype=float)[order])
    cw /= cw[-1]
    idx = np.searchsorted(cw, np.asarray(q, dtype=float) - 1e-12, side="left")
    return v[np.minimum(idx, len(v) - 1)]


def weighted_ks(x: np.ndarray, y: np.ndarray, weights: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between two weighted samples sharing weights."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    grid = np.union1d(x, y)

    def cdf(v):
        order = np.argsort(v, kind="stable")
        cw = np.concatenate([[0.0], np.cumsum(w[order])])
        return cw[np.searchsorted(v[order], grid, side="right")]

    return float(np.max(np.abs(cdf(np.asarray(x)) - cdf(np.asarray(y)))))


def ks_threshold(ess: float, level: float = 0.001) -> float:
    """Two-sample KS critical distance at the given level with effective sizes ``ess``."""
    c = math.sqrt(-0.5 * math.log(level / 2))
    return c * math.sqrt(2.0 / ess)


@dataclass
class GrowthModelFit:
    log_coeffs: tuple[float, float]
    log_residual: float
    power_coeffs: tuple[float, float, float]
    power_residual: float

    @property
    def prefers_log(self) -> bool:
        return self.log_coeffs[1] >= 0 and self.log_residual <= self.power_residual


@dataclass
class NormGrowthTable:
    times: list[float]
    quantile_levels: tuple[float, ...]
    quantiles: np.ndarray        # (len(times), len(levels))
    mass_quantiles: np.ndarray
    ks: list[float]
    ks_limit: float
    ess: float
    aborted: bool = False
    message: str = ""
    config: dict = field(default_factory=dict)

    def rows(self):
        for t, q, k in zip(self.times, self.quantiles, self.ks):
            yield (t, *q, k)

    def header(self) -> list[str]:
        return ["t", *[f"q{lvl!r}" for lvl in self.quantile_levels], "ks"]

    def fit(self, level: float = 0.99) -> GrowthModelFit:
        j = self.quantile_levels.index(level)
        return fit_growth_models(np.asarray(self.times), self.quantiles[:, j])

    def to_dict(self) -> dict:
        return {"config": self.config, "ess": self.ess, "ks_limit": self.ks_limit,
                "aborted": self.aborted, "message": self.message,
                "header": self.header(), "rows": [list(map(float, r)) for r in self.rows()]}

    def write_csv(self, path) -> None:
        _write_rows(path, self.header(), self.rows())


def fit_growth_models(times: np.ndarray, q: np.ndarray,
                      exponents: Sequence[float] = (0.5, 0.75, 1.0, 1.5, 2.0)) -> GrowthModelFit:
    """Compare ``a + b sqrt(log(1+t))`` against ``a + b t^c`` for ``c >= 0.5``.

    The power model's residual is the best over the listed exponents.
    """
    t = np.asarray(times, dtype=float)
    q = np.asarray(q, dtype=float)

    def lsq(x):
        A = np.column_stack([np.ones_like(x), x])
        coef, *_ = np.linalg.lstsq(A, q, rcond=None)
        return coef, float(np.sqrt(np.mean((A @ coef - q) ** 2)))

    lc, lr = lsq(np.sqrt(np.log1p(t)))
    best = None
    for c in exponents:
        coef, r = lsq(t ** c)
        if best is None or r < best[1]:
            best = ((float(coef[0]), float(coef[1]), float(c)), r)
    return GrowthModelFit((float(lc[0]), float(lc[1])), lr, best[0], best[1])


def norm_growth(config: MeasureConfig, T_max: float, checkpoint_times: Sequence[float],
                count: int, sigma: float, seed: int = 0,
                integrator: IntegratorConfig | None = None, workers: int = 1,
                levels: tuple[float, ...] = (0.5, 0.9, 0.99)) -> NormGrowthTable:
    """Weighted quantiles of ``||u(t)||_{H^sigma}`` over a ``mu_N`` ensemble.

    Also records mass quantiles (pathwise conserved) and, per checkpoint, the
    weighted KS distance to the ``t = 0`` distribution of the norm.
    """
    times = [float(t) for t in checkpoint_times]
    if any(b < a for a, b in zip(times, times[1:])) or (times and times[-1] > T_max):
        raise ValueError("checkpoint_times must be ascending and <= T_max")
    from .dynamics import IntegrationError
    from .spectral import mass
    integrator = integrator or IntegratorConfig("strang", 1e-3)
    batch = draw_gibbs(config, seed, count, workers)
    keep = np.isfinite(batch.log_weights)
    c0 = batch.coeffs[keep]
    wn = _normalized_weights(batch.log_weights[keep])
    aborted, message = False, ""
    try:
        _, snaps = evolve_ensemble(c0, config.params, integrator, T_max, times, workers)
    except IntegrationError as exc:
        aborted, message, snaps = True, str(exc), []
    base = sobolev_norm(c0, sigma)
    qs, ms, ks = [], [], []
    for snap in snaps:
        vals = sobolev_norm(snap, sigma)
        qs.append(weighted_quantile(vals, wn, levels))
        ms.append(weighted_quantile(mass(snap), wn, levels))
        ks.append(weighted_ks(base, vals, wn))
    resolved = dict(config.to_dict(), T_max=T_max, checkpoint_times=times, count=count,
                    sigma=sigma, seed=seed, scheme=integrator.scheme, dt=integrator.dt)
    ess = _ess(wn)
    shape = (len(qs), len(levels))
    return NormGrowthTable(times[:len(qs)], tuple(levels), np.array(qs).reshape(shape),
                           np.array(ms).reshape(shape), ks, ks_threshold(ess), ess,
                           aborted, message, resolved)
