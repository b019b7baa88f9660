"""Gaussian and Gibbs measures on the truncated phase space.

The Gaussian measure ``w_N`` makes ``Re c_n`` and ``Im c_n`` independent
centered normals with variance ``|n|^(-2 alpha)`` for ``1 <= |n| <= N``.  The
Gibbs measure ``mu_N`` has density ``exp(+gamma/4 * q(u))`` relative to it,
where ``q`` is the normalized quartic integral; the focusing case carries the
L^2 cutoff ``sum |c_n|^2 <= B^2``.  The zero mode has no Gaussian factor in
the target and is either pinned to zero or drawn from a Gaussian proposal
whose density is divided out in the weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache, partial
from typing import Callable, Iterable, Sequence

import numpy as np

from . import streams
from .spectral import (
    ModelParams,
    SpectralState,
    _unwrap,
    mass,
    modes_of,
    quartic_integral,
    sobolev_norm,
    wavenumbers,
)

ZERO_MODES = ("pinned", "gaussian")
METHODS = ("rejection", "importance")


class SamplingError(RuntimeError):
    """Sampling cannot proceed (e.g. vanishing acceptance rate)."""


@dataclass(frozen=True)
class MeasureConfig:
    """Which measure to sample and how.

    Attributes:
        params: Model parameters; ``gamma`` fixes the sign of the quartic weight.
        l2_cutoff: ``B`` in the cutoff ``sum |c_n|^2 <= B^2``; required when focusing.
        zero_mode: ``"pinned"`` (c_0 = 0) or ``"gaussian"`` (proposal with per-component
            standard deviation ``sigma0``, corrected in the weight).
        sigma0: Proposal scale for the zero mode.
        method: ``"rejection"`` (defocusing, pinned zero mode only) or ``"importance"``.
    """

    params: ModelParams
    l2_cutoff: float | None = None
    zero_mode: str = "pinned"
    sigma0: float = 1.0
    method: str = "importance"

    def __post_init__(self):
        if self.zero_mode not in ZERO_MODES:
            raise ValueError(f"zero_mode must be one of {ZERO_MODES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.params.gamma == 1 and self.l2_cutoff is None:
            raise ValueError("the focusing measure needs an L2 cutoff B")
        if self.l2_cutoff is not None and not self.l2_cutoff > 0:
            raise ValueError("l2_cutoff must be positive")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.method == "rejection" and self.params.gamma != -1:
            raise ValueError("rejection sampling needs gamma = -1")

    @property
    def n_modes(self) -> int:
        return self.params.n_modes

    @property
    def log_envelope(self) -> float:
        """Upper bound on the defocusing log weight (the rejection envelope).

        With a pinned zero mode the weight ``exp(-q/4)`` is at most 1.  With a
        Gaussian zero-mode proposal, ``q >= mass^2 >= |c_0|^4`` gives
        ``-q/4 + |c_0|^2/(2 sigma0^2) <= max_x (-x^2/4 + x/(2 sigma0^2)) = 1/(4 sigma0^4)``.
        """
        if self.params.gamma != -1:
            raise ValueError("the focusing weight has no envelope")
        return 0.0 if self.zero_mode == "pinned" else 0.25 / self.sigma0 ** 4

    def with_modes(self, n_modes: int) -> "MeasureConfig":
        return MeasureConfig(self.params.with_modes(n_modes), self.l2_cutoff,
                             self.zero_mode, self.sigma0, self.method)

    def to_dict(self) -> dict:
        return {
            "alpha": self.params.alpha, "gamma": self.params.gamma,
            "n_modes": self.params.n_modes, "s": self.params.s,
            "l2_cutoff": self.l2_cutoff, "zero_mode": self.zero_mode,
            "sigma0": self.sigma0, "method": self.method,
        }


@dataclass(frozen=True)
class WeightedSample:
    """A state with the log of its unnormalized importance weight.

    A zero weight (cutoff violation) is stored as ``-inf``.
    """

    state: SpectralState
    log_weight: float

    def to_dict(self, alpha: float | None = None) -> dict:
        from .spectral import state_to_dict
        lw = self.log_weight
        return {"log_weight": lw if math.isfinite(lw) else None,
                "state": state_to_dict(self.state, alpha)}


@dataclass
class SampleBatch:
    """An ensemble in array form: ``coeffs`` is ``(count, 2N+1)``."""

    coeffs: np.ndarray
    log_weights: np.ndarray
    indices: np.ndarray
    n_proposed: int

    def __len__(self):
        return self.coeffs.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return len(self) / self.n_proposed if self.n_proposed else float("nan")

    @property
    def n_modes(self) -> int:
        return modes_of(self.coeffs)

    def samples(self) -> list[WeightedSample]:
        n = self.n_modes
        return [WeightedSample(SpectralState(n, c), float(lw))
                for c, lw in zip(self.coeffs, self.log_weights)]


@dataclass(frozen=True)
class Estimate:
    estimate: float
    std_error: float
    n_samples: int
    ess: float

    def as_tuple(self):
        return self.estimate, self.std_error, self.ess


@dataclass
class EnsembleReport:
    """Observable name -> weighted Monte Carlo estimate."""

    estimates: dict[str, Estimate] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.estimates[name]

    def to_dict(self) -> dict:
        return {k: vars(v) for k, v in self.estimates.items()}


# ---------------------------------------------------------------------------
# Gaussian proposal

def mode_std(n_modes: int, alpha: float) -> np.ndarray:
    """Per-component standard deviation ``|n|^(-alpha)``; zero at ``n = 0``."""
    n = np.abs(wavenumbers(n_modes)).astype(float)
    out = np.zeros_like(n)
    out[n > 0] = n[n > 0] ** (-alpha)
    return out


@lru_cache(maxsize=64)
def _proposal_std(n_modes: int, alpha: float, zero_mode: str, sigma0: float) -> np.ndarray:
    sd = mode_std(n_modes, alpha)
    if zero_mode == "gaussian":
        sd[n_modes] = sigma0
    sd.setflags(write=False)
    return sd


def _coeffs_from_normals(config: MeasureConfig, normals: np.ndarray) -> np.ndarray:
    """``normals`` has shape ``(..., 2, 2N+1)`` (real parts, imaginary parts)."""
    sd = _proposal_std(config.n_modes, config.params.alpha, config.zero_mode, config.sigma0)
    out = np.empty(normals.shape[:-2] + normals.shape[-1:], dtype=np.complex128)
    np.multiply(normals[..., 0, :], sd, out=out.real)
    np.multiply(normals[..., 1, :], sd, out=out.imag)
    return out


def sample_gaussian(config: MeasureConfig, rng: np.random.Generator) -> SpectralState:
    """One draw from the Gaussian proposal using the given generator."""
    normals = rng.standard_normal((2, 2 * config.n_modes + 1))
    return SpectralState(config.n_modes, _coeffs_from_normals(config, normals))


def _proposal_block(config: MeasureConfig, seed: int, block: int):
    rng = streams.block_rng(seed, block)
    normals = rng.standard_normal((streams.BLOCK_SIZE, 2, 2 * config.n_modes + 1))
    uniforms = rng.random(streams.BLOCK_SIZE)
    return _coeffs_from_normals(config, normals), uniforms


def draw_proposals(config: MeasureConfig, seed: int, start: int, stop: int,
                   with_uniforms: bool = False):
    """Proposal draws for sample indices ``[start, stop)``."""
    parts, unis = [], []
    for b in streams.blocks_for(start, stop):
        c, u = _proposal_block(config, seed, b)
        lo = max(start - b * streams.BLOCK_SIZE, 0)
        hi = min(stop - b * streams.BLOCK_SIZE, streams.BLOCK_SIZE)
        parts.append(c[lo:hi])
        unis.append(u[lo:hi])
    if not parts:
        coeffs = np.empty((0, 2 * config.n_modes + 1), dtype=np.complex128)
        uniforms = np.empty(0)
    else:
        coeffs, uniforms = np.concatenate(parts), np.concatenate(unis)
    return (coeffs, uniforms) if with_uniforms else coeffs


def gaussian_ensemble(config: MeasureConfig, seed: int, count: int,
                      workers: int = 1) -> np.ndarray:
    """``count`` proposal draws (indices ``0..count-1``) as a ``(count, 2N+1)`` array."""
    chunks = [(b * streams.BLOCK_SIZE, min((b + 1) * streams.BLOCK_SIZE, count))
              for b in streams.blocks_for(0, count)]
    parts = streams.ordered_map(partial(_draw_range, config, seed), chunks, workers)
    if not parts:
        return np.empty((0, 2 * config.n_modes + 1), dtype=np.complex128)
    return np.concatenate(parts)


def _draw_range(config, seed, bounds):
    return draw_proposals(config, seed, *bounds)


# ---------------------------------------------------------------------------
# Gibbs weights

def gibbs_log_weight(state, config: MeasureConfig):
    """Log of the density of ``mu_N`` relative to the proposal (unnormalized).

    ``+gamma/4 * q(u)``, plus ``|c_0|^2 / (2 sigma0^2)`` for a Gaussian zero-mode
    proposal; ``-inf`` when the L^2 cutoff is violated.  Accepts batches.
    """
    c, as_state = _unwrap(state)
    p = config.params
    lw = 0.25 * p.gamma * quartic_integral(c)
    if config.zero_mode == "gaussian":
        c0 = c[..., config.n_modes]
        lw = lw + (c0.real ** 2 + c0.imag ** 2) / (2 * config.sigma0 ** 2)
    if config.l2_cutoff is not None:
        lw = np.where(mass(c) <= config.l2_cutoff ** 2, lw, -np.inf)
    return float(lw) if as_state else np.asarray(lw, dtype=float)


def _rejection_block(config: MeasureConfig, seed: int, block: int):
    c, u = _proposal_block(config, seed, block)
    log_u = np.log(u) + config.log_envelope
    # q >= mass^2 bounds the weight from above without a transform; proposals
    # failing the bound are rejected exactly, the rest get the full test
    m = np.sum(c.real ** 2 + c.imag ** 2, axis=-1)
    upper = -0.25 * m ** 2
    if config.zero_mode == "gaussian":
        c0 = c[:, config.n_modes]
        upper = upper + (c0.real ** 2 + c0.imag ** 2) / (2 * config.sigma0 ** 2)
    cand = np.nonzero(log_u < upper)[0]
    keep = log_u[cand] < gibbs_log_weight(c[cand], config)
    idx = cand[keep]
    return idx + block * streams.BLOCK_SIZE, c[idx]


def _importance_block(config: MeasureConfig, seed: int, bounds):
    c = draw_proposals(config, seed, *bounds)
    return c, gibbs_log_weight(c, config)


def _log_weight_block(config: MeasureConfig, seed: int, bounds):
    return gibbs_log_weight(draw_proposals(config, seed, *bounds), config)


def draw_gibbs(config: MeasureConfig, seed: int, count: int, workers: int = 1,
               min_acceptance: float = 1e-4, window: int = 10_000) -> SampleBatch:
    """Draw ``count`` weighted samples of ``mu_N``.

    Rejection (defocusing): proposal ``i`` is accepted iff
    ``U_i < exp(log_weight - log_envelope)`` (for a pinned zero mode simply
    ``exp(-q/4)``); the first
    ``count`` accepted proposals (by index) are returned with zero log weight.
    Sampling aborts once at least ``window`` proposals have been made and a
    one-sided upper bound on the acceptance rate falls below ``min_acceptance``.

    Importance: proposals ``0..count-1`` with their log weights.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if config.method == "importance":
        chunks = [(b * streams.BLOCK_SIZE, min((b + 1) * streams.BLOCK_SIZE, count))
                  for b in streams.blocks_for(0, count)]
        parts = streams.ordered_map(partial(_importance_block, config, seed), chunks, workers)
        coeffs = np.concatenate([p[0] for p in parts])
        lw = np.concatenate([p[1] for p in parts])
        return SampleBatch(coeffs, lw, np.arange(count), count)

    found_idx, found = [], []
    n_found = 0
    block = 0
    wave = max(1, workers) * 4
    func = partial(_rejection_block, config, seed)
    while n_found < count:
        results = streams.ordered_map(func, range(block, block + wave), workers)
        for b_idx, (idx, c) in zip(range(block, block + wave), results):
            found_idx.append(idx)
            found.append(c)
            n_found += len(idx)
            n_proposed = (b_idx + 1) * streams.BLOCK_SIZE
            if n_found >= count:
                break
            # 3-sigma Poisson upper bound on the acceptance rate
            upper = (n_found + 1 + 3 * math.sqrt(n_found + 1)) / n_proposed
            if n_proposed >= window and upper < min_acceptance:
                raise SamplingError(
                    f"acceptance rate {n_found / n_proposed:.2e} after {n_proposed} proposals "
                    f"is below {min_acceptance:g}; reduce N, raise alpha, or use "
                    "importance sampling")
        block += wave
    idx = np.concatenate(found_idx)[:count]
    coeffs = np.concatenate(found)[:count]
    # proposals consumed up to and including the last accepted one
    n_proposed = int(idx[-1]) + 1
    return SampleBatch(coeffs, np.zeros(count), idx, n_proposed)


def sample_gibbs(config: MeasureConfig, seed: int, count: int,
                 workers: int = 1) -> list[WeightedSample]:
    return draw_gibbs(config, seed, count, workers).samples()


# ---------------------------------------------------------------------------
# estimators

def weighted_estimate(values, log_weights=None) -> Estimate:
    """Self-normalized estimate ``sum w phi / sum w`` with delta-method SE."""
    phi = np.asarray(values, dtype=float)
    n = phi.shape[0]
    if log_weights is None:
        w = np.ones(n)
    else:
        lw = np.asarray(log_weights, dtype=float)
        if not np.any(np.isfinite(lw)):
            raise ValueError("all weights are zero")
        w = np.exp(lw - np.max(lw[np.isfinite(lw)]))
    total = w.sum()
    if not total > 0:
        raise ValueError("all weights are zero")
    wn = w / total
    est = float(np.dot(wn, phi))
    se = float(math.sqrt(np.sum(wn ** 2 * (phi - est) ** 2)))
    ess = float(total ** 2 / np.sum(w ** 2))
    return Estimate(est, se, n, min(ess, float(n)))


def ensemble_estimate(samples, observable: Callable) -> Estimate:
    """Estimate ``E[observable]`` from weighted samples.

    ``samples`` is a :class:`SampleBatch` or a sequence of :class:`WeightedSample`;
    ``observable`` maps a coefficient array ``(count, 2N+1)`` to ``(count,)``.
    """
    if isinstance(samples, SampleBatch):
        coeffs, lw = samples.coeffs, samples.log_weights
    else:
        samples = list(samples)
        coeffs = np.stack([s.state.coeffs for s in samples])
        lw = np.array([s.log_weight for s in samples])
    return weighted_estimate(observable(coeffs), lw)


def mean_weight(log_weights) -> Estimate:
    """Plain Monte Carlo mean of ``exp(log_weights)`` (normalizing constant)."""
    w = np.exp(np.asarray(log_weights, dtype=float))
    n = w.shape[0]
    total = w.sum()
    se = float(np.std(w, ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    ess = float(total ** 2 / np.sum(w ** 2)) if total > 0 else 0.0
    return Estimate(float(w.mean()), se, n, ess)


# ---------------------------------------------------------------------------
# partition function

@dataclass(frozen=True)
class PartitionRow:
    n_modes: int
    z: float
    std_error: float
    ess: float

    @property
    def degenerate(self) -> bool:
        return self.ess < 10


def partition_stability(config: MeasureConfig, n_list: Sequence[int], count: int,
                        seed: int = 0, workers: int = 1) -> list[PartitionRow]:
    """Monte Carlo ``Z_N = E_w[exp(gamma/4 q) 1{mass <= B^2}]`` for each N.

    Each N uses the same master seed, so rows share random numbers in their
    low modes only through the seed, not through a common path.
    """
    if list(n_list) != sorted(n_list):
        raise ValueError("n_list must be ascending")
    rows = []
    imp = MeasureConfig(config.params, config.l2_cutoff, config.zero_mode, config.sigma0,
                        "importance")
    for n in n_list:
        cfg = imp.with_modes(n)
        chunks = [(b * streams.BLOCK_SIZE, min((b + 1) * streams.BLOCK_SIZE, count))
                  for b in streams.blocks_for(0, count)]
        # only the weights are kept, so large ensembles stay cheap in memory
        parts = streams.ordered_map(partial(_log_weight_block, cfg, seed), chunks, workers)
        e = mean_weight(np.concatenate(parts))
        rows.append(PartitionRow(n, e.estimate, e.std_error, e.ess))
    return rows


def no_growth(rows: Sequence[PartitionRow], n_se: float = 3.0) -> bool:
    """True unless the largest-N estimate exceeds the constant fit by > n_se SE.

    The constant fit is the inverse-variance weighted mean of all rows.
    """
    z = np.array([r.z for r in rows])
    se = np.array([max(r.std_error, 1e-300) for r in rows])
    w = 1 / se ** 2
    const = float(np.sum(w * z) / np.sum(w))
    return bool(z[-1] - const <= n_se * se[-1])


# ---------------------------------------------------------------------------
# countable additivity diagnostics

def lambda_k(alpha: float, s: float, k_max: int) -> np.ndarray:
    """Partial sums ``lambda_k = sum_{1<=|n|<=k} |n|^(2s - 2 alpha)``, k = 1..k_max.

    Accumulated in extended precision (``numpy.longdouble``).
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    n = np.arange(1, k_max + 1, dtype=np.longdouble)
    terms = 2 * n ** np.longdouble(2 * s - 2 * alpha)
    return np.cumsum(terms, dtype=np.longdouble)


@dataclass(frozen=True)
class GrowthDiagnosis:
    kind: str          # "bounded", "logarithmic" or "power"
    exponent: float    # fitted growth exponent of the dyadic increments
    final: float

    @property
    def convergent(self) -> bool:
        return self.kind == "bounded"


def growth_exponent(lams: np.ndarray, fit_points: int = 6) -> float:
    """Slope of ``log(lambda_2k - lambda_k)`` against ``log k`` over the top dyadic k.

    For terms ``n^p`` the increments scale as ``k^(p+1)``, so the slope
    estimates the growth exponent ``p + 1`` (negative: convergent).
    """
    k_max = len(lams)
    ks = []
    k = k_max // 2
    while k >= 1 and len(ks) < fit_points:
        ks.append(k)
        k //= 2
    ks = np.array(sorted(ks))
    if len(ks) < 2:
        raise ValueError("need k_max >= 4 for a growth fit")
    inc = np.array([float(lams[2 * k - 1] - lams[k - 1]) for k in ks])
    slope, _ = np.polyfit(np.log(ks), np.log(inc), 1)
    return float(slope)


def classify_growth(lams: np.ndarray, tol: float = 0.01) -> GrowthDiagnosis:
    """Bounded (exponent < -tol), logarithmic (|exponent| <= tol) or power growth."""
    e = growth_exponent(lams)
    if e < -tol:
        kind = "bounded"
    elif e <= tol:
        kind = "logarithmic"
    else:
        kind = "power"
    return GrowthDiagnosis(kind, e, float(lams[-1]))


# ---------------------------------------------------------------------------
# observables

Observable = Callable[[np.ndarray], np.ndarray]


def default_observables(params: ModelParams) -> dict[str, Observable]:
    """Mass, two H^sigma norms, the quartic integral, low-mode energies, Re c_1."""
    obs: dict[str, Observable] = {
        "mass": mass,
        "h_norm_0.1": partial(sobolev_norm, sigma=0.1),
        f"h_norm_{params.s!r}": partial(sobolev_norm, sigma=params.s),
        "quartic": quartic_integral,
    }
    n = params.n_modes
    for k in range(-min(n, 4), min(n, 4) + 1):
        obs[f"abs2_{k}"] = partial(_abs2, index=k + n)
    obs["re_c1"] = partial(_re, index=1 + n)
    return obs


def _abs2(c, index):
    z = c[..., index]
    return z.real ** 2 + z.imag ** 2


def _re(c, index):
    return c[..., index].real


def estimate_all(batch: SampleBatch, observables: dict[str, Observable]) -> EnsembleReport:
    return EnsembleReport({name: ensemble_estimate(batch, f) for name, f in observables.items()})


PATHWISE_CONSERVED = frozenset({"mass"})


def iter_jsonl(samples: Iterable[WeightedSample], alpha: float | None = None):
    import json
    for s in samples:
        yield json.dumps(s.to_dict(alpha))
