"""Deterministic generation of (X, Y, S) samples and selection calibration.

Randomness is counter based: row ``i`` of stream ``(master_seed, stream_id)``
draws from a Philox generator keyed by a hash of ``(master_seed, stream_id,
i // CHUNK_ROWS)``, at position ``i % CHUNK_ROWS`` of that block. Every row's
draw is therefore a pure function of its index, and any partition of the rows
reproduces the sequential result exactly.
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, special, stats

from .models import (ColliderModel, Dataset, ExposureSpec, NumericalError, OutcomeModel,
                     ValidationError, logadditive_support_max)

log = logging.getLogger(__name__)

CHUNK_ROWS = 1 << 16
CALIBRATION_ROWS = 10**6
CALIBRATION_STREAM = "__calibration__"
CALIBRATION_TOL = 0.002
DELTA0_BRACKET = (-20.0, 20.0)
POISSON_MAX_ETA = 700.0
# sequential CDF search is used below this rate, scipy's inverse above it
_POISSON_SEARCH_MAX_RATE = 50.0


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    stream_id: str = ""

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValidationError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")

    def child(self, name: str) -> "SeedSpec":
        return SeedSpec(self.master_seed, f"{self.stream_id}/{name}" if self.stream_id else name)


def _block_key(seed: SeedSpec, block: int) -> int:
    h = hashlib.blake2b(digest_size=16, person=b"collider-lab-rng")
    h.update(struct.pack("<Q", int(seed.master_seed)))
    h.update(seed.stream_id.encode("utf-8"))
    h.update(struct.pack("<Q", block))
    return int.from_bytes(h.digest(), "little")


def _block_draws(seed: SeedSpec, start: int, stop: int, kind: str) -> np.ndarray:
    out = np.empty(stop - start)
    pos = start
    while pos < stop:
        block = pos // CHUNK_ROWS
        lo = block * CHUNK_ROWS
        hi = min(lo + CHUNK_ROWS, stop)
        gen = np.random.Generator(np.random.Philox(key=_block_key(seed, block)))
        if kind == "uniform":
            # (0, 1) open: inverse-CDF sampling never sees u == 0
            draws = (gen.integers(0, 2**53, size=hi - lo, dtype=np.uint64) + 0.5) * 2.0**-53
        else:
            draws = gen.standard_normal(size=hi - lo)
        out[pos - start:hi - start] = draws[pos - lo:]
        pos = hi
    return out


def uniforms(seed: SeedSpec, n: int, offset: int = 0) -> np.ndarray:
    return _block_draws(seed, offset, offset + n, "uniform")


def normals(seed: SeedSpec, n: int, offset: int = 0) -> np.ndarray:
    return _block_draws(seed, offset, offset + n, "normal")


def _check_n(n: int) -> int:
    if int(n) != n or n < 1:
        raise ValidationError(f"n must be a positive integer, got {n}")
    return int(n)


def gen_exposure(spec: ExposureSpec, n: int, seed: SeedSpec, offset: int = 0) -> np.ndarray:
    n = _check_n(n)
    if spec.kind == "bernoulli":
        return (uniforms(seed, n, offset) < spec.p).astype(float)
    return spec.mean + spec.sd * normals(seed, n, offset)


def poisson_inverse_cdf(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Smallest ``k`` with ``F(k; lam) >= u``, elementwise."""
    u = np.asarray(u, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), u.shape)
    out = np.empty(u.shape)
    small = lam <= _POISSON_SEARCH_MAX_RATE
    if np.any(~small):
        out[~small] = stats.poisson.ppf(u[~small], lam[~small])
    idx = np.flatnonzero(small)
    if idx.size:
        lam_s = lam[idx]
        k = np.zeros(idx.size)
        pmf = np.exp(-lam_s)
        cdf = pmf.copy()
        active = np.flatnonzero(u[idx] > cdf)
        while active.size:
            k[active] += 1
            pmf[active] *= lam_s[active] / k[active]
            cdf[active] += pmf[active]
            # pmf underflow beyond the mode: the remaining mass is below rounding
            done = (u[idx[active]] <= cdf[active]) | ((pmf[active] == 0) & (k[active] > lam_s[active]))
            active = active[~done]
        out[idx] = k
    return out


def gen_outcome(model: OutcomeModel, x, seed: SeedSpec, offset: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("exposure values must be finite")
    n = _check_n(x.shape[0])
    eta = model.linear_predictor(x)
    if model.kind == "logistic":
        return (uniforms(seed, n, offset) < special.expit(eta)).astype(float)
    if model.kind == "linear":
        return eta + model.sigma * normals(seed, n, offset)
    bad = np.flatnonzero(eta > POISSON_MAX_ETA)
    if bad.size:
        raise NumericalError(f"Poisson rate overflow at row {bad[0] + offset}: log-rate {eta[bad[0]]}")
    return poisson_inverse_cdf(uniforms(seed, n, offset), np.exp(eta))


def gen_collider(model: ColliderModel, x, y, seed: SeedSpec, offset: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValidationError(f"x and y lengths differ: {x.shape} vs {y.shape}")
    n = _check_n(x.shape[0])
    eta = model.index(x, y)
    if model.kind in ("probit", "double_threshold"):
        latent = eta + model.latent_sd * normals(seed, n, offset)
        if model.kind == "probit":
            return (latent > 0).astype(float)
        return ((latent < model.r_lower) | (latent > model.r_upper)).astype(float)
    u = uniforms(seed, n, offset)
    if model.kind == "logistic":
        return (u < special.expit(eta)).astype(float)
    bad = np.flatnonzero(eta > 0)
    if bad.size:
        i = bad[0]
        raise ValidationError(
            f"log-additive selection probability exp({eta[i]:.6g}) > 1 at row {i + offset} "
            f"(x={x[i]}, y={y[i]})")
    return (u < np.exp(eta)).astype(float)


def simulate(exposure: ExposureSpec, outcome: OutcomeModel, collider: ColliderModel,
             n: int, seed: SeedSpec) -> Dataset:
    """Draw a full (x, y, s) dataset using independent child streams."""
    x = gen_exposure(exposure, n, seed.child("x"))
    y = gen_outcome(outcome, x, seed.child("y"))
    s = gen_collider(collider, x, y, seed.child("s"))
    return Dataset({"x": x, "y": y, "s": s})


@lru_cache(maxsize=32)
def _calibration_sample(exposure: ExposureSpec, outcome: OutcomeModel, n: int, master_seed: int):
    seed = SeedSpec(master_seed, CALIBRATION_STREAM)
    x = gen_exposure(exposure, n, seed.child("x"))
    y = gen_outcome(outcome, x, seed.child("y"))
    z = normals(seed.child("z"), n)
    for a in (x, y, z):
        a.setflags(write=False)
    return x, y, z


def calibrate_selection(model: ColliderModel, exposure: ExposureSpec, outcome: OutcomeModel,
                        target: float, *, n_calibration: int = CALIBRATION_ROWS,
                        master_seed: int = 0) -> ColliderModel:
    """Tune the collider so that a fraction ``target`` of rows is selected.

    For log-additive, logistic and probit colliders the intercept ``delta0``
    is found by root finding on ``[-20, 20]``; the selected fraction on the
    calibration sample is the average of ``P(S = 1 | x_i, y_i)``. For the
    double-threshold model ``delta0`` is fixed at 0 and the thresholds are put
    at the ``target/2`` and ``1 - target/2`` empirical quantiles of the latent
    variable, i.e. the selected mass is split evenly between both tails
    (quartiles for ``target = 0.5``).
    """
    if not 0.01 < target < 0.99:
        raise ValidationError(f"selection target must lie in (0.01, 0.99), got {target}")
    x, y, z = _calibration_sample(exposure, outcome, int(n_calibration), int(master_seed))
    rest = model.index(x, y) - model.delta0

    if model.kind == "double_threshold":
        latent = rest + model.latent_sd * z
        r_lower, r_upper = np.quantile(latent, [target / 2, 1 - target / 2])
        calibrated = model.replace(delta0=0.0, r_lower=float(r_lower), r_upper=float(r_upper))
        fraction = np.mean((latent < r_lower) | (latent > r_upper))
    else:
        def fraction_at(d0: float) -> float:
            eta = d0 + rest
            if model.kind == "logistic":
                return float(np.mean(special.expit(eta)))
            if model.kind == "probit":
                return float(np.mean(special.ndtr(eta / model.latent_sd)))
            return float(np.mean(np.exp(np.minimum(eta, 0.0))))

        lo, hi = DELTA0_BRACKET
        f_lo, f_hi = fraction_at(lo) - target, fraction_at(hi) - target
        if f_lo * f_hi > 0:
            raise NumericalError(
                f"selection target {target} unreachable with delta0 in [{lo}, {hi}] "
                f"(fractions {f_lo + target:.4g} .. {f_hi + target:.4g})")
        d0 = optimize.brentq(lambda d: fraction_at(d) - target, lo, hi, xtol=1e-13, rtol=1e-14)
        calibrated = model.replace(delta0=float(d0))
        fraction = fraction_at(d0)
        if model.kind == "log_additive":
            top, where = logadditive_support_max(calibrated, exposure.support, outcome.support)
            if top > 0:
                raise NumericalError(
                    f"calibrated log-additive collider is invalid at (x, y) = {where}")
    if abs(fraction - target) > CALIBRATION_TOL:
        raise NumericalError(f"calibration missed target {target}: got {fraction}")
    log.debug("calibrated %s collider to %.4f: %s", model.kind, target, calibrated)
    return calibrated


def quartile_thresholds(latent_sd: float) -> tuple[float, float]:
    """Quartiles of N(0, latent_sd**2), the null-model double-threshold cut points."""
    q = latent_sd * special.ndtri(0.75)
    return -q, q

