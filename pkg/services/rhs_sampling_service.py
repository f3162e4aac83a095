import logging
from typing import Literal

import numpy as np
import statsmodels.api as sm
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import norm, qmc

from services.errors import ConfigError
from utils.random_utils import STREAM_LHS_PERMUTATION, STREAM_RHS, substream

logger = logging.getLogger("PLDC")

DEFAULT_TREND = 0.001
DEFAULT_NOISE = 0.02
DEFAULT_LHS_SPREAD = 0.1


class RhsGeneratorConfig(BaseModel):
    """Right-hand-side generator settings.

    Per-row lists are aligned with ``perturbed_rows``; any list left out is
    derived from the nominal right-hand side by ``resolve``.
    """

    model_config = ConfigDict(extra="forbid")

    mode: Literal["time_series", "latin_hypercube"] = "time_series"
    horizon: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)
    perturbed_rows: list[int] | None = None
    a0: list[float] | None = None
    a1: list[float] | None = None
    sigma: list[float] | None = None
    lo: list[float] | None = None
    hi: list[float] | None = None
    midpoint: bool = False

    @model_validator(mode="after")
    def _check_values(self):
        if self.sigma is not None and any(s < 0 for s in self.sigma):
            raise ValueError("sigma must be nonnegative")
        if self.lo is not None and self.hi is not None:
            if len(self.lo) != len(self.hi) or any(l > h for l, h in zip(self.lo, self.hi)):
                raise ValueError("each lo must not exceed its hi")
        return self

    def resolve(self, b_nominal, perturbed_rows=None) -> "RhsGeneratorConfig":
        """Fills row set and per-row parameters from the nominal right-hand side."""
        b = np.asarray(b_nominal, dtype=float).reshape(-1)
        rows = self.perturbed_rows
        if rows is None:
            rows = list(perturbed_rows) if perturbed_rows is not None else list(range(b.size))
        if any(r < 0 or r >= b.size for r in rows):
            raise ConfigError(f"perturbed rows {rows} outside 0..{b.size - 1}")
        base = b[rows]
        spread = DEFAULT_LHS_SPREAD * np.abs(base)
        updates = {
            "perturbed_rows": list(rows),
            "a0": self.a0 if self.a0 is not None else (DEFAULT_TREND * np.abs(base)).tolist(),
            "a1": self.a1 if self.a1 is not None else base.tolist(),
            "sigma": self.sigma if self.sigma is not None else (DEFAULT_NOISE * np.abs(base)).tolist(),
            "lo": self.lo if self.lo is not None else (base - spread).tolist(),
            "hi": self.hi if self.hi is not None else (base + spread).tolist(),
        }
        for key in ("a0", "a1", "sigma", "lo", "hi"):
            if len(updates[key]) != len(rows):
                raise ConfigError(f"'{key}' has {len(updates[key])} entries for {len(rows)} perturbed rows")
        return self.model_copy(update=updates)


def _rows(cfg: RhsGeneratorConfig, b_nominal: np.ndarray) -> RhsGeneratorConfig:
    if cfg.perturbed_rows is None or cfg.a0 is None or cfg.lo is None:
        return cfg.resolve(b_nominal)
    return cfg


def sample_time_series(cfg: RhsGeneratorConfig, b_nominal, rng: np.random.Generator | None = None) -> np.ndarray:
    """b_k^i = a0_k * i + a1_k + e_k^i for i = 1..horizon, one sample per row of the result.

    Noise is the normal inverse CDF applied to counter-based uniforms.
    """
    if cfg.mode != "time_series":
        raise ConfigError(f"sample_time_series called with mode '{cfg.mode}'")
    b = np.asarray(b_nominal, dtype=float).reshape(-1)
    cfg = _rows(cfg, b)
    rng = rng or substream(cfg.seed, STREAM_RHS)
    rows = cfg.perturbed_rows

    uniforms = rng.random((cfg.horizon, len(rows)))
    uniforms = np.where(uniforms == 0.0, np.finfo(float).tiny, uniforms)
    noise = norm.ppf(uniforms) * np.asarray(cfg.sigma)
    index = np.arange(1, cfg.horizon + 1, dtype=float)[:, None]

    samples = np.tile(b, (cfg.horizon, 1))
    samples[:, rows] = np.asarray(cfg.a0) * index + np.asarray(cfg.a1) + noise
    return samples


def sample_lhs(cfg: RhsGeneratorConfig, b_nominal, rng: np.random.Generator | None = None) -> np.ndarray:
    """Latin hypercube over the per-row ranges, exactly one draw per stratum and row."""
    if cfg.mode != "latin_hypercube":
        raise ConfigError(f"sample_lhs called with mode '{cfg.mode}'")
    b = np.asarray(b_nominal, dtype=float).reshape(-1)
    cfg = _rows(cfg, b)
    rng = rng or substream(cfg.seed, STREAM_LHS_PERMUTATION)
    rows = cfg.perturbed_rows

    samples = np.tile(b, (cfg.horizon, 1))
    if rows:
        sampler = qmc.LatinHypercube(d=len(rows), scramble=not cfg.midpoint, rng=rng)
        unit = sampler.random(cfg.horizon)
        lo, hi = np.asarray(cfg.lo), np.asarray(cfg.hi)
        samples[:, rows] = lo + (hi - lo) * unit
    return samples


def sample_rhs(cfg: RhsGeneratorConfig, b_nominal, rng: np.random.Generator | None = None) -> np.ndarray:
    if cfg.mode == "time_series":
        return sample_time_series(cfg, b_nominal, rng)
    return sample_lhs(cfg, b_nominal, rng)


def build_rhs_pool(cfg: RhsGeneratorConfig, b_nominal, size: int = 5000) -> np.ndarray:
    """Pre-generated pool the sequential procedure resamples from."""
    pool = sample_rhs(cfg.model_copy(update={"horizon": int(size)}), b_nominal)
    logger.info(f"build_rhs_pool: {pool.shape[0]} right-hand sides, mode={cfg.mode}")
    return pool


def calibrate_time_series(history, b_nominal, perturbed_rows=None, seed: int = 0) -> RhsGeneratorConfig:
    """Fits the trend, level and noise of each perturbed row by least squares on the index.

    Args:
        history (array): Observed right-hand sides, one per row, in time order.
        b_nominal (array): Nominal right-hand side; unperturbed rows come from here.
        perturbed_rows (list[int] | None): Rows to fit; all rows when omitted.
        seed (int): Seed stored in the returned config.

    Returns:
        RhsGeneratorConfig: Time-series config carrying the fitted a0, a1 and sigma.
    """
    history = np.asarray(history, dtype=float)
    b = np.asarray(b_nominal, dtype=float).reshape(-1)
    if history.ndim != 2 or history.shape[1] != b.size:
        raise ConfigError(f"history must have shape (T, {b.size}), got {history.shape}")
    if history.shape[0] < 3:
        raise ConfigError("at least three observations are needed to fit the time series")
    rows = list(perturbed_rows) if perturbed_rows is not None else list(range(b.size))

    design = sm.add_constant(np.arange(1, history.shape[0] + 1, dtype=float))
    a0, a1, sigma = [], [], []
    for k in rows:
        fit = sm.OLS(history[:, k], design).fit()
        a1.append(float(fit.params[0]))
        a0.append(float(fit.params[1]))
        sigma.append(float(np.sqrt(max(fit.scale, 0.0))))
    logger.info(f"calibrate_time_series: fitted {len(rows)} rows on {history.shape[0]} observations")
    return RhsGeneratorConfig(
        mode="time_series",
        horizon=history.shape[0],
        seed=seed,
        perturbed_rows=rows,
        a0=a0,
        a1=a1,
        sigma=sigma,
    ).resolve(b)
