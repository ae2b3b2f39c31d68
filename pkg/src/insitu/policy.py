"""Gaussian search policy over modulator phase patterns.

The policy is an independent normal per pixel: a free mean pattern plus one
shared log standard deviation, clamped to keep the search width sane. Policy
objects are immutable snapshots; updates build new ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .fileio import read_raw, write_raw

LOG_SIGMA_MIN = math.log(0.01)
LOG_SIGMA_MAX = math.log(0.5)
_LN_TWO_PI = math.log(2.0 * math.pi)


def clamp_log_sigma(log_sigma: float) -> float:
    return min(max(float(log_sigma), LOG_SIGMA_MIN), LOG_SIGMA_MAX)


@dataclass(frozen=True)
class GaussianPolicy:
    mean: np.ndarray          # (H, W) unconstrained radians
    log_sigma: float
    step: int = 0             # update counter, carried into checkpoints

    def __post_init__(self):
        a = np.asarray(self.mean, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"policy mean must be 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("policy mean contains non-finite values")
        if not np.isfinite(self.log_sigma):
            raise ValueError(f"log_sigma must be finite, got {self.log_sigma}")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "mean", a)
        object.__setattr__(self, "log_sigma", float(self.log_sigma))

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma)

    @property
    def size(self) -> int:
        return self.mean.size


def make_policy(shape, init_mean=None, init_sigma=0.15) -> GaussianPolicy:
    """Fresh policy: zero mean unless the task supplies one."""
    if init_mean is None:
        init_mean = np.zeros(shape)
    if not init_sigma > 0:
        raise ConfigError(f"init_sigma must be positive, got {init_sigma}")
    return GaussianPolicy(np.asarray(init_mean, dtype=np.float64),
                          clamp_log_sigma(math.log(init_sigma)))


@dataclass(frozen=True)
class SampleBatch:
    """Phases drawn from a policy with their log densities under it."""

    phases: np.ndarray      # (M, H, W)
    log_probs: np.ndarray   # (M,)


def sample(policy: GaussianPolicy, count: int, rng: np.random.Generator) -> SampleBatch:
    """Draw count >= 2 phase patterns, mean + sigma * standard normal."""
    if count < 2:
        raise ConfigError(f"need at least 2 samples per batch, got {count}")
    z = rng.standard_normal((count,) + policy.mean.shape)
    phases = policy.mean + policy.sigma * z
    return SampleBatch(phases, log_prob(policy, phases))


def log_prob(policy: GaussianPolicy, phases):
    """Log density of phases under the policy.

    Accepts one (H, W) pattern or a stack (..., H, W); returns a float or an
    array of the leading shape.
    """
    x = np.asarray(phases, dtype=np.float64)
    n = policy.size
    sq = ((x - policy.mean) ** 2).sum(axis=(-2, -1))
    lp = -0.5 * sq / policy.sigma ** 2 - n * policy.log_sigma - 0.5 * n * _LN_TWO_PI
    return float(lp) if lp.ndim == 0 else lp


def log_ratio(policy_new: GaussianPolicy, policy_old: GaussianPolicy, phases,
              clamp: float = 20.0):
    """log pi_new(phase) - log pi_old(phase), clamped to +-clamp."""
    diff = log_prob(policy_new, phases) - log_prob(policy_old, phases)
    return np.clip(diff, -clamp, clamp)


def grad_log_prob(policy: GaussianPolicy, phase):
    """Analytic score of one phase pattern.

    Returns (d/dmean, d/dlog_sigma): the mean gradient is (phase - mean) /
    sigma^2 and the log-sigma gradient is sum((phase - mean)^2) / sigma^2 - N.
    """
    x = np.asarray(phase, dtype=np.float64)
    if x.shape != policy.mean.shape:
        raise ValueError(f"phase shape {x.shape} != policy shape {policy.mean.shape}")
    diff = x - policy.mean
    s2 = policy.sigma ** 2
    return diff / s2, float((diff ** 2).sum() / s2 - policy.size)


def entropy(policy: GaussianPolicy) -> float:
    """Differential entropy, N * (log sigma + 0.5 * log(2 pi e))."""
    return policy.size * (policy.log_sigma + 0.5 * (_LN_TWO_PI + 1.0))


def kl(policy_new: GaussianPolicy, policy_old: GaussianPolicy) -> float:
    """KL(new || old) between the two diagonal Gaussians (closed form)."""
    if policy_new.mean.shape != policy_old.mean.shape:
        raise ValueError("policies live on different grids")
    n = policy_new.size
    so2 = policy_old.sigma ** 2
    sn2 = policy_new.sigma ** 2
    dmu2 = float(((policy_new.mean - policy_old.mean) ** 2).sum())
    return n * (policy_old.log_sigma - policy_new.log_sigma) \
        + (n * sn2 + dmu2) / (2.0 * so2) - 0.5 * n


def save_policy(path, policy: GaussianPolicy) -> None:
    """Checkpoint: mean as the raw float32 container plus a text sidecar
    (log_sigma at full precision, update step)."""
    write_raw(path, policy.mean)
    with open(str(path) + ".meta", "w") as f:
        f.write(f"log_sigma={policy.log_sigma!r}\nstep={policy.step}\n")


def load_policy(path) -> GaussianPolicy:
    mean = read_raw(path)
    meta = {}
    with open(str(path) + ".meta") as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    try:
        log_sigma = float(meta["log_sigma"])
        step = int(meta["step"])
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{path}.meta: bad checkpoint sidecar ({e})") from None
    return GaussianPolicy(mean, clamp_log_sigma(log_sigma), step)
