"""Policy-search engine for black-box phase optimization.

One training round: draw a batch of phase patterns from the Gaussian policy,
measure rewards on the instrument, normalise them into advantages, then take
one or more surrogate-gradient steps. The clipped-surrogate path may reuse
the same measured batch for several updates (importance ratios keep the
estimate honest, the clip keeps it conservative); the plain policy-gradient
path takes exactly one step per batch. Gradients are analytic throughout, no
autodiff anywhere.

Also here: the model-based baseline, which differentiates the simulated bench
itself via the adjoint of the propagation operator.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import optics
from .errors import ConfigError
from .policy import (GaussianPolicy, clamp_log_sigma, entropy, kl, log_prob,
                     log_ratio, make_policy, sample)


def normalize_advantages(rewards) -> np.ndarray:
    """Batch-mean baseline: (r - mean) / (population std + 1e-8).

    An all-equal batch normalises to zeros (no preferred direction).
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1:
        raise ValueError(f"rewards must be 1-D, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards contain non-finite values")
    return (r - r.mean()) / (r.std() + 1e-8)


@dataclass
class Rollout:
    """One measured batch: sampled phases, their log densities under the
    sampling policy, raw rewards, and (after normalisation) advantages."""

    phases: np.ndarray            # (M, H, W)
    log_probs: np.ndarray         # (M,)
    rewards: np.ndarray           # (M,)
    advantages: np.ndarray | None = None

    def normalized(self) -> "Rollout":
        return replace(self, advantages=normalize_advantages(self.rewards))


def clipped_surrogate_terms(ratios, advantages, clip_ratio):
    """Per-sample surrogate min(r*A, clip(r, 1-eps, 1+eps)*A).

    Returns (terms, unclipped_active) where unclipped_active marks samples
    whose unclipped branch attains the min (ties included), the only samples
    that carry gradient.
    """
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    unclipped = r * a
    clipped = np.clip(r, 1.0 - clip_ratio, 1.0 + clip_ratio) * a
    terms = np.minimum(unclipped, clipped)
    return terms, unclipped <= clipped


def _score_gradients(phases, policy, weights, batch_size):
    """Gradient of -(1/M) sum_j w_j log pi(phase_j) w.r.t. (mean, log_sigma)."""
    diff = phases - policy.mean
    s2 = policy.sigma ** 2
    gmu = -(weights[:, None, None] * diff).sum(axis=0) / (batch_size * s2)
    per = (diff * diff).sum(axis=(-2, -1)) / s2 - policy.size
    gsig = -float(weights @ per) / batch_size
    return gmu, gsig


def ppo_loss(rollout: Rollout, policy_new: GaussianPolicy,
             policy_old: GaussianPolicy, clip_ratio: float = 0.2,
             entropy_coef: float = 0.0):
    """Clipped-surrogate loss and its analytic gradient.

    loss = -(1/M) sum min(r*A, clip(r)*A) - entropy_coef * H(policy_new) with
    r the (clamped) density ratio new/old at the sampled phases. Only samples
    whose unclipped branch attains the min contribute gradient; ties count as
    unclipped. Returns (loss, grad_mean, grad_log_sigma).
    """
    if rollout.advantages is None:
        raise RuntimeError("rollout is not normalised; call .normalized() first")
    m = rollout.phases.shape[0]
    ratios = np.exp(log_ratio(policy_new, policy_old, rollout.phases))
    terms, active = clipped_surrogate_terms(ratios, rollout.advantages, clip_ratio)
    loss = -float(terms.mean()) - entropy_coef * entropy(policy_new)
    weights = rollout.advantages * ratios * active.astype(np.float64)
    gmu, gsig = _score_gradients(rollout.phases, policy_new, weights, m)
    gsig -= entropy_coef * policy_new.size   # d entropy / d log_sigma = N
    return loss, gmu, gsig


def pg_loss(rollout: Rollout, policy: GaussianPolicy):
    """Score-function loss -(1/M) sum A_j log pi(phase_j) and its gradient.

    Meant for exactly one update per measured batch (no reuse).
    """
    if rollout.advantages is None:
        raise RuntimeError("rollout is not normalised; call .normalized() first")
    m = rollout.phases.shape[0]
    lp = log_prob(policy, rollout.phases)
    loss = -float(rollout.advantages @ lp) / m
    gmu, gsig = _score_gradients(rollout.phases, policy, rollout.advantages, m)
    return loss, gmu, gsig


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray | float = 0.0
    v: np.ndarray | float = 0.0
    t: int = 0


def adam_step(param, grad, state: AdamState, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Works on arrays and scalars alike;
    returns (new_param, new_state)."""
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * np.asarray(grad, dtype=np.float64)
    v = beta2 * state.v + (1.0 - beta2) * np.square(grad)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    new = param - lr * mhat / (np.sqrt(vhat) + eps)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# training loops

@dataclass(frozen=True)
class TrainerConfig:
    samples_per_round: int = 32        # phase patterns measured per round
    reuse_updates: int = 8             # surrogate steps on one batch (clipped path)
    clip_ratio: float = 0.2
    learning_rate: float = 2e-3        # Adam, policy mean
    sigma_learning_rate: float = 1e-3  # Adam, shared log sigma
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    entropy_coef: float = 0.0
    kl_stop: float = math.inf          # stop reusing a batch past this KL
    measurement_budget: int = 20000
    seed: int = 0
    init_sigma: float = 0.15
    metric_every: int = 1              # rounds between out-of-band metric evals
    frame_period_s: float = 0.05       # instrument seconds per measurement

    def __post_init__(self):
        if self.samples_per_round < 2:
            raise ConfigError(f"samples_per_round must be >= 2, got {self.samples_per_round}")
        if self.reuse_updates < 1:
            raise ConfigError(f"reuse_updates must be >= 1, got {self.reuse_updates}")
        if self.measurement_budget < 0:
            raise ConfigError(f"measurement_budget must be >= 0, got {self.measurement_budget}")
        if self.clip_ratio <= 0:
            raise ConfigError(f"clip_ratio must be positive, got {self.clip_ratio}")
        if self.metric_every < 1:
            raise ConfigError(f"metric_every must be >= 1, got {self.metric_every}")


@dataclass
class RoundRecord:
    round: int
    measurements: int
    seconds: float       # simulated instrument time, measurements * frame period
    mean_reward: float
    metric: float
    sigma: float
    kl: float
    wall_s: float = 0.0  # process wall clock, diagnostics only (not serialised)


HISTORY_CSV_FIELDS = ("round", "measurements", "seconds", "mean_reward",
                      "metric", "sigma", "kl")


def format_record(rec: RoundRecord) -> str:
    def num(x):
        if isinstance(x, float):
            return "nan" if math.isnan(x) else f"{x:.10g}"
        return str(x)
    return ",".join(num(getattr(rec, f)) for f in HISTORY_CSV_FIELDS)


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    policy: GaussianPolicy | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(",".join(HISTORY_CSV_FIELDS) + "\n")
            for rec in self.records:
                f.write(format_record(rec) + "\n")

    def measurements_to_reach(self, threshold: float):
        """Instrument measurements spent when the metric first reached
        threshold, or None if it never did."""
        for rec in self.records:
            if not math.isnan(rec.metric) and rec.metric >= threshold:
                return rec.measurements
        return None

    def final_metric(self) -> float:
        vals = [r.metric for r in self.records if not math.isnan(r.metric)]
        return vals[-1] if vals else math.nan


def _train(env, task, config: TrainerConfig, algo: str, on_round=None) -> TrainingHistory:
    if algo not in ("ppo", "pg"):
        raise ConfigError(f"unknown algorithm {algo!r}")
    shape = env.descriptor.slm_shape
    rng = np.random.default_rng(config.seed)
    pol = make_policy(shape, task.initial_mean(shape), config.init_sigma)
    st_mu = AdamState()
    st_sig = AdamState()
    per_round = config.samples_per_round * task.minibatch_size
    budget = config.measurement_budget

    history = TrainingHistory()
    t0 = time.perf_counter()

    def push(rnd, used, mean_reward, metric, klv):
        rec = RoundRecord(rnd, used, used * config.frame_period_s, mean_reward,
                          metric, pol.sigma, klv, time.perf_counter() - t0)
        history.records.append(rec)
        if on_round is not None:
            on_round(rec, pol)

    push(0, 0, math.nan, task.metric(pol.mean), 0.0)

    used = 0
    rnd = 0
    while used + per_round <= budget:
        rnd += 1
        batch = sample(pol, config.samples_per_round, rng)
        rewards = np.asarray(task.rewards(env, batch.phases, rng), dtype=np.float64)
        if rewards.shape != (config.samples_per_round,):
            raise ValueError(f"task returned {rewards.shape} rewards for "
                             f"{config.samples_per_round} samples")
        rollout = Rollout(batch.phases, batch.log_probs, rewards).normalized()
        used += per_round

        old = pol
        klv = 0.0
        updates = config.reuse_updates if algo == "ppo" else 1
        for _ in range(updates):
            if algo == "ppo":
                _, gmu, gsig = ppo_loss(rollout, pol, old, config.clip_ratio,
                                        config.entropy_coef)
            else:
                _, gmu, gsig = pg_loss(rollout, pol)
            new_mu, st_mu = adam_step(pol.mean, gmu, st_mu, config.learning_rate,
                                      config.adam_beta1, config.adam_beta2,
                                      config.adam_eps)
            new_ls, st_sig = adam_step(pol.log_sigma, gsig, st_sig,
                                       config.sigma_learning_rate,
                                       config.adam_beta1, config.adam_beta2,
                                       config.adam_eps)
            pol = GaussianPolicy(new_mu, clamp_log_sigma(new_ls), pol.step + 1)
            klv = kl(pol, old)
            if klv > config.kl_stop:
                break

        metric = task.metric(pol.mean) if rnd % config.metric_every == 0 else math.nan
        push(rnd, used, float(rewards.mean()), metric, klv)

    history.policy = pol
    return history


def train_ppo(env, task, config: TrainerConfig, on_round=None) -> TrainingHistory:
    """Clipped-surrogate training with batch reuse. See module docstring."""
    return _train(env, task, config, "ppo", on_round)


def train_pg(env, task, config: TrainerConfig, on_round=None) -> TrainingHistory:
    """Plain score-function baseline: one update per measured batch."""
    return _train(env, task, config, "pg", on_round)


# ---------------------------------------------------------------------------
# model-based baseline (differentiates the simulator itself)

def _twin_forward(config: optics.BenchConfig, phase, input_phase):
    """Differentiable-twin forward pass. Skips quantization (a staircase has
    no useful gradient) and requires noise off; hidden screens stay, they are
    plain phase masks. Returns (modulator-plane field, sensor intensity)."""
    total = np.asarray(phase, dtype=np.float64)
    if input_phase is not None:
        total = total + input_phase
    ab = config.aberration
    if ab is not None:
        total = total + optics._aberration_screen(config.shape, ab.defocus_rms,
                                                  ab.astigmatism_rms, ab.coma_rms)
    u0 = np.exp(1j * total)
    if config.diffuser is not None:
        half = config.distance_mm / 2.0
        u = optics.propagate_array(u0, config.pitch_um, config.wavelength_um, half)
        u = u * np.exp(1j * optics._diffuser_screen(config.shape, config.diffuser.seed,
                                                    config.diffuser.correlation_px))
        u_out = optics.propagate_array(u, config.pitch_um, config.wavelength_um, half)
    else:
        u_out = optics.propagate_array(u0, config.pitch_um, config.wavelength_um,
                                       config.distance_mm)
    intensity = np.abs(u_out) ** 2
    if ab is not None and ab.shift_px != (0, 0):
        intensity = np.roll(intensity, ab.shift_px, axis=(-2, -1))
    return u0, u_out, intensity


def _gain_mse_and_slope(intensity, target):
    """Gain-fitted MSE and its derivative w.r.t. the intensity.

    The fit g* = <I,t>/<I,I> minimises mean((g I - t)^2), so by the envelope
    theorem the derivative treats g* as a constant.
    """
    ii = float((intensity * intensity).sum())
    if ii > 0:
        g = float((intensity * target).sum()) / ii
    else:
        g = 0.0
    resid = g * intensity - target
    mse = float((resid ** 2).mean())
    dmse = 2.0 * g * resid / resid.size
    return mse, dmse


def insilico_loss(config: optics.BenchConfig, phase, targets, inputs=None):
    """Mean gain-fitted MSE of the twin's images against targets.

    targets is (B, H, W) (or (H, W)); inputs, when given, matches its leading
    shape with per-item input phases.
    """
    t = np.asarray(targets, dtype=np.float64).reshape((-1,) + config.shape)
    total = 0.0
    for i in range(t.shape[0]):
        inp = None if inputs is None else inputs[i]
        _, _, intensity = _twin_forward(config, phase, inp)
        mse, _ = _gain_mse_and_slope(intensity, t[i])
        total += mse
    return total / t.shape[0]


def insilico_gradient(config: optics.BenchConfig, phase, targets, inputs=None):
    """Loss and analytic gradient of insilico_loss w.r.t. the phase pattern.

    Backpropagates through the sensor law and the propagation chain using the
    exact operator adjoint (propagation by -d). The bench must have noise
    disabled.
    """
    if config.noise is not None:
        raise ConfigError("model-based gradients need a noise-free bench "
                          "(use BenchConfig.noise_free())")
    t = np.asarray(targets, dtype=np.float64).reshape((-1,) + config.shape)
    b = t.shape[0]
    grad = np.zeros(config.shape)
    total_loss = 0.0
    ab = config.aberration
    for i in range(b):
        inp = None if inputs is None else inputs[i]
        u0, u_out, intensity = _twin_forward(config, phase, inp)
        mse, dmse = _gain_mse_and_slope(intensity, t[i])
        total_loss += mse
        if ab is not None and ab.shift_px != (0, 0):
            dmse = np.roll(dmse, (-ab.shift_px[0], -ab.shift_px[1]), axis=(-2, -1))
        w = dmse * u_out                       # d loss / d conj(u_out)
        if config.diffuser is not None:
            half = config.distance_mm / 2.0
            w = optics.propagate_array(w, config.pitch_um, config.wavelength_um, -half)
            w = w * np.exp(-1j * optics._diffuser_screen(
                config.shape, config.diffuser.seed, config.diffuser.correlation_px))
            w = optics.propagate_array(w, config.pitch_um, config.wavelength_um, -half)
        else:
            w = optics.propagate_array(w, config.pitch_um, config.wavelength_um,
                                       -config.distance_mm)
        grad += 2.0 * np.imag(w * np.conj(u0))
    return total_loss / b, grad / b


@dataclass
class InsilicoRecord:
    step: int
    loss: float
    metric: float


@dataclass
class InsilicoResult:
    phase: np.ndarray            # best-so-far phase pattern
    metric: float                # task metric of that phase on the true bench
    best_loss: float
    records: list


def train_insilico(config: optics.BenchConfig, task, steps=2000, lr=0.05,
                   seed=0, metric_every=200) -> InsilicoResult:
    """Model-based baseline: Adam on the twin's gradient.

    Tracks the best-so-far loss and returns that phase with its task metric
    evaluated on the true (quantized) bench. The given bench must be noise
    free.
    """
    if config.noise is not None:
        raise ConfigError("train_insilico needs a noise-free bench")
    rng = np.random.default_rng(seed)
    phase = np.zeros(config.shape)
    state = AdamState()
    best_phase = phase
    best_loss = math.inf
    records = []
    for step in range(1, steps + 1):
        inputs, targets = task.insilico_batch(rng)
        loss, grad = insilico_gradient(config, phase, targets, inputs)
        if loss < best_loss:
            best_loss = loss
            best_phase = phase
        phase, state = adam_step(phase, grad, state, lr)
        if step % metric_every == 0 or step == steps:
            records.append(InsilicoRecord(step, loss, task.metric(best_phase)))
    return InsilicoResult(best_phase, task.metric(best_phase), best_loss, records)
