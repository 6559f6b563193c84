"""Reward tuning by back-propagating through the unrolled sampling chain.

Five gradient-flow policies share one rollout loop and differ only in the
:class:`StepPlan` they draw each iteration and in whether the denoiser input
is detached:

* ``drtune``    K equally spaced trained steps, random early stop in 1..m, detached input
* ``draft_k``   the last K steps (t = 1..K)
* ``draft_lv``  the last step only, evaluated on two re-noised copies of the sample
* ``refl``      stop at a random step in 1..m and train only that step
* ``alignprop`` a random-length block of steps ending at the output
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .diffusion import (
    Denoiser,
    LoRAAdapter,
    NoiseSchedule,
    SamplerCoeffs,
    denoiser_forward,
    forward_diffuse,
    predict_x0,
    sample,
    sample_step,
)
from .errors import DomainError, NonFiniteError
from .optim import AdamW, clip_by_global_norm, grad_global_norm
from .rewards import RewardSpec
from .tensor import GradTape, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

STRATEGIES = ("drtune", "draft_k", "draft_lv", "refl", "alignprop")

_ALIASES = {"drtune": "drtune", "draft_k": "draft_k", "draftk": "draft_k", "draft_lv": "draft_lv",
            "draftlv": "draft_lv", "refl": "refl", "alignprop": "alignprop"}


def normalize_kind(kind: str) -> str:
    key = kind.strip().lower().replace("-", "_")
    if key not in _ALIASES:
        raise DomainError(f"unknown strategy {kind!r}", known=STRATEGIES)
    return _ALIASES[key]


@dataclass
class StrategyConfig:
    kind: str = "drtune"
    T: int = 50
    K: int | None = None  # default round(0.1 T)
    m: int | None = None  # default round(0.4 T)
    sg_input: bool | None = None  # default: on for drtune only
    lr: float = 2e-5
    clip_norm: float = 0.1
    weight_decay: float = 0.01
    batch: int = 16
    seed: int = 0
    # AlignProp trains {1..u} by default; literal=True trains {u..T} instead
    alignprop_literal: bool = False

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        if self.K is None:
            self.K = 1 if self.kind == "draft_lv" else max(1, round(0.1 * self.T))
        if self.m is None:
            self.m = max(1, round(0.4 * self.T))
        if self.sg_input is None:
            self.sg_input = self.kind == "drtune"
        if self.T < 1:
            raise DomainError("T must be positive", T=self.T)
        if not 1 <= self.K <= self.T:
            raise DomainError("need 1 <= K <= T", K=self.K, T=self.T)
        if not 1 <= self.m <= self.T:
            raise DomainError("need 1 <= m <= T", m=self.m, T=self.T)
        if self.kind == "draft_lv" and self.K != 1:
            raise DomainError("draft_lv trains exactly one step (K=1)", K=self.K)
        if self.batch < 1:
            raise DomainError("batch must be positive", batch=self.batch)


@dataclass(frozen=True)
class StepPlan:
    t_train: frozenset[int]
    t_min: int = 0  # 0 = run to the end
    lv_replicas: int = 1


def plan_steps(cfg: StrategyConfig, rng: np.random.Generator) -> StepPlan:
    T, K, m = cfg.T, cfg.K, cfg.m
    if cfg.kind == "drtune":
        spacing = T // K
        start = int(rng.integers(1, T - (K - 1) * spacing + 1))
        t_min = int(rng.integers(1, m + 1))
        return StepPlan(frozenset(start + i * spacing for i in range(K)), t_min)
    if cfg.kind == "draft_k":
        return StepPlan(frozenset(range(1, K + 1)))
    if cfg.kind == "draft_lv":
        return StepPlan(frozenset({1}), 0, lv_replicas=2)
    if cfg.kind == "refl":
        t_min = int(rng.integers(1, m + 1))
        return StepPlan(frozenset({t_min}), t_min)
    u = int(rng.integers(1, T + 1))
    steps = range(u, T + 1) if cfg.alignprop_literal else range(1, u + 1)
    return StepPlan(frozenset(steps))


@dataclass
class Rollout:
    image: Tensor  # emitted x0 (or replica stack for draft_lv)
    loss: Tensor
    reward: float  # batch mean of the reward on the emitted image
    tape: GradTape
    n_forward: int  # denoiser evaluations
    n_live: int  # evaluations kept on the tape


def rollout(
    model: Denoiser,
    adapter: LoRAAdapter | None,
    coeffs: SamplerCoeffs,
    sched: NoiseSchedule,
    plan: StepPlan,
    cfg: StrategyConfig,
    reward: RewardSpec,
    rng: np.random.Generator,
    x_T: np.ndarray | None = None,
) -> Rollout:
    shape = (cfg.batch, *model.image_shape)
    x = rng.standard_normal(shape) if x_T is None else np.asarray(x_T, dtype=np.float64)
    n_forward = n_live = 0
    replicas = plan.lv_replicas
    with GradTape() as tape:
        x_t = Tensor(x)
        emitted = None
        for t in range(coeffs.T, 0, -1):
            live = t in plan.t_train and replicas == 1
            n_forward += 1
            if live:
                n_live += 1
                inp = tn.stop_gradient(x_t) if cfg.sg_input else x_t
                eps_hat = denoiser_forward(model, adapter, inp, t)
            else:
                # sg(eps_hat): identical values, no record on the tape
                with no_grad():
                    eps_hat = denoiser_forward(model, adapter, x_t, t)
            if t == plan.t_min:
                emitted = predict_x0(x_t, eps_hat, t, sched)
                break
            x_t = sample_step(x_t, eps_hat, t, coeffs, Tensor(rng.standard_normal(shape)))
        if emitted is None:
            emitted = x_t
        if replicas > 1:
            emitted, extra = _low_variance_final_step(model, adapter, coeffs, sched, cfg, emitted, replicas, rng)
            n_forward += extra
            n_live += extra
            losses, values = zip(*(reward.loss(img) for img in emitted))
            loss = losses[0]
            for other in losses[1:]:
                loss = loss + other
            loss = loss * (1.0 / replicas)
            value = float(np.mean([v.data.mean() for v in values]))
            emitted = emitted[0]
        else:
            loss, values = reward.loss(emitted)
            value = float(values.data.mean())
    if not math.isfinite(value) or not math.isfinite(loss.item()):
        raise NonFiniteError("reward is not finite", strategy=cfg.kind, t_min=plan.t_min, reward=value)
    return Rollout(emitted, loss, value, tape, n_forward, n_live)


def _low_variance_final_step(model, adapter, coeffs, sched, cfg, x0, replicas, rng):
    """Re-noise the finished sample to t=1 with independent noise and redo the last step."""
    base = tn.stop_gradient(x0)
    out = []
    for _ in range(replicas):
        x1 = forward_diffuse(base, 1, Tensor(rng.standard_normal(x0.shape)), sched)
        inp = tn.stop_gradient(x1) if cfg.sg_input else x1
        eps_hat = denoiser_forward(model, adapter, inp, 1)
        out.append(sample_step(x1, eps_hat, 1, coeffs, Tensor(rng.standard_normal(x0.shape))))
    return out, replicas


def clip_and_step(
    params: list[Tensor], grads: dict[Tensor, np.ndarray], state: AdamW, cfg: StrategyConfig
) -> float:
    """Global-norm clip then one AdamW update. Returns the pre-clip norm."""
    if set(map(id, grads)) != set(map(id, params)):
        raise DomainError("gradients must cover exactly the trainable parameters")
    for p, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("NaN/Inf gradient", param=p.name)
    clipped, norm = clip_by_global_norm(grads, cfg.clip_norm)
    state.step(clipped)
    return norm


# ---------------------------------------------------------------- training loop


@dataclass
class IterRecord:
    iter: int
    reward: float
    grad_norm: float
    wall_ms: float
    cost: int  # denoiser forward evals + 2 x backward evals


@dataclass
class RunLog:
    config: dict
    records: list[IterRecord] = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records])

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([r.grad_norm for r in self.records])


@dataclass
class Budget:
    """Stop criterion: a fixed iteration count, wall-clock seconds, or network evaluations."""

    mode: str = "iterations"
    iterations: int = 500
    seconds: float = 600.0
    evals: int = 0

    def __post_init__(self):
        if self.mode not in ("iterations", "wall", "evals"):
            raise DomainError("budget mode must be iterations, wall or evals", mode=self.mode)

    def exhausted(self, iters_done: int, elapsed_s: float, cost: int) -> bool:
        if self.mode == "iterations":
            return iters_done >= self.iterations
        if self.mode == "wall":
            return elapsed_s >= self.seconds
        return cost >= self.evals


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, train_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(train_seq)


def train_reward(
    model: Denoiser,
    cfg: StrategyConfig,
    reward: RewardSpec,
    iters: int | None = None,
    *,
    sched: NoiseSchedule,
    coeffs: SamplerCoeffs,
    lora_rank: int = 8,
    lora_scale: float = 1.0,
    budget: Budget | None = None,
    adapter: LoRAAdapter | None = None,
) -> tuple[LoRAAdapter, RunLog]:
    """Tune a fresh (B = 0) LoRA adapter; the base weights are never written."""
    if budget is None:
        budget = Budget("iterations", iterations=500 if iters is None else iters)
    if any(p.requires_grad for p in model.parameters()):
        raise DomainError("base model must be frozen during reward tuning")
    if coeffs.T != cfg.T or sched.T != cfg.T:
        raise DomainError("sampler length does not match strategy T", T=cfg.T, sampler_T=coeffs.T)
    init_rng, rng = _streams(cfg.seed)
    if adapter is None:
        adapter = LoRAAdapter.init(model.mlp, lora_rank, init_rng, scale=lora_scale)
    params = adapter.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = RunLog(config=asdict(cfg))
    start = time.perf_counter()
    cost = 0
    it = 0
    while not budget.exhausted(it, time.perf_counter() - start, cost):
        t0 = time.perf_counter()
        plan = plan_steps(cfg, rng)
        ro = rollout(model, adapter, coeffs, sched, plan, cfg, reward, rng)
        grads = backward(ro.loss, ro.tape, params)
        try:
            norm = clip_and_step(params, grads, opt, cfg)
        except NonFiniteError as exc:
            exc.context.update(iteration=it, strategy=cfg.kind)
            raise
        it += 1
        cost += ro.n_forward + 2 * ro.n_live
        log.records.append(IterRecord(it, ro.reward, norm, (time.perf_counter() - t0) * 1e3, cost))
    logger.info("%s: %d iterations, final reward %.4f", cfg.kind, it, log.records[-1].reward if log.records else float("nan"))
    return adapter, log


def evaluate_reward(
    model: Denoiser,
    adapter: LoRAAdapter | None,
    coeffs: SamplerCoeffs,
    reward: RewardSpec,
    n: int = 64,
    seed: int = 12345,
) -> float:
    """Mean reward over ``n`` full T-step samples drawn from a fixed noise stream."""
    imgs = sample(model, coeffs, n, np.random.default_rng(seed), adapter=adapter)
    with no_grad():
        return float(reward.value(Tensor(imgs)).data.mean())


__all__ = [
    "STRATEGIES",
    "Budget",
    "IterRecord",
    "Rollout",
    "RunLog",
    "StepPlan",
    "StrategyConfig",
    "clip_and_step",
    "evaluate_reward",
    "grad_global_norm",
    "plan_steps",
    "rollout",
    "train_reward",
]
