"""Noise schedules, the x_{t-1} = a_t x_t + b_t eps_hat + c_t eps sampler family,
the time-conditioned MLP denoiser with LoRA adapters, and epsilon-prediction pretraining.

Time indices are 1-based throughout (t = 1..T); ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import DomainError, NonFiniteError, ShapeError
from .optim import AdamW
from .tensor import GradTape, Tensor, backward, no_grad

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def check_t(self, t, lo: int = 1) -> None:
        arr = np.asarray(t)
        if np.any(arr < lo) or np.any(arr > self.T):
            raise DomainError(f"time step out of range [{lo}, {self.T}]", t=t)


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 2:
        raise DomainError("schedule needs T >= 2", T=T)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError(
            "need 0 < beta_start <= beta_end < 1", beta_start=beta_start, beta_end=beta_end
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _alpha_bar_prev(sched: NoiseSchedule) -> np.ndarray:
    return np.concatenate([[1.0], sched.alpha_bar[:-1]])


# ---------------------------------------------------------------- sampler coefficients


@dataclass(frozen=True)
class SamplerCoeffs:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    kind: str = "custom"

    @property
    def T(self) -> int:
        return len(self.a)

    def at(self, t: int) -> tuple[float, float, float]:
        i = t - 1
        return float(self.a[i]), float(self.b[i]), float(self.c[i])


def ddpm_coeffs(sched: NoiseSchedule) -> SamplerCoeffs:
    """Ancestral DDPM step with the posterior variance beta_tilde."""
    alpha, beta, ab = sched.alpha, sched.beta, sched.alpha_bar
    ab_prev = _alpha_bar_prev(sched)
    a = 1.0 / np.sqrt(alpha)
    b = -(1.0 - alpha) / (np.sqrt(alpha) * np.sqrt(1.0 - ab))
    c = np.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)
    return SamplerCoeffs(a, b, c, kind="ddpm")


def ddim_from_alpha_bar(ab_prev: np.ndarray, ab: np.ndarray, eta: float) -> SamplerCoeffs:
    ab_prev = np.asarray(ab_prev, dtype=np.float64)
    ab = np.asarray(ab, dtype=np.float64)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    a = np.sqrt(ab_prev / ab)
    b = np.sqrt(np.maximum(1.0 - ab_prev - sigma**2, 0.0)) - np.sqrt(ab_prev * (1.0 - ab) / ab)
    return SamplerCoeffs(a, b, sigma, kind="ddim")


def ddim_coeffs(sched: NoiseSchedule, eta: float = 0.0) -> SamplerCoeffs:
    if not 0.0 <= eta <= 1.0:
        raise DomainError("DDIM eta must lie in [0, 1]", eta=eta)
    return ddim_from_alpha_bar(_alpha_bar_prev(sched), sched.alpha_bar, eta)


def make_coeffs(sched: NoiseSchedule, sampler: str, eta: float = 0.0) -> SamplerCoeffs:
    if sampler == "ddpm":
        return ddpm_coeffs(sched)
    if sampler == "ddim":
        return ddim_coeffs(sched, eta)
    raise DomainError(f"unknown sampler {sampler!r}")


# ---------------------------------------------------------------- process algebra


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> Tensor:
    """sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` may be an int or one step per batch row."""
    x0, eps = tn.as_tensor(x0), tn.as_tensor(eps)
    if x0.shape != eps.shape:
        raise ShapeError("forward_diffuse: x0 and eps shapes differ", x0=x0.shape, eps=eps.shape)
    sched.check_t(t, lo=0)
    if np.ndim(t) == 0:
        ab = sched.alpha_bar_at(int(t))
        return x0 * math.sqrt(ab) + eps * math.sqrt(1.0 - ab)
    ab = np.array([sched.alpha_bar_at(int(s)) for s in t]).reshape((-1,) + (1,) * (x0.ndim - 1))
    scale = np.broadcast_to(np.sqrt(ab), x0.shape)
    noise_scale = np.broadcast_to(np.sqrt(1.0 - ab), x0.shape)
    return x0 * Tensor(scale) + eps * Tensor(noise_scale)


def sample_step(x_t, eps_hat, t: int, coeffs: SamplerCoeffs, noise=None) -> Tensor:
    x_t, eps_hat = tn.as_tensor(x_t), tn.as_tensor(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ShapeError("sample_step: x_t and eps_hat shapes differ", x=x_t.shape, eps=eps_hat.shape)
    if not 1 <= t <= coeffs.T:
        raise DomainError("time step out of range", t=t, T=coeffs.T)
    a, b, c = coeffs.at(t)
    out = x_t * a + eps_hat * b
    if noise is not None and c != 0.0:
        noise = tn.as_tensor(noise)
        if noise.shape != x_t.shape:
            raise ShapeError("sample_step: noise shape differs", noise=noise.shape, x=x_t.shape)
        out = out + noise * c
    return out


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule) -> Tensor:
    sched.check_t(t)
    ab = sched.alpha_bar_at(t)
    return (tn.as_tensor(x_t) - tn.as_tensor(eps_hat) * math.sqrt(1.0 - ab)) * (1.0 / math.sqrt(ab))


# ---------------------------------------------------------------- networks


def time_embedding(t, dim: int, n: int) -> np.ndarray:
    """Sinusoidal embedding, ``n`` rows (one per batch element)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    ang = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(eq=False)
class Linear:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0, name: str = ""):
        w = rng.normal(0.0, gain / math.sqrt(n_in), size=(n_out, n_in))
        return cls(Tensor(w, name=f"{name}.weight"), Tensor(np.zeros(n_out), name=f"{name}.bias"))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass(eq=False)
class MLP:
    layers: list[Linear]

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, name: str = "layers") -> "MLP":
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(Linear.init(n_in, n_out, rng, gain=0.5 if last else 1.0, name=f"{name}.{i}"))
        return cls(layers)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def forward(self, h: Tensor, adapter: "LoRAAdapter | None" = None) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            out = h @ layer.weight.T
            if adapter is not None:
                a, b = adapter.factors[i]
                out = out + ((h @ a.T) @ b.T) * adapter.scale
            h = tn.add_bias(out, layer.bias)
            if i != last:
                h = tn.silu(h)
        return h

    def state_dict(self, prefix: str = "layers") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight.data
            out[f"{prefix}.{i}.bias"] = layer.bias.data
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], prefix: str = "layers") -> "MLP":
        layers = []
        i = 0
        while f"{prefix}.{i}.weight" in state:
            w = state[f"{prefix}.{i}.weight"]
            b = state[f"{prefix}.{i}.bias"]
            layers.append(
                Linear(Tensor(w.copy(), name=f"{prefix}.{i}.weight"), Tensor(b.copy(), name=f"{prefix}.{i}.bias"))
            )
            i += 1
        if not layers:
            raise ShapeError(f"no '{prefix}.*' blocks in state")
        return cls(layers)


@dataclass(eq=False)
class Denoiser:
    """eps_theta(x_t, t) = skip[t] * x_t + MLP(concat(flatten(x_t), sinusoidal(1000 t / T))).

    ``skip`` is one learned scalar per step, zero at init. Without it the MLP
    cannot reproduce the near-identity eps ~ x_t of the high-noise steps
    accurately enough, and those errors get amplified by 1/sqrt(alpha_bar)
    along the chain.
    """

    mlp: MLP
    image_shape: tuple[int, int]
    skip: Tensor
    time_dim: int = 32

    @classmethod
    def init(
        cls,
        image_shape: tuple[int, int],
        sched: NoiseSchedule,
        rng: np.random.Generator,
        hidden: int = 256,
        depth: int = 3,
        time_dim: int = 32,
    ) -> "Denoiser":
        n_pix = int(np.prod(image_shape))
        sizes = [n_pix + time_dim] + [hidden] * depth + [n_pix]
        return cls(MLP.init(sizes, rng), tuple(image_shape), Tensor(np.zeros(sched.T), name="skip"), time_dim)

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def T(self) -> int:
        return self.skip.shape[0]

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters() + [self.skip]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.mlp.state_dict()
        state["skip"] = self.skip.data
        state["meta.image_shape"] = np.array(self.image_shape, dtype=np.float64)
        state["meta.time_dim"] = np.array([self.time_dim], dtype=np.float64)
        return state

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "Denoiser":
        shape = tuple(int(v) for v in state["meta.image_shape"])
        skip = Tensor(state["skip"].copy(), name="skip")
        return cls(MLP.from_state(state), shape, skip, int(state["meta.time_dim"][0]))


@dataclass(eq=False)
class LoRAAdapter:
    """Per-layer (A: rank x in, B: out x rank); each weight acts as W + scale * B @ A."""

    factors: list[tuple[Tensor, Tensor]]
    rank: int
    scale: float = 0.7

    @classmethod
    def init(cls, mlp: MLP, rank: int, rng: np.random.Generator, scale: float = 0.7) -> "LoRAAdapter":
        factors = []
        for i, layer in enumerate(mlp.layers):
            a = rng.normal(0.0, 1.0 / math.sqrt(layer.n_in), size=(rank, layer.n_in))
            factors.append(
                (
                    Tensor(a, requires_grad=True, name=f"lora.{i}.A"),
                    Tensor(np.zeros((layer.n_out, rank)), requires_grad=True, name=f"lora.{i}.B"),
                )
            )
        return cls(factors, rank, scale)

    def parameters(self) -> list[Tensor]:
        return [p for pair in self.factors for p in pair]

    def with_scale(self, scale: float) -> "LoRAAdapter":
        return LoRAAdapter(self.factors, self.rank, scale)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"meta.lora_scale": np.array([self.scale])}
        for i, (a, b) in enumerate(self.factors):
            out[f"lora.{i}.A"] = a.data
            out[f"lora.{i}.B"] = b.data
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "LoRAAdapter":
        factors = []
        i = 0
        while f"lora.{i}.A" in state:
            factors.append(
                (
                    Tensor(state[f"lora.{i}.A"].copy(), requires_grad=True, name=f"lora.{i}.A"),
                    Tensor(state[f"lora.{i}.B"].copy(), requires_grad=True, name=f"lora.{i}.B"),
                )
            )
            i += 1
        return cls(factors, factors[0][0].shape[0], float(state["meta.lora_scale"][0]))


def denoiser_forward(model: Denoiser, adapter: LoRAAdapter | None, x_t, t) -> Tensor:
    x_t = tn.as_tensor(x_t)
    if x_t.shape[-2:] != model.image_shape:
        raise ShapeError("input resolution does not match the denoiser", got=x_t.shape, expected=model.image_shape)
    batched = x_t.ndim == 3
    n = x_t.shape[0] if batched else 1
    flat = x_t.reshape(n, model.n_pixels)
    # steps are embedded on the conventional 0..1000 scale so neighbouring t stay distinguishable
    temb = Tensor(time_embedding(np.asarray(t, dtype=np.float64) * (1000.0 / model.T), model.time_dim, n))
    out = model.mlp.forward(tn.concat([flat, temb], axis=1), adapter)
    steps = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,)) - 1
    # per-row scalar spread over the pixels as an outer product
    coef = tn.gather(model.skip, steps).reshape(n, 1) @ Tensor(np.ones((1, model.n_pixels)))
    return (out + flat * coef).reshape(x_t.shape)


def sample(
    model: Denoiser,
    coeffs: SamplerCoeffs,
    n: int,
    rng: np.random.Generator,
    adapter: LoRAAdapter | None = None,
    x_T: np.ndarray | None = None,
) -> np.ndarray:
    """Full T-step sampling without a tape. Returns an (n, h, w) array."""
    x = rng.standard_normal((n, *model.image_shape)) if x_T is None else np.asarray(x_T, dtype=np.float64)
    with no_grad():
        xt = Tensor(x)
        for t in range(coeffs.T, 0, -1):
            eps_hat = denoiser_forward(model, adapter, xt, t)
            xt = sample_step(xt, eps_hat, t, coeffs, rng.standard_normal(x.shape))
    return xt.data


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    model: Denoiser
    losses: list[float] = field(default_factory=list)


def eps_loss(model: Denoiser, x0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> Tensor:
    x_t = forward_diffuse(Tensor(x0), t, Tensor(eps), sched)
    pred = denoiser_forward(model, None, x_t, t)
    return tn.square(pred - Tensor(eps)).mean()


def pretrain(
    model: Denoiser,
    dataset: np.ndarray,
    sched: NoiseSchedule,
    iters: int,
    lr: float,
    rng: np.random.Generator,
    batch: int = 64,
    log_every: int = 500,
) -> PretrainResult:
    """Epsilon-prediction training with uniform t; the model is frozen again on return."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or len(data) == 0:
        raise ShapeError("dataset must be a nonempty (n, h, w) array", shape=data.shape)
    model.set_trainable(True)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    losses = []
    try:
        for it in range(iters):
            idx = rng.integers(0, len(data), size=batch)
            t = rng.integers(1, sched.T + 1, size=batch)
            eps = rng.standard_normal((batch, *data.shape[1:]))
            with GradTape() as tape:
                loss = eps_loss(model, data[idx], t, eps, sched)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError("pretraining loss diverged", iteration=it, loss=value)
            opt.step(backward(loss, tape, model.parameters()))
            losses.append(value)
            if log_every and (it + 1) % log_every == 0:
                logger.info("pretrain iter %d loss %.4f", it + 1, float(np.mean(losses[-log_every:])))
    finally:
        model.set_trainable(False)
    return PretrainResult(model, losses)
