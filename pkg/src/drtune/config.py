"""Experiment configuration and its line-oriented ``key = value`` file format.

Nesting uses dotted keys (``tune.kind = drtune``), ``#`` starts a comment and
unknown keys are rejected so typos fail loudly. ``none`` stands for an unset
optional value and tuples are written comma-separated.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .tuning import Budget, StrategyConfig, normalize_kind


@dataclass
class DatasetSection:
    kind: str = "shapes"
    n: int = 4096
    res: int = 16


@dataclass
class ScheduleSection:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2
    sampler: str = "ddpm"
    eta: float = 0.0


@dataclass
class PretrainSection:
    iters: int = 10000
    lr: float = 1e-3
    batch: int = 64
    hidden: int = 256
    depth: int = 3
    # where cmd_pretrain writes and tune/compare/ablate read; empty = <out>/model.drtl
    checkpoint: str = ""


@dataclass
class TuneSection:
    kind: str = "drtune"
    K: int | None = None
    m: int | None = None
    sg_input: bool | None = None
    lr: float = 2e-5
    clip_norm: float = 0.1
    weight_decay: float = 0.01
    batch: int = 16
    alignprop_literal: bool = False


@dataclass
class LoraSection:
    rank: int = 8
    train_scale: float = 1.0
    infer_scale: float = 0.7


@dataclass
class RewardSection:
    kind: str = "symmetry"
    k: int = 4
    eps_std: float = 1e-4
    target_class: int = 0
    reg_weight: float = 0.0
    clamp: bool = True
    classifier_iters: int = 1500


@dataclass
class BudgetSection:
    mode: str = "iterations"
    iterations: int = 500
    seconds: float = 600.0
    evals: int = 0


@dataclass
class CompareSection:
    strategies: tuple[str, ...] = ("drtune", "draft_k", "draft_lv", "refl", "alignprop")
    draft_k: int = 1


@dataclass
class AblateSection:
    axis: str = "K"
    k_ratios: tuple[float, ...] = (0.02, 0.05, 0.1, 0.2, 0.4, 1.0)
    m_ratios: tuple[float, ...] = (0.1, 0.2, 0.4, 0.6, 0.8)


@dataclass
class ReportSection:
    # "none" leaves wall_ms empty so metrics.csv is byte-reproducible
    timing: str = "wall"
    eval_n: int = 64
    eval_seed: int = 12345
    dump_n: int = 16


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    tune: TuneSection = field(default_factory=TuneSection)
    lora: LoraSection = field(default_factory=LoraSection)
    reward: RewardSection = field(default_factory=RewardSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    compare: CompareSection = field(default_factory=CompareSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    report: ReportSection = field(default_factory=ReportSection)

    def validate(self) -> "ExperimentConfig":
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer", seed=self.seed)
        if self.schedule.sampler not in ("ddpm", "ddim"):
            raise ConfigError("schedule.sampler must be ddpm or ddim", got=self.schedule.sampler)
        if self.budget.mode not in ("iterations", "wall", "evals"):
            raise ConfigError("budget.mode must be iterations, wall or evals", got=self.budget.mode)
        if self.report.timing not in ("wall", "none"):
            raise ConfigError("report.timing must be wall or none", got=self.report.timing)
        if self.ablate.axis not in ("K", "m"):
            raise ConfigError("ablate.axis must be K or m", got=self.ablate.axis)
        for ratio in (*self.ablate.k_ratios, *self.ablate.m_ratios):
            if not 0 < ratio <= 1:
                raise ConfigError("ablation ratios must lie in (0, 1]", ratio=ratio)
        try:
            self.compare.strategies = tuple(normalize_kind(k) for k in self.compare.strategies)
            self.strategy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def strategy(self, **overrides) -> StrategyConfig:
        """StrategyConfig for this experiment; T and seed come from the top level."""
        kw = dataclasses.asdict(self.tune)
        kw.update(overrides)
        return StrategyConfig(T=self.schedule.T, seed=self.seed, **kw)

    def budget_spec(self) -> Budget:
        b = self.budget
        return Budget(b.mode, iterations=b.iterations, seconds=b.seconds, evals=b.evals)

    def checkpoint_path(self) -> Path:
        return Path(self.pretrain.checkpoint) if self.pretrain.checkpoint else Path(self.out) / "model.drtl"


# ---------------------------------------------------------------- text format


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _strip_optional(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        (inner,) = [a for a in args if a is not type(None)]
        return inner, True
    return tp, False


def _parse(raw: str, tp, key: str):
    tp, optional = _strip_optional(tp)
    if optional and raw.lower() == "none":
        return None
    if typing.get_origin(tp) is tuple:
        (item_tp, _) = typing.get_args(tp)
        return tuple(_parse(part.strip(), item_tp, key) for part in raw.split(",") if part.strip())
    try:
        if tp is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key!r} as {tp.__name__}", value=raw) from None
    return raw


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            lines.append(f"\n# {f.name}")
            lines.extend(f"{f.name}.{sub.name} = {_format(getattr(value, sub.name))}" for sub in dataclasses.fields(value))
        else:
            lines.append(f"{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    top_hints = _hints(ExperimentConfig)
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", line=lineno, text=line.strip())
        key, raw = (part.strip() for part in body.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        seen.add(key)
        parts = key.split(".")
        if len(parts) == 1 and key in top_hints and not _is_section(top_hints[key]):
            setattr(cfg, key, _parse(raw, top_hints[key], key))
            continue
        if len(parts) == 2 and parts[0] in top_hints and _is_section(top_hints[parts[0]]):
            section = getattr(cfg, parts[0])
            sub_hints = _hints(type(section))
            if parts[1] in sub_hints:
                setattr(section, parts[1], _parse(raw, sub_hints[parts[1]], key))
                continue
        raise ConfigError(f"unknown config key {key!r}", line=lineno)
    return cfg.validate()


def _is_section(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("cannot read config file", path=str(path), reason=exc.strerror) from exc
    return loads(text)


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
