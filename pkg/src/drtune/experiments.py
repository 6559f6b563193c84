"""Experiment commands: pretrain, tune, compare strategies, ablate K or m.

Every command reads an :class:`ExperimentConfig`, writes its artefacts under
``cfg.out`` and returns a small dict summarising what it did.
"""

from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import reports
from .checkpoint import load_blocks, save_blocks
from .config import ExperimentConfig, dumps, loads
from .data import gen_toy_dataset
from .diffusion import (
    Denoiser,
    LoRAAdapter,
    NoiseSchedule,
    SamplerCoeffs,
    build_linear_schedule,
    make_coeffs,
    pretrain,
    sample,
)
from .errors import CheckpointError, DrtuneError
from .rewards import RewardSpec, ToyClassifier, train_classifier
from .tuning import RunLog, StrategyConfig, evaluate_reward, train_reward

logger = logging.getLogger(__name__)

CLASSIFIER_FILE = "classifier.drtl"


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise reports.ReportError("cannot create output directory", path=str(out), reason=exc.strerror) from exc
    (out / "config.txt").write_text(dumps(cfg), encoding="utf-8")
    return out


def _schedule(cfg: ExperimentConfig) -> tuple[NoiseSchedule, SamplerCoeffs]:
    s = cfg.schedule
    sched = build_linear_schedule(s.T, s.beta_start, s.beta_end)
    return sched, make_coeffs(sched, s.sampler, s.eta)


# ---------------------------------------------------------------- pretrain


def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    out = _outdir(cfg)
    d = cfg.dataset
    ds = gen_toy_dataset(d.kind, d.n, d.res, cfg.seed)
    sched, coeffs = _schedule(cfg)
    p = cfg.pretrain
    model_rng, clf_rng, sample_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    model = Denoiser.init(ds.images.shape[1:], sched, model_rng, hidden=p.hidden, depth=p.depth)
    t0 = time.perf_counter()
    result = pretrain(model, ds.images, sched, p.iters, p.lr, model_rng, batch=p.batch)
    ckpt = cfg.checkpoint_path()
    save_blocks(ckpt, model.state_dict())
    clf = train_classifier(ds.images, ds.labels, ds.n_classes, clf_rng, iters=cfg.reward.classifier_iters)
    save_blocks(ckpt.with_name(CLASSIFIER_FILE), clf.state_dict())

    losses = np.asarray(result.losses)
    reports.write_summary([{"iter": i + 1, "loss": float(v)} for i, v in enumerate(losses)], out / "pretrain_loss.csv")
    reports.write_svg(out / "pretrain_loss.svg", {"eps loss": (np.arange(1, len(losses) + 1), losses)},
                      title="pretraining loss", xlabel="iteration", ylabel="eps mse", log_y=True)
    reports.write_pgm(out / "dataset.pgm", reports.tile(ds.images[: cfg.report.dump_n]))
    reports.write_pgm(out / "samples.pgm", reports.tile(sample(model, coeffs, cfg.report.dump_n, sample_rng)))
    tail = losses[-min(len(losses), 100):]
    return {"checkpoint": str(ckpt), "final_loss": float(tail.mean()), "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------- shared tuning context


@dataclass
class Context:
    cfg: ExperimentConfig
    sched: NoiseSchedule
    coeffs: SamplerCoeffs
    model: Denoiser
    reward: RewardSpec


def load_context(cfg: ExperimentConfig) -> Context:
    ckpt = cfg.checkpoint_path()
    if not ckpt.exists():
        raise CheckpointError("pretrained checkpoint not found; run 'drtune pretrain' first", path=str(ckpt))
    model = Denoiser.from_state(load_blocks(ckpt))
    sched, coeffs = _schedule(cfg)
    if model.T != sched.T:
        raise CheckpointError("checkpoint was trained for a different T", checkpoint_T=model.T, T=sched.T)
    r = cfg.reward
    clf = None
    if r.kind == "toy_classifier" or r.reg_weight:
        clf_path = ckpt.with_name(CLASSIFIER_FILE)
        if not clf_path.exists():
            raise CheckpointError("classifier checkpoint not found", path=str(clf_path))
        clf = ToyClassifier.from_state(load_blocks(clf_path))
    reward = RewardSpec(r.kind, k=r.k, eps_std=r.eps_std, target_class=r.target_class, classifier=clf,
                        reg_weight=r.reg_weight, clamp=r.clamp)
    return Context(cfg, sched, coeffs, model, reward)


@dataclass
class TuneResult:
    name: str
    log: RunLog
    adapter: LoRAAdapter
    initial: float
    final: float
    final_infer: float
    seconds: float

    def row(self, timing: bool = True) -> dict:
        last = self.log.records[-1]
        row = {
            "run": self.name,
            "iterations": last.iter,
            "cost": last.cost,
            "initial": self.initial,
            "final": self.final,
            "final_over_initial": self.final / self.initial if self.initial else float("nan"),
            "final_infer_scale": self.final_infer,
        }
        if timing:
            row["seconds"] = round(self.seconds, 1)
        return row


def _evaluate(ctx: Context, adapter) -> float:
    rep = ctx.cfg.report
    return evaluate_reward(ctx.model, adapter, ctx.coeffs, ctx.reward, n=rep.eval_n, seed=rep.eval_seed)


def run_tuning(ctx: Context, scfg: StrategyConfig, name: str, initial: float | None = None) -> TuneResult:
    t0 = time.perf_counter()
    lora = ctx.cfg.lora
    adapter, log = train_reward(ctx.model, scfg, ctx.reward, sched=ctx.sched, coeffs=ctx.coeffs,
                                lora_rank=lora.rank, lora_scale=lora.train_scale, budget=ctx.cfg.budget_spec())
    if not log.records:
        raise DrtuneError("budget allowed no iterations", run=name)
    seconds = time.perf_counter() - t0
    if initial is None:
        initial = _evaluate(ctx, None)
    final = _evaluate(ctx, adapter)
    final_infer = _evaluate(ctx, adapter.with_scale(lora.infer_scale))
    return TuneResult(name, log, adapter, initial, final, final_infer, seconds)


def _dump_samples(ctx: Context, adapter, path: Path) -> None:
    rep = ctx.cfg.report
    imgs = sample(ctx.model, ctx.coeffs, rep.dump_n, np.random.default_rng(rep.eval_seed), adapter=adapter)
    reports.write_pgm(path, reports.tile(imgs))


def _timing(cfg: ExperimentConfig) -> bool:
    return cfg.report.timing == "wall"


# ---------------------------------------------------------------- tune / compare


def cmd_tune(cfg: ExperimentConfig) -> dict:
    ctx = load_context(cfg)
    out = _outdir(cfg)
    res = run_tuning(ctx, cfg.strategy(), cfg.tune.kind)
    reports.emit_run_reports({res.name: res.log}, out, timing=_timing(cfg))
    reports.write_summary([res.row(_timing(cfg))], out / "summary.csv")
    save_blocks(out / "adapter.drtl", res.adapter.state_dict())
    _dump_samples(ctx, None, out / "samples_base.pgm")
    _dump_samples(ctx, res.adapter.with_scale(cfg.lora.infer_scale), out / "samples_tuned.pgm")
    return res.row(_timing(cfg))


def compare_configs(cfg: ExperimentConfig) -> dict[str, StrategyConfig]:
    runs = {}
    for kind in cfg.compare.strategies:
        overrides: dict = {"kind": kind, "K": None, "m": None, "sg_input": None}
        if kind == "draft_k":
            overrides["K"] = cfg.compare.draft_k
        elif kind == "drtune":
            overrides.update(K=cfg.tune.K, m=cfg.tune.m)
        elif kind == "refl":
            overrides["m"] = cfg.tune.m
        name = f"draft_{overrides['K']}" if kind == "draft_k" else kind
        runs[name] = cfg.strategy(**overrides)
    return runs


def cmd_compare(cfg: ExperimentConfig) -> dict:
    ctx = load_context(cfg)
    out = _outdir(cfg)
    initial = _evaluate(ctx, None)
    results = {}
    for name, scfg in compare_configs(cfg).items():
        logger.info("compare: %s", name)
        results[name] = run_tuning(ctx, scfg, name, initial=initial)
        _dump_samples(ctx, results[name].adapter.with_scale(cfg.lora.infer_scale), out / name / "samples.pgm")
    reports.emit_run_reports({n: r.log for n, r in results.items()}, out, timing=_timing(cfg))
    rows = [r.row(_timing(cfg)) for r in results.values()]
    reports.write_summary(rows, out / "summary.csv")
    _dump_samples(ctx, None, out / "samples_base.pgm")
    return {"initial": initial, "rows": rows}


# ---------------------------------------------------------------- ablation


def ablation_points(cfg: ExperimentConfig, axis: str) -> list[tuple[float, int]]:
    T = cfg.schedule.T
    ratios = cfg.ablate.k_ratios if axis == "K" else cfg.ablate.m_ratios
    return [(r, min(T, max(1, round(r * T)))) for r in ratios]


def _ablation_job(cfg_text: str, axis: str, value: int, name: str) -> tuple[str, dict, RunLog]:
    cfg = loads(cfg_text)
    ctx = load_context(cfg)
    scfg = cfg.strategy(kind="drtune", **{axis: value})
    res = run_tuning(ctx, scfg, name)
    return name, res.row(cfg.report.timing == "wall"), res.log


def max_workers(n_jobs: int) -> int:
    env = os.environ.get("DRTUNE_THREADS", "")
    cap = int(env) if env.strip().isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(cap, n_jobs))


def cmd_ablate(cfg: ExperimentConfig, axis: str | None = None) -> dict:
    axis = axis or cfg.ablate.axis
    if axis not in ("K", "m"):
        raise DrtuneError("ablation axis must be K or m", axis=axis)
    load_context(cfg)  # fail fast on a missing checkpoint
    out = _outdir(cfg)
    points = ablation_points(cfg, axis)
    text = dumps(cfg)
    # small T can map several ratios onto one value; each distinct value is trained once
    values = sorted({value for _, value in points})
    jobs = [(text, axis, value, f"{axis}={value}") for value in values]
    workers = max_workers(len(jobs))
    if workers == 1:
        done = [_ablation_job(*job) for job in jobs]
    else:
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_ablation_job, *zip(*jobs)))
    by_value = dict(zip(values, done))
    rows = [{"ratio": ratio, axis: value, **by_value[value][1]} for ratio, value in points]
    logs = {name: log for name, _, log in done}
    reports.emit_run_reports(logs, out, timing=_timing(cfg))
    reports.write_summary(rows, out / "summary.csv")
    label = "K/T" if axis == "K" else "m/T"
    reports.write_svg(out / f"ablation_{axis}.svg",
                      {"final": ([r["ratio"] for r in rows], [r["final"] for r in rows]),
                       "initial": ([r["ratio"] for r in rows], [r["initial"] for r in rows])},
                      title=f"{cfg.reward.kind} vs {label}", xlabel=label, ylabel=cfg.reward.kind)
    return {"axis": axis, "rows": rows}


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy of ``cfg`` with ``section={field: value}`` replacements applied."""
    new = loads(dumps(cfg))
    for section, values in sections.items():
        if isinstance(values, dict):
            setattr(new, section, dataclasses.replace(getattr(new, section), **values))
        else:
            setattr(new, section, values)
    return new.validate()
