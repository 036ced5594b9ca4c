"""End-to-end experiment: pretrain, forge, fine-tune, verify, robustness, ablations, report."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .attack import METHODS, AttackConfig, TriggerBundle, forge, select_base_images, validate_triggers
from .autodiff import ParamStore
from .finetune import FinetuneConfig, finetune, make_unrelated_model, n_steps
from .io import (load_bundles, load_checkpoint, read_report, save_bundles, save_checkpoint,
                 emit_report, write_table, write_trace)
from .model import ModelConfig, pretrain_base
from .tasks import ALL_FAMILIES, FAMILIES, TaskSpec, gen_task_dataset
from .verify import (MATCH_RULE, AblationPoint, Suspect, SurgerySpec, TransformSpec,
                     ablation_sweep, compute_tmr, robustness_sweep, verify_suspects)
from .vocab import DEFAULT_QA_PAIRS, Vocabulary

log = logging.getLogger(__name__)

CACHE_ENV = "VLMTRACE_CACHE"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# -- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    lr: float = 0.05
    batch_size: int = 32
    samples_per_family: int = 500
    data_seed: int = 1
    seed: int = 0
    loss_threshold: float = 0.5


@dataclass(frozen=True)
class SuspectSpec:
    family: str
    strategy: str

    @property
    def id(self) -> str:
        return f"{self.strategy}-{self.family}"


@dataclass(frozen=True)
class UnrelatedSpec:
    seed: int
    width: int | None = None

    @property
    def id(self) -> str:
        return f"unrelated-s{self.seed}" + (f"-d{self.width}" if self.width else "")


@dataclass(frozen=True)
class AblationConfig:
    enabled: bool = True
    qa_ids: tuple[int, ...] = (0,)
    suspects: tuple[str, ...] = ("full-shape-naming", "lora-color-counting")
    beta_grid: tuple[float, ...] = (0.0, 5e-5, 1e-4, 2e-4, 5e-4, 2e-3)
    epoch_grid: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    sample_grid: tuple[int, ...] = (100, 200, 400)
    sample_steps: int | None = None    # None: the default fine-tune's step count


def _default_attacks() -> dict[str, AttackConfig]:
    return {m: AttackConfig(method=m) for m in METHODS}


def _default_suspects() -> tuple[SuspectSpec, ...]:
    return tuple(SuspectSpec(f, s) for s in ("full", "lora") for f in FAMILIES)


def _default_transforms() -> tuple[TransformSpec, ...]:
    return (TransformSpec("none"), TransformSpec("uniform-noise", delta=0.05),
            TransformSpec("gaussian-blur", kernel=5), TransformSpec("mean-blur", kernel=5))


def _default_surgeries() -> tuple[SurgerySpec, ...]:
    out = [SurgerySpec("none")]
    for kind in ("prune", "perturb"):
        for groups in (("attention",), ("mlp",), ("attention", "mlp")):
            out.append(SurgerySpec(kind, groups, 0.1))
    return tuple(out)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    qa_pairs: tuple[tuple[str, str], ...] = DEFAULT_QA_PAIRS
    n_images: int = 20
    attacks: dict = field(default_factory=_default_attacks)
    suspects: tuple[SuspectSpec, ...] = field(default_factory=_default_suspects)
    finetune: dict = field(default_factory=lambda: {s: FinetuneConfig(strategy=s) for s in ("full", "lora")})
    finetune_samples: int = 400
    unrelated: tuple[UnrelatedSpec, ...] = (UnrelatedSpec(101), UnrelatedSpec(202, width=48))
    transforms: tuple[TransformSpec, ...] = field(default_factory=_default_transforms)
    surgeries: tuple[SurgerySpec, ...] = field(default_factory=_default_surgeries)
    robust_methods: tuple[str, ...] = ("ordinary", "pla")
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1:
            raise ConfigError("n_images must be >= 1")
        if not self.qa_pairs:
            raise ConfigError("need at least one QA pair")
        for m, a in self.attacks.items():
            if m not in METHODS or a.method != m:
                raise ConfigError(f"attack entry {m!r} must be one of {METHODS} with matching method")
        for s in self.suspects:
            if s.family not in FAMILIES:
                raise ConfigError(f"unknown task family {s.family!r}")
            if s.strategy not in self.finetune:
                raise ConfigError(f"no finetune config for strategy {s.strategy!r}")
        ids = [s.id for s in self.suspects]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate suspects")
        for m in self.robust_methods:
            if m not in self.attacks:
                raise ConfigError(f"robust method {m!r} has no attack config")

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return _from_dict(d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _from_dict(d: dict) -> ExperimentConfig:
    base = ExperimentConfig()
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kw: dict[str, Any] = {}
    if "model" in d:
        kw["model"] = _build(ModelConfig, d["model"], "model")
    if "pretrain" in d:
        kw["pretrain"] = _build(PretrainConfig, d["pretrain"], "pretrain")
    if "qa_pairs" in d:
        kw["qa_pairs"] = tuple((str(q), str(a)) for q, a in d["qa_pairs"])
    if "attacks" in d:
        attacks = dict(base.attacks)
        for m, a in d["attacks"].items():
            attacks[m] = _build(AttackConfig, {"method": m, **a}, f"attacks.{m}")
        kw["attacks"] = attacks
    if "suspects" in d:
        kw["suspects"] = tuple(_build(SuspectSpec, s, "suspects") for s in d["suspects"])
    if "finetune" in d:
        ft = dict(base.finetune)
        for s, c in d["finetune"].items():
            ft[s] = _build(FinetuneConfig, {"strategy": s, **c}, f"finetune.{s}")
        kw["finetune"] = ft
    if "unrelated" in d:
        kw["unrelated"] = tuple(_build(UnrelatedSpec, u, "unrelated") for u in d["unrelated"])
    if "transforms" in d:
        kw["transforms"] = tuple(_build(TransformSpec, t, "transforms") for t in d["transforms"])
    if "surgeries" in d:
        kw["surgeries"] = tuple(_build(SurgerySpec, s, "surgeries") for s in d["surgeries"])
    if "ablation" in d:
        kw["ablation"] = _build(AblationConfig, d["ablation"], "ablation")
    for k in ("n_images", "finetune_samples", "seed"):
        if k in d:
            if not isinstance(d[k], int) or isinstance(d[k], bool):
                raise ConfigError(f"{k} must be an integer")
            kw[k] = d[k]
    if "robust_methods" in d:
        kw["robust_methods"] = tuple(d["robust_methods"])
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(d: dict) -> str:
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if isinstance(d, dict) and "config" in d and "config_hash" in d:
        d = d["config"]     # a run directory's config.json snapshot
    return ExperimentConfig.from_dict(d)


# -- run context -----------------------------------------------------------------

@dataclass
class Run:
    """Paths and shared state for one pipeline directory."""
    cfg: ExperimentConfig
    out: Path
    fmt: str = "csv"
    cache_dir: Path | None = None
    vocab: Vocabulary = field(default_factory=Vocabulary.default)
    _released: ParamStore | None = None
    _triggers: dict = field(default_factory=dict)
    _suspects: dict = field(default_factory=dict)
    _unrelated: dict = field(default_factory=dict)
    checksum_log: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)
        if self.cache_dir is None and os.environ.get(CACHE_ENV):
            self.cache_dir = Path(os.environ[CACHE_ENV])
        if self.fmt not in ("csv", "json"):
            raise ConfigError(f"unknown format {self.fmt!r}")

    @property
    def chash(self) -> str:
        return self.cfg.hash()

    @property
    def model_cfg(self) -> ModelConfig:
        return self.cfg.model

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def meta(self, **extra) -> dict:
        m = {"config_hash": self.chash, "released_checksum": self.released.checksum(),
             "seed": self.cfg.seed}
        m.update(extra)
        return m

    @property
    def released(self) -> ParamStore:
        if self._released is None:
            p = self.path("released.ckpt")
            if not p.exists():
                raise StageError("pretrain", f"missing {p}; run the pretrain stage first")
            self._released = load_checkpoint(p).params
        return self._released

    def triggers(self, method: str) -> list[TriggerBundle]:
        if method not in self._triggers:
            p = self.path("triggers", f"{method}.npz")
            if not p.exists():
                raise StageError("forge", f"missing {p}; run forge --method {method} first")
            self._triggers[method] = load_bundles(p)[0]
        return self._triggers[method]

    def shipped(self, method: str) -> list[TriggerBundle]:
        return [b for b in self.triggers(method) if b.valid]

    def suspect(self, spec: SuspectSpec) -> Suspect:
        if spec.id not in self._suspects:
            p = self.path("suspects", f"{spec.id}.ckpt")
            if not p.exists():
                raise StageError("finetune", f"missing {p}; run finetune first")
            self._suspects[spec.id] = load_checkpoint(p).params
        return Suspect(spec.id, self._suspects[spec.id], spec.strategy, spec.family)

    def unrelated(self, spec: UnrelatedSpec) -> tuple[ParamStore, ModelConfig]:
        if spec.id not in self._unrelated:
            p = self.path("unrelated", f"{spec.id}.ckpt")
            if not p.exists():
                raise StageError("finetune", f"missing {p}; run finetune first")
            ck = load_checkpoint(p)
            self._unrelated[spec.id] = (ck.params, ck.model_config)
        return self._unrelated[spec.id]

    def note_checksum(self, stage: str, before: str):
        after = self.released.checksum()
        self.checksum_log.append({"stage": stage, "before": before, "after": after})
        if before != after:
            raise StageError(stage, "released parameters were modified")


def _pretrain_tasks(p: PretrainConfig):
    return [TaskSpec(f, seed=p.data_seed, n_samples=p.samples_per_family) for f in ALL_FAMILIES]


def _cached_pretrain(run: Run, model_cfg: ModelConfig, p: PretrainConfig, label: str
                     ) -> tuple[ParamStore, list[float]]:
    """Pretrained parameters and loss curve, reused from the cache directory when present."""
    key = config_hash({"model": model_cfg.to_dict(), "pretrain": dataclasses.asdict(p)})
    cache = run.cache_dir / f"pretrain-{key}.ckpt" if run.cache_dir else None
    if cache is not None and cache.exists():
        log.info("%s: reusing cached pretraining %s", label, cache)
        ck = load_checkpoint(cache)
        return ck.params, list(ck.meta.get("losses", []))
    t = time.perf_counter()
    res = pretrain_base(model_cfg, _pretrain_tasks(p), steps=p.steps, lr=p.lr, seed=p.seed,
                        vocab=run.vocab, batch_size=p.batch_size, loss_threshold=p.loss_threshold)
    log.info("%s: pretrained in %.1fs, final loss %.4f", label, time.perf_counter() - t, res.final_loss)
    if cache is not None:
        save_checkpoint(res.params, cache, model_cfg, {"pretrain_key": key, "losses": res.losses})
    return res.params, res.losses


# -- stages ----------------------------------------------------------------------

def stage_pretrain(run: Run) -> ParamStore:
    p = run.path("released.ckpt")
    if p.exists():
        # the released checkpoint is written once and never rewritten
        run._released = load_checkpoint(p).params
        return run._released
    params, losses = _cached_pretrain(run, run.model_cfg, run.cfg.pretrain, "released")
    run._released = params
    save_checkpoint(params, p, run.model_cfg, {"config_hash": run.chash, "role": "released"})
    write_trace(losses, run.path("traces", "pretrain"), run.meta(stage="pretrain"))
    return params


def _trigger_rows(run: Run):
    images, ids = select_base_images(run.released, run.cfg.qa_pairs, run.cfg.n_images, run.cfg.seed,
                                     run.model_cfg, run.vocab)
    rows = [(img_id, img, qa_id, q, a) for qa_id, (q, a) in enumerate(run.cfg.qa_pairs)
            for img_id, img in zip(ids, images)]
    return rows


def forge_rows(run: Run, cfg: AttackConfig, rows) -> list[TriggerBundle]:
    before = run.released.checksum()
    bundles = forge(run.released, [r[1] for r in rows], [r[3] for r in rows], [r[4] for r in rows],
                    cfg, run.model_cfg, run.vocab, qa_ids=[r[2] for r in rows],
                    image_ids=[r[0] for r in rows])
    validate_triggers(run.released, bundles, run.model_cfg, run.vocab)
    run.note_checksum(f"forge:{cfg.method}", before)
    return bundles


def stage_forge(run: Run, methods=None) -> dict[str, list[TriggerBundle]]:
    methods = list(methods or run.cfg.attacks)
    rows = _trigger_rows(run)
    out = {}
    for m in methods:
        cfg = dataclasses.replace(run.cfg.attacks[m], seed=run.cfg.seed)
        t = time.perf_counter()
        bundles = forge_rows(run, cfg, rows)
        run.timings[f"forge:{m}"] = time.perf_counter() - t
        log.info("forge %s: %d triggers in %.1fs, valid %d", m, len(bundles),
                 run.timings[f"forge:{m}"], sum(b.valid for b in bundles))
        save_bundles(bundles, run.path("triggers", f"{m}.npz"), run.meta(method=m))
        for qa_id in range(len(run.cfg.qa_pairs)):
            traces = [b.losses for b in bundles if b.qa_id == qa_id]
            n = min(len(t) for t in traces)
            mean = np.mean([t[:n] for t in traces], axis=0) if n else []
            write_trace(mean, run.path("traces", f"{m}-qa{qa_id}"), run.meta(method=m, qa_id=qa_id,
                                                                           aggregate="mean over images"))
        run._triggers[m] = bundles
        out[m] = bundles
    return out


def finetune_data(run: Run, family: str, n_samples: int | None = None):
    spec = TaskSpec(family, seed=1000 + run.cfg.seed, n_samples=n_samples or run.cfg.finetune_samples,
                    variant="finetune")
    return spec, gen_task_dataset(spec, run.model_cfg.image_size, run.vocab, run.cfg.qa_pairs)


def finetune_suspect(run: Run, spec: SuspectSpec, **overrides) -> tuple[ParamStore, dict]:
    task, data = finetune_data(run, spec.family, overrides.pop("n_samples", None))
    fcfg = dataclasses.replace(run.cfg.finetune[spec.strategy], seed=run.cfg.seed, **overrides)
    model = finetune(run.released, data, fcfg, run.model_cfg, run.vocab, task)
    return model.params, model.provenance


def stage_finetune(run: Run, strategies=None, unrelated: bool = True) -> None:
    strategies = strategies or sorted({s.strategy for s in run.cfg.suspects})
    before = run.released.checksum()
    for spec in run.cfg.suspects:
        if spec.strategy not in strategies:
            continue
        t = time.perf_counter()
        params, prov = finetune_suspect(run, spec)
        run.timings[f"finetune:{spec.id}"] = time.perf_counter() - t
        run._suspects[spec.id] = params
        save_checkpoint(params, run.path("suspects", f"{spec.id}.ckpt"), run.model_cfg,
                        {"config_hash": run.chash, "role": "suspect",
                         "released_checksum": before})
        prov = dict(prov, config_hash=run.chash, released_checksum=before)
        run.path("suspects", f"{spec.id}.provenance.json").write_text(
            json.dumps(prov, indent=1, sort_keys=True) + "\n")
    if unrelated:
        for u in run.cfg.unrelated:
            kw = run.model_cfg.to_dict()
            kw.update(seed=u.seed, **({"d_model": u.width} if u.width else {}))
            mcfg = ModelConfig(**kw)
            pcfg = dataclasses.replace(run.cfg.pretrain, seed=u.seed, data_seed=u.seed)
            params, _ = _cached_pretrain(run, mcfg, pcfg, u.id)
            run._unrelated[u.id] = (params, mcfg)
            save_checkpoint(params, run.path("unrelated", f"{u.id}.ckpt"), mcfg,
                            {"config_hash": run.chash, "role": "unrelated",
                             "released_checksum": before})
    run.note_checksum("finetune", before)


def _report_meta(run: Run, stage: str) -> dict:
    return run.meta(stage=stage, match_rule=MATCH_RULE)


def stage_verify(run: Run):
    before = run.released.checksum()
    shipped = {m: run.shipped(m) for m in run.cfg.attacks}
    shipped = {m: b for m, b in shipped.items() if b}
    if not shipped:
        raise StageError("verify", "no valid triggers to verify")
    suspects = [Suspect("released", run.released, "released", "-")]
    suspects += [run.suspect(s) for s in run.cfg.suspects]
    report = verify_suspects(suspects, shipped, run.model_cfg, run.vocab, run.chash)
    for u in run.cfg.unrelated:
        params, mcfg = run.unrelated(u)
        report.rows += verify_suspects([Suspect(u.id, params, "unrelated", "-")], shipped, mcfg,
                                       run.vocab, run.chash).rows
    run.note_checksum("verify", before)
    emit_report(report.rows, run.path("reports", "verify"), run.fmt, _report_meta(run, "verify"))
    return report


def stage_robust(run: Run):
    before = run.released.checksum()
    shipped = {m: run.shipped(m) for m in run.cfg.robust_methods if run.shipped(m)}
    suspects = [run.suspect(s) for s in run.cfg.suspects]
    report = robustness_sweep(suspects, shipped, run.cfg.transforms, run.cfg.surgeries,
                              run.model_cfg, run.vocab, run.chash)
    run.note_checksum("robust", before)
    meta = _report_meta(run, "robust")
    meta["failures"] = len(report.failures)
    emit_report(report.rows, run.path("reports", "robust"), run.fmt, meta)
    return report


ABLATION_COLUMNS = ("kind", "value", "tmr_original", "tmr_finetuned", "diverged", "per_suspect")


def stage_ablate(run: Run) -> dict[str, list[AblationPoint]]:
    ab = run.cfg.ablation
    before = run.released.checksum()
    specs = {s.id: s for s in run.cfg.suspects}
    chosen = [specs[i] for i in ab.suspects if i in specs] or list(run.cfg.suspects[:2])
    qa = set(ab.qa_ids)
    rows = [r for r in _trigger_rows(run) if r[2] in qa]
    pla = dataclasses.replace(run.cfg.attacks.get("pla", AttackConfig("pla")), seed=run.cfg.seed)
    default_suspects = [run.suspect(s) for s in chosen]

    def forge_fn(beta):
        if beta is None:
            return [b for b in run.triggers("pla") if b.qa_id in qa]
        return forge_rows(run, dataclasses.replace(pla, beta=float(beta)), rows)

    def ft_fn(kind):
        def fn(value):
            if value is None:
                return default_suspects
            out = []
            for s in chosen:
                if kind == "epochs":
                    params, _ = finetune_suspect(run, s, epochs=int(value))
                else:
                    steps = ab.sample_steps or n_steps(run.cfg.finetune_samples, run.cfg.finetune[s.strategy])
                    params, _ = finetune_suspect(run, s, n_samples=int(value), steps=steps)
                out.append(Suspect(s.id, params, s.strategy, s.family))
            return out
        return fn

    results = {
        "model-lr": ablation_sweep("model-lr", ab.beta_grid, forge_fn, ft_fn("model-lr"),
                                   run.released, run.model_cfg, run.vocab),
        "epochs": ablation_sweep("epochs", ab.epoch_grid, forge_fn, ft_fn("epochs"),
                                 run.released, run.model_cfg, run.vocab),
        "samples": ablation_sweep("samples", ab.sample_grid, forge_fn, ft_fn("samples"),
                                  run.released, run.model_cfg, run.vocab),
    }
    run.note_checksum("ablate", before)
    table = []
    for kind, pts in results.items():
        for p in pts:
            table.append({"kind": kind, "value": float(p.value),
                          "tmr_original": "" if p.tmr_original is None else float(p.tmr_original),
                          "tmr_finetuned": float(p.tmr_finetuned), "diverged": p.diverged,
                          "per_suspect": ";".join(f"{k}={v!r}" for k, v in sorted(p.per_suspect.items()))})
    write_table(ABLATION_COLUMNS, table, run.path("reports", "ablation"), run.fmt,
                _report_meta(run, "ablate"))
    return results


# -- summary and acceptance checks -----------------------------------------------

def _report_path(run: Run, name: str) -> Path:
    for ext in (run.fmt, "csv", "json"):
        p = run.path("reports", f"{name}.{ext}")
        if p.exists():
            return p
    raise StageError("report", f"missing report {name}; run the corresponding stage first")


def summarize(run: Run) -> dict:
    """Aggregate metrics and acceptance checks from the artifacts on disk."""
    cfg = run.cfg
    s: dict[str, Any] = {"config_hash": run.chash, "released_checksum": run.released.checksum(),
                         "seed": cfg.seed}
    checks: dict[str, bool] = {}

    forged = {m: run.triggers(m) for m in cfg.attacks}
    eps = max(a.epsilon for a in cfg.attacks.values())
    s["validity"] = {m: {"n": len(b), "flag_b": float(np.mean([x.trigger_hit for x in b])),
                         "flag_a": float(np.mean([x.clean_rare for x in b])),
                         "shipped": sum(x.valid for x in b)} for m, b in forged.items()}
    checks["validity_flag_b"] = all(v["flag_b"] >= 0.95 for v in s["validity"].values())
    checks["validity_flag_a"] = all(v["flag_a"] == 1.0 for v in s["validity"].values())
    tol = 1e-12
    s["constraints"] = {m: {"max_linf": max(x.max_linf for x in b),
                            "pixel_min": min(x.pixel_range[0] for x in b),
                            "pixel_max": max(x.pixel_range[1] for x in b),
                            "max_update": max(x.max_update for x in b)} for m, b in forged.items()}
    checks["constraints"] = all(
        c["max_linf"] <= cfg.attacks[m].epsilon + tol and c["pixel_min"] >= 0 and c["pixel_max"] <= 1
        and c["max_update"] <= cfg.attacks[m].clip + tol for m, c in s["constraints"].items())
    s["epsilon"] = eps

    _, vrows = read_report(_report_path(run, "verify"))
    from .verify import VerificationReport
    vrep = VerificationReport(vrows)
    ft_ids = [sp.id for sp in cfg.suspects]
    headline = {}
    for m in cfg.attacks:
        per = {}
        for sid in ft_ids:
            rows = vrep.select(suspect_id=sid, method=m)
            if rows:
                per[sid] = sum(r.hits for r in rows) / sum(r.m for r in rows)
        headline[m] = {"per_suspect": per, "mean": float(np.mean(list(per.values()))) if per else 0.0}
    s["headline"] = headline
    mean = {m: headline[m]["mean"] for m in headline}
    if {"ordinary", "rna", "pla"} <= set(mean):
        checks["headline_order"] = mean["pla"] > mean["rna"] > mean["ordinary"]
        checks["headline_ordinary_low"] = mean["ordinary"] <= 0.15
        checks["headline_gap"] = mean["pla"] - mean["ordinary"] >= 0.25
    s["released_tmr"] = {m: vrep.mean_tmr(suspect_id="released", method=m)
                         for m in cfg.attacks if vrep.select(suspect_id="released", method=m)}
    s["unrelated_tmr"] = {u.id: {m: vrep.mean_tmr(suspect_id=u.id, method=m) for m in cfg.attacks
                                 if vrep.select(suspect_id=u.id, method=m)} for u in cfg.unrelated}
    checks["specificity"] = all(v == 0.0 for d in s["unrelated_tmr"].values() for v in d.values())

    try:
        _, rrows = read_report(_report_path(run, "robust"))
    except StageError:
        rrows = None
    if rrows is not None:
        rrep = VerificationReport(rrows)
        cells = {}
        ok = True
        for sid in ft_ids:
            ordinary = headline.get("ordinary", {}).get("per_suspect", {}).get(sid, 0.0)
            for m in cfg.robust_methods:
                if not rrep.select(suspect_id=sid, method=m):
                    continue
                clean = rrep.mean_tmr(suspect_id=sid, method=m, transform="none", surgery="none")
                for t in cfg.transforms:
                    for sg in cfg.surgeries:
                        if t.kind == "none" and sg.kind == "none":
                            continue
                        v = rrep.mean_tmr(suspect_id=sid, method=m, transform=t.label, surgery=sg.label)
                        cells[f"{sid}|{m}|{t.label}|{sg.label}"] = v
                        if m == "pla":
                            ok &= v <= clean + 0.05 and v >= ordinary
        s["robust_cells"] = cells
        checks["robustness"] = ok

    try:
        _, arows = _read_ablation(run)
    except StageError:
        arows = None
    if arows is not None:
        by = {}
        for r in arows:
            by.setdefault(r["kind"], []).append((float(r["value"]), float(r["tmr_finetuned"])))
        s["ablation"] = by
        if by.get("model-lr"):
            pts = sorted(by["model-lr"])
            lo, hi = pts[0][1], pts[-1][1]
            checks["ablation_beta_interior"] = any(v > lo and v > hi for _, v in pts[1:-1])
        if by.get("epochs"):
            pts = sorted(by["epochs"])
            checks["ablation_epochs_flat"] = all(abs(a[1] - b[1]) <= 0.1 for a, b in zip(pts, pts[1:])
                                                 if a[0] >= 4)
        if by.get("samples"):
            vals = [v for _, v in by["samples"]]
            checks["ablation_samples_flat"] = max(vals) - min(vals) <= 0.15

    checks["non_mutation"] = all(e["before"] == e["after"] for e in run.checksum_log) and \
        s["released_checksum"] == load_checkpoint(run.path("released.ckpt")).params.checksum()
    s["checksum_log"] = run.checksum_log
    s["checks"] = checks
    return s


def _read_ablation(run: Run):
    from .io import parse_csv
    p = _report_path(run, "ablation")
    if p.suffix == ".json":
        doc = json.loads(p.read_text())
        return doc["metadata"], [dict(zip(doc["columns"], r)) for r in doc["rows"]]
    return parse_csv(p.read_text())


def stage_report(run: Run, figures: bool = True) -> dict:
    summary = summarize(run)
    text = json.dumps(summary, indent=1, sort_keys=True, default=float) + "\n"
    run.path("reports").mkdir(parents=True, exist_ok=True)
    run.path("reports", "summary.json").write_text(text)
    if figures:
        from .plotting import render_figures
        render_figures(run, summary)
    return summary


def write_config_snapshot(run: Run) -> Path:
    doc = {"config": run.cfg.to_dict(), "config_hash": run.chash,
           "released_checksum": run.released.checksum()}
    p = run.path("config.json")
    p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return p


STAGES = ("pretrain", "forge", "finetune", "verify", "robust", "ablate", "report")


def run_pipeline(cfg: ExperimentConfig, out, fmt: str = "csv", cache_dir=None, figures: bool = True,
                 stages=STAGES) -> dict:
    """Run every stage into ``out`` and return the summary (metrics + checks)."""
    run = Run(cfg, Path(out), fmt, Path(cache_dir) if cache_dir else None)
    run.out.mkdir(parents=True, exist_ok=True)
    actions = {
        "pretrain": lambda: (stage_pretrain(run), write_config_snapshot(run)),
        "forge": lambda: stage_forge(run),
        "finetune": lambda: stage_finetune(run),
        "verify": lambda: stage_verify(run),
        "robust": lambda: stage_robust(run),
        "ablate": lambda: stage_ablate(run) if cfg.ablation.enabled else None,
        "report": lambda: None,
    }
    for name in stages:
        t = time.perf_counter()
        try:
            actions[name]()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        run.timings[name] = time.perf_counter() - t
        log.info("stage %s done in %.1fs", name, run.timings[name])
    summary = stage_report(run, figures) if "report" in stages else summarize(run)
    summary["timings"] = run.timings
    return summary
