"""Downstream derivatives of a released model: fine-tuning and model surgery.

Every function here returns a new :class:`ParamStore`; the input store is never
written to.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Graph, ParamStore, Tensor
from .model import ModelConfig, TrainResult, pretrain_base, sgd_train
from .tasks import TaskSpec
from .vocab import Vocabulary

log = logging.getLogger(__name__)

STRATEGIES = ("full", "lora")
DECODER_GROUPS = ("embedding", "attention", "mlp", "head")
# Desk-scale momentum-SGD settings (the AdamW values used for 7B models do not
# transfer to this optimiser/scale): the gentlest learning rate per strategy at
# which three epochs still fit every task family.
DEFAULT_LR = {"full": 0.01, "lora": 0.03}
DEFAULT_BATCH = {"full": 8, "lora": 4}


@dataclass(frozen=True)
class FinetuneConfig:
    strategy: str = "full"
    epochs: int = 3
    lr: float | None = None
    batch_size: int | None = None
    momentum: float = 0.9
    lora_rank: int = 4
    lora_scale: float = 1.0
    trainable: tuple[str, ...] = ("projector",) + DECODER_GROUPS
    steps: int | None = None    # fixed step budget; overrides epochs when set
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.strategy == "lora" and self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.strategy]

    @property
    def batch(self) -> int:
        return self.batch_size if self.batch_size is not None else DEFAULT_BATCH[self.strategy]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr"] = self.learning_rate
        d["batch_size"] = self.batch
        return d


@dataclass
class FinetunedModel:
    params: ParamStore
    provenance: dict = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)


def n_steps(n_samples: int, cfg: FinetuneConfig) -> int:
    if cfg.steps is not None:
        return cfg.steps
    return cfg.epochs * int(np.ceil(n_samples / cfg.batch))


def _provenance(base: ParamStore, task: TaskSpec | None, cfg: FinetuneConfig, res: TrainResult):
    return {
        "base_checksum": base.checksum(),
        "task": asdict(task) if task is not None else None,
        "config": cfg.to_dict(),
        "final_loss": res.final_loss if res.losses else None,
    }


def finetune_full(base: ParamStore, data, cfg: FinetuneConfig, model_cfg: ModelConfig,
                  vocab: Vocabulary, task: TaskSpec | None = None) -> FinetunedModel:
    if cfg.strategy != "full":
        raise ValueError("finetune_full needs strategy='full'")
    params = base.clone()
    names = params.names(cfg.trainable)
    res = sgd_train(params, data, model_cfg, vocab, steps=n_steps(len(data), cfg),
                    lr=cfg.learning_rate, batch_size=cfg.batch, momentum=cfg.momentum,
                    seed=cfg.seed, trainable=names, label="finetune-full")
    return FinetunedModel(params, _provenance(base, task, cfg, res), res.losses)


# -- low-rank adapters -----------------------------------------------------------

def lora_targets(params: ParamStore) -> list[str]:
    """Matrices that receive adapters: every attention and MLP weight matrix."""
    return [n for n in params.names(("attention", "mlp")) if params[n].ndim == 2]


def merge_weight(W: np.ndarray, A: np.ndarray, B: np.ndarray, scale: float) -> np.ndarray:
    """``W + scale * B @ A`` with ``W`` laid out ``(d_out, d_in)``."""
    return W + scale * (B @ A)


def init_adapters(params: ParamStore, rank: int, seed: int) -> ParamStore:
    """A ~ N(0, 1/d_in), B = 0, stored under ``lora.<name>.A`` / ``.B``.

    Model matrices are stored input-major ``(d_in, d_out)``, so A is
    ``(rank, d_in)`` and B is ``(d_out, rank)``.
    """
    rng = np.random.default_rng([seed, 31337])
    ad = ParamStore()
    for n in lora_targets(params):
        d_in, d_out = params[n].shape
        ad.add(f"lora.{n}.A", rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in)), params.groups[n])
        ad.add(f"lora.{n}.B", np.zeros((d_out, rank)), params.groups[n])
    return ad


def adapter_view(g: Graph, leaves: dict[str, Tensor], scale: float) -> dict[str, Tensor]:
    """Model parameter dict whose adapted matrices are ``W + scale * (B A)^T`` graph nodes."""
    out = {k: v for k, v in leaves.items() if not k.startswith("lora.")}
    for k in list(out):
        a, b = leaves.get(f"lora.{k}.A"), leaves.get(f"lora.{k}.B")
        if a is None:
            continue
        delta = g.transpose(g.matmul(b, a), (1, 0))
        out[k] = g.add(out[k], g.scale(delta, scale))
    return out


def merge_adapters(params: ParamStore, adapters: ParamStore, scale: float) -> ParamStore:
    merged = params.clone()
    for n in lora_targets(params):
        A, B = adapters[f"lora.{n}.A"], adapters[f"lora.{n}.B"]
        merged.entries[n] = merge_weight(params[n].T, A, B, scale).T.copy()
    return merged


def finetune_lora(base: ParamStore, data, cfg: FinetuneConfig, model_cfg: ModelConfig,
                  vocab: Vocabulary, task: TaskSpec | None = None,
                  return_adapters: bool = False):
    """Train adapters on attention/MLP matrices plus the full projector, then merge."""
    if cfg.strategy != "lora":
        raise ValueError("finetune_lora needs strategy='lora'")
    combined = base.clone()
    adapters = init_adapters(base, cfg.lora_rank, cfg.seed)
    for k, v in adapters.items():
        combined.add(k, v, adapters.groups[k])
    names = list(adapters) + combined.names(["projector"])
    res = sgd_train(combined, data, model_cfg, vocab, steps=n_steps(len(data), cfg),
                    lr=cfg.learning_rate, batch_size=cfg.batch, momentum=cfg.momentum,
                    seed=cfg.seed, trainable=names, label="finetune-lora",
                    resolve=lambda g, P: adapter_view(g, P, cfg.lora_scale))
    trained = ParamStore({k: combined[k] for k in base}, dict(base.groups))
    trained_adapters = ParamStore({k: combined[k] for k in adapters}, dict(adapters.groups))
    merged = merge_adapters(trained, trained_adapters, cfg.lora_scale)
    model = FinetunedModel(merged, _provenance(base, task, cfg, res), res.losses)
    if return_adapters:
        return model, trained, trained_adapters
    return model


def finetune(base: ParamStore, data, cfg: FinetuneConfig, model_cfg: ModelConfig,
             vocab: Vocabulary, task: TaskSpec | None = None) -> FinetunedModel:
    fn = finetune_full if cfg.strategy == "full" else finetune_lora
    return fn(base, data, cfg, model_cfg, vocab, task)


# -- model surgery ---------------------------------------------------------------

def _surgery_names(model: ParamStore, groups: Sequence[str]) -> list[str]:
    names = [n for n in model.names(groups) if model[n].ndim == 2]
    if not names:
        raise ValueError(f"no weight matrices in groups {list(groups)}")
    return names


def prune_weights(model: ParamStore, groups: Sequence[str], fraction: float,
                  per_matrix: bool = False) -> ParamStore:
    """Zero the ``floor(fraction * n)`` smallest-magnitude weights.

    By default magnitudes are pooled across every selected matrix; ties go to
    the entry that comes first in store order, then row-major order.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    names = _surgery_names(model, groups)
    out = model.clone()
    pools = [[n] for n in names] if per_matrix else [names]
    for pool in pools:
        flat = np.concatenate([out[n].reshape(-1) for n in pool])
        k = int(np.floor(fraction * flat.size))
        if k == 0:
            continue
        drop = np.argsort(np.abs(flat), kind="stable")[:k]
        flat[drop] = 0.0
        offset = 0
        for n in pool:
            size = out[n].size
            out.entries[n] = flat[offset:offset + size].reshape(out[n].shape)
            offset += size
    return out


def perturb_weights(model: ParamStore, groups: Sequence[str], rel_scale: float,
                    seed: int = 0) -> ParamStore:
    """Add N(0, (rel_scale * rms(W))^2) noise to every selected matrix."""
    if rel_scale < 0:
        raise ValueError("rel_scale must be >= 0")
    names = _surgery_names(model, groups)
    out = model.clone()
    if rel_scale == 0:
        return out
    rng = np.random.default_rng([seed, 4242])
    for n in names:
        w = out[n]
        rms = float(np.sqrt(np.mean(w**2)))
        out.entries[n] = w + rng.normal(0.0, rel_scale * rms, size=w.shape)
    return out


def make_unrelated_model(model_cfg: ModelConfig, tasks, seed: int, width: int | None = None,
                         **pretrain_kwargs) -> tuple[ParamStore, ModelConfig]:
    """Independently initialised and pretrained model sharing only the vocabulary."""
    kw = model_cfg.to_dict()
    kw["seed"] = seed
    if width is not None:
        kw["d_model"] = width
    cfg = ModelConfig(**kw)
    pretrain_kwargs.setdefault("seed", seed)
    res = pretrain_base(cfg, tasks, **pretrain_kwargs)
    return res.params, cfg
