"""Black-box verification: trigger queries, target match rate, robustness sweeps."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ParamStore
from .model import ModelConfig, greedy_decode_batch
from .vocab import Vocabulary

log = logging.getLogger(__name__)

TRANSFORM_KINDS = ("none", "uniform-noise", "gaussian-blur", "mean-blur")
SURGERY_KINDS = ("none", "prune", "perturb")
MATCH_RULE = "contiguous token containment (semantic equivalence not evaluated)"


def match_target(decoded: Sequence[int], target: Sequence[int]) -> bool:
    """True iff ``target`` occurs as a contiguous run inside ``decoded``."""
    decoded, target = list(decoded), list(target)
    if not target:
        raise ValueError("target must be non-empty")
    m = len(target)
    return any(decoded[i:i + m] == target for i in range(len(decoded) - m + 1))


def decode_many(params: ParamStore, images: Sequence[np.ndarray], questions: Sequence[str],
                model_cfg: ModelConfig, vocab: Vocabulary, max_len: int = 8) -> list[list[int]]:
    """Greedy-decode every (image, question) row, batching rows that share a question."""
    groups: dict[str, list[int]] = defaultdict(list)
    for i, q in enumerate(questions):
        groups[q].append(i)
    out: list[list[int]] = [[] for _ in questions]
    for q, idx in groups.items():
        dec = greedy_decode_batch(params, np.stack([images[i] for i in idx]), vocab.encode(q),
                                  max_len, model_cfg, vocab)
        for i, d in zip(idx, dec):
            out[i] = d
    return out


# -- input transforms ------------------------------------------------------------

def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    if k == 1:
        return np.ones((1, 1))
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(k) - k // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def mean_kernel(k: int) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    return np.full((k, k), 1.0 / (k * k))


def convolve_image(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2-D correlation of every channel of a ``(C, H, W)`` image.

    Borders use symmetric padding (edge pixel repeated: ``c b a | a b c``).
    """
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel dimensions must be odd")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(image, ((0, 0), (ph, ph), (pw, pw)), mode="symmetric")
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return np.einsum("chwij,ij->chw", windows, kernel)


def transform_uniform_noise(image: np.ndarray, delta: float, seed: int = 0) -> np.ndarray:
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return np.array(image, copy=True)
    rng = np.random.default_rng(seed)
    return np.clip(image + rng.uniform(-delta, delta, size=image.shape), 0.0, 1.0)


def transform_gaussian_blur(image: np.ndarray, k: int = 5, sigma: float | None = None) -> np.ndarray:
    sigma = k / 6.0 if sigma is None else sigma
    if k == 1:
        return np.array(image, copy=True)
    return convolve_image(image, gaussian_kernel(k, sigma))


def transform_mean_blur(image: np.ndarray, k: int = 5) -> np.ndarray:
    if k == 1:
        return np.array(image, copy=True)
    return convolve_image(image, mean_kernel(k))


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "none"
    delta: float = 0.05
    kernel: int = 5
    sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "uniform-noise":
            return f"uniform-noise:{self.delta:g}"
        if self.kind == "gaussian-blur":
            sigma = self.kernel / 6.0 if self.sigma is None else self.sigma
            return f"gaussian-blur:{self.kernel}:{sigma:g}"
        return f"mean-blur:{self.kernel}"

    def apply(self, image: np.ndarray, index: int = 0) -> np.ndarray:
        """Transform one image; ``index`` decorrelates noise across triggers."""
        if self.kind == "none":
            return np.array(image, copy=True)
        if self.kind == "uniform-noise":
            return transform_uniform_noise(image, self.delta, seed=np.random.SeedSequence([self.seed, index]))
        if self.kind == "gaussian-blur":
            return transform_gaussian_blur(image, self.kernel, self.sigma)
        return transform_mean_blur(image, self.kernel)


@dataclass(frozen=True)
class SurgerySpec:
    kind: str = "none"
    groups: tuple[str, ...] = ("attention", "mlp")
    amount: float = 0.1          # pruning fraction or relative noise scale
    per_matrix: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SURGERY_KINDS:
            raise ValueError(f"unknown surgery {self.kind!r}")
        if self.amount < 0:
            raise ValueError("surgery amount must be >= 0")
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        return f"{self.kind}:{'+'.join(self.groups)}:{self.amount:g}"

    def apply(self, params: ParamStore) -> ParamStore:
        from .finetune import perturb_weights, prune_weights

        if self.kind == "none":
            return params
        if self.kind == "prune":
            return prune_weights(params, self.groups, self.amount, per_matrix=self.per_matrix)
        return perturb_weights(params, self.groups, self.amount, seed=self.seed)


# -- target match rate -----------------------------------------------------------

@dataclass
class TMRResult:
    hits: list[bool]

    @property
    def m(self) -> int:
        return len(self.hits)

    @property
    def n_hits(self) -> int:
        return int(sum(self.hits))

    @property
    def tmr(self) -> float:
        return self.n_hits / self.m


def compute_tmr(suspect: ParamStore, triggers, transform: TransformSpec | None,
                model_cfg: ModelConfig, vocab: Vocabulary, max_len: int = 8) -> TMRResult:
    """Fraction of triggers whose greedy answer on ``suspect`` contains the target."""
    triggers = list(triggers)
    if not triggers:
        raise ValueError("need at least one trigger")
    transform = transform or TransformSpec()
    images = [transform.apply(b.trigger_image, i) for i, b in enumerate(triggers)]
    decoded = decode_many(suspect, images, [b.question for b in triggers], model_cfg, vocab, max_len)
    return TMRResult([match_target(d, vocab.encode(b.target)) for d, b in zip(decoded, triggers)])


REPORT_COLUMNS = ("run_id", "suspect_id", "strategy", "task_family", "qa_id", "method",
                  "transform", "surgery", "m", "hits", "tmr")
REPORT_VERSION = "1"


@dataclass
class ReportRow:
    run_id: str
    suspect_id: str
    strategy: str
    task_family: str
    qa_id: int
    method: str
    transform: str
    surgery: str
    m: int
    hits: int
    tmr: float

    def __post_init__(self):
        if self.m < 1 or not 0 <= self.hits <= self.m:
            raise ValueError(f"inconsistent counts hits={self.hits} m={self.m}")
        if self.tmr != self.hits / self.m:
            raise ValueError("tmr must equal hits / m")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Suspect:
    id: str
    params: ParamStore
    strategy: str = "none"      # full | lora | released | unrelated
    task_family: str = "-"


@dataclass
class VerificationReport:
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def select(self, **kw) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def mean_tmr(self, **kw) -> float:
        """Trigger-weighted TMR over every matching row."""
        rows = self.select(**kw)
        if not rows:
            raise KeyError(f"no rows match {kw}")
        return sum(r.hits for r in rows) / sum(r.m for r in rows)


def _rows_for(run_id, suspect: Suspect, bundles_by_method, transform, surgery_label, params,
              model_cfg, vocab):
    rows = []
    for method, bundles in bundles_by_method.items():
        by_qa: dict[int, list] = defaultdict(list)
        for b in bundles:
            by_qa[b.qa_id].append(b)
        for qa_id in sorted(by_qa):
            res = compute_tmr(params, by_qa[qa_id], transform, model_cfg, vocab)
            rows.append(ReportRow(run_id, suspect.id, suspect.strategy, suspect.task_family, qa_id,
                                  method, transform.label, surgery_label, res.m, res.n_hits, res.tmr))
    return rows


def verify_suspects(suspects: Sequence[Suspect], bundles_by_method: dict, model_cfg: ModelConfig,
                    vocab: Vocabulary, run_id: str = "run") -> VerificationReport:
    """Untransformed TMR for every suspect, QA pair and method."""
    return robustness_sweep(suspects, bundles_by_method, [TransformSpec()], [SurgerySpec()],
                            model_cfg, vocab, run_id)


def robustness_sweep(suspects: Sequence[Suspect], bundles_by_method: dict,
                     transforms: Sequence[TransformSpec], surgeries: Sequence[SurgerySpec],
                     model_cfg: ModelConfig, vocab: Vocabulary, run_id: str = "run"
                     ) -> VerificationReport:
    """Cross product suspect x transform x surgery; failed cells are logged and skipped."""
    if not suspects or not transforms or not surgeries or not bundles_by_method:
        raise ValueError("robustness sweep needs non-empty suspects, triggers, transforms, surgeries")
    report = VerificationReport()
    for s in suspects:
        for surgery in surgeries:
            try:
                params = surgery.apply(s.params)
            except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                log.warning("surgery %s on %s failed: %s", surgery.label, s.id, exc)
                report.failures.append({"suspect": s.id, "surgery": surgery.label, "error": str(exc)})
                continue
            for t in transforms:
                try:
                    report.rows += _rows_for(run_id, s, bundles_by_method, t, surgery.label, params,
                                             model_cfg, vocab)
                except Exception as exc:  # noqa: BLE001
                    log.warning("cell %s/%s/%s failed: %s", s.id, t.label, surgery.label, exc)
                    report.failures.append({"suspect": s.id, "transform": t.label,
                                            "surgery": surgery.label, "error": str(exc)})
    return report


# -- ablations -------------------------------------------------------------------

ABLATION_KINDS = ("model-lr", "epochs", "samples")


@dataclass
class AblationPoint:
    kind: str
    value: float
    tmr_original: float | None
    tmr_finetuned: float
    per_suspect: dict = field(default_factory=dict)
    diverged: bool = False


def ablation_sweep(kind: str, grid: Sequence[float],
                   forge_fn: Callable[[float], list],
                   finetune_fn: Callable[[float | None], list[Suspect]],
                   released: ParamStore, model_cfg: ModelConfig, vocab: Vocabulary
                   ) -> list[AblationPoint]:
    """Re-forge (model-lr) or re-finetune (epochs, samples) at every grid value.

    ``forge_fn(beta)`` returns trigger bundles (``None`` means the default
    attack); ``finetune_fn(value)`` returns suspects (``None`` means the default
    fine-tunes). Diverged or failed triggers count as misses and set the
    divergence flag.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation {kind!r}")
    if len(grid) == 0:
        raise ValueError("ablation grid must be non-empty")
    points = []
    fixed_suspects = finetune_fn(None) if kind == "model-lr" else None
    fixed_bundles = None if kind == "model-lr" else [b for b in forge_fn(None) if b.valid]
    for v in grid:
        if kind == "model-lr":
            # every forged trigger counts, so lost validity shows up as lost TMR
            bundles, suspects = forge_fn(v), fixed_suspects
        else:
            bundles, suspects = fixed_bundles, finetune_fn(v)
        diverged = any(b.diverged or b.failed for b in bundles)
        usable = [b for b in bundles if not (b.diverged or b.failed)]

        def rate(params):
            if not usable:
                return 0.0
            return compute_tmr(params, usable, None, model_cfg, vocab).n_hits / len(bundles)

        orig = rate(released) if kind == "model-lr" else None
        per = {s.id: rate(s.params) for s in suspects}
        points.append(AblationPoint(kind, v, orig, float(np.mean(list(per.values()))), per, diverged))
    return points
