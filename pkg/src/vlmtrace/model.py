"""A desk-scale vision-conditioned causal language model.

Pipeline: 4x4 patches -> linear patch embedding + GELU (vision) -> linear
projector -> concatenated with text token embeddings -> pre-LN decoder blocks
-> final layer norm -> vocabulary head. The token layout is::

    [patch_0 .. patch_{N-1}] [BOS q_1 .. q_n SEP] [a_1 .. a_m]

and the loss is the mean cross-entropy of ``a_1 .. a_m, EOS`` predicted at the
answer positions only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Graph, ParamStore, Tensor
from .vocab import Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    max_seq_len: int = 32
    vocab_size: int = 96
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_patches >= self.max_seq_len:
            raise ValueError("max_seq_len leaves no room for text")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    d, h = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = {
        "vision.patch.w": ((cfg.patch_dim, d), "vision"),
        "vision.patch.b": ((d,), "vision"),
        "projector.w": ((d, d), "projector"),
        "projector.b": ((d,), "projector"),
        "embed.tok": ((cfg.vocab_size, d), "embedding"),
        "embed.pos": ((cfg.max_seq_len, d), "embedding"),
    }
    for i in range(cfg.n_blocks):
        p = f"decoder.block{i}"
        for m in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{m}"] = ((d, d), "attention")
        shapes[f"{p}.mlp.w1"] = ((d, h), "mlp")
        shapes[f"{p}.mlp.b1"] = ((h,), "mlp")
        shapes[f"{p}.mlp.w2"] = ((h, d), "mlp")
        shapes[f"{p}.mlp.b2"] = ((d,), "mlp")
    shapes["head.w"] = ((d, cfg.vocab_size), "head")
    return shapes


def init_model(cfg: ModelConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    ps = ParamStore()
    resid = 1.0 / math.sqrt(2 * cfg.n_blocks)
    for name, (shape, group) in param_shapes(cfg).items():
        if len(shape) == 1:
            value = np.zeros(shape)
        elif group == "embedding":
            value = rng.normal(0.0, 0.5, size=shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith((".wo", ".w2")):
                std *= resid
            value = rng.normal(0.0, std, size=shape)
        ps.add(name, value, group)
    return ps


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray      # (B, 3, H, W)
    text: np.ndarray        # (B, L) input ids, right-padded
    targets: np.ndarray     # (B, N + L) next-token ids (0 where unused)
    weights: np.ndarray     # (B, N + L) 1.0 on answer positions


def make_batch(cfg: ModelConfig, vocab: Vocabulary, images: Sequence[np.ndarray],
               questions: Sequence[Sequence[int]], answers: Sequence[Sequence[int]]) -> Batch:
    rows = []
    for q, a in zip(questions, answers):
        if len(a) == 0:
            raise ValueError("answer must contain at least one token")
        seq = [vocab.bos, *q, vocab.sep, *a, vocab.eos]
        if cfg.n_patches + len(seq) - 1 > cfg.max_seq_len:
            raise ValueError(f"sequence of {cfg.n_patches + len(seq) - 1} positions exceeds "
                             f"max_seq_len={cfg.max_seq_len}")
        rows.append((seq, len(q) + 1))  # index of SEP within seq
    L = max(len(s) - 1 for s, _ in rows)
    B, N = len(rows), cfg.n_patches
    text = np.full((B, L), vocab.pad, dtype=np.int64)
    targets = np.zeros((B, N + L), dtype=np.int64)
    weights = np.zeros((B, N + L))
    for b, (seq, sep) in enumerate(rows):
        text[b, :len(seq) - 1] = seq[:-1]
        for j in range(sep, len(seq) - 1):
            targets[b, N + j] = seq[j + 1]
            weights[b, N + j] = 1.0
    return Batch(np.stack([np.asarray(i, dtype=float) for i in images]), text, targets, weights)


# -- forward -----------------------------------------------------------------

_MASKS: dict[int, np.ndarray] = {}


def _causal(T: int) -> np.ndarray:
    if T not in _MASKS:
        _MASKS[T] = np.tril(np.ones((T, T), dtype=bool))
    return _MASKS[T]


def logits(g: Graph, P: dict[str, Tensor], images: Tensor, text: np.ndarray,
           cfg: ModelConfig) -> Tensor:
    """``(B, N + L, V)`` logits. Parameters may be shared or stacked per sample."""
    B = images.shape[0]
    p, n = cfg.patch_size, cfg.image_size // cfg.patch_size
    x = g.reshape(images, (B, 3, n, p, n, p))
    x = g.transpose(x, (0, 2, 4, 1, 3, 5))
    x = g.reshape(x, (B, n * n, cfg.patch_dim))
    x = g.gelu(g.add_bias(g.matmul(x, P["vision.patch.w"]), P["vision.patch.b"]))
    x = g.add_bias(g.matmul(x, P["projector.w"]), P["projector.b"])
    h = g.concat([x, g.embedding(P["embed.tok"], text)], axis=1)
    T = h.shape[1]
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len={cfg.max_seq_len}")
    pos_table = P["embed.pos"]
    pos_ids = np.arange(T) if pos_table.data.ndim == 2 else np.broadcast_to(np.arange(T), (B, T))
    h = g.add(h, g.embedding(pos_table, pos_ids))

    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    mask = _causal(T)
    for i in range(cfg.n_blocks):
        pre = f"decoder.block{i}"
        a = g.layer_norm(h)

        def heads(t):
            return g.transpose(g.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = heads(g.matmul(a, P[f"{pre}.attn.wq"]))
        k = heads(g.matmul(a, P[f"{pre}.attn.wk"]))
        v = heads(g.matmul(a, P[f"{pre}.attn.wv"]))
        s = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        o = g.matmul(g.softmax(s, mask), v)
        o = g.reshape(g.transpose(o, (0, 2, 1, 3)), (B, T, cfg.d_model))
        h = g.add(h, g.matmul(o, P[f"{pre}.attn.wo"]))

        m = g.layer_norm(h)
        m = g.gelu(g.add_bias(g.matmul(m, P[f"{pre}.mlp.w1"]), P[f"{pre}.mlp.b1"]))
        h = g.add(h, g.add_bias(g.matmul(m, P[f"{pre}.mlp.w2"]), P[f"{pre}.mlp.b2"]))
    return g.matmul(g.layer_norm(h), P["head.w"])


def batch_losses(g: Graph, P: dict[str, Tensor], images: Tensor, batch: Batch,
                 cfg: ModelConfig) -> Tensor:
    """Per-sample answer-position cross-entropy, shape ``(B,)``."""
    return g.cross_entropy(logits(g, P, images, batch.text, cfg), batch.targets, batch.weights)


def forward_loss(params: ParamStore, image: np.ndarray, question: Sequence[int],
                 answer: Sequence[int], cfg: ModelConfig, vocab: Vocabulary,
                 image_grad: bool = True, param_grad: bool = True):
    """Scalar loss for one example plus the graph that produced it.

    The image leaf is registered under the name ``"image"``.
    """
    batch = make_batch(cfg, vocab, [image], [question], [answer])
    g = Graph()
    P = params.leaves(g, requires_grad=param_grad)
    img = g.leaf(batch.images, requires_grad=image_grad, name="image")
    loss = g.sum(batch_losses(g, P, img, batch, cfg))
    return loss, g


# -- decoding ----------------------------------------------------------------

def greedy_decode_batch(params: ParamStore, images: np.ndarray, question: Sequence[int],
                        max_len: int, cfg: ModelConfig, vocab: Vocabulary) -> list[list[int]]:
    """Greedy continuation for a batch of images sharing one question.

    Stops at EOS (not included) or after ``max_len`` tokens. Ties resolve to
    the lowest token id.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    images = np.asarray(images, dtype=float)
    B = images.shape[0]
    prefix = np.array([vocab.bos, *question, vocab.sep], dtype=np.int64)
    text = np.broadcast_to(prefix, (B, prefix.size)).copy()
    budget = min(max_len, cfg.max_seq_len - cfg.n_patches - prefix.size + 1)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max(budget, 0)):
        g = Graph()
        P = params.leaves(g)
        z = logits(g, P, g.leaf(images), text, cfg).data[:, -1, :]
        nxt = np.argmax(z, axis=-1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == vocab.eos:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
        if done.all():
            break
        text = np.concatenate([text, nxt[:, None]], axis=1)
    return out


def greedy_decode(params: ParamStore, image: np.ndarray, question: Sequence[int], max_len: int,
                  cfg: ModelConfig, vocab: Vocabulary) -> list[int]:
    return greedy_decode_batch(params, np.asarray(image)[None], question, max_len, cfg, vocab)[0]


# -- pretraining -------------------------------------------------------------

class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ParamStore
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        # mean over the last fifth of training, at most 50 steps
        tail = self.losses[-min(50, max(1, len(self.losses) // 5)):]
        return float(np.mean(tail)) if tail else float("nan")


def encode_samples(samples, vocab: Vocabulary):
    return ([s.image for s in samples], [vocab.encode(s.question) for s in samples],
            [vocab.encode(s.answer) for s in samples])


def sgd_train(params: ParamStore, samples, cfg: ModelConfig, vocab: Vocabulary, *, steps: int,
              lr: float, batch_size: int = 32, momentum: float = 0.9, seed: int = 0,
              trainable: Sequence[str] | None = None, clip_norm: float | None = 1.0,
              label: str = "train", resolve=None) -> TrainResult:
    """Momentum SGD on ``params`` in place over shuffled minibatches.

    ``resolve(graph, leaves)`` may map the leaf dict to the parameter dict the
    forward pass consumes (used to fold adapters into base weights).
    """
    imgs, qs, ans = encode_samples(samples, vocab)
    names = list(trainable) if trainable is not None else list(params)
    vel = {k: np.zeros_like(params[k]) for k in names}
    rng = np.random.default_rng([seed, 104729])
    order = rng.permutation(len(samples))
    cursor = 0
    losses = []
    for step in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(samples))
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        batch = make_batch(cfg, vocab, [imgs[i] for i in idx], [qs[i] for i in idx],
                           [ans[i] for i in idx])
        g = Graph()
        P = params.leaves(g, requires_grad=names)
        if resolve is not None:
            P = resolve(g, P)
        try:
            loss = g.mean(batch_losses(g, P, g.leaf(batch.images), batch, cfg))
        except FloatingPointError as exc:
            raise DivergenceError(f"{label}: non-finite forward at step {step}") from exc
        grads = g.backward(loss)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"{label}: loss became {value} at step {step}")
        losses.append(value)
        if clip_norm is not None:
            norm = math.sqrt(sum(float((grads[k] ** 2).sum()) for k in names))
            if norm > clip_norm:
                for k in names:
                    grads[k] = grads[k] * (clip_norm / norm)
        for k in names:
            vel[k] = momentum * vel[k] + grads[k]
            params.entries[k] -= lr * vel[k]
    return TrainResult(params, losses)


def pretrain_base(cfg: ModelConfig, tasks, steps: int = 3000, lr: float = 0.05, seed: int = 0,
                  vocab: Vocabulary | None = None, batch_size: int = 32,
                  loss_threshold: float | None = 0.5) -> TrainResult:
    """Train a fresh model on the union of ``tasks`` to produce the released weights."""
    from .tasks import gen_task_dataset

    if not tasks:
        raise ValueError("pretraining needs at least one task")
    vocab = vocab or Vocabulary.default(cfg.vocab_size)
    params = init_model(cfg)
    if steps == 0:
        return TrainResult(params, [])
    samples = [s for t in tasks for s in gen_task_dataset(t, cfg.image_size, vocab)]
    res = sgd_train(params, samples, cfg, vocab, steps=steps, lr=lr, batch_size=batch_size,
                    seed=seed, label="pretrain")
    log.info("pretrain finished: final loss %.4f", res.final_loss)
    if loss_threshold is not None and res.final_loss > loss_threshold:
        raise DivergenceError(f"pretrain: final loss {res.final_loss:.4f} above "
                              f"threshold {loss_threshold}")
    return res
