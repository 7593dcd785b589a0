"""Objective, Adam, first-order bi-level training and evaluation reports."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .depth import depth_histogram, format_depth_table
from .metrics import auc, binary_cross_entropy, logloss
from .model import ALPHA_SET, W_SET, AdaEnsembleModel, EmbeddingLogistic
from .rng import make_rng


class TrainingInputError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A loss went non-finite; ``batch`` names the offending mini-batch."""

    def __init__(self, message: str, step: int, phase: str, batch: np.ndarray) -> None:
        self.step = step
        self.phase = phase
        self.batch = batch
        super().__init__(message)


@dataclass
class Dataset:
    indices: np.ndarray  # (n, F) encoded
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, rows: np.ndarray) -> Dataset:
        return Dataset(self.indices[rows], self.labels[rows])


def total_loss(
    logloss_term: Tensor, expert_losses: Sequence[Tensor], depth_loss: Tensor | None, lambda1: float, lambda2: float
) -> Tensor:
    """LogLoss + lambda1 * sum of per-layer expert load losses + lambda2 * depth load loss."""
    loss = logloss_term
    if lambda1:
        for e in expert_losses:
            loss = loss + e * lambda1
    if lambda2 and depth_loss is not None:
        loss = loss + depth_loss * lambda2
    return loss


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState([np.zeros_like(p.data) for p in self.params], [np.zeros_like(p.data) for p in self.params])

    def step(self) -> None:
        if self.lr == 0.0:
            return
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.beta1, self.beta2, self.eps)


@dataclass(frozen=True)
class BiLevelConfig:
    inner_steps: int = 4  # t: W updates per alpha update
    lr_w: float = 1e-3
    lr_alpha: float = 1e-3
    batch_size: int = 256
    max_steps: int = 500
    eval_every: int = 25
    patience: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.inner_steps < 1:
            raise TrainingInputError("inner_steps (t) must be >= 1")
        if self.batch_size < 1:
            raise TrainingInputError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise TrainingInputError("max_steps must be >= 0")
        if self.lr_w < 0 or self.lr_alpha < 0:
            raise TrainingInputError("learning rates must be >= 0")
        if self.eval_every < 1 or self.patience < 1:
            raise TrainingInputError("eval_every and patience must be >= 1")


@dataclass
class HistoryRow:
    step: int
    phase: str  # "alpha" or "W"
    total: float
    logloss: float
    expert_aux: float
    depth_aux: float
    k: int
    max_routed: int
    val_logloss: float = float("nan")
    val_auc: float = float("nan")


HISTORY_COLUMNS = [f for f in HistoryRow.__dataclass_fields__]


def format_history(rows: Sequence[HistoryRow]) -> str:
    lines = ["\t".join(HISTORY_COLUMNS)]
    for r in rows:
        vals = asdict(r)
        lines.append("\t".join(repr(vals[c]) if isinstance(vals[c], float) else str(vals[c]) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


class _BatchCycler:
    """Reshuffled passes over a split, one permutation per pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator) -> None:
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        rows = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return rows


@dataclass
class TrainResult:
    history: list[HistoryRow]
    best_step: int
    stopped_early: bool
    evals: list[tuple[int, float, float]] = field(default_factory=list)


def _step(model: AdaEnsembleModel, data: Dataset, rows: np.ndarray, step: int, rng, optimizer: Adam, phase: str) -> HistoryRow:
    out = model.forward_train(data.indices[rows], step, rng)
    ll = binary_cross_entropy(out.preds, data.labels[rows])
    loss = total_loss(ll, out.expert_losses, out.depth_loss, model.config.lambda1, model.config.lambda2)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step} ({phase} phase)", step, phase, rows)
    model.zero_grad()
    loss.backward()
    optimizer.step()
    max_routed = max(int(r.decision.support.sum(axis=1).max()) for r in out.soft.layers)
    return HistoryRow(
        step,
        phase,
        value,
        ll.item(),
        float(sum(e.item() for e in out.expert_losses)),
        out.depth_loss.item(),
        out.k,
        max_routed,
    )


def bilevel_train(model: AdaEnsembleModel, train: Dataset, val: Dataset, cfg: BiLevelConfig) -> TrainResult:
    """Alternate one alpha update on a validation batch with ``t`` W updates on training batches.

    The alpha step is first-order: W is held at its current value. After each
    ``eval_every`` outer steps the validation LogLoss is measured in eval mode;
    training stops after ``patience`` evaluations without improvement and the
    best parameters seen are restored.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingInputError("training and validation splits must be nonempty")
    jitter_rng = make_rng(cfg.seed, "jitter")
    train_batches = _BatchCycler(len(train), cfg.batch_size, make_rng(cfg.seed, "data.train"))
    val_batches = _BatchCycler(len(val), cfg.batch_size, make_rng(cfg.seed, "data.val"))
    opt_alpha = Adam(model.parameters(ALPHA_SET), cfg.lr_alpha)
    opt_w = Adam(model.parameters(W_SET), cfg.lr_w)

    history: list[HistoryRow] = []
    evals: list[tuple[int, float, float]] = []
    best = (math.inf, -1, model.state_dict())
    bad_evals = 0
    stopped = False
    for step in range(cfg.max_steps):
        history.append(_step(model, val, val_batches.next(), step, jitter_rng, opt_alpha, "alpha"))
        for _ in range(cfg.inner_steps):
            history.append(_step(model, train, train_batches.next(), step, jitter_rng, opt_w, "W"))
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.max_steps:
            pred = model.predict(val.indices)
            vll, vauc = logloss(pred.preds, val.labels), _safe_auc(pred.preds, val.labels)
            history[-1].val_logloss, history[-1].val_auc = vll, vauc
            evals.append((step, vll, vauc))
            if vll < best[0]:
                best = (vll, step, model.state_dict())
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    stopped = True
                    break
    if best[1] >= 0:
        model.load_state_dict(best[2])
    return TrainResult(history, best[1], stopped, evals)


def _safe_auc(preds, labels) -> float:
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        return float("nan")
    return auc(preds, labels)


def train_logistic_baseline(
    model: EmbeddingLogistic, train: Dataset, val: Dataset, lr: float = 1e-2, batch_size: int = 256,
    epochs: int = 10, seed: int = 0,
) -> EmbeddingLogistic:
    """Plain Adam on LogLoss, keeping the epoch with the best validation LogLoss."""
    opt = Adam(model.parameters(), lr)
    rng = make_rng(seed, "baseline.data")
    best_ll, best_state = math.inf, None
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(train), batch_size):
            rows = order[i : i + batch_size]
            loss = binary_cross_entropy(model.forward(train.indices[rows]), train.labels[rows])
            for p in model.parameters():
                p.grad = None
            loss.backward()
            opt.step()
        ll = logloss(model.predict(val.indices), val.labels)
        if ll < best_ll:
            best_ll, best_state = ll, [p.data.copy() for p in model.parameters()]
    if best_state is not None:
        for p, v in zip(model.parameters(), best_state):
            p.data = v
    return model


@dataclass
class EvalReport:
    auc: float
    logloss: float
    mean_flops: float
    depth_fractions: list[float]
    expert_load: list[list[float]]  # per layer, top-1 share f_j among examples reaching it
    expert_names: list[list[str]]
    num_examples: int
    label: str = ""

    def to_kv(self) -> str:
        lines = [
            f"label={self.label}",
            f"num_examples={self.num_examples}",
            f"auc={self.auc!r}",
            f"logloss={self.logloss!r}",
            f"mean_flops={self.mean_flops!r}",
        ]
        for i, f in enumerate(self.depth_fractions):
            lines.append(f"depth_fraction.{i + 1}={f!r}")
        for l, (names, loads) in enumerate(zip(self.expert_names, self.expert_load)):
            for n, f in zip(names, loads):
                lines.append(f"expert_load.layer{l + 1}.{n}={f!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [
            f"{'':16}{'AUC':>10}{'LogLoss':>10}{'FLOPs':>12}",
            f"{(self.label or 'model'):16}{self.auc:>10.4f}{self.logloss:>10.4f}{format_flops(self.mean_flops):>12}",
            "",
            format_depth_table(self.depth_fractions),
            "",
        ]
        for l, (names, loads) in enumerate(zip(self.expert_names, self.expert_load)):
            out.append(f"Layer {l + 1} expert load: " + "  ".join(f"{n}={100 * f:.2f}%" for n, f in zip(names, loads)))
        return "\n".join(out) + "\n"


def format_flops(v: float) -> str:
    if v >= 1e6:
        return f"{v / 1e6:.2f}M"
    if v >= 1e3:
        return f"{v / 1e3:.2f}K"
    return f"{v:.0f}"


def format_comparison(reports: Sequence[EvalReport]) -> str:
    """Side-by-side AUC / LogLoss / FLOPs rows, one per report label."""
    lines = [f"{'':16}{'AUC':>10}{'LogLoss':>10}{'FLOPs':>12}"]
    for r in reports:
        lines.append(f"{r.label:16}{r.auc:>10.4f}{r.logloss:>10.4f}{format_flops(r.mean_flops):>12}")
    return "\n".join(lines) + "\n"


def evaluate(
    model: AdaEnsembleModel, data: Dataset, force_full_depth: bool = False, k: int | None = None, label: str = ""
) -> EvalReport:
    if data.indices.ndim != 2 or data.indices.shape[1] != model.config.num_fields:
        raise TrainingInputError(
            f"dataset has {data.indices.shape[-1]} fields, model expects {model.config.num_fields}"
        )
    out = model.predict(data.indices, force_full_depth=force_full_depth, k=k, trace=True)
    loads, names = [], []
    for l, layer in enumerate(model.layers):
        names.append([e.kind.value for e in layer.experts])
        top1 = out.trace.top1[l][out.trace.reached[l]]
        if top1.size == 0:
            loads.append([0.0] * layer.num_experts)
        else:
            loads.append(list(map(float, np.bincount(top1, minlength=layer.num_experts) / top1.size)))
    return EvalReport(
        auc=_safe_auc(out.preds, data.labels),
        logloss=logloss(out.preds, data.labels),
        mean_flops=float(out.flops.mean()),
        depth_fractions=list(map(float, depth_histogram(out.depths, model.config.num_layers))),
        expert_load=loads,
        expert_names=names,
        num_examples=len(data),
        label=label,
    )
