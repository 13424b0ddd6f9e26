"""Training: base pretraining, then side + gate training on a frozen base.

The side/gate objective per sequence is

    token_loss(soft gate)                         fused teacher-forced NLL
  + cross_entropy(gate logits, labels)            labels: side-gain > margin
  + usage_weight * mean(P(use side))              keeps the gate from
                                                  defaulting to "always on"

where the labels come from `cate_estimate` and are constants within a step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .corpus import Corpus
from .errors import ContractError, SpaError
from .model import ModelConfig, SpaModel, base_forward, cate_estimate, token_loss
from .numcore import Tape, Tensor
from .tokenizer import ByteTokenizer

LR_GRID = (2e-4, 5e-4, 1e-3)


class TrainingDivergedError(SpaError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 8
    epochs: int = 15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gate_margin: float = 0.0
    usage_weight: float = 0.01
    block_size: int = 48

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "gate_margin": self.gate_margin,
            "usage_weight": self.usage_weight,
            "block_size": self.block_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, tensors: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.tensors]
        self._v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.tensors, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.tensors:
            p.grad = None


def token_blocks(docs: list[str], tokenizer: ByteTokenizer, block_size: int) -> np.ndarray:
    """Pack documents into a single stream, cut into (block_size + 1) windows."""
    stream: list[int] = []
    for doc in docs:
        stream.extend(tokenizer.encode_document(doc))
    arr = np.asarray(stream, dtype=np.int64)
    n = (arr.size - 1) // block_size
    if n < 1:
        raise ContractError(
            f"corpus too small: {arr.size} tokens cannot fill one block of {block_size}"
        )
    return np.stack([arr[i * block_size : i * block_size + block_size + 1] for i in range(n)])


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_perplexity: float
    gate_usage: float | None = None


@dataclass
class TrainResult:
    epochs: list[EpochLog] = field(default_factory=list)

    @property
    def final(self) -> EpochLog:
        return self.epochs[-1]


def _doc_sequences(docs: list[str], tokenizer: ByteTokenizer, max_len: int) -> list[np.ndarray]:
    seqs = []
    for doc in docs:
        ids = np.asarray(tokenizer.encode_document(doc), dtype=np.int64)
        seqs.append(ids[:max_len])
    return [s for s in seqs if s.size >= 2]


def _base_val_perplexity(model: SpaModel, docs, tokenizer) -> float:
    total, count = 0.0, 0
    with nc.no_grad():
        for ids in _doc_sequences(docs, tokenizer, model.config.max_seq_len):
            trace = base_forward(model.config, model.base, ids[:-1])
            lp = nc.log_softmax_rows(trace.logits.data)
            rows = np.arange(ids.size - 1)
            total += -lp[rows, ids[1:]].sum()
            count += ids.size - 1
    return math.exp(total / count) if count else float("nan")


def _fused_val_perplexity(model: SpaModel, docs, tokenizer) -> tuple[float, float]:
    """(perplexity under the hard gate, gate usage rate) on held-out docs."""
    total, count, used = 0.0, 0, 0
    with nc.no_grad():
        for ids in _doc_sequences(docs, tokenizer, model.config.max_seq_len):
            _, trace = token_loss(model, ids, gate_mode="hard")
            lp = nc.log_softmax_rows(trace.fused_logits.data)
            rows = np.arange(trace.targets.size)
            total += -lp[rows, trace.targets].sum()
            count += trace.targets.size
            used += int(trace.gate_trace.sum())
    ppl = math.exp(total / count) if count else float("nan")
    usage = used / count if count else float("nan")
    return ppl, usage


def pretrain_base(
    config: ModelConfig,
    tcfg: TrainConfig,
    corpus: Corpus,
    tokenizer: ByteTokenizer | None = None,
    log=None,
    model: SpaModel | None = None,
) -> tuple[SpaModel, TrainResult]:
    """Train the base LM with plain cross-entropy, then freeze it."""
    if not corpus.documents:
        raise ContractError("pretrain_base: corpus is empty")
    tokenizer = tokenizer or ByteTokenizer()
    if model is None:
        model = SpaModel.create(config, seed=tcfg.seed)
    train_docs, val_docs, _ = corpus.splits(tcfg.seed)
    blocks = token_blocks(train_docs, tokenizer, tcfg.block_size)
    opt = Adam(model.base.tensors(), tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    rng = np.random.default_rng(tcfg.seed)
    result = TrainResult()
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(blocks))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            with Tape() as tape:
                total = None
                for bi in batch:
                    ids = blocks[bi]
                    trace = base_forward(config, model.base, ids[:-1])
                    loss = nc.cross_entropy(trace.logits, ids[1:])
                    total = loss if total is None else nc.add(total, loss)
                total = nc.smul(total, 1.0 / len(batch))
            if not np.isfinite(total.data):
                raise TrainingDivergedError(
                    f"pretraining loss became non-finite at epoch {epoch}, lr {tcfg.learning_rate}"
                )
            opt.zero_grad()
            tape.backward(total)
            opt.step()
            losses.append(total.item())
        entry = EpochLog(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_perplexity=_base_val_perplexity(model, val_docs, tokenizer),
        )
        result.epochs.append(entry)
        if log:
            log(f"pretrain epoch {entry.epoch}: loss {entry.train_loss:.4f} "
                f"val ppl {entry.val_perplexity:.2f}")
    model.base.freeze()
    return model, result


def reinit_side_and_gate(model: SpaModel, seed: int) -> None:
    """Fresh side/gate parameters (used between learning-rate grid runs)."""
    from .model import GateParams, SideParams

    model.side = SideParams.create(model.config, np.random.default_rng(seed ^ 0x5EED))
    model.gate = GateParams.create(model.config)


def gate_labels(model: SpaModel, ids: np.ndarray, margin: float) -> np.ndarray:
    """1 where consulting the side path improves the target log-likelihood."""
    return (cate_estimate(model, ids) > margin).astype(np.int64)


def train_side_and_gate(
    model: SpaModel,
    tcfg: TrainConfig,
    corpus: Corpus,
    tokenizer: ByteTokenizer | None = None,
    log=None,
) -> TrainResult:
    """Optimize side + gate against the combined objective; base must be frozen."""
    if not model.base.frozen:
        raise ContractError("train_side_and_gate: base parameters must be frozen first")
    if not corpus.documents:
        raise ContractError("train_side_and_gate: corpus is empty")
    tokenizer = tokenizer or ByteTokenizer()
    digest_before = model.base_digest()
    train_docs, val_docs, _ = corpus.splits(tcfg.seed)
    blocks = token_blocks(train_docs, tokenizer, tcfg.block_size)
    params = model.side.tensors() + model.gate.tensors()
    opt = Adam(params, tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    rng = np.random.default_rng(tcfg.seed)
    result = TrainResult()
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(blocks))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            labels = [gate_labels(model, blocks[bi], tcfg.gate_margin) for bi in batch]
            with Tape() as tape:
                total = None
                for bi, lab in zip(batch, labels):
                    ids = blocks[bi]
                    fused_nll, trace = token_loss(model, ids, gate_mode="soft")
                    gate_ce = nc.cross_entropy(trace.gate_logits, lab)
                    usage = nc.column(trace.gate_probs, 1).mean()
                    seq_loss = nc.add(
                        nc.add(fused_nll, gate_ce), nc.smul(usage, tcfg.usage_weight)
                    )
                    total = seq_loss if total is None else nc.add(total, seq_loss)
                total = nc.smul(total, 1.0 / len(batch))
            if not np.isfinite(total.data):
                raise TrainingDivergedError(
                    f"side training loss became non-finite at epoch {epoch}, lr {tcfg.learning_rate}"
                )
            opt.zero_grad()
            tape.backward(total)
            opt.step()
            losses.append(total.item())
        val_ppl, usage_rate = _fused_val_perplexity(model, val_docs, tokenizer)
        entry = EpochLog(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_perplexity=val_ppl,
            gate_usage=usage_rate,
        )
        result.epochs.append(entry)
        if log:
            log(f"side epoch {entry.epoch}: loss {entry.train_loss:.4f} "
                f"val ppl {entry.val_perplexity:.2f} usage {entry.gate_usage:.3f}")
    if model.base_digest() != digest_before:
        raise ContractError("frozen base changed during side training (checksum mismatch)")
    return result


@dataclass
class GridRun:
    learning_rate: float
    result: TrainResult
    base_digest_before: str
    base_digest_after: str
    side_arrays: dict[str, np.ndarray]
    gate_arrays: dict[str, np.ndarray]


def run_lr_grid(
    model: SpaModel,
    tcfg: TrainConfig,
    corpus: Corpus,
    tokenizer: ByteTokenizer | None = None,
    grid=LR_GRID,
    log=None,
) -> tuple[GridRun, list[GridRun]]:
    """Train side + gate once per learning rate; keep the best validation loss.

    Each run starts from identically re-initialized side/gate parameters.
    The winning run's parameters are left installed on the model.
    """
    runs: list[GridRun] = []
    for lr in grid:
        reinit_side_and_gate(model, tcfg.seed)
        cfg = TrainConfig(**{**tcfg.to_dict(), "learning_rate": lr})
        before = model.base_digest()
        result = train_side_and_gate(model, cfg, corpus, tokenizer, log=log)
        runs.append(
            GridRun(
                learning_rate=lr,
                result=result,
                base_digest_before=before,
                base_digest_after=model.base_digest(),
                side_arrays=model.side.export_arrays(),
                gate_arrays=model.gate.export_arrays(),
            )
        )
        if log:
            log(f"grid lr {lr:g}: final val ppl {result.final.val_perplexity:.3f}")
    best = min(runs, key=lambda r: r.result.final.val_perplexity)
    model.side.load_arrays(best.side_arrays)
    model.gate.load_arrays(best.gate_arrays)
    return best, runs
