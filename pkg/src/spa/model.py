"""Model definition: frozen base transformer, ladder side network, gate.

The base is a pre-LN causal transformer whose parameters are frozen after
pretraining. The side network is a narrow attention-free ladder: one
down-projection per layer feeds a two-layer GELU mixer at width
d_model / side_reduction, chained across layers through learned scalar
mixing weights, with a single shared up-projection back to d_model.
A linear gate over the final (post-norm) base hidden decides per token
whether the side output is fused in:

    fused = base_final + gate * side_out
    logits = fused @ out_proj          (out_proj stays frozen)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import numcore as nc
from .errors import ContractError, DimensionError
from .numcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 512
    max_seq_len: int = 128
    side_reduction: int = 8

    def __post_init__(self):
        if self.n_layers < 1:
            raise ContractError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise ContractError("vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ContractError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.d_model % self.side_reduction:
            raise ContractError(
                f"d_model={self.d_model} must be divisible by side_reduction={self.side_reduction}"
            )

    @property
    def side_width(self) -> int:
        return self.d_model // self.side_reduction

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "side_reduction": self.side_reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


class ParamBundle:
    """Named tensors with canonical (sorted-name) ordering for checksums."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def named(self) -> list[tuple[str, Tensor]]:
        return sorted(self._tensors.items())

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def names(self) -> list[str]:
        return [n for n, _ in self.named()]

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def freeze(self) -> None:
        for t in self._tensors.values():
            t.requires_grad = False
            t.grad = None

    def thaw(self) -> None:
        for t in self._tensors.values():
            t.requires_grad = True

    @property
    def frozen(self) -> bool:
        return all(not t.requires_grad for t in self._tensors.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(t.data.astype("<f8", copy=False).tobytes())
        return h.hexdigest()

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._tensors.items():
            arr = arrays[name]
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {name}: shape {arr.shape} != expected {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=np.float64)

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}


_INIT_STD = 0.02


def _w(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape) * _INIT_STD, requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class BaseParams(ParamBundle):
    @classmethod
    def create(cls, cfg: ModelConfig, rng: np.random.Generator) -> "BaseParams":
        d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        t: dict[str, Tensor] = {
            "tok_emb": _w(rng, v, d),
            "pos_emb": _w(rng, cfg.max_seq_len, d),
        }
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            t[f"{p}.ln1.g"] = _ones(d)
            t[f"{p}.ln1.b"] = _zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                t[f"{p}.attn.{name}"] = _w(rng, d, d)
            for name in ("bq", "bk", "bv", "bo"):
                t[f"{p}.attn.{name}"] = _zeros(d)
            t[f"{p}.ln2.g"] = _ones(d)
            t[f"{p}.ln2.b"] = _zeros(d)
            t[f"{p}.ffn.w1"] = _w(rng, d, ff)
            t[f"{p}.ffn.b1"] = _zeros(ff)
            t[f"{p}.ffn.w2"] = _w(rng, ff, d)
            t[f"{p}.ffn.b2"] = _zeros(d)
        t["ln_f.g"] = _ones(d)
        t["ln_f.b"] = _zeros(d)
        t["out_proj"] = _w(rng, d, v)
        return cls(t)


class SideParams(ParamBundle):
    @classmethod
    def create(cls, cfg: ModelConfig, rng: np.random.Generator) -> "SideParams":
        d, w = cfg.d_model, cfg.side_width
        t: dict[str, Tensor] = {}
        for i in range(cfg.n_layers):
            t[f"down.{i}.w"] = _w(rng, d, w)
            t[f"down.{i}.b"] = _zeros(w)
            t[f"mixer.{i}.w1"] = _w(rng, w, w)
            t[f"mixer.{i}.b1"] = _zeros(w)
            t[f"mixer.{i}.w2"] = _w(rng, w, w)
            t[f"mixer.{i}.b2"] = _zeros(w)
            if i > 0:
                # ladder mixing scalar; 1.0 = carry the previous rung fully.
                # layer 0 has no previous rung, so no scalar.
                t[f"mix.{i}"] = Tensor(np.asarray(1.0), requires_grad=True)
        # up-projection is deliberately non-zero at init so every side tensor
        # receives gradient on the first backward pass
        t["up.w"] = _w(rng, w, d)
        t["up.b"] = _zeros(d)
        return cls(t)


class GateParams(ParamBundle):
    @classmethod
    def create(cls, cfg: ModelConfig) -> "GateParams":
        # zero init: both classes start at probability 0.5 everywhere
        return cls({"w": _zeros(cfg.d_model, 2), "b": _zeros(2)})


@dataclass
class SpaModel:
    config: ModelConfig
    base: BaseParams
    side: SideParams
    gate: GateParams

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "SpaModel":
        rng = np.random.default_rng(seed)
        return cls(
            config=config,
            base=BaseParams.create(config, rng),
            side=SideParams.create(config, rng),
            gate=GateParams.create(config),
        )

    def base_digest(self) -> str:
        return self.base.digest()

    def side_fraction(self) -> float:
        """Side parameter count as a fraction of the base parameter count."""
        return self.side.count() / self.base.count()

    def side_and_gate_fraction(self) -> float:
        return (self.side.count() + self.gate.count()) / self.base.count()

    def trainable_tensors(self) -> list[Tensor]:
        return self.side.tensors() + self.gate.tensors()

    def all_named(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.base.named():
            yield f"base.{name}", t
        for name, t in self.side.named():
            yield f"side.{name}", t
        for name, t in self.gate.named():
            yield f"gate.{name}", t


@dataclass
class BaseTrace:
    """Per-layer residual-stream states plus the post-norm final hidden."""

    hiddens: list[Tensor] = field(default_factory=list)
    final: Tensor | None = None
    logits: Tensor | None = None


def base_forward(config: ModelConfig, base: BaseParams, token_ids) -> BaseTrace:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise ContractError(f"base_forward: need a non-empty 1-D id sequence, got {ids.shape}")
    t_len = ids.shape[0]
    if t_len > config.max_seq_len:
        raise ContractError(f"sequence length {t_len} exceeds max_seq_len {config.max_seq_len}")

    x = nc.add(
        nc.embedding(base["tok_emb"], ids),
        nc.embedding(base["pos_emb"], np.arange(t_len)),
    )
    trace = BaseTrace()
    for i in range(config.n_layers):
        p = f"layers.{i}"
        a = nc.layer_norm(x, base[f"{p}.ln1.g"], base[f"{p}.ln1.b"])
        q = nc.add(nc.matmul(a, base[f"{p}.attn.wq"]), base[f"{p}.attn.bq"])
        k = nc.add(nc.matmul(a, base[f"{p}.attn.wk"]), base[f"{p}.attn.bk"])
        v = nc.add(nc.matmul(a, base[f"{p}.attn.wv"]), base[f"{p}.attn.bv"])
        att = nc.causal_attention(q, k, v, config.n_heads)
        x = nc.add(x, nc.add(nc.matmul(att, base[f"{p}.attn.wo"]), base[f"{p}.attn.bo"]))
        m = nc.layer_norm(x, base[f"{p}.ln2.g"], base[f"{p}.ln2.b"])
        h1 = nc.gelu(nc.add(nc.matmul(m, base[f"{p}.ffn.w1"]), base[f"{p}.ffn.b1"]))
        x = nc.add(x, nc.add(nc.matmul(h1, base[f"{p}.ffn.w2"]), base[f"{p}.ffn.b2"]))
        trace.hiddens.append(x)
    trace.final = nc.layer_norm(x, base["ln_f.g"], base["ln_f.b"])
    trace.logits = nc.matmul(trace.final, base["out_proj"])
    return trace


def side_forward(config: ModelConfig, side: SideParams, hiddens: list[Tensor]) -> Tensor:
    """Ladder over per-layer base hiddens; uses only base hiddens + side params."""
    if len(hiddens) != config.n_layers:
        raise ContractError(
            f"side_forward: expected {config.n_layers} layer hiddens, got {len(hiddens)}"
        )
    rung: Tensor | None = None
    for i in range(config.n_layers):
        z = nc.add(nc.matmul(hiddens[i], side[f"down.{i}.w"]), side[f"down.{i}.b"])
        if rung is not None:
            z = nc.add(z, nc.tsmul(rung, side[f"mix.{i}"]))
        h1 = nc.gelu(nc.add(nc.matmul(z, side[f"mixer.{i}.w1"]), side[f"mixer.{i}.b1"]))
        rung = nc.add(nc.matmul(h1, side[f"mixer.{i}.w2"]), side[f"mixer.{i}.b2"])
    return nc.add(nc.matmul(rung, side["up.w"]), side["up.b"])


def side_step_layers(config: ModelConfig, side: SideParams, layer_vecs: np.ndarray) -> np.ndarray:
    """Single-position side output from the per-layer hiddens (L, d_model)."""
    vecs = np.asarray(layer_vecs, dtype=np.float64)
    if vecs.shape != (config.n_layers, config.d_model):
        raise DimensionError(
            f"side_step_layers: need shape ({config.n_layers}, {config.d_model}), got {vecs.shape}"
        )
    rows = [Tensor(vecs[i : i + 1]) for i in range(config.n_layers)]
    with nc.no_grad():
        out = side_forward(config, side, rows)
    return out.data[0]


def side_step_rolled(
    config: ModelConfig,
    side: SideParams,
    final_vec: np.ndarray,
    summary: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-position side output from the final hidden only.

    Every layer's down-projection reads the same final hidden; the ladder is
    seeded with the rolling summary from the previous consulted step and the
    new summary (the last rung) is returned alongside the output.
    """
    z_in = np.asarray(final_vec, dtype=np.float64).reshape(1, config.d_model)
    z_t = Tensor(z_in)
    rung_t = None if summary is None else Tensor(
        np.asarray(summary, dtype=np.float64).reshape(1, config.side_width)
    )
    with nc.no_grad():
        for i in range(config.n_layers):
            z = nc.add(nc.matmul(z_t, side[f"down.{i}.w"]), side[f"down.{i}.b"])
            if rung_t is not None:
                # the rolling summary enters layer 0 unscaled; later layers
                # reuse the ladder's own mixing scalars
                z = nc.add(z, nc.tsmul(rung_t, side[f"mix.{i}"]) if i > 0 else rung_t)
            h1 = nc.gelu(nc.add(nc.matmul(z, side[f"mixer.{i}.w1"]), side[f"mixer.{i}.b1"]))
            rung_t = nc.add(nc.matmul(h1, side[f"mixer.{i}.w2"]), side[f"mixer.{i}.b2"])
        out = nc.add(nc.matmul(rung_t, side["up.w"]), side["up.b"])
    return out.data[0], rung_t.data[0]


def gate_logits(gate: GateParams, base_final: Tensor) -> tuple[Tensor, Tensor]:
    logits = nc.add(nc.matmul(base_final, gate["w"]), gate["b"])
    return logits, nc.softmax(logits, axis=-1)


def gate_decide(logits_row: np.ndarray) -> int:
    """Hard decision for one position; ties resolve to 0 (base-only)."""
    return int(np.argmax(logits_row))


def fuse(base_final: Tensor, side_out: Tensor, gate_trace, out_proj: Tensor) -> tuple[Tensor, Tensor]:
    """fused = base_final + gate_trace * side_out, then the frozen projection.

    gate_trace is per-position: a Tensor of soft probabilities or an array of
    hard 0/1 decisions. An all-zero hard trace short-circuits so the base
    path is reproduced bit for bit.
    """
    if isinstance(gate_trace, Tensor):
        weights = gate_trace
    else:
        arr = np.asarray(gate_trace, dtype=np.float64)
        if arr.shape != (base_final.shape[0],):
            raise DimensionError(
                f"fuse: gate trace shape {arr.shape} != ({base_final.shape[0]},)"
            )
        if not arr.any():
            return base_final, nc.matmul(base_final, out_proj)
        weights = Tensor(arr)
    if side_out.shape != base_final.shape:
        raise DimensionError(
            f"fuse: side output shape {side_out.shape} != base shape {base_final.shape}"
        )
    fused = nc.add(base_final, nc.scale_rows(side_out, weights))
    return fused, nc.matmul(fused, out_proj)


@dataclass
class TokenLossTrace:
    base: BaseTrace
    side_out: Tensor | None
    gate_logits: Tensor
    gate_probs: Tensor
    gate_trace: np.ndarray  # the per-position weights actually used
    fused_logits: Tensor
    targets: np.ndarray


GATE_MODES = ("soft", "hard", "off", "on")


def token_loss(model: SpaModel, token_ids, gate_mode: str = "soft") -> tuple[Tensor, TokenLossTrace]:
    """Teacher-forced mean NLL of the fused model over a token sequence."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size < 2:
        raise ContractError("token_loss: need at least 2 tokens for teacher forcing")
    if gate_mode not in GATE_MODES:
        raise ContractError(f"token_loss: unknown gate_mode {gate_mode!r}")
    inputs, targets = ids[:-1], ids[1:]
    bt = base_forward(model.config, model.base, inputs)
    glog, gprobs = gate_logits(model.gate, bt.final)

    if gate_mode == "off":
        loss = nc.cross_entropy(bt.logits, targets)
        trace = TokenLossTrace(
            base=bt,
            side_out=None,
            gate_logits=glog,
            gate_probs=gprobs,
            gate_trace=np.zeros(inputs.shape[0]),
            fused_logits=bt.logits,
            targets=targets,
        )
        return loss, trace

    side_out = side_forward(model.config, model.side, bt.hiddens)
    if gate_mode == "soft":
        weights = nc.column(gprobs, 1)
        used = weights.data.copy()
    elif gate_mode == "hard":
        used = np.argmax(glog.data, axis=1).astype(np.float64)
        weights = used
    else:  # "on"
        used = np.ones(inputs.shape[0])
        weights = used
    _, fused_logits = fuse(bt.final, side_out, weights, model.base["out_proj"])
    loss = nc.cross_entropy(fused_logits, targets)
    trace = TokenLossTrace(
        base=bt,
        side_out=side_out,
        gate_logits=glog,
        gate_probs=gprobs,
        gate_trace=used,
        fused_logits=fused_logits,
        targets=targets,
    )
    return loss, trace


def cate_estimate(model: SpaModel, token_ids) -> np.ndarray:
    """Per-position log-likelihood gain of the side path over base-only.

    delta[i] = log P_fused-on(x_i | x_<i) - log P_base-only(x_i | x_<i);
    positive means consulting the side network helps at position i.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size < 2:
        raise ContractError("cate_estimate: need at least 2 tokens")
    inputs, targets = ids[:-1], ids[1:]
    with nc.no_grad():
        bt = base_forward(model.config, model.base, inputs)
        side_out = side_forward(model.config, model.side, bt.hiddens)
        _, fused_logits = fuse(
            bt.final, side_out, np.ones(inputs.shape[0]), model.base["out_proj"]
        )
        lp_base = nc.log_softmax_rows(bt.logits.data)
        lp_on = nc.log_softmax_rows(fused_logits.data)
    rows = np.arange(targets.shape[0])
    return lp_on[rows, targets] - lp_base[rows, targets]


def position_nll(model: SpaModel, token_ids, gate_mode: str) -> np.ndarray:
    """Teacher-forced per-position negative log-likelihoods under a gate mode."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size < 2:
        raise ContractError("position_nll: need at least 2 tokens")
    with nc.no_grad():
        _, trace = token_loss(model, ids, gate_mode=gate_mode)
        lp = nc.log_softmax_rows(trace.fused_logits.data)
    rows = np.arange(trace.targets.shape[0])
    return -lp[rows, trace.targets]
