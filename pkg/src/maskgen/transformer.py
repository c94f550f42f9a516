"""Bidirectional transformer with a masked-token prediction head.

Post-norm residual blocks; the head is dense -> GELU -> layer norm -> output
projection, the projection tied to the token embedding table by default.
Queries and values carry a bias, keys do not: a key bias only shifts each
query's scores by a constant, which softmax ignores.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .embeddings import N_SEGMENTS, ComposedInput, Conditioning, compose_input

LN_EPS = 1e-12
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 64
    max_positions: int = 48
    d_v: int = 16
    seed: int = 0
    tie_output: bool = True

    def __post_init__(self):
        for k in ("heads", "d_model", "d_ff", "vocab_size", "max_positions", "d_v"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.layers < 0:
            raise ValueError("layers must be non-negative")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        return cls(**obj)

    def with_seed(self, seed: int) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "seed": seed})


VISUAL_PREFIXES = ("vis_proj.", "geo_proj.")


def is_visual(name: str) -> bool:
    return name.startswith(VISUAL_PREFIXES)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_positions, d),
        "seg_emb": (N_SEGMENTS, d),
        "emb_ln.g": (d,), "emb_ln.b": (d,),
        "vis_proj.w": (cfg.d_v, d), "vis_proj.b": (d,),
        "geo_proj.w": (4, d),
        "head.dense.w": (d, d), "head.dense.b": (d,),
        "head.ln.g": (d,), "head.ln.b": (d,),
        "head.out.b": (v,),
    }
    if not cfg.tie_output:
        shapes["head.out.w"] = (d, v)
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes.update({
            p + "attn.q.w": (d, d), p + "attn.q.b": (d,),
            p + "attn.k.w": (d, d),
            p + "attn.v.w": (d, d), p + "attn.v.b": (d,),
            p + "attn.o.w": (d, d), p + "attn.o.b": (d,),
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "ffn.in.w": (d, f), p + "ffn.in.b": (f,),
            p + "ffn.out.w": (f, d), p + "ffn.out.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
        })
    return dict(sorted(shapes.items()))


class Parameters(Mapping[str, nx.Tensor]):
    """Named tracked tensors, shapes fixed by a ModelConfig."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, nx.Tensor]):
        shapes = param_shapes(config)
        if set(shapes) != set(tensors):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ValueError(f"parameter names disagree with config (missing {missing}, extra {extra})")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        self.config = config
        self._t = {k: tensors[k] for k in shapes}

    def __getitem__(self, name: str) -> nx.Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.zero_grad()

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: nx.parameter(t.data.copy()) for k, t in self._t.items()})

    def n_values(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def equal(self, other: "Parameters") -> bool:
        return set(self) == set(other) and all(np.array_equal(self[k].data, other[k].data) for k in self)

    @property
    def output_weight(self) -> nx.Tensor:
        if self.config.tie_output:
            return nx.transpose(self["tok_emb"], (1, 0))
        return self["head.out.w"]


def init_random(cfg: ModelConfig) -> Parameters:
    """N(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf == "b":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = nx.parameter(data)
    return Parameters(cfg, tensors)


def init_hybrid(cfg: ModelConfig, text_ckpt: Parameters | None = None,
                visual_ckpt: Parameters | None = None) -> tuple[Parameters, dict[str, str]]:
    """Compose parameters from a text-side and a visual-side checkpoint.

    Visual projection and geometric projection come from ``visual_ckpt``;
    everything else (embedding tables, transformer stack, head) from
    ``text_ckpt``. Tensors with no donor keep their seeded random values.
    Returns the parameters and a manifest mapping each name to
    ``"text"``, ``"visual"`` or ``"random"``.
    """
    base = init_random(cfg)
    tensors = dict(base.items())
    manifest = {}
    for name, t in base.items():
        donor, source = (visual_ckpt, "visual") if is_visual(name) else (text_ckpt, "text")
        if donor is None or name not in donor:
            manifest[name] = "random"
            continue
        if donor[name].shape != t.shape:
            raise ValueError(f"cannot transfer {name}: checkpoint shape {donor[name].shape} "
                             f"!= model shape {t.shape}")
        tensors[name] = nx.parameter(donor[name].data.copy())
        manifest[name] = source
    return Parameters(cfg, tensors), manifest


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _linear(x: nx.Tensor, w: nx.Tensor, b: nx.Tensor | None = None) -> nx.Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def attention_weights(x: nx.Tensor, params: Mapping[str, nx.Tensor], layer: int, heads: int) -> nx.Tensor:
    """Per-head attention probabilities, shape (heads, length, length). No causal mask."""
    p = f"layer{layer}.attn."
    n, d = x.shape
    dh = d // heads
    q = nx.transpose(nx.reshape(_linear(x, params[p + "q.w"], params[p + "q.b"]), (n, heads, dh)), (1, 0, 2))
    k = nx.transpose(nx.reshape(_linear(x, params[p + "k.w"]), (n, heads, dh)), (1, 2, 0))
    return nx.softmax(nx.scale(nx.matmul(q, k), 1.0 / math.sqrt(dh)), axis=-1)


def self_attention(x: nx.Tensor, params: Mapping[str, nx.Tensor], layer: int, heads: int) -> nx.Tensor:
    """Multi-head attention sublayer with residual and post layer norm."""
    p = f"layer{layer}.attn."
    n, d = x.shape
    if d != params[p + "q.w"].shape[0]:
        raise ValueError(f"input width {d} != model width {params[p + 'q.w'].shape[0]}")
    dh = d // heads
    probs = attention_weights(x, params, layer, heads)
    v = nx.transpose(nx.reshape(_linear(x, params[p + "v.w"], params[p + "v.b"]), (n, heads, dh)), (1, 0, 2))
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (1, 0, 2)), (n, d))
    out = _linear(ctx, params[p + "o.w"], params[p + "o.b"])
    return nx.layer_norm(nx.add(x, out), params[f"layer{layer}.ln1.g"], params[f"layer{layer}.ln1.b"], LN_EPS)


def feed_forward(x: nx.Tensor, params: Mapping[str, nx.Tensor], layer: int) -> nx.Tensor:
    p = f"layer{layer}."
    h = nx.gelu(_linear(x, params[p + "ffn.in.w"], params[p + "ffn.in.b"]))
    out = _linear(h, params[p + "ffn.out.w"], params[p + "ffn.out.b"])
    return nx.layer_norm(nx.add(x, out), params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)


def encode_stream(inp: ComposedInput, params: Parameters) -> nx.Tensor:
    """Hidden states for every position after the last layer."""
    cfg = params.config
    x = nx.layer_norm(inp.embeddings, params["emb_ln.g"], params["emb_ln.b"], LN_EPS)
    for i in range(cfg.layers):
        x = feed_forward(self_attention(x, params, i, cfg.heads), params, i)
    return x


def mlm_head(h: nx.Tensor, params: Parameters) -> nx.Tensor:
    z = nx.gelu(_linear(h, params["head.dense.w"], params["head.dense.b"]))
    z = nx.layer_norm(z, params["head.ln.g"], params["head.ln.b"], LN_EPS)
    return nx.add(nx.matmul(z, params.output_weight), params["head.out.b"])


def forward(inp: ComposedInput, params: Parameters) -> nx.Tensor:
    """Logits over the full vocabulary at the mask position, shape (1, V)."""
    h = encode_stream(inp, params)
    row = nx.take(h, (slice(inp.mask_index, inp.mask_index + 1), slice(None)))
    return mlm_head(row, params)


def logits_for(cond: Conditioning, prefix: Sequence[int], params: Parameters) -> nx.Tensor:
    return forward(compose_input(cond, prefix, params), params)


def example_loss(example, params: Parameters) -> nx.Tensor:
    logits = logits_for(example.sample.conditioning, example.prefix, params)
    return nx.cross_entropy(logits, example.gold)


def mlm_loss(examples: Iterable, params: Parameters) -> nx.Tensor:
    """Summed negative log-likelihood of each example's gold token."""
    examples = list(examples)
    if not examples:
        raise ValueError("mlm_loss needs at least one example")
    return nx.sum_scalars(example_loss(e, params) for e in examples)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"BGEN1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Parameters, path: str | Path, meta: Mapping | None = None) -> None:
    """Magic, 8-byte little-endian header length, JSON header, raw float64 LE data.

    Tensors are stored in sorted-name order. ``meta`` carries anything else a
    run wants to keep next to the weights (vocabulary, task registry, step).
    """
    names = sorted(params)
    header = {
        "config": params.config.to_json(),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Parameters, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos: pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos: pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    pos += hlen
    cfg = ModelConfig.from_json(header["config"])
    expected = param_shapes(cfg)
    tensors = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, config implies {expected.get(name)}")
        nbytes = 8 * int(np.prod(shape))
        if len(raw) < pos + nbytes:
            raise CheckpointError(f"{path}: truncated data at tensor {name}")
        data = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
        tensors[name] = nx.parameter(data.astype(np.float64))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    try:
        params = Parameters(cfg, tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return params, cfg, header.get("meta", {})
