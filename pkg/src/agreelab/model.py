"""Pre-layer-norm encoder-decoder transformer on top of :mod:`agreelab.numerics`.

Parameters are a flat ``dict[str, Tensor]``.  Initialisation (all deterministic
from the seed, drawn in sorted-name order):

* ``embed`` [V, d]: normal, std ``d ** -0.5``; tied with the output projection.
  Inputs are scaled by ``sqrt(d)`` before sinusoidal positions are added.
* every projection weight [d_in, d_out]: normal, std ``d_in ** -0.5``.
* biases and layer-norm offsets: 0; layer-norm gains: 1.

Dropout (inverted) sits on the embedded inputs and on each residual branch
output.  Its masks come from ``numpy.random.default_rng((seed, step, stream,
site))`` so that a (seed, step) pair fixes every mask of every forward pass.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .tokenizer import BOS, EOS, PAD


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    dropout: float = 0.1
    max_positions: int = 512

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout {self.dropout} outside [0, 1)")
        for name in ("vocab_size", "encoder_layers", "decoder_layers", "d_model", "heads", "d_ff", "max_positions"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"embed": (V, d)}

    def attn(prefix):
        for p in "qkvo":
            shapes[f"{prefix}.w{p}"] = (d, d)
            shapes[f"{prefix}.b{p}"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.offset"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.encoder_layers):
        norm(f"enc{i}.ln_attn")
        attn(f"enc{i}.self")
        norm(f"enc{i}.ln_ffn")
        ffn(f"enc{i}.ffn")
    norm("enc.ln_final")
    for i in range(cfg.decoder_layers):
        norm(f"dec{i}.ln_self")
        attn(f"dec{i}.self")
        norm(f"dec{i}.ln_cross")
        attn(f"dec{i}.cross")
        norm(f"dec{i}.ln_ffn")
        ffn(f"dec{i}.ffn")
    norm("dec.ln_final")
    return shapes


def init_std(name: str, shape: tuple, cfg: ModelConfig) -> float:
    if name == "embed":
        return cfg.d_model ** -0.5
    if name.endswith((".gain", ".offset")) or len(shape) == 1:
        return 0.0
    return shape[0] ** -0.5


def init(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(parameter_shapes(cfg).items()):
        if name.endswith(".gain"):
            data = np.ones(shape)
        else:
            std = init_std(name, shape, cfg)
            data = rng.normal(0.0, std, size=shape) if std > 0 else np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange((d + 1) // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


class DropoutKeys:
    """Hands out one generator per dropout site for a forward pass."""

    def __init__(self, seed: int, step: int, stream: int = 0):
        self.key = (int(seed), int(step), int(stream))
        self.site = 0

    def next(self) -> np.random.Generator:
        self.site += 1
        return np.random.default_rng(self.key + (self.site,))


class Transformer:
    """Functional wrapper binding a config to a parameter dict."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        cfg.validate()
        shapes = parameter_shapes(cfg)
        if set(shapes) != set(params):
            missing = set(shapes) ^ set(params)
            raise ModelError(f"parameter names do not match config: {sorted(missing)[:5]}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ModelError(f"{name}: shape {params[name].shape} != {shape}")
        self.cfg = cfg
        self.params = params
        self._pos = sinusoid_table(cfg.max_positions, cfg.d_model)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "Transformer":
        return cls(cfg, init(cfg, seed))

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self):
        return sorted(self.params.items())

    def zero_grad(self) -> None:
        nx.zero_grad(self.params.values())

    # -- building blocks ---------------------------------------------------
    def _embed(self, ids: np.ndarray, drop) -> Tensor:
        T = ids.shape[1]
        if T > self.cfg.max_positions:
            raise ModelError(f"sequence length {T} exceeds max_positions {self.cfg.max_positions}")
        x = nx.embedding(self.params["embed"], ids) * math.sqrt(self.cfg.d_model) + self._pos[:T]
        return drop(x)

    def _ln(self, x, prefix):
        return nx.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.offset"])

    def _mha(self, prefix, xq, xkv, keep):
        p = self.params
        q = nx.linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
        k = nx.linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
        v = nx.linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        a = nx.attention(q, k, v, keep, self.cfg.heads)
        return nx.linear(a, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _ffn(self, prefix, x):
        p = self.params
        h = nx.gelu(nx.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return nx.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _dropper(self, train: bool, keys: DropoutKeys | None):
        rate = self.cfg.dropout
        if not train or rate == 0.0:
            return lambda x: x
        if keys is None:
            raise ModelError("train mode with dropout needs DropoutKeys")
        return lambda x: nx.dropout(x, rate, keys.next(), True)

    # -- public passes -----------------------------------------------------
    def encode(self, src: np.ndarray, train: bool = False, keys: DropoutKeys | None = None):
        """Encoder states and the source key mask ([B, 1, 1, Ts])."""
        src = np.asarray(src, dtype=np.int64)
        drop = self._dropper(train, keys)
        src_keep = (src != PAD)[:, None, None, :]
        x = self._embed(src, drop)
        for i in range(self.cfg.encoder_layers):
            h = self._ln(x, f"enc{i}.ln_attn")
            x = x + drop(self._mha(f"enc{i}.self", h, h, src_keep))
            x = x + drop(self._ffn(f"enc{i}.ffn", self._ln(x, f"enc{i}.ln_ffn")))
        return self._ln(x, "enc.ln_final"), src_keep

    def decode(self, memory: Tensor, src_keep: np.ndarray, tgt_in: np.ndarray,
               train: bool = False, keys: DropoutKeys | None = None) -> Tensor:
        """Logits [B, T, V] for teacher-forced decoder inputs ``tgt_in``."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        drop = self._dropper(train, keys)
        T = tgt_in.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))[None, None]
        y = self._embed(tgt_in, drop)
        for i in range(self.cfg.decoder_layers):
            h = self._ln(y, f"dec{i}.ln_self")
            y = y + drop(self._mha(f"dec{i}.self", h, h, causal))
            y = y + drop(self._mha(f"dec{i}.cross", self._ln(y, f"dec{i}.ln_cross"), memory, src_keep))
            y = y + drop(self._ffn(f"dec{i}.ffn", self._ln(y, f"dec{i}.ln_ffn")))
        y = self._ln(y, "dec.ln_final")
        return nx.matmul(y, nx.transpose(self.params["embed"]))

    def forward(self, src, tgt_in, train: bool = False, keys: DropoutKeys | None = None) -> Tensor:
        memory, keep = self.encode(src, train, keys)
        return self.decode(memory, keep, tgt_in, train, keys)

    __call__ = forward

    # -- checkpoints ---------------------------------------------------------
    def save(self, path, vocab_digest: str = "", extra: dict | None = None) -> None:
        save_checkpoint(path, self.cfg, self.params, vocab_digest, extra)

    @classmethod
    def load(cls, path) -> tuple["Transformer", dict]:
        cfg, params, header = load_checkpoint(path)
        return cls(cfg, params), header


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------

def pad_batch(seqs, pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def teacher_forcing(targets) -> tuple[np.ndarray, np.ndarray]:
    """From target piece ids (each ending in EOS) build (tgt_in, tgt_out).

    ``tgt_in`` is BOS-shifted; padding in ``tgt_out`` is PAD.
    """
    tin, tout = [], []
    for t in targets:
        t = list(t)
        if not t or t[-1] != EOS:
            t = t + [EOS]
        tin.append([BOS] + t[:-1])
        tout.append(t)
    return pad_batch(tin), pad_batch(tout)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"AGLCKPT1"


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor], vocab_digest: str = "",
                    extra: dict | None = None) -> None:
    """Binary container: magic, u64 header length, JSON header, raw float64 payloads.

    The header lists each tensor's name, shape, byte offset and length; payload
    order is sorted by name.  Everything is little-endian.
    """
    names = sorted(params)
    entries, offset = [], 0
    for name in names:
        arr = params[name].data
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": cfg.to_dict(),
        "vocab_digest": vocab_digest,
        "tensors": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for name in names:
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ModelError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    params = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f8").astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Tensor(arr, requires_grad=True)
    cfg = ModelConfig(**header["config"])
    return cfg, params, header


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
