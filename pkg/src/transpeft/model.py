"""Toy pre-norm transformer LM with PEFT seams and FFN perturbation hooks."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .strategies import apply_drop, apply_mask

if TYPE_CHECKING:  # pragma: no cover
    from .strategies import MaskSample, StrategySampler

FORMAT_VERSION = 1
ATT_MATRICES = ("query", "key", "value", "output")
FFN_STYLES = ("plain", "gated")


class CheckpointError(ValueError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 64
    activation: str = "gelu"
    ffn_style: str = "plain"
    arch_version: str = "toyformer-1"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")
        if self.ffn_style not in FFN_STYLES:
            raise ValueError(f"ffn_style must be one of {FFN_STYLES}")
        ag.activation(self.activation)

    @property
    def arch_tag(self) -> str:
        return (f"{self.arch_version}/L{self.n_layers}-d{self.d_model}-ff{self.d_ff}-h{self.n_heads}"
                f"-V{self.vocab_size}-T{self.max_seq_len}-{self.activation}-{self.ffn_style}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def attention_names(layer: int) -> list[str]:
    return [f"layers.{layer}.attn.{m}" for m in ATT_MATRICES]


def ffn_names(layer: int, cfg: ModelConfig) -> list[str]:
    names = [f"layers.{layer}.ffn.fc1", f"layers.{layer}.ffn.fc2"]
    if cfg.ffn_style == "gated":
        names.append(f"layers.{layer}.ffn.gate")
    return names


class TransformerModel:
    """Weights live in ``params`` (name -> Tensor), in a fixed canonical order."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # ---------------------------------------------------------- construction

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 42, init_std: float = 0.02) -> "TransformerModel":
        rng = np.random.default_rng(seed)
        dt = ag.dtype()
        d, V = config.d_model, config.vocab_size
        resid_std = init_std / math.sqrt(2 * config.n_layers)

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape).astype(dt)

        p: dict[str, np.ndarray] = {
            "tok_emb": normal((V, d), init_std),
            "pos_emb": normal((config.max_seq_len, d), init_std),
        }
        for i in range(config.n_layers):
            pre = f"layers.{i}"
            p[f"{pre}.ln1.g"] = np.ones(d, dt)
            p[f"{pre}.ln1.b"] = np.zeros(d, dt)
            for m in ATT_MATRICES:
                p[f"{pre}.attn.{m}"] = normal((d, d), resid_std if m == "output" else init_std)
            p[f"{pre}.ln2.g"] = np.ones(d, dt)
            p[f"{pre}.ln2.b"] = np.zeros(d, dt)
            p[f"{pre}.ffn.fc1"] = normal((d, config.d_ff), init_std)
            if config.ffn_style == "gated":
                p[f"{pre}.ffn.gate"] = normal((d, config.d_ff), init_std)
            p[f"{pre}.ffn.fc2"] = normal((config.d_ff, d), resid_std)
        p["ln_f.g"] = np.ones(d, dt)
        p["ln_f.b"] = np.zeros(d, dt)
        p["head"] = normal((d, V), init_std)
        return cls(config, {k: Tensor(v, name=k) for k, v in p.items()})

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: Tensor(t.data.copy(), name=k) for k, t in self.params.items()})

    def astype(self, precision: str) -> "TransformerModel":
        dt = {"float32": np.float32, "float64": np.float64}[precision]
        return TransformerModel(self.config, {k: Tensor(t.data.astype(dt), name=k) for k, t in self.params.items()})

    # ---------------------------------------------------------- identity

    @property
    def arch_tag(self) -> str:
        return self.config.arch_tag

    @property
    def fingerprint(self) -> str:
        return fingerprint_arrays({k: t.data for k, t in self.params.items()})

    def set_trainable(self, flag: bool, names=None) -> None:
        for k, t in self.params.items():
            if names is None or k in names:
                t.requires_grad = flag
                t.grad = None

    def attention_weights(self, layer: int) -> dict[str, np.ndarray]:
        return {n: self.params[n].data for n in attention_names(layer)}

    def ffn_weights(self, layer: int) -> dict[str, np.ndarray]:
        return {n: self.params[n].data for n in ffn_names(layer, self.config)}

    # ---------------------------------------------------------- forward pieces

    def _linear(self, x: Tensor, layer: int, site: str, weight: str, peft) -> Tensor:
        out = ag.matmul(x, self.params[weight])
        if peft is not None:
            block = peft.lora_block(layer, site)
            if block is not None:
                from .peft import lora_delta
                out = ag.add(out, lora_delta(x, block[0], block[1], peft.scaling))
        return out

    def attention_forward(self, x: Tensor, batch: int, seq: int, layer: int, peft=None,
                          context_mask: np.ndarray | None = None, mask_scale: float = 1.0) -> Tensor:
        """Causal multi-head attention on normalized input ``x`` of shape (batch*seq, d).

        ``context_mask`` (d,) or (batch*seq, d) multiplies the concatenated head
        outputs before the output projection (attention-site masking ablation).
        """
        cfg = self.config
        if seq > cfg.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds maximum {cfg.max_seq_len}")
        H = cfg.n_heads
        dh = cfg.d_model // H
        pre = f"layers.{layer}.attn"
        q = self._linear(x, layer, "query", f"{pre}.query", peft)
        k = self._linear(x, layer, "key", f"{pre}.key", peft)
        v = self._linear(x, layer, "value", f"{pre}.value", peft)
        q = ag.transpose(ag.reshape(q, (batch, seq, H, dh)), (0, 2, 1, 3))
        kt = ag.transpose(ag.reshape(k, (batch, seq, H, dh)), (0, 2, 3, 1))
        v = ag.transpose(ag.reshape(v, (batch, seq, H, dh)), (0, 2, 1, 3))
        scores = ag.scale(ag.matmul(q, kt), 1.0 / math.sqrt(dh))
        causal = np.triu(np.ones((seq, seq), dtype=bool), k=1)
        scores = ag.mask_fill(scores, causal, -1e9)
        ctx = ag.matmul(ag.softmax(scores), v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (batch * seq, cfg.d_model))
        if context_mask is not None:
            ctx = apply_mask(ctx, context_mask, mask_scale)
        return self._linear(ctx, layer, "output", f"{pre}.output", peft)

    def ffn_intermediate(self, x: Tensor, layer: int, peft=None) -> Tensor:
        """Activation feeding the down-projection: sigma(x W_fc1) or its gated variant."""
        cfg = self.config
        pre = f"layers.{layer}.ffn"
        act = ag.activation(cfg.activation)
        up = self._linear(x, layer, "fc1", f"{pre}.fc1", peft)
        if cfg.ffn_style == "gated":
            gate = self._linear(x, layer, "gate", f"{pre}.gate", peft)
            return ag.mul(act(gate), up)
        return act(up)

    def ffn_forward(self, x: Tensor, layer: int, peft=None, mask: np.ndarray | None = None,
                    mask_scale: float = 1.0, probe: dict | None = None) -> Tensor:
        """FFN(x) with optional intermediate mask ``mask`` of d_ff extents (shared or per token)."""
        h = self.ffn_intermediate(x, layer, peft)
        if probe is not None:
            probe.setdefault("ffn_intermediate", {})[layer] = h.data
        if mask is not None:
            if np.shape(mask)[-1] != self.config.d_ff:
                raise ValueError(f"mask length {np.shape(mask)[-1]} != d_ff {self.config.d_ff}")
            h = apply_mask(h, mask, mask_scale)
        return self._linear(h, layer, "fc2", f"layers.{layer}.ffn.fc2", peft)

    def layer_forward(self, x: Tensor, batch: int, seq: int, layer: int, peft=None,
                      sample: "MaskSample | None" = None, force_drop: frozenset = frozenset(),
                      probe: dict | None = None) -> Tensor:
        """One pre-norm block: A = X + Attn(LN(X)); y = A + z * FFN(LN(A))."""
        pre = f"layers.{layer}"
        p = self.params
        att_mask = att_scale = None
        z_att = z_ffn = 1.0
        ffn_mask, ffn_scale = None, 1.0
        if sample is not None:
            att_mask, att_scale, z_att = sample.attention(layer)
            ffn_mask, ffn_scale, z_ffn = sample.ffn(layer)

        h = ag.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        if _is_zero(z_att):
            a = x
        else:
            att = self.attention_forward(h, batch, seq, layer, peft, att_mask, att_scale or 1.0)
            if peft is not None:
                att = peft.adapter(layer, "after_attention", att)
            att = apply_drop(att, z_att)
            if probe is not None:
                probe.setdefault("attention", {})[layer] = att.data
            a = ag.add(x, att)

        if _is_zero(z_ffn) or layer in force_drop:
            y = a
            if probe is not None:
                probe.setdefault("ffn_intermediate", {})[layer] = None
        else:
            h2 = ag.layer_norm(a, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            out = self.ffn_forward(h2, layer, peft, ffn_mask, ffn_scale, probe)
            if peft is not None:
                out = peft.adapter(layer, "after_ffn", out)
            out = apply_drop(out, z_ffn)
            y = ag.add(a, out)
        if probe is not None:
            probe.setdefault("pre_ffn", {})[layer] = a.data
            probe.setdefault("post_ffn", {})[layer] = y.data
        return y

    def model_forward(self, tokens, mode: str = "eval", peft=None,
                      strategy: "StrategySampler | None" = None, force_drop=(), probe: dict | None = None) -> Tensor:
        """Logits of shape (batch*seq, vocab) for integer ``tokens`` (batch, seq) or (seq,).

        In ``train`` mode with a strategy, one mask sample is drawn for this pass;
        ``eval`` mode never touches the strategy.
        """
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.dtype.kind not in "iu":
            raise TypeError("tokens must be integers")
        B, T = tokens.shape
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        if T > cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds maximum {cfg.max_seq_len}")
        if peft is not None:
            peft = _as_state(peft, self)

        sample = None
        if mode == "train" and strategy is not None:
            sample = strategy.sample(cfg.n_layers, cfg.d_ff, cfg.d_model, B * T)

        p = self.params
        x = ag.embedding(p["tok_emb"], tokens.reshape(-1))
        pos = ag.embedding(p["pos_emb"], np.tile(np.arange(T), B))
        x = ag.add(x, pos)
        force_drop = frozenset(force_drop)
        for i in range(cfg.n_layers):
            x = self.layer_forward(x, B, T, i, peft, sample, force_drop, probe)
        x = ag.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return ag.matmul(x, p["head"])

    __call__ = model_forward


def _is_zero(z) -> bool:
    return np.ndim(z) == 0 and float(z) == 0.0


def _as_state(peft, model: TransformerModel):
    from .peft import PeftBinding, PeftState
    if isinstance(peft, PeftBinding):
        if peft.model is not model:
            raise ValueError("binding belongs to a different model")
        return peft.state
    if isinstance(peft, PeftState):
        if peft.arch_tag != model.arch_tag:
            raise ArchitectureMismatch(f"PEFT built for {peft.arch_tag}, model is {model.arch_tag}")
        return peft
    raise TypeError(f"unsupported peft object {type(peft).__name__}")


# -------------------------------------------------------------- fingerprints & containers

def fingerprint_arrays(arrays: dict[str, np.ndarray]) -> str:
    """sha256 over (name, dtype, shape, little-endian bytes) in insertion order."""
    h = hashlib.sha256()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        h.update(name.encode())
        h.update(str(a.dtype.str).encode())
        h.update(repr(tuple(a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Length-prefixed JSON header followed by a little-endian float32 blob.

    Layout: 8-byte little-endian uint64 header length, UTF-8 JSON header,
    then the concatenated tensors in index order.
    """
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints store float32 only, got {arr.dtype}")
        b = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    header = dict(header, format_version=FORMAT_VERSION, tensors=index, blob_bytes=offset)
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", data[:8])
    if 8 + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[8:8 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    blob = data[8 + hlen:]
    if len(blob) != header["blob_bytes"]:
        raise CheckpointError(f"truncated blob: {len(blob)} of {header['blob_bytes']} bytes")
    arrays = {}
    for ent in header["tensors"]:
        chunk = blob[ent["offset"]:ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(ent["shape"]).astype(np.float32)
    return header, arrays


def save_checkpoint(model: TransformerModel, path) -> str:
    arrays = {k: t.data for k, t in model.params.items()}
    fp = fingerprint_arrays(arrays)
    write_container(path, {"kind": "model", "arch_tag": model.arch_tag,
                           "config": model.config.to_dict(), "fingerprint": fp}, arrays)
    return fp


def load_checkpoint(path, expected_arch_tag: str | None = None) -> TransformerModel:
    header, arrays = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"not a model checkpoint (kind={header.get('kind')!r})")
    config = ModelConfig.from_dict(header["config"])
    if header["arch_tag"] != config.arch_tag:
        raise ArchitectureMismatch("header architecture tag disagrees with its config")
    if expected_arch_tag is not None and header["arch_tag"] != expected_arch_tag:
        raise ArchitectureMismatch(f"checkpoint is {header['arch_tag']}, expected {expected_arch_tag}")
    if fingerprint_arrays(arrays) != header["fingerprint"]:
        raise CheckpointError("fingerprint mismatch: checkpoint contents are corrupt")
    return TransformerModel(config, {k: Tensor(v, name=k) for k, v in arrays.items()})
