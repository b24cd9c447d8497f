"""LoRA and Adapter deltas: init, forward composition, attach/detach and transfer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .model import (ArchitectureMismatch, CheckpointError, ModelConfig, TransformerModel,
                    fingerprint_arrays, read_container, write_container)

LORA_SITES = ("query", "key", "value", "output", "fc1", "fc2", "gate")
ADAPTER_SITES = ("after_attention", "after_ffn")
ATTENTION_SITES = frozenset({"query", "key", "value", "output", "after_attention"})


@dataclass(frozen=True)
class PeftConfig:
    kind: str = "lora"
    rank: int = 8
    alpha: float | None = None
    targets: tuple[str, ...] = ("query", "value", "fc1", "fc2")
    adapter_activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("lora", "adapter"):
            raise ValueError(f"kind must be 'lora' or 'adapter', got {self.kind!r}")
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets:
            raise ValueError("PEFT targets must be non-empty")
        allowed = LORA_SITES if self.kind == "lora" else ADAPTER_SITES
        bad = [t for t in self.targets if t not in allowed]
        if bad:
            raise ValueError(f"invalid {self.kind} targets {bad}; allowed: {allowed}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(2 * self.rank))
        ag.activation(self.adapter_activation)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def validate_for(self, mc: ModelConfig) -> None:
        if self.rank > mc.d_model // 2:
            raise ValueError(f"rank {self.rank} violates r <= d/2 (d={mc.d_model})")
        if "gate" in self.targets and mc.ffn_style != "gated":
            raise ValueError("target 'gate' requires a gated FFN")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "rank": self.rank, "alpha": self.alpha,
                "targets": list(self.targets), "adapter_activation": self.adapter_activation}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PeftConfig":
        return cls(**{**d, "targets": tuple(d["targets"])})


def site_shape(site: str, mc: ModelConfig) -> tuple[int, int]:
    d, f = mc.d_model, mc.d_ff
    return {"fc1": (d, f), "gate": (d, f), "fc2": (f, d)}.get(site, (d, d))


@dataclass
class PeftState:
    """Trainable deltas keyed by (layer, site), each a (W_down, W_up) pair."""

    config: PeftConfig
    arch_tag: str
    blocks: dict[tuple[int, str], tuple[Tensor, Tensor]]
    source_fingerprint: str | None = None

    @property
    def scaling(self) -> float:
        return self.config.scaling

    def lora_block(self, layer: int, site: str):
        if self.config.kind != "lora":
            return None
        return self.blocks.get((layer, site))

    def adapter(self, layer: int, site: str, h: Tensor) -> Tensor:
        if self.config.kind != "adapter":
            return h
        block = self.blocks.get((layer, site))
        if block is None:
            return h
        return adapter_forward(h, block[0], block[1], self.config.adapter_activation)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for (layer, site), (down, up) in sorted(self.blocks.items()):
            out[f"layers.{layer}.{site}.down"] = down.data
            out[f"layers.{layer}.{site}.up"] = up.data
        return out

    def tensors(self) -> list[Tensor]:
        return [t for key in sorted(self.blocks) for t in self.blocks[key]]

    def partition(self) -> tuple[list[Tensor], list[Tensor]]:
        """(theta_att, theta_ffn) lists of tensors."""
        att, ffn = [], []
        for key in sorted(self.blocks):
            (att if key[1] in ATTENTION_SITES else ffn).extend(self.blocks[key])
        return att, ffn

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag
            t.grad = None

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.named_arrays().values())

    @property
    def digest(self) -> str:
        return fingerprint_arrays(self.named_arrays())

    def copy(self) -> "PeftState":
        blocks = {k: (Tensor(d.data.copy(), name=d.name), Tensor(u.data.copy(), name=u.name))
                  for k, (d, u) in self.blocks.items()}
        return PeftState(self.config, self.arch_tag, blocks, self.source_fingerprint)

    def astype(self, precision: str) -> "PeftState":
        dt = {"float32": np.float32, "float64": np.float64}[precision]
        blocks = {k: (Tensor(d.data.astype(dt), name=d.name), Tensor(u.data.astype(dt), name=u.name))
                  for k, (d, u) in self.blocks.items()}
        return PeftState(self.config, self.arch_tag, blocks, self.source_fingerprint)


def init_peft(config: PeftConfig, model_config: ModelConfig, seed: int = 42) -> PeftState:
    """W_down ~ N(0, 1/r) (variance), W_up = 0, so the initial delta is exactly zero."""
    config.validate_for(model_config)
    rng = np.random.default_rng(seed)
    dt = ag.dtype()
    r = config.rank
    blocks = {}
    for layer in range(model_config.n_layers):
        for site in config.targets:
            if config.kind == "lora":
                d_in, d_out = site_shape(site, model_config)
            else:
                d_in = d_out = model_config.d_model
            down = rng.normal(0.0, 1.0 / np.sqrt(r), size=(d_in, r)).astype(dt)
            up = np.zeros((r, d_out), dt)
            blocks[(layer, site)] = (Tensor(down, name=f"layers.{layer}.{site}.down"),
                                     Tensor(up, name=f"layers.{layer}.{site}.up"))
    return PeftState(config, model_config.arch_tag, blocks)


def lora_delta(x: Tensor, down: Tensor, up: Tensor, scaling: float) -> Tensor:
    if x.shape[-1] != down.shape[0] or down.shape[1] != up.shape[0]:
        raise ShapeError(f"LoRA shape chain {x.shape} -> {down.shape} -> {up.shape}")
    return ag.scale(ag.matmul(ag.matmul(x, down), up), scaling)


def lora_forward(x: Tensor, w: Tensor, down: Tensor, up: Tensor, alpha: float) -> Tensor:
    """x W + (alpha / r) x W_down W_up."""
    if w.shape[0] != down.shape[0] or w.shape[1] != up.shape[1]:
        raise ShapeError(f"LoRA delta {down.shape}x{up.shape} does not fit weight {w.shape}")
    r = down.shape[1]
    return ag.add(ag.matmul(x, w), lora_delta(x, down, up, alpha / r))


def adapter_forward(h: Tensor, down: Tensor, up: Tensor, activation: str = "relu") -> Tensor:
    """h + f(h W_down) W_up."""
    if h.shape[-1] != down.shape[0] or up.shape[1] != h.shape[-1] or down.shape[1] != up.shape[0]:
        raise ShapeError(f"adapter shapes {h.shape}, {down.shape}, {up.shape}")
    f = ag.activation(activation)
    return ag.add(h, ag.matmul(f(ag.matmul(h, down)), up))


class PeftBinding:
    """A PEFT state attached to a model; neither object is modified by binding."""

    def __init__(self, model: TransformerModel, state: PeftState):
        self.model = model
        self.state = state

    def forward(self, tokens, mode: str = "eval", strategy=None, **kw) -> Tensor:
        return self.model.model_forward(tokens, mode, self, strategy, **kw)

    __call__ = forward


def attach(model: TransformerModel, state: PeftState) -> PeftBinding:
    if state.arch_tag != model.arch_tag:
        raise ArchitectureMismatch(f"PEFT built for {state.arch_tag}, model is {model.arch_tag}")
    mc = model.config
    for (layer, site), (down, up) in state.blocks.items():
        if layer >= mc.n_layers:
            raise ValueError(f"site absent: layer {layer}")
        if state.config.kind == "lora":
            if site == "gate" and mc.ffn_style != "gated":
                raise ValueError("site absent: gate")
            want = site_shape(site, mc)
            if (down.shape[0], up.shape[1]) != want:
                raise ArchitectureMismatch(f"{site} delta does not fit {want}")
    return PeftBinding(model, state)


def detach(binding: PeftBinding) -> PeftState:
    return binding.state


def transfer(state: PeftState, target: TransformerModel) -> tuple[PeftBinding, dict[str, Any]]:
    """Attach an already-trained state to another model version, unchanged."""
    binding = attach(target, state)
    record = {"source_fingerprint": state.source_fingerprint,
              "target_fingerprint": target.fingerprint,
              "peft_digest": state.digest}
    return binding, record


def save_peft(state: PeftState, path) -> str:
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in state.named_arrays().items()}
    digest = fingerprint_arrays(arrays)
    write_container(path, {"kind": "peft", "arch_tag": state.arch_tag,
                           "peft_config": state.config.to_dict(),
                           "source_fingerprint": state.source_fingerprint,
                           "fingerprint": digest}, arrays)
    return digest


def load_peft(path) -> PeftState:
    header, arrays = read_container(path)
    if header.get("kind") != "peft":
        raise CheckpointError(f"not a PEFT checkpoint (kind={header.get('kind')!r})")
    if fingerprint_arrays(arrays) != header["fingerprint"]:
        raise CheckpointError("fingerprint mismatch: PEFT checkpoint is corrupt")
    config = PeftConfig.from_dict(header["peft_config"])
    blocks = {}
    for name, arr in arrays.items():
        _, layer, site, part = name.split(".")
        key = (int(layer), site)
        pair = blocks.setdefault(key, [None, None])
        pair[0 if part == "down" else 1] = Tensor(arr, name=name)
    return PeftState(config, header["arch_tag"], {k: tuple(v) for k, v in blocks.items()},
                     header.get("source_fingerprint"))
