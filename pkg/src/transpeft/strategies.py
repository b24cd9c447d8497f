"""Intra-layer knowledge masking and cross-layer knowledge dropping.

During a training forward pass every FFN sub-layer gets a Bernoulli(1 - p_i)
mask over its intermediate dimensions and a Bernoulli(1 - p_c) bit that keeps
or drops its whole output. Evaluation forwards never sample.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag

SITES = ("ffn", "attention", "both")
GRANULARITIES = ("pass", "token")


@dataclass(frozen=True)
class TransPeftConfig:
    p_i: float = 0.0
    p_c: float = 0.0
    apply_site: str = "ffn"
    rescale: bool = False
    granularity: str = "pass"
    strategy_seed: int = 42

    def __post_init__(self):
        for name in ("p_i", "p_c"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.apply_site not in SITES:
            raise ValueError(f"apply_site must be one of {SITES}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")

    @property
    def active(self) -> bool:
        return self.p_i > 0 or self.p_c > 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskSample:
    """One forward pass worth of masks. Arrays are None where a site is untouched."""

    ffn_masks: list
    ffn_z: list
    attn_masks: list
    attn_z: list
    mask_scale: float = 1.0
    draw: int = 0

    def ffn(self, layer: int):
        return self.ffn_masks[layer], self.mask_scale, self.ffn_z[layer]

    def attention(self, layer: int):
        return self.attn_masks[layer], self.mask_scale, self.attn_z[layer]


@dataclass
class StrategySampler:
    """Owns the strategy RNG stream; ``draws`` counts sampled forward passes."""

    config: TransPeftConfig
    worker_id: int = 0
    draws: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng([self.config.strategy_seed, self.worker_id])

    def sample(self, n_layers: int, d_ff: int, d_model: int, n_tokens: int = 1) -> MaskSample:
        cfg = self.config
        self.draws += 1
        per_token = cfg.granularity == "token"
        keep_i, keep_c = 1.0 - cfg.p_i, 1.0 - cfg.p_c
        ones = [1.0] * n_layers
        none = [None] * n_layers

        def masks(width):
            shape = (n_tokens, width) if per_token else (width,)
            return [(self.rng.random(shape) < keep_i).astype(np.float64) for _ in range(n_layers)]

        def bits():
            if per_token:
                return [(self.rng.random(n_tokens) < keep_c).astype(np.float64) for _ in range(n_layers)]
            return [float(self.rng.random() < keep_c) for _ in range(n_layers)]

        ffn_m, ffn_z, att_m, att_z = none, ones, none, ones
        if cfg.apply_site in ("ffn", "both"):
            ffn_m = masks(d_ff) if cfg.p_i > 0 else none
            ffn_z = bits() if cfg.p_c > 0 else ones
        if cfg.apply_site in ("attention", "both"):
            att_m = masks(d_model) if cfg.p_i > 0 else none
            att_z = bits() if cfg.p_c > 0 else ones

        scale_i = 1.0
        if cfg.rescale:
            scale_i = 1.0 / keep_i
            if cfg.apply_site in ("ffn", "both"):
                ffn_z = [z / keep_c for z in ffn_z]
            if cfg.apply_site in ("attention", "both"):
                att_z = [z / keep_c for z in att_z]
        return MaskSample(ffn_m, ffn_z, att_m, att_z, scale_i, self.draws)


def apply_mask(h: ag.Tensor, mask: np.ndarray | None, scale: float = 1.0) -> ag.Tensor:
    """Intermediate activation times the mask, optionally divided by the keep rate."""
    if mask is None:
        return h
    m = np.asarray(mask, dtype=h.data.dtype)
    if scale != 1.0:
        m = m * np.asarray(scale, dtype=h.data.dtype)
    if m.ndim == 1:
        return ag.mul_row(h, ag.Tensor(m, _check=False))
    return ag.mul(h, ag.Tensor(np.broadcast_to(m, h.shape), _check=False))


def apply_drop(out: ag.Tensor, z) -> ag.Tensor:
    """Whole sub-layer output times its drop bit (scalar, or one bit per token row)."""
    if np.ndim(z) == 0:
        z = float(z)
        return out if z == 1.0 else ag.scale(out, z)
    zcol = np.asarray(z, dtype=out.data.dtype)[:, None]
    return ag.mul(out, ag.Tensor(np.broadcast_to(zcol, out.shape).copy(), _check=False))


def _local_outputs(model, peft, inputs, layer_inputs, sample: MaskSample | None, sites) -> np.ndarray:
    """Sub-layer outputs at every layer, each fed its clean-forward input, concatenated."""
    from .peft import PeftBinding
    if isinstance(peft, PeftBinding):
        peft = peft.state
    B, T = inputs.shape
    parts = []
    for i in range(model.config.n_layers):
        if "attention" in sites:
            mask, scale, z = (None, 1.0, 1.0) if sample is None else sample.attention(i)
            x = ag.Tensor(layer_inputs["attention"][i], _check=False)
            out = model.attention_forward(x, B, T, i, peft, mask, scale)
            if peft is not None:
                out = peft.adapter(i, "after_attention", out)
            parts.append(apply_drop(out, z).data)
        if "ffn" in sites:
            mask, scale, z = (None, 1.0, 1.0) if sample is None else sample.ffn(i)
            x = ag.Tensor(layer_inputs["ffn"][i], _check=False)
            out = model.ffn_forward(x, i, peft, mask, scale)
            if peft is not None:
                out = peft.adapter(i, "after_ffn", out)
            parts.append(apply_drop(out, z).data)
    return np.concatenate([p.astype(np.float64) for p in parts], axis=1)


def _clean_inputs(model, peft, inputs) -> dict:
    """Normalized inputs of each attention and FFN sub-layer on the unperturbed forward."""
    probe: dict = {}
    model.model_forward(inputs, "eval", peft, probe=probe)
    p = model.params
    B, T = inputs.shape
    x = ag.add(ag.embedding(p["tok_emb"], inputs.reshape(-1)),
               ag.embedding(p["pos_emb"], np.tile(np.arange(T), B)))
    att_in, ffn_in = {}, {}
    for i in range(model.config.n_layers):
        prev = x.data if i == 0 else probe["post_ffn"][i - 1]
        att_in[i] = ag.layer_norm(ag.Tensor(prev, _check=False), p[f"layers.{i}.ln1.g"], p[f"layers.{i}.ln1.b"]).data
        ffn_in[i] = ag.layer_norm(ag.Tensor(probe["pre_ffn"][i], _check=False),
                                  p[f"layers.{i}.ln2.g"], p[f"layers.{i}.ln2.b"]).data
    return {"attention": att_in, "ffn": ffn_in}


def _mc(model, peft, config: TransPeftConfig, inputs, layer_inputs, clean, draws, sites) -> dict:
    sampler = StrategySampler(config)
    cfg = model.config
    n_tok = inputs.size
    total = np.zeros_like(clean)
    total_sq = np.zeros_like(clean)
    sq_norms = np.empty(draws)
    for k in range(draws):
        s = sampler.sample(cfg.n_layers, cfg.d_ff, cfg.d_model, n_tok)
        delta = _local_outputs(model, peft, inputs, layer_inputs, s, sites) - clean
        total += delta
        total_sq += delta * delta
        sq_norms[k] = float((delta * delta).sum()) / n_tok
    mean = total / draws
    var = np.maximum(total_sq / draws - mean * mean, 0.0) * draws / (draws - 1)
    mean_norm = float(np.linalg.norm(mean)) / np.sqrt(n_tok)
    # expected norm of the Monte-Carlo mean if the true mean were zero
    se_norm = float(np.sqrt(var.sum() / draws)) / np.sqrt(n_tok)
    return {"p_i": config.p_i, "p_c": config.p_c, "rescale": config.rescale, "draws": draws,
            "mean_delta_norm": mean_norm, "mean_delta_se": se_norm,
            "mean_delta_ratio": mean_norm / se_norm if se_norm > 0 else 0.0,
            "mean_sq_norm": float(sq_norms.mean()),
            "mean_sq_norm_se": float(sq_norms.std(ddof=1) / np.sqrt(draws))}


def perturbation_stats(model, peft, config: TransPeftConfig, inputs, draws: int = 1000,
                       mode: str = "train") -> dict:
    """Monte-Carlo statistics of the perturbation delta(m, z) induced by the strategies.

    delta is taken sub-layer by sub-layer: every affected sub-layer is fed its
    input from the clean forward pass, and delta is the perturbed output minus the
    clean output, concatenated over layers. Norms are per token (squared norm
    divided by the number of probe tokens). Returns statistics for the combined
    configuration plus masking-only (p_c=0) and dropping-only (p_i=0) runs.

    ``inputs`` is either an integer token array (batch, seq) or a list of examples.
    """
    if mode != "train":
        raise ValueError("perturbation statistics need the training-mode stochastic path")
    if draws < 1000:
        raise ValueError("draws must be >= 1000")
    if not isinstance(inputs, np.ndarray):
        from .tasks import collate
        inputs = collate(list(inputs), answer_only=False)[0]
    inputs = np.atleast_2d(np.asarray(inputs))
    sites = {"ffn": ("ffn",), "attention": ("attention",), "both": ("attention", "ffn")}[config.apply_site]
    layer_inputs = _clean_inputs(model, peft, inputs)
    clean = _local_outputs(model, peft, inputs, layer_inputs, None, sites)
    out = {"combined": _mc(model, peft, config, inputs, layer_inputs, clean, draws, sites)}
    if config.p_i > 0 and config.p_c > 0:
        out["masking_only"] = _mc(model, peft, replace(config, p_c=0.0), inputs, layer_inputs, clean, draws, sites)
        out["dropping_only"] = _mc(model, peft, replace(config, p_i=0.0), inputs, layer_inputs, clean, draws, sites)
    else:
        key = "masking_only" if config.p_i > 0 else "dropping_only"
        out[key] = out["combined"]
    return out
