"""Measurements on model pairs: activation similarity, layer influence, weight shift,
loss discrepancy, parameter deviation and output perturbation statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import autograd as ag
from .model import ArchitectureMismatch, TransformerModel, attention_names, ffn_names
from .peft import ATTENTION_SITES, PeftState
from .strategies import StrategySampler, TransPeftConfig
from .tasks import Example, collate

UNESTIMATED = ("L", "beta", "lambda_max", "C", "C1", "C2")


def _require_same_arch(a: TransformerModel, b: TransformerModel) -> None:
    if a.arch_tag != b.arch_tag:
        raise ArchitectureMismatch(f"{a.arch_tag} vs {b.arch_tag}")


# ------------------------------------------------------------------ spectral norms

def power_iteration(mat: np.ndarray, iters: int = 30, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value of ``mat`` by power iteration on M^T M.

    Runs at least ``iters`` iterations and continues (up to 50x more) until
    successive estimates agree to ``tol`` relative.
    """
    a = np.asarray(mat, dtype=np.float64)
    if not np.any(a):
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.normal(size=a.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for it in range(iters * 50):
        u = a @ v
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0.0:
            return 0.0
        v = a.T @ (u / new_sigma)
        v /= np.linalg.norm(v)
        if it + 1 >= iters and abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(np.linalg.norm(a @ v))


@dataclass
class WeightShiftReport:
    attention_spectral: list[float]
    ffn_spectral: list[float]
    attention_frobenius: list[float]
    ffn_frobenius: list[float]

    @property
    def eps_att(self) -> float:
        return max(self.attention_spectral, default=0.0)

    @property
    def rho(self) -> float:
        return max(self.ffn_spectral, default=0.0)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.update(eps_att=self.eps_att, rho=self.rho)
        return d


def _group_shift(w0: dict[str, np.ndarray], w1: dict[str, np.ndarray]) -> tuple[float, float]:
    # a sub-layer's weight group is measured as the largest per-matrix shift
    spec = max(power_iteration(w1[k].astype(np.float64) - w0[k]) for k in w0)
    frob = float(np.sqrt(sum(((w1[k].astype(np.float64) - w0[k]) ** 2).sum() for k in w0)))
    return spec, frob


def weight_shift(m0: TransformerModel, m1: TransformerModel) -> WeightShiftReport:
    """Per-layer attention and FFN weight shifts between two model versions."""
    _require_same_arch(m0, m1)
    rep = WeightShiftReport([], [], [], [])
    for i in range(m0.config.n_layers):
        s, f = _group_shift(m0.attention_weights(i), m1.attention_weights(i))
        rep.attention_spectral.append(s)
        rep.attention_frobenius.append(f)
        s, f = _group_shift(m0.ffn_weights(i), m1.ffn_weights(i))
        rep.ffn_spectral.append(s)
        rep.ffn_frobenius.append(f)
    return rep


# ------------------------------------------------------------------ activation traces

@dataclass
class ActivationTrace:
    """Per-dimension mean |activation| and variance at each (layer, site) over a probe set."""

    probe_digest: str
    mean_abs: dict[str, list[np.ndarray]] = field(default_factory=dict)
    variance: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"probe_digest": self.probe_digest,
                "mean_abs": {s: [a.tolist() for a in v] for s, v in self.mean_abs.items()},
                "variance": {s: [a.tolist() for a in v] for s, v in self.variance.items()}}


SITES = ("attention", "ffn_intermediate")


def probe_digest(probe: Sequence[Example]) -> str:
    import hashlib
    h = hashlib.sha256()
    for e in probe:
        h.update(repr((e.tokens, e.answer)).encode())
    return h.hexdigest()


def _probe_batches(probe: Sequence[Example], vocab: int, batch_size: int = 128):
    if not probe:
        raise ValueError("probe set is empty")
    for s in range(0, len(probe), batch_size):
        chunk = probe[s:s + batch_size]
        inp, _, w = collate(chunk, answer_only=False)
        if inp.max() >= vocab:
            raise IndexError("probe token out of vocabulary")
        # real (non-pad) input positions; the final EOS is never an input
        yield inp, w > 0


def record_activations(model: TransformerModel, peft: PeftState | None,
                       probe: Sequence[Example]) -> ActivationTrace:
    """Evaluation-mode statistics over every real token of the probe set."""
    L = model.config.n_layers
    sums = {s: [0.0] * L for s in SITES}
    sq = {s: [0.0] * L for s in SITES}
    ab = {s: [0.0] * L for s in SITES}
    n = 0
    for inp, real in _probe_batches(probe, model.config.vocab_size):
        probe_out: dict = {}
        model.model_forward(inp, "eval", peft, probe=probe_out)
        sel = real.reshape(-1)
        n += int(sel.sum())
        for s in SITES:
            for i in range(L):
                a = probe_out[s][i]
                if a is None:
                    a = np.zeros((sel.size, model.config.d_ff))
                a = a[sel].astype(np.float64)
                sums[s][i] = sums[s][i] + a.sum(0)
                sq[s][i] = sq[s][i] + (a * a).sum(0)
                ab[s][i] = ab[s][i] + np.abs(a).sum(0)
    trace = ActivationTrace(probe_digest(probe))
    for s in SITES:
        trace.mean_abs[s] = [ab[s][i] / n for i in range(L)]
        trace.variance[s] = [sq[s][i] / n - (sums[s][i] / n) ** 2 for i in range(L)]
    return trace


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float((a * b).sum() / den)


def top_k_overlap(a: np.ndarray, b: np.ndarray, k: int) -> float:
    ta = set(np.argsort(-a, kind="stable")[:k].tolist())
    tb = set(np.argsort(-b, kind="stable")[:k].tolist())
    return len(ta & tb) / k


def compare_distributions(ta: ActivationTrace, tb: ActivationTrace, d_ff: int | None = None) -> dict[str, Any]:
    """Per (layer, site) Pearson correlation of mean-|activation| profiles and top-k overlap.

    ``k = width // 16`` for each site's width (d_ff for the FFN site).
    """
    if ta.probe_digest != tb.probe_digest:
        raise ValueError("traces were recorded on different probe sets")
    out: dict[str, Any] = {}
    for s in SITES:
        la, lb = ta.mean_abs[s], tb.mean_abs[s]
        if len(la) != len(lb):
            raise ValueError("layer count mismatch")
        pear, over = [], []
        for a, b in zip(la, lb):
            if a.shape != b.shape:
                raise ValueError(f"dimension mismatch at site {s}: {a.shape} vs {b.shape}")
            k = max(1, a.size // 16)
            pear.append(_pearson(a, b))
            over.append(top_k_overlap(a, b, k))
        out[s] = {"pearson": pear, "overlap": over,
                  "mean_pearson": float(np.mean(pear)), "mean_overlap": float(np.mean(over))}
    return out


# ------------------------------------------------------------------ layer influence

@dataclass
class LayerInfluence:
    values: list[float]

    def sign_agreement(self, other: "LayerInfluence") -> float:
        if len(self.values) != len(other.values):
            raise ValueError("layer count mismatch")
        a, b = np.sign(self.values), np.sign(other.values)
        return float(np.mean(a == b))


def layer_influence(model: TransformerModel, peft: PeftState | None, probe: Sequence[Example],
                    force_drop: Sequence[int] = ()) -> LayerInfluence:
    """Mean over probe tokens of ||post-FFN hidden|| - ||pre-FFN hidden|| per layer."""
    L = model.config.n_layers
    tot = np.zeros(L)
    n = 0
    for inp, real in _probe_batches(probe, model.config.vocab_size):
        probe_out: dict = {}
        model.model_forward(inp, "eval", peft, force_drop=force_drop, probe=probe_out)
        sel = real.reshape(-1)
        n += int(sel.sum())
        for i in range(L):
            pre = np.linalg.norm(probe_out["pre_ffn"][i][sel].astype(np.float64), axis=1)
            post = np.linalg.norm(probe_out["post_ffn"][i][sel].astype(np.float64), axis=1)
            tot[i] += (post - pre).sum()
    return LayerInfluence((tot / n).tolist())


# ------------------------------------------------------------------ loss terms

def mean_loss(model: TransformerModel, peft, examples: Sequence[Example], batch_size: int = 256) -> float:
    """Answer-token cross-entropy in float64 accumulation."""
    tot = w_tot = 0.0
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        inp, tgt, w = collate(chunk, answer_only=True)
        logits = model.model_forward(inp, "eval", peft).data.astype(np.float64)
        z = logits - logits.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        nll = -logp[np.arange(len(logp)), tgt.reshape(-1)]
        tot += float((nll * w.reshape(-1)).sum())
        w_tot += float(w.sum())
    return tot / w_tot


def loss_discrepancy(peft: PeftState | None, m0: TransformerModel, m1: TransformerModel,
                     examples: Sequence[Example]) -> dict[str, float]:
    _require_same_arch(m0, m1)
    l0 = mean_loss(m0, peft, examples)
    l1 = mean_loss(m1, peft, examples)
    return {"loss_m0": l0, "loss_m1": l1, "discrepancy": abs(l1 - l0)}


def parameter_deviation(a: PeftState, b: PeftState) -> dict[str, float]:
    """Euclidean distance between the FFN blocks (and, separately, the attention blocks)."""
    if a.config != b.config or a.arch_tag != b.arch_tag:
        raise ValueError("parameter deviation needs identical PEFT configs")
    ffn = att = 0.0
    for key in sorted(a.blocks):
        for ta, tb in zip(a.blocks[key], b.blocks[key]):
            d = float(((ta.data.astype(np.float64) - tb.data) ** 2).sum())
            if key[1] in ATTENTION_SITES:
                att += d
            else:
                ffn += d
    return {"ffn": float(np.sqrt(ffn)), "attention": float(np.sqrt(att))}


@dataclass
class BoundReport:
    loss_m0: float
    loss_m1: float
    discrepancy: float
    eps_att: float
    rho: float
    parameter_deviation: float
    parameter_deviation_attention: float
    perturbation: dict[str, Any]
    p_i: float
    p_c: float
    unestimated: tuple[str, ...] = UNESTIMATED

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["unestimated"] = list(self.unestimated)
        return d


def bound_report(peft0: PeftState, peft1: PeftState, m0: TransformerModel, m1: TransformerModel,
                 examples: Sequence[Example], transpeft: TransPeftConfig, probe: Sequence[Example],
                 draws: int = 1000) -> BoundReport:
    """Measured terms of the transfer loss bound; Lipschitz and curvature constants are not estimated."""
    from .strategies import perturbation_stats
    disc = loss_discrepancy(peft0, m0, m1, examples)
    shift = weight_shift(m0, m1)
    dev = parameter_deviation(peft0, peft1)
    pert = perturbation_stats(m0, peft0, transpeft, probe, draws)
    return BoundReport(disc["loss_m0"], disc["loss_m1"], disc["discrepancy"], shift.eps_att, shift.rho,
                       dev["ffn"], dev["attention"], pert, transpeft.p_i, transpeft.p_c)
