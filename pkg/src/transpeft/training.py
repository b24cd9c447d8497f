"""Optimization loops: pretraining, continual updates, PEFT fine-tuning and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import TransformerModel, attention_names
from .peft import PeftConfig, PeftState, init_peft
from .strategies import StrategySampler, TransPeftConfig
from .tasks import Example, collate

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, dump_path: str | None = None):
        super().__init__(msg if dump_path is None else f"{msg} (state dumped to {dump_path})")
        self.dump_path = dump_path


class BaseWeightGradient(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 3
    steps: int = 0  # > 0 overrides epochs with a fixed step budget
    grad_clip: float = 1.0
    warmup_steps: int = 0
    seed: int = 42

    def __post_init__(self):
        if self.algorithm not in ("adamw", "sgd"):
            raise ValueError("algorithm must be 'adamw' or 'sgd'")
        if self.lr <= 0 or self.eps <= 0 or self.grad_clip <= 0:
            raise ValueError("lr, eps and grad_clip must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.steps < 0:
            raise ValueError("batch_size must be >= 1, epochs and steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class Optimizer:
    """AdamW (decoupled decay on matrices only) or plain SGD over a list of tensors."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimizerConfig, lr_scale: Sequence[float] | None = None):
        self.params = list(params)
        self.cfg = cfg
        self.lr_scale = list(lr_scale) if lr_scale is not None else [1.0] * len(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> float:
        cfg = self.cfg
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        clip = min(1.0, cfg.grad_clip / (norm + 1e-12))
        lr = cfg.lr * (min(1.0, self.t / cfg.warmup_steps) if cfg.warmup_steps else 1.0)
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g * clip
            lr_i = lr * self.lr_scale[i]
            if cfg.algorithm == "sgd":
                p.data -= (lr_i * g).astype(p.data.dtype)
                continue
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            mhat = self.m[i] / (1 - cfg.beta1 ** self.t)
            vhat = self.v[i] / (1 - cfg.beta2 ** self.t)
            if cfg.weight_decay and p.data.ndim >= 2:
                p.data -= (lr_i * cfg.weight_decay * p.data).astype(p.data.dtype)
            p.data -= (lr_i * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)
        for p in self.params:
            p.grad = None
        return norm


def batches(examples: Sequence[Example], cfg: OptimizerConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(examples))
    for s in range(0, len(order), cfg.batch_size):
        yield [examples[i] for i in order[s:s + cfg.batch_size]]


def loss_on(model: TransformerModel, batch: Sequence[Example], answer_only: bool, mode: str = "eval",
            peft=None, strategy=None) -> Tensor:
    inp, tgt, w = collate(batch, answer_only)
    logits = model.model_forward(inp, mode, peft, strategy)
    return ag.cross_entropy(logits, tgt.reshape(-1), w.reshape(-1))


def _dump(model: TransformerModel, peft: PeftState | None, dump_dir) -> str | None:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / "diverged_state.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: t.data for k, t in model.params.items()}
    if peft is not None:
        arrays.update({f"peft.{k}": v for k, v in peft.named_arrays().items()})
    np.savez(path, **arrays)
    return str(path)


def train_loop(model: TransformerModel, examples: Sequence[Example], opt_cfg: OptimizerConfig,
               trainable: Sequence[Tensor], *, answer_only: bool, peft: PeftState | None = None,
               strategy: StrategySampler | None = None, lr_scale=None, frozen: Sequence[Tensor] = (),
               dump_dir=None, log_every: int = 0) -> list[float]:
    """Generic minibatch loop; returns per-step training losses."""
    opt = Optimizer(trainable, opt_cfg, lr_scale)
    history: list[float] = []
    total_steps = opt_cfg.steps or opt_cfg.epochs * math.ceil(len(examples) / opt_cfg.batch_size)
    epoch = 0
    while len(history) < total_steps:
        for batch in batches(examples, opt_cfg, epoch):
            try:
                with ag.Tape() as tape:
                    loss = loss_on(model, batch, answer_only, "train", peft, strategy)
                # every PEFT-bearing sub-layer can be dropped at once; that step sees a zero gradient
                if loss.requires_grad:
                    ag.backward(loss, tape)
            except ag.NonFiniteError as e:
                raise TrainingDiverged(f"non-finite value at step {len(history)}: {e}",
                                       _dump(model, peft, dump_dir)) from None
            for t in frozen:
                if t.grad is not None and np.any(t.grad):
                    raise BaseWeightGradient(f"frozen weight {t.name} received a gradient")
            opt.step()
            history.append(loss.item())
            if log_every and len(history) % log_every == 0:
                log.info("step %d loss %.4f", len(history), float(np.mean(history[-log_every:])))
            if len(history) >= total_steps:
                break
        epoch += 1
    return history


# ------------------------------------------------------------------ protocol stages

def pretrain(model: TransformerModel, corpus: Sequence[Example], opt_cfg: OptimizerConfig,
             dump_dir=None) -> tuple[TransformerModel, dict[str, Any]]:
    """Full causal-LM training of every weight; returns the trained copy and a summary."""
    m = model.copy()
    m.set_trainable(True)
    baseline = math.log(m.config.vocab_size)
    hist = train_loop(m, corpus, opt_cfg, list(m.params.values()), answer_only=False, dump_dir=dump_dir)
    m.set_trainable(False)
    tail = float(np.mean(hist[-50:])) if hist else baseline
    return m, {"steps": len(hist), "final_loss": tail, "baseline_loss": baseline,
               "margin": baseline - tail, "fingerprint": m.fingerprint}


def continual_update(m0: TransformerModel, corpus: Sequence[Example], opt_cfg: OptimizerConfig,
                     mode: str = "natural", attention_lr_scale: float = 0.05,
                     dump_dir=None) -> tuple[TransformerModel, dict[str, Any]]:
    """Continue causal-LM training of M0 on a new corpus, producing M1.

    ``controlled`` mode multiplies the learning rate of the attention projections
    by ``attention_lr_scale``; ``natural`` trains everything at the base rate.
    """
    if mode not in ("natural", "controlled"):
        raise ValueError("update mode must be 'natural' or 'controlled'")
    m1 = m0.copy()
    m1.set_trainable(True)
    att = {n for i in range(m1.config.n_layers) for n in attention_names(i)}
    names = list(m1.params)
    scale = [attention_lr_scale if (mode == "controlled" and n in att) else 1.0 for n in names]
    hist = train_loop(m1, corpus, opt_cfg, [m1.params[n] for n in names], answer_only=False,
                      lr_scale=scale, dump_dir=dump_dir)
    m1.set_trainable(False)
    if m1.config != m0.config:
        raise RuntimeError("architecture changed during update")
    from .analysis import weight_shift
    shift = weight_shift(m0, m1)
    return m1, {"mode": mode, "steps": len(hist), "attention_lr_scale": attention_lr_scale,
                "final_loss": float(np.mean(hist[-50:])) if hist else None,
                "eps_att": shift.eps_att, "rho": shift.rho,
                "m0_fingerprint": m0.fingerprint, "m1_fingerprint": m1.fingerprint}


def finetune_peft(model: TransformerModel, train: Sequence[Example], peft_cfg: PeftConfig,
                  opt_cfg: OptimizerConfig, transpeft: TransPeftConfig | None = None,
                  init_seed: int | None = None, worker_id: int = 0, dump_dir=None) -> tuple[PeftState, dict]:
    """Train a fresh PEFT state on a frozen base; strategies apply to training forwards only."""
    before = model.fingerprint
    model.set_trainable(False)
    state = init_peft(peft_cfg, model.config, opt_cfg.seed if init_seed is None else init_seed)
    state.set_trainable(True)
    sampler = StrategySampler(transpeft, worker_id) if transpeft is not None else None
    hist = train_loop(model, train, opt_cfg, state.tensors(), answer_only=True, peft=state,
                      strategy=sampler, frozen=list(model.params.values()), dump_dir=dump_dir)
    state.set_trainable(False)
    if model.fingerprint != before:
        raise BaseWeightGradient("base model changed during PEFT fine-tuning")
    state.source_fingerprint = before
    return state, {"steps": len(hist), "final_loss": float(np.mean(hist[-20:])) if hist else None,
                   "strategy_draws": sampler.draws if sampler else 0}


def evaluate_task(model: TransformerModel, examples: Sequence[Example], peft=None,
                  batch_size: int = 256) -> dict[str, float]:
    """Mean answer-token loss and exact-match accuracy under greedy decoding.

    With a causal model, greedy decoding reproduces the answer iff every answer
    token is the argmax given the gold prefix, so one teacher-forced pass suffices.
    """
    total_loss = total_w = 0.0
    correct = 0
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        inp, tgt, w = collate(chunk, answer_only=True)
        logits = model.model_forward(inp, "eval", peft).data
        B, T = inp.shape
        logits = logits.reshape(B, T, -1).astype(np.float64)
        shifted = logits - logits.max(-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
        nll = -np.take_along_axis(logp, tgt[..., None], -1)[..., 0]
        total_loss += float((nll * w).sum())
        total_w += float(w.sum())
        pred = logits.argmax(-1)
        ok = (pred == tgt) | (w == 0)
        correct += int(ok.all(1).sum())
    return {"loss": total_loss / total_w, "accuracy": correct / len(examples), "n": len(examples)}


# ------------------------------------------------------------------ protocol

ARMS = ("finetune_o", "finetune_n", "direct_transfer", "trans_peft")
DEFAULT_SEEDS = (42, 1, 99)
# (a, b) pairs compared by paired t-test when both arms ran
COMPARISONS = (("trans_peft", "direct_transfer"), ("finetune_n", "direct_transfer"),
               ("trans_peft", "finetune_n"), ("finetune_o", "direct_transfer"))


@dataclass
class UpdatePair:
    m0: TransformerModel
    m1: TransformerModel
    mode: str = "controlled"
    corpus: dict = field(default_factory=dict)
    eps_att: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        if self.m0.arch_tag != self.m1.arch_tag:
            from .model import ArchitectureMismatch
            raise ArchitectureMismatch(f"{self.m0.arch_tag} vs {self.m1.arch_tag}")

    @property
    def identical(self) -> bool:
        return self.m0.fingerprint == self.m1.fingerprint

    def describe(self) -> dict:
        return {"m0_fingerprint": self.m0.fingerprint, "m1_fingerprint": self.m1.fingerprint,
                "arch_tag": self.m0.arch_tag, "mode": self.mode, "corpus": self.corpus,
                "eps_att": self.eps_att, "rho": self.rho}


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Two-sided paired t-test p-value.

    1.0 when every difference is zero, 0.0 when all differences equal the same
    nonzero value, None with fewer than two pairs.
    """
    from scipy import stats
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if len(d) < 2:
        return None
    if not np.any(d):
        return 1.0
    if np.all(d == d[0]):
        return 0.0  # zero-variance nonzero difference: t is infinite
    p = float(stats.ttest_rel(a, b).pvalue)
    return None if math.isnan(p) else p


@dataclass
class ArmResult:
    arm: str
    seed: int
    task: str
    loss: float
    accuracy: float
    state: PeftState | None = None
    source_fingerprint: str = ""
    target_fingerprint: str = ""

    def row(self) -> dict:
        return {"arm": self.arm, "seed": self.seed, "task": self.task,
                "loss": self.loss, "accuracy": self.accuracy}


def _seed_cfg(opt_cfg: OptimizerConfig, seed: int) -> OptimizerConfig:
    from dataclasses import replace
    return replace(opt_cfg, seed=seed)


def run_seed(pair: UpdatePair, train: Sequence[Example], test: Sequence[Example], peft_cfg: PeftConfig,
             opt_cfg: OptimizerConfig, transpeft: TransPeftConfig | None, arms: Sequence[str],
             seed: int, task: str = "task") -> list[ArmResult]:
    """All requested arms for one seed; PEFT init and batch order are both seeded by ``seed``."""
    cfg = _seed_cfg(opt_cfg, seed)
    fp0, fp1 = pair.m0.fingerprint, pair.m1.fingerprint
    out: list[ArmResult] = []
    vanilla0 = None

    def tune(model, tp):
        st, _ = finetune_peft(model, train, peft_cfg, cfg, tp, init_seed=seed)
        return st

    def score(arm, state, model, source_fp):
        before = state.to_bytes()
        m = evaluate_task(model, test, state)
        if state.to_bytes() != before:
            raise RuntimeError(f"PEFT bytes changed during evaluation of {arm}")
        out.append(ArmResult(arm, seed, task, m["loss"], m["accuracy"], state, source_fp, model.fingerprint))

    for arm in ARMS:
        if arm not in arms:
            continue
        if arm in ("finetune_o", "direct_transfer"):
            if vanilla0 is None:
                vanilla0 = tune(pair.m0, None)
            score(arm, vanilla0, pair.m0 if arm == "finetune_o" else pair.m1, fp0)
        elif arm == "finetune_n":
            score(arm, tune(pair.m1, None), pair.m1, fp1)
        else:
            if transpeft is None:
                raise ValueError("trans_peft arm needs a TransPeftConfig")
            score(arm, tune(pair.m0, transpeft), pair.m1, fp0)
    if pair.m0.fingerprint != fp0 or pair.m1.fingerprint != fp1:
        raise BaseWeightGradient("a base model changed during the protocol")
    return out


@dataclass
class ProtocolResult:
    results: list[ArmResult]
    pvalues: dict[str, float | None]

    def rows(self) -> list[dict]:
        return [r.row() for r in self.results]

    def accuracies(self, arm: str) -> list[float]:
        return [r.accuracy for r in sorted(self.results, key=lambda r: r.seed) if r.arm == arm]

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for arm in ARMS:
            rs = [r for r in self.results if r.arm == arm]
            if rs:
                acc = [r.accuracy for r in rs]
                out[arm] = {"mean_accuracy": float(np.mean(acc)), "std_accuracy": float(np.std(acc)),
                            "mean_loss": float(np.mean([r.loss for r in rs])), "n_seeds": len(rs)}
        return out

    def state(self, arm: str, seed: int) -> PeftState:
        for r in self.results:
            if r.arm == arm and r.seed == seed:
                return r.state
        raise KeyError((arm, seed))

    def metrics(self) -> dict:
        return {"rows": self.rows(), "aggregate": self.aggregate(), "pvalues": self.pvalues}


def compare_arms(results: Sequence[ArmResult]) -> dict[str, float | None]:
    acc: dict[str, dict[int, float]] = {}
    for r in results:
        acc.setdefault(r.arm, {})[r.seed] = r.accuracy
    out = {}
    for a, b in COMPARISONS:
        if a in acc and b in acc:
            seeds = sorted(set(acc[a]) & set(acc[b]))
            out[f"{a}_vs_{b}"] = paired_ttest([acc[a][s] for s in seeds], [acc[b][s] for s in seeds])
    return out


def run_protocol(pair: UpdatePair, train: Sequence[Example], test: Sequence[Example], peft_cfg: PeftConfig,
                 opt_cfg: OptimizerConfig, transpeft: TransPeftConfig | None = None,
                 arms: Sequence[str] = ARMS, seeds: Sequence[int] = DEFAULT_SEEDS, task: str = "task",
                 jobs: int = 1) -> ProtocolResult:
    """Fine-tune_o, Fine-tune_n, Direct Transfer and Trans-PEFT over several seeds.

    direct_transfer reuses the finetune_o state (trained on M0 without strategies);
    trans_peft trains on M0 with strategies; both are evaluated on M1.
    """
    bad = set(arms) - set(ARMS)
    if bad:
        raise ValueError(f"unknown arms {sorted(bad)}")
    if not seeds:
        raise ValueError("at least one seed is required")
    args = [(pair, train, test, peft_cfg, opt_cfg, transpeft, tuple(arms), s, task) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(min(jobs, len(seeds))) as ex:
            per_seed = list(ex.map(_run_seed_star, args))
    else:
        per_seed = [run_seed(*a) for a in args]
    results = [r for rs in per_seed for r in rs]
    return ProtocolResult(results, compare_arms(results))


def _run_seed_star(a):
    return run_seed(*a)
