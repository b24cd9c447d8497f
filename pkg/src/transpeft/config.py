"""Experiment configuration: one INI-style text file plus ``section.key=value`` overrides.

Key grammar
-----------
``[model]``                    ModelConfig fields
``[task]``                     TaskSpec fields of the downstream task
``[corpus.pretrain.NAME]``     TaskSpec fields plus ``weight``; one section per pretraining family
``[corpus.update.NAME]``       same, for the continual-update corpus
``[pretrain]``                 ``n_sequences``, ``corpus_seed``, ``model_seed``
``[update]``                   ``mode``, ``attention_lr_scale``, ``n_sequences``, ``corpus_seed``
``[optimizer.pretrain]``, ``[optimizer.update]``, ``[optimizer.finetune]``   OptimizerConfig fields
``[peft]``                     PeftConfig fields (``targets`` comma separated)
``[transpeft]``                TransPeftConfig fields
``[sweep]``                    ``p_c``, ``p_i`` (comma separated grids)
``[run]``                      ``seeds``, ``task_seed``, ``probe_size``, ``probe_seed``, ``draws``, ``output_dir``

Unknown sections and keys are rejected. Booleans are ``true``/``false``; ``none``
maps to None for optional fields.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .model import ModelConfig
from .peft import PeftConfig
from .strategies import TransPeftConfig
from .tasks import TaskSpec
from .training import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    families: tuple[tuple[str, TaskSpec, float], ...]
    n_sequences: int = 6000
    corpus_seed: int = 42

    def specs(self) -> list[TaskSpec]:
        return [s for _, s, _ in self.families]

    def weights(self) -> list[float]:
        return [w for _, _, w in self.families]

    def describe(self) -> dict:
        return {"n_sequences": self.n_sequences, "corpus_seed": self.corpus_seed,
                "families": [{"name": n, "weight": w, "spec": s.to_dict()} for n, s, w in self.families]}


@dataclass(frozen=True)
class PretrainSection:
    n_sequences: int = 96000
    corpus_seed: int = 42
    model_seed: int = 42


@dataclass(frozen=True)
class UpdateSection:
    mode: str = "controlled"
    attention_lr_scale: float = 0.05
    n_sequences: int = 32000
    corpus_seed: int = 7


@dataclass(frozen=True)
class SweepSection:
    p_c: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.5)
    p_i: tuple[float, ...] = (0.0, 0.01, 0.05, 0.1)


@dataclass(frozen=True)
class RunSection:
    seeds: tuple[int, ...] = (42, 1, 99)
    task_seed: int = 42
    probe_size: int = 256
    probe_seed: int = 42
    draws: int = 1000
    output_dir: str = "runs"


def _default_pretrain_corpus() -> tuple:
    return (("add", TaskSpec(kind="modular", modulus=23, op="+", test_fraction=0.02), 0.5),
            ("copy", TaskSpec(kind="copy", seq_len=5, n_train=3000), 0.1),
            ("reverse", TaskSpec(kind="reverse", seq_len=5, n_train=3000), 0.1),
            ("sort", TaskSpec(kind="sort", seq_len=5, n_train=3000), 0.1),
            ("lm", TaskSpec(kind="lm", seq_len=12, n_train=3000), 0.2))


def _default_update_corpus() -> tuple:
    return (("add", TaskSpec(kind="modular", modulus=23, op="+", test_fraction=0.02), 0.2),
            ("sub", TaskSpec(kind="modular", modulus=23, op="-", test_fraction=0.02), 0.28),
            ("mul", TaskSpec(kind="modular", modulus=23, op="*", test_fraction=0.02), 0.28),
            ("lm", TaskSpec(kind="lm", seq_len=12, n_train=3000), 0.24))


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=lambda: TaskSpec(kind="modular", modulus=23, style="qa",
                                                            test_fraction=0.3))
    pretrain_corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(_default_pretrain_corpus(), 96000, 42))
    update_corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(_default_update_corpus(), 32000, 7))
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    update: UpdateSection = field(default_factory=UpdateSection)
    optimizer_pretrain: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        steps=3000, batch_size=32, lr=3e-3, warmup_steps=100))
    optimizer_update: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        steps=1000, batch_size=32, lr=2e-3, warmup_steps=50))
    optimizer_finetune: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(epochs=10, lr=3e-3))
    peft: PeftConfig = field(default_factory=PeftConfig)
    transpeft: TransPeftConfig = field(default_factory=lambda: TransPeftConfig(p_i=0.05, p_c=0.2))
    sweep: SweepSection = field(default_factory=SweepSection)
    run: RunSection = field(default_factory=RunSection)

    # -------------------------------------------------------------- serialization

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name, obj in self._flat_sections():
            cp[name] = {k: _format(v) for k, v in _fields_of(obj).items()}
        for kind, corpus in (("pretrain", self.pretrain_corpus), ("update", self.update_corpus)):
            for fam, spec, w in corpus.families:
                sec = {k: _format(v) for k, v in spec.to_dict().items()}
                sec["weight"] = _format(w)
                cp[f"corpus.{kind}.{fam}"] = sec
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def _flat_sections(self):
        p = dict(self.pretrain.__dict__)
        u = dict(self.update.__dict__)
        return [("model", self.model), ("task", self.task), ("pretrain", p), ("update", u),
                ("optimizer.pretrain", self.optimizer_pretrain), ("optimizer.update", self.optimizer_update),
                ("optimizer.finetune", self.optimizer_finetune), ("peft", self.peft),
                ("transpeft", self.transpeft), ("sweep", self.sweep), ("run", self.run)]

    def to_dict(self) -> dict[str, Any]:
        out = {name: _fields_of(obj) for name, obj in self._flat_sections()}
        out["corpus.pretrain"] = self.pretrain_corpus.describe()
        out["corpus.update"] = self.update_corpus.describe()
        return _jsonable(out)


_SIMPLE = {"model": ModelConfig, "task": TaskSpec, "optimizer.pretrain": OptimizerConfig,
           "optimizer.update": OptimizerConfig, "optimizer.finetune": OptimizerConfig,
           "peft": PeftConfig, "transpeft": TransPeftConfig, "sweep": SweepSection, "run": RunSection}
_ATTR = {"model": "model", "task": "task", "optimizer.pretrain": "optimizer_pretrain",
         "optimizer.update": "optimizer_update", "optimizer.finetune": "optimizer_finetune",
         "peft": "peft", "transpeft": "transpeft", "sweep": "sweep", "run": "run",
         "pretrain": "pretrain", "update": "update"}
_CORPUS_SIZE = {"pretrain": PretrainSection, "update": UpdateSection}


def _fields_of(obj) -> dict[str, Any]:
    if isinstance(obj, dict):
        return obj
    if isinstance(obj, PeftConfig):
        return obj.to_dict()
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str, typ):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def _parse_value(text: str, annotation: str):
    """Parse by the (string) type annotation of the target dataclass field."""
    ann = annotation.replace(" ", "")
    optional = "None" in ann
    if optional and text.strip().lower() == "none":
        return None
    base = ann.replace("|None", "").replace("None|", "")
    try:
        if base.startswith("tuple["):
            inner = base[6:-1].split(",")[0]
            typ = {"int": int, "float": float, "str": str}[inner]
            return tuple(_parse_scalar(x, typ) for x in text.split(",") if x.strip())
        typ = {"int": int, "float": float, "bool": bool, "str": str}[base]
        return _parse_scalar(text, typ)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"cannot parse {text!r} as {annotation}: {e}") from None


def _annotations(cls) -> dict[str, str]:
    return {f.name: (f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type)))
            for f in fields(cls)}


def _build(cls, values: dict[str, str], section: str, base=None):
    ann = _annotations(cls)
    unknown = set(values) - set(ann)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    parsed = {k: _parse_value(v, ann[k]) for k, v in values.items()}
    try:
        if base is None:
            return cls(**parsed)
        if isinstance(base, PeftConfig):
            return PeftConfig.from_dict({**base.to_dict(), **parsed})
        return replace(base, **parsed)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from None


def parse(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a config from INI text; ``overrides`` maps ``section.key`` to a raw string and wins."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from None
    sections: dict[str, dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for dotted, raw in (overrides or {}).items():
        sec, _, key = dotted.rpartition(".")
        if not sec:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sections.setdefault(sec, {})[key] = raw

    cfg = ExperimentConfig()
    changes: dict[str, Any] = {}
    corpora: dict[str, list] = {"pretrain": [], "update": []}
    for sec, values in sections.items():
        if sec in _SIMPLE:
            changes[_ATTR[sec]] = _build(_SIMPLE[sec], values, sec, getattr(cfg, _ATTR[sec]))
        elif sec in _CORPUS_SIZE:
            changes[_ATTR[sec]] = _build(_CORPUS_SIZE[sec], values, sec, getattr(cfg, _ATTR[sec]))
        elif sec.startswith("corpus.") and sec.count(".") == 2:
            _, kind, name = sec.split(".")
            if kind not in corpora:
                raise ConfigError(f"unknown corpus kind in [{sec}]")
            values = dict(values)
            if "weight" not in values:
                raise ConfigError(f"[{sec}] needs a weight")
            w = _parse_value(values.pop("weight"), "float")
            corpora[kind].append((name, _build(TaskSpec, values, sec), w))
        else:
            raise ConfigError(f"unknown section [{sec}]")
    for kind, fams in corpora.items():
        if fams:
            size = changes.get(kind, getattr(cfg, kind))
            changes[f"{kind}_corpus"] = CorpusConfig(tuple(fams), size.n_sequences, size.corpus_seed)
    cfg = replace(cfg, **changes)
    # corpus sizes follow their section even when the family list is the default one
    cfg = replace(cfg,
                  pretrain_corpus=replace(cfg.pretrain_corpus, n_sequences=cfg.pretrain.n_sequences,
                                          corpus_seed=cfg.pretrain.corpus_seed),
                  update_corpus=replace(cfg.update_corpus, n_sequences=cfg.update.n_sequences,
                                        corpus_seed=cfg.update.corpus_seed))
    if cfg.update.mode not in ("natural", "controlled"):
        raise ConfigError("update.mode must be 'natural' or 'controlled'")
    for kind in ("pretrain_corpus", "update_corpus"):
        w = sum(getattr(cfg, kind).weights())
        if abs(w - 1.0) > 1e-9:
            raise ConfigError(f"{kind} weights sum to {w}, not 1")
    return cfg


def load(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse(text, overrides)
