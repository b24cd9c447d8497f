"""Deterministic synthetic corpora and downstream tasks over a fixed symbol vocabulary."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

PAD, BOS, EOS, EQ = 0, 1, 2, 3
OPS = {"+": 4, "-": 5, "*": 6}
COPY, REVERSE, SORT = 7, 8, 9
QA_OP, QA_QUERY = 10, 11
LM_MARK, SEP = 12, 13
N_SPECIAL = 16
KINDS = ("lm", "modular", "copy", "reverse", "sort")
_COMMANDS = {"copy": COPY, "reverse": REVERSE, "sort": SORT}


def value_token(v: int) -> int:
    return N_SPECIAL + int(v)


def token_value(t: int) -> int:
    return int(t) - N_SPECIAL


class Example(NamedTuple):
    tokens: tuple[int, ...]
    answer: tuple[int, int]  # tokens[start:end] is the answer region

    @property
    def answer_tokens(self) -> tuple[int, ...]:
        return self.tokens[self.answer[0]:self.answer[1]]


class Splits(NamedTuple):
    train: list[Example]
    test: list[Example]


@dataclass(frozen=True)
class TaskSpec:
    """What to generate. Unused size fields are ignored by kinds that do not need them.

    modular: every pair (a, b) in [0, modulus)^2, answer (a op b) mod modulus.
    ``style="plain"`` renders ``BOS a op b = c EOS``; ``style="qa"`` renders
    ``BOS a # b ? c EOS`` (different operator/query symbols, same answer).
    copy/reverse/sort: ``BOS cmd x1..xn SEP y1..yn EOS`` over ``n_symbols``.
    lm: sequences from a seeded first-order Markov chain over ``n_symbols``.
    """

    kind: str = "modular"
    modulus: int = 23
    op: str = "+"
    style: str = "plain"
    seq_len: int = 6
    n_symbols: int = 16
    n_train: int = 2000
    n_test: int = 256
    test_fraction: float = 0.3
    vocab_size: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}")
        if self.style not in ("plain", "qa"):
            raise ValueError(f"unknown style {self.style!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        needed = self.modulus if self.kind == "modular" else self.n_symbols
        if N_SPECIAL + needed > self.vocab_size:
            raise ValueError(f"vocabulary overflow: {self.kind} needs {N_SPECIAL + needed} tokens, "
                             f"vocab_size is {self.vocab_size}")

    @property
    def key(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown task keys: {sorted(set(d) - known)}")
        return cls(**d)


def modular_answer(a: int, b: int, op: str, modulus: int) -> int:
    if op == "+":
        return (a + b) % modulus
    if op == "-":
        return (a - b) % modulus
    return (a * b) % modulus


def _modular(spec: TaskSpec, rng: np.random.Generator) -> Splits:
    p = spec.modulus
    pairs = [(a, b) for a in range(p) for b in range(p)]
    order = rng.permutation(len(pairs))
    n_test = int(round(spec.test_fraction * len(pairs)))
    op_tok = OPS[spec.op] if spec.style == "plain" else QA_OP
    eq_tok = EQ if spec.style == "plain" else QA_QUERY

    def render(a, b):
        c = modular_answer(a, b, spec.op, p)
        toks = (BOS, value_token(a), op_tok, value_token(b), eq_tok, value_token(c), EOS)
        return Example(toks, (5, 6))

    test = [render(*pairs[i]) for i in order[:n_test]]
    train = [render(*pairs[i]) for i in order[n_test:]]
    return Splits(train, test)


def _unique_sequences(rng, n: int, length: int, n_symbols: int, draw) -> list[tuple[int, ...]]:
    seen: set = set()
    out = []
    cap = n_symbols ** length
    if n > cap:
        raise ValueError(f"cannot draw {n} distinct sequences from {cap}")
    while len(out) < n:
        s = tuple(int(v) for v in draw())
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def _seq2seq(spec: TaskSpec, rng: np.random.Generator) -> Splits:
    n = spec.n_train + spec.n_test
    seqs = _unique_sequences(rng, n, spec.seq_len, spec.n_symbols,
                             lambda: rng.integers(0, spec.n_symbols, spec.seq_len))
    cmd = _COMMANDS[spec.kind]

    def render(xs):
        ys = {"copy": list(xs), "reverse": list(xs[::-1]), "sort": sorted(xs)}[spec.kind]
        toks = (BOS, cmd, *map(value_token, xs), SEP, *map(value_token, ys), EOS)
        start = 3 + len(xs)
        return Example(toks, (start, start + len(ys)))

    ex = [render(s) for s in seqs]
    return Splits(ex[:spec.n_train], ex[spec.n_train:])


def markov_table(n_symbols: int, seed: int) -> np.ndarray:
    """Row-stochastic transition table with a few dominant successors per symbol."""
    rng = np.random.default_rng([seed, 7919])
    logits = rng.normal(0.0, 2.0, size=(n_symbols, n_symbols))
    t = np.exp(logits)
    return t / t.sum(1, keepdims=True)


def _lm(spec: TaskSpec, rng: np.random.Generator, seed: int) -> Splits:
    table = markov_table(spec.n_symbols, seed)
    cum = table.cumsum(1)

    def draw():
        out = [int(rng.integers(spec.n_symbols))]
        for _ in range(spec.seq_len - 1):
            nxt = int(np.searchsorted(cum[out[-1]], rng.random(), side="right"))
            out.append(min(nxt, spec.n_symbols - 1))
        return out

    seqs = _unique_sequences(rng, spec.n_train + spec.n_test, spec.seq_len, spec.n_symbols, draw)
    ex = [Example((BOS, LM_MARK, *map(value_token, s), EOS), (2, 2 + len(s))) for s in seqs]
    return Splits(ex[:spec.n_train], ex[spec.n_train:])


def generate(spec: TaskSpec, seed: int = 42) -> Splits:
    """Train/test splits as a pure function of (spec, seed); splits are disjoint."""
    rng = np.random.default_rng([seed, 104729])
    if spec.kind == "modular":
        splits = _modular(spec, rng)
    elif spec.kind == "lm":
        splits = _lm(spec, rng, seed)
    else:
        splits = _seq2seq(spec, rng)
    if len(splits.train) + len(splits.test) and max(max(e.tokens) for e in splits.train + splits.test) >= spec.vocab_size:
        raise ValueError("vocabulary overflow")
    if {e.tokens for e in splits.train} & {e.tokens for e in splits.test}:
        raise AssertionError("train/test splits overlap")
    return splits


def corpus_mixture(specs: Sequence[TaskSpec], weights: Sequence[float], seed: int = 42,
                   n_sequences: int = 10000) -> list[Example]:
    """Interleaved stream drawn from each spec's train split in the given proportions.

    Counts are allocated by largest remainder, so proportions are exact up to
    one sequence. Spec order does not matter: specs are canonicalized first.
    """
    if not specs:
        raise ValueError("empty spec list")
    if len(specs) != len(weights):
        raise ValueError("specs and weights differ in length")
    w = np.asarray(weights, dtype=float)
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    pairs = sorted(zip(specs, w), key=lambda sw: sw[0].key)
    specs = [s for s, _ in pairs]
    w = np.array([x for _, x in pairs])
    raw = w * n_sequences
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n_sequences - counts.sum()]:
        counts[i] += 1

    rng = np.random.default_rng([seed, 15485863])
    pools = []
    for i, (spec, c) in enumerate(zip(specs, counts)):
        train = generate(spec, seed).train
        picks = []
        while len(picks) < c:
            picks.extend(rng.permutation(len(train)).tolist())
        pools.append([train[j] for j in picks[:c]])
    labels = np.concatenate([np.full(c, i) for i, c in enumerate(counts)])
    labels = labels[rng.permutation(len(labels))]
    cursors = [0] * len(specs)
    stream = []
    for lab in labels:
        stream.append(pools[lab][cursors[lab]])
        cursors[lab] += 1
    return stream


def mixture_labels(stream: Iterable[Example]) -> list[int]:
    """Command/marker token of each sequence (position 1, or the op for arithmetic)."""
    return [e.tokens[2] if e.tokens[1] >= N_SPECIAL else e.tokens[1] for e in stream]


# ------------------------------------------------------------------ batching

def collate(examples: Sequence[Example], answer_only: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Next-token inputs, targets and loss weights, right-padded with PAD.

    With ``answer_only`` only positions predicting the answer region carry weight;
    otherwise every real (non-pad) next token does.
    """
    T = max(len(e.tokens) for e in examples) - 1
    B = len(examples)
    inp = np.full((B, T), PAD, dtype=np.int64)
    tgt = np.full((B, T), PAD, dtype=np.int64)
    w = np.zeros((B, T), dtype=np.float64)
    for i, e in enumerate(examples):
        t = np.asarray(e.tokens, dtype=np.int64)
        n = len(t) - 1
        inp[i, :n] = t[:-1]
        tgt[i, :n] = t[1:]
        if answer_only:
            s, end = e.answer
            w[i, s - 1:end - 1] = 1.0
        else:
            w[i, :n] = 1.0
    return inp, tgt, w


def dump_jsonl(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in examples:
            f.write(json.dumps({"tokens": list(e.tokens), "answer": list(e.answer)}) + "\n")


def load_jsonl(path) -> list[Example]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(Example(tuple(d["tokens"]), tuple(d["answer"])))
    return out
