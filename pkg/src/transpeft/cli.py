"""Command-line harness: one subcommand per protocol stage, each writing metrics and a manifest.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical divergence,
5 failed ``protocol --assert``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import autograd as ag
from .config import ConfigError, ExperimentConfig, load, parse
from .model import CheckpointError, TransformerModel, load_checkpoint, save_checkpoint
from .peft import load_peft, save_peft, transfer
from .strategies import TransPeftConfig
from .tasks import corpus_mixture, generate
from .training import (ARMS, TrainingDiverged, UpdatePair, compare_arms, continual_update, evaluate_task,
                       finetune_peft, paired_ttest, pretrain, run_seed)

OUTPUT_ROOT_ENV = "TRANSPEFT_OUTPUT_ROOT"
EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_ASSERT = 2, 3, 4, 5
METRICS = "metrics.json"
MANIFEST = "manifest.json"

log = logging.getLogger("transpeft")


class MissingArtifact(FileNotFoundError):
    pass


class AssertionFailed(RuntimeError):
    pass


# ------------------------------------------------------------------ io helpers

def dumps(obj) -> str:
    """Canonical JSON so identical metrics always serialize to identical bytes."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_text(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return write_text(path, buf.getvalue())


def file_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing artifact: {p}")
    return p


def _model(path) -> TransformerModel:
    return load_checkpoint(_need(path))


class Run:
    """Collects written files for one subcommand invocation and emits its manifest."""

    def __init__(self, name: str, out: Path, cfg: ExperimentConfig, args: dict):
        self.name, self.out, self.cfg, self.args = name, out, cfg, args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.metric_files: list[str] = []
        self.failure: Exception | None = None  # raised after the manifest is written
        self.t0 = time.time()

    def input(self, path) -> Path:
        p = _need(path)
        self.inputs[str(p.resolve())] = file_sha(p)
        return p

    def metric(self, rel: str, obj) -> None:
        self.outputs[rel] = write_text(self.out / rel, dumps(obj))
        self.metric_files.append(rel)

    def csv(self, rel: str, header, rows) -> None:
        self.outputs[rel] = write_csv(self.out / rel, header, rows)
        self.metric_files.append(rel)

    def artifact(self, rel: str, sha: str) -> None:
        self.outputs[rel] = sha

    def finish(self) -> dict:
        manifest = {"subcommand": self.name, "args": self.args, "config_ini": self.cfg.to_ini(),
                    "config": self.cfg.to_dict(), "inputs": self.inputs, "outputs": self.outputs,
                    "metric_files": sorted(self.metric_files), "version": __version__,
                    "precision": ag.get_precision(),
                    "wall_clock_seconds": time.time() - self.t0}
        write_text(self.out / MANIFEST, dumps(manifest))
        return manifest


# ------------------------------------------------------------------ stages

def _task_splits(cfg: ExperimentConfig):
    return generate(cfg.task, cfg.run.task_seed)


def cmd_pretrain(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    corpus = corpus_mixture(cfg.pretrain_corpus.specs(), cfg.pretrain_corpus.weights(),
                            cfg.pretrain_corpus.corpus_seed, cfg.pretrain_corpus.n_sequences)
    init = TransformerModel.init(cfg.model, cfg.pretrain.model_seed)
    m0, info = pretrain(init, corpus, cfg.optimizer_pretrain, dump_dir=run.out)
    run.artifact("m0.ckpt", save_checkpoint(m0, run.out / "m0.ckpt"))
    run.metric(METRICS, {"pretrain": info, "corpus": cfg.pretrain_corpus.describe()})


def cmd_update(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    m0 = load_checkpoint(run.input(a["m0"]))
    corpus = corpus_mixture(cfg.update_corpus.specs(), cfg.update_corpus.weights(),
                            cfg.update_corpus.corpus_seed, cfg.update_corpus.n_sequences)
    m1, info = continual_update(m0, corpus, cfg.optimizer_update, cfg.update.mode,
                                cfg.update.attention_lr_scale, dump_dir=run.out)
    from .analysis import weight_shift
    run.artifact("m1.ckpt", save_checkpoint(m1, run.out / "m1.ckpt"))
    run.metric(METRICS, {"update": info, "weight_shift": weight_shift(m0, m1).to_dict(),
                         "corpus": cfg.update_corpus.describe()})


def _strategy(cfg: ExperimentConfig, use: bool) -> TransPeftConfig | None:
    return cfg.transpeft if use and cfg.transpeft.active else None


def cmd_finetune(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    base = load_checkpoint(run.input(a["base"]))
    splits = _task_splits(cfg)
    seed = a["seed"]
    opt = replace(cfg.optimizer_finetune, seed=seed)
    tp = _strategy(cfg, a["transpeft"])
    state, info = finetune_peft(base, splits.train, cfg.peft, opt, tp, init_seed=seed, dump_dir=run.out)
    run.artifact("adapter.peft", save_peft(state, run.out / "adapter.peft"))
    ev = evaluate_task(base, splits.test, state)
    run.metric(METRICS, {"train": info, "eval": ev, "seed": seed,
                         "transpeft": tp.to_dict() if tp else None, "base_fingerprint": base.fingerprint})


def cmd_transfer_eval(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    state = load_peft(run.input(a["peft"]))
    target = load_checkpoint(run.input(a["target"]))
    before = state.to_bytes()
    binding, record = transfer(state, target)
    ev = evaluate_task(target, _task_splits(cfg).test, binding)
    record["peft_unchanged"] = state.to_bytes() == before
    run.metric(METRICS, {"eval": ev, "transfer": record})


def _pair(run: Run, a: dict) -> UpdatePair:
    m0 = load_checkpoint(run.input(a["m0"]))
    m1 = load_checkpoint(run.input(a["m1"]))
    from .analysis import weight_shift
    ws = weight_shift(m0, m1)
    return UpdatePair(m0, m1, eps_att=ws.eps_att, rho=ws.rho)


def _fan_out(fn, jobs_args: list, jobs: int) -> list:
    if jobs > 1 and len(jobs_args) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(min(jobs, len(jobs_args))) as ex:
            return list(ex.map(fn, jobs_args))
    return [fn(x) for x in jobs_args]


def _protocol_worker(job) -> list[dict]:
    """One seed of the protocol; writes its own subdirectory and returns metric rows."""
    pair, splits, cfg, tp, arms, seed, subdir = job
    results = run_seed(pair, splits.train, splits.test, cfg.peft, cfg.optimizer_finetune, tp, arms, seed,
                       cfg.task.kind)
    subdir = Path(subdir)
    rows = []
    for r in results:
        if r.arm != "direct_transfer":  # direct transfer reuses the finetune_o state
            save_peft(r.state, subdir / f"{r.arm}.peft")
        rows.append(r.row())
    write_text(subdir / METRICS, dumps({"seed": seed, "rows": rows}))
    return rows


def _aggregate(rows: list[dict]) -> dict:
    out: dict[str, dict] = {}
    for arm in dict.fromkeys(r["arm"] for r in rows):
        acc = [r["accuracy"] for r in rows if r["arm"] == arm]
        loss = [r["loss"] for r in rows if r["arm"] == arm]
        out[arm] = {"mean_accuracy": float(np.mean(acc)), "std_accuracy": float(np.std(acc)),
                    "mean_loss": float(np.mean(loss)), "n_seeds": len(acc)}
    return out


def _pvalues(rows: list[dict]) -> dict:
    from .training import ArmResult
    return compare_arms([ArmResult(r["arm"], r["seed"], r["task"], r["loss"], r["accuracy"]) for r in rows])


def protocol_verdict(metrics: dict, alpha: float = 0.05, recovery: float = 0.5) -> dict:
    """Acceptance checks on a protocol run: significance and gap recovery."""
    agg, pv = metrics["aggregate"], metrics["pvalues"]
    out: dict[str, Any] = {}
    if {"trans_peft", "direct_transfer"} <= set(agg):
        tp, dt = agg["trans_peft"]["mean_accuracy"], agg["direct_transfer"]["mean_accuracy"]
        p = pv.get("trans_peft_vs_direct_transfer")
        out["trans_peft_beats_direct"] = bool(tp > dt and p is not None and p < alpha)
        if "finetune_n" in agg:
            gap = agg["finetune_n"]["mean_accuracy"] - dt
            out["gap_recovered"] = (tp - dt) / gap if gap > 0 else None
            out["recovers_half_gap"] = bool(gap > 0 and (tp - dt) >= recovery * gap)
    out["passed"] = bool(out) and all(v for k, v in out.items() if isinstance(v, bool))
    return out


def cmd_protocol(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    pair = _pair(run, a)
    splits = _task_splits(cfg)
    arms = tuple(a["arms"])
    tp = cfg.transpeft if "trans_peft" in arms else None
    jobs = [(pair, splits, cfg, tp, arms, s, str(run.out / f"seed_{s}")) for s in cfg.run.seeds]
    rows = [r for rs in _fan_out(_protocol_worker, jobs, a["jobs"]) for r in rs]
    for s in cfg.run.seeds:
        run.outputs[f"seed_{s}/{METRICS}"] = file_sha(run.out / f"seed_{s}" / METRICS)
    metrics = {"rows": rows, "aggregate": _aggregate(rows), "pvalues": _pvalues(rows),
               "pair": pair.describe(), "arms": list(arms), "seeds": list(cfg.run.seeds)}
    metrics["verdict"] = protocol_verdict(metrics)
    run.metric(METRICS, metrics)
    run.csv("aggregate.csv", ["arm", "seed", "task", "loss", "accuracy"],
            [[r["arm"], r["seed"], r["task"], r["loss"], r["accuracy"]] for r in rows])
    if a["assert"] and not metrics["verdict"]["passed"]:
        run.failure = AssertionFailed(f"protocol acceptance failed: {metrics['verdict']}")


def _sweep_worker(job) -> dict:
    pair, splits, cfg, tp, seed = job
    opt = replace(cfg.optimizer_finetune, seed=seed)
    state, _ = finetune_peft(pair.m0, splits.train, cfg.peft, opt, tp if tp.active else None, init_seed=seed)
    ev = evaluate_task(pair.m1, splits.test, state)
    return {"p_i": tp.p_i, "p_c": tp.p_c, "apply_site": tp.apply_site, "seed": seed,
            "loss": ev["loss"], "accuracy": ev["accuracy"]}


def sweep_grid(cfg: ExperimentConfig, axis: str) -> list[TransPeftConfig]:
    base = cfg.transpeft
    if axis == "p_c":
        return [replace(base, p_c=p, p_i=0.0, apply_site="ffn") for p in cfg.sweep.p_c]
    if axis == "p_i":
        return [replace(base, p_i=p, p_c=0.0, apply_site="ffn") for p in cfg.sweep.p_i]
    return [replace(base, p_i=pi, p_c=pc, apply_site="ffn") for pi in cfg.sweep.p_i for pc in cfg.sweep.p_c]


def _summarize(rows: list[dict], key) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault(key(r), []).append(r)
    return [{"setting": list(k) if isinstance(k, tuple) else k,
             "mean_accuracy": float(np.mean([r["accuracy"] for r in g])),
             "seeds": [r["seed"] for r in g]} for k, g in groups.items()]


def cmd_sweep(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    pair = _pair(run, a)
    splits = _task_splits(cfg)
    if a["ablation"]:
        off = replace(cfg.transpeft, p_i=0.0, p_c=0.0)
        settings = [("direct_transfer", off), ("ffn", replace(cfg.transpeft, apply_site="ffn")),
                    ("attention", replace(cfg.transpeft, apply_site="attention"))]
        jobs = [(pair, splits, cfg, tp, s) for _, tp in settings for s in cfg.run.seeds]
        res = _fan_out(_sweep_worker, jobs, a["jobs"])
        rows = []
        for (name, _), chunk in zip(settings, [res[i:i + len(cfg.run.seeds)]
                                               for i in range(0, len(res), len(cfg.run.seeds))]):
            rows.extend({**r, "setting": name} for r in chunk)
        by = {name: {r["seed"]: r["accuracy"] for r in rows if r["setting"] == name} for name, _ in settings}
        seeds = list(cfg.run.seeds)
        pvals = {f"{name}_vs_direct_transfer": paired_ttest([by[name][s] for s in seeds],
                                                            [by["direct_transfer"][s] for s in seeds])
                 for name in ("ffn", "attention")}
        run.csv("fig8_ablation.csv", ["setting", "p_i", "p_c", "seed", "loss", "accuracy"],
                [[r["setting"], r["p_i"], r["p_c"], r["seed"], r["loss"], r["accuracy"]] for r in rows])
        run.metric(METRICS, {"rows": rows, "pvalues": pvals,
                             "summary": _summarize(rows, lambda r: r["setting"])})
        return
    grid = sweep_grid(cfg, a["axis"])
    jobs = [(pair, splits, cfg, tp, s) for tp in grid for s in cfg.run.seeds]
    rows = _fan_out(_sweep_worker, jobs, a["jobs"])
    run.csv("fig6_sweep.csv", ["p_i", "p_c", "seed", "loss", "accuracy"],
            [[r["p_i"], r["p_c"], r["seed"], r["loss"], r["accuracy"]] for r in rows])
    run.metric(METRICS, {"axis": a["axis"], "rows": rows,
                         "summary": _summarize(rows, lambda r: (r["p_i"], r["p_c"]))})


def _probe(cfg: ExperimentConfig):
    test = _task_splits(cfg).test
    rng = np.random.default_rng(cfg.run.probe_seed)
    n = min(cfg.run.probe_size, len(test))
    return [test[i] for i in sorted(rng.choice(len(test), n, replace=False))]


def _peft_or_train(run: Run, path, model, cfg, seed, tp=None):
    if path:
        return load_peft(run.input(path))
    splits = _task_splits(cfg)
    state, _ = finetune_peft(model, splits.train, cfg.peft, replace(cfg.optimizer_finetune, seed=seed), tp,
                             init_seed=seed)
    return state


def cmd_analyze(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    from . import analysis as an
    pair = _pair(run, a)
    seed = a["seed"]
    p0 = _peft_or_train(run, a.get("peft0"), pair.m0, cfg, seed)
    p1 = _peft_or_train(run, a.get("peft1"), pair.m1, cfg, seed)
    probe = _probe(cfg)
    t0, t1 = an.record_activations(pair.m0, p0, probe), an.record_activations(pair.m1, p1, probe)
    sim = an.compare_distributions(t0, t1)
    inf0, inf1 = an.layer_influence(pair.m0, p0, probe), an.layer_influence(pair.m1, p1, probe)
    shift = an.weight_shift(pair.m0, pair.m1)
    L = pair.m0.config.n_layers
    run.csv("fig1_attn_similarity.csv", ["layer", "pearson", "overlap"],
            [[i, sim["attention"]["pearson"][i], sim["attention"]["overlap"][i]] for i in range(L)])
    run.csv("fig2_ffn_similarity.csv", ["layer", "pearson", "overlap"],
            [[i, sim["ffn_intermediate"]["pearson"][i], sim["ffn_intermediate"]["overlap"][i]]
             for i in range(L)])
    run.csv("fig3_influence.csv", ["layer", "influence_m0", "influence_m1"],
            [[i, inf0.values[i], inf1.values[i]] for i in range(L)])
    run.metric(METRICS, {"similarity": sim, "influence_m0": inf0.values, "influence_m1": inf1.values,
                         "sign_agreement": inf0.sign_agreement(inf1), "weight_shift": shift.to_dict(),
                         "probe_digest": t0.probe_digest, "seed": seed})


def cmd_bound_report(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    from . import analysis as an
    pair = _pair(run, a)
    seed = a["seed"]
    tp = cfg.transpeft
    p0 = _peft_or_train(run, a.get("peft0"), pair.m0, cfg, seed, tp if tp.active else None)
    p1 = _peft_or_train(run, a.get("peft1"), pair.m1, cfg, seed)
    splits = _task_splits(cfg)
    probe = _probe(cfg)[: a["perturbation_probe"]]
    rep = an.bound_report(p0, p1, pair.m0, pair.m1, splits.test, tp, probe, cfg.run.draws)
    run.metric(METRICS, rep.to_dict())


def cmd_report(cfg: ExperimentConfig, run: Run, a: dict) -> None:
    """Collect every protocol metrics file under a directory into one table."""
    root = _need(a["root"])
    rows, sources = [], []
    for path in sorted(root.rglob(METRICS)):
        data = json.loads(path.read_text())
        if "aggregate" in data and "rows" in data and "pvalues" in data:
            rel = str(path.relative_to(root))
            run.input(path)
            sources.append(rel)
            rows.extend({**r, "source": rel} for r in data["rows"])
    if not rows:
        raise MissingArtifact(f"no protocol metrics under {root}")
    run.csv("aggregate.csv", ["source", "arm", "seed", "task", "loss", "accuracy"],
            [[r["source"], r["arm"], r["seed"], r["task"], r["loss"], r["accuracy"]] for r in rows])
    run.metric(METRICS, {"sources": sources, "aggregate": _aggregate(rows), "pvalues": _pvalues(rows)})


COMMANDS = {"pretrain": cmd_pretrain, "update": cmd_update, "finetune": cmd_finetune,
            "transfer-eval": cmd_transfer_eval, "protocol": cmd_protocol, "sweep": cmd_sweep,
            "analyze": cmd_analyze, "bound-report": cmd_bound_report, "report": cmd_report}


# ------------------------------------------------------------------ argument handling

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="transpeft", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable; wins over the file)")
        p.add_argument("--out", help=f"output directory (else ${OUTPUT_ROOT_ENV}/<command>, else run.output_dir)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for seeds and sweeps")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("pretrain", help="train M0 on the pretraining mixture"))
    p = common(sub.add_parser("update", help="continual update M0 -> M1"))
    p.add_argument("--m0", required=True)
    p = common(sub.add_parser("finetune", help="fine-tune a PEFT module on one base"))
    p.add_argument("--base", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--transpeft", action="store_true", help="apply the [transpeft] strategies")
    p = common(sub.add_parser("transfer-eval", help="attach a trained PEFT file to another base and evaluate"))
    p.add_argument("--peft", required=True)
    p.add_argument("--target", required=True)
    for name, text in (("protocol", "run the four protocol arms over the configured seeds"),
                       ("sweep", "grid over p_c / p_i, or the attention-site ablation"),
                       ("analyze", "activation similarity, layer influence and weight shift"),
                       ("bound-report", "measured terms of the transfer loss bound")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--m0", required=True)
        p.add_argument("--m1", required=True)
        if name == "protocol":
            p.add_argument("--arms", default=",".join(ARMS))
            p.add_argument("--assert", dest="assert_", action="store_true",
                           help="exit 5 unless Trans-PEFT beats Direct Transfer and recovers half the gap")
        if name == "sweep":
            p.add_argument("--axis", choices=("p_c", "p_i", "grid"), default="p_c")
            p.add_argument("--ablation", action="store_true", help="compare apply_site ffn vs attention")
        if name in ("analyze", "bound-report"):
            p.add_argument("--seed", type=int, default=42)
            p.add_argument("--peft0", help="PEFT trained on M0 (trained here if omitted)")
            p.add_argument("--peft1", help="PEFT trained on M1 (trained here if omitted)")
        if name == "bound-report":
            p.add_argument("--perturbation-probe", type=int, default=16,
                           help="probe sequences used for the Monte-Carlo perturbation statistics")
    p = common(sub.add_parser("report", help="aggregate protocol metrics under a directory"))
    p.add_argument("--root", required=True)
    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for it in items:
        k, sep, v = it.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {it!r}")
        out[k.strip()] = v.strip()
    return out


def _stage_args(ns: argparse.Namespace) -> dict:
    """Subcommand arguments recorded in the manifest (paths made absolute)."""
    skip = {"command", "config", "set", "out", "verbose", "jobs"}
    a = {}
    for k, v in vars(ns).items():
        if k in skip:
            continue
        k = "assert" if k == "assert_" else k
        if k in ("m0", "m1", "base", "peft", "target", "peft0", "peft1", "root") and v:
            v = str(Path(v).resolve())
        if k == "arms":
            v = [x.strip() for x in v.split(",") if x.strip()]
            bad = set(v) - set(ARMS)
            if bad:
                raise ConfigError(f"unknown arms {sorted(bad)}")
        a[k] = v
    return a


def _out_dir(ns, cfg: ExperimentConfig) -> Path:
    if getattr(ns, "out", None):
        return Path(ns.out)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    root = Path(env) if env else Path(cfg.run.output_dir)
    return root / ns.command


def execute(command: str, cfg: ExperimentConfig, stage_args: dict, out: Path, jobs: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    run = Run(command, out, cfg, stage_args)
    COMMANDS[command](cfg, run, {**stage_args, "jobs": jobs})
    manifest = run.finish()
    if run.failure is not None:
        raise run.failure
    return manifest


def rerun(manifest_path, out: Path, jobs: int = 1) -> dict:
    m = json.loads(_need(manifest_path).read_text())
    cfg = parse(m["config_ini"])
    for path, sha in m["inputs"].items():
        if file_sha(_need(path)) != sha:
            raise CheckpointError(f"input {path} changed since the manifest was written")
    return execute(m["subcommand"], cfg, m["args"], out, jobs)


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "rerun":
            manifest = rerun(ns.manifest, Path(ns.out), ns.jobs)
        else:
            cfg = load(ns.config, _overrides(ns.set)) if ns.config else parse("", _overrides(ns.set))
            manifest = execute(ns.command, cfg, _stage_args(ns), _out_dir(ns, cfg), ns.jobs)
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as e:
        print(f"error[missing-artifact]: {e}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as e:
        print(f"error[diverged]: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except AssertionFailed as e:
        print(f"error[assertion]: {e}", file=sys.stderr)
        return EXIT_ASSERT
    print(json.dumps({"subcommand": manifest["subcommand"], "outputs": sorted(manifest["outputs"])}))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
