import csv
import json
from pathlib import Path

import numpy as np
import pytest

from transpeft.analysis import loss_discrepancy
from transpeft.cli import EXIT_ASSERT, EXIT_CONFIG, EXIT_MISSING, main
from transpeft.config import load
from transpeft.model import load_checkpoint
from transpeft.peft import load_peft
from transpeft.tasks import generate

TINY = str(Path(__file__).parent / "data" / "tiny.ini")


def run(*argv):
    return main([*argv, "--config", TINY]) if argv[0] != "rerun" else main(list(argv))


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("pretrain", "--out", str(root / "pre")) == 0
    assert run("update", "--m0", str(root / "pre/m0.ckpt"), "--out", str(root / "upd")) == 0
    return root


def pair(world):
    return ["--m0", str(world / "pre/m0.ckpt"), "--m1", str(world / "upd/m1.ckpt")]


def metrics(d):
    return json.loads((Path(d) / "metrics.json").read_text())


def test_manifest_contents(world):
    man = json.loads((world / "upd/manifest.json").read_text())
    assert man["subcommand"] == "update" and "m1.ckpt" in man["outputs"]
    assert any(k.endswith("m0.ckpt") for k in man["inputs"])
    assert "[optimizer.update]" in man["config_ini"]
    assert metrics(world / "upd")["update"]["mode"] == "controlled"


def test_finetune_and_transfer(world):
    assert run("finetune", "--base", str(world / "pre/m0.ckpt"), "--transpeft", "--out", str(world / "ft")) == 0
    assert metrics(world / "ft")["transpeft"]["p_c"] == 0.2
    assert run("transfer-eval", "--peft", str(world / "ft/adapter.peft"), "--target", str(world / "upd/m1.ckpt"),
               "--out", str(world / "te")) == 0
    m = metrics(world / "te")
    assert m["transfer"]["peft_unchanged"] and 0.0 <= m["eval"]["accuracy"] <= 1.0


def test_protocol_rows_and_assert(world):
    out = world / "proto"
    code = run("protocol", *pair(world), "--out", str(out), "--assert")
    m = metrics(out)
    assert code == (0 if m["verdict"]["passed"] else EXIT_ASSERT)
    assert len(m["rows"]) == 4 * 2
    with open(out / "aggregate.csv") as f:
        assert len(list(csv.DictReader(f))) == 8
    assert (out / "seed_42" / "trans_peft.peft").exists()


def test_sweep_csv(world):
    assert run("sweep", *pair(world), "--axis", "grid", "--out", str(world / "grid")) == 0
    with open(world / "grid" / "fig6_sweep.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 * 2 * 2
    assert {(r["p_i"], r["p_c"]) for r in rows} == {(a, b) for a in ("0.0", "0.1") for b in ("0.0", "0.2")}
    assert run("sweep", *pair(world), "--ablation", "--out", str(world / "abl")) == 0
    assert set(metrics(world / "abl")["pvalues"]) == {"ffn_vs_direct_transfer", "attention_vs_direct_transfer"}


def test_analyze_outputs(world):
    assert run("analyze", *pair(world), "--out", str(world / "an")) == 0
    m = metrics(world / "an")
    assert len(m["similarity"]["attention"]["pearson"]) == 2 and 0.0 <= m["sign_agreement"] <= 1.0
    for f in ("fig1_attn_similarity.csv", "fig2_ffn_similarity.csv", "fig3_influence.csv"):
        assert (world / "an" / f).exists()


def test_bound_report_matches_standalone(world):
    assert run("finetune", "--base", str(world / "pre/m0.ckpt"), "--transpeft", "--out", str(world / "p0")) == 0
    assert run("finetune", "--base", str(world / "upd/m1.ckpt"), "--out", str(world / "p1")) == 0
    assert run("bound-report", *pair(world), "--peft0", str(world / "p0/adapter.peft"),
               "--peft1", str(world / "p1/adapter.peft"), "--out", str(world / "br")) == 0
    rep = metrics(world / "br")
    cfg = load(TINY)
    ref = loss_discrepancy(load_peft(world / "p0/adapter.peft"), load_checkpoint(world / "pre/m0.ckpt"),
                           load_checkpoint(world / "upd/m1.ckpt"), generate(cfg.task, cfg.run.task_seed).test)
    assert rep["discrepancy"] == pytest.approx(ref["discrepancy"], abs=1e-12)
    assert rep["perturbation"]["combined"]["draws"] == 1000


def test_rerun_is_byte_identical(world):
    for name in ("upd", "proto", "br"):
        src = world / name
        if not (src / "manifest.json").exists():
            pytest.skip("depends on earlier tests")
        dst = world / f"re_{name}"
        # a failed protocol --assert is reproduced too, after its files are written
        expected = EXIT_ASSERT if name == "proto" and not metrics(src)["verdict"]["passed"] else 0
        assert run("rerun", str(src / "manifest.json"), "--out", str(dst)) == expected
        for f in json.loads((src / "manifest.json").read_text())["metric_files"]:
            assert (src / f).read_bytes() == (dst / f).read_bytes(), f


def test_report_collects_protocols(world):
    if not (world / "proto" / "metrics.json").exists():
        pytest.skip("depends on the protocol test")
    assert run("report", "--root", str(world / "proto"), "--out", str(world / "rep")) == 0
    assert metrics(world / "rep")["sources"] == ["metrics.json"]


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["pretrain", "--set", "model.width=3", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["pretrain", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG
    assert run("update", "--m0", str(tmp_path / "absent.ckpt"), "--out", str(tmp_path / "u")) == EXIT_MISSING
    assert "error[missing-artifact]" in capsys.readouterr().err
    assert run("protocol", "--m0", "a", "--m1", "b", "--arms", "bogus") == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_exit_code(tmp_path):
    code = run("pretrain", "--set", "optimizer.pretrain.lr=1e30", "--set", "optimizer.pretrain.grad_clip=1e30",
               "--set", "optimizer.pretrain.steps=30", "--out", str(tmp_path))
    assert code == 4
    assert (tmp_path / "diverged_state.npz").exists()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("TRANSPEFT_OUTPUT_ROOT", str(tmp_path))
    assert run("pretrain", "--set", "optimizer.pretrain.steps=1") == 0
    assert (tmp_path / "pretrain" / "m0.ckpt").exists()
