import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import hypergeom

from transpeft import autograd as ag
from transpeft.analysis import (ActivationTrace, compare_distributions, layer_influence, loss_discrepancy,
                                mean_loss, parameter_deviation, power_iteration, probe_digest,
                                record_activations, top_k_overlap, weight_shift, bound_report)
from transpeft.model import ArchitectureMismatch, ModelConfig, TransformerModel
from transpeft.peft import PeftConfig, init_peft
from transpeft.strategies import TransPeftConfig
from transpeft.tasks import TaskSpec, collate, generate
from conftest import SMALL


@pytest.fixture(scope="module")
def probe():
    return generate(TaskSpec(kind="modular", modulus=11)).train[:40]


@pytest.fixture(scope="module")
def base():
    return TransformerModel.init(SMALL, seed=2)


def test_power_iteration_matches_svd():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=(4, 4))
        assert power_iteration(a, iters=200, tol=1e-12) == pytest.approx(np.linalg.svd(a, compute_uv=False)[0], rel=1e-6)
    assert power_iteration(np.zeros((3, 3))) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_spectral_below_frobenius(m, n, seed):
    a = np.random.default_rng(seed).normal(size=(m, n))
    assert power_iteration(a) <= np.linalg.norm(a) * (1 + 1e-9)
    r1 = np.outer(a[:, 0], a[0])
    assert power_iteration(r1) == pytest.approx(np.linalg.norm(r1), rel=1e-9)


def test_weight_shift_identity_and_known_shift(base):
    rep = weight_shift(base, base.copy())
    assert rep.eps_att == 0.0 and rep.rho == 0.0
    m1 = base.copy()
    m1.params["layers.1.attn.query"].data += np.float32(0.01) * np.eye(SMALL.d_model, dtype=np.float32)
    fc1 = m1.params["layers.0.ffn.fc1"].data
    fc1[:, :SMALL.d_model] += np.float32(0.03) * np.eye(SMALL.d_model, dtype=np.float32)
    rep = weight_shift(base, m1)
    assert rep.eps_att == pytest.approx(0.01, rel=1e-4)
    assert rep.rho == pytest.approx(0.03, rel=1e-4)
    assert rep.attention_spectral[0] == 0.0 and rep.ffn_spectral[1] == 0.0
    with pytest.raises(ArchitectureMismatch):
        weight_shift(base, TransformerModel.init(ModelConfig(n_layers=3, d_model=16, d_ff=32, n_heads=2, max_seq_len=16)))


def test_activation_similarity_identity(base, probe):
    ta = record_activations(base, None, probe)
    cmp = compare_distributions(ta, record_activations(base, None, probe))
    for s in ("attention", "ffn_intermediate"):
        assert cmp[s]["mean_pearson"] == pytest.approx(1.0) and cmp[s]["mean_overlap"] == 1.0
    assert len(ta.mean_abs["ffn_intermediate"][0]) == SMALL.d_ff


def test_activation_similarity_symmetric(base, probe):
    m1 = base.copy()
    m1.params["layers.0.ffn.fc1"].data += np.random.default_rng(0).normal(0, 0.05, size=(16, 32)).astype(np.float32)
    ta, tb = record_activations(base, None, probe), record_activations(m1, None, probe)
    ab, ba = compare_distributions(ta, tb), compare_distributions(tb, ta)
    for s in ab:
        assert ab[s]["pearson"] == pytest.approx(ba[s]["pearson"])
        assert ab[s]["overlap"] == ba[s]["overlap"]


def test_activation_errors(base, probe):
    with pytest.raises(ValueError):
        record_activations(base, None, [])
    bad = [probe[0]._replace(tokens=(1, 70, 2))]
    with pytest.raises(IndexError):
        record_activations(base, None, bad)
    ta = record_activations(base, None, probe)
    with pytest.raises(ValueError, match="probe"):
        compare_distributions(ta, record_activations(base, None, probe[:10]))
    wide = ActivationTrace(ta.probe_digest, {"attention": ta.mean_abs["attention"],
                                             "ffn_intermediate": [np.ones(64)] * 2})
    with pytest.raises(ValueError, match="dimension"):
        compare_distributions(ta, wide)


def test_overlap_of_permuted_profiles_is_at_chance():
    n, k, trials = 256, 16, 4000
    rng = np.random.default_rng(0)
    a = rng.random(n)
    vals = [top_k_overlap(a, rng.permutation(a), k) for _ in range(trials)]
    # the overlap count is hypergeometric(n, k, k)
    mean, var = hypergeom.stats(n, k, k)
    assert abs(np.mean(vals) * k - mean) <= 4 * np.sqrt(var / trials)


def test_layer_influence_drop_and_sign(base, probe):
    li = layer_influence(base, None, probe)
    dropped = layer_influence(base, None, probe, force_drop=(0, 1))
    assert dropped.values == [0.0, 0.0]
    assert li.sign_agreement(li) == 1.0
    assert li.sign_agreement(type(li)([-v for v in li.values])) == 0.0


def test_loss_discrepancy_zero_for_same_model(base, probe):
    assert loss_discrepancy(None, base, base.copy(), probe)["discrepancy"] == 0.0


def _independent_loss(model, examples):
    # per-example cross-entropy through the autograd graph, averaged over answer tokens
    tot = n = 0.0
    with ag.precision("float64"):
        m = model.astype("float64")
        for e in examples:
            inp, tgt, w = collate([e], answer_only=True)
            logits = m(inp).data
            for t in np.flatnonzero(w.reshape(-1)):
                row = logits[t]
                tot += np.logaddexp.reduce(row) - row[tgt.reshape(-1)[t]]
                n += 1
    return tot / n


def test_loss_discrepancy_matches_recompute(base, probe):
    m1 = base.copy()
    m1.params["layers.1.ffn.fc2"].data += np.float32(0.1)
    got = loss_discrepancy(None, base, m1, probe)
    ref = abs(_independent_loss(m1, probe) - _independent_loss(base, probe))
    assert got["discrepancy"] > 0
    assert got["discrepancy"] == pytest.approx(ref, abs=1e-6)
    assert mean_loss(base, None, probe) == pytest.approx(_independent_loss(base, probe), abs=1e-6)


def test_parameter_deviation():
    a = init_peft(PeftConfig(rank=2), SMALL, seed=0)
    assert parameter_deviation(a, a.copy()) == {"ffn": 0.0, "attention": 0.0}
    b = a.copy()
    b.blocks[(0, "fc1")][1].data[0, 0] += 0.1
    dev = parameter_deviation(a, b)
    assert dev["ffn"] == pytest.approx(0.1, rel=1e-6) and dev["attention"] == 0.0
    with pytest.raises(ValueError):
        parameter_deviation(a, init_peft(PeftConfig(rank=4), SMALL))


def test_bound_report_identity(base, probe):
    peft = init_peft(PeftConfig(rank=2), SMALL)
    rep = bound_report(peft, peft.copy(), base, base.copy(), probe[:8], TransPeftConfig(p_c=0.2), probe[:4])
    d = rep.to_dict()
    assert d["discrepancy"] == 0.0 and d["eps_att"] == 0.0 and d["parameter_deviation"] == 0.0
    assert "lambda_max" in d["unestimated"] and d["perturbation"]["combined"]["mean_sq_norm"] > 0
    assert probe_digest(probe) != probe_digest(probe[:4])
