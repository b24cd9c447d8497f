import numpy as np
import pytest

from transpeft.model import TransformerModel
from transpeft.peft import PeftConfig
from transpeft.strategies import TransPeftConfig
from transpeft.tasks import Example, TaskSpec, corpus_mixture, generate
from transpeft.training import (ARMS, Optimizer, OptimizerConfig, UpdatePair, continual_update, evaluate_task,
                                finetune_peft, paired_ttest, pretrain, run_protocol, train_loop)
from conftest import SMALL

TASK = TaskSpec(kind="modular", modulus=7, style="qa")
PEFT = PeftConfig(rank=2)
OPT = OptimizerConfig(epochs=2, batch_size=8, lr=3e-3)


@pytest.fixture(scope="module")
def splits():
    return generate(TASK)


@pytest.fixture(scope="module")
def corpus():
    specs = [TaskSpec(kind="modular", modulus=7), TaskSpec(kind="copy", seq_len=3, n_symbols=8, n_train=60, n_test=6)]
    return corpus_mixture(specs, [0.6, 0.4], seed=0, n_sequences=160)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(algorithm="lbfgs")
    with pytest.raises(ValueError):
        OptimizerConfig(lr=0)


def test_sgd_step_matches_hand_update():
    from transpeft.autograd import Tensor
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.5, -1.0])
    Optimizer([p], OptimizerConfig(algorithm="sgd", lr=0.1, grad_clip=10.0)).step()
    np.testing.assert_allclose(p.data, [0.95, 2.1])
    assert p.grad is None


def test_zero_steps_is_identity(small_model, corpus):
    m, info = pretrain(small_model, corpus, OptimizerConfig(epochs=0))
    assert info["steps"] == 0 and m.fingerprint == small_model.fingerprint


def test_pretrain_is_deterministic_and_learns(small_model, corpus):
    cfg = OptimizerConfig(steps=30, batch_size=16, lr=3e-3)
    a, ia = pretrain(small_model, corpus, cfg)
    b, _ = pretrain(small_model, corpus, cfg)
    assert a.fingerprint == b.fingerprint != small_model.fingerprint
    assert ia["final_loss"] < ia["baseline_loss"]


def test_finetune_deterministic_and_off_equivalent(small_model, splits):
    a, _ = finetune_peft(small_model, splits.train, PEFT, OPT)
    b, _ = finetune_peft(small_model, splits.train, PEFT, OPT, TransPeftConfig())
    c, info = finetune_peft(small_model, splits.train, PEFT, OPT, TransPeftConfig(p_c=0.3))
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != c.to_bytes() and info["strategy_draws"] > 0
    assert a.source_fingerprint == small_model.fingerprint


def test_all_dropped_step_is_a_zero_gradient_step(small_model, splits):
    cfg = PeftConfig(targets=("fc1",), rank=2)
    st, info = finetune_peft(small_model, splits.train[:8], cfg, OptimizerConfig(steps=3, batch_size=8),
                             TransPeftConfig(p_c=0.99, strategy_seed=1))
    assert info["steps"] == 3


def test_chance_accuracy():
    rng = np.random.default_rng(0)
    m = TransformerModel.init(SMALL, seed=3)
    n = 6400
    exs = [Example((1, int(a), 11, int(b), 3, int(c), 2), (5, 6))
           for a, b, c in zip(rng.integers(16, 64, n), rng.integers(16, 64, n), rng.integers(0, 64, n))]
    acc = evaluate_task(m, exs)["accuracy"]
    p = 1 / 64
    assert abs(acc - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_controlled_update_suppresses_attention_drift(small_model, corpus):
    cfg = OptimizerConfig(steps=30, batch_size=16, lr=3e-3)
    _, nat = continual_update(small_model, corpus, cfg, "natural")
    _, ctl = continual_update(small_model, corpus, cfg, "controlled", attention_lr_scale=0.05)
    assert ctl["eps_att"] < 0.25 * nat["eps_att"]
    assert ctl["eps_att"] / ctl["rho"] < nat["eps_att"] / nat["rho"]
    with pytest.raises(ValueError):
        continual_update(small_model, corpus, cfg, "sideways")


def test_paired_ttest_edge_cases():
    assert paired_ttest([1, 2, 3], [1, 2, 3]) == 1.0
    assert paired_ttest([1], [0]) is None
    assert paired_ttest([1.0, 2.0, 3.0], [0.0, 1.0, 2.0]) == 0.0
    assert paired_ttest([0.9, 0.8, 0.85, 0.95], [0.1, 0.2, 0.1, 0.15]) < 0.01


def test_protocol_with_identical_versions(small_model, splits):
    pair = UpdatePair(small_model, small_model.copy())
    assert pair.identical
    res = run_protocol(pair, splits.train, splits.test[:40], PEFT, OPT, TransPeftConfig(p_c=0.2), seeds=(42, 1))
    assert res.accuracies("direct_transfer") == res.accuracies("finetune_o")
    assert res.accuracies("finetune_n") == res.accuracies("finetune_o")
    assert res.pvalues["finetune_o_vs_direct_transfer"] == 1.0
    assert set(res.aggregate()) == set(ARMS)
    assert all(r.target_fingerprint == small_model.fingerprint for r in res.results)


def test_protocol_parallel_matches_serial(small_model, splits):
    m1 = small_model.copy()
    m1.params["layers.0.ffn.fc1"].data += np.float32(0.05)
    pair = UpdatePair(small_model, m1)
    kw = dict(transpeft=TransPeftConfig(p_i=0.1), arms=("direct_transfer", "trans_peft"), seeds=(42, 1))
    a = run_protocol(pair, splits.train, splits.test[:40], PEFT, OPT, **kw)
    b = run_protocol(pair, splits.train, splits.test[:40], PEFT, OPT, jobs=2, **kw)
    assert a.rows() == b.rows()
    with pytest.raises(ValueError):
        run_protocol(pair, splits.train, splits.test, PEFT, OPT, arms=("bogus",))
    with pytest.raises(ValueError):
        run_protocol(pair, splits.train, splits.test, PEFT, OPT, arms=("trans_peft",), seeds=(1,))


def test_train_loop_rejects_gradient_into_frozen(small_model, splits):
    from transpeft.training import BaseWeightGradient
    small = small_model.copy()
    small.set_trainable(True)
    with pytest.raises(BaseWeightGradient):
        train_loop(small, splits.train[:8], OptimizerConfig(steps=1, batch_size=8), [small.params["head"]],
                   answer_only=True, frozen=[small.params["tok_emb"]])
