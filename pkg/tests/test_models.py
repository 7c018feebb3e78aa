import math

import numpy as np
import pytest

import _oracles as oracle
from enttrack import autodiff as ad
from enttrack import models
from enttrack.autodiff import Var
from enttrack.datagen import Datapoint, Exposure
from enttrack.entity_library import GateParams
from enttrack.models import Dims, StaleTraceError
from enttrack.numerics import DimensionError
from enttrack.training import random_small_datapoint

SMALL = Dims(v=4, t=4, t_c=4, m=8, hidden=16, n_exposures=4)


def small_dp(seed, dims=SMALL, k=3):
    return random_small_datapoint(np.random.default_rng(seed), dims, n_candidates=k)


def val(p):
    return {name: ad.value_of(v).copy() for name, v in p.named()}


def test_embed_exposure():
    dims = Dims(v=2, t=2, t_c=2, m=2)
    p = models.DireParams("dire-1m", dims, V=np.eye(2), A=np.eye(2), C=np.eye(2),
                          gate=GateParams(1.0, 0.0))
    u = models.embed_exposure(np.array([1.0, 0.0]), np.array([0.0, 1.0]), p)
    assert np.array_equal(u, [1.0, 1.0])
    u = models.embed_exposure(np.array([0.3, 0.7]), np.zeros(2), p)
    assert np.array_equal(u, [0.3, 0.7])
    p2 = models.DireParams("dire-1m", dims, V=np.array([[2.0, 0.0], [0.0, 2.0]]),
                           A=np.eye(2), C=np.eye(2), gate=GateParams(1.0, 0.0))
    assert np.array_equal(models.embed_exposure(np.array([1.0, 1.0]), np.array([1.0, 0.0]), p2),
                          [3.0, 2.0])
    with pytest.raises(DimensionError):
        models.embed_exposure(np.zeros(3), np.zeros(2), p)


def test_embed_query_symmetric_in_attributes():
    dims = Dims(v=2, t=2, t_c=2, m=2)
    p = models.DireParams("dire-1m", dims, V=np.eye(2), A=np.eye(2), C=np.eye(2),
                          gate=GateParams(1.0, 0.0))
    assert np.array_equal(
        models.embed_query(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.0, 1.0]), p),
        [1.0, 2.0])
    rng = np.random.default_rng(0)
    c, a1, a2 = rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(2)
    assert np.array_equal(models.embed_query(c, a1, a2, p), models.embed_query(c, a2, a1, p))
    assert np.array_equal(models.embed_query(c, np.zeros(2), np.zeros(2), p), c)


def test_score_candidates():
    dims = Dims(v=3, t=3, t_c=3, m=3)
    p = models.DireParams("dire-1m", dims, V=np.eye(3), A=np.eye(3), C=np.eye(3),
                          gate=GateParams(1.0, 0.0))
    cands = [np.eye(3)[i] for i in range(3)]
    dist = models.score_candidates(50.0 * np.eye(3)[2], cands, p)
    assert np.allclose(dist, [0.0, 0.0, 1.0], atol=1e-12)
    dist = models.score_candidates(np.zeros(3), cands, p)
    assert np.allclose(dist, np.full(3, 1 / 3), atol=1e-15)
    with pytest.raises(ValueError):
        models.score_candidates(np.zeros(3), [], p)


def test_uniform_distribution_loss_is_log6():
    # six candidates, all-equal scores: every slot gets 1/6 ~ the random baseline
    dims = Dims(v=3, t=3, t_c=3, m=3)
    p = models.init_params("dire-1m", dims, seed=0)
    p.V.value[...] = 0.0  # zero image map -> all candidate scores equal
    dp = random_small_datapoint(np.random.default_rng(0),
                                Dims(v=3, t=3, t_c=3, m=3, n_exposures=3), n_candidates=6)
    trace = models.forward(dp, p)
    assert np.allclose(trace.distribution, np.full(6, 1 / 6), atol=1e-12)
    assert trace.loss == pytest.approx(math.log(6.0), abs=1e-12)


def test_dire_forward_matches_oracle():
    for seed in range(100):
        dp = small_dp(seed)
        p = models.init_params("dire-1m", SMALL, seed=seed + 1)
        trace = models.forward(dp, models.eval_view(p))
        loss, dist, g, r = oracle.dire_loss(dp, **{
            "V": p.V.value, "A": p.A.value, "C": p.C.value,
            "w": float(p.gate.w.value), "b": float(p.gate.b.value)})
        assert abs(trace.loss - loss) <= 1e-9
        assert np.allclose(trace.distribution, dist, atol=1e-9)
        assert np.allclose(trace.attention, g, atol=1e-9)
        assert np.allclose(trace.retrieved, r, atol=1e-9)


def test_dire_2m_forward_matches_oracle():
    for seed in range(50):
        dp = small_dp(seed)
        p = models.init_params("dire-2m", SMALL, seed=seed + 1)
        trace = models.forward(dp, models.eval_view(p))
        loss, dist, _, _ = oracle.dire_loss(
            dp, V=p.V.value, A=p.A.value, C=p.C.value,
            w=float(p.gate.w.value), b=float(p.gate.b.value),
            V_out=p.V_out.value, A_out=p.A_out.value)
        assert abs(trace.loss - loss) <= 1e-9
        assert np.allclose(trace.distribution, dist, atol=1e-9)


def test_dire_query_probe_matches_oracle():
    for seed in range(20):
        dp = small_dp(seed)
        p = models.init_params("dire-1m", SMALL, seed=seed + 1, probe="query")
        trace = models.forward(dp, models.eval_view(p))
        loss, dist, _, _ = oracle.dire_loss(
            dp, V=p.V.value, A=p.A.value, C=p.C.value,
            w=float(p.gate.w.value), b=float(p.gate.b.value), probe="query")
        assert abs(trace.loss - loss) <= 1e-9


@pytest.mark.parametrize("variant", ["memn-1m-1h", "memn-1m-2h", "memn-1m-3h",
                                     "memn-2m-1h", "memn-2m-2h", "memn-2m-3h"])
def test_memn_forward_matches_oracle(variant):
    for seed in range(25):
        dp = small_dp(seed)
        p = models.init_params(variant, SMALL, seed=seed + 1)
        trace = models.forward(dp, models.eval_view(p))
        loss, dist = oracle.memn_loss(dp, p.V_in.value, p.A_in.value, p.C_in.value,
                                      p.V_out.value, p.A_out.value, p.C_out.value,
                                      hops=p.hops)
        assert abs(trace.loss - loss) <= 1e-9
        assert np.allclose(trace.distribution, dist, atol=1e-9)


def test_ff_forward_matches_oracle_and_hidden_range():
    for seed in range(25):
        dp = small_dp(seed)
        p = models.init_params("ff", SMALL, seed=seed + 1)
        trace = models.forward(dp, models.eval_view(p))
        L = {k: v.value for k, v in p.layers.items()}
        loss, dist = oracle.ff_loss(dp, p.V.value, p.A.value, p.C.value, **L)
        assert abs(trace.loss - loss) <= 1e-9
        assert np.allclose(trace.distribution, dist, atol=1e-9)
        for h in trace.hidden:
            assert np.all(h > 0) and np.all(h < 1)
        assert abs(trace.distribution.sum() - 1.0) <= 1e-12


def test_ff_zero_weights_give_uniform_distribution():
    p = models.init_params("ff", SMALL, seed=0)
    for _, v in p.named():
        v.value = np.zeros_like(v.value)
    trace = models.forward(small_dp(0), p)
    k = len(trace.distribution)
    assert np.allclose(trace.distribution, np.full(k, 1 / k), atol=1e-15)


def test_rnn_forward_matches_oracle():
    for seed in range(25):
        dp = small_dp(seed)
        p = models.init_params("rnn", SMALL, seed=seed + 1)
        trace = models.forward(dp, models.eval_view(p))
        L = {k: v.value for k, v in p.layers.items()}
        loss, dist = oracle.rnn_loss(dp, p.V.value, p.A.value, p.C.value, **L)
        assert abs(trace.loss - loss) <= 1e-9
        assert np.allclose(trace.distribution, dist, atol=1e-9)


def test_rnn_zero_weights_ignore_exposures():
    p = models.init_params("rnn", SMALL, seed=0)
    p.layers["Wh"].value = np.zeros_like(p.layers["Wh"].value)
    p.layers["Wu"].value = np.zeros_like(p.layers["Wu"].value)
    a = models.forward(small_dp(1), p)
    assert np.allclose(a.hidden[0], np.full(SMALL.hidden, 0.5))  # sigmoid(0) everywhere


def test_rnn_is_order_sensitive():
    p = models.init_params("rnn", SMALL, seed=3)
    dp = small_dp(5)
    swapped = Datapoint(exposures=[dp.exposures[1], dp.exposures[0]] + dp.exposures[2:],
                        query_noun=dp.query_noun, query_attrs=dp.query_attrs,
                        candidates=dp.candidates, gold=dp.gold)
    a = models.forward(dp, models.eval_view(p))
    b = models.forward(swapped, models.eval_view(p))
    assert not np.allclose(a.distribution, b.distribution)


def test_bridging_dire_equals_memn_when_gate_forced_new():
    # p_old == 0 makes the library store every exposure in its own row, which
    # is exactly the memory-network memory; with shared matrices and one hop
    # the two forwards must coincide.
    for seed in range(100):
        dp = small_dp(seed)
        memn = models.init_params("memn-1m-1h", SMALL, seed=seed + 1)
        dire = models.DireParams("dire-1m", SMALL, V=memn.V_in, A=memn.A_in, C=memn.C_in,
                                 gate=GateParams(w=Var(0.0), b=Var(-1e9)))
        a = models.forward(dp, models.eval_view(dire))
        b = models.forward(dp, models.eval_view(memn))
        assert np.array_equal(a.library, b.library)
        assert abs(a.loss - b.loss) <= 1e-9
        assert np.allclose(a.distribution, b.distribution, atol=1e-9)


def test_candidate_permutation_equivariance():
    p = models.init_params("dire-1m", SMALL, seed=2)
    dp = small_dp(7, k=5)
    perm = [3, 0, 4, 1, 2]
    permuted = Datapoint(exposures=dp.exposures, query_noun=dp.query_noun,
                         query_attrs=dp.query_attrs,
                         candidates=[dp.candidates[i] for i in perm],
                         gold=perm.index(dp.gold))
    a = models.forward(dp, models.eval_view(p))
    b = models.forward(permuted, models.eval_view(p))
    assert np.allclose(b.distribution, a.distribution[perm], atol=1e-12)
    assert abs(a.loss - b.loss) <= 1e-12


def test_distributions_are_probabilities():
    for variant in models.VARIANTS:
        p = models.init_params(variant, SMALL, seed=11)
        trace = models.forward(small_dp(11), models.eval_view(p))
        assert np.all(trace.distribution >= 0)
        assert abs(trace.distribution.sum() - 1.0) <= 1e-12
        assert trace.loss >= 0.0


def test_trace_replay_is_bit_identical():
    p = models.init_params("dire-2m", SMALL, seed=4)
    dp = small_dp(9)
    a = models.forward(dp, p)
    b = models.forward(dp, p)
    assert a.loss == b.loss
    assert np.array_equal(a.distribution, b.distribution)
    assert np.array_equal(a.library, b.library)


def test_backward_cross_entropy_identity_and_b_grad():
    p = models.init_params("dire-1m", SMALL, seed=5)
    dp = small_dp(13)
    trace = models.forward(dp, p)
    grads = models.backward(trace, p)
    onehot = np.zeros_like(trace.distribution)
    onehot[dp.gold] = 1.0
    assert np.allclose(trace.scores_var.grad, trace.distribution - onehot, atol=1e-12)
    # the gate bias gets gradient whenever some p_old is strictly inside (0,1)
    assert any(0.0 < s.p_old < 1.0 for s in trace.steps)
    assert abs(float(grads["gate_b"])) > 0.0


def test_backward_rejects_stale_trace():
    from enttrack.training import sgd_step

    p = models.init_params("dire-1m", SMALL, seed=6)
    dp = small_dp(17)
    trace = models.forward(dp, p)
    grads = models.backward(trace, p)
    sgd_step(p, grads, 0.1)
    with pytest.raises(StaleTraceError):
        models.backward(trace, p)


def test_backward_rejects_tape_free_trace():
    p = models.init_params("dire-1m", SMALL, seed=6)
    trace = models.forward(small_dp(17), models.eval_view(p))
    with pytest.raises(StaleTraceError):
        models.backward(trace, p)


def test_forward_rejects_malformed_datapoints():
    p = models.init_params("dire-1m", SMALL, seed=0)
    dp = small_dp(0)
    bad = Datapoint(exposures=[], query_noun=dp.query_noun, query_attrs=dp.query_attrs,
                    candidates=dp.candidates, gold=0)
    with pytest.raises(ValueError, match="no exposures"):
        models.forward(bad, p)
    bad = Datapoint(exposures=dp.exposures, query_noun=dp.query_noun,
                    query_attrs=dp.query_attrs, candidates=dp.candidates, gold=99)
    with pytest.raises(ValueError, match="gold index"):
        models.forward(bad, p)
    bad = Datapoint(exposures=[Exposure(image=np.zeros(9), attribute=dp.exposures[0].attribute)]
                    + dp.exposures[1:], query_noun=dp.query_noun,
                    query_attrs=dp.query_attrs, candidates=dp.candidates, gold=dp.gold)
    with pytest.raises(DimensionError, match="exposure 0 image"):
        models.forward(bad, p)


def test_memn_memory_row_count():
    p = models.init_params("memn-1m-1h", Dims(v=4, t=4, t_c=4, m=8), seed=0)
    dp = small_dp(3, dims=Dims(v=4, t=4, t_c=4, m=8, n_exposures=12))
    trace = models.forward(dp, models.eval_view(p))
    assert trace.library.shape[0] == 12
    assert all(abs(a.sum() - 1.0) <= 1e-12 for a in trace.hop_attentions)


def test_memn_attention_concentrates_on_best_row():
    # orthogonal memory rows: attention peaks where the dot with q is largest
    dims = Dims(v=4, t=4, t_c=4, m=4, n_exposures=4)
    p = models.init_params("memn-1m-1h", dims, seed=0)
    p.V_in.value = np.eye(4)
    p.A_in.value = np.zeros((4, 4))
    p.C_in.value = np.eye(4)
    exposures = [Exposure(image=np.eye(4)[i], attribute=np.zeros(4)) for i in range(4)]
    dp = Datapoint(exposures=exposures, query_noun=np.array([0.0, 3.0, 0.0, 0.0]),
                   query_attrs=(np.zeros(4), np.zeros(4)),
                   candidates=[np.eye(4)[i] for i in range(4)], gold=1)
    trace = models.forward(dp, models.eval_view(p))
    assert int(np.argmax(trace.hop_attentions[0])) == 1


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    for variant in ("dire-2m", "memn-1m-2h", "ff", "rnn"):
        p = models.init_params(variant, SMALL, seed=8)
        path = tmp_path / f"{variant}.ckpt"
        models.save_checkpoint(p, path, seed_lineage="seed=8")
        loaded, meta = models.load_checkpoint(path)
        assert meta["seed_lineage"] == "seed=8"
        assert loaded.variant == variant
        orig, back = val(p), val(loaded)
        assert orig.keys() == back.keys()
        for k in orig:
            assert np.array_equal(orig[k], back[k]), k

        # saving the loaded params reproduces the file byte-for-byte
        path2 = tmp_path / f"{variant}2.ckpt"
        models.save_checkpoint(loaded, path2, seed_lineage="seed=8")
        assert path.read_bytes() == path2.read_bytes()


def test_memn_1m_shares_storage_and_gradients():
    p = models.init_params("memn-1m-2h", SMALL, seed=9)
    assert p.V_in is p.V_out and p.A_in is p.A_out and p.C_in is p.C_out
    assert [n for n, _ in p.named()] == ["V", "A", "C"]
    trace = models.forward(small_dp(21), p)
    grads = models.backward(trace, p)
    assert set(grads) == {"V", "A", "C"}
