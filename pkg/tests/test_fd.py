import math

import numpy as np
import pytest

from conftest import finite_diff_max_rel
from rolegnn import tensor as T
from rolegnn.fd import (FdModule, diff_pairs, fd_losses, loss_emb, loss_pair,
                        sample_negative_targets, score_pairs)
from rolegnn.sampler import SamplerConfig, sample_batch
from rolegnn.schema_graph import (RoleAssignment, build_schema_graph,
                                  construct_reg, enumerate_edge_triples)
from rolegnn.synth import gen_subspace, gen_twohop
from rolegnn.tensor import Adam, Tensor


def _subspace_setup(n=120, ch=8, d=3, sigma=0.0, seed=0):
    db, meta = gen_subspace(n, ch, d, seed, sigma=sigma)
    sg = build_schema_graph(db)
    reg = construct_reg(db, sg,
                        RoleAssignment.learn_all(enumerate_edge_triples(sg)))
    fd = FdModule(reg, channels=ch, subspace_dim=d, seed=seed)
    return db, meta, reg, fd


def _identity_embeddings(reg, table, ch):
    cols = [np.asarray(reg.nodes[table].attrs[f"a{j}"].values, float)
            for j in range(ch)]
    return np.stack(cols, axis=1)


def test_diff_pairs_values_and_counts():
    db, task = gen_twohop(30, 10, 90, 1.0, 0)
    sg = build_schema_graph(db)
    reg = construct_reg(db, sg,
                        RoleAssignment.learn_all(enumerate_edge_triples(sg)))
    recs = task.labels["train"]
    seeds = [(int(recs.entity[i]), float(recs.t_predict[i])) for i in range(6)]
    batch = sample_batch(reg, seeds,
                         SamplerConfig(neighbor_samples=16, num_hops=1, seed=0),
                         "user")
    emb = {t: Tensor(np.random.default_rng(1).normal(size=(tn.n, 4)))
           for t, tn in batch.nodes.items()}
    relations = [es.key for es in reg.edges.values()]
    pairs = diff_pairs(batch, emb, relations)
    for rid, (diffs, i_idx, j_idx) in pairs.items():
        key = next(k for k in relations if k.id == rid)
        # oracle: distinct in-batch FK links, whichever direction sampled them
        links = set()
        fwd = batch.edges.get(rid)
        if fwd is not None:
            links |= set(zip(fwd[0].tolist(), fwd[1].tolist()))
        rev = batch.edges.get(key.flipped().id)
        if rev is not None:
            links |= set(zip(rev[1].tolist(), rev[0].tolist()))
        assert diffs.shape[0] == len(links)
        assert set(zip(i_idx.tolist(), j_idx.tolist())) == links
        oracle = emb[key.referenced].values[j_idx] - emb[key.holder].values[i_idx]
        np.testing.assert_allclose(diffs.values, oracle, rtol=1e-12)


def test_diff_simple_values():
    hi = Tensor(np.array([[1.0, 2.0]]))
    hj = Tensor(np.array([[4.0, 6.0]]))
    assert T.sub(hj, hi).values.tolist() == [[3.0, 4.0]]
    assert T.sub(hi, hi).values.tolist() == [[0.0, 0.0]]


def test_loss_emb_zero_when_diff_equals_shift():
    s = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    diffs = Tensor(np.tile(s.values, (7, 1)))
    P = Tensor(np.zeros((3, 1)), requires_grad=True)
    assert loss_emb(diffs, P, s).item() == 0.0


def test_loss_emb_projection_arithmetic():
    # channels=2, d=1, P = e1, s = 0, diff = (3,4): residual (0,4), loss 16
    P = Tensor(np.array([[1.0], [0.0]]))
    s = Tensor(np.zeros(2))
    diffs = Tensor(np.array([[3.0, 4.0]]))
    assert abs(loss_emb(diffs, P, s).item() - 16.0) < 1e-12


def test_loss_emb_vanishes_inside_planted_subspace():
    rng = np.random.default_rng(3)
    basis, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    shift = rng.normal(size=6)
    diffs = Tensor(shift + rng.normal(size=(40, 2)) @ basis.T)
    assert loss_emb(diffs, Tensor(basis), Tensor(shift)).item() < 1e-20


def test_loss_emb_empty_is_zero():
    out = loss_emb(Tensor(np.zeros((0, 4))), Tensor(np.zeros((4, 2))),
                   Tensor(np.zeros(4)))
    assert out.item() == 0.0


def test_score_pairs_zero_head_and_constant():
    db, meta, reg, fd = _subspace_setup()
    rid = fd.relations[0].id
    for name, p in fd.params.items():
        if ".ms." in name:
            p.values[:] = 0.0
    h = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
    assert (score_pairs(fd, rid, h, h).values == 0.0).all()

    # identical pairs score the same constant under any head
    fd2 = FdModule(reg, channels=8, subspace_dim=3, seed=9)
    same = score_pairs(fd2, rid, h, h).values
    assert np.allclose(same, same[0])


def test_score_pairs_matches_mlp_oracle():
    db, meta, reg, fd = _subspace_setup()
    rid = fd.relations[0].id
    rng = np.random.default_rng(4)
    hi, hj = Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(6, 8)))
    got = score_pairs(fd, rid, hi, hj).values
    x = hi.values - hj.values
    hidden = np.maximum(x @ fd.params[f"fd.{rid}.ms.W1"].values
                        + fd.params[f"fd.{rid}.ms.b1"].values, 0.0)
    oracle = hidden @ fd.params[f"fd.{rid}.ms.W2"].values \
        + fd.params[f"fd.{rid}.ms.b2"].values
    np.testing.assert_allclose(got, oracle.reshape(-1), rtol=1e-12)


def test_loss_pair_values():
    pos = Tensor(np.array([0.0]))
    negs = Tensor(np.array([[0.0]]))
    assert abs(loss_pair(pos, negs, 1.0).item() - math.log(2.0)) < 1e-12

    pos = Tensor(np.array([2.0]))
    assert abs(loss_pair(pos, negs, 1.0).item()
               - math.log(1 + math.exp(-2.0))) < 1e-12

    # loss -> 0+ as the positive score grows
    val = loss_pair(Tensor(np.array([20.0])), negs, 1.0).item()
    assert 0.0 < val < 1e-8
    assert loss_pair(Tensor(np.array([1e4])), negs, 1.0).item() < 1e-12


def test_loss_pair_monotonicity():
    rng = np.random.default_rng(5)
    pos = rng.normal(size=4)
    negs = rng.normal(size=(4, 3))
    base = loss_pair(Tensor(pos), Tensor(negs), 0.5).item()
    up = loss_pair(Tensor(pos + 0.1), Tensor(negs), 0.5).item()
    assert up < base  # strictly decreasing in the positive score
    for k in range(3):
        bumped = negs.copy()
        bumped[:, k] += 0.1
        assert loss_pair(Tensor(pos), Tensor(bumped), 0.5).item() > base


def test_loss_pair_requires_negative():
    with pytest.raises(ValueError):
        loss_pair(Tensor(np.array([0.0])), Tensor(np.zeros((1, 0))), 1.0)


def test_negative_sampling_excludes_true_row_and_falls_back():
    db, task = gen_twohop(30, 10, 90, 1.0, 2)
    sg = build_schema_graph(db)
    reg = construct_reg(db, sg,
                        RoleAssignment.learn_all(enumerate_edge_triples(sg)))
    recs = task.labels["train"]
    seeds = [(int(recs.entity[i]), float(recs.t_predict[i])) for i in range(5)]
    batch = sample_batch(reg, seeds,
                         SamplerConfig(neighbor_samples=8, num_hops=1, seed=1),
                         "user")
    rows = batch.nodes["product"].rows
    true_locals = np.arange(min(4, len(rows)))
    negs = sample_negative_targets(batch, "product", true_locals, k=6,
                                   rng=np.random.default_rng(0))
    for i, j in enumerate(true_locals):
        assert (rows[negs[i]] != rows[j]).all()


def test_negative_sampling_none_when_no_alternative():
    db, task = gen_twohop(30, 10, 90, 1.0, 2)
    sg = build_schema_graph(db)
    reg = construct_reg(db, sg,
                        RoleAssignment.learn_all(enumerate_edge_triples(sg)))
    batch = sample_batch(reg, [(1, 1.0)],
                         SamplerConfig(neighbor_samples=4, num_hops=1, seed=0),
                         "user")  # nothing admissible, user type only
    assert sample_negative_targets(batch, "user", np.array([0]), 4,
                                   np.random.default_rng(0)) is None


def test_fd_losses_combination():
    db, task = gen_twohop(40, 12, 120, 1.0, 3)
    sg = build_schema_graph(db)
    reg = construct_reg(db, sg,
                        RoleAssignment.learn_all(enumerate_edge_triples(sg)))
    fd = FdModule(reg, channels=6, subspace_dim=2, seed=0)
    recs = task.labels["train"]
    seeds = [(int(recs.entity[i]), float(recs.t_predict[i])) for i in range(8)]
    batch = sample_batch(reg, seeds,
                         SamplerConfig(neighbor_samples=8, num_hops=1, seed=2),
                         "user")
    emb = {t: Tensor(np.random.default_rng(7).normal(size=(tn.n, 6)))
           for t, tn in batch.nodes.items()}

    total0, e0, p0, _ = fd_losses(batch, emb, fd, 0.0, 0.0, 0.1, 4,
                                  np.random.default_rng(11))
    assert total0.item() == 0.0

    tot_emb, e1, _, _ = fd_losses(batch, emb, fd, 1.0, 0.0, 0.1, 4,
                                  np.random.default_rng(11))
    assert abs(tot_emb.item() - e1.item()) < 1e-12

    beta, gamma = 1e-6, 0.1
    tot, le, lp, diag = fd_losses(batch, emb, fd, beta, gamma, 0.1, 4,
                                  np.random.default_rng(11))
    assert abs(tot.item() - (beta * le.item() + gamma * lp.item())) < 1e-15
    assert all(np.isfinite(d.loss_emb) for d in diag)


def test_fd_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    ch, d = 5, 2
    diffs = Tensor(rng.normal(size=(6, ch)))
    P = T.init_param((ch, d), fan_in=ch, seed=1)
    s = T.zeros_param((ch,))
    worst = finite_diff_max_rel(lambda: loss_emb(diffs, P, s), [P, s])
    assert worst <= 1e-4

    pos_in = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    negs_in = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    worst = finite_diff_max_rel(
        lambda: loss_pair(T.sum_(pos_in, axis=1), negs_in, 0.3),
        [pos_in, negs_in])
    assert worst <= 1e-4


def test_planted_subspace_training_property():
    """Short FD-phase run: planted diffs reach tiny residual; the scorer ranks
    true targets above mismatches."""
    db, meta, reg, fd = _subspace_setup(n=200, ch=8, d=3, sigma=0.0, seed=1)
    rid = fd.relations[0].id
    diffs = Tensor(meta["diffs"])
    P, s = fd.subspace(rid)
    opt = Adam([P, s], lr=0.02)
    for _ in range(1500):
        T.backward(loss_emb(diffs, P, s))
        opt.step()
    assert loss_emb(diffs, P, s).item() < 1e-3

    h_entry = _identity_embeddings(reg, "entry", 8)
    h_anchor = _identity_embeddings(reg, "anchor", 8)
    es = reg.edges[rid]
    i_pos, j_pos = es.holder_rows, es.ref_rows
    rng = np.random.default_rng(2)
    scorer = [fd.params[p] for p in sorted(fd.params) if ".ms." in p]
    opt = Adam(scorer, lr=0.01)
    n_anchor = h_anchor.shape[0]
    for _ in range(400):
        b = rng.choice(len(i_pos), size=64)
        hi, hj = Tensor(h_entry[i_pos[b]]), Tensor(h_anchor[j_pos[b]])
        pos = score_pairs(fd, rid, hi, hj)
        cols = []
        for _k in range(4):
            jn = rng.integers(0, n_anchor, size=64)
            jn = np.where(jn == j_pos[b], (jn + 1) % n_anchor, jn)
            cols.append(T.reshape(score_pairs(fd, rid, hi, Tensor(h_anchor[jn])),
                                  (64, 1)))
        T.backward(loss_pair(pos, T.concat(cols, axis=1), 0.1))
        opt.step()
    hi, hj = Tensor(h_entry[i_pos]), Tensor(h_anchor[j_pos])
    pos = score_pairs(fd, rid, hi, hj).values
    jn = rng.integers(0, n_anchor, size=len(i_pos))
    jn = np.where(jn == j_pos, (jn + 1) % n_anchor, jn)
    neg = score_pairs(fd, rid, hi, Tensor(h_anchor[jn])).values
    assert (pos > neg).mean() > 0.9
