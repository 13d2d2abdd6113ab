import itertools

import numpy as np
import pytest

from transvec.numkit import grad_check, log_softmax, make_rng
from transvec.transducer import (BLANK, JointNet, Lattice, TransducerModel, count_paths, enumerate_paths,
                                 greedy_align, greedy_decode, joint_forward, rnnt_log_prob, rnnt_loss_backward)


def random_lattice(rng, T, U, K, scale=2.0):
    return Lattice(log_softmax(rng.normal(size=(T, U + 1, K + 1)) * scale))


def tiny_model(seed=0, K=4):
    return TransducerModel(3, K, make_rng(seed), enc_hidden=3, enc_dim=3, pred_embed=2, pred_hidden=3,
                           pred_dim=3, joint_dim=3)


# -- joint ------------------------------------------------------------------------

def test_joint_zero_params_uniform():
    j = JointNet(3, 2, 4, 5, make_rng(0))
    for p in j.params():
        p.value[...] = 0.0
    _, _, logp = joint_forward(j, np.ones(3), np.ones(2))
    assert np.allclose(logp, -np.log(6), atol=1e-15)


def test_joint_tanh_bounded():
    j = JointNet(3, 2, 4, 5, make_rng(1))
    z, _, _ = joint_forward(j, np.full(3, 50.0), np.full(2, -50.0))
    assert np.all(np.abs(z) <= 1.0)


def test_joint_hand_arithmetic():
    j = JointNet(1, 1, 1, 1, make_rng(0))
    j.Q.value[...] = 0.5
    j.V.value[...] = -0.3
    j.b_z.value[...] = 0.1
    j.W_y.value[...] = [[1.0], [-2.0]]
    j.b_y.value[...] = [0.2, 0.0]
    z, logits, logp = joint_forward(j, np.array([1.0]), np.array([1.0]))
    zz = np.tanh(0.5 - 0.3 + 0.1)
    assert z[0] == pytest.approx(zz, abs=1e-12)
    assert logits == pytest.approx([zz + 0.2, -2 * zz], abs=1e-12)
    norm = np.log(np.exp(zz + 0.2) + np.exp(-2 * zz))
    assert logp == pytest.approx([zz + 0.2 - norm, -2 * zz - norm], abs=1e-12)


def test_joint_lattice_matches_cellwise():
    rng = make_rng(2)
    j = JointNet(3, 2, 4, 5, rng)
    he, hp = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    z, logp = j.lattice(he, hp)
    for t, u in itertools.product(range(4), range(3)):
        zc, _, lc = joint_forward(j, he[t], hp[u])
        assert np.allclose(z[t, u], zc, atol=1e-14)
        assert np.allclose(logp[t, u], lc, atol=1e-14)


def test_joint_lattice_slices_normalized():
    rng = make_rng(3)
    j = JointNet(3, 2, 4, 5, rng)
    _, logp = j.lattice(rng.normal(size=(4, 3)), rng.normal(size=(3, 2)))
    assert np.max(np.abs(np.exp(logp).sum(-1) - 1.0)) <= 1e-10


# -- lattice DP -------------------------------------------------------------------

def test_single_forced_path():
    lat = random_lattice(make_rng(0), 1, 0, 3)
    assert rnnt_log_prob(lat, []) == lat.log_probs[0, 0, BLANK]


def test_two_frame_one_label_matches_enumeration():
    lat = random_lattice(make_rng(1), 2, 1, 3)
    lp = lat.log_probs
    y = 2
    paths = [lp[0, 0, y] + lp[0, 1, 0] + lp[1, 1, 0], lp[0, 0, 0] + lp[1, 0, y] + lp[1, 1, 0]]
    assert rnnt_log_prob(lat, [y]) == pytest.approx(np.logaddexp(*paths), abs=1e-12)
    assert enumerate_paths(lat, [y]) == pytest.approx(np.logaddexp(*paths), abs=1e-12)


def test_uniform_lattice_quarter():
    lat = Lattice(np.full((2, 2, 2), -np.log(2)))
    assert rnnt_log_prob(lat, [1]) == pytest.approx(-np.log(4), abs=1e-14)
    assert enumerate_paths(lat, [1]) == pytest.approx(-np.log(4), abs=1e-14)


@pytest.mark.parametrize("T,U,n", [(2, 1, 2), (3, 2, 6), (4, 0, 1), (1, 3, 1)])
def test_path_counts(T, U, n):
    assert count_paths(T, U) == n
    # a uniform lattice over a single-token vocabulary weights every path equally
    lat = Lattice(np.full((T, U + 1, 2), -np.log(2)))
    expected = np.log(n) + (T + U) * -np.log(2)
    assert enumerate_paths(lat, [1] * U) == pytest.approx(expected, abs=1e-12)


def test_dp_equals_enumeration_random():
    rng = make_rng(11)
    worst = 0.0
    checked = 0
    while checked < 200:
        T, U, K = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 5))
        if T * (U + 1) > 20:
            continue
        lat = random_lattice(rng, T, U, K)
        labels = rng.integers(1, K + 1, size=U)
        worst = max(worst, abs(rnnt_log_prob(lat, labels) - enumerate_paths(lat, labels)))
        checked += 1
    assert worst <= 1e-10


def test_enumeration_guard_and_label_checks():
    lat = random_lattice(make_rng(0), 5, 4, 2)
    with pytest.raises(ValueError):
        enumerate_paths(lat, [1, 1, 1, 1])
    with pytest.raises(ValueError):
        rnnt_log_prob(random_lattice(make_rng(0), 2, 1, 2), [0])
    with pytest.raises(ValueError):
        rnnt_log_prob(random_lattice(make_rng(0), 2, 1, 2), [1, 1])


def test_label_sequences_conserve_probability():
    # all label sequences up to the lattice width are disjoint events
    rng = make_rng(5)
    T, U_max, K = 3, 2, 2
    lat = random_lattice(rng, T, U_max, K)
    total = 0.0
    for U in range(U_max + 1):
        sub = Lattice(lat.log_probs[:, : U + 1])
        for ys in itertools.product(range(1, K + 1), repeat=U):
            total += np.exp(rnnt_log_prob(sub, ys))
    assert 0.0 < total <= 1.0 + 1e-12


# -- gradient of the loss ---------------------------------------------------------

def test_loss_gradient_finite_differences():
    rng = make_rng(7)
    T, U, K = 3, 2, 3
    logits = rng.normal(size=(T, U + 1, K + 1))
    labels = [1, 3]
    _, g = rnnt_loss_backward(Lattice(log_softmax(logits)), labels)
    worst = 0.0
    eps = 1e-6
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        gn = (rnnt_loss_backward(Lattice(log_softmax(up)), labels)[0]
              - rnnt_loss_backward(Lattice(log_softmax(down)), labels)[0]) / (2 * eps)
        worst = max(worst, abs(g[idx] - gn) / max(1e-8, abs(g[idx]) + abs(gn)))
    assert worst <= 1e-5


def test_loss_gradient_rows_sum_to_zero():
    lat = random_lattice(make_rng(8), 4, 3, 5)
    _, g = rnnt_loss_backward(lat, [2, 5, 1])
    assert np.max(np.abs(g.sum(-1))) <= 1e-12


def test_unreachable_cells_get_zero_gradient():
    rng = make_rng(9)
    logits = rng.normal(size=(3, 3, 4))
    logits[0, 0, 2] = -1e4  # first label cannot be emitted on frame 0
    _, g = rnnt_loss_backward(Lattice(log_softmax(logits)), [2, 1])
    assert np.all(g[0, 1] == 0.0) and np.all(g[0, 2] == 0.0)


def test_loss_matches_log_prob():
    lat = random_lattice(make_rng(10), 4, 2, 3)
    loss, _ = rnnt_loss_backward(lat, [3, 3])
    assert loss == pytest.approx(-rnnt_log_prob(lat, [3, 3]), abs=1e-12)


def test_end_to_end_grad_check():
    rng = make_rng(12)
    model = tiny_model(12, K=4)
    frames = [rng.normal(size=(6, 3))]
    labels = [[2, 4]]

    def f():
        return model.loss_batch(frames, labels)

    assert grad_check(f, model.params(), eps=1e-4) <= 1e-4


def test_batched_loss_equals_mean_of_singles():
    rng = make_rng(13)
    model = tiny_model(13)
    frames = [rng.normal(size=(6, 3)), rng.normal(size=(3, 3))]
    labels = [[2, 4, 1], [3]]
    both = model.loss_batch(frames, labels, backward=False)
    singles = [model.loss_batch([f], [y], backward=False) for f, y in zip(frames, labels)]
    assert both == pytest.approx(np.mean(singles), abs=1e-12)


# -- greedy decoding --------------------------------------------------------------

def rig(model, blank_bias):
    j = model.joint
    j.W_y.value[...] = 0.0
    j.b_y.value[...] = 0.0
    j.b_y.value[BLANK] = blank_bias
    j.b_y.value[1] = 0.0 if blank_bias > 0 else 100.0


def test_always_blank_decode():
    model = tiny_model(1)
    rig(model, 100.0)
    tr = greedy_decode(model, make_rng(1).normal(size=(9, 3)), tau=3)
    T = 5
    assert tr.tokens == []
    assert tr.n_pairs == T
    assert np.all(tr.u_idx == 0)
    assert list(tr.t_idx) == list(range(T))


def test_never_blank_decode_fills_budget():
    model = tiny_model(2)
    rig(model, -100.0)
    tr = greedy_decode(model, make_rng(2).normal(size=(8, 3)), tau=3)
    T = 4
    assert len(tr.tokens) == 3 * T
    assert tr.n_pairs == 3 * T
    assert np.all(tr.per_frame_emits == 3)
    assert list(tr.u_idx) == list(range(3 * T))
    assert tr.h_pred.shape[0] == 3 * T + 1


def test_walkthrough_blank_h_e_blank():
    # joint outputs: blank on frame 1, then "h", "e", blank on frame 2
    script = {(0, 0): BLANK, (1, 0): 5, (1, 1): 6, (1, 2): BLANK, (2, 2): BLANK}
    emitted = []

    def frame_labels(t0, t1, u):
        return np.array([script.get((t, u), BLANK) for t in range(t0, t1)])

    tr = greedy_align(3, 3, frame_labels, emitted.append)
    assert tr.tokens == [5, 6] == emitted
    # four joint evaluations before frame 3: encoder indices 1, 2, 2, 2 (1-based)
    assert list(tr.t_idx[:4] + 1) == [1, 2, 2, 2]
    assert list(tr.u_idx[:4] + 1) == [1, 1, 2, 3]
    assert tr.labels[:4] == [BLANK, 5, 6, BLANK]
    assert list(tr.per_frame_emits) == [0, 2, 0]


def test_tau_budget_skips_closing_blank():
    script = {(0, 0): 1, (0, 1): 1, (1, 2): BLANK}
    tr = greedy_align(2, 2, lambda t0, t1, u: np.array([script.get((t, u), BLANK) for t in range(t0, t1)]),
                      lambda k: None)
    assert list(tr.t_idx) == [0, 0, 1]
    assert list(tr.per_frame_emits) == [2, 0]


def test_alignment_contract_random_decodes():
    rng = make_rng(21)
    for i in range(500):
        model = tiny_model(int(rng.integers(0, 10**6)))
        model.joint.b_y.value[BLANK] = rng.normal() * 2
        tau = int(rng.integers(1, 4))
        frames = rng.normal(size=(int(rng.integers(1, 12)), 3)) * 3
        tr = greedy_decode(model, frames, tau)
        T = len(tr.h_enc)
        V = tr.n_pairs
        assert np.all(tr.per_frame_emits <= tau)
        assert T <= V <= tau * T
        if tau == 1:
            assert V == T
        assert len(tr.tokens) == tr.per_frame_emits.sum()
        ended_by_blank = sum(1 for t in range(T) if tr.per_frame_emits[t] < tau)
        assert V == tr.per_frame_emits.sum() + ended_by_blank
        assert len(tr.h_pred) == len(tr.tokens) + 1


def test_decode_pairs_match_joint_argmax():
    model = tiny_model(4)
    model.joint.b_y.value[BLANK] = 0.3
    tr = greedy_decode(model, make_rng(4).normal(size=(14, 3)) * 3, tau=2)
    for v, (t, u, he, hp) in enumerate(tr.pairs):
        _, logits, _ = joint_forward(model.joint, he, hp)
        assert int(np.argmax(logits)) == tr.labels[v]
