import numpy as np
import pytest

from mfgsim import comm
from mfgsim.model import SchedulerParams

SP = SchedulerParams(S=np.eye(1), alpha=2.0)


def link(Y_prev, U_prev, P=0.25):
    return comm.LinkState(np.array([Y_prev]), np.array([U_prev]), np.array([[P]]), np.zeros(1))


def test_predict():
    A, B = np.array([[0.5]]), np.array([[1.0]])
    assert comm.predict(link(0.0, 0.0), A, B)[0] == 0.0
    assert comm.predict(link(1.0, -0.05692), A, B)[0] == pytest.approx(0.44308)
    ls = comm.LinkState(np.array([1.0, 2.0]), np.array([3.0]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(comm.predict(ls, np.eye(2), np.zeros((2, 1))), [1.0, 2.0])


def test_schedule():
    assert not comm.schedule(np.zeros(1), SP, 5)
    assert comm.schedule(np.zeros(1), SP, 0)
    assert comm.schedule(np.array([np.sqrt(2.0) + 1e-12]), SP, 3)
    always = SchedulerParams(S=np.eye(1), alpha=0.0)
    rng = np.random.default_rng(0)
    assert np.all(comm.schedule(rng.normal(size=(50, 1)), always, 7))


def test_encode():
    assert comm.encode([1.2], [1.0])[0] == pytest.approx(0.2)
    assert comm.encode([0.3], [0.3])[0] == 0.0
    np.testing.assert_array_equal(comm.encode([1.0, -1.0], [0.0, 0.0]), [1.0, -1.0])


def test_channel_noiseless_and_reproducible():
    c = np.array([0.3, -0.2])
    np.testing.assert_array_equal(comm.channel_transmit(c, np.zeros((2, 2)), np.random.default_rng(1)), c)
    d1 = comm.channel_transmit(c, 0.04 * np.eye(2), np.random.default_rng(1))
    d2 = comm.channel_transmit(c, 0.04 * np.eye(2), np.random.default_rng(1))
    np.testing.assert_array_equal(d1, d2)


def test_channel_moments():
    S = np.array([[0.04, 0.01], [0.01, 0.09]])
    c = np.zeros((100_000, 2))
    v = comm.channel_transmit(c, S, np.random.default_rng(2024))
    sd = np.sqrt(np.diag(S))
    assert np.all(np.abs(v.mean(axis=0)) <= 3 * sd / np.sqrt(len(v)))
    np.testing.assert_allclose(np.cov(v.T), S, rtol=0.05)


def test_decode():
    ls = link(0.0, 0.0)
    Y, P = comm.decode(ls, np.array([0.7]), np.array(False), np.array([5.0]), np.array([[0.04]]))
    assert Y[0] == 0.7 and P[0, 0] == 0.25
    Y, P = comm.decode(ls, np.array([0.7]), np.array(True), np.array([0.3]), np.zeros((1, 1)))
    assert Y[0] == pytest.approx(1.0) and P[0, 0] == pytest.approx(0.0, abs=1e-15)
    G = comm.decoder_gain(np.array([[0.25]]), np.array([[0.04]]))
    assert G[0, 0] == pytest.approx(0.25 / 0.29, abs=1e-12)
    assert G[0, 0] == pytest.approx(0.862069, abs=1e-6)


def test_decoder_gain_singular_is_projector():
    P = np.diag([0.5, 0.0])
    G = comm.decoder_gain(P, np.zeros((2, 2)))
    np.testing.assert_allclose(G, np.diag([1.0, 0.0]), atol=1e-14)


def test_propagate_covariance():
    A, Sw = np.array([[0.5]]), np.array([[0.01]])
    assert comm.propagate_covariance(np.array([[0.25]]), A, Sw)[0, 0] == pytest.approx(0.0725)
    assert comm.propagate_covariance(np.array([[0.25]]), np.zeros((1, 1)), Sw)[0, 0] == 0.01
    P = np.array([[0.3, 0.1], [0.1, 0.2]])
    np.testing.assert_array_equal(comm.propagate_covariance(P, np.eye(2), np.zeros((2, 2))), P)


def run_link(U_seq, sigma_v=0.04, alpha=0.5, T=200, seed=3, init="prior_mean"):
    A, B = np.array([[0.7, 0.2], [0.0, 0.6]]), np.array([[1.0], [0.5]])
    Sw, Sv, Sx = 0.02 * np.eye(2), sigma_v * np.eye(2), 0.25 * np.eye(2)
    sp = SchedulerParams(S=np.eye(2), alpha=alpha)
    rng = np.random.default_rng(seed)
    X0 = rng.normal(size=2)
    W = rng.normal(size=(T, 2)) * np.sqrt(0.02)
    Z = rng.normal(size=(T, 2))
    ls, Yhat, delta = comm.init_link(np.zeros(2), X0, Sx, 1, init)
    X = X0
    out = []
    for k in range(T):
        rec = comm.link_step(ls, A, B, Sw, Sv, sp, w_prev=W[k - 1] if k else None,
                             z_v=Z[k], init=(Yhat, delta) if k == 0 else None)
        if k > 0:
            X = A @ X + B @ ls.U_prev + W[k - 1]
        out.append((rec, X.copy(), ls.P.copy()))
        comm.commit(ls, rec, U_seq(k, rec.Y))
    return out


def test_link_tracks_true_plant_and_keeps_P_psd():
    rows = run_link(lambda k, Y: np.array([np.sin(k) - 0.3 * Y[0]]))
    for rec, X, P in rows:
        np.testing.assert_allclose(rec.X, X, atol=1e-12)
        assert np.array_equal(rec.Y + rec.err, rec.X)
        np.testing.assert_array_equal(P, P.T)
        assert np.linalg.eigvalsh(P).min() >= -1e-12


@pytest.mark.parametrize("init", ["prior_mean", "zero"])
def test_errors_do_not_depend_on_control(init):
    a = run_link(lambda k, Y: np.zeros(1), init=init)
    b = run_link(lambda k, Y: np.array([5.0 * np.cos(k) - 2 * Y[1]]), init=init)
    for (ra, _, _), (rb, _, _) in zip(a, b):
        assert np.array_equal(ra.err, rb.err) and np.array_equal(ra.gamma, rb.gamma)


def test_silent_steps_have_no_symbol():
    rows = run_link(lambda k, Y: np.zeros(1), alpha=1e6)
    assert rows[0][0].gamma
    for rec, _, _ in rows[1:]:
        assert not rec.gamma and np.all(np.isnan(rec.d))


def test_init_zero_prior():
    ls, Yhat, delta = comm.init_link(np.array([1.0]), np.array([1.2]), np.array([[0.25]]), 1, "zero")
    assert Yhat[0] == 0.0 and delta[0] == 1.2 and ls.P[0, 0] == pytest.approx(1.25)
    with pytest.raises(ValueError):
        comm.init_link(np.array([1.0]), np.array([1.2]), np.array([[0.25]]), 1, "bogus")
