import math

import numpy as np
import pytest

from sparsechan import oracles


def test_quad_frozen_symmetric_case():
    # Sigma_cav=1, mu_cav=0, p_cav=0, gamma=1: the slab branch integrates to
    # 0.5*CN(0;0,2) = 1/(4*pi) and the spike branch to 0.5*CN(0;0,1) = 1/(2*pi),
    # so E[z]=1/3, E[w]=0, E[|w|^2] = (1/3)*product-variance = 1/6.
    out = oracles.quad_hybrid_moments(1.0, 0.0, 0.0, 1.0)
    assert out.support_prob == pytest.approx(1.0 / 3.0, abs=1e-10)
    assert abs(out.mean) < 1e-12
    assert out.second_moment == pytest.approx(1.0 / 6.0, abs=1e-10)
    assert out.var == pytest.approx(1.0 / 6.0, abs=1e-10)
    assert out.ln_norm == pytest.approx(math.log(3.0 / (4.0 * math.pi)),
                                        abs=1e-10)


def test_quad_node_doubling_is_stable():
    base = oracles.quad_hybrid_moments(
        0.7, 1.3 - 0.4j, 0.8, 2.5, oracles.QuadratureSpec(nodes=401))
    fine = oracles.quad_hybrid_moments(
        0.7, 1.3 - 0.4j, 0.8, 2.5, oracles.QuadratureSpec(nodes=801))
    assert abs(base.support_prob - fine.support_prob) < 1e-8
    assert abs(base.mean - fine.mean) < 1e-8
    assert abs(base.var - fine.var) < 1e-8


def test_quad_spike_only_limit():
    out = oracles.quad_hybrid_moments(1.0, 0.5 + 0.5j, -40.0, 1.0)
    assert out.support_prob < 1e-12
    assert abs(out.mean) < 1e-12
    assert out.second_moment < 1e-12


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        oracles.QuadratureSpec(nodes=400)
    with pytest.raises(ValueError):
        oracles.QuadratureSpec(extent=0.0)
    with pytest.raises(ValueError):
        oracles.quad_hybrid_moments(-1.0, 0.0, 0.0, 1.0)


def test_pair_enumeration_uniform_case():
    t = oracles.enumerate_bivariate(0.0, 0.0, 0.5, 0.5)
    for v in (t.phi00, t.phi01, t.phi10, t.phi11):
        assert v == pytest.approx(0.25, abs=1e-15)
    assert t.mean_left == pytest.approx(0.5, abs=1e-15)
    assert t.mean_right == pytest.approx(0.5, abs=1e-15)


def test_pair_enumeration_normalization_and_means():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pl, pr = rng.uniform(-6, 6, size=2)
        t01, t10 = rng.uniform(0.05, 0.95, size=2)
        t = oracles.enumerate_bivariate(pl, pr, t01, t10)
        total = t.phi00 + t.phi01 + t.phi10 + t.phi11
        assert total == pytest.approx(1.0, abs=1e-12)
        assert t.mean_left == pytest.approx(t.phi10 + t.phi11, abs=1e-15)
        assert t.mean_right == pytest.approx(t.phi01 + t.phi11, abs=1e-15)
        assert 0.0 <= t.mean_left <= 1.0 and 0.0 <= t.mean_right <= 1.0


def test_exhaustive_rejects_large_m():
    with pytest.raises(ValueError):
        oracles.exhaustive_posterior(np.zeros(2), np.zeros((2, 13)),
                                     0.3, 0.3, 1.0, 1.0)


def test_exhaustive_support_probs_sum_to_one():
    rng = np.random.default_rng(1)
    phi = (rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6)))
    y = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    out = oracles.exhaustive_posterior(y, phi, 0.2, 0.4, 1.5, 3.0)
    assert out.support_probs.sum() == pytest.approx(1.0, abs=1e-10)
    assert out.support_probs.shape == (64,)


def test_exhaustive_high_snr_one_sparse():
    # orthogonal columns, noiseless-grade precision: mass concentrates on the
    # true singleton support
    m = 4
    phi = np.fft.fft(np.eye(m)) / 2.0  # orthogonal, unit-norm columns
    coeff = 1.3 - 0.7j
    y = coeff * phi[:, 1]
    out = oracles.exhaustive_posterior(y, phi, 0.3, 0.3, 1.0, 1e8)
    assert out.support_marginals[1] > 0.99
    assert np.all(out.support_marginals[[0, 2, 3]] < 0.01)
    assert abs(out.mean[1] - coeff) < 1e-3
    assert np.all(np.abs(out.mean[[0, 2, 3]]) < 1e-3)


def test_exhaustive_m2_hand_enumeration():
    # tau01 = tau10 = 0.5 makes the chain iid uniform over the 4 supports;
    # redo the whole computation with explicit 2x2 scalar algebra.
    rng = np.random.default_rng(2)
    phi = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    y = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    gamma, eta = 1.7, 4.0

    def ln_ev_and_mean(active):
        cov = np.eye(2, dtype=complex) / eta
        for j in active:
            cov = cov + np.outer(phi[:, j], phi[:, j].conj()) / gamma
        a, b = cov[0, 0], cov[0, 1]
        c, d = cov[1, 0], cov[1, 1]
        det = (a * d - b * c).real
        inv = np.array([[d, -b], [-c, a]]) / det
        quad = (y.conj() @ inv @ y).real
        ln_ev = -2 * math.log(math.pi) - math.log(det) - quad
        if not active:
            return ln_ev, np.zeros(2, dtype=complex)
        phi_s = phi[:, list(active)]
        prec = gamma * np.eye(len(active)) + eta * phi_s.conj().T @ phi_s
        mean_s = eta * np.linalg.solve(prec, phi_s.conj().T @ y)
        mean = np.zeros(2, dtype=complex)
        mean[list(active)] = mean_s
        return ln_ev, mean

    supports = [(), (0,), (1,), (0, 1)]
    lws = []
    means = []
    for s in supports:
        ln_ev, mean = ln_ev_and_mean(s)
        lws.append(math.log(0.25) + ln_ev)  # uniform prior mass
        means.append(mean)
    w = np.exp(np.array(lws) - max(lws))
    w = w / w.sum()
    hand_mean = sum(wi * mi for wi, mi in zip(w, means))
    hand_marg = np.array([w[1] + w[3], w[2] + w[3]])

    out = oracles.exhaustive_posterior(y, phi, 0.5, 0.5, gamma, eta)
    np.testing.assert_allclose(out.mean, hand_mean, atol=1e-12)
    np.testing.assert_allclose(out.support_marginals, hand_marg, atol=1e-12)
