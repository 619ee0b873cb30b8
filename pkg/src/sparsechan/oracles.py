"""Brute-force reference computations backing the test suite.

Everything here trades speed for being unmistakably literal: densities are
written out term by term, expectations are dense grids or exhaustive sums.
Nothing shares closed-form code with the solver modules it is used to check.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, log_expit

LOG_PI = math.log(math.pi)


@dataclass(frozen=True)
class QuadratureSpec:
    """2-D trapezoid grid over (Re w, Im w).

    extent is the half-width in product-posterior standard deviations; nodes
    is the per-axis count, kept odd so w=0 (the spike location) is exactly
    representable on an axis anchored at integer multiples of the step.
    """

    extent: float = 8.0
    nodes: int = 401

    def __post_init__(self):
        if self.nodes < 3 or self.nodes % 2 == 0:
            raise ValueError("nodes must be odd and >= 3")
        if not self.extent > 0:
            raise ValueError("extent must be positive")


@dataclass(frozen=True)
class QuadMoments:
    support_prob: float   # E[z] under the tilted distribution
    mean: complex         # E[w]
    second_moment: float  # E[|w|^2]
    var: float            # E[|w|^2] - |E[w]|^2
    ln_norm: float        # log of the tilting normalization constant


def _axis(center, step, half):
    # anchored at integer multiples of step so 0 is representable
    k0 = round(center / step)
    return (k0 + np.arange(-half, half + 1)) * step


def quad_hybrid_moments(sigma_cav, mu_cav, p_cav, gamma, spec=QuadratureSpec()):
    """Moments of one coefficient's tilted distribution by direct integration.

    The tilted density is cavity(w) * cavity(z) * factor(w|z) with
    factor(w|z=1) a zero-mean complex Gaussian of variance 1/gamma and
    factor(w|z=0) a point mass at w=0.  The z=0 branch is summed analytically;
    the z=1 branch is integrated on a trapezoid grid over (Re w, Im w).
    """
    sigma_cav = float(sigma_cav)
    gamma = float(gamma)
    if sigma_cav <= 0 or gamma <= 0:
        raise ValueError("cavity variance and slab precision must be positive")
    mu_cav = complex(mu_cav)

    # spike branch: weight sigma(-p) times the cavity density at w=0
    log_spike = float(log_expit(-p_cav)) - LOG_PI - math.log(sigma_cav) \
        - abs(mu_cav) ** 2 / sigma_cav

    # slab branch on a grid placed by product-Gaussian algebra (placement
    # affects only accuracy; the integrand below is the raw density product)
    slab_var = 1.0 / gamma
    v_prod = sigma_cav * slab_var / (sigma_cav + slab_var)
    m_prod = mu_cav * slab_var / (sigma_cav + slab_var)
    sd_axis = math.sqrt(v_prod / 2.0)  # per real axis
    half = (spec.nodes - 1) // 2
    step = spec.extent * sd_axis / half
    re = _axis(m_prod.real, step, half)
    im = _axis(m_prod.imag, step, half)
    w = re[:, None] + 1j * im[None, :]

    log_slab = (float(log_expit(p_cav))
                - LOG_PI - math.log(sigma_cav) - np.abs(w - mu_cav) ** 2 / sigma_cav
                - LOG_PI - math.log(slab_var) - np.abs(w) ** 2 / slab_var)

    ref = max(log_spike, float(log_slab.max()))
    f = np.exp(log_slab - ref)

    def integrate(values):
        return np.trapezoid(np.trapezoid(values, im, axis=1), re)

    mass_slab = integrate(f)
    mean_raw = integrate(w * f)
    second_raw = integrate(np.abs(w) ** 2 * f)
    mass_spike = math.exp(log_spike - ref)

    total = mass_spike + mass_slab
    support_prob = mass_slab / total
    mean = mean_raw / total
    second = second_raw / total
    return QuadMoments(support_prob=float(support_prob),
                       mean=complex(mean),
                       second_moment=float(second),
                       var=float(second - abs(mean) ** 2),
                       ln_norm=float(ref + math.log(total)))


@dataclass(frozen=True)
class PairTable:
    phi00: float
    phi01: float
    phi10: float
    phi11: float
    mean_left: float   # E[z_{m-1}]
    mean_right: float  # E[z_m]

    def as_array(self):
        return np.array([[self.phi00, self.phi01], [self.phi10, self.phi11]])


def enumerate_bivariate(p_left_cav, p_right_cav, tau01, tau10):
    """Joint pmf of one adjacent support pair by literal 4-outcome evaluation.

    Multiplies left cavity Bernoulli, chain transition, and right cavity
    Bernoulli for each of the four (z_left, z_right) outcomes, then normalizes.
    """
    if not (0.0 < tau01 < 1.0 and 0.0 < tau10 < 1.0):
        raise ValueError("transition probabilities must lie in (0, 1)")
    s_left = float(expit(p_left_cav))
    s_right = float(expit(p_right_cav))
    trans = {(0, 0): 1.0 - tau01, (0, 1): tau01,
             (1, 0): tau10, (1, 1): 1.0 - tau10}
    raw = {}
    for a in (0, 1):
        for b in (0, 1):
            left = s_left if a == 1 else 1.0 - s_left
            right = s_right if b == 1 else 1.0 - s_right
            raw[(a, b)] = left * trans[(a, b)] * right
    d = sum(raw.values())
    phi = {k: v / d for k, v in raw.items()}
    return PairTable(phi00=phi[(0, 0)], phi01=phi[(0, 1)],
                     phi10=phi[(1, 0)], phi11=phi[(1, 1)],
                     mean_left=phi[(1, 0)] + phi[(1, 1)],
                     mean_right=phi[(0, 1)] + phi[(1, 1)])


@dataclass(frozen=True)
class ExactPosterior:
    mean: np.ndarray              # exact posterior mean of w, (M,)
    support_marginals: np.ndarray  # exact P(z_m = 1), (M,)
    log_evidence: float
    support_probs: np.ndarray     # P(support) for every bit pattern, (2^M,)


def exhaustive_posterior(y, phi_matrix, tau01, tau10, gamma, eta, max_size=12):
    """Exact posterior by enumerating all 2^M supports.

    For each support: Markov prior mass (stationary start lambda =
    tau01/(tau01+tau10)), Gaussian evidence ln CN(y; 0, I/eta + Phi_S
    diag(1/gamma_S) Phi_S^H) via Cholesky, and the conditional Gaussian mean of
    the active coefficients.  Only viable for M <= max_size.
    """
    y = np.asarray(y)
    phi_matrix = np.asarray(phi_matrix)
    n, m = phi_matrix.shape
    if m > max_size:
        raise ValueError(f"exhaustive enumeration limited to M <= {max_size}")
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (m,))
    lam = tau01 / (tau01 + tau10)

    log_trans = {(0, 0): math.log(1.0 - tau01), (0, 1): math.log(tau01),
                 (1, 0): math.log(tau10), (1, 1): math.log(1.0 - tau10)}

    n_supports = 1 << m
    log_weights = np.empty(n_supports)
    cond_means = np.zeros((n_supports, m), dtype=complex)
    patterns = np.zeros((n_supports, m))

    for bits in range(n_supports):
        s = np.array([(bits >> j) & 1 for j in range(m)])
        patterns[bits] = s
        lp = math.log(lam) if s[0] else math.log(1.0 - lam)
        for j in range(1, m):
            lp += log_trans[(int(s[j - 1]), int(s[j]))]
        active = s.astype(bool)
        cov = np.eye(n, dtype=complex) / eta
        if active.any():
            phi_s = phi_matrix[:, active]
            cov = cov + (phi_s / gamma[active]) @ phi_s.conj().T
        chol = np.linalg.cholesky(cov)
        white = solve_triangular(chol, y, lower=True)
        log_det = 2.0 * float(np.sum(np.log(np.real(np.diag(chol)))))
        log_ev = -n * LOG_PI - log_det - float(np.real(white.conj() @ white))
        log_weights[bits] = lp + log_ev
        if active.any():
            prec = np.diag(gamma[active]).astype(complex) \
                + eta * phi_s.conj().T @ phi_s
            cond_means[bits, active] = eta * np.linalg.solve(
                prec, phi_s.conj().T @ y)

    ref = log_weights.max()
    weights = np.exp(log_weights - ref)
    total = weights.sum()
    probs = weights / total
    mean = probs @ cond_means
    marginals = probs @ patterns
    return ExactPosterior(mean=mean, support_marginals=marginals,
                          log_evidence=float(ref + math.log(total)),
                          support_probs=probs)
