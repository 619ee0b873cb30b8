"""Inner expectation-propagation loop for the clustered spike-and-slab model.

The posterior over grid coefficients w (complex, length M) and support bits z
is approximated by a global complex Gaussian (mu, Sigma) together with
per-coefficient Bernoulli logits p.  Three factor groups are maintained:

  * the Gaussian likelihood of y = Phi w + noise, handled exactly through an
    N x N solve,
  * per-coefficient Gaussian x Bernoulli sites standing in for the
    spike-and-slab factors,
  * forward/reverse Bernoulli logit messages standing in for the first-order
    Markov support chain.

Bernoulli bookkeeping is done entirely on logits, and Gaussian density ratios
as differences of log-densities; neither is ever exponentiated before
subtracting.  The support logit vector is derived state: p = p2 + pF + pR
(reverse padded with 0 at the last index), so the recombination identity holds
exactly at any point in the iteration.

Complex Gaussian convention: CN(x; mu, nu) = (1/(pi*nu)) exp(-|x-mu|^2/nu).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_blas_funcs, get_lapack_funcs
from scipy.special import expit, log_expit

LOG_PI = math.log(math.pi)

SIGMA2_INIT = 100.0      # site variance at cold start (10^2)
SIGMA2_RESET = 100.0     # replacement when a site precision candidate is negative
SIGMA2_CAP = 1e8         # stand-in for a fully uninformative site
SIGMA2_FLOOR = 1e-12     # keeps site precisions finite on hard zeros
VAR_FLOOR = 1e-300       # tilted variance underflows to 0 when the spike wins
# A cavity wider than the widest representable site carries no information:
# its moment match has no finite limit (mu_cav grows like the cavity variance
# and |mu_cav|^2 eventually overflows), so such sites are skipped exactly like
# nonpositive-precision ones.
CAVITY_PREC_FLOOR = 1.0 / SIGMA2_CAP
PROB_CLIP = 1e-12        # Bernoulli probabilities clipped to [clip, 1-clip]
TAU_CLIP = 1e-6
BETA0 = 0.5
KAPPA = 0.945


class SingularSystemError(RuntimeError):
    """The N x N measurement-space system could not be factorized."""


_LAPACK = {}


def _lapack_for(array):
    # cache (herk, trmm, gemm, potrf, trtri) per dtype; get_*_funcs is ~20us
    # a call
    funcs = _LAPACK.get(array.dtype.char)
    if funcs is None:
        herk, trmm, gemm = get_blas_funcs(("herk", "trmm", "gemm"), (array,))
        funcs = (herk, trmm, gemm,
                 *get_lapack_funcs(("potrf", "trtri"), (array,)))
        _LAPACK[array.dtype.char] = funcs
    return funcs


def ln_cgauss0(mu, var):
    """ln CN(0; mu, var) elementwise."""
    return -LOG_PI - np.log(var) - np.abs(mu) ** 2 / var


def logit(prob):
    """Logit with probabilities clipped to [PROB_CLIP, 1 - PROB_CLIP]."""
    prob = np.clip(prob, PROB_CLIP, 1.0 - PROB_CLIP)
    return np.log(prob) - np.log1p(-prob)


def damp(new_value, old_value, beta):
    """Convex smoothing beta*new + (1-beta)*old; works for real and complex."""
    return beta * new_value + (1.0 - beta) * old_value


def _sig(x):
    # scalar sigmoid, overflow-safe (used in the sequential chain passes)
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class SiteFactors:
    """Per-coefficient Gaussian x Bernoulli site parameters."""

    mu2: np.ndarray     # complex (M,)
    sigma2: np.ndarray  # real (M,), always > 0
    p2: np.ndarray      # real (M,)


@dataclass
class MarkovMessages:
    """Forward/reverse Bernoulli logit messages along the support chain.

    p_fwd[0] is pinned to logit(lambda) by convention (stationary start);
    there is no reverse message into the last site, so p_rev has length M-1.
    """

    p_fwd: np.ndarray  # real (M,)
    p_rev: np.ndarray  # real (M-1,)


@dataclass
class GlobalPosterior:
    mu: np.ndarray     # complex (M,)
    sigma: np.ndarray  # complex (M, M), Hermitian
    p: np.ndarray      # real (M,) support logits
    # contiguous real copy of sigma's diagonal: the site sweep reads it every
    # iteration, and gathering it from the matrix is a strided pass per call
    sigma_diag: np.ndarray | None = None


@dataclass
class EpState:
    """Mutable solver state; persists across calls for warm starting."""

    sites: SiteFactors
    msgs: MarkovMessages
    mu_last: np.ndarray | None = None  # posterior mean of the previous iteration
    iters: int = 0                     # iterations executed by the last run


def init_state(num_coeffs, lam=None, p0=None):
    """Cold-start state.

    With lam: Markov-chain mode, p_fwd[0] = logit(lam) and all other messages
    zero.  With p0: iid-Bernoulli mode, every forward logit is logit(p0) and
    reverse messages stay at zero (and are never updated).
    """
    sites = SiteFactors(mu2=np.zeros(num_coeffs, dtype=complex),
                        sigma2=np.full(num_coeffs, SIGMA2_INIT),
                        p2=np.zeros(num_coeffs))
    p_fwd = np.zeros(num_coeffs)
    if p0 is not None:
        p_fwd[:] = logit(p0)
    elif lam is not None:
        p_fwd[0] = logit(lam)
    else:
        raise ValueError("provide lam (chain mode) or p0 (iid mode)")
    msgs = MarkovMessages(p_fwd=p_fwd, p_rev=np.zeros(max(num_coeffs - 1, 0)))
    return EpState(sites=sites, msgs=msgs)


def support_logits(sites, msgs):
    """Recombined per-coefficient support logits p = p2 + pF (+ pR)."""
    p = sites.p2 + msgs.p_fwd
    p[:-1] += msgs.p_rev
    return p


def recompute_global(y, phi_matrix, eta, sites, msgs, phi_h=None, phi_h_y=None):
    """Global Gaussian refresh through the measurement-space system.

    Sigma = S2 - S2 Phi^H (I/eta + Phi S2 Phi^H)^{-1} Phi S2 with S2 the
    diagonal site covariance (an N x N factorization instead of M x M), and
    mu = Sigma (eta Phi^H y + S2^{-1} mu2).  phi_h and phi_h_y, when given,
    must equal phi_matrix.conj().T and phi_h @ y (loop invariants that
    callers iterating on the same system precompute once).
    """
    rt = np.sqrt(sites.sigma2)
    root = phi_matrix * rt[None, :]                      # Phi sqrt(S2)
    scaled = root * rt[None, :]                          # Phi S2
    # raw BLAS/LAPACK: the wrapped scipy versions spend more time validating
    # than computing at N=48.  herk builds only the lower triangle of
    # Phi S2 Phi^H (half the gemm flops), which is all the factorizations
    # read, and its Fortran-ordered output means no copies anywhere.
    herk, trmm, gemm, potrf, trtri = _lapack_for(phi_matrix)
    gram = herk(1.0, root, lower=1)
    np.fill_diagonal(gram, gram.diagonal().real + 1.0 / eta)
    chol, info = potrf(gram, lower=1, clean=0, overwrite_a=1)
    if info != 0:
        raise SingularSystemError(
            "measurement-space system not positive definite "
            f"(cond ~ {_gram_cond(root, eta):.3e})")
    # explicit triangular inverse, then L^{-1}(Phi S2) as a triangular
    # multiply: for a triangular factor this route has the same cond(L)*eps
    # forward-error class as a trsm solve, and trmm has no substitution
    # dependency chain, so it runs ~3x faster at these shapes
    l_inv, info = trtri(chol, lower=1, unitdiag=0, overwrite_c=1)
    if info != 0:
        raise SingularSystemError("triangular factor is singular")
    half = trmm(1.0, l_inv, scaled, lower=1, overwrite_b=1)
    # -half^H half through the conjugate-transpose flag: numpy's @ would
    # materialize half.conj() first (an N x M copy per refresh)
    sigma = gemm(-1.0, half, half, trans_a=2)
    # the product's diagonal is exactly real (conj(x)*x terms), so build the
    # contiguous diagonal buffer here as a side product; writing it back real
    # zeroes the imaginary slots, and the symmetrize below maps it to itself
    diag = sigma.diagonal().real + sites.sigma2
    np.fill_diagonal(sigma, diag)
    sigma = 0.5 * (sigma + sigma.conj().T)               # keep exactly Hermitian
    if phi_h_y is None:
        if phi_h is None:
            phi_h = phi_matrix.conj().T
        phi_h_y = phi_h @ y
    rhs = eta * phi_h_y + sites.mu2 / sites.sigma2
    mu = sigma @ rhs
    return GlobalPosterior(mu=mu, sigma=sigma, p=support_logits(sites, msgs),
                           sigma_diag=diag)


def _gram_cond(root, eta):
    # failure-path diagnostic only: herk filled one triangle, rebuild in full
    gram = root @ root.conj().T
    np.fill_diagonal(gram, gram.diagonal() + 1.0 / eta)
    return np.linalg.cond(gram)


def cavity_q2(sigma_mm, mu_m, p_m, sigma2_m, mu2_m, p2_m):
    """Divide one site out of its marginal.  Elementwise over arrays.

    Returns (sigma_cav, mu_cav, p_cav, valid); entries with nonpositive
    marginal, or with cavity variance beyond the uninformative ceiling
    1/CAVITY_PREC_FLOOR, are flagged invalid (their Gaussian outputs are
    placeholders) and the caller skips those site updates for the sweep.
    """
    sigma_mm = np.asarray(sigma_mm, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = 1.0 / sigma_mm - 1.0 / sigma2_m
    valid = (sigma_mm > 0) & (prec > CAVITY_PREC_FLOOR)
    prec_safe = np.where(valid, prec, 1.0)
    marg_safe = np.where(sigma_mm > 0, sigma_mm, 1.0)
    sigma_cav = 1.0 / prec_safe
    mu_cav = sigma_cav * (mu_m / marg_safe - mu2_m / sigma2_m)
    p_cav = p_m - p2_m
    return sigma_cav, mu_cav, p_cav, valid


def hybrid_moments(sigma_cav, mu_cav, p_cav, gamma, with_ln_norm=True):
    """Moment-match the tilted (cavity x spike-and-slab) distribution.

    Elementwise over arrays.  Returns (p_new, mu_new, var_new, ln_norm): the
    tilted support logit, mean, central variance of w, and the log of the
    tilting normalization constant.  The solver loop discards ln_norm, so
    with_ln_norm=False skips it (returned as None).
    """
    sigma_cav = np.asarray(sigma_cav, dtype=float)
    slab_var = 1.0 / np.asarray(gamma, dtype=float)
    wide = sigma_cav + slab_var
    abs2 = np.abs(mu_cav) ** 2
    # log-density difference ln CN(0; mu, wide) - ln CN(0; mu, cav)
    delta = np.log(sigma_cav / wide) + abs2 * (1.0 / sigma_cav - 1.0 / wide)
    p_new = p_cav + delta
    s = expit(p_new)
    mu_new = mu_cav * s * slab_var / wide
    d_sigma = s * (abs2 - wide) / wide ** 2 \
        + (1.0 - s) * (abs2 - sigma_cav) / sigma_cav ** 2
    grad_abs2 = abs2 * (s / wide + (1.0 - s) / sigma_cav) ** 2
    var_new = sigma_cav + sigma_cav ** 2 * (d_sigma - grad_abs2)
    var_new = np.maximum(var_new, VAR_FLOOR)
    if not with_ln_norm:
        return p_new, mu_new, var_new, None
    ln_norm = np.logaddexp(log_expit(p_cav) + ln_cgauss0(mu_cav, wide),
                           log_expit(-p_cav) + ln_cgauss0(mu_cav, sigma_cav))
    return p_new, mu_new, var_new, ln_norm


def update_q2_site(p_new, mu_new, var_new, sigma_cav, mu_cav, p_cav):
    """Divide the cavity back out of the matched hybrid.  Elementwise.

    A negative site-variance candidate (the hybrid came out wider than the
    cavity) is replaced by SIGMA2_RESET before damping; an exactly-zero
    precision candidate (no Gaussian information) becomes SIGMA2_CAP.
    Returns undamped candidates (sigma2, mu2, p2).

    The site mean is the natural-parameter ratio lam2/prec2, never
    sigma2 * lam2: when the spike wins, var_new collapses to VAR_FLOOR while
    sigma2 is clipped up to SIGMA2_FLOOR, and multiplying the raw lam2
    (~ mu_new/var_new ~ 1e300) by the clipped variance manufactures site
    means of ~1e288 that blow up the whole solve two iterations later.  The
    ratio keeps the mean finite (~ mu_new) no matter what the clips do.
    """
    var_new = np.maximum(np.asarray(var_new, dtype=float), VAR_FLOOR)
    prec2 = 1.0 / var_new - 1.0 / sigma_cav
    # masked divide: exactly-zero precision candidates stay at the +inf fill
    raw = np.divide(1.0, prec2, out=np.full_like(prec2, np.inf),
                    where=prec2 != 0.0)
    sigma2 = np.where(raw > 0, raw, SIGMA2_RESET)
    sigma2 = np.clip(sigma2, SIGMA2_FLOOR, SIGMA2_CAP)
    lam2 = mu_new / var_new - mu_cav / sigma_cav
    pos = prec2 > 0
    mu2 = np.where(pos, lam2 / np.where(pos, prec2, 1.0), sigma2 * lam2)
    p2 = p_new - p_cav
    return sigma2, mu2, p2


def _fused_site_sweep(sigma_diag, mu, p, sites, slab_var, beta):
    """cavity_q2 -> hybrid_moments -> update_q2_site -> damp in one pass.

    Same algebra as the composed route (the property tests pin them to each
    other) with the shared reciprocals computed once: at these problem sizes
    the composed route spends more time in ufunc dispatch than in arithmetic.
    Applies the damped update to sites in place and returns True.  Returns
    False without touching anything when any marginal is nonpositive or any
    cavity precision falls below CAVITY_PREC_FLOOR -- the caller then reruns
    the readable masked route, which handles per-site validity.
    """
    if sigma_diag.min() <= 0.0:
        return False
    inv_s2 = 1.0 / sites.sigma2
    inv_marg = 1.0 / sigma_diag
    prec = inv_marg - inv_s2             # cavity precision
    if prec.min() <= CAVITY_PREC_FLOOR:
        return False
    sigma_cav = 1.0 / prec
    mu_cav = sigma_cav * (mu * inv_marg - sites.mu2 * inv_s2)
    p_cav = p - sites.p2

    wide = sigma_cav + slab_var
    inv_wide = 1.0 / wide
    abs2 = (mu_cav * np.conjugate(mu_cav)).real
    delta = np.log(sigma_cav * inv_wide) + abs2 * (prec - inv_wide)
    s = expit(p_cav + delta)
    u = s * inv_wide                     # hybrid weight against the slab
    v = (1.0 - s) * prec                 # hybrid weight against the spike
    grad = u + v
    mu_new = mu_cav * (slab_var * u)
    # curvature of the log-partition in the cavity mean, grouped so the
    # abs2 terms share one multiply: (abs2*iw-1)*u + (abs2*pc-1)*v - abs2*g^2
    #   = abs2*(u*iw + v*pc - g^2) - g
    curv = u * inv_wide
    curv += v * prec
    curv -= grad * grad
    curv *= abs2
    curv -= grad
    var_new = np.maximum(sigma_cav * (1.0 + sigma_cav * curv), VAR_FLOOR)

    inv_var = 1.0 / var_new
    prec2 = inv_var - prec
    lam2 = mu_new * inv_var - mu_cav * prec
    if prec2.min() > 0.0:
        # common case: every site sharpened its marginal, divide directly;
        # the mean is the natural-parameter ratio so the variance clips
        # cannot inflate it (see update_q2_site)
        sigma2 = np.clip(1.0 / prec2, SIGMA2_FLOOR, SIGMA2_CAP)
        mu2 = lam2 / prec2
    else:
        raw = np.divide(1.0, prec2, out=np.full_like(prec2, np.inf),
                        where=prec2 != 0.0)
        sigma2 = np.clip(np.where(raw > 0, raw, SIGMA2_RESET),
                         SIGMA2_FLOOR, SIGMA2_CAP)
        pos = prec2 > 0
        mu2 = np.where(pos, lam2 / np.where(pos, prec2, 1.0), sigma2 * lam2)

    om_beta = 1.0 - beta
    sites.sigma2 *= om_beta
    sites.sigma2 += beta * sigma2
    sites.mu2 *= om_beta
    sites.mu2 += beta * mu2
    sites.p2 *= om_beta
    sites.p2 += beta * delta            # p_new - p_cav, without the cancellation
    return True


def pair_marginal_table(p_left_cav, p_right_cav, tau01, tau10):
    """Closed-form joint pmf of an adjacent support pair and its marginals.

    phi[a, b] multiplies the left cavity Bernoulli, the chain transition
    a -> b, and the right cavity Bernoulli, normalized by their total.
    Returns (phi 2x2, E[z_left], E[z_right]).
    """
    sl, cl = _sig(p_left_cav), _sig(-p_left_cav)
    sr, cr = _sig(p_right_cav), _sig(-p_right_cav)
    raw = np.array([[cl * cr * (1.0 - tau01), cl * sr * tau01],
                    [sl * cr * tau10, sl * sr * (1.0 - tau10)]])
    phi = raw / raw.sum()
    return phi, phi[1, 0] + phi[1, 1], phi[0, 1] + phi[1, 1]


def forward_reverse_pass(sites, msgs, tau01, tau10, beta=1.0, lam=None):
    """One sequential forward sweep then one reverse sweep over the chain.

    Forward (m = 2..M): the left cavity logit p2[m-1] + pF[m-1] is recomputed
    from the just-updated forward message, pushed through the transition, and
    the (damped) logit of the predicted success probability becomes pF[m].
    Reverse (m = M-1..1): mirror image with the cavity p2[m+1] + pR[m+1]
    (p2[M] alone at the right edge) and a ratio-form logit, since the reverse
    direction is normalized against both outcomes of z_m.

    Messages are updated in place; pF[0] stays pinned (to logit(lam) if given).
    """
    tau01 = min(max(tau01, TAU_CLIP), 1.0 - TAU_CLIP)
    tau10 = min(max(tau10, TAU_CLIP), 1.0 - TAU_CLIP)
    if lam is not None:
        lam = min(max(lam, PROB_CLIP), 1.0 - PROB_CLIP)
        msgs.p_fwd[0] = math.log(lam) - math.log1p(-lam)
    m_total = len(msgs.p_fwd)
    if m_total < 2:
        return msgs
    # hot loops on plain floats: numpy scalar indexing would cost ~10x and
    # push the per-iteration profile away from the N*M^2 refresh.  The two
    # directions are independent recurrences (each reads only its own
    # messages), so each gets its own tight loop carrying the just-updated
    # message instead of re-indexing it; the edge case of no reverse message
    # into the last site falls out of carrying rev = 0.
    # With s = sigmoid(logit) and E = exp(-logit), the mixed transition
    # s*(1-t10) + (1-s)*t01 has logit
    #   log((1-t10) + t01*E) - log(t10 + (1-t01)*E),
    # the 1/(1+E) normalizer cancelling between numerator and denominator.
    # Both log arguments stay in [min(tau, 1-tau), ~E], so no clamp is
    # needed (the taus are already clipped away from 0 and 1).  Logits
    # saturate hard once the support decides, and exp() on those arguments
    # underflows through the denormal range where the arithmetic runs an
    # order of magnitude slower -- that is the common case late in a solve,
    # not the corner case.  Past |logit| = 40 the sigmoid is within 4e-18
    # of its limit (at most ~1e-11 on the outgoing message after the
    # tau / (1-tau) amplification), so both tails short-circuit to the
    # precomputed limit messages and skip the transcendentals entirely.
    p2 = sites.p2.tolist()
    om_beta = 1.0 - beta
    om_t01 = 1.0 - tau01
    om_t10 = 1.0 - tau10
    exp, log = math.exp, math.log
    fwd_hi = log(om_t10 / tau10)     # forward message once s -> 1
    fwd_lo = log(tau01 / om_t01)     # forward message once s -> 0
    rev_hi = log(om_t10 / tau01)     # reverse message once s -> 1
    rev_lo = log(tau10 / om_t01)     # reverse message once s -> 0
    # the damping blend's old-message halves are loop-independent: scale them
    # vectorized, leaving one multiply-add per step inside
    damped_f = (om_beta * msgs.p_fwd).tolist()
    damped_r = (om_beta * msgs.p_rev[::-1]).tolist()

    # q_prev/old_f: left-cavity base and damped old message for the forward
    # walk (sites m-1 and m); q_next/old_r mirror them for the reverse walk
    # (sites M-m and M-1-m)
    fwd = float(msgs.p_fwd[0])
    out_fwd = [fwd]
    push = out_fwd.append
    for q_prev, old_f in zip(p2, damped_f[1:]):
        left = q_prev + fwd
        if left > 40.0:
            msg = fwd_hi
        elif left < -40.0:
            msg = fwd_lo
        else:
            e = exp(-left)
            msg = log((om_t10 + tau01 * e) / (tau10 + om_t01 * e))
        fwd = beta * msg + old_f
        push(fwd)

    rev = 0.0
    out_rev = []
    push = out_rev.append
    for q_next, old_r in zip(p2[::-1], damped_r):
        right = q_next + rev
        if right > 40.0:
            msg = rev_hi
        elif right < -40.0:
            msg = rev_lo
        else:
            e = exp(-right)
            msg = log((om_t10 + tau10 * e) / (tau01 + om_t01 * e))
        rev = beta * msg + old_r
        push(rev)

    msgs.p_fwd[:] = out_fwd
    out_rev.reverse()
    msgs.p_rev[:] = out_rev
    return msgs


def run_ep(y, phi_matrix, params, state=None, n_iter=100, eps=1e-4,
           markov=True, beta0=BETA0, kappa=KAPPA):
    """Full EP solve: iterate global refresh, parallel site sweep, chain passes.

    params must expose tau01, tau10, gamma (scalar or (M,)), eta.  state is a
    warm start from a previous run (cold start if None).  Convergence is the
    relative change of the global mean between consecutive iterations; when it
    drops below eps at iteration n, exactly n global refreshes have run.

    Returns (GlobalPosterior, EpState).  The posterior carries mu and Sigma
    from the last global refresh and the support logits recombined from the
    post-sweep sites and messages.
    """
    m_total = phi_matrix.shape[1]
    gamma = np.broadcast_to(np.asarray(params.gamma, dtype=float), (m_total,))
    slab_var = 1.0 / gamma
    lam = params.tau01 / (params.tau01 + params.tau10)
    if state is None:
        state = init_state(m_total, lam=lam)
    sites, msgs = state.sites, state.msgs

    beta = beta0
    mu_prev = state.mu_last
    # Fortran order lets the triangular solve work in place (no copy per
    # refresh); the conjugate transpose and Phi^H y are loop invariants
    phi_f = np.asfortranarray(phi_matrix)
    phi_h = np.ascontiguousarray(phi_f.conj().T)
    phi_h_y = phi_h @ y
    post = None
    iters = 0
    for _ in range(n_iter):
        post = recompute_global(y, phi_f, params.eta, sites, msgs,
                                phi_h=phi_h, phi_h_y=phi_h_y)
        iters += 1

        # parallel q2 sweep: every site reads the same snapshot
        sigma_diag = post.sigma_diag
        if not _fused_site_sweep(sigma_diag, post.mu, post.p, sites,
                                 slab_var, beta):
            # some marginal or cavity came out nonpositive: masked route
            cav_sigma, cav_mu, cav_p, ok = cavity_q2(
                sigma_diag, post.mu, post.p, sites.sigma2, sites.mu2,
                sites.p2)
            if np.any(ok):
                p_new, mu_new, var_new, _ = hybrid_moments(
                    cav_sigma[ok], cav_mu[ok], cav_p[ok], gamma[ok],
                    with_ln_norm=False)
                s2, m2, q2 = update_q2_site(p_new, mu_new, var_new,
                                            cav_sigma[ok], cav_mu[ok],
                                            cav_p[ok])
                sites.sigma2[ok] = damp(s2, sites.sigma2[ok], beta)
                sites.mu2[ok] = damp(m2, sites.mu2[ok], beta)
                sites.p2[ok] = damp(q2, sites.p2[ok], beta)

        if markov:
            forward_reverse_pass(sites, msgs, params.tau01, params.tau10,
                                 beta=beta, lam=lam)

        converged = False
        if mu_prev is not None:
            d = post.mu - mu_prev
            num2 = float(np.vdot(d, d).real)
            den2 = float(np.vdot(mu_prev, mu_prev).real)
            converged = num2 <= (eps * eps) * den2 if den2 > 0 else num2 == 0.0
        mu_prev = post.mu
        beta *= kappa
        if converged:
            break

    state.mu_last = mu_prev
    state.iters = iters
    final = GlobalPosterior(mu=post.mu, sigma=post.sigma,
                            p=support_logits(sites, msgs),
                            sigma_diag=post.sigma_diag)
    return final, state
