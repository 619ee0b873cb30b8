"""Monte Carlo harness: config parsing, seeded sweeps, CSV emission.

The CSV row schema is fixed (see CSV_COLUMNS) and the output is byte-stable
for a given (config, seed) no matter how many workers run the trials: every
trial derives its own generator from a keyed 64-bit hash of
(algorithm, sweep point, trial index), rows are sorted before writing, and
wall-clock timing is left blank unless explicitly requested.
"""

import csv
import hashlib
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import ep, oracles
from .em import EmConfig, run_em_ep, run_em_ep_b
from .signal_model import (ArrayGeometry, DEFAULT_D_OVER_LAMBDA,
                           build_dictionary, generate_pilots, measure,
                           synthesize_channel)

CSV_COLUMNS = ("algorithm", "sweep_name", "sweep_value", "trial", "nmse_num",
               "nmse_den", "em_iters", "ep_iters_total", "wall_ms",
               "error_flag")
CONVERGE_COLUMNS = ("algorithm", "trial", "em_iter", "mu_rel_change",
                    "xi_err_db", "ep_iters")

_REQUIRED = ("G", "M", "N", "L_s", "L_p", "A_degrees", "snr_db", "trials",
             "seed", "algorithms")
_OPTIONAL = ("output_path", "n_em", "n_ep", "eps_em", "eps_ep",
             "d_over_lambda")
_ALGORITHM_NAMES = ("em_ep", "em_ep_b", "em_ep_no_gr")

SUMMARY_FLOOR_DB = -300.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    g: int
    m: int
    n: object            # int, or tuple of ints when swept
    l_s: int
    l_p: int
    a_degrees: float
    snr_db: object       # float, or tuple of floats when swept
    trials: int
    seed: int
    algorithms: tuple
    output_path: str = "results.csv"
    n_em: int = 100
    n_ep: int = 100
    eps_em: float = 1e-4
    eps_ep: float = 1e-4
    d_over_lambda: float = DEFAULT_D_OVER_LAMBDA

    @property
    def sweep_name(self):
        # degenerate all-scalar configs count as a one-point snr_db sweep
        return "N" if isinstance(self.n, tuple) else "snr_db"

    @property
    def sweep_values(self):
        if isinstance(self.n, tuple):
            return self.n
        if isinstance(self.snr_db, tuple):
            return self.snr_db
        return (self.snr_db,)


def _parse_int(token, line_no, key, minimum=1):
    try:
        value = int(token)
    except ValueError:
        raise ConfigError(f"line {line_no}: {key} must be an integer, "
                          f"got {token!r}") from None
    if value < minimum:
        raise ConfigError(f"line {line_no}: {key} must be >= {minimum}")
    return value


def _parse_float(token, line_no, key):
    try:
        return float(token)
    except ValueError:
        raise ConfigError(f"line {line_no}: {key} must be a number, "
                          f"got {token!r}") from None


def _split_list(raw, line_no, key):
    tokens = [t.strip() for t in raw.split(",")]
    if any(t == "" for t in tokens):
        raise ConfigError(f"line {line_no}: empty element in {key} list")
    return tokens


def parse_config(text):
    """Parse ``key = value`` lines into a validated ExperimentConfig.

    Lists are comma separated.  N and snr_db may each be a list but not
    both (one swept axis per run).  Unknown keys, repeats, and malformed
    values fail with the offending line number.
    """
    seen = {}
    lines = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, _, raw_value = line.partition("=")
        key, raw_value = key.strip(), raw_value.strip()
        if key not in _REQUIRED and key not in _OPTIONAL:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {line_no}: duplicate key {key!r} "
                              f"(first on line {lines[key]})")
        if raw_value == "":
            raise ConfigError(f"line {line_no}: empty value for {key!r}")
        seen[key] = raw_value
        lines[key] = line_no

    missing = [k for k in _REQUIRED if k not in seen]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))

    out = {}
    for key in ("G", "M", "L_s", "L_p", "trials"):
        out[key] = _parse_int(seen[key], lines[key], key)
    seed = _parse_int(seen["seed"], lines["seed"], "seed", minimum=0)
    if seed >= 2 ** 64:
        raise ConfigError(f"line {lines['seed']}: seed must fit in 64 bits")

    n_tokens = _split_list(seen["N"], lines["N"], "N")
    if len(n_tokens) == 1:
        n_value = _parse_int(n_tokens[0], lines["N"], "N")
    else:
        n_value = tuple(_parse_int(t, lines["N"], "N") for t in n_tokens)

    snr_tokens = _split_list(seen["snr_db"], lines["snr_db"], "snr_db")
    if len(snr_tokens) == 1:
        snr_value = _parse_float(snr_tokens[0], lines["snr_db"], "snr_db")
    else:
        snr_value = tuple(_parse_float(t, lines["snr_db"], "snr_db")
                          for t in snr_tokens)
    if isinstance(n_value, tuple) and isinstance(snr_value, tuple):
        raise ConfigError(f"line {lines['snr_db']}: N and snr_db cannot "
                          "both be swept")

    a_degrees = _parse_float(seen["A_degrees"], lines["A_degrees"],
                             "A_degrees")
    if not 0 < a_degrees < 180:
        raise ConfigError(f"line {lines['A_degrees']}: A_degrees must lie "
                          "in (0, 180)")

    algorithms = tuple(_split_list(seen["algorithms"], lines["algorithms"],
                                   "algorithms"))
    for name in algorithms:
        if name not in _ALGORITHM_NAMES:
            raise ConfigError(f"line {lines['algorithms']}: unknown "
                              f"algorithm {name!r}")
    if len(set(algorithms)) != len(algorithms):
        raise ConfigError(f"line {lines['algorithms']}: duplicate algorithm")

    extra = {}
    if "output_path" in seen:
        extra["output_path"] = seen["output_path"]
    for key in ("n_em", "n_ep"):
        if key in seen:
            extra[key] = _parse_int(seen[key], lines[key], key)
    for key in ("eps_em", "eps_ep"):
        if key in seen:
            value = _parse_float(seen[key], lines[key], key)
            if value < 0:
                raise ConfigError(f"line {lines[key]}: {key} must be >= 0")
            extra[key] = value
    if "d_over_lambda" in seen:
        value = _parse_float(seen["d_over_lambda"], lines["d_over_lambda"],
                             "d_over_lambda")
        if value <= 0:
            raise ConfigError(f"line {lines['d_over_lambda']}: "
                              "d_over_lambda must be positive")
        extra["d_over_lambda"] = value

    return ExperimentConfig(g=out["G"], m=out["M"], n=n_value,
                            l_s=out["L_s"], l_p=out["L_p"],
                            a_degrees=a_degrees, snr_db=snr_value,
                            trials=out["trials"], seed=seed,
                            algorithms=algorithms, **extra)


def child_seed(master_seed, algorithm, sweep_name, sweep_value, trial):
    """Keyed 64-bit mix so each (algorithm, point, trial) gets its own
    independent stream; adding algorithms or sweep points never perturbs
    the streams of the others."""
    tag = f"{algorithm}|{sweep_name}={sweep_value!r}|{trial}".encode()
    digest = hashlib.blake2b(tag, key=master_seed.to_bytes(8, "little"),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ----------------------------------------------------------------- solvers

def _em_config(cfg, grid_refinement, baseline_mode="markov"):
    return EmConfig(m_grid=cfg.m, n_em=cfg.n_em, n_ep=cfg.n_ep,
                    eps_em=cfg.eps_em, eps_ep=cfg.eps_ep,
                    grid_refinement=grid_refinement,
                    baseline_mode=baseline_mode)


def _solve_em_ep(y, pilots, cfg, geom):
    return run_em_ep(y, pilots, _em_config(cfg, True), geom)


def _solve_em_ep_no_gr(y, pilots, cfg, geom):
    return run_em_ep(y, pilots, _em_config(cfg, False), geom)


def _solve_em_ep_b(y, pilots, cfg, geom):
    return run_em_ep_b(y, pilots, _em_config(cfg, True), geom)


# dispatch indirection: resolved at call time so tests can substitute solvers
ALGORITHMS = {
    "em_ep": _solve_em_ep,
    "em_ep_no_gr": _solve_em_ep_no_gr,
    "em_ep_b": _solve_em_ep_b,
}


def _draw_instance(cfg, sweep_value, rng):
    n = sweep_value if cfg.sweep_name == "N" else cfg.n
    snr = sweep_value if cfg.sweep_name == "snr_db" else cfg.snr_db
    geom = ArrayGeometry(cfg.g, cfg.d_over_lambda)
    channel = synthesize_channel(cfg.l_s, cfg.l_p,
                                 math.radians(cfg.a_degrees), geom, rng)
    pilots = generate_pilots(n, cfg.g, rng)
    meas = measure(pilots, channel.h, snr, rng)
    return geom, channel, pilots, meas


def run_trial(cfg, algorithm, sweep_value, trial, timing=False):
    """One Monte Carlo trial -> CSV field dict.  Solver exceptions become a
    flagged row; they never propagate."""
    seed = child_seed(cfg.seed, algorithm, cfg.sweep_name, sweep_value, trial)
    rng = np.random.default_rng(seed)
    row = {"algorithm": algorithm, "sweep_name": cfg.sweep_name,
           "sweep_value": _fmt(sweep_value), "trial": trial,
           "nmse_num": "", "nmse_den": "", "em_iters": "",
           "ep_iters_total": "", "wall_ms": "", "error_flag": 0}
    try:
        geom, channel, pilots, meas = _draw_instance(cfg, sweep_value, rng)
        start = time.perf_counter()
        result = ALGORITHMS[algorithm](meas.y, pilots, cfg, geom)
        elapsed_ms = (time.perf_counter() - start) * 1e3
        row["nmse_num"] = _fmt(float(np.sum(np.abs(result.h_hat
                                                   - channel.h) ** 2)))
        row["nmse_den"] = _fmt(float(np.sum(np.abs(channel.h) ** 2)))
        row["em_iters"] = result.em_iterations
        row["ep_iters_total"] = int(sum(result.ep_iters))
        if timing:
            row["wall_ms"] = f"{elapsed_ms:.3f}"
    except Exception as exc:  # noqa: BLE001 - flagged row, sweep continues
        row["error_flag"] = 1
        print(f"trial failed: {algorithm} {cfg.sweep_name}="
              f"{sweep_value} trial={trial}: {exc}", file=sys.stderr)
    return row


def _fmt(value):
    if isinstance(value, int):
        return str(value)
    return "%.17g" % value


def _run_trial_task(args):
    return run_trial(*args)


def run_experiment(cfg, jobs=1, timing=False, out_stream=None):
    """Run the full sweep, write the CSV, print the summary table.

    Returns (csv_path, flagged_count).  Row order is
    (algorithm, sweep_value, trial) regardless of jobs.
    """
    tasks = [(cfg, algorithm, value, trial, timing)
             for algorithm in cfg.algorithms
             for value in cfg.sweep_values
             for trial in range(cfg.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_trial_task, tasks, chunksize=4))
    else:
        rows = [_run_trial_task(t) for t in tasks]
    rows.sort(key=lambda r: (r["algorithm"], float(r["sweep_value"]),
                             r["trial"]))

    with open(cfg.output_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS,
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    stream = sys.stdout if out_stream is None else out_stream
    _print_summary(rows, stream)
    flagged = sum(r["error_flag"] for r in rows)
    if flagged:
        print(f"{flagged} flagged trial(s); see {cfg.output_path}",
              file=stream)
    return cfg.output_path, flagged


def _print_summary(rows, stream):
    groups = {}
    for row in rows:
        key = (row["algorithm"], row["sweep_name"], row["sweep_value"])
        num, den, count = groups.get(key, (0.0, 0.0, 0))
        if not row["error_flag"]:
            num += float(row["nmse_num"])
            den += float(row["nmse_den"])
            count += 1
        groups[key] = (num, den, count)
    print(f"{'algorithm':<14}{'sweep':<18}{'trials':>7}{'nmse_db':>12}",
          file=stream)
    for (algorithm, name, value), (num, den, count) in sorted(
            groups.items(), key=lambda kv: (kv[0][0], float(kv[0][2]))):
        if count == 0 or den == 0.0:
            nmse = "n/a"
        else:
            ratio = num / den
            db = SUMMARY_FLOOR_DB if ratio <= 0 \
                else max(10.0 * math.log10(ratio), SUMMARY_FLOOR_DB)
            nmse = f"{db:.3f}"
        print(f"{algorithm:<14}{name + '=' + value:<18}{count:>7}"
              f"{nmse:>12}", file=stream)


def report_convergence(cfg, out_stream=None):
    """Per-EM-iteration traces for a single sweep point, CSV on stdout."""
    if len(cfg.sweep_values) != 1:
        raise ConfigError("converge needs a single sweep point "
                          f"(got {len(cfg.sweep_values)})")
    stream = sys.stdout if out_stream is None else out_stream
    value = cfg.sweep_values[0]
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CONVERGE_COLUMNS)
    flagged = 0
    for algorithm in cfg.algorithms:
        for trial in range(cfg.trials):
            seed = child_seed(cfg.seed, algorithm, cfg.sweep_name, value,
                              trial)
            rng = np.random.default_rng(seed)
            try:
                geom, _, pilots, meas = _draw_instance(cfg, value, rng)
                result = ALGORITHMS[algorithm](meas.y, pilots, cfg, geom)
            except Exception as exc:  # noqa: BLE001
                flagged += 1
                print(f"trial failed: {algorithm} trial={trial}: {exc}",
                      file=sys.stderr)
                continue
            for it in range(result.em_iterations):
                writer.writerow([algorithm, trial, it + 1,
                                 _fmt(result.mu_changes[it]),
                                 _fmt(result.xi_errs_db[it]),
                                 result.ep_iters[it]])
    return flagged


# ----------------------------------------------------------------- selftest

def _check(name, ok, detail, stream):
    print(f"selftest {name}: {'PASS' if ok else 'FAIL'} ({detail})",
          file=stream)
    return ok


def selftest(out_stream=None):
    """Abbreviated closed-form-vs-oracle agreement run; 0 on success."""
    stream = sys.stdout if out_stream is None else out_stream
    rng = np.random.default_rng(20240817)
    ok = True

    worst = 0.0
    for _ in range(20):
        sigma_cav = float(rng.uniform(0.05, 4.0))
        mu_cav = complex(rng.normal(), rng.normal())
        p_cav = float(rng.uniform(-4, 4))
        gamma = float(rng.uniform(0.2, 5.0))
        p_new, mu_new, var_new, _ = ep.hybrid_moments(
            np.array(sigma_cav), np.array(mu_cav), np.array(p_cav), gamma)
        ref = oracles.quad_hybrid_moments(sigma_cav, mu_cav, p_cav, gamma)
        worst = max(worst,
                    abs(float(expit(p_new)) - ref.support_prob),
                    abs(complex(mu_new) - ref.mean),
                    abs(float(var_new) + abs(complex(mu_new)) ** 2
                        - ref.second_moment))
    ok &= _check("moment-matching vs quadrature", worst < 1e-6,
                 f"max abs err {worst:.3g}", stream)

    worst = 0.0
    for _ in range(200):
        p_l, p_r = rng.uniform(-6, 6, size=2)
        t01, t10 = rng.uniform(0.02, 0.98, size=2)
        table, m_l, m_r = ep.pair_marginal_table(p_l, p_r, t01, t10)
        ref = oracles.enumerate_bivariate(p_l, p_r, t01, t10)
        worst = max(worst, float(np.max(np.abs(table - ref.as_array()))),
                    abs(m_l - ref.mean_left), abs(m_r - ref.mean_right))
    ok &= _check("pair marginals vs enumeration", worst < 1e-12,
                 f"max abs err {worst:.3g}", stream)

    worst = 0.0
    for _ in range(5):
        m, n = 16, 10
        phi = (rng.standard_normal((n, m))
               + 1j * rng.standard_normal((n, m))) / math.sqrt(2 * n)
        sites = ep.SiteFactors(mu2=(rng.standard_normal(m)
                                    + 1j * rng.standard_normal(m)),
                               sigma2=rng.uniform(0.5, 50.0, size=m),
                               p2=np.zeros(m))
        msgs = ep.MarkovMessages(p_fwd=np.zeros(m), p_rev=np.zeros(m - 1))
        y = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        eta = 25.0
        post = ep.recompute_global(y, phi, eta, sites, msgs)
        direct = np.linalg.inv(phi.conj().T @ phi * eta
                               + np.diag(1.0 / sites.sigma2))
        worst = max(worst, float(np.linalg.norm(post.sigma - direct)
                                 / np.linalg.norm(direct)))
    ok &= _check("low-rank covariance vs direct inverse", worst < 1e-8,
                 f"max rel err {worst:.3g}", stream)

    from .em import grid_gradient
    geom = ArrayGeometry(12)
    grid = np.sort(rng.uniform(-1.3, 1.3, size=8))
    pilots = generate_pilots(10, 12, rng)
    mu = (rng.standard_normal(8) + 1j * rng.standard_normal(8)) / 2
    sq = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    sigma = sq @ sq.conj().T / 32
    y = rng.standard_normal(10) + 1j * rng.standard_normal(10)
    grad = grid_gradient(y, pilots, grid, mu, sigma, geom)
    fd = np.zeros(8)
    for m in range(8):
        for sign in (1, -1):
            moved = grid.copy()
            moved[m] += sign * 1e-4
            phi = pilots @ build_dictionary(moved, geom)
            val = float(np.sum(np.abs(y - phi @ mu) ** 2)
                        + np.real(np.einsum("nm,mk,nk->", phi, sigma,
                                            phi.conj())))
            fd[m] += sign * val / 2e-4
    rel = float(np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    ok &= _check("grid gradient vs finite differences", rel < 1e-3,
                 f"rel err {rel:.3g}", stream)

    m = 10
    geom = ArrayGeometry(m, 0.5)
    from .signal_model import initial_grid
    grid = initial_grid(m)
    w = np.zeros(m, dtype=complex)
    w[4:7] = (rng.standard_normal(3) + 1j * rng.standard_normal(3)) \
        / math.sqrt(2)
    pilots = generate_pilots(8, m, rng)
    phi = pilots @ build_dictionary(grid, geom)
    meas = measure(pilots, build_dictionary(grid, geom) @ w, 20.0, rng)

    class _P:
        tau01, tau10, gamma, eta = 0.15, 0.35, np.ones(m), meas.true_eta

    post, _ = ep.run_ep(meas.y, phi, _P, n_iter=100, eps=1e-8)
    exact = oracles.exhaustive_posterior(meas.y, phi, 0.15, 0.35,
                                         np.ones(m), meas.true_eta)
    rel = float(np.linalg.norm(post.mu - exact.mean)
                / np.linalg.norm(exact.mean))
    ok &= _check("ep mean vs exhaustive posterior", rel < 0.1,
                 f"rel err {rel:.3g}", stream)

    return 0 if ok else 1
