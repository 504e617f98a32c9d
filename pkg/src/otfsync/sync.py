"""Receiver-side estimation: filter-bank user separation, correlation-based
timing-offset estimation, and ML carrier-frequency-offset plus channel
estimation on a Chebyshev basis expansion.

All per-user operations are pure functions of their inputs; the Q user
pipelines are independent after ``separate_user`` and can run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import pilot
from .config import SystemConfig
from .errors import ConfigError, EstimationError

GOLDEN_RATIO_CONJ = (np.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# filter-bank user separation
# ---------------------------------------------------------------------------

def doppler_mask(n: int, num_users: int, user: int) -> np.ndarray:
    """Brickwall mask selecting user's band of floor(N/Q) Doppler bins."""
    band = n // num_users
    mask = np.zeros(n, dtype=bool)
    mask[(user * band + np.arange(band)) % n] = True
    return mask


def separate_user(stream: np.ndarray, user: int, num_users: int, m: int, n: int) -> np.ndarray:
    """Unit-gain brickwall filter isolating one user's Doppler band.

    Implemented as per-delay-row DFT -> mask -> IDFT over the M x N reshape
    of the stream; equivalent to a circulant filter along the time axis.
    """
    if num_users > n:
        raise ConfigError(f"num_users={num_users} exceeds the Doppler axis n={n}")
    stream = np.asarray(stream)
    if stream.size != m * n:
        raise ConfigError(f"expected {m * n} samples, got {stream.size}")
    grid = stream.reshape(m, n, order="F")
    spectrum = np.fft.fft(grid, axis=1)
    spectrum[:, ~doppler_mask(n, num_users, user)] = 0.0
    return np.fft.ifft(spectrum, axis=1).flatten(order="F")


# ---------------------------------------------------------------------------
# timing-offset estimation
# ---------------------------------------------------------------------------

@dataclass
class TimingMetric:
    """Per-delay-bin correlation statistics for one user.

    ``corr2d`` holds the per-slot correlation magnitudes and ``curve`` its
    time average; both use the reporting index convention in which the
    estimate is recovered as (l + cp_len - anchor - 1) mod M.
    """

    corr2d: np.ndarray  # (M, N) nonnegative
    curve: np.ndarray   # (M,)
    cp_len: int
    anchor: int


@dataclass
class ToEstimate:
    first_peak: int            # threshold peak set, earliest offset
    max_peak: int              # argmax variant
    peak_set: np.ndarray       # metric indices above the threshold


def timing_correlate(separated: np.ndarray, template: np.ndarray,
                     placement: pilot.PilotPlacement, cp_len: int) -> TimingMetric:
    """Slide each slot's pilot block over the serialized filtered stream.

    The delayed pilot of slot n spills past the slot boundary into the next
    slot's head (it keeps the slot-n Doppler phase there), so the correlation
    window follows the serialized sample order instead of wrapping inside one
    column; that keeps the full pilot coherent at every candidate lag.
    """
    m, n = template.shape
    separated = np.asarray(separated)
    if separated.size != m * n:
        raise ConfigError(f"expected {m * n} samples, got {separated.size}")
    lo = placement.delay_lo
    span = 2 * placement.zc_len - 1
    block = template[lo:lo + span, :]        # (span, N) pilot samples per slot
    seg_len = m + span - 1
    extended = np.concatenate([separated, separated[:m]])  # frame CP wrap
    segments = extended[(np.arange(n) * m + lo)[:, None] + np.arange(seg_len)]
    windows = np.lib.stride_tricks.sliding_window_view(segments, span, axis=1)
    corr = np.einsum("ndz,zn->nd", windows, np.conj(block))
    p2d = np.abs(corr.T) / m                 # (M, N), lag d peaks at the offset
    shift = (cp_len - placement.anchor - 1) % m
    p2d = p2d[(np.arange(m) + shift) % m, :]
    return TimingMetric(corr2d=p2d, curve=p2d.mean(axis=1), cp_len=cp_len,
                        anchor=placement.anchor)


def estimate_to(metric: TimingMetric, threshold: float) -> ToEstimate:
    """Threshold peak grouping and first-peak selection.

    Metric indices map to offset candidates through
    (l + cp_len - anchor - 1) mod M; the first peak is the smallest candidate
    in the threshold set, which favors the earliest channel tap over the
    strongest one.
    """
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"threshold={threshold} outside (0, 1]")
    curve = metric.curve
    m = curve.size
    if m == 0:
        raise EstimationError("empty timing metric")
    peak_set = np.flatnonzero(curve >= threshold * curve.max())
    offsets = (peak_set + metric.cp_len - metric.anchor - 1) % m
    max_peak = (int(np.argmax(curve)) + metric.cp_len - metric.anchor - 1) % m
    return ToEstimate(first_peak=int(offsets.min()), max_peak=int(max_peak),
                      peak_set=peak_set)


# ---------------------------------------------------------------------------
# pilot-region extraction
# ---------------------------------------------------------------------------

@dataclass
class PilotRegion:
    """Received pilot-region samples and their absolute sample indices.

    ``samples[n, j]`` is the filtered receive sample at delay row
    anchor + theta_hat + j of time slot n (linear sample position, wrapped
    modulo M*N when it crosses the frame edge -- the frame CP makes the
    wrapped position carry the continuation of the pilot).  ``kappa`` holds
    the matching absolute post-CP-removal sample indices used for every
    phase and basis evaluation.
    """

    samples: np.ndarray   # (N, L_p) complex
    kappa: np.ndarray     # (N, L_p) int
    lp_shift: int         # anchor + theta_hat


def extract_pilot_region(filtered: np.ndarray, theta_hat: int,
                         placement: pilot.PilotPlacement, cp_len: int,
                         mode: str = "wrap") -> PilotRegion:
    """Stack the L_p pilot samples of every time slot after the PCP prefix."""
    m, n, lp = placement.m, placement.n, placement.zc_len
    filtered = np.asarray(filtered)
    if filtered.size != m * n:
        raise ConfigError(f"expected {m * n} samples, got {filtered.size}")
    lp_shift = placement.anchor + int(theta_hat)
    if mode == "error" and lp_shift + lp - 1 > m - 1:
        raise EstimationError(
            f"pilot region [{lp_shift}, {lp_shift + lp - 1}] exceeds the delay axis "
            f"[0, {m - 1}]; use wrap mode or a smaller anchor"
        )
    idx = (np.arange(n)[:, None] * m + lp_shift + np.arange(lp)[None, :]) % (m * n)
    return PilotRegion(samples=filtered[idx], kappa=cp_len + idx, lp_shift=lp_shift)


# ---------------------------------------------------------------------------
# Chebyshev basis expansion
# ---------------------------------------------------------------------------

@dataclass
class BemBasis:
    """First-kind Chebyshev values on the pilot-region time grid.

    values[n, j, g] = T_g(kprime) at the normalized instant
    kprime = (2*kappa - N_s + 1)/(N_s - 1) of sample (n, j).
    """

    values: np.ndarray   # (N, L_p, beta) float
    kprime: np.ndarray   # (N, L_p)
    beta: int


def build_bem_basis(beta: int, kappa: np.ndarray, n_s: int) -> BemBasis:
    if beta < 1:
        raise ConfigError(f"bem order {beta} must be >= 1")
    kprime = (2.0 * np.asarray(kappa, dtype=float) - n_s + 1.0) / (n_s - 1.0)
    values = np.empty(kprime.shape + (beta,))
    values[..., 0] = 1.0
    if beta > 1:
        values[..., 1] = kprime
    for g in range(2, beta):
        values[..., g] = 2.0 * kprime * values[..., g - 1] - values[..., g - 2]
    return BemBasis(values=values, kprime=kprime, beta=beta)


@dataclass
class BemRegressor:
    """LS regressor mapping stacked basis coefficients to pilot-region samples.

    Column (l, g) of ``g_mat`` carries the l-shifted pilot times basis order g,
    so ``g_mat @ c`` reproduces the convolved pilot for tap trajectories
    h[l, .] = sum_g c[l*beta+g] T_g(.).  Factorized once per trial; the
    projection norm used by the CFO cost reuses the orthonormal factor.
    """

    g_mat: np.ndarray
    loading: float = 0.0
    _q: np.ndarray = field(default=None, repr=False)
    _qconj: np.ndarray = field(default=None, repr=False)
    _r: np.ndarray = field(default=None, repr=False)
    _piv: np.ndarray = field(default=None, repr=False)
    _cho: tuple = field(default=None, repr=False)

    def cost(self, z: np.ndarray) -> float:
        """Squared norm of the projection of z onto the regressor range."""
        return float(self.cost_many(z[np.newaxis, :])[0])

    def cost_many(self, z_batch: np.ndarray) -> np.ndarray:
        if self.loading == 0.0:
            w = z_batch @ self._qconj
            return np.sum(np.abs(w) ** 2, axis=1)
        w = z_batch @ np.conj(self.g_mat)          # rows: G^H z
        sol = scipy.linalg.cho_solve(self._cho, w.T)
        return np.real(np.sum(np.conj(w.T) * sol, axis=0))

    def coeffs(self, z: np.ndarray) -> np.ndarray:
        """LS coefficient solve (G^H G)^-1 G^H z."""
        if self.loading == 0.0:
            y = np.conj(self._q.T) @ z
            sol = scipy.linalg.solve_triangular(self._r, y)
            c = np.empty_like(sol)
            c[self._piv] = sol
            return c
        return scipy.linalg.cho_solve(self._cho, np.conj(self.g_mat.T) @ z)


def build_bem_regressor(sbar: np.ndarray, bem: BemBasis, loading: float = 0.0,
                        pivot_tol: float = 1e-10) -> BemRegressor:
    """Assemble and factorize the regressor from the pilot template.

    ``sbar[n, j]`` is the transmitted pilot sample at region position (n, j);
    the circular shifts of each slot's template realize the tap convolution.
    """
    n_slots, lp = sbar.shape
    if bem.values.shape[:2] != (n_slots, lp):
        raise ConfigError("basis grid does not match the pilot template shape")
    j = np.arange(lp)
    shifted = sbar[:, (j[:, None] - j[None, :]) % lp]          # (N, j, l)
    g4 = shifted[:, :, :, None] * bem.values[:, :, None, :]    # (N, j, l, g)
    g_mat = g4.reshape(n_slots * lp, lp * bem.beta)
    n_rows, n_cols = g_mat.shape
    if n_cols > n_rows:
        raise EstimationError(
            f"BEM regressor is underdetermined: beta*L_p = {n_cols} columns "
            f"exceed N*L_p = {n_rows} rows"
        )
    if loading > 0.0:
        gram = np.conj(g_mat.T) @ g_mat + loading * np.eye(n_cols)
        cho = scipy.linalg.cho_factor(gram)
        return BemRegressor(g_mat=g_mat, loading=loading, _cho=cho)
    q, r, piv = scipy.linalg.qr(g_mat, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag >= pivot_tol * diag[0])) if diag[0] > 0 else 0
    if rank < n_cols:
        raise EstimationError(
            f"BEM regressor rank-deficient: rank {rank} < beta*L_p = {n_cols} "
            f"(N*L_p = {n_rows}); the pilot does not excite every coefficient"
        )
    return BemRegressor(g_mat=g_mat, loading=0.0, _q=q, _qconj=np.conj(q),
                        _r=r, _piv=piv)


# ---------------------------------------------------------------------------
# ML CFO estimation and channel reconstruction
# ---------------------------------------------------------------------------

def cfo_phase(kappa: np.ndarray, eps: float, n_s: int) -> np.ndarray:
    """Diagonal of the pilot-region CFO rotation exp(j 2 pi eps kappa / N_s)."""
    return np.exp(2j * np.pi * eps * np.asarray(kappa, dtype=float) / n_s)


def cfo_cost(rbar: np.ndarray, regressor: BemRegressor, kappa: np.ndarray,
             eps: float, n_s: int) -> float:
    """Projection cost g(eps) = || proj_G( Phi^H(eps) rbar ) ||^2 (real, >= 0)."""
    z = np.conj(cfo_phase(kappa.ravel(), eps, n_s)) * np.asarray(rbar).ravel()
    return regressor.cost(z)


def golden_section_max(fun, lo: float, hi: float, tol: float):
    """Golden-section maximization on [lo, hi] to an interval of width tol."""
    a, b = float(lo), float(hi)
    c = b - GOLDEN_RATIO_CONJ * (b - a)
    d = a + GOLDEN_RATIO_CONJ * (b - a)
    fc, fd = fun(c), fun(d)
    while (b - a) > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN_RATIO_CONJ * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN_RATIO_CONJ * (b - a)
            fd = fun(d)
    x = 0.5 * (a + b)
    return x, fun(x)


@dataclass
class CfoEstimate:
    epsilon_hat: float
    grid: np.ndarray         # coarse search points
    cost_curve: np.ndarray   # cost at each grid point
    c_hat: np.ndarray        # (L_p * beta,) basis coefficients
    h_hat: np.ndarray        # (N, L_p taps, L_p samples) reconstructed taps


def cfo_grid(cfo_range: float, cfo_step: float) -> np.ndarray:
    if cfo_range <= 0 or cfo_step <= 0:
        raise ConfigError("cfo_range and cfo_step must be > 0")
    return np.arange(-cfo_range, cfo_range + 0.5 * cfo_step, cfo_step)


def estimate_cfo(region: PilotRegion, regressor: BemRegressor, bem: BemBasis,
                 cfo_range: float, cfo_step: float, cfo_tol: float,
                 n_s: int, grid_phases: np.ndarray | None = None) -> CfoEstimate:
    """Coarse grid scan of the projection cost plus golden-section refinement,
    then the LS coefficient solve at the winning offset.

    ``grid_phases`` may carry the precomputed conj-rotations exp(-j 2 pi
    grid x kappa / N_s) for the coarse grid (they only depend on the region
    geometry, not the received samples).
    """
    if cfo_tol <= 0:
        raise ConfigError("cfo_tol must be > 0")
    grid = cfo_grid(cfo_range, cfo_step)
    if grid.size == 0:
        raise ConfigError("empty CFO search grid")
    rflat = region.samples.ravel()
    kflat = region.kappa.ravel().astype(float)
    if grid_phases is None:
        grid_phases = np.exp(-2j * np.pi * np.outer(grid, kflat) / n_s)
    z_batch = grid_phases * rflat[np.newaxis, :]
    costs = regressor.cost_many(z_batch)
    best = int(np.argmax(costs))
    lo = max(grid[best] - cfo_step, -cfo_range)
    hi = min(grid[best] + cfo_step, cfo_range)
    x_ref, f_ref = golden_section_max(
        lambda e: cfo_cost(rflat, regressor, kflat, e, n_s), lo, hi, cfo_tol)
    # keep the exact grid point when refinement cannot improve on it
    eps_hat = float(grid[best]) if costs[best] >= f_ref else float(x_ref)
    c_hat = regressor.coeffs(np.conj(cfo_phase(kflat, eps_hat, n_s)) * rflat)
    return CfoEstimate(epsilon_hat=eps_hat, grid=grid, cost_curve=costs,
                       c_hat=c_hat, h_hat=reconstruct_channel(c_hat, bem))


def reconstruct_channel(c_hat: np.ndarray, bem: BemBasis) -> np.ndarray:
    """Tap trajectories over the pilot region from basis coefficients.

    Returns h[n, l, j] = sum_g T_g(kprime[n, j]) c[l*beta + g] for taps
    l = 0..L_p-1 and every time slot n.
    """
    n_slots, lp = bem.kprime.shape
    coeffs = np.asarray(c_hat).reshape(lp, bem.beta)
    return np.einsum("njg,lg->nlj", bem.values, coeffs)


# ---------------------------------------------------------------------------
# per-user pipeline
# ---------------------------------------------------------------------------

@dataclass
class EstimatorBundle:
    """Receive-side quantities fixed by (config, user, theta): the pilot
    template, basis, factorized regressor, and coarse-grid rotations.  Cached
    across trials because the expensive QR only depends on the geometry."""

    sbar: np.ndarray
    bem: BemBasis
    regressor: BemRegressor
    grid_phases: np.ndarray
    template: np.ndarray


_BUNDLE_CACHE: dict = {}
_BUNDLE_CACHE_MAX = 256


def estimator_bundle(cfg: SystemConfig, placement: pilot.PilotPlacement,
                     pcp: pilot.PcpSequence, user: int, theta: int,
                     beta: int | None = None) -> EstimatorBundle:
    beta = cfg.beta if beta is None else beta
    key = (cfg.m, cfg.n, cfg.num_users, cfg.cp_len, cfg.zc_len, cfg.zc_root,
           cfg.pilot_power_db, cfg.anchor, cfg.offset, cfg.gram_loading,
           cfg.cfo_range, cfg.cfo_step, beta, user, int(theta))
    bundle = _BUNDLE_CACHE.get(key)
    if bundle is not None:
        return bundle
    if len(_BUNDLE_CACHE) >= _BUNDLE_CACHE_MAX:
        _BUNDLE_CACHE.clear()
    m, n, lp = cfg.m, cfg.n, cfg.zc_len
    idx = (np.arange(n)[:, None] * m + placement.anchor + int(theta)
           + np.arange(lp)[None, :]) % (m * n)
    kappa = cfg.cp_len + idx
    sbar = pilot.pilot_region_ref(placement, pcp, user)
    bem = build_bem_basis(beta, kappa, cfg.n_s)
    regressor = build_bem_regressor(sbar, bem, cfg.gram_loading)
    grid = cfo_grid(cfg.cfo_range, cfg.cfo_step)
    grid_phases = np.exp(-2j * np.pi * np.outer(grid, kappa.ravel()) / cfg.n_s)
    template = pilot.timing_template(placement, pcp, user)
    bundle = EstimatorBundle(sbar=sbar, bem=bem, regressor=regressor,
                             grid_phases=grid_phases, template=template)
    _BUNDLE_CACHE[key] = bundle
    return bundle


@dataclass
class UserSyncResult:
    user: int
    to_estimate: ToEstimate
    theta_used: int
    metric: TimingMetric
    region: PilotRegion
    cfo: CfoEstimate
    bem: BemBasis


def synchronize_user(y: np.ndarray, user: int, cfg: SystemConfig,
                     placement: pilot.PilotPlacement, pcp: pilot.PcpSequence,
                     theta_override: int | None = None) -> UserSyncResult:
    """Full per-user receive pipeline on the CP-removed stream ``y``."""
    separated = separate_user(y, user, cfg.num_users, cfg.m, cfg.n)
    template = pilot.timing_template(placement, pcp, user)
    metric = timing_correlate(separated, template, placement, cfg.cp_len)
    to_est = estimate_to(metric, cfg.threshold)
    theta = int(theta_override) if theta_override is not None else to_est.first_peak
    region = extract_pilot_region(separated, theta, placement, cfg.cp_len,
                                  cfg.pilot_region_mode)
    bundle = estimator_bundle(cfg, placement, pcp, user, theta)
    cfo = estimate_cfo(region, bundle.regressor, bundle.bem, cfg.cfo_range,
                       cfg.cfo_step, cfg.cfo_tol, cfg.n_s,
                       grid_phases=bundle.grid_phases)
    return UserSyncResult(user=user, to_estimate=to_est, theta_used=theta,
                          metric=metric, region=region, cfo=cfo, bem=bundle.bem)
