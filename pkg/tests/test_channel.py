"""Channel generation, sample-level application, and the compound matrix."""

import numpy as np
import pytest

from otfsync import channel as chan
from otfsync import modem
from otfsync.allocation import build_allocation, bin_mask
from otfsync.config import SystemConfig
from otfsync.errors import NumericError, RealizationError


def random_pathset(rng, n_paths=3, len_cap=10, nu_max_t=1.5, n_s=146):
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths))
    gains /= np.linalg.norm(gains)
    delays = np.sort(rng.choice(len_cap, size=n_paths, replace=False))
    dopplers = rng.uniform(-1, 1, n_paths) * nu_max_t / n_s
    return chan.PathSet(gains=gains, delays=delays, dopplers=dopplers)


def small_config(**kw):
    base = dict(m=16, n=8, num_users=2, cp_len=12, theta_max=3, zc_len=5,
                channel_len_cap=10, nu_max_t=1.3, cfo_range=0.6, bem_order=5)
    base.update(kw)
    return SystemConfig(**base).validate()


# -- EVA profile -------------------------------------------------------------

def test_eva_quantization_oracle():
    # round(tau * 3.84e6) = {0,0,1,1,1,3,4,7,10}, merged, clamped into length 10
    delays, powers = chan.eva_profile()
    assert delays.tolist() == [0, 1, 3, 4, 7, 9]
    lin = 10.0 ** (chan.EVA_POWERS_DB / 10.0)
    merged = {0: lin[0] + lin[1], 1: lin[2] + lin[3] + lin[4], 3: lin[5],
              4: lin[6], 7: lin[7], 9: lin[8]}
    total = sum(merged.values())
    for d, p in zip(delays, powers):
        assert p == pytest.approx(merged[d] / total)
    assert powers.sum() == pytest.approx(1.0)


def test_eva_zero_doppler_when_static():
    rng = np.random.default_rng(0)
    paths = chan.generate_eva_channel(rng, nu_max_t=0.0, n_s=4114)
    assert np.all(paths.dopplers == 0.0)
    assert paths.length <= 10


def test_eva_unit_power_monte_carlo():
    rng = np.random.default_rng(1)
    total = 0.0
    trials = 100_000
    delays, powers = chan.eva_profile()
    n_taps = len(delays)
    gains = np.sqrt(powers / 2) * (rng.standard_normal((trials, n_taps))
                                   + 1j * rng.standard_normal((trials, n_taps)))
    total = np.mean(np.sum(np.abs(gains) ** 2, axis=1))
    assert abs(total - 1.0) < 0.01


def test_bem_pathset_power_and_length():
    rng = np.random.default_rng(2)
    paths = chan.generate_eva_bem_channel(rng, 2.91, 4109, order=7)
    assert paths.length <= 10
    kappa = np.arange(4109)
    power = np.mean([np.mean(np.abs(paths.taps_at(int(d), kappa)) ** 2)
                     for d in paths.delays])
    assert power > 0


# -- sample-level application -------------------------------------------------

def test_identity_channel_passthrough():
    cfg = small_config(num_users=1)
    rng = np.random.default_rng(3)
    s = rng.standard_normal(cfg.n_s) + 1j * rng.standard_normal(cfg.n_s)
    real = chan.ChannelRealization(paths=[chan.identity_pathset()],
                                   to=np.array([0]), cfo=np.array([0.0]))
    r = chan.apply_channel([s], real, cfg.n_s, cfg.theta_max)
    assert np.max(np.abs(r - s)) < 1e-14


def test_pure_cfo_rotation():
    cfg = small_config(num_users=1)
    rng = np.random.default_rng(4)
    s = rng.standard_normal(cfg.n_s) + 1j * rng.standard_normal(cfg.n_s)
    eps = 0.37
    real = chan.ChannelRealization(paths=[chan.identity_pathset()],
                                   to=np.array([0]), cfo=np.array([eps]))
    r = chan.apply_channel([s], real, cfg.n_s, cfg.theta_max)
    ramp = np.exp(2j * np.pi * eps * np.arange(cfg.n_s) / cfg.n_s)
    assert np.max(np.abs(r - ramp * s)) < 1e-12


def test_rearranged_form_identity():
    # Eq-form with CFO inside vs CFO absorbed into effective taps:
    # h_i -> h_i exp(j 2 pi delta l_i), nu_i -> nu_i + delta, delta = eps/N_s
    cfg = small_config()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        paths = random_pathset(rng, n_s=cfg.n_s)
        theta = int(rng.integers(0, cfg.theta_max + 1))
        eps = float(rng.uniform(-0.5, 0.5))
        s = rng.standard_normal(cfg.n_s) + 1j * rng.standard_normal(cfg.n_s)
        real = chan.ChannelRealization(paths=[paths], to=np.array([theta]),
                                       cfo=np.array([eps]))
        r = chan.apply_channel([s], real, cfg.n_s, cfg.theta_max)
        delta = eps / cfg.n_s
        checked = chan.PathSet(
            gains=paths.gains * np.exp(2j * np.pi * delta * paths.delays),
            delays=paths.delays,
            dopplers=paths.dopplers + delta,
        )
        real2 = chan.ChannelRealization(paths=[checked], to=np.array([theta]),
                                        cfo=np.array([0.0]))
        r2 = chan.apply_channel([s], real2, cfg.n_s, cfg.theta_max)
        worst = max(worst, np.max(np.abs(r - r2)))
    assert worst < 1e-10


def test_to_bound_enforced():
    cfg = small_config(num_users=1)
    s = np.zeros(cfg.n_s, complex)
    real = chan.ChannelRealization(paths=[chan.identity_pathset()],
                                   to=np.array([cfg.theta_max + 1]),
                                   cfo=np.array([0.0]))
    with pytest.raises(RealizationError, match="exceeds theta_max"):
        chan.apply_channel([s], real, cfg.n_s, cfg.theta_max)


# -- AWGN ---------------------------------------------------------------------

def test_awgn_infinite_snr_passthrough():
    rng = np.random.default_rng(6)
    s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    out = chan.add_awgn(s, np.inf, rng)
    assert np.array_equal(out, s)


def test_awgn_variance_moment():
    rng = np.random.default_rng(7)
    out = chan.add_awgn(np.zeros(1_000_000, complex), 0.0, rng)  # sigma^2 = 1
    var = np.mean(np.abs(out) ** 2)
    assert abs(var - 1.0) < 0.01


def test_awgn_deterministic_given_seed():
    s = np.ones(128, complex)
    a = chan.add_awgn(s, 10.0, np.random.default_rng(42))
    b = chan.add_awgn(s, 10.0, np.random.default_rng(42))
    assert np.array_equal(a, b)


# -- compound channel ----------------------------------------------------------

def test_compound_identity_channel_is_identity():
    cfg = small_config(num_users=1)
    allocs = build_allocation(cfg.m, cfg.n, 1, "contiguous-doppler")
    real = chan.ChannelRealization(paths=[chan.identity_pathset()],
                                   to=np.array([0]), cfo=np.array([0.0]))
    compound = chan.build_compound_channel(real, cfg, allocs)
    assert np.max(np.abs(compound.psi_dd - np.eye(cfg.m * cfg.n))) < 1e-10


def keystone_error(cfg, rng, realization, allocs):
    """Max-abs difference between the matrix path and the sample path."""
    frames = [np.where(bin_mask(a, cfg.m, cfg.n),
                       modem.qam4_symbols(rng, (cfg.m, cfg.n)), 0)
              for a in allocs]
    streams = [modem.transmit(f, cfg.cp_len) for f in frames]
    r = chan.apply_channel(streams, realization, cfg.n_s, cfg.theta_max)
    y = modem.remove_cp(r[cfg.theta_max:], cfg.cp_rem)
    d_tilde = modem.demodulate(y, cfg.m, cfg.n).flatten(order="F")
    compound = chan.build_compound_channel(realization, cfg, allocs)
    d = sum(f.flatten(order="F") for f in frames)
    return np.max(np.abs(compound.psi_dd @ d - d_tilde))


def test_keystone_matrix_equals_samples():
    cfg = small_config()
    rng = np.random.default_rng(8)
    allocs = build_allocation(cfg.m, cfg.n, cfg.num_users, cfg.allocation)
    for _ in range(20):
        real = chan.ChannelRealization(
            paths=[random_pathset(rng, n_s=cfg.n_s) for _ in range(2)],
            to=rng.integers(0, cfg.theta_max + 1, 2),
            cfo=rng.uniform(-0.5, 0.5, 2))
        assert keystone_error(cfg, rng, real, allocs) < 1e-9


def test_keystone_with_bem_paths():
    cfg = small_config()
    rng = np.random.default_rng(9)
    allocs = build_allocation(cfg.m, cfg.n, cfg.num_users, cfg.allocation)
    real = chan.ChannelRealization(
        paths=[chan.generate_eva_bem_channel(rng, cfg.nu_max_t, cfg.n_s, 4)
               for _ in range(2)],
        to=rng.integers(0, cfg.theta_max + 1, 2),
        cfo=rng.uniform(-0.5, 0.5, 2))
    assert keystone_error(cfg, rng, real, allocs) < 1e-9


def test_pure_cfo_block_is_block_circulant():
    # with only a CFO, the delay-Doppler operator is circulant across Doppler
    # blocks with diagonal blocks: entries depend on (doppler row - doppler col)
    cfg = small_config(num_users=1)
    real = chan.ChannelRealization(paths=[chan.identity_pathset()],
                                   to=np.array([0]), cfo=np.array([0.4]))
    allocs = build_allocation(cfg.m, cfg.n, 1, "contiguous-doppler")
    compound = chan.build_compound_channel(real, cfg, allocs)
    phi = compound.phi_dd[0]
    m, n = cfg.m, cfg.n
    blocks = phi.reshape(m, n, m, n, order="F")
    for k1 in range(n):
        for k2 in range(n):
            block = blocks[:, k1, :, k2]
            ref = blocks[:, (k1 + 1) % n, :, (k2 + 1) % n]
            assert np.max(np.abs(block - ref)) < 1e-10
            off_diag = block - np.diag(np.diag(block))
            assert np.max(np.abs(off_diag)) < 1e-10


def test_time_invariant_channel_block_structure():
    # nu = 0, theta = 0, eps = 0: block-diagonal across Doppler; each block is
    # the delay-shift convolution whose wrapped entries carry the per-block
    # phase exp(-j 2 pi k / N) (the frame-level CP makes the stream circular
    # over M*N samples, not per slot), so blocks agree in magnitude.
    cfg = small_config(m=8, n=4, num_users=1, zc_len=3)
    gains = {0: 0.8, 2: 0.5 - 0.2j}
    paths = chan.PathSet(gains=np.array([gains[0], gains[2]]),
                         delays=np.array([0, 2]),
                         dopplers=np.array([0.0, 0.0]))
    real = chan.ChannelRealization(paths=[paths], to=np.array([0]),
                                   cfo=np.array([0.0]))
    allocs = build_allocation(cfg.m, cfg.n, 1, "contiguous-doppler")
    compound = chan.build_compound_channel(real, cfg, allocs)
    lam = compound.lambda_dd[0].reshape(cfg.m, cfg.n, cfg.m, cfg.n, order="F")
    mag0 = np.abs(lam[:, 0, :, 0])
    for k1 in range(cfg.n):
        for k2 in range(cfg.n):
            block = lam[:, k1, :, k2]
            if k1 != k2:
                assert np.max(np.abs(block)) < 1e-10
                continue
            assert np.max(np.abs(np.abs(block) - mag0)) < 1e-10
            twist = np.exp(-2j * np.pi * k1 / cfg.n)
            expected = np.zeros((cfg.m, cfg.m), dtype=complex)
            for ell, gain in gains.items():
                for i in range(cfg.m):
                    expected[i, (i - ell) % cfg.m] += gain * (twist if i < ell else 1.0)
            assert np.max(np.abs(block - expected)) < 1e-10


# -- joint compensation ---------------------------------------------------------

def test_joint_compensate_identity():
    cfg = small_config(num_users=1)
    mn = cfg.m * cfg.n
    compound = chan.CompoundChannel(psi_dd=np.eye(mn), lambda_dd=[], phi_dd=[])
    rng = np.random.default_rng(11)
    d = rng.standard_normal(mn) + 1j * rng.standard_normal(mn)
    out = chan.joint_compensate(d, compound, noise_var=0.0)
    assert np.max(np.abs(out - d)) < 1e-10


def test_joint_compensate_recovers_noiseless():
    cfg = small_config(m=8, n=4, zc_len=3)
    rng = np.random.default_rng(12)
    allocs = build_allocation(cfg.m, cfg.n, cfg.num_users, cfg.allocation)
    real = chan.ChannelRealization(
        paths=[random_pathset(rng, n_paths=2, n_s=cfg.n_s) for _ in range(2)],
        to=rng.integers(0, cfg.theta_max + 1, 2),
        cfo=rng.uniform(-0.5, 0.5, 2))
    frames = [np.where(bin_mask(a, cfg.m, cfg.n),
                       modem.qam4_symbols(rng, (cfg.m, cfg.n)), 0)
              for a in allocs]
    streams = [modem.transmit(f, cfg.cp_len) for f in frames]
    r = chan.apply_channel(streams, real, cfg.n_s, cfg.theta_max)
    y = modem.remove_cp(r[cfg.theta_max:], cfg.cp_rem)
    d_tilde = modem.demodulate(y, cfg.m, cfg.n).flatten(order="F")
    compound = chan.build_compound_channel(real, cfg, allocs)
    d = sum(f.flatten(order="F") for f in frames)
    # exact-inverse oracle at vanishing loading
    oracle = np.linalg.solve(compound.psi_dd, d_tilde)
    out = chan.joint_compensate(d_tilde, compound, noise_var=0.0, loading=1e-12)
    assert np.linalg.norm(out - d) / np.linalg.norm(d) < 1e-6
    assert np.linalg.norm(oracle - d) / np.linalg.norm(d) < 1e-6


def test_joint_compensate_mismatch_residual_grows():
    cfg = small_config(m=8, n=4, num_users=1, zc_len=3)
    rng = np.random.default_rng(13)
    allocs = build_allocation(cfg.m, cfg.n, 1, "contiguous-doppler")
    residuals = []
    for eps_err in (0.0, 0.2, 0.4):
        res_trials = []
        for trial in range(10):
            trial_rng = np.random.default_rng([14, trial])
            paths = random_pathset(trial_rng, n_paths=2, n_s=cfg.n_s)
            eps = 0.1
            real = chan.ChannelRealization(paths=[paths], to=np.array([1]),
                                           cfo=np.array([eps]))
            frame = np.where(bin_mask(allocs[0], cfg.m, cfg.n),
                             modem.qam4_symbols(trial_rng, (cfg.m, cfg.n)), 0)
            stream = modem.transmit(frame, cfg.cp_len)
            r = chan.apply_channel([stream], real, cfg.n_s, cfg.theta_max)
            y = modem.remove_cp(r[cfg.theta_max:], cfg.cp_rem)
            d_tilde = modem.demodulate(y, cfg.m, cfg.n).flatten(order="F")
            wrong = chan.ChannelRealization(paths=[paths], to=np.array([1]),
                                            cfo=np.array([eps + eps_err]))
            compound = chan.build_compound_channel(wrong, cfg, allocs)
            d = frame.flatten(order="F")
            d_hat = chan.joint_compensate(d_tilde, compound, loading=1e-9)
            res_trials.append(np.linalg.norm(d_hat - d) / np.linalg.norm(d))
        residuals.append(np.mean(res_trials))
    assert residuals[0] < residuals[1] < residuals[2]


def test_joint_compensate_singular_raises():
    mn = 8
    compound = chan.CompoundChannel(psi_dd=np.zeros((mn, mn)), lambda_dd=[],
                                    phi_dd=[])
    with pytest.raises(NumericError, match="loading"):
        chan.joint_compensate(np.ones(mn), compound, noise_var=0.0)


# -- serialization ---------------------------------------------------------------

def test_realization_text_round_trip():
    rng = np.random.default_rng(15)
    real = chan.ChannelRealization(
        paths=[random_pathset(rng), chan.generate_eva_bem_channel(rng, 1.0, 200, 3)],
        to=np.array([1, 2]), cfo=np.array([0.1, -0.2]))
    back = chan.ChannelRealization.from_text(real.to_text())
    assert np.array_equal(back.to, real.to)
    assert np.allclose(back.cfo, real.cfo)
    assert isinstance(back.paths[0], chan.PathSet)
    assert isinstance(back.paths[1], chan.BemPathSet)
    assert np.allclose(back.paths[0].gains, real.paths[0].gains)
    assert np.allclose(back.paths[1].coeffs, real.paths[1].coeffs)
    kappa = np.arange(50)
    for ell in (0, 1, 2):
        assert np.allclose(back.paths[1].taps_at(ell, kappa),
                           real.paths[1].taps_at(ell, kappa))
