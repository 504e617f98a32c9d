"""System dimensioning and experiment parameters.

All dimensioning follows the uplink frame layout: an M x N delay-Doppler
grid per user, serialized column-major (delay index fastest) into M*N
samples plus a cyclic prefix of ``cp_len`` samples, for ``n_s`` total
samples per frame.  Indexing is zero-based everywhere.

Sentinel field values (-1 for the pilot geometry, 0 for ``bem_order``)
mean "derive from the other fields"; the derived values are exposed as
the ``anchor``, ``offset`` and ``beta`` properties and recomputed after
any override.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

from .errors import ConfigError

ALLOCATION_SCHEMES = ("contiguous-delay", "contiguous-doppler", "interleaved")
CHANNEL_MODELS = ("eva", "eva-bem", "single-tap", "identity")
PILOT_REGION_MODES = ("wrap", "error")

#: sample rate the delay axis is quantized to (Hz)
SAMPLE_RATE_HZ = 3.84e6


def bem_order_bound(nu_max_t: float) -> int:
    """Minimum number of basis functions for a Doppler spread of nu_max_t."""
    return math.ceil(2.0 * nu_max_t + 1.0)


def default_bem_order(nu_max_t: float, cap: int = 12) -> int:
    """Bound rounded up to the next odd integer, capped at ``cap``."""
    beta = bem_order_bound(nu_max_t)
    if beta % 2 == 0:
        beta += 1
    return min(beta, cap)


@dataclass(frozen=True)
class SystemConfig:
    """All dimensioning and experiment parameters."""

    m: int = 128                # delay bins
    n: int = 32                 # Doppler bins
    num_users: int = 2
    cp_len: int = 13            # frame CP length L_cp (samples)
    theta_max: int = 4          # largest timing offset the CP absorbs
    zc_len: int = 10            # Zadoff-Chu length; pilot spans 2*zc_len-1 delay bins
    zc_root: int = 1
    pilot_anchor: int = -1      # pilot delay anchor l_p; -1 -> m - zc_len
    pilot_offset: int = -1      # Doppler offset inside each user band; -1 -> band//2
    snr_db: float = 20.0        # data-symbol SNR (pilot boost excluded)
    pilot_power_db: float = 40.0
    nu_max_t: float = 2.91      # max Doppler spread normalized to the frame duration
    bem_order: int = 0          # 0 -> default_bem_order(nu_max_t)
    threshold: float = 0.25     # timing peak threshold, in (0, 1]
    cfo_range: float = 2.0      # one-sided CFO search range (Doppler spacings)
    cfo_step: float = 0.02      # coarse grid step
    cfo_tol: float = 1e-4       # golden-section refinement tolerance
    cfo_max: float = 0.5        # CFO draw half-width per trial
    allocation: str = "contiguous-doppler"
    channel_model: str = "eva"
    channel_len_cap: int = 10   # largest channel length L_ch
    genie_to: bool = False      # use the true TO instead of the estimate
    pilot_region_mode: str = "wrap"
    gram_loading: float = 0.0   # diagonal loading for the BEM normal matrix
    rng_seed: int = 20250809

    # -- derived dimensions ---------------------------------------------------
    @property
    def n_s(self) -> int:
        """Total samples per frame: M*N + cp_len."""
        return self.m * self.n + self.cp_len

    @property
    def cp_rem(self) -> int:
        """CP samples left after the receive window drops theta_max."""
        return self.cp_len - self.theta_max

    @property
    def band(self) -> int:
        """Doppler bins per user filter band."""
        return self.n // self.num_users

    @property
    def anchor(self) -> int:
        """Pilot delay anchor l_p (resolved)."""
        return self.pilot_anchor if self.pilot_anchor >= 0 else self.m - self.zc_len

    @property
    def offset(self) -> int:
        """Pilot Doppler offset inside each user band (resolved)."""
        return self.pilot_offset if self.pilot_offset >= 0 else self.band // 2

    @property
    def beta(self) -> int:
        """BEM order per user (resolved)."""
        return self.bem_order if self.bem_order > 0 else default_bem_order(self.nu_max_t)

    @property
    def frame_seconds(self) -> float:
        return self.n_s / SAMPLE_RATE_HZ

    @property
    def noise_var(self) -> float:
        if math.isinf(self.snr_db):
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)

    # -- validation -------------------------------------------------------------
    def violations(self) -> list[str]:
        """All violated invariants, one message each."""
        bad = []
        if min(self.m, self.n, self.num_users, self.zc_len) < 1:
            bad.append("m, n, num_users, zc_len must all be >= 1")
            return bad
        if self.num_users > self.m or self.num_users > self.n:
            bad.append(f"num_users={self.num_users} exceeds m={self.m} or n={self.n}")
            return bad
        if self.cp_len < 0 or self.theta_max < 0:
            bad.append("cp_len and theta_max must be >= 0")
        if self.cp_len < self.channel_len_cap + self.theta_max - 1:
            bad.append(
                "CP rule violated: need L_cp >= max L_ch + theta_max - 1, got "
                f"cp_len={self.cp_len} < {self.channel_len_cap} + {self.theta_max} - 1"
            )
        if self.cp_len - self.theta_max < 0:
            bad.append(
                f"cp_len - theta_max = {self.cp_len - self.theta_max} is negative"
            )
        if self.cp_len >= self.m * self.n:
            bad.append(f"cp_len={self.cp_len} must be < m*n={self.m * self.n}")
        if 2 * self.zc_len - 1 > self.m:
            bad.append(f"pilot span 2*zc_len-1={2 * self.zc_len - 1} exceeds m={self.m}")
        elif self.anchor - self.zc_len + 1 < 0 or self.anchor + self.zc_len - 1 > self.m - 1:
            bad.append(
                f"pilot delay span [{self.anchor - self.zc_len + 1}, "
                f"{self.anchor + self.zc_len - 1}] leaves the delay axis [0, {self.m - 1}]"
            )
        if math.gcd(self.zc_root, self.zc_len) != 1:
            bad.append(f"zc_root={self.zc_root} is not coprime with zc_len={self.zc_len}")
        if self.beta < bem_order_bound(self.nu_max_t) and self.beta < 12:
            bad.append(
                f"bem_order={self.beta} below the bound "
                f"ceil(2*nu_max_t + 1) = {bem_order_bound(self.nu_max_t)}"
            )
        if not 0.0 < self.threshold <= 1.0:
            bad.append(f"threshold={self.threshold} outside (0, 1]")
        if self.cfo_range <= 0 or self.cfo_step <= 0 or self.cfo_tol <= 0:
            bad.append("cfo_range, cfo_step, cfo_tol must all be > 0")
        elif self.band > 0 and self.cfo_range > self.band / 2:
            bad.append(
                f"cfo_range={self.cfo_range} exceeds the alias-free half band "
                f"{self.band / 2}"
            )
        if self.cfo_max < 0:
            bad.append("cfo_max must be >= 0")
        if self.band > 0 and not 0 <= self.offset < self.band:
            bad.append(
                f"pilot_offset={self.offset} outside the user band [0, {self.band})"
            )
        if self.allocation not in ALLOCATION_SCHEMES:
            bad.append(f"allocation={self.allocation!r} not one of {ALLOCATION_SCHEMES}")
        if self.channel_model not in CHANNEL_MODELS:
            bad.append(f"channel_model={self.channel_model!r} not one of {CHANNEL_MODELS}")
        if self.pilot_region_mode not in PILOT_REGION_MODES:
            bad.append(
                f"pilot_region_mode={self.pilot_region_mode!r} not one of {PILOT_REGION_MODES}"
            )
        if self.gram_loading < 0:
            bad.append("gram_loading must be >= 0")
        if not 0 <= self.rng_seed < 2 ** 64:
            bad.append("rng_seed must be a 64-bit non-negative integer")
        return bad

    def validate(self) -> "SystemConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(bad))
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(SystemConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)  # accepts "inf"
    except ValueError as exc:
        raise ConfigError(f"cannot parse {kind} from {raw!r} for key {name!r}") from exc
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse bool from {raw!r} for key {name!r}")
    return raw


def parse_config_text(text: str) -> SystemConfig:
    """Parse a flat ``key = value`` config (``#`` starts a comment)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(
                f"line {lineno}: unknown key {key!r}; valid keys: "
                + ", ".join(sorted(_FIELD_TYPES))
            )
        values[key] = _coerce(key, raw)
    return SystemConfig(**values).validate()


def load_config(path) -> SystemConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def apply_overrides(cfg: SystemConfig, overrides: dict[str, str]) -> SystemConfig:
    """Apply ``{field: raw-value}`` overrides and re-validate."""
    updates = {}
    for key, raw in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: " + ", ".join(sorted(_FIELD_TYPES))
            )
        updates[key] = _coerce(key, str(raw))
    return replace(cfg, **updates).validate()


def echo_config(cfg: SystemConfig) -> str:
    """Full config as reloadable ``key = value`` text, resolved values in comments."""
    resolved = {"pilot_anchor": cfg.anchor, "pilot_offset": cfg.offset, "bem_order": cfg.beta}
    lines = []
    for f in fields(SystemConfig):
        line = f"{f.name} = {getattr(cfg, f.name)}"
        if f.name in resolved and getattr(cfg, f.name) != resolved[f.name]:
            line += f"  # resolved: {resolved[f.name]}"
        lines.append(line)
    lines.append(f"# derived: n_s = {cfg.n_s}, cp_rem = {cfg.cp_rem}, band = {cfg.band}")
    return "\n".join(lines) + "\n"
