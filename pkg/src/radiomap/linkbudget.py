"""Link-budget constants and dB-scale conversions.

Everything dB lives here: the noise floor, the pathloss detection
threshold, the truncated gray-level scale used to store radio maps as
[0, 1] images, the NMSE/RMSE metrics, and the log-normal outage
probability. All other modules convert through this one so the scale
constants exist in exactly one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

# Commonly quoted round figure for the full dB span of the gray scale.
# Kept for reference only; conversions always use the exact span
# m1_db - pl_trnc_db (99.16 dB with the defaults below).
ROUNDED_SCALE_DB = 80.0


@dataclass(frozen=True)
class LinkBudget:
    """System constants for a 10 MHz link at 5.9 GHz, dBm throughout.

    p_tx_dbm: transmit power.
    n0_dbm_per_hz: thermal noise power spectral density.
    bandwidth_hz: signal bandwidth W.
    nf_db: receiver noise figure.
    m1_db: maximum pathloss in the dataset (at the 1 m pixel).
    pl_trnc_db: analytic noise floor; gray level 0 below this.
    """

    p_tx_dbm: float = 23.0
    n0_dbm_per_hz: float = -174.0
    bandwidth_hz: float = 1e7
    nf_db: float = 0.0
    m1_db: float = -47.84
    pl_trnc_db: float = -147.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LinkBudget":
        return cls(**d)


@dataclass(frozen=True)
class Metric:
    """Error metrics for one estimated map against a reference."""

    nmse: float
    rmse_gray: float
    rmse_db: float


def noise_floor_dbm(lb: LinkBudget) -> float:
    """Noise floor N = 10 log10(W) + N0 + NF, in dBm."""
    if lb.bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    return 10.0 * math.log10(lb.bandwidth_hz) + lb.n0_dbm_per_hz + lb.nf_db


def pathloss_threshold(lb: LinkBudget, snr_thr_db: float = 0.0) -> float:
    """Minimum pathloss (dB) at which the received SNR reaches snr_thr_db."""
    return -lb.p_tx_dbm + snr_thr_db + noise_floor_dbm(lb)


def check_design_rule(lb: LinkBudget, tol: float = 0.02) -> bool:
    """True when the truncation level splits the scale 4:1 around the
    detection threshold, i.e. m1 - thr(0) = 4 (thr(0) - trnc) within tol."""
    thr = pathloss_threshold(lb, 0.0)
    if not (lb.pl_trnc_db < thr < lb.m1_db):
        return False
    upper = lb.m1_db - thr
    lower = 4.0 * (thr - lb.pl_trnc_db)
    return abs(upper - lower) <= tol * max(abs(lower), 1e-12)


def scale_db_per_gray(lb: LinkBudget) -> float:
    """dB represented by one unit of gray level: m1 - trnc (99.16 default)."""
    return lb.m1_db - lb.pl_trnc_db


def to_gray(lb: LinkBudget, pl_db):
    """Affine rescaling of pathloss to [0, 1], truncated at pl_trnc.

    Accepts scalars or arrays. 0 stands for anything at or below the
    analytic noise floor, 1 for the maximum pathloss m1.
    """
    span = scale_db_per_gray(lb)
    return np.maximum((np.asarray(pl_db, dtype=float) - lb.pl_trnc_db) / span, 0.0)


def from_gray(lb: LinkBudget, gray):
    """Inverse of to_gray on (0, 1]; the truncated region is not invertible."""
    g = np.asarray(gray, dtype=float)
    if np.any(g <= 0.0):
        raise ValueError("gray level must be > 0; 0 is the truncated region")
    return lb.pl_trnc_db + g * scale_db_per_gray(lb)


def nmse(est, ref) -> float:
    """Sum |est - ref|^2 normalized by sum |ref|^2."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    denom = float(np.sum(ref * ref))
    if denom == 0.0:
        raise ValueError("reference is identically zero; NMSE undefined")
    return float(np.sum((est - ref) ** 2)) / denom


def rmse(est, ref) -> float:
    """Root mean squared difference in gray levels."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    return float(np.sqrt(np.mean((est - ref) ** 2)))


def evaluate(lb: LinkBudget, est, ref) -> Metric:
    """NMSE plus RMSE in gray levels and in dB for one map pair."""
    r = rmse(est, ref)
    return Metric(nmse=nmse(est, ref), rmse_gray=r, rmse_db=r * scale_db_per_gray(lb))


def _q_function(x: float) -> float:
    """Gaussian tail Q(x) = P(Z > x) via the complementary error function."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def outage_probability(lb: LinkBudget, rate_bits_per_s_per_hz: float,
                       pl_db: float, sigma_db: float) -> float:
    """Probability that a rate-R transmission fails when the pathloss is
    known up to a log-normal error with standard deviation sigma_db.

    P_out = 1 - Q( ((2^R - 1)_dB + (N0 W)_dB - P_Tx - P_L) / sigma ).
    """
    if sigma_db <= 0:
        raise ValueError("sigma_db must be positive")
    if rate_bits_per_s_per_hz <= 0:
        raise ValueError("rate must be positive")
    snr_required_db = 10.0 * math.log10(2.0 ** rate_bits_per_s_per_hz - 1.0)
    noise_dbm = noise_floor_dbm(lb)
    numerator = snr_required_db + noise_dbm - lb.p_tx_dbm - pl_db
    return 1.0 - _q_function(numerator / sigma_db)
