"""Separation quality metrics.

Implemented here:

* :func:`si_snr` -- scale-invariant signal-to-noise ratio, the package's
  main fidelity measure (also used, uncapped, as the training loss via
  :func:`si_snr_tensor`).
* :func:`bss_eval` -- whole-signal SDR/SIR/SAR from least-squares
  projections of the estimate onto the reference sources.
* :func:`stoi_desk` -- short-time objective intelligibility from
  one-third-octave band envelopes, for 16 kHz signals.

All log-ratio metrics are capped to +-60 dB so that exact-recovery and
exact-failure cases stay finite in aggregated tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .signal import Waveform

DB_CAP = 60.0
EPS = 1e-12

# stoi_desk geometry: 32 ms Hann frames, 50% overlap, 15 one-third-octave
# bands from 150 Hz, 384 ms (24-frame) analysis segments, -15 dB clipping.
STOI_SAMPLE_RATE = 16_000
STOI_FRAME = 512
STOI_HOP = 256
STOI_NFFT = 512
STOI_NUM_BANDS = 15
STOI_BAND_BASE_HZ = 150.0
STOI_SEGMENT_FRAMES = 24
STOI_CLIP_DB = -15.0


@dataclass
class MetricReport:
    """One evaluation row: all metrics for a (reference, estimate) pair."""

    si_snr: float
    sdr: float
    sir: float
    sar: float
    stoi: float

    def __post_init__(self):
        for name in ("si_snr", "sdr", "sir", "sar", "stoi"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite metric {name}")


def _as_samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def _capped_db(num: float, den: float) -> float:
    with np.errstate(divide="ignore"):
        value = 10.0 * np.log10(num / den) if den > 0 else np.inf
    return float(np.clip(value, -DB_CAP, DB_CAP))


def si_snr(ref, est) -> float:
    """Scale-invariant SNR in dB, capped to +-60.

    The estimate is decomposed against the zero-mean reference as
    ``s_t = (<est, ref> / ||ref||^2) ref`` and ``e = est - s_t``; the
    value is ``10 log10(||s_t||^2 / (||e||^2 + eps))``. Multiplying the
    estimate by any nonzero constant leaves the value unchanged (up to
    floating-point rounding of the scaled input).
    """
    ref = _as_samples(ref)
    est = _as_samples(est)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("reference signal is zero")
    s_t = (np.dot(est, ref) / ref_energy) * ref
    e = est - s_t
    return _capped_db(float(np.dot(s_t, s_t)), float(np.dot(e, e)) + EPS)


def si_snr_tensor(ref: torch.Tensor, est: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Differentiable SI-SNR over the last axis, in dB, uncapped.

    Used as the training objective (negated); the reporting cap of
    :func:`si_snr` is deliberately absent so gradients never vanish at
    the cap.
    """
    ref = ref - ref.mean(dim=-1, keepdim=True)
    est = est - est.mean(dim=-1, keepdim=True)
    proj = (est * ref).sum(dim=-1, keepdim=True) / (ref * ref).sum(dim=-1, keepdim=True)
    s_t = proj * ref
    e = est - s_t
    ratio = (s_t * s_t).sum(dim=-1) / ((e * e).sum(dim=-1) + eps)
    return 10.0 * torch.log10(ratio + eps)


def bss_eval(ref_target, ref_interferer, est) -> tuple[float, float, float]:
    """Whole-signal SDR, SIR, SAR in dB (each capped to +-60).

    The estimate is split by least squares into a target part (its
    projection onto the target reference), an interference part (the
    extra component captured by projecting onto the span of both
    references) and an artifact residual:

        s_target = <est, r1> / <r1, r1> * r1
        e_interf = P_{span(r1, r2)}(est) - s_target
        e_artif  = est - P_{span(r1, r2)}(est)

        SDR = 10 log10(||s_target||^2 / ||e_interf + e_artif||^2)
        SIR = 10 log10(||s_target||^2 / ||e_interf||^2)
        SAR = 10 log10(||s_target + e_interf||^2 / ||e_artif||^2)
    """
    r1 = _as_samples(ref_target)
    r2 = _as_samples(ref_interferer)
    est = _as_samples(est)
    if not (r1.shape == r2.shape == est.shape):
        raise ValueError(f"length mismatch: {r1.shape}, {r2.shape}, {est.shape}")

    g11 = float(np.dot(r1, r1))
    g22 = float(np.dot(r2, r2))
    g12 = float(np.dot(r1, r2))
    if g11 == 0.0 or g22 == 0.0:
        raise ValueError("reference signal is zero")
    # Normalized Gram determinant: 0 for collinear references.
    if 1.0 - g12 * g12 / (g11 * g22) < 1e-10:
        raise ValueError("reference signals are collinear")

    c1, c2 = np.linalg.solve(np.array([[g11, g12], [g12, g22]]),
                             np.array([np.dot(est, r1), np.dot(est, r2)]))
    span_proj = c1 * r1 + c2 * r2
    s_target = (np.dot(est, r1) / g11) * r1
    e_interf = span_proj - s_target
    e_artif = est - span_proj

    sdr = _capped_db(float(np.dot(s_target, s_target)),
                     float(np.sum((e_interf + e_artif) ** 2)) + EPS)
    sir = _capped_db(float(np.dot(s_target, s_target)),
                     float(np.dot(e_interf, e_interf)) + EPS)
    sar = _capped_db(float(np.sum((s_target + e_interf) ** 2)),
                     float(np.dot(e_artif, e_artif)) + EPS)
    return sdr, sir, sar


def _third_octave_masks(sample_rate: int, nfft: int) -> np.ndarray:
    """Boolean (bands, bins) masks grouping rfft bins into 1/3-octave bands."""
    freqs = np.arange(nfft // 2 + 1) * (sample_rate / nfft)
    centers = STOI_BAND_BASE_HZ * 2.0 ** (np.arange(STOI_NUM_BANDS) / 3.0)
    lo = centers / 2.0 ** (1.0 / 6.0)
    hi = centers * 2.0 ** (1.0 / 6.0)
    return (freqs[None, :] >= lo[:, None]) & (freqs[None, :] < hi[:, None])


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    """(bands, frames) magnitudes: sqrt of band-summed framewise power."""
    window = np.hanning(STOI_FRAME + 1)[:-1]
    num_frames = (len(x) - STOI_FRAME) // STOI_HOP + 1
    offsets = np.arange(num_frames) * STOI_HOP
    frames = x[offsets[:, None] + np.arange(STOI_FRAME)] * window
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    power = np.abs(spec) ** 2
    masks = _third_octave_masks(STOI_SAMPLE_RATE, STOI_NFFT)
    return np.sqrt(power @ masks.T).T


def stoi_desk(ref, est) -> float:
    """Short-time objective intelligibility for 16 kHz signals.

    One-third-octave band envelopes of reference and estimate are
    compared by correlation over sliding 384 ms segments; per segment
    the estimate's band envelope is energy-normalized to the reference
    and clipped at -15 dB below it before correlating. The score is the
    mean correlation over all bands and segments where the reference
    envelope is non-constant (constant-envelope cells carry no
    intelligibility information). Typically in [-1, 1], ~1 for a perfect
    estimate.
    """
    ref_w = ref if isinstance(ref, Waveform) else None
    est_w = est if isinstance(est, Waveform) else None
    for wav in (ref_w, est_w):
        if wav is not None and wav.sample_rate != STOI_SAMPLE_RATE:
            raise ValueError(f"stoi_desk requires {STOI_SAMPLE_RATE} Hz input, "
                             f"got {wav.sample_rate}")
    ref = _as_samples(ref)
    est = _as_samples(est)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    min_len = (STOI_SEGMENT_FRAMES - 1) * STOI_HOP + STOI_FRAME
    if len(ref) < min_len:
        raise ValueError(f"input too short for one 384 ms segment "
                         f"({len(ref)} < {min_len} samples)")

    x = _band_envelopes(ref)
    y = _band_envelopes(est)
    num_frames = x.shape[1]
    clip_gain = 10.0 ** (-STOI_CLIP_DB / 20.0)

    scores = []
    for seg_end in range(STOI_SEGMENT_FRAMES, num_frames + 1):
        xs = x[:, seg_end - STOI_SEGMENT_FRAMES : seg_end]
        ys = y[:, seg_end - STOI_SEGMENT_FRAMES : seg_end]
        norm = np.linalg.norm(xs, axis=1) / (np.linalg.norm(ys, axis=1) + EPS)
        ys = ys * norm[:, None]
        ys = np.minimum(ys, xs * clip_gain)
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys - ys.mean(axis=1, keepdims=True)
        xn = np.linalg.norm(xc, axis=1)
        yn = np.linalg.norm(yc, axis=1)
        for b in range(STOI_NUM_BANDS):
            if xn[b] < 1e-10:
                continue
            if yn[b] < 1e-10:
                scores.append(0.0)
            else:
                scores.append(float(np.dot(xc[b], yc[b]) / (xn[b] * yn[b])))
    if not scores:
        raise ValueError("no informative band/segment cells in reference")
    return float(np.mean(scores))


def evaluate_separation(ref_target, ref_interferer, est) -> MetricReport:
    """All metrics for one separated mixture."""
    sdr, sir, sar = bss_eval(ref_target, ref_interferer, est)
    return MetricReport(
        si_snr=si_snr(ref_target, est),
        sdr=sdr,
        sir=sir,
        sar=sar,
        stoi=stoi_desk(ref_target, est),
    )
