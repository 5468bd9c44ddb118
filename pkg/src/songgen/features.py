"""Signal-level utilities: mel analysis, iterative phase reconstruction,
feature projections, and the binary mel / wav file formats.

Audio runs at 24 kHz; accompaniment and vocal mels use hop 320 (75 Hz), the
codec feature stream uses hop 480 (50 Hz) to match the token rate.
"""

from __future__ import annotations

import struct
import wave

import numpy as np

from .errors import InvalidInput

SAMPLE_RATE = 24_000
N_FFT = 1024
MEL_HOP = 320  # 75 Hz mel frames
FEATURE_HOP = 480  # 50 Hz codec feature frames
N_MELS = 80
LOG_FLOOR = 1e-5

_MEL_MAGIC = b"MEL0"


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 20.0, fmax: float | None = None) -> np.ndarray:
    """(n_mels, n_fft//2+1) triangular filters on the mel scale."""
    fmax = fmax or sr / 2
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_mels, len(bins)))
    for i in range(n_mels):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bins - left) / (center - left)
        down = (right - bins) / (right - center)
        fb[i] = np.clip(np.minimum(up, down), 0, None)
    return fb


def stft_mag(wave_: np.ndarray, hop: int, n_fft: int = N_FFT) -> np.ndarray:
    """(T, n_fft//2+1) magnitude frames with a Hann window and edge padding."""
    wave_ = np.asarray(wave_, dtype=float)
    pad = n_fft // 2
    x = np.pad(wave_, (pad, pad), mode="reflect" if len(wave_) > pad else "constant")
    n_frames = 1 + (len(x) - n_fft) // hop
    window = np.hanning(n_fft)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.abs(np.fft.rfft(x[idx] * window, axis=1))


def log_mel(wave_: np.ndarray, hop: int = MEL_HOP, fb: np.ndarray | None = None) -> np.ndarray:
    """(T, n_mels) natural-log mel power spectrogram."""
    fb = mel_filterbank() if fb is None else fb
    mag = stft_mag(wave_, hop)
    return np.log(np.maximum(mag ** 2 @ fb.T, LOG_FLOOR))


def mel_to_audio(logmel: np.ndarray, hop: int = MEL_HOP, n_iter: int = 24,
                 fb: np.ndarray | None = None, seed: int = 0) -> np.ndarray:
    """Invert a log-mel spectrogram by filterbank pseudo-inverse plus
    iterative phase estimation."""
    fb = mel_filterbank() if fb is None else fb
    power = np.exp(np.asarray(logmel, dtype=float))
    linear = np.clip(power @ np.linalg.pinv(fb.T), 0, None)
    mag = np.sqrt(linear)  # (T, bins)
    rng = np.random.default_rng(seed)
    n_fft = (mag.shape[1] - 1) * 2
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    window = np.hanning(n_fft)
    for _ in range(n_iter):
        wave_ = _istft(mag * phase, hop, window)
        re = _stft_complex(wave_, hop, n_fft, window, mag.shape[0])
        phase = np.exp(1j * np.angle(re))
    return _istft(mag * phase, hop, window)


def _stft_complex(wave_, hop, n_fft, window, n_frames):
    pad = n_fft // 2
    x = np.pad(wave_, (pad, pad))
    need = n_fft + hop * (n_frames - 1)
    if len(x) < need:
        x = np.pad(x, (0, need - len(x)))
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(x[idx] * window, axis=1)


def _istft(spec, hop, window):
    n_fft = len(window)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    out = np.zeros(n_fft + hop * (len(frames) - 1))
    norm = np.zeros_like(out)
    for i, frame in enumerate(frames):
        out[i * hop:i * hop + n_fft] += frame
        norm[i * hop:i * hop + n_fft] += window ** 2
    out /= np.maximum(norm, 1e-8)
    pad = n_fft // 2
    return out[pad:-pad] if len(out) > 2 * pad else out


def feature_projection(d_feat: int = 32, n_mels: int = N_MELS, seed: int = 7) -> np.ndarray:
    """Fixed semi-orthogonal (d_feat, n_mels) map from log-mel to codec features.

    Rows are orthonormal, so the transpose is the exact right inverse on the
    projected subspace.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(n_mels, d_feat)))
    return q.T


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_mel(mel: np.ndarray, path) -> None:
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2:
        raise InvalidInput("mel must be a T x bins matrix")
    with open(path, "wb") as f:
        f.write(_MEL_MAGIC)
        f.write(struct.pack("<II", *mel.shape))
        f.write(np.ascontiguousarray(mel).tobytes())


def load_mel(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MEL_MAGIC:
        raise InvalidInput("not a mel file")
    t, bins = struct.unpack("<II", data[4:12])
    return np.frombuffer(data[12:], dtype=np.float32).reshape(t, bins).astype(np.float64)


def save_wav(wave_: np.ndarray, path, sr: int = SAMPLE_RATE) -> None:
    peak = np.abs(wave_).max()
    if peak > 1.0:
        wave_ = wave_ / peak
    pcm = (np.clip(wave_, -1, 1) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sr)
        w.writeframes(pcm.tobytes())


def load_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(float) / 32767.0, sr


def remix(vocal: np.ndarray, accomp: np.ndarray, headroom_db: float = -3.0) -> np.ndarray:
    """Sum two stems with per-stem headroom, then peak-normalize."""
    n = max(len(vocal), len(accomp))
    gain = 10 ** (headroom_db / 20)
    mix = np.zeros(n)
    mix[:len(vocal)] += gain * vocal
    mix[:len(accomp)] += gain * accomp
    peak = np.abs(mix).max()
    return mix / peak if peak > 0 else mix
