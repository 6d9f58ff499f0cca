"""Waveform I/O, log-mel extraction, the mel binary format, and Griffin-Lim.

The default mel recipe (22050 Hz, 1024 FFT, hop 256, 80 bins, 0-8000 Hz,
natural log with a 1e-5 floor) matches the recipe most published neural
vocoder checkpoints are trained against, so they can consume these mels
directly through the external-backend contract.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import ConfigError, MelFormatError, ValidationError

MEL_MAGIC = b"MEL1"


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ConfigError(
                f"need 0 < hop <= win <= n_fft, got hop={self.hop_length} "
                f"win={self.win_length} n_fft={self.n_fft}"
            )
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin} "
                f"fmax={self.fmax} sample_rate={self.sample_rate}"
            )
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")


@dataclass
class Waveform:
    samples: np.ndarray  # float32, nominal range [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (n_frames, n_mels), natural-log mel energies
    config: MelConfig

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValidationError(f"mel frames must be 2-D, got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValidationError("mel spectrogram must have at least one frame")
        if self.frames.shape[1] != self.config.n_mels:
            raise ConfigError(
                f"frames have {self.frames.shape[1]} mel bins, config says {self.config.n_mels}"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def load_wav(path: str | Path, target_rate: int = 22050) -> Waveform:
    """Load a PCM WAV as mono float at target_rate.

    Multi-channel audio is channel-averaged; the waveform is peak-normalized
    only if it exceeds full scale.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise OSError(f"{path}: not a readable WAV file ({exc})") from None
    if data.size == 0:
        raise ValidationError(f"{path}: zero-length audio")

    data = np.asarray(data)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)

    if rate != target_rate:
        gcd = math.gcd(int(target_rate), int(rate))
        samples = resample_poly(samples, target_rate // gcd, rate // gcd)
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples=samples.astype(np.float32), sample_rate=target_rate)


def save_wav(wave: Waveform, path: str | Path) -> None:
    """Write 16-bit PCM."""
    clipped = np.clip(wave.samples, -1.0, 1.0)
    wavfile.write(Path(path), wave.sample_rate, (clipped * 32767.0).astype(np.int16))


def _window(cfg: MelConfig) -> np.ndarray:
    """Periodic Hann, zero-padded to n_fft and centered."""
    win = get_window("hann", cfg.win_length, fftbins=True)
    if cfg.win_length < cfg.n_fft:
        pad = cfg.n_fft - cfg.win_length
        win = np.pad(win, (pad // 2, pad - pad // 2))
    return win


def frame_count(n_samples: int, hop_length: int) -> int:
    """Centered-STFT frame count: 1 + floor(n/hop)."""
    return 1 + n_samples // hop_length


def _stft(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Centered, reflect-padded STFT -> complex (n_frames, n_fft//2 + 1)."""
    if len(samples) < 1:
        raise ValidationError("cannot compute STFT of empty signal")
    pad = cfg.n_fft // 2
    padded = np.pad(samples.astype(np.float64), pad, mode="reflect")
    n_frames = frame_count(len(samples), cfg.hop_length)
    window = _window(cfg)
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[:: cfg.hop_length]
    frames = frames[:n_frames]
    return np.fft.rfft(frames * window, axis=1)


def _istft(spec: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Overlap-add inverse of _stft; returns (n_frames - 1) * hop samples."""
    n_frames = spec.shape[0]
    window = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * window
    total = (n_frames - 1) * cfg.hop_length + cfg.n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        start = t * cfg.hop_length
        out[start : start + cfg.n_fft] += frames[t]
        norm[start : start + cfg.n_fft] += window**2
    out = np.where(norm > 1e-11, out / np.maximum(norm, 1e-11), out)
    pad = cfg.n_fft // 2
    return out[pad : pad + (n_frames - 1) * cfg.hop_length]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Slaney-style area-normalized triangular filters, (n_mels, n_fft//2+1)."""
    n_freqs = cfg.n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1][:, None]
    upper = ramps[2:] / fdiff[1:][:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    return weights


def hz_to_mel(freq: float | np.ndarray) -> np.ndarray:
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mels = freq / f_sp
    log_region = freq >= min_log_hz
    mels = np.where(log_region, min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep, mels)
    return mels


def mel_to_hz(mels: float | np.ndarray) -> np.ndarray:
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    freqs = mels * f_sp
    log_region = mels >= min_log_mel
    return np.where(log_region, min_log_hz * np.exp(logstep * (mels - min_log_mel)), freqs)


def mel_spectrogram(wave: Waveform, cfg: MelConfig) -> MelSpectrogram:
    """Power STFT through the mel filterbank, floored and natural-logged."""
    if wave.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"waveform rate {wave.sample_rate} != mel config rate {cfg.sample_rate}"
        )
    if len(wave.samples) < 1:
        raise ValidationError("cannot compute mel spectrogram of empty waveform")
    spec = _stft(wave.samples, cfg)
    power = np.abs(spec) ** 2
    mel = power @ mel_filterbank(cfg).T
    mel = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames=mel.astype(np.float32), config=cfg)


def griffin_lim(mel: MelSpectrogram, n_iters: int = 32) -> Waveform:
    """Invert a log-mel spectrogram to audio by filterbank pseudo-inverse
    followed by iterative phase recovery."""
    if n_iters < 1:
        raise ConfigError(f"n_iters must be >= 1, got {n_iters}")
    cfg = mel.config
    fb = mel_filterbank(cfg)
    power = np.exp(mel.frames.astype(np.float64))  # (n_frames, n_mels)
    linear_power = np.maximum(power @ np.linalg.pinv(fb).T, 0.0)
    magnitude = np.sqrt(linear_power)  # (n_frames, n_freqs)

    phase = np.ones_like(magnitude, dtype=np.complex128)
    for _ in range(n_iters):
        audio = _istft(magnitude * phase, cfg)
        if len(audio) < 1:
            break
        rebuilt = _stft(audio, cfg)
        rebuilt = rebuilt[: magnitude.shape[0]]
        if rebuilt.shape[0] < magnitude.shape[0]:
            rebuilt = np.pad(rebuilt, ((0, magnitude.shape[0] - rebuilt.shape[0]), (0, 0)))
        phase = rebuilt / np.maximum(np.abs(rebuilt), 1e-12)
    audio = _istft(magnitude * phase, cfg)

    peak = np.max(np.abs(audio)) if audio.size else 0.0
    if peak > 1.0:
        audio = audio / peak
    return Waveform(samples=audio.astype(np.float32), sample_rate=cfg.sample_rate)


def spectral_convergence(audio: np.ndarray, target_magnitude: np.ndarray, cfg: MelConfig) -> float:
    """Relative Frobenius distance between |STFT(audio)| and a target magnitude."""
    mag = np.abs(_stft(audio, cfg))[: target_magnitude.shape[0]]
    if mag.shape[0] < target_magnitude.shape[0]:
        mag = np.pad(mag, ((0, target_magnitude.shape[0] - mag.shape[0]), (0, 0)))
    return float(
        np.linalg.norm(mag - target_magnitude) / max(np.linalg.norm(target_magnitude), 1e-12)
    )


_HEADER = struct.Struct("<IIfI")  # n_mels, n_frames, sample_rate, hop_length


def write_mel(mel: MelSpectrogram, path: str | Path) -> None:
    """Write the portable little-endian mel binary format."""
    cfg = mel.config
    payload = np.ascontiguousarray(mel.frames, dtype="<f4").tobytes()
    with open(Path(path), "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(_HEADER.pack(mel.n_mels, mel.n_frames, float(cfg.sample_rate), cfg.hop_length))
        fh.write(payload)


def read_mel(path: str | Path, base_config: MelConfig | None = None) -> MelSpectrogram:
    """Read a mel binary; header fields override base_config (default recipe)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MEL_MAGIC:
        raise MelFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 4 + _HEADER.size:
        raise MelFormatError(f"{path}: truncated header")
    n_mels, n_frames, sample_rate, hop = _HEADER.unpack_from(raw, 4)
    payload = raw[4 + _HEADER.size :]
    expected = 4 * n_mels * n_frames
    if len(payload) != expected:
        raise MelFormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_mels)
    base = base_config or MelConfig()
    win_length = max(base.win_length, int(hop))
    cfg = replace(
        base,
        n_mels=int(n_mels),
        sample_rate=int(round(sample_rate)),
        hop_length=int(hop),
        win_length=win_length,
        n_fft=max(base.n_fft, win_length),
    )
    return MelSpectrogram(frames=frames.copy(), config=cfg)
