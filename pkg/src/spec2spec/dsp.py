"""Signal-processing front end and back end.

Framing, STFT/iSTFT, mel filterbank analysis, and Griffin-Lim phase
reconstruction. All operations are pure functions over immutable inputs
and compute in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

DEFAULT_SAMPLE_RATE = 16000

# Mel energies are floored at this value before the (natural) log.
LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class AudioBuffer:
    """Time-domain waveform with its sample rate.

    Samples are float amplitudes, nominally in [-1, 1]; producers
    peak-normalize so the range holds by construction.
    """

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidArgument(f"audio must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgument("audio contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise InvalidArgument(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class StftConfig:
    """Analysis framing: Hann window of frame_length_samples, hopped by
    hop_samples, zero-padded to fft_size before the transform."""

    frame_length_samples: int
    hop_samples: int
    fft_size: int

    def __post_init__(self):
        if self.frame_length_samples < 2:
            raise InvalidArgument("frame length must be >= 2 samples")
        if self.hop_samples < 1 or self.hop_samples > self.frame_length_samples:
            raise InvalidArgument("hop must be in [1, frame_length]")
        if self.fft_size < self.frame_length_samples:
            raise InvalidArgument("fft_size must be >= frame_length")
        if self.fft_size & (self.fft_size - 1):
            raise InvalidArgument(f"fft_size must be a power of two, got {self.fft_size}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class FeatureConfig:
    """Front/back-end configuration for one scale preset.

    Input features use fft_size_in; decoder targets use fft_size_out with
    identical framing. The desk preset halves the frame sizes and uses 32
    mel bands so tests and training runs stay fast; the paper preset is
    16 kHz / 50 ms / 12.5 ms / 1024-point analysis with 80 mel bands over
    125-7600 Hz and 2048-point targets.
    """

    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    frame_length_samples: int = 800
    hop_samples: int = 200
    fft_size_in: int = 1024
    fft_size_out: int = 2048
    n_mels: int = 80
    fmin_hz: float = 125.0
    fmax_hz: float = 7600.0

    @property
    def stft_in(self) -> StftConfig:
        return StftConfig(self.frame_length_samples, self.hop_samples, self.fft_size_in)

    @property
    def stft_out(self) -> StftConfig:
        return StftConfig(self.frame_length_samples, self.hop_samples, self.fft_size_out)

    @property
    def target_bins(self) -> int:
        return self.fft_size_out // 2 + 1


_FEATURE_PRESETS = {
    "paper": FeatureConfig(),
    "desk": FeatureConfig(
        frame_length_samples=400,
        hop_samples=100,
        fft_size_in=512,
        fft_size_out=1024,
        n_mels=32,
    ),
}


def feature_preset(scale: str) -> FeatureConfig:
    """Return the FeatureConfig for a scale preset ('desk' or 'paper')."""
    try:
        return _FEATURE_PRESETS[scale]
    except KeyError:
        raise InvalidArgument(f"unknown scale preset {scale!r}") from None


@dataclass(frozen=True)
class LinearSpectrogram:
    """Non-negative STFT magnitudes, shape [n_frames, fft_size/2 + 1]."""

    magnitudes: np.ndarray
    config: StftConfig

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        if mags.ndim != 2 or mags.shape[1] != self.config.n_bins:
            raise InvalidArgument(
                f"magnitudes must be [n_frames, {self.config.n_bins}], got {mags.shape}"
            )
        if not np.all(np.isfinite(mags)) or np.any(mags < 0):
            raise InvalidArgument("magnitudes must be finite and non-negative")
        object.__setattr__(self, "magnitudes", mags)

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]


@dataclass(frozen=True)
class LogMelSpectrogram:
    """Log mel-band energies, shape [n_frames, n_mels]."""

    features: np.ndarray
    n_mels: int = 80
    fmin_hz: float = 125.0
    fmax_hz: float = 7600.0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.n_mels:
            raise InvalidArgument(f"features must be [n_frames, {self.n_mels}], got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise InvalidArgument("features contain non-finite values")
        object.__setattr__(self, "features", feats)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window w[n] = 0.5 * (1 - cos(2*pi*n / length)).

    The periodic form satisfies the constant-overlap-add property at the
    75% overlap used here.
    """
    if length < 2:
        raise InvalidArgument(f"window length must be >= 2, got {length}")
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / length))


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    """Number of analysis frames for a signal of n_samples.

    The signal end is zero-padded so the final partial frame is kept:
    1 + ceil((n_samples - frame_length) / hop).
    """
    if n_samples < cfg.frame_length_samples:
        raise InvalidArgument(
            f"signal of {n_samples} samples is shorter than one frame "
            f"({cfg.frame_length_samples})"
        )
    return 1 + -(-(n_samples - cfg.frame_length_samples) // cfg.hop_samples)


def _frame(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Slice a signal into overlapping frames [n_frames, frame_length],
    zero-padding the tail so the last partial frame is kept."""
    n = frame_count(len(samples), cfg)
    padded_len = cfg.frame_length_samples + (n - 1) * cfg.hop_samples
    padded = np.zeros(padded_len, dtype=np.float64)
    padded[: len(samples)] = samples
    idx = np.arange(cfg.frame_length_samples)[None, :] + cfg.hop_samples * np.arange(n)[:, None]
    return padded[idx]


def stft(audio: AudioBuffer, cfg: StftConfig) -> np.ndarray:
    """Short-time Fourier transform.

    Returns the complex half-spectrum, shape [n_frames, fft_size/2 + 1].
    Each frame is Hann-windowed then zero-padded to fft_size.
    """
    frames = _frame(audio.samples, cfg)
    windowed = frames * hann_window(cfg.frame_length_samples)[None, :]
    return np.fft.rfft(windowed, n=cfg.fft_size, axis=1)


def istft(
    spec: np.ndarray, cfg: StftConfig, sample_rate_hz: int = DEFAULT_SAMPLE_RATE
) -> AudioBuffer:
    """Inverse STFT by weighted overlap-add.

    Synthesis re-applies the analysis window and normalizes by the summed
    squared window, so istft(stft(x)) reconstructs the interior of x.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise InvalidArgument(f"spectrogram must be [n_frames, {cfg.n_bins}], got {spec.shape}")
    n_frames = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, : cfg.frame_length_samples]
    window = hann_window(cfg.frame_length_samples)
    out_len = cfg.frame_length_samples + (n_frames - 1) * cfg.hop_samples
    signal = np.zeros(out_len, dtype=np.float64)
    norm = np.zeros(out_len, dtype=np.float64)
    wsq = window * window
    for m in range(n_frames):
        start = m * cfg.hop_samples
        signal[start : start + cfg.frame_length_samples] += frames[m] * window
        norm[start : start + cfg.frame_length_samples] += wsq
    signal /= np.maximum(norm, 1e-10)
    return AudioBuffer(signal, sample_rate_hz)


def hz_to_mel(f_hz):
    """Mel scale: mel(f) = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mels):
    return 700.0 * (10.0 ** (np.asarray(mels, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters, weights shape [n_mels, fft_size/2 + 1]."""

    weights: np.ndarray
    band_edges_hz: np.ndarray = field(repr=False, default=None)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def mel_filterbank(
    n_mels: int,
    fmin_hz: float,
    fmax_hz: float,
    fft_size: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> MelFilterbank:
    """Build n_mels triangular filters with centers uniformly spaced on the
    mel scale between fmin_hz and fmax_hz.

    Filters are evaluated at the FFT bin frequencies and peak-normalized
    to 1.
    """
    nyquist = sample_rate / 2.0
    if not (0 <= fmin_hz < fmax_hz):
        raise InvalidArgument(f"need 0 <= fmin < fmax, got {fmin_hz}, {fmax_hz}")
    if fmax_hz > nyquist:
        raise InvalidArgument(f"fmax {fmax_hz} exceeds Nyquist {nyquist}")
    n_bins = fft_size // 2 + 1
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    bin_freqs = np.arange(n_bins) * (sample_rate / fft_size)
    weights = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, center, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        weights[i] = np.maximum(0.0, np.minimum(rising, falling))
        if not weights[i].any():
            # Guard for filters narrower than one bin: keep the nearest bin.
            weights[i, int(round(center / (sample_rate / fft_size)))] = 1.0
    return MelFilterbank(weights=weights, band_edges_hz=edges_hz)


def log_mel(audio: AudioBuffer, cfg: StftConfig, fb: MelFilterbank) -> LogMelSpectrogram:
    """Natural log of floored mel energies of the STFT magnitudes."""
    if fb.weights.shape[1] != cfg.n_bins:
        raise InvalidArgument(
            f"filterbank has {fb.weights.shape[1]} bins but config expects {cfg.n_bins}"
        )
    mags = np.abs(stft(audio, cfg))
    energies = mags @ fb.weights.T
    return LogMelSpectrogram(
        features=np.log(np.maximum(energies, LOG_FLOOR)),
        n_mels=fb.n_mels,
    )


def linear_spectrogram(audio: AudioBuffer, cfg: StftConfig) -> LinearSpectrogram:
    """STFT magnitudes as a LinearSpectrogram."""
    return LinearSpectrogram(magnitudes=np.abs(stft(audio, cfg)), config=cfg)


def griffin_lim(
    target_mag: LinearSpectrogram,
    n_iters: int = 60,
    seed: int | None = None,
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
) -> tuple[AudioBuffer, np.ndarray]:
    """Estimate a waveform whose STFT magnitude matches target_mag.

    Iterates x <- istft(M * exp(i * angle(stft(x)))) from a zero-phase
    start (or uniform-random phase when a seed is given). Returns the
    final waveform and the per-iteration spectral distance
    ||abs(stft(x)) - M||_F, which is non-increasing.
    """
    if n_iters < 1:
        raise InvalidArgument(f"n_iters must be >= 1, got {n_iters}")
    mags = target_mag.magnitudes
    cfg = target_mag.config
    if seed is None:
        phase = np.zeros_like(mags)
    else:
        rng = np.random.default_rng(seed)
        phase = rng.uniform(-np.pi, np.pi, size=mags.shape)
    x = istft(mags * np.exp(1j * phase), cfg, sample_rate_hz)
    distances = np.empty(n_iters)
    for it in range(n_iters):
        spec = stft(x, cfg)
        distances[it] = np.linalg.norm(np.abs(spec) - mags)
        # Keep magnitudes, adopt the analyzed phase.
        nonzero = np.maximum(np.abs(spec), 1e-16)
        x = istft(mags * (spec / nonzero), cfg, sample_rate_hz)
    return x, distances
