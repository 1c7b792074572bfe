"""Synthetic parallel-corpus generation.

A small phoneme inventory (vowel-, plosive- and fricative-like symbols)
is rendered to audio by additive synthesis: harmonic sources shaped by
formant resonances for vowels, band-shaped noise for fricatives, and
closure-plus-burst events for plosives. A SpeakerProfile warps pitch,
formants, rate and noise, so the same symbolic utterance can be rendered
by many "speakers" and by one fixed canonical speaker, giving exactly
parallel training pairs with ground-truth transcripts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, fileio
from .errors import InvalidArgument

SAMPLE_RATE = 16000
CANONICAL_F0_HZ = 140.0

# Formant resonance bandwidths (Hz) for F1..F3.
_FORMANT_BW = (70.0, 90.0, 140.0)

# Short silent gap appended to every phoneme segment (scaled by rate like
# the segment itself); keeps concatenation boundaries crisp.
_SEGMENT_GAP_MS = 14.0

# Leading/trailing silence margins around every rendered utterance, also
# rate-scaled. They give utterances realistic edges (and room for
# background speech to poke through in mixtures).
_LEAD_MS = 70.0
_TAIL_MS = 90.0


@dataclass(frozen=True)
class PhonemeTemplate:
    kind: str  # vowel | plosive | fricative
    duration_ms: float
    formants: tuple = ()        # vowel: (F1, F2, F3) in Hz
    band: tuple = ()            # plosive: (center, width); fricative: (lo, hi)
    amp: float = 1.0


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered symbol set with per-symbol acoustic templates."""

    symbols: tuple
    templates: dict

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise InvalidArgument("inventory symbols must be unique")
        vowel_max = max(t.duration_ms for t in self.templates.values() if t.kind == "vowel")
        plosive_max = max(t.duration_ms for t in self.templates.values() if t.kind == "plosive")
        if plosive_max >= vowel_max:
            raise InvalidArgument("plosive templates must be shorter than vowel templates")

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    def of_kind(self, kind: str) -> tuple:
        return tuple(s for s in self.symbols if self.templates[s].kind == kind)

    @property
    def vowels(self):
        return self.of_kind("vowel")

    @property
    def plosives(self):
        return self.of_kind("plosive")

    @property
    def fricatives(self):
        return self.of_kind("fricative")

    def grapheme_of(self, symbol: str) -> str:
        """Fixed 1:1 letter encoding of symbols."""
        return _GRAPHEME_MAP[symbol]

    @classmethod
    def default(cls) -> "PhonemeInventory":
        return _DEFAULT_INVENTORY


_DEFAULT_TEMPLATES = {
    # 5 vowel-like symbols: harmonic source through formant resonances
    "aa": PhonemeTemplate("vowel", 120, formants=(730, 1090, 2440)),
    "eh": PhonemeTemplate("vowel", 115, formants=(530, 1840, 2480)),
    "iy": PhonemeTemplate("vowel", 125, formants=(270, 2290, 3010)),
    "ow": PhonemeTemplate("vowel", 120, formants=(570, 840, 2410)),
    "uw": PhonemeTemplate("vowel", 115, formants=(300, 870, 2240)),
    # 4 plosive-like symbols: closure silence then a short noise burst
    "p": PhonemeTemplate("plosive", 60, band=(900, 700), amp=0.9),
    "t": PhonemeTemplate("plosive", 60, band=(3400, 1300), amp=0.9),
    "k": PhonemeTemplate("plosive", 65, band=(1900, 900), amp=0.9),
    "b": PhonemeTemplate("plosive", 62, band=(420, 380), amp=0.9),
    # 3 fricative-like symbols: sustained band-shaped noise
    "s": PhonemeTemplate("fricative", 100, band=(4500, 7400), amp=0.5),
    "sh": PhonemeTemplate("fricative", 105, band=(2000, 4000), amp=0.55),
    "f": PhonemeTemplate("fricative", 95, band=(1200, 6800), amp=0.35),
}

_DEFAULT_INVENTORY = PhonemeInventory(
    symbols=tuple(_DEFAULT_TEMPLATES), templates=_DEFAULT_TEMPLATES
)

_GRAPHEME_MAP = {
    "aa": "a", "eh": "e", "iy": "i", "ow": "o", "uw": "u",
    "p": "p", "t": "t", "k": "k", "b": "b",
    "s": "s", "sh": "c", "f": "f",
}


@dataclass(frozen=True)
class Utterance:
    """Phoneme sequence with per-symbol durations (ms)."""

    phonemes: tuple  # of (symbol, duration_ms)

    def __post_init__(self):
        if not self.phonemes:
            raise InvalidArgument("utterance must contain at least one phoneme")
        if any(d <= 0 for _, d in self.phonemes):
            raise InvalidArgument("phoneme durations must be positive")

    @property
    def transcript(self) -> tuple:
        return tuple(s for s, _ in self.phonemes)


@dataclass(frozen=True)
class SpeakerProfile:
    """Rendering parameters for one synthetic speaker.

    vowel_shift_map is a bijection on the vowel class used as an accent
    proxy; vowel_shift_strength blends the shifted vowel's formants into
    the intended vowel's (a full swap would destroy the content, so the
    shift is partial and therefore recoverable). plosive_gain scales the
    burst amplitude (0 silences bursts entirely).
    """

    f0_hz: float = CANONICAL_F0_HZ
    formant_scale: float = 1.0
    rate_scale: float = 1.0
    noise_level: float = 0.0
    vowel_shift_map: dict = field(default_factory=dict)
    vowel_shift_strength: float = 0.35
    plosive_gain: float = 1.0

    def __post_init__(self):
        if not (60.0 <= self.f0_hz <= 400.0):
            raise InvalidArgument(f"f0 must be in [60, 400] Hz, got {self.f0_hz}")
        if not (0.5 <= self.rate_scale <= 2.0):
            raise InvalidArgument(f"rate_scale must be in [0.5, 2], got {self.rate_scale}")
        if not (0.0 <= self.noise_level < 1.0):
            raise InvalidArgument(f"noise_level must be in [0, 1), got {self.noise_level}")
        if self.vowel_shift_map:
            keys = sorted(self.vowel_shift_map)
            vals = sorted(self.vowel_shift_map.values())
            if keys != vals:
                raise InvalidArgument("vowel_shift_map must be a bijection on the vowel class")

    def shifted(self, symbol: str) -> str:
        return self.vowel_shift_map.get(symbol, symbol)


CANONICAL_PROFILE = SpeakerProfile()


@dataclass(frozen=True)
class MixtureSpec:
    """Sampling parameters for one mixture example."""

    w: float
    n_background: int
    seed: int

    def __post_init__(self):
        if not (0.1 <= self.w < 0.5):
            raise InvalidArgument(f"w must be in [0.1, 0.5), got {self.w}")
        if not (1 <= self.n_background <= 7):
            raise InvalidArgument(f"n_background must be in [1, 7], got {self.n_background}")


# --------------------------------------------------------------------------
# sampling and rendering

def sample_utterance(rng, inventory: PhonemeInventory, min_len: int, max_len: int) -> Utterance:
    """Uniform-length symbol sequence with +-20% duration jitter.

    Immediately repeated symbols are resampled (adjacent identical phones
    would fuse into one acoustic segment); each position is still
    uniform over the inventory.
    """
    if not (1 <= min_len <= max_len):
        raise InvalidArgument(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    if len(inventory) == 0:
        raise InvalidArgument("inventory is empty")
    length = int(rng.integers(min_len, max_len + 1))
    phonemes = []
    prev = None
    for _ in range(length):
        symbol = inventory.symbols[rng.integers(len(inventory))]
        while symbol == prev and len(inventory) > 1:
            symbol = inventory.symbols[rng.integers(len(inventory))]
        prev = symbol
        jitter = rng.uniform(0.8, 1.2)
        phonemes.append((symbol, inventory.templates[symbol].duration_ms * jitter))
    return Utterance(tuple(phonemes))


def segment_samples(duration_ms: float, rate_scale: float, sr: int = SAMPLE_RATE) -> int:
    """Rendered length of one phoneme segment (content plus trailing gap)."""
    n = max(int(round(sr * duration_ms / 1000.0 / rate_scale)), 16)
    gap = int(round(sr * _SEGMENT_GAP_MS / 1000.0 / rate_scale))
    return n + gap


def lead_samples(rate_scale: float, sr: int = SAMPLE_RATE) -> int:
    """Length of the silent margin preceding the first phoneme."""
    return int(round(sr * _LEAD_MS / 1000.0 / rate_scale))


def _resonance_gain(freqs, formants, formant_scale):
    """Product of second-order resonance magnitudes at the given frequencies."""
    gain = np.ones_like(freqs)
    for f_c, bw in zip(formants, _FORMANT_BW):
        fc = f_c * formant_scale
        gain *= fc**2 / np.sqrt((fc**2 - freqs**2) ** 2 + (bw * freqs) ** 2)
    return gain


def _ramp_envelope(n, sr, ramp_ms=5.0):
    env = np.ones(n)
    r = min(int(sr * ramp_ms / 1000.0), n // 2)
    if r > 0:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(r) / r))
        env[:r] = ramp
        env[-r:] = ramp[::-1]
    return env


def _band_noise(rng, n, sr, lo, hi, edge_hz=200.0):
    """White noise shaped to [lo, hi] Hz with raised-cosine band edges."""
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    gain = np.zeros_like(freqs)
    inside = (freqs >= lo) & (freqs <= hi)
    gain[inside] = 1.0
    rise = (freqs >= lo - edge_hz) & (freqs < lo)
    gain[rise] = 0.5 * (1 + np.cos(np.pi * (lo - freqs[rise]) / edge_hz))
    fall = (freqs > hi) & (freqs <= hi + edge_hz)
    gain[fall] = 0.5 * (1 + np.cos(np.pi * (freqs[fall] - hi) / edge_hz))
    shaped = np.fft.irfft(spec * gain, n=n)
    rms = np.sqrt(np.mean(shaped**2))
    return shaped / max(rms, 1e-12)


def _render_vowel(template, shift_template, strength, profile, n, sr):
    formants = np.asarray(template.formants, dtype=np.float64)
    if shift_template is not None and strength > 0:
        shifted = np.asarray(shift_template.formants, dtype=np.float64)
        formants = (1.0 - strength) * formants + strength * shifted
    f0 = profile.f0_hz
    n_harmonics = max(1, int((sr / 2 - 200) / f0))
    k = np.arange(1, n_harmonics + 1)
    freqs = k * f0
    # 1/k^2 source tilt keeps the fundamental dominant after resonance shaping.
    amps = _resonance_gain(freqs, formants, profile.formant_scale) / k**2
    amps /= max(np.max(np.abs(amps)), 1e-12)
    t = np.arange(n) / sr
    signal = np.sin(2 * np.pi * t[:, None] * freqs[None, :]) @ amps
    rms = np.sqrt(np.mean(signal**2))
    return (signal / max(rms, 1e-12)) * 0.22 * template.amp * _ramp_envelope(n, sr)


def _render_fricative(template, rng, n, sr):
    lo, hi = template.band
    return _band_noise(rng, n, sr, lo, hi) * 0.25 * template.amp * _ramp_envelope(n, sr)


def _render_plosive(template, profile, rng, n, sr):
    center, width = template.band
    out = np.zeros(n)
    closure = int(0.55 * n)
    burst = max(int(0.30 * n), 8)
    burst = min(burst, n - closure)
    if burst > 0 and profile.plosive_gain > 0:
        noise = _band_noise(rng, burst, sr, max(center - width, 60), center + width)
        decay = np.exp(-np.arange(burst) / max(burst / 3.0, 1.0))
        out[closure : closure + burst] = (
            noise * decay * 0.45 * template.amp * profile.plosive_gain
        )
    return out


def render(utterance: Utterance, speaker: SpeakerProfile, sr: int = SAMPLE_RATE,
           seed: int = 0) -> dsp.AudioBuffer:
    """Render an utterance for one speaker; pure in (utterance, speaker, seed)."""
    inventory = PhonemeInventory.default()
    rng = np.random.default_rng(seed)
    pieces = [np.zeros(int(round(sr * _LEAD_MS / 1000.0 / speaker.rate_scale)))]
    for symbol, duration_ms in utterance.phonemes:
        template = inventory.templates[symbol]
        total = segment_samples(duration_ms, speaker.rate_scale, sr)
        gap = int(round(sr * _SEGMENT_GAP_MS / 1000.0 / speaker.rate_scale))
        n = total - gap
        if template.kind == "vowel":
            shift_symbol = speaker.shifted(symbol)
            shift_template = (
                inventory.templates[shift_symbol] if shift_symbol != symbol else None
            )
            piece = _render_vowel(template, shift_template, speaker.vowel_shift_strength,
                                  speaker, n, sr)
        elif template.kind == "fricative":
            piece = _render_fricative(template, rng, n, sr)
        else:
            piece = _render_plosive(template, speaker, rng, n, sr)
        pieces.append(np.concatenate([piece, np.zeros(gap)]))
    pieces.append(np.zeros(int(round(sr * _TAIL_MS / 1000.0 / speaker.rate_scale))))
    signal = np.concatenate(pieces)
    if speaker.noise_level > 0:
        rms = np.sqrt(np.mean(signal**2))
        signal = signal + rng.standard_normal(len(signal)) * speaker.noise_level * rms
    peak = np.max(np.abs(signal))
    if peak > 0:
        signal = signal * (0.9 / peak)
    return dsp.AudioBuffer(signal, sr)


# --------------------------------------------------------------------------
# speaker pools and parallel examples

def _random_vowel_permutation(rng, vowels):
    perm = list(vowels)
    while True:
        rng.shuffle(perm)
        if any(a != b for a, b in zip(perm, vowels)):
            return dict(zip(vowels, perm))


def source_pool(inventory: PhonemeInventory, kind: str = "varied"):
    """Return a sampler rng -> SpeakerProfile.

    'varied' covers the normalization task's source diversity; 'mild'
    stays near the canonical voice (used for separation targets so the
    scoring oracle remains reliable on clean audio).
    """
    vowels = inventory.vowels

    def sample_varied(rng):
        shift = {} if rng.random() < 0.5 else _random_vowel_permutation(rng, vowels)
        return SpeakerProfile(
            f0_hz=float(rng.uniform(100.0, 240.0)),
            formant_scale=float(rng.uniform(0.9, 1.15)),
            rate_scale=float(rng.uniform(0.85, 1.2)),
            noise_level=float(rng.uniform(0.0, 0.06)),
            vowel_shift_map=shift,
            vowel_shift_strength=0.3,
        )

    def sample_mild(rng):
        return SpeakerProfile(
            f0_hz=float(rng.uniform(115.0, 175.0)),
            formant_scale=float(rng.uniform(0.95, 1.08)),
            rate_scale=float(rng.uniform(0.9, 1.1)),
            noise_level=float(rng.uniform(0.0, 0.02)),
        )

    if kind == "varied":
        return sample_varied
    if kind == "mild":
        return sample_mild
    raise InvalidArgument(f"unknown pool kind {kind!r}")


@dataclass(frozen=True)
class ParallelExample:
    utterance: Utterance
    source_audio: dsp.AudioBuffer
    target_audio: dsp.AudioBuffer
    phoneme_ids: np.ndarray
    grapheme_ids: np.ndarray


def make_parallel_example(rng, inventory: PhonemeInventory, pool,
                          min_len: int = 2, max_len: int = 4) -> ParallelExample:
    """One (source speaker, canonical target) rendering pair of the same
    utterance, with symbol-level phoneme and grapheme targets."""
    utterance = sample_utterance(rng, inventory, min_len, max_len)
    profile = pool(rng)
    source_seed = int(rng.integers(2**31))
    target_seed = int(rng.integers(2**31))
    source = render(utterance, profile, seed=source_seed)
    target = render(utterance, CANONICAL_PROFILE, seed=target_seed)
    phoneme_ids = np.array([inventory.index(s) for s in utterance.transcript], np.int32)
    # The grapheme encoding is 1:1, so grapheme ids mirror phoneme ids but
    # exercise the separate vocabulary plumbing.
    grapheme_ids = phoneme_ids.copy()
    return ParallelExample(utterance, source, target, phoneme_ids, grapheme_ids)


def atypical_profile(severity: float, seed: int = 0) -> SpeakerProfile:
    """A severely perturbed speaker: slow rate, strong vowel shifts,
    weakened plosive bursts, added noise. severity in (0, 1]."""
    if not (0.0 < severity <= 1.0):
        raise InvalidArgument(f"severity must be in (0, 1], got {severity}")
    rng = np.random.default_rng(seed)
    inventory = PhonemeInventory.default()
    shift = _random_vowel_permutation(rng, inventory.vowels)
    return SpeakerProfile(
        f0_hz=float(rng.uniform(95.0, 115.0)),
        formant_scale=1.0 + 0.12 * severity,
        rate_scale=1.0 - 0.4 * severity,
        noise_level=0.3 * severity,
        vowel_shift_map=shift,
        vowel_shift_strength=0.85 * severity,
        plosive_gain=1.0 - severity,
    )


# --------------------------------------------------------------------------
# mixtures

def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x**2)))


def mix(target: dsp.AudioBuffer, backgrounds, w: float, rng):
    """Weighted instantaneous mixture of RMS-normalized signals.

    Each background is padded (zero, at a random offset) or cropped to
    the target length, the backgrounds are averaged into one signal and
    weighted by w against (1 - w) for the target. Returns the
    peak-normalized mixture and the achieved SNR in dB, measured from
    the RMS of the two weighted components (for a single equal-length
    background this equals 20*log10((1 - w) / w) exactly).
    """
    if not (1 <= len(backgrounds) <= 7):
        raise InvalidArgument(f"need 1..7 backgrounds, got {len(backgrounds)}")
    if not (0.0 < w < 1.0):
        raise InvalidArgument(f"w must be in (0, 1), got {w}")
    t = target.samples
    t_rms = _rms(t)
    if t_rms == 0:
        raise InvalidArgument("target signal is all zero")
    t_norm = t / t_rms
    n = len(t)
    stacked = np.zeros((len(backgrounds), n))
    for idx, bg in enumerate(backgrounds):
        b = bg.samples
        b_rms = _rms(b)
        if b_rms == 0:
            raise InvalidArgument("background signal is all zero")
        b = b / b_rms
        if len(b) >= n:
            start = int(rng.integers(0, len(b) - n + 1))
            stacked[idx] = b[start : start + n]
        else:
            offset = int(rng.integers(0, n - len(b) + 1))
            stacked[idx, offset : offset + len(b)] = b
    combined = stacked.mean(axis=0)
    sig = (1.0 - w) * t_norm
    noise = w * combined
    noise_rms = _rms(noise)
    if noise_rms == 0:
        raise InvalidArgument("combined background is all zero")
    snr_db = 20.0 * np.log10(_rms(sig) / noise_rms)
    mixture = sig + noise
    peak = np.max(np.abs(mixture))
    mixture = mixture * (0.9 / peak)
    return dsp.AudioBuffer(mixture, target.sample_rate_hz), float(snr_db)


# --------------------------------------------------------------------------
# dataset construction

_SPLIT_FRACTIONS = (0.90, 0.05, 0.05)  # adapt/train, dev, test


def _split_of(index: int, total: int) -> str:
    if index < int(round(_SPLIT_FRACTIONS[0] * total)):
        return "train"
    if index < int(round((_SPLIT_FRACTIONS[0] + _SPLIT_FRACTIONS[1]) * total)):
        return "dev"
    return "test"


def build_dataset(task: str, n_examples: int, seed: int, out_dir,
                  scale: str = "desk", min_len: int = 2, max_len: int = 4,
                  severity: float = 1.0) -> Path:
    """Generate a dataset and write feature/target containers plus a
    line-oriented manifest. Deterministic in (task, n, seed, scale).

    Tasks: 'normalize' (varied sources -> canonical), 'atypical' (one
    severity-perturbed speaker -> canonical, 90/5/5 split), 'separate'
    (speech mixtures -> the clean loudest-speaker signal).
    """
    if task not in ("normalize", "atypical", "separate"):
        raise InvalidArgument(f"unknown task {task!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feat = dsp.feature_preset(scale)
    fb = dsp.mel_filterbank(feat.n_mels, feat.fmin_hz, feat.fmax_hz,
                            feat.fft_size_in, feat.sample_rate_hz)
    inventory = PhonemeInventory.default()
    varied = source_pool(inventory, "varied")
    mild = source_pool(inventory, "mild")
    atypical = atypical_profile(severity, seed=seed) if task == "atypical" else None

    config = {
        "task": task, "n_examples": n_examples, "seed": seed, "scale": scale,
        "min_len": min_len, "max_len": max_len, "severity": severity,
        "inventory": list(inventory.symbols), "canonical_f0_hz": CANONICAL_F0_HZ,
    }
    config_hash = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()
    ).hexdigest()[:16]

    from .evaluation import OracleRecognizer  # local import to avoid a cycle

    oracle = OracleRecognizer(inventory, scale=scale)
    calibration_per = oracle.calibration_per(seed=seed)

    records = []
    for i in range(n_examples):
        rng = np.random.default_rng((seed, i))
        meta = {}
        if task == "normalize":
            ex = make_parallel_example(rng, inventory, varied, min_len, max_len)
            input_audio, target_audio = ex.source_audio, ex.target_audio
            utterance, phoneme_ids = ex.utterance, ex.phoneme_ids
        elif task == "atypical":
            utterance = sample_utterance(rng, inventory, min_len, max_len)
            input_audio = render(utterance, atypical, seed=int(rng.integers(2**31)))
            target_audio = render(utterance, CANONICAL_PROFILE, seed=int(rng.integers(2**31)))
            phoneme_ids = np.array([inventory.index(s) for s in utterance.transcript], np.int32)
        else:
            ex = make_parallel_example(rng, inventory, mild, min_len, max_len)
            utterance, phoneme_ids = ex.utterance, ex.phoneme_ids
            target_audio = ex.source_audio  # clean signal in its own voice
            n_bg = int(rng.integers(1, 8))
            backgrounds = []
            for _ in range(n_bg):
                bg_utt = sample_utterance(rng, inventory, min_len, max_len)
                bg_profile = varied(rng)
                backgrounds.append(render(bg_utt, bg_profile, seed=int(rng.integers(2**31))))
            w = float(rng.uniform(0.1, 0.5))
            input_audio, snr_db = mix(target_audio, backgrounds, w, rng)
            meta = {"w": round(w, 6), "snr_db": round(snr_db, 4), "n_background": n_bg}

        mel = dsp.log_mel(input_audio, feat.stft_in, fb)
        target_mag = dsp.linear_spectrogram(target_audio, feat.stft_out)
        entry_path = out_dir / f"ex{i:06d}.p2sp"
        fileio.write_container(entry_path, {
            "mel": mel.features.astype(np.float32),
            "target_mag": target_mag.magnitudes.astype(np.float32),
            "phonemes": phoneme_ids,
            "graphemes": phoneme_ids.copy(),
            "input_audio": input_audio.samples.astype(np.float32),
            "target_audio": target_audio.samples.astype(np.float32),
        })
        records.append({
            "id": i,
            "path": entry_path.name,
            "transcript": " ".join(utterance.transcript),
            "split": _split_of(i, n_examples),
            "n_frames_in": mel.n_frames,
            "n_frames_out": target_mag.n_frames,
            **meta,
        })

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        header = {
            "kind": "header", "config": config, "config_hash": config_hash,
            "oracle_calibration_per": round(calibration_per, 6),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


class Dataset:
    """Reader over a generated dataset directory."""

    def __init__(self, manifest_path):
        self.dir = Path(manifest_path).parent
        lines = Path(manifest_path).read_text().splitlines()
        self.header = json.loads(lines[0])
        if self.header.get("kind") != "header":
            raise InvalidArgument(f"{manifest_path} has no header record")
        self.records = [json.loads(line) for line in lines[1:]]

    @property
    def scale(self) -> str:
        return self.header["config"]["scale"]

    @property
    def task(self) -> str:
        return self.header["config"]["task"]

    def split(self, name: str) -> list:
        return [r for r in self.records if r["split"] == name]

    def load(self, record) -> dict:
        return fileio.read_container(self.dir / record["path"])
