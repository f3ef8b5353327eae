"""Time/frequency representation and the synthetic enhancement corpus.

Signals are analysed with a one-sided STFT (periodic Hann, no padding),
magnitude-compressed, and carried around as complex ``(frames, bins)``
grids.  The corpus generator produces tonal "speech" buried in coloured
AR(1) noise at a uniformly drawn SNR.
"""
from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_WINDOW = 64
DEFAULT_HOP = 16
DEFAULT_SAMPLE_RATE = 8000
DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.15


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class TimeSignal:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError("TimeSignal must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("TimeSignal contains non-finite samples")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class StftMeta:
    window_length: int = DEFAULT_WINDOW
    hop: int = DEFAULT_HOP
    sample_rate: int = DEFAULT_SAMPLE_RATE


@dataclass
class CompressedSpec:
    """Magnitude-compressed complex spectrogram of shape (frames, bins)."""

    values: np.ndarray
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    stft_meta: StftMeta = field(default_factory=StftMeta)

    @property
    def shape(self):
        return self.values.shape


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _check_window(window_length: int, hop: int):
    if window_length <= 0 or window_length & (window_length - 1):
        raise ConfigError(f"window_length must be a power of two, got {window_length}")
    if hop <= 0 or window_length % hop:
        raise ConfigError(f"hop ({hop}) must divide window_length ({window_length})")


def num_frames(length: int, window_length: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP) -> int:
    if length < window_length:
        raise LengthError(f"signal of length {length} is shorter than one window ({window_length})")
    return (length - window_length) // hop + 1


def stft(sig, window_length: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP, window=None) -> np.ndarray:
    """One-sided STFT. Returns a complex array of shape (frames, window_length // 2 + 1)."""
    x = sig.samples if isinstance(sig, TimeSignal) else np.asarray(sig, dtype=np.float64)
    _check_window(window_length, hop)
    k = num_frames(len(x), window_length, hop)
    w = hann_periodic(window_length) if window is None else np.asarray(window, dtype=np.float64)
    idx = np.arange(window_length)[None, :] + hop * np.arange(k)[:, None]
    return np.fft.rfft(x[idx] * w, axis=-1)


def ola_constant(window_length: int, hop: int) -> float:
    """Constant value of the overlapped analysis-window sum (interior samples)."""
    w = hann_periodic(window_length)
    return float(w.reshape(-1, hop).sum(axis=0).mean())


def istft(grid, window_length: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP,
          sample_rate: int = DEFAULT_SAMPLE_RATE) -> TimeSignal:
    """Overlap-add inverse of :func:`stft`.

    Frames are inverse-transformed and overlap-added without a synthesis
    window, then divided by the constant window-overlap sum.  Reconstruction
    is exact on samples covered by ``window_length / hop`` frames; the first
    and last ``window_length - hop`` samples are attenuated.
    """
    grid = np.asarray(grid)
    _check_window(window_length, hop)
    if grid.ndim != 2 or grid.shape[1] != window_length // 2 + 1:
        raise ShapeError(
            f"grid of shape {grid.shape} does not match window_length {window_length}")
    k = grid.shape[0]
    frames = np.fft.irfft(grid, n=window_length, axis=-1)
    out = np.zeros(window_length + hop * (k - 1))
    for i in range(k):
        out[i * hop:i * hop + window_length] += frames[i]
    return TimeSignal(out / ola_constant(window_length, hop), sample_rate)


def compress(c, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
             stft_meta: StftMeta | None = None) -> CompressedSpec:
    if alpha <= 0 or beta <= 0:
        raise ConfigError("alpha and beta must be positive")
    c = np.asarray(c, dtype=np.complex128)
    mag = np.abs(c)
    # exp(i*angle(0)) == 1, so zero stays zero
    out = beta * mag ** alpha * np.exp(1j * np.angle(c))
    return CompressedSpec(out, alpha, beta, stft_meta or StftMeta())


def decompress(spec) -> np.ndarray:
    if isinstance(spec, CompressedSpec):
        v, alpha, beta = spec.values, spec.alpha, spec.beta
    else:
        v, alpha, beta = np.asarray(spec), DEFAULT_ALPHA, DEFAULT_BETA
    return (np.abs(v) / beta) ** (1.0 / alpha) * np.exp(1j * np.angle(v))


def analyse(sig, meta: StftMeta = StftMeta(), alpha: float = DEFAULT_ALPHA,
            beta: float = DEFAULT_BETA) -> CompressedSpec:
    """Signal -> compressed spectrogram."""
    return compress(stft(sig, meta.window_length, meta.hop), alpha, beta, meta)


def synthesise(spec: CompressedSpec, length: int | None = None) -> TimeSignal:
    """Compressed spectrogram -> signal, optionally padded/trimmed to ``length``."""
    m = spec.stft_meta
    sig = istft(decompress(spec), m.window_length, m.hop, m.sample_rate)
    if length is not None:
        s = np.zeros(length)
        n = min(length, len(sig.samples))
        s[:n] = sig.samples[:n]
        sig = TimeSignal(s, m.sample_rate)
    return sig


# --------------------------------------------------------------------------
# synthetic corpus

@dataclass
class MixtureSpec:
    snr_range_db: tuple[float, float] = (0.0, 20.0)
    num_pairs: int = 64
    seed: int = 0
    tone_count: int = 3
    noise_ar_coefficient: float = 0.9
    length: int = 1008
    sample_rate: int = DEFAULT_SAMPLE_RATE
    peak: float = 0.9

    def validate(self):
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ConfigError(f"snr_range_db: low ({lo}) exceeds high ({hi})")
        if self.num_pairs < 1:
            raise ConfigError("num_pairs must be positive")
        if self.tone_count < 1:
            raise ConfigError("tone_count must be positive")
        if not -1.0 < self.noise_ar_coefficient < 1.0:
            raise ConfigError("noise_ar_coefficient must lie in (-1, 1)")
        if self.length < DEFAULT_WINDOW:
            raise ConfigError("length must cover at least one analysis window")


@dataclass
class Pair:
    clean: TimeSignal
    noisy: TimeSignal
    snr_db: float
    index: int


def pair_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per pair index, so generation order does not matter."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _clean_signal(rng, n, sr, tone_count):
    t = np.arange(n) / sr
    x = np.zeros(n)
    for _ in range(tone_count):
        f = rng.uniform(200.0, 3500.0)
        a = rng.uniform(0.3, 1.0)
        x += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    env_f = rng.uniform(2.0, 8.0)
    env = 1.0 + 0.5 * np.sin(2 * np.pi * env_f * t + rng.uniform(0, 2 * np.pi))
    return x * env


def _ar1_noise(rng, n, a):
    w = rng.standard_normal(n)
    out = np.empty(n)
    prev = rng.standard_normal() / np.sqrt(1 - a * a)
    for i in range(n):
        prev = a * prev + w[i]
        out[i] = prev
    return out


def make_pair(cfg: MixtureSpec, index: int) -> Pair:
    rng = pair_rng(cfg.seed, index)
    lo, hi = cfg.snr_range_db
    snr = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    clean = _clean_signal(rng, cfg.length, cfg.sample_rate, cfg.tone_count)
    noise = _ar1_noise(rng, cfg.length, cfg.noise_ar_coefficient)
    noise *= np.linalg.norm(clean) / (np.linalg.norm(noise) * 10 ** (snr / 20))
    noisy = clean + noise
    scale = cfg.peak / np.max(np.abs(noisy))
    return Pair(TimeSignal(clean * scale, cfg.sample_rate),
                TimeSignal(noisy * scale, cfg.sample_rate), snr, index)


def generate_pairs(cfg: MixtureSpec) -> list[Pair]:
    cfg.validate()
    return [make_pair(cfg, i) for i in range(cfg.num_pairs)]


def measured_snr_db(pair: Pair) -> float:
    noise = pair.noisy.samples - pair.clean.samples
    return 20 * np.log10(np.linalg.norm(pair.clean.samples) / np.linalg.norm(noise))


def pairs_to_specs(pairs, meta: StftMeta = StftMeta(), alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA):
    """Stack pairs into compressed arrays ``(x0, y)`` of shape (N, frames, bins)."""
    x0 = np.stack([analyse(p.clean, meta, alpha, beta).values for p in pairs])
    y = np.stack([analyse(p.noisy, meta, alpha, beta).values for p in pairs])
    return x0, y


# --------------------------------------------------------------------------
# file formats

def write_wav(path, sig: TimeSignal):
    """16-bit little-endian PCM mono with the canonical 44-byte header."""
    pcm = np.clip(np.round(sig.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sig.sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path) -> TimeSignal:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit mono PCM")
            sr = w.getframerate()
            data = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise ValueError(f"{path}: not a readable WAV file ({e})") from e
    return TimeSignal(np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0, sr)


def write_dataset(pairs, out_dir, cfg: MixtureSpec, split: str = "train") -> Path:
    """Write WAV pairs plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        clean_name = f"{split}_{p.index:05d}_clean.wav"
        noisy_name = f"{split}_{p.index:05d}_noisy.wav"
        write_wav(out_dir / clean_name, p.clean)
        write_wav(out_dir / noisy_name, p.noisy)
        entries.append({"index": p.index, "clean": clean_name, "noisy": noisy_name,
                        "seed": cfg.seed, "snr_db": p.snr_db})
    manifest = {"split": split, "mixture": asdict(cfg), "pairs": entries}
    path = out_dir / f"{split}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_dataset(manifest_path) -> list[Pair]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    return [Pair(read_wav(base / e["clean"]), read_wav(base / e["noisy"]), e["snr_db"], e["index"])
            for e in manifest["pairs"]]
