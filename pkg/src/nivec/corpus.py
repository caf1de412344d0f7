"""Feature ingestion and persistence, cepstral mean normalization, trial
lists, and a synthetic multi-speaker corpus generator for desk-scale runs.

Feature file format (binary, little-endian):
    magic "NIVF" | u32 version=1 | u32 T | u32 D | T*D float32 row-major
Manifest: one line per utterance, ``utt_id<TAB>speaker_id<TAB>relative_path``.
Trial list: lines ``enroll_id<TAB>test_id<TAB>{tgt|non|unk}``.
"""

import os
import struct
import wave
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .numerics import make_rng, stable_softmax

FEATURE_MAGIC = b"NIVF"
FEATURE_VERSION = 1

TRIAL_LABELS = ("tgt", "non", "unk")


class FeatureFileError(ValueError):
    """Base class for feature file format violations."""


class BadMagicError(FeatureFileError):
    pass


class DimensionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


@dataclass
class FeatureSequence:
    """A T x D matrix of frame features with frame-rate metadata."""

    utterance_id: str
    frames: np.ndarray
    frame_shift: float = 0.01

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a T x D matrix with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite entries")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]

    @property
    def duration(self):
        return self.num_frames * self.frame_shift


def write_features(seq: FeatureSequence, path):
    """Persist frames as 32-bit floats; write/read round-trips bit-exactly."""
    data = np.ascontiguousarray(seq.frames, dtype="<f4")
    t, d = data.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, t, d))
        f.write(data.tobytes())


def read_feature_header(path):
    """Return (T, D) from a feature file without loading the payload."""
    with open(path, "rb") as f:
        head = f.read(16)
    if len(head) < 16:
        raise TruncatedFileError(f"{path}: truncated header")
    if head[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {head[:4]!r}")
    version, t, d = struct.unpack("<III", head[4:16])
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if t < 1 or d < 1:
        raise DimensionError(f"{path}: invalid dimensions T={t} D={d}")
    return t, d


def read_features(path, utterance_id=None, frame_shift=0.01) -> FeatureSequence:
    t, d = read_feature_header(path)
    with open(path, "rb") as f:
        f.seek(16)
        payload = f.read()
    expected = 4 * t * d
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    frames = np.frombuffer(payload[:expected], dtype="<f4").reshape(t, d).astype(np.float64)
    if utterance_id is None:
        utterance_id = os.path.splitext(os.path.basename(path))[0]
    return FeatureSequence(utterance_id, frames, frame_shift)


def apply_cmn(seq: FeatureSequence, window=None) -> FeatureSequence:
    """Cepstral mean normalization.

    window=None subtracts the whole-utterance mean per dimension;
    an integer window subtracts, per frame, the mean of its centered
    window (truncated at the sequence edges).
    """
    x = seq.frames
    if window is None:
        out = x - x.mean(axis=0, keepdims=True)
    else:
        window = int(window)
        if window < 1:
            raise ValueError(f"CMN window must be >= 1, got {window}")
        half = window // 2
        t = x.shape[0]
        out = np.empty_like(x)
        for i in range(t):
            lo = max(0, i - half)
            hi = min(t, i + half + 1)
            out[i] = x[i] - x[lo:hi].mean(axis=0)
    return FeatureSequence(seq.utterance_id, out, seq.frame_shift)


@dataclass
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    path: str
    num_frames: int = 0


@dataclass
class CorpusManifest:
    root: str
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utterance ids in manifest")

    def __len__(self):
        return len(self.entries)

    def feature_path(self, entry: ManifestEntry):
        return os.path.join(self.root, entry.path)

    def by_utterance(self):
        return {e.utterance_id: e for e in self.entries}

    def speakers(self):
        out = {}
        for e in self.entries:
            out.setdefault(e.speaker_id, []).append(e)
        return out

    def load(self, utterance_id) -> FeatureSequence:
        entry = self.by_utterance()[utterance_id]
        return read_features(self.feature_path(entry), utterance_id=utterance_id)

    def subset(self, speaker_ids):
        keep = set(speaker_ids)
        return CorpusManifest(self.root, [e for e in self.entries if e.speaker_id in keep])


def write_manifest(manifest: CorpusManifest, path):
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            f.write(f"{e.utterance_id}\t{e.speaker_id}\t{e.path}\n")


def read_manifest(path, root=None, with_frame_counts=True) -> CorpusManifest:
    if root is None:
        root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            entries.append(ManifestEntry(parts[0], parts[1], parts[2]))
    manifest = CorpusManifest(root, entries)
    if with_frame_counts:
        for e in manifest.entries:
            fpath = manifest.feature_path(e)
            if not os.path.exists(fpath):
                raise FileNotFoundError(f"manifest entry {e.utterance_id}: missing file {fpath}")
            e.num_frames = read_feature_header(fpath)[0]
    return manifest


@dataclass
class Trial:
    enroll_id: str
    test_id: str
    label: str = "unk"

    def __post_init__(self):
        if self.label not in TRIAL_LABELS:
            raise ValueError(f"trial label must be one of {TRIAL_LABELS}, got {self.label!r}")


@dataclass
class TrialList:
    trials: list = field(default_factory=list)

    def __len__(self):
        return len(self.trials)

    def num_targets(self):
        return sum(1 for t in self.trials if t.label == "tgt")

    def num_nontargets(self):
        return sum(1 for t in self.trials if t.label == "non")


def write_trials(trial_list: TrialList, path):
    with open(path, "w", encoding="utf-8") as f:
        for t in trial_list.trials:
            f.write(f"{t.enroll_id}\t{t.test_id}\t{t.label}\n")


def read_trials(path) -> TrialList:
    trials = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            trials.append(Trial(*parts))
    return TrialList(trials)


@dataclass
class SynthSpec:
    """Parameters of the synthetic multi-speaker corpus generator."""

    num_speakers: int = 8
    utts_per_speaker: int = 5
    min_frames: int = 200
    max_frames: int = 400
    feature_dim: int = 20
    speaker_dim: int = 4
    channel_noise: float = 0.3
    seed: int = 0
    num_components: int = 8
    component_spread: float = 2.0
    speaker_scale: float = 1.5
    weight_scale: float = 1.0
    frame_noise: float = 1.0

    def __post_init__(self):
        for name in ("num_speakers", "utts_per_speaker", "min_frames", "max_frames",
                     "feature_dim", "speaker_dim", "num_components"):
            if getattr(self, name) < 1:
                raise ValueError(f"SynthSpec.{name} must be >= 1")
        for name in ("channel_noise", "component_spread", "speaker_scale",
                     "weight_scale", "frame_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"SynthSpec.{name} must be >= 0")
        if self.max_frames < self.min_frames:
            raise ValueError("SynthSpec.max_frames must be >= min_frames")


def generate_synthetic_corpus(spec: SynthSpec, out_dir) -> CorpusManifest:
    """Write a seeded synthetic corpus and return its manifest.

    Frames are drawn from a speaker-shifted mixture: a global dictionary
    of component means, each shifted through its own column block of a
    fixed speaker subspace by the speaker's latent vector, with the
    speaker latent also tilting component usage. The shifts differ per
    component, so speaker identity lives in the shape of the frame
    distribution, not merely its mean, and survives mean normalization
    (as it does for real cepstral features). Each utterance adds a
    channel offset plus white frame noise. Deterministic under the seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    d, q, c = spec.feature_dim, spec.speaker_dim, spec.num_components

    rng_global = make_rng(spec.seed, "synth", "global")
    means = rng_global.standard_normal((c, d)) * spec.component_spread
    subspace = rng_global.standard_normal((c, d, q)) * (spec.speaker_scale / np.sqrt(q))
    weight_map = rng_global.standard_normal((c, q)) * (spec.weight_scale / np.sqrt(q))

    entries = []
    for s in range(spec.num_speakers):
        spk_id = f"spk{s:04d}"
        v = make_rng(spec.seed, "synth", "speaker", s).standard_normal(q)
        shifted = means + subspace @ v
        probs = stable_softmax(weight_map @ v)
        for u in range(spec.utts_per_speaker):
            utt_id = f"{spk_id}_u{u:03d}"
            rng = make_rng(spec.seed, "synth", "utt", s, u)
            t = int(rng.integers(spec.min_frames, spec.max_frames + 1))
            channel = rng.standard_normal(d) * spec.channel_noise
            comps = rng.choice(c, size=t, p=probs)
            frames = (shifted[comps] + channel
                      + rng.standard_normal((t, d)) * spec.frame_noise)
            rel = f"{utt_id}.nivf"
            write_features(FeatureSequence(utt_id, frames), os.path.join(out_dir, rel))
            entries.append(ManifestEntry(utt_id, spk_id, rel, t))

    manifest = CorpusManifest(out_dir, entries)
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest


def make_trials(manifest: CorpusManifest, num_target, num_nontarget, seed) -> TrialList:
    """Sample labeled enrollment-test pairs without duplicates."""
    rng = make_rng(seed, "trials")
    by_speaker = manifest.speakers()

    target_pool = []
    for utts in by_speaker.values():
        ids = [e.utterance_id for e in utts]
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                target_pool.append((ids[i], ids[j]))
    if num_target > len(target_pool):
        raise ValueError(
            f"requested {num_target} target trials but only {len(target_pool)} same-speaker pairs exist")

    n_utts = len(manifest)
    n_cross = (n_utts * n_utts - sum(len(u) ** 2 for u in by_speaker.values())) // 2
    if num_nontarget > n_cross:
        raise ValueError(
            f"requested {num_nontarget} nontarget trials but only {n_cross} cross-speaker pairs exist")

    choice = rng.permutation(len(target_pool))[:num_target]
    trials = [Trial(*target_pool[i], "tgt") for i in choice]

    spk_of = {e.utterance_id: e.speaker_id for e in manifest.entries}
    all_ids = [e.utterance_id for e in manifest.entries]
    if num_nontarget > n_cross // 2:
        # Dense request: enumerate instead of rejection-sampling.
        pool = [(a, b) for i, a in enumerate(all_ids) for b in all_ids[i + 1:]
                if spk_of[a] != spk_of[b]]
        choice = rng.permutation(len(pool))[:num_nontarget]
        trials.extend(Trial(*pool[i], "non") for i in choice)
    else:
        seen = set()
        while len(seen) < num_nontarget:
            i, j = rng.integers(0, n_utts, size=2)
            if i == j:
                continue
            a, b = all_ids[min(i, j)], all_ids[max(i, j)]
            if spk_of[a] == spk_of[b] or (a, b) in seen:
                continue
            seen.add((a, b))
            trials.append(Trial(a, b, "non"))
    return TrialList(trials)


# --- minimal optional MFCC front-end (demo WAV input; no parity guarantee
# --- with any external toolkit's MFCC implementation) ---

def _mel(hz):
    return 2595.0 * np.log10(1.0 + hz / 700.0)


def _mel_inv(mel):
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def mel_filterbank(num_filters, fft_size, sample_rate, low_hz=20.0, high_hz=None):
    if high_hz is None:
        high_hz = sample_rate / 2.0
    points = _mel_inv(np.linspace(_mel(low_hz), _mel(high_hz), num_filters + 2))
    bins = np.floor((fft_size + 1) * points / sample_rate).astype(int)
    bank = np.zeros((num_filters, fft_size // 2 + 1))
    for m in range(1, num_filters + 1):
        lo, mid, hi = bins[m - 1], bins[m], bins[m + 1]
        for k in range(lo, mid):
            if mid > lo:
                bank[m - 1, k] = (k - lo) / (mid - lo)
        for k in range(mid, hi):
            if hi > mid:
                bank[m - 1, k] = (hi - k) / (hi - mid)
    return bank


def mfcc(samples, sample_rate, num_ceps=20, num_filters=26,
         frame_length=0.025, frame_shift=0.01, utterance_id="wav"):
    """Windowed FFT -> mel filterbank -> DCT cepstra from a mono waveform."""
    samples = np.asarray(samples, dtype=np.float64)
    win = int(round(frame_length * sample_rate))
    hop = int(round(frame_shift * sample_rate))
    if len(samples) < win:
        raise ValueError("waveform shorter than one analysis window")
    num_frames = 1 + (len(samples) - win) // hop
    fft_size = 1
    while fft_size < win:
        fft_size *= 2
    window = np.hamming(win)
    bank = mel_filterbank(num_filters, fft_size, sample_rate)
    feats = np.empty((num_frames, num_ceps))
    for i in range(num_frames):
        frame = samples[i * hop:i * hop + win] * window
        spectrum = np.abs(np.fft.rfft(frame, fft_size)) ** 2
        energies = np.maximum(bank @ spectrum, 1e-12)
        cepstra = scipy.fft.dct(np.log(energies), type=2, norm="ortho")
        feats[i] = cepstra[:num_ceps]
    return FeatureSequence(utterance_id, feats, frame_shift)


def wav_to_features(path, **kwargs) -> FeatureSequence:
    """Read a 16-bit mono WAV file and compute MFCCs."""
    path = os.fspath(path)
    with wave.open(path, "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM WAV is supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if "utterance_id" not in kwargs:
        kwargs["utterance_id"] = os.path.splitext(os.path.basename(path))[0]
    return mfcc(samples, rate, **kwargs)
