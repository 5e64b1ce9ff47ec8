"""Synthetic frame corpus with known phone-class and speaker factors.

Phone classes are Gaussian clusters in content space. Each speaker owns a
well-conditioned affine map from content space to mel space, so "style" has
a ground truth: two speakers render the same phone class at different mel
locations. That makes content preservation and style transfer measurable
without any pretrained speech models.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio

# Mel observation noise, as a fraction of the content noise sigma. Kept well
# below the inter-speaker mel distances so speaker signatures stay crisp.
MEL_NOISE_FACTOR = 0.5
# Distance of the deliberately adjacent class pair (0, 1), in content-noise
# units; all other center pairs are near-orthogonal unit vectors and sit much
# farther apart, so (0, 1) is always the closest pair.
ADJACENT_SEPARATION_SIGMAS = 5.0
MIN_CENTER_SEPARATION = 1e-3
SPEAKER_BIAS_STD = 0.5
SINGULAR_VALUE_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class CorpusSpec:
    """Generation parameters. Identical spec + seed gives a bit-identical corpus."""

    num_phone_classes: int = 10
    num_speakers: int = 8
    content_dim: int = 64
    mel_dim: int = 64
    frame_rate: int = 50
    mean_phone_duration: float = 5.0
    content_noise_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for field in ("num_phone_classes", "num_speakers", "content_dim", "mel_dim", "frame_rate"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.mean_phone_duration < 1:
            raise ValueError(f"mean_phone_duration must be >= 1, got {self.mean_phone_duration}")
        if self.content_noise_sigma < 0:
            raise ValueError(f"content_noise_sigma must be >= 0, got {self.content_noise_sigma}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)


@dataclass
class SpeakerStyle:
    """Affine map from content space to mel space: mel = weight @ c + bias."""

    weight: np.ndarray  # (mel_dim, content_dim)
    bias: np.ndarray  # (mel_dim,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.weight.T + self.bias


@dataclass
class Utterance:
    content_features: np.ndarray  # (T, content_dim) float32
    mel_frames: np.ndarray  # (T, mel_dim) float32
    phone_labels: np.ndarray  # (T,) int64
    speaker_id: int

    def __post_init__(self):
        t = len(self.phone_labels)
        if t < 1:
            raise ValueError("utterance must have at least one frame")
        if self.content_features.shape[0] != t or self.mel_frames.shape[0] != t:
            raise ValueError("content, mel, and label lengths must agree")

    @property
    def num_frames(self) -> int:
        return len(self.phone_labels)


def draw_phone_centers(spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm class centers with pairwise separation >= max(4*sigma, eps).

    Classes 0 and 1 are placed deliberately close (ADJACENT_SEPARATION_SIGMAS
    apart) so that phonetic-adjacency effects have a ground truth; the pair
    still clears the 4-sigma floor needed for near-perfect separability.
    """
    min_sep = max(4.0 * spec.content_noise_sigma, MIN_CENTER_SEPARATION)
    centers: list[np.ndarray] = []

    def draw_unit() -> np.ndarray:
        v = rng.standard_normal(spec.content_dim)
        n = np.linalg.norm(v)
        while n < 1e-12:
            v = rng.standard_normal(spec.content_dim)
            n = np.linalg.norm(v)
        return v / n

    centers.append(draw_unit())
    if spec.num_phone_classes >= 2:
        target = max(ADJACENT_SEPARATION_SIGMAS * spec.content_noise_sigma, 0.05)
        direction = draw_unit()
        direction -= np.dot(direction, centers[0]) * centers[0]
        direction /= np.linalg.norm(direction)
        step = target
        neighbor = centers[0]
        while True:
            neighbor = centers[0] + step * direction
            neighbor /= np.linalg.norm(neighbor)
            if np.linalg.norm(neighbor - centers[0]) >= target:
                break
            step *= 1.25
        centers.append(neighbor)
    while len(centers) < spec.num_phone_classes:
        candidate = draw_unit()
        dists = [np.linalg.norm(candidate - c) for c in centers]
        if min(dists) >= min_sep:
            centers.append(candidate)
    return np.stack(centers)


def draw_speaker_styles(spec: CorpusSpec, rng: np.random.Generator) -> list[SpeakerStyle]:
    """One affine map per speaker, singular values clipped to [0.5, 2]."""
    lo, hi = SINGULAR_VALUE_RANGE
    styles = []
    for _ in range(spec.num_speakers):
        raw = rng.standard_normal((spec.mel_dim, spec.content_dim)) / np.sqrt(spec.content_dim)
        u, s, vt = np.linalg.svd(raw, full_matrices=False)
        weight = u @ np.diag(np.clip(s, lo, hi)) @ vt
        bias = rng.standard_normal(spec.mel_dim) * SPEAKER_BIAS_STD
        styles.append(SpeakerStyle(weight=weight, bias=bias))
    return styles


def _segment_labels(spec: CorpusSpec, rng: np.random.Generator, num_frames: int) -> np.ndarray:
    """Per-frame class labels with geometric segment durations."""
    p = 1.0 / spec.mean_phone_duration
    labels = np.empty(num_frames, dtype=np.int64)
    pos = 0
    while pos < num_frames:
        duration = int(rng.geometric(p))
        cls = int(rng.integers(0, spec.num_phone_classes))
        labels[pos : pos + duration] = cls
        pos += duration
    return labels


def generate_corpus(
    spec: CorpusSpec,
    utterances_per_speaker: int,
    frames_per_utterance: int,
    speaker_styles: list[SpeakerStyle] | None = None,
) -> list[Utterance]:
    """Generate the full corpus, speaker-major.

    `speaker_styles` overrides the randomly drawn affine maps (used to pin a
    known style, e.g. the identity map, in tests); the random draws still
    happen so the stream of later draws does not depend on the override.
    """
    spec.validate()
    if utterances_per_speaker < 1 or frames_per_utterance < 1:
        raise ValueError("utterance and frame counts must be >= 1")
    rng = np.random.default_rng(spec.seed)
    centers = draw_phone_centers(spec, rng)
    drawn_styles = draw_speaker_styles(spec, rng)
    if speaker_styles is not None:
        if len(speaker_styles) != spec.num_speakers:
            raise ValueError("speaker_styles must have one entry per speaker")
        drawn_styles = speaker_styles

    sigma = spec.content_noise_sigma
    mel_sigma = MEL_NOISE_FACTOR * sigma
    utterances = []
    for speaker_id in range(spec.num_speakers):
        style = drawn_styles[speaker_id]
        for _ in range(utterances_per_speaker):
            labels = _segment_labels(spec, rng, frames_per_utterance)
            clean = centers[labels]
            content = clean + sigma * rng.standard_normal(clean.shape)
            mel = style.apply(clean) + mel_sigma * rng.standard_normal((frames_per_utterance, spec.mel_dim))
            utterances.append(
                Utterance(
                    content_features=content.astype(np.float32),
                    mel_frames=mel.astype(np.float32),
                    phone_labels=labels,
                    speaker_id=speaker_id,
                )
            )
    return utterances


def split_corpus(corpus: list[Utterance], train_fraction: float) -> tuple[list[Utterance], list[Utterance]]:
    """Split by utterance so that every speaker appears in both partitions."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_speaker: dict[int, list[Utterance]] = {}
    for utt in corpus:
        by_speaker.setdefault(utt.speaker_id, []).append(utt)
    train, heldout = [], []
    for speaker_id in sorted(by_speaker):
        utts = by_speaker[speaker_id]
        if len(utts) < 2:
            raise ValueError(f"speaker {speaker_id} has {len(utts)} utterance(s); need >= 2 to split")
        n_train = min(max(int(len(utts) * train_fraction), 1), len(utts) - 1)
        train.extend(utts[:n_train])
        heldout.extend(utts[n_train:])
    return train, heldout


def corpus_digest(corpus: list[Utterance]) -> str:
    """SHA-256 over all frame data; equal corpora hash equal."""
    h = hashlib.sha256()
    for utt in corpus:
        h.update(np.int64(utt.speaker_id).tobytes())
        h.update(np.ascontiguousarray(utt.content_features, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(utt.mel_frames, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(utt.phone_labels, dtype="<i8").tobytes())
    return h.hexdigest()


def save_corpus(directory, spec: CorpusSpec, corpus: list[Utterance]) -> None:
    """Persist as one matrix file per utterance plus a manifest.

    Each file stores the T x (content_dim + mel_dim) frame matrix with the
    phone labels in the trailing label block; the manifest records the spec,
    the column split, and the speaker id of every file.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, utt in enumerate(corpus):
        name = f"utt_{i:05d}.sbm"
        stacked = np.concatenate([utt.content_features, utt.mel_frames], axis=1)
        fileio.write_matrix(directory / name, stacked, utt.phone_labels)
        entries.append({"file": name, "num_frames": utt.num_frames, "speaker_id": utt.speaker_id})
    manifest = {
        "content_dim": spec.content_dim,
        "format_version": 1,
        "mel_dim": spec.mel_dim,
        "spec": spec.to_dict(),
        "utterances": entries,
    }
    fileio.write_json(directory / "manifest.json", manifest)


def load_corpus(directory) -> tuple[CorpusSpec, list[Utterance]]:
    directory = Path(directory)
    manifest = fileio.read_json(directory / "manifest.json")
    spec = CorpusSpec.from_dict(manifest["spec"])
    c_dim = manifest["content_dim"]
    utterances = []
    for entry in manifest["utterances"]:
        stacked, labels = fileio.read_matrix(directory / entry["file"])
        if labels is None:
            raise fileio.FormatError(f"{entry['file']}: missing label block")
        utterances.append(
            Utterance(
                content_features=stacked[:, :c_dim],
                mel_frames=stacked[:, c_dim:],
                phone_labels=labels,
                speaker_id=entry["speaker_id"],
            )
        )
    return spec, utterances
