"""Training, enrollment, conversion, evaluation, and the memory-scaling model.

Everything here is deterministic given the configured seeds: batch order,
diffusion noise, pair sampling, and sampler noise all come from explicitly
seeded generators.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffusion as diff
from .content import Codebook, encode_content, fit_codebook, quantize
from .corpus import CorpusSpec, Utterance
from .diffusion import DiffusionSchedule
from .model import ConversionModel, ModelConfig, load_checkpoint, save_checkpoint
from .stylebook import Stylebook, attention_profile, build_stylebook, encode_style, retrieve_styles

# Reference memory footprints (KiB) for storing one target speaker's style.
# Single-embedding baselines are constants; the stylebook is Q * d_s floats;
# the kNN bank stores every target frame (50 frames/s, 1024 dims, float32).
SINGLE_EMBEDDING_KIB = {"yourtts": 2.0, "freevc": 1.0, "diffvc": 1.5}
STYLEBOOK_QUERY_COUNT = 128
STYLEBOOK_STYLE_DIM = 64
KNN_FRAMES_PER_SECOND = 50
KNN_FEATURE_DIM = 1024
MEMORY_METHODS = ("yourtts", "freevc", "diffvc", "proposed", "knnvc")


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    segment_frames: int = 100
    num_steps: int = 2000
    checkpoint_interval: int = 500
    kmeans_iters: int = 25
    train_fraction: float = 0.75
    grad_clip_norm: float = 1.0  # 0 disables clipping
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "segment_frames", "num_steps", "checkpoint_interval", "kmeans_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.grad_clip_norm < 0:
            raise ValueError("grad_clip_norm must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; serialized alongside every checkpoint."""

    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    utterances_per_speaker: int = 12
    frames_per_utterance: int = 160

    def validate(self) -> None:
        self.corpus.validate()
        self.model.validate()
        self.training.validate()
        if self.model.mel_dim != self.corpus.mel_dim:
            raise ValueError("model.mel_dim must match corpus.mel_dim")
        if self.frames_per_utterance < self.training.segment_frames:
            raise ValueError("frames_per_utterance must be >= training.segment_frames")
        if self.utterances_per_speaker < 2:
            raise ValueError("utterances_per_speaker must be >= 2 (needed for the split)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        return cls(
            corpus=CorpusSpec.from_dict(d.pop("corpus", {})),
            model=ModelConfig.from_dict(d.pop("model", {})),
            schedule=DiffusionSchedule(**d.pop("schedule", {})),
            training=TrainingConfig(**d.pop("training", {})),
            **d,
        )

    def override(self, dotted: dict) -> "RunConfig":
        """Apply {'training.num_steps': 50, ...} style overrides."""
        data = self.to_dict()
        for key, value in dotted.items():
            parts = key.split(".")
            node = data
            for part in parts[:-1]:
                if part not in node:
                    raise KeyError(f"unknown config section {part!r} in {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key {key!r}")
            current = node[parts[-1]]
            node[parts[-1]] = type(current)(value) if current is not None else value
        return RunConfig.from_dict(data)


@dataclass
class TrainResult:
    model: ConversionModel
    codebook: Codebook
    history: list[dict]
    checkpoint_path: str | None = None


def _corpus_units(codebook: Codebook, corpus: list[Utterance]) -> list[np.ndarray]:
    return [quantize(codebook, utt.content_features) for utt in corpus]


def train(
    config: RunConfig,
    corpus: list[Utterance],
    out_dir=None,
    codebook: Codebook | None = None,
) -> TrainResult:
    """Joint reconstruction training of every trainable component.

    Fits the unit codebook on the training frames when none is given, then
    optimizes the total loss with Adam over fixed-length segments. Loss is
    logged every step; checkpoints are written periodically when `out_dir`
    is set. Aborts with a diagnostic if the loss stops being finite.
    """
    config.validate()
    if not corpus:
        raise ValueError("training corpus is empty")
    tc = config.training
    if any(utt.num_frames < tc.segment_frames for utt in corpus):
        raise ValueError(f"every utterance needs >= {tc.segment_frames} frames")

    if codebook is None:
        frames = np.concatenate([utt.content_features for utt in corpus], axis=0)
        codebook = fit_codebook(frames, config.model.num_units, tc.kmeans_iters, seed=tc.seed)

    init_gen = torch.Generator().manual_seed(tc.seed)
    step_gen = torch.Generator().manual_seed(tc.seed + 1)
    model = ConversionModel(config.model, generator=init_gen)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.learning_rate)

    units = _corpus_units(codebook, corpus)
    mels = [torch.as_tensor(utt.mel_frames, dtype=torch.float32) for utt in corpus]
    unit_tensors = [torch.as_tensor(u, dtype=torch.int64) for u in units]

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    checkpoint_path = None
    seg = tc.segment_frames
    for step in range(1, tc.num_steps + 1):
        picks = torch.randint(0, len(corpus), (tc.batch_size,), generator=step_gen)
        # one crop start per batch so segment positions stay absolute; the
        # encoder then sees every position that full-length conversion uses
        max_start = min(mels[i].shape[0] for i in picks.tolist()) - seg
        start = int(torch.randint(0, max_start + 1, (1,), generator=step_gen)) if max_start > 0 else 0
        batch = {
            "mel": torch.stack([mels[i][start : start + seg] for i in picks.tolist()]),
            "units": torch.stack([unit_tensors[i][start : start + seg] for i in picks.tolist()]),
            "position_offset": start,
        }
        total, loss_diff, loss_enc = diff.training_loss(model, batch, config.schedule, step_gen)
        if not torch.isfinite(total):
            raise RuntimeError(
                f"training diverged at step {step}: total={total.item()} "
                f"diff={loss_diff.item()} enc={loss_enc.item()}"
            )
        optimizer.zero_grad()
        total.backward()
        if tc.grad_clip_norm:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip_norm)
        optimizer.step()
        history.append(
            {
                "step": step,
                "total": float(total.item()),
                "diffusion": float(loss_diff.item()),
                "encoder": float(loss_enc.item()),
            }
        )
        if out_dir is not None and (step % tc.checkpoint_interval == 0 or step == tc.num_steps):
            checkpoint_path = str(out_dir / "checkpoint.sbc")
            save_checkpoint(
                checkpoint_path,
                model,
                codebook,
                meta={"run_config": config.to_dict(), "history": history, "step": step},
            )
    model.eval()
    return TrainResult(model=model, codebook=codebook, history=history, checkpoint_path=checkpoint_path)


def enroll(
    model: ConversionModel,
    codebook: Codebook,
    target_utterances: list[Utterance],
    provenance: str = "",
) -> Stylebook:
    """One-time style capture: summarize a target speaker into a stylebook.

    Each utterance is encoded separately; the per-frame content and style
    sequences are then concatenated along the frame axis and summarized by
    the learned query set. After this call the raw target data is no longer
    needed for conversion.
    """
    if not target_utterances:
        raise ValueError("need at least one target utterance to enroll")
    model.eval()
    contents, styles = [], []
    with torch.no_grad():
        for utt in target_utterances:
            units = quantize(codebook, utt.content_features)
            cemb = encode_content(model.content_encoder, units)
            mel = torch.as_tensor(utt.mel_frames, dtype=torch.float32)
            styles.append(encode_style(model.mel_encoder, model.style_encoder, mel, cemb))
            contents.append(cemb)
        book = build_stylebook(
            model.summarize_attn,
            model.query_set,
            torch.cat(contents, dim=0),
            torch.cat(styles, dim=0),
        )
    if not provenance:
        speakers = sorted({utt.speaker_id for utt in target_utterances})
        frames = sum(utt.num_frames for utt in target_utterances)
        provenance = f"speakers={speakers} utterances={len(target_utterances)} frames={frames}"
    return Stylebook(values=book.numpy().astype(np.float32), provenance=provenance)


def convert(
    model: ConversionModel,
    codebook: Codebook,
    source: Utterance,
    stylebook: Stylebook,
    schedule: DiffusionSchedule | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Convert a source utterance using only the enrolled stylebook.

    No target frames are touched: content units come from the source, style
    embeddings are retrieved per frame from the stylebook, and the diffusion
    decoder generates the converted mel frames. Deterministic given the seed.
    """
    schedule = schedule or DiffusionSchedule()
    if stylebook.values.shape != (model.config.query_count, model.config.style_dim):
        raise ValueError(
            f"stylebook shape {stylebook.values.shape} incompatible with model "
            f"({model.config.query_count}, {model.config.style_dim})"
        )
    model.eval()
    with torch.no_grad():
        units = quantize(codebook, source.content_features)
        cemb = encode_content(model.content_encoder, units)
        style_seq = retrieve_styles(
            model.retrieve_attn, cemb, model.query_set, stylebook.as_tensor()
        )
        gen = torch.Generator().manual_seed(seed)
        mel = diff.sample(model, cemb, style_seq, schedule, gen)
    return mel.numpy().astype(np.float32)


def memory_model(method: str, target_seconds: float) -> float:
    """KiB needed to store one target speaker's style, per method."""
    if target_seconds <= 0:
        raise ValueError(f"target_seconds must be positive, got {target_seconds}")
    if method in SINGLE_EMBEDDING_KIB:
        return SINGLE_EMBEDDING_KIB[method]
    if method == "proposed":
        return STYLEBOOK_QUERY_COUNT * STYLEBOOK_STYLE_DIM * 4 / 1024
    if method == "knnvc":
        return target_seconds * KNN_FRAMES_PER_SECOND * KNN_FEATURE_DIM * 4 / 1024
    raise ValueError(f"unknown method {method!r}; expected one of {MEMORY_METHODS}")


def memory_table(seconds=(10, 60, 300)) -> dict[str, dict[str, float]]:
    return {m: {str(s): memory_model(m, s) for s in seconds} for m in MEMORY_METHODS}


def speaker_signature(frames: np.ndarray) -> np.ndarray:
    """Style signature: per-dimension mean and standard deviation, stacked."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.concatenate([frames.mean(axis=0), frames.std(axis=0)])


def linear_probe_accuracy(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    steps: int = 300,
    lr: float = 0.05,
) -> float:
    """Held-out accuracy of a linear softmax classifier on frozen features.

    Deterministic: zero-initialized weights, full-batch Adam, even/odd
    train/test split. Used to probe what information a representation
    carries (phone class vs. speaker identity).
    """
    from .blocks import softmax_cross_entropy

    x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    train_x, test_x = x[0::2], x[1::2]
    train_y, test_y = y[0::2], y[1::2]
    weight = torch.zeros(x.shape[1], num_classes, requires_grad=True)
    bias = torch.zeros(num_classes, requires_grad=True)
    optimizer = torch.optim.Adam([weight, bias], lr=lr)
    for _ in range(steps):
        loss = softmax_cross_entropy(train_x @ weight + bias, train_y)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        pred = (test_x @ weight + bias).argmax(dim=1)
    return float((pred == test_y).float().mean().item())


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12)
    return float(np.dot(a, b) / denom)


@dataclass
class PhoneProbe:
    """Nearest-class-mean classifier trained on one speaker's mel frames."""

    class_means: np.ndarray  # (C, mel_dim)
    class_ids: np.ndarray  # (C,)

    @classmethod
    def fit(cls, frames: np.ndarray, labels: np.ndarray) -> "PhoneProbe":
        labels = np.asarray(labels)
        ids = np.unique(labels)
        means = np.stack([frames[labels == c].mean(axis=0) for c in ids])
        return cls(class_means=means, class_ids=ids)

    def predict(self, frames: np.ndarray) -> np.ndarray:
        d = ((frames[:, None, :] - self.class_means[None, :, :]) ** 2).sum(axis=2)
        return self.class_ids[np.argmin(d, axis=1)]

    def accuracy(self, frames: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(frames) == np.asarray(labels)).mean())


@dataclass
class EvalReport:
    """Proxy metrics on the synthetic corpus.

    `content_accuracy` is the frozen phone-probe accuracy on converted
    frames, judged in the target speaker's mel space. Style similarities are
    cosines between converted-frame signatures and each speaker's
    ground-truth signature; these are desk-scale proxies, not perceptual or
    speaker-verification scores.
    """

    num_pairs: int
    content_accuracy: float
    style_similarity_to_target: float
    style_similarity_to_source: float
    target_preference_rate: float
    pair_details: list[dict] = field(default_factory=list)
    memory_table: dict = field(default_factory=memory_table)
    loss_history: list[dict] = field(default_factory=list)

    def validate(self) -> None:
        for name in ("content_accuracy", "target_preference_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or not math.isfinite(v):
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("style_similarity_to_target", "style_similarity_to_source"):
            v = getattr(self, name)
            if not (-1.0 <= v <= 1.0) or not math.isfinite(v):
                raise ValueError(f"{name}={v} outside [-1, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(
    model: ConversionModel,
    codebook: Codebook,
    eval_corpus: list[Utterance],
    num_pairs: int = 112,
    schedule: DiffusionSchedule | None = None,
    seed: int = 0,
    loss_history: list[dict] | None = None,
) -> EvalReport:
    """Cross-speaker conversion sweep with ground-truth-based probes.

    Samples (source utterance, target speaker) pairs across distinct
    speakers, converts each source with the target's enrolled stylebook, and
    scores content preservation (phone probe trained on the target speaker's
    ground-truth mel frames) and style transfer (signature cosine to target
    vs. to source speaker).
    """
    schedule = schedule or DiffusionSchedule()
    speakers = sorted({utt.speaker_id for utt in eval_corpus})
    if len(speakers) < 2:
        raise ValueError("evaluation needs at least two speakers")
    by_speaker: dict[int, list[Utterance]] = {s: [] for s in speakers}
    for utt in eval_corpus:
        by_speaker[utt.speaker_id].append(utt)

    signatures = {
        s: speaker_signature(np.concatenate([u.mel_frames for u in by_speaker[s]]))
        for s in speakers
    }
    probes = {
        s: PhoneProbe.fit(
            np.concatenate([u.mel_frames for u in by_speaker[s]]),
            np.concatenate([u.phone_labels for u in by_speaker[s]]),
        )
        for s in speakers
    }

    all_pairs = [
        (i, tgt)
        for i, utt in enumerate(eval_corpus)
        for tgt in speakers
        if tgt != utt.speaker_id
    ]
    if num_pairs < 1 or num_pairs > len(all_pairs):
        raise ValueError(f"num_pairs must be in [1, {len(all_pairs)}], got {num_pairs}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(all_pairs), size=num_pairs, replace=False)

    stylebooks = {s: enroll(model, codebook, by_speaker[s]) for s in speakers}

    details = []
    accuracies, sims_target, sims_source = [], [], []
    for rank, pick in enumerate(chosen.tolist()):
        src_idx, tgt_speaker = all_pairs[pick]
        source = eval_corpus[src_idx]
        converted = convert(
            model, codebook, source, stylebooks[tgt_speaker], schedule, seed=seed + 1 + rank
        )
        sig = speaker_signature(converted)
        sim_t = cosine(sig, signatures[tgt_speaker])
        sim_s = cosine(sig, signatures[source.speaker_id])
        acc = probes[tgt_speaker].accuracy(converted, source.phone_labels)
        accuracies.append(acc)
        sims_target.append(sim_t)
        sims_source.append(sim_s)
        details.append(
            {
                "source_speaker": source.speaker_id,
                "target_speaker": tgt_speaker,
                "content_accuracy": acc,
                "similarity_to_target": sim_t,
                "similarity_to_source": sim_s,
            }
        )

    prefer = float(np.mean([t > s for t, s in zip(sims_target, sims_source)]))
    report = EvalReport(
        num_pairs=num_pairs,
        content_accuracy=float(np.mean(accuracies)),
        style_similarity_to_target=float(np.mean(sims_target)),
        style_similarity_to_source=float(np.mean(sims_source)),
        target_preference_rate=prefer,
        pair_details=details,
        memory_table=memory_table(),
        loss_history=loss_history or [],
    )
    report.validate()
    return report


@dataclass
class AttentionAnalysis:
    class_ids: list[int]
    profiles: np.ndarray  # (C, Q)
    similarity: np.ndarray  # (C, C)
    globally_used_entries: int
    empty_classes: list[int]

    def profiles_tsv(self) -> str:
        lines = ["class\t" + "\t".join(f"q{j}" for j in range(self.profiles.shape[1]))]
        for cid, row in zip(self.class_ids, self.profiles):
            lines.append(f"{cid}\t" + "\t".join(f"{v:.8e}" for v in row))
        return "\n".join(lines) + "\n"

    def similarity_tsv(self) -> str:
        lines = ["class\t" + "\t".join(str(c) for c in self.class_ids)]
        for cid, row in zip(self.class_ids, self.similarity):
            lines.append(f"{cid}\t" + "\t".join(f"{v:.8f}" for v in row))
        return "\n".join(lines) + "\n"


def analyze_attention(
    model: ConversionModel,
    codebook: Codebook,
    eval_corpus: list[Utterance],
    num_classes: int | None = None,
) -> AttentionAnalysis:
    """Per-class retrieval-attention profiles over an evaluation corpus.

    Also counts "globally used" stylebook entries: query columns whose mean
    weight exceeds uniform (1/Q) for at least 90% of the classes.
    """
    model.eval()
    embs, labels = [], []
    with torch.no_grad():
        for utt in eval_corpus:
            units = quantize(codebook, utt.content_features)
            embs.append(encode_content(model.content_encoder, units))
            labels.append(utt.phone_labels)
    prof = attention_profile(model.retrieve_attn, embs, model.query_set, labels, num_classes)
    q = prof.profiles.shape[1]
    if len(prof.class_ids):
        above_uniform = (prof.profiles > 1.0 / q).mean(axis=0)
        globally_used = int((above_uniform >= 0.9).sum())
    else:
        globally_used = 0
    return AttentionAnalysis(
        class_ids=prof.class_ids,
        profiles=prof.profiles,
        similarity=prof.similarity,
        globally_used_entries=globally_used,
        empty_classes=prof.empty_classes,
    )
