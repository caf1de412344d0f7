"""Discriminative training of the speaker classifier: random fixed-length
crops, cross-entropy over speakers, plain SGD with weight decay and a
geometric learning-rate schedule, plus checkpoint serialization for the
full model (frame network + aggregation head + classifier).
"""

import json
import os
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .blobio import read_blob, write_blob
from .corpus import FeatureSequence
from .frame_net import (Layer, FullyConnected, LeakyRelu, BatchNorm,
                        register_layer, layer_from_config, iter_params, iter_buffers)
from .numerics import make_rng, stable_softmax

CHECKPOINT_MAGIC = b"NIVC"


class DivergenceError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    crop_frames: int = 400
    batch_size: int = 64
    weight_decay: float = 0.001
    lr_start: float = 0.05
    lr_end: float = 0.0002
    schedule: str = "geometric"
    epochs: int = 3
    segments_per_speaker: int = 40
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_frames < 1:
            raise ValueError("crop_frames must be >= 1")
        # lr_start >= lr_end > 0 normally; both exactly 0 is allowed so a
        # no-op training run can serve as a determinism probe.
        if not (self.lr_start >= self.lr_end >= 0):
            raise ValueError("need lr_start >= lr_end >= 0")
        if self.lr_end == 0 and self.lr_start > 0:
            raise ValueError("lr_end must be > 0 when lr_start > 0")
        if self.schedule not in ("geometric", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.segments_per_speaker < 1:
            raise ValueError("epochs must be >= 0 and segments_per_speaker >= 1")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@register_layer("classifier_head")
class ClassifierHead(Layer):
    """Embedding FC + LReLU + BN followed by the speaker output FC.

    The utterance embedding is the pre-activation output of the first FC.
    """

    def __init__(self, in_dim, embed_dim, num_speakers, rng=None):
        super().__init__()
        if num_speakers < 2:
            raise ValueError("classifier needs at least 2 speakers")
        self.in_dim, self.embed_dim, self.num_speakers = \
            int(in_dim), int(embed_dim), int(num_speakers)
        self.fc1 = FullyConnected(in_dim, embed_dim, rng)
        self.act = LeakyRelu()
        self.norm = BatchNorm(embed_dim)
        self.fc2 = FullyConnected(embed_dim, num_speakers, rng)

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "embed_dim": self.embed_dim,
                "num_speakers": self.num_speakers}

    def sublayers(self):
        return [("fc1", self.fc1), ("act", self.act), ("norm", self.norm), ("fc2", self.fc2)]

    def forward(self, x, train=False):
        h = self.norm.forward(self.act.forward(self.fc1.forward(x, train), train), train)
        return self.fc2.forward(h, train)

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.norm.backward(self.fc2.backward(dy))))

    def embed(self, x):
        return x @ self.fc1.params["W"].T + self.fc1.params["b"]


@register_layer("speaker_net")
class SpeakerNet(Layer):
    """Frame network -> aggregation head -> classifier head."""

    def __init__(self, frame_net, agg, classifier):
        super().__init__()
        self.frame_net = layer_from_config(frame_net) if isinstance(frame_net, dict) else frame_net
        self.agg = layer_from_config(agg) if isinstance(agg, dict) else agg
        self.classifier = (layer_from_config(classifier)
                           if isinstance(classifier, dict) else classifier)

    def config(self):
        return {"kind": self.kind, "frame_net": self.frame_net.config(),
                "agg": self.agg.config(), "classifier": self.classifier.config()}

    def sublayers(self):
        return [("frame_net", self.frame_net), ("agg", self.agg),
                ("classifier", self.classifier)]

    def forward(self, x, train=False):
        return self.classifier.forward(
            self.agg.forward(self.frame_net.forward(x, train), train), train)

    def backward(self, dlogits):
        return self.frame_net.backward(self.agg.backward(self.classifier.backward(dlogits)))

    def frame_features(self, frames):
        """Eval-mode frame-level features of one (T, D) sequence."""
        return self.frame_net.forward_sequence(frames)

    def embed(self, frames):
        """Eval-mode utterance embedding of one (T, D) sequence."""
        feats = self.frame_features(frames)
        pooled = self.agg.forward(feats[None], train=False)
        return self.classifier.embed(pooled)[0]


def sample_crop(seq: FeatureSequence, crop_frames, rng) -> FeatureSequence:
    """Fixed-length random crop; shorter utterances wrap around."""
    t = seq.num_frames
    crop_frames = int(crop_frames)
    if crop_frames < 1:
        raise ValueError("crop_frames must be >= 1")
    if t >= crop_frames:
        start = int(rng.integers(0, t - crop_frames + 1))
        frames = seq.frames[start:start + crop_frames]
    else:
        start = int(rng.integers(0, t))
        idx = (start + np.arange(crop_frames)) % t
        frames = seq.frames[idx]
    return FeatureSequence(seq.utterance_id, frames, seq.frame_shift)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b = logits.shape[0]
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError("label out of range")
    probs = stable_softmax(logits, axis=1)
    picked = probs[np.arange(b), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def lr_schedule(step, total_steps, cfg: TrainConfig):
    """Interpolates lr_start -> lr_end over total_steps; default geometric."""
    if not 0 <= step <= max(total_steps, 1):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if cfg.lr_start == cfg.lr_end:
        return cfg.lr_start
    frac = step / total_steps
    if cfg.schedule == "linear":
        return cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


def sgd_step(model, lr, weight_decay, momentum=0.0, velocities=None):
    """theta <- theta - lr (grad + wd theta); decay skips each layer's
    no_decay parameters (batch norm scale/shift, posterior bias terms)."""
    for path, owner, key in iter_params(model):
        g = owner.grads.get(key)
        if g is None:
            raise ValueError(f"parameter {path} has no gradient")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {path}")
        decay = 0.0 if key in owner.no_decay else weight_decay
        update = g + decay * owner.params[key]
        if momentum > 0.0:
            if velocities is None:
                raise ValueError("momentum requires a velocity dict")
            vel = velocities.get(path)
            vel = update if vel is None else momentum * vel + update
            velocities[path] = vel
            update = vel
        owner.params[key] -= lr * update


@dataclass
class TrainResult:
    loss_curve: list          # rows (step, lr, loss, accuracy)
    final_accuracy: float
    steps: int
    diverged: bool = False


def write_loss_curve(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,lr,loss,accuracy\n")
        for step, lr, loss, acc in rows:
            f.write(f"{step},{lr:.10g},{loss:.10g},{acc:.10g}\n")


def _epoch_batches(manifest, cfg: TrainConfig, epoch, speaker_ids):
    """Speaker-balanced utterance assignments, grouped into batches."""
    rng = make_rng(cfg.seed, "train", "epoch", epoch)
    by_speaker = manifest.speakers()
    picks = []
    for spk in speaker_ids:
        utts = by_speaker[spk]
        take = rng.integers(0, len(utts), size=cfg.segments_per_speaker)
        picks.extend(utts[i].utterance_id for i in take)
    order = rng.permutation(len(picks))
    picks = [picks[i] for i in order]
    batches = [picks[i:i + cfg.batch_size]
               for i in range(0, len(picks) - cfg.batch_size + 1, cfg.batch_size)]
    return batches, rng


def train(model: SpeakerNet, manifest, cfg: TrainConfig, label_of=None,
          loss_curve_path=None, transform=None):
    """SGD training loop over random crops; deterministic under cfg.seed.

    label_of maps speaker_id -> class index; defaults to sorted order.
    transform, if given, maps each loaded FeatureSequence to the sequence
    actually trained on (e.g. mean normalization).
    Aborts on non-finite loss, restoring the last finite parameter state.
    """
    speaker_ids = sorted(manifest.speakers())
    if len(speaker_ids) < 2:
        raise ValueError("training needs at least 2 speakers")
    if label_of is None:
        label_of = {spk: i for i, spk in enumerate(speaker_ids)}
    if transform is None:
        transform = lambda seq: seq
    cache = {e.utterance_id: transform(manifest.load(e.utterance_id))
             for e in manifest.entries}
    spk_of = {e.utterance_id: e.speaker_id for e in manifest.entries}

    per_epoch = (len(speaker_ids) * cfg.segments_per_speaker) // cfg.batch_size
    total_steps = max(1, cfg.epochs * per_epoch)
    velocities = {} if cfg.momentum > 0 else None
    rows = []
    step = 0
    acc = 0.0
    # Parameter state that last produced a finite loss; restored on abort.
    snapshot = None

    def restore():
        if snapshot is not None:
            for owner, key, saved in snapshot:
                owner.params[key] = saved

    def finish(diverged):
        if loss_curve_path is not None:
            write_loss_curve(rows, loss_curve_path)
        return TrainResult(rows, acc, step, diverged=diverged)

    for epoch in range(cfg.epochs):
        batches, rng = _epoch_batches(manifest, cfg, epoch, speaker_ids)
        for batch_ids in batches:
            crops = [sample_crop(cache[u], cfg.crop_frames, rng).frames for u in batch_ids]
            x = np.stack(crops)
            labels = np.array([label_of[spk_of[u]] for u in batch_ids])
            logits = model.forward(x, train=True)
            loss, dlogits = cross_entropy(logits, labels)
            if not np.isfinite(loss):
                restore()
                warnings.warn(f"training diverged at step {step}: loss {loss}; "
                              "restored last finite parameters")
                return finish(True)
            acc = float(np.mean(np.argmax(logits, axis=1) == labels))
            model.zero_grads()
            model.backward(dlogits)
            snapshot = [(owner, key, owner.params[key].copy())
                        for _, owner, key in iter_params(model)]
            lr = lr_schedule(step, total_steps, cfg)
            try:
                sgd_step(model, lr, cfg.weight_decay, cfg.momentum, velocities)
            except DivergenceError as exc:
                restore()
                warnings.warn(f"training diverged at step {step}: {exc}; "
                              "restored last finite parameters")
                return finish(True)
            rows.append((step, lr, loss, acc))
            step += 1
    return finish(False)


def save_checkpoint(model, path, meta=None):
    """Single-file model checkpoint: JSON header (layer configs, tensor
    index) + little-endian float64 tensors, parameters then buffers."""
    arrays = [("p:" + path_, owner.params[key])
              for path_, owner, key in iter_params(model)]
    arrays += [("b:" + path_, owner.buffers[key])
               for path_, owner, key in iter_buffers(model)]
    header = {"kind": "checkpoint", "model": model.config(), "meta": meta or {}}
    write_blob(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path):
    """Returns (model, meta)."""
    header, arrays = read_blob(path, CHECKPOINT_MAGIC)
    model = layer_from_config(header["model"])
    for path_, owner, key in iter_params(model):
        owner.params[key] = arrays["p:" + path_]
    for path_, owner, key in iter_buffers(model):
        owner.buffers[key] = arrays["b:" + path_]
    return model, header.get("meta", {})
