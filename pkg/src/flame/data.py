"""Keypoint sequences: file format, frame sampling, masking, synthesis, partitioning.

A sequence stores its frames as an array of shape ``(frames, N, 3)`` holding
``(x, y, confidence)`` with coordinates normalized to ``[0, 1]`` by the frame
size (y grows downwards, as in image coordinates). Keypoints follow the
17-point COCO layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COCO_KEYPOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
CLASS_NAMES = ("forward_fall", "sideways_fall", "backward_fall", "no_fall")
# videos per class in the AI-Hub fall set, in class-id order
PAPER_CLASS_COUNTS = (7736, 3440, 5816, 5680)
PAPER_PROPORTIONS = tuple(c / sum(PAPER_CLASS_COUNTS) for c in PAPER_CLASS_COUNTS)


@dataclass
class KeypointSequence:
    frames: np.ndarray  # (n_frames, N, 3)
    label: int
    source_id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must have shape (T, N, 3), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError(f"{self.source_id}: non-finite keypoint values")
        conf = self.frames[..., 2]
        if conf.size and (conf.min() < 0 or conf.max() > 1):
            raise ValueError(f"{self.source_id}: confidence outside [0, 1]")

    @property
    def n_keypoints(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ClientDataset:
    client_id: int
    samples: list[KeypointSequence]
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.samples)

    def class_histogram(self, n_classes: int = 4) -> np.ndarray:
        return np.bincount([s.label for s in self.samples], minlength=n_classes)


@dataclass(frozen=True)
class GeneratorSpec:
    class_proportions: tuple[float, ...] = PAPER_PROPORTIONS
    noise_std: float = 0.01
    frames_raw: int = 60
    seed: int = 0
    low_confidence_rate: float = 0.02

    def __post_init__(self):
        p = np.asarray(self.class_proportions, dtype=float)
        if len(p) != len(CLASS_NAMES):
            raise ValueError(f"need {len(CLASS_NAMES)} class proportions, got {len(p)}")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"class proportions must be nonnegative and sum to 1, got {p.sum()!r}")
        if self.frames_raw < 1:
            raise ValueError("frames_raw must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


# --------------------------------------------------------------------------
# preprocessing


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5 + 1e-9).astype(int)


def sample_indices(raw_len: int, target_len: int) -> np.ndarray:
    """Frame indices picked by :func:`sample_frames`."""
    if raw_len < 1:
        raise ValueError("empty sequence")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if raw_len < target_len:
        return np.concatenate([np.arange(raw_len), np.full(target_len - raw_len, raw_len - 1)])
    if target_len == 1:
        return np.zeros(1, dtype=int)
    return _round_half_up(np.arange(target_len) * (raw_len - 1) / (target_len - 1))


def sample_frames(raw, target_len: int):
    """Resample to exactly ``target_len`` frames.

    Longer inputs are subsampled on a uniform grid that keeps the first and
    last frame; shorter inputs are padded by repeating the last frame.
    """
    if len(raw) == 0:
        raise ValueError("empty sequence")
    idx = sample_indices(len(raw), target_len)
    if isinstance(raw, np.ndarray):
        return raw[idx]
    return [raw[i] for i in idx]


def apply_confidence_mask(seq: KeypointSequence, threshold: float) -> KeypointSequence:
    """Zero out (x, y, confidence) of every point whose confidence is below ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    frames = seq.frames.copy()
    frames[frames[..., 2] < threshold] = 0.0
    return KeypointSequence(frames, seq.label, seq.source_id)


def to_arrays(samples: Sequence[KeypointSequence], seq_len: int,
              threshold: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Sample, mask and stack into model inputs ``X (n, T, N, 2)`` and labels ``y``."""
    if not samples:
        return np.zeros((0, seq_len, 17, 2)), np.zeros(0, dtype=np.int64)
    n_kp = samples[0].n_keypoints
    X = np.empty((len(samples), seq_len, n_kp, 2))
    for i, s in enumerate(samples):
        if s.n_keypoints != n_kp:
            raise ValueError(f"{s.source_id}: {s.n_keypoints} keypoints, expected {n_kp}")
        frames = sample_frames(apply_confidence_mask(s, threshold).frames, seq_len)
        X[i] = frames[..., :2]
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


# --------------------------------------------------------------------------
# synthetic falls

# Standing poses in body units (height 1), feet at the origin, up is +u.
# Profile view faces +f; frontal view uses f as the image-lateral axis.
_PROFILE = np.array([
    (0.07, 0.93), (0.055, 0.955), (0.045, 0.95), (-0.01, 0.94), (-0.02, 0.935),
    (0.01, 0.80), (-0.01, 0.80), (0.03, 0.64), (-0.02, 0.64),
    (0.06, 0.49), (-0.01, 0.49), (0.01, 0.52), (-0.01, 0.52),
    (0.03, 0.28), (0.0, 0.28), (0.0, 0.02), (-0.02, 0.02),
])
_FRONTAL = np.array([
    (0.0, 0.93), (0.03, 0.955), (-0.03, 0.955), (0.065, 0.935), (-0.065, 0.935),
    (0.11, 0.80), (-0.11, 0.80), (0.14, 0.64), (-0.14, 0.64),
    (0.15, 0.49), (-0.15, 0.49), (0.07, 0.52), (-0.07, 0.52),
    (0.075, 0.28), (-0.075, 0.28), (0.075, 0.02), (-0.075, 0.02),
])
_LEGS = np.array([13, 14, 15, 16])
_ARMS = np.array([7, 8, 9, 10])
_HIP_U = 0.52


def _smoothstep(t, start, stop):
    s = np.clip((t - start) / (stop - start), 0.0, 1.0)
    return s * s * (3 - 2 * s)


def _rotate(pose, theta):
    # positive theta tips the top of the body towards +f
    c, s = np.cos(theta), np.sin(theta)
    f, u = pose[..., 0], pose[..., 1]
    return np.stack([f * c + u * s, -f * s + u * c], axis=-1)


def _draw_motion(rng: np.random.Generator) -> dict:
    return dict(
        height=rng.uniform(0.30, 0.38),
        cx=rng.uniform(0.40, 0.60),
        foot_y=rng.uniform(0.55, 0.65),
        onset=rng.uniform(0.15, 0.35),
        duration=rng.uniform(0.30, 0.45),
        angle=np.deg2rad(rng.uniform(75.0, 90.0)),
        drift=rng.uniform(0.20, 0.26),
        shift=rng.uniform(0.03, 0.08),
        side=rng.choice((-1.0, 1.0)),
        tilt=np.deg2rad(rng.uniform(10.0, 25.0)),
        lateral=rng.uniform(0.10, 0.16),
        speed=rng.uniform(-0.12, 0.12),
        stride=rng.uniform(0.06, 0.12),
        cycles=rng.uniform(1.0, 2.5),
        phase=rng.uniform(0.0, 2 * np.pi),
    )


def motion_template(label: int, m: dict, t: np.ndarray) -> np.ndarray:
    """Noise-free keypoints ``(len(t), 17, 2)`` for normalized times ``t`` in [0, 1]."""
    t = np.asarray(t, dtype=float)
    H = m["height"]
    s = _smoothstep(t, m["onset"], m["onset"] + m["duration"])[:, None]
    if label == 3:
        pose = np.repeat(_PROFILE[None], len(t), axis=0)
        swing = m["stride"] * np.sin(2 * np.pi * m["cycles"] * t + m["phase"])[:, None]
        pose[:, _LEGS[[0, 2]], 0] += swing
        pose[:, _LEGS[[1, 3]], 0] -= swing
        pose[:, _ARMS[[0, 2]], 0] -= 0.5 * swing
        pose[:, _ARMS[[1, 3]], 0] += 0.5 * swing
        bob = 0.01 * np.abs(np.sin(2 * np.pi * m["cycles"] * t + m["phase"]))
        pose[:, :, 1] += bob[:, None]
        dx = m["speed"] * t[:, None]
        dy = np.zeros_like(dx)
    else:
        if label == 1:
            # seen from the front: the legs fold under an upright torso, which
            # then tips a little and slides sideways
            direction = m["side"]
            pose = np.repeat(_FRONTAL[None], len(t), axis=0)
            fold = 0.6 * s
            legs = pose[..., 1] < _HIP_U
            pose[..., 1] = np.where(legs, pose[..., 1] * (1.0 - fold), pose[..., 1] - fold * _HIP_U)
            pose = _rotate(pose, direction * m["tilt"] * s)
            dx = direction * m["lateral"] * s
        else:
            direction = 1.0 if label == 0 else -1.0
            pose = _rotate(np.broadcast_to(_PROFILE, (len(t),) + _PROFILE.shape),
                           direction * m["angle"] * s)
            dx = direction * m["shift"] * s
        dy = m["drift"] * s
    x = m["cx"] + H * pose[..., 0] + dx
    y = m["foot_y"] - H * pose[..., 1] + dy
    return np.stack([x, y], axis=-1)


def class_counts(proportions: Sequence[float], n: int) -> np.ndarray:
    """Largest-remainder split of ``n`` by ``proportions``."""
    raw = np.asarray(proportions, dtype=float) * n
    counts = np.floor(raw).astype(int)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts


def generate_synthetic(spec: GeneratorSpec, n_samples: int) -> list[KeypointSequence]:
    """Deterministic class-templated fall motions with Gaussian coordinate noise."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(spec.seed)
    counts = class_counts(spec.class_proportions, n_samples)
    labels = rng.permutation(np.repeat(np.arange(len(counts)), counts))
    t = np.linspace(0.0, 1.0, spec.frames_raw) if spec.frames_raw > 1 else np.zeros(1)
    out = []
    for i, label in enumerate(labels):
        label = int(label)
        m = _draw_motion(rng)
        xy = motion_template(label, m, t)
        if spec.noise_std > 0:
            xy = xy + rng.normal(0.0, spec.noise_std, size=xy.shape)
        conf = rng.uniform(0.6, 1.0, size=xy.shape[:2])
        occluded = rng.random(xy.shape[:2]) < spec.low_confidence_rate
        conf[occluded] = rng.uniform(0.0, 0.3, size=int(occluded.sum()))
        frames = np.concatenate([np.clip(xy, 0.0, 1.0), conf[..., None]], axis=-1)
        out.append(KeypointSequence(frames, label, f"syn-{i:06d}"))
    return out


# --------------------------------------------------------------------------
# splitting and partitioning


def _systematic(n: int, rate: float) -> np.ndarray:
    # position p is picked when the running quota round(rate * p) steps up
    p = np.arange(n)
    return (_round_half_up(rate * (p + 1)) - _round_half_up(rate * p)) == 1


def split_train_val_test(data: Sequence[KeypointSequence], ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified, seeded split into train/val/test lists.

    Samples are shuffled within each class and laid out class by class; the
    train split is picked systematically along that order, then val from the
    remainder. Global sizes are ``round(ratio * n)`` and each class's train
    share is within one sample of exact.
    """
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3 or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    labels = np.array([s.label for s in data], dtype=int)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c))
                            for c in np.unique(labels)]) if len(data) else np.zeros(0, int)
    in_train = _systematic(len(order), ratios[0])
    rest = order[~in_train]
    tail = ratios[1] + ratios[2]
    in_val = _systematic(len(rest), ratios[1] / tail if tail > 0 else 0.0)
    parts = (order[in_train], rest[in_val], rest[~in_val])
    return tuple([data[i] for i in sorted(p.tolist())] for p in parts)


def partition_non_iid(data: Sequence[KeypointSequence], k_clients: int, alpha: float = 0.5,
                      seed: int = 0) -> list[ClientDataset]:
    """Dirichlet(alpha) label-skewed allocation of samples to ``k_clients``."""
    if k_clients < 1:
        raise ValueError("k_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if len(data) < k_clients:
        raise ValueError(f"{len(data)} samples cannot cover {k_clients} clients")
    rng = np.random.default_rng(seed)
    labels = np.array([s.label for s in data], dtype=int)
    assignment = [[] for _ in range(k_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        share = rng.dirichlet(np.full(k_clients, alpha))
        cuts = _round_half_up(np.cumsum(share)[:-1] * len(idx))
        for k, chunk in enumerate(np.split(idx, cuts)):
            assignment[k].extend(int(i) for i in chunk)
    return [ClientDataset(k, [data[i] for i in sorted(a)], "train")
            for k, a in enumerate(assignment)]


# --------------------------------------------------------------------------
# KPJL v1 files


def _num(v: float):
    return float(f"{v:.9g}")


def sequence_to_json(seq: KeypointSequence) -> str:
    frames = [[[_num(v) for v in point] for point in frame] for frame in seq.frames.tolist()]
    return json.dumps({"id": seq.source_id, "label": int(seq.label),
                       "n": seq.n_keypoints, "frames": frames}, separators=(",", ":"))


def sequence_from_json(line: str) -> KeypointSequence:
    rec = json.loads(line)
    frames = np.asarray(rec["frames"], dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1] != rec["n"]:
        raise ValueError(f"{rec.get('id')}: frames do not match n={rec['n']}")
    return KeypointSequence(frames, int(rec["label"]), str(rec["id"]))


def write_kpjl(path, samples: Iterable[KeypointSequence]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(sequence_to_json(s))
            fh.write("\n")


def read_kpjl(path) -> list[KeypointSequence]:
    with open(path, encoding="utf-8") as fh:
        return [sequence_from_json(line) for line in fh if line.strip()]


def write_manifest(path, clients: Sequence[ClientDataset]):
    manifest = {str(c.client_id): [s.source_id for s in c.samples] for c in clients}
    Path(path).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def read_manifest(path, samples: Sequence[KeypointSequence]) -> list[ClientDataset]:
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    by_id = {s.source_id: s for s in samples}
    missing = [i for ids in manifest.values() for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"manifest references {len(missing)} unknown sample ids, e.g. {missing[0]}")
    return [ClientDataset(int(k), [by_id[i] for i in ids], "train")
            for k, ids in sorted(manifest.items(), key=lambda kv: int(kv[0]))]
