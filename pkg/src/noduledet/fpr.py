"""3D convolutional false-positive reduction.

Candidates from the slice detector are re-scored by a volumetric classifier
that sees a patch of full 3D context around each candidate center.  Training
patches are expanded by every crop offset and axis flip; positives are
duplicated to balance the classes.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Sequence

import numpy as np

from . import ops
from .errors import ShapeError, TrainingDivergedError
from .optim import SGDState, sgd_step
from .records import Annotation, Candidate
from .tensor import Tensor, backward, no_grad, read_tensor, write_tensor
from .volume import CtVolume, world_to_voxel

log = logging.getLogger(__name__)


@dataclass
class Fpr3dConfig:
    conv_channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    conv_kernel: int = 3
    pool_after: tuple[int, ...] = (1, 3, 5)  # conv indices followed by a 2x2x2 max pool
    dense_widths: tuple[int, ...] = (512, 128, 2)
    dropout_pool: float = 0.2
    dropout_fc: float = 0.5
    patch_extent: tuple[int, int, int] = (40, 40, 24)  # voxels (x, y, z)
    crop_extent: tuple[int, int, int] = (36, 36, 20)
    norm_mean: float = -600.0
    norm_scale: float = 300.0
    air_hu: float = -1000.0
    duplicate_factor: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 10.0
    batch_size: int = 16
    epochs: int = 30
    max_negatives: int = 400  # per epoch; 0 keeps all
    epoch_size: int = 0  # items drawn per epoch after negative capping; 0 keeps all
    val_fraction: float = 0.25  # share of training scans held out to pick the best epoch
    seed: int = 0

    def validate(self) -> None:
        if len(self.conv_channels) != 6:
            raise ValueError("the classifier has exactly six 3D conv layers")
        if len(self.pool_after) != 3:
            raise ValueError("the classifier has exactly three 3D max-pooling layers")
        if len(self.dense_widths) != 3 or self.dense_widths[-1] != 2:
            raise ValueError("the classifier has three dense layers ending in a 2-way output")
        if any(p < c for p, c in zip(self.patch_extent, self.crop_extent)):
            raise ValueError("crop extent must not exceed patch extent")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction {self.val_fraction} outside [0, 1)")
        for rate in (self.dropout_pool, self.dropout_fc):
            if not 0 <= rate < 1:
                raise ValueError(f"dropout rate {rate} outside [0, 1)")

    @property
    def crop_slack(self) -> tuple[int, int, int]:
        return tuple(p - c for p, c in zip(self.patch_extent, self.crop_extent))

    def flat_features(self) -> int:
        x, y, z = self.crop_extent
        for _ in self.pool_after:
            x, y, z = x // 2, y // 2, z // 2
        if min(x, y, z) < 1:
            raise ValueError(f"crop extent {self.crop_extent} vanishes after three 2x pools")
        return self.conv_channels[-1] * x * y * z


def full_preset(**overrides) -> Fpr3dConfig:
    return replace(Fpr3dConfig(), **overrides)


def desk_preset(**overrides) -> Fpr3dConfig:
    base = Fpr3dConfig(
        conv_channels=(8, 8, 16, 16, 32, 32),
        dense_widths=(128, 64, 2),
        patch_extent=(20, 20, 14),
        crop_extent=(16, 16, 10),
        batch_size=16,
        epochs=20,
        max_negatives=300,
        epoch_size=384,
        dropout_fc=0.3,
        dropout_pool=0.1,
    )
    return replace(base, **overrides)


# -- data -------------------------------------------------------------------


@dataclass
class Patch:
    voxels: np.ndarray  # normalized HU, [z, y, x]
    candidate: Candidate | None = None
    label: int | None = None
    offset: tuple[int, int, int] | None = None  # crop offset (x, y, z)
    flip: int = 0  # bit 0: x, bit 1: y, bit 2: z

    @property
    def extent(self) -> tuple[int, int, int]:
        z, y, x = self.voxels.shape
        return (x, y, z)

    @property
    def tag(self) -> tuple:
        return (self.offset, self.flip)


def normalize_hu(values, mean: float = -600.0, scale: float = 300.0) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - mean) / scale


def normalize_volume(volume: CtVolume, mean: float = -600.0, scale: float = 300.0) -> np.ndarray:
    """``(HU - mean) / scale`` over the whole scan."""
    return normalize_hu(volume.values, mean, scale)


def extract_patch(
    volume: CtVolume,
    center,
    extent=(40, 40, 24),
    config: Fpr3dConfig | None = None,
    candidate: Candidate | None = None,
) -> Patch:
    """Cut an ``extent`` (x, y, z) box around a world-space ``center``.

    The center voxel sits at index ``extent // 2`` along each axis.  Voxels
    outside the scan are filled with air before normalization.
    """
    config = config or Fpr3dConfig()
    voxel = world_to_voxel(volume, center)
    if not volume.contains_voxel(voxel):
        raise ValueError(f"center {tuple(center)} lies outside volume {volume.uid}")
    c = np.floor(voxel + 0.5).astype(int)
    ex = np.asarray(extent, dtype=int)
    start = c - ex // 2
    size = np.asarray(volume.extents)
    out = np.full(ex[::-1], config.air_hu, dtype=np.float64)
    lo = np.maximum(start, 0)
    hi = np.minimum(start + ex, size)
    if np.all(hi > lo):
        src = tuple(slice(l, h) for l, h in zip(lo[::-1], hi[::-1]))
        dst = tuple(slice(l - s, h - s) for l, h, s in zip(lo[::-1], hi[::-1], start[::-1]))
        out[dst] = volume.values[src]
    return Patch(normalize_hu(out, config.norm_mean, config.norm_scale), candidate)


def crop_and_flip(voxels: np.ndarray, offset, crop_extent, flip: int) -> np.ndarray:
    ox, oy, oz = offset
    cx, cy, cz = crop_extent
    out = voxels[oz : oz + cz, oy : oy + cy, ox : ox + cx]
    axes = tuple(ax for bit, ax in ((1, 2), (2, 1), (4, 0)) if flip & bit)
    return np.flip(out, axis=axes) if axes else out


def flip_patch(patch: Patch, mask: int) -> Patch:
    """Mirror a patch along the axes selected by ``mask`` (x=1, y=2, z=4)."""
    return replace(patch, voxels=crop_and_flip(patch.voxels, (0, 0, 0), patch.extent, mask))


class AugmentationSet(Sequence):
    """Every (crop offset, flip) variant of one patch, produced on demand.

    Order: offsets lexicographic in (x, y, z), then flip mask 0..7.
    """

    def __init__(self, patch: Patch, crop_extent):
        self.patch = patch
        self.crop_extent = tuple(crop_extent)
        slack = [p - c for p, c in zip(patch.extent, self.crop_extent)]
        if min(slack) < 0:
            raise ShapeError(f"crop {self.crop_extent} larger than patch {patch.extent}")
        self.offsets = list(product(*(range(s + 1) for s in slack)))

    def __len__(self) -> int:
        return len(self.offsets) * 8

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        offset, flip = self.offsets[i // 8], i % 8
        return Patch(
            np.ascontiguousarray(crop_and_flip(self.patch.voxels, offset, self.crop_extent, flip)),
            self.patch.candidate,
            self.patch.label,
            offset,
            flip,
        )


def enumerate_augmentations(patch: Patch, crop_extent=(36, 36, 20), patch_extent=None) -> AugmentationSet:
    if patch_extent is not None and tuple(patch.extent) != tuple(patch_extent):
        raise ShapeError(f"patch extent {patch.extent} != configured {tuple(patch_extent)}")
    return AugmentationSet(patch, crop_extent)


def center_crop(patch: Patch, crop_extent) -> Patch:
    offset = tuple((p - c) // 2 for p, c in zip(patch.extent, crop_extent))
    return Patch(
        np.ascontiguousarray(crop_and_flip(patch.voxels, offset, crop_extent, 0)),
        patch.candidate,
        patch.label,
        offset,
        0,
    )


def label_candidate(candidate, annotations: Sequence[Annotation]) -> int:
    """1 when the candidate center lies strictly inside some annotated nodule of its scan."""
    for a in annotations:
        if a.uid != candidate.uid:
            continue
        if math.dist(candidate.center, a.center) < a.diameter / 2:
            return 1
    return 0


def balance_duplicate(patches: Sequence[Patch], factor: int = 8) -> list[Patch]:
    """Repeat each positive ``factor`` times in place; negatives appear once."""
    if factor < 1:
        raise ValueError("duplicate factor must be >= 1")
    out = []
    for p in patches:
        out.extend([p] * (factor if p.label == 1 else 1))
    return out


# -- model --------------------------------------------------------------------


OUTPUT_INIT_STD = 0.01


@dataclass
class Fpr3dModel:
    config: Fpr3dConfig
    params: dict[str, Tensor]

    def layers(self) -> list[str]:
        """Layer kinds in forward order."""
        kinds = []
        for i in range(len(self.config.conv_channels)):
            kinds.append("conv3d")
            if i in self.config.pool_after:
                kinds.append("maxpool3d")
        kinds.extend(["dense"] * len(self.config.dense_widths))
        return kinds

    def census(self) -> dict[str, int]:
        kinds = self.layers()
        return {
            "conv3d": kinds.count("conv3d"),
            "maxpool3d": kinds.count("maxpool3d"),
            "dense": kinds.count("dense"),
            "outputs": self.params[f"fc{len(self.config.dense_widths) - 1}.w"].shape[0],
        }


def build_fpr(config: Fpr3dConfig, rng: np.random.Generator | None = None) -> Fpr3dModel:
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    k = config.conv_kernel
    params: dict[str, Tensor] = {}
    c_in = 1
    for i, c_out in enumerate(config.conv_channels):
        params[f"conv{i}.w"] = ops.he_init((c_out, c_in, k, k, k), c_in * k**3, rng)
        params[f"conv{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out
    width = config.flat_features()
    last = len(config.dense_widths) - 1
    for i, out in enumerate(config.dense_widths):
        if i == last:
            # near-zero logits at the start keep early updates small
            params[f"fc{i}.w"] = Tensor(rng.normal(0.0, OUTPUT_INIT_STD, size=(out, width)), requires_grad=True)
        else:
            params[f"fc{i}.w"] = ops.he_init((out, width), width, rng)
        params[f"fc{i}.b"] = Tensor(np.zeros(out), requires_grad=True)
        width = out
    return Fpr3dModel(config, params)


def save_fpr(model: Fpr3dModel, path: str) -> None:
    with open(path, "wb") as fh:
        for p in model.params.values():
            write_tensor(fh, p.data)


def load_fpr(config: Fpr3dConfig, path: str) -> Fpr3dModel:
    model = build_fpr(config, np.random.default_rng(0))
    with open(path, "rb") as fh:
        for name, p in model.params.items():
            arr = read_tensor(fh)
            if arr.shape != p.shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr
    return model


def fpr_forward(
    model: Fpr3dModel, x: Tensor, training: bool = False, rng: np.random.Generator | None = None
) -> Tensor:
    """Logits ``[N, 2]`` for a batch ``[N, 1, Z, Y, X]`` of crops."""
    cfg, p = model.config, model.params
    pad = cfg.conv_kernel // 2
    for i in range(len(cfg.conv_channels)):
        x = ops.relu(ops.conv3d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], 1, pad))
        if i in cfg.pool_after:
            x = ops.max_pool(x, 2, 2, dims=3)
            x = ops.dropout(x, cfg.dropout_pool, rng, training)
    x = x.reshape(x.shape[0], -1)
    last = len(cfg.dense_widths) - 1
    for i in range(last + 1):
        x = ops.dense(x, p[f"fc{i}.w"], p[f"fc{i}.b"])
        if i < last:
            x = ops.dropout(ops.relu(x), cfg.dropout_fc, rng, training)
    return x


def _stack(crops: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack(crops)[:, None])


def score_crops(model: Fpr3dModel, crops: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    expected = tuple(model.config.crop_extent[::-1])
    out = []
    with no_grad():
        for i in range(0, len(crops), batch_size):
            chunk = crops[i : i + batch_size]
            for c in chunk:
                if c.shape != expected:
                    raise ShapeError(f"crop shape {c.shape} != expected (z, y, x) {expected}")
            logits = fpr_forward(model, _stack(chunk), training=False)
            out.append(ops.softmax(logits.data)[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def fpr_score(model: Fpr3dModel, patch: Patch) -> float:
    """Nodule probability of the centered, unflipped crop of ``patch``."""
    cfg = model.config
    if patch.extent == tuple(cfg.patch_extent):
        crop = center_crop(patch, cfg.crop_extent).voxels
    elif patch.extent == tuple(cfg.crop_extent):
        crop = patch.voxels
    else:
        raise ShapeError(f"patch extent {patch.extent} matches neither patch nor crop extent")
    return float(score_crops(model, [crop])[0])


@dataclass
class FprHistory:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1


def evaluate_accuracy(model: Fpr3dModel, patches: Sequence[Patch]) -> float:
    if not patches:
        return float("nan")
    crops = [center_crop(p, model.config.crop_extent).voxels for p in patches]
    scores = score_crops(model, crops)
    labels = np.array([p.label for p in patches])
    return float(np.mean((scores > 0.5) == (labels == 1)))


def train_fpr(
    model: Fpr3dModel,
    train: Sequence[Patch],
    val: Sequence[Patch] = (),
    rng: np.random.Generator | None = None,
    epochs: int | None = None,
    target_accuracy: float | None = None,
) -> tuple[Fpr3dModel, FprHistory]:
    """SGD on cross-entropy over randomly augmented crops.

    ``train`` should already be balanced (see :func:`balance_duplicate`).
    Every epoch draws one (offset, flip) variant per patch; when
    ``max_negatives`` is set, negatives are subsampled per epoch.  The
    parameters of the best validation epoch are restored at the end; with
    ``target_accuracy`` training stops once validation reaches it.
    """
    cfg = model.config
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    epochs = cfg.epochs if epochs is None else epochs
    state = SGDState(
        lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm
    )
    history = FprHistory()
    best_acc, best_params = -1.0, None
    slack = cfg.crop_slack
    pos_idx = [i for i, p in enumerate(train) if p.label == 1]
    neg_idx = [i for i, p in enumerate(train) if p.label != 1]
    for epoch in range(epochs):
        chosen = neg_idx
        if cfg.max_negatives and len(neg_idx) > cfg.max_negatives:
            chosen = sorted(rng.choice(neg_idx, cfg.max_negatives, replace=False).tolist())
        order = rng.permutation(np.array(pos_idx + list(chosen), dtype=int))
        if cfg.epoch_size and len(order) > cfg.epoch_size:
            order = order[: cfg.epoch_size]
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            crops, labels = [], []
            for i in idx:
                offset = tuple(int(rng.integers(s + 1)) for s in slack)
                flip = int(rng.integers(8))
                crops.append(crop_and_flip(train[i].voxels, offset, cfg.crop_extent, flip))
                labels.append(int(train[i].label))
            logits = fpr_forward(model, _stack(crops), training=True, rng=rng)
            loss = ops.softmax_cross_entropy(logits, labels).sum() * (1.0 / len(idx))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"classifier loss became {value} in epoch {epoch}")
            backward(loss)
            sgd_step(model.params, state)
            losses.append(value)
        history.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        acc = evaluate_accuracy(model, val) if val else 1.0 - history.train_loss[-1]
        history.val_accuracy.append(acc)
        log.info("fpr epoch %d loss %.4f val acc %.3f", epoch + 1, history.train_loss[-1], acc)
        if acc > best_acc:
            best_acc, best_params = acc, copy.deepcopy({k: v.data for k, v in model.params.items()})
            history.best_epoch = epoch
        if target_accuracy is not None and val and acc >= target_accuracy:
            break
    if best_params is not None:
        for k, v in best_params.items():
            model.params[k].data = v
    return model, history


def reduce_candidates(
    model: Fpr3dModel, volume: CtVolume, candidates: Sequence[Candidate]
) -> list[Candidate]:
    """Replace each candidate's score by the classifier's nodule probability."""
    cfg = model.config
    crops = [
        center_crop(extract_patch(volume, c.center, cfg.patch_extent, cfg), cfg.crop_extent).voxels
        for c in candidates
    ]
    scores = score_crops(model, crops)
    return [
        Candidate(c.uid, c.x, c.y, c.z, float(np.clip(s, 0.0, 1.0)), "stage-2")
        for c, s in zip(candidates, scores)
    ]


def build_training_patches(
    volume: CtVolume,
    candidates: Sequence[Candidate],
    annotations: Sequence[Annotation],
    config: Fpr3dConfig,
    include_annotations: bool = True,
) -> list[Patch]:
    """Labeled full-extent patches for the candidates (and optionally nodule centers) of one scan."""
    patches = []
    for c in candidates:
        p = extract_patch(volume, c.center, config.patch_extent, config, c)
        p.label = label_candidate(c, annotations)
        patches.append(p)
    if include_annotations:
        for a in annotations:
            c = Candidate(a.uid, a.x, a.y, a.z, 1.0, "annotation")
            p = extract_patch(volume, c.center, config.patch_extent, config, c)
            p.label = 1
            patches.append(p)
    return patches


def fit_fpr(
    model: Fpr3dModel,
    scans: Sequence[tuple[CtVolume, Sequence[Annotation]]],
    candidates: Sequence[Sequence[Candidate]],
    rng: np.random.Generator | None = None,
) -> tuple[Fpr3dModel, FprHistory]:
    """Train on the stage-1 candidates of ``scans`` (one candidate list per scan).

    The last ``val_fraction`` of the scans (at least one, when there are two
    or more) is held out for epoch selection; nodule centers of the training
    scans are added as extra positives and positives are duplicated.
    """
    cfg = model.config
    if len(scans) != len(candidates):
        raise ValueError(f"{len(scans)} scans but {len(candidates)} candidate lists")
    n_val = int(np.ceil(cfg.val_fraction * len(scans))) if len(scans) > 1 and cfg.val_fraction > 0 else 0
    n_train = len(scans) - n_val
    train, val = [], []
    for i, ((volume, annotations), cands) in enumerate(zip(scans, candidates)):
        if i < n_train:
            train += build_training_patches(volume, cands, annotations, cfg)
        else:
            val += build_training_patches(volume, cands, annotations, cfg, include_annotations=True)
    if not any(p.label == 1 for p in train):
        raise ValueError("no positive training patches: the training scans carry no nodules")
    log.info(
        "fpr training on %d patches (%d positive), validating on %d",
        len(train), sum(p.label == 1 for p in train), len(val),
    )
    return train_fpr(model, balance_duplicate(train, cfg.duplicate_factor), val, rng)
