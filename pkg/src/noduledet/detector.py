"""Slice-wise nodule candidate detector: a Faster R-CNN variant whose shared
backbone ends in a transposed-convolution layer that restores a fine feature
stride for small objects.

Layout of the network::

    image [3,T,T] -> conv groups (3x3, ReLU, 2x2 pool) -> deconv (ReLU)
        -> RPN: 3x3 conv (ReLU) -> 1x1 cls (2 per anchor) / 1x1 reg (4 per anchor)
        -> ROI head: roi_pool 7x7 -> dense -> dense -> cls (2) / reg (4)
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import ops
from .errors import ShapeError, TrainingDivergedError
from .geometry import (
    ANCHOR_SIZES,
    POSITIVE,
    NEGATIVE,
    AnchorSet,
    assign_anchors,
    clip_boxes,
    decode,
    encode,
    generate_anchors,
    iou_matrix,
    nms,
    to_corners,
)
from .optim import SGDState, sgd_step
from .records import Annotation, Candidate
from .tensor import Tensor, backward, no_grad, read_tensor, write_tensor
from .volume import CtVolume, SliceImage, build_slice_triplet, voxel_to_world, world_to_voxel

log = logging.getLogger(__name__)

MAX_LOG_RATIO = math.log(1000.0 / 16)


@dataclass
class DetectorConfig:
    image_extent: int = 600
    backbone_widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    convs_per_group: tuple[int, ...] = (2, 2, 3, 3, 3)
    backbone_stride: int = 16
    use_deconv: bool = True
    deconv_kernel: int = 4
    deconv_stride: int = 4
    deconv_pad: int = 2
    deconv_channels: int = 512
    anchor_sizes: tuple[int, ...] = ANCHOR_SIZES
    rpn_hidden: int = 512
    roi_grid: tuple[int, int] = (7, 7)
    roi_widths: tuple[int, ...] = (4096, 4096)
    roi_dropout: float = 0.5
    input_mean: float = -600.0
    input_scale: float = 300.0
    pre_nms_train: int = 2000
    post_nms_train: int = 300
    pre_nms_test: int = 2000
    post_nms_test: int = 300
    proposal_nms: float = 0.7
    final_nms: float = 0.3
    min_box_size: float = 1.0
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    roi_batch: int = 128
    roi_pos_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_bg_iou: tuple[float, float] = (0.0, 0.5)
    roi_gt_jitter: int = 0  # jittered copies of each gt box added to the training ROIs
    flip_augment: bool = False  # random flips and transposes of training slices
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step: int = 0
    lr_gamma: float = 0.1
    clip_norm: float = 10.0
    steps: int = 20000
    positive_slice_fraction: float = 0.75
    gt_min_radius_fraction: float = 0.5
    merge_radius: float = 3.0  # voxels, in-plane
    merge_slices: int = 2
    score_floor: float = 0.05
    seed: int = 0

    @property
    def n_pools(self) -> int:
        return int(round(math.log2(self.backbone_stride)))

    @property
    def feature_stride(self) -> int:
        if self.use_deconv:
            return self.backbone_stride // self.deconv_stride
        return self.backbone_stride

    @property
    def feature_offset(self) -> float:
        """Image position of feature cell 0's leading edge.

        The transposed conv crops ``deconv_pad`` cells at each border, so cell
        ``j`` looks at image pixels starting at ``(j + deconv_pad) * stride``.
        """
        return float(self.deconv_pad * self.feature_stride) if self.use_deconv else 0.0

    @property
    def feature_channels(self) -> int:
        return self.deconv_channels if self.use_deconv else self.backbone_widths[-1]

    def validate(self) -> None:
        if 2 ** self.n_pools != self.backbone_stride:
            raise ValueError(f"backbone stride {self.backbone_stride} must be a power of two")
        if len(self.backbone_widths) != len(self.convs_per_group):
            raise ValueError("backbone_widths and convs_per_group differ in length")
        if self.n_pools > len(self.backbone_widths):
            raise ValueError("not enough conv groups for the requested backbone stride")
        if min(self.backbone_widths) < 1 or min(self.convs_per_group) < 1:
            raise ValueError("backbone widths and conv counts must be positive")
        if self.use_deconv and self.backbone_stride % self.deconv_stride:
            raise ValueError("deconv stride must divide the backbone stride")
        if self.rpn_hidden < 1 or not self.roi_widths or min(self.roi_widths) < 1:
            raise ValueError("head widths must be positive")
        if not self.anchor_sizes:
            raise ValueError("anchor sizes must be non-empty")

    def feature_extent(self) -> int:
        e = self.image_extent
        for _ in range(self.n_pools):
            e = e // 2
        if self.use_deconv:
            e = ops.transposed_output_extent(e, self.deconv_kernel, self.deconv_stride, self.deconv_pad)
        return e


def full_preset(**overrides) -> DetectorConfig:
    return replace(DetectorConfig(), **overrides)


def desk_preset(**overrides) -> DetectorConfig:
    base = DetectorConfig(
        image_extent=96,
        backbone_widths=(8, 16, 32, 64),
        convs_per_group=(1, 1, 1, 1),
        deconv_channels=64,
        rpn_hidden=64,
        roi_widths=(256, 256),
        pre_nms_train=600,
        post_nms_train=64,
        pre_nms_test=600,
        post_nms_test=32,
        rpn_batch=16,
        roi_batch=16,
        roi_gt_jitter=4,
        lr=0.005,
        steps=1200,
        lr_step=900,
    )
    return replace(base, **overrides)


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: dict[str, Tensor]

    def anchors(self) -> AnchorSet:
        f = self.config.feature_extent()
        anchors = generate_anchors((f, f), self.config.feature_stride, self.config.anchor_sizes)
        anchors.boxes[:, :2] += self.config.feature_offset
        return anchors

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def parameter_shapes(config: DetectorConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Name -> (shape, fan_in) for every parameter, in checkpoint order."""
    config.validate()
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    c_in = 3
    for g, (width, n) in enumerate(zip(config.backbone_widths, config.convs_per_group)):
        for j in range(n):
            shapes[f"backbone.g{g}.c{j}.w"] = ((width, c_in, 3, 3), c_in * 9)
            shapes[f"backbone.g{g}.c{j}.b"] = ((width,), 0)
            c_in = width
    if config.use_deconv:
        k = config.deconv_kernel
        shapes["deconv.w"] = ((c_in, config.deconv_channels, k, k), c_in * k * k // config.deconv_stride**2)
        shapes["deconv.b"] = ((config.deconv_channels,), 0)
        c_in = config.deconv_channels
    feat_c = c_in
    s = len(config.anchor_sizes)
    shapes["rpn.conv.w"] = ((config.rpn_hidden, feat_c, 3, 3), feat_c * 9)
    shapes["rpn.conv.b"] = ((config.rpn_hidden,), 0)
    shapes["rpn.cls.w"] = ((2 * s, config.rpn_hidden, 1, 1), config.rpn_hidden)
    shapes["rpn.cls.b"] = ((2 * s,), 0)
    shapes["rpn.reg.w"] = ((4 * s, config.rpn_hidden, 1, 1), config.rpn_hidden)
    shapes["rpn.reg.b"] = ((4 * s,), 0)
    width = feat_c * config.roi_grid[0] * config.roi_grid[1]
    for i, out in enumerate(config.roi_widths):
        shapes[f"roi.fc{i}.w"] = ((out, width), width)
        shapes[f"roi.fc{i}.b"] = ((out,), 0)
        width = out
    shapes["roi.cls.w"] = ((2, width), width)
    shapes["roi.cls.b"] = ((2,), 0)
    shapes["roi.reg.w"] = ((4, width), width)
    shapes["roi.reg.b"] = ((4,), 0)
    return shapes


# output layers start small so the first updates do not swamp the shared features
HEAD_INIT_STD = {"rpn.cls.w": 0.01, "rpn.reg.w": 0.001, "roi.cls.w": 0.01, "roi.reg.w": 0.001}


def build_detector(config: DetectorConfig, rng: np.random.Generator | None = None) -> DetectorModel:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    params = {}
    for name, (shape, fan_in) in parameter_shapes(config).items():
        if name in HEAD_INIT_STD:
            params[name] = Tensor(rng.normal(0.0, HEAD_INIT_STD[name], size=shape), requires_grad=True)
        elif fan_in:
            params[name] = ops.he_init(shape, fan_in, rng)
        else:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
    return DetectorModel(config, params)


def save_detector(model: DetectorModel, path: str) -> None:
    with open(path, "wb") as fh:
        for p in model.params.values():
            write_tensor(fh, p.data)


def load_detector(config: DetectorConfig, path: str) -> DetectorModel:
    model = build_detector(config, np.random.default_rng(0))
    with open(path, "rb") as fh:
        for name, p in model.params.items():
            arr = read_tensor(fh)
            if arr.shape != p.shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr
    return model


# -- forward passes ----------------------------------------------------------


def normalize_pixels(config: DetectorConfig, pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float64) - config.input_mean) / config.input_scale


def backbone_forward(model: DetectorModel, x: Tensor) -> Tensor:
    """Shared feature extractor; ``x`` is ``[3,T,T]`` or ``[N,3,T,T]`` normalized pixels."""
    cfg, p = model.config, model.params
    for g, n in enumerate(cfg.convs_per_group):
        for j in range(n):
            x = ops.relu(ops.conv2d(x, p[f"backbone.g{g}.c{j}.w"], p[f"backbone.g{g}.c{j}.b"], 1, 1))
        if g < cfg.n_pools:
            x = ops.max_pool(x, 2, 2, dims=2)
    if cfg.use_deconv:
        x = ops.relu(
            ops.transposed_conv2d(x, p["deconv.w"], p["deconv.b"], cfg.deconv_stride, cfg.deconv_pad)
        )
    return x


@dataclass
class RpnOutput:
    features: Tensor  # [C, Hf, Wf]
    cls_logits: Tensor  # [A, 2]
    deltas: Tensor  # [A, 4]
    anchors: AnchorSet

    @property
    def objectness(self) -> np.ndarray:
        return ops.softmax(self.cls_logits.data)[:, 1]


def rpn_head(model: DetectorModel, feat: Tensor) -> tuple[Tensor, Tensor]:
    p = model.params
    s = len(model.config.anchor_sizes)
    h = ops.relu(ops.conv2d(feat, p["rpn.conv.w"], p["rpn.conv.b"], 1, 1))
    cls = ops.conv2d(h, p["rpn.cls.w"], p["rpn.cls.b"])
    reg = ops.conv2d(h, p["rpn.reg.w"], p["rpn.reg.b"])
    fh, fw = feat.shape[-2:]
    cls = cls.reshape(s, 2, fh, fw).transpose(2, 3, 0, 1).reshape(fh * fw * s, 2)
    reg = reg.reshape(s, 4, fh, fw).transpose(2, 3, 0, 1).reshape(fh * fw * s, 4)
    return cls, reg


def _check_image(model: DetectorModel, pixels: np.ndarray) -> None:
    t = model.config.image_extent
    if pixels.shape != (3, t, t):
        raise ShapeError(f"detector expects a 3x{t}x{t} slice image, got {pixels.shape}")


def rpn_forward(model: DetectorModel, image: SliceImage | np.ndarray) -> RpnOutput:
    pixels = image.pixels if isinstance(image, SliceImage) else np.asarray(image)
    _check_image(model, pixels)
    feat = backbone_forward(model, Tensor(normalize_pixels(model.config, pixels)))
    cls, reg = rpn_head(model, feat)
    anchors = model.anchors()
    if len(anchors) != cls.shape[0]:
        raise ShapeError(f"{cls.shape[0]} anchor outputs but {len(anchors)} anchors")
    return RpnOutput(feat, cls, reg, anchors)


def propose_rois(
    objectness: np.ndarray,
    deltas: np.ndarray,
    anchors,
    pre_nms_k: int,
    post_nms_k: int,
    nms_thresh: float,
    image_size: float | None = None,
    min_size: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, drop degenerate, keep top-k, NMS, keep top-k again.

    Returns center-form boxes and their scores, best first.
    """
    boxes_a = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, float)
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    if len(objectness) != len(boxes_a) or len(np.asarray(deltas).reshape(-1, 4)) != len(boxes_a):
        raise ShapeError("objectness/deltas counts do not match the anchor set")
    boxes = decode(boxes_a, deltas, MAX_LOG_RATIO)
    if image_size is not None:
        boxes = clip_boxes(boxes, image_size, image_size)
    ok = np.flatnonzero((boxes[:, 2] >= min_size) & (boxes[:, 3] >= min_size))
    order = ok[np.argsort(-objectness[ok], kind="stable")][:pre_nms_k]
    keep = nms(boxes[order], objectness[order], nms_thresh)[:post_nms_k]
    chosen = order[keep]
    return boxes[chosen], objectness[chosen]


def clip_to_feature_map(corners: np.ndarray, height: int, width: int) -> np.ndarray:
    """Clip feature-cell corners so every roi keeps at least part of one cell."""
    c = np.array(corners, dtype=np.float64).reshape(-1, 4)
    for lo, hi, extent in ((0, 2, width), (1, 3, height)):
        c[:, lo] = np.clip(c[:, lo], 0.0, extent - 1.0)
        c[:, hi] = np.clip(c[:, hi], 0.0, float(extent))
        c[:, hi] = np.maximum(c[:, hi], np.floor(c[:, lo]) + 1.0)
    return c


def roi_head(
    model: DetectorModel,
    feat: Tensor,
    rois: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Classify and refine image-space center-form ``rois`` on the shared features."""
    cfg, p = model.config, model.params
    fcorners = clip_to_feature_map((to_corners(rois) - cfg.feature_offset) / cfg.feature_stride, *feat.shape[-2:])
    x = ops.roi_pool(feat, fcorners, cfg.roi_grid)
    x = x.reshape(len(rois), -1)
    for i in range(len(cfg.roi_widths)):
        x = ops.relu(ops.dense(x, p[f"roi.fc{i}.w"], p[f"roi.fc{i}.b"]))
        x = ops.dropout(x, cfg.roi_dropout, rng, training)
    return ops.dense(x, p["roi.cls.w"], p["roi.cls.b"]), ops.dense(x, p["roi.reg.w"], p["roi.reg.b"])


# -- loss -------------------------------------------------------------------


@dataclass
class LossBatch:
    """The four sample sets of the joint objective.

    Classification sets hold ``[N, 2]`` logits with integer labels;
    regression sets hold ``[N, 4]`` predicted deltas with targets and may be
    empty (``None``) when the image has no positives.
    """

    rpn_cls: Tensor
    rpn_labels: np.ndarray
    roi_cls: Tensor
    roi_labels: np.ndarray
    rpn_reg: Tensor | None = None
    rpn_targets: np.ndarray | None = None
    roi_reg: Tensor | None = None
    roi_targets: np.ndarray | None = None

    def counts(self) -> tuple[int, int, int, int]:
        n = lambda t: 0 if t is None else t.shape[0]  # noqa: E731
        return n(self.rpn_cls), n(self.rpn_reg), n(self.roi_cls), n(self.roi_reg)


def loss_terms(batch: LossBatch) -> list[Tensor]:
    """The four normalized sums, in order: RPN cls, RPN reg, ROI cls, ROI reg."""
    terms = []
    for logits, labels in ((batch.rpn_cls, batch.rpn_labels), (batch.roi_cls, batch.roi_labels)):
        if logits is None or logits.shape[0] == 0:
            raise ValueError("classification term lists must not be empty")
        if len(labels) != logits.shape[0]:
            raise ValueError("classification labels and logits differ in count")
    for cls, labels, reg, target in (
        (batch.rpn_cls, batch.rpn_labels, batch.rpn_reg, batch.rpn_targets),
        (batch.roi_cls, batch.roi_labels, batch.roi_reg, batch.roi_targets),
    ):
        terms.append(ops.softmax_cross_entropy(cls, labels).sum() * (1.0 / cls.shape[0]))
        if reg is None or reg.shape[0] == 0:
            terms.append(Tensor(np.zeros(1)))
        else:
            terms.append(ops.smooth_l1(reg, target).sum() * (1.0 / reg.shape[0]))
    return terms


def joint_loss(batch: LossBatch) -> Tensor:
    t = loss_terms(batch)
    return t[0] + t[1] + t[2] + t[3]


# -- training ---------------------------------------------------------------


def _sample(rng, pos: np.ndarray, neg: np.ndarray, total: int, pos_fraction: float):
    n_pos = min(len(pos), int(total * pos_fraction))
    pos = rng.permutation(pos)[:n_pos] if len(pos) > n_pos else pos
    n_neg = min(len(neg), total - len(pos))
    neg = rng.permutation(neg)[:n_neg] if len(neg) > n_neg else neg
    return np.sort(pos), np.sort(neg)


def build_loss_batch(
    model: DetectorModel,
    image: SliceImage | np.ndarray,
    gt_boxes: np.ndarray,
    rng: np.random.Generator,
    training: bool = True,
) -> tuple[LossBatch, dict]:
    """Forward one image and assemble the sampled anchors and ROIs of the joint loss."""
    cfg = model.config
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(gt[:, 2:] <= 0):
        raise ValueError("ground-truth boxes must have positive extents")
    out = rpn_forward(model, image)
    anchors = out.anchors
    t = cfg.image_extent

    assignment = assign_anchors(anchors, gt, cfg.pos_iou, cfg.neg_iou, anchors.inside(t, t))
    pos, neg = _sample(
        rng,
        np.flatnonzero(assignment.labels == POSITIVE),
        np.flatnonzero(assignment.labels == NEGATIVE),
        cfg.rpn_batch,
        cfg.rpn_pos_fraction,
    )
    idx = np.concatenate([pos, neg])
    rpn_labels = np.concatenate([np.ones(len(pos), int), np.zeros(len(neg), int)])
    rpn_cls = out.cls_logits[idx]
    rpn_reg = rpn_targets = None
    if len(pos):
        rpn_reg = out.deltas[pos]
        rpn_targets = encode(anchors.boxes[pos], gt[assignment.matched[pos]])

    proposals, _ = propose_rois(
        out.objectness,
        out.deltas.data,
        anchors,
        cfg.pre_nms_train,
        cfg.post_nms_train,
        cfg.proposal_nms,
        t,
        cfg.min_box_size,
    )
    rois = np.concatenate([proposals, gt, jitter_boxes(gt, cfg.roi_gt_jitter, rng)]) if len(gt) else proposals
    if len(gt):
        overlaps = iou_matrix(rois, gt)
        best = overlaps.max(axis=1)
        best_gt = overlaps.argmax(axis=1)
    else:
        best = np.zeros(len(rois))
        best_gt = np.full(len(rois), -1)
    lo, hi = cfg.roi_bg_iou
    fg, bg = _sample(
        rng,
        np.flatnonzero(best >= cfg.roi_fg_iou),
        np.flatnonzero((best >= lo) & (best < hi)),
        cfg.roi_batch,
        cfg.roi_pos_fraction,
    )
    sel = np.concatenate([fg, bg])
    roi_cls, roi_reg_all = roi_head(model, out.features, rois[sel], training, rng)
    roi_labels = np.concatenate([np.ones(len(fg), int), np.zeros(len(bg), int)])
    roi_reg = roi_targets = None
    if len(fg):
        roi_reg = roi_reg_all[np.arange(len(fg))]
        roi_targets = encode(rois[fg], gt[best_gt[fg]])

    batch = LossBatch(rpn_cls, rpn_labels, roi_cls, roi_labels, rpn_reg, rpn_targets, roi_reg, roi_targets)
    info = {"rpn_pos": len(pos), "rpn_neg": len(neg), "roi_fg": len(fg), "roi_bg": len(bg)}
    return batch, info


def jitter_boxes(boxes: np.ndarray, copies: int, rng: np.random.Generator) -> np.ndarray:
    """Randomly shifted and rescaled copies of ``boxes`` (shift up to 15%, scale within e^±0.2)."""
    if copies <= 0 or len(boxes) == 0:
        return np.zeros((0, 4))
    b = np.repeat(boxes, copies, axis=0)
    shift = rng.uniform(-0.15, 0.15, size=(len(b), 2)) * b[:, 2:]
    scale = np.exp(rng.uniform(-0.2, 0.2, size=(len(b), 2)))
    return np.concatenate([b[:, :2] + shift, b[:, 2:] * scale], axis=1)


def flip_slice(pixels: np.ndarray, boxes: np.ndarray, code: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply one of the 8 axis flips/transposes (``code`` bits: flip x, flip y, transpose).

    ``pixels`` is ``[C,T,T]``; ``boxes`` are center-form in continuous pixel coordinates.
    """
    t = pixels.shape[-1]
    out = pixels
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    if code & 1:
        out = out[:, :, ::-1]
        b[:, 0] = t - b[:, 0]
    if code & 2:
        out = out[:, ::-1, :]
        b[:, 1] = t - b[:, 1]
    if code & 4:
        out = out.transpose(0, 2, 1)
        b = b[:, [1, 0, 3, 2]]
    return np.ascontiguousarray(out), b


def make_optimizer(config: DetectorConfig) -> SGDState:
    return SGDState(
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        step_size=config.lr_step,
        gamma=config.lr_gamma,
        clip_norm=config.clip_norm,
    )


def train_step(
    model: DetectorModel,
    image: SliceImage | np.ndarray,
    gt_boxes,
    state: SGDState,
    rng: np.random.Generator,
) -> tuple[float, SGDState]:
    """One joint forward/backward/update on a single slice image."""
    batch, _ = build_loss_batch(model, image, gt_boxes, rng, training=True)
    loss = joint_loss(batch)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"detector loss became {value} at step {state.steps}")
    backward(loss)
    sgd_step(model.params, state)
    return value, state


def slice_gt_boxes(
    volume: CtVolume,
    annotations: Sequence[Annotation],
    z_index: int,
    image: SliceImage,
    min_radius_fraction: float = 0.5,
) -> tuple[np.ndarray, bool]:
    """Pixel-space boxes of nodule cross-sections on one axial slice.

    Returns ``(boxes, ambiguous)``; ``ambiguous`` flags a slice that grazes a
    nodule with a cross-section below ``min_radius_fraction`` of its radius.
    """
    boxes = []
    ambiguous = False
    sx, sy, sz = volume.spacing
    z_world = voxel_to_world(volume, (0, 0, z_index))[2]
    for a in annotations:
        radius = a.diameter / 2
        dz = abs(z_world - a.z)
        if dz >= radius:
            continue
        r = math.sqrt(radius * radius - dz * dz)
        if r < min_radius_fraction * radius:
            ambiguous = True
            continue
        vx, vy, _ = world_to_voxel(volume, a.center)
        px, py = image.voxel_to_pixel(vx, vy)
        boxes.append((px, py, 2 * r / sx * image.scale[0], 2 * r / sy * image.scale[1]))
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), ambiguous


def train_detector(
    model: DetectorModel,
    scans: Sequence[tuple[CtVolume, Sequence[Annotation]]],
    rng: np.random.Generator | None = None,
    steps: int | None = None,
) -> list[float]:
    """Train on slice triplets drawn from ``scans``; returns the loss trace."""
    cfg = model.config
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    steps = cfg.steps if steps is None else steps
    positives, negatives = [], []
    for s, (volume, annotations) in enumerate(scans):
        for z in range(volume.extents[2]):
            image = SliceImage(np.zeros((3, 1, 1)), volume.uid, z, (cfg.image_extent / volume.extents[0], cfg.image_extent / volume.extents[1]))
            boxes, ambiguous = slice_gt_boxes(volume, annotations, z, image, cfg.gt_min_radius_fraction)
            if len(boxes):
                positives.append((s, z, boxes))
            elif not ambiguous:
                negatives.append((s, z, boxes))
    if not positives and not negatives:
        raise ValueError("no training slices")
    state = make_optimizer(cfg)
    trace = []
    for step in range(steps):
        use_pos = positives and (not negatives or rng.random() < cfg.positive_slice_fraction)
        pool = positives if use_pos else negatives
        s, z, boxes = pool[rng.integers(len(pool))]
        image = build_slice_triplet(scans[s][0], z, cfg.image_extent)
        if cfg.flip_augment:
            pixels, boxes = flip_slice(image.pixels, boxes, int(rng.integers(8)))
            image = replace(image, pixels=pixels)
        loss, state = train_step(model, image, boxes, state, rng)
        trace.append(loss)
        if (step + 1) % 100 == 0:
            log.info("detector step %d/%d loss %.4f", step + 1, steps, float(np.mean(trace[-100:])))
    return trace


# -- inference ----------------------------------------------------------------


def detect_slice(model: DetectorModel, image: SliceImage) -> tuple[np.ndarray, np.ndarray]:
    """Final per-slice detections: refined boxes and ROI-classifier scores."""
    cfg = model.config
    with no_grad():
        out = rpn_forward(model, image)
        t = cfg.image_extent
        rois, _ = propose_rois(
            out.objectness,
            out.deltas.data,
            out.anchors,
            cfg.pre_nms_test,
            cfg.post_nms_test,
            cfg.proposal_nms,
            t,
            cfg.min_box_size,
        )
        if len(rois) == 0:
            return np.zeros((0, 4)), np.zeros(0)
        cls, reg = roi_head(model, out.features, rois, training=False)
    scores = ops.softmax(cls.data)[:, 1]
    boxes = clip_boxes(decode(rois, reg.data, MAX_LOG_RATIO), t, t)
    ok = np.flatnonzero((boxes[:, 2] >= cfg.min_box_size) & (boxes[:, 3] >= cfg.min_box_size))
    keep = ok[nms(boxes[ok], scores[ok], cfg.final_nms)]
    return boxes[keep], scores[keep]


def merge_slice_detections(
    detections: Sequence[tuple[float, float, int, float]], radius: float, slices: int
) -> list[tuple[float, float, int, float]]:
    """Greedy cross-slice fusion of ``(vx, vy, z, score)`` detections.

    Visits by descending score (ties: earlier z, then input order) and drops
    any detection within ``radius`` voxels in-plane and ``slices`` slices of a
    kept one.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][3], detections[i][2], i))
    kept: list[tuple[float, float, int, float]] = []
    for i in order:
        vx, vy, z, s = detections[i]
        if any(
            abs(z - kz) <= slices and math.hypot(vx - kx, vy - ky) <= radius for kx, ky, kz, _ in kept
        ):
            continue
        kept.append(detections[i])
    return kept


def detect_candidates(
    model: DetectorModel,
    volume: CtVolume,
    score_floor: float | None = None,
    threads: int = 1,
) -> list[Candidate]:
    """Run the detector on every axial slice and fuse detections into 3D candidates.

    Candidates must score strictly above ``score_floor``.
    """
    cfg = model.config
    floor = cfg.score_floor if score_floor is None else score_floor
    nz = volume.extents[2]
    if nz < 3:
        raise ValueError(f"volume {volume.uid} has {nz} slices; at least 3 are required")

    def run(z):
        image = build_slice_triplet(volume, z, cfg.image_extent)
        boxes, scores = detect_slice(model, image)
        found = []
        for (cx, cy, _, _), s in zip(boxes, scores):
            if s > floor:
                vx, vy = image.pixel_to_voxel(cx, cy)
                found.append((vx, vy, z, float(s)))
        return found

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_slice = list(pool.map(run, range(nz)))
    else:
        per_slice = [run(z) for z in range(nz)]
    detections = [d for found in per_slice for d in found]
    merged = merge_slice_detections(detections, cfg.merge_radius, cfg.merge_slices)
    out = []
    for vx, vy, z, s in merged:
        x, y, zw = voxel_to_world(volume, (vx, vy, z))
        out.append(Candidate(volume.uid, float(x), float(y), float(zw), min(max(s, 0.0), 1.0), "stage-1"))
    return out


def config_fields() -> list[str]:
    return [f.name for f in fields(DetectorConfig)]
