"""Single-feature-map SSD-style detector.

Boxes are ``xyxy`` (corner) arrays unless a name says ``cxcywh``. Per-box
outputs are laid out in raster order over feature cells with the box
templates innermost, matching :func:`generate_default_boxes`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

DESK_TEMPLATES = ((8.0, 1.0), (14.0, 1.0))
FULL_SCALE_BOX_SIZES = (24, 30, 90, 150, 210, 270, 330)
LOG_RATIO_CLAMP = 10.0


@dataclass
class DefaultBoxSet:
    image_side: int
    feature_dims: tuple[int, int]
    templates: tuple[tuple[float, float], ...]
    boxes: np.ndarray  # [B, 4] cxcywh pixels

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def num_templates(self) -> int:
        return len(self.templates)

    @property
    def xyxy(self) -> np.ndarray:
        return cxcywh_to_xyxy(self.boxes)


def generate_default_boxes(image_side: int, feature_dims: tuple[int, int],
                           templates) -> DefaultBoxSet:
    """Default boxes centred on every feature cell, one per ``(size, aspect)`` template.

    A template of size ``s`` and aspect ``a`` (w/h) gives ``w = s*sqrt(a)``
    and ``h = s/sqrt(a)``.
    """
    hf, wf = feature_dims
    templates = tuple((float(s), float(a)) for s, a in templates)
    if image_side <= 0 or hf <= 0 or wf <= 0 or not templates:
        raise ValueError("image side, feature dims and templates must be positive/non-empty")
    if any(s <= 0 or a <= 0 for s, a in templates):
        raise ValueError("template sizes and aspects must be positive")
    ii, jj = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    cx = (jj.reshape(-1) + 0.5) * image_side / wf
    cy = (ii.reshape(-1) + 0.5) * image_side / hf
    sizes = np.array([[s * np.sqrt(a), s / np.sqrt(a)] for s, a in templates])
    a = len(templates)
    boxes = np.empty((hf * wf, a, 4))
    boxes[:, :, 0] = cx[:, None]
    boxes[:, :, 1] = cy[:, None]
    boxes[:, :, 2:] = sizes[None, :, :]
    return DefaultBoxSet(image_side, (hf, wf), templates, boxes.reshape(-1, 4))


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[A, 4]`` and ``[B, 4]`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def encode_box(gt: np.ndarray, default: np.ndarray) -> np.ndarray:
    """Offsets of cxcywh ``gt`` relative to cxcywh ``default`` (no variance scaling)."""
    gt = np.asarray(gt, dtype=np.float64)
    d = np.asarray(default, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth boxes need positive width and height")
    return np.concatenate([
        (gt[..., :2] - d[..., :2]) / d[..., 2:],
        np.log(gt[..., 2:] / d[..., 2:]),
    ], axis=-1)


def decode_box(offsets: np.ndarray, default: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_box`; log-ratios are clamped to +-10 before exp."""
    o = np.asarray(offsets, dtype=np.float64)
    d = np.asarray(default, dtype=np.float64)
    return np.concatenate([
        d[..., :2] + o[..., :2] * d[..., 2:],
        d[..., 2:] * np.exp(np.clip(o[..., 2:], -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)),
    ], axis=-1)


def match_gt_to_defaults(gts: np.ndarray, defaults: DefaultBoxSet | np.ndarray,
                         threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Assign defaults to ground truths.

    Returns ``(assignment, positive)`` where ``assignment[d]`` is a gt index or
    -1 for background. Each gt first claims a default greedily by highest
    remaining IoU (ties: lower gt, then lower default); any other default
    whose best IoU reaches ``threshold`` goes to its best gt.
    """
    dxy = defaults.xyxy if isinstance(defaults, DefaultBoxSet) else np.asarray(defaults)
    n_def = len(dxy)
    assignment = np.full(n_def, -1, dtype=np.int64)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(gts) == 0:
        return assignment, np.zeros(n_def, dtype=bool)
    ious = iou_matrix(gts, dxy)
    best_gt = ious.argmax(axis=0)
    best_iou = ious[best_gt, np.arange(n_def)]
    above = best_iou >= threshold
    assignment[above] = best_gt[above]

    work = ious.copy()
    for _ in range(min(len(gts), n_def)):
        g, d = np.unravel_index(np.argmax(work), work.shape)
        assignment[d] = g
        work[g, :] = -1.0
        work[:, d] = -1.0
    return assignment, assignment >= 0


def hard_negative_mining(conf_loss: np.ndarray, positive: np.ndarray, ratio: int = 3) -> np.ndarray:
    """Mask of the ``min(ratio * n_pos, available)`` negatives with largest loss."""
    conf_loss = np.asarray(conf_loss)
    positive = np.asarray(positive, dtype=bool)
    n_neg = min(ratio * int(positive.sum()), int((~positive).sum()))
    mask = np.zeros_like(positive)
    if n_neg == 0:
        return mask
    ranked = np.where(positive, -np.inf, conf_loss)
    order = np.argsort(-ranked, kind="stable")
    mask[order[:n_neg]] = True
    return mask


@dataclass
class SSDTargets:
    loc: np.ndarray  # [N, B, 4] encoded offsets (zeros off-positive)
    labels: np.ndarray  # [N, B]
    positive: np.ndarray  # [N, B]
    negative: np.ndarray  # [N, B]

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def build_targets(probs: np.ndarray, gts: list, defaults: DefaultBoxSet,
                  threshold: float = 0.5, neg_ratio: int = 3) -> SSDTargets:
    """Match every image's gts and mine negatives from current background probabilities."""
    n, b = probs.shape[:2]
    loc = np.zeros((n, b, 4))
    labels = np.zeros((n, b), dtype=np.int64)
    pos = np.zeros((n, b), dtype=bool)
    neg = np.zeros((n, b), dtype=bool)
    for i, (boxes, cls) in enumerate(gts):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        assign, p = match_gt_to_defaults(boxes, defaults, threshold)
        pos[i] = p
        if p.any():
            g = assign[p]
            labels[i, p] = np.asarray(cls, dtype=np.int64)[g]
            loc[i, p] = encode_box(xyxy_to_cxcywh(boxes[g]), defaults.boxes[p])
        bg_loss = -np.log(np.maximum(probs[i, :, 0], nk.PROB_EPS))
        neg[i] = hard_negative_mining(bg_loss, p, neg_ratio)
    return SSDTargets(loc, labels, pos, neg)


def ssd_loss(offsets: Tensor, logits: Tensor, gts: list, defaults: DefaultBoxSet,
             threshold: float = 0.5, neg_ratio: int = 3) -> Tensor:
    """Localisation plus confidence loss normalised by the positive count.

    ``offsets`` is ``[N, B, 4]``, ``logits`` ``[N, B, C]``; ``gts`` holds one
    ``(boxes_xyxy, labels)`` pair per image. Zero when no default is positive.
    """
    probs = nk.softmax(logits)
    t = build_targets(probs.data, gts, defaults, threshold, neg_ratio)
    n_pos = t.num_positive
    if n_pos == 0:
        return offsets.sum() * 0.0 + logits.sum() * 0.0
    dt = offsets.dtype
    loc_loss = nk.smooth_l1(offsets - Tensor(t.loc.astype(dt)), t.positive[..., None].astype(dt))
    conf_loss = nk.cross_entropy(probs, t.labels, (t.positive | t.negative).astype(dt))
    return (loc_loss + conf_loss) * (1.0 / n_pos)


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    label: int


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    keep: list[int] = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > threshold
    return np.array(keep, dtype=np.int64)


@dataclass
class DetectorConfig:
    image_side: int = 64
    channels: tuple[int, ...] = (16, 32, 32)
    templates: tuple[tuple[float, float], ...] = DESK_TEMPLATES
    num_classes: int = 2
    separate_heads: bool = False


class DetectorModel(nk.Module):
    """Feature extractor of stride-2 3x3 conv blocks plus a 3x3 conv head.

    The shallow (final) feature map is both the input of the head and the
    map used for feature alignment.
    """

    def __init__(self, config: DetectorConfig | None = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config = config or DetectorConfig()
        rng = np.random.default_rng(seed)
        c_in = 3
        for i, c_out in enumerate(config.channels):
            self._conv(f"backbone.{i}", c_in, c_out, 3, rng, dtype)
            c_in = c_out
        side = config.image_side
        for _ in config.channels:
            side = (side + 2 - 3) // 2 + 1
        self.feature_dims = (side, side)
        self.defaults = generate_default_boxes(config.image_side, self.feature_dims, config.templates)
        a = len(config.templates)
        heads = ("head", "head_target") if config.separate_heads else ("head",)
        for h in heads:
            self._conv(f"{h}.loc", c_in, 4 * a, 3, rng, dtype)
            self._conv(f"{h}.conf", c_in, config.num_classes * a, 3, rng, dtype)
        self.dtype = np.dtype(dtype)

    def _conv(self, name, c_in, c_out, k, rng, dtype):
        self._param(f"{name}.weight", nk.glorot_uniform((c_out, c_in, k, k), c_in * k * k, c_out * k * k, rng, dtype))
        self._param(f"{name}.bias", Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def features(self, images) -> Tensor:
        x = Tensor(np.asarray(images, dtype=self.dtype)) if not isinstance(images, Tensor) else images
        s = self.config.image_side
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (s, s):
            raise ValueError(f"expected images of shape [N, 3, {s}, {s}], got {x.shape}")
        for i in range(len(self.config.channels)):
            x = nk.relu(nk.conv2d(x, self.params[f"backbone.{i}.weight"], self.params[f"backbone.{i}.bias"],
                                  stride=2, padding=1))
        return x

    def head(self, feat: Tensor, domain: str = "source") -> tuple[Tensor, Tensor]:
        h = "head_target" if (domain == "target" and self.config.separate_heads) else "head"
        n = feat.shape[0]
        a, c = len(self.config.templates), self.config.num_classes
        loc = nk.conv2d(feat, self.params[f"{h}.loc.weight"], self.params[f"{h}.loc.bias"], padding=1)
        conf = nk.conv2d(feat, self.params[f"{h}.conf.weight"], self.params[f"{h}.conf.bias"], padding=1)
        # [N, A*k, H, W] -> [N, H, W, A*k] -> [N, H*W*A, k]
        loc = loc.transpose(0, 2, 3, 1).reshape(n, -1, 4)
        conf = conf.transpose(0, 2, 3, 1).reshape(n, -1, c)
        return loc, conf

    def forward(self, images, domain: str = "source") -> tuple[Tensor, Tensor, Tensor]:
        feat = self.features(images)
        loc, conf = self.head(feat, domain)
        return feat, loc, conf

    __call__ = forward


def forward_detect(model: DetectorModel, image, domain: str = "source"):
    """Feature map, per-box offsets and per-box confidence logits for one image or a batch."""
    arr = np.asarray(image)
    single = arr.ndim == 3
    feat, loc, conf = model.forward(arr[None] if single else arr, domain)
    if single:
        return feat.data[0], loc.data[0], conf.data[0]
    return feat, loc, conf


def detections_from_outputs(offsets: np.ndarray, logits: np.ndarray, defaults: DefaultBoxSet,
                            conf_threshold: float = 0.01, nms_threshold: float = 0.5) -> list[Detection]:
    """Decode one image's raw head outputs into NMS-filtered detections."""
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= nms_threshold <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    side = defaults.image_side
    boxes = np.clip(cxcywh_to_xyxy(decode_box(offsets, defaults.boxes)), 0, side)
    out: list[Detection] = []
    for c in range(1, probs.shape[1]):
        sel = np.flatnonzero(probs[:, c] >= conf_threshold)
        if sel.size == 0:
            continue
        keep = sel[nms(boxes[sel], probs[sel, c], nms_threshold)]
        out.extend(Detection(tuple(float(v) for v in boxes[k]), float(probs[k, c]), c) for k in keep)
    out.sort(key=lambda d: -d.score)
    return out


def infer(model: DetectorModel, images, conf_threshold: float = 0.01,
          nms_threshold: float = 0.5, domain: str = "target", batch_size: int = 32):
    """Detections for one image ``[3, S, S]`` or a list per image for a batch."""
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    results = []
    with nk.no_grad():
        for start in range(0, len(arr), batch_size):
            _, loc, conf = model.forward(arr[start:start + batch_size], domain)
            for o, l in zip(loc.data, conf.data):
                results.append(detections_from_outputs(o.astype(np.float64), l.astype(np.float64),
                                                       model.defaults, conf_threshold, nms_threshold))
    return results[0] if single else results
