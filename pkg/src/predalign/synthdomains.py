"""Synthetic overhead scenes with a controllable source/target domain gap.

Vehicles are axis-aligned rectangles of roughly uniform colour placed on a
textured, noisy background. Every pixel and box is a pure function of
``(params, seed)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .detector import iou_matrix

ROLES = ("source_train", "target_train_unlabeled", "target_test", "target_labels")
UNLABELED_ROLES = ("target_train_unlabeled",)
ROLE_DOMAIN = {"source_train": "source", "target_train_unlabeled": "target",
               "target_test": "target", "target_labels": "target"}
# keeps scene seeds of different roles from colliding
ROLE_SEED_OFFSET = {"source_train": 0, "target_train_unlabeled": 1_000_000,
                    "target_test": 2_000_000, "target_labels": 3_000_000}
DESK_COUNTS = {"source_train": 512, "target_train_unlabeled": 256, "target_test": 64, "target_labels": 256}
FULL_SCALE_COUNTS = {"source_train": 6264, "target_train_unlabeled": 1408, "target_test": 20, "target_labels": 1564}
DEFAULT_SHIFT = 0.2


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainParams:
    image_side: int = 64
    background: tuple[float, float, float] = (0.35, 0.35, 0.35)
    texture_period: float = 6.0
    texture_amplitude: float = 0.05
    noise_sigma: float = 0.02
    vehicle_lo: tuple[float, float, float] = (0.75, 0.75, 0.75)
    vehicle_hi: tuple[float, float, float] = (0.95, 0.95, 0.95)
    size_range: tuple[float, float] = (7.0, 13.0)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    count_range: tuple[int, int] = (2, 6)

    def __post_init__(self):
        ranges = {
            "vehicle intensity": (self.vehicle_lo, self.vehicle_hi),
            "size_range": ((self.size_range[0],), (self.size_range[1],)),
            "aspect_range": ((self.aspect_range[0],), (self.aspect_range[1],)),
            "count_range": ((self.count_range[0],), (self.count_range[1],)),
        }
        for name, (lo, hi) in ranges.items():
            if any(a > b for a, b in zip(lo, hi)):
                raise ValueError(f"{name}: empty range")
        if self.size_range[0] <= 0 or self.aspect_range[0] <= 0 or self.count_range[0] < 0:
            raise ValueError("sizes and aspects must be positive, counts non-negative")
        if self.texture_period <= 0 or self.noise_sigma < 0:
            raise ValueError("texture period must be positive and noise non-negative")

    def interpolate(self, other: "DomainParams", t: float) -> "DomainParams":
        """Blend every numeric field: ``self + t * (other - self)``."""
        out = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name in ("image_side", "count_range"):
                out[f.name] = a if t == 0 else b
            elif isinstance(a, tuple):
                out[f.name] = tuple(float(x + t * (y - x)) for x, y in zip(a, b))
            else:
                out[f.name] = float(a + t * (b - a))
        return DomainParams(**out)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


SOURCE_PARAMS = DomainParams()
# brighter, coarser, noisier background with lower vehicle contrast
TARGET_PARAMS = DomainParams(
    background=(0.55, 0.55, 0.55),
    texture_period=16.0,
    texture_amplitude=0.08,
    noise_sigma=0.06,
    vehicle_lo=(0.72, 0.72, 0.72),
    vehicle_hi=(0.88, 0.88, 0.88),
)


def domain_pair(shift: float = DEFAULT_SHIFT, source: DomainParams = SOURCE_PARAMS,
                full_target: DomainParams = TARGET_PARAMS) -> tuple[DomainParams, DomainParams]:
    """Source params and a target moved ``shift`` of background brightness away.

    ``shift = 0`` returns two identical parameter sets. Every other field is
    scaled along with the background so the gap is a single knob.
    """
    gap = float(np.mean(full_target.background) - np.mean(source.background))
    return source, source.interpolate(full_target, shift / gap)


@dataclass
class Scene:
    image: np.ndarray  # [3, S, S] in [0, 1]
    boxes: np.ndarray  # [K, 4] xyxy, kept for audit even when unlabeled
    labels: np.ndarray  # [K]
    domain: str
    scene_id: int
    labeled: bool = True

    @property
    def training_boxes(self):
        """Ground truth visible to training code, ``None`` for unlabeled scenes."""
        return (self.boxes, self.labels) if self.labeled else None


def generate_scene(params: DomainParams, seed: int, domain: str = "source", scene_id: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    s = params.image_side
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    w = 2 * np.pi / params.texture_period
    texture = params.texture_amplitude * np.sin(w * xx + phase[0]) * np.sin(w * yy + phase[1])
    image = np.asarray(params.background, dtype=np.float64)[:, None, None] + texture[None]

    k = int(rng.integers(params.count_range[0], params.count_range[1] + 1))
    boxes: list[list[float]] = []
    attempts = 0
    while len(boxes) < k and attempts < 100 * k:
        attempts += 1
        size = rng.uniform(*params.size_range)
        aspect = np.exp(rng.uniform(np.log(params.aspect_range[0]), np.log(params.aspect_range[1])))
        bw = int(np.clip(round(size * np.sqrt(aspect)), 2, s))
        bh = int(np.clip(round(size / np.sqrt(aspect)), 2, s))
        x1 = int(rng.integers(0, s - bw + 1))
        y1 = int(rng.integers(0, s - bh + 1))
        cand = [x1, y1, x1 + bw, y1 + bh]
        if boxes and iou_matrix(np.array([cand]), np.array(boxes)).max() >= 0.1:
            continue
        boxes.append(cand)
        colour = rng.uniform(params.vehicle_lo, params.vehicle_hi)
        image[:, y1:y1 + bh, x1:x1 + bw] = colour[:, None, None]

    image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    box_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return Scene(np.clip(image, 0.0, 1.0), box_arr, np.ones(len(box_arr), dtype=np.int64), domain, scene_id)


@dataclass(frozen=True)
class DatasetSpec:
    role: str
    count: int
    seed: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown dataset role {self.role!r}")
        if self.count < 1:
            raise ValueError("dataset count must be at least 1")


def generate_dataset(spec: DatasetSpec, params: DomainParams) -> list[Scene]:
    domain = ROLE_DOMAIN[spec.role]
    labeled = spec.role not in UNLABELED_ROLES
    scenes = []
    for i in range(spec.count):
        sc = generate_scene(params, spec.seed + i, domain, scene_id=i)
        sc.labeled = labeled
        scenes.append(sc)
    return scenes


def rotate_augment(scene: Scene, angle: int) -> Scene:
    """Rotate image and boxes counter-clockwise by 90, 180 or 270 degrees."""
    if angle not in (90, 180, 270):
        raise ValueError(f"unsupported rotation {angle}; use 90, 180 or 270")
    s = scene.image.shape[-1]
    if scene.image.shape[-2] != s:
        raise ValueError("rotation needs a square image")
    image, boxes = scene.image, scene.boxes.copy()
    for _ in range(angle // 90):
        image = np.rot90(image, 1, axes=(1, 2))
        x1, y1, x2, y2 = boxes.T
        boxes = np.stack([y1, s - x2, y2, s - x1], axis=1)
    return replace(scene, image=np.ascontiguousarray(image), boxes=boxes.reshape(-1, 4))


def augment_rotations(scenes: list[Scene]) -> list[Scene]:
    """Originals followed by their 90/180/270 degree rotations (4x the count)."""
    out = list(scenes)
    for angle in (90, 180, 270):
        out.extend(rotate_augment(sc, angle) for sc in scenes)
    return out


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def _write_ppm(path: Path, image: np.ndarray) -> None:
    q = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    _, h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[int] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated header at byte {start}")
        tok = raw[start:pos]
        if not tokens:
            if tok != b"P6":
                raise DatasetFormatError(f"{path}: expected magic P6 at byte {start}")
            tokens.append(6)
            continue
        if not tok.isdigit():
            raise DatasetFormatError(f"{path}: bad header field {tok!r} at byte {start}")
        tokens.append(int(tok))
    _, w, h, maxval = tokens
    if maxval != 255:
        raise DatasetFormatError(f"{path}: maxval {maxval} unsupported at byte {pos}")
    pos += 1
    need = w * h * 3
    if len(raw) - pos != need:
        raise DatasetFormatError(f"{path}: expected {need} pixel bytes from byte {pos}, found {len(raw) - pos}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_dataset(scenes: list[Scene], directory) -> None:
    ids = [sc.scene_id for sc in scenes]
    if len(set(ids)) != len(ids):
        raise ValueError("scene ids must be unique within a dataset")
    root = Path(directory)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    records = []
    for sc in scenes:
        name = f"scenes/{sc.scene_id:06d}.ppm"
        _write_ppm(root / name, sc.image)
        boxes = [[*(float(v) for v in b), int(l)] for b, l in zip(sc.boxes, sc.labels)]
        rec = {"id": int(sc.scene_id), "image": name, "domain": sc.domain, "boxes": boxes if sc.labeled else None}
        if not sc.labeled:
            rec["audit_boxes"] = boxes  # never read by training code
        records.append(rec)
    with open(root / "annotations.json", "w") as fh:
        json.dump(records, fh, indent=1)


def load_dataset(directory) -> list[Scene]:
    root = Path(directory)
    ann = root / "annotations.json"
    if not ann.exists():
        if not root.exists() or not any(root.iterdir()):
            return []
        raise DatasetFormatError(f"{ann}: missing")
    text = ann.read_text()
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{ann}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
    if not isinstance(records, list):
        raise DatasetFormatError(f"{ann}: top level must be a list (byte 0)")
    scenes = []
    for rec in records:
        try:
            sid, image_name, domain, boxes = rec["id"], rec["image"], rec["domain"], rec["boxes"]
        except (KeyError, TypeError):
            raise DatasetFormatError(f"{ann}: malformed record {rec!r}") from None
        if domain not in ("source", "target"):
            raise DatasetFormatError(f"{ann}: record {sid} has unknown domain {domain!r}")
        path = root / image_name
        if not path.exists():
            raise DatasetFormatError(f"{ann}: record {sid} references missing image file {image_name}")
        image = _read_ppm(path)
        labeled = boxes is not None
        if not labeled:
            boxes = rec.get("audit_boxes") or []
        try:
            raw = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
        except ValueError:
            raise DatasetFormatError(f"{ann}: record {sid} has malformed boxes {boxes!r}") from None
        arr, labels = raw[:, :4], raw[:, 4].astype(np.int64)
        scenes.append(Scene(image, arr, labels, domain, int(sid), labeled))
    return scenes


def stack_images(scenes: list[Scene], dtype=np.float32) -> np.ndarray:
    return np.stack([sc.image for sc in scenes]).astype(dtype)
