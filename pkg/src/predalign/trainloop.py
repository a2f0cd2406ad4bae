"""Source pretraining, alternating adversarial adaptation and repeated experiments."""

from __future__ import annotations

import contextlib
import copy
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import alignkit as ak
from . import numkernel as nk
from .detector import DetectorConfig, DetectorModel, infer, ssd_loss
from .evalmetrics import METRIC_NAMES, MetricsReport, aggregate_stats, best_f1_operating_point
from .synthdomains import Scene

logger = logging.getLogger(__name__)

MODES = ("without_da", "plain_adv", "without_norm", "norm_d_and_p", "norm_p", "reference")
# alpha, a, CWN on the discriminator side, CWN on the detector side
MODE_DEFAULTS = {
    "without_da": dict(alpha=0.0, a=(1.0, 1.0)),
    "plain_adv": dict(alpha=0.0, a=(1.0, 1.0)),
    "without_norm": dict(alpha=1.0, a=(1.0, 1.0)),
    "norm_d_and_p": dict(alpha=0.1, a=(1.0, 1.0)),
    "norm_p": dict(alpha=0.1, a=(3.0, 1.0)),  # 1.0 at full scale, see FULL_SCALE_ALPHA
    "reference": dict(alpha=0.0, a=(1.0, 1.0)),
}
FULL_SCALE_ALPHA = {"without_norm": 1.0, "norm_d_and_p": 0.1, "norm_p": 1.0}
PRED_MODES = ("without_norm", "norm_d_and_p", "norm_p")
FEATURE_MODES = ("plain_adv",) + PRED_MODES
FULL_SCALE_PRETRAIN = dict(pretrain_iterations=40000, pretrain_milestones=(28000, 35000), source_batch=32, target_batch=32)
FULL_SCALE_DA_ITERATIONS = {"plain_adv": 15000, "without_norm": 15000, "norm_d_and_p": 10000, "norm_p": 10000}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "norm_p"
    pretrain_iterations: int = 1500
    pretrain_milestones: tuple[int, ...] = (1050, 1313)
    da_iterations: int = 600
    da_milestones: tuple[int, ...] = (420, 525)
    lr: float = 1e-2
    da_lr: float = 3e-3
    disc_lr: float = 1e-2
    momentum: float = 0.9
    source_batch: int = 8
    target_batch: int = 8
    alpha: float | None = None
    a: tuple[float, ...] | None = None
    seed: int = 0
    augment: bool = True
    softmax_vectors: bool = True
    separate_heads: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.alpha is None:
            self.alpha = MODE_DEFAULTS[self.mode]["alpha"]
        if self.a is None:
            self.a = MODE_DEFAULTS[self.mode]["a"]
        self.a = tuple(float(v) for v in self.a)
        self.pretrain_milestones = tuple(int(v) for v in self.pretrain_milestones)
        self.da_milestones = tuple(int(v) for v in self.da_milestones)
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.source_batch < 1 or self.target_batch < 1:
            raise ValueError("batch counts must be at least 1")
        if any(v <= 0 for v in self.a):
            raise ValueError("class weight hyperparameters must be positive")

    def for_mode(self, mode: str, **overrides) -> "TrainConfig":
        """Same settings under another mode; alpha and a revert to that mode's defaults unless given."""
        overrides.setdefault("alpha", None)
        overrides.setdefault("a", None)
        return replace(self, mode=mode, **overrides)

    @property
    def uses_features(self) -> bool:
        return self.mode in FEATURE_MODES

    @property
    def uses_predictions(self) -> bool:
        return self.mode in PRED_MODES

    @property
    def cwn_discriminator(self) -> bool:
        return self.mode == "norm_d_and_p"

    @property
    def cwn_detector(self) -> bool:
        return self.mode in ("norm_d_and_p", "norm_p")


@dataclass
class Datasets:
    source_train: list[Scene]
    target_train: list[Scene]
    target_test: list[Scene]
    target_labels: list[Scene] = field(default_factory=list)


@dataclass
class RunResult:
    mode: str
    seed: int
    metrics: MetricsReport
    checkpoint: str | None = None


@dataclass
class ExperimentStats:
    mode: str
    avr: dict[str, float]
    stderr: dict[str, float]
    runs: int


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


class BatchSampler:
    """Uniform minibatches, optionally from the 4x rotation-augmented set.

    Drawing an index in ``[0, 4 * n)`` and rotating on the fly is the same as
    sampling from the augmented dataset without materialising it.
    """

    def __init__(self, scenes: list[Scene], batch: int, rng: np.random.Generator, augment: bool, dtype=np.float32):
        if not scenes:
            raise ValueError("cannot sample from an empty dataset")
        self.images = np.stack([sc.image for sc in scenes]).astype(dtype)
        self.gts = [sc.training_boxes for sc in scenes]
        self.side = self.images.shape[-1]
        self.batch, self.rng, self.augment = batch, rng, augment

    def draw(self):
        n = len(self.images)
        idx = self.rng.integers(0, 4 * n if self.augment else n, size=self.batch)
        images, gts = [], []
        for k in idx:
            i, quarter = int(k % n), int(k // n)
            images.append(np.rot90(self.images[i], quarter, axes=(1, 2)))
            gt = self.gts[i]
            if gt is not None:
                boxes = gt[0]
                for _ in range(quarter):
                    x1, y1, x2, y2 = boxes.T
                    boxes = np.stack([y1, self.side - x2, y2, self.side - x1], axis=1)
                gt = (boxes.reshape(-1, 4), gt[1])
            gts.append(gt)
        return np.ascontiguousarray(np.stack(images)), gts


def _rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at {what}")


@contextlib.contextmanager
def _diverges_at(what: str):
    """Non-finite activations inside a step surface as :class:`TrainingDiverged`."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except nk.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite values at {what}: {exc}") from None


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def new_model(config: TrainConfig, seed: int | None = None) -> DetectorModel:
    seed = config.seed if seed is None else seed
    init_seed = int(np.random.SeedSequence([seed, 0]).generate_state(1)[0])
    return DetectorModel(DetectorConfig(separate_heads=config.separate_heads), seed=init_seed)


def lr_at(base: float, iteration: int, milestones) -> float:
    return base * 0.1 ** sum(iteration >= m for m in milestones)


def pretrain_source(config: TrainConfig, source: list[Scene], model: DetectorModel | None = None,
                    extra: list[Scene] | None = None) -> DetectorModel:
    """Minimise the detection loss on labelled source scenes with momentum SGD.

    ``extra`` scenes (labelled target data for the reference model) are
    sampled as a second half-batch.
    """
    model = model or new_model(config)
    rng_src, rng_extra = _rngs(int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0]), 2)
    sampler = BatchSampler(source, config.source_batch, rng_src, config.augment, model.dtype)
    extra_sampler = BatchSampler(extra, config.target_batch, rng_extra, config.augment, model.dtype) if extra else None
    opt = nk.SGD(model.parameters(), config.lr, config.momentum)
    for it in range(config.pretrain_iterations):
        opt.lr = lr_at(config.lr, it, config.pretrain_milestones)
        images, gts = sampler.draw()
        if extra_sampler is not None:
            more, more_gts = extra_sampler.draw()
            images, gts = np.concatenate([images, more]), gts + more_gts
        with _diverges_at(f"pretraining iteration {it}"):
            _, loc, conf = model(images)
            loss = ssd_loss(loc, conf, gts, model.defaults)
            _check_finite(loss.item(), f"pretraining iteration {it}")
            opt.zero_grad()
            nk.backward(loss)
            opt.step()
        if it % 250 == 0:
            logger.debug("pretrain it=%d loss=%.4f", it, loss.item())
    return model


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


@dataclass
class Discriminators:
    feature: ak.FeatureDiscriminator
    prediction: ak.PredictionDiscriminator

    def parameters(self) -> list[nk.Tensor]:
        return self.feature.parameters() + self.prediction.parameters()

    def checksum(self) -> str:
        return self.feature.checksum() + self.prediction.checksum()


def new_discriminators(model: DetectorModel, seed: int) -> Discriminators:
    s_f, s_p = np.random.SeedSequence([seed, 2]).generate_state(2)
    return Discriminators(
        ak.FeatureDiscriminator(model.config.channels[-1], seed=int(s_f), dtype=model.dtype),
        ak.PredictionDiscriminator(4 + model.num_classes, seed=int(s_p), dtype=model.dtype),
    )


@dataclass
class _Outputs:
    feat: nk.Tensor
    loc: nk.Tensor
    conf: nk.Tensor


def _forward(model: DetectorModel, images, domain: str) -> _Outputs:
    return _Outputs(*model(images, domain))


def _cwn(conf: nk.Tensor, a) -> np.ndarray:
    probs = nk.softmax(conf.detach()).data
    return ak.class_weight_normalization(probs, a).weights


def da_step_discriminators(model: DetectorModel, discs: Discriminators, source_images, target_images,
                           config: TrainConfig, opt: nk.SGD, outputs=None) -> float:
    """One update of D_f (and D_p) against ``L_feat_dis + L_pred_dis``; the detector is read only."""
    if outputs is None:
        with nk.no_grad():
            outputs = (_forward(model, source_images, "source"), _forward(model, target_images, "target"))
    src, tgt = outputs
    loss = ak.discriminator_loss(discs.feature, src.feat, tgt.feat)
    if config.uses_predictions:
        vs = ak.build_prediction_vectors(src.loc.detach(), src.conf.detach(), config.softmax_vectors)
        vt = ak.build_prediction_vectors(tgt.loc.detach(), tgt.conf.detach(), config.softmax_vectors)
        if config.cwn_discriminator:
            ws, wt = _cwn(src.conf, config.a), _cwn(tgt.conf, config.a)
            loss = loss + ak.discriminator_loss(discs.prediction, vs, vt, ws, wt)
        else:
            loss = loss + ak.discriminator_loss(discs.prediction, vs, vt)
    params = discs.feature.parameters() + (discs.prediction.parameters() if config.uses_predictions else [])
    opt.zero_grad()
    nk.backward(loss, params)
    opt.step()
    return loss.item()


def da_step_model(model: DetectorModel, discs: Discriminators, source_images, source_gts, target_images,
                  config: TrainConfig, opt: nk.SGD, target_gts=None, outputs=None) -> float:
    """One update of extractor and head against ``L_source + L_feat_ext + alpha L_pred_det``.

    In ``reference`` mode ``target_gts`` are labelled target boxes and the
    objective is the detection loss over both halves of the batch.
    """
    if outputs is None:
        outputs = (_forward(model, source_images, "source"), _forward(model, target_images, "target"))
    src, tgt = outputs
    if config.mode == "reference":
        if target_gts is None:
            raise ValueError("reference mode needs labelled target scenes")
        loss = ssd_loss(nk.concat([src.loc, tgt.loc]), nk.concat([src.conf, tgt.conf]),
                        list(source_gts) + list(target_gts), model.defaults)
    else:
        loss = ssd_loss(src.loc, src.conf, source_gts, model.defaults)
    if config.uses_features:
        loss = loss + ak.generator_loss(discs.feature, tgt.feat)
    if config.uses_predictions and config.alpha > 0:
        vt = ak.build_prediction_vectors(tgt.loc, tgt.conf, config.softmax_vectors)
        wt = _cwn(tgt.conf, config.a) if config.cwn_detector else None
        loss = loss + ak.generator_loss(discs.prediction, vt, wt) * config.alpha
    opt.zero_grad()
    nk.backward(loss, model.parameters())
    opt.step()
    return loss.item()


def adapt(model: DetectorModel, config: TrainConfig, datasets: Datasets, check_purity: bool = False,
          history: list | None = None) -> DetectorModel:
    """Alternate one discriminator step and one detector step per iteration.

    Returns a new model; the input model is left untouched. ``without_da``
    returns an unchanged copy. With ``check_purity`` each step verifies that
    the parameters it must not touch keep their checksum.
    """
    model = copy.deepcopy(model)
    if config.mode == "without_da":
        return model
    rng_s, rng_t = _rngs(int(np.random.SeedSequence([config.seed, 3]).generate_state(1)[0]), 2)
    target_pool = datasets.target_labels if config.mode == "reference" else datasets.target_train
    src_sampler = BatchSampler(datasets.source_train, config.source_batch, rng_s, config.augment, model.dtype)
    tgt_sampler = BatchSampler(target_pool, config.target_batch, rng_t, config.augment, model.dtype)
    discs = new_discriminators(model, config.seed)
    model_opt = nk.SGD(model.parameters(), config.da_lr, config.momentum)
    disc_opt = nk.SGD(discs.parameters(), config.disc_lr, config.momentum)
    for it in range(config.da_iterations):
        model_opt.lr = lr_at(config.da_lr, it, config.da_milestones)
        disc_opt.lr = lr_at(config.disc_lr, it, config.da_milestones)
        s_img, s_gts = src_sampler.draw()
        t_img, t_gts = tgt_sampler.draw()
        with _diverges_at(f"adaptation iteration {it} ({config.mode})"):
            outputs = (_forward(model, s_img, "source"), _forward(model, t_img, "target"))
            if config.uses_features:
                before = model.checksum() if check_purity else None
                l1 = da_step_discriminators(model, discs, s_img, t_img, config, disc_opt, outputs)
                _check_finite(l1, f"adaptation iteration {it} ({config.mode}, discriminator step)")
                if check_purity and model.checksum() != before:
                    raise AssertionError(f"discriminator step changed detector parameters at iteration {it}")
            else:
                l1 = float("nan")
            before = discs.checksum() if check_purity else None
            l2 = da_step_model(model, discs, s_img, s_gts, t_img, config, model_opt, t_gts, outputs)
            _check_finite(l2, f"adaptation iteration {it} ({config.mode}, detector step)")
            if check_purity and discs.checksum() != before:
                raise AssertionError(f"detector step changed discriminator parameters at iteration {it}")
        if history is not None:
            history.append((l1, l2))
    return model


# ---------------------------------------------------------------------------
# evaluation and experiments
# ---------------------------------------------------------------------------


def evaluate(model: DetectorModel, scenes: list[Scene], conf_threshold: float = 0.01,
             nms_threshold: float = 0.5, iou_threshold: float = 0.5):
    """Best-F1 metrics on labelled test scenes; also returns the raw detections."""
    images = np.stack([sc.image for sc in scenes])
    dets = infer(model, images, conf_threshold, nms_threshold, domain="target")
    gts = [sc.boxes for sc in scenes]
    if not any(len(d) for d in dets):
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0.0, 1.0), dets
    return best_f1_operating_point(dets, gts, iou_threshold), dets


def _run_seed(args) -> list[RunResult]:
    config, datasets, modes, seed, eval_kwargs, checkpoint_dir = args
    base = replace(config, seed=seed)
    pretrained = pretrain_source(base, datasets.source_train, new_model(base))
    results = []
    for mode, overrides in modes:
        cfg = base.for_mode(mode, **overrides)
        model = adapt(pretrained, cfg, datasets)
        metrics, _ = evaluate(model, datasets.target_test, **eval_kwargs)
        ckpt = None
        if checkpoint_dir is not None:
            ckpt = str(Path(checkpoint_dir) / f"{mode}_seed{seed}.ckpt")
            save_checkpoint(model, ckpt)
        logger.info("mode=%s seed=%d AP=%.4f F1=%.4f", mode, seed, metrics.AP, metrics.F1)
        results.append(RunResult(mode, seed, metrics, ckpt))
    return results


def summarize(results: list[RunResult], modes) -> list[ExperimentStats]:
    stats = []
    for mode in modes:
        runs = [r for r in results if r.mode == mode]
        avr, err = {}, {}
        for name in METRIC_NAMES:
            avr[name], err[name] = aggregate_stats([getattr(r.metrics, name) for r in runs])
        stats.append(ExperimentStats(mode, avr, err, len(runs)))
    return stats


def run_experiment(config: TrainConfig, datasets: Datasets, repetitions: int, modes=None,
                   iou_threshold: float = 0.5, workers: int = 1, checkpoint_dir=None,
                   conf_threshold: float = 0.01, nms_threshold: float = 0.5):
    """Train and evaluate every mode ``repetitions`` times (seeds ``config.seed + i``).

    One source-pretrained model per seed is shared by all modes of that
    seed. ``modes`` is a list of names or ``(name, overrides)`` pairs.
    Returns ``(stats per mode, run results ordered by mode then seed)``.
    """
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    modes = [m if isinstance(m, tuple) else (m, {}) for m in (modes or [config.mode])]
    eval_kwargs = dict(conf_threshold=conf_threshold, nms_threshold=nms_threshold, iou_threshold=iou_threshold)
    jobs = [(config, datasets, modes, config.seed + i, eval_kwargs, checkpoint_dir) for i in range(repetitions)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_run_seed, jobs))
    else:
        per_seed = [_run_seed(j) for j in jobs]
    flat = [r for runs in per_seed for r in runs]
    names = [m for m, _ in modes]
    ordered = sorted(flat, key=lambda r: (names.index(r.mode), r.seed))
    return summarize(ordered, names), ordered


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PALN"
CHECKPOINT_VERSION = 1


def save_checkpoint(module: nk.Module, path) -> None:
    """Little-endian tensor dump; values stored as float32."""
    items = module.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, t in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(data):
                raise ValueError(f"{path}: truncated tensor {name}")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error:
        raise ValueError(f"{path}: truncated checkpoint at byte {pos}") from None
    return out


def load_checkpoint(model: nk.Module, path) -> nk.Module:
    model.load_state_dict(read_checkpoint(path))
    return model
