"""Three-stage training orchestration: pre-train, self-train, fine-tune.

Pre-training fits the backbone to the labeled data with an L1 coordinate
loss.  Self-training then alternates, per optimizer step, a labeled batch
(L1 against ground truth) with an unlabeled batch whose decoded predictions
are regulated by the shape model and trained with the region attention loss.
Fine-tuning revisits the labeled data with the region attention loss and
keeps the checkpoint with the best held-out MRE.

All randomness derives from a single seed through named substreams keyed by
(stage, epoch, step), so runs are bitwise reproducible and resumable from any
epoch boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .backbone import (AdamState, BackboneConfig, BackboneParams, adam_step,
                       backward_batch, forward, forward_batch, init_adam,
                       init_params)
from .errors import AllSamplesSkipped
from .geometry import LandmarkSet
from .heatmap import decode_batch, l1_coordinate_loss, \
    region_attention_loss, sample_offsets
from .regulation import Branch, PseudoLabel, regulate
from .shape_model import ShapeModel, build_shape_model

DEFAULT_OUTLIER_RADII = (2.0, 2.5, 3.0, 4.0)

_STREAMS = {"data": 0, "init": 1, "offsets": 2, "augment": 3}
_STAGES = {"pretrain": 0, "selftrain": 1, "finetune": 2}


class Ablation(str, Enum):
    FULL = "full"
    NO_SR = "no-sr"
    NO_RAL = "no-ral"
    NO_SR_NO_RAL = "no-sr-no-ral"
    SUPERVISED_ONLY = "supervised-only"

    @property
    def uses_shape_regulation(self) -> bool:
        return self in (Ablation.FULL, Ablation.NO_RAL)

    @property
    def uses_region_attention(self) -> bool:
        return self in (Ablation.FULL, Ablation.NO_SR)


@dataclass(frozen=True)
class AugmentConfig:
    max_translate: float = 0.04
    max_rotate_rad: float = 0.10
    noise_std: float = 0.03

    def __post_init__(self):
        if min(self.max_translate, self.max_rotate_rad, self.noise_std) < 0:
            raise ValueError("augmentation bounds must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_stage: int = 200
    z_mm: float = 2.0
    variance_target: float = 0.9999
    offset_mean: float = 0.01
    offset_std: float = 0.005
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ablation: Ablation = Ablation.FULL
    batch_size: int = 4
    finetune_loss: str = "region-attention"  # or "l1" (plain objective)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    snapshot_every: int = 5

    def __post_init__(self):
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.finetune_loss not in ("region-attention", "l1"):
            raise ValueError("finetune_loss must be 'region-attention' or 'l1'")
        if not self.z_mm > 0:
            raise ValueError("z_mm must be positive")
        if isinstance(self.ablation, str) and not isinstance(self.ablation, Ablation):
            object.__setattr__(self, "ablation", Ablation(self.ablation))


@dataclass(frozen=True)
class Dataset:
    """labeled: (image, LandmarkSet) pairs; unlabeled: images only;
    held_out: labeled test pairs.  unlabeled_truth is withheld ground truth
    used exclusively for diagnostics, never for training."""

    labeled: list
    unlabeled: list
    held_out: list
    unlabeled_truth: list | None = None

    def __post_init__(self):
        if len(self.labeled) < 2:
            raise ValueError("need at least 2 labeled samples")
        counts = {ls.n_landmarks for _, ls in self.labeled}
        counts |= {ls.n_landmarks for _, ls in self.held_out}
        if self.unlabeled_truth is not None:
            if len(self.unlabeled_truth) != len(self.unlabeled):
                raise ValueError("unlabeled_truth must match unlabeled count")
            counts |= {ls.n_landmarks for ls in self.unlabeled_truth}
        if len(counts) != 1:
            raise ValueError("landmark counts differ across samples")

    @property
    def n_landmarks(self) -> int:
        return self.labeled[0][1].n_landmarks

    @property
    def spacing_mm(self) -> float:
        return self.labeled[0][1].spacing_mm


@dataclass
class TrainState:
    """Backbone parameters plus training position.

    stage is the last completed milestone ("init", "pretrained",
    "selftrained", "finetuned"); epoch counts completed epochs within the
    stage currently in progress.
    """

    backbone: BackboneConfig
    params: BackboneParams
    adam: AdamState
    stage: str
    seed: int
    epoch: int = 0


@dataclass(frozen=True)
class Metrics:
    mre_mm: float
    sd_mm: float
    outliers: dict  # radius_mm -> (count, percent)
    n_predictions: int

    def count_over(self, radius_mm: float) -> int:
        return self.outliers[radius_mm][0]


def substream(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Named RNG substream; every random draw in a run is keyed this way."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed,
                               spawn_key=(_STREAMS[stream], *keys)))


def init_state(data: Dataset, cfg: TrainConfig,
               backbone: BackboneConfig | None = None) -> TrainState:
    if backbone is None:
        image = np.asarray(data.labeled[0][0])
        backbone = BackboneConfig(n_landmarks=data.n_landmarks,
                                  image_size=image.shape[0])
    params = init_params(backbone, substream(cfg.seed, "init"))
    adam = init_adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.eps)
    return TrainState(backbone=backbone, params=params, adam=adam,
                      stage="init", seed=cfg.seed, epoch=0)


_GRID_CACHE: dict = {}


def _pixel_grid(size: int):
    cached = _GRID_CACHE.get(size)
    if cached is None:
        axis = (np.arange(size) + 0.5) / size
        gx, gy = np.meshgrid(axis, axis)
        gx.setflags(write=False)
        gy.setflags(write=False)
        cached = _GRID_CACHE[size] = (gx, gy)
    return cached


def apply_pose_augmentation(image: np.ndarray, landmarks: LandmarkSet | None,
                            theta: float, trans: np.ndarray
                            ) -> tuple[np.ndarray, LandmarkSet | None]:
    """Rotate by theta about the image center, then translate by trans.

    The image is resampled bilinearly (out-of-frame pixels become 0);
    landmark coordinates get the exact same map p -> R(p - c) + c + t.
    """
    image = np.asarray(image, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    c, s = math.cos(theta), math.sin(theta)

    if theta == 0.0 and not trans.any():
        out = image.copy()
    else:
        size = image.shape[0]
        gx, gy = _pixel_grid(size)
        # inverse map: remove translation, rotate by -theta about the center
        px = gx - 0.5 - trans[0]
        py = gy - 0.5 - trans[1]
        sx = (c * px + s * py + 0.5) * size - 0.5
        sy = (-s * px + c * py + 0.5) * size - 0.5
        x0 = np.floor(sx).astype(int)
        y0 = np.floor(sy).astype(int)
        fx = sx - x0
        fy = sy - y0

        def at(yy, xx):
            inside = (yy >= 0) & (yy < size) & (xx >= 0) & (xx < size)
            vals = np.zeros_like(fx)
            vals[inside] = image[yy[inside], xx[inside]]
            return vals

        out = ((1 - fy) * (1 - fx) * at(y0, x0)
               + (1 - fy) * fx * at(y0, x0 + 1)
               + fy * (1 - fx) * at(y0 + 1, x0)
               + fy * fx * at(y0 + 1, x0 + 1))

    new_landmarks = None
    if landmarks is not None:
        rot = np.array([[c, -s], [s, c]])
        coords = (landmarks.coords - 0.5) @ rot.T + 0.5 + trans
        new_landmarks = landmarks.with_coords(coords)
    return out, new_landmarks


def augment(image: np.ndarray, landmarks: LandmarkSet | None,
            cfg: AugmentConfig, rng: np.random.Generator
            ) -> tuple[np.ndarray, LandmarkSet | None]:
    """Random rotation about the image center, then translation, then pixel
    noise; landmark coordinates transformed consistently when present."""
    theta = float(rng.uniform(-cfg.max_rotate_rad, cfg.max_rotate_rad))
    trans = rng.uniform(-cfg.max_translate, cfg.max_translate, 2)
    out, new_landmarks = apply_pose_augmentation(image, landmarks, theta, trans)
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, out.shape)
    return out, new_landmarks


def predict_coords(backbone: BackboneConfig, params: BackboneParams,
                   image: np.ndarray) -> np.ndarray:
    """Decoded (n, 2) landmark coordinates for one image."""
    heatmaps = forward(backbone, params, image)
    return decode_batch(heatmaps)


def metrics_from_errors(errors_mm: np.ndarray,
                        radii=DEFAULT_OUTLIER_RADII) -> Metrics:
    """MRE / SD / outlier table from a flat array of radial errors in mm.

    SD is the population standard deviation; an outlier at radius r is a
    prediction with error strictly greater than r.
    """
    errors_mm = np.asarray(errors_mm, dtype=np.float64).reshape(-1)
    if errors_mm.size == 0:
        raise ValueError("no predictions to evaluate")
    outliers = {}
    for r in radii:
        count = int(np.sum(errors_mm > r))
        outliers[float(r)] = (count, 100.0 * count / errors_mm.size)
    return Metrics(
        mre_mm=float(np.mean(errors_mm)),
        sd_mm=float(np.std(errors_mm)),
        outliers=outliers,
        n_predictions=int(errors_mm.size),
    )


def evaluate(state: TrainState, test: list,
             radii=DEFAULT_OUTLIER_RADII) -> Metrics:
    """Radial-error metrics of the current parameters on labeled samples."""
    if not test:
        raise ValueError("test set must be non-empty")
    images = np.array([np.asarray(img) for img, _ in test])
    preds = decode_batch(forward_batch(state.backbone, state.params, images))
    errors = []
    for pred, (_, truth) in zip(preds, test):
        err = np.linalg.norm(pred - truth.coords, axis=1) * truth.spacing_mm
        errors.append(err)
    return metrics_from_errors(np.concatenate(errors), radii)


def _held_out_mre(state: TrainState, data: Dataset) -> float | None:
    if not data.held_out:
        return None
    return evaluate(state, data.held_out).mre_mm


def _labeled_batch_terms(state: TrainState, batch: list
                         ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean L1 coordinate loss over a labeled batch and the per-sample
    upstream gradients already divided by the batch size."""
    images = np.array([img for img, _ in batch])
    heatmaps = forward_batch(state.backbone, state.params, images)
    total = 0.0
    upstream = np.zeros_like(heatmaps)
    for j, (_, truth) in enumerate(batch):
        loss, grad = l1_coordinate_loss(heatmaps[j], truth)
        total += loss
        upstream[j] = grad / len(batch)
    return total / len(batch), images, upstream


def pretrain(data: Dataset, cfg: TrainConfig, state: TrainState,
             sink: Callable[[dict], None] | None = None,
             epochs: int | None = None) -> TrainState:
    """Fit the backbone to the labeled data with the L1 coordinate loss."""
    if state.stage not in ("init",):
        raise ValueError(f"pretrain expects a fresh state, got {state.stage!r}")
    epochs = cfg.epochs_per_stage if epochs is None else epochs
    n_labeled = len(data.labeled)
    stage_key = _STAGES["pretrain"]

    for epoch in range(state.epoch, epochs):
        order = substream(cfg.seed, "data", stage_key, epoch).permutation(n_labeled)
        epoch_loss = 0.0
        n_steps = 0
        for start in range(0, n_labeled, cfg.batch_size):
            batch = [data.labeled[i] for i in order[start:start + cfg.batch_size]]
            loss, images, upstream = _labeled_batch_terms(state, batch)
            grads = backward_batch(state.backbone, state.params, images, upstream)
            state.params, state.adam = adam_step(state.adam, state.params, grads)
            epoch_loss += loss
            n_steps += 1
        state.epoch = epoch + 1
        if sink is not None:
            sink({"stage": "pretrain", "epoch": epoch + 1,
                  "loss": epoch_loss / max(n_steps, 1),
                  "mre_mm": _held_out_mre(state, data),
                  "skipped_samples": 0})
    state.stage = "pretrained"
    state.epoch = 0
    return state


def _pseudo_label(model: ShapeModel | None, coords: np.ndarray,
                  spacing_mm: float, cfg: TrainConfig) -> PseudoLabel:
    """Regulated pseudo label, or the raw prediction marked fully valid when
    shape regulation is ablated."""
    if model is not None and cfg.ablation.uses_shape_regulation:
        initial = LandmarkSet(coords, spacing_mm=spacing_mm)
        return regulate(model, initial, cfg.z_mm)
    n = coords.shape[0]
    return PseudoLabel(coords=coords.copy(), valid=np.ones(n, dtype=bool),
                       branch=Branch.ADJUSTED, max_deviation_mm=0.0,
                       deviations_mm=np.zeros(n))


def pseudo_label_snapshot(state: TrainState, data: Dataset,
                          model: ShapeModel | None, cfg: TrainConfig
                          ) -> tuple[list[PseudoLabel], float | None]:
    """Pseudo labels of the raw (unaugmented) unlabeled images under the
    current parameters, plus their mean error against the withheld ground
    truth (None when no truth is available).

    The error of one sample is the mean distance of its valid pseudo-label
    landmarks to the truth; samples with no valid landmark are skipped.
    """
    images = np.array([np.asarray(img) for img in data.unlabeled])
    decoded = decode_batch(forward_batch(state.backbone, state.params, images))
    labels = [_pseudo_label(model, coords, data.spacing_mm, cfg)
              for coords in decoded]
    if data.unlabeled_truth is None:
        return labels, None
    per_sample = []
    for label, truth in zip(labels, data.unlabeled_truth):
        if label.n_valid == 0:
            continue
        dist = np.linalg.norm(label.coords - truth.coords, axis=1)
        per_sample.append(float(dist[label.valid].mean()) * truth.spacing_mm)
    return labels, (float(np.mean(per_sample)) if per_sample else None)


def self_train(data: Dataset, model: ShapeModel, cfg: TrainConfig,
               state: TrainState,
               sink: Callable[[dict], None] | None = None,
               snapshot_cb: Callable[[int, list, float | None], None] | None = None,
               epochs: int | None = None) -> TrainState:
    """Shape-regulated self-training over the unlabeled data.

    Every optimizer step combines the mean L1 loss of one labeled batch with
    the mean loss of one unlabeled batch (region attention against regulated
    pseudo labels, or L1 against them on the no-region-attention arms).
    Samples whose pseudo label has no valid landmark are skipped for the
    step; if a whole epoch skips everything, AllSamplesSkipped is raised.
    """
    if state.stage != "pretrained":
        raise ValueError(f"self_train expects a pretrained state, got "
                         f"{state.stage!r}")
    if not data.unlabeled:
        raise ValueError("self-training needs unlabeled samples")
    epochs = cfg.epochs_per_stage if epochs is None else epochs
    n_landmarks = data.n_landmarks
    n_labeled = len(data.labeled)
    n_unlabeled = len(data.unlabeled)
    stage_key = _STAGES["selftrain"]
    use_ral = cfg.ablation.uses_region_attention

    for epoch in range(state.epoch, epochs):
        rng_data = substream(cfg.seed, "data", stage_key, epoch)
        unlabeled_order = rng_data.permutation(n_unlabeled)
        labeled_order = rng_data.permutation(n_labeled)
        epoch_loss = 0.0
        n_steps = 0
        used_samples = 0
        skipped_samples = 0

        for step, start in enumerate(range(0, n_unlabeled, cfg.batch_size)):
            u_idx = unlabeled_order[start:start + cfg.batch_size]
            l_idx = [labeled_order[(step * cfg.batch_size + j) % n_labeled]
                     for j in range(cfg.batch_size)]
            labeled_batch = [data.labeled[i] for i in l_idx]

            aug_rng = substream(cfg.seed, "augment", stage_key, epoch, step)
            u_images = []
            for i in u_idx:
                img, _ = augment(data.unlabeled[i], None, cfg.augment, aug_rng)
                u_images.append(img)
            u_images = np.array(u_images)
            u_heatmaps = forward_batch(state.backbone, state.params, u_images)

            decoded = decode_batch(u_heatmaps)
            contributions = []
            for j in range(len(u_idx)):
                label = _pseudo_label(model, decoded[j], data.spacing_mm, cfg)
                if label.n_valid == 0:
                    skipped_samples += 1
                    continue
                offs = sample_offsets(
                    n_landmarks,
                    substream(cfg.seed, "offsets", stage_key, epoch, step, j),
                    cfg.offset_mean, cfg.offset_std)
                if use_ral:
                    loss, grad = region_attention_loss(u_heatmaps[j], label, offs)
                else:
                    target = LandmarkSet(label.coords, valid=label.valid,
                                         spacing_mm=data.spacing_mm)
                    loss, grad = l1_coordinate_loss(u_heatmaps[j], target)
                contributions.append((j, loss, grad))
                used_samples += 1

            l_loss, l_images, l_upstream = _labeled_batch_terms(state, labeled_batch)
            step_loss = l_loss
            u_upstream = np.zeros_like(u_heatmaps)
            if contributions:
                u_loss = 0.0
                for j, loss, grad in contributions:
                    u_loss += loss
                    u_upstream[j] = grad / len(contributions)
                step_loss += u_loss / len(contributions)

            images = np.concatenate([l_images, u_images])
            upstream = np.concatenate([l_upstream, u_upstream])
            grads = backward_batch(state.backbone, state.params, images, upstream)
            state.params, state.adam = adam_step(state.adam, state.params, grads)
            epoch_loss += step_loss
            n_steps += 1

        if used_samples == 0:
            raise AllSamplesSkipped(
                "every unlabeled sample regulated to zero valid landmarks; "
                "the shape prior rejects all predictions")

        state.epoch = epoch + 1
        record = {"stage": "selftrain", "epoch": epoch + 1,
                  "loss": epoch_loss / max(n_steps, 1),
                  "mre_mm": _held_out_mre(state, data),
                  "skipped_samples": skipped_samples}
        if (epoch + 1) % cfg.snapshot_every == 0:
            labels, mean_err = pseudo_label_snapshot(state, data, model, cfg)
            if mean_err is not None:
                record["pseudo_label_error_mm"] = mean_err
            if snapshot_cb is not None:
                snapshot_cb(epoch + 1, labels, mean_err)
        if sink is not None:
            sink(record)

    state.stage = "selftrained"
    state.epoch = 0
    return state


def finetune(data: Dataset, cfg: TrainConfig, state: TrainState,
             sink: Callable[[dict], None] | None = None,
             epochs: int | None = None) -> TrainState:
    """Revisit the labeled data and keep the best held-out checkpoint.

    The loss is the region attention loss with ground truth as the anchor
    and freshly sampled offsets (the plain L1 objective on the
    no-region-attention arms or with finetune_loss="l1").  The incoming
    state is a selection candidate, so fine-tuning never ends worse than it
    started.
    """
    epochs = cfg.epochs_per_stage if epochs is None else epochs
    if epochs == 0:
        return state
    if state.stage != "selftrained":
        raise ValueError(f"finetune expects a self-trained state, got "
                         f"{state.stage!r}")
    if not data.held_out:
        raise ValueError("finetune needs held-out samples for checkpointing")
    use_ral = (cfg.finetune_loss == "region-attention"
               and cfg.ablation.uses_region_attention)
    n_labeled = len(data.labeled)
    n_landmarks = data.n_landmarks
    stage_key = _STAGES["finetune"]

    best_mre = _held_out_mre(state, data)
    best_params = state.params.copy()
    best_adam = state.adam

    for epoch in range(state.epoch, epochs):
        order = substream(cfg.seed, "data", stage_key, epoch).permutation(n_labeled)
        epoch_loss = 0.0
        n_steps = 0
        for step, start in enumerate(range(0, n_labeled, cfg.batch_size)):
            batch = [data.labeled[i] for i in order[start:start + cfg.batch_size]]
            images = np.array([img for img, _ in batch])
            heatmaps = forward_batch(state.backbone, state.params, images)
            upstream = np.zeros_like(heatmaps)
            batch_loss = 0.0
            for j, (_, truth) in enumerate(batch):
                if use_ral:
                    anchor = PseudoLabel(
                        coords=truth.coords, valid=truth.valid,
                        branch=Branch.ADJUSTED, max_deviation_mm=0.0,
                        deviations_mm=np.zeros(n_landmarks))
                    offs = sample_offsets(
                        n_landmarks,
                        substream(cfg.seed, "offsets", stage_key, epoch, step, j),
                        cfg.offset_mean, cfg.offset_std)
                    loss, grad = region_attention_loss(heatmaps[j], anchor, offs)
                else:
                    loss, grad = l1_coordinate_loss(heatmaps[j], truth)
                batch_loss += loss
                upstream[j] = grad / len(batch)
            grads = backward_batch(state.backbone, state.params, images, upstream)
            state.params, state.adam = adam_step(state.adam, state.params, grads)
            epoch_loss += batch_loss / len(batch)
            n_steps += 1

        state.epoch = epoch + 1
        mre = _held_out_mre(state, data)
        if mre is not None and (best_mre is None or mre < best_mre):
            best_mre = mre
            best_params = state.params.copy()
            best_adam = state.adam
        if sink is not None:
            sink({"stage": "finetune", "epoch": epoch + 1,
                  "loss": epoch_loss / max(n_steps, 1), "mre_mm": mre,
                  "skipped_samples": 0})

    state.params = best_params
    state.adam = best_adam
    state.stage = "finetuned"
    state.epoch = 0
    return state


def run_training(data: Dataset, cfg: TrainConfig,
                 sink: Callable[[dict], None] | None = None,
                 snapshot_cb=None,
                 state: TrainState | None = None,
                 model: ShapeModel | None = None,
                 stage_cb: Callable[[str, TrainState], None] | None = None,
                 ) -> tuple[TrainState, ShapeModel | None]:
    """Full protocol for one ablation arm, resumable from a partial state.

    The shape model is built once from the labeled data before any
    self-training and frozen afterwards.
    """
    if state is None:
        state = init_state(data, cfg)
    supervised_only = cfg.ablation is Ablation.SUPERVISED_ONLY
    if not supervised_only and model is None:
        model = build_shape_model([ls for _, ls in data.labeled],
                                  cfg.variance_target)

    if state.stage == "init":
        state = pretrain(data, cfg, state, sink=sink)
        if stage_cb is not None:
            stage_cb("pretrained", state)
    if supervised_only:
        return state, model
    if state.stage == "pretrained":
        state = self_train(data, model, cfg, state, sink=sink,
                           snapshot_cb=snapshot_cb)
        if stage_cb is not None:
            stage_cb("selftrained", state)
    if state.stage == "selftrained":
        state = finetune(data, cfg, state, sink=sink)
        if stage_cb is not None:
            stage_cb("finetuned", state)
    return state, model
