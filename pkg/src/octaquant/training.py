"""Staged transfer learning: initial training, cross-validation, two fine-tuning stages."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import augment as aug
from . import neural as nn
from . import segment, unet
from .evaluate import confusion, dice

log = logging.getLogger(__name__)

MANUAL = "manual"
AVERAGED_AUTO = "averaged_auto"
PSEUDO_LABEL = "pseudo_label"


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, batch: int, message: str):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    learning_rate: float = 1e-4
    adam_epsilon: float = 1e-5
    batch_size: int = 4
    seed: int = 0
    tile_grid: tuple = (2, 2)
    augment: aug.AugmentPlan | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.adam_epsilon <= 0:
            raise ValueError("learning_rate must be >= 0 and adam_epsilon > 0")

    @classmethod
    def initial(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 120, "learning_rate": 1e-4, "adam_epsilon": 1e-5, **kw})

    @classmethod
    def fine_tune(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 60, "learning_rate": 1e-2, "adam_epsilon": 1e-2, **kw})


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    tag: str = MANUAL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask, bool)
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in extent")


@dataclass
class TrainResult:
    weights: unet.ModelWeights
    history: list  # dicts with epoch, loss, dice


# --------------------------------------------------------------------------
# tiling


def split_tiles(image, mask, grid=(2, 2)):
    """Non-overlapping ``rows x cols`` tiling of an image/mask pair, row-major."""
    image, mask = np.asarray(image), np.asarray(mask)
    rows, cols = grid
    h, w = image.shape[:2]
    if h % rows or w % cols:
        raise ValueError(f"extent {h}x{w} is not divisible by tile grid {rows}x{cols}")
    th, tw = h // rows, w // cols
    return [(image[r * th:(r + 1) * th, c * tw:(c + 1) * tw].copy(), mask[r * th:(r + 1) * th, c * tw:(c + 1) * tw].copy())
            for r in range(rows) for c in range(cols)]


def split_quadrants(image, mask):
    return split_tiles(image, mask, (2, 2))


def reassemble_tiles(tiles, grid=(2, 2)) -> np.ndarray:
    rows, cols = grid
    return np.concatenate([np.concatenate(tiles[r * cols:(r + 1) * cols], axis=1) for r in range(rows)], axis=0)


def tile_set(samples, grid=(2, 2)) -> list:
    out = []
    for s in samples:
        for i, (img, msk) in enumerate(split_tiles(s.image, s.mask, grid)):
            out.append(Sample(img, msk, s.tag, {**s.meta, "tile": i}))
    return out


def augment_set(samples, plan: aug.AugmentPlan) -> list:
    out = []
    for n, s in enumerate(samples):
        for i, (img, msk) in enumerate(aug.expand((s.image, s.mask), plan, seed=plan.seed + n)):
            out.append(Sample(img, msk, s.tag, {**s.meta, "augment": i}))
    return out


# --------------------------------------------------------------------------
# optimization


def _batches(samples, batch_size, rng):
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.image.shape, []).append(i)
    batches = []
    for shape in sorted(groups):
        idx = np.array(groups[shape])
        idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(weights: unet.ModelWeights, data, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam-optimize a copy of ``weights`` on ``data``; the input weights are left untouched.

    Samples are augmented (when a plan is set) and then cut into
    ``config.tile_grid`` tiles. Deterministic for a fixed ``config.seed``.
    Each history entry carries
    the epoch's mean loss and the Dice of its (train-mode) predictions.
    """
    data = list(data)
    if config.augment is not None:
        data = augment_set(data, config.augment)
    if tuple(config.tile_grid) != (1, 1):
        data = tile_set(data, config.tile_grid)
    for s in data:
        unet.check_extents(weights.config, *s.image.shape)
    work = weights.copy()
    if config.epochs == 0 or not data:
        return TrainResult(work, [])
    params = {k: nn.Tensor(v, requires_grad=True) for k, v in work.params.items()}
    state = nn.AdamState(learning_rate=config.learning_rate, epsilon=config.adam_epsilon)
    rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    images = [unet.to_input(s.image)[0] for s in data]
    history = []
    for epoch in range(1, config.epochs + 1):
        losses, tp, fp, fn = [], 0, 0, 0
        for b, idx in enumerate(_batches(data, config.batch_size, rng)):
            x = np.stack([images[i] for i in idx])
            y = np.stack([data[i].mask for i in idx])
            for p in params.values():
                p.zero_grad()
            try:
                logits = unet.forward_logits(work, x, training=True, rng=drop_rng, params=params, update_stats=True)
                loss = nn.softmax_cross_entropy(logits, y)
            except nn.NonFiniteError as exc:
                raise TrainingError(epoch, b, str(exc)) from None
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            try:
                nn.adam_step(work.params, grads, state)
            except nn.NonFiniteError as exc:
                raise TrainingError(epoch, b, str(exc)) from None
            losses.append(float(loss.data))
            pred = logits.data[:, 1] > logits.data[:, 0]
            c = confusion(pred, y)
            tp, fp, fn = tp + c.TP, fp + c.FP, fn + c.FN
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "dice": dice(type(c)(tp, fp, fn, 0))}
        history.append(entry)
        log.info("epoch %d/%d loss %.4f dice %.4f", epoch, config.epochs, entry["loss"], entry["dice"])
    return TrainResult(work, history)


def predict_masks(weights, images, post: segment.PostProcessConfig | None = None, tile=None):
    """Binary masks for a list of images (binarized at 0.5 unless ``post`` adds cluster removal)."""
    out = []
    for img in images:
        prob = segment.infer_tiled(weights, img, tile)
        out.append(segment.postprocess(prob, post) if post is not None else segment.binarize(prob))
    return out


def evaluate_dice(weights, samples, post: segment.PostProcessConfig | None = None) -> float:
    """Mean per-image Dice of infer-mode predictions against the sample masks."""
    samples = list(samples)
    if not samples:
        return float("nan")
    preds = predict_masks(weights, [s.image for s in samples], post)
    return float(np.mean([dice(confusion(p, s.mask)) for p, s in zip(preds, samples)]))


# --------------------------------------------------------------------------
# cross-validation


def fold_assignment(n: int, folds: int, seed: int) -> list:
    perm = np.random.default_rng([seed, 7]).permutation(n)
    return [np.sort(perm[i::folds]) for i in range(folds)]


@dataclass
class CvResult:
    best: tuple
    table: list      # dicts: learning_rate, adam_epsilon, fold, dice
    means: dict      # (lr, eps) -> mean validation Dice
    folds: list


def cross_validate(data, grid, config: TrainConfig = TrainConfig(), folds: int = 3,
                   init: unet.ModelWeights | unet.UnetConfig | None = None) -> CvResult:
    """Pick the (learning rate, epsilon) pair with the best mean held-out Dice.

    Every candidate trains from the same starting weights on ``folds - 1``
    folds and is scored on the remaining one. A candidate whose training
    diverges scores 0 on that fold. Ties go to the smaller learning rate,
    then the smaller epsilon.
    """
    data = list(data)
    grid = [tuple(map(float, g)) for g in grid]
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if len(data) < folds:
        raise ValueError(f"need at least {folds} samples for {folds}-fold cross-validation, got {len(data)}")
    if init is None:
        init = unet.UnetConfig()
    start = unet.build(init, config.seed) if isinstance(init, unet.UnetConfig) else init
    parts = fold_assignment(len(data), folds, config.seed)
    table, means = [], {}
    for lr, eps in grid:
        scores = []
        for f, held in enumerate(parts):
            held_set = set(held.tolist())
            train_set = [s for i, s in enumerate(data) if i not in held_set]
            val_set = [data[i] for i in held]
            cfg = replace(config, learning_rate=lr, adam_epsilon=eps)
            try:
                res = train(start, train_set, cfg)
                score = evaluate_dice(res.weights, val_set)
            except (TrainingError, nn.NonFiniteError) as exc:
                log.warning("candidate lr=%g eps=%g diverged on fold %d: %s", lr, eps, f, exc)
                score = 0.0
            if not np.isfinite(score):
                score = 0.0
            scores.append(score)
            table.append({"learning_rate": lr, "adam_epsilon": eps, "fold": f, "dice": score})
        means[(lr, eps)] = float(np.mean(scores))
    best = max(means, key=lambda k: (means[k], -k[0], -k[1]))
    return CvResult(best, table, means, parts)


# --------------------------------------------------------------------------
# fine-tuning stages


def fine_tune_stage1(initial: unet.ModelWeights, paired, config: TrainConfig | None = None) -> unet.ModelWeights:
    """Continue training from ``initial`` on single frames paired with averaged-image masks."""
    config = config or TrainConfig.fine_tune()
    if config.epochs == 0:
        return initial.copy()
    return train(initial, paired, config).weights


def pseudo_label_expand(intermediate: unet.ModelWeights, pool, gate: float = 0.7,
                        post: segment.PostProcessConfig = segment.PostProcessConfig(), tile=None) -> list:
    """Pseudo-labelled training pairs from (averaged, single_frame) images.

    The averaged image's segmentation becomes the label for its single frame
    when the two segmentations agree with Dice >= ``gate``. Each accepted
    sample records that Dice in ``meta['gate_dice']``.
    """
    accepted = []
    for i, (averaged, single) in enumerate(pool):
        averaged, single = np.asarray(averaged), np.asarray(single)
        if averaged.shape != single.shape:
            raise ValueError(f"pool item {i}: averaged {averaged.shape} and single {single.shape} differ")
        m_avg = segment.postprocess(segment.infer_tiled(intermediate, averaged, tile), post)
        m_single = segment.postprocess(segment.infer_tiled(intermediate, single, tile), post)
        d = dice(confusion(m_avg, m_single))
        if d >= gate:
            accepted.append(Sample(single, m_avg, PSEUDO_LABEL, {"pool_index": i, "gate_dice": d}))
    if not accepted:
        warnings.warn(f"pseudo-labelling accepted none of {len(pool)} images at gate {gate}", RuntimeWarning)
    log.info("pseudo-labelling accepted %d of %d images", len(accepted), len(pool))
    return accepted


def fine_tune_stage2(initial: unet.ModelWeights, expanded, config: TrainConfig | None = None) -> unet.ModelWeights:
    """Train from the *initial* weights on the expanded (manual + pseudo-labelled) set."""
    return fine_tune_stage1(initial, expanded, config)
