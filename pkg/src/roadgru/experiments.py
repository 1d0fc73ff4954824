"""Desk-scale experiments on synthetic scenes, shared by scripts/ and the test-suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from .data import RawScene, SceneDataset, synth_scene
from .evaluate import MetricsCounts, confusion_counts, pyramid_predict, report_from_counts
from .model import ModelParams
from .train import EpochRecord, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

TRAIN_SEEDS = range(0, 200)
HELDOUT_SEEDS = range(10_000, 10_050)
PYRAMID_SEEDS = range(20_000, 20_100)


def synthetic_scenes(seeds: Sequence[int], thin_far: bool = False) -> list[RawScene]:
    return [synth_scene(s, thin_far=thin_far) for s in seeds]


@dataclass
class LearningCheck:
    result: TrainResult
    heldout_f1: float
    heldout_counts: MetricsCounts
    seconds: float

    @property
    def first_val(self) -> float:
        return self.result.history[0].val_mae

    @property
    def final_val(self) -> float:
        return self.result.history[-1].val_mae


def pooled_counts(scenes: Sequence[RawScene], params: ModelParams, pyramid: bool,
                  fusion: str = "union") -> MetricsCounts:
    total = MetricsCounts()
    for scene in scenes:
        mask = pyramid_predict(scene.image, params, pyramid=pyramid, fusion=fusion).mask
        total = total + confusion_counts(mask, scene.gt_mask)
    return total


def run_learning_check(epochs: int = 200, batch_size: int = 25, lr: float = 1e-4, seed: int = 0,
                       train_seeds: Sequence[int] = TRAIN_SEEDS,
                       heldout_seeds: Sequence[int] = HELDOUT_SEEDS,
                       checkpoint_path: str | None = None,
                       on_epoch: Callable[[EpochRecord], None] | None = None) -> LearningCheck:
    """Train on synthetic scenes (one fresh view per scene per epoch), score held-out F1."""
    t0 = time.perf_counter()
    dataset = SceneDataset(synthetic_scenes(train_seeds), views="random", seed=seed)
    config = TrainConfig(batch_size=batch_size, epochs=epochs, lr=lr, seed=seed,
                         checkpoint_path=checkpoint_path)
    result = train(dataset, config, on_epoch=on_epoch)
    counts = pooled_counts(synthetic_scenes(heldout_seeds), result.best_params, pyramid=False)
    return LearningCheck(result, report_from_counts(counts).f1, counts, time.perf_counter() - t0)


@dataclass
class PyramidComparison:
    single: MetricsCounts
    pyramid: MetricsCounts
    superset_everywhere: bool

    @property
    def single_f1(self) -> float:
        return report_from_counts(self.single).f1

    @property
    def pyramid_f1(self) -> float:
        return report_from_counts(self.pyramid).f1


def compare_pyramid(params: ModelParams, seeds: Sequence[int] = PYRAMID_SEEDS,
                    fusion: str = "union") -> PyramidComparison:
    """Aggregate single-pass vs pyramid counts over thin-far-road scenes."""
    single, pyr = MetricsCounts(), MetricsCounts()
    superset = True
    for s in seeds:
        scene = synth_scene(s, thin_far=True)
        res = pyramid_predict(scene.image, params, pyramid=True, fusion=fusion)
        single = single + confusion_counts(res.near_mask, scene.gt_mask)
        pyr = pyr + confusion_counts(res.mask, scene.gt_mask)
        superset &= bool((res.mask | ~res.near_mask).all())
    return PyramidComparison(single, pyr, superset)
