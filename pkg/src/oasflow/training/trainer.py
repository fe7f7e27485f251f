"""Toy end-to-end training on synthetic scenes."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, TextIO

import numpy as np

from ..network import NetConfig, OASNet
from ..ops import upsample_bilinear_2x
from ..tensor import Tape, Tensor, backward
from .adam import Adam
from .loss import LossConfig, multiscale_l2_loss
from .metrics import epe, point_biserial
from .synthetic import SceneConfig, SyntheticSample, augment, gen_synthetic_pair

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
VAL_STREAM = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 1
    crop: tuple[int, int] = (64, 64)
    crop_margin: int = 8
    flip: bool = True
    correlation: str = "sampling"
    occlusion: bool = True
    scene: SceneConfig = field(default_factory=SceneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig | None = None
    val_seed: int = 20_000
    val_size: int = 32
    val_every: int = 100

    def __post_init__(self):
        if self.crop[0] % 64 or self.crop[1] % 64:
            raise ValueError(f"crop {self.crop} must be divisible by 64 in both dimensions")

    def net_config(self) -> NetConfig:
        base = self.net or NetConfig()
        return replace(base, correlation=self.correlation, occlusion=self.occlusion)

    def multiple(self) -> int:
        return self.net_config().multiple


def _sample_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def training_sample(cfg: TrainConfig, step: int, index: int) -> SyntheticSample:
    """The ``index``-th sample of the batch used at ``step``; identical for any model variant."""
    h, w = cfg.crop
    m = cfg.crop_margin
    scene = replace(cfg.scene, height=h + 2 * m, width=w + 2 * m)
    seed = _sample_seed(cfg.seed, TRAIN_STREAM, step, index)
    rng = np.random.default_rng(seed)
    return augment(gen_synthetic_pair(seed, scene), rng, h, w, flip=cfg.flip)


def training_batch(cfg: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    samples = [training_sample(cfg, step, i) for i in range(cfg.batch)]
    return (np.concatenate([s.im1 for s in samples]),
            np.concatenate([s.im2 for s in samples]),
            np.concatenate([s.gt_flow for s in samples]))


def batch_digest(cfg: TrainConfig, step: int = 0) -> str:
    h = hashlib.sha256()
    for arr in training_batch(cfg, step):
        h.update(arr.tobytes())
    return h.hexdigest()


def validation_set(cfg: TrainConfig) -> list[SyntheticSample]:
    scene = replace(cfg.scene, height=cfg.crop[0], width=cfg.crop[1])
    return [gen_synthetic_pair(_sample_seed(cfg.val_seed, VAL_STREAM, i), scene) for i in range(cfg.val_size)]


def zero_flow_epe(samples: list[SyntheticSample]) -> float:
    return float(np.mean([epe(np.zeros_like(s.gt_flow), s.gt_flow) for s in samples]))


def upsample_occ(occ: Tensor, times: int) -> np.ndarray:
    for _ in range(times):
        occ = upsample_bilinear_2x(occ, 1.0)
    return occ.data


def evaluate(net: OASNet, samples: list[SyntheticSample], chunk: int = 8) -> dict:
    """Mean full-resolution EPE over ``samples``; also correlates the finest awareness map with gt_occ."""
    errs, occ_vals, occ_labels = [], [], []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        im1 = Tensor(np.concatenate([s.im1 for s in part]))
        im2 = Tensor(np.concatenate([s.im2 for s in part]))
        est = net.estimate_flow(im1, im2)
        for i, s in enumerate(part):
            errs.append(epe(est.flow.data[i : i + 1], s.gt_flow))
        occ = est.occ_pyramid[-1]
        if occ is not None:
            occ_vals.append(upsample_occ(occ, net.cfg.finest_level))
            occ_labels.append(np.concatenate([s.gt_occ for s in part]))
    out = {"epe": float(np.mean(errs))}
    out["occ_corr"] = (point_biserial(np.concatenate(occ_vals), np.concatenate(occ_labels))
                       if occ_vals else float("nan"))
    return out


@dataclass
class TrainReport:
    records: list[dict]
    init_val_epe: float
    final_val_epe: float
    zero_flow_epe: float
    occ_corr: float
    net: OASNet

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if r["loss"] is not None]


def train_toy(
    cfg: TrainConfig,
    checkpoint_path=None,
    metrics_out: TextIO | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainReport:
    """Generate, forward, loss, backward, Adam; validate every ``val_every`` steps."""
    net = OASNet(cfg.net_config(), seed=cfg.seed)
    opt = Adam(net.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    val = validation_set(cfg)
    baseline = zero_flow_epe(val)
    records: list[dict] = []
    t0 = time.perf_counter()

    def emit(rec: dict) -> None:
        records.append(rec)
        if metrics_out is not None:
            metrics_out.write(json.dumps(rec) + "\n")
        if on_record is not None:
            on_record(rec)

    first = evaluate(net, val)
    emit({"step": 0, "loss": None, "val_epe": first["epe"], "wall_ms": 0.0})
    last = first
    for step in range(1, cfg.steps + 1):
        im1, im2, gt = training_batch(cfg, step)
        net.params.zero_grads()
        with Tape() as tape:
            est = net.estimate_flow(Tensor(im1), Tensor(im2))
            loss = multiscale_l2_loss(est.levels, gt, cfg.loss, net.params)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite ({value}) at step {step}")
        backward(tape, loss)
        opt.step()
        rec = {"step": step, "loss": value, "val_epe": None}
        if step % cfg.val_every == 0 or step == cfg.steps:
            last = evaluate(net, val)
            rec["val_epe"] = last["epe"]
            log.info("step %d loss %.4f val_epe %.4f", step, value, last["epe"])
        rec["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 1)
        emit(rec)

    if checkpoint_path is not None:
        from ..io.checkpoint import save_checkpoint

        save_checkpoint(checkpoint_path, net.params)
    return TrainReport(records, first["epe"], last["epe"], baseline, last["occ_corr"], net)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
