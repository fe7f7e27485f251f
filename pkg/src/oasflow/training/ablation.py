"""The 2x2 correlation-mode x occlusion-module ablation grid."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from statistics import median

from .synthetic import SceneConfig
from .trainer import TrainConfig, batch_digest, train_toy

# row order of the report: baseline first, the proposed combination last
CELLS = (("warping", False), ("warping", True), ("sampling", False), ("sampling", True))

SAMPLING_TOLERANCE = 1.10
OCCLUSION_TOLERANCE = 1.05


def ghost_prone_config(**overrides) -> TrainConfig:
    """Large foreground motions and thin occluders, where warping duplicates content."""
    scene = SceneConfig(bg_max_shift=6.0, fg_max_shift=14.0, fg_count=(2, 3), thin=True, thin_width=(2, 5))
    base = dict(steps=1500, scene=scene, crop_margin=16)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class AblationCell:
    correlation: str
    occlusion: bool
    val_epe: dict[int, float] = field(default_factory=dict)  # seed -> final validation EPE
    first_batch: dict[int, str] = field(default_factory=dict)

    @property
    def median_epe(self) -> float:
        return median(self.val_epe.values())

    @property
    def label(self) -> str:
        return f"{self.correlation:<8s} {'on' if self.occlusion else 'off':<3s}"


@dataclass
class AblationReport:
    cells: list[AblationCell]

    def cell(self, correlation: str, occlusion: bool) -> AblationCell:
        return next(c for c in self.cells if (c.correlation, c.occlusion) == (correlation, occlusion))

    @property
    def baseline(self) -> AblationCell:
        return self.cell("warping", False)

    def streams_identical(self) -> bool:
        """Every cell saw the same first batch for each seed."""
        ref = self.cells[0].first_batch
        return all(c.first_batch == ref for c in self.cells)

    def sampling_ratios(self) -> dict[bool, float]:
        """median(sampling) / median(warping), per occlusion setting."""
        return {occ: self.cell("sampling", occ).median_epe / self.cell("warping", occ).median_epe
                for occ in (False, True)}

    def occlusion_ratios(self) -> dict[str, float]:
        """median(occlusion on) / median(occlusion off), per correlation mode."""
        return {mode: self.cell(mode, True).median_epe / self.cell(mode, False).median_epe
                for mode in ("warping", "sampling")}

    def directional_checks(self) -> dict[str, bool]:
        out = {f"sampling<=1.10*warping [occ {'on' if occ else 'off'}]": r <= SAMPLING_TOLERANCE
               for occ, r in self.sampling_ratios().items()}
        out.update({f"occ_on<=1.05*occ_off [{mode}]": r <= OCCLUSION_TOLERANCE
                    for mode, r in self.occlusion_ratios().items()})
        return out

    def format_table(self) -> str:
        base = self.baseline.median_epe
        seeds = sorted(self.cells[0].val_epe)
        head = f"{'correlation':<8s} {'occ':<3s} " + " ".join(f"{'s' + str(s):>8s}" for s in seeds)
        lines = [head + f" {'median':>8s} {'delta':>8s}"]
        for c in self.cells:
            vals = " ".join(f"{c.val_epe[s]:8.4f}" for s in seeds)
            delta = (c.median_epe - base) / base
            lines.append(f"{c.label} {vals} {c.median_epe:8.4f} {delta:+8.2%}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mode", "occlusion", "seed", "val_epe"])
        for c in self.cells:
            for seed, value in sorted(c.val_epe.items()):
                writer.writerow([c.correlation, "on" if c.occlusion else "off", seed, repr(value)])
        return buf.getvalue()


def run_ablation(base: TrainConfig, seeds=(1, 2, 3, 4, 5), log=None) -> AblationReport:
    """Train every cell for every seed with the same data stream and step budget."""
    cells = [AblationCell(mode, occ) for mode, occ in CELLS]
    for seed in seeds:
        for cell in cells:
            cfg = replace(base, seed=seed, correlation=cell.correlation, occlusion=cell.occlusion)
            cell.first_batch[seed] = batch_digest(cfg, step=1)
            report = train_toy(cfg)
            cell.val_epe[seed] = report.final_val_epe
            if log is not None:
                log(f"{cell.label} seed {seed}: val_epe {report.final_val_epe:.4f}")
    return AblationReport(cells)
