"""Ablation grids and progressive (chained) distillation."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

from . import detector as det
from .distill import DistillConfig
from .evaluation import EvalReport, evaluate
from .geometry import MaskConfig
from .training import RunRecord, TrainConfig, train_detector


class AblationRowError(RuntimeError):
    """A grid row failed; ``row`` names it."""

    def __init__(self, row: str, cause: BaseException):
        super().__init__(f"ablation row {row!r} failed: {type(cause).__name__}: {cause}")
        self.row = row
        self.cause = cause


class CapacityOrderError(ValueError):
    pass


@dataclass(frozen=True)
class GridRow:
    """One ablation row. ``distill=None`` trains the undistilled baseline;
    ``teacher_row`` evaluates the shared teacher instead of training anything."""

    name: str
    distill: Optional[DistillConfig] = None
    teacher_row: bool = False

    def describe(self) -> dict:
        return {
            "name": self.name,
            "teacher_row": self.teacher_row,
            "distill": None if self.distill is None else self.distill.to_dict(),
        }


def _only(backbone=False, cls=False, reg=False, decay=False, mask: MaskConfig = MaskConfig(),
          base: Optional[DistillConfig] = None) -> DistillConfig:
    base = base or DistillConfig()
    return replace(base, enable_backbone=backbone, enable_cls=cls, enable_reg=reg, decay_enabled=decay, mask=mask)


def table1_grid(base: Optional[DistillConfig] = None) -> List[GridRow]:
    """Module ablation: baseline, each component alone, all three, all three with decay, teacher."""
    return [
        GridRow("baseline"),
        GridRow("backbone", _only(backbone=True, base=base)),
        GridRow("cls", _only(cls=True, base=base)),
        GridRow("reg", _only(reg=True, base=base)),
        GridRow("all", _only(True, True, True, base=base)),
        GridRow("all+decay", _only(True, True, True, decay=True, base=base)),
        GridRow("teacher", teacher_row=True),
    ]


def table2_grid(base: Optional[DistillConfig] = None) -> List[GridRow]:
    """Mask sweep for backbone-only distillation (no decay)."""
    rows = [
        GridRow(f"gaussian_s{s:g}", _only(backbone=True, mask=MaskConfig("gaussian", s, s), base=base))
        for s in (1.0, 2.0, 4.0)
    ]
    rows.append(GridRow("rectangle", _only(backbone=True, mask=MaskConfig("rectangle"), base=base)))
    rows.append(GridRow("all_features", _only(backbone=True, mask=MaskConfig("all"), base=base)))
    return rows


GRIDS: Dict[str, Callable[..., List[GridRow]]] = {"table1": table1_grid, "table2": table2_grid, "empty": lambda base=None: []}


@dataclass
class AblationResult:
    row: GridRow
    report: EvalReport
    record: Optional[RunRecord] = None

    @property
    def map50(self) -> float:
        return self.report.map50


@dataclass
class AblationTable:
    results: List[AblationResult] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.results)

    def ranked(self) -> List[AblationResult]:
        """Best mAP@0.5 first; ties keep grid order."""
        return sorted(self.results, key=lambda r: -r.map50)

    def by_name(self) -> Dict[str, AblationResult]:
        return {r.row.name: r for r in self.results}

    CSV_COLUMNS = ("row", "rank", "map50", "map50_95", "parameter_count", "images_per_second")

    def to_csv(self) -> str:
        rank = {id(r): i + 1 for i, r in enumerate(self.ranked())}
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        for r in self.results:
            rep = r.report
            writer.writerow([r.row.name, rank[id(r)], repr(rep.map50), repr(rep.map50_95), rep.parameter_count,
                             f"{rep.images_per_second:.2f}"])
        return buf.getvalue()

    def format(self) -> str:
        if not self.results:
            return "(empty grid)"
        width = max(len(r.row.name) for r in self.results)
        lines = [f"{'row':<{width}}  mAP@0.5  mAP@[.5:.95]  rank"]
        rank = {id(r): i + 1 for i, r in enumerate(self.ranked())}
        for r in self.results:
            lines.append(
                f"{r.row.name:<{width}}  {100 * r.map50:7.2f}  {100 * r.report.map50_95:12.2f}  {rank[id(r)]:4d}"
            )
        return "\n".join(lines)


def run_row(row: GridRow, train_scenes: Sequence, eval_scenes: Sequence, base_config: TrainConfig,
            teacher: Optional[det.DetectorModel], detector_config: Optional[det.DetectorConfig] = None,
            val_scenes: Optional[Sequence] = None, log: Optional[Callable[[str], None]] = None) -> AblationResult:
    try:
        if row.teacher_row:
            if teacher is None:
                raise ValueError("teacher row requested without a teacher")
            return AblationResult(row, evaluate(teacher, eval_scenes))
        config = replace(base_config, distill=row.distill)
        prefix = (lambda s: log(f"[{row.name}] {s}")) if log else None
        model, record = train_detector(
            train_scenes, config, detector_config, teacher if row.distill is not None else None,
            val_scenes=val_scenes, log=prefix, final_eval_scenes=eval_scenes,
        )
        return AblationResult(row, record.final, record)
    except AblationRowError:
        raise
    except Exception as exc:  # the failing row must be identifiable
        raise AblationRowError(row.name, exc) from exc


def run_ablation(train_scenes: Sequence, eval_scenes: Sequence, base_config: TrainConfig, grid: Sequence[GridRow],
                 teacher: Optional[det.DetectorModel] = None, detector_config: Optional[det.DetectorConfig] = None,
                 jobs: int = 1, val_scenes: Optional[Sequence] = None,
                 log: Optional[Callable[[str], None]] = None) -> AblationTable:
    """Train one student per grid row with a shared frozen teacher and a shared seed."""
    grid = list(grid)
    names = [r.name for r in grid]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate grid row names: {names}")
    if teacher is not None and not teacher.frozen:
        teacher.freeze()

    def one(row):
        return run_row(row, train_scenes, eval_scenes, base_config, teacher, detector_config, val_scenes, log)

    if jobs <= 1 or len(grid) <= 1:
        results = [one(r) for r in grid]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, grid))
    return AblationTable(results)


# ----------------------------------------------------------------- progressive
@dataclass
class ProgressiveResult:
    models: List[det.DetectorModel]
    records: List[RunRecord]

    @property
    def final(self) -> det.DetectorModel:
        return self.models[-1]

    @property
    def reports(self) -> List[Optional[EvalReport]]:
        return [r.final for r in self.records]


def check_capacity_order(configs: Sequence[det.DetectorConfig]) -> List[int]:
    """Parameter counts of each config; raises unless strictly decreasing with equal output channels."""
    if len(configs) < 2:
        raise CapacityOrderError(f"progressive distillation needs at least 2 configs, got {len(configs)}")
    counts = [det.DetectorModel.init(c, seed=0).parameter_count() for c in configs]
    for i in range(1, len(configs)):
        if counts[i] >= counts[i - 1]:
            raise CapacityOrderError(
                f"stage {i} has {counts[i]} parameters, not fewer than stage {i - 1} ({counts[i - 1]})"
            )
        det.check_distill_pair(configs[i], configs[i - 1])
    return counts


def progressive_distill(train_scenes: Sequence, configs: Sequence[det.DetectorConfig], train_config: TrainConfig,
                        val_scenes: Optional[Sequence] = None, eval_scenes: Optional[Sequence] = None,
                        log: Optional[Callable[[str], None]] = None,
                        stage_callback: Optional[Callable[[int, det.DetectorModel, RunRecord], None]] = None
                        ) -> ProgressiveResult:
    """Stage 0 trains the largest model without a teacher; stage k distills from frozen stage k-1."""
    check_capacity_order(configs)
    distill = train_config.distill or DistillConfig()
    models: List[det.DetectorModel] = []
    records: List[RunRecord] = []
    teacher = None
    for k, cfg in enumerate(configs):
        stage_config = replace(train_config, distill=None if k == 0 else distill)
        prefix = (lambda s, k=k: log(f"[stage {k}] {s}")) if log else None
        model, record = train_detector(train_scenes, stage_config, cfg, teacher, val_scenes=val_scenes, log=prefix,
                                       final_eval_scenes=eval_scenes)
        model.freeze()
        models.append(model)
        records.append(record)
        if stage_callback is not None:
            stage_callback(k, model, record)
        teacher = model
    return ProgressiveResult(models, records)
