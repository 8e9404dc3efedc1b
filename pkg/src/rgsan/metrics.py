"""mIoU / Acc@kIoU with unique/multiple strata."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scene import PointCloudScene

THRESHOLDS = (0.25, 0.5)
STRATA = ("unique", "multiple")


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    iou: float
    stratum: str

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou {self.iou} outside [0, 1]")
        if self.stratum not in STRATA:
            raise ValueError(f"unknown stratum {self.stratum!r}")


def point_iou(pred_mask, gt_mask) -> float:
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask lengths differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def _summary(ious: list[float]) -> dict:
    if not ious:
        return {"count": 0, "miou": None, **{f"acc@{k}": None for k in THRESHOLDS}}
    out = {"count": len(ious), "miou": float(np.mean(ious))}
    for k in THRESHOLDS:
        out[f"acc@{k}"] = sum(1 for v in ious if v >= k) / len(ious)
    return out


def aggregate(records) -> dict:
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    overall = _summary([r.iou for r in records])
    report = dict(overall)
    report["strata"] = {s: _summary([r.iou for r in records if r.stratum == s]) for s in STRATA}
    report["strata"]["overall"] = overall
    return report


def stratify(scene: PointCloudScene, target_instance: int) -> str:
    classes = scene.instance_classes
    if target_instance not in classes:
        raise ValueError(f"unknown target instance {target_instance}")
    cls = classes[target_instance]
    present = set(scene.instances())
    same = [i for i, c in classes.items() if c == cls and i in present and i != target_instance]
    return "multiple" if same else "unique"


def results_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def results_table(report: dict) -> str:
    """Plain-text table: (0.25 / 0.5 / mIoU) x (Unique / Multiple / Overall), in percent."""
    cols = ("unique", "multiple", "overall")
    head1 = f"{'':>8}" + "".join(f"{c.capitalize():^24}" for c in cols)
    head2 = f"{'':>8}" + "".join(f"{'0.25':>8}{'0.5':>8}{'mIoU':>8}" for _ in cols)
    row = f"{'':>8}"
    for c in cols:
        s = report["strata"][c]
        for key in ("acc@0.25", "acc@0.5", "miou"):
            v = s[key]
            row += f"{'-':>8}" if v is None else f"{100 * v:8.1f}"
    return "\n".join([head1, head2, row])
