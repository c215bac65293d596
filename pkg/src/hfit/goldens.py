"""Golden test fixtures and the formula-to-code traceability table.

Fixture tensors are plain text for diffability: a `shape: d1 d2 ...`
header line, then whitespace-separated decimal values in row-major
order. Expected values were derived by hand or by the independent
oracles named in each case; they are never regenerated from this
package's own compute path.
"""

from __future__ import annotations

import importlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

FIXTURE_PACKAGE = "hfit.fixtures"


def write_tensor_text(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    lines = ["shape: " + " ".join(str(d) for d in array.shape)]
    flat = array.reshape(-1)
    row = array.shape[-1] if array.ndim else 1
    for start in range(0, flat.size, row):
        lines.append(" ".join(repr(float(v)) for v in flat[start : start + row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tensor_text(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("shape:"):
        raise ValueError("fixture tensor must start with a 'shape:' header")
    shape = tuple(int(tok) for tok in lines[0].split()[1:])
    values = []
    for line in lines[1:]:
        values.extend(float(tok) for tok in line.split())
    expected = int(np.prod(shape)) if shape else 1
    if len(values) != expected:
        raise ValueError(f"fixture has {len(values)} values, shape {shape} needs {expected}")
    return np.asarray(values, dtype=np.float64).reshape(shape)


@dataclass
class GoldenCase:
    case_id: str
    operation: str
    inputs: dict[str, np.ndarray]
    expected: dict[str, np.ndarray]
    kind: str            # "trivial" | "derived"
    oracle: str          # how the expected values were obtained
    tolerance: float = 1e-12


@dataclass
class CaseResult:
    case_id: str
    passed: bool
    max_abs_diff: float
    detail: str = ""


@dataclass
class ReplayReport:
    results: list[CaseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def summary(self) -> str:
        lines = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{status} {r.case_id} (max abs diff {r.max_abs_diff:.3e})")
            if r.detail and not r.passed:
                lines.append(f"     {r.detail}")
        return "\n".join(lines)


def _fixture_text(name: str) -> str:
    return resources.files(FIXTURE_PACKAGE).joinpath(name).read_text(encoding="utf-8")


def load_suite() -> list[GoldenCase]:
    index = json.loads(_fixture_text("cases.json"))
    cases = []
    for entry in index:
        cases.append(
            GoldenCase(
                case_id=entry["id"],
                operation=entry["operation"],
                inputs={k: read_tensor_text(_fixture_text(v)) for k, v in entry["inputs"].items()},
                expected={k: read_tensor_text(_fixture_text(v)) for k, v in entry["expected"].items()},
                kind=entry["kind"],
                oracle=entry["oracle"],
                tolerance=float(entry.get("tolerance", 1e-12)),
            )
        )
    return cases


def _as_constant_pyramid(value: float, dim: int = 4):
    """A 32x32-input pyramid (21 tokens) holding one constant value."""
    from .core import LevelSpec, TokenPyramid

    tokens = torch.full((21, dim), value, dtype=torch.float64)
    levels = (LevelSpec(8, 4, 4, 0), LevelSpec(16, 2, 2, 16), LevelSpec(32, 1, 1, 20))
    return TokenPyramid(tokens, levels)


def _unique_value(tensor: torch.Tensor, label: str) -> np.ndarray:
    values = torch.unique(tensor)
    if values.numel() != 1:
        raise AssertionError(f"{label} expected a constant tensor, found {values.numel()} values")
    return values.detach().numpy().reshape(1)


def _op_resample_bilinear(inputs):
    from .core import resample

    grid = torch.as_tensor(inputs["grid"], dtype=torch.float64).unsqueeze(-1)
    th, tw = (int(v) for v in inputs["target_hw"])
    out = resample(grid, th, tw, "bilinear")
    return {"value": out.squeeze(-1).detach().numpy()}


def _op_recalibrate_constant(inputs):
    from .rhff import recalibrate

    pyramid = _as_constant_pyramid(float(inputs["token_value"][0]))
    c_v = torch.full((21,), float(inputs["vit_confidence"][0]), dtype=torch.float64)
    c_s = torch.full((21,), float(inputs["prior_confidence"][0]), dtype=torch.float64)
    out = recalibrate(pyramid, c_v, c_s)
    return {"value": _unique_value(out.tokens, "recalibrated tokens")}


def _op_gated_merge_scalar(inputs):
    from .hgfi import gated_merge

    def cell(name):
        return torch.as_tensor(inputs[name], dtype=torch.float64).reshape(1, 1)

    out = gated_merge(
        cell("current"), cell("gate"),
        [(cell("history_feature"), cell("history_gate"))],
    )
    return {"value": out.detach().numpy().reshape(1)}


def _op_uniform_loss(inputs):
    from .model import HFITConfig, HFIT
    from .backbone import BackboneConfig

    classes = int(inputs["classes"][0])
    config = HFITConfig(
        backbone=BackboneConfig(embed_dim=8, depth=2, heads=2, stages=2, pos_table_side=2),
        num_classes=classes, adapter_heads=2, crop_size=32,
    )
    model = HFIT(config).double()
    logits = torch.zeros(classes, 1, 1, dtype=torch.float64)
    label = np.zeros((1, 1), dtype=np.int64)
    return {"value": model.loss(logits, label).detach().numpy().reshape(1)}


def _op_confusion_metrics(inputs):
    from .metrics import accumulate, compute, new_confusion

    pred = inputs["pred"].astype(np.int64)
    label = inputs["label"].astype(np.int64)
    cm = accumulate(new_confusion(2), pred, label)
    r = compute(cm)
    return {
        "iou": r.iou, "fsc": r.fsc, "pre": r.pre, "rec": r.rec,
        "m_iou": np.asarray([r.m_iou]), "m_fsc": np.asarray([r.m_fsc]),
        "m_pre": np.asarray([r.m_pre]), "m_rec": np.asarray([r.m_rec]),
        "a_acc": np.asarray([r.a_acc]),
    }


REGISTRY = {
    "core.resample.bilinear": _op_resample_bilinear,
    "rhff.recalibrate.constant": _op_recalibrate_constant,
    "hgfi.gated_merge.scalar": _op_gated_merge_scalar,
    "model.loss.uniform": _op_uniform_loss,
    "metrics.confusion": _op_confusion_metrics,
}


def replay_goldens(suite: list[GoldenCase] | None = None) -> ReplayReport:
    """Execute every golden case against the current build."""
    if suite is None:
        suite = load_suite()
    report = ReplayReport()
    for case in suite:
        if case.operation not in REGISTRY:
            report.results.append(CaseResult(case.case_id, False, float("inf"),
                                             f"unknown operation {case.operation!r}"))
            continue
        try:
            outputs = REGISTRY[case.operation](case.inputs)
        except Exception as exc:  # report, don't abort the suite
            report.results.append(CaseResult(case.case_id, False, float("inf"),
                                             f"{type(exc).__name__}: {exc}"))
            continue
        max_diff = 0.0
        detail = []
        passed = True
        for key, expected in case.expected.items():
            if key not in outputs:
                passed = False
                detail.append(f"missing output {key!r}")
                continue
            got = np.asarray(outputs[key], dtype=np.float64)
            if got.shape != expected.shape:
                passed = False
                detail.append(f"{key}: shape {got.shape} vs expected {expected.shape}")
                continue
            diff = np.abs(got - expected)
            max_diff = max(max_diff, float(diff.max()) if diff.size else 0.0)
            if diff.size and diff.max() > case.tolerance:
                passed = False
                worst = np.unravel_index(int(diff.argmax()), diff.shape)
                detail.append(
                    f"{key}{list(worst)}: got {got[worst]!r}, expected {expected[worst]!r}"
                )
        report.results.append(CaseResult(case.case_id, passed, max_diff, "; ".join(detail)))
    return report


@dataclass
class TraceabilityRow:
    formula: int
    name: str
    operation: str
    notes: str


def load_traceability() -> list[TraceabilityRow]:
    rows = json.loads(_fixture_text("traceability.json"))
    return [TraceabilityRow(**row) for row in rows]


def resolve_operation(operation: str):
    """Resolve 'package.module:Attr.attr' to the referenced callable."""
    module_name, _, attr_path = operation.partition(":")
    if not attr_path:
        raise ValueError(f"operation {operation!r} must look like 'module:attr'")
    obj = importlib.import_module(module_name)
    for attr in attr_path.split("."):
        obj = getattr(obj, attr)
    return obj


def validate_traceability() -> list[TraceabilityRow]:
    """Check the table covers formulas 1..15, each mapped to one real callable."""
    rows = load_traceability()
    indices = sorted(row.formula for row in rows)
    if indices != list(range(1, 16)):
        missing = sorted(set(range(1, 16)) - set(indices))
        raise AssertionError(f"traceability table must map formulas 1..15; missing {missing}")
    for row in rows:
        target = resolve_operation(row.operation)
        if not callable(target):
            raise AssertionError(f"formula {row.formula} maps to non-callable {row.operation!r}")
    return rows
