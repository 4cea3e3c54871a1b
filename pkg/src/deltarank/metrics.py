"""The six comparison metrics, the enhancement row, and report rendering.

Units: size and footprint are bytes in records and MB (2**20 bytes) in the
text table; one parameter or activation element costs 4 bytes (float32).
MACs count multiply-accumulates per sample (1 MAC = 2 FLOPs).
"""
from __future__ import annotations

import json
import math
import os
import platform
import statistics
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .model_ir import (
    Conv2D,
    Dense,
    DecomposedConv2D,
    DecomposedDense,
    Model,
    count_params,
    layer_input_shape,
)
from .runtime import forward

BYTES_PER_VALUE = 4
MB = 2**20
REPORT_VERSION = 1
TIME_FIELD = "execution_time_ms"


def layer_macs(layer, in_shape, out_shape) -> int:
    if isinstance(layer, Conv2D):
        g = layer.geom
        return out_shape[1] * out_shape[2] * g.kernel_h * g.kernel_w * g.in_ch * g.out_ch
    if isinstance(layer, Dense):
        return layer.in_features * layer.out_features
    if isinstance(layer, DecomposedConv2D):
        g, r = layer.geom, layer.rank
        _, h, w = in_shape
        _, oh, ow = out_shape
        return (
            h * w * g.in_ch * r  # pointwise in -> r
            + oh * w * g.kernel_h * r  # vertical depthwise
            + oh * ow * g.kernel_w * r  # horizontal depthwise
            + oh * ow * r * g.out_ch  # pointwise r -> out
        )
    if isinstance(layer, DecomposedDense):
        r = layer.rank
        return layer.in_features * r + r + r * layer.out_features
    return 0


def count_macs(model: Model, input_shape=None) -> int:
    """Multiply-accumulates for one sample; activations and pooling count 0."""
    if input_shape is not None and tuple(input_shape) != model.input_shape:
        raise ValueError(f"input shape {tuple(input_shape)} differs from model input {model.input_shape}")
    return sum(
        layer_macs(layer, layer_input_shape(model, i), model.shapes[i])
        for i, layer in enumerate(model.layers)
    )


def memory_footprint(model: Model, input_shape=None) -> int:
    """Bytes for parameters plus every layer output (input included) at batch 1."""
    activations = int(np.prod(model.input_shape)) + sum(int(np.prod(s)) for s in model.shapes)
    return BYTES_PER_VALUE * (count_params(model) + activations)


def measure_time(model: Model, input_shape=None, warmup: int = 5, runs: int = 30, seed: int = 0) -> float:
    """Median wall-clock milliseconds of single-sample forward passes."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    x = np.random.default_rng(seed).standard_normal((1, *model.input_shape))
    for _ in range(warmup):
        forward(model, x)
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        forward(model, x)
        samples.append((time.perf_counter() - t0) * 1e3)
    return max(statistics.median(samples), 1e-9)


def timing_environment() -> dict:
    return {
        "timing_workers": 1,
        "cpu_count": os.cpu_count(),
        "host": f"{platform.system()}-{platform.machine()}",
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


@dataclass
class MetricsRecord:
    accuracy: float
    size_bytes: int
    macs: int
    params: int
    memory_footprint: int
    execution_time_ms: float

    @property
    def size_mb(self) -> float:
        return self.size_bytes / MB


def collect_metrics(model: Model, accuracy: float, time_runs: int = 30) -> MetricsRecord:
    params = count_params(model)
    return MetricsRecord(
        accuracy=float(accuracy),
        size_bytes=BYTES_PER_VALUE * params,
        macs=count_macs(model),
        params=params,
        memory_footprint=memory_footprint(model),
        execution_time_ms=measure_time(model, runs=time_runs),
    )


RATIO_FIELDS = ("size_bytes", "macs", "params", "memory_footprint", "execution_time_ms")


@dataclass
class EnhancementRow:
    accuracy_delta: float
    size: float
    macs: float
    params: float
    memory_footprint: float
    execution_time: float

    def ratios(self):
        return (self.size, self.macs, self.params, self.memory_footprint, self.execution_time)


def format_ratio(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.2f}x"


def format_delta(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def enhancement(original: MetricsRecord, optimized: MetricsRecord) -> EnhancementRow:
    """Signed accuracy change and original/optimized ratios of the other metrics."""
    ratios = []
    for name in RATIO_FIELDS:
        a, b = getattr(original, name), getattr(optimized, name)
        if b == 0:
            warnings.warn(f"optimized {name} is zero; ratio reported as inf")
            ratios.append(math.inf)
        else:
            ratios.append(a / b)
    return EnhancementRow(optimized.accuracy - original.accuracy, *ratios)


# ---------------------------------------------------------------- rendering

# (header, width) of the fixed-width table, in Table-1 column order.
TABLE_COLUMNS = (
    ("Model", 10),
    ("Accuracy (%)", 14),
    ("Size (MB)", 12),
    ("MACs (M)", 12),
    ("#Params (M)", 13),
    ("Memory Footprint (MB)", 23),
    ("Execution Time (ms)", 21),
)


def _cells(name, rec: MetricsRecord):
    return (
        name,
        f"{rec.accuracy:.4f}",
        f"{rec.size_bytes / MB:.4f}",
        f"{rec.macs / 1e6:.4f}",
        f"{rec.params / 1e6:.4f}",
        f"{rec.memory_footprint / MB:.4f}",
        f"{rec.execution_time_ms:.4f}",
    )


def _line(cells):
    return "".join(
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, (_, w)) in enumerate(zip(cells, TABLE_COLUMNS))
    ).rstrip()


def render_table(records: dict, enh: EnhancementRow | None) -> str:
    lines = [_line([h for h, _ in TABLE_COLUMNS])]
    lines.append("-" * sum(w for _, w in TABLE_COLUMNS))
    for name, rec in records.items():
        lines.append(_line(_cells(name, rec)))
    if enh is not None:
        lines.append(_line(("Enh", format_delta(enh.accuracy_delta), *map(format_ratio, enh.ratios()))))
    return "\n".join(lines) + "\n"


def render_report(records: dict, enh: EnhancementRow, config: dict, audit: list, extra: dict | None = None):
    """Structured report (JSON text) and the companion fixed-width table."""
    doc = {
        "report_version": REPORT_VERSION,
        "config": config,
        "rows": {name: asdict(rec) for name, rec in records.items()},
        "enhancement": asdict(enh),
        "enhancement_text": {
            "accuracy_delta": format_delta(enh.accuracy_delta),
            **{k: format_ratio(v) for k, v in zip(
                ("size", "macs", "params", "memory_footprint", "execution_time"), enh.ratios())},
        },
        "audit": audit,
        "environment": timing_environment(),
    }
    if extra:
        doc.update(extra)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    return text, render_table(records, enh)


def load_report(text: str) -> dict:
    doc = json.loads(text)
    if doc.get("report_version") != REPORT_VERSION:
        raise ValueError(f"unsupported report_version {doc.get('report_version')!r}")
    return doc


def records_from_report(doc: dict) -> tuple[dict, EnhancementRow]:
    records = {name: MetricsRecord(**row) for name, row in doc["rows"].items()}
    return records, EnhancementRow(**doc["enhancement"])


def strip_timing(doc):
    """Copy of a report document without timing-dependent fields."""
    if isinstance(doc, dict):
        return {
            k: strip_timing(v)
            for k, v in doc.items()
            if k not in (TIME_FIELD, "execution_time")
        }
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc
