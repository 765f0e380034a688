"""Static loss-curve charts from a metrics log."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COMPONENTS = ("total", "l_pred", "l_det", "l_con")


class MetricsError(ValueError):
    pass


def read_metrics(path) -> list[dict]:
    """Parse a newline-delimited JSON metrics file; errors name the offending line."""
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsError(f"{path}: line {lineno} is not valid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "step" not in rec:
                raise MetricsError(f"{path}: line {lineno} is not a metrics record")
            records.append(rec)
    if not records:
        raise MetricsError(f"{path}: no metrics records")
    return records


def plot_losses(records: list[dict], out_path) -> Path:
    """Write loss components against step. SVG output is byte-stable for identical input."""
    out_path = Path(out_path)
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in COMPONENTS:
        if any(name in r for r in records):
            ax.plot(steps, [r.get(name, float("nan")) for r in records], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fmt = out_path.suffix.lstrip(".") or "svg"
    metadata = {"Date": None} if fmt == "svg" else {}
    with matplotlib.rc_context({"svg.hashsalt": "interactpred", "svg.fonttype": "path"}):
        fig.savefig(out_path, format=fmt, metadata=metadata)
    plt.close(fig)
    return out_path


def emit_plot(metrics_path, out_path) -> Path:
    return plot_losses(read_metrics(metrics_path), out_path)
