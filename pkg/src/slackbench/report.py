"""Report files: JSON documents, table-layout CSV, and figures.

Every file is written to a temporary name in the target directory and
renamed into place, so a failed run never leaves a partial file behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trace import CurrentTrace, State  # noqa: E402

DETECTOR_LABELS = {"control": "Control", "pacer_t": "PACER-T", "pacer_e": "PACER-E", "pacer_c": "PACER-C"}
SECTION_LABELS = {"latency": "Latency (ms)", "energy": "Energy (uJ)"}
STATE_COLORS = {State.IDLE: "#d9d9d9", State.ACTIVE: "#9ecae1", State.WAIT: "#fdd0a2", State.VERIFY: "#c7e9c0"}


def write_atomic(path, data: str | bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        mode = "wb" if isinstance(data, bytes) else "w"
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, doc) -> Path:
    return write_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _pct(x: float) -> str:
    return f"{x:.1f}%"


def _val(x: float) -> str:
    return f"{x:.2f}"


def table_csv(rows: list[dict], detector: str) -> str:
    """Rows from DeviceResult.rows() laid out as Stage/Control/PACER/Diff columns.

    Devices with latency rows get one block per quantity; energy-only
    devices get one line per device with the All-stage energy.
    """
    name = DETECTOR_LABELS.get(detector, detector)
    has_iodvs = any("treatment_iodvs" in r for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    energy_only = all(r["quantity"] == "energy" for r in rows) and len({r["device"] for r in rows}) > 1
    head = ["Stage", "Control", name, "Diff"]
    if has_iodvs:
        head += ["PACER+IODVS", "Diff"]

    def cells(r):
        out = [_val(r["control"]), _val(r["treatment"]), _pct(r["diff_pct"])]
        if has_iodvs:
            out += [_val(r["treatment_iodvs"]), _pct(r["diff_iodvs_pct"])]
        return out

    if energy_only:
        w.writerow(["Device"] + head[1:])
        w.writerow([SECTION_LABELS["energy"]])
        for r in rows:
            if r["stage"] == "All":
                w.writerow([r["device"]] + cells(r))
        return buf.getvalue()
    w.writerow(head)
    for q in ("latency", "energy"):
        block = [r for r in rows if r["quantity"] == q]
        if not block:
            continue
        w.writerow([SECTION_LABELS[q]])
        for r in block:
            w.writerow([r["stage"]] + cells(r))
    return buf.getvalue()


def format_table(rows: list[dict], detector: str) -> str:
    """Fixed-width rendering of table_csv for the terminal."""
    lines = list(csv.reader(io.StringIO(table_csv(rows, detector))))
    width = max(len(r) for r in lines)
    cols = [max((len(r[k]) for r in lines if k < len(r) and len(r) > 1), default=0) for k in range(width)]
    out = []
    for r in lines:
        if len(r) == 1:
            out.append(r[0])
        else:
            out.append("  ".join(c.rjust(cols[k]) if k else c.ljust(cols[k]) for k, c in enumerate(r)))
    return "\n".join(out) + "\n"


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata={"Software": None})
    plt.close(fig)
    return write_atomic(path, buf.getvalue())


def plot_stage_bars(rows: list[dict], detector: str, path, title: str = "") -> Path:
    """Grouped bars per stage: control, detector, detector+IODVS."""
    quantities = [q for q in ("latency", "energy") if any(r["quantity"] == q for r in rows)]
    fig, axes = plt.subplots(1, len(quantities), figsize=(4.2 * len(quantities), 3.4), squeeze=False)
    name = DETECTOR_LABELS.get(detector, detector)
    for ax, q in zip(axes[0], quantities):
        block = [r for r in rows if r["quantity"] == q]
        labels = [r["stage"] if len({b["device"] for b in block}) == 1 else f"{r['device']}\n{r['stage']}" for r in block]
        series = [("Control", "control"), (name, "treatment")]
        if any("treatment_iodvs" in r for r in block):
            series.append(("PACER+IODVS", "treatment_iodvs"))
        x = np.arange(len(block))
        w = 0.8 / len(series)
        for k, (lab, key) in enumerate(series):
            ax.bar(x + (k - (len(series) - 1) / 2) * w, [r.get(key, np.nan) for r in block], w, label=lab)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel(SECTION_LABELS[q])
        ax.legend(fontsize=7, frameon=False)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def plot_trials(reports: dict, stage: str, path, warmup: int = 0) -> Path:
    """Per-trial values of one stage for several reports (needs per_trial data)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    key = stage.split("_")[1]
    scale = 1e3 if key == "latency" else 1e6
    for label, rep in reports.items():
        ys = [row[stage] * scale for row in rep.per_trial]
        ax.plot(range(len(ys)), ys, marker=".", ms=3, lw=1, label=label)
    if warmup:
        ax.axvspan(-0.5, warmup - 0.5, color="0.92", zorder=0)
    ax.set_xlabel("trial")
    ax.set_ylabel(f"{stage.replace('_', ' ')} ({'ms' if key == 'latency' else 'uJ'})")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(trace: CurrentTrace, path, marks: dict | None = None, filtered=None, title: str = "") -> Path:
    """Current against time with state bands and optional vertical markers (seconds)."""
    fig, ax = plt.subplots(figsize=(6.5, 3.6))
    t_ms = trace.times * 1e3
    st = trace.state
    edges = np.flatnonzero(np.diff(st)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [len(st)]])
    ts_ms = trace.sample_period * 1e3
    seen = set()
    for a, b in zip(starts, stops):
        s = State(int(st[a]))
        ax.axvspan(a * ts_ms, b * ts_ms, color=STATE_COLORS[s], lw=0,
                   label=None if s in seen else s.label)
        seen.add(s)
    ax.plot(t_ms, trace.current * 1e3, lw=0.5, color="0.3", label="current")
    if filtered is not None:
        ax.plot(t_ms, np.asarray(filtered) * 1e3, lw=1, color="C3", label="filtered")
    for label, t in (marks or {}).items():
        if t is not None:
            ax.axvline(t * 1e3, ls="--", lw=1, color="k")
            ax.annotate(label, (t * 1e3, ax.get_ylim()[1]), fontsize=7, rotation=90, va="top", ha="right")
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("current (mA)")
    ax.set_xlim(0, len(st) * ts_ms)
    ax.legend(fontsize=7, frameon=False, loc="upper center", bbox_to_anchor=(0.5, -0.18), ncol=6)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)
