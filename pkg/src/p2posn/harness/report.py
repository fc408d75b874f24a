"""CSV export of monitored metrics and matplotlib figures."""
from __future__ import annotations

import csv
import os
from pathlib import Path

from ..peer import DATA_READ_RATE, DISPATCH_RATE, MESSAGES_RATE
from ..overlay import HOPCOUNT
from ..storage import DDS_RATE, INSTORAGE, LOCAL_OBJECTS, REPLICATIONS, RETRIEVETIME, STORETIME
from .runner import MetricLog, RunResult

# metrics shown in the evaluation figures, in panel order
FIGURE_METRICS = (
    "GLOBAL_PLUGIN_MESSAGING_VIEWINBOX",
    "GLOBAL_PLUGIN_FRIENDS_FRIENDSHIPREQUEST",
    "GLOBAL_PLUGIN_GROUPS_VIEWGROUP",
    "GLOBAL_PLUGIN_PHOTOS_CREATEDALBUM",
    DATA_READ_RATE,
    MESSAGES_RATE,
    DISPATCH_RATE,
    HOPCOUNT,
    RETRIEVETIME,
    STORETIME,
    DDS_RATE,
    LOCAL_OBJECTS,
    INSTORAGE,
    REPLICATIONS,
)

HEADER = ("time_s", "count", "sum", "min", "max", "mean", "stddev")


def _fmt(x) -> str:
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def write_metric_csv(log: MetricLog, name: str, path) -> int:
    rows = log.series(name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for t, stat in rows:
            w.writerow([_fmt(t), *(_fmt(v) for v in stat.row())])
    return len(rows)


def write_csvs(result: RunResult, outdir) -> list[Path]:
    """One CSV per monitored metric plus ``actions.csv``; returns the paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    names = set(result.log.names()) | set(FIGURE_METRICS)
    for name in sorted(names):
        p = out / f"{name}.csv"
        write_metric_csv(result.log, name, p)
        paths.append(p)
    p = out / "actions.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("action", "scheduled", "ok", "skipped", "failed", "killed"))
        for action, c in result.outcomes.items():
            w.writerow((action, sum(c.values()), *(c[o] for o in ("ok", "skipped", "failed", "killed"))))
    paths.append(p)
    return paths


def read_metric_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def plot_metric(path_csv, path_png, title: str | None = None):
    """Mean over time with a min/max band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metric_csv(path_csv)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    if rows:
        t = [r["time_s"] / 60 for r in rows]
        ax.fill_between(t, [r["min"] for r in rows], [r["max"] for r in rows], alpha=0.25, label="min-max")
        ax.plot(t, [r["mean"] for r in rows], lw=1.2, label="mean")
        ax.legend(loc="upper right", fontsize=7)
    else:
        ax.text(0.5, 0.5, "no samples", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("time [min]")
    ax.set_title(title or Path(path_csv).stem, fontsize=8)
    fig.tight_layout()
    fig.savefig(path_png, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_figures(outdir, names=FIGURE_METRICS) -> list[Path]:
    out = Path(outdir)
    paths = []
    for name in names:
        src = out / f"{name}.csv"
        if os.path.exists(src):
            dst = out / f"{name}.png"
            plot_metric(src, dst, name)
            paths.append(dst)
    return paths


def summary_lines(result: RunResult) -> list[str]:
    lines = [f"nodes={result.n} seed={result.seed} online_at_end={result.online} "
             f"sim_time={result.sim_s:.0f}s wall={result.wall_s:.1f}s",
             f"actions scheduled={result.scheduled} ok={result.total('ok')} "
             f"skipped={result.total('skipped')} failed={result.total('failed')} "
             f"killed={result.total('killed')} success={100 * result.success_rate:.2f}%"]
    if result.log.views:
        v = result.log.views[-1]
        lines.append(f"monitoring views={len(result.log.views)} last_view_nodes={v.nodes}")
    return lines
