"""CSV artifacts, run manifests and figure rendering for the command line runner.

Every CSV carries a '#'-prefixed metadata header.  Artifact files contain
no timestamps, so re-running a command with an identical configuration and
seed reproduces them byte for byte; wall-clock timing lives only in the
manifest.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

TOOL_VERSION = "0.1.0"


def _fmt(x) -> str:
    if isinstance(x, float):
        return "%.17g" % x
    return str(x)


def write_csv(path, meta: Mapping, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {key}={_fmt(val)}" for key, val in meta.items()]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    meta: dict[str, str] = {}
    header: list[str] = []
    rows: list[list[str]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line.lstrip("# ").partition("=")
            meta[key] = val
            continue
        if not header:
            header = line.split(",")
            continue
        rows.append(line.split(","))
    return meta, header, rows


@dataclass(frozen=True)
class CheckRow:
    name: str
    value: float
    reference: float
    tolerance: float
    status: bool
    stderr: float | None = None
    zscore: float | None = None
    kind: str = ""

    def as_row(self) -> list:
        return [
            self.kind,
            self.name,
            self.value,
            "" if self.stderr is None else self.stderr,
            self.reference,
            "" if self.zscore is None else self.zscore,
        ]


CHECK_COLUMNS = ["check", "name", "value", "stderr", "reference", "zscore"]


def write_check_csv(path, meta: Mapping, checks: Sequence[CheckRow]) -> Path:
    return write_csv(path, meta, CHECK_COLUMNS, [c.as_row() for c in checks])


def write_manifest(
    out_dir,
    subcommand: str,
    config: Mapping,
    checks: Sequence[CheckRow],
    artifacts: Sequence[str],
    wall_clock: float,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": dict(config),
        "checks": [
            {
                "name": c.name,
                "value": c.value,
                "stderr": c.stderr,
                "reference": c.reference,
                "tolerance": c.tolerance,
                "zscore": c.zscore,
                "status": "pass" if c.status else "fail",
            }
            for c in checks
        ],
        "artifacts": sorted(artifacts),
        "wall_clock_s": wall_clock,
        "tool_version": TOOL_VERSION,
        "all_passed": all(c.status for c in checks),
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_manifests(run_dir) -> list[dict]:
    run_dir = Path(run_dir)
    out = []
    for path in sorted(run_dir.rglob("manifest.json")):
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        data["_path"] = str(path)
        out.append(data)
    return out


# ---------------------------------------------------------------------------
# figures (rendered to files next to the delimited output)


def _plt():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def save_line_figure(path, xs, series: Mapping[str, Sequence[float]], xlabel: str,
                     ylabel: str, title: str, logy: bool = False) -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, ys in series.items():
        ax.plot(xs, ys, label=label, lw=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_check_figure(path, checks: Sequence[CheckRow], title: str) -> Path:
    plt = _plt()
    names = [c.name for c in checks]
    values = [0.0 if c.zscore is None else c.zscore for c in checks]
    colors = ["tab:green" if c.status else "tab:red" for c in checks]
    fig, ax = plt.subplots(figsize=(7.0, 0.5 + 0.35 * max(len(names), 1)))
    ax.barh(range(len(names)), values, color=colors)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.axvline(3.0, color="k", lw=0.8, ls="--")
    ax.axvline(-3.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("z-score (bar) / pass-fail (color)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


class StopWatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
