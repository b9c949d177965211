"""Run summary: aggregates stage CSVs into Markdown + JSON and draws the plots."""

from __future__ import annotations

import json
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .stages import RunPaths, read_csv  # noqa: E402

# deterministic PNG bytes across reruns
_PNG_META = {"Software": None}

# (title, attribute on RunPaths)
SECTIONS = [
    ("Embedding imperceptibility", "embedding"),
    ("Secret-view extraction", "extraction"),
    ("Angle sweep", "angles"),
    ("Noise attacks", "attacks"),
    ("Verification", "verification"),
]


def _float(v) -> Optional[float]:
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def plot_angles(rows: List[dict], path) -> None:
    angles = [float(r["angle"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(angles)), [float(r["psnr"]) for r in rows], "o-", label="PSNR (dB)")
    ax.set_xticks(range(len(angles)), [f"{a:g}" for a in angles])
    ax.set_xlabel("rotation about z (deg)")
    ax.set_ylabel("PSNR (dB)")
    ax2 = ax.twinx()
    ax2.plot(range(len(angles)), [float(r["ssim"]) for r in rows], "s--", color="tab:orange", label="SSIM")
    ax2.set_ylabel("SSIM")
    fig.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_attacks(rows: List[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    kinds = [r["kind"] for r in rows]
    ax.bar(kinds, [float(r["nc"]) for r in rows], color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_ylabel("NC")
    for i, r in enumerate(rows):
        ax.text(i, float(r["nc"]) + 0.02, f"{float(r['nc']):.3f}", ha="center")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def _table(rows: List[dict]) -> str:
    cols = list(rows[0].keys())
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = []
        for c in cols:
            f = _float(r[c])
            cells.append(f"{f:.4f}" if f is not None and c != "frame" else str(r[c]))
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out)


def cmd_report(run_dir) -> Dict[str, object]:
    """Write ``summary.md`` and ``summary.json``; missing stages are marked, never fatal."""
    paths = RunPaths(run_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    summary: Dict[str, object] = {}
    md = [f"# Run summary: {paths.root.name}", ""]
    for title, attr in SECTIONS:
        path = getattr(paths, attr)
        md += [f"## {title}", ""]
        if not path.is_file():
            summary[attr] = "missing"
            md += [f"_missing: `{path.name}` not found_", ""]
            continue
        if path.suffix == ".json":
            data = json.loads(path.read_text())
            summary[attr] = data
            md += [f"- decision: **{data['decision']}** (nc {data['nc']:.4f} vs tau {data['tau']})", ""]
            continue
        rows = [{k: v for k, v in r.items() if k != "field_sha256"} for r in read_csv(path)]
        summary[attr] = rows
        md += [_table(rows) if rows else "_empty_", ""]
    if isinstance(summary.get("angles"), list) and summary["angles"]:
        plot_angles(summary["angles"], paths.angles_plot)
    if isinstance(summary.get("attacks"), list) and summary["attacks"]:
        plot_attacks(summary["attacks"], paths.attacks_plot)
    (paths.root / "summary.md").write_text("\n".join(md))
    (paths.root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
