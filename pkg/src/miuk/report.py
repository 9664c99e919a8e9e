"""Delimited reports with companion figures.

Every report writes a CSV and renders the matching PNG next to it, so a
run directory is self-describing without loading anything into Python.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _cell(value) -> str:
    return "" if value is None else repr(float(value)) if isinstance(value, float) else str(value)


def write_history_report(history: Sequence[Mapping], out_dir: str | Path) -> dict[str, Path]:
    """Per-epoch loss/dev-metric table plus a loss curve figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "history.csv"
    png_path = out / "loss_curve.png"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "dev_f1", "dev_ign_f1"])
        for entry in history:
            writer.writerow([_cell(entry.get(k))
                             for k in ("epoch", "loss", "dev_f1", "dev_ign_f1")])

    epochs = [entry["epoch"] for entry in history]
    losses = [entry["loss"] for entry in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    dev = [(entry["epoch"], entry["dev_f1"]) for entry in history
           if entry.get("dev_f1") is not None]
    if dev:
        twin = ax.twinx()
        twin.plot([e for e, _ in dev], [f for _, f in dev], marker="s",
                  color="tab:orange", label="dev F1")
        twin.set_ylabel("dev F1")
        twin.set_ylim(0.0, 1.0)
    ax.set_title("training history")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}


def write_ksweep_report(rows: Sequence[Mapping], out_dir: str | Path) -> dict[str, Path]:
    """One row per concept-list size K, with an F1-vs-K figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ksweep.csv"
    png_path = out / "ksweep.png"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "f1", "ign_f1"])
        for row in rows:
            writer.writerow([_cell(row.get(k)) for k in ("k", "f1", "ign_f1")])

    fig, ax = plt.subplots(figsize=(6, 4))
    ks = [row["k"] for row in rows]
    ax.plot(ks, [row["f1"] for row in rows], marker="o", label="F1")
    ax.plot(ks, [row["ign_f1"] for row in rows], marker="s", label="Ign F1")
    ax.set_xlabel("top-K concepts")
    ax.set_ylabel("score")
    ax.set_xticks(ks)
    ax.legend()
    ax.set_title("concept list size sweep")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}
