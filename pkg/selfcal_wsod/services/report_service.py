"""
report_service.py — static training/evaluation reports.

Inputs are run directories (each holding a saliency_log.csv and optionally a
metrics.csv from `eval`) plus, optionally, a label store with epoch snapshots.

Outputs, all under one report directory:
  curves.png          loss (and held-out MAE when logged) per epoch, one line per run
  comparison.csv      per-epoch join of two or more runs (omitted for a single run)
  progress.png        Y1 | epoch 1..N | ground truth strips from the store snapshots
  report.xlsx         one sheet per run: per-epoch log and metrics (openpyxl)
  report.pdf          one-page summary with the figures embedded (fpdf2)
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import openpyxl  # noqa: E402
import pandas as pd  # noqa: E402
from fpdf import FPDF  # noqa: E402
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side  # noqa: E402
from openpyxl.utils import get_column_letter  # noqa: E402

from selfcal_wsod.core.errors import ReportError  # noqa: E402
from selfcal_wsod.modules.datasets import load_mask  # noqa: E402
from selfcal_wsod.modules.label_store import PseudoLabelStore  # noqa: E402

logger = logging.getLogger(__name__)

LOG_FILE = "saliency_log.csv"
METRICS_FILE = "metrics.csv"


@dataclass
class RunSummary:
    label: str
    epochs: pd.DataFrame                       # epoch, lambda, loss, val_mae
    metrics: Optional[pd.DataFrame] = None     # id, s_measure, e_measure, f_measure, mae


@dataclass
class ReportResult:
    out_dir: Path
    files: list[Path] = field(default_factory=list)


# ─────────────────────────────────────────────────────────────
# LOADING
# ─────────────────────────────────────────────────────────────

def epoch_table(log_path: str | Path) -> pd.DataFrame:
    """Collapse a per-batch training log to one row per epoch."""
    log = pd.read_csv(log_path)
    if log.empty:
        raise ReportError(f"Training log is empty: {log_path}", code="EMPTY_LOG")
    grouped = log.groupby("epoch", sort=True)
    table = pd.DataFrame({
        "lambda": grouped["lambda"].last(),
        "loss": grouped["loss"].mean(),
    })
    if "val_mae" in log.columns:
        table["val_mae"] = grouped["val_mae"].max()  # one filled row per epoch
    return table.reset_index()


def load_run(label: str, run_dir: str | Path, metrics_csv: Optional[str | Path] = None) -> RunSummary:
    """Training log from `run_dir`; metrics from `metrics_csv` or `run_dir/metrics.csv`."""
    run_dir = Path(run_dir)
    log_path = run_dir / LOG_FILE
    if not log_path.is_file():
        raise ReportError(f"No {LOG_FILE} in {run_dir}", code="RUN_NOT_FOUND")
    metrics_path = Path(metrics_csv) if metrics_csv else run_dir / METRICS_FILE
    metrics = pd.read_csv(metrics_path) if metrics_path.is_file() else None
    return RunSummary(label=label, epochs=epoch_table(log_path), metrics=metrics)


def comparison_table(runs: list[RunSummary]) -> Optional[pd.DataFrame]:
    """Outer join of the per-epoch tables on epoch; None with fewer than two runs."""
    if len(runs) < 2:
        return None
    joined: Optional[pd.DataFrame] = None
    for run in runs:
        part = run.epochs.set_index("epoch").add_suffix(f"_{run.label}")
        joined = part if joined is None else joined.join(part, how="outer")
    return joined.reset_index()


def _metric_means(run: RunSummary) -> Optional[pd.Series]:
    if run.metrics is None:
        return None
    mean_row = run.metrics[run.metrics["id"] == "MEAN"]
    if mean_row.empty:
        return run.metrics.drop(columns="id").mean()
    return mean_row.drop(columns="id").iloc[0].astype(float)


# ─────────────────────────────────────────────────────────────
# FIGURES
# ─────────────────────────────────────────────────────────────

def plot_curves(runs: list[RunSummary], path: Path) -> Path:
    with_val = any(r.epochs.get("val_mae") is not None and r.epochs["val_mae"].notna().any() for r in runs)
    fig, axes = plt.subplots(1, 2 if with_val else 1, figsize=(10 if with_val else 5, 3.5), squeeze=False)
    for run in runs:
        axes[0][0].plot(run.epochs["epoch"], run.epochs["loss"], marker="o", label=run.label)
        if with_val and "val_mae" in run.epochs:
            axes[0][1].plot(run.epochs["epoch"], run.epochs["val_mae"], marker="o", label=run.label)
    axes[0][0].set_title("training loss")
    axes[0][0].set_xlabel("epoch")
    if with_val:
        axes[0][1].set_title("held-out MAE")
        axes[0][1].set_xlabel("epoch")
    for ax in axes[0]:
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def progress_strip(store: PseudoLabelStore, path: Path, stems: Optional[list[str]] = None,
                   gt_dir: Optional[Path] = None, max_images: int = 4) -> Optional[Path]:
    """Rows of Y1 | Y_epoch1 … Y_epochN | ground truth for a few training images."""
    snapshots = store.snapshots()
    if not snapshots:
        logger.warning(f"No epoch snapshots under {store.root}; progress strip skipped")
        return None
    last_dir = snapshots[-1][1]
    stems = [s for s in (stems or store.stems) if (last_dir / f"{s}.png").is_file()][:max_images]
    if not stems:
        return None

    columns = ["Y1"] + [f"epoch {n}" for n, _ in snapshots]
    if gt_dir is not None:
        columns.append("ground truth")
    fig, axes = plt.subplots(len(stems), len(columns), squeeze=False,
                             figsize=(1.4 * len(columns), 1.4 * len(stems)))
    for row, stem in enumerate(stems):
        panels = [load_mask(store.original_path(stem))]
        panels += [load_mask(d / f"{stem}.png") for _, d in snapshots]
        if gt_dir is not None:
            gt_path = Path(gt_dir) / f"{stem}.png"
            panels.append(load_mask(gt_path) if gt_path.is_file() else None)
        for col, panel in enumerate(panels):
            ax = axes[row][col]
            if panel is not None:
                ax.imshow(panel, cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(columns[col], fontsize=7)
        axes[row][0].set_ylabel(stem, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ─────────────────────────────────────────────────────────────
# XLSX
# ─────────────────────────────────────────────────────────────

def _write_sheet(ws, title: str, frame: pd.DataFrame, start_row: int) -> int:
    header_font = Font(name="Calibri", bold=True, color="FFFFFF", size=11)
    header_fill = PatternFill(start_color="1F4E79", end_color="1F4E79", fill_type="solid")
    thin = Side(style="thin")
    border = Border(left=thin, right=thin, top=thin, bottom=thin)

    ws.cell(row=start_row, column=1, value=title).font = Font(bold=True, size=12, color="1F4E79")
    for col, name in enumerate(frame.columns, 1):
        cell = ws.cell(row=start_row + 1, column=col, value=str(name))
        cell.font = header_font
        cell.fill = header_fill
        cell.alignment = Alignment(horizontal="center")
        cell.border = border
    for r, values in enumerate(frame.itertuples(index=False), start=start_row + 2):
        for col, value in enumerate(values, 1):
            cell = ws.cell(row=r, column=col, value=None if pd.isna(value) else value)
            cell.border = border
            if isinstance(value, float):
                cell.number_format = "0.0000"
    return start_row + len(frame) + 3


def write_xlsx(runs: list[RunSummary], comparison: Optional[pd.DataFrame], path: Path) -> Path:
    wb = openpyxl.Workbook()
    wb.remove(wb.active)
    for run in runs:
        ws = wb.create_sheet(title=run.label[:31])
        row = _write_sheet(ws, f"{run.label}: training", run.epochs, 1)
        if run.metrics is not None:
            _write_sheet(ws, f"{run.label}: metrics", run.metrics, row)
        for i in range(1, 8):
            ws.column_dimensions[get_column_letter(i)].width = 14
    if comparison is not None:
        ws = wb.create_sheet(title="comparison")
        _write_sheet(ws, "per-epoch comparison", comparison, 1)
    wb.save(path)
    return path


# ─────────────────────────────────────────────────────────────
# PDF
# ─────────────────────────────────────────────────────────────

class ReportPDF(FPDF):
    """Portrait one-page summary."""

    def __init__(self, title: str):
        super().__init__(orientation="P", unit="mm", format="A4")
        self.title_text = title
        self.set_auto_page_break(auto=True, margin=15)

    def header(self):
        self.set_font("Helvetica", "B", 14)
        self.cell(0, 8, self.title_text, new_x="LMARGIN", new_y="NEXT", align="C")
        self.set_font("Helvetica", "", 8)
        self.cell(0, 5, f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M')}",
                  new_x="LMARGIN", new_y="NEXT", align="C")
        self.ln(3)

    def add_run_table(self, runs: list[RunSummary]):
        headers = ["run", "epochs", "final loss", "S", "E", "F", "MAE"]
        widths = [50, 18, 24, 22, 22, 22, 22]
        self.set_font("Helvetica", "B", 8)
        self.set_fill_color(31, 78, 121)
        self.set_text_color(255, 255, 255)
        for w, h in zip(widths, headers):
            self.cell(w, 6, h, border=1, fill=True, align="C")
        self.ln()
        self.set_text_color(0, 0, 0)
        self.set_font("Helvetica", "", 8)
        for run in runs:
            means = _metric_means(run)
            values = [run.label[:30], str(int(run.epochs["epoch"].max())), f"{run.epochs['loss'].iloc[-1]:.4f}"]
            if means is None:
                values += ["-"] * 4
            else:
                values += [f"{means['s_measure']:.3f}", f"{means['e_measure']:.3f}",
                           f"{means['f_measure']:.3f}", f"{means['mae']:.3f}"]
            for w, v in zip(widths, values):
                self.cell(w, 5, v, border=1, align="C")
            self.ln()
        self.ln(3)

    def add_figure(self, path: Optional[Path]):
        if path is None:
            return
        self.image(str(path), w=self.epw)
        self.ln(2)


def write_pdf(runs: list[RunSummary], figures: list[Optional[Path]], path: Path) -> Path:
    pdf = ReportPDF("Self-calibrated saliency: training report")
    pdf.add_page()
    pdf.add_run_table(runs)
    for figure in figures:
        pdf.add_figure(figure)
    pdf.output(str(path))
    return path


# ─────────────────────────────────────────────────────────────
# ENTRY POINT
# ─────────────────────────────────────────────────────────────

def build_report(run_dirs: dict[str, str | Path], out_dir: str | Path,
                 metrics: Optional[dict[str, str | Path]] = None,
                 store_dir: Optional[str | Path] = None,
                 gt_dir: Optional[str | Path] = None) -> ReportResult:
    if not run_dirs:
        raise ReportError("At least one run directory is required", code="NO_RUNS")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = ReportResult(out_dir=out_dir)

    metrics = metrics or {}
    runs = [load_run(label, path, metrics.get(label)) for label, path in run_dirs.items()]
    curves = plot_curves(runs, out_dir / "curves.png")
    result.files.append(curves)

    comparison = comparison_table(runs)
    if comparison is not None:
        path = out_dir / "comparison.csv"
        comparison.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
        result.files.append(path)

    progress = None
    if store_dir is not None and (Path(store_dir) / PseudoLabelStore.META_FILE).is_file():
        store = PseudoLabelStore.open(store_dir)
        progress = progress_strip(store, out_dir / "progress.png",
                                  gt_dir=Path(gt_dir) if gt_dir else None)
        if progress is not None:
            result.files.append(progress)

    result.files.append(write_xlsx(runs, comparison, out_dir / "report.xlsx"))
    result.files.append(write_pdf(runs, [curves, progress], out_dir / "report.pdf"))
    logger.info(f"Report: {len(result.files)} files -> {out_dir}")
    return result
