"""Convergence studies over probe counts and training-set sizes.

A study trains one network per grid cell on nested subsets of a shared
training pool, scores every cell on one fixed validation set, and reduces
the per-run errors to quantile summaries.  The frame ablation repeats the
grid with the only change being how the moving reference frame is obtained,
so both arms share simulations and initialization seeds cell by cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .config import ExperimentConfig
from .dataset import OUTPUT_COLUMNS, DatasetTensors
from .lstm import TrainingDiverged, save_checkpoint
from . import pipeline

METRIC_NAMES = ("l2", "linf")
QUANTILE_NAMES = ("q25", "median", "q75")
TABLE_HEADER = "probes,runs,dof,metric,q25,median,q75"


@dataclass
class CellResult:
    """Raw validation errors for one trained grid cell."""

    n_probes: int
    n_runs: int
    l2: np.ndarray | None      # (M_val, 6), None when training diverged
    linf: np.ndarray | None
    diverged_at: int | None = None

    @property
    def valid(self) -> bool:
        return self.l2 is not None

    def errors(self, metric: str) -> np.ndarray:
        if not self.valid:
            raise ValueError(f"cell ({self.n_probes}, {self.n_runs}) is invalid")
        if metric == "l2":
            return self.l2
        if metric == "linf":
            return self.linf
        raise ValueError(f"unknown metric {metric!r}")


@dataclass
class ConvergenceTable:
    """Quantile summaries on a probes x runs grid, plus the raw cell errors."""

    probe_counts: tuple[int, ...]
    run_counts: tuple[int, ...]
    dof_names: tuple[str, ...]
    rows: dict = field(default_factory=dict)   # (probes, runs, dof, metric) -> (q25, med, q75)
    cells: dict = field(default_factory=dict)  # (probes, runs) -> CellResult

    def quantiles(self, n_probes: int, n_runs: int, dof: str, metric: str):
        return self.rows[(n_probes, n_runs, dof, metric)]

    def median(self, n_probes: int, n_runs: int, dof: str, metric: str) -> float:
        return self.rows[(n_probes, n_runs, dof, metric)][1]

    def add_cell(self, cell: CellResult) -> None:
        key = (cell.n_probes, cell.n_runs)
        self.cells[key] = cell
        for d, dof in enumerate(self.dof_names):
            for metric in METRIC_NAMES:
                if cell.valid:
                    per_run = cell.errors(metric)[:, d]
                    q = metrics.error_quantiles(per_run)
                    triple = (q["q25"], q["median"], q["q75"])
                else:
                    triple = (float("nan"),) * 3
                self.rows[(cell.n_probes, cell.n_runs, dof, metric)] = triple

    def to_csv(self, path) -> None:
        lines = [TABLE_HEADER]
        for probes in self.probe_counts:
            for runs in self.run_counts:
                for dof in self.dof_names:
                    for metric in METRIC_NAMES:
                        q25, med, q75 = self.rows[(probes, runs, dof, metric)]
                        lines.append(f"{probes},{runs},{dof},{metric},{q25:.17g},{med:.17g},{q75:.17g}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ConvergenceTable":
        lines = Path(path).read_text().strip().splitlines()
        if not lines or lines[0] != TABLE_HEADER:
            raise ValueError(f"{path}: not a convergence table (bad header)")
        rows = {}
        probes_seen, runs_seen, dofs_seen = [], [], []
        for line in lines[1:]:
            p, r, dof, metric, q25, med, q75 = line.split(",")
            key = (int(p), int(r), dof, metric)
            rows[key] = (float(q25), float(med), float(q75))
            if int(p) not in probes_seen:
                probes_seen.append(int(p))
            if int(r) not in runs_seen:
                runs_seen.append(int(r))
            if dof not in dofs_seen:
                dofs_seen.append(dof)
        return cls(tuple(probes_seen), tuple(runs_seen), tuple(dofs_seen), rows)


def _cell_tag(n_probes: int, n_runs: int) -> str:
    return f"cell_K{n_probes}_M{n_runs}"


def _evaluate_model(model, validation: DatasetTensors) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic forward pass; per-run per-channel errors in physical units."""
    pred = pipeline.predict_physical(model, validation)
    true = pipeline.true_physical(validation)
    n_runs = true.shape[0]
    l2 = np.empty((n_runs, true.shape[2]))
    linf = np.empty_like(l2)
    for m in range(n_runs):
        err = metrics.run_errors(true[m], pred[m], run_index=m)
        l2[m] = err.l2
        linf[m] = err.linf
    return l2, linf


def _train_cell(
    cfg: ExperimentConfig,
    training_pool,
    components,
    validation_trajs,
    val_components,
    n_probes: int,
    n_runs: int,
    frame_source: str,
    out_dir: Path | None,
):
    """Train and score one cell, reusing on-disk artifacts when present."""
    tag = _cell_tag(n_probes, n_runs)
    err_path = ckpt_path = invalid_path = None
    if out_dir is not None:
        err_path = out_dir / f"{tag}_errors.npz"
        ckpt_path = out_dir / f"{tag}.ckpt.npz"
        invalid_path = out_dir / f"{tag}_invalid.json"
        if err_path.exists():
            saved = np.load(err_path)
            return CellResult(n_probes, n_runs, saved["l2"], saved["linf"]), None
        if invalid_path.exists():
            info = json.loads(invalid_path.read_text())
            return CellResult(n_probes, n_runs, None, None, info["epoch"]), None

    layout = pipeline.layout_for(cfg, n_probes)
    subset_trajs = training_pool[:n_runs]
    subset_comps = components[:n_runs]
    training, frame = pipeline.build_training_set(cfg, subset_trajs, subset_comps, layout, frame_source)
    init_seed = pipeline.cell_seed(cfg.network.init_seed, n_probes, n_runs)
    try:
        model, history = pipeline.train_on(cfg, training, init_seed=init_seed)
    except TrainingDiverged as exc:
        if invalid_path is not None:
            invalid_path.write_text(json.dumps({"epoch": exc.epoch}))
        return CellResult(n_probes, n_runs, None, None, exc.epoch), None

    validation = pipeline.build_validation_set(
        cfg, validation_trajs, val_components, layout, training, frame, frame_source
    )
    l2, linf = _evaluate_model(model, validation)
    if out_dir is not None:
        save_checkpoint(ckpt_path, model, history, extras={"n_probes": n_probes, "n_runs": n_runs})
        np.savez(err_path, l2=l2, linf=linf)
    return CellResult(n_probes, n_runs, l2, linf), model


def _simulate_pools(cfg: ExperimentConfig, workers=None):
    """Training and validation ensembles with their wave components."""
    n_workers = pipeline.worker_count(workers)
    trajs_t, comps_t = pipeline.simulate_ensemble(cfg, pipeline.training_seeds(cfg), workers=n_workers)
    trajs_v, comps_v = pipeline.simulate_ensemble(cfg, pipeline.validation_seeds(cfg), workers=n_workers)
    return trajs_t, comps_t, trajs_v, comps_v


def convergence_study(
    cfg: ExperimentConfig,
    frame_source: str | None = None,
    out_dir=None,
    workers=None,
    pools=None,
) -> ConvergenceTable:
    """Train the full probes x runs grid and summarize validation errors.

    Cells are keyed by deterministic seeds, so rerunning the study (or
    resuming it from ``out_dir`` after an interruption) yields the same
    table.  A diverged cell is recorded as invalid and the study continues.
    """
    source = cfg.study.frame_source if frame_source is None else frame_source
    max_runs = max(cfg.study.run_counts)
    if max_runs > cfg.simulation.n_training_runs:
        raise ValueError("study run counts exceed the simulated training pool")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    if pools is None:
        pools = _simulate_pools(cfg, workers=workers)
    trajs_t, comps_t, trajs_v, comps_v = pools

    dof_names = OUTPUT_COLUMNS[cfg.simulation.mode]
    table = ConvergenceTable(tuple(cfg.study.probe_counts), tuple(cfg.study.run_counts), dof_names)
    for n_probes in cfg.study.probe_counts:
        for n_runs in cfg.study.run_counts:
            cell, _ = _train_cell(
                cfg, trajs_t, comps_t, trajs_v, comps_v, n_probes, n_runs, source, out_dir
            )
            table.add_cell(cell)
    return table


def frame_ablation(
    cfg: ExperimentConfig, out_dir=None, workers=None
) -> tuple[ConvergenceTable, ConvergenceTable]:
    """The same grid twice — estimated frame vs per-run actual frame.

    Simulated runs and per-cell initialization seeds are shared between the
    arms, so the frame source is the only difference.
    """
    pools = _simulate_pools(cfg, workers=workers)
    base = Path(out_dir) if out_dir is not None else None
    est_dir = base / "estimated" if base is not None else None
    act_dir = base / "actual" if base is not None else None
    estimated = convergence_study(cfg, "estimated", out_dir=est_dir, workers=workers, pools=pools)
    actual = convergence_study(cfg, "actual", out_dir=act_dir, workers=workers, pools=pools)
    return estimated, actual


def best_worst_runs(cell: CellResult, dof_names) -> dict:
    """Per DoF and metric, the validation-run indices with least/greatest error."""
    picks = {}
    for d, dof in enumerate(dof_names):
        picks[dof] = {}
        for metric in METRIC_NAMES:
            err = cell.errors(metric)[:, d]
            picks[dof][metric] = (int(np.argmin(err)), int(np.argmax(err)))
    return picks


def export_run_history(path, times, true_outputs, predicted_outputs, dof_names) -> None:
    """Write one validation run as delimited text: time, then true/pred pairs."""
    header = ["t"]
    for dof in dof_names:
        header += [f"{dof}_true", f"{dof}_pred"]
    cols = [np.asarray(times, dtype=float)]
    for d in range(len(dof_names)):
        cols.append(np.asarray(true_outputs[:, d], dtype=float))
        cols.append(np.asarray(predicted_outputs[:, d], dtype=float))
    data = np.column_stack(cols)
    lines = [",".join(header)]
    for row in data:
        lines.append(",".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ChannelPdfComparison:
    """Model-vs-oracle density comparison for one output channel."""

    dof: str
    edges: np.ndarray
    oracle_density: np.ndarray
    model_density: np.ndarray
    l1_distance: float
    tail_l1_distance: float
    tail_lower: float
    tail_upper: float


def pdf_comparison(
    true_outputs: np.ndarray,
    model_outputs: np.ndarray,
    dof_names,
    max_bins: int | None = None,
) -> list[ChannelPdfComparison]:
    """Per-channel histogram distances on bins fitted to the oracle samples.

    Both inputs are (runs, steps, channels) in physical units; samples pool
    all runs and steps.  Tails are compared beyond two oracle standard
    deviations on each side of the oracle mean.
    """
    true_flat = np.asarray(true_outputs, dtype=float).reshape(-1, len(dof_names))
    model_flat = np.asarray(model_outputs, dtype=float).reshape(-1, len(dof_names))
    out = []
    for d, dof in enumerate(dof_names):
        oracle = true_flat[:, d]
        model = model_flat[:, d]
        edges = metrics.freedman_diaconis_edges(oracle, max_bins=max_bins)
        p_true = metrics.pdf_estimate(oracle, edges)
        p_model = metrics.pdf_estimate(model, edges)
        dist = metrics.pdf_l1_distance(p_true, p_model)
        mu, sigma = oracle.mean(), oracle.std()
        tail = metrics.tail_l1_distance(p_true, p_model, mu - 2.0 * sigma, mu + 2.0 * sigma)
        out.append(
            ChannelPdfComparison(
                dof, edges, p_true.density, p_model.density, dist, tail,
                mu - 2.0 * sigma, mu + 2.0 * sigma,
            )
        )
    return out


def oracle_resampling_baseline(
    true_outputs: np.ndarray, dof_names, max_bins: int | None = None
) -> list[float]:
    """Distance between two half-pools of the same oracle data, per channel.

    Runs are split by parity of their index; the distance that remains is
    pure sampling noise and sets the floor the model comparison sits on.
    """
    true = np.asarray(true_outputs, dtype=float)
    if true.shape[0] < 2:
        raise ValueError("need at least two runs to form a resampling baseline")
    half_a = true[0::2].reshape(-1, len(dof_names))
    half_b = true[1::2].reshape(-1, len(dof_names))
    full = true.reshape(-1, len(dof_names))
    floors = []
    for d in range(len(dof_names)):
        edges = metrics.freedman_diaconis_edges(full[:, d], max_bins=max_bins)
        p_a = metrics.pdf_estimate(half_a[:, d], edges)
        p_b = metrics.pdf_estimate(half_b[:, d], edges)
        floors.append(metrics.pdf_l1_distance(p_a, p_b))
    return floors


def export_pdf_comparison(path, comparison: ChannelPdfComparison) -> None:
    """Plot-ready density file: bin center, oracle density, model density."""
    centers = 0.5 * (comparison.edges[:-1] + comparison.edges[1:])
    lines = [f"# dof={comparison.dof} l1={comparison.l1_distance:.17g} "
             f"tail_l1={comparison.tail_l1_distance:.17g}",
             "center,oracle_density,model_density"]
    for c, po, pm in zip(centers, comparison.oracle_density, comparison.model_density):
        lines.append(f"{c:.17g},{po:.17g},{pm:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")
