"""Command-line entry point: generate, train, predict, evaluate, study.

Every command is driven by one YAML config plus a handful of flags, and is
deterministic given the config's seeds.  Output directories are never
overwritten silently; pass --force to replace existing results.  Worker
processes for run simulation are controlled by the SHIPID_WORKERS
environment variable.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline, studies
from .config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    save_config,
    validate_config,
    with_mode,
)
from .dataset import OUTPUT_COLUMNS, assemble, load_dataset, save_dataset
from .encounter import EncounterFrame, ProbeLayout, actual_frame, probe_elevations, save_frame
from .lstm import (
    TrainingDiverged,
    integrate_velocities,
    load_checkpoint,
    mc_predict,
    save_checkpoint,
    save_loss_history,
)
from .metrics import error_quantiles
from .vessel import SimulationDiverged, load_trajectory, save_trajectory

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

_MODE_FLAGS = {"course-keeping": "course_keeping", "turning-circle": "turning_circle"}


def _load_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "mode", None):
        cfg = with_mode(cfg, _MODE_FLAGS[args.mode])
    validate_config(cfg)
    return cfg


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} already has contents; pass --force to replace them")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _training_dir(data_dir: Path) -> Path:
    """Accept the generate output root, its dataset directory, or a dataset."""
    for candidate in (data_dir, data_dir / "training", data_dir / "dataset" / "training"):
        if (candidate / "meta").is_file():
            return candidate
    return data_dir


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(Path(args.out), args.force)
    workers = pipeline.worker_count()

    train_seeds = pipeline.training_seeds(cfg)
    val_seeds = pipeline.validation_seeds(cfg)
    trajs_t, comps_t = pipeline.simulate_ensemble(cfg, train_seeds, workers=workers)
    trajs_v, comps_v = pipeline.simulate_ensemble(cfg, val_seeds, workers=workers)

    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    for traj in trajs_t:
        save_trajectory(runs_dir / f"train_{traj.seed}.traj", traj)
    for traj in trajs_v:
        save_trajectory(runs_dir / f"val_{traj.seed}.traj", traj)

    layout = pipeline.layout_for(cfg, cfg.probes.count)
    source = cfg.study.frame_source
    training, frame = pipeline.build_training_set(cfg, trajs_t, comps_t, layout, source)
    validation = pipeline.build_validation_set(
        cfg, trajs_v, comps_v, layout, training, frame, source
    )
    save_frame(out / "frame.csv", frame)
    dataset_dir = out / "dataset"
    save_dataset(dataset_dir / "training", training)
    save_dataset(dataset_dir / "validation", validation)
    save_config(out / "config.yaml", cfg)
    print(f"wrote {len(trajs_t)} training + {len(trajs_v)} validation runs to {out}")
    return EXIT_OK


def _frame_extras(frame: EncounterFrame, layout: ProbeLayout) -> dict:
    return {
        "frame_times": frame.times,
        "frame_position": frame.position,
        "frame_yaw": frame.yaw,
        "probe_offsets": layout.offsets,
    }


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data_dir = _training_dir(Path(args.data))
    training = load_dataset(data_dir)
    if training.n_probes != cfg.probes.count:
        raise ConfigError(
            f"dataset has {training.n_probes} probes but config says {cfg.probes.count}"
        )
    out = _prepare_out(Path(args.out), args.force)
    init_seed = args.seed if args.seed is not None else cfg.network.init_seed
    model, history = pipeline.train_on(cfg, training, init_seed=init_seed)

    extras = {}
    candidates = [data_dir / "frame.csv", data_dir.parent / "frame.csv",
                  data_dir.parent.parent / "frame.csv"]
    frame_path = next((p for p in candidates if p.exists()), None)
    if frame_path is not None:
        from .encounter import load_frame

        frame = load_frame(frame_path)
        layout = pipeline.layout_for(cfg, cfg.probes.count)
        extras = _frame_extras(frame, layout)
        model.meta["frame_source"] = cfg.study.frame_source
    save_checkpoint(out / "checkpoint.npz", model, history, extras=extras)
    save_loss_history(out / "loss_history.csv", history)
    final = history[-1] if history else float("nan")
    print(f"trained {cfg.network.epochs} epochs; final loss {final:.6g}; checkpoint in {out}")
    return EXIT_OK


def _probe_inputs_for_run(cfg, model, extras, traj, components):
    """Standardized probe matrix for one run, using the checkpoint's frame."""
    layout = ProbeLayout(np.asarray(extras["probe_offsets"], dtype=float))
    source = model.meta.get("frame_source", cfg.study.frame_source)
    if source == "actual":
        frame = actual_frame(traj)
    else:
        frame = EncounterFrame(
            np.asarray(extras["frame_times"], dtype=float),
            np.asarray(extras["frame_position"], dtype=float),
            np.asarray(extras["frame_yaw"], dtype=float),
        )
        if frame.times.shape != traj.times.shape or not np.allclose(frame.times, traj.times):
            raise ConfigError("run time grid does not match the checkpoint's stored frame")
    elev = probe_elevations(components, frame, layout)
    return model.input_standardizer.apply(elev)


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    model, _, extras = load_checkpoint(args.checkpoint)
    if "probe_offsets" not in extras:
        raise ConfigError("checkpoint carries no probe layout; retrain with frame data present")
    traj = load_trajectory(args.run)
    components = pipeline.components_for_seed(cfg, traj.seed)
    inputs = _probe_inputs_for_run(cfg, model, extras, traj, components)

    ensemble = mc_predict(model, inputs, n_samples=args.samples, seed=args.seed or 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to replace it")

    mode = model.meta.get("mode", traj.mode)
    dofs = OUTPUT_COLUMNS[mode]
    header = ["t"]
    for dof in dofs:
        header += [f"{dof}_mean", f"{dof}_std", f"{dof}_lo", f"{dof}_hi"]
    lo = ensemble.mean - ensemble.band_halfwidth
    hi = ensemble.mean + ensemble.band_halfwidth
    cols = [traj.times]
    for d in range(len(dofs)):
        cols += [ensemble.mean[:, d], ensemble.std[:, d], lo[:, d], hi[:, d]]
    body = np.column_stack(cols)
    lines = [",".join(header)]
    for row in body:
        lines.append(",".join(f"{v:.17g}" for v in row))
    out.write_text("\n".join(lines) + "\n")

    dt = float(traj.times[1] - traj.times[0])
    x, y, psi = integrate_velocities(
        ensemble.mean, mode, dt, initial_pose=(traj.x[0], traj.y[0], traj.yaw[0])
    )
    track_path = out.with_name(out.stem + "_track" + out.suffix)
    track_lines = ["t,x,y,yaw"]
    for row in np.column_stack([traj.times, x, y, psi]):
        track_lines.append(",".join(f"{v:.17g}" for v in row))
    track_path.write_text("\n".join(track_lines) + "\n")
    print(f"wrote {out} and {track_path} ({args.samples} samples)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    model, _, extras = load_checkpoint(args.checkpoint)
    out = _prepare_out(Path(args.out), args.force)
    workers = pipeline.worker_count()

    mode = model.meta.get("mode", cfg.simulation.mode)
    if mode != cfg.simulation.mode:
        cfg = with_mode(cfg, mode)
    dofs = OUTPUT_COLUMNS[mode]
    trajs, comps = pipeline.simulate_ensemble(
        cfg, pipeline.validation_seeds(cfg), workers=workers
    )

    layout = ProbeLayout(np.asarray(extras["probe_offsets"], dtype=float))
    source = model.meta.get("frame_source", cfg.study.frame_source)
    if source == "actual":
        frame_arg = [actual_frame(t) for t in trajs]
    else:
        frame_arg = EncounterFrame(
            np.asarray(extras["frame_times"], dtype=float),
            np.asarray(extras["frame_position"], dtype=float),
            np.asarray(extras["frame_yaw"], dtype=float),
        )
    validation = assemble(
        trajs,
        comps,
        frame_arg,
        layout,
        mode,
        standardizers=(model.input_standardizer, model.output_standardizer),
    )

    l2, linf = studies._evaluate_model(model, validation)
    lines = ["run,dof,l2,linf"]
    for m in range(l2.shape[0]):
        for d, dof in enumerate(dofs):
            lines.append(f"{m},{dof},{l2[m, d]:.17g},{linf[m, d]:.17g}")
    (out / "errors.csv").write_text("\n".join(lines) + "\n")

    summary = ["dof,metric,q25,median,q75"]
    for d, dof in enumerate(dofs):
        for metric, arr in (("l2", l2), ("linf", linf)):
            q = error_quantiles(arr[:, d])
            summary.append(
                f"{dof},{metric},{q['q25']:.17g},{q['median']:.17g},{q['q75']:.17g}"
            )
    (out / "summary.csv").write_text("\n".join(summary) + "\n")

    true = pipeline.true_physical(validation)
    pred = pipeline.predict_physical(model, validation)
    comparisons = studies.pdf_comparison(true, pred, dofs, max_bins=cfg.study.pdf_max_bins)
    if true.shape[0] >= 2:
        floors = studies.oracle_resampling_baseline(true, dofs, max_bins=cfg.study.pdf_max_bins)
    else:
        floors = [float("nan")] * len(dofs)
    pdf_summary = ["dof,l1_distance,baseline_l1,tail_l1"]
    for comp, floor in zip(comparisons, floors):
        studies.export_pdf_comparison(out / f"pdf_{comp.dof}.csv", comp)
        pdf_summary.append(
            f"{comp.dof},{comp.l1_distance:.17g},{floor:.17g},{comp.tail_l1_distance:.17g}"
        )
    (out / "pdf_summary.csv").write_text("\n".join(pdf_summary) + "\n")

    cell = studies.CellResult(model.n_probes, l2.shape[0], l2, linf)
    picks = studies.best_worst_runs(cell, dofs)
    for dof_idx, dof in enumerate(dofs):
        for metric in studies.METRIC_NAMES:
            best, worst = picks[dof][metric]
            for label, run_idx in (("best", best), ("worst", worst)):
                path = out / f"{label}_{dof}_{metric}.csv"
                studies.export_run_history(
                    path, trajs[run_idx].times, true[run_idx], pred[run_idx], dofs
                )
    print(f"evaluated {l2.shape[0]} validation runs; results in {out}")
    return EXIT_OK


def _write_convergence_figures(out: Path, table: studies.ConvergenceTable, prefix: str) -> None:
    """One plot-ready file per metric and DoF: error quantiles vs training runs."""
    for metric in studies.METRIC_NAMES:
        for dof in table.dof_names:
            lines = ["runs," + ",".join(
                f"K{p}_q25,K{p}_median,K{p}_q75" for p in table.probe_counts
            )]
            for runs in table.run_counts:
                vals = []
                for probes in table.probe_counts:
                    q25, med, q75 = table.quantiles(probes, runs, dof, metric)
                    vals += [q25, med, q75]
                lines.append(",".join([str(runs)] + [f"{v:.17g}" for v in vals]))
            (out / f"{prefix}_{metric}_{dof}.csv").write_text("\n".join(lines) + "\n")


def _export_largest_cell_runs(cfg, out: Path, cell_dir: Path, pools) -> None:
    """Best/worst validation time histories for the largest grid cell."""
    n_probes = max(cfg.study.probe_counts)
    n_runs = max(cfg.study.run_counts)
    tag = studies._cell_tag(n_probes, n_runs)
    ckpt = cell_dir / f"{tag}.ckpt.npz"
    err_file = cell_dir / f"{tag}_errors.npz"
    if not ckpt.exists() or not err_file.exists():
        return
    model, _, _ = load_checkpoint(ckpt)
    trajs_t, comps_t, trajs_v, comps_v = pools
    layout = pipeline.layout_for(cfg, n_probes)
    source = cfg.study.frame_source
    training, frame = pipeline.build_training_set(
        cfg, trajs_t[:n_runs], comps_t[:n_runs], layout, source
    )
    validation = pipeline.build_validation_set(
        cfg, trajs_v, comps_v, layout, training, frame, source
    )
    true = pipeline.true_physical(validation)
    pred = pipeline.predict_physical(model, validation)
    saved = np.load(err_file)
    dofs = OUTPUT_COLUMNS[cfg.simulation.mode]
    cell = studies.CellResult(n_probes, n_runs, saved["l2"], saved["linf"])
    picks = studies.best_worst_runs(cell, dofs)
    for dof in dofs:
        for metric in studies.METRIC_NAMES:
            best, worst = picks[dof][metric]
            for label, run_idx in (("best", best), ("worst", worst)):
                studies.export_run_history(
                    out / f"{label}_{dof}_{metric}.csv",
                    trajs_v[run_idx].times,
                    true[run_idx],
                    pred[run_idx],
                    dofs,
                )


def cmd_study(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)  # studies resume from partial cells
    workers = pipeline.worker_count()

    if args.kind == "convergence":
        pools = studies._simulate_pools(cfg, workers=workers)
        table = studies.convergence_study(
            cfg, out_dir=out / "cells", workers=workers, pools=pools
        )
        table.to_csv(out / "table.csv")
        _write_convergence_figures(out, table, "fig_convergence")
        _export_largest_cell_runs(cfg, out, out / "cells", pools)
        n_invalid = sum(not c.valid for c in table.cells.values())
        print(f"convergence study done: {len(table.cells)} cells ({n_invalid} diverged); table in {out}")
        return EXIT_OK

    estimated, actual = studies.frame_ablation(cfg, out_dir=out / "cells", workers=workers)
    estimated.to_csv(out / "estimated.csv")
    actual.to_csv(out / "actual.csv")
    _write_convergence_figures(out, estimated, "fig_estimated")
    _write_convergence_figures(out, actual, "fig_actual")
    print(f"frame ablation done; tables in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shipid",
        description="Wave-to-motion surrogate models: data generation, training, and studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML experiment configuration")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="replace existing outputs")
        p.add_argument("--mode", choices=sorted(_MODE_FLAGS), help="override the run mode")
        p.add_argument("--seed", type=int, help="override the relevant seed")

    p = sub.add_parser("generate", help="simulate runs and build datasets")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a model to a generated dataset")
    p.add_argument("data", help="dataset directory from `generate`")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Monte Carlo prediction for one run file")
    p.add_argument("checkpoint", help="trained checkpoint (.npz)")
    p.add_argument("run", help="run file (.traj)")
    p.add_argument("--samples", type=int, default=100, help="MC dropout samples")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint on the validation set")
    p.add_argument("checkpoint", help="trained checkpoint (.npz)")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("study", help="convergence or frame-ablation study")
    p.add_argument("kind", choices=("convergence", "frame-ablation"))
    common(p)
    p.set_defaults(func=cmd_study)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDiverged, TrainingDiverged) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FileExistsError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
