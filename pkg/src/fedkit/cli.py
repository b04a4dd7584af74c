"""Command-line experiment driver.

Subcommands: gen-data, train-seg, sweep-seg, segment-dataset, train-cls,
gradcam, serve, client. Training commands run the deterministic in-process
simulation; serve/client run the networked mode over TCP. Every report path
writes CSV logs plus rendered PNG figures into the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import datagen, gradcam, reporting, transport, wire
from .config import (
    TASK_CLASSIFICATION,
    TASK_SEGMENTATION,
    ExperimentConfig,
    experiment_from_file,
)
from .errors import ConfigError, FedkitError
from .federation import rounds_to_threshold
from .models import CLS_CNN_PLAIN, CLS_CNN_SKIP, build_network, load_weights

log = logging.getLogger("fedkit")


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise ConfigError(f"address must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _load_config(path, task=None) -> ExperimentConfig:
    exp = experiment_from_file(path)
    if task is not None and exp.task != task:
        raise ConfigError(f"config task is {exp.task!r}, this command needs {task!r}")
    return exp


def _require_dataset(root):
    if not root or not os.path.isfile(os.path.join(root, datagen.MANIFEST_NAME)):
        raise ConfigError(f"dataset not found under {root!r} (run gen-data first)")
    return datagen.load_dataset(root)


def _progress_printer(prefix):
    def cb(record):
        if record.error is None:
            log.info(
                "%s round %d: metric=%.4f loss=%.4f",
                prefix,
                record.round_index,
                record.metric,
                record.loss,
            )
        else:
            log.warning("%s round %d failed: %s", prefix, record.round_index, record.error)

    return cb


def _run_repetitions(exp: ExperimentConfig, train, test, stop_threshold=None):
    """Run `repetitions` simulation runs (seed+rep) and write logs/figures."""
    os.makedirs(exp.output_dir, exist_ok=True)
    results = []
    for rep in range(exp.repetitions):
        cfg = exp.to_fl_config(seed_offset=rep)
        res = transport.run_simulation(
            cfg, train, test, stop_threshold=stop_threshold,
            progress=_progress_printer(f"rep{rep}"),
        )
        reporting.write_metrics_csv(
            res.records, os.path.join(exp.output_dir, f"metrics_rep{rep}.csv")
        )
        results.append(res)
    reporting.save_metric_curves(
        {f"rep{rep}": res.records for rep, res in enumerate(results)},
        exp.eval_metric,
        os.path.join(exp.output_dir, "metrics.png"),
    )
    return results


def _save_best(results, out_dir, name):
    best = max(results, key=lambda r: r.best_metric)
    if best.best_weights is None:
        raise FedkitError("no successful round; nothing to save")
    path = os.path.join(out_dir, name)
    wire.save_weights_file(path, best.best_weights)
    return path, best


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    datagen.build_dataset(args.out, args.per_class, args.seed, args.split)
    print(f"dataset written to {args.out}")
    return 0


def cmd_train_seg(args) -> int:
    exp = _load_config(args.config, TASK_SEGMENTATION)
    train, test, _ = _require_dataset(exp.dataset_root)
    results = _run_repetitions(exp, train, test)
    path, best = _save_best(results, exp.output_dir, "best_seg.flw")
    print(f"best test jaccard {best.best_metric:.4f} (round {best.best_round}); weights: {path}")
    return 0


def cmd_sweep_seg(args) -> int:
    exp = _load_config(args.config, TASK_SEGMENTATION)
    train, test, _ = _require_dataset(exp.dataset_root)
    os.makedirs(exp.output_dir, exist_ok=True)
    sc_grid = [int(s) for s in args.sc_grid.split(",")]
    le_grid = [int(s) for s in args.le_grid.split(",")]
    if not sc_grid or not le_grid:
        raise ConfigError("empty sweep grid")
    rows = []
    for le in le_grid:
        for sc in sc_grid:
            for rep in range(exp.repetitions):
                cfg = dataclasses.replace(
                    exp.to_fl_config(seed_offset=rep),
                    local_epochs=le,
                    selected_per_round=sc,
                )
                try:
                    res = transport.run_simulation(
                        cfg, train, test, stop_threshold=exp.threshold
                    )
                    reached = rounds_to_threshold(res.metric_history, exp.threshold)
                    rows.append((le, sc, rep, reached if reached else "not_reached"))
                except FedkitError as exc:
                    log.warning("sweep cell le=%d sc=%d rep=%d failed: %s", le, sc, rep, exc)
                    rows.append((le, sc, rep, "error"))
                log.info("sweep le=%d sc=%d rep=%d -> %s", le, sc, rep, rows[-1][3])
    reporting.write_rows_csv(
        ["le", "sc", "repetition", "rounds_to_threshold"],
        rows,
        os.path.join(exp.output_dir, "sweep.csv"),
    )
    reporting.save_sweep_figure(
        [(le, sc, rep, v if isinstance(v, int) else None) for le, sc, rep, v in rows],
        exp.threshold,
        os.path.join(exp.output_dir, "sweep.png"),
    )
    print(f"sweep results in {exp.output_dir}/sweep.csv")
    return 0


def cmd_segment_dataset(args) -> int:
    weights = wire.load_weights_file(args.weights)
    datagen.segment_dataset(weights, args.data, args.out)
    print(f"segmented dataset written to {args.out}")
    return 0


def _cls_summary_row(res):
    ok = [r for r in res.records if r.error is None]
    if not ok:
        return ("error", "error", "error", "error")
    return (
        max(r.metric for r in ok),
        min(r.loss for r in ok),
        ok[-1].metric,
        ok[-1].loss,
    )


def cmd_train_cls(args) -> int:
    exp = _load_config(args.config, TASK_CLASSIFICATION)
    if not args.grid:
        train, test, _ = _require_dataset(exp.dataset_root)
        results = _run_repetitions(exp, train, test)
        path, best = _save_best(results, exp.output_dir, "best_cls.flw")
        rows = []
        for rep, res in enumerate(results):
            acc_max, loss_min, acc_final, loss_final = _cls_summary_row(res)
            rows.append(
                (exp.architecture, exp.dataset_kind, exp.num_clients, rep,
                 acc_max, loss_min, acc_final, loss_final)
            )
        reporting.write_rows_csv(
            ["architecture", "dataset_kind", "num_clients", "repetition",
             "max_accuracy", "min_loss", "final_accuracy", "final_loss"],
            rows,
            os.path.join(exp.output_dir, "summary.csv"),
        )
        print(f"best accuracy {best.best_metric:.4f} (round {best.best_round}); weights: {path}")
        return 0

    # comparison grid: architecture x dataset kind x client count
    if not exp.segmented_root:
        raise ConfigError("grid mode requires 'segmented_root' in the config")
    datasets = {
        "full": _require_dataset(exp.dataset_root),
        "segmented": _require_dataset(exp.segmented_root),
    }
    os.makedirs(exp.output_dir, exist_ok=True)
    rows = []
    curves = {}
    for arch in (CLS_CNN_PLAIN, CLS_CNN_SKIP):
        for kind in ("full", "segmented"):
            train, test, _ = datasets[kind]
            for cc in (1, 2, 3):
                tag = f"{arch}_{kind}_cc{cc}"
                cfg = dataclasses.replace(
                    exp.to_fl_config(num_clients=cc),
                    architecture=arch,
                    num_clients=cc,
                    selected_per_round=cc,
                )
                try:
                    res = transport.run_simulation(
                        cfg, train, test, progress=_progress_printer(tag)
                    )
                    reporting.write_metrics_csv(
                        res.records, os.path.join(exp.output_dir, f"metrics_{tag}.csv")
                    )
                    curves[tag] = res.records
                    rows.append((arch, kind, cc) + _cls_summary_row(res))
                except FedkitError as exc:
                    log.warning("grid cell %s failed: %s", tag, exc)
                    rows.append((arch, kind, cc, "error", "error", "error", "error"))
    reporting.write_rows_csv(
        ["architecture", "dataset_kind", "num_clients",
         "max_accuracy", "min_loss", "final_accuracy", "final_loss"],
        rows,
        os.path.join(exp.output_dir, "grid_summary.csv"),
    )
    reporting.save_metric_curves(
        curves, "accuracy", os.path.join(exp.output_dir, "grid_metrics.png")
    )
    print(f"grid summary in {exp.output_dir}/grid_summary.csv")
    return 0


def cmd_gradcam(args) -> int:
    w_full = wire.load_weights_file(args.model_full)
    w_seg = wire.load_weights_file(args.model_seg)
    _, test_full, _ = _require_dataset(args.data)
    if args.segmented_data:
        _, test_seg, _ = _require_dataset(args.segmented_data)
        seg_by_id = {s.sample_id: s for s in test_seg}
    else:
        seg_by_id = None

    os.makedirs(args.out, exist_ok=True)
    targets = [s for s in test_full if s.label == datagen.LABEL_OPACITY][: args.num_samples]

    net_full, _ = build_network(w_full.architecture_id, seed=0)
    load_weights(net_full, w_full)
    net_seg, _ = build_network(w_seg.architecture_id, seed=0)
    load_weights(net_seg, w_seg)

    rows = []
    scores = {"full": [], "segmented": []}
    for s in targets:
        seg_sample = (
            seg_by_id[s.sample_id]
            if seg_by_id is not None
            else datagen.Sample(
                datagen.apply_lung_mask(s.image, s.lung_mask), s.lung_mask, s.label, s.sample_id
            )
        )
        for kind, net, w, sample in (
            ("full", net_full, w_full, s),
            ("segmented", net_seg, w_seg, seg_sample),
        ):
            hm = gradcam.grad_cam(net, sample.image, datagen.LABEL_OPACITY)
            score = gradcam.lung_focus_score(hm.values, s.lung_mask)
            gradcam.save_overlay(
                sample.image, hm.values, os.path.join(args.out, f"{s.sample_id}_{kind}.ppm")
            )
            rows.append((s.sample_id, w.architecture_id, kind, score))
            scores[kind].append(score)
    reporting.write_rows_csv(
        ["sample_id", "model_id", "dataset_kind", "score"],
        rows,
        os.path.join(args.out, "focus_scores.csv"),
    )
    reporting.save_focus_figure(scores, os.path.join(args.out, "focus_scores.png"))
    for kind in ("full", "segmented"):
        mean = float(np.mean(scores[kind])) if scores[kind] else float("nan")
        print(f"mean lung focus score ({kind}): {mean:.4f}")
    return 0


def cmd_serve(args) -> int:
    exp = _load_config(args.config)
    _, test, _ = _require_dataset(exp.dataset_root)
    cfg = exp.to_fl_config()
    if cfg.round_timeout is None:
        cfg.round_timeout = 120.0  # networked default
    os.makedirs(exp.output_dir, exist_ok=True)
    res = transport.serve(
        _parse_addr(args.bind), cfg, test, progress=_progress_printer("serve")
    )
    reporting.write_metrics_csv(
        res.records, os.path.join(exp.output_dir, "metrics.csv"), deterministic=False
    )
    name = "best_seg.flw" if exp.task == TASK_SEGMENTATION else "best_cls.flw"
    path, best = _save_best([res], exp.output_dir, name)
    print(f"best {exp.eval_metric} {best.best_metric:.4f}; weights: {path}")
    return 0


def cmd_client(args) -> int:
    train, _, _ = _require_dataset(args.data)
    return transport.client_run(
        _parse_addr(args.server), args.id, train, expected_arch=args.arch
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedkit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log round progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=222)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", type=float, default=0.9)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-seg", help="federated segmentation training (simulation)")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("sweep-seg", help="(sc, le) segmentation sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--sc-grid", default="1,2,3")
    s.add_argument("--le-grid", default="1,2,3")
    s.set_defaults(func=cmd_sweep_seg)

    d = sub.add_parser("segment-dataset", help="mask a dataset with a segmentation model")
    d.add_argument("--weights", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_segment_dataset)

    c = sub.add_parser("train-cls", help="federated classification training (simulation)")
    c.add_argument("--config", required=True)
    c.add_argument("--grid", action="store_true", help="run the 12-cell comparison grid")
    c.set_defaults(func=cmd_train_cls)

    x = sub.add_parser("gradcam", help="Grad-CAM overlays and lung-focus scores")
    x.add_argument("--model-full", required=True)
    x.add_argument("--model-seg", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--segmented-data", default=None)
    x.add_argument("--num-samples", type=int, default=8)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_gradcam)

    sv = sub.add_parser("serve", help="run the federation server over TCP")
    sv.add_argument("--config", required=True)
    sv.add_argument("--bind", default="127.0.0.1:7700")
    sv.set_defaults(func=cmd_serve)

    cl = sub.add_parser("client", help="run a federation client over TCP")
    cl.add_argument("--server", required=True)
    cl.add_argument("--id", type=int, required=True)
    cl.add_argument("--data", required=True)
    cl.add_argument("--arch", default=None)
    cl.set_defaults(func=cmd_client)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FedkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
