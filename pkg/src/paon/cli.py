"""Command-line interface: ``paon {train,eval,sr,inspect,ablate,synth}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, config_hash, load_checkpoint, restore_shapes, save_checkpoint
from .config import RunConfig, configs_from_blob, load_run_config
from .data import (
    ImageIOError, atomic_write_bytes, list_images, load_pairs, load_png, make_synthetic_dataset, save_png,
)
from .errors import ConfigurationError, NumericDomainError, PaonError, UsageError
from .metrics import bicubic_upscaler, evaluate, format_eval_csv, model_upscaler, psnr_rgb
from .network import SRNet, build_network
from .training import TrainState, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
METRICS_HEADER = "iter,loss,lr,val_psnr"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _model_from_checkpoint(ckpt: Checkpoint) -> SRNet:
    net_cfg, _ = configs_from_blob(ckpt.config)
    model = build_network(net_cfg, seed=0)
    shapes = {k: p.shape for k, p in model.named_parameters()}
    try:
        model.load_state_dict(restore_shapes(ckpt.params, shapes))
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"section 'parameters' does not fit the stored config: {err}") from err
    return model


def _state(ckpt: Checkpoint, shapes) -> TrainState:
    return TrainState(restore_shapes(ckpt.params, shapes), ckpt.optimizer, ckpt.iteration, ckpt.best_val_psnr)


def _checkpoint(rc: RunConfig, state: TrainState) -> Checkpoint:
    return Checkpoint(rc.blob(), state.params, state.optimizer, state.iteration, state.best_val_psnr)


def _load_training_images(root: Path) -> list[np.ndarray]:
    hr_dir = root / "HR"
    if not hr_dir.is_dir():
        raise UsageError(f"training set {root}: missing HR directory")
    files = list_images(hr_dir)
    if not files:
        raise UsageError(f"training set {root}: no PNG images in {hr_dir}")
    return [load_png(f) for f in files]


def _read_metrics(path: Path, upto: int) -> list[str]:
    """Existing metrics rows with iteration <= ``upto`` (for resumed runs)."""
    if not path.exists():
        return []
    rows = path.read_text().splitlines()[1:]
    return [r for r in rows if r and int(r.split(",", 1)[0]) <= upto]


def run_training(rc: RunConfig, resume=None, force: bool = False, stop_after: int | None = None,
                 log=print) -> TrainState:
    """Train per ``rc``, writing ``best.ckpt``, ``final.ckpt`` and ``metrics.csv`` to the output dir."""
    train_images = _load_training_images(rc.train_dir)
    val_pairs = load_pairs(rc.val_dir, rc.network.upscale)
    out = rc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    model = build_network(rc.network, rc.seed)
    shapes = {k: p.shape for k, p in model.named_parameters()}

    resume_state = best_state = None
    rows: list[str] = []
    if resume is not None:
        ckpt = load_checkpoint(resume, rc.blob(), force)
        resume_state = _state(ckpt, shapes)
        best_path = out / "best.ckpt"
        if best_path.exists():
            best_state = _state(load_checkpoint(best_path, rc.blob(), force), shapes)
        rows = _read_metrics(out / "metrics.csv", ckpt.iteration)
        log(f"resuming from iteration {ckpt.iteration}")

    def write_metrics():
        atomic_write_bytes(out / "metrics.csv", ("\n".join([METRICS_HEADER] + rows) + "\n").encode())

    def on_validation(current: TrainState, best: TrainState):
        save_checkpoint(out / "final.ckpt", _checkpoint(rc, current))
        save_checkpoint(out / "best.ckpt", _checkpoint(rc, best))
        write_metrics()
        log(f"iter {current.iteration}: val PSNR {float(rows[-1].split(',')[3]):.3f} dB "
            f"(best {best.best_val_psnr:.3f} @ {best.iteration})")

    result = train(model, train_images, val_pairs, rc.train, resume=resume_state, best=best_state,
                   on_row=rows.append, on_validation=on_validation, stop_after=stop_after)
    save_checkpoint(out / "final.ckpt", _checkpoint(rc, result.final))
    save_checkpoint(out / "best.ckpt", _checkpoint(rc, result.best))
    write_metrics()
    return result.best


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.toy:
        rc = rc.toy()
    if args.output_dir:
        rc = dataclasses.replace(rc, output_dir=Path(args.output_dir))
    best = run_training(rc, args.resume, args.force, args.stop_after)
    print(f"done: best val PSNR {best.best_val_psnr:.3f} dB at iteration {best.iteration}; "
          f"artifacts in {rc.output_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.bicubic:
        if len(args.paths) != 1:
            raise UsageError("eval --bicubic takes a dataset directory only")
        upscaler, dataset = bicubic_upscaler(args.scale), args.paths[0]
    else:
        if len(args.paths) != 2:
            raise UsageError("eval takes a checkpoint and a dataset directory")
        ckpt = load_checkpoint(args.paths[0])
        model = _model_from_checkpoint(ckpt)
        if model.cfg.upscale != args.scale:
            raise UsageError(f"checkpoint upscale x{model.cfg.upscale} does not match --scale {args.scale}")
        upscaler, dataset = model_upscaler(model), args.paths[1]
    if not Path(dataset).is_dir():
        raise UsageError(f"dataset directory {dataset} does not exist")
    records, mean = evaluate(upscaler, dataset, args.scale)
    text = format_eval_csv(records, mean)
    sys.stdout.write(text)
    atomic_write_bytes(args.out, text.encode())
    return EXIT_OK


def cmd_sr(args) -> int:
    model = _model_from_checkpoint(load_checkpoint(args.ckpt))
    image = load_png(args.input)
    save_png(model_upscaler(model)(image), args.output)
    return EXIT_OK


def layer_counts(model: SRNet) -> dict[str, int]:
    """Parameter counts grouped by layer (shifter and PAU parameters belong to their layer)."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        group = name.rsplit(".", 1)[0]
        for suffix in (".shifter", ".pau"):
            group = group.removesuffix(suffix)
        counts[group] = counts.get(group, 0) + p.data.size
    return counts


def inspect_report(ckpt: Checkpoint) -> str:
    model = _model_from_checkpoint(ckpt)
    out = io.StringIO()
    out.write(f"config: {json.dumps(ckpt.config, sort_keys=True)}\n")
    out.write(f"config sha256: {config_hash(ckpt.config)}\n")
    out.write(f"iteration: {ckpt.iteration}\nbest_val_psnr: {ckpt.best_val_psnr:.6f}\n\n")
    counts = layer_counts(model)
    width = max(len(k) for k in counts) + 2
    out.write(f"{'layer':<{width}}params\n")
    for name, n in counts.items():
        out.write(f"{name:<{width}}{n}\n")
    out.write(f"{'total':<{width}}{sum(counts.values())}\n\n")
    out.write("shifters (max |shift| at zero input in px, Frobenius norm of the pooled-feature weights):\n")
    shifters = [(n, l.shifter) for n, l in model.paon_layers() if l.shifter is not None]
    if not shifters:
        out.write("  none\n")
    for name, sh in shifters:
        mag = float(np.max(np.abs(sh.bias_shifts())))
        out.write(f"  {name:<{width}}{mag:.6f}  {float(np.linalg.norm(sh.weight.data)):.6f}\n")
    return out.getvalue()


def cmd_inspect(args) -> int:
    sys.stdout.write(inspect_report(load_checkpoint(args.ckpt)))
    return EXIT_OK


ABLATION_COLUMNS = ("No Shift", "Shift", "Paon-A", "Paon-S", "FL", "LL", "AL")
_PLACEMENT_LABEL = {"first": "FL", "last": "LL", "all": "AL"}


def ablation_grid(rc: RunConfig) -> list[tuple[str, str, str, RunConfig]]:
    """The 12 cells {A, S} x {no shift, shift} x {first, last, all layers}."""
    on = rc.network.shift if rc.network.shift >= 0 else 0
    cells = []
    for variant in ("A", "S"):
        for shift_label, shift in (("No Shift", -1), ("Shift", on)):
            for placement in ("first", "last", "all"):
                net = dataclasses.replace(rc.network, variant=variant, shift=shift, placement=placement)
                cells.append((f"Paon-{variant}", shift_label, _PLACEMENT_LABEL[placement],
                              dataclasses.replace(rc, network=net)))
    return cells


def run_ablation(rc: RunConfig, log=print) -> tuple[str, dict[str, float], float]:
    """Train every grid cell; column values are mean toy PSNRs over the cells sharing that setting."""
    train_images = _load_training_images(rc.train_dir)
    val_pairs = load_pairs(rc.val_dir, rc.network.upscale)
    bicubic = float(np.mean([psnr_rgb(bicubic_upscaler(rc.network.upscale)(lr), hr) for _, hr, lr in val_pairs]))
    results = []
    for variant, shift, place, cell in ablation_grid(rc):
        model = build_network(cell.network, cell.seed)
        psnr = train(model, train_images, val_pairs, cell.train).best.best_val_psnr
        log(f"{variant:<7} {shift:<8} {place}: {psnr:.3f} dB")
        results.append(((variant, shift, place), psnr))
    columns = {c: float(np.mean([p for key, p in results if c in key])) for c in ABLATION_COLUMNS}
    lines = [
        "| " + " | ".join(ABLATION_COLUMNS) + " |",
        "|" + "---|" * len(ABLATION_COLUMNS),
        "| " + " | ".join(f"{columns[c]:.2f}" for c in ABLATION_COLUMNS) + " |",
        "",
        f"Mean validation PSNR (dB) over the grid cells sharing each setting. Bicubic: {bicubic:.2f} dB.",
        "",
        "| variant | shifter | layers | PSNR (dB) |",
        "|---|---|---|---|",
    ]
    lines += [f"| {v} | {s} | {p} | {psnr:.2f} |" for (v, s, p), psnr in results]
    return "\n".join(lines) + "\n", columns, bicubic


def cmd_ablate(args) -> int:
    rc = load_run_config(args.config)
    if args.toy:
        rc = rc.toy()
    table, _, _ = run_ablation(rc, log=lambda m: print(m, file=sys.stderr))
    sys.stdout.write(table)
    out = Path(args.out) if args.out else rc.output_dir / "ablation.md"
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out, table.encode())
    return EXIT_OK


def cmd_synth(args) -> int:
    make_synthetic_dataset(args.out, args.count, args.size, args.seed, tuple(args.scales))
    print(f"wrote {args.count} textures to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paon", description="Pade neuron super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a JSON run config")
    p.add_argument("config")
    p.add_argument("--toy", action="store_true", help="1 block, 8 channels, 500 iterations")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint (usually final.ckpt)")
    p.add_argument("--force", action="store_true", help="load checkpoints whose config hash differs")
    p.add_argument("--stop-after", type=int, metavar="N", help="stop after iteration N (resumable)")
    p.add_argument("--output-dir", help="override the config's output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint (or bicubic) on a dataset")
    p.add_argument("paths", nargs="+", metavar="CKPT DATASET", help="checkpoint and dataset dir (dataset only with --bicubic)")
    p.add_argument("--scale", type=int, choices=(2, 4), required=True)
    p.add_argument("--bicubic", action="store_true", help="evaluate the bicubic baseline")
    p.add_argument("--out", default="eval.csv", help="CSV output path (default: eval.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sr", help="super-resolve one PNG")
    p.add_argument("ckpt")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("ckpt")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="variant x shifter x placement ablation at toy scale")
    p.add_argument("config")
    p.add_argument("--toy", action="store_true", help="apply the toy network and schedule")
    p.add_argument("--out", help="markdown output path (default: <output_dir>/ablation.md)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic band-limited texture dataset")
    p.add_argument("out")
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scales", type=int, nargs="+", default=[2], choices=(2, 4))
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericDomainError as err:
        print(f"paon: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, UsageError, CheckpointError, ImageIOError, PaonError, OSError) as err:
        print(f"paon: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
