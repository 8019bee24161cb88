"""Command-line entry point.

Exit codes: 0 success, 1 numeric failure (non-finite loss, balancing that does
not converge), 2 usage, format or I/O error.
"""

import argparse
import io
import json
import logging
import os
import sys

import numpy as np
import torch

from . import data, metrics, network, training
from .config import ConfigError, build_config, load_config_file
from .errors import ConvergenceError, DomainError, FormatError, NumericalError, ScaleError

log = logging.getLogger("hicscan")

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2

PATCH_ARCHIVE = "{chrom}.npz"
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad flags or missing inputs."""


# Command-line flags that map onto RunConfig keys. Each tuple is
# (flag, config key, type); flags default to None so that only values the
# user typed override the file.
CONFIG_FLAGS = {
    "synth": [("--n", "n", int), ("--seed", "seed", int), ("--tads", "tads", int),
              ("--loops", "loops", int), ("--depth", "depth", float), ("--bin-size", "bin_size", int)],
    "preprocess": [("--ratio", "ratio", float), ("--seed", "seed", int), ("--percentile", "percentile", float),
                   ("--validation-chroms", "validation_chroms", str), ("--test-chroms", "test_chroms", str)],
    "train": [("--base-dim", "base_dim", int), ("--blocks-per-stage", "blocks_per_stage", int),
              ("--state-size", "state_size", int), ("--batch-size", "batch_size", int), ("--lr", "lr", float),
              ("--lr-schedule", "lr_schedule", str),
              ("--epochs", "epochs", int), ("--seed", "seed", int), ("--checkpoint-every", "checkpoint_every", int),
              ("--threads", "threads", int)],
    "enhance": [("--percentile", "percentile", float), ("--threads", "threads", int)],
    "evaluate": [("--max-distance", "max_distance", int), ("--normalize", "normalize", str),
                 ("--percentile", "percentile", float)],
    "flops": [("--base-dim", "base_dim", int), ("--blocks-per-stage", "blocks_per_stage", int),
              ("--state-size", "state_size", int)],
    "erf": [("--base-dim", "base_dim", int), ("--blocks-per-stage", "blocks_per_stage", int),
            ("--state-size", "state_size", int), ("--seed", "seed", int), ("--samples", "erf_samples", int)],
    "loopscore": [],
}


def _add_common(p):
    p.add_argument("--config", metavar="FILE",
                   help="key = value configuration file ('default' for built-in defaults)")
    p.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")


def build_parser():
    parser = argparse.ArgumentParser(prog="hicscan", description="Contact-map enhancement with selective-scan UNets.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        for flag, key, typ in CONFIG_FLAGS[name]:
            p.add_argument(flag, dest=f"cfg_{key}", type=typ, default=None, help=f"config key '{key}'")
        return p

    p = command("synth", "write a synthetic contact map")
    p.add_argument("--out", help="output map path (.txt/.dense for dense, otherwise COO)")
    p.add_argument("--chrom", default="chrSynth", help="chromosome label stored in the file")

    p = command("preprocess", "balance, downsample, normalize and tile maps into patch pairs")
    p.add_argument("--in", dest="inputs", action="append", help="input map (repeatable)")
    p.add_argument("--out-dir", help="directory for patch archives and manifest.json")
    p.add_argument("--split", choices=["auto", "train", "validation", "test"], default="auto",
                   help="force a split instead of deriving it from the chromosome label")
    p.add_argument("--chrom", help="chromosome label (single input only)")

    p = command("train", "train a model on preprocessed patches")
    p.add_argument("--data", help="directory written by 'preprocess'")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--history", help="loss history CSV path")

    p = command("enhance", "enhance a low-coverage map with a trained checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")

    p = command("evaluate", "score a predicted map against a target map")
    p.add_argument("--pred")
    p.add_argument("--target")
    p.add_argument("--out", help="metric CSV path")
    p.add_argument("--distance-csv", help="distance-stratified PCC CSV path")
    p.add_argument("--windowed", dest="cfg_windowed_ssim", action="store_const", const=True, default=None,
                   help="11x11 windowed SSIM instead of global statistics")

    p = command("flops", "count forward-pass flops")
    p.add_argument("--layers", action="store_true", help="also print the per-layer breakdown")

    p = command("erf", "effective receptive field of the centre output pixel")
    p.add_argument("--checkpoint", help="trained model (default: freshly initialised)")
    p.add_argument("--baseline", action="store_true", help="use the two-convolution baseline instead")
    p.add_argument("--out", help="CSV grid path (default: stdout)")

    p = command("loopscore", "loop weighted scores from overlap counts")
    p.add_argument("--counts", help="A[l1,s1],A[l2,s1],A[l1,s2],A[l2,s2]")
    p.add_argument("--totals", help="N[l1],N[l2]")
    p.add_argument("--lines", default="GM12878,K562", help="the two cell-line names")
    p.add_argument("--out", help="CSV path (default: text table on stdout)")
    return parser


def resolve_config(args):
    file_values = {}
    if args.config and args.config != "default":
        file_values = load_config_file(args.config)
    flags = {k[len("cfg_"):]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return build_config(file_values, flags)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"directory does not exist: {parent}")


def _write_bytes_atomic(path, payload):
    network._write_atomic(path, payload)


def _set_threads(cfg):
    if cfg.threads:
        torch.set_num_threads(cfg.threads)


def model_config(cfg):
    return network.ModelConfig(base_dim=cfg.base_dim, blocks_per_stage=cfg.blocks_per_stage,
                               state_size=cfg.state_size, global_residual=cfg.global_residual)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args, cfg):
    _require(args, "out")
    _ensure_parent(args.out)
    params = data.SynthParams(depth=cfg.depth, tads=cfg.tads, loops=cfg.loops, bin_size=cfg.bin_size)
    cmap = data.synthesize_map(cfg.n, seed=cfg.seed, params=params, chrom=args.chrom)
    data.save_map(cmap, args.out)
    print(f"wrote {cfg.n}x{cfg.n} map to {args.out}")


def cmd_preprocess(args, cfg):
    _require(args, "inputs", "out_dir")
    if args.chrom and len(args.inputs) > 1:
        raise UsageError("--chrom applies to a single input map")
    os.makedirs(args.out_dir, exist_ok=True)
    maps = [data.load_map(path, chrom=args.chrom) for path in args.inputs]
    labels = [m.chrom or os.path.splitext(os.path.basename(p))[0] for m, p in zip(maps, args.inputs)]
    if len(set(labels)) != len(labels):
        raise UsageError(f"duplicate chromosome labels among inputs: {labels}")
    splits = data.split_dataset(labels, cfg.chrom_set("validation_chroms"), cfg.chrom_set("test_chroms"))
    entries = []
    for cmap, label, path in zip(maps, labels, args.inputs):
        pairs = data.prepare_pairs(cmap, cfg.ratio, cfg.seed, balance_tol=cfg.balance_tol,
                                   balance_iter=cfg.balance_iter, percentile=cfg.percentile)
        archive = PATCH_ARCHIVE.format(chrom=label)
        buf = _npz_bytes(inputs=pairs.inputs.patches.astype(np.float32),
                         targets=pairs.targets.patches.astype(np.float32),
                         origins=np.asarray(pairs.inputs.origins, dtype=np.int64).reshape(-1, 2))
        _write_bytes_atomic(os.path.join(args.out_dir, archive), buf)
        split = splits.assignment(label) if args.split == "auto" else args.split
        entries.append({
            "source": os.path.abspath(path),
            "chrom": label,
            "split": split,
            "archive": archive,
            "n": cmap.n,
            "patches": len(pairs.inputs),
            "origins": [list(o) for o in pairs.inputs.origins],
            "input_scale": pairs.input_scale,
            "target_scale": pairs.target_scale,
        })
        print(f"{label}: {len(pairs.inputs)} patch pairs, split={split}")
    manifest = {
        "ratio": cfg.ratio,
        "seed": cfg.seed,
        "percentile": cfg.percentile,
        "patch_size": data.PATCH_SIZE,
        "maps": entries,
    }
    data.write_text_atomic(os.path.join(args.out_dir, MANIFEST), json.dumps(manifest, indent=2) + "\n")


def _npz_bytes(**arrays):
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def load_split(directory, split):
    """Concatenated ``(inputs, targets)`` for one split of a preprocessed directory."""
    with open(os.path.join(directory, MANIFEST)) as fh:
        manifest = json.load(fh)
    xs, ys = [], []
    for entry in manifest["maps"]:
        if entry["split"] != split:
            continue
        with np.load(os.path.join(directory, entry["archive"])) as archive:
            xs.append(archive["inputs"])
            ys.append(archive["targets"])
    if not xs:
        return None
    return np.concatenate(xs), np.concatenate(ys)


def cmd_train(args, cfg):
    _require(args, "data", "out")
    _ensure_parent(args.out)
    _set_threads(cfg)
    try:
        train_set = load_split(args.data, "train")
        val_set = load_split(args.data, "validation")
    except (OSError, KeyError, ValueError) as err:
        raise UsageError(f"cannot read preprocessed data in {args.data}: {err}") from None
    if train_set is None:
        raise UsageError(f"no training patches in {args.data}")
    torch.manual_seed(cfg.seed)
    model = network.Model(model_config(cfg))
    tcfg = training.TrainConfig(batch_size=cfg.batch_size, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                eps=cfg.eps, epochs=cfg.epochs, seed=cfg.seed,
                                checkpoint_every=cfg.checkpoint_every,
                                drop_empty_targets=cfg.drop_empty_targets, lr_schedule=cfg.lr_schedule)

    def periodic(epoch, state):
        network.save_checkpoint(f"{args.out}.epoch{epoch}", model, state)

    result = training.train(model, train_set, tcfg, validation=val_set, on_checkpoint=periodic)
    network.save_checkpoint(args.out, model, result.best_state)
    if args.history:
        data.write_text_atomic(args.history, result.history_csv())
    print(f"initial train L1 {result.initial_train_l1:.6g}, final train L1 {result.final_train_l1:.6g}, "
          f"best epoch {result.best_epoch}")


@torch.no_grad()
def enhance_values(model, values):
    """Tile a normalized map, predict every patch, reassemble and symmetrize."""
    side = model.config.side
    patches = data.extract_patches(values, size=side)
    x = torch.as_tensor(patches.patches, dtype=torch.float32).unsqueeze(1)
    model.eval()
    pred = torch.cat([model(x[i:i + 64]) for i in range(0, len(x), 64)]).squeeze(1).clamp(0, 1)
    patches.patches = pred.numpy().astype(np.float64)
    out = data.reassemble(patches)
    return (out + out.T) / 2


def cmd_enhance(args, cfg):
    _require(args, "checkpoint", "input", "out")
    _ensure_parent(args.out)
    _set_threads(cfg)
    model = network.load_checkpoint(args.checkpoint)
    cmap = data.load_map(args.input)
    norm = data.normalize_values(data.balance(cmap, cfg.balance_tol, cfg.balance_iter), cfg.percentile)
    enhanced = enhance_values(model, norm.values)
    data.save_map(data.ContactMap(enhanced, cmap.bin_size, cmap.chrom), args.out)
    print(f"wrote enhanced {enhanced.shape[0]}x{enhanced.shape[0]} map to {args.out}")


def _scaled(cmap, cfg):
    values = cmap.counts
    if cfg.normalize == "always" or (cfg.normalize == "auto" and values.max() > 1):
        return data.normalize_values(values, cfg.percentile).values
    return values


def cmd_evaluate(args, cfg):
    _require(args, "pred", "target")
    pred_map, target_map = data.load_map(args.pred), data.load_map(args.target)
    if pred_map.n != target_map.n:
        raise UsageError(f"maps differ in size: {pred_map.n} vs {target_map.n}")
    pred, target = _scaled(pred_map, cfg), _scaled(target_map, cfg)
    pp = data.extract_patches(pred)
    tp = data.extract_patches(target)
    report = metrics.evaluate_patches(pp.patches, tp.patches, windowed=cfg.windowed_ssim)
    profile = metrics.pcc_by_distance(pred, target, cfg.max_distance)
    report.per_distance = profile.rows
    if profile.skipped:
        report.notes.append(f"{len(profile.skipped)} constant diagonal(s) skipped in the distance profile")
    sys.stdout.write(report.to_text())
    if args.out:
        _ensure_parent(args.out)
        data.write_text_atomic(args.out, report.to_csv())
    if args.distance_csv:
        _ensure_parent(args.distance_csv)
        data.write_text_atomic(args.distance_csv, profile.to_csv())


def cmd_flops(args, cfg):
    report = network.count_flops(model_config(cfg))
    if args.layers:
        for name, flops in report.layers:
            print(f"{name:<16} {flops / 1e9:12.6f}")
    print(f"{report.gflops:.6f}")


def cmd_erf(args, cfg):
    torch.manual_seed(cfg.seed)
    if args.baseline:
        model = network.ConvBaseline(cfg.base_dim)
        side = data.PATCH_SIZE
    else:
        model = network.load_checkpoint(args.checkpoint) if args.checkpoint else network.Model(model_config(cfg))
        side = model.config.side
    grid = network.effective_receptive_field(model, n_samples=cfg.erf_samples, seed=cfg.seed, side=side)
    text = "\n".join(",".join(f"{v:.6g}" for v in row) for row in grid) + "\n"
    if args.out:
        _ensure_parent(args.out)
        data.write_text_atomic(args.out, text)
    else:
        sys.stdout.write(text)


def _int_list(text, name):
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated integers, got {text!r}") from None


def cmd_loopscore(args, cfg):
    _require(args, "counts", "totals")
    lines = tuple(s.strip() for s in args.lines.split(","))
    loops = metrics.LoopSets.from_counts(_int_list(args.counts, "counts"), _int_list(args.totals, "totals"), lines)
    rows = metrics.loop_weighted_score(loops)
    if args.out:
        _ensure_parent(args.out)
        data.write_text_atomic(args.out, metrics.loop_table_csv(rows))
    sys.stdout.write(metrics.loop_table_text(rows))
    if not all(r.defined for r in rows):
        print("warning: zero denominator for at least one super-enhancer set", file=sys.stderr)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "flops": cmd_flops,
    "erf": cmd_erf,
    "loopscore": cmd_loopscore,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        COMMANDS[args.command](args, cfg)
    except (NumericalError, ConvergenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FormatError, DomainError, ScaleError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
