"""Command line: ``stnmamba {synth,train,eval,score,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data/config validation error,
3 numeric failure (non-finite loss). ``$STNMAMBA_OUT`` supplies the output
root when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .data import ClipDataset, SynthSpec, index_dataset, index_frames, load_frame, synthesize_dataset
from .errors import ConfigError, DataError, ModeError, NumericError, ShapeError
from .evaluate import fuse_and_auc, score_frames, score_split, sweep_values, write_score_csv, VideoScores
from .model import ABLATIONS, ModelConfig, STNMamba, load_checkpoint
from .scoring import TAU
from .train import LOSS_ABLATIONS, TrainConfig, latest_checkpoint, train, truncate_loss_log
from .viz import save_error_map, save_normality_curve

log = logging.getLogger("stnmamba")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "%s: error: %s\n" % (self.prog, message))


def code_version():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve_out(out, command):
    if out is not None:
        return Path(out)
    root = os.environ.get("STNMAMBA_OUT")
    if not root:
        raise UsageError("--out is required (or set STNMAMBA_OUT)")
    return Path(root) / command


def prepare_out(path, force=False):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError("%s exists and is not empty; pass --force to overwrite" % path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out, config, seed, argv):
    manifest = {"config": config, "seed": seed, "version": code_version(),
                "out": str(out), "argv": list(argv)}
    (Path(out) / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _read_json(path):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("cannot read %s: %s" % (path, exc)) from exc
    if not isinstance(data, dict):
        raise ConfigError("%s must hold a JSON object" % path)
    return data


def load_run_config(args):
    """Model and train configs from ``--preset``, ``--config`` and flag overrides."""
    model_kw, train_kw = {}, {}
    if args.config:
        raw = _read_json(args.config)
        model_kw.update(raw.get("model", {}))
        train_kw.update(raw.get("train", {}))
    if args.steps is not None:
        train_kw["steps"] = args.steps
    if args.batch_size is not None:
        train_kw["batch_size"] = args.batch_size
    if args.lr is not None:
        train_kw["lr"] = args.lr
    if args.seed is not None:
        train_kw["seed"] = model_kw["seed"] = args.seed
    desk = args.preset == "desk"
    base = ModelConfig.desk() if desk else ModelConfig()
    train_base = TrainConfig.desk() if desk else TrainConfig()
    model_cfg = ModelConfig.from_dict({**base.to_dict(), **model_kw})
    train_cfg = TrainConfig.from_dict({**train_base.to_dict(), **train_kw})
    model_names = [a for a in args.ablate if a in ABLATIONS]
    loss_names = [a for a in args.ablate if a in LOSS_ABLATIONS]
    unknown = set(args.ablate) - set(model_names) - set(loss_names)
    if unknown:
        raise ConfigError("unknown ablation(s): %s (known: %s)" % (
            ", ".join(sorted(unknown)), ", ".join(list(ABLATIONS) + list(LOSS_ABLATIONS))))
    return model_cfg.with_ablation(*model_names), train_cfg.with_ablation(*loss_names)


def native_size(index):
    first = next(iter(index.videos.values()))[0]
    with Image.open(first) as img:
        return list(img.size)


def check_split(index, k):
    short = [n for n, p in index.videos.items() if len(p) < k + 1]
    if short:
        raise DataError("videos with fewer than %d frames: %s" % (k + 1, ", ".join(short)))


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args):
    out = prepare_out(resolve_out(args.out, "synth"), args.force)
    spec = SynthSpec()
    if args.spec:
        spec = SynthSpec.from_dict(_read_json(args.spec))
    if args.force:
        # only clear what a previous synth run wrote
        for name in ("training", "testing"):
            if (out / name).is_dir():
                shutil.rmtree(out / name)
        for name in ("metadata.json", MANIFEST):
            (out / name).unlink(missing_ok=True)
    meta = synthesize_dataset(out, spec, args.seed)
    write_manifest(out, {"synth": meta["spec"]}, args.seed, sys.argv)
    for key, v in sorted(meta["videos"].items()):
        a = v.get("anomaly")
        desc = "%s frames %d-%d" % (a["kind"], a["start"], a["end"]) if a else "normal"
        print("%-10s %3d frames  %s" % (key, v["n_frames"], desc))
    return 0


def cmd_train(args):
    out = resolve_out(args.out, "train")
    model_cfg, train_cfg = load_run_config(args)
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
              "ablate": list(args.ablate)}
    train_index = index_dataset(args.data, "train")
    check_split(train_index, model_cfg.frames)
    dataset = ClipDataset(train_index, model_cfg.frames, model_cfg.image_size)
    extra = {"data_size": native_size(train_index)}

    start_step, optim_state = 0, None
    if args.resume:
        manifest_path = out / MANIFEST
        if not manifest_path.exists():
            raise UsageError("--resume given but %s has no manifest" % out)
        previous = json.loads(manifest_path.read_text())["config"]
        if {k: previous[k] for k in ("model", "train")} != {k: config[k] for k in ("model", "train")}:
            raise ConfigError("--resume config differs from the run's manifest")
        ckpt = latest_checkpoint(out)
        if ckpt is not None:
            model, header, optim_state = load_checkpoint(ckpt)
            start_step = header["step"]
        else:
            model = STNMamba(model_cfg)
        truncate_loss_log(out / "loss.csv", start_step)
        print("resuming from step %d" % start_step)
    else:
        prepare_out(out, args.force)
        if args.force:
            # drop artifacts of the previous run so the log and checkpoints start fresh
            for pattern in ("loss.csv", "*.stnm", "nonfinite_step_*.json", "data.json", MANIFEST):
                for p in out.glob(pattern):
                    p.unlink()
        model = STNMamba(model_cfg)
        write_manifest(out, config, train_cfg.seed, sys.argv)
    print(train_index.report(model_cfg.frames))
    (out / "data.json").write_text(json.dumps(extra))
    train(model, dataset, train_cfg, out, start_step=start_step, optimizer_state=optim_state)
    print("wrote %s" % (out / "final.stnm"))
    return 0


def _load_for_eval(args):
    model, header, _ = load_checkpoint(args.ckpt)
    model.eval()
    return model, header


def cmd_eval(args):
    out = prepare_out(resolve_out(args.out, "eval"), args.force)
    model, header = _load_for_eval(args)
    index = index_dataset(args.data, "test")
    check_split(index, model.config.frames)
    data_json = Path(args.ckpt).parent / "data.json"
    if data_json.exists():
        trained = json.loads(data_json.read_text())["data_size"]
        if trained != native_size(index):
            raise ConfigError("checkpoint was trained on %s frames but test frames are %s"
                              % (trained, native_size(index)))
    write_manifest(out, {"model": model.config.to_dict(), "ckpt": str(args.ckpt), "tau": args.tau,
                         "kpercent": args.kpercent, "global_norm": args.global_norm},
                   model.config.seed, sys.argv)

    videos = score_split(model, index, k_percent=args.kpercent)
    auc = fuse_and_auc(videos, args.tau, args.global_norm)
    (out / "scores").mkdir(exist_ok=True)
    for v in videos:
        write_score_csv(out / "scores" / ("%s.csv" % v.name), v)
        if args.plots:
            (out / "curves").mkdir(exist_ok=True)
            save_normality_curve(out / "curves" / ("%s.png" % v.name), v.frames, v.N_s, v.labels,
                                 title="video %s" % v.name)
    report = {"auc": auc, "tau": args.tau, "kpercent": args.kpercent, "n_frames":
              int(sum(len(v.frames) for v in videos)), "global_norm": args.global_norm}
    (out / "auc.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print("frame-level AUC: %.4f" % auc)

    if args.sweep:
        name, spec = args.sweep
        rows = []
        for value in sweep_values(spec):
            if name == "tau":
                vids = [VideoScores(v.name, v.frames, v.psnr, v.distances, v.labels) for v in videos]
                rows.append((value, fuse_and_auc(vids, value, args.global_norm)))
            else:
                vids = score_split(model, index, k_percent=value)
                rows.append((value, fuse_and_auc(vids, args.tau, args.global_norm)))
        with open(out / ("sweep_%s.csv" % name), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([name, "auc"])
            for value, a in rows:
                w.writerow(["%.9g" % value, "%.9g" % a])
        print("wrote %s (%d rows)" % (out / ("sweep_%s.csv" % name), len(rows)))
    return 0


def cmd_score(args):
    out = prepare_out(resolve_out(args.out, "score"), args.force)
    model, _ = _load_for_eval(args)
    paths = index_frames(args.frames)
    k = model.config.frames
    if len(paths) < k + 1:
        raise DataError("need at least %d frames, found %d in %s" % (k + 1, len(paths), args.frames))
    frames = np.stack([load_frame(p, model.config.image_size) for p in paths])
    (out / "error_maps").mkdir(exist_ok=True)
    with Image.open(paths[0]) as img:
        native = img.size

    def emit(t, pred, truth):
        save_error_map(out / "error_maps" / ("%s.png" % paths[t].stem), pred, truth, native)

    targets, psnr, dists = score_frames(model, frames, on_prediction=emit)
    video = VideoScores(Path(args.frames).name, targets, psnr, dists).fuse(args.tau)
    write_score_csv(out / "scores.csv", video)
    save_normality_curve(out / "normality.png", targets, video.N_s, title=Path(args.frames).name)
    write_manifest(out, {"model": model.config.to_dict(), "ckpt": str(args.ckpt), "tau": args.tau},
                   model.config.seed, sys.argv)
    print("scored %d frames -> %s" % (len(targets), out / "scores.csv"))
    return 0


def cmd_ablate(args):
    out = prepare_out(resolve_out(args.out, "ablate"), args.force)
    variants = [v for v in args.variants.split(",") if v]
    base_model, base_train = load_run_config(args)
    train_index = index_dataset(args.data, "train")
    test_index = index_dataset(args.data, "test")
    check_split(train_index, base_model.frames)
    dataset = ClipDataset(train_index, base_model.frames, base_model.image_size)
    write_manifest(out, {"model": base_model.to_dict(), "train": base_train.to_dict(),
                         "variants": variants}, base_train.seed, sys.argv)
    rows = []
    for name in variants:
        model_cfg, train_cfg = base_model, base_train
        if name != "full":
            if name in ABLATIONS:
                model_cfg = base_model.with_ablation(name)
            elif name in LOSS_ABLATIONS:
                train_cfg = base_train.with_ablation(name)
            else:
                raise ConfigError("unknown variant %r" % name)
        model = STNMamba(model_cfg)
        train(model, dataset, train_cfg, out / name)
        videos = score_split(model, test_index)
        auc = fuse_and_auc(videos, args.tau)
        rows.append((name, auc))
        print("%-16s AUC %.4f" % (name, auc))
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "auc"])
        for name, auc in rows:
            w.writerow([name, "%.9g" % auc])
    return 0


# ---------------------------------------------------------------------------

def _add_run_config(p):
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="base model and training config before --config overrides (default: desk)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", action="append", default=[],
                   help="ablation flag, repeatable: %s" % ", ".join(list(ABLATIONS) + list(LOSS_ABLATIONS)))


def build_parser():
    parser = _Parser(prog="stnmamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic moving-sprites dataset")
    p.add_argument("--out")
    p.add_argument("--spec", help="JSON file of generator parameters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset's training split")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true")
    _add_run_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a labelled test split and report frame-level AUC")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--tau", type=float, default=TAU)
    p.add_argument("--kpercent", type=float)
    p.add_argument("--global-norm", action="store_true",
                   help="min-max normalize over the whole split instead of per video")
    p.add_argument("--sweep", nargs=2, metavar=("PARAM", "VALUES"),
                   help="PARAM is tau or k; VALUES is start:stop:step or a comma list")
    p.add_argument("--plots", action="store_true", help="also write normality curves")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score an unlabelled frame folder; write curves and error maps")
    p.add_argument("--frames", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--tau", type=float, default=TAU)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="train and evaluate several variants with one seed")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--variants", default="full,memory_off,bottleneck_only")
    p.add_argument("--tau", type=float, default=TAU)
    p.add_argument("--force", action="store_true")
    _add_run_config(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "sweep", None) and args.sweep[0] not in ("tau", "k"):
        parser.error("--sweep PARAM must be 'tau' or 'k'")
    try:
        return args.func(args)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, ShapeError, ModeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
