"""Command-line entry point: ``clecnn <subcommand> [options]``.

Every option may also come from a JSON file passed with ``--config``
(keys in either kebab or snake case); explicit flags win over the file.
Each run writes its outputs and a ``run.json`` echoing the resolved
configuration into ``--out`` (default ``runs/<timestamp>-<subcommand>``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, enseval, localize, network, pipeline, trainer
from .data import (Manifest, SynthConfig, assert_patient_disjoint, generate_synthetic, load_images, make_folds,
                   split_dev_test)
from .errors import CleError, ConfigError, DataError
from .tensor import STREAM_INIT, make_rng

log = logging.getLogger("clecnn")


# ---------------------------------------------------------------- helpers

def _out_dir(args, create=True):
    out = Path(args.out) if args.out else Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{args.command}"
    if not out.parent.exists():
        raise ConfigError(f"parent directory {out.parent} of output {out} does not exist")
    if create:
        out.mkdir(parents=False, exist_ok=True)
    return out


def _write_run_json(out, args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "out")}
    resolved["version"] = __version__
    (out / "run.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")


def _require(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _train_config(args, regime=None):
    cfg = trainer.TrainConfig(
        base_lr=args.lr, momentum=args.momentum, l2=args.l2, batch_size=args.batch_size,
        lr_gamma=args.lr_gamma, lr_step=args.lr_step, max_epochs=args.max_epochs,
        patience=None if args.patience == 0 else args.patience, seed=args.seed, init=args.init)
    return cfg


def _spec(args):
    pipeline.check_scale(args.spec, args.full_scale)
    if args.full_scale:
        log.warning("training a full-size network on the CPU; expect hours per epoch")
    return network.get_spec(args.spec)


def _regime(args, spec):
    donor = None
    if args.regime != "DT":
        donor = network.load_checkpoint(_require(args.donor, "donor"))
    elif args.donor:
        raise ConfigError("deep training (DT) takes no --donor")
    regime = network.RegimeSpec(args.regime, donor)
    if donor is not None:
        # fail fast on an incompatible donor before any training starts
        network.bind_donor(network.Model(spec), donor)
    return regime


def _dev_data(args):
    manifest = Manifest.read(_require(args.manifest, "manifest"))
    dev = manifest.subset(split="dev")
    if len(dev) == 0:
        raise DataError("manifest has no dev-split records")
    return dev, load_images(dev)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    out = Path(args.out or "data")
    if not out.parent.exists():
        raise ConfigError(f"parent directory {out.parent} does not exist")
    cfg = SynthConfig(args.patients, (args.images_min, args.images_max), args.diagnostic_fraction,
                      args.image_size, args.crop_size, args.seed, args.domain)
    manifest = generate_synthetic(cfg, out, prefix="S" if args.domain == "source" else "P")
    if args.test_fraction > 0:
        dev, test = split_dev_test(manifest, args.test_fraction, args.seed)
        assert_patient_disjoint(dev, test)
        manifest = Manifest(dev.records + test.records, out)
        manifest.write(out / "manifest.csv")
    _write_run_json(out, args)
    n_dev = len(manifest.subset(split="dev").patients)
    print(f"wrote {len(manifest)} frames from {len(manifest.patients)} patients "
          f"({n_dev} dev / {len(manifest.patients) - n_dev} test) to {out}")


def cmd_pretrain(args):
    spec = _spec(args)
    out = _out_dir(args)
    if args.manifest:
        source = Manifest.read(_require(args.manifest, "manifest"))
    else:
        cfg = SynthConfig(args.patients, (args.images_min, args.images_max), image_size=args.image_size,
                          crop_size=spec.input_shape[-1], seed=args.seed + 1, domain="source")
        source = generate_synthetic(cfg, out / "source_data", prefix="S")
    ckpt, result = pipeline.pretrain(spec, source, _train_config(args), out / "donor.clen")
    trainer.write_history(result.history, out / "history.csv")
    _write_run_json(out, args)
    print(f"donor checkpoint {out / 'donor.clen'} (epoch {result.best_epoch}, val loss {result.best_val_loss:.4f})")


def cmd_train(args):
    spec = _spec(args)
    regime = _regime(args, spec)
    out = _out_dir(args)
    dev_m, dev = _dev_data(args)
    plan = make_folds(dev_m, args.folds, args.seed)
    train_p, val_p = plan.train_val(args.val_fold)
    cfg = _train_config(args)
    model = network.build(spec, regime, make_rng(cfg.seed, STREAM_INIT), cfg.init)
    res = trainer.train(model, dev.subset(train_p), dev.subset(val_p), cfg, out / "history.csv")
    network.save_checkpoint(res.checkpoint(spec, regime=args.regime, seed=cfg.seed), out / "model.clen")
    _write_run_json(out, args)
    print(f"best epoch {res.best_epoch}: val loss {res.best_val_loss:.4f} -> {out / 'model.clen'}")


def _parse_grid(args):
    if args.grid:
        grid = json.loads(Path(_require(args.grid, "grid")).read_text())
        if not isinstance(grid, list):
            raise ConfigError("grid file must hold a JSON list of override objects")
        return grid
    lrs = args.grid_lr or [args.lr or trainer.DEFAULT_LR[args.regime]]
    return [{"base_lr": lr} for lr in lrs]


def cmd_grid_search(args):
    spec = _spec(args)
    regime = _regime(args, spec)
    out = _out_dir(args)
    dev_m, dev = _dev_data(args)
    plan = make_folds(dev_m, args.folds, args.seed)
    best, table = trainer.grid_search(_parse_grid(args), plan, spec, regime, dev, _train_config(args),
                                      out / "grid.csv", jobs=args.jobs)
    (out / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n")
    _write_run_json(out, args)
    print(f"best hyperparameters: {best}")


def cmd_cv(args):
    spec = _spec(args)
    regime = _regime(args, spec)
    out = _out_dir(args)
    dev_m, dev = _dev_data(args)
    plan = make_folds(dev_m, args.folds, args.seed)
    (out / "folds.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
    results = trainer.run_cv(plan, spec, regime, _train_config(args), dev, jobs=args.jobs)
    summary = []
    for fr in results:
        network.save_checkpoint(fr.checkpoint, out / f"fold{fr.fold}.clen")
        trainer.write_history(fr.history, out / f"fold{fr.fold}_history.csv")
        summary.append({"fold": fr.fold, "checkpoint": f"fold{fr.fold}.clen", "val_loss": fr.val_loss})
    (out / "cv.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_run_json(out, args)
    for s in summary:
        print(f"fold {s['fold']}: val loss {s['val_loss']:.4f}")


def cmd_experiment(args):
    out = _out_dir(args)
    cfg = pipeline.ExperimentConfig(
        archs=tuple(args.archs), regimes=tuple(args.regimes), dev_patients=args.dev_patients,
        test_patients=args.test_patients, folds=args.folds, images_per_patient=(args.images_min, args.images_max),
        image_size=args.image_size, source_patients=args.patients, seed=args.seed,
        train=replace(_train_config(args), seed=args.seed), jobs=args.jobs, full_scale=args.full_scale)
    _write_run_json(out, args)
    columns, diag = pipeline.run_experiment(cfg, out, data_dir=args.data)
    print(f"{'row':<20}" + "".join(f"{c:>18}" for c in columns))
    for i, row in enumerate(enseval.table2_rows(len(next(iter(columns.values()))) - 3)):
        print(f"{row:<20}" + "".join(f"{columns[c][i]:>18.3f}" for c in columns))
    print(f"tables and diagnostics written to {out}")


def cmd_ensemble_eval(args):
    out = _out_dir(args)
    if args.scores:
        scores = enseval.ScoreSet.read(_require(args.scores, "scores"))
        truth = enseval.RaterLabels.read(_require(args.truth, "truth"))
        labels = np.array([truth.labels[i] for i in scores.image_ids])
    else:
        spec = _spec(args)
        manifest = Manifest.read(_require(args.manifest, "manifest"))
        test_m = manifest.subset(split=args.split)
        test = load_images(test_m)
        if not args.checkpoints:
            raise ConfigError("pass --checkpoints or --scores")
        per_model = {}
        for path in args.checkpoints:
            model = network.load_checkpoint(_require(path, "checkpoint"), spec).to_model(spec)
            per_model[Path(path).stem] = trainer.predict(model, test, spec.input_shape[-1])
        scores = enseval.ScoreSet.from_models(test.ids, per_model)
        labels = test.labels
        scores.write(out / "scores.csv")
    evals = enseval.evaluate_ensemble_set(scores, labels)
    rows = evals["singles"] + [evals["arithmetic"], evals["geometric"]]
    with open(out / "report.csv", "w") as fh:
        fh.write("model,accuracy,sensitivity,specificity,auc,undefined\n")
        for e in rows:
            m = e.metrics
            fh.write(f"{e.name},{m.accuracy:.6f},{m.sensitivity:.6f},{m.specificity:.6f},{e.auc:.6f},"
                     f"{' '.join(sorted(m.undefined))}\n")
    enseval.roc_svg({e.name: e.roc for e in rows}, out / "roc.svg")
    _write_run_json(out, args)
    aucs = [e.auc for e in evals["singles"]]
    for e in rows:
        print(f"{e.name:<22} acc {e.metrics.accuracy:.3f}  sens {e.metrics.sensitivity:.3f}  "
              f"spec {e.metrics.specificity:.3f}  AUC {e.auc:.3f}")
    print(f"mean single-model AUC {np.mean(aucs):.3f} (descriptive only)")


def cmd_agreement(args):
    out = _out_dir(args)
    initial = enseval.RaterLabels.read(_require(args.initial, "initial"), "initial review")
    anchor = enseval.RaterLabels.read(_require(args.anchor, "anchor"))
    raters = [enseval.RaterLabels.read(_require(p, "rater")) for p in args.raters]
    gold = enseval.gold_standard(initial.restrict(anchor.labels), anchor)
    rows = enseval.agreement_report(raters, initial, gold)
    enseval.write_agreement_report(rows, out / "agreement.csv")
    gold.write(out / "gold_standard.csv")
    _write_run_json(out, args)
    print(f"{'Rater':<16}{'General agreement':>20}{'Cohen kappa':>22}{'Gold-standard':>16}")
    for r in rows:
        a, k, g = r.formatted()
        print(f"{r.rater:<16}{a:>20}{k:>22}{g:>16}")


def _load_model(args):
    spec = _spec(args)
    return network.load_checkpoint(_require(args.checkpoint, "checkpoint"), spec).to_model(spec)


def _load_image(path):
    from PIL import Image
    with Image.open(_require(path, "image")) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def cmd_localize(args):
    model = _load_model(args)
    out = _out_dir(args)
    image = _load_image(args.image)
    w = args.window or model.spec.input_shape[-1]
    s = args.stride or max(1, w * 79 // 227)
    image_id = Path(args.image).stem
    dmap = localize.diagnostic_map(model, image, w, s, image_id, truncate=args.grid_truncate)
    dmap.write_csv(out / "diagnostic_map.csv")
    boxes = localize.top_boxes(dmap, args.top_n, args.min_score)
    localize.write_boxes(boxes, image_id, out / "boxes.csv")
    localize.overlay_svg(image, boxes, out / "overlay.svg")
    _write_run_json(out, args)
    print(f"{dmap.values.shape[0]}x{dmap.values.shape[1]} diagnostic map, {len(boxes)} boxes -> {out}")


def cmd_export_maps(args):
    model = _load_model(args)
    out = _out_dir(args)
    files = localize.export_activation_maps(model, _load_image(args.image), args.layer, out / "maps")
    _write_run_json(out, args)
    print(f"wrote {len(files)} activation images to {out / 'maps'}")


# ---------------------------------------------------------------- parser

def _common(p, train=False, data=False, model=False):
    p.add_argument("--config", help="JSON file supplying defaults for any option")
    p.add_argument("--out", help="output directory (its parent must exist)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel fold / grid-cell jobs")
    if model or train:
        p.add_argument("--spec", default="net1-mini", help="bundled spec name or JSON file")
        p.add_argument("--full-scale", action="store_true", help="allow training the full-size networks")
    if train:
        p.add_argument("--regime", choices=network.REGIMES, default="DT")
        p.add_argument("--donor", help="donor checkpoint for SFT/DFT")
        p.add_argument("--manifest", help="manifest CSV (dev split is used)")
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--lr", type=float, default=None, help="base learning rate (default: 0.01 DT, 0.001 SFT/DFT)")
        p.add_argument("--momentum", type=float, default=0.9)
        p.add_argument("--l2", type=float, default=0.005)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--lr-gamma", type=float, default=0.1)
        p.add_argument("--lr-step", type=int, default=10)
        p.add_argument("--max-epochs", type=int, default=30)
        p.add_argument("--patience", type=int, default=3, help="0 disables early stopping")
        p.add_argument("--init", choices=("uniform_scaled", "gaussian"), default="uniform_scaled")
    if data:
        p.add_argument("--patients", type=int, default=20)
        p.add_argument("--images-min", type=int, default=6)
        p.add_argument("--images-max", type=int, default=10)
        p.add_argument("--image-size", type=int, default=256)


def build_parser():
    parser = argparse.ArgumentParser(prog="clecnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and patient-level dev/test split")
    _common(p, data=True)
    p.add_argument("--diagnostic-fraction", type=float, default=0.49)
    p.add_argument("--crop-size", type=int, default=64)
    p.add_argument("--test-fraction", type=float, default=15 / 74, help="0 keeps every patient in dev")
    p.add_argument("--domain", choices=("target", "source"), default="target")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train a donor checkpoint on source-domain data")
    _common(p, train=True, data=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train one model, validating on one fold")
    _common(p, train=True)
    p.add_argument("--val-fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", help="pick hyperparameters by mean cross-validated loss")
    _common(p, train=True)
    p.add_argument("--grid", help="JSON list of TrainConfig override objects")
    p.add_argument("--grid-lr", type=float, nargs="+", help="shorthand grid over base learning rates")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("cv", help="patient-level k-fold cross-validation")
    _common(p, train=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("experiment", help="architectures x regimes, 5-fold CV, ensembles, Table-2 report")
    _common(p, train=True, data=True)
    p.add_argument("--archs", nargs="+", default=["net1-mini"])
    p.add_argument("--regimes", nargs="+", default=list(network.REGIMES), choices=network.REGIMES)
    p.add_argument("--dev-patients", type=int, default=20)
    p.add_argument("--test-patients", type=int, default=5)
    p.add_argument("--data", help="existing dataset directory (manifest.csv with dev/test split)")
    p.set_defaults(func=cmd_experiment, image_size=72, batch_size=8, lr_step=15, max_epochs=30)

    p = sub.add_parser("ensemble-eval", help="evaluate checkpoints or a score file and their ensembles")
    _common(p, model=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--scores", help="score CSV image_id,model_id,p_nondiagnostic,p_diagnostic")
    p.add_argument("--truth", help="label CSV image_id,label (with --scores)")
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("agreement", help="inter-rater agreement with a gold-standard subset")
    _common(p)
    p.add_argument("--initial", help="initial-review labels (reference)")
    p.add_argument("--anchor", help="rater whose agreement with the initial review defines the gold standard")
    p.add_argument("--raters", nargs="+", default=[], help="rater label files to report")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("localize", help="sliding-window diagnostic map with bounding boxes")
    _common(p, model=True)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--window", type=int, help="window size (default: model input size)")
    p.add_argument("--stride", type=int, help="window stride (default: window*79/227)")
    p.add_argument("--grid-truncate", type=int, help="keep only the first N window positions per axis")
    p.add_argument("--top-n", type=int, default=3)
    p.add_argument("--min-score", type=float, default=0.5)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("export-maps", help="export conv feature planes as grayscale and warm-colour images")
    _common(p, model=True)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--layer", default="conv1")
    p.set_defaults(func=cmd_export_maps)
    return parser, sub


def parse_args(argv):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        file_cfg = {k.replace("-", "_"): v for k, v in json.loads(path.read_text()).items()}
        sp = sub.choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = set(file_cfg) - known
        if unknown:
            raise ConfigError(f"unknown keys in {path}: {', '.join(sorted(unknown))}")
        sp.set_defaults(**file_cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except CleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
