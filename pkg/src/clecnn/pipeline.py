"""End-to-end runs: donor pretraining and the architecture x regime experiment."""
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import enseval, network, trainer
from .data import (Manifest, SynthConfig, assert_patient_disjoint, generate_synthetic, load_images,
                   make_folds, split_dev_test)
from .errors import ConfigError
from .tensor import STREAM_INIT, make_rng

log = logging.getLogger(__name__)

FULL_SCALE_SPECS = ("net1", "net2")


def check_scale(spec_name, full_scale):
    if spec_name in FULL_SCALE_SPECS and not full_scale:
        raise ConfigError(f"{spec_name} is a full-size network; pass --full-scale to train it "
                          "(hours per epoch on a CPU) or use the -mini variant")


def pretrain(spec, source, cfg, out_path=None, val_fraction=0.2):
    """Train a donor checkpoint from scratch on a source-domain ImageSet or Manifest."""
    if isinstance(source, Manifest):
        source = load_images(source)
    patients = source.patient_set
    rng = make_rng(cfg.seed, STREAM_INIT, 7)
    n_val = max(1, int(round(val_fraction * len(patients))))
    val = sorted(patients[i] for i in rng.permutation(len(patients))[:n_val])
    train_p = [p for p in patients if p not in set(val)]
    model = network.build(spec, network.RegimeSpec("DT"), make_rng(cfg.seed, STREAM_INIT), cfg.init)
    result = trainer.train(model, source.subset(train_p), source.subset(val), cfg)
    ckpt = result.checkpoint(spec, regime="DT", role="donor", seed=cfg.seed)
    if out_path:
        network.save_checkpoint(ckpt, out_path)
    return ckpt, result


@dataclass
class ExperimentConfig:
    archs: tuple = ("net1-mini",)
    regimes: tuple = ("DT", "SFT", "DFT")
    dev_patients: int = 20
    test_patients: int = 5
    folds: int = 5
    images_per_patient: tuple = (6, 10)
    image_size: int = 72
    source_patients: int = 20
    seed: int = 0
    train: trainer.TrainConfig = field(
        default_factory=lambda: trainer.TrainConfig(max_epochs=30, batch_size=8, lr_step=15))
    jobs: int = 1
    full_scale: bool = False

    def to_dict(self):
        d = asdict(self)
        d["archs"], d["regimes"] = list(self.archs), list(self.regimes)
        d["images_per_patient"] = list(self.images_per_patient)
        return d


def _cell_name(arch, regime):
    return f"{arch} {regime}"


def run_experiment(cfg, out_dir, data_dir=None):
    """Cross-validate every (architecture, regime) cell and evaluate on the test patients.

    Writes, under ``out_dir``: the generated data (unless ``data_dir`` is
    given), donor checkpoints, one directory per cell (fold checkpoints,
    histories, test scores, ROC plot), ``table2_accuracy.csv``,
    ``table2_auc.csv`` and ``diagnostics.json``. Returns the accuracy
    columns and the diagnostics.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for arch in cfg.archs:
        check_scale(arch, cfg.full_scale)
    for regime in cfg.regimes:
        if regime not in network.REGIMES:
            raise ConfigError(f"unknown regime {regime!r}")
    if data_dir is None:
        total = cfg.dev_patients + cfg.test_patients
        crop = max(network.get_spec(a).input_shape[-1] for a in cfg.archs)
        data_dir = out / "data"
        target = generate_synthetic(SynthConfig(total, cfg.images_per_patient, image_size=cfg.image_size,
                                                crop_size=crop, seed=cfg.seed), data_dir)
        dev_m, test_m = split_dev_test(target, cfg.test_patients / total, cfg.seed)
        Manifest(dev_m.records + test_m.records, data_dir).write(data_dir / "manifest.csv")
    manifest = Manifest.read(Path(data_dir) / "manifest.csv")
    dev_m, test_m = manifest.subset(split="dev"), manifest.subset(split="test")
    assert_patient_disjoint(dev_m, test_m)
    dev, test = load_images(dev_m), load_images(test_m)
    plan = make_folds(dev_m, cfg.folds, cfg.seed)
    assert_patient_disjoint(*plan.folds)
    (out / "folds.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n")

    donors = {}
    if any(r != "DT" for r in cfg.regimes):
        source_dir = out / "source_data"
        crop = max(network.get_spec(a).input_shape[-1] for a in cfg.archs)
        source = load_images(generate_synthetic(
            SynthConfig(cfg.source_patients, cfg.images_per_patient, image_size=cfg.image_size, crop_size=crop,
                        seed=cfg.seed + 1, domain="source"), source_dir, prefix="S"))
        for arch in cfg.archs:
            donors[arch], _ = pretrain(network.get_spec(arch), source, replace(cfg.train, seed=cfg.seed),
                                       out / f"donor_{arch}.clen")

    columns_acc, columns_auc = {}, {}
    for arch in cfg.archs:
        spec = network.get_spec(arch)
        crop = spec.input_shape[-1]
        for regime in cfg.regimes:
            cell_dir = out / f"{arch}_{regime}"
            cell_dir.mkdir(exist_ok=True)
            regime_spec = network.RegimeSpec(regime, donors.get(arch) if regime != "DT" else None)
            folds = trainer.run_cv(plan, spec, regime_spec, replace(cfg.train, seed=cfg.seed), dev, cfg.jobs)
            per_model = {}
            for fr in folds:
                network.save_checkpoint(fr.checkpoint, cell_dir / f"fold{fr.fold}.clen")
                trainer.write_history(fr.history, cell_dir / f"fold{fr.fold}_history.csv")
                per_model[f"fold{fr.fold}"] = trainer.predict(fr.checkpoint.to_model(spec), test, crop)
            scores = enseval.ScoreSet.from_models(test.ids, per_model)
            scores.write(cell_dir / "test_scores.csv")
            evals = enseval.evaluate_ensemble_set(scores, test.labels)
            name = _cell_name(arch, regime)
            columns_acc[name] = enseval.table2_column(evals, "accuracy")
            columns_auc[name] = enseval.table2_column(evals, "auc")
            curves = {e.name: e.roc for e in evals["singles"]}
            curves.update({evals[k].name: evals[k].roc for k in ("arithmetic", "geometric")})
            enseval.roc_svg(curves, cell_dir / "roc.svg", title=name)
            (cell_dir / "column.json").write_text(json.dumps(
                {"accuracy": columns_acc[name], "auc": columns_auc[name],
                 "fold_val_loss": [fr.val_loss for fr in folds]}, indent=2) + "\n")
            log.info("%s: mean acc %.3f, arithmetic %.3f, geometric %.3f", name, *columns_acc[name][-3:])
    enseval.write_table2(columns_acc, out / "table2_accuracy.csv")
    enseval.write_table2(columns_auc, out / "table2_auc.csv")
    diag = diagnostics(columns_acc, columns_auc, cfg.archs, cfg.regimes)
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    return columns_acc, diag


def diagnostics(columns_acc, columns_auc, archs, regimes):
    """Non-gating summary: ensemble vs mean, and the DFT >= SFT >= DT ordering."""
    out = {"ensemble_vs_mean": {}, "regime_order": {}}
    for name, col in columns_acc.items():
        mean, arith, geo = col[-3:]
        out["ensemble_vs_mean"][name] = {
            "mean_accuracy": mean, "arithmetic": arith, "geometric": geo,
            "arithmetic_within_0.02": arith >= mean - 0.02, "geometric_within_0.02": geo >= mean - 0.02,
            "mean_auc": columns_auc[name][-3], "arithmetic_auc": columns_auc[name][-2],
            "geometric_auc": columns_auc[name][-1]}
    if set(regimes) >= {"DT", "SFT", "DFT"}:
        for arch in archs:
            for row, label in ((-3, "mean"), (-2, "arithmetic"), (-1, "geometric")):
                auc = {r: columns_auc[_cell_name(arch, r)][row] for r in ("DT", "SFT", "DFT")}
                out["regime_order"][f"{arch} {label}"] = {
                    **auc, "DFT>=SFT>=DT": auc["DFT"] >= auc["SFT"] >= auc["DT"]}
    return out
