"""Ensembles, classification metrics, ROC analysis and rater agreement.

Positive class = diagnostic (label 1). Ensembles combine per-model class
probabilities either by summation (arithmetic) or by multiplication
(geometric, evaluated as a sum of logs). Both break ties toward class 0,
the nondiagnostic class.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ConfigError, DataError

log = logging.getLogger(__name__)

SCORE_HEADER = ("image_id", "model_id", "p_nondiagnostic", "p_diagnostic")
TABLE2_ROWS = ("Model 1", "Model 2", "Model 3", "Model 4", "Model 5", "Mean",
               "Arithmetic Ensemble", "Geometric Ensemble")


# ---------------------------------------------------------------- score sets

@dataclass
class ScoreSet:
    image_ids: list
    model_ids: list
    scores: np.ndarray  # (models, images, classes)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 3 or self.scores.shape[:2] != (len(self.model_ids), len(self.image_ids)):
            raise AlignmentError(f"scores shape {self.scores.shape} does not match "
                                 f"{len(self.model_ids)} models x {len(self.image_ids)} images")
        if not self.model_ids:
            raise ConfigError("a score set needs at least one model")
        if (self.scores < 0).any():
            raise DataError("class scores must be non-negative")

    @classmethod
    def from_models(cls, image_ids, per_model):
        """Build from ``{model_id: (images, classes) array}``; all arrays share ``image_ids``."""
        return cls(list(image_ids), list(per_model), np.stack([per_model[m] for m in per_model]))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_HEADER)
            for j, m in enumerate(self.model_ids):
                for i, img in enumerate(self.image_ids):
                    w.writerow([img, m, repr(float(self.scores[j, i, 0])), repr(float(self.scores[j, i, 1]))])

    @classmethod
    def read(cls, path):
        per_model = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != SCORE_HEADER:
                raise DataError(f"{path}: score header must be {','.join(SCORE_HEADER)}")
            for row in reader:
                per_model.setdefault(row["model_id"], {})[row["image_id"]] = (
                    float(row["p_nondiagnostic"]), float(row["p_diagnostic"]))
        if not per_model:
            raise DataError(f"{path}: no scores")
        models = list(per_model)
        ids = list(per_model[models[0]])
        for m in models[1:]:
            if set(per_model[m]) != set(ids):
                raise AlignmentError(f"model {m} scores a different image set than {models[0]}")
        return cls(ids, models, np.array([[per_model[m][i] for i in ids] for m in models]))


def ensemble_predict(scores, kind="arithmetic"):
    """Return ``(classes, combined)``.

    ``combined`` is the per-image sum of class scores (arithmetic) or the
    sum of their logs (geometric); a zero probability contributes -inf and
    so vetoes its class.
    """
    s = scores.scores if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=np.float64)
    if kind == "arithmetic":
        combined = s.sum(axis=0)
    elif kind == "geometric":
        with np.errstate(divide="ignore"):
            combined = np.log(s).sum(axis=0)
    else:
        raise ConfigError(f"unknown ensemble kind {kind!r}")
    # argmax returns the first maximum, i.e. class 0 on ties
    return combined.argmax(axis=1), combined


# ---------------------------------------------------------------- labels

@dataclass
class RaterLabels:
    name: str
    labels: dict  # image id -> 0/1

    def __post_init__(self):
        self.labels = {str(k): int(v) for k, v in self.labels.items()}
        if any(v not in (0, 1) for v in self.labels.values()):
            raise DataError(f"{self.name}: labels must be binary")

    @classmethod
    def from_arrays(cls, name, ids, labels):
        if len(ids) != len(labels):
            raise AlignmentError(f"{name}: {len(ids)} ids but {len(labels)} labels")
        return cls(name, dict(zip(ids, np.asarray(labels).tolist())))

    def __len__(self):
        return len(self.labels)

    def restrict(self, ids):
        return RaterLabels(self.name, {i: self.labels[i] for i in ids})

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "label"])
            for k in sorted(self.labels):
                w.writerow([k, self.labels[k]])

    @classmethod
    def read(cls, path, name=None):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not {"image_id", "label"} <= set(reader.fieldnames or ()):
                raise DataError(f"{path}: rater file needs image_id,label columns")
            labels = {row["image_id"]: int(row["label"]) for row in reader}
        return cls(name or Path(path).stem, labels)


def _aligned(a, b):
    if set(a.labels) != set(b.labels):
        raise AlignmentError(f"{a.name} and {b.name} label different image sets")
    ids = sorted(a.labels)
    return (np.array([a.labels[i] for i in ids], dtype=np.int64),
            np.array([b.labels[i] for i in ids], dtype=np.int64))


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class Metrics:
    accuracy: float
    sensitivity: float
    specificity: float
    undefined: frozenset = field(default_factory=frozenset)


def confusion(pred, truth):
    if isinstance(pred, RaterLabels):
        p, t = _aligned(pred, truth)
    else:
        p, t = np.asarray(pred), np.asarray(truth)
        if p.shape != t.shape:
            raise AlignmentError(f"{p.shape} predictions vs {t.shape} labels")
    return ConfusionMatrix(int(((p == 1) & (t == 1)).sum()), int(((p == 1) & (t == 0)).sum()),
                           int(((p == 0) & (t == 0)).sum()), int(((p == 0) & (t == 1)).sum()))


def metrics(cm):
    """Accuracy, sensitivity and specificity; zero-denominator ratios are NaN and flagged."""
    undefined = set()

    def ratio(num, den, name):
        if den == 0:
            undefined.add(name)
            return math.nan
        return num / den

    acc = ratio(cm.tp + cm.tn, cm.total, "accuracy")
    sens = ratio(cm.tp, cm.tp + cm.fn, "sensitivity")
    spec = ratio(cm.tn, cm.tn + cm.fp, "specificity")
    return Metrics(acc, sens, spec, frozenset(undefined))


# ---------------------------------------------------------------- ROC

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores, truth):
    """ROC over the sorted unique score thresholds; AUC by the trapezoidal rule.

    Tied scores move both rates in one step, so the area equals
    P(s_pos > s_neg) + P(s_pos == s_neg) / 2.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth).astype(bool)
    n_pos, n_neg = int(t.sum()), int((~t).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC analysis needs both classes in the ground truth")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(t)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    auc = 0.0
    for i in range(1, len(fpr)):
        auc += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]], float(auc))


# ---------------------------------------------------------------- agreement

def kappa_from_counts(counts):
    """Cohen's kappa for a square rater-by-rater count matrix."""
    m = np.asarray(counts, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise DataError("kappa needs at least one rated item")
    p_o = np.trace(m) / n
    p_e = float((m.sum(axis=1) / n) @ (m.sum(axis=0) / n))
    if p_e == 1.0:
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


def agreement_counts(a, b, classes=2):
    x, y = _aligned(a, b) if isinstance(a, RaterLabels) else (np.asarray(a), np.asarray(b))
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (x, y), 1)
    return counts


def cohens_kappa(a, b):
    return kappa_from_counts(agreement_counts(a, b))


def kappa_label(kappa):
    """Landis & Koch strength-of-agreement band."""
    if kappa < 0:
        return "Poor"
    for bound, name in ((0.20, "Slight"), (0.40, "Fair"), (0.60, "Moderate"), (0.80, "Substantial")):
        if kappa <= bound:
            return name
    return "Almost perfect"


def gold_standard(initial, anchor):
    """Images on which ``initial`` and ``anchor`` agree, labelled with the agreed value."""
    if set(initial.labels) != set(anchor.labels):
        raise AlignmentError(f"{initial.name} and {anchor.name} label different image sets")
    kept = {i: v for i, v in sorted(initial.labels.items()) if anchor.labels[i] == v}
    if not kept:
        log.warning("gold standard is empty: %s and %s never agree", initial.name, anchor.name)
    return RaterLabels("gold", kept)


def _percent(num, den):
    # half-up on exact integers, so 5/8 prints as 63 rather than banker's 62
    return (200 * num + den) // (2 * den)


@dataclass
class AgreementRow:
    rater: str
    matches: int
    total: int
    kappa: float
    gold_matches: int
    gold_total: int

    @property
    def agreement(self):
        return self.matches / self.total

    @property
    def gold_agreement(self):
        return self.gold_matches / self.gold_total if self.gold_total else math.nan

    def formatted(self):
        """Cells in the published table layout, e.g. ('66 %', '0.32, Fair', '67 %')."""
        gold = "n/a" if not self.gold_total else f"{_percent(self.gold_matches, self.gold_total)} %"
        return (f"{_percent(self.matches, self.total)} %", f"{self.kappa:.2f}, {kappa_label(self.kappa)}", gold)


def agreement_report(raters, reference, gold):
    """Per rater: agreement with ``reference`` on all images, kappa, agreement on ``gold``."""
    rows = []
    for r in raters:
        if not set(r.labels) <= set(reference.labels):
            raise AlignmentError(f"reference does not cover every image labelled by {r.name}")
        ref = reference.restrict(r.labels)
        x, y = _aligned(r, ref)
        on_gold = [i for i in gold.labels if i in r.labels]
        gm = sum(r.labels[i] == gold.labels[i] for i in on_gold)
        rows.append(AgreementRow(r.name, int((x == y).sum()), len(x), cohens_kappa(r, ref), int(gm), len(on_gold)))
    return rows


def write_agreement_report(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rater", "general_agreement", "cohens_kappa", "gold_agreement",
                    "matches", "total", "kappa", "gold_matches", "gold_total"])
        for r in rows:
            w.writerow([r.rater, *r.formatted(), r.matches, r.total, repr(r.kappa), r.gold_matches, r.gold_total])


# ---------------------------------------------------------------- reports

@dataclass
class ModelEval:
    """Test-set evaluation of one model or ensemble."""

    name: str
    metrics: Metrics
    auc: float
    roc: RocCurve = None


def evaluate_scores(name, probs, truth, predicted=None):
    """Metrics for per-image class probabilities ``probs`` (N, 2) against ``truth``."""
    probs = np.asarray(probs, dtype=np.float64)
    pred = probs.argmax(axis=1) if predicted is None else predicted
    roc = roc_auc(probs[:, 1], truth)
    return ModelEval(name, metrics(confusion(pred, truth)), roc.auc, roc)


def evaluate_ensemble_set(scores, truth):
    """Evaluate every single model, their mean, and both ensembles.

    Ensemble ROC curves use the positive-class share of the combined output
    (sum or geometric mean renormalised over classes).
    """
    truth = np.asarray(truth)
    singles = [evaluate_scores(m, scores.scores[j], truth) for j, m in enumerate(scores.model_ids)]
    out = {"singles": singles}
    for kind in ("arithmetic", "geometric"):
        cls, combined = ensemble_predict(scores, kind)
        if kind == "arithmetic":
            pos = combined[:, 1] / combined.sum(axis=1)
        else:
            z = combined - combined.max(axis=1, keepdims=True)
            with np.errstate(invalid="ignore"):
                e = np.exp(z)
                pos = np.nan_to_num(e[:, 1] / e.sum(axis=1), nan=0.0)
        roc = roc_auc(pos, truth)
        out[kind] = ModelEval(f"{kind} ensemble", metrics(confusion(cls, truth)), roc.auc, roc)
    return out


def table2_column(evals, field_name="accuracy"):
    """Values for the eight Table-2 rows from ``evaluate_ensemble_set`` output."""
    def get(e):
        return e.auc if field_name == "auc" else getattr(e.metrics, field_name)

    singles = [get(e) for e in evals["singles"]]
    return [*singles, float(np.mean(singles)), get(evals["arithmetic"]), get(evals["geometric"])]


def table2_rows(models=5):
    """Row labels for ``models`` single models (5 gives Table 2's layout)."""
    return tuple(f"Model {j + 1}" for j in range(models)) + TABLE2_ROWS[5:]


def write_table2(columns, path, row_names=None):
    """``columns`` maps a column header (e.g. 'net1-mini DT') to k + 3 values."""
    names = list(row_names or table2_rows(len(next(iter(columns.values()))) - 3))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", *columns])
        for i, name in enumerate(names):
            w.writerow([name, *(f"{columns[c][i]:.6f}" for c in columns)])


def read_table2(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0][1:]
    return {h: [float(r[j + 1]) for r in rows[1:]] for j, h in enumerate(header)}, [r[0] for r in rows[1:]]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def roc_svg(curves, path, title="ROC", size=360):
    """Write an SVG with one FPR/TPR polyline per named curve, AUC in the legend."""
    pad = 40
    span = size - 2 * pad

    def xy(f, t):
        return f"{pad + f * span:.2f},{size - pad - t * span:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(curves)}">',
             f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
             f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="#bbb" stroke-dasharray="4"/>',
             f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">FPR</text>',
             f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})">TPR</text>']
    for k, (name, roc) in enumerate(curves.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(xy(f, t) for f, t in zip(roc.fpr, roc.tpr))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{pad}" y="{size + 14 + 20 * k}" font-size="12" fill="{color}">'
                     f'{name} (AUC = {roc.auc:.3f})</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
