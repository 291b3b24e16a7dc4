"""Dataset manifests, patient-level splitting and the synthetic frame generator.

The manifest is a CSV with header ``path,patient_id,group,label,split``;
paths are relative to the manifest's directory. Images are 8-bit
grayscale PNGs.

The generator paints CLE-like frames. Diagnostic frames carry bright
cell nuclei on a textured background; nondiagnostic frames are either
smeared by directional motion streaks or cluttered with small dim discs
(red blood cells). Appearance parameters are drawn once per patient so
that frames from one patient resemble each other, which is what makes a
patient-level split matter.
"""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .tensor import DTYPE, STREAM_BATCH, STREAM_DATA, STREAM_SPLIT, make_rng

log = logging.getLogger(__name__)

GROUPS = ("glioma", "meningioma", "other")
# patients per tumour group across the whole cohort (dev + test)
GROUP_WEIGHTS = (21, 30, 23)
MANIFEST_HEADER = ("path", "patient_id", "group", "label", "split")


@dataclass(frozen=True)
class Record:
    path: str
    patient_id: str
    group: str
    label: int
    split: str = "dev"


class Manifest:
    def __init__(self, records, root="."):
        self.records = list(records)
        self.root = Path(root)
        self.validate()

    def validate(self):
        splits = {}
        for r in self.records:
            if r.label not in (0, 1):
                raise DataError(f"{r.path}: label must be 0 or 1, got {r.label}")
            if r.group not in GROUPS:
                raise DataError(f"{r.path}: unknown tumour group {r.group!r}")
            if splits.setdefault(r.patient_id, r.split) != r.split:
                raise DataError(f"patient {r.patient_id} appears in both {splits[r.patient_id]} and {r.split}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def patients(self):
        return sorted({r.patient_id for r in self.records})

    def patient_groups(self):
        return {r.patient_id: r.group for r in self.records}

    def subset(self, patients=None, split=None):
        keep = set(patients) if patients is not None else None
        recs = [r for r in self.records
                if (keep is None or r.patient_id in keep) and (split is None or r.split == split)]
        return Manifest(recs, self.root)

    def with_split(self, mapping):
        return Manifest([Record(r.path, r.patient_id, r.group, r.label, mapping[r.patient_id])
                         for r in self.records], self.root)

    def write(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.records:
                w.writerow([r.path, r.patient_id, r.group, r.label, r.split])

    @classmethod
    def read(cls, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest {path} not found")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
                raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
            recs = [Record(row["path"], row["patient_id"], row["group"], int(row["label"]), row["split"])
                    for row in reader]
        return cls(recs, path.parent)


def assert_patient_disjoint(*manifests):
    """Raise if any patient id occurs in more than one of ``manifests``."""
    seen = {}
    for i, m in enumerate(manifests):
        for p in (m.patients if isinstance(m, Manifest) else m):
            if seen.setdefault(p, i) != i:
                raise DataError(f"patient {p} crosses a split boundary")


# ---------------------------------------------------------------- generator

@dataclass
class SynthConfig:
    patients: int = 20
    images_per_patient: tuple = (6, 10)
    diagnostic_fraction: float = 0.49
    image_size: int = 256
    crop_size: int = 64
    seed: int = 0
    domain: str = "target"  # "source" draws the pretraining domain

    def __post_init__(self):
        self.images_per_patient = tuple(self.images_per_patient)
        lo, hi = self.images_per_patient
        if self.patients < 1 or not 1 <= lo <= hi:
            raise ConfigError("need at least one patient and 1 <= min images <= max images")
        if not 0 < self.diagnostic_fraction < 1:
            raise ConfigError("diagnostic_fraction must lie in (0, 1)")
        if self.image_size < self.crop_size:
            raise ConfigError(f"image_size {self.image_size} smaller than crop_size {self.crop_size}")
        if self.domain not in ("target", "source"):
            raise ConfigError(f"domain must be 'target' or 'source', got {self.domain!r}")

    @classmethod
    def from_json(cls, path):
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class PatientLook:
    gain: float
    background: float
    texture: float
    cell_density: float
    cell_radius: float
    clutter_density: float
    streak_width: float
    scale: float = 1.0


def draw_patient_look(rng, domain="target"):
    look = PatientLook(
        gain=rng.uniform(0.75, 1.25),
        background=rng.uniform(0.12, 0.28),
        texture=rng.uniform(0.04, 0.10),
        cell_density=rng.uniform(0.0035, 0.0065),
        cell_radius=rng.uniform(1.6, 2.4),
        clutter_density=rng.uniform(0.012, 0.02),
        streak_width=rng.uniform(0.8, 1.4),
    )
    if domain == "source":
        # a different imaging domain: coarser structures, flatter background
        look.scale = 1.6
        look.texture *= 0.5
        look.background *= 0.6
    return look


def _texture(rng, size, cells=8):
    coarse = rng.standard_normal((cells, cells)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def _stamp(canvas, cy, cx, radius, amp, hard=False):
    size = canvas.shape[0]
    reach = int(np.ceil(3 * radius)) + 1
    y0, y1 = max(0, int(cy) - reach), min(size, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(size, int(cx) + reach + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    if hard:
        canvas[y0:y1, x0:x1] += amp / (1 + np.exp((np.sqrt(d2) - radius) * 3))
    else:
        canvas[y0:y1, x0:x1] += amp * np.exp(-d2 / (2 * radius * radius))


def _streak(canvas, y, x, angle, length, width, amp):
    size = canvas.shape[0]
    dy, dx = np.sin(angle), np.cos(angle)
    ey, ex = y + dy * length, x + dx * length
    reach = int(np.ceil(3 * width)) + 1
    y0, y1 = max(0, int(min(y, ey)) - reach), min(size, int(max(y, ey)) + reach + 1)
    x0, x1 = max(0, int(min(x, ex)) - reach), min(size, int(max(x, ex)) + reach + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    t = np.clip((yy - y) * dy + (xx - x) * dx, 0, length)
    d2 = (yy - (y + t * dy)) ** 2 + (xx - (x + t * dx)) ** 2
    canvas[y0:y1, x0:x1] += amp * np.exp(-d2 / (2 * width * width))


def render_frame(rng, label, size, look):
    """Paint one frame; returns float64 values in [0, 1]."""
    area = size * size
    s = look.scale
    img = look.background + look.texture * _texture(rng, size, max(4, size // 12))
    if label == 1:
        n = rng.poisson(look.cell_density * area / s ** 2)
        for _ in range(max(n, 1)):
            _stamp(img, rng.uniform(0, size), rng.uniform(0, size),
                   look.cell_radius * s * rng.uniform(0.8, 1.25), rng.uniform(0.45, 0.8))
    elif rng.random() < 0.5:
        angle = rng.uniform(0, np.pi)
        n = rng.poisson(0.004 * area / s)
        for _ in range(max(n, 1)):
            _streak(img, rng.uniform(-10, size), rng.uniform(-10, size), angle + rng.normal(0, 0.05),
                    rng.uniform(12, 30) * s, look.streak_width * s, rng.uniform(0.12, 0.3))
    else:
        n = rng.poisson(look.clutter_density * area / s ** 2)
        for _ in range(max(n, 1)):
            _stamp(img, rng.uniform(0, size), rng.uniform(0, size), 1.1 * s * rng.uniform(0.8, 1.2),
                   rng.uniform(0.12, 0.22), hard=True)
    img = img * look.gain + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1)


def to_uint8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_png(path, pixels):
    Image.fromarray(pixels, mode="L").save(path, format="PNG", optimize=False, compress_level=6)


def assign_groups(n, rng):
    """Deal tumour groups to ``n`` patients in proportion to the cohort mix."""
    w = np.array(GROUP_WEIGHTS, dtype=float) / sum(GROUP_WEIGHTS)
    quota = w * n
    counts = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    groups = [g for g, c in zip(GROUPS, counts) for _ in range(c)]
    return [groups[i] for i in rng.permutation(n)]


def generate_synthetic(cfg, out_dir, prefix="P"):
    """Write PNG frames plus ``manifest.csv`` under ``out_dir``; returns the manifest."""
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise DataError(f"parent directory {out_dir.parent} does not exist")
    out_dir.mkdir(exist_ok=True)
    (out_dir / "images").mkdir(exist_ok=True)
    records = []
    groups = assign_groups(cfg.patients, make_rng(cfg.seed, STREAM_DATA, 0))
    lo, hi = cfg.images_per_patient
    for p in range(cfg.patients):
        rng = make_rng(cfg.seed, STREAM_DATA, 1, p)
        look = draw_patient_look(rng, cfg.domain)
        pid = f"{prefix}{p:03d}"
        for i in range(int(rng.integers(lo, hi + 1))):
            label = int(rng.random() < cfg.diagnostic_fraction)
            rel = f"images/{pid}_{i:03d}.png"
            write_png(out_dir / rel, to_uint8(render_frame(rng, label, cfg.image_size, look)))
            records.append(Record(rel, pid, groups[p], label, "dev"))
    manifest = Manifest(records, out_dir)
    manifest.write(out_dir / "manifest.csv")
    (out_dir / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- splitting

def _largest_remainder(quota, total, lo, hi):
    counts = np.clip(np.floor(quota).astype(int), lo, hi)
    order = np.argsort(-(quota - np.floor(quota)), kind="stable")
    while counts.sum() < total:
        for i in order:
            if counts.sum() < total and counts[i] < hi[i]:
                counts[i] += 1
    while counts.sum() > total:
        for i in order[::-1]:
            if counts.sum() > total and counts[i] > lo[i]:
                counts[i] -= 1
    return counts


def split_dev_test(manifest, test_fraction=15 / 74, seed=0):
    """Patient-level development/test split stratified by tumour group."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    by_group = {}
    for pid, g in sorted(manifest.patient_groups().items()):
        by_group.setdefault(g, []).append(pid)
    present = [g for g in GROUPS if g in by_group]
    sizes = np.array([len(by_group[g]) for g in present])
    if (sizes < 2).any():
        raise ConfigError("every tumour group needs at least 2 patients to stratify the split")
    total = int(round(test_fraction * sizes.sum()))
    total = min(max(total, len(present)), int((sizes - 1).sum()))
    counts = _largest_remainder(sizes * test_fraction, total, np.ones_like(sizes), sizes - 1)
    rng = make_rng(seed, STREAM_SPLIT, 0)
    test = set()
    for g, c in zip(present, counts):
        members = by_group[g]
        test.update(members[i] for i in rng.permutation(len(members))[:c])
    tagged = manifest.with_split({p: ("test" if p in test else "dev") for p in manifest.patients})
    dev, tst = tagged.subset(split="dev"), tagged.subset(split="test")
    assert_patient_disjoint(dev, tst)
    return dev, tst


@dataclass
class FoldPlan:
    folds: list  # list of sorted patient-id lists

    def __post_init__(self):
        self.folds = [sorted(f) for f in self.folds]
        assert_patient_disjoint(*self.folds)

    @property
    def k(self):
        return len(self.folds)

    @property
    def patients(self):
        return sorted(p for f in self.folds for p in f)

    def train_val(self, i):
        val = self.folds[i]
        train = [p for j, f in enumerate(self.folds) if j != i for p in f]
        return sorted(train), val

    def to_dict(self):
        return {"k": self.k, "folds": self.folds}


def make_folds(manifest, k=5, seed=0):
    """Balanced patient partition into ``k`` folds, dealt round-robin per tumour group."""
    patients = manifest.patient_groups()
    if k < 2 or k > len(patients):
        raise ConfigError(f"cannot make {k} folds from {len(patients)} patients")
    rng = make_rng(seed, STREAM_SPLIT, 1)
    ordered = []
    for g in GROUPS:
        members = sorted(p for p, gg in patients.items() if gg == g)
        ordered += [members[i] for i in rng.permutation(len(members))]
    folds = [[] for _ in range(k)]
    for i, p in enumerate(ordered):
        folds[i % k].append(p)
    return FoldPlan(folds)


# ---------------------------------------------------------------- loading

@dataclass
class ImageSet:
    """Decoded frames of a manifest (uint8, N x H x W) with labels and patients."""

    images: np.ndarray
    labels: np.ndarray
    patients: list
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, patients):
        keep = set(patients)
        idx = [i for i, p in enumerate(self.patients) if p in keep]
        return ImageSet(self.images[idx], self.labels[idx], [self.patients[i] for i in idx],
                        [self.ids[i] for i in idx])

    @property
    def patient_set(self):
        return sorted(set(self.patients))


def load_images(manifest):
    frames = []
    for r in manifest:
        path = manifest.root / r.path
        try:
            with Image.open(path) as im:
                frames.append(np.asarray(im.convert("L"), dtype=np.uint8))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
    if frames and len({f.shape for f in frames}) != 1:
        raise DataError("all frames in a manifest must share one size")
    images = np.stack(frames) if frames else np.zeros((0, 1, 1), np.uint8)
    return ImageSet(images, np.array([r.label for r in manifest], dtype=np.int64),
                    [r.patient_id for r in manifest], [r.path for r in manifest])


@dataclass
class CropPolicy:
    size: int
    mode: str = "eval"  # "train": random crop + horizontal flip; "eval": centre crop
    flip: bool = True


def load_batch(images, indices, policy, rng=None, ids=None):
    """Crop frames ``indices`` of ``images`` (an ImageSet or uint8 array) into an (n, 1, s, s) tensor in [0, 1]."""
    if isinstance(images, ImageSet):
        labels = images.labels[indices]
        ids = images.ids
        images = images.images
    else:
        labels = None
    s = policy.size
    _, h, w = images.shape
    if h < s or w < s:
        name = ids[indices[0]] if ids else "input"
        raise DataError(f"{name}: frame {h}x{w} smaller than crop {s}")
    out = np.empty((len(indices), 1, s, s), dtype=DTYPE)
    for j, i in enumerate(indices):
        if policy.mode == "train":
            oy, ox = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            flip = policy.flip and rng.random() < 0.5
        else:
            oy, ox, flip = (h - s) // 2, (w - s) // 2, False
        crop = images[i, oy:oy + s, ox:ox + s]
        out[j, 0] = (crop[:, ::-1] if flip else crop) / np.float32(255)
    return out, labels


def batch_rng(seed, *extra):
    return make_rng(seed, STREAM_BATCH, *extra)
