"""Manifests, patient-level splitting, normalization, resizing and synthetic data."""

from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidArgumentError, ManifestFormatError, SplitError
from .fileio import atomic_write_text, encode_pgm, read_pgm, staged_output

IMAGE_COLUMN = "Image"
PATIENT_COLUMN = "PatientId"
STD_GUARD = 1e-6

PATHOLOGIES = [
    "Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Effusion", "Emphysema",
    "Fibrosis", "Hernia", "Infiltration", "Mass", "Nodule", "Pleural_Thickening",
    "Pneumonia", "Pneumothorax",
]


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    patient_id: str
    labels: tuple[int, ...]


@dataclass
class Manifest:
    """Ordered records plus the class names given by the header."""

    class_names: list[str]
    records: list[SampleRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def __getitem__(self, i) -> SampleRecord:
        return self.records[i]

    def label_matrix(self) -> np.ndarray:
        k = len(self.class_names)
        if not self.records:
            return np.zeros((0, k))
        return np.array([r.labels for r in self.records], dtype=np.float64)

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def with_records(self, records: Sequence[SampleRecord]) -> "Manifest":
        return Manifest(list(self.class_names), list(records), self.root)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestFormatError(f"{path}: missing header row") from None
        for col in (IMAGE_COLUMN, PATIENT_COLUMN):
            if col not in header:
                raise ManifestFormatError(f"{path}: missing column {col!r}")
        i_img, i_pat = header.index(IMAGE_COLUMN), header.index(PATIENT_COLUMN)
        label_cols = [i for i, h in enumerate(header) if i not in (i_img, i_pat)]
        class_names = [header[i] for i in label_cols]
        records = []
        seen = set()
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestFormatError(
                    f"{path}: row {line_no} has {len(row)} cells, header has {len(header)}")
            labels = []
            for i in label_cols:
                cell = row[i].strip()
                if cell not in ("0", "1"):
                    raise ManifestFormatError(
                        f"{path}: row {line_no}, column {header[i]!r}: expected 0 or 1, got {cell!r}")
                labels.append(int(cell))
            key = (row[i_img].strip(), row[i_pat].strip())
            if key in seen:
                raise ManifestFormatError(f"{path}: row {line_no} duplicates image/patient {key}")
            seen.add(key)
            records.append(SampleRecord(key[0], key[1], tuple(labels)))
    return Manifest(class_names, records, path.parent)


def manifest_csv(manifest: Manifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([IMAGE_COLUMN, PATIENT_COLUMN, *manifest.class_names])
    for r in manifest.records:
        w.writerow([r.image_path, r.patient_id, *r.labels])
    return buf.getvalue()


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    atomic_write_text(path, manifest_csv(manifest))


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitResult:
    train: list[SampleRecord]
    test: list[SampleRecord]
    split_seed: int
    train_fraction: float


def patient_level_split(records: Sequence[SampleRecord], train_fraction: float,
                        seed: int) -> SplitResult:
    """Assign whole patients to train or test.

    Patients are shuffled by ``seed`` and added to train until the train image
    count first reaches ``train_fraction`` of the total. Patients added earlier
    are then released to test, latest first, whenever the target still holds
    without them, which trims the overshoot a large late patient can cause.
    Test is never left empty.
    """
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError(f"train_fraction must be in (0, 1), got {train_fraction}")
    groups: OrderedDict[str, list[int]] = OrderedDict()
    for i, r in enumerate(records):
        groups.setdefault(r.patient_id, []).append(i)
    if len(groups) < 2:
        raise SplitError("a patient-level split needs at least two distinct patients")
    patients = sorted(groups)
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    total = len(records)
    target = train_fraction * total

    chosen: list[str] = []
    count = 0
    for pid in order:
        if count >= target:
            break
        chosen.append(pid)
        count += len(groups[pid])
    for pid in reversed(chosen[:-1]):
        if count - len(groups[pid]) >= target:
            chosen.remove(pid)
            count -= len(groups[pid])
    if count == total:
        chosen.pop()
    in_train = set(chosen)
    train_idx = sorted(i for pid in in_train for i in groups[pid])
    test_idx = sorted(i for pid in groups if pid not in in_train for i in groups[pid])
    return SplitResult([records[i] for i in train_idx], [records[i] for i in test_idx],
                       seed, train_fraction)


def split_report(manifest: Manifest, split: SplitResult) -> dict:
    def side(recs):
        m = np.array([r.labels for r in recs], dtype=float) if recs else np.zeros((0, len(manifest.class_names)))
        prev = m.mean(axis=0) if len(recs) else np.full(len(manifest.class_names), np.nan)
        return {
            "patients": len({r.patient_id for r in recs}),
            "images": len(recs),
            "prevalence": {c: float(v) for c, v in zip(manifest.class_names, prev)},
        }

    overlap = {r.patient_id for r in split.train} & {r.patient_id for r in split.test}
    return {
        "seed": split.split_seed,
        "train_fraction": split.train_fraction,
        "patient_overlap": len(overlap),
        "train": side(split.train),
        "test": side(split.test),
    }


# ---------------------------------------------------------------------------
# normalization and resizing
# ---------------------------------------------------------------------------

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        d = json.loads(text)
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationStats":
        return cls.from_json(Path(path).read_text())


def compute_stats(train_images: np.ndarray) -> NormalizationStats:
    """Per-channel mean and population std over an (N, C, H, W) stack; std floored at 1e-6."""
    x = np.asarray(train_images, dtype=np.float64)
    if x.ndim != 4 or len(x) == 0:
        raise InvalidArgumentError(f"need a non-empty (N, C, H, W) stack, got shape {x.shape}")
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return NormalizationStats(mean, np.maximum(std, STD_GUARD))


def apply_stats(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Normalize (C, H, W) or (N, C, H, W) images with the given (training) statistics."""
    x = np.asarray(images, dtype=np.float64)
    shape = (-1, 1, 1) if x.ndim == 3 else (1, -1, 1, 1)
    return (x - stats.mean.reshape(shape)) / np.maximum(stats.std, STD_GUARD).reshape(shape)


def bilinear_resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Center-aligned bilinear resampling of a 2-D array, edges clamped."""
    img = np.asarray(image, dtype=np.float64)
    h_out, w_out = size
    if h_out < 1 or w_out < 1:
        raise InvalidArgumentError(f"target size must be positive, got {size}")
    h_in, w_in = img.shape
    if (h_in, w_in) == (h_out, w_out):
        return img.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_weights(h_in, h_out)
    x0, x1, wx = axis_weights(w_in, w_out)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def prepare_image(raw: np.ndarray, target_size: tuple[int, int],
                  replicate_to_3: bool = False) -> np.ndarray:
    """Resize a greyscale image to ``target_size`` and return it as (C, H, W)."""
    raw = np.asarray(raw)
    if raw.size == 0:
        raise InvalidArgumentError("cannot prepare an empty image")
    if target_size[0] < 1 or target_size[1] < 1:
        raise InvalidArgumentError(f"target size must be positive, got {target_size}")
    img = bilinear_resize(raw, target_size)[None]
    if replicate_to_3:
        img = np.repeat(img, 3, axis=0)
    return img


def load_images(manifest: Manifest, target_size: tuple[int, int],
                replicate_to_3: bool = False) -> np.ndarray:
    """Read and prepare every image in the manifest; fail on the first missing file."""
    missing = [str(manifest.resolve(r)) for r in manifest if not manifest.resolve(r).is_file()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} image(s) referenced by the manifest are missing: "
                                + ", ".join(missing[:10]))
    c = 3 if replicate_to_3 else 1
    out = np.empty((len(manifest), c, *target_size), dtype=np.float64)
    for i, r in enumerate(manifest):
        out[i] = prepare_image(read_pgm(manifest.resolve(r)), target_size, replicate_to_3)
    return out


# ---------------------------------------------------------------------------
# synthetic data with planted, localizable class signals
# ---------------------------------------------------------------------------

# Rectangle (height, width) per class as fractions of a quadrant side.
RECT_SHAPES = [(0.25, 0.75), (0.75, 0.25), (0.375, 0.375), (0.75, 0.75),
               (0.25, 0.5), (0.5, 0.25), (0.5, 0.5), (0.25, 0.25)]


@dataclass
class SyntheticDatasetSpec:
    n_images: int = 2000
    height: int = 32
    width: int = 32
    num_classes: int = 4
    prevalence: tuple[float, ...] = (0.1, 0.1, 0.3, 0.5)
    noise_std: float = 0.4
    seed: int = 7
    background: float = 0.25
    brightness: float = 0.4

    def validate(self) -> None:
        if self.n_images < 1:
            raise InvalidArgumentError("n_images must be positive")
        if self.height < 4 or self.width < 4 or self.height % 2 or self.width % 2:
            raise InvalidArgumentError("height and width must be even and at least 4")
        if self.num_classes < 1 or self.num_classes > 4 * len(RECT_SHAPES):
            raise InvalidArgumentError(f"num_classes must be in [1, {4 * len(RECT_SHAPES)}]")
        if len(self.prevalence) != self.num_classes:
            raise InvalidArgumentError(
                f"{len(self.prevalence)} prevalence values for {self.num_classes} classes")
        if any(not 0.0 < p < 1.0 for p in self.prevalence):
            raise InvalidArgumentError("prevalence values must lie in (0, 1)")
        if self.noise_std < 0:
            raise InvalidArgumentError("noise_std must be non-negative")

    def class_names(self) -> list[str]:
        if self.num_classes <= len(PATHOLOGIES):
            return PATHOLOGIES[:self.num_classes]
        return [f"class{c}" for c in range(self.num_classes)]


def quadrant_box(c: int, height: int, width: int) -> tuple[int, int, int, int]:
    """(top, left, bottom, right), bottom/right exclusive, of the quadrant owned by class c."""
    q = c % 4
    qh, qw = height // 2, width // 2
    top, left = (q // 2) * qh, (q % 2) * qw
    return top, left, top + qh, left + qw


def rect_size(c: int, height: int, width: int) -> tuple[int, int]:
    fh, fw = RECT_SHAPES[(c // 4 + c) % len(RECT_SHAPES)]
    qh, qw = height // 2, width // 2
    return max(1, round(fh * qh)), max(1, round(fw * qw))


@dataclass
class SyntheticImage:
    pixels: np.ndarray
    labels: tuple[int, ...]
    rects: dict[int, tuple[int, int, int, int]]


def render_synthetic(labels: Sequence[int], spec: SyntheticDatasetSpec,
                     rng: np.random.Generator) -> SyntheticImage:
    """Draw one image: a bright rectangle in its quadrant for every positive class."""
    h, w = spec.height, spec.width
    img = np.full((h, w), spec.background)
    rects = {}
    for c, y in enumerate(labels):
        if not y:
            continue
        top, left, bottom, right = quadrant_box(c, h, w)
        rh, rw = rect_size(c, h, w)
        margin = 1 if (bottom - top) - rh >= 2 and (right - left) - rw >= 2 else 0
        r0 = int(rng.integers(top + margin, bottom - rh - margin + 1))
        c0 = int(rng.integers(left + margin, right - rw - margin + 1))
        img[r0:r0 + rh, c0:c0 + rw] = spec.background + spec.brightness
        rects[c] = (r0, c0, r0 + rh, c0 + rw)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return SyntheticImage(pixels, tuple(int(v) for v in labels), rects)


def _patient_sizes(n: int, rng: np.random.Generator) -> list[int]:
    sizes = []
    while sum(sizes) < n:
        sizes.append(int(rng.integers(2, 4)) if rng.random() < 0.2 else 1)
    sizes[-1] -= sum(sizes) - n
    return sizes


REGION_COLUMNS = ["Image", "class", "rect_top", "rect_left", "rect_bottom", "rect_right",
                  "quad_top", "quad_left", "quad_bottom", "quad_right"]


def generate_synthetic(spec: SyntheticDatasetSpec, out_dir: str | Path) -> Manifest:
    """Write ``images/*.pgm``, ``manifest.csv`` and ``regions.csv`` under ``out_dir``.

    Labels are independent Bernoulli draws at each class prevalence. About 20% of
    synthetic patients own 2-3 images. Output is a pure function of ``spec``.
    """
    spec.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    labels = (rng.random((spec.n_images, spec.num_classes))
              < np.asarray(spec.prevalence)).astype(int)
    sizes = _patient_sizes(spec.n_images, rng)
    patients = [f"P{p + 1:05d}" for p, s in enumerate(sizes) for _ in range(s)]
    records = []
    region_rows = []
    with staged_output(out_dir) as stage:
        (stage / "images").mkdir()
        for i in range(spec.n_images):
            sample = render_synthetic(labels[i], spec, rng)
            name = f"images/{i:05d}.pgm"
            (stage / name).write_bytes(encode_pgm(sample.pixels))
            records.append(SampleRecord(name, patients[i], sample.labels))
            for c, rect in sorted(sample.rects.items()):
                region_rows.append([name, c, *rect, *quadrant_box(c, spec.height, spec.width)])
        manifest = Manifest(spec.class_names(), records, out_dir)
        (stage / "manifest.csv").write_text(manifest_csv(manifest))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REGION_COLUMNS)
        w.writerows(region_rows)
        (stage / "regions.csv").write_text(buf.getvalue())
    return manifest


def load_regions(path: str | Path) -> dict[tuple[str, int], dict[str, tuple[int, int, int, int]]]:
    """Ground-truth boxes keyed by (image, class): ``{"rect": ..., "quadrant": ...}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["Image"], int(row["class"]))
            out[key] = {
                "rect": tuple(int(row[k]) for k in REGION_COLUMNS[2:6]),
                "quadrant": tuple(int(row[k]) for k in REGION_COLUMNS[6:10]),
            }
    return out
