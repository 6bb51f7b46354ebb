"""Synthetic texture testbeds with injected anomalies, and their on-disk container.

Container layout::

    <dir>/meta.json      image side, channels, seed, true hyperparameters
    <dir>/train/NNN.png  8-bit images, value round(p * 255)
    <dir>/test/NNN.png
    <dir>/train.raw      lossless copies (raw tensor format, see rawio)
    <dir>/test.raw
    <dir>/labels.csv     filename,label  (only read through stssad.evaluation)
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter1d

from . import augment, rawio

FORMAT_VERSION = 1
NORMAL, ANOMALY = 0, 1
LABEL_NAMES = {NORMAL: "normal", ANOMALY: "anomaly"}


class DatasetError(ValueError):
    pass


class SealedLabels:
    """Test labels that can only be opened by :func:`stssad.evaluation.unseal`.

    ``reads`` counts every unsealing across the process, which lets tests
    assert that the tuning path never looks at labels.
    """

    reads = 0

    def __init__(self, labels=None, source: Path | None = None, n: int | None = None):
        if labels is None and source is None:
            raise DatasetError("sealed labels need values or a source file")
        self._labels = None if labels is None else np.asarray(labels, dtype=np.int64).copy()
        self._source = None if source is None else Path(source)
        self._n = len(self._labels) if self._labels is not None else int(n)

    def __len__(self) -> int:
        return self._n

    def __repr__(self) -> str:
        return f"<SealedLabels: {self._n} entries>"

    def _unseal(self) -> np.ndarray:
        SealedLabels.reads += 1
        if self._labels is None:
            self._labels = _read_labels_csv(self._source, self._n)
        return self._labels.copy()


def _read_labels_csv(path: Path, n: int) -> np.ndarray:
    lookup = {v: k for k, v in LABEL_NAMES.items()}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["filename", "label"]:
        raise DatasetError(f"{path}: missing header 'filename,label'")
    rows = rows[1:]
    if len(rows) != n:
        raise DatasetError(f"{path}: expected {n} labels, found {len(rows)}")
    out = []
    for i, row in enumerate(rows):
        if len(row) != 2 or row[1] not in lookup:
            raise DatasetError(f"{path}: malformed label record {i + 1}: {row}")
        out.append(lookup[row[1]])
    return np.array(out, dtype=np.int64)


@dataclass
class UnlabeledData:
    """What the tuner is allowed to see: images and metadata, never labels."""

    train: np.ndarray
    test: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.train.shape[1]


@dataclass
class Dataset:
    train: np.ndarray
    test: np.ndarray
    test_labels: SealedLabels
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.test_labels) != len(self.test):
            raise DatasetError(f"{len(self.test)} test images but {len(self.test_labels)} labels")

    def unlabeled(self) -> UnlabeledData:
        return UnlabeledData(self.train, self.test, dict(self.meta))


@dataclass
class SynthSpec:
    seed: int = 0
    m: int = 32
    channels: int = 1
    smoothness: int = 3
    n_train: int = 64
    n_test_normal: int = 64
    n_test_anomaly: int = 16
    anomaly_kind: str = "cutdiff_patch"
    size: float = 0.08
    ratio: float = 1.0
    angle: float = np.pi
    glyph: bool | None = None
    name: str | None = None

    def __post_init__(self):
        if self.anomaly_kind not in ("cutdiff_patch", "rotation"):
            raise DatasetError(f"unknown anomaly kind {self.anomaly_kind!r}")
        if self.n_train < 8:
            raise DatasetError("n_train must be at least 8")
        if self.n_test_anomaly < 0 or self.n_test_normal < 0:
            raise DatasetError("test set sizes must be non-negative")
        if self.m < 16:
            raise DatasetError("image side m must be at least 16")
        if self.anomaly_kind == "cutdiff_patch" and not (self.size > 0 and self.ratio > 0):
            raise DatasetError("cutdiff anomalies need positive size and ratio")
        if self.glyph is None:
            self.glyph = self.anomaly_kind == "rotation"

    @property
    def true_params(self) -> augment.AugParams:
        if self.anomaly_kind == "rotation":
            return augment.rotation_params(self.angle)
        return augment.cutdiff_params(self.size, self.ratio, 0.0)

    @property
    def task_name(self) -> str:
        if self.name:
            return self.name
        if self.anomaly_kind == "rotation":
            return f"rotation_{np.degrees(self.angle):g}"
        return f"cutdiff_s{self.size:g}_r{self.ratio:g}"

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def gen_texture(seed: int, m: int = 32, smoothness: int = 3, channels: int = 1) -> np.ndarray:
    """Box-blurred uniform noise, shape ``(m, m, channels)``.

    The blur is a convex combination of uniform ``[0, 1]`` pixels, so the
    result already lies in ``[0, 1]`` and ``smoothness=1`` returns the raw noise.
    """
    if m < 16:
        raise DatasetError("texture side must be at least 16")
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, size=(m, m, channels))
    if smoothness > 1:
        img = uniform_filter1d(img, size=smoothness, axis=0, mode="wrap")
        img = uniform_filter1d(img, size=smoothness, axis=1, mode="wrap")
    return np.clip(img, 0.0, 1.0)


def gen_glyph(seed: int, m: int = 32, smoothness: int = 3, channels: int = 1) -> np.ndarray:
    """Texture plus a bright top-left corner gradient, so orientation is visible."""
    tex = gen_texture(seed, m, smoothness, channels)
    i, j = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    ramp = np.clip(1.0 - (i + j) / (m - 1), 0.0, 1.0)[..., None]
    return 0.35 * tex + 0.65 * ramp


def inject_anomaly(x: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.anomaly_kind == "rotation":
        return augment.rotate(x, spec.angle).data.copy()
    return augment.cutdiff(x, spec.true_params.values, rng).data.copy()


def build_testbed(spec: SynthSpec) -> Dataset:
    ss = np.random.SeedSequence(spec.seed)
    seed_rng, inject_rng, perm_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    n_img = spec.n_train + spec.n_test_normal + spec.n_test_anomaly
    seeds = seed_rng.integers(0, 2**63 - 1, size=n_img)
    make = gen_glyph if spec.glyph else gen_texture
    imgs = [make(int(s), spec.m, spec.smoothness, spec.channels) for s in seeds]

    train = np.stack(imgs[: spec.n_train])
    normal = imgs[spec.n_train: spec.n_train + spec.n_test_normal]
    anomalous = [inject_anomaly(x, spec, inject_rng) for x in imgs[spec.n_train + spec.n_test_normal:]]
    test = normal + anomalous
    labels = np.array([NORMAL] * len(normal) + [ANOMALY] * len(anomalous), dtype=np.int64)
    order = perm_rng.permutation(len(test))
    test_arr = np.stack([test[k] for k in order]) if test else np.zeros((0, spec.m, spec.m, spec.channels))

    meta = {
        "format": FORMAT_VERSION,
        "name": spec.task_name,
        "m": spec.m,
        "c": spec.channels,
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "true_params": spec.true_params.to_dict(),
    }
    return Dataset(train, test_arr, SealedLabels(labels[order]), meta)


# ---------------------------------------------------------------------------
# persistence

def save_png(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def save_dataset(ds: Dataset, path) -> None:
    """Write the container. Labels go to labels.csv unopened (sealed values are written verbatim)."""
    root = Path(path)
    for sub in ("train", "test"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    names = {}
    for sub, arr in (("train", ds.train), ("test", ds.test)):
        names[sub] = [f"{i:04d}.png" for i in range(len(arr))]
        for name, img in zip(names[sub], arr):
            save_png(root / sub / name, img)
        rawio.save_raw(root / f"{sub}.raw", arr)
    labels = ds.test_labels._labels
    if labels is None:
        labels = _read_labels_csv(ds.test_labels._source, len(ds.test_labels))
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "label"])
        for name, lab in zip(names["test"], labels):
            w.writerow([name, LABEL_NAMES[int(lab)]])
    meta = dict(ds.meta, format=FORMAT_VERSION)
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    """Load a container. Labels stay sealed and are not read from disk here."""
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root}/meta.json: malformed ({exc})") from None
    if meta.get("format") != FORMAT_VERSION:
        raise DatasetError(f"{root}: container format {meta.get('format')!r}, expected {FORMAT_VERSION}")
    arrays = {}
    for sub in ("train", "test"):
        raw = root / f"{sub}.raw"
        try:
            arrays[sub] = rawio.load_raw(raw) if raw.exists() else _load_png_dir(root / sub)
        except rawio.FormatError as exc:
            raise DatasetError(str(exc)) from None
        if arrays[sub].ndim != 4:
            raise DatasetError(f"{raw}: expected a 4-d image batch, got shape {arrays[sub].shape}")
    if not (root / "labels.csv").exists():
        raise DatasetError(f"{root}: missing labels.csv")
    labels = SealedLabels(source=root / "labels.csv", n=len(arrays["test"]))
    return Dataset(arrays["train"], arrays["test"], labels, meta)


def _load_png_dir(d: Path) -> np.ndarray:
    files = sorted(d.glob("*.png"))
    if not files:
        raise DatasetError(f"{d}: no images")
    return np.stack([load_png(f) for f in files])
