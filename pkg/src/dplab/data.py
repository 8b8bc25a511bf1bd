"""Datasets: delimited-text ingestion, row normalization, seeded splits and a
synthetic multiclass generator."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dplab.rng import stream

__all__ = [
    "AttributeSpec",
    "DataError",
    "Dataset",
    "Schema",
    "SplitSpec",
    "load_delimited",
    "load_with_schema",
    "normalize_rows",
    "read_schema",
    "save_delimited",
    "split",
    "split_indices",
    "synth_multiclass",
    "write_schema",
]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    """A sensitive feature column with a finite set of admissible values."""

    attr_index: int
    domain: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))
        if len(self.domain) < 2:
            raise DataError("attribute domain needs at least two values")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    attributes: list[AttributeSpec] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must have one entry per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            name=name or self.name,
        )


@dataclass(frozen=True)
class Schema:
    """Sidecar description of a delimited file.

    The on-disk form is ``key = value`` lines (``#`` starts a comment)::

        label_column = 10
        num_classes = 4
        delimiter = ,
        header = true
        feature_columns = 0-9
        attribute.3 = 0, 1
    """

    label_column: int
    num_classes: int | None = None
    feature_columns: tuple[int, ...] | None = None
    delimiter: str = ","
    header: bool = False
    attributes: tuple[AttributeSpec, ...] = ()


def _parse_columns(text: str) -> tuple[int, ...]:
    cols: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            cols.extend(range(int(a), int(b) + 1))
        elif part:
            cols.append(int(part))
    return tuple(cols)


def read_schema(path: str | Path) -> Schema:
    values: dict[str, str] = {}
    attrs: list[AttributeSpec] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("attribute."):
            idx = int(key.split(".", 1)[1])
            attrs.append(AttributeSpec(idx, tuple(float(v) for v in value.split(","))))
        else:
            values[key] = value
    if "label_column" not in values:
        raise DataError(f"{path}: schema must declare label_column")
    delim = values.get("delimiter", ",")
    if delim in ("\\t", "tab"):
        delim = "\t"
    return Schema(
        label_column=int(values["label_column"]),
        num_classes=int(values["num_classes"]) if "num_classes" in values else None,
        feature_columns=_parse_columns(values["feature_columns"]) if "feature_columns" in values else None,
        delimiter=delim,
        header=values.get("header", "false").lower() in ("1", "true", "yes"),
        attributes=tuple(attrs),
    )


def write_schema(schema: Schema, path: str | Path) -> None:
    lines = [f"label_column = {schema.label_column}"]
    if schema.num_classes is not None:
        lines.append(f"num_classes = {schema.num_classes}")
    if schema.feature_columns is not None:
        lines.append("feature_columns = " + ", ".join(str(c) for c in schema.feature_columns))
    lines.append("delimiter = " + ("tab" if schema.delimiter == "\t" else schema.delimiter))
    lines.append(f"header = {'true' if schema.header else 'false'}")
    for a in schema.attributes:
        lines.append(f"attribute.{a.attr_index} = " + ", ".join(repr(float(v)) for v in a.domain))
    Path(path).write_text("\n".join(lines) + "\n")


def load_delimited(
    path: str | Path,
    label_column: int,
    feature_columns: tuple[int, ...] | None = None,
    delimiter: str = ",",
    header: bool = False,
    num_classes: int | None = None,
    attributes: tuple[AttributeSpec, ...] = (),
) -> Dataset:
    """Parse a numeric delimited table into a Dataset (no normalization).

    Feature columns default to every column except the label. Errors name the
    1-based line number of the offending row.
    """
    path = Path(path)
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if feature_columns is None:
                    feature_columns = tuple(i for i in range(width) if i != label_column)
            if len(row) != width:
                raise DataError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                lab = float(row[label_column])
                feats = [float(row[i]) for i in feature_columns]
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if lab != int(lab) or lab < 0 or (num_classes is not None and lab >= num_classes):
                raise DataError(f"{path}: line {lineno}: label {row[label_column]!r} out of range")
            rows.append(feats)
            labels.append(int(lab))
    if not rows:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(np.array(rows, dtype=np.float64), y, c, name=path.stem, attributes=list(attributes))


def load_with_schema(path: str | Path, schema: Schema) -> Dataset:
    return load_delimited(
        path,
        schema.label_column,
        schema.feature_columns,
        schema.delimiter,
        schema.header,
        schema.num_classes,
        schema.attributes,
    )


def save_delimited(ds: Dataset, path: str | Path, delimiter: str = ",", header: bool = False) -> None:
    """Write features followed by the label column; floats use repr, which
    round-trips exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    if header:
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
    for x, y in zip(ds.features, ds.labels):
        w.writerow([repr(float(v)) for v in x] + [int(y)])
    Path(path).write_text(buf.getvalue())


def normalize_rows(ds: Dataset) -> Dataset:
    """Project rows with l2 norm above 1 onto the unit sphere; shorter rows
    are left untouched."""
    x = ds.features
    if not np.all(np.isfinite(x)):
        bad = int(np.argwhere(~np.isfinite(x))[0, 0])
        raise DataError(f"non-finite feature in row {bad}")
    norms = np.linalg.norm(x, axis=1)
    scale = np.where(norms > 1.0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)
    return replace(ds, features=x * scale[:, None])


@dataclass(frozen=True)
class SplitSpec:
    train_size: int
    test_size: int
    shadow_pool_size: int = 0
    seed: int = 0


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    total = spec.train_size + spec.test_size + spec.shadow_pool_size
    if min(spec.train_size, spec.test_size, spec.shadow_pool_size) < 0:
        raise DataError("split sizes must be nonnegative")
    if total > n:
        raise DataError(f"split sizes sum to {total} > n={n}")
    perm = stream(spec.seed, "split").permutation(n)
    a, b = spec.train_size, spec.train_size + spec.test_size
    return perm[:a], perm[a:b], perm[b:total]


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint (train, test, shadow pool) subsets drawn by a seeded shuffle."""
    tr, te, sh = split_indices(len(ds), spec)
    return (
        ds.subset(tr, f"{ds.name}/train"),
        ds.subset(te, f"{ds.name}/test"),
        ds.subset(sh, f"{ds.name}/shadow"),
    )


def synth_multiclass(
    n: int,
    d: int,
    c: int,
    margin: float = 1.0,
    label_noise: float = 0.0,
    seed: int = 0,
    spread: float = 0.3,
    num_binary: int = 0,
    max_tries: int = 10_000,
) -> Dataset:
    """Gaussian clusters around `c` unit-norm centers in `d` dimensions.

    Centers are rejection-sampled so that every pair is at least `margin`
    apart. Each example is its center plus isotropic noise of per-coordinate
    std ``spread/sqrt(d)``, projected into the unit ball; the label is then
    replaced by a uniformly random class with probability `label_noise`.

    With ``num_binary > 0`` the first `num_binary` columns are quantized to
    {0, 1/sqrt(d)} (1 where the continuous value was positive) and the rest of
    the row is shrunk so the row norm stays <= 1. These columns are exposed as
    attribute specs for attribute inference.
    """
    if c > 2**d:
        raise DataError("too many classes for the dimension")
    if not 0.0 <= label_noise <= 1.0:
        raise DataError("label_noise must lie in [0, 1]")
    if not 0 <= num_binary < d:
        raise DataError("num_binary must lie in [0, d)")
    rng_c = stream(seed, "synth/centers")
    centers = np.empty((0, d))
    tries = 0
    while len(centers) < c:
        tries += 1
        if tries > max_tries:
            raise DataError(f"could not place {c} centers with margin {margin} in {d} dims")
        v = rng_c.standard_normal(d)
        v /= np.linalg.norm(v)
        if len(centers) == 0 or np.min(np.linalg.norm(centers - v, axis=1)) >= margin:
            centers = np.vstack([centers, v])

    rng = stream(seed, "synth/points")
    y = rng.integers(0, c, size=n)
    x = centers[y] + rng.standard_normal((n, d)) * (spread / math.sqrt(d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.where(norms > 1.0, x / norms, x)

    attrs: list[AttributeSpec] = []
    if num_binary:
        b = 1.0 / math.sqrt(d)
        bits = (x[:, :num_binary] > 0).astype(np.float64) * b
        rest = x[:, num_binary:]
        room = math.sqrt(1.0 - num_binary * b * b)
        rn = np.linalg.norm(rest, axis=1, keepdims=True)
        rest = np.where(rn > room, rest * (room / np.where(rn > 0, rn, 1.0)), rest)
        x = np.hstack([bits, rest])
        attrs = [AttributeSpec(j, (0.0, b)) for j in range(num_binary)]

    flip = stream(seed, "synth/label-noise")
    noisy = flip.random(n) < label_noise
    y = np.where(noisy, flip.integers(0, c, size=n), y)
    return Dataset(x, y, c, name=f"synth-n{n}-d{d}-c{c}", attributes=attrs)
