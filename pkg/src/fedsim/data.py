"""Dataset ingestion, synthetic data generation, label-skew partitioning and subsampling.

IDX files are the classic big-endian binary format: a 32-bit magic number,
one 32-bit big-endian size per dimension, then the raw unsigned bytes.  Only
the two shapes the simulator consumes are supported:

    0x00000803  3-D image tensor (count x rows x cols), pixels mapped to [0, 1]
    0x00000801  1-D label vector
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedsim.errors import ConfigurationError, FormatError, LengthError, SizingError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """An in-memory classification dataset: features are an (n, u) float matrix."""

    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> "Dataset":
        """Check the dataset invariants; intended for freshly ingested data."""
        if self.features.ndim != 2 or self.n < 1:
            raise ConfigurationError("dataset needs a nonempty (n, u) feature matrix")
        if self.labels.shape != (self.n,):
            raise ConfigurationError("labels must be one integer per sample")
        if self.classes < 1 or self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ConfigurationError("labels must lie in [0, classes)")
        if not np.isfinite(self.features).all():
            raise ConfigurationError("features contain non-finite values")
        return self

    def take(self, indices) -> "Dataset":
        """A batch view: rows selected by `indices`, duplicates allowed."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.classes)


@dataclass
class DevicePartition:
    """The slice of the parent dataset owned by one device.

    Indices are stored sorted ascending so that full-batch evaluation order is
    canonical regardless of how the partition was constructed.
    """

    device_id: int
    sample_indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.sample_indices = np.sort(np.asarray(self.sample_indices, dtype=np.int64))
        if np.unique(self.sample_indices).size != self.sample_indices.size:
            raise ConfigurationError(f"device {self.device_id}: duplicate sample indices")

    @property
    def n_k(self) -> int:
        return int(self.sample_indices.size)


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX payload into a label vector or an image tensor in [0, 1].

    Raises FormatError for an unsupported magic number and LengthError when the
    byte count does not match the header exactly.
    """
    if len(data) < 4:
        raise LengthError(f"IDX payload of {len(data)} bytes is shorter than its magic")
    magic = int.from_bytes(data[:4], "big")
    if magic == LABELS_MAGIC:
        ndim = 1
    elif magic == IMAGES_MAGIC:
        ndim = 3
    else:
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise LengthError(f"IDX header truncated: need {header} bytes, got {len(data)}")
    dims = [int.from_bytes(data[4 + 4 * j : 8 + 4 * j], "big") for j in range(ndim)]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 0
    if len(data) != header + count:
        raise LengthError(
            f"IDX payload length {len(data)} does not match header-implied {header + count}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, offset=header)
    if magic == LABELS_MAGIC:
        return raw.astype(np.int64)
    return (raw.astype(np.float64) / 255.0).reshape(dims)


def serialize_idx(array: np.ndarray) -> bytes:
    """Inverse of parse_idx: 1-D integer arrays become label files, 3-D arrays image files."""
    arr = np.asarray(array)
    if arr.ndim == 1:
        values = arr.astype(np.int64)
        if values.min() < 0 or values.max() > 255:
            raise ValueError("labels must fit in one unsigned byte")
        payload = values.astype(np.uint8).tobytes()
        header = LABELS_MAGIC.to_bytes(4, "big") + arr.shape[0].to_bytes(4, "big")
        return header + payload
    if arr.ndim == 3:
        scaled = np.rint(arr.astype(np.float64) * 255.0)
        if scaled.min() < 0 or scaled.max() > 255:
            raise ValueError("image values must lie in [0, 1]")
        header = IMAGES_MAGIC.to_bytes(4, "big") + b"".join(
            int(s).to_bytes(4, "big") for s in arr.shape
        )
        return header + scaled.astype(np.uint8).tobytes()
    raise ValueError(f"cannot serialize a {arr.ndim}-D array as IDX")


def load_idx_dataset(images: bytes, labels: bytes, classes: int | None = None) -> Dataset:
    """Build a Dataset from raw IDX image and label payloads (images flattened row-major)."""
    imgs = parse_idx(images)
    labs = parse_idx(labels)
    if imgs.ndim != 3:
        raise FormatError("image payload did not decode to a 3-D tensor")
    if labs.ndim != 1 or labs.shape[0] != imgs.shape[0]:
        raise ConfigurationError(
            f"image/label counts differ: {imgs.shape[0]} images vs {labs.shape[0]} labels"
        )
    if classes is None:
        classes = int(labs.max()) + 1
    return Dataset(imgs.reshape(imgs.shape[0], -1), labs, classes).validate()


def synth_classification(
    n: int, u: int, classes: int, separation: float, seed: int
) -> Dataset:
    """Gaussian class clusters with unit covariance and pairwise mean distance `separation`.

    When classes <= u the means sit on scaled coordinate axes, which makes the
    pairwise distances exact; otherwise random unit directions are used and the
    distances are approximate.  Deterministic for a fixed seed.
    """
    if classes < 2:
        raise ConfigurationError("need at least two classes")
    if n < classes:
        raise ConfigurationError(f"need at least {classes} samples, got {n}")
    if separation < 0:
        raise ConfigurationError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    scale = separation / np.sqrt(2.0)
    if classes <= u:
        means = np.zeros((classes, u))
        means[np.arange(classes), np.arange(classes)] = scale
    else:
        dirs = rng.standard_normal((classes, u))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = dirs * scale
    counts = np.full(classes, n // classes, dtype=np.int64)
    counts[: n % classes] += 1
    labels = np.repeat(np.arange(classes, dtype=np.int64), counts)
    features = means[labels] + rng.standard_normal((n, u))
    order = rng.permutation(n)
    return Dataset(features[order], labels[order], classes).validate()


def _label_sets(classes: int, num_devices: int, n_digits: int, rng) -> list[np.ndarray]:
    # Cyclic deal over a shuffled class order: windows of length <= classes over
    # a repeated permutation never contain duplicates, and every class is
    # assigned either floor or ceil of N*n_digits/classes times.
    perm = rng.permutation(classes)
    flat = [int(perm[(i * n_digits + j) % classes]) for i in range(num_devices) for j in range(n_digits)]
    return [np.array(flat[i * n_digits : (i + 1) * n_digits]) for i in range(num_devices)]


def partition_label_skew(
    dataset: Dataset, num_devices: int, n_digits: int, seed: int
) -> list[DevicePartition]:
    """Split a dataset across devices so each device sees at most `n_digits` labels.

    Device sizes are equal within +/-1.  Class shards are dealt round-robin
    from a seed-shuffled class order; per-device class quotas are proportional
    to shard supply with a deterministic repair pass when a class runs short.
    Raises SizingError naming the scarcest class when equality is impossible.
    """
    classes = dataset.classes
    if not 1 <= n_digits <= classes:
        raise ConfigurationError(f"n_digits must lie in [1, {classes}], got {n_digits}")
    if num_devices < 1:
        raise ConfigurationError("need at least one device")
    rng = np.random.default_rng(seed)
    label_sets = _label_sets(classes, num_devices, n_digits, rng)

    counts = np.bincount(dataset.labels, minlength=classes)
    members = [sorted(i for i in range(num_devices) if c in label_sets[i]) for c in range(classes)]
    m = np.array([len(devs) for devs in members])
    supply_per_slot = np.where(m > 0, counts / np.maximum(m, 1), 0.0)

    sizes = np.full(num_devices, dataset.n // num_devices, dtype=np.int64)
    sizes[: dataset.n % num_devices] += 1

    # Proportional quotas with largest-remainder rounding inside each device.
    quota = np.zeros((num_devices, classes), dtype=np.int64)
    for i in range(num_devices):
        labs = label_sets[i]
        weights = supply_per_slot[labs]
        total = weights.sum()
        if total <= 0:
            raise SizingError(f"classes {sorted(labs.tolist())} have no samples to assign")
        frac = sizes[i] * weights / total
        base = np.floor(frac).astype(np.int64)
        short = int(sizes[i] - base.sum())
        order = sorted(range(len(labs)), key=lambda j: (-(frac[j] - base[j]), labs[j]))
        for j in order[:short]:
            base[j] += 1
        quota[i, labs] = base

    _repair_overdrafts(quota, counts, label_sets)

    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(classes)]
    assigned: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
    for c in range(classes):
        pos = 0
        for i in members[c]:
            q = int(quota[i, c])
            assigned[i].append(pools[c][pos : pos + q])
            pos += q

    parts = [
        DevicePartition(i, np.concatenate(assigned[i]) if assigned[i] else np.empty(0, np.int64))
        for i in range(num_devices)
    ]
    got = np.array([p.n_k for p in parts])
    if got.max() - got.min() > 1:
        scarce = int(np.argmin(np.where(m > 0, counts / np.maximum(m, 1), np.inf)))
        raise SizingError(
            f"class {scarce} has {counts[scarce]} samples for {m[scarce]} devices; "
            "cannot honor equal partition sizes"
        )
    return parts


def _repair_overdrafts(quota, counts, label_sets):
    # Shift demand away from oversubscribed classes toward a device's other
    # classes that still have slack.  Deterministic: devices scanned in id order.
    demand = quota.sum(axis=0)
    while True:
        over_classes = np.flatnonzero(demand > counts)
        if over_classes.size == 0:
            return
        progressed = False
        for c in over_classes:
            for i in range(quota.shape[0]):
                if demand[c] <= counts[c]:
                    break
                if quota[i, c] == 0:
                    continue
                for c2 in label_sets[i]:
                    if c2 == c or demand[c2] >= counts[c2]:
                        continue
                    shift = min(demand[c] - counts[c], quota[i, c], counts[c2] - demand[c2])
                    if shift > 0:
                        quota[i, c] -= shift
                        quota[i, c2] += shift
                        demand[c] -= shift
                        demand[c2] += shift
                        progressed = True
                    if demand[c] <= counts[c]:
                        break
        if not progressed:
            worst = int(over_classes[np.argmax(demand[over_classes] - counts[over_classes])])
            raise SizingError(
                f"class {worst} has {counts[worst]} samples but {demand[worst]} are needed; "
                "cannot honor equal partition sizes"
            )


def subsample(partition: DevicePartition, size: int, rng) -> np.ndarray:
    """Uniform sample without replacement of `size` dataset indices from one partition.

    The result is in permuted order; mini-batches for local steps are consumed
    as consecutive chunks of it.
    """
    if size > partition.n_k:
        raise ConfigurationError(
            f"cannot draw {size} samples from device {partition.device_id} "
            f"holding {partition.n_k} (subsample ratio above 1 is rejected)"
        )
    return rng.choice(partition.sample_indices, size=size, replace=False)
