"""Images, patches, masks, client partitions and dataset files."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream, as_stream

INT64_MAX = 2**63 - 1
FIXED = "fixed-count"
BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class Geometry:
    height: int
    width: int
    patch: int
    channels: int = 3

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def validate(self) -> None:
        if min(self.height, self.width, self.patch, self.channels) < 1:
            raise ValueError(f"non-positive geometry {self}")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"image {self.height}x{self.width} not divisible by patch {self.patch}"
            )


@dataclass
class ImageBatch:
    images: np.ndarray  # [n, channels, H, W]
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"expected [n, c, h, w], got {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("labels length differs from image count")

    def __len__(self) -> int:
        return len(self.images)

    def take(self, idx) -> "ImageBatch":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return ImageBatch(self.images[idx], labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class PatchSequence:
    patches: np.ndarray  # [n, B, patch_dim]
    geometry: Geometry

    def __len__(self) -> int:
        return len(self.patches)

    def take(self, idx) -> "PatchSequence":
        return PatchSequence(self.patches[np.asarray(idx, dtype=np.int64)], self.geometry)


def patchify(images: ImageBatch | np.ndarray, patch: int) -> PatchSequence:
    x = images.images if isinstance(images, ImageBatch) else np.asarray(images)
    n, c, h, w = x.shape
    geom = Geometry(h, w, patch, c)
    geom.validate()
    gh, gw = geom.grid
    # patch vector layout: channel-major, then row-major inside the patch
    p = x.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return PatchSequence(p.reshape(n, gh * gw, geom.patch_dim), geom)


def unpatchify(seq: PatchSequence) -> ImageBatch:
    g = seq.geometry
    g.validate()
    n, b, d = seq.patches.shape
    if b != g.num_patches or d != g.patch_dim:
        raise ValueError(f"patches {seq.patches.shape} inconsistent with {g}")
    gh, gw = g.grid
    x = seq.patches.reshape(n, gh, gw, g.channels, g.patch, g.patch)
    x = x.transpose(0, 3, 1, 4, 2, 5).reshape(n, g.channels, g.height, g.width)
    return ImageBatch(x)


# masks ----------------------------------------------------------------------

@dataclass
class MaskPlan:
    """Per-sample visible/masked assignment.

    ``order[i]`` is a permutation of patch positions; for fixed-count plans the
    first ``b`` entries are the visible ones. ``visible`` is the boolean truth
    for both semantics.
    """

    order: np.ndarray  # [n, B] int
    visible: np.ndarray  # [n, B] bool
    ratio: float
    semantics: str = FIXED

    @property
    def num_patches(self) -> int:
        return self.visible.shape[1]

    @property
    def b(self) -> int:
        if self.semantics != FIXED:
            raise ValueError("visible count is per-sample under bernoulli masking")
        return int(self.visible[0].sum()) if len(self.visible) else 0

    @property
    def ids_keep(self) -> np.ndarray:
        return self.order[:, : self.b]

    @property
    def masked(self) -> np.ndarray:
        return ~self.visible

    def take(self, idx) -> "MaskPlan":
        idx = np.asarray(idx, dtype=np.int64)
        return MaskPlan(self.order[idx], self.visible[idx], self.ratio, self.semantics)


def visible_count(num_patches: int, ratio: float) -> int:
    return int(round((1.0 - ratio) * num_patches))


def sample_mask(n: int, num_patches: int, ratio: float, semantics: str = FIXED,
                rng: RngStream | int = 0) -> MaskPlan:
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    gen = as_stream(rng).generator()
    if semantics == FIXED:
        b = visible_count(num_patches, ratio)
        if b < 1:
            raise ValueError(f"ratio {ratio} leaves no visible patch out of {num_patches}")
        order = np.argsort(gen.random((n, num_patches)), axis=1, kind="stable")
        visible = np.zeros((n, num_patches), dtype=bool)
        np.put_along_axis(visible, order[:, :b], True, axis=1)
    elif semantics == BERNOULLI:
        visible = gen.random((n, num_patches)) >= ratio
        # visible positions first (ascending), then masked ones
        order = np.argsort(~visible, axis=1, kind="stable")
    else:
        raise ValueError(f"unknown mask semantics {semantics!r}")
    return MaskPlan(order, visible, float(ratio), semantics)


def full_plan(n: int, num_patches: int) -> MaskPlan:
    order = np.tile(np.arange(num_patches), (n, 1))
    return MaskPlan(order, np.ones((n, num_patches), dtype=bool), 0.0)


def apply_mask_zero(seq: PatchSequence, plan: MaskPlan) -> PatchSequence:
    if plan.visible.shape != seq.patches.shape[:2]:
        raise ValueError(f"plan {plan.visible.shape} does not match patches {seq.patches.shape}")
    return PatchSequence(seq.patches * plan.visible[..., None], seq.geometry)


def count_mask_variants(n: int, num_patches: int, b: int) -> int:
    """``n * C(B, b)``: the number of distinct fixed-count corruptions of n samples."""
    if not 0 <= b <= num_patches or n < 0:
        raise ValueError(f"invalid (n, B, b) = ({n}, {num_patches}, {b})")
    total = n * math.comb(num_patches, b)
    if total > INT64_MAX:
        raise OverflowError(f"n*C({num_patches},{b}) exceeds a 64-bit integer")
    return total


def enumerate_masks(num_patches: int, b: int):
    """Every fixed-count visibility pattern as a tuple of booleans."""
    for keep in itertools.combinations(range(num_patches), b):
        row = [False] * num_patches
        for i in keep:
            row[i] = True
        yield tuple(row)


# partitions -----------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    clients: int
    alpha: float = 0.0  # 0 means IID
    seed: int = 0

    def validate(self) -> None:
        if self.clients < 1:
            raise ValueError("need at least one client")
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    label_hist: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def _stratified(labels, k, gen):
    buckets = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        idx = gen.permutation(np.flatnonzero(labels == c))
        for j, i in enumerate(idx):
            buckets[(offset + j) % k].append(i)
        # rotate so per-class remainders do not pile onto the same clients
        offset = (offset + len(idx)) % k
    return buckets


def _dirichlet(labels, k, alpha, gen):
    classes = np.unique(labels)
    pools = [list(gen.permutation(np.flatnonzero(labels == c))) for c in classes]
    priors = gen.dirichlet(np.full(len(classes), alpha), size=k)
    sizes = np.full(k, len(labels) // k)
    sizes[: len(labels) % k] += 1
    buckets = [[] for _ in range(k)]
    remaining = np.array([len(p) for p in pools], dtype=float)
    # one draw per client per pass keeps late clients from inheriting only
    # the exhausted classes
    for step in range(int(sizes.max())):
        for client in range(k):
            if step >= sizes[client]:
                continue
            q = priors[client] * (remaining > 0)
            if q.sum() <= 0:
                q = remaining.copy()
            c = gen.choice(len(classes), p=q / q.sum())
            buckets[client].append(pools[c].pop())
            remaining[c] -= 1
    return buckets


def partition(labels, spec: PartitionSpec, rng: RngStream | int | None = None,
              max_retries: int = 10) -> list[ClientShard]:
    spec.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if spec.clients > len(labels):
        raise ValueError(f"{spec.clients} clients for {len(labels)} samples")
    stream = as_stream(spec.seed if rng is None else rng)
    n_cls = int(labels.max()) + 1
    for attempt in range(max_retries):
        gen = stream.derive("partition", attempt).generator()
        if spec.alpha == 0:
            buckets = _stratified(labels, spec.clients, gen)
        else:
            buckets = _dirichlet(labels, spec.clients, spec.alpha, gen)
        if all(buckets):
            break
    else:
        raise RuntimeError(f"empty shard after {max_retries} partition attempts")
    shards = []
    for k, b in enumerate(buckets):
        idx = np.sort(np.asarray(b, dtype=np.int64))
        shards.append(ClientShard(k, idx, np.bincount(labels[idx], minlength=n_cls)))
    return shards


def write_partition(path, shards: list[ClientShard]) -> None:
    with open(path, "w") as fh:
        fh.write("client_id\tsample_index\n")
        for s in shards:
            for i in s.indices:
                fh.write(f"{s.client_id}\t{int(i)}\n")


# synthetic data -------------------------------------------------------------

def _bar(yy, xx, cy, cx, theta, half_len, half_width):
    dy, dx = yy - cy, xx - cx
    along = dx * np.cos(theta) + dy * np.sin(theta)
    across = -dx * np.sin(theta) + dy * np.cos(theta)
    return ((np.abs(along) <= half_len) & (np.abs(across) <= half_width)).astype(float)


def _blob(yy, xx, cy, cx, radius):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))


def class_template(c: int, n_classes: int, height: int, width: int,
                   shift=(0.0, 0.0)) -> np.ndarray:
    """Noise-free single-channel pattern of class ``c``: an oriented bar plus a blob."""
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    cy, cx = (height - 1) / 2 + shift[0], (width - 1) / 2 + shift[1]
    theta = np.pi * c / n_classes
    img = _bar(yy, xx, cy, cx, theta, 0.35 * min(height, width), 0.9)
    ang = 2 * np.pi * c / n_classes + np.pi / 4
    by = cy + 0.3 * height * np.sin(ang)
    bx = cx + 0.3 * width * np.cos(ang)
    img = np.maximum(img, _blob(yy, xx, by, bx, min(height, width) / 10))
    return img


def synth_dataset(n_per_class: int, n_classes: int = 4, height: int = 16, width: int = 16,
                  noise: float = 0.5, rng: RngStream | int = 0, channels: int = 3) -> ImageBatch:
    """Class templates with per-sample variation that scales with ``noise``.

    At ``noise=0`` every image is exactly its class template in gray. Larger
    noise adds position jitter, random foreground colour and contrast, a
    distractor blob at a random location and Gaussian pixel noise.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    gen = as_stream(rng).derive("synth").generator()
    n = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes), n_per_class)
    labels = labels[gen.permutation(n)]
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    jitter = 2.0 * noise
    images = np.empty((n, channels, height, width))
    for i, c in enumerate(labels):
        shift = gen.uniform(-jitter, jitter, size=2)
        fg = class_template(int(c), n_classes, height, width, shift)
        colour = 0.8 - noise * gen.uniform(0.0, 0.6, size=channels)
        dy, dx = gen.uniform(0, height), gen.uniform(0, width)
        distractor = noise * gen.uniform(0.5, 1.0) * _blob(yy, xx, dy, dx, min(height, width) / 8)
        img = 0.1 + colour[:, None, None] * fg + distractor
        img = img + 0.3 * noise * gen.standard_normal(img.shape)
        images[i] = img
    return ImageBatch(np.clip(images, 0.0, 1.0).astype(np.float32), labels)


def template_bank(n_classes: int, height: int, width: int, channels: int = 3) -> np.ndarray:
    t = np.stack([class_template(c, n_classes, height, width) for c in range(n_classes)])
    t = 0.1 + 0.8 * t
    return np.repeat(t[:, None], channels, axis=1)


def nearest_template_accuracy(batch: ImageBatch) -> float:
    n_cls = batch.num_classes
    _, c, h, w = batch.images.shape
    bank = template_bank(n_cls, h, w, c).reshape(n_cls, -1)
    x = batch.images.reshape(len(batch), -1).astype(np.float64)
    d = ((x[:, None, :] - bank[None]) ** 2).sum(-1)
    return float((d.argmin(1) == batch.labels).mean())


# dataset files --------------------------------------------------------------

DATASET_VERSION = 1


def write_dataset(directory, batch: ImageBatch) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, c, h, w = batch.images.shape
    labels = batch.labels if batch.labels is not None else np.full(n, -1)
    n_cls = int(labels.max()) + 1 if batch.labels is not None else 0
    manifest = {"version": DATASET_VERSION, "n": n, "channels": c, "H": h, "W": w, "N_cls": n_cls}
    (d / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
    batch.images.astype("<f4").tofile(d / "pixels.f32")
    np.asarray(labels).astype("<i4").tofile(d / "labels.i32")
    return d


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out


def read_dataset(directory) -> ImageBatch:
    d = Path(directory)
    m = read_kv(d / "manifest.txt")
    if int(m["version"]) != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {m['version']}")
    n, c, h, w = (int(m[k]) for k in ("n", "channels", "H", "W"))
    pixels = np.fromfile(d / "pixels.f32", dtype="<f4")
    if pixels.size != n * c * h * w:
        raise ValueError(f"pixel file holds {pixels.size} values, manifest says {n * c * h * w}")
    labels = np.fromfile(d / "labels.i32", dtype="<i4").astype(np.int64)
    if labels.size != n:
        raise ValueError("label count mismatch")
    return ImageBatch(pixels.reshape(n, c, h, w).astype(np.float32),
                      labels if int(m["N_cls"]) > 0 else None)


def load_cifar_bin(path) -> ImageBatch:
    """CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixel bytes."""
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, 3073)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return ImageBatch(images, raw[:, 0].astype(np.int64))
