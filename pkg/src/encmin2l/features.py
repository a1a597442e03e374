"""Feature files, normalization forks, and synthetic multi-encoder scenarios.

The FVEC binary format is the interchange currency of the pipeline:

    bytes 0-3    magic b"FVEC"
    byte  4      version (=1)
    byte  5      flags (bit0: labels present)
    bytes 6-7    reserved, zero
    bytes 8-15   n  (u64 LE)
    bytes 16-23  d  (u64 LE)
    bytes 24-31  reserved, zero
    payload      n*d float32 LE, row-major
    labels       n uint32 LE (only if flag bit0 set)

A sibling JSON manifest ``<name>.manifest.json`` records encoder, fork,
split, dataset, seed, and an optional stats-file reference.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ValidationError

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
_HEADER = struct.Struct("<4sBBHQQQ")

FORKS = ("normed", "unnormed")
SPLITS = ("train", "val", "test")

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class Meta:
    """Provenance carried alongside a feature matrix."""

    encoder: str = "unknown"
    fork: str = "unnormed"
    split: str = "test"
    dataset: str = "unknown"
    seed: int | None = None
    stats_file: str | None = None
    n_classes: int | None = None


@dataclass
class FeatureSet:
    """An n x d float32 feature matrix with optional integer class labels."""

    data: np.ndarray
    labels: np.ndarray | None = None
    meta: Meta = field(default_factory=Meta)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        self.validate()

    def validate(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValidationError("empty feature set")
        bad = ~np.isfinite(self.data)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValidationError(f"non-finite value at row {i}, column {j}")
        if self.meta.fork not in FORKS:
            raise ValidationError(f"unknown fork tag {self.meta.fork!r}")
        if self.meta.split not in SPLITS:
            raise ValidationError(f"unknown split tag {self.meta.split!r}")
        if self.labels is not None:
            if self.labels.shape != (self.n,):
                raise ValidationError("labels length does not match row count")
            if self.meta.n_classes is None:
                raise ValidationError("labels present but meta.n_classes missing")
            if self.labels.size and int(self.labels.max()) >= self.meta.n_classes:
                raise ValidationError("label id exceeds meta.n_classes")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        same_labels = (self.labels is None) == (other.labels is None) and (
            self.labels is None or np.array_equal(self.labels, other.labels)
        )
        return (
            self.data.tobytes() == other.data.tobytes()
            and same_labels
            and self.meta == other.meta
        )


def write_fvec(fs: FeatureSet, path) -> None:
    """Write *fs* to *path* in the FVEC format plus a sibling manifest."""
    fs.validate()
    flags = 1 if fs.labels is not None else 0
    header = _HEADER.pack(FVEC_MAGIC, FVEC_VERSION, flags, 0, fs.n, fs.d, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fs.data.astype("<f4", copy=False).tobytes())
        if fs.labels is not None:
            fh.write(fs.labels.astype("<u4", copy=False).tobytes())
    manifest = {
        "encoder": fs.meta.encoder,
        "fork": fs.meta.fork,
        "split": fs.meta.split,
        "dataset": fs.meta.dataset,
        "seed": fs.meta.seed,
        "stats_file": fs.meta.stats_file,
        "n_classes": fs.meta.n_classes,
        "n": fs.n,
        "d": fs.d,
    }
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def manifest_path(path) -> str:
    return f"{path}.manifest.json"


def read_fvec(path) -> FeatureSet:
    """Read an FVEC file; the sibling manifest restores provenance if present."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size or raw[:4] != FVEC_MAGIC:
        raise FormatError(f"{path}: not an FVEC file")
    magic, version, flags, _r0, n, d, _r1 = _HEADER.unpack_from(raw)
    if version != FVEC_VERSION:
        raise FormatError(f"{path}: unsupported FVEC version {version}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: empty feature set")
    expect = _HEADER.size + n * d * 4 + (n * 4 if flags & 1 else 0)
    if len(raw) < expect:
        raise FormatError(f"{path}: truncated payload ({len(raw)} < {expect} bytes)")
    if len(raw) > expect:
        raise FormatError(f"{path}: payload size mismatch ({len(raw)} > {expect} bytes)")
    off = _HEADER.size
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    labels = None
    if flags & 1:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + n * d * 4)
    meta = Meta()
    mpath = manifest_path(path)
    try:
        with open(mpath) as fh:
            m = json.load(fh)
        meta = Meta(
            encoder=m.get("encoder", "unknown"),
            fork=m.get("fork", "unnormed"),
            split=m.get("split", "test"),
            dataset=m.get("dataset", "unknown"),
            seed=m.get("seed"),
            stats_file=m.get("stats_file"),
            n_classes=m.get("n_classes"),
        )
    except FileNotFoundError:
        pass
    return FeatureSet(data=data.copy(), labels=None if labels is None else labels.copy(), meta=meta)


# ---------------------------------------------------------------------------
# Normalization forks
# ---------------------------------------------------------------------------


@dataclass
class ForkStats:
    """Per-dimension mean and floored standard deviation of the ID train split.

    The std uses the population divisor n (not n-1); sigma is floored at
    SIGMA_FLOOR so constant dimensions cannot blow up the division.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValidationError("mu/sigma must be equal-length 1-d arrays")
        if not (self.sigma > 0).all():
            raise ValidationError("sigma must be strictly positive")

    def to_json(self) -> str:
        return json.dumps(
            {
                "std_divisor": "n",
                "sigma_floor": SIGMA_FLOOR,
                "mu": self.mu.tolist(),
                "sigma": self.sigma.tolist(),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ForkStats":
        obj = json.loads(text)
        return cls(mu=np.array(obj["mu"]), sigma=np.array(obj["sigma"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ForkStats":
        with open(path) as fh:
            return cls.from_json(fh.read())


def fit_fork_stats(train: FeatureSet) -> ForkStats:
    """Per-column mean and population std (floored) from the ID train split."""
    if train.n < 2:
        raise ValidationError("need at least 2 rows to estimate std")
    x = train.data.astype(np.float64)
    mu = x.mean(axis=0)
    sigma = np.maximum(x.std(axis=0, ddof=0), SIGMA_FLOOR)
    return ForkStats(mu=mu, sigma=sigma)


def apply_fork(fs: FeatureSet, stats: ForkStats | None) -> FeatureSet:
    """Z-score with *stats* (normed fork) or pass through (unnormed fork)."""
    if stats is None:
        return replace(fs, data=fs.data.copy(), meta=replace(fs.meta, fork="unnormed"))
    if stats.mu.shape[0] != fs.d:
        raise ValidationError(
            f"stats dimension {stats.mu.shape[0]} does not match features ({fs.d})"
        )
    z = (fs.data.astype(np.float64) - stats.mu) / stats.sigma
    return replace(fs, data=z.astype(np.float32), meta=replace(fs.meta, fork="normed"))


def invert_fork(fs: FeatureSet, stats: ForkStats) -> FeatureSet:
    """Inverse of the normed-fork transform."""
    x = fs.data.astype(np.float64) * stats.sigma + stats.mu
    return replace(fs, data=x.astype(np.float32), meta=replace(fs.meta, fork="unnormed"))


def split_holdout(fs: FeatureSet, frac: float, seed: int) -> tuple[FeatureSet, FeatureSet]:
    """Deterministically carve a holdout fraction out of *fs*.

    Returns (rest, held); the permutation is derived from *seed* so the split
    is reproducible from the manifest alone.
    """
    if not 0 < frac < 1:
        raise ValidationError("holdout fraction must lie in (0, 1)")
    n_held = max(1, int(round(fs.n * frac)))
    if n_held >= fs.n:
        raise ValidationError("holdout fraction leaves no rest split")
    perm = np.random.default_rng(seed).permutation(fs.n)
    held_idx, rest_idx = np.sort(perm[:n_held]), np.sort(perm[n_held:])

    def take(idx, split):
        return FeatureSet(
            data=fs.data[idx].copy(),
            labels=None if fs.labels is None else fs.labels[idx].copy(),
            meta=replace(fs.meta, split=split, seed=seed),
        )

    return take(rest_idx, fs.meta.split), take(held_idx, "val")


# ---------------------------------------------------------------------------
# Synthetic multi-encoder scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderSpec:
    """A linear observation model z = A u + noise_scale * g for latent u."""

    name: str
    projection: np.ndarray  # d_k x latent_dim
    noise_scale: float

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def sensitivity_tags(self) -> frozenset[str]:
        cols = np.flatnonzero(np.abs(self.projection).sum(axis=0) > 0)
        return frozenset({f"lat{j}" for j in cols} | {f"noise:{self.name}"})


@dataclass(frozen=True)
class ShiftSpec:
    """A named OOD shift perturbing latent directions or one noise channel."""

    name: str
    kind: str  # "latent_mean" | "noise_scale"
    dims: tuple[int, ...] = ()
    encoder: str | None = None
    magnitude: float = 1.0

    def sensitivity_tags(self) -> frozenset[str]:
        if self.kind == "latent_mean":
            return frozenset(f"lat{j}" for j in self.dims)
        if self.kind == "noise_scale":
            return frozenset({f"noise:{self.encoder}"})
        raise ValidationError(f"unknown shift kind {self.kind!r}")


@dataclass
class SyntheticScenario:
    name: str
    latent_dim: int
    encoders: list[EncoderSpec]
    shifts: list[ShiftSpec]

    def __post_init__(self):
        for enc in self.encoders:
            if enc.projection.shape[1] != self.latent_dim:
                raise ValidationError(
                    f"encoder {enc.name}: projection columns != latent_dim"
                )
            if not np.abs(enc.projection).sum():
                warnings.warn(f"encoder {enc.name}: degenerate zero projection")
        for shift in self.shifts:
            owners = [
                e.name
                for e in self.encoders
                if e.sensitivity_tags() & shift.sensitivity_tags()
            ]
            if len(owners) != 1:
                raise ValidationError(
                    f"shift {shift.name!r} detectable by {len(owners)} encoders "
                    "(must be exactly 1)"
                )

    def owner(self, shift_name: str) -> str:
        shift = next(s for s in self.shifts if s.name == shift_name)
        return next(
            e.name
            for e in self.encoders
            if e.sensitivity_tags() & shift.sensitivity_tags()
        )


@dataclass
class SyntheticData:
    """ID splits and named OOD sets, as raw (unnormed) per-encoder features."""

    id_splits: dict  # split -> {encoder_name: FeatureSet}
    ood: dict  # shift_name -> {encoder_name: FeatureSet}


def _encode(scn: SyntheticScenario, u: np.ndarray, rng, dataset: str, split: str,
            seed: int, noise_factor=None) -> dict:
    out = {}
    for enc in scn.encoders:
        scale = enc.noise_scale
        if noise_factor is not None and noise_factor[0] == enc.name:
            scale = scale * noise_factor[1]
        g = rng.standard_normal((u.shape[0], enc.dim))
        z = u @ enc.projection.T + scale * g
        out[enc.name] = FeatureSet(
            data=z.astype(np.float32),
            meta=Meta(encoder=enc.name, fork="unnormed", split=split,
                      dataset=dataset, seed=seed),
        )
    return out


def gen_synthetic(scn: SyntheticScenario, n_per_split: int, seed: int) -> SyntheticData:
    """Sample ID train/val/test plus one OOD set per shift, deterministically."""
    if n_per_split < 2:
        raise ValidationError("n_per_split must be >= 2")
    rng = np.random.default_rng([seed, 0xFEA7])
    id_splits = {}
    for split in SPLITS:
        u = rng.standard_normal((n_per_split, scn.latent_dim))
        id_splits[split] = _encode(scn, u, rng, scn.name, split, seed)
    ood = {}
    for shift in scn.shifts:
        u = rng.standard_normal((n_per_split, scn.latent_dim))
        noise_factor = None
        if shift.kind == "latent_mean":
            u[:, list(shift.dims)] += shift.magnitude
        elif shift.kind == "noise_scale":
            noise_factor = (shift.encoder, shift.magnitude)
        else:
            raise ValidationError(f"unknown shift kind {shift.kind!r}")
        ood[shift.name] = _encode(
            scn, u, rng, f"{scn.name}:{shift.name}", "test", seed, noise_factor
        )
    return SyntheticData(id_splits=id_splits, ood=ood)


def build_tri_encoder() -> SyntheticScenario:
    """Three encoders over a 12-d latent; each of three shifts is visible to
    exactly one encoder (two private latent-mean shifts, one noise inflation).
    """
    latent_dim = 12
    shared = [0, 1, 2]
    private = {"enc0": [3, 4, 5], "enc1": [6, 7, 8], "enc2": [9, 10, 11]}
    dims = {"enc0": 4, "enc1": 6, "enc2": 8}
    rng = np.random.default_rng(0x7317)
    encoders = []
    for name in ("enc0", "enc1", "enc2"):
        cols = shared + private[name]
        proj = np.zeros((dims[name], latent_dim))
        proj[:, cols] = rng.standard_normal((dims[name], len(cols))) / np.sqrt(len(cols))
        encoders.append(EncoderSpec(name=name, projection=proj, noise_scale=0.35))
    # Magnitudes put each specialist around 0.99 AUROC, strong enough that
    # the cross-encoder min costs the gate well under 0.02 AUROC per shift.
    shifts = [
        ShiftSpec(name="shift_enc0", kind="latent_mean", dims=(3, 4, 5), magnitude=5.0),
        ShiftSpec(name="shift_enc1", kind="latent_mean", dims=(6, 7, 8), magnitude=3.5),
        ShiftSpec(name="shift_enc2", kind="noise_scale", encoder="enc2", magnitude=6.0),
    ]
    return SyntheticScenario(
        name="tri-encoder", latent_dim=latent_dim, encoders=encoders, shifts=shifts
    )


SCENARIOS = {"tri-encoder": build_tri_encoder}


def get_scenario(name: str) -> SyntheticScenario:
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise ValidationError(
            f"unknown scenario {name!r}; available: {', '.join(sorted(SCENARIOS))}"
        ) from None
