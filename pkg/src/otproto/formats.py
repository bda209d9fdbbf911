"""Bit-exact binary formats, the dataset manifest, config parsing, and the
synthetic dataset generator.

All binary formats are little-endian, fixed-width, without padding:

====== ======================================================================
magic  layout
====== ======================================================================
FGRD   magic | version u16 | scale_id u16 | H u32 | W u32 | D u32 |
       payload H*W*D float32, row-major (i outer, j middle, d inner)
AMSK   magic | version u16 | H0 u32 | W0 u32 | payload H0*W0 uint8
       (0 = normal, 255 = anomalous, 1..254 = named defect regions)
AMAP   magic | version u16 | H0 u32 | W0 u32 | image_score float32 |
       payload H0*W0 float32
PRDT   magic | version u16 | scale_id u16 | n u32 | H u32 | W u32 | D u32 |
       epoch u32 | alpha f32 | eta f32 | epsilon f32 |
       weights n*H*W*D float32 | rng_len u32 | rng state blob
====== ======================================================================

Readers raise structured ``FormatError`` subclasses on any corruption and
never index past the buffer. Files round-trip bitwise: storage is float32
even though computation is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    STORAGE_DTYPE,
    AnomalyMap,
    FeatureGrid,
    PrototypeSet,
    lattice_coords,
    make_feature_grid,
)
from .errors import (
    BadMagicError,
    BadVersionError,
    ConfigError,
    InvalidHeaderError,
    NonFiniteFloatError,
    TruncatedPayloadError,
    ValidationError,
)

FGRD_MAGIC = b"FGRD"
AMSK_MAGIC = b"AMSK"
AMAP_MAGIC = b"AMAP"
PRDT_MAGIC = b"PRDT"
FORMAT_VERSION = 1


def _read_exact(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise TruncatedPayloadError(f"{what}: need {size} bytes at offset {offset}, have {len(buf) - offset}")
    return buf[offset : offset + size], offset + size


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if len(buf) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than a magic header")
    if buf[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")


def _check_version(version: int, path) -> None:
    if version != FORMAT_VERSION:
        raise BadVersionError(f"{path}: unsupported format version {version}")


def _check_u16(value: int, name: str) -> int:
    value = int(value)
    if not 0 <= value <= 0xFFFF:
        raise ValidationError(f"{name} must fit in u16, got {value}")
    return value


# ---------------------------------------------------------------------------
# FGRD


def write_fgrd(path: str | Path, grid: FeatureGrid) -> None:
    header = struct.pack(
        "<4sHHIII",
        FGRD_MAGIC,
        FORMAT_VERSION,
        _check_u16(grid.scale_id, "scale_id"),
        grid.height,
        grid.width,
        grid.dim,
    )
    payload = np.ascontiguousarray(grid.features, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_fgrd(path: str | Path) -> FeatureGrid:
    buf = Path(path).read_bytes()
    _check_magic(buf, FGRD_MAGIC, path)
    raw, offset = _read_exact(buf, 4, struct.calcsize("<HHIII"), f"{path}: header")
    version, scale_id, h, w, d = struct.unpack("<HHIII", raw)
    _check_version(version, path)
    if h < 1 or w < 1 or d < 1:
        raise InvalidHeaderError(f"{path}: zero grid dimension (H={h}, W={w}, D={d})")
    expected = 4 * h * w * d
    if len(buf) - offset != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(buf) - offset} bytes, header declares {expected}"
        )
    feats = np.frombuffer(buf, dtype="<f4", offset=offset).reshape(h, w, d)
    if not np.isfinite(feats).all():
        raise NonFiniteFloatError(f"{path}: payload contains NaN or Inf")
    return make_feature_grid(feats.copy(), scale_id=scale_id)


# ---------------------------------------------------------------------------
# AMSK


def write_amsk(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError("mask must be 2-d")
    if mask.dtype != np.uint8:
        if mask.min() < 0 or mask.max() > 255:
            raise ValidationError("mask values must fit in uint8")
        mask = mask.astype(np.uint8)
    header = struct.pack("<4sHII", AMSK_MAGIC, FORMAT_VERSION, mask.shape[0], mask.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(mask).tobytes())


def read_amsk(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _check_magic(buf, AMSK_MAGIC, path)
    raw, offset = _read_exact(buf, 4, struct.calcsize("<HII"), f"{path}: header")
    version, h, w = struct.unpack("<HII", raw)
    _check_version(version, path)
    if h < 1 or w < 1:
        raise InvalidHeaderError(f"{path}: zero mask dimension (H={h}, W={w})")
    if len(buf) - offset != h * w:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(buf) - offset} bytes, header declares {h * w}"
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=offset).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# AMAP


def write_amap(path: str | Path, amap: AnomalyMap) -> None:
    header = struct.pack(
        "<4sHIIf",
        AMAP_MAGIC,
        FORMAT_VERSION,
        amap.height,
        amap.width,
        np.float32(amap.image_score),
    )
    payload = np.ascontiguousarray(amap.scores, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_amap(path: str | Path) -> AnomalyMap:
    buf = Path(path).read_bytes()
    _check_magic(buf, AMAP_MAGIC, path)
    raw, offset = _read_exact(buf, 4, struct.calcsize("<HIIf"), f"{path}: header")
    version, h, w, image_score = struct.unpack("<HIIf", raw)
    _check_version(version, path)
    if h < 1 or w < 1:
        raise InvalidHeaderError(f"{path}: zero map dimension (H={h}, W={w})")
    if len(buf) - offset != 4 * h * w:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(buf) - offset} bytes, header declares {4 * h * w}"
        )
    scores = np.frombuffer(buf, dtype="<f4", offset=offset).reshape(h, w)
    if not np.isfinite(scores).all():
        raise NonFiniteFloatError(f"{path}: payload contains NaN or Inf")
    try:
        return AnomalyMap(scores=scores.copy(), image_score=image_score)
    except ValidationError as exc:
        raise InvalidHeaderError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# PRDT

_PRDT_BODY = "<HHIIIIIfff"  # header fields after the magic


def write_prdt(
    path: str | Path,
    protos: PrototypeSet,
    *,
    eta: float,
    epsilon: float,
    epoch: int,
    rng_blob: bytes = b"",
) -> None:
    header = struct.pack(
        "<4s" + _PRDT_BODY[1:],
        PRDT_MAGIC,
        FORMAT_VERSION,
        _check_u16(protos.scale_id, "scale_id"),
        protos.n,
        protos.height,
        protos.width,
        protos.dim,
        int(epoch),
        np.float32(protos.alpha),
        np.float32(eta),
        np.float32(epsilon),
    )
    weights = np.ascontiguousarray(protos.weights, dtype="<f4").tobytes()
    tail = struct.pack("<I", len(rng_blob)) + rng_blob
    Path(path).write_bytes(header + weights + tail)


def read_prdt(path: str | Path) -> tuple[PrototypeSet, dict]:
    buf = Path(path).read_bytes()
    _check_magic(buf, PRDT_MAGIC, path)
    raw, offset = _read_exact(buf, 4, struct.calcsize(_PRDT_BODY), f"{path}: header")
    version, scale_id, n, h, w, d, epoch, alpha, eta, epsilon = struct.unpack(_PRDT_BODY, raw)
    _check_version(version, path)
    if min(n, h, w, d) < 1:
        raise InvalidHeaderError(f"{path}: zero layout dimension (n={n}, H={h}, W={w}, D={d})")
    count = n * h * w * d
    raw, offset = _read_exact(buf, offset, 4 * count, f"{path}: weights")
    weights = np.frombuffer(raw, dtype="<f4").reshape(n * h * w, d)
    if not np.isfinite(weights).all():
        raise NonFiniteFloatError(f"{path}: weights contain NaN or Inf")
    raw, offset = _read_exact(buf, offset, 4, f"{path}: rng length")
    (rng_len,) = struct.unpack("<I", raw)
    rng_blob, offset = _read_exact(buf, offset, rng_len, f"{path}: rng blob")
    if offset != len(buf):
        raise TruncatedPayloadError(f"{path}: {len(buf) - offset} trailing bytes")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidHeaderError(f"{path}: alpha {alpha} outside [0, 1]")
    coords = np.repeat(lattice_coords(h, w).reshape(-1, 2), n, axis=0)
    protos = PrototypeSet(
        weights=weights.copy(), coords=coords, n=n, height=h, width=w,
        alpha=float(alpha), scale_id=scale_id,
    )
    meta = {"eta": float(eta), "epsilon": float(epsilon), "epoch": int(epoch), "rng_blob": rng_blob}
    return protos, meta


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class SampleEntry:
    id: str
    split: str  # "train" | "test"
    grids: dict[int, str]  # scale_id -> FGRD path (relative to the manifest)
    mask: str | None = None
    tag: str | None = None
    saturation: dict[int, float] | None = None


@dataclass
class Manifest:
    category: str
    samples: list[SampleEntry]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[SampleEntry]:
        return [s for s in self.samples if s.split == name]

    def scales(self) -> list[int]:
        out: set[int] = set()
        for s in self.samples:
            out.update(s.grids)
        return sorted(out)

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    doc = {
        "category": manifest.category,
        "samples": [
            {
                "id": s.id,
                "split": s.split,
                "grids": {str(k): v for k, v in sorted(s.grids.items())},
                "mask": s.mask,
                "tag": s.tag,
                "saturation": (
                    {str(k): v for k, v in sorted(s.saturation.items())} if s.saturation else None
                ),
            }
            for s in manifest.samples
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "samples" not in doc:
        raise ConfigError(f"{path}: manifest must be an object with a 'samples' list")
    samples = []
    seen: set[str] = set()
    for raw in doc["samples"]:
        try:
            entry = SampleEntry(
                id=str(raw["id"]),
                split=str(raw["split"]),
                grids={int(k): str(v) for k, v in raw["grids"].items()},
                mask=raw.get("mask"),
                tag=raw.get("tag"),
                saturation=(
                    {int(k): float(v) for k, v in raw["saturation"].items()}
                    if raw.get("saturation")
                    else None
                ),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigError(f"{path}: malformed sample entry {raw!r}") from exc
        if entry.split not in ("train", "test"):
            raise ConfigError(f"{path}: sample {entry.id} has unknown split {entry.split!r}")
        if entry.id in seen:
            raise ConfigError(f"{path}: duplicate sample id {entry.id}")
        if not entry.grids:
            raise ConfigError(f"{path}: sample {entry.id} lists no grids")
        if entry.split == "train" and entry.mask is not None:
            raise ConfigError(f"{path}: train sample {entry.id} must not carry a mask")
        seen.add(entry.id)
        samples.append(entry)
    manifest = Manifest(category=str(doc.get("category", "")), samples=samples, root=path.parent)
    if check_files:
        for s in samples:
            for rel in list(s.grids.values()) + ([s.mask] if s.mask else []):
                if not manifest.resolve(rel).is_file():
                    raise ConfigError(f"{path}: sample {s.id} references missing file {rel}")
    return manifest


# ---------------------------------------------------------------------------
# key=value config files


def parse_config(path: str | Path) -> dict[str, str]:
    """Plain ``key = value`` lines; '#' starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = text.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# synthetic datasets


def synth_dataset(
    out_dir: str | Path,
    *,
    kind: str,
    clusters: int = 4,
    height: int = 8,
    width: int = 8,
    dim: int = 16,
    noise: float = 0.05,
    n_train: int = 20,
    n_test: int = 10,
    n_test_good: int = 10,
    seed: int = 0,
    image_height: int = 64,
    image_width: int = 64,
    two_scales: bool = False,
) -> Path:
    """Generate a seeded synthetic dataset and write it in the package formats.

    Training grids tile the lattice with horizontal bands of cluster
    prototypes plus Gaussian noise. "logical" test grids swap two spatially
    disjoint blocks of features (the content is normal, the location is
    not); "structural" test grids replace one block with vectors orthogonal
    to every cluster prototype. Masks mark perturbed cells at image
    resolution. The same seed reproduces identical files.
    """
    if kind not in ("logical", "structural"):
        raise ConfigError(f"kind must be 'logical' or 'structural', got {kind!r}")
    if clusters < 2:
        raise ConfigError("clusters must be >= 2")
    if height < 2 or width < 2:
        raise ConfigError("grid dims must be >= 2x2")
    if height < clusters:
        raise ConfigError("height must be >= clusters (one band per cluster)")
    if image_height % height or image_width % width:
        raise ConfigError("image resolution must be a multiple of the grid dims")
    if two_scales and (height % 2 or width % 2):
        raise ConfigError("two_scales needs even grid dims")
    if n_train < 1:
        raise ConfigError("n_train must be >= 1")
    if dim <= clusters:
        raise ConfigError("dim must exceed clusters (out-of-distribution vectors need room)")

    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(clusters, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    band = (np.arange(height) * clusters) // height  # cluster id per row

    def base_grid() -> np.ndarray:
        feats = means[band][:, None, :] * np.ones((1, width, 1))
        return feats + noise * rng.normal(size=(height, width, dim))

    basis = np.linalg.qr(means.T)[0]  # orthonormal span of the cluster means

    def ood_vector() -> np.ndarray:
        v = rng.normal(size=dim)
        v -= basis @ (basis.T @ v)  # orthogonal to every cluster mean
        return v / np.linalg.norm(v)

    bh = max(1, height // 4)
    bw = max(1, width // 2)
    c0 = (width - bw) // 2

    out_dir = Path(out_dir)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    def write_sample(sid: str, feats: np.ndarray) -> dict[int, str]:
        grids = {2: f"grids/{sid}_s2.fgrd"}
        write_fgrd(out_dir / grids[2], make_feature_grid(feats, scale_id=2))
        if two_scales:
            pooled = feats.reshape(height // 2, 2, width // 2, 2, dim).mean(axis=(1, 3))
            grids[3] = f"grids/{sid}_s3.fgrd"
            write_fgrd(out_dir / grids[3], make_feature_grid(pooled, scale_id=3))
        return grids

    samples: list[SampleEntry] = []
    for k in range(n_train):
        sid = f"train_{k:03d}"
        samples.append(SampleEntry(id=sid, split="train", grids=write_sample(sid, base_grid()), tag="good"))

    ph = image_height // height
    pw = image_width // width
    for k in range(n_test):
        sid = f"test_{k:03d}"
        feats = base_grid()
        cell_mask = np.zeros((height, width), dtype=np.uint8)
        if kind == "logical":
            top = (slice(0, bh), slice(c0, c0 + bw))
            bottom = (slice(height - bh, height), slice(c0, c0 + bw))
            swap = feats[top].copy()
            feats[top] = feats[bottom]
            feats[bottom] = swap
            cell_mask[top] = 255
            cell_mask[bottom] = 255
        else:
            r0 = (height - bh) // 2
            block = (slice(r0, r0 + bh), slice(c0, c0 + bw))
            feats[block] = ood_vector() + noise * rng.normal(size=(bh, bw, dim))
            cell_mask[block] = 255
        grids = write_sample(sid, feats)
        mask_rel = f"masks/{sid}.amsk"
        write_amsk(out_dir / mask_rel, np.kron(cell_mask, np.ones((ph, pw), dtype=np.uint8)))
        samples.append(SampleEntry(id=sid, split="test", grids=grids, mask=mask_rel, tag=kind))

    for k in range(n_test_good):
        sid = f"good_{k:03d}"
        samples.append(SampleEntry(id=sid, split="test", grids=write_sample(sid, base_grid()), tag="good"))

    manifest = Manifest(category=f"synth_{kind}", samples=samples, root=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
