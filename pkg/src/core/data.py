"""
Segment data: samples, datasets, manifests, HSEG binary I/O, segment
composition and the synthetic segment-dataset generator.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.utils.errors import DataError, FormatError, ParseError, UsageError
from src.utils.seeding import make_rng, mix_seed

logger = logging.getLogger(__name__)

SEPARATOR = '+'
HSEG_MAGIC = b'HSEG'
HSEG_VERSION = 1
_HSEG_HEADER = struct.Struct('<4sHII')
SPLITS = ('train', 'val')


@dataclass(frozen=True, eq=False)
class SegmentSample:
    segment_id: str
    features: np.ndarray   # float32 (input_dim,)
    mask: np.ndarray       # bool (input_dim,)
    label: int

    @property
    def input_dim(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples of one (possibly combined) segment, index-aligned with the other segments of its split."""
    segment_id: str
    features: np.ndarray   # float32 (n, input_dim)
    masks: np.ndarray      # bool (n, input_dim)
    labels: np.ndarray     # int32 (n,)

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n or self.masks.shape != self.features.shape:
            raise DataError(
                f"{self.segment_id}: features {self.features.shape}, masks {self.masks.shape} "
                f"and labels {self.labels.shape} disagree")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"{self.segment_id}: non-finite features")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, index: int) -> SegmentSample:
        return SegmentSample(self.segment_id, self.features[index], self.masks[index], int(self.labels[index]))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.segment_id.encode())
        for arr in (self.features.astype('<f4'), self.masks.astype(np.uint8), self.labels.astype('<i4')):
            h.update(arr.tobytes())
        return h.hexdigest()


def check_background(segment_id: str, features: np.ndarray, masks: np.ndarray, background_value: float):
    off = ~masks
    if np.any(features[off] != np.float32(background_value)):
        raise DataError(f"{segment_id}: features differ from background {background_value} outside the mask")


def composed_id(ids: Sequence[str]) -> str:
    return SEPARATOR.join(ids)


def compose_segments(parts: Sequence[SegmentSample], background_value: float = 0.0) -> SegmentSample:
    """Overlay parts on the shared canvas; the earliest-listed part wins on overlap."""
    if not parts:
        raise UsageError("compose_segments needs at least one part")
    labels = {p.label for p in parts}
    if len(labels) > 1:
        raise DataError(f"label disagreement across parts: {sorted(labels)}")
    dims = {p.input_dim for p in parts}
    if len(dims) > 1:
        raise DataError(f"input_dim disagreement across parts: {sorted(dims)}")

    seg_id = composed_id([p.segment_id for p in parts])
    if len(parts) == 1:
        only = parts[0]
        return SegmentSample(seg_id, only.features.copy(), only.mask.copy(), only.label)

    features = np.full(parts[0].input_dim, background_value, dtype=np.float32)
    mask = np.zeros(parts[0].input_dim, dtype=bool)
    coverage = np.zeros(parts[0].input_dim, dtype=np.int32)
    for part in reversed(parts):
        features[part.mask] = part.features[part.mask]
        mask |= part.mask
        coverage += part.mask
    overlaps = int(np.count_nonzero(coverage > 1))
    if overlaps:
        logger.warning(f"Segment overlap in {seg_id}: {overlaps} position(s), earlier part kept",
                       extra={'overlap_count': overlaps, 'segment_id': seg_id})
    return SegmentSample(seg_id, features, mask, parts[0].label)


def compose_datasets(parts: Sequence[Dataset], background_value: float = 0.0) -> Dataset:
    """Row-wise compose_segments over index-aligned datasets."""
    if not parts:
        raise UsageError("compose_datasets needs at least one part")
    seg_id = composed_id([p.segment_id for p in parts])
    first = parts[0]
    for part in parts[1:]:
        if len(part) != len(first) or part.input_dim != first.input_dim:
            raise DataError(f"{seg_id}: parts are not index-aligned ({part.segment_id} vs {first.segment_id})")
        mismatch = np.flatnonzero(part.labels != first.labels)
        if mismatch.size:
            raise DataError(f"{seg_id}: label disagreement at indices {mismatch[:10].tolist()}")

    features = np.full(first.features.shape, background_value, dtype=np.float32)
    masks = np.zeros(first.masks.shape, dtype=bool)
    coverage = np.zeros(first.masks.shape, dtype=np.int32)
    for part in reversed(parts):
        features[part.masks] = part.features[part.masks]
        masks |= part.masks
        coverage += part.masks
    overlaps = int(np.count_nonzero(coverage > 1))
    if overlaps and len(parts) > 1:
        logger.warning(f"Segment overlap in {seg_id}: {overlaps} position(s) across the dataset, earlier part kept",
                       extra={'overlap_count': overlaps, 'segment_id': seg_id})
    return Dataset(seg_id, features, masks, first.labels.copy())


# ---------------------------------------------------------------- manifest

class PairingEntry(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    name: str = Field(min_length=1)
    children: List[str] = Field(min_length=1, max_length=2)


class SegmentManifest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    segments: List[str] = Field(min_length=1)
    input_dim: int = Field(gt=0)
    background_value: float = 0.0
    pairing: Optional[List[PairingEntry]] = None
    splits: Dict[str, Dict[str, str]]
    base_dir: Path = Field(default=Path('.'), exclude=True)

    @field_validator('segments')
    @classmethod
    def _valid_names(cls, names: List[str]) -> List[str]:
        seen = set()
        for name in names:
            if not name:
                raise ValueError("segment names must be non-empty")
            if SEPARATOR in name:
                raise ValueError(f"segment name {name!r} must not contain {SEPARATOR!r}")
            if name in seen:
                raise ValueError(f"duplicate segment name {name!r}")
            seen.add(name)
        return names

    def canonical(self) -> dict:
        return self.model_dump(mode='json')


def plan_default_pairing(segments: Sequence[str]) -> List[PairingEntry]:
    """Pair left-to-right per level; an odd node is promoted unchanged to the next level."""
    current = list(segments)
    entries = []
    while len(current) > 1:
        promoted = []
        for i in range(0, len(current) - 1, 2):
            name = composed_id([current[i], current[i + 1]])
            entries.append(PairingEntry(name=name, children=[current[i], current[i + 1]]))
            promoted.append(name)
        if len(current) % 2:
            promoted.append(current[-1])
        current = promoted
    return entries


def validate_pairing(segments: Sequence[str], pairing: Sequence[PairingEntry]):
    known = set(segments)
    uses: Dict[str, int] = {}
    for i, entry in enumerate(pairing):
        if entry.name in known:
            raise ParseError(f"pairing[{i}].name", f"duplicate node name {entry.name!r}")
        for child in entry.children:
            if child not in known:
                raise ParseError(f"pairing[{i}].children", f"unknown reference {child!r}")
            uses[child] = uses.get(child, 0) + 1
        known.add(entry.name)
    if len(segments) > 1 and not pairing:
        raise ParseError("pairing", f"empty pairing cannot combine {len(segments)} segments")
    must_use = list(segments) + [e.name for e in pairing[:-1]]
    for name in must_use:
        count = uses.get(name, 0)
        if count != 1:
            raise ParseError("pairing", f"{name!r} is referenced {count} times, expected exactly once")


def _parse_error(exc: ValidationError) -> ParseError:
    err = exc.errors()[0]
    path = '.'.join(str(part) for part in err['loc'])
    message = err['msg']
    if message.startswith('Value error, '):
        message = message[len('Value error, '):]
    return ParseError(path, message)


def manifest_from_dict(data: dict, base_dir: Path = Path('.')) -> SegmentManifest:
    try:
        manifest = SegmentManifest.model_validate({**data, 'base_dir': base_dir})
    except ValidationError as e:
        raise _parse_error(e) from e
    for split, paths in manifest.splits.items():
        for segment in manifest.segments:
            if segment not in paths:
                raise ParseError(f"splits.{split}", f"missing segment {segment!r}")
        for segment in paths:
            if segment not in manifest.segments:
                raise ParseError(f"splits.{split}.{segment}", "unknown segment")
    if manifest.pairing is None:
        manifest.pairing = plan_default_pairing(manifest.segments)
    else:
        validate_pairing(manifest.segments, manifest.pairing)
    return manifest


def load_manifest(path) -> SegmentManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError('', f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ParseError('', f"{path}: manifest must be a JSON object")
    data.pop('base_dir', None)
    manifest = manifest_from_dict(data, path.parent)
    logger.info(f"Loaded manifest {path} with {len(manifest.segments)} segments")
    return manifest


def canonical_json(data) -> bytes:
    return json.dumps(data, sort_keys=True, indent=2).encode() + b'\n'


def save_manifest(path, manifest: SegmentManifest):
    Path(path).write_bytes(canonical_json(manifest.canonical()))


def manifest_hash(manifest: SegmentManifest) -> str:
    return hashlib.sha256(canonical_json(manifest.canonical())).hexdigest()


# ---------------------------------------------------------------- HSEG files

def save_dataset(path, dataset: Dataset):
    path = Path(path)
    n, dim = dataset.features.shape
    payload = b''.join([
        _HSEG_HEADER.pack(HSEG_MAGIC, HSEG_VERSION, n, dim),
        dataset.features.astype('<f4').tobytes(),
        dataset.masks.astype(np.uint8).tobytes(),
        dataset.labels.astype('<i4').tobytes(),
    ])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)


def read_hseg(path, segment_id: str, expected_dim: Optional[int] = None) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"segment file not found: {path}") from e
    if len(raw) < _HSEG_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, dim = _HSEG_HEADER.unpack_from(raw)
    if magic != HSEG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != HSEG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: dim {dim} disagrees with manifest input_dim {expected_dim}")
    expected = _HSEG_HEADER.size + n * dim * 4 + n * dim + n * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for n={n}, dim={dim}, found {len(raw)}")

    offset = _HSEG_HEADER.size
    features = np.frombuffer(raw, dtype='<f4', count=n * dim, offset=offset).reshape(n, dim).astype(np.float32)
    offset += n * dim * 4
    mask_bytes = np.frombuffer(raw, dtype=np.uint8, count=n * dim, offset=offset).reshape(n, dim)
    offset += n * dim
    if np.any(mask_bytes > 1):
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    labels = np.frombuffer(raw, dtype='<i4', count=n, offset=offset).astype(np.int32)
    if not np.all(np.isfinite(features)):
        raise FormatError(f"{path}: non-finite features")
    return Dataset(segment_id, features, mask_bytes.astype(bool), labels)


def load_dataset(manifest: SegmentManifest, segment_id: str, split: str) -> Dataset:
    if split not in manifest.splits:
        raise DataError(f"manifest has no split {split!r} (available: {sorted(manifest.splits)})")
    if segment_id not in manifest.splits[split]:
        raise DataError(f"split {split!r} has no file for segment {segment_id!r}")
    path = manifest.base_dir / manifest.splits[split][segment_id]
    dataset = read_hseg(path, segment_id, manifest.input_dim)
    check_background(segment_id, dataset.features, dataset.masks, manifest.background_value)
    logger.debug(f"Loaded {len(dataset)} samples for {segment_id}/{split} from {path}")
    return dataset


# ---------------------------------------------------------------- synthetic data

class SyntheticMode(str, Enum):
    PROTOTYPE = 'prototype'
    XOR = 'xor'


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int
    n_segments: int
    input_dim: int
    noise_sigma: float = 0.1
    mode: SyntheticMode = SyntheticMode.PROTOTYPE
    seed: int = 1234
    n_classes: int = 2
    n_val_per_class: Optional[int] = None
    background_value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'mode', SyntheticMode(self.mode))
        if self.n_segments < 1:
            raise UsageError(f"n_segments must be >= 1, got {self.n_segments}")
        if self.input_dim < 1 or self.input_dim % self.n_segments:
            raise UsageError(f"input_dim {self.input_dim} must be a positive multiple of n_segments {self.n_segments}")
        if self.n_per_class < 1 or (self.n_val_per_class is not None and self.n_val_per_class < 1):
            raise UsageError("samples per class must be >= 1")
        if self.noise_sigma < 0:
            raise UsageError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_classes < 2:
            raise UsageError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.mode is SyntheticMode.XOR and (self.n_segments < 2 or self.n_classes != 2):
            raise UsageError("xor mode needs n_segments >= 2 and exactly 2 classes")

    @property
    def block(self) -> int:
        return self.input_dim // self.n_segments

    @property
    def segment_names(self) -> List[str]:
        return [f"seg{g}" for g in range(self.n_segments)]


def _xor_signs(labels: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Latent ±1 factors whose product encodes the label, balanced within each class."""
    s1 = np.zeros(labels.shape[0], dtype=np.float64)
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        signs = np.array([1.0] * math.ceil(idx.size / 2) + [-1.0] * (idx.size // 2))
        rng.shuffle(signs)
        s1[idx] = signs
    s2 = np.where(labels == 1, s1, -s1)
    return s1, s2


def generate_synthetic(spec: SyntheticSpec) -> Tuple[SegmentManifest, Dict[str, Dict[str, Dataset]]]:
    names = spec.segment_names
    block = spec.block
    prototypes = make_rng(mix_seed(spec.seed, 0)).standard_normal((spec.n_classes, spec.n_segments, block))

    datasets: Dict[str, Dict[str, Dataset]] = {}
    for split_index, split in enumerate(SPLITS):
        rng = make_rng(mix_seed(spec.seed, split_index + 1))
        per_class = spec.n_per_class if split == 'train' else (spec.n_val_per_class or spec.n_per_class)
        labels = np.repeat(np.arange(spec.n_classes, dtype=np.int32), per_class)[rng.permutation(spec.n_classes * per_class)]
        n = labels.shape[0]

        if spec.mode is SyntheticMode.XOR:
            s1, s2 = _xor_signs(labels, rng)
        blocks = []
        for g in range(spec.n_segments):
            noise = rng.standard_normal((n, block))
            if spec.mode is SyntheticMode.PROTOTYPE:
                values = prototypes[labels, g] + spec.noise_sigma * noise
            elif g < 2:
                latent = s1 if g == 0 else s2
                values = latent[:, None] + spec.noise_sigma * noise
            else:
                values = noise
            blocks.append(values)

        split_sets = {}
        for g, name in enumerate(names):
            features = np.full((n, spec.input_dim), spec.background_value, dtype=np.float32)
            masks = np.zeros((n, spec.input_dim), dtype=bool)
            features[:, g * block:(g + 1) * block] = blocks[g]
            masks[:, g * block:(g + 1) * block] = True
            split_sets[name] = Dataset(name, features, masks, labels.copy())
        datasets[split] = split_sets

    manifest = SegmentManifest(
        segments=names,
        input_dim=spec.input_dim,
        background_value=spec.background_value,
        pairing=plan_default_pairing(names),
        splits={split: {name: f"data/{split}/{name}.hseg" for name in names} for split in SPLITS},
    )
    logger.info(f"Generated {spec.mode.value} synthetic data: {len(names)} segments, seed {spec.seed}")
    return manifest, datasets


def write_synthetic(out_dir, spec: SyntheticSpec) -> Tuple[Path, SegmentManifest, Dict[str, Dict[str, Dataset]]]:
    out_dir = Path(out_dir)
    manifest, datasets = generate_synthetic(spec)
    for split, split_sets in datasets.items():
        for name, dataset in split_sets.items():
            save_dataset(out_dir / manifest.splits[split][name], dataset)
    manifest_path = out_dir / 'manifest.json'
    save_manifest(manifest_path, manifest)
    manifest.base_dir = out_dir
    return manifest_path, manifest, datasets
