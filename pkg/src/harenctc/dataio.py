"""Feature files, manifests, cropping, class-balanced sampling and the
synthetic corpus generator.

HRNF layout (little-endian)::

    "HRNF" | u32 version | u32 L | u32 T | u32 d | f64 frame_rate
    f32[L][T][d] layer payload
    u32 T | u32 d_tok
    f32[T][d_tok] tokenization features
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import LayerStack

MAGIC = b"HRNF"
VERSION = 1
_HEAD = struct.Struct("<4sIIIId")
_TOK_HEAD = struct.Struct("<II")


class FormatError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


# -- feature files ----------------------------------------------------------


def write_feature_file(path: str | Path, layers: np.ndarray, tok_features: np.ndarray, frame_rate: float) -> None:
    layers = np.ascontiguousarray(layers, dtype="<f4")
    tok = np.ascontiguousarray(tok_features, dtype="<f4")
    if layers.ndim != 3 or tok.ndim != 2 or tok.shape[0] != layers.shape[1]:
        raise ValueError(f"inconsistent shapes: layers {layers.shape}, tokenization features {tok.shape}")
    if not (np.all(np.isfinite(layers)) and np.all(np.isfinite(tok))):
        raise ValueError("feature values must be finite")
    n_layers, n_frames, dim = layers.shape
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, n_layers, n_frames, dim, float(frame_rate)))
        fh.write(layers.tobytes())
        fh.write(_TOK_HEAD.pack(n_frames, tok.shape[1]))
        fh.write(tok.tobytes())


def _need(blob: bytes, offset: int, size: int, what: str) -> None:
    if len(blob) < offset + size:
        raise FormatError(
            f"truncated {what} at byte {offset}: expected {size} bytes, got {max(len(blob) - offset, 0)}"
        )


def read_feature_file(path: str | Path, segment_id: str = "", subject_id: str = "") -> tuple[LayerStack, np.ndarray]:
    blob = Path(path).read_bytes()
    _need(blob, 0, _HEAD.size, "header")
    magic, version, n_layers, n_frames, dim, rate = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    offset = _HEAD.size
    n = n_layers * n_frames * dim
    _need(blob, offset, 4 * n, "layer payload")
    layers = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(n_layers, n_frames, dim)
    offset += 4 * n
    _need(blob, offset, _TOK_HEAD.size, "tokenization header")
    tok_frames, tok_dim = _TOK_HEAD.unpack_from(blob, offset)
    if tok_frames != n_frames:
        raise FormatError(f"tokenization frames {tok_frames} at byte {offset} differ from layer frames {n_frames}")
    offset += _TOK_HEAD.size
    _need(blob, offset, 4 * n_frames * tok_dim, "tokenization payload")
    tok = np.frombuffer(blob, dtype="<f4", count=n_frames * tok_dim, offset=offset).reshape(n_frames, tok_dim)
    offset += 4 * n_frames * tok_dim
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after byte {offset}")
    if not (np.all(np.isfinite(layers)) and np.all(np.isfinite(tok))):
        raise FormatError("non-finite values in payload")
    stack = LayerStack(layers.copy(), frame_rate=rate, segment_id=segment_id, subject_id=subject_id)
    return stack, tok.copy()


# -- manifests --------------------------------------------------------------


@dataclass
class SegmentRef:
    subject_id: str
    label: int
    path: str
    split: str | None = None
    duration: float | None = None

    @property
    def segment_id(self) -> str:
        return Path(self.path).stem


@dataclass
class SubjectRecord:
    subject_id: str
    label: int
    segments: list[SegmentRef] = field(default_factory=list)


@dataclass
class Manifest:
    records: list[SegmentRef]
    base_dir: Path = Path(".")

    def __post_init__(self):
        seen = set()
        labels: dict[str, int] = {}
        for r in self.records:
            if r.label not in (0, 1):
                raise ConfigurationError(f"label for {r.subject_id} must be 0 or 1, got {r.label}")
            key = (r.subject_id, r.path)
            if key in seen:
                raise ConfigurationError(f"duplicate manifest entry {key}")
            seen.add(key)
            if labels.setdefault(r.subject_id, r.label) != r.label:
                raise ConfigurationError(f"subject {r.subject_id} has conflicting labels")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        records = []
        for line in path.read_text().splitlines():
            if line.strip():
                records.append(SegmentRef(**json.loads(line)))
        return cls(records, path.parent)

    def save(self, path: str | Path) -> None:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    def resolve(self, ref: SegmentRef) -> Path:
        p = Path(ref.path)
        return p if p.is_absolute() else self.base_dir / p

    def load_segment(self, ref: SegmentRef) -> tuple[LayerStack, np.ndarray]:
        return read_feature_file(self.resolve(ref), ref.segment_id, ref.subject_id)

    def subjects(self) -> list[SubjectRecord]:
        out: dict[str, SubjectRecord] = {}
        for r in self.records:
            out.setdefault(r.subject_id, SubjectRecord(r.subject_id, r.label)).segments.append(r)
        return list(out.values())

    def subset(self, subject_ids) -> "Manifest":
        keep = set(subject_ids)
        return Manifest([r for r in self.records if r.subject_id in keep], self.base_dir)

    def split(self, tag: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == tag], self.base_dir)


# -- cropping and sampling --------------------------------------------------


def crop_offset(n_frames: int, target_frames: int, rng: np.random.Generator) -> int:
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    if n_frames <= target_frames:
        return 0
    return int(rng.integers(0, n_frames - target_frames + 1))


def crop_segment(stack: LayerStack, target_frames: int, rng) -> LayerStack:
    """Uniform random window of ``target_frames``, same offset for every layer."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    start = crop_offset(stack.n_frames, target_frames, rng)
    if stack.n_frames <= target_frames:
        return stack
    return LayerStack(
        stack.layers[:, start : start + target_frames],
        stack.frame_rate,
        stack.segment_id,
        stack.subject_id,
    )


def seconds_to_frames(seconds: float, frame_rate: float) -> int:
    return int(round(seconds * frame_rate))


class WeightedSampler:
    """Draws segment indices with probability proportional to 1/(class count)."""

    def __init__(self, labels: Sequence[int], seed: int = 0):
        labels = np.asarray(labels)
        counts = Counter(labels.tolist())
        if len(counts) < 2:
            raise ConfigurationError("weighted sampling needs both classes present")
        weights = np.array([1.0 / counts[y] for y in labels.tolist()])
        self.probs = weights / weights.sum()
        self.rng = np.random.default_rng(seed)

    def draw(self, n: int) -> np.ndarray:
        return self.rng.choice(self.probs.size, size=n, replace=True, p=self.probs)

    def __iter__(self) -> Iterator[int]:
        while True:
            yield int(self.draw(1)[0])


def weighted_sampler(manifest: Manifest, seed: int = 0) -> WeightedSampler:
    return WeightedSampler([r.label for r in manifest.records], seed)


# -- synthetic corpus -------------------------------------------------------

MARKER_LAYOUTS = ("both", "split", "shallow", "deep")


@dataclass
class SyntheticSpec:
    n_control: int = 16
    n_depressed: int = 16
    segments_per_subject: int = 4
    n_frames: int = 64
    n_layers: int = 4
    dim: int = 32
    tok_dim: int = 8
    marker_density: float = 0.1
    marker_strength: float = 3.0
    marker_dims: int = 4
    marker_layout: str = "both"
    frame_rate: float = 50.0
    dev_fraction: float = 0.25
    seed: int = 7

    def __post_init__(self):
        if not 0.0 < self.marker_density < 1.0:
            raise ValueError(f"marker density must lie in (0, 1), got {self.marker_density}")
        if self.marker_strength < 0:
            raise ValueError(f"marker strength must be >= 0, got {self.marker_strength}")
        if self.marker_layout not in MARKER_LAYOUTS:
            raise ValueError(f"marker layout must be one of {MARKER_LAYOUTS}")
        if 2 * self.marker_dims > self.dim or self.marker_dims > self.tok_dim:
            raise ValueError("marker_dims too large for the feature dimensions")
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers")

    @property
    def group_size(self) -> int:
        return max(1, self.n_layers // 3)

    @property
    def shallow_layers(self) -> range:
        return range(0, self.group_size)

    @property
    def deep_layers(self) -> range:
        return range(self.n_layers - self.group_size, self.n_layers)

    @property
    def markers_per_segment(self) -> int:
        return int(round(self.marker_density * self.n_frames))


def _subject_groups(spec: SyntheticSpec, label: int, index: int) -> tuple[bool, bool]:
    """Which layer groups carry this subject's markers: (shallow, deep)."""
    if label == 0:
        return False, False
    if spec.marker_layout == "both":
        return True, True
    if spec.marker_layout == "shallow":
        return True, False
    if spec.marker_layout == "deep":
        return False, True
    return (index % 2 == 0), (index % 2 == 1)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write feature files and ``manifest.jsonl`` under ``out_dir``.

    Every layer is i.i.d. standard normal. Depressed subjects carry a mean shift
    of ``marker_strength`` on ``round(density * T)`` random frames per segment,
    on a fixed dim subset in the shallow layer group and a different fixed
    subset in the deep group (``marker_layout`` picks which groups; ``split``
    alternates subjects between shallow-only and deep-only). The tokenization
    channel gets the same shift on the same frames. Marker frame indices per
    depressed segment are written to ``markers.json``.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    dims = rng.permutation(spec.dim)
    shallow_dims = np.sort(dims[: spec.marker_dims])
    deep_dims = np.sort(dims[spec.marker_dims : 2 * spec.marker_dims])
    tok_dims = np.sort(rng.permutation(spec.tok_dim)[: spec.marker_dims])

    subjects = [(0, i) for i in range(spec.n_control)] + [(1, i) for i in range(spec.n_depressed)]
    splits = {}
    for label, count in ((0, spec.n_control), (1, spec.n_depressed)):
        n_dev = int(round(spec.dev_fraction * count))
        dev = set(rng.permutation(count)[:n_dev].tolist())
        for i in range(count):
            splits[(label, i)] = "dev" if i in dev else "train"

    records = []
    truth: dict[str, list[int]] = {}
    for label, i in subjects:
        sid = f"{'D' if label else 'N'}{i:03d}"
        in_shallow, in_deep = _subject_groups(spec, label, i)
        for j in range(spec.segments_per_subject):
            layers = rng.standard_normal((spec.n_layers, spec.n_frames, spec.dim))
            tok = rng.standard_normal((spec.n_frames, spec.tok_dim))
            frames = np.sort(rng.choice(spec.n_frames, size=spec.markers_per_segment, replace=False))
            if label == 1 and frames.size:
                if in_shallow:
                    for layer in spec.shallow_layers:
                        layers[layer][np.ix_(frames, shallow_dims)] += spec.marker_strength
                if in_deep:
                    for layer in spec.deep_layers:
                        layers[layer][np.ix_(frames, deep_dims)] += spec.marker_strength
                tok[np.ix_(frames, tok_dims)] += spec.marker_strength
            rel = Path("features") / f"{sid}_{j:02d}.hrnf"
            if label == 1:
                truth[rel.stem] = frames.tolist()
            write_feature_file(out_dir / rel, layers, tok, spec.frame_rate)
            records.append(
                SegmentRef(sid, label, rel.as_posix(), splits[(label, i)], spec.n_frames / spec.frame_rate)
            )
    manifest_path = out_dir / "manifest.jsonl"
    Manifest(records, out_dir).save(manifest_path)
    (out_dir / "markers.json").write_text(json.dumps(truth, sort_keys=True) + "\n")
    (out_dir / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return manifest_path
