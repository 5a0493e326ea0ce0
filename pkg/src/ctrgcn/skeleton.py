"""Skeleton graphs, labelled sequences, modality derivation and synthetic data.

Sequences are stored as ``[persons, frames, joints, channels]`` float arrays.
Bone lists follow the public Kinect v2 (25 joint) and Kinect v1 (20 joint)
layouts, re-rooted so every edge points toward a single root joint.
"""

import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, FormatError

# (child, parent), 1-based as in the sensor documentation; root = 2 (spine middle).
_NTU25_EDGES_1B = (
    (1, 2), (21, 2), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
    (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14),
    (16, 15), (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8),
    (24, 25), (25, 12),
)
NTU25_JOINTS = (
    "spine_base", "spine_mid", "neck", "head", "shoulder_left", "elbow_left",
    "wrist_left", "hand_left", "shoulder_right", "elbow_right", "wrist_right",
    "hand_right", "hip_left", "knee_left", "ankle_left", "foot_left",
    "hip_right", "knee_right", "ankle_right", "foot_right", "spine_shoulder",
    "hand_tip_left", "thumb_left", "hand_tip_right", "thumb_right",
)

# root = 1 (hip centre).
_NWUCLA20_EDGES_1B = (
    (2, 1), (3, 2), (4, 3), (5, 3), (6, 5), (7, 6), (8, 7), (9, 3), (10, 9),
    (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15), (17, 1),
    (18, 17), (19, 18), (20, 19),
)
NWUCLA20_JOINTS = (
    "hip_center", "spine", "shoulder_center", "head", "shoulder_left",
    "elbow_left", "wrist_left", "hand_left", "shoulder_right", "elbow_right",
    "wrist_right", "hand_right", "hip_left", "knee_left", "ankle_left",
    "foot_left", "hip_right", "knee_right", "ankle_right", "foot_right",
)

# small torso-plus-limbs tree for tiny test models; root = 1.
_TOY5_EDGES_1B = ((2, 1), (3, 2), (4, 2), (5, 1))

_GRAPH_TABLE = {
    "ntu25": (25, _NTU25_EDGES_1B),
    "nwucla20": (20, _NWUCLA20_EDGES_1B),
    "toy5": (5, _TOY5_EDGES_1B),
}

MODALITIES = ("joint", "bone", "joint_motion", "bone_motion")


@dataclass(frozen=True)
class SkeletonGraph:
    """Joints plus a directed spanning tree of bones pointing at the root."""

    num_joints: int
    edges: Tuple[Tuple[int, int], ...]
    name: str = "custom"

    def __post_init__(self):
        n = self.num_joints
        if n < 1:
            raise DimensionError("a graph needs at least one joint")
        edges = tuple((int(c), int(p)) for c, p in self.edges)
        object.__setattr__(self, "edges", edges)
        if len(edges) != n - 1:
            raise DimensionError(f"spanning tree on {n} joints needs {n - 1} edges, got {len(edges)}")
        children = [c for c, _ in edges]
        for c, p in edges:
            if not (0 <= c < n and 0 <= p < n) or c == p:
                raise DimensionError(f"bad edge ({c}, {p}) for {n} joints")
        if len(set(children)) != len(children):
            raise DimensionError("a joint has more than one parent")
        roots = set(range(n)) - set(children)
        if len(roots) != 1:
            raise DimensionError(f"expected exactly one root, found {sorted(roots)}")
        # every joint must reach the root without revisiting
        parent = dict(edges)
        root = next(iter(roots))
        for start in range(n):
            seen, j = set(), start
            while j != root:
                if j in seen:
                    raise DimensionError("edge list contains a cycle")
                seen.add(j)
                j = parent[j]

    @property
    def root(self) -> int:
        return (set(range(self.num_joints)) - {c for c, _ in self.edges}).pop()

    @property
    def parents(self) -> np.ndarray:
        """Parent index per joint; the root maps to itself."""
        out = np.arange(self.num_joints)
        for c, p in self.edges:
            out[c] = p
        return out

    def permuted(self, perm: Sequence[int]) -> "SkeletonGraph":
        """Relabel joint ``j`` as ``perm[j]``."""
        perm = list(perm)
        return SkeletonGraph(
            self.num_joints, tuple((perm[c], perm[p]) for c, p in self.edges), self.name
        )


def build_graph(name: str) -> SkeletonGraph:
    try:
        n, edges = _GRAPH_TABLE[name]
    except KeyError:
        raise LookupError(f"unknown skeleton graph {name!r}; known: {sorted(_GRAPH_TABLE)}") from None
    return SkeletonGraph(n, tuple((c - 1, p - 1) for c, p in edges), name)


def random_tree(num_joints: int, rng: np.random.Generator) -> SkeletonGraph:
    """Uniformly attach each joint to an earlier one, then shuffle labels."""
    perm = rng.permutation(num_joints)
    edges = []
    for j in range(1, num_joints):
        edges.append((int(perm[j]), int(perm[rng.integers(0, j)])))
    return SkeletonGraph(num_joints, tuple(edges), "random")


@dataclass(frozen=True)
class AdjacencySet:
    identity: np.ndarray
    inward: np.ndarray
    outward: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.identity, self.inward, self.outward])


def _row_normalize(a: np.ndarray) -> np.ndarray:
    sums = a.sum(axis=1, keepdims=True)
    return np.divide(a, sums, out=np.zeros_like(a), where=sums != 0)


def adjacency_set(graph: SkeletonGraph) -> AdjacencySet:
    """Identity, inward (child row reads its parent) and outward partitions."""
    n = graph.num_joints
    inward = np.zeros((n, n))
    for c, p in graph.edges:
        inward[c, p] = 1.0
    outward = (inward.T > 0).astype(np.float64)
    return AdjacencySet(np.eye(n), _row_normalize(inward), _row_normalize(outward))


@dataclass
class SkeletonSequence:
    """One labelled sample laid out as ``[persons, frames, joints, channels]``."""

    data: np.ndarray
    label: int = 0
    dataset: str = "custom"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise DimensionError(f"sequence data must be 4-d with positive dims, got {self.data.shape}")
        self.label = int(self.label)
        if self.label < 0:
            raise DimensionError(f"label must be non-negative, got {self.label}")

    @property
    def persons(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def joints(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def replace(self, data: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(data, self.label, self.dataset)

    def __eq__(self, other):
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (
            self.label == other.label
            and self.dataset == other.dataset
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


def resize_temporal(seq: SkeletonSequence, target_frames: int) -> SkeletonSequence:
    """Linearly resample the frame axis onto ``target_frames`` uniform positions."""
    if target_frames < 1:
        raise ContractError("target_frames must be >= 1")
    t = seq.frames
    if target_frames == t:
        return seq.replace(seq.data.copy())
    if target_frames == 1 or t == 1:
        pos = np.zeros(target_frames)
    else:
        pos = np.arange(target_frames) * (t - 1) / (target_frames - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    w = (pos - lo)[None, :, None, None]
    a, b = seq.data[:, lo], seq.data[:, hi]
    return seq.replace(a + w * (b - a))


def derive_bone(seq: SkeletonSequence, graph: SkeletonGraph) -> SkeletonSequence:
    """Joint minus parent joint per edge; the root's bone is zero."""
    if seq.joints != graph.num_joints:
        raise DimensionError(f"sequence has {seq.joints} joints, graph has {graph.num_joints}")
    out = np.zeros_like(seq.data)
    for c, p in graph.edges:
        out[:, :, c] = seq.data[:, :, c] - seq.data[:, :, p]
    return seq.replace(out)


def derive_motion(seq: SkeletonSequence) -> SkeletonSequence:
    """Forward frame difference; the last frame is zero."""
    out = np.zeros_like(seq.data)
    out[:, :-1] = seq.data[:, 1:] - seq.data[:, :-1]
    return seq.replace(out)


def derive_modality(seq: SkeletonSequence, graph: SkeletonGraph, modality: str) -> SkeletonSequence:
    if modality == "joint":
        return seq
    if modality == "bone":
        return derive_bone(seq, graph)
    if modality == "joint_motion":
        return derive_motion(seq)
    if modality == "bone_motion":
        return derive_motion(derive_bone(seq, graph))
    raise LookupError(f"unknown modality {modality!r}; known: {MODALITIES}")


# -- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 50
    persons: int = 1
    frames: int = 64
    graph: str = "ntu25"
    noise_sigma: float = 0.05
    channels: int = 3
    harmonics: int = 2


@dataclass
class DatasetDescriptor:
    num_classes: int
    graph: SkeletonGraph
    samples: List[SkeletonSequence]
    split: List[str]
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.split) != len(self.samples):
            raise DimensionError("split assignment must cover every sample")
        if not self.ids:
            self.ids = [f"s{i:05d}" for i in range(len(self.samples))]
        channels = {s.channels for s in self.samples}
        for s in self.samples:
            if s.joints != self.graph.num_joints:
                raise DimensionError(f"sample with {s.joints} joints on a {self.graph.num_joints}-joint graph")
            if s.label >= self.num_classes:
                raise DimensionError(f"label {s.label} outside [0, {self.num_classes})")
        if len(channels) > 1:
            raise DimensionError(f"mixed channel counts {sorted(channels)}")

    def subset(self, split: str) -> List[SkeletonSequence]:
        return [s for s, tag in zip(self.samples, self.split) if tag == split]

    def subset_ids(self, split: str) -> List[str]:
        return [i for i, tag in zip(self.ids, self.split) if tag == split]

    def map(self, fn) -> "DatasetDescriptor":
        return DatasetDescriptor(
            self.num_classes, self.graph, [fn(s) for s in self.samples], list(self.split), list(self.ids)
        )


def class_templates(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Noise-free trajectories, shape ``[classes, persons, frames, joints, channels]``."""
    rng = np.random.default_rng(seed)
    graph = build_graph(spec.graph)
    n, c = graph.num_joints, spec.channels
    # rest pose grown outward from the root along random bone vectors
    offsets = rng.normal(0.0, 0.15, size=(n, c))
    pose = np.zeros((n, c))
    order = _root_first_order(graph)
    parents = graph.parents
    for j in order:
        if j != graph.root:
            pose[j] = pose[parents[j]] + offsets[j]
    t = np.arange(spec.frames)[:, None, None] / spec.frames
    out = np.empty((spec.num_classes, spec.persons, spec.frames, n, c))
    for k in range(spec.num_classes):
        for m in range(spec.persons):
            motion = np.zeros((spec.frames, n, c))
            for h in range(spec.harmonics):
                amp = rng.uniform(0.0, 0.3, size=(n, c))
                phase = rng.uniform(0.0, 2 * np.pi, size=(n, c))
                freq = rng.integers(1, 4)
                motion += amp * np.sin(2 * np.pi * freq * t + phase)
            out[k, m] = pose + 0.5 * m + motion
    return out


def _root_first_order(graph: SkeletonGraph) -> List[int]:
    children = {j: [] for j in range(graph.num_joints)}
    for c, p in graph.edges:
        children[p].append(c)
    order, frontier = [], [graph.root]
    while frontier:
        j = frontier.pop(0)
        order.append(j)
        frontier.extend(sorted(children[j]))
    return order


def synthesize_dataset(spec: SyntheticSpec, seed: int) -> DatasetDescriptor:
    """Class templates plus Gaussian noise; every fifth sample goes to test.

    Values are rounded to float32 so the dataset survives a file roundtrip.
    """
    if min(spec.num_classes, spec.samples_per_class, spec.persons, spec.frames) < 1:
        raise ContractError(f"synthetic spec dims must be positive: {spec}")
    graph = build_graph(spec.graph)
    templates = class_templates(spec, seed)
    noise_rng = np.random.default_rng([seed, 1])
    samples, split = [], []
    index = 0
    for k in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            data = templates[k] + spec.noise_sigma * noise_rng.standard_normal(templates[k].shape)
            samples.append(SkeletonSequence(data.astype(np.float32).astype(np.float64), k, spec.graph))
            split.append("test" if index % 5 == 4 else "train")
            index += 1
    return DatasetDescriptor(spec.num_classes, graph, samples, split)


# -- binary sequence files -------------------------------------------------

_MAGIC = b"SKL1"
_HEADER = struct.Struct("<6I")
_MAX_ELEMENTS = 1 << 31


def encode_sequence(seq: SkeletonSequence) -> bytes:
    name = seq.dataset.encode("utf-8")
    m, t, n, c = seq.data.shape
    header = _MAGIC + _HEADER.pack(m, t, n, c, seq.label, len(name)) + name
    return header + seq.data.astype("<f4").tobytes(order="C")


def decode_sequence(blob: bytes) -> SkeletonSequence:
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise FormatError("bad magic, expected 'SKL1'", 0)
    if len(blob) < 4 + _HEADER.size:
        raise FormatError("truncated header", len(blob))
    m, t, n, c, label, name_len = _HEADER.unpack_from(blob, 4)
    if 0 in (m, t, n, c):
        raise FormatError(f"zero dimension in header {(m, t, n, c)}", 4)
    count = m * t * n * c
    if count >= _MAX_ELEMENTS:
        raise FormatError(f"dimension overflow: {m}x{t}x{n}x{c}", 4)
    offset = 4 + _HEADER.size
    if offset + name_len > len(blob):
        raise FormatError("truncated graph name", len(blob))
    try:
        name = blob[offset:offset + name_len].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("graph name is not UTF-8", offset) from None
    offset += name_len
    expected = count * 4
    remaining = len(blob) - offset
    if remaining != expected:
        raise FormatError(f"payload holds {remaining} bytes, header implies {expected}", offset)
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return SkeletonSequence(data.astype(np.float64).reshape(m, t, n, c), label, name)


def save_sequence(seq: SkeletonSequence, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_sequence(seq))


def load_sequence(path) -> SkeletonSequence:
    with open(path, "rb") as f:
        return decode_sequence(f.read())


MANIFEST = "manifest.txt"


def save_dataset(ds: DatasetDescriptor, directory) -> None:
    """Write one ``.skl`` file per sample plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"# graph={ds.graph.name} num_classes={ds.num_classes}"]
    for sid, seq, tag in zip(ds.ids, ds.samples, ds.split):
        fname = f"{sid}.skl"
        save_sequence(seq, os.path.join(directory, fname))
        lines.append(f"{fname} {seq.label} {tag}")
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(directory) -> DatasetDescriptor:
    path = os.path.join(directory, MANIFEST)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    meta = {}
    samples, split, ids = [], [], []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for item in line[1:].split():
                key, _, value = item.partition("=")
                meta[key] = value
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("train", "test"):
            raise FormatError(f"{path}: malformed manifest line {lineno}: {line!r}")
        fname, label, tag = parts
        seq = load_sequence(os.path.join(directory, fname))
        if seq.label != int(label):
            raise FormatError(f"{fname}: label {seq.label} disagrees with manifest {label}")
        samples.append(seq)
        split.append(tag)
        ids.append(os.path.splitext(fname)[0])
    if "graph" not in meta or "num_classes" not in meta:
        raise FormatError(f"{path}: missing '# graph=... num_classes=...' header")
    return DatasetDescriptor(int(meta["num_classes"]), build_graph(meta["graph"]), samples, split, ids)
