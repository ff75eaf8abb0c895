"""On-disk expert trajectories: one checkpoint file per (client, round) plus a manifest.

Checkpoint layout (little-endian)::

    offset  size  field
    0       4     magic b"TSYN"
    4       4     format version (u32)
    8       4     client_id (u32)
    12      4     round (u32)
    16      8     param_count (u64)
    24      8*n   theta as float64

The manifest is JSON and is written last; a directory without one is an
incomplete run.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelSpec, ModelState

MAGIC = b"TSYN"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")
MANIFEST_NAME = "manifest.json"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TrajectoryTooShortError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Checkpoint:
    client_id: int
    round: int
    theta: np.ndarray


def encode_checkpoint(theta: np.ndarray, client_id: int = 0, round_index: int = 0) -> bytes:
    theta = np.ascontiguousarray(theta, dtype="<f8")
    return HEADER.pack(MAGIC, VERSION, client_id, round_index, theta.size) + theta.tobytes()


def save_checkpoint(path, theta, client_id: int = 0, round_index: int = 0) -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    if isinstance(theta, ModelState):
        theta = theta.theta
    blob = encode_checkpoint(theta, client_id, round_index)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_checkpoint(path, checksum: str | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size:
        if blob[:4] != MAGIC[:len(blob[:4])]:
            raise BadMagicError(f"{path}: bad magic")
        raise LengthMismatchError(f"{path}: length mismatch, {len(blob)} bytes is shorter than the header")
    magic, version, client_id, round_index, count = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version mismatch, file has {version}, reader supports {VERSION}")
    if len(blob) != HEADER.size + 8 * count:
        raise LengthMismatchError(
            f"{path}: length mismatch, expected {HEADER.size + 8 * count} bytes, found {len(blob)}"
        )
    if checksum is not None and hashlib.sha256(blob).hexdigest() != checksum:
        raise ChecksumError(f"{path}: checksum failure")
    theta = np.frombuffer(blob, dtype="<f8", count=count, offset=HEADER.size).astype(np.float64)
    return Checkpoint(client_id, round_index, theta)


def load_checkpoint(path, spec: ModelSpec, checksum: str | None = None) -> ModelState:
    ckpt = read_checkpoint(path, checksum)
    if ckpt.theta.size != spec.param_count:
        raise LengthMismatchError(f"{path}: length mismatch, {ckpt.theta.size} params vs spec {spec.param_count}")
    return ModelState(spec, ckpt.theta)


@dataclass(frozen=True)
class ManifestEntry:
    client_id: int
    round: int
    path: str
    checksum: str


@dataclass
class TrajectoryManifest:
    run_id: str
    spec: ModelSpec
    num_clients: int
    rounds: int
    entries: list
    root: Path = field(default=Path("."), compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.entries) != self.num_clients * self.rounds:
            raise ValueError(
                f"manifest lists {len(self.entries)} checkpoints, expected {self.num_clients}*{self.rounds}"
            )
        self._index = {(e.client_id, e.round): e for e in self.entries}

    def theta(self, client_id: int, round_index: int) -> np.ndarray:
        key = (client_id, round_index)
        if key not in self._cache:
            e = self._index[key]
            ckpt = read_checkpoint(self.root / e.path, e.checksum)
            if (ckpt.client_id, ckpt.round) != key:
                raise CheckpointError(f"{e.path}: header says client {ckpt.client_id} round {ckpt.round}")
            self._cache[key] = ckpt.theta
        return self._cache[key]

    def verify(self) -> None:
        for e in self.entries:
            read_checkpoint(self.root / e.path, e.checksum)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "model_spec": self.spec.to_dict(),
            "num_clients": self.num_clients,
            "rounds": self.rounds,
            "entries": [vars(e) for e in self.entries],
        }

    def save(self, root=None) -> Path:
        root = Path(root) if root is not None else self.root
        path = root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "TrajectoryManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        return cls(
            run_id=d["run_id"],
            spec=ModelSpec.from_dict(d["model_spec"]),
            num_clients=int(d["num_clients"]),
            rounds=int(d["rounds"]),
            entries=[ManifestEntry(**e) for e in d["entries"]],
            root=path.parent,
        )


def write_trajectories(root, trajectories: list, spec: ModelSpec, run_id: str = "run") -> TrajectoryManifest:
    """Persist ``trajectories[client][round-1]`` and commit them with a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rounds = len(trajectories[0]) if trajectories else 0
    entries = []
    for client_id, traj in enumerate(trajectories):
        if len(traj) != rounds:
            raise ValueError(f"client {client_id} has {len(traj)} checkpoints, expected {rounds}")
        for r, state in enumerate(traj, start=1):
            name = f"client{client_id:03d}_round{r:04d}.tsyn"
            digest = save_checkpoint(root / name, state.theta, client_id, r)
            entries.append(ManifestEntry(client_id, r, name, digest))
    manifest = TrajectoryManifest(run_id, spec, len(trajectories), rounds, entries, root=root)
    manifest.save()
    return manifest


@dataclass(frozen=True, eq=False)
class Segment:
    theta_start: np.ndarray
    theta_target: np.ndarray
    client_id: int
    start_round: int
    target_round: int


def sample_segment(manifest: TrajectoryManifest, n_unroll: int, rng: np.random.Generator,
                   max_start_round: int | None = None) -> Segment:
    """Pick a client uniformly, then a start round uniformly in [1, T - n_unroll].

    ``max_start_round`` optionally caps the start round further.
    """
    T = manifest.rounds
    if n_unroll < 1:
        raise ValueError("n_unroll must be >= 1")
    if T <= n_unroll:
        raise TrajectoryTooShortError(f"trajectory too short: T={T} rounds, n_unroll={n_unroll}")
    last = T - n_unroll
    if max_start_round is not None:
        last = max(1, min(last, max_start_round))
    client = int(rng.integers(manifest.num_clients))
    t = int(rng.integers(1, last + 1))
    return Segment(
        theta_start=manifest.theta(client, t),
        theta_target=manifest.theta(client, t + n_unroll),
        client_id=client,
        start_round=t,
        target_round=t + n_unroll,
    )
