"""Payload staging from the central store to per-node local scratch.

Two stagers share one interface:

* ``SimulatedStager`` charges virtual time using a two-bottleneck model: the
  central store's aggregate bandwidth is split evenly across concurrent
  pullers, and each pull is further capped by its node link.
* ``FileStager`` performs real copies into
  ``<scratch_root>/<node_id>/<manifest_hash>/<relative paths>``.

Both cache by whole-manifest hash, so a second stage of the same payload to
the same node is a cache hit that moves zero bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from filelock import FileLock

from .core import Clock, NodeSpec, StoreSpec, SwarmlaunchError

_CHUNK = 1 << 20


class StagingError(SwarmlaunchError):
    pass


class UnreadablePayload(StagingError):
    pass


class EmptyPayload(StagingError):
    pass


class ScratchFull(StagingError):
    def __init__(self, node_id: str, needed: int, available: int):
        self.node_id = node_id
        super().__init__(f"node {node_id}: payload needs {needed} bytes, {available} available in scratch")


class TransferFailed(StagingError):
    def __init__(self, node_id: str, reason: str):
        self.node_id = node_id
        super().__init__(f"node {node_id}: transfer failed: {reason}")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    size_bytes: int
    digest: str


@dataclass(frozen=True)
class PayloadManifest:
    entries: tuple[ManifestEntry, ...]
    # where the central copy lives; not part of the content hash
    root: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        if paths != sorted(paths):
            object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e.path)))

    @property
    def total_bytes(self) -> int:
        return sum(e.size_bytes for e in self.entries)

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.path}\t{e.size_bytes}\t{e.digest}\n".encode())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "total_bytes": self.total_bytes,
            "root": self.root,
            "entries": [{"path": e.path, "size_bytes": e.size_bytes, "digest": e.digest} for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> PayloadManifest:
        entries = tuple(ManifestEntry(e["path"], int(e["size_bytes"]), e["digest"]) for e in data["entries"])
        m = cls(entries, root=data.get("root"))
        if "digest" in data and data["digest"] != m.digest:
            raise ValueError("manifest digest does not match its entries")
        return m


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(_CHUNK):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(payload_root: str | os.PathLike) -> PayloadManifest:
    """Hash every regular file under ``payload_root`` into a manifest."""
    root = Path(payload_root)
    if not root.is_dir():
        raise UnreadablePayload(f"payload root is not a readable directory: {root}")
    entries = []
    try:
        for p in sorted(root.rglob("*")):
            if p.is_file():
                rel = p.relative_to(root).as_posix()
                entries.append(ManifestEntry(rel, p.stat().st_size, _file_digest(p)))
    except OSError as e:
        raise UnreadablePayload(str(e)) from None
    if not entries:
        raise EmptyPayload(f"payload root has no files: {root}")
    return PayloadManifest(tuple(entries), root=str(root.resolve()))


def synthetic_manifest(total_bytes: int = 5_000_000, name: str = "APP.EXE") -> PayloadManifest:
    """A single-file manifest with no backing files, for the simulated backend."""
    digest = hashlib.sha256(f"synthetic:{name}:{total_bytes}".encode()).hexdigest()
    return PayloadManifest((ManifestEntry(name, total_bytes, digest),))


@dataclass(frozen=True)
class StageResult:
    node_id: str
    started: float
    finished: float
    bytes_moved: int
    cache_hit: bool
    location: str | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def aggregate_copy_time(results: Sequence[StageResult]) -> float:
    if not results:
        return 0.0
    return max(r.finished for r in results) - min(r.started for r in results)


def simulated_copy_time(total_bytes: int, node: NodeSpec, store: StoreSpec, pullers: int) -> float:
    """Closed-form pull duration: link latency plus bytes over the tighter of the two bottlenecks."""
    share = store.aggregate_bandwidth / max(1, pullers)
    return node.link_latency + total_bytes / min(node.link_bandwidth, share)


class Stager(Protocol):
    def stage_to_node(self, manifest: PayloadManifest, node: NodeSpec, clock: Clock) -> StageResult: ...

    def stage_all(
        self, manifest: PayloadManifest, nodes: Sequence[NodeSpec], clock: Clock
    ) -> tuple[list[StageResult], float]: ...


class SimulatedStager:
    """Virtual-time staging. Never advances the clock; results carry future ``finished`` times."""

    def __init__(self, store: StoreSpec, fail_nodes: Sequence[str] = ()):
        self.store = store
        self.fail_nodes = set(fail_nodes)
        self._cached: dict[str, dict[str, int]] = {}

    def is_cached(self, manifest: PayloadManifest, node_id: str) -> bool:
        return manifest.digest in self._cached.get(node_id, {})

    def _check(self, manifest: PayloadManifest, node: NodeSpec) -> None:
        used = sum(self._cached.get(node.node_id, {}).values())
        available = node.local_scratch_bytes - used
        if manifest.total_bytes > available:
            raise ScratchFull(node.node_id, manifest.total_bytes, available)
        if node.node_id in self.fail_nodes:
            raise TransferFailed(node.node_id, "injected failure")

    def _pull(self, manifest: PayloadManifest, node: NodeSpec, start: float, pullers: int) -> StageResult:
        location = f"sim://{node.node_id}/{manifest.digest}"
        if self.is_cached(manifest, node.node_id):
            return StageResult(node.node_id, start, start + node.link_latency, 0, True, location)
        self._check(manifest, node)
        duration = simulated_copy_time(manifest.total_bytes, node, self.store, pullers)
        self._cached.setdefault(node.node_id, {})[manifest.digest] = manifest.total_bytes
        return StageResult(node.node_id, start, start + duration, manifest.total_bytes, False, location)

    def stage_to_node(self, manifest: PayloadManifest, node: NodeSpec, clock: Clock) -> StageResult:
        return self._pull(manifest, node, clock.now(), 1)

    def stage_all(self, manifest, nodes, clock):
        if not nodes:
            raise ValueError("stage_all needs at least one node")
        start = clock.now()
        pullers = sum(1 for n in nodes if not self.is_cached(manifest, n.node_id))
        results = []
        for n in nodes:
            try:
                results.append(self._pull(manifest, n, start, pullers))
            except StagingError as e:
                results.append(StageResult(n.node_id, start, start, 0, False, error=str(e)))
        return results, aggregate_copy_time(results)


class FileStager:
    """Real copies into per-node scratch directories.

    Each node's pull runs on its own worker thread in ``stage_all``. A lock
    file per (node, manifest) keeps concurrent pulls of the same payload to the
    same node from duplicating work.
    """

    def __init__(self, scratch_root: str | os.PathLike):
        self.scratch_root = Path(scratch_root)
        self._used: dict[str, int] = {}
        self._mutex = threading.Lock()

    def node_root(self, node_id: str) -> Path:
        return self.scratch_root / node_id

    def location(self, manifest: PayloadManifest, node_id: str) -> Path:
        return self.node_root(node_id) / manifest.digest

    def stage_to_node(self, manifest: PayloadManifest, node: NodeSpec, clock: Clock) -> StageResult:
        if manifest.root is None:
            raise TransferFailed(node.node_id, "manifest has no central copy to pull from")
        started = clock.now()
        dest = self.location(manifest, node.node_id)
        if dest.is_dir():
            return StageResult(node.node_id, started, clock.now(), 0, True, str(dest))
        with self._mutex:
            available = node.local_scratch_bytes - self._used.get(node.node_id, 0)
        if manifest.total_bytes > available:
            raise ScratchFull(node.node_id, manifest.total_bytes, available)

        node_root = self.node_root(node.node_id)
        node_root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(node_root / f"{manifest.digest}.lock")):
            if dest.is_dir():
                return StageResult(node.node_id, started, clock.now(), 0, True, str(dest))
            partial = node_root / f"{manifest.digest}.partial-{os.getpid()}-{threading.get_ident()}"
            try:
                src_root = Path(manifest.root)
                for e in manifest.entries:
                    target = partial / e.path
                    target.parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(src_root / e.path, target)
                    if target.stat().st_size != e.size_bytes:
                        raise OSError(f"{e.path}: size changed during copy")
                os.rename(partial, dest)
            except OSError as e:
                shutil.rmtree(partial, ignore_errors=True)
                raise TransferFailed(node.node_id, str(e)) from None
        with self._mutex:
            self._used[node.node_id] = self._used.get(node.node_id, 0) + manifest.total_bytes
        return StageResult(node.node_id, started, clock.now(), manifest.total_bytes, False, str(dest))

    def _safe_stage(self, manifest, node, clock) -> StageResult:
        started = clock.now()
        try:
            return self.stage_to_node(manifest, node, clock)
        except StagingError as e:
            return StageResult(node.node_id, started, clock.now(), 0, False, error=str(e))

    def stage_all(self, manifest, nodes, clock):
        if not nodes:
            raise ValueError("stage_all needs at least one node")
        with ThreadPoolExecutor(max_workers=len(nodes)) as pool:
            results = list(pool.map(lambda n: self._safe_stage(manifest, n, clock), nodes))
        return results, aggregate_copy_time(results)

    def clear(self) -> None:
        shutil.rmtree(self.scratch_root, ignore_errors=True)
        self._used.clear()
