"""
Run manifests: one JSON document per CLI run, enough to replay it.
"""
import contextlib
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

from .errors import InputError

TOOL_VERSION = "1.0.0"


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    fingerprint: str | None = None
    timings: dict = field(default_factory=dict)
    started: str = ""
    version: str = TOOL_VERSION

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class ManifestManager:
    def __init__(self, run_dir="runs"):
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)

    def write(self, manifest):
        stamp = manifest.started.replace(":", "").replace("-", "").split(".")[0] or "run"
        base = os.path.join(self.run_dir, f"{stamp}-{manifest.subcommand}")
        path, n = base + ".json", 1
        while os.path.exists(path):
            n += 1
            path = f"{base}-{n}.json"
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(manifest.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")
        return path

    def load(self, path):
        try:
            with open(path, encoding="utf-8") as handle:
                data = json.load(handle)
        except OSError as e:
            raise InputError(f"{path}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise InputError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
        if not isinstance(data, dict) or "subcommand" not in data or "argv" not in data:
            raise InputError(f"{path}: not a run manifest")
        return RunManifest.from_dict(data)

    def latest(self, subcommand=None):
        paths = [os.path.join(self.run_dir, f) for f in os.listdir(self.run_dir) if f.endswith(".json")]
        if subcommand:
            paths = [p for p in paths if f"-{subcommand}" in os.path.basename(p)]
        if not paths:
            raise InputError(f"no run manifests in {self.run_dir}")
        # several runs can share a timestamp second
        return max(paths, key=lambda p: (os.stat(p).st_mtime_ns, p))


class RunRecorder:
    """Collects what a subcommand read, wrote and how long each stage took."""

    def __init__(self, subcommand, argv, run_dir):
        self.manifest = RunManifest(
            subcommand, list(argv), started=datetime.now(timezone.utc).isoformat(timespec="seconds"))
        self.run_dir = run_dir
        self._t0 = time.perf_counter()
        self._unhashed = set()

    @contextlib.contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.manifest.timings[name] = round(time.perf_counter() - start, 6)

    def input(self, role, path):
        self.manifest.inputs[role] = str(path)

    def output(self, role, path, hashed=True):
        self.manifest.outputs[role] = {"path": str(path)}
        if not hashed:
            self._unhashed.add(role)

    def finish(self):
        for role, entry in self.manifest.outputs.items():
            entry["sha256"] = None if role in self._unhashed else file_sha256(entry["path"])
        self.manifest.timings["total"] = round(time.perf_counter() - self._t0, 6)
        return ManifestManager(self.run_dir).write(self.manifest)
