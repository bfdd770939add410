"""Append-only run directories, manifests and verified checkpoints.

Every command writes into a fresh directory ``<root>/<command>-<NNN>``; an
existing directory is never reopened for writing. While a command runs, the
directory holds a ``.lock`` file (pid and start time); readers refuse
artifacts from a locked directory. ``manifest.json`` lists every artifact with
its sha256, so any artifact maps to exactly one manifest.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from hyperdas.autodiff import checkpoint
from hyperdas.autodiff.checkpoint import IntegrityError
from hyperdas.target import TargetConfig, TinyDecoder
from hyperdas.train import TrainConfig, build_model

MANIFEST = "manifest.json"
LOCK = ".lock"


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    """Package version plus a short hash of the package sources."""
    from hyperdas import __version__

    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def output_root(out: str | None) -> Path:
    return Path(out or os.environ.get("HYPERDAS_OUT") or "runs")


class RunDir:
    """A freshly allocated run directory; use as a context manager."""

    def __init__(self, root: str | Path, command: str, config_hash: str = "", seed: int | None = None,
                 argv: list[str] | None = None):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        n = 0
        while True:
            path = root / f"{command}-{n:03d}"
            try:
                path.mkdir()
                break
            except FileExistsError:
                n += 1
        self.path = path
        fd = os.open(path / LOCK, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, f"{os.getpid()} {time.time()}\n".encode())
        os.close(fd)
        self.manifest = {"command": command, "config_hash": config_hash, "seed": seed,
                         "code_version": code_version(), "argv": list(argv if argv is not None else sys.argv),
                         "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "finished": None,
                         "status": "running", "dataset_hash": "", "upstream": {}, "artifacts": {}}

    def __enter__(self) -> "RunDir":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close("ok" if exc_type is None else f"failed: {exc_type.__name__}")

    def file(self, name: str) -> Path:
        return self.path / name

    def add(self, *names: str) -> None:
        for name in names:
            self.manifest["artifacts"][name] = file_sha256(self.path / name)

    def write_json(self, name: str, obj) -> Path:
        path = self.path / name
        path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")
        self.add(name)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path / name
        path.write_text(text)
        self.add(name)
        return path

    def upstream(self, artifact: str | Path) -> None:
        man = Path(artifact).parent / MANIFEST
        self.manifest["upstream"][str(Path(artifact).resolve())] = file_sha256(man)

    def close(self, status: str = "ok") -> None:
        self.manifest["status"] = status
        self.manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        (self.path / MANIFEST).write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")
        lock = self.path / LOCK
        if lock.exists():
            lock.unlink()


def _jsonable(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def read_manifest(run: str | Path) -> dict:
    run = Path(run)
    if (run / LOCK).exists():
        raise IntegrityError(f"{run} is locked by a running command")
    try:
        return json.loads((run / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{run}: unreadable manifest ({exc})") from exc


def verify_artifact(path: str | Path) -> dict:
    """Check ``path`` against its run manifest; returns the manifest."""
    path = Path(path)
    manifest = read_manifest(path.parent)
    if manifest.get("status") != "ok":
        raise IntegrityError(f"{path.parent} did not finish cleanly ({manifest.get('status')})")
    listed = manifest["artifacts"].get(path.name)
    if listed is None:
        raise IntegrityError(f"{path.name} is not listed in {path.parent / MANIFEST}")
    if not path.exists() or file_sha256(path) != listed:
        raise IntegrityError(f"{path} does not match the hash in its manifest")
    return manifest


def _stem(path: str | Path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def save_target(run: RunDir, target: TinyDecoder, name: str = "target") -> Path:
    checkpoint.save(run.file(name), target.state_dict())
    target.cfg.save(run.file(name + ".ini"))
    run.add(name + ".bin", name + ".json", name + ".ini")
    run.manifest["target_hash"] = target.param_hash()
    return run.file(name + ".bin")


def load_target(path: str | Path) -> tuple[TinyDecoder, dict]:
    stem = _stem(path)
    for suffix in (".bin", ".json", ".ini"):
        manifest = verify_artifact(stem.with_suffix(suffix))
    try:
        cfg = TargetConfig.load(stem.with_suffix(".ini"))
    except (KeyError, ValueError, TypeError) as exc:
        raise IntegrityError(f"bad target config next to {stem}: {exc}") from exc
    model = TinyDecoder(cfg)
    try:
        model.load_state_dict(checkpoint.load(stem))
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"{stem}: {exc}") from exc
    if manifest.get("target_hash") and model.param_hash() != manifest["target_hash"]:
        raise IntegrityError(f"{stem}: parameters differ from the recorded target hash")
    model.freeze()
    return model, manifest


def save_model(run: RunDir, model, cfg: TrainConfig, target_path: str | Path, name: str = "model") -> Path:
    checkpoint.save(run.file(name), model.state_dict())
    meta = {"train_config": asdict(cfg), "attributes": list(model.attributes),
            "target": str(Path(target_path).resolve()), "target_hash": model.target.param_hash()}
    run.file(name + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    run.add(name + ".bin", name + ".json", name + ".meta.json")
    return run.file(name + ".bin")


def load_model(path: str | Path):
    """Rebuild a trained HyperDAS / baseline model and its target from disk."""
    stem = _stem(path)
    for suffix in (".bin", ".json", ".meta.json"):
        manifest = verify_artifact(stem.with_suffix(suffix))
    meta = json.loads(stem.with_suffix(".meta.json").read_text())
    target, _ = load_target(meta["target"])
    if target.param_hash() != meta["target_hash"]:
        raise IntegrityError(f"{stem}: its target changed since training")
    cfg = TrainConfig.from_dict(meta["train_config"])
    model = build_model(target, meta["attributes"], cfg)
    try:
        model.load_state_dict(checkpoint.load(stem))
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"{stem}: {exc}") from exc
    return model, cfg, manifest
