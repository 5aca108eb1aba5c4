"""Run manifests: what went into an output directory and digests of what came out."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

from utils.config import config_hash

MANIFEST_NAME = "manifest.json"
PACKAGE_NAME = "latent-demand"


def tool_version() -> str:
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return "0.1.0"


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Deliberately free of timestamps, so identical reruns give identical manifests."""
    command: str
    config_hash: str
    seeds: list[int]
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = field(default_factory=tool_version)

    @classmethod
    def start(cls, command: str, config: dict, seeds, inputs=()) -> "RunManifest":
        manifest = cls(command, config_hash(config), [int(s) for s in seeds])
        for path in inputs:
            if path is not None:
                manifest.inputs[Path(path).name] = file_digest(path)
        return manifest

    def add_artifact(self, path: str | Path) -> Path:
        path = Path(path)
        self.artifacts[path.name] = file_digest(path)
        logging.info("Wrote %s", path)
        return path

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def read_manifest(path: str | Path) -> RunManifest:
    return RunManifest(**json.loads(Path(path).read_text(encoding="utf-8")))
