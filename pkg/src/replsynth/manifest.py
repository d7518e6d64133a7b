"""Dataset manifest persisted next to an episode file."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
EPISODES_NAME = "episodes.jsonl"


@dataclass
class DatasetManifest:
    """What was generated, from which settings, for which grammar."""

    domain: str
    count: int
    seed: int
    config_digest: str
    fingerprint: str
    episodes_file: str = EPISODES_NAME
    format_version: int = 1


class ManifestStore:
    """JSON file-backed manifest store."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def load(self) -> DatasetManifest | None:
        """Load the manifest; None when it is missing or unreadable."""
        if not self.path.exists():
            return None

        try:
            with self.path.open("r", encoding="utf-8") as handle:
                data = json.load(handle)
            if not isinstance(data, dict):
                raise ValueError("Manifest is not a JSON object")
            return DatasetManifest(
                domain=str(data["domain"]),
                count=int(data["count"]),
                seed=int(data["seed"]),
                config_digest=str(data["config_digest"]),
                fingerprint=str(data["fingerprint"]),
                episodes_file=str(data.get("episodes_file", EPISODES_NAME)),
                format_version=int(data.get("format_version", 1)),
            )
        except Exception as exc:
            logger.warning(f"Failed to load manifest from {self.path}: {exc}")
            return None

    def save(self, manifest: DatasetManifest) -> None:
        """Write the manifest atomically (temp file, then replace).

        Raises:
            OSError: If the file cannot be written
        """
        tmp_path = self.path.with_suffix(f"{self.path.suffix}.tmp")
        try:
            with tmp_path.open("w", encoding="utf-8") as handle:
                json.dump(asdict(manifest), handle, indent=2, sort_keys=True)
                handle.write("\n")
            tmp_path.replace(self.path)
        except OSError:
            if tmp_path.exists():
                try:
                    tmp_path.unlink()
                except OSError:
                    pass
            raise
