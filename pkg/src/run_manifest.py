"""
Run Manifest Module

Every command writes one ``manifest.json`` into its output directory,
recording what was run, with which resolved configuration and seed, and
which files it produced.
"""

import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """
    Record of one command invocation.

    Attributes:
        command (str): CLI command name
        config_path (Optional[str]): Configuration file or preset, if any
        config_hash (Optional[str]): SHA-256 of the resolved configuration
        seed (Optional[int]): Run seed
        started_at (str): UTC start time
        finished_at (Optional[str]): UTC end time
        exit_code (Optional[int]): Process exit code
        argv (List[str]): Command line
        artifacts (Dict[str, str]): Named output paths
        details (Dict[str, Any]): Command-specific values (ablation set, counts, ...)
        output_dir (Optional[str]): Directory the manifest is written to
    """

    command: str
    config_path: Optional[str] = None
    config_hash: Optional[str] = None
    seed: Optional[int] = None
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    exit_code: Optional[int] = None
    argv: List[str] = field(default_factory=lambda: list(sys.argv))
    artifacts: Dict[str, str] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)
    output_dir: Optional[str] = None

    def add_artifact(self, name: str, path: Path) -> None:
        self.artifacts[name] = str(path)

    def finish(self, exit_code: int) -> None:
        self.finished_at = _now()
        self.exit_code = exit_code

    def write(self, directory: Path) -> Path:
        """
        Write the manifest as ``<directory>/manifest.json``, replacing any earlier one.

        Returns:
            Path: Manifest file
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_FILE
        with open(path, "w") as file:
            json.dump(asdict(self), file, indent=2, sort_keys=True, default=str)
        logger.debug("Wrote manifest %s", path)
        return path


def read_manifest(path: Path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    with open(path, "r") as file:
        return RunManifest(**json.load(file))
