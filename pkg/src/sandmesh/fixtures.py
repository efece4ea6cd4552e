"""Loading of bundled and user-supplied app fixtures and the baseline image."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from sandmesh.forensics import VirtualFs
from sandmesh.sandbox import EMPTY_MODEL, BehaviorModel, ConfigError, load_baseline
from sandmesh.uiexplore import GraphError, UiGraph

BUILTIN_PREFIX = "builtin:"
BUILTIN_APPS = ("benign", "droidkungfu_a", "anserver_a", "smshider")


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("sandmesh.data").joinpath(name)))


def resolve(ref: str, base_dir: Path | None = None) -> Path:
    """Turn ``builtin:<file>`` or a (config-relative) path into a filesystem path."""
    if ref.startswith(BUILTIN_PREFIX):
        name = ref[len(BUILTIN_PREFIX):]
        if not name.endswith(".json"):
            name += ".json"
        path = builtin_path(name)
    else:
        path = Path(ref)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
    if not path.is_file():
        raise ConfigError(f"fixture not found: {ref}")
    return path


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse fixture {path}: {exc}") from exc


@dataclass
class AppFixture:
    model: BehaviorModel
    ui_graph: UiGraph | None = None


def load_app(ref: str, base_dir: Path | None = None) -> AppFixture:
    """Load a behavior model plus the UI graph it names (if any)."""
    path = resolve(ref, base_dir)
    doc = _read_json(path)
    model = BehaviorModel.from_json(doc)
    graph = None
    if doc.get("ui_graph"):
        gref = doc["ui_graph"]
        gpath = resolve(gref, path.parent) if not gref.startswith(BUILTIN_PREFIX) else resolve(gref)
        try:
            graph = UiGraph.from_json(_read_json(gpath))
        except GraphError as exc:
            raise ConfigError(f"{gpath}: {exc}") from exc
    return AppFixture(model, graph)


def load_baseline_image(ref: str = "builtin:baseline_image", base_dir: Path | None = None) -> VirtualFs:
    return load_baseline(_read_json(resolve(ref, base_dir)))


@dataclass
class FixtureSet:
    """app_ref -> fixture lookup plus the pristine image every pair starts from."""

    baseline: VirtualFs
    apps: dict[str, AppFixture] = field(default_factory=dict)

    def app(self, ref: str) -> AppFixture:
        try:
            return self.apps[ref]
        except KeyError:
            raise ConfigError(f"unknown app_ref {ref!r}") from None

    @classmethod
    def builtin(cls) -> "FixtureSet":
        apps = {name: load_app(BUILTIN_PREFIX + name) for name in BUILTIN_APPS}
        return cls(load_baseline_image(), apps)

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any] | None, base_dir: Path | None = None) -> "FixtureSet":
        """Build from a ``fixtures`` config block.

        ``{"baseline": ref, "models": {app_ref: ref}}``; bundled apps are
        always available under their own names.
        """
        cfg = cfg or {}
        fs = cls.builtin()
        if "baseline" in cfg:
            fs.baseline = load_baseline_image(cfg["baseline"], base_dir)
        for name, ref in (cfg.get("models") or {}).items():
            fs.apps[name] = load_app(ref, base_dir)
        fs.apps.setdefault("benign", AppFixture(EMPTY_MODEL))
        return fs
