"""Experiment configuration: one JSON document describing a whole run.

Example::

    {
      "seed": 7,
      "ip_fail_prob": 0.03,
      "cluster":  {"n_nodes": 188, "vms_per_node": 3},
      "workload": {"n_jobs": 1261, "stimulate_s": 300, "app_refs": ["benign"]},
      "comm":     {"per_job_comm_s": 0.24},
      "schedule": {"load_threshold": 4.0, "retry_timeout_s": 5},
      "explore":  {"inputs": ["hello world"], "policy": "first"},
      "fixtures": {"baseline": "builtin:baseline_image",
                   "models": {"mine": "apps/mine.json"}},
      "output_dir": "runs/genome"
    }

Every section is optional except ``seed``. Unknown keys are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from sandmesh.fixtures import FixtureSet
from sandmesh.perfmodel import ClusterSpec, CommSpec, WorkloadSpec
from sandmesh.sandbox import ConfigError
from sandmesh.scheduler import ScheduleConfig
from sandmesh.uiexplore import ExploreConfig

SEED_ENV = "ANDLANTIS_SEED"

_TOP_KEYS = {"seed", "ip_fail_prob", "cluster", "workload", "comm", "schedule",
             "explore", "fixtures", "output_dir"}
_SCHEDULE_KEYS = {f.name for f in fields(ScheduleConfig)} - {"fixed_wait_s", "wait_jitter_s"}
_WAIT_KEYS = ("boot_wait_s", "ip_wait_s", "forensics_wait_s")


class ConfigFieldError(ConfigError):
    """Invalid value or key; `field` is the dotted config path."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"config field '{field}': {message}")
        self.field = field


@dataclass(frozen=True)
class ExperimentConfig:
    cluster: ClusterSpec
    workload: WorkloadSpec
    comm: CommSpec
    schedule: ScheduleConfig
    ip_fail_prob: float
    seed: int | str
    fixtures: FixtureSet
    explore: ExploreConfig
    output_dir: Path | None = None
    source: Mapping[str, Any] | None = None

    @classmethod
    def load(cls, path: str | Path, env: Mapping[str, str] | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, path.parent, env)

    @classmethod
    def from_dict(cls, doc: Any, base_dir: Path | None = None,
                  env: Mapping[str, str] | None = None) -> "ExperimentConfig":
        env = os.environ if env is None else env
        if not isinstance(doc, Mapping):
            raise ConfigFieldError("<root>", "expected a JSON object")
        _reject_unknown("", doc, _TOP_KEYS)

        seed = _seed(doc, env)
        ip_fail_prob = _number(doc, "ip_fail_prob", 0.03)
        if not 0.0 <= ip_fail_prob <= 1.0:
            raise ConfigFieldError("ip_fail_prob", "must lie in [0, 1]")

        c = _section(doc, "cluster", {"n_nodes", "vms_per_node", "node_failure_ids"})
        cluster = _build("cluster", ClusterSpec, {
            "n_nodes": _integer(c, "cluster.n_nodes", 188),
            "vms_per_node": _integer(c, "cluster.vms_per_node", 3),
            "node_failure_ids": frozenset(_strings(c, "cluster.node_failure_ids", ())),
        })

        w = _section(doc, "workload", {f.name for f in fields(WorkloadSpec)})
        workload = _build("workload", WorkloadSpec, {
            "n_jobs": _integer(w, "workload.n_jobs", 1261),
            "stimulate_s": _number(w, "workload.stimulate_s", 300.0),
            "fixed_wait_s": _number(w, "workload.fixed_wait_s", 220.0),
            "wait_jitter_s": _number(w, "workload.wait_jitter_s", 0.0),
            "app_refs": tuple(_strings(w, "workload.app_refs", ("benign",))),
            "retry_limit": _integer(w, "workload.retry_limit", 0),
        })

        m = _section(doc, "comm", {"per_job_comm_s"})
        comm = _build("comm", CommSpec, {"per_job_comm_s": _number(m, "comm.per_job_comm_s", 0.24)})

        s = _section(doc, "schedule", _SCHEDULE_KEYS)
        schedule = _schedule(s, cluster, workload)

        e = _section(doc, "explore", {"inputs", "policy"})
        explore = _build("explore", ExploreConfig, {
            "inputs": tuple(_strings(e, "explore.inputs", ExploreConfig.inputs)),
            "policy": _string(e, "explore.policy", "first"),
        })

        fx = _section(doc, "fixtures", {"baseline", "models"})
        try:
            fixtures = FixtureSet.from_config(fx, base_dir)
        except ConfigError as exc:
            raise ConfigFieldError("fixtures", str(exc)) from exc
        for i, ref in enumerate(workload.app_refs):
            if ref not in fixtures.apps:
                raise ConfigFieldError(f"workload.app_refs[{i}]", f"unknown app {ref!r}")

        out = doc.get("output_dir")
        if out is not None and not isinstance(out, str):
            raise ConfigFieldError("output_dir", "expected a string path")
        output_dir = None
        if out is not None:
            output_dir = Path(out) if Path(out).is_absolute() or base_dir is None else base_dir / out

        return cls(cluster, workload, comm, schedule, ip_fail_prob, seed, fixtures, explore,
                   output_dir, doc)


def _schedule(s: Mapping[str, Any], cluster: ClusterSpec, workload: WorkloadSpec) -> ScheduleConfig:
    kw: dict[str, Any] = {
        "max_vms_per_node": _integer(s, "schedule.max_vms_per_node", cluster.vms_per_node),
        "wait_jitter_s": workload.wait_jitter_s,
    }
    for key in ("load_threshold", "retry_timeout_s", "broadcast_timeout_s", "deadline_s", "ui_interval_s"):
        if key in s:
            kw[key] = _number(s, f"schedule.{key}", 0.0)
    if "ui_budget" in s:
        kw["ui_budget"] = _integer(s, "schedule.ui_budget", 0)
    given = [k for k in _WAIT_KEYS if k in s]
    if given and len(given) != len(_WAIT_KEYS):
        missing = next(k for k in _WAIT_KEYS if k not in s)
        raise ConfigFieldError(f"schedule.{missing}", "give all three phase waits or none")
    if given:
        for key in _WAIT_KEYS:
            kw[key] = _number(s, f"schedule.{key}", 0.0)
        return _build("schedule", ScheduleConfig, {"fixed_wait_s": workload.fixed_wait_s, **kw})
    try:
        return ScheduleConfig.with_fixed_wait(workload.fixed_wait_s, **kw)
    except ValueError as exc:
        raise ConfigFieldError("schedule", str(exc)) from exc


# -- field readers ----------------------------------------------------------------


def _reject_unknown(prefix: str, doc: Mapping[str, Any], allowed: set[str]) -> None:
    for key in sorted(doc):
        if key not in allowed:
            raise ConfigFieldError(prefix + key, "unknown key")


def _section(doc: Mapping[str, Any], name: str, allowed: set[str]) -> Mapping[str, Any]:
    sec = doc.get(name, {})
    if sec is None:
        return {}
    if not isinstance(sec, Mapping):
        raise ConfigFieldError(name, "expected an object")
    _reject_unknown(name + ".", sec, allowed)
    return sec


def _leaf(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def _number(doc: Mapping[str, Any], name: str, default: float) -> float:
    v = doc.get(_leaf(name), default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigFieldError(name, f"expected a number, got {v!r}")
    return float(v)


def _integer(doc: Mapping[str, Any], name: str, default: int) -> int:
    v = doc.get(_leaf(name), default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigFieldError(name, f"expected an integer, got {v!r}")
    return v


def _string(doc: Mapping[str, Any], name: str, default: str) -> str:
    v = doc.get(_leaf(name), default)
    if not isinstance(v, str):
        raise ConfigFieldError(name, f"expected a string, got {v!r}")
    return v


def _strings(doc: Mapping[str, Any], name: str, default: tuple[str, ...]) -> list[str]:
    v = doc.get(_leaf(name), list(default))
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise ConfigFieldError(name, "expected a list of strings")
    return v


def _seed(doc: Mapping[str, Any], env: Mapping[str, str]) -> int | str:
    raw = env.get(SEED_ENV)
    if raw is not None and raw.strip():
        raw = raw.strip()
        return int(raw) if raw.lstrip("-").isdigit() else raw
    if "seed" not in doc:
        raise ConfigFieldError("seed", f"required (or set {SEED_ENV})")
    seed = doc["seed"]
    if isinstance(seed, bool) or not isinstance(seed, (int, str)):
        raise ConfigFieldError("seed", "expected an integer or string")
    return seed


def _build(section: str, cls: type, kw: dict[str, Any]) -> Any:
    try:
        return cls(**kw)
    except ValueError as exc:
        # the dataclass messages start with the offending field name
        msg = str(exc)
        head = msg.split(" ", 1)[0]
        field = f"{section}.{head}" if head in kw else section
        raise ConfigFieldError(field, msg) from exc
