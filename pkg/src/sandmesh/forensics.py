"""Filesystem snapshots, baseline diffing, artifact extraction and reports.

Snapshots work over either a :class:`VirtualFs` (the sandbox's disk) or a
real directory tree. Records serialize to the per-file JSON layout shared
with on-device scans: three digests, the absolute path and thirteen stat
fields.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import stat as stat_mod
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

EMPTY_MD5 = hashlib.md5(b"").hexdigest()
EMPTY_SHA1 = hashlib.sha1(b"").hexdigest()
EMPTY_SHA256 = hashlib.sha256(b"").hexdigest()

APK_MAGIC = b"PK\x03\x04"
SQLITE_MAGIC = b"SQLite format 3\x00"
_PRINTABLE = frozenset(range(0x20, 0x7F)) | {0x09, 0x0A, 0x0D}

# atime moves whenever a file is read, snapshots included
VOLATILE_STAT = frozenset({"atime"})
# fields that differ between two copies of the same tree on a host disk
HOST_COPY_STAT = VOLATILE_STAT | {"dev", "ino", "nlink", "ctime", "blksize", "blocks"}


class IntegrityError(Exception):
    """Artifact content no longer matches the snapshot it was diffed from."""


@dataclass(frozen=True, slots=True)
class StatBlock:
    dev: int = 0
    ino: int = 0
    mode: int = 0o100644
    nlink: int = 1
    uid: int = 0
    gid: int = 0
    rdev: int = 0
    size: int = 0
    blksize: int = 4096
    blocks: int = 0
    atime: int = 0
    mtime: int = 0
    ctime: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"stat field {f.name} must be non-negative")

    @classmethod
    def from_os(cls, st: os.stat_result) -> "StatBlock":
        return cls(
            dev=st.st_dev, ino=st.st_ino, mode=st.st_mode, nlink=st.st_nlink,
            uid=st.st_uid, gid=st.st_gid, rdev=st.st_rdev, size=st.st_size,
            blksize=getattr(st, "st_blksize", 4096), blocks=getattr(st, "st_blocks", 0),
            atime=int(st.st_atime), mtime=int(st.st_mtime), ctime=int(st.st_ctime),
        )

    def stable_key(self, ignore: frozenset[str] = VOLATILE_STAT) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name not in ignore)


def digests(content: bytes) -> tuple[str, str, str]:
    return (
        hashlib.md5(content).hexdigest(),
        hashlib.sha1(content).hexdigest(),
        hashlib.sha256(content).hexdigest(),
    )


@dataclass(frozen=True, slots=True)
class FileRecord:
    path: str
    md5: str
    sha1: str
    sha256: str
    stat: StatBlock
    error: bool = False

    def __post_init__(self) -> None:
        if not self.path.startswith("/"):
            raise ValueError(f"record path must be absolute: {self.path!r}")
        if (len(self.md5), len(self.sha1), len(self.sha256)) != (32, 40, 64):
            raise ValueError(f"bad digest lengths for {self.path}")

    def same_metadata(self, other: "FileRecord", ignore: frozenset[str] = VOLATILE_STAT) -> bool:
        return self.stat.stable_key(ignore) == other.stat.stable_key(ignore)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "path": self.path,
            "md5": self.md5,
            "sha1": self.sha1,
            "sha256": self.sha256,
            "stat": asdict(self.stat),
        }
        if self.error:
            doc["error"] = True
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "FileRecord":
        return cls(
            path=doc["path"], md5=doc["md5"], sha1=doc["sha1"], sha256=doc["sha256"],
            stat=StatBlock(**doc["stat"]), error=bool(doc.get("error", False)),
        )


# -- virtual filesystem -------------------------------------------------------


class VFile:
    """Immutable file content plus stat block; digests are computed once."""

    __slots__ = ("content", "stat", "_record")

    def __init__(self, content: bytes, stat: StatBlock) -> None:
        self.content = content
        self.stat = stat
        self._record: FileRecord | None = None

    def record(self, path: str) -> FileRecord:
        rec = self._record
        if rec is None or rec.path != path:
            md5, sha1, sha256 = digests(self.content)
            rec = FileRecord(path, md5, sha1, sha256, self.stat)
            self._record = rec
        return rec


def blocks_for(size: int, blksize: int = 4096) -> int:
    """512-byte units allocated for `size` bytes in `blksize` blocks."""
    return math.ceil(size / blksize) * (blksize // 512)


class VirtualFs:
    """Path-to-file map standing in for an analysis VM's disk.

    Copies are shallow: unchanged files share :class:`VFile` objects with the
    image they came from, which keeps snapshots of many sandboxes cheap.
    """

    def __init__(self, files: Mapping[str, VFile] | None = None, *, epoch: int = 0,
                 next_ino: int = 100000, dev: int = 0xFD00) -> None:
        self.files: dict[str, VFile] = dict(files or {})
        self.epoch = epoch
        self.next_ino = next_ino
        self.dev = dev

    def copy(self) -> "VirtualFs":
        return VirtualFs(self.files, epoch=self.epoch, next_ino=self.next_ino, dev=self.dev)

    def __contains__(self, path: str) -> bool:
        return path in self.files

    def __len__(self) -> int:
        return len(self.files)

    def read(self, path: str) -> bytes:
        return self.files[path].content

    def write(self, path: str, content: bytes, *, t: float = 0.0, uid: int = 10050,
              gid: int | None = None, mode: int = 0o100644) -> VFile:
        """Create or overwrite `path`; overwrites keep inode and ownership."""
        if not path.startswith("/"):
            raise ValueError(f"path must be absolute: {path!r}")
        ts = self.epoch + int(t)
        old = self.files.get(path)
        if old is None:
            ino = self.next_ino
            self.next_ino += 1
            st = StatBlock(dev=self.dev, ino=ino, mode=mode, nlink=1, uid=uid,
                           gid=uid if gid is None else gid, size=len(content),
                           blocks=blocks_for(len(content)), atime=ts, mtime=ts, ctime=ts)
        else:
            st = StatBlock(**{**asdict(old.stat), "size": len(content),
                              "blocks": blocks_for(len(content), old.stat.blksize),
                              "atime": ts, "mtime": ts, "ctime": ts})
        vf = VFile(content, st)
        self.files[path] = vf
        return vf

    def delete(self, path: str) -> bool:
        return self.files.pop(path, None) is not None

    def iter_files(self) -> Iterator[tuple[str, VFile]]:
        for path in sorted(self.files):
            yield path, self.files[path]

    def materialize(self, root: str | os.PathLike) -> Path:
        """Write the image under `root`, keeping permission bits and times.

        Ownership is left to the host; only content, mode, atime and mtime
        carry over.
        """
        out = Path(root)
        for path, vf in self.iter_files():
            dest = out / path.lstrip("/")
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(vf.content)
            os.chmod(dest, stat_mod.S_IMODE(vf.stat.mode))
            os.utime(dest, (vf.stat.atime, vf.stat.mtime))
        return out


# -- snapshots ----------------------------------------------------------------


@dataclass(frozen=True)
class FsSnapshot:
    records: Mapping[str, FileRecord]
    timestamp: int = 0

    def __post_init__(self) -> None:
        if list(self.records) != sorted(self.records):
            object.__setattr__(self, "records", dict(sorted(self.records.items())))

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, path: str) -> bool:
        return path in self.records

    def paths(self) -> list[str]:
        return list(self.records)


def snapshot(fs: VirtualFs | str | os.PathLike, *, timestamp: int = 0) -> FsSnapshot:
    """Record every regular file under `fs`.

    Real trees are walked with ``lstat``; directories are implied by the paths
    of their files and not recorded. Symlinks and special files get a record
    with empty-content digests, as do files that cannot be read (those are
    flagged with ``error``).
    """
    if isinstance(fs, VirtualFs):
        return FsSnapshot({p: vf.record(p) for p, vf in fs.iter_files()}, timestamp)
    root = Path(fs)
    if not root.is_dir():
        raise FileNotFoundError(f"snapshot root is not a readable directory: {root}")
    records: dict[str, FileRecord] = {}
    for rel, full in _walk(root):
        st = os.lstat(full)
        sb = StatBlock.from_os(st)
        if stat_mod.S_ISREG(st.st_mode):
            try:
                content = full.read_bytes()
            except OSError:
                records[rel] = FileRecord(rel, EMPTY_MD5, EMPTY_SHA1, EMPTY_SHA256, sb, error=True)
                continue
            records[rel] = FileRecord(rel, *digests(content), sb)
        else:
            records[rel] = FileRecord(rel, EMPTY_MD5, EMPTY_SHA1, EMPTY_SHA256, sb)
    return FsSnapshot(records, timestamp)


def _walk(root: Path) -> Iterator[tuple[str, Path]]:
    for dirpath, dirnames, filenames in os.walk(root, followlinks=False):
        dirnames.sort()
        base = Path(dirpath)
        for d in list(dirnames):
            if (base / d).is_symlink():
                dirnames.remove(d)
                filenames.append(d)
        for name in sorted(filenames):
            full = base / name
            yield "/" + full.relative_to(root).as_posix(), full


# -- diffing ------------------------------------------------------------------


@dataclass(frozen=True)
class FsDiff:
    created: tuple[FileRecord, ...] = ()
    deleted: tuple[FileRecord, ...] = ()
    modified: tuple[tuple[FileRecord, FileRecord], ...] = ()
    metadata_changed: tuple[tuple[FileRecord, FileRecord], ...] = ()

    def is_empty(self) -> bool:
        return not (self.created or self.deleted or self.modified or self.metadata_changed)

    def created_paths(self) -> list[str]:
        return [r.path for r in self.created]

    def deleted_paths(self) -> list[str]:
        return [r.path for r in self.deleted]

    def modified_paths(self) -> list[str]:
        return [b.path for b, _ in self.modified]

    def metadata_paths(self) -> list[str]:
        return [b.path for b, _ in self.metadata_changed]


EMPTY_DIFF = FsDiff()


def diff(base: FsSnapshot, post: FsSnapshot, *, ignore_stat: frozenset[str] = VOLATILE_STAT) -> FsDiff:
    """Categorize changes from `base` to `post`.

    Content changes (sha256) are "modified"; equal content with a different
    stat block is "metadata_changed". Stat fields named in `ignore_stat`
    (atime by default) are not compared.
    """
    b, p = base.records, post.records
    created = [p[k] for k in p if k not in b]
    deleted = [b[k] for k in b if k not in p]
    modified = []
    meta = []
    for k, before in b.items():
        after = p.get(k)
        if after is None or after is before:
            continue
        if after.sha256 != before.sha256:
            modified.append((before, after))
        elif not before.same_metadata(after, ignore_stat):
            meta.append((before, after))
    return FsDiff(tuple(created), tuple(deleted), tuple(modified), tuple(meta))


# -- artifacts ----------------------------------------------------------------


def _read_post(post_fs: VirtualFs | str | os.PathLike, path: str) -> bytes:
    if isinstance(post_fs, VirtualFs):
        return post_fs.read(path)
    return (Path(post_fs) / path.lstrip("/")).read_bytes()


def extract_artifacts(d: FsDiff, post_fs: VirtualFs | str | os.PathLike) -> dict[str, bytes]:
    """Copy the content of every created and modified file out of `post_fs`."""
    wanted = [r for r in d.created] + [after for _, after in d.modified]
    store: dict[str, bytes] = {}
    for rec in wanted:
        if rec.error:
            continue
        try:
            content = _read_post(post_fs, rec.path)
        except (KeyError, OSError) as exc:
            raise IntegrityError(f"{rec.path} vanished after the snapshot") from exc
        if hashlib.sha256(content).hexdigest() != rec.sha256:
            raise IntegrityError(f"{rec.path} changed after the snapshot")
        store[rec.path] = content
    return dict(sorted(store.items()))


def apply_diff(base: Mapping[str, bytes], d: FsDiff, store: Mapping[str, bytes]) -> dict[str, bytes]:
    """Rebuild post-run contents from base contents, a diff and its artifacts."""
    out = dict(base)
    for rec in d.deleted:
        out.pop(rec.path, None)
    for rec in d.created:
        out[rec.path] = store[rec.path]
    for _, after in d.modified:
        out[after.path] = store[after.path]
    return out


# -- classification -----------------------------------------------------------


def classify(content: bytes) -> str:
    if content.startswith(APK_MAGIC):
        return "zip/apk"
    if content.startswith(SQLITE_MAGIC):
        return "sqlite"
    if content and sum(1 for c in content if c in _PRINTABLE) * 2 > len(content):
        return "text"
    return "binary"


# -- reports ------------------------------------------------------------------


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _tag(rec: FileRecord, contents: Mapping[str, bytes] | None) -> str:
    if contents is None or rec.path not in contents:
        return "binary" if rec.sha256 == EMPTY_SHA256 else "unknown"
    return classify(contents[rec.path])


def emit_report(
    d: FsDiff,
    net_log: Iterable[Any] = (),
    root_flag: bool = False,
    interaction_record: Any = None,
    *,
    job_id: str = "",
    contents: Mapping[str, bytes] | None = None,
) -> dict[str, Any]:
    """Build the per-job report document.

    `contents` maps paths to post-run bytes (normally the artifact store) and
    drives the ``type_tag`` of created and modified files.
    """
    net = list(net_log)
    requests = [e for e in net if e.direction == "request"]
    responses = [e for e in net if e.direction == "response"]
    steps = 0
    crash = False
    if interaction_record is not None:
        steps = interaction_record.interaction_count()
        crash = interaction_record.crashed()

    def pair(before: FileRecord, after: FileRecord) -> dict[str, Any]:
        return {"base": before.to_json(), "post": after.to_json(), "type_tag": _tag(after, contents)}

    return {
        "job_id": job_id,
        "root_flag": bool(root_flag),
        "created": [{**r.to_json(), "type_tag": _tag(r, contents)} for r in d.created],
        "modified": [pair(b, a) for b, a in d.modified],
        "metadata_changed": [pair(b, a) for b, a in d.metadata_changed],
        "deleted": [r.to_json() for r in d.deleted],
        "net_summary": {
            "requests": len(requests),
            "responses": len(responses),
            "hosts": sorted({e.host for e in requests}),
        },
        "interaction_steps": steps,
        "crash": crash,
    }


def diff_from_report(doc: Mapping[str, Any]) -> FsDiff:
    """Parse the file categories of a report back into an :class:`FsDiff`."""
    def rec(x: Mapping[str, Any]) -> FileRecord:
        return FileRecord.from_json({k: v for k, v in x.items() if k != "type_tag"})

    return FsDiff(
        created=tuple(rec(x) for x in doc["created"]),
        deleted=tuple(rec(x) for x in doc["deleted"]),
        modified=tuple((rec(x["base"]), rec(x["post"])) for x in doc["modified"]),
        metadata_changed=tuple((rec(x["base"]), rec(x["post"])) for x in doc["metadata_changed"]),
    )


REPORT_SCHEMA: dict[str, Any] = {
    "$defs": {
        "stat": {
            "type": "object",
            "required": ["dev", "ino", "mode", "nlink", "uid", "gid", "rdev", "size",
                         "blksize", "blocks", "atime", "mtime", "ctime"],
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "record": {
            "type": "object",
            "required": ["path", "md5", "sha1", "sha256", "stat"],
            "properties": {
                "path": {"type": "string", "pattern": "^/"},
                "md5": {"type": "string", "pattern": "^[0-9a-f]{32}$"},
                "sha1": {"type": "string", "pattern": "^[0-9a-f]{40}$"},
                "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                "stat": {"$ref": "#/$defs/stat"},
                "error": {"type": "boolean"},
                "type_tag": {"type": "string"},
            },
        },
        "pair": {
            "type": "object",
            "required": ["base", "post", "type_tag"],
            "properties": {"base": {"$ref": "#/$defs/record"}, "post": {"$ref": "#/$defs/record"}},
        },
    },
    "type": "object",
    "required": ["job_id", "root_flag", "created", "modified", "metadata_changed",
                 "deleted", "net_summary", "interaction_steps", "crash"],
    "properties": {
        "job_id": {"type": "string"},
        "root_flag": {"type": "boolean"},
        "created": {"type": "array", "items": {"$ref": "#/$defs/record", "required": ["type_tag"]}},
        "modified": {"type": "array", "items": {"$ref": "#/$defs/pair"}},
        "metadata_changed": {"type": "array", "items": {"$ref": "#/$defs/pair"}},
        "deleted": {"type": "array", "items": {"$ref": "#/$defs/record"}},
        "net_summary": {
            "type": "object",
            "required": ["requests", "responses", "hosts"],
            "properties": {
                "requests": {"type": "integer", "minimum": 0},
                "responses": {"type": "integer", "minimum": 0},
                "hosts": {"type": "array", "items": {"type": "string"}},
            },
        },
        "interaction_steps": {"type": "integer", "minimum": 0},
        "crash": {"type": "boolean"},
    },
}
