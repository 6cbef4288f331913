"""Annotation manifests, evaluation-protocol splits and a synthetic multi-domain dataset.

Manifests are JSON Lines with exactly the fields ``path, pid, cam, scene, ts, tod``.
Three protocols are supported:

close_scene
    identities are split; scenes and cameras are shared by train and test.
open_scene
    scenes are split first, identities are then assigned wholly to one side and
    cameras seen in training are removed from the test side.
day_night
    like open_scene, but training keeps only daytime records and test only
    nighttime records.

Inside the test side one query is drawn per (pid, scene) among records that have
a same-identity record under another camera; everything else is gallery.
"""
from __future__ import annotations

import colorsys
import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numcore import Rng

log = logging.getLogger(__name__)

FIELDS = ("path", "pid", "cam", "scene", "ts", "tod")
PROTOCOLS = ("close_scene", "open_scene", "day_night")
TOD_VALUES = ("day", "night")


class ManifestError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    pid: int
    cam: int
    scene: int
    ts: int
    tod: str

    def __post_init__(self):
        if not isinstance(self.path, str) or not self.path:
            raise ManifestError("path must be a non-empty string")
        for name in ("pid", "cam", "scene"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
                raise ManifestError(f"{name} must be an integer >= 0, got {v!r}")
        if isinstance(self.ts, bool) or not isinstance(self.ts, (int, np.integer)):
            raise ManifestError(f"ts must be an integer, got {self.ts!r}")
        if self.tod not in TOD_VALUES:
            raise ManifestError(f"tod must be 'day' or 'night', got {self.tod!r}")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) if k in ("path", "tod") else int(getattr(self, k)) for k in FIELDS})


def parse_manifest(path) -> list[Record]:
    records, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in FIELDS if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            extra = sorted(set(obj) - set(FIELDS))
            if extra:
                raise ManifestError(f"{path}:{lineno}: unknown field(s) {', '.join(extra)}")
            try:
                rec = Record(**{k: obj[k] for k in FIELDS})
            except ManifestError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            if rec.path in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {rec.path!r} (first seen on line {seen[rec.path]})")
            seen[rec.path] = lineno
            records.append(rec)
    return records


def write_manifest(records: Iterable[Record], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

@dataclass
class SplitResult:
    train: list[Record]
    query: list[Record]
    gallery: list[Record]
    protocol: str
    seed: int
    dropped: list[tuple[Record, str]] = field(default_factory=list)
    train_scenes: list[int] = field(default_factory=list)
    test_scenes: list[int] = field(default_factory=list)

    def summary(self) -> dict:
        def ids(rs):
            return len({r.pid for r in rs})

        test = self.query + self.gallery
        train_cams = sorted({r.cam for r in self.train})
        test_cams = sorted({r.cam for r in test})
        train_sc = sorted({r.scene for r in self.train})
        test_sc = sorted({r.scene for r in test})
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "counts": {
                "train": {"records": len(self.train), "ids": ids(self.train)},
                "query": {"records": len(self.query), "ids": ids(self.query)},
                "gallery": {"records": len(self.gallery), "ids": ids(self.gallery)},
                "test": {"records": len(test), "ids": ids(test)},
                "dropped": len(self.dropped),
            },
            "dropped_reasons": dict(sorted(Counter(reason for _, reason in self.dropped).items())),
            "train_scenes": train_sc,
            "test_scenes": test_sc,
            "train_cams": train_cams,
            "test_cams": test_cams,
            "scenes_disjoint": not set(train_sc) & set(test_sc),
            "cams_disjoint": not set(train_cams) & set(test_cams),
            "ids_disjoint": not {r.pid for r in self.train} & {r.pid for r in test},
        }


def check_split_invariants(result: SplitResult) -> list[str]:
    """Return a list of violated invariants (empty when the split is valid)."""
    problems = []
    test = result.query + result.gallery
    if {r.pid for r in result.train} & {r.pid for r in test}:
        problems.append("train and test identities overlap")
    if result.protocol in ("open_scene", "day_night"):
        if {r.scene for r in result.train} & {r.scene for r in test}:
            problems.append("train and test scenes overlap")
    if result.protocol == "open_scene":
        if {r.cam for r in result.train} & {r.cam for r in test}:
            problems.append("train and test cameras overlap")
    if result.protocol == "day_night":
        if any(r.tod != "day" for r in result.train):
            problems.append("night record in train")
        if any(r.tod != "night" for r in test):
            problems.append("day record in test")
    by_pid = defaultdict(set)
    for g in result.gallery:
        by_pid[g.pid].add(g.cam)
    for q in result.query:
        if not by_pid[q.pid] - {q.cam}:
            problems.append(f"query {q.path} has no cross-camera positive")
            break
    return problems


def _train_count(n: int, ratio: float) -> int:
    return int(min(max(round(ratio * n), 1), n - 1))


def _assign_identities(train_pool: list[Record], test_pool: list[Record], rng: Rng, dropped: list):
    """Give every identity wholly to the side holding more of its records."""
    tr, te = defaultdict(list), defaultdict(list)
    for r in train_pool:
        tr[r.pid].append(r)
    for r in test_pool:
        te[r.pid].append(r)
    coin = rng.uniform(size=max(len(set(tr) | set(te)), 1))
    train, test = [], []
    for k, pid in enumerate(sorted(set(tr) | set(te))):
        a, b = len(tr[pid]), len(te[pid])
        to_train = a > b or (a == b and coin[k] < 0.5)
        keep, lose = (tr[pid], te[pid]) if to_train else (te[pid], tr[pid])
        (train if to_train else test).extend(keep)
        dropped.extend((r, "identity assigned to the other side") for r in lose)
    return train, test


def _partition_scenes(scenes: list[int], ratio: float, rng: Rng, test_scenes) -> tuple[set, set]:
    if test_scenes is not None:
        te = set(int(s) for s in test_scenes)
        unknown = te - set(scenes)
        if unknown:
            raise ProtocolError(f"test scenes {sorted(unknown)} not present in manifest")
        tr = set(scenes) - te
    else:
        perm = [scenes[i] for i in rng.permutation(len(scenes))]
        n = _train_count(len(scenes), ratio)
        tr, te = set(perm[:n]), set(perm[n:])
    return tr, te


def _select_queries(test: list[Record], rng: Rng, dropped: list) -> tuple[list[Record], list[Record]]:
    cams_of = defaultdict(set)
    for r in test:
        cams_of[r.pid].add(r.cam)
    groups = defaultdict(list)
    for r in test:
        groups[(r.pid, r.scene)].append(r)
    query, gallery = [], []
    for k, key in enumerate(sorted(groups)):
        members = sorted(groups[key], key=lambda r: r.path)
        eligible = [r for r in members if cams_of[r.pid] - {r.cam}]
        if eligible:
            q = eligible[int(rng.child(k).integers(len(eligible)))]
            query.append(q)
            gallery.extend(r for r in members if r is not q)
        else:
            gallery.extend(members)
    # safety net: demote queries that still lack a cross-camera positive
    g_cams = defaultdict(set)
    for g in gallery:
        g_cams[g.pid].add(g.cam)
    kept = []
    for q in query:
        if g_cams[q.pid] - {q.cam}:
            kept.append(q)
        else:
            gallery.append(q)
            g_cams[q.pid].add(q.cam)
    return kept, gallery


def split(records: Sequence[Record], protocol: str, ratios: dict | float | None = None, seed: int = 0,
          test_scenes: Sequence[int] | None = None) -> SplitResult:
    """Deterministic train/query/gallery split under one of the three protocols.

    ``ratios`` gives the training fraction (of identities for close_scene, of
    scenes otherwise) as a float or ``{"train": x}``; default 0.5. ``test_scenes``
    pins the held-out scenes instead of drawing them.
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    ratio = ratios.get("train", 0.5) if isinstance(ratios, dict) else (0.5 if ratios is None else float(ratios))
    if not 0 < ratio < 1:
        raise ProtocolError(f"train ratio must be in (0, 1), got {ratio}")
    rng = Rng(seed)
    records = sorted(records, key=lambda r: r.path)
    dropped: list[tuple[Record, str]] = []
    pids = sorted({r.pid for r in records})
    scenes = sorted({r.scene for r in records})

    if protocol == "close_scene":
        if len(pids) < 2:
            raise ProtocolError("close_scene needs at least 2 identities")
        perm = [pids[i] for i in rng.child(1).permutation(len(pids))]
        train_ids = set(perm[:_train_count(len(pids), ratio)])
        train = [r for r in records if r.pid in train_ids]
        test = [r for r in records if r.pid not in train_ids]
        tr_sc, te_sc = set(scenes), set(scenes)
    else:
        if len(scenes) < 2:
            raise ProtocolError(f"{protocol} needs at least 2 scenes, manifest has {len(scenes)}")
        if protocol == "day_night":
            if not any(r.tod == "night" for r in records):
                raise ProtocolError("day_night protocol unsatisfiable: manifest has no night records")
            if not any(r.tod == "day" for r in records):
                raise ProtocolError("day_night protocol unsatisfiable: manifest has no day records")
            day_sc = {r.scene for r in records if r.tod == "day"}
            night_sc = {r.scene for r in records if r.tod == "night"}
            for attempt in range(100 if test_scenes is None else 1):
                tr_sc, te_sc = _partition_scenes(scenes, ratio, rng.child(2, attempt), test_scenes)
                if tr_sc & day_sc and te_sc & night_sc:
                    break
            else:
                raise ProtocolError("day_night protocol unsatisfiable: no scene partition puts day data in "
                                    "training scenes and night data in test scenes")
            pool_tr, pool_te = [], []
            for r in records:
                if r.scene in tr_sc and r.tod == "day":
                    pool_tr.append(r)
                elif r.scene in te_sc and r.tod == "night":
                    pool_te.append(r)
                elif r.scene in tr_sc:
                    dropped.append((r, "night record in a training scene"))
                else:
                    dropped.append((r, "day record in a test scene"))
        else:
            tr_sc, te_sc = _partition_scenes(scenes, ratio, rng.child(2), test_scenes)
            pool_tr = [r for r in records if r.scene in tr_sc]
            pool_te = [r for r in records if r.scene in te_sc]
        train, test = _assign_identities(pool_tr, pool_te, rng.child(3), dropped)
        if protocol == "open_scene":
            train_cams = {r.cam for r in train}
            shared = [r for r in test if r.cam in train_cams]
            dropped.extend((r, "camera shared with training") for r in shared)
            test = [r for r in test if r.cam not in train_cams]
    if not train:
        raise ProtocolError(f"{protocol} split left no training records")
    if not test:
        raise ProtocolError(f"{protocol} split left no test records")
    query, gallery = _select_queries(test, rng.child(4), dropped)
    return SplitResult(train, query, sorted(gallery, key=lambda r: r.path), protocol, seed, dropped,
                       sorted(tr_sc), sorted(te_sc))


def write_split(result: SplitResult, outdir) -> dict:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(result.train, out / "train.jsonl")
    write_manifest(result.query, out / "query.jsonl")
    write_manifest(result.gallery, out / "gallery.jsonl")
    with open(out / "dropped.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r, reason in result.dropped:
            obj = json.loads(r.to_json())
            obj["reason"] = reason
            fh.write(json.dumps(obj) + "\n")
    summary = result.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def read_split(outdir) -> tuple[list[Record], list[Record], list[Record]]:
    d = Path(outdir)
    return parse_manifest(d / "train.jsonl"), parse_manifest(d / "query.jsonl"), parse_manifest(d / "gallery.jsonl")


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

@dataclass
class DomainStyle:
    hue: float
    gamma: float
    noise: float


@dataclass
class SynthConfig:
    num_domains: int = 3
    ids_per_domain: int = 30
    images_per_id: int = 20
    height: int = 64
    width: int = 64
    scenes_per_domain: int = 2
    cams_per_scene: int = 2
    night_fraction: float = 0.25
    styles: list[DomainStyle] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError(f"num_domains must be >= 2 (need S >= 2), got {self.num_domains}")
        if self.ids_per_domain < 1 or self.images_per_id < 2:
            raise ValueError("need ids_per_domain >= 1 and images_per_id >= 2")
        if self.scenes_per_domain < 2:
            raise ValueError("scenes_per_domain must be >= 2 so every identity crosses two scenes")
        if self.cams_per_scene < 1:
            raise ValueError("cams_per_scene must be >= 1")
        if not 0 <= self.night_fraction <= 1:
            raise ValueError("night_fraction must be in [0, 1]")
        if self.styles is not None:
            self.styles = [s if isinstance(s, DomainStyle) else DomainStyle(**s) for s in self.styles]
            if len(self.styles) != self.num_domains:
                raise ValueError(f"got {len(self.styles)} styles for {self.num_domains} domains")

    def resolved_styles(self) -> list[DomainStyle]:
        if self.styles is not None:
            return list(self.styles)
        rng = Rng(self.seed).child(7)
        out = []
        for d in range(self.num_domains):
            u = rng.child(d).uniform(size=2)
            out.append(DomainStyle(hue=(d + 0.3 * u[0]) / self.num_domains,
                                   gamma=float(0.6 + 1.0 * u[1]) if d % 2 else float(1.6 - 1.0 * u[1]),
                                   noise=0.02 + 0.06 * ((d * 0.618) % 1.0)))
        return out

    @property
    def total_images(self) -> int:
        return self.num_domains * self.ids_per_domain * self.images_per_id

    def to_dict(self) -> dict:
        d = asdict(self)
        d["styles"] = [asdict(s) for s in self.resolved_styles()]
        return d


def domain_of(record: Record, scenes_per_domain: int = 1) -> int:
    return record.scene // scenes_per_domain


def _identity_look(pid: int, seed: int) -> dict:
    r = Rng(seed).child(11, pid)
    cols = r.uniform(0.05, 0.95, size=(4, 3))
    return {"head": cols[0], "torso": cols[1], "legs": cols[2], "mark": cols[3],
            "glyph": int(r.integers(4)), "width": int(r.integers(14, 22)), "legsplit": float(r.uniform(0.45, 0.6))}


def render_image(pid: int, domain: int, scene_local: int, cam_local: int, night: bool, style: DomainStyle,
                 height: int, width: int, seed: int, noise_rng: Rng | None) -> np.ndarray:
    """Deterministic RGB rendering in [0, 1] of identity ``pid`` in a domain/scene/camera."""
    look = _identity_look(pid, seed)
    bg = np.array(colorsys.hsv_to_rgb((style.hue + 0.04 * scene_local) % 1.0, 0.55, 0.75))
    img = np.empty((height, width, 3))
    img[:] = bg
    yy = np.linspace(0, 1, height)[:, None]
    img *= (0.85 + 0.15 * yy)[..., None] if scene_local % 2 else (1.0 - 0.15 * yy)[..., None]
    w = look["width"] * width // 64
    cx = width // 2 + (cam_local * 2 - 1) * (width // 10) if cam_local < 2 else width // 2 + cam_local
    x0, x1 = max(cx - w // 2, 0), min(cx + w // 2, width)
    top, head_end = height // 8, height // 8 + height // 7
    split = int(head_end + look["legsplit"] * (height - head_end - height // 16))
    bottom = height - height // 16
    hx0, hx1 = cx - w // 4, cx + w // 4
    img[top:head_end, max(hx0, 0):min(hx1, width)] = look["head"]
    img[head_end:split, x0:x1] = look["torso"]
    img[split:bottom, x0:cx - 1] = look["legs"]
    img[split:bottom, cx + 1:x1] = look["legs"]
    # identity glyph on the torso
    gy, gx = (head_end + split) // 2, cx
    s = max(2, w // 5)
    g = look["glyph"]
    if g == 0:
        img[gy - s:gy + s, gx - s:gx + s] = look["mark"]
    elif g == 1:
        img[gy - s:gy + s, gx - 1:gx + 1] = look["mark"]
        img[gy - 1:gy + 1, gx - s:gx + s] = look["mark"]
    elif g == 2:
        img[gy - s:gy - s + 2, x0:x1] = look["mark"]
        img[gy + s - 2:gy + s, x0:x1] = look["mark"]
    else:
        for k in range(-s, s):
            img[gy + k, max(gx - abs(k), 0):gx + abs(k) + 1] = look["mark"]
    img = np.clip(img, 0, 1) ** style.gamma
    if night:
        img = img * np.array([0.3, 0.32, 0.45])
    if style.noise > 0 and noise_rng is not None:
        img = img + style.noise * noise_rng.normal(img.shape)
    return np.clip(img, 0, 1)


def synth_generate(config: SynthConfig, outdir, rng: Rng | None = None) -> Path:
    """Write PNG images and ``manifest.jsonl`` (plus ``dataset.json``) under ``outdir``."""
    from PIL import Image

    rng = rng or Rng(config.seed)
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from None
    styles = config.resolved_styles()
    records = []
    base_ts = 1_600_000_000
    idx = 0
    for d in range(config.num_domains):
        (out / "images" / f"d{d}").mkdir(parents=True, exist_ok=True)
        for i in range(config.ids_per_domain):
            pid = d * config.ids_per_domain + i
            for k in range(config.images_per_id):
                sub = rng.child(idx)
                s_local = k % config.scenes_per_domain
                c_local = (k // config.scenes_per_domain) % config.cams_per_scene
                scene = d * config.scenes_per_domain + s_local
                cam = scene * config.cams_per_scene + c_local
                night = bool(sub.child(0).uniform() < config.night_fraction)
                day_idx = int(sub.child(1).integers(365))
                hour = int(sub.child(2).integers(20, 28) % 24) if night else int(sub.child(2).integers(8, 18))
                ts = base_ts + day_idx * 86400 + hour * 3600 + int(sub.child(3).integers(3600))
                img = render_image(pid, d, s_local, c_local, night, styles[d], config.height, config.width,
                                   config.seed, sub.child(4))
                rel = f"images/d{d}/p{pid:05d}_{k:03d}.png"
                Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(out / rel, compress_level=6)
                records.append(Record(rel, pid, cam, scene, ts, "night" if night else "day"))
                idx += 1
    write_manifest(records, out / "manifest.jsonl")
    (out / "dataset.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return out / "manifest.jsonl"


IMAGE_MEAN = 0.45
IMAGE_STD = 0.25


def load_images(records: Sequence[Record], root, dtype="float32") -> np.ndarray:
    """Load records as normalized ``[N, 3, H, W]`` arrays; missing files are all reported at once."""
    from PIL import Image

    root = Path(root)
    missing = [r.path for r in records if not (root / r.path).is_file()]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise FileNotFoundError(f"{len(missing)} image file(s) missing under {root}: {shown}")
    arrs = []
    for r in records:
        with Image.open(root / r.path) as im:
            arrs.append(np.asarray(im.convert("RGB"), dtype=np.float64))
    x = np.stack(arrs).transpose(0, 3, 1, 2) / 255.0 if arrs else np.zeros((0, 3, 0, 0))
    return ((x - IMAGE_MEAN) / IMAGE_STD).astype(dtype)
