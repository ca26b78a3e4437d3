"""On-disk formats: ASCII PLY and XYZ CSV clouds, PGM depth maps with a JSON
sidecar, and the sequence / pair-set dataset layout.

Every writer goes through :func:`atomic_write` (temp file + rename), so an
interrupted run never leaves a half-written file behind.  Floats are written
with ``repr`` and therefore round-trip exactly.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .cloud import CoordinateMap, DepthMap, PointCloud
from .errors import CorruptDataset
from .pose_math import EulerAngles, RigidTransform
from .synth import FrameSequence, PairSet, RegistrationPair

PathLike = Union[str, os.PathLike]
PGM_MAXVAL = 65535


def atomic_write(path: PathLike, data: Union[str, bytes]) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# --------------------------------------------------------------------------
# point clouds
# --------------------------------------------------------------------------

def ply_text(points: np.ndarray, extra: dict[str, np.ndarray] | None = None) -> str:
    """ASCII PLY with float x, y, z plus optional integer vertex properties."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    extra = extra or {}
    head = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
            "property double x", "property double y", "property double z"]
    head += [f"property int {name}" for name in extra]
    head.append("end_header")
    cols = [np.asarray(v, dtype=np.int64).reshape(-1) for v in extra.values()]
    lines = []
    for i, p in enumerate(pts):
        row = [_fmt(p[0]), _fmt(p[1]), _fmt(p[2])] + [str(int(c[i])) for c in cols]
        lines.append(" ".join(row))
    return "\n".join(head + lines) + "\n"


def write_ply(path: PathLike, cloud: Union[PointCloud, np.ndarray], extra: dict | None = None) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    atomic_write(path, ply_text(pts, extra))


def read_ply(path: PathLike, with_extra: bool = False):
    """Read an ASCII PLY written by :func:`write_ply` (or any ASCII PLY whose
    first vertex properties are x, y, z)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptDataset(f"{path}: {exc}") from exc
    if not lines or lines[0].strip() != "ply":
        raise CorruptDataset(f"{path}: not a PLY file")
    n = None
    props: list[str] = []
    in_vertex = False
    end = None
    for k, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise CorruptDataset(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = k
            break
    if n is None or end is None or props[:3] != ["x", "y", "z"]:
        raise CorruptDataset(f"{path}: malformed PLY header")
    body = lines[end + 1:end + 1 + n]
    if len(body) != n:
        raise CorruptDataset(f"{path}: expected {n} vertices, found {len(body)}")
    try:
        data = np.array([[float(v) for v in row.split()[:len(props)]] for row in body], dtype=float)
    except ValueError as exc:
        raise CorruptDataset(f"{path}: {exc}") from exc
    data = data.reshape(n, len(props))
    if not np.all(np.isfinite(data[:, :3])):
        raise CorruptDataset(f"{path}: non-finite coordinates")
    cloud = PointCloud(data[:, :3], id=path.stem)
    if with_extra:
        return cloud, {name: data[:, i + 3].astype(np.int64) for i, name in enumerate(props[3:])}
    return cloud


def write_xyz_csv(path: PathLike, cloud: Union[PointCloud, np.ndarray]) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    atomic_write(path, "".join(f"{_fmt(x)},{_fmt(y)},{_fmt(z)}\n" for x, y, z in pts))


def read_xyz_csv(path: PathLike) -> PointCloud:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    except ValueError as exc:
        raise CorruptDataset(f"{path}: {exc}") from exc
    if data.size == 0:
        data = np.zeros((0, 3))
    if data.shape[1] != 3:
        raise CorruptDataset(f"{path}: expected 3 columns")
    return PointCloud(data, id=Path(path).stem)


# --------------------------------------------------------------------------
# maps
# --------------------------------------------------------------------------

def write_depth_map(path: PathLike, dm: Union[DepthMap, CoordinateMap]) -> dict:
    """Write ``path`` (ASCII PGM, 16-bit) and ``path.json`` (metadata).

    Valid depths are quantized linearly onto 1..65535 between the valid
    minimum and maximum; 0 marks masked pixels.
    """
    if isinstance(dm, CoordinateMap):
        depth, mask = dm.xyz[:, :, 2], dm.mask
    else:
        depth, mask = dm.depth, dm.mask
    R = depth.shape[0]
    if mask.any():
        z_min, z_max = float(depth[mask].min()), float(depth[mask].max())
    else:
        z_min = z_max = 0.0
    span = z_max - z_min
    level = np.zeros(depth.shape, dtype=np.int64)
    if mask.any():
        frac = (depth[mask] - z_min) / span if span > 0 else np.zeros(int(mask.sum()))
        level[mask] = 1 + np.rint(frac * (PGM_MAXVAL - 1)).astype(np.int64)
    rows = [" ".join(str(v) for v in r) for r in level]
    atomic_write(path, f"P2\n{R} {depth.shape[1]}\n{PGM_MAXVAL}\n" + "\n".join(rows) + "\n")
    meta = {"scale": float(dm.scale), "origin": [float(v) for v in dm.origin], "resolution": int(R),
            "z_min": z_min, "z_max": z_max, "masked_value": 0}
    atomic_write(str(path) + ".json", dumps_json(meta))
    return meta


def read_depth_map(path: PathLike) -> DepthMap:
    """Inverse of :func:`write_depth_map`, up to quantization."""
    tokens = Path(path).read_text().split()
    if not tokens or tokens[0] != "P2":
        raise CorruptDataset(f"{path}: not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:4 + w * h], dtype=np.int64)
    if vals.size != w * h:
        raise CorruptDataset(f"{path}: truncated PGM")
    level = vals.reshape(h, w)
    meta = json.loads(Path(str(path) + ".json").read_text())
    mask = level > 0
    depth = np.zeros(level.shape)
    depth[mask] = meta["z_min"] + (level[mask] - 1) / (maxval - 1) * (meta["z_max"] - meta["z_min"])
    return DepthMap(depth, mask, float(meta["scale"]), np.array(meta["origin"], dtype=float))


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def sequence_dir(root: PathLike, k: int) -> Path:
    return Path(root) / f"seq_{k:04d}"


def write_sequence(directory: PathLike, seq: FrameSequence) -> None:
    d = Path(directory)
    d.mkdir(exist_ok=True)
    for i, f in enumerate(seq.frames):
        write_ply(d / f"frame_{i}.ply", f)
    gt = {"gt_to_standard": [p.to_dict() for p in seq.poses], "reference_index": seq.reference_index}
    atomic_write(d / "gt.json", dumps_json(gt))
    atomic_write(d / "meta.json", dumps_json({"seed": seq.seed, "identity": seq.identity,
                                              "frames": len(seq.frames)}))


def read_sequence(directory: PathLike) -> FrameSequence:
    d = Path(directory)
    if not d.is_dir():
        raise CorruptDataset(f"sequence directory not found: {d}")
    try:
        gt = json.loads((d / "gt.json").read_text())
        meta = json.loads((d / "meta.json").read_text())
        poses = tuple(RigidTransform.from_dict(p) for p in gt["gt_to_standard"])
        ref = int(gt["reference_index"])
        frames = []
        for i in range(len(poses)):
            pc = read_ply(d / f"frame_{i}.ply")
            frames.append(PointCloud(pc.points, id=meta["identity"], frame_index=i))
    except (OSError, KeyError, ValueError, TypeError, ArithmeticError) as exc:
        raise CorruptDataset(f"{d}: {exc}") from exc
    if not 0 <= ref < len(frames):
        raise CorruptDataset(f"{d}: reference_index out of range")
    return FrameSequence(tuple(frames), poses, ref, meta["identity"], int(meta["seed"]))


def _euler_dict(e: EulerAngles) -> dict:
    return {"alpha": e.alpha, "beta": e.beta, "gamma": e.gamma}


def write_pair_set(root: PathLike, pairs: PairSet) -> None:
    """``root/pairs/pair_XXXXX_{source,target}.ply`` plus ``root/pairs.jsonl``
    (paths relative to ``root``) and ``root/meta.json``."""
    root = Path(root)
    (root / "pairs").mkdir(exist_ok=True)
    lines = []
    for k, p in enumerate(pairs.pairs):
        src = f"pairs/pair_{k:05d}_source.ply"
        tgt = f"pairs/pair_{k:05d}_target.ply"
        write_ply(root / src, p.source)
        write_ply(root / tgt, p.target)
        lines.append(json.dumps({"source": src, "target": tgt, "gt": p.gt.to_dict(),
                                 "source_pose": _euler_dict(p.source_pose),
                                 "target_pose": _euler_dict(p.target_pose),
                                 "identity": p.identity}, sort_keys=True))
    atomic_write(root / "pairs.jsonl", "\n".join(lines) + "\n")
    atomic_write(root / "meta.json", dumps_json({"kind": "pairs", "regime": pairs.regime,
                                                 "seed": pairs.seed, "count": len(pairs)}))


def pairs_file(path: PathLike) -> Path:
    p = Path(path)
    return p / "pairs.jsonl" if p.is_dir() else p


def read_pair_set(path: PathLike) -> PairSet:
    """Load a pair set from its root directory or its ``pairs.jsonl``."""
    jl = pairs_file(path)
    if not jl.is_file():
        raise CorruptDataset(f"pair list not found: {jl}")
    root = jl.parent
    regime = "standard"
    meta = root / "meta.json"
    seed = 0
    if meta.is_file():
        try:
            m = json.loads(meta.read_text())
            regime, seed = m.get("regime", regime), int(m.get("seed", 0))
        except (ValueError, TypeError) as exc:
            raise CorruptDataset(f"{meta}: {exc}") from exc
    pairs = []
    for n, line in enumerate(jl.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            src = read_ply(root / rec["source"])
            tgt = read_ply(root / rec["target"])
            gt = RigidTransform.from_dict(rec["gt"])
            sp = EulerAngles(**rec["source_pose"]) if "source_pose" in rec else EulerAngles(0.0, 0.0, 0.0)
            tp = EulerAngles(**rec["target_pose"]) if "target_pose" in rec else EulerAngles(0.0, 0.0, 0.0)
        except FileNotFoundError as exc:
            raise CorruptDataset(f"{jl}:{n}: missing file {exc.filename}") from exc
        except (KeyError, ValueError, TypeError, ArithmeticError) as exc:
            raise CorruptDataset(f"{jl}:{n}: {exc}") from exc
        ident = rec.get("identity", src.id)
        pairs.append(RegistrationPair(PointCloud(src.points, id=ident), PointCloud(tgt.points, id=ident),
                                      gt, sp, tp, ident))
    if not pairs:
        raise CorruptDataset(f"{jl}: no pairs")
    return PairSet(pairs, regime, seed)


def list_sequences(root: PathLike) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("seq_"))


def write_lines(path: PathLike, lines: Iterable[str]) -> None:
    atomic_write(path, "".join(f"{line}\n" for line in lines))
