"""File formats: binary map files, per-image feature sidecars, SFM text
models and benchmark-style pose files."""

from __future__ import annotations

import io as _io
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    ChecksumError,
    IngestError,
    MapFormatError,
    TruncatedFileError,
    UnsupportedCameraModel,
    VersionMismatchError,
)
from .geometry import PinholeCamera, Pose
from .mapping import ImageRecord, LandmarkMap, Track

MAP_MAGIC = b"OCMAP1"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<6sIIIQQI")

FEAT_MAGIC = b"OCFEAT"
_FEAT_HEADER = struct.Struct("<6sIII")

SUPPORTED_MODELS = ("SIMPLE_PINHOLE", "PINHOLE")


class _Writer:
    def __init__(self):
        self.buf = _io.BytesIO()

    def u8(self, v):
        self.buf.write(struct.pack("<B", v))

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v):
        self.buf.write(struct.pack("<Q", v))

    def i64(self, v):
        self.buf.write(struct.pack("<q", v))

    def f64(self, *vs):
        self.buf.write(struct.pack(f"<{len(vs)}d", *vs))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.buf.write(b)

    def array(self, a: np.ndarray, dtype: str):
        self.buf.write(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedFileError("unexpected end of map payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def u8(self):
        return self.unpack("B")[0]

    def u32(self):
        return self.unpack("I")[0]

    def u64(self):
        return self.unpack("Q")[0]

    def i64(self):
        return self.unpack("q")[0]

    def string(self) -> str:
        n = self.u32()
        return bytes(self.take(n)).decode("utf-8")

    def array(self, dtype: str, count: int, shape=None) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        a = np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(np.dtype(dtype))
        return a.reshape(shape) if shape is not None else a


def save_map(m: LandmarkMap, path) -> None:
    """Write ``m`` as a single little-endian binary file.

    Header: magic, format version, local and global descriptor dims, image and
    landmark counts, CRC32 of the payload. Reals are float64 except
    descriptors, which are float32.
    """
    w = _Writer()
    w.u32(len(m.palette))
    for k in sorted(m.palette):
        w.u32(k)
        w.string(m.palette[k])
    for im in m.images:
        w.i64(im.id)
        w.string(im.name)
        c = im.camera
        w.f64(c.fx, c.fy, c.cx, c.cy)
        w.u32(c.width)
        w.u32(c.height)
        w.u8(im.pose is not None)
        if im.pose is not None:
            w.f64(*im.pose.q, *im.pose.t)
        w.u64(im.num_keypoints)
        w.array(im.xy, "f8")
        w.array(im.descriptors, "f4")
        w.array(im.labels, "u2")
        w.array(im.scores, "f8")
        w.array(im.global_descriptor, "f4")
    w.array(m.ids, "i8")
    w.array(m.xyz, "f8")
    w.array(m.colors, "u1")
    w.array(m.labels, "u2")
    w.array(m.descriptors, "f4")
    w.array(m.max_distance, "f8")
    w.array(m.normals, "f8")
    w.array(m.theta, "f8")
    w.array(m.mean_reproj_err, "f8")
    w.array(m.degenerate, "u1")
    w.array(m.track_offsets, "u8")
    w.array(m.track_image_ids, "i8")
    w.array(m.track_kp, "u4")
    payload = w.buf.getvalue()
    header = _MAP_HEADER.pack(
        MAP_MAGIC, MAP_VERSION, m.local_dim, m.global_dim,
        len(m.images), len(m), zlib.crc32(payload) & 0xFFFFFFFF,
    )
    Path(path).write_bytes(header + payload)


def load_map(path) -> LandmarkMap:
    data = Path(path).read_bytes()
    if len(data) < len(MAP_MAGIC) or data[: len(MAP_MAGIC)] != MAP_MAGIC:
        raise MapFormatError(f"{path}: not a map file (bad magic)")
    if len(data) < _MAP_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, ldim, gdim, n_images, n_lm, crc = _MAP_HEADER.unpack_from(data)
    if version != MAP_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {MAP_VERSION}")
    payload = data[_MAP_HEADER.size :]
    crc_ok = (zlib.crc32(payload) & 0xFFFFFFFF) == crc
    try:
        m, trailing = _parse_payload(payload, ldim, gdim, n_images, n_lm)
    except TruncatedFileError:
        raise TruncatedFileError(f"{path}: truncated payload") from None
    except (ValueError, UnicodeDecodeError) as exc:
        if not crc_ok:
            raise ChecksumError(f"{path}: payload checksum mismatch") from None
        raise MapFormatError(f"{path}: corrupt payload ({exc})") from None
    if not crc_ok:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    if trailing:
        raise MapFormatError(f"{path}: {trailing} trailing bytes after payload")
    return m


def _parse_payload(payload: bytes, ldim: int, gdim: int, n_images: int, n_lm: int):
    r = _Reader(payload)
    palette = {}
    for _ in range(r.u32()):
        k = r.u32()
        palette[k] = r.string()
    images = []
    for _ in range(n_images):
        image_id = r.i64()
        name = r.string()
        fx, fy, cx, cy = r.unpack("4d")
        width, height = r.u32(), r.u32()
        pose = None
        if r.u8():
            v = r.unpack("7d")
            pose = Pose(np.array(v[:4]), np.array(v[4:]))
        n = r.u64()
        images.append(
            ImageRecord(
                image_id, name, PinholeCamera(fx, fy, cx, cy, width, height), pose,
                r.array("f8", 2 * n, (n, 2)),
                r.array("f4", n * ldim, (n, ldim)),
                r.array("u2", n).astype(np.int64),
                r.array("f8", n),
                r.array("f4", gdim),
            )
        )
    ids = r.array("i8", n_lm)
    xyz = r.array("f8", 3 * n_lm, (n_lm, 3))
    colors = r.array("u1", 3 * n_lm, (n_lm, 3))
    labels = r.array("u2", n_lm).astype(np.int64)
    desc = r.array("f4", n_lm * ldim, (n_lm, ldim))
    max_distance = r.array("f8", n_lm)
    normals = r.array("f8", 3 * n_lm, (n_lm, 3))
    theta = r.array("f8", n_lm)
    err = r.array("f8", n_lm)
    degen = r.array("u1", n_lm).astype(bool)
    offsets = r.array("u8", n_lm + 1).astype(np.int64)
    m_obs = int(offsets[-1])
    t_img = r.array("i8", m_obs)
    t_kp = r.array("u4", m_obs).astype(np.int64)
    m = LandmarkMap(
        images, ids, xyz, colors, labels, desc, offsets, t_img, t_kp,
        max_distance, normals, theta, err, degen, palette, ldim, gdim,
    )
    return m, len(payload) - r.pos


# --- feature sidecars ------------------------------------------------------

def write_features(path, image: ImageRecord) -> None:
    """Sidecar with keypoints (u, v, label, score, descriptor) and the global descriptor.

    Layout: magic ``OCFEAT``, u32 local dim, u32 global dim, u32 keypoint
    count, packed keypoint records, then float32 global descriptor.
    """
    n, D = image.descriptors.shape
    Dg = len(image.global_descriptor)
    rec = np.dtype([("u", "<f4"), ("v", "<f4"), ("label", "<u2"), ("score", "<f4"), ("desc", "<f4", (D,))])
    arr = np.zeros(n, dtype=rec)
    arr["u"] = image.xy[:, 0]
    arr["v"] = image.xy[:, 1]
    arr["label"] = image.labels
    arr["score"] = image.scores
    arr["desc"] = image.descriptors
    with open(path, "wb") as f:
        f.write(_FEAT_HEADER.pack(FEAT_MAGIC, D, Dg, n))
        f.write(arr.tobytes())
        f.write(np.asarray(image.global_descriptor, dtype="<f4").tobytes())


def read_features(path):
    """Returns ``(xy, descriptors, labels, scores, global_descriptor)``."""
    data = Path(path).read_bytes()
    if data[:6] != FEAT_MAGIC:
        raise IngestError("not a feature sidecar (bad magic)", path)
    if len(data) < _FEAT_HEADER.size:
        raise IngestError("truncated sidecar header", path)
    _, D, Dg, n = _FEAT_HEADER.unpack_from(data)
    rec = np.dtype([("u", "<f4"), ("v", "<f4"), ("label", "<u2"), ("score", "<f4"), ("desc", "<f4", (D,))])
    expected = _FEAT_HEADER.size + n * rec.itemsize + 4 * Dg
    if len(data) != expected:
        raise IngestError(f"sidecar size {len(data)} != expected {expected}", path)
    arr = np.frombuffer(data, dtype=rec, count=n, offset=_FEAT_HEADER.size)
    xy = np.column_stack([arr["u"], arr["v"]]).astype(np.float64)
    gd = np.frombuffer(data, dtype="<f4", count=Dg, offset=_FEAT_HEADER.size + n * rec.itemsize)
    return (
        xy,
        arr["desc"].astype(np.float32).reshape(n, D),
        arr["label"].astype(np.int64),
        arr["score"].astype(np.float64),
        gd.astype(np.float32),
    )


def read_query(path, name: str, camera: PinholeCamera, image_id: int = -1) -> ImageRecord:
    xy, desc, labels, scores, gd = read_features(path)
    return ImageRecord(image_id, name, camera, None, xy, desc, labels, scores, gd)


# --- SFM text model ----------------------------------------------------------

def _data_lines(path: Path):
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s


def camera_from_model(model: str, width: int, height: int, params, path=None, lineno=None) -> PinholeCamera:
    if model == "SIMPLE_PINHOLE":
        if len(params) != 3:
            raise IngestError(f"SIMPLE_PINHOLE needs 3 params, got {len(params)}", path, lineno)
        f, cx, cy = params
        return PinholeCamera(f, f, cx, cy, width, height)
    if model == "PINHOLE":
        if len(params) != 4:
            raise IngestError(f"PINHOLE needs 4 params, got {len(params)}", path, lineno)
        fx, fy, cx, cy = params
        return PinholeCamera(fx, fy, cx, cy, width, height)
    raise UnsupportedCameraModel(f"unsupported camera model {model}", path, lineno)


def read_cameras_text(path) -> dict[int, PinholeCamera]:
    path = Path(path)
    cams = {}
    for lineno, line in _data_lines(path):
        elems = line.split()
        try:
            cam_id, model = int(elems[0]), elems[1]
            width, height = int(elems[2]), int(elems[3])
            params = [float(x) for x in elems[4:]]
        except (ValueError, IndexError) as exc:
            raise IngestError(f"malformed camera line ({exc})", path, lineno) from None
        cams[cam_id] = camera_from_model(model, width, height, params, path, lineno)
    return cams


def read_images_text(path):
    """Parse image records as ``(id, q, t, camera_id, name, xy, point3d_ids)`` tuples.

    Every header line is followed by its POINTS2D line, which may be empty.
    """
    path = Path(path)
    raw = path.read_text(encoding="utf-8").splitlines()
    out = []
    i = 0
    while i < len(raw):
        line = raw[i].strip()
        if not line or line.startswith("#"):
            i += 1
            continue
        lineno = i + 1
        elems = line.split()
        try:
            image_id = int(elems[0])
            q = np.array([float(x) for x in elems[1:5]])
            t = np.array([float(x) for x in elems[5:8]])
            cam_id = int(elems[8])
            name = elems[9]
            if len(q) != 4 or len(t) != 3:
                raise ValueError("expected 4 quaternion and 3 translation values")
        except (ValueError, IndexError) as exc:
            raise IngestError(f"malformed image line ({exc})", path, lineno) from None
        vals = raw[i + 1].split() if i + 1 < len(raw) else []
        if len(vals) % 3:
            raise IngestError("POINTS2D line length is not a multiple of 3", path, lineno + 1)
        try:
            xy = np.array([[float(vals[k]), float(vals[k + 1])] for k in range(0, len(vals), 3)]).reshape(-1, 2)
            pids = np.array([int(vals[k + 2]) for k in range(0, len(vals), 3)], dtype=np.int64)
        except ValueError as exc:
            raise IngestError(f"malformed POINTS2D line ({exc})", path, lineno + 1) from None
        out.append((image_id, q, t, cam_id, name, xy, pids))
        i += 2
    return out


def read_points3d_text(path):
    """Parse 3D points as ``(id, xyz, rgb, error, [(image_id, point2d_idx), ...])``."""
    path = Path(path)
    out = []
    for lineno, line in _data_lines(path):
        elems = line.split()
        try:
            pid = int(elems[0])
            xyz = np.array([float(x) for x in elems[1:4]])
            rgb = tuple(int(x) for x in elems[4:7])
            err = float(elems[7])
            rest = elems[8:]
            if len(rest) % 2 or len(xyz) != 3 or len(rgb) != 3:
                raise ValueError("bad column count")
            track = [(int(rest[k]), int(rest[k + 1])) for k in range(0, len(rest), 2)]
        except (ValueError, IndexError) as exc:
            raise IngestError(f"malformed point line ({exc})", path, lineno) from None
        out.append((pid, xyz, rgb, err, track))
    return out


def ingest_colmap_text(directory, features_dir=None):
    """Read ``cameras.txt``, ``images.txt`` and ``points3D.txt`` from ``directory``.

    Returns ``(images, tracks)``. Without ``features_dir`` keypoint
    descriptors are empty and labels zero; with it, each image's
    ``<name>.ocfeat`` sidecar supplies descriptors, labels, scores and the
    global descriptor, and its keypoints must line up with the POINTS2D list.
    """
    d = Path(directory)
    files = {k: d / f"{k}.txt" for k in ("cameras", "images", "points3D")}
    for k, p in files.items():
        if not p.is_file():
            raise IngestError(f"missing {p.name}", p)
    cams = read_cameras_text(files["cameras"])
    images = []
    for image_id, q, t, cam_id, name, xy, _ in read_images_text(files["images"]):
        if cam_id not in cams:
            raise IngestError(f"image {name} references unknown camera {cam_id}", files["images"])
        pose = Pose(q, t)
        n = len(xy)
        if features_dir is not None:
            sxy, desc, labels, scores, gd = read_features(Path(features_dir) / f"{name}.ocfeat")
            if len(sxy) != n:
                raise IngestError(f"sidecar has {len(sxy)} keypoints, model has {n}", name)
            if n and np.max(np.abs(sxy - xy)) > 1e-2:
                raise IngestError("sidecar keypoints disagree with the model's POINTS2D", name)
        else:
            desc = np.zeros((n, 0), dtype=np.float32)
            labels = np.zeros(n, dtype=np.int64)
            scores = np.ones(n)
            gd = np.zeros(0, dtype=np.float32)
        images.append(ImageRecord(image_id, name, cams[cam_id], pose, xy, desc, labels, scores, gd))
    known = {im.id: im.num_keypoints for im in images}
    tracks = []
    for pid, _, rgb, _, elems in read_points3d_text(files["points3D"]):
        seen = set()
        kept = []
        for image_id, idx in elems:
            if image_id not in known or not 0 <= idx < known[image_id]:
                raise IngestError(f"point {pid} references missing observation ({image_id}, {idx})", files["points3D"])
            if image_id not in seen:
                seen.add(image_id)
                kept.append((image_id, idx))
        tracks.append(Track(tuple(kept), point_id=pid, color=rgb))
    return images, tracks


def write_colmap_text(directory, images, tracks, points=None) -> None:
    """Write a PINHOLE text model; one camera per image."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    point_of = {}
    for ti, tr in enumerate(tracks):
        pid = int(tr.point_id) if tr.point_id is not None else ti + 1
        for image_id, kp in tr.elements:
            point_of[(image_id, kp)] = pid
    with open(d / "cameras.txt", "w") as f:
        f.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for im in images:
            c = im.camera
            f.write(f"{im.id} PINHOLE {c.width} {c.height} {c.fx!r} {c.fy!r} {c.cx!r} {c.cy!r}\n")
    with open(d / "images.txt", "w") as f:
        f.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for im in images:
            vals = " ".join(repr(float(v)) for v in (*im.pose.q, *im.pose.t))
            f.write(f"{im.id} {vals} {im.id} {im.name}\n")
            f.write(" ".join(
                f"{float(x)!r} {float(y)!r} {point_of.get((im.id, k), -1)}"
                for k, (x, y) in enumerate(im.xy)
            ) + "\n")
    with open(d / "points3D.txt", "w") as f:
        f.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for ti, tr in enumerate(tracks):
            pid = int(tr.point_id) if tr.point_id is not None else ti + 1
            X = [float(v) for v in (points[ti] if points is not None else (0.0, 0.0, 0.0))]
            r, g, b = (int(c) for c in tr.color)
            el = " ".join(f"{int(i)} {int(k)}" for i, k in tr.elements)
            f.write(f"{pid} {X[0]!r} {X[1]!r} {X[2]!r} {r} {g} {b} 0.0 {el}\n")


# --- query lists and pose files --------------------------------------------

def read_query_list(path) -> list[tuple[str, PinholeCamera]]:
    """``name MODEL width height params...`` per line (SIMPLE_PINHOLE / PINHOLE)."""
    path = Path(path)
    out = []
    for lineno, line in _data_lines(path):
        elems = line.split()
        try:
            name, model = elems[0], elems[1]
            width, height = int(elems[2]), int(elems[3])
            params = [float(x) for x in elems[4:]]
        except (ValueError, IndexError) as exc:
            raise IngestError(f"malformed query line ({exc})", path, lineno) from None
        out.append((name, camera_from_model(model, width, height, params, path, lineno)))
    return out


def write_query_list(path, entries) -> None:
    with open(path, "w") as f:
        for name, c in entries:
            f.write(f"{name} PINHOLE {c.width} {c.height} {c.fx!r} {c.fy!r} {c.cx!r} {c.cy!r}\n")


def format_pose_line(name: str, pose: Pose) -> str:
    vals = " ".join(repr(float(v)) for v in (*pose.q, *pose.t))
    return f"{name} {vals}"


def format_failure_line(name: str, reason: str) -> str:
    return f"{name} FAILED {reason}"


def parse_pose_line(line: str, path=None, lineno=None):
    """Returns ``(name, Pose)`` or ``(name, None)`` for a failure line."""
    elems = line.split()
    if len(elems) >= 2 and elems[1] == "FAILED":
        return elems[0], None
    if len(elems) != 8:
        raise IngestError(f"expected 'name qw qx qy qz tx ty tz', got {len(elems)} fields", path, lineno)
    try:
        vals = np.array([float(x) for x in elems[1:]])
    except ValueError as exc:
        raise IngestError(f"non-numeric pose field ({exc})", path, lineno) from None
    q = vals[:4]
    n = np.linalg.norm(q)
    if not np.all(np.isfinite(vals)) or abs(n - 1.0) > 1e-3:
        raise IngestError(f"quaternion norm {n:.6g} is not 1", path, lineno)
    return elems[0], Pose(q, vals[4:])


def read_poses(path) -> dict[str, Optional[Pose]]:
    path = Path(path)
    out: dict[str, Optional[Pose]] = {}
    for lineno, line in _data_lines(path):
        name, pose = parse_pose_line(line, path, lineno)
        if name in out:
            raise IngestError(f"duplicate entry for {name}", path, lineno)
        out[name] = pose
    return out


def write_poses(path, poses: dict) -> None:
    """Write poses sorted by name; ``None`` or a string value marks a failure."""
    with open(path, "w") as f:
        for name in sorted(poses):
            p = poses[name]
            if isinstance(p, Pose):
                f.write(format_pose_line(name, p) + "\n")
            else:
                f.write(format_failure_line(name, p or "unknown") + "\n")
