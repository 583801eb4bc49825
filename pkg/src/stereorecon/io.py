"""File interchange: PLY clouds, images, depth maps, trajectories, graphs.

Every writer/reader pair round-trips losslessly at its declared precision
(PLY stores float32; trajectories store 17 significant digits). Readers
never crash on malformed input: they raise ParseError carrying the line
number or byte offset of the offending content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .cloud import DepthMap, PointCloud
from .errors import InvalidParameter, IoFailure, ParseError, UnsupportedFormat
from .geom import RigidTransform
from .posegraph import PoseEdge, PoseGraph
from .stereo import GrayImage

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


# ---------------------------------------------------------------------------
# PLY


def write_ply(cloud: PointCloud, path, encoding: str = "binary_little_endian") -> None:
    """Write vertices as float32 x,y,z plus optional normals and colors.

    Raises:
        InvalidParameter: unknown encoding.
        IoFailure: the file could not be written.
    """
    if encoding not in ("ascii", "binary_little_endian"):
        raise InvalidParameter(f"unsupported encoding {encoding!r}")

    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = [
        "ply",
        f"format {encoding} 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if cloud.has_normals:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
        header += ["property float nx", "property float ny", "property float nz"]
    if cloud.has_colors:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")

    rows = np.zeros(len(cloud), dtype=np.dtype(fields))
    for axis, name in enumerate("xyz"):
        rows[name] = cloud.positions[:, axis].astype(np.float32)
    if cloud.has_normals:
        for axis, name in enumerate(("nx", "ny", "nz")):
            rows[name] = cloud.normals[:, axis].astype(np.float32)
    if cloud.has_colors:
        quantized = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        for axis, name in enumerate(("red", "green", "blue")):
            rows[name] = quantized[:, axis]

    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if encoding == "binary_little_endian":
                fh.write(rows.tobytes())
            else:
                for row in rows:
                    parts = [_format_f32(row[name]) for name, kind in fields if kind == "<f4"]
                    parts += [str(int(row[name])) for name, kind in fields if kind == "u1"]
                    fh.write((" ".join(parts) + "\n").encode("ascii"))
    except OSError as err:
        raise IoFailure(f"cannot write {path}: {err}") from err


def _format_f32(value) -> str:
    # 9 significant digits round-trip any float32 exactly.
    return f"{float(value):.9g}"


def _parse_ply_header(fh):
    line_no = 0

    def next_line():
        nonlocal line_no
        raw = fh.readline()
        if not raw:
            raise ParseError("unexpected end of header", line=line_no)
        line_no += 1
        return raw.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise ParseError("not a PLY file (missing 'ply' magic)", line=1)
    encoding = None
    elements = []  # (name, count, [(prop name, dtype code or None for lists)])
    while True:
        line = next_line()
        if line == "end_header":
            break
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        tokens = line.split()
        if tokens[0] == "format":
            if len(tokens) != 3:
                raise ParseError("malformed format line", line=line_no)
            if tokens[1] == "binary_big_endian":
                raise UnsupportedFormat("big-endian PLY is not supported")
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unknown PLY format {tokens[1]!r}", line=line_no)
            encoding = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise ParseError("malformed element line", line=line_no)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=line_no)
            if tokens[1] == "list":
                elements[-1][2].append((tokens[-1], None))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                    raise ParseError(f"unsupported property type in {line!r}", line=line_no)
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise ParseError(f"unexpected header line {line!r}", line=line_no)
    if encoding is None:
        raise ParseError("header has no format line", line=line_no)
    return encoding, elements, line_no


def _cloud_from_columns(columns: dict[str, np.ndarray]) -> PointCloud:
    for name in ("x", "y", "z"):
        if name not in columns:
            raise ParseError(f"vertex element lacks property {name!r}")
    positions = np.column_stack(
        [columns["x"], columns["y"], columns["z"]]
    ).astype(np.float64)
    normals = None
    if all(n in columns for n in ("nx", "ny", "nz")):
        normals = np.column_stack(
            [columns["nx"], columns["ny"], columns["nz"]]
        ).astype(np.float64)
    colors = None
    if all(c in columns for c in ("red", "green", "blue")):
        colors = np.column_stack(
            [columns["red"], columns["green"], columns["blue"]]
        ).astype(np.float64) / 255.0
    try:
        return PointCloud(positions, normals, colors)
    except InvalidParameter as err:
        raise ParseError(f"invalid vertex data: {err}") from err


def read_ply(path) -> PointCloud:
    """Read ascii or binary_little_endian PLY; unknown properties skipped.

    Raises:
        ParseError: malformed header or truncated/garbled body, with the
            offending line (ascii) or byte offset (binary).
        UnsupportedFormat: big-endian files or variable-length properties
            in a binary body.
    """
    try:
        fh = open(path, "rb")
    except OSError as err:
        raise IoFailure(f"cannot open {path}: {err}") from err
    with fh:
        encoding, elements, header_lines = _parse_ply_header(fh)
        vertex_columns: dict[str, np.ndarray] = {}
        line_no = header_lines
        for name, count, props in elements:
            if encoding == "ascii":
                rows = []
                for _ in range(count):
                    raw = fh.readline()
                    line_no += 1
                    if not raw:
                        raise ParseError("truncated PLY body", line=line_no)
                    rows.append(raw.split())
                if name != "vertex":
                    continue
                if any(code is None for _, code in props):
                    raise UnsupportedFormat(
                        "list properties on the vertex element are not supported"
                    )
                width = len(props)
                columns: dict[str, np.ndarray] = {}
                data = np.empty((count, width), dtype=np.float64)
                for r, tokens in enumerate(rows):
                    if len(tokens) != width:
                        raise ParseError(
                            f"expected {width} values, got {len(tokens)}",
                            line=header_lines + r + 1,
                        )
                    try:
                        data[r] = [float(t) for t in tokens]
                    except ValueError:
                        raise ParseError(
                            "malformed number in vertex row",
                            line=header_lines + r + 1,
                        ) from None
                for column, (prop_name, code) in enumerate(props):
                    # honor the declared storage type (float properties are
                    # float32, so ascii and binary round-trips agree)
                    columns[prop_name] = data[:, column].astype(code or "f8")
                vertex_columns = columns
            else:
                if any(code is None for _, code in props):
                    raise UnsupportedFormat(
                        "variable-length properties in binary PLY are not supported"
                    )
                dtype = np.dtype([(p, "<" + code) for p, code in props])
                payload = fh.read(dtype.itemsize * count)
                if len(payload) != dtype.itemsize * count:
                    raise ParseError("truncated PLY body", offset=fh.tell())
                if name != "vertex":
                    continue
                rows = np.frombuffer(payload, dtype=dtype)
                vertex_columns = {p: rows[p] for p, _ in props}
        if not elements or all(name != "vertex" for name, _, _ in elements):
            raise ParseError("PLY file has no vertex element")
    return _cloud_from_columns(vertex_columns)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class TrajectoryFile:
    """Ordered (frame id, pose) pairs."""

    entries: tuple[tuple[int, RigidTransform], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def poses(self) -> list[RigidTransform]:
        return [pose for _, pose in self.entries]


def write_trajectory(trajectory: TrajectoryFile, path) -> None:
    """One line per pose: id then the 16 row-major matrix entries."""
    try:
        with open(path, "w", encoding="ascii") as fh:
            for frame_id, pose in trajectory.entries:
                values = " ".join(f"{v:.17g}" for v in pose.as_matrix().ravel())
                fh.write(f"{frame_id} {values}\n")
    except OSError as err:
        raise IoFailure(f"cannot write {path}: {err}") from err


def read_trajectory(path) -> TrajectoryFile:
    """Parse the trajectory text format; '#' starts a comment.

    Poses are re-orthonormalized on ingest when within 1e-6 of a valid
    rotation, and rejected beyond that.
    """
    try:
        fh = open(path, "r", encoding="ascii")
    except OSError as err:
        raise IoFailure(f"cannot open {path}: {err}") from err
    entries = []
    with fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) != 17:
                raise ParseError(
                    f"expected id + 16 matrix entries, got {len(tokens)} tokens",
                    line=line_no,
                )
            try:
                frame_id = int(tokens[0])
                values = np.array([float(t) for t in tokens[1:]]).reshape(4, 4)
            except ValueError:
                raise ParseError("malformed number", line=line_no) from None
            try:
                pose = RigidTransform.from_matrix(values, tol=1e-6)
            except InvalidParameter as err:
                raise ParseError(str(err), line=line_no) from err
            entries.append((frame_id, pose))
    return TrajectoryFile(tuple(entries))


# ---------------------------------------------------------------------------
# Pose graphs


def _upper_triangle(matrix: np.ndarray) -> np.ndarray:
    return matrix[np.triu_indices(6)]


def _from_upper_triangle(values: np.ndarray) -> np.ndarray:
    out = np.zeros((6, 6))
    out[np.triu_indices(6)] = values
    return out + np.triu(out, 1).T


def write_pose_graph(graph: PoseGraph, path) -> None:
    """Line-oriented text: NODE and EDGE records."""
    try:
        with open(path, "w", encoding="ascii") as fh:
            for node_id, node in enumerate(graph.nodes):
                values = " ".join(f"{v:.17g}" for v in node.as_matrix().ravel())
                fh.write(f"NODE {node_id} {values}\n")
            for edge in graph.edges:
                pose = " ".join(f"{v:.17g}" for v in edge.measurement.as_matrix().ravel())
                info = " ".join(f"{v:.17g}" for v in _upper_triangle(edge.information))
                fh.write(f"EDGE {edge.i} {edge.j} {edge.kind} {pose} {info}\n")
    except OSError as err:
        raise IoFailure(f"cannot write {path}: {err}") from err


def read_pose_graph(path) -> PoseGraph:
    try:
        fh = open(path, "r", encoding="ascii")
    except OSError as err:
        raise IoFailure(f"cannot open {path}: {err}") from err
    nodes: list[RigidTransform] = []
    edges: list[PoseEdge] = []
    with fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                if tokens[0] == "NODE":
                    if len(tokens) != 18:
                        raise ParseError("NODE needs id + 16 entries", line=line_no)
                    node_id = int(tokens[1])
                    if node_id != len(nodes):
                        raise ParseError(
                            f"NODE ids must be consecutive, got {node_id}", line=line_no
                        )
                    matrix = np.array([float(t) for t in tokens[2:]]).reshape(4, 4)
                    nodes.append(RigidTransform.from_matrix(matrix, tol=1e-6))
                elif tokens[0] == "EDGE":
                    if len(tokens) != 4 + 16 + 21:
                        raise ParseError(
                            "EDGE needs i j kind + 16 pose + 21 information entries",
                            line=line_no,
                        )
                    i, j, kind = int(tokens[1]), int(tokens[2]), tokens[3]
                    matrix = np.array([float(t) for t in tokens[4:20]]).reshape(4, 4)
                    info = _from_upper_triangle(np.array([float(t) for t in tokens[20:]]))
                    edges.append(
                        PoseEdge(i, j, RigidTransform.from_matrix(matrix, tol=1e-6), info, kind)
                    )
                else:
                    raise ParseError(f"unknown record {tokens[0]!r}", line=line_no)
            except (ValueError, InvalidParameter) as err:
                raise ParseError(str(err), line=line_no) from None
    return PoseGraph(tuple(nodes), tuple(edges))


# ---------------------------------------------------------------------------
# Images and depth maps


def _read_pnm(path, magic_expected):
    with open(path, "rb") as fh:
        tokens = []
        while len(tokens) < 4:
            raw = fh.readline()
            if not raw:
                raise ParseError("truncated PNM header", offset=fh.tell())
            stripped = raw.split(b"#", 1)[0]
            tokens.extend(stripped.split())
        magic, width, height, maxval = tokens[:4]
        if magic != magic_expected:
            raise ParseError(f"expected {magic_expected.decode()} file, got {magic.decode()!r}")
        try:
            width, height, maxval = int(width), int(height), int(maxval)
        except ValueError:
            raise ParseError("malformed PNM header") from None
        channels = 3 if magic_expected == b"P6" else 1
        count = width * height * channels
        sample_dtype = np.dtype(">u2" if maxval > 255 else "u1")
        data = np.frombuffer(fh.read(count * sample_dtype.itemsize), dtype=sample_dtype)
        if data.size != count:
            raise ParseError("truncated PNM pixel data", offset=fh.tell())
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape).astype(np.float64), maxval


def _write_pgm(path, samples: np.ndarray, maxval: int = 255) -> None:
    header = f"P5\n{samples.shape[1]} {samples.shape[0]}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(samples.astype(dtype).tobytes())


def _png_array(path) -> tuple[np.ndarray, int]:
    """(samples as float64, max sample value) from an 8/16-bit PNG."""
    try:
        img = Image.open(path)
    except Image.UnidentifiedImageError as err:
        raise ParseError(f"not a decodable image: {err}") from err
    with img:
        if img.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(img, dtype=np.uint32)
            return arr.astype(np.float64), 65535
        if img.mode == "L":
            return np.asarray(img, dtype=np.float64), 255
        if img.mode == "RGB":
            return np.asarray(img, dtype=np.float64), 255
        raise UnsupportedFormat(f"unsupported PNG mode {img.mode!r}")


def read_gray(path) -> GrayImage:
    """8-bit PGM (P5) or 8/16-bit grayscale PNG, normalized to [0, 1]."""
    path = str(path)
    try:
        if path.endswith(".pgm"):
            samples, maxval = _read_pnm(path, b"P5")
        else:
            samples, maxval = _png_array(path)
            if samples.ndim == 3:
                raise UnsupportedFormat("expected grayscale image, got RGB")
    except OSError as err:
        raise IoFailure(f"cannot read {path}: {err}") from err
    return GrayImage(samples / maxval)


def write_gray(image: GrayImage, path) -> None:
    """8-bit grayscale PNG or PGM, chosen by file extension."""
    samples = np.clip(np.round(image.data * 255.0), 0, 255).astype(np.uint8)
    try:
        if str(path).endswith(".pgm"):
            _write_pgm(path, samples, maxval=255)
        else:
            Image.fromarray(samples, mode="L").save(path)
    except OSError as err:
        raise IoFailure(f"cannot write {path}: {err}") from err


def read_rgb(path) -> np.ndarray:
    """8-bit RGB PNG or PPM (P6) as (h, w, 3) floats in [0, 1]."""
    path = str(path)
    try:
        if path.endswith(".ppm"):
            samples, maxval = _read_pnm(path, b"P6")
        else:
            samples, maxval = _png_array(path)
            if samples.ndim != 3:
                raise UnsupportedFormat("expected RGB image, got grayscale")
    except OSError as err:
        raise IoFailure(f"cannot read {path}: {err}") from err
    return samples / maxval


def read_depth(path, scale: float = 1000.0) -> DepthMap:
    """16-bit PNG or PGM depth; stored sample / scale meters, 0 = invalid."""
    if scale <= 0:
        raise InvalidParameter("depth scale must be positive")
    path = str(path)
    try:
        if path.endswith(".pgm"):
            samples, _ = _read_pnm(path, b"P5")
        else:
            samples, _ = _png_array(path)
    except OSError as err:
        raise IoFailure(f"cannot read {path}: {err}") from err
    if samples.ndim != 2:
        raise UnsupportedFormat("depth images must be single channel")
    depth = samples / scale
    depth[samples == 0] = np.nan
    return DepthMap(depth)


def write_depth(depth: DepthMap, path, scale: float = 1000.0) -> None:
    """Quantize to 16 bits (invalid pixels become 0)."""
    if scale <= 0:
        raise InvalidParameter("depth scale must be positive")
    samples = np.zeros(depth.data.shape, dtype=np.uint16)
    mask = depth.valid_mask
    samples[mask] = np.clip(np.round(depth.data[mask] * scale), 1, 65535).astype(np.uint16)
    try:
        if str(path).endswith(".pgm"):
            _write_pgm(path, samples, maxval=65535)
        else:
            Image.fromarray(samples).save(path)
    except OSError as err:
        raise IoFailure(f"cannot write {path}: {err}") from err
