"""File formats and the kernel specification grammar.

Kernel specification strings::

    spec   := tensor | simple
    tensor := "tensor(" simple ("," simple)* ["," "d=" INT] ")"
    simple := NAME [":" NAME "=" NUMBER ("," NAME "=" NUMBER)*]

``tensor(k, d=3)`` is the product of three copies of ``k``; with several
factors and no ``d`` each factor acts on its own coordinate.  Family names::

    sqexp:t=            exp:theta=         matern32:theta=     matern52:theta=
    gmq:s=,eps=         sid:s=,eps=        riesz:s=            rieszlog
    negdist:s=          distind:s=         tri:theta=

All CSV numbers use the shortest decimal string that round-trips to the
same double.  Output files are written to a temporary file in the target
directory and renamed into place, so a final path never holds a partial file.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from kdesign.kernels import (
    DistanceInduced,
    Exponential,
    GeneralizedMultiquadric,
    Kernel,
    Matern32,
    Matern52,
    NegDistance,
    RieszLog,
    RieszSingular,
    ShiftedInverseDistance,
    SquaredExponential,
    TensorProduct,
    TriangularOneMinus,
)
from kdesign.measures import DiscreteSignedMeasure

FAMILIES: dict[str, tuple[type[Kernel], tuple[str, ...]]] = {
    "sqexp": (SquaredExponential, ("t",)),
    "exp": (Exponential, ("theta",)),
    "matern32": (Matern32, ("theta",)),
    "matern52": (Matern52, ("theta",)),
    "gmq": (GeneralizedMultiquadric, ("s", "eps")),
    "sid": (ShiftedInverseDistance, ("s", "eps")),
    "riesz": (RieszSingular, ("s",)),
    "rieszlog": (RieszLog, ()),
    "negdist": (NegDistance, ("s",)),
    "distind": (DistanceInduced, ("s",)),
    "tri": (TriangularOneMinus, ("theta",)),
}
_NAME_OF = {cls: name for name, (cls, _) in FAMILIES.items()}
_DIM_ITEM = re.compile(r"d\s*=\s*(\d+)$")


class KernelSpecError(ValueError):
    pass


def _parse_simple(head: str, params: list[str]) -> Kernel:
    name = head.strip().lower()
    if name not in FAMILIES:
        raise KernelSpecError(f"unknown kernel family {name!r}; known: {', '.join(FAMILIES)}")
    cls, fields = FAMILIES[name]
    values: dict[str, float] = {}
    for item in params:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in fields:
            raise KernelSpecError(f"bad parameter {item.strip()!r} for {name}; expected {fields}")
        if key in values:
            raise KernelSpecError(f"parameter {key!r} given twice for {name}")
        try:
            values[key] = float(raw)
        except ValueError:
            raise KernelSpecError(f"parameter {key!r} of {name} is not a number: {raw.strip()!r}") from None
    missing = [f for f in fields if f not in values]
    if missing:
        raise KernelSpecError(f"{name} needs parameter(s) {', '.join(missing)}")
    return cls(**values)


def _split_items(text: str) -> list[list[str]]:
    """Group comma-separated items into ``[head, params...]`` factor groups."""
    groups: list[list[str]] = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            raise KernelSpecError("empty item in kernel specification")
        if ":" in piece:
            head, _, first = piece.partition(":")
            groups.append([head, first])
        elif "=" in piece and not _DIM_ITEM.match(piece):
            if not groups:
                raise KernelSpecError(f"parameter {piece!r} before any kernel name")
            groups[-1].append(piece)
        else:
            groups.append([piece])
    return groups


def parse_kernel(spec: str) -> Kernel:
    """Kernel described by a specification string (see module docstring)."""
    text = spec.strip()
    m = re.fullmatch(r"tensor\s*\((.*)\)", text, flags=re.S)
    if m is None:
        groups = _split_items(text)
        if len(groups) != 1 or _DIM_ITEM.match(groups[0][0]):
            raise KernelSpecError(f"cannot parse kernel specification {spec!r}")
        return _parse_simple(groups[0][0], groups[0][1:])
    groups = _split_items(m.group(1))
    dim = None
    if groups and (dm := _DIM_ITEM.match(groups[-1][0])):
        dim = int(dm.group(1))
        groups = groups[:-1]
    if not groups:
        raise KernelSpecError("tensor() needs at least one factor")
    factors = tuple(_parse_simple(g[0], g[1:]) for g in groups)
    if dim is not None:
        if len(factors) != 1:
            raise KernelSpecError("d= is only allowed with a single tensor factor")
        return TensorProduct.power(factors[0], dim)
    return TensorProduct(factors)


def format_kernel(kernel: Kernel) -> str:
    """Canonical specification string; ``parse_kernel(format_kernel(k)) == k``."""
    if isinstance(kernel, TensorProduct):
        first = kernel.factors[0]
        if all(f == first for f in kernel.factors):
            return f"tensor({format_kernel(first)}, d={kernel.dim})"
        return "tensor(" + ", ".join(format_kernel(f) for f in kernel.factors) + ")"
    name = _NAME_OF.get(type(kernel))
    if name is None:
        raise KernelSpecError(f"{type(kernel).__name__} has no specification string")
    fields = FAMILIES[name][1]
    if not fields:
        return name
    return name + ":" + ",".join(f"{f}={format_number(getattr(kernel, f))}" for f in fields)


# ---------------------------------------------------------------------------
# Numbers and atomic files
# ---------------------------------------------------------------------------


def format_number(x) -> str:
    """Shortest round-trip decimal for floats, plain digits for integers."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def hex_duplicates(values: dict) -> dict:
    """``values`` plus a ``<key>_hex`` entry for every finite float."""
    out = dict(values)
    for key, v in values.items():
        if isinstance(v, float) and math.isfinite(v):
            out[f"{key}_hex"] = v.hex()
    return out


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_csv(path: str | Path, header, rows) -> None:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_number(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_json(path: str | Path, data) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_csv(path: str | Path) -> tuple[list[str] | None, np.ndarray]:
    """Header (when the first row is not numeric) and the numeric body."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = None
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        header, rows = rows[0], rows[1:]
    try:
        body = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if body.size == 0:
        raise ValueError(f"{path}: no data rows")
    return header, body.reshape(len(rows), -1)


# ---------------------------------------------------------------------------
# Designs and measures
# ---------------------------------------------------------------------------


def write_points(path: str | Path, X) -> None:
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    write_csv(path, [f"x{i + 1}" for i in range(X.shape[1])], X.tolist())


def read_points(path: str | Path) -> np.ndarray:
    header, body = read_csv(path)
    if header is not None and header[-1] == "weight":
        body = body[:, :-1]
    return body


def write_measure(path: str | Path, xi: DiscreteSignedMeasure) -> None:
    rows = np.column_stack([xi.support, xi.weights]).tolist()
    write_csv(path, [f"x{i + 1}" for i in range(xi.dim)] + ["weight"], rows)


def read_measure(path: str | Path) -> DiscreteSignedMeasure:
    header, body = read_csv(path)
    if header is None or header[-1] != "weight":
        raise ValueError(f"{path}: a measure CSV needs a final 'weight' column")
    return DiscreteSignedMeasure(body[:, :-1], body[:, -1])


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

ALGORITHMS = ("herding", "vertex-exchange", "sbq")
POLICIES = ("harmonic", "two-over-n-plus-3", "dunn", "optimal")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce one design run.

    ``candidates`` holds exactly one of ``{"sobol": m}`` (optionally with
    ``"skip"``), ``{"grid": per_axis}`` or ``{"file": path}``.  ``outputs``
    maps ``trace``, ``design``, ``metrics`` and ``summary`` to file names,
    resolved against the output directory.
    """

    kernel: str
    dim: int
    candidates: dict
    algorithm: str = "herding"
    policy: str = "harmonic"
    n_max: int = 100
    seed: int = 0
    outputs: dict = field(
        default_factory=lambda: {
            "trace": "trace.csv",
            "design": "design.csv",
            "metrics": "metrics.csv",
            "summary": "summary.json",
        }
    )

    def __post_init__(self):
        try:
            k = parse_kernel(self.kernel)
        except (KernelSpecError, ValueError) as exc:
            raise ManifestError(f"kernel: {exc}") from None
        if not isinstance(self.dim, int) or self.dim < 1:
            raise ManifestError("dim must be a positive integer")
        if k.dim is not None and k.dim != self.dim:
            raise ManifestError(f"kernel acts on dimension {k.dim}, manifest says {self.dim}")
        kinds = {"sobol", "grid", "file"} & set(self.candidates)
        if len(kinds) != 1 or not set(self.candidates) <= {"sobol", "grid", "file", "skip"}:
            raise ManifestError("candidates must hold exactly one of sobol, grid, file")
        if "skip" in self.candidates and "sobol" not in self.candidates:
            raise ManifestError("skip is only meaningful for sobol candidates")
        if self.algorithm not in ALGORITHMS:
            raise ManifestError(f"algorithm must be one of {ALGORITHMS}")
        if self.policy not in POLICIES:
            raise ManifestError(f"policy must be one of {POLICIES}")
        if not isinstance(self.n_max, int) or self.n_max < 1:
            raise ManifestError("n_max must be a positive integer")
        if not isinstance(self.seed, int):
            raise ManifestError("seed must be an integer")

    def to_json(self) -> str:
        data = asdict(self)
        data["domain"] = {"dim": data.pop("dim"), "box": [0.0, 1.0]}
        return json.dumps(data, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ManifestError("manifest must be a JSON object")
        domain = data.pop("domain", None)
        if not isinstance(domain, dict) or "dim" not in domain:
            raise ManifestError("manifest needs domain.dim")
        if domain.get("box", [0.0, 1.0]) != [0.0, 1.0]:
            raise ManifestError("only the unit box domain is supported")
        unknown = set(data) - {"kernel", "candidates", "algorithm", "policy", "n_max", "seed", "outputs"}
        if unknown:
            raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
        try:
            return cls(dim=domain["dim"], **data)
        except TypeError as exc:
            raise ManifestError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        return cls.from_json(Path(path).read_text())
