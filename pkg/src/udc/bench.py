"""File ingestion (TSPLib EUC_2D subset, instance JSON), benchmark runner and reports."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import re
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnet
from .conquer.exact import exact_kp, shortest_paths_over_subsets
from .model import Models, file_hash
from .problems import Instance, Kind, evaluate_objective, gap
from .solve import SolveConfig, solve


class TsplibError(ValueError):
    pass


class BenchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# TSPLib

HEADER_KEYS = frozenset({"NAME", "TYPE", "COMMENT", "DIMENSION", "EDGE_WEIGHT_TYPE"})
_HEADER_RE = re.compile(r"^([A-Z_]+)\s*:\s*(.*?)\s*$")


@dataclass
class TsplibInstance:
    """A parsed file: the unit-square instance plus the affine map back to file units."""

    name: str
    instance: Instance
    scale: float
    origin: tuple[float, float]

    def original_coords(self) -> np.ndarray:
        return self.instance.coords * self.scale + np.asarray(self.origin)

    def unscale(self, length: float) -> float:
        return length * self.scale


def parse_tsplib(path: str | Path) -> TsplibInstance:
    return parse_tsplib_text(Path(path).read_text(), Path(path).stem)


def parse_tsplib_text(text: str, default_name: str = "tsplib") -> TsplibInstance:
    header: dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i].strip()
        i += 1
        if not raw:
            continue
        if raw == "NODE_COORD_SECTION":
            break
        m = _HEADER_RE.match(raw)
        if m is None:
            raise TsplibError(f"line {i}: malformed header line {raw!r}")
        key, value = m.groups()
        if key not in HEADER_KEYS:
            raise TsplibError(f"line {i}: unsupported header key {key}")
        if key in header:
            raise TsplibError(f"line {i}: duplicate header key {key}")
        header[key] = value
    else:
        raise TsplibError("missing NODE_COORD_SECTION")

    for key in ("TYPE", "DIMENSION", "EDGE_WEIGHT_TYPE"):
        if key not in header:
            raise TsplibError(f"missing {key} header")
    if header["TYPE"] != "TSP":
        raise TsplibError(f"unsupported TYPE {header['TYPE']!r} (only TSP)")
    if header["EDGE_WEIGHT_TYPE"] != "EUC_2D":
        raise TsplibError(f"unsupported EDGE_WEIGHT_TYPE {header['EDGE_WEIGHT_TYPE']!r} (only EUC_2D)")
    try:
        dim = int(header["DIMENSION"])
    except ValueError:
        raise TsplibError(f"DIMENSION is not an integer: {header['DIMENSION']!r}") from None
    if dim < 2:
        raise TsplibError(f"DIMENSION must be >= 2, got {dim}")

    pts = []
    for j in range(i, len(lines)):
        raw = lines[j].strip()
        if not raw:
            continue
        if raw == "EOF":
            break
        parts = raw.split()
        try:
            if len(parts) != 3:
                raise ValueError
            idx, x, y = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError:
            raise TsplibError(f"line {j + 1}: malformed coordinate line {raw!r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise TsplibError(f"line {j + 1}: non-finite coordinate")
        if idx != len(pts) + 1:
            raise TsplibError(f"line {j + 1}: expected node index {len(pts) + 1}, got {idx}")
        pts.append((x, y))
    if len(pts) != dim:
        raise TsplibError(f"DIMENSION is {dim} but {len(pts)} coordinates were given")

    xy = np.asarray(pts, dtype=np.float64)
    origin = xy.min(0)
    span = float((xy.max(0) - origin).max())
    scale = span if span > 0 else 1.0
    inst = Instance(Kind.TSP, dim, coords=(xy - origin) / scale)
    return TsplibInstance(header.get("NAME", default_name), inst, scale, (float(origin[0]), float(origin[1])))


def format_tsplib(name: str, coords: np.ndarray) -> str:
    out = io.StringIO()
    out.write(f"NAME : {name}\nTYPE : TSP\nDIMENSION : {len(coords)}\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n")
    for i, (x, y) in enumerate(np.asarray(coords, dtype=np.float64).tolist(), start=1):
        out.write(f"{i} {x!r} {y!r}\n")
    out.write("EOF\n")
    return out.getvalue()


def write_tsplib(path: str | Path, name: str, coords: np.ndarray) -> None:
    Path(path).write_text(format_tsplib(name, coords))


# ---------------------------------------------------------------------------
# Test sets


@dataclass
class BenchItem:
    name: str
    instance: Instance
    reference: float | None = None
    scale: float = 1.0  # multiply internal objectives to report file units


def load_test_set(path: str | Path) -> list[BenchItem]:
    """Read a JSON test set, a ``.tsp`` file, or a directory holding either."""
    path = Path(path)
    if not path.exists():
        raise BenchError(f"test set not found: {path}")
    if path.is_dir():
        items: list[BenchItem] = []
        for p in sorted(path.iterdir()):
            if p.suffix in (".json", ".tsp"):
                items.extend(load_test_set(p))
        return items
    if path.suffix == ".tsp":
        t = parse_tsplib(path)
        return [BenchItem(t.name, t.instance, None, t.scale)]
    data = json.loads(path.read_text())
    if isinstance(data, dict):
        data = data.get("instances", [data])
    items = []
    for k, entry in enumerate(data):
        name = entry.get("name", f"{path.stem}-{k}")
        ref = entry.get("reference")
        items.append(BenchItem(name, Instance.from_dict(entry), None if ref is None else float(ref)))
    return items


def write_test_set(path: str | Path, instances: list[Instance], names: list[str] | None = None) -> None:
    rows = []
    for k, inst in enumerate(instances):
        d = inst.to_dict()
        d["name"] = names[k] if names else f"{inst.kind.value}{inst.n}-{k}"
        rows.append(d)
    Path(path).write_text(json.dumps({"instances": rows}))


def exact_reference(inst: Instance) -> float | None:
    """Optimal objective for tiny TSP and KP instances; None when out of reach."""
    if inst.kind is Kind.TSP and inst.n <= 12:
        d = inst.coords[:, None, :] - inst.coords[None, :, :]
        D = np.sqrt((d * d).sum(-1))
        cand = list(range(1, inst.n))
        best, _ = shortest_paths_over_subsets(D, 0, cand)
        return float((best[(1 << len(cand)) - 1] + D[cand, 0]).min())
    if inst.kind is Kind.KP and inst.n <= 30:
        picked = exact_kp(inst.values, inst.weights, inst.capacity)
        return float(inst.values[picked].sum())
    return None


# ---------------------------------------------------------------------------
# Runner and report

CSV_COLUMNS = ("name", "kind", "n", "objective", "reference", "gap_pct")


@dataclass
class ReportRow:
    name: str
    kind: str
    n: int
    objective: float
    reference: float | None
    gap_pct: float | None
    wall_ms: float


@dataclass
class RunReport:
    rows: list[ReportRow]
    config_hash: str
    checkpoint_hash: str | None
    config: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        def stats(xs):
            xs = [x for x in xs if x is not None]
            if not xs:
                return {"mean": None, "std": None}
            return {"mean": statistics.fmean(xs), "std": statistics.pstdev(xs)}

        return {
            "count": len(self.rows),
            "objective": stats([r.objective for r in self.rows]),
            "gap_pct": stats([r.gap_pct for r in self.rows]),
            "wall_ms": stats([r.wall_ms for r in self.rows]),
        }

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "config": self.config,
            "rows": [r.__dict__ for r in self.rows],
            "aggregate": self.aggregate(),
        }

    def to_csv(self) -> str:
        # timing is left out so that equal seeds give byte-identical files
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.name, r.kind, r.n, repr(r.objective), _opt(r.reference), _opt(r.gap_pct)])
        return out.getvalue()

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        j, c = out / "report.json", out / "report.csv"
        j.write_text(json.dumps(self.to_dict(), indent=2))
        c.write_text(self.to_csv())
        return j, c


def _opt(x) -> str:
    return "" if x is None else repr(x)


def pool_size() -> int:
    try:
        return max(1, int(os.environ.get("UDC_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class BenchConfig:
    test_set: str
    out_dir: str
    checkpoint: str | None = None
    solve: SolveConfig = field(default_factory=SolveConfig)
    exact_references: bool = True


def run_benchmark(cfg: BenchConfig) -> RunReport:
    items = load_test_set(cfg.test_set)
    models = None
    ck_hash = None
    if cfg.checkpoint is not None:
        if not Path(cfg.checkpoint).exists():
            raise BenchError(f"checkpoint not found: {cfg.checkpoint}")
        models = Models.load(cfg.checkpoint)
        ck_hash = file_hash(cfg.checkpoint)

    def run(item: BenchItem) -> ReportRow:
        inst = item.instance
        res = solve(inst, models, cfg.solve)
        obj = evaluate_objective(inst, res.best) * item.scale
        ref = item.reference
        if ref is None and cfg.exact_references:
            r = exact_reference(inst)
            ref = None if r is None else r * item.scale
        g = gap(obj, ref, inst.sense) if ref is not None and ref > 0 else None
        return ReportRow(item.name, inst.kind.value, inst.n, obj, ref, g, round(res.wall_ms, 3))

    with ThreadPoolExecutor(max_workers=pool_size()) as pool:
        rows = list(pool.map(run, items))
    conf = {"solve": cfg.solve.to_dict(), "test_set": str(cfg.test_set), "exact_references": cfg.exact_references}
    report = RunReport(rows, nnet.config_hash(conf), ck_hash, conf)
    report.write(cfg.out_dir)
    return report
