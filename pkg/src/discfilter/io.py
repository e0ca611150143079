"""Files: experiment configs, binary matrices, dataset folders, CSV and SVG.

Matrix files (``.dfm``) hold the magic ``DFM1``, the row and column counts
as little-endian uint64 and then the entries as little-endian float64 in
row-major order. Floats in text files are written with ``repr`` so that they
read back bit for bit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dns import DATASET_TABLE, InitialConditionSpec, NoiseMode, SnapshotSet, SolverConfig
from .filterbank import FilterKind, FilterSpec
from .inference import DEFAULT_LAMBDA_GRID, OptimizerConfig

MAGIC = b"DFM1"
_HEADER = np.dtype([("rows", "<u8"), ("cols", "<u8")])


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the line or field."""


class MatrixFormatError(ValueError):
    """A matrix file that does not follow the DFM1 layout."""


# Matrices --------------------------------------------------------------------

def write_matrix(path, mat) -> None:
    mat = np.asarray(mat, dtype="<f8")
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2:
        raise ValueError("only 1D or 2D arrays can be stored")
    header = np.array([(mat.shape[0], mat.shape[1])], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(mat).tobytes())


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise MatrixFormatError(f"{path}: not a DFM1 matrix file")
    if len(data) < 20:
        raise MatrixFormatError(f"{path}: truncated header")
    header = np.frombuffer(data, dtype=_HEADER, count=1, offset=4)[0]
    rows, cols = int(header["rows"]), int(header["cols"])
    if len(data) != 20 + 8 * rows * cols:
        raise MatrixFormatError(f"{path}: expected {20 + 8 * rows * cols} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=20).reshape(rows, cols).astype(float)


# Key = value text ------------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (list, tuple)):
        return ", ".join(fmt(v) for v in x)
    if isinstance(x, (FilterKind, NoiseMode)):
        return x.value
    return str(x)


def parse_pairs(text: str, source: str = "<config>") -> list:
    """``[(line number, key, value)]`` from ``key = value`` lines with ``#`` comments."""
    out = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{no}: missing key")
        out.append((no, key, value))
    return out


def write_manifest(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k} = {fmt(v)}\n" for k, v in items.items()))


def read_manifest(path) -> dict:
    return {k: v for _, k, v in parse_pairs(Path(path).read_text(), str(path))}


# Experiment configuration ----------------------------------------------------

def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _pairs(s):
    out = []
    for item in s.split(","):
        if item.strip():
            lp, ls = item.split(":")
            out.append((float(lp), float(ls)))
    return tuple(out)


def _fmt_pairs(pairs):
    return ", ".join(f"{fmt(lp)}:{fmt(ls)}" for lp, ls in pairs)


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class ExperimentConfig:
    """All settings of a run. Dataset sizes default to the standard table."""

    N: int = 1000
    M: tuple = (100,)
    filters: tuple = ("tophat",)
    h0: float = 1 / 50
    radius_profile: str = "sinusoidal"
    z_max: int = 1
    max_frequency: int = 250
    noise_std: float = 1 / math.sqrt(5)
    noise: str = "per_wave"
    seed: int = 0
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    max_steps: int = 10_000_000
    eval_solver: str = "exponential"
    train_n_ic: int = DATASET_TABLE["train"][0]
    train_n_t: int = DATASET_TABLE["train"][1]
    train_T: float = DATASET_TABLE["train"][2]
    valid_n_ic: int = DATASET_TABLE["valid"][0]
    valid_n_t: int = DATASET_TABLE["valid"][1]
    valid_T: float = DATASET_TABLE["valid"][2]
    test_n_ic: int = DATASET_TABLE["test"][0]
    test_n_t: int = DATASET_TABLE["test"][1]
    test_T: float = DATASET_TABLE["test"][2]
    long_n_ic: int = DATASET_TABLE["long"][0]
    long_n_t: int = DATASET_TABLE["long"][1]
    long_T: float = DATASET_TABLE["long"][2]
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    routes: tuple = ("intrusive", "df")
    embedded_pairs: tuple = ((1e-12, 1e-12), (1e-12, 1e-11))
    iterations: int = 10_000
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    optimizer_seed: int = 0
    steps_per_unit: int = 0  # 0 means 4 M
    output: str = "out"

    _LISTS = {"M": _ints, "filters": lambda s: tuple(v.strip() for v in s.split(",") if v.strip()),
              "lambda_grid": _floats, "embedded_pairs": _pairs,
              "routes": lambda s: tuple(v.strip() for v in s.split(",") if v.strip())}

    def __post_init__(self):
        self.validate()

    # parsing / serialization
    @classmethod
    def _parse_value(cls, key, raw):
        if key in cls._LISTS:
            return cls._LISTS[key](raw)
        kind = type(cls.__dataclass_fields__[key].default)
        return _bool(raw) if kind is bool else kind(raw)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>",
                  overrides: dict | None = None) -> "ExperimentConfig":
        """Parse a config; ``overrides`` (key -> raw string) win over the text."""
        entries = [(f"{source}:{no}", key, raw) for no, key, raw in parse_pairs(text, source)]
        seen = set()
        for where, key, _ in entries:
            if key in seen:
                raise ConfigError(f"{where}: duplicate key {key!r}")
            seen.add(key)
        entries += [(f"override {key}", key, raw) for key, raw in (overrides or {}).items()]
        values, origin = {}, {}
        for where, key, raw in entries:
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"{where}: unknown key {key!r}")
            try:
                values[key] = cls._parse_value(key, raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
            origin[key] = where
        try:
            return cls(**values)
        except ConfigError as exc:
            key = getattr(exc, "field", None)
            raise ConfigError(f"{origin.get(key, source)}: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out.append(f"{f.name} = {_fmt_pairs(val) if f.name == 'embedded_pairs' else fmt(val)}")
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    # validation
    def _fail(self, key, msg):
        err = ConfigError(f"field {key!r}: {msg}")
        err.field = key
        raise err

    def validate(self):
        if self.N < 7:
            self._fail("N", "fine grid needs at least 7 points")
        if not self.M or any(m < 7 or m > self.N for m in self.M):
            self._fail("M", f"coarse sizes must lie in [7, N = {self.N}]")
        for name in self.filters:
            if name not in {k.value for k in FilterKind} | {"none"}:
                self._fail("filters", f"unknown filter {name!r}")
        if self.h0 <= 0:
            self._fail("h0", "must be positive")
        if self.z_max < 1:
            self._fail("z_max", "must be at least 1")
        if self.radius_profile not in ("sinusoidal", "constant"):
            self._fail("radius_profile", "must be 'sinusoidal' or 'constant'")
        if self.max_frequency < 0 or 2 * self.max_frequency >= self.N:
            self._fail("max_frequency", f"need 0 <= K and 2 K < N = {self.N}")
        if self.noise not in {m.value for m in NoiseMode}:
            self._fail("noise", "must be 'per_wave' or 'per_condition'")
        if self.noise_std < 0:
            self._fail("noise_std", "must be non-negative")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            self._fail("abs_tol" if self.abs_tol <= 0 else "rel_tol", "must be positive")
        if self.max_steps < 1:
            self._fail("max_steps", "must be positive")
        if self.eval_solver not in ("adaptive", "exponential", "rk4"):
            self._fail("eval_solver", "must be 'adaptive', 'exponential' or 'rk4'")
        for ds in ("train", "valid", "test", "long"):
            if getattr(self, f"{ds}_n_ic") < 1 or getattr(self, f"{ds}_n_t") < 1:
                self._fail(f"{ds}_n_ic", "dataset sizes must be positive")
            if getattr(self, f"{ds}_T") < 0:
                self._fail(f"{ds}_T", "final time must be non-negative")
        if not self.lambda_grid or min(self.lambda_grid) < 0:
            self._fail("lambda_grid", "needs at least one non-negative value")
        for r in self.routes:
            if r not in ("baseline", "intrusive", "df", "embedded"):
                self._fail("routes", f"unknown route {r!r}")
        if any(min(p) < 0 for p in self.embedded_pairs):
            self._fail("embedded_pairs", "weights must be non-negative")
        try:
            self.optimizer()
        except ValueError as exc:
            self._fail("iterations", str(exc))
        if self.steps_per_unit < 0:
            self._fail("steps_per_unit", "must be non-negative")

    # views
    def dataset_size(self, name: str):
        if name not in DATASET_TABLE:
            raise ConfigError(f"unknown dataset {name!r}")
        return (getattr(self, f"{name}_n_ic"), getattr(self, f"{name}_n_t"),
                getattr(self, f"{name}_T"))

    def filter_spec(self, name: str | None = None) -> FilterSpec:
        """Filter named ``name`` (default: the first one); ``none`` is not a kernel."""
        return FilterSpec(FilterKind(name or self.filters[0]), self.h0,
                          self.radius_profile, self.z_max)

    def ic_spec(self) -> InitialConditionSpec:
        return InitialConditionSpec(self.max_frequency, self.noise_std, self.seed,
                                    noise=NoiseMode(self.noise))

    def solver(self) -> SolverConfig:
        return SolverConfig(self.abs_tol, self.rel_tol, self.max_steps)

    def eval_config(self) -> SolverConfig:
        return SolverConfig(self.abs_tol, self.rel_tol, self.max_steps,
                            method=self.eval_solver)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.iterations, self.step_size, self.beta1, self.beta2,
                               self.adam_eps, self.batch_size, self.optimizer_seed,
                               self.steps_per_unit or None)


# Dataset folders -------------------------------------------------------------

_PARTS = ("U", "Udot", "Ubar", "Ubar_dot")


def save_dataset(folder, ds: SnapshotSet, extra: dict | None = None) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    for part in _PARTS:
        mat = getattr(ds, part)
        if mat is not None:
            write_matrix(folder / f"{part}.dfm", mat)
    write_matrix(folder / "times.dfm", ds.times)
    items = {"name": ds.name, "seed": ds.seed, "n_IC": ds.n_IC, "n_t": ds.n_t,
             "M": ds.M, "N": ds.U.shape[0] if ds.U is not None else ds.meta.get("N", 0),
             "d": ds.d, "columns": "trajectory-major (column = ic * n_t + time index)",
             "times": ", ".join(repr(float(t)) for t in ds.times)}
    items.update({k: v for k, v in ds.meta.items() if k not in items})
    items.update(extra or {})
    write_manifest(folder / "manifest.txt", items)


def load_dataset(folder, need_fine: bool = False) -> SnapshotSet:
    folder = Path(folder)
    if not (folder / "manifest.txt").is_file():
        raise FileNotFoundError(f"{folder}: no manifest.txt (not a dataset folder)")
    man = read_manifest(folder / "manifest.txt")
    mats = {}
    for part in _PARTS:
        path = folder / f"{part}.dfm"
        if path.is_file():
            mats[part] = read_matrix(path)
        elif part.startswith("Ubar") or need_fine:
            raise FileNotFoundError(f"{path}: missing")
        else:
            mats[part] = None
    times = read_matrix(folder / "times.dfm")[0]
    meta = {k: man[k] for k in ("N", "M", "T", "K", "filter") if k in man}
    return SnapshotSet(mats["U"], mats["Udot"], mats["Ubar"], mats["Ubar_dot"], times,
                       int(man["n_IC"]), int(man["n_t"]), man.get("name", folder.name),
                       int(man.get("seed", 0)), meta)


# CSV and SVG -----------------------------------------------------------------

def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:] if line]


def write_curve_csv(path, curve) -> None:
    write_csv(path, ("time", "error"), zip(map(float, curve.times), map(float, curve.errors)))


SWEEP_HEADER = ("filter", "route", "M", "lambda_prior", "lambda_stab", "avg_error")
GRID_HEADER = ("lambda_prior", "lambda_stab", "valid_error")


def write_sweep_csv(path, sweep) -> None:
    write_csv(path, SWEEP_HEADER, ([r["filter"], r["route"], int(r["M"]),
                                    float(r["lambda_prior"]), float(r["lambda_stab"]),
                                    float(r["avg_error"])] for r in sweep.rows))


def write_grid_csv(path, table) -> None:
    write_csv(path, GRID_HEADER, ([float(r[k]) for k in GRID_HEADER] for r in table))


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_svg(path, series: dict, *, log_y: bool = True, title: str = "",
              xlabel: str = "", ylabel: str = "", width: int = 640, height: int = 420) -> None:
    """Line plot with one polyline per series; non-finite points break the line."""
    pad_l, pad_r, pad_t, pad_b = 70, 120, 30, 45
    xs, ys = [], []
    for x, y in series.values():
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(y) & (y > 0 if log_y else True)
        xs.append(x[ok])
        ys.append(np.log10(y[ok]) if log_y else y[ok])
    allx = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ally = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    if allx.size == 0:
        allx, ally = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if log_y:
        y0, y1 = math.floor(y0), math.ceil(y1)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def py(y):
        return pad_t + (1 - (y - y0) / (y1 - y0)) * ph

    el = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
          f'font-family="sans-serif" font-size="12">',
          f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" '
          f'stroke="black"/>']
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        el.append(f'<text x="{px(xv):.1f}" y="{height - pad_b + 16}" '
                  f'text-anchor="middle">{xv:.3g}</text>')
    ticks = range(int(y0), int(y1) + 1) if log_y else [y0 + (y1 - y0) * k / 4 for k in range(5)]
    for yv in ticks:
        label = f"1e{int(yv)}" if log_y else f"{yv:.3g}"
        el.append(f'<text x="{pad_l - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{label}</text>')
    if title:
        el.append(f'<text x="{width / 2}" y="18" text-anchor="middle">{title}</text>')
    if xlabel:
        el.append(f'<text x="{pad_l + pw / 2}" y="{height - 8}" '
                  f'text-anchor="middle">{xlabel}</text>')
    if ylabel:
        el.append(f'<text x="14" y="{pad_t + ph / 2}" text-anchor="middle" '
                  f'transform="rotate(-90 14 {pad_t + ph / 2})">{ylabel}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(y) & (y > 0 if log_y else True)
        yt = np.where(ok, np.log10(np.where(ok, y, 1.0)) if log_y else y, np.nan)
        runs, run = [], []
        for xv, yv, good in zip(x, yt, ok):
            if good:
                run.append(f"{px(xv):.2f},{py(yv):.2f}")
            elif run:
                runs.append(run)
                run = []
        runs += [run] if run else []
        for run in runs:
            el.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                      f'points="{" ".join(run)}"/>')
        ly = pad_t + 14 + 16 * i
        el.append(f'<line x1="{width - pad_r + 8}" y1="{ly - 4}" x2="{width - pad_r + 28}" '
                  f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        el.append(f'<text x="{width - pad_r + 32}" y="{ly}">{name}</text>')
    el.append("</svg>")
    Path(path).write_text("\n".join(el) + "\n")
