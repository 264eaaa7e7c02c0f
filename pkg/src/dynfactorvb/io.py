"""Run configuration, CSV artifacts and lambda serialization."""

from __future__ import annotations

import configparser
import csv
import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from dynfactorvb.optimizer import FitConfig
from dynfactorvb.varfamily import FactorLayout, VariationalParams

MODELS = ("dove", "wishart", "lgssm", "toy")
_SECTION = "run"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def _cell(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format_float(x)


def write_csv(path: str, rows, header: list[str] | None = None) -> None:
    """Numeric rows at 17 significant digits (integers verbatim)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def read_csv(path: str, header: bool | None = None) -> tuple[list[str] | None, np.ndarray]:
    """Parse a numeric CSV; ``header=None`` detects a non-numeric first row."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ConfigError(f"{path} is empty")
    names = None
    if header or (header is None and not _numeric(rows[0])):
        names, rows = rows[0], rows[1:]
    try:
        data = np.array([[float(x) for x in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry ({exc})") from exc
    if len({len(r) for r in rows}) > 1:
        raise ConfigError(f"{path}: ragged rows")
    return names, data.reshape(len(rows), -1)


def _numeric(row: list[str]) -> bool:
    try:
        [float(x) for x in row]
    except ValueError:
        return False
    return True


@dataclass
class RunConfig:
    model: str = "toy"
    q: int = 1
    mean_mode: str = "LD-SM"
    structure: str = "LR-S"
    fit: FitConfig = field(default_factory=FitConfig)
    output_dir: str = "out"
    seed: int = 0
    delta0: float = 0.1
    posterior_samples: int = 1000
    posterior_components: str = "static"
    tolerance: float = 1e-5
    data: dict = field(default_factory=dict)
    base_dir: str = "."

    def path(self, key: str, required: bool = True) -> str | None:
        value = self.data.get(key)
        if value is None:
            if required:
                raise ConfigError(f"missing key '{key}'")
            return None
        p = value if os.path.isabs(value) else os.path.join(self.base_dir, value)
        if not os.path.exists(p):
            raise ConfigError(f"file for '{key}' not found: {p}")
        return p

    def get(self, key: str, cast=str, default=None):
        if key not in self.data:
            if default is None:
                raise ConfigError(f"missing key '{key}'")
            return default
        try:
            return cast(self.data[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {self.data[key]!r}") from exc


_FIT_KEYS = {f.name: f.type for f in fields(FitConfig)}


def _to_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    """Flat ``key = value`` lines; ``#`` comments; no sections needed."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    raw = dict(cp[_SECTION])
    cfg = RunConfig(base_dir=base_dir)
    fit_kw = {}
    try:
        for key, value in raw.items():
            if key in ("model", "mean_mode", "structure", "output_dir", "posterior_components"):
                setattr(cfg, key, value.strip())
            elif key in ("q", "posterior_samples"):
                setattr(cfg, key, int(value))
            elif key in ("delta0", "tolerance"):
                setattr(cfg, key, float(value))
            elif key == "seed":
                cfg.seed = int(value)
                fit_kw["seed"] = cfg.seed
            elif key in _FIT_KEYS:
                kind = _FIT_KEYS[key]
                if key == "shared_noise":
                    fit_kw[key] = _to_bool(value)
                elif key == "estimator":
                    fit_kw[key] = value.strip()
                elif key == "threads":
                    fit_kw[key] = int(value) if value.strip() else None
                elif "float" in str(kind):
                    fit_kw[key] = float(value)
                else:
                    fit_kw[key] = int(value)
            else:
                cfg.data[key] = value.strip()
        cfg.fit = FitConfig(**fit_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.model not in MODELS:
        raise ConfigError(f"model must be one of {', '.join(MODELS)}")
    if cfg.q < 1:
        raise ConfigError("q must be >= 1")
    if cfg.mean_mode not in ("LD-SM", "HD-SM") or cfg.structure not in ("LR-S", "LR-SA"):
        raise ConfigError("mean_mode must be LD-SM/HD-SM and structure LR-S/LR-SA")
    if cfg.delta0 <= 0 or cfg.posterior_samples < 0 or cfg.tolerance <= 0:
        raise ConfigError("delta0 and tolerance must be positive, posterior_samples >= 0")
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def layout_to_dict(layout: FactorLayout) -> dict:
    return {f.name: getattr(layout, f.name) for f in fields(layout)}


def lambda_to_json(lam: VariationalParams, layout: FactorLayout) -> str:
    doc = {
        "layout": layout_to_dict(layout),
        "mu": lam.mu.tolist(),
        "B": [b.tolist() for b in lam.B],
        "delta": lam.delta.tolist(),
        "C1_band": lam.c1.tolist(),
        "C2": {"rows": lam.c2_rows.tolist(), "cols": lam.c2_cols.tolist(), "values": lam.c2.tolist()},
    }
    return json.dumps(doc, indent=1)


def lambda_from_json(text: str) -> tuple[VariationalParams, FactorLayout]:
    doc = json.loads(text)
    layout = FactorLayout(**doc["layout"])
    c2 = doc["C2"]
    lam = VariationalParams(
        np.array(doc["mu"], dtype=float),
        tuple(np.array(b, dtype=float).reshape(c.p, c.q) for b, c in zip(doc["B"], layout.chains)),
        np.array(doc["delta"], dtype=float),
        np.array(doc["C1_band"], dtype=float).reshape(layout.c1_bw + 1, layout.n_z),
        np.array(c2["values"], dtype=float),
        np.array(c2["rows"], dtype=np.int64),
        np.array(c2["cols"], dtype=np.int64),
    )
    lam.check(layout)
    return lam, layout
