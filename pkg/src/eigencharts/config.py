"""INI experiment configuration: parsing, defaults and validation."""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import ValidationError
from .geometry import DIRICHLET, NEUMANN, SHAPES

OUTPUT_ENV = "EIGENCHARTS_OUTPUT_DIR"
STAGES = ("eig", "weyl", "heat", "select", "embed", "triangulate", "distort")
RULES = ("max-gradient", "lowest-index")

DEFAULTS = {
    "experiment": {"name": "experiment", "description": "", "seed": "0", "stages": "eig,weyl,select,embed,distort",
                   "output_dir": ""},
    "domain": {"shape": "rectangle", "dims": "1,1", "resolution": "128", "bc": DIRICHLET, "hole": "0.4",
               "delta": "0.05", "n": "3", "neck_length": "0.25", "mask_file": ""},
    "metric": {"kind": "identity"},
    "eigen": {"k": "", "threshold": "auto", "dense": "auto"},
    "weyl": {"thresholds": "100,200,400"},
    "heat": {"probes": "10", "R": "auto", "growth_count": "100", "spread": "1.5"},
    "selection": {"centers": "center", "rho": "0.25", "A": "10", "A_prime": "0.1", "c0": "0.1", "delta0": "0.5",
                  "t": "", "relax_max": "3", "rule": "max-gradient", "kappa": ""},
    "triangulation": {"backend": "spectral", "center": "center", "rho": "0.2", "c": "0.5", "theta": "0.05",
                      "seeds": "20", "resolution": "", "anchors": "", "t": ""},
    "analysis": {"pair_budget": "200000", "distortion_target": "10", "max_theta": "64", "region": "",
                 "perturbations": "", "ball_divisor": "4"},
}


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _points(text: str) -> tuple:
    """``"a,b; c,d"`` -> ``((a, b), (c, d))``."""
    return tuple(_floats(chunk) for chunk in text.split(";") if chunk.strip())


@dataclass
class ExperimentConfig:
    """Resolved experiment parameters; ``sections`` holds every key with defaults filled in."""

    sections: dict
    path: Optional[Path] = None
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section: str, key: str) -> str:
        return self.sections[section][key]

    def getfloat(self, section: str, key: str) -> float:
        return float(self.get(section, key))

    def getint(self, section: str, key: str) -> int:
        return int(self.get(section, key))

    def optfloat(self, section: str, key: str) -> Optional[float]:
        v = self.get(section, key).strip()
        return None if v in ("", "auto") else float(v)

    @property
    def name(self) -> str:
        return self.get("experiment", "name")

    @property
    def seed(self) -> int:
        return self.getint("experiment", "seed")

    @property
    def stages(self) -> tuple:
        return tuple(s.strip() for s in self.get("experiment", "stages").split(",") if s.strip())

    @property
    def dims(self) -> tuple:
        return _floats(self.get("domain", "dims"))

    def mask_path(self) -> Optional[Path]:
        m = self.get("domain", "mask_file").strip()
        if not m:
            return None
        p = Path(m)
        return p if p.is_absolute() else (self.base_dir / p)

    def output_dir(self) -> Path:
        env = os.environ.get(OUTPUT_ENV)
        if env:
            return Path(env) / self.name
        out = self.get("experiment", "output_dir").strip()
        if out:
            p = Path(out)
            return p if p.is_absolute() else self.base_dir / p
        return Path.cwd() / "eigencharts-out" / self.name

    def centers(self, section: str = "selection", key: str = "centers") -> tuple:
        return tuple(c.strip() for c in self.get(section, key).split(";") if c.strip())

    def to_dict(self) -> dict:
        return {s: dict(sorted(v.items())) for s, v in sorted(self.sections.items())}


def parse_config_text(text: str, base_dir=None, overrides=()) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"unparseable config: {exc}") from exc
    sections = {s: dict(v) for s, v in DEFAULTS.items()}
    for s in parser.sections():
        if s not in sections:
            raise ValidationError(f"unknown config section [{s}]")
        for k, v in parser.items(s):
            if k not in sections[s] and s != "metric":
                raise ValidationError(f"unknown key {s}.{k}")
            sections[s][k] = v
    for item in overrides:
        try:
            lhs, value = item.split("=", 1)
            s, k = lhs.strip().split(".", 1)
        except ValueError as exc:
            raise ValidationError(f"override must look like section.key=value: {item!r}") from exc
        if s not in sections or (k not in sections[s] and s != "metric"):
            raise ValidationError(f"unknown key {s}.{k}")
        sections[s][k] = value.strip()
    cfg = ExperimentConfig(sections, None, Path(base_dir) if base_dir else Path.cwd())
    validate_config(cfg)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        resolved = fixture_path(str(path))
        if resolved is None:
            raise ValidationError(f"config file not found: {path}")
        path = resolved
    cfg = parse_config_text(path.read_text(), path.parent, overrides)
    cfg.path = path
    return cfg


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValidationError(message)


def validate_config(cfg: ExperimentConfig) -> None:
    """Check every precondition that can be checked without computing."""
    try:
        _validate(cfg)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad config value: {exc}") from exc


def _validate(cfg: ExperimentConfig) -> None:
    for s in cfg.stages:
        _require(s in STAGES, f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
    cfg.seed
    _require(cfg.get("domain", "shape") in SHAPES, f"unknown shape {cfg.get('domain', 'shape')!r}")
    _require(cfg.get("domain", "bc") in (DIRICHLET, NEUMANN), "bc must be dirichlet or neumann")
    _require(cfg.getfloat("domain", "resolution") >= 8, "resolution must be >= 8")
    _require(all(d > 0 for d in cfg.dims), "domain dims must be positive")
    mask = cfg.mask_path()
    if cfg.get("domain", "shape") == "mask_file":
        _require(mask is not None and mask.exists(), f"mask file does not exist: {mask}")
    _require(0 < cfg.getfloat("domain", "delta") <= 1, "dumbbell delta must lie in (0, 1]")
    _require(cfg.getint("domain", "n") >= 1, "dumbbell n must be >= 1")

    kind = cfg.get("metric", "kind")
    _require(kind in ("identity", "constant", "expression"), "metric kind must be identity, constant or expression")

    k = cfg.get("eigen", "k").strip()
    thr = cfg.get("eigen", "threshold").strip()
    if k:
        _require(int(k) >= 1, "eigen.k must be >= 1")
    elif thr not in ("", "auto"):
        _require(float(thr) > 0, "eigen.threshold must be positive")
    _require(cfg.get("eigen", "dense") in ("auto", "true", "false"), "eigen.dense must be auto, true or false")
    _require(all(T > 0 for T in _floats(cfg.get("weyl", "thresholds"))), "Weyl thresholds must be positive")

    _require(cfg.getint("heat", "probes") >= 1, "heat.probes must be >= 1")
    R = cfg.optfloat("heat", "R")
    _require(R is None or R > 0, "heat.R must be positive")

    A, Ap = cfg.getfloat("selection", "A"), cfg.getfloat("selection", "A_prime")
    _require(0 < Ap < A, f"selection needs 0 < A' < A (got A={A}, A'={Ap})")
    _require(cfg.getfloat("selection", "rho") > 0, "selection.rho must be positive")
    _require(cfg.getfloat("selection", "c0") > 0, "selection.c0 must be positive")
    _require(0 < cfg.getfloat("selection", "delta0") <= 1, "selection.delta0 must lie in (0, 1]")
    _require(cfg.getint("selection", "relax_max") >= 0, "selection.relax_max must be >= 0")
    _require(cfg.get("selection", "rule") in RULES, f"selection.rule must be one of {RULES}")
    t = cfg.optfloat("selection", "t")
    _require(t is None or t > 0, "selection.t must be positive")
    for c in cfg.centers():
        _check_center(c, len(cfg.dims))

    _require(cfg.get("triangulation", "backend") in ("spectral", "closed_form"),
             "triangulation.backend must be spectral or closed_form")
    _check_center(cfg.get("triangulation", "center"), len(cfg.dims))
    for key in ("rho", "c", "theta"):
        _require(cfg.getfloat("triangulation", key) > 0, f"triangulation.{key} must be positive")
    _require(cfg.getint("triangulation", "seeds") >= 1, "triangulation.seeds must be >= 1")
    res = cfg.optfloat("triangulation", "resolution")
    _require(res is None or res >= 8, "triangulation.resolution must be >= 8")
    anchors = _points(cfg.get("triangulation", "anchors"))
    _require(all(len(a) == len(cfg.dims) for a in anchors), "anchor dimension mismatch")
    tt = cfg.optfloat("triangulation", "t")
    _require(tt is None or tt > 0, "triangulation.t must be positive")

    _require(cfg.getint("analysis", "pair_budget") >= 100, "analysis.pair_budget must be >= 100")
    _require(cfg.getfloat("analysis", "distortion_target") >= 1, "analysis.distortion_target must be >= 1")
    _require(cfg.getint("analysis", "max_theta") >= 1, "analysis.max_theta must be >= 1")
    _require(cfg.getfloat("analysis", "ball_divisor") > 0, "analysis.ball_divisor must be positive")
    region = _floats(cfg.get("analysis", "region"))
    _require(len(region) in (0, 2 * len(cfg.dims)), "analysis.region needs lo,hi per axis")
    _require(all(len(p) == len(cfg.dims) for p in _points(cfg.get("analysis", "perturbations"))),
             "perturbation offsets must match the dimension")


def _check_center(text: str, dim: int) -> None:
    if text in ("center", "big_center", "small_center"):
        return
    vals = _floats(text)
    _require(len(vals) == dim and all(math.isfinite(v) for v in vals), f"bad center {text!r}")


# --------------------------------------------------------------------------
# fixtures
# --------------------------------------------------------------------------

def _fixture_dir():
    return resources.files("eigencharts") / "fixtures"


def list_fixtures() -> list:
    """``(name, description)`` for every shipped fixture, sorted by name."""
    out = []
    for entry in sorted(_fixture_dir().iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".cfg"):
            parser = configparser.ConfigParser(interpolation=None)
            parser.read_string(entry.read_text())
            out.append((entry.name[:-4], parser.get("experiment", "description", fallback="")))
    return out


def fixture_path(name: str) -> Optional[Path]:
    stem = name[:-4] if name.endswith(".cfg") else name
    entry = _fixture_dir() / f"{stem}.cfg"
    return Path(str(entry)) if entry.is_file() else None
