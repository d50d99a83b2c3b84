"""
Run configuration read from INI-style text files.

Sections ``[problem] [mesh] [greedy] [solver] [output]``; ``key = value``
lines, ``#`` comments. Parameter sets accept ``standard`` (the benchmark's
default grid), ``logspace(a, b, n)``, ``linspace(a, b, n)`` or an explicit
comma separated list. Two-parameter problems take one spec per component
(``train_mu1``, ``train_mu2``) combined as a tensor grid, first component
outermost.
"""

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .problems import PROBLEMS
from .solver import SolverOptions

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "standard_grid",
           "parse_grid", "tensor_grid"]

SECTIONS = ("problem", "mesh", "greedy", "solver", "output")

KNOWN_KEYS = {
    "problem": {"name", "alpha"},
    "mesh": {"nx", "ny"},
    "greedy": {"train", "train_mu1", "train_mu2", "test", "test_mu1", "test_mu2", "tol",
               "n_max", "estimator", "dependence_threshold", "mu1", "effectivity_pairs"},
    "solver": {"newton_tol", "max_newton_iters", "stagnation_tol", "oracle_tol",
               "oracle_max_iters", "oracle_subdivisions", "oracle_params"},
    "output": {"dir", "cache_dir", "seed"},
}


class ConfigError(ValueError):
    pass


def tensor_grid(first, second):
    return [np.array([a, b]) for a in first for b in second]


def _geometric(a, b, n, denom):
    j = np.arange(n)
    return a * (b / a) ** (j / denom)


def standard_grid(problem, which):
    """Published training and test grids of the two benchmarks."""
    if problem == "thermal-block":
        if which == "train":
            return [np.array([v]) for v in _geometric(0.5, 3.0, 100, 99)]
        return [np.array([v]) for v in _geometric(0.503, 2.99, 125, 125)]
    if problem == "graetz":
        if which == "train":
            return tensor_grid(_geometric(5.0, 18.0, 30, 29), 0.8 + 0.4 / 29 * np.arange(30))
        return tensor_grid(_geometric(5.2, 17.5, 10, 9), 0.82 + 0.35 / 4 * np.arange(5))
    raise ConfigError(f"no published grid for problem {problem!r}")


_CALL = re.compile(r"^(logspace|linspace)\s*\(\s*([^,]+),\s*([^,]+),\s*([^,)]+)\)$")


def parse_grid(text):
    """Values of one parameter component from a grid spec."""
    text = text.strip()
    m = _CALL.match(text)
    try:
        if m:
            kind, a, b, n = m.groups()
            a, b, n = float(a), float(b), int(n)
            if n < 1:
                raise ValueError("grid needs at least one point")
            if kind == "linspace":
                return np.linspace(a, b, n)
            if a <= 0 or b <= 0:
                raise ValueError("logspace bounds must be positive")
            return np.geomspace(a, b, n)
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValueError(f"bad grid {text!r}: {exc}") from None
    if not values:
        raise ValueError("empty grid")
    return np.array(values)


@dataclass
class RunConfig:
    problem: str
    nx: int
    ny: int = None
    alpha: float = 1e-2
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    tol: float = 1e-8
    n_max: int = 30
    estimator: str = "relative"
    dependence_threshold: float = 1e-10
    mu1: object = None
    effectivity_pairs: int = 20
    solver: SolverOptions = field(default_factory=SolverOptions)
    oracle_params: list = field(default_factory=list)
    out_dir: Path = Path("out")
    cache_dir: Path = None
    seed: int = 0
    source: str = "<string>"

    def problem_kwargs(self):
        kw = {"nx": self.nx, "alpha": self.alpha}
        if self.ny is not None:
            kw["ny"] = self.ny
        return kw

    def build_problem(self):
        from .problems import get_problem
        return get_problem(self.problem, **self.problem_kwargs())


def _locate(text):
    """Line number of every (section, key)."""
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip().lower()
            where[(section, None)] = no
        elif "=" in s and not s.startswith("#") and section is not None:
            where[(section, s.split("=", 1)[0].strip().lower())] = no
    return where


def parse_config(text, source="<string>", base_dir=None):
    """Parse configuration text; errors carry the offending line number."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    where = _locate(text)

    def fail(section, key, msg):
        line = where.get((section, key), where.get((section, None)))
        at = f"{source}:{line}" if line else source
        raise ConfigError(f"{at}: [{section}] {key or ''}: {msg}".replace(" : ", ": "))

    for section in parser.sections():
        if section not in SECTIONS:
            fail(section, None, f"unknown section, expected one of {SECTIONS}")
        for key in parser[section]:
            if key not in KNOWN_KEYS[section]:
                fail(section, key, "unknown key")

    def get(section, key, conv, default=None, required=False):
        if not parser.has_option(section, key):
            if required:
                line = where.get((section, None))
                at = f"{source}:{line}" if line else source
                raise ConfigError(f"{at}: missing required [{section}] {key}")
            return default
        raw = parser.get(section, key)
        try:
            return conv(raw)
        except (ValueError, ConfigError) as exc:
            fail(section, key, str(exc))

    def choice(options):
        def conv(raw):
            raw = raw.strip()
            if raw not in options:
                raise ValueError(f"{raw!r} not in {sorted(options)}")
            return raw
        return conv

    name = get("problem", "name", choice(set(PROBLEMS)), required=True)
    nparams = 1 if name == "thermal-block" else 2
    cfg = RunConfig(problem=name, nx=get("mesh", "nx", int, required=True), source=source)
    cfg.ny = get("mesh", "ny", int)
    cfg.alpha = get("problem", "alpha", float, 1e-2)
    if cfg.alpha <= 0:
        fail("problem", "alpha", "must be positive")

    def grid(which):
        if parser.has_option("greedy", which):
            raw = parser.get("greedy", which).strip()
            if raw == "standard":
                return standard_grid(name, which)
            if nparams != 1:
                fail("greedy", which, f"give {which}_mu1 and {which}_mu2 for this problem")
            return [np.array([v]) for v in get("greedy", which, parse_grid)]
        if nparams == 2 and parser.has_option("greedy", f"{which}_mu1"):
            a = get("greedy", f"{which}_mu1", parse_grid)
            b = get("greedy", f"{which}_mu2", parse_grid, required=True)
            return tensor_grid(a, b)
        return standard_grid(name, which)

    cfg.train = grid("train")
    cfg.test = grid("test")
    cfg.tol = get("greedy", "tol", float, 1e-8)
    cfg.n_max = get("greedy", "n_max", int, 30)
    cfg.estimator = get("greedy", "estimator", choice({"relative", "uyp"}), "relative")
    cfg.dependence_threshold = get("greedy", "dependence_threshold", float, 1e-10)
    cfg.effectivity_pairs = get("greedy", "effectivity_pairs", int, 20)
    mu1 = get("greedy", "mu1", lambda s: np.array([float(v) for v in s.split(",")]))
    cfg.mu1 = mu1 if mu1 is not None else cfg.train[0]
    if cfg.tol <= 0:
        fail("greedy", "tol", "must be positive")
    if cfg.n_max < 1:
        fail("greedy", "n_max", "must be at least 1")

    defaults = SolverOptions()
    cfg.solver = SolverOptions(
        newton_tol=get("solver", "newton_tol", float, defaults.newton_tol),
        max_newton_iters=get("solver", "max_newton_iters", int, defaults.max_newton_iters),
        stagnation_tol=get("solver", "stagnation_tol", float, defaults.stagnation_tol),
        oracle_tol=get("solver", "oracle_tol", float, defaults.oracle_tol),
        oracle_max_iters=get("solver", "oracle_max_iters", int, defaults.oracle_max_iters),
        oracle_subdivisions=get("solver", "oracle_subdivisions", int,
                                defaults.oracle_subdivisions),
    )
    if nparams == 1:
        default_oracle = [np.array([v]) for v in np.linspace(0.5, 3.0, 5)]
        cfg.oracle_params = [np.array([v]) for v in
                             get("solver", "oracle_params", parse_grid, [])] or default_oracle
    else:
        cfg.oracle_params = [cfg.test[i] for i in np.linspace(0, len(cfg.test) - 1, 5).astype(int)]

    base = Path(base_dir) if base_dir else Path.cwd()
    cfg.out_dir = base / get("output", "dir", str, "out").strip()
    cache = get("output", "cache_dir", str)
    cfg.cache_dir = base / cache.strip() if cache else cfg.out_dir / "cache"
    cfg.seed = get("output", "seed", int, 0)

    # parameters must lie in the problem box
    try:
        ocp_box = _box(name, cfg)
    except Exception as exc:   # invalid mesh sizes surface here
        fail("mesh", "nx", str(exc))
    for key, values in (("train", cfg.train), ("test", cfg.test), ("mu1", [cfg.mu1])):
        for mu in values:
            if len(mu) != nparams or any(not (lo - 1e-12 <= m <= hi + 1e-12)
                                         for m, (lo, hi) in zip(mu, ocp_box)):
                fail("greedy", key if parser.has_option("greedy", key) else f"{key}_mu1",
                     f"parameter {mu.tolist()} outside the box {ocp_box}")
    return cfg


def _box(name, cfg):
    # box and mesh-size validation without assembling anything
    if name == "thermal-block":
        if cfg.nx < 2 or cfg.nx % 2:
            raise ValueError("thermal block needs an even nx >= 2")
        return ((0.5, 3.0),)
    ny = cfg.ny if cfg.ny is not None else 50
    if cfg.nx % 25 or ny % 10 or cfg.nx <= 0 or ny <= 0:
        raise ValueError("graetz needs nx a multiple of 25 and ny a multiple of 10")
    return ((5.0, 18.0), (0.8, 1.2))


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path), base_dir=path.parent)
