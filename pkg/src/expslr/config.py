"""JSON run configuration with explicit defaults and field-level diagnostics."""
from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass, field

from .irls import IrlsConfig
from .lifting import FilterSupport


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path, ``line`` the JSON line if known."""

    def __init__(self, field_path: str, message: str, line: int | None = None):
        self.field = field_path
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{field_path}{where}: {message}")


DEFAULTS: dict = {
    "dims": {"p": 64, "q": 64, "t": 12},
    "phantom": {"kind": "gaussian_blob", "l": 2, "t2_range": [50.0, 200.0], "delta_te": 10.0,
                "beta": 0.9, "seed": 1},
    "coils": {"count": 1, "seed": 4},
    "mask": {"kind": "uniform", "fraction": 0.3, "cart_factor": 2, "vd_factor": 3.0, "seed": 2},
    "noise": {"sigma": 0.005, "seed": 3},
    "filter": {"n1": 16, "n2": 16, "m": 4},
    "filters": None,
    "solver": {"mu": 10000.0, "mu_grid": None, "p": 0.6, "gamma": 1.4, "eps0_scale": 0.01,
               "max_iters": 30, "cg_max": 20, "cg_tol": 1e-6, "outer_tol": 1e-5, "eps_floor": 1e-9},
    "outputs": {"directory": "out"},
}


@dataclass
class RunConfig:
    """Fully resolved configuration; every value is explicit."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def shape(self) -> tuple[int, int, int]:
        d = self.raw["dims"]
        return d["t"], d["p"], d["q"]

    @property
    def filt(self) -> FilterSupport:
        f = self.raw["filter"]
        return FilterSupport(f["n1"], f["n2"], f["m"])

    @property
    def filters(self) -> list[FilterSupport]:
        fl = self.raw["filters"]
        if not fl:
            return [self.filt]
        return [FilterSupport(f["n1"], f["n2"], f["m"]) for f in fl]

    def solver(self, mu: float | None = None) -> IrlsConfig:
        s = self.raw["solver"]
        mu = mu if mu is not None else (s["mu"] if s["mu"] is not None else s["mu_grid"][0])
        return IrlsConfig(mu=mu, p=s["p"], gamma=s["gamma"], eps0_scale=s["eps0_scale"],
                          max_iters=s["max_iters"], cg_max=s["cg_max"], cg_tol=s["cg_tol"],
                          outer_tol=s["outer_tol"], eps_floor=s["eps_floor"])

    def override_seed(self, seed: int) -> None:
        """Derive every stage seed from one base seed."""
        for off, sec in enumerate(("phantom", "coils", "mask", "noise")):
            self.raw[sec]["seed"] = seed + off

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=False)


def _line_of(text: str | None, path: str) -> int | None:
    if not text:
        return None
    key = path.split(".")[-1].split("[")[0]
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _merge(base: dict, user: dict, prefix: str, text: str | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in user.items():
        path = f"{prefix}.{k}" if prefix else k
        if k not in base:
            raise ConfigError(path, "unknown field", _line_of(text, path))
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(path, "expected an object", _line_of(text, path))
            out[k] = _merge(base[k], v, path, text)
        else:
            out[k] = v
    return out


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(cfg: dict, text: str | None) -> None:
    def fail(path, msg):
        raise ConfigError(path, msg, _line_of(text, path))

    def pos_int(path, v):
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            fail(path, f"must be a positive integer, got {v!r}")

    def pos_num(path, v):
        if not _is_num(v) or not v > 0:
            fail(path, f"must be a positive number, got {v!r}")

    def seed(path, v):
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            fail(path, f"must be a non-negative integer seed, got {v!r}")

    for k in ("p", "q", "t"):
        pos_int(f"dims.{k}", cfg["dims"][k])
    ph = cfg["phantom"]
    if ph["kind"] not in ("gaussian_blob", "uniform_beta"):
        fail("phantom.kind", f"must be 'gaussian_blob' or 'uniform_beta', got {ph['kind']!r}")
    pos_int("phantom.l", ph["l"])
    tr = ph["t2_range"]
    if not (isinstance(tr, list) and len(tr) == 2 and all(_is_num(v) for v in tr) and 0 < tr[0] < tr[1]):
        fail("phantom.t2_range", f"must be [lo, hi] with 0 < lo < hi, got {tr!r}")
    pos_num("phantom.delta_te", ph["delta_te"])
    if not (_is_num(ph["beta"]) and 0 < ph["beta"] < 1):
        fail("phantom.beta", f"must lie in (0, 1), got {ph['beta']!r}")
    seed("phantom.seed", ph["seed"])
    pos_int("coils.count", cfg["coils"]["count"])
    seed("coils.seed", cfg["coils"]["seed"])
    mk = cfg["mask"]
    if mk["kind"] not in ("uniform", "cartesian_vd"):
        fail("mask.kind", f"must be 'uniform' or 'cartesian_vd', got {mk['kind']!r}")
    if not (_is_num(mk["fraction"]) and 0 < mk["fraction"] <= 1):
        fail("mask.fraction", f"must lie in (0, 1], got {mk['fraction']!r}")
    if mk["cart_factor"] not in (2, 4):
        fail("mask.cart_factor", f"must be 2 or 4, got {mk['cart_factor']!r}")
    if not (_is_num(mk["vd_factor"]) and mk["vd_factor"] >= 1):
        fail("mask.vd_factor", f"must be >= 1, got {mk['vd_factor']!r}")
    seed("mask.seed", mk["seed"])
    if not (_is_num(cfg["noise"]["sigma"]) and cfg["noise"]["sigma"] >= 0):
        fail("noise.sigma", f"must be >= 0, got {cfg['noise']['sigma']!r}")
    seed("noise.seed", cfg["noise"]["seed"])
    dims = cfg["dims"]
    filters = [("filter", cfg["filter"])]
    if cfg["filters"] is not None:
        if not isinstance(cfg["filters"], list) or not cfg["filters"]:
            fail("filters", "must be a non-empty list of {n1, n2, m} objects")
        filters += [(f"filters[{i}]", f) for i, f in enumerate(cfg["filters"])]
    for path, f in filters:
        if not isinstance(f, dict) or set(f) != {"n1", "n2", "m"}:
            fail(path, "must be an object with exactly n1, n2, m")
        for k in ("n1", "n2", "m"):
            pos_int(f"{path}.{k}", f[k])
        if f["n1"] > dims["p"] or f["n2"] > dims["q"] or f["m"] > dims["t"]:
            fail(path, f"filter {f['n1']}x{f['n2']}x{f['m']} does not fit dims {dims['p']}x{dims['q']}x{dims['t']}")
    s = cfg["solver"]
    if s["mu"] is None and s["mu_grid"] is None:
        fail("solver.mu", "one of mu or mu_grid is required")
    if s["mu"] is not None:
        pos_num("solver.mu", s["mu"])
    if s["mu_grid"] is not None:
        if not isinstance(s["mu_grid"], list) or not s["mu_grid"]:
            fail("solver.mu_grid", "must be a non-empty list")
        for i, v in enumerate(s["mu_grid"]):
            pos_num(f"solver.mu_grid[{i}]", v)
    if not (_is_num(s["p"]) and 0 <= s["p"] <= 1):
        fail("solver.p", f"must lie in [0, 1], got {s['p']!r}")
    if not (_is_num(s["gamma"]) and s["gamma"] >= 1):
        fail("solver.gamma", f"must be >= 1, got {s['gamma']!r}")
    for k in ("eps0_scale", "cg_tol", "outer_tol", "eps_floor"):
        pos_num(f"solver.{k}", s[k])
    for k in ("max_iters", "cg_max"):
        pos_int(f"solver.{k}", s[k])
    if not isinstance(cfg["outputs"]["directory"], str) or not cfg["outputs"]["directory"]:
        fail("outputs.directory", "must be a non-empty string")


def load_config(text: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Parse JSON text (``None`` for all defaults), merge with defaults and validate."""
    user = {}
    if text is not None:
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<json>", exc.msg, exc.lineno) from None
        if not isinstance(user, dict):
            raise ConfigError("<root>", "configuration must be a JSON object", 1)
    merged = _merge(DEFAULTS, user, "", text)
    if overrides:
        merged = _merge(merged, overrides, "", None)
    _validate(merged, text)
    return RunConfig(merged)


def read_config(path) -> RunConfig:
    with open(path) as fh:
        return load_config(fh.read())


def config_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)["raw"]
