"""Static game data: agent types, noise, scheduler, and the config file format.

Config files are JSON (YAML is accepted on input). Matrices are written as
``{"shape": [rows, cols], "data": [row-major values]}``; scalars and nested
lists are accepted as shorthand when loading. :func:`dumps` produces the
canonical form (sorted keys, 17 significant digits) so that
``dumps(loads(dumps(cfg))) == dumps(cfg)``.
"""

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

SYM_TOL = 1e-10
MASS_TOL = 1e-12
DECODER_INITS = ("prior_mean", "zero")
TYPE_STREAM = 0xFFFF_FFFF


class ConfigError(ValueError):
    """Invalid configuration document."""


@dataclass(frozen=True)
class AgentTypeParams:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    nu0: np.ndarray

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]


@dataclass(frozen=True)
class TypeDistribution:
    types: tuple
    mass: np.ndarray

    def __len__(self):
        return len(self.types)


@dataclass(frozen=True)
class NoiseModel:
    sigma_x: np.ndarray
    sigma_w: np.ndarray
    sigma_v: np.ndarray
    allow_noiseless_channel: bool = False


@dataclass(frozen=True)
class SchedulerParams:
    S: np.ndarray
    alpha: float


@dataclass(frozen=True)
class GameConfig:
    distribution: TypeDistribution
    noise: NoiseModel
    scheduler: SchedulerParams
    N: int
    T: int
    seed: int
    runs: int = 1
    solver_tol: float = 1e-10
    solver_max_iter: int = 100_000
    decoder_init: str = "prior_mean"

    @property
    def n(self):
        return self.distribution.types[0].n

    @property
    def m(self):
        return self.distribution.types[0].m

    def with_overrides(self, N=None, T=None, alpha=None, seed=None, runs=None,
                       decoder_init=None):
        """Return a validated copy with CLI-style overrides applied (``None`` = keep)."""
        changes = {k: v for k, v in
                   dict(N=N, T=T, seed=seed, runs=runs, decoder_init=decoder_init).items()
                   if v is not None}
        cfg = replace(self, **changes)
        if alpha is not None:
            cfg = replace(cfg, scheduler=replace(cfg.scheduler, alpha=float(alpha)))
        validate(cfg)
        return cfg


@dataclass(frozen=True)
class Diagnostics:
    n: int
    ctrb_rank: int
    obsv_rank: int

    @property
    def controllable(self):
        return self.ctrb_rank == self.n

    @property
    def observable(self):
        return self.obsv_rank == self.n

    @property
    def passed(self):
        return self.controllable and self.observable

    def describe(self):
        parts = []
        if not self.controllable:
            parts.append(f"(A, B) not controllable: rank {self.ctrb_rank} < {self.n}")
        if not self.observable:
            parts.append(f"(A, Q^1/2) not observable: rank {self.obsv_rank} < {self.n}")
        return "; ".join(parts) or "controllable and observable"


# --------------------------------------------------------------------------
# structural checks and sampling


def psd_sqrt(M):
    """Symmetric square root of a PSD matrix (negative eigenvalues clipped)."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def check_structural_assumptions(t: AgentTypeParams) -> Diagnostics:
    n = t.n
    blocks = [t.B]
    for _ in range(n - 1):
        blocks.append(t.A @ blocks[-1])
    ctrb = np.hstack(blocks)
    C = psd_sqrt(t.Q)
    rows = [C]
    for _ in range(n - 1):
        rows.append(rows[-1] @ t.A)
    obsv = np.vstack(rows)
    return Diagnostics(n, int(np.linalg.matrix_rank(ctrb)), int(np.linalg.matrix_rank(obsv)))


def rng_stream(seed, *key):
    """Independent generator for ``(seed, *key)``; draw order elsewhere cannot leak in."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def sample_types(N, d: TypeDistribution, seed):
    """Draw a type index for each of ``N`` agents; returns (assignment, empirical mass)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    k = len(d)
    if k == 1:
        assignment = np.zeros(N, dtype=np.int64)
    else:
        rng = rng_stream(seed, TYPE_STREAM)
        assignment = rng.choice(k, size=N, p=d.mass)
    empirical = np.bincount(assignment, minlength=k) / N
    return assignment, empirical


# --------------------------------------------------------------------------
# validation


def _is_symmetric(M):
    return np.allclose(M, M.T, atol=SYM_TOL, rtol=0.0)


def _check_cov(name, M, allow_psd):
    if not _is_symmetric(M):
        raise ConfigError(f"{name}: covariance must be symmetric")
    eig = np.linalg.eigvalsh(M)
    if allow_psd:
        if eig.min() < -SYM_TOL:
            raise ConfigError(f"{name}: covariance must be positive semidefinite")
    elif eig.min() <= 0.0:
        raise ConfigError(f"{name}: covariance must be positive definite")


def validate(cfg: GameConfig):
    d = cfg.distribution
    if len(d.types) == 0:
        raise ConfigError("at least one type is required")
    if len(d.mass) != len(d.types):
        raise ConfigError(f"mass has {len(d.mass)} entries for {len(d.types)} types")
    if np.any(d.mass < 0) or np.any(d.mass > 1):
        raise ConfigError("masses must lie in [0, 1]")
    if abs(float(np.sum(d.mass)) - 1.0) > MASS_TOL:
        raise ConfigError(f"masses must sum to 1 (got {float(np.sum(d.mass))!r})")
    n, m = d.types[0].n, d.types[0].m
    for i, t in enumerate(d.types):
        shapes = dict(A=(n, n), B=(n, m), Q=(n, n), R=(m, m), nu0=(n,))
        for key, shape in shapes.items():
            got = getattr(t, key).shape
            if got != shape:
                raise ConfigError(f"types[{i}].{key}: dimension mismatch, expected {shape}, got {got}")
        if not _is_symmetric(t.Q) or np.linalg.eigvalsh(t.Q).min() < -SYM_TOL:
            raise ConfigError(f"types[{i}].Q must be symmetric positive semidefinite")
        if not _is_symmetric(t.R) or np.linalg.eigvalsh(t.R).min() <= 0.0:
            raise ConfigError(f"types[{i}].R must be symmetric positive definite")
    nz = cfg.noise
    for key in ("sigma_x", "sigma_w", "sigma_v"):
        M = getattr(nz, key)
        if M.shape != (n, n):
            raise ConfigError(f"noise.{key}: dimension mismatch, expected {(n, n)}, got {M.shape}")
        _check_cov(f"noise.{key}", M, nz.allow_noiseless_channel)
    sc = cfg.scheduler
    if sc.S.shape != (n, n):
        raise ConfigError(f"scheduler.S: dimension mismatch, expected {(n, n)}, got {sc.S.shape}")
    if not _is_symmetric(sc.S) or np.linalg.eigvalsh(sc.S).min() <= 0.0:
        raise ConfigError("scheduler.S must be symmetric positive definite")
    if not (sc.alpha >= 0.0):
        raise ConfigError("scheduler.alpha must be >= 0")
    for key in ("N", "T", "runs", "solver_max_iter"):
        if int(getattr(cfg, key)) < 1:
            raise ConfigError(f"{key} must be a positive integer")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    if not cfg.solver_tol > 0:
        raise ConfigError("solver tol must be positive")
    if cfg.decoder_init not in DECODER_INITS:
        raise ConfigError(f"decoder_init must be one of {DECODER_INITS}")
    return cfg


# --------------------------------------------------------------------------
# document <-> config

_SCHEMA = {
    "types": True, "mass": True, "noise": True, "scheduler": True, "sim": True, "solver": False,
}
_TYPE_KEYS = {"A": True, "B": True, "Q": True, "R": True, "nu0": True}
_NOISE_KEYS = {"sigma_x": True, "sigma_w": True, "sigma_v": True, "allow_noiseless_channel": False}
_SCHED_KEYS = {"S": True, "alpha": True}
_SIM_KEYS = {"N": True, "T": True, "seed": True, "runs": False, "decoder_init": False}
_SOLVER_KEYS = {"tol": False, "max_iter": False}


def _check_keys(where, obj, spec):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected a mapping")
    extra = sorted(set(obj) - set(spec))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}")
    missing = sorted(k for k, req in spec.items() if req and k not in obj)
    if missing:
        raise ConfigError(f"{where}: missing key(s) {missing}")


def _number(where, x):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {x!r}")
    if not math.isfinite(x):
        raise ConfigError(f"{where}: non-finite value")
    return float(x)


def _integer(where, x):
    if isinstance(x, bool) or not isinstance(x, int):
        if isinstance(x, float) and x.is_integer():
            return int(x)
        raise ConfigError(f"{where}: expected an integer, got {x!r}")
    return x


def _array(where, obj, ndim):
    if isinstance(obj, dict):
        _check_keys(where, obj, {"shape": True, "data": True})
        shape = tuple(_integer(f"{where}.shape", s) for s in obj["shape"])
        data = [_number(f"{where}.data", x) for x in obj["data"]]
        if len(shape) != ndim:
            raise ConfigError(f"{where}: expected {ndim}-d shape, got {list(shape)}")
        if math.prod(shape) != len(data):
            raise ConfigError(f"{where}: dimension mismatch, shape {list(shape)} vs {len(data)} values")
        return np.array(data, dtype=float).reshape(shape)
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        return np.full((1,) * ndim, _number(where, obj))
    if isinstance(obj, list):
        try:
            arr = np.array(obj, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: ragged or non-numeric array") from exc
        if arr.ndim != ndim:
            raise ConfigError(f"{where}: expected {ndim}-d array, got {arr.ndim}-d")
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"{where}: non-finite value")
        return arr
    raise ConfigError(f"{where}: expected an array")


def from_dict(doc, allow_noiseless_channel=None) -> GameConfig:
    """Build and validate a :class:`GameConfig` from a parsed document."""
    _check_keys("config", doc, _SCHEMA)
    if not isinstance(doc["types"], list):
        raise ConfigError("types: expected a list")
    types = []
    for i, t in enumerate(doc["types"]):
        where = f"types[{i}]"
        _check_keys(where, t, _TYPE_KEYS)
        types.append(AgentTypeParams(
            A=_array(f"{where}.A", t["A"], 2),
            B=_array(f"{where}.B", t["B"], 2),
            Q=_array(f"{where}.Q", t["Q"], 2),
            R=_array(f"{where}.R", t["R"], 2),
            nu0=_array(f"{where}.nu0", t["nu0"], 1),
        ))
    if not isinstance(doc["mass"], list):
        raise ConfigError("mass: expected a list")
    mass = np.array([_number("mass", x) for x in doc["mass"]])

    nz = doc["noise"]
    _check_keys("noise", nz, _NOISE_KEYS)
    allow = bool(nz.get("allow_noiseless_channel", False))
    if allow_noiseless_channel is not None:
        allow = allow_noiseless_channel
    noise = NoiseModel(
        sigma_x=_array("noise.sigma_x", nz["sigma_x"], 2),
        sigma_w=_array("noise.sigma_w", nz["sigma_w"], 2),
        sigma_v=_array("noise.sigma_v", nz["sigma_v"], 2),
        allow_noiseless_channel=allow,
    )
    sc = doc["scheduler"]
    _check_keys("scheduler", sc, _SCHED_KEYS)
    scheduler = SchedulerParams(S=_array("scheduler.S", sc["S"], 2),
                                alpha=_number("scheduler.alpha", sc["alpha"]))
    sim = doc["sim"]
    _check_keys("sim", sim, _SIM_KEYS)
    solver = doc.get("solver", {})
    _check_keys("solver", solver, _SOLVER_KEYS)
    cfg = GameConfig(
        distribution=TypeDistribution(tuple(types), mass),
        noise=noise,
        scheduler=scheduler,
        N=_integer("sim.N", sim["N"]),
        T=_integer("sim.T", sim["T"]),
        seed=_integer("sim.seed", sim["seed"]),
        runs=_integer("sim.runs", sim.get("runs", 1)),
        solver_tol=_number("solver.tol", solver.get("tol", 1e-10)),
        solver_max_iter=_integer("solver.max_iter", solver.get("max_iter", 100_000)),
        decoder_init=str(sim.get("decoder_init", "prior_mean")),
    )
    return validate(cfg)


def array_doc(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def to_dict(cfg: GameConfig):
    d = cfg.distribution
    return {
        "types": [
            {k: array_doc(getattr(t, k)) for k in ("A", "B", "Q", "R", "nu0")}
            for t in d.types
        ],
        "mass": [float(x) for x in d.mass],
        "noise": {
            "sigma_x": array_doc(cfg.noise.sigma_x),
            "sigma_w": array_doc(cfg.noise.sigma_w),
            "sigma_v": array_doc(cfg.noise.sigma_v),
            "allow_noiseless_channel": cfg.noise.allow_noiseless_channel,
        },
        "scheduler": {"S": array_doc(cfg.scheduler.S), "alpha": float(cfg.scheduler.alpha)},
        "sim": {"N": cfg.N, "T": cfg.T, "seed": cfg.seed, "runs": cfg.runs,
                "decoder_init": cfg.decoder_init},
        "solver": {"tol": float(cfg.solver_tol), "max_iter": cfg.solver_max_iter},
    }


def fmt_float(x):
    """17 significant digits; round-trips every double exactly."""
    return format(float(x), ".17g")


def _emit(obj, indent, level):
    pad = " " * (indent * level)
    inner = " " * (indent * (level + 1))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_emit(obj[k], indent, level + 1)}"
                 for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(x, (dict, list, tuple)) for x in obj):
            return "[" + ", ".join(_emit(x, indent, level) for x in obj) + "]"
        return "[\n" + ",\n".join(inner + _emit(x, indent, level + 1) for x in obj) + "\n" + pad + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError("cannot serialise non-finite float")
        return fmt_float(obj)
    return json.dumps(obj)


def dumps_canonical(obj, indent=2):
    return _emit(obj, indent, 0) + "\n"


def dumps(cfg: GameConfig):
    return dumps_canonical(to_dict(cfg))


def loads(text, fmt="json", allow_noiseless_channel=None) -> GameConfig:
    try:
        if fmt == "json":
            doc = json.loads(text)
        else:
            import yaml
            doc = yaml.safe_load(text)
    except Exception as exc:  # parser errors come in many flavours
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return from_dict(doc, allow_noiseless_channel=allow_noiseless_channel)


def load_config(source, allow_noiseless_channel: Optional[bool] = None) -> GameConfig:
    """Load a config from a path (``.json``, ``.yaml``/``.yml``) or a document string/dict."""
    if isinstance(source, dict):
        return from_dict(source, allow_noiseless_channel=allow_noiseless_channel)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        fmt = "yaml" if path.suffix in (".yaml", ".yml") else "json"
        return loads(text, fmt, allow_noiseless_channel)
    return loads(source, "json", allow_noiseless_channel)
