"""Configuration-driven analysis runs and their artifacts.

A run goes orbits -> kernel per sigma -> balls and hierarchy -> spectra and
estimates -> checks.  Every intermediate result is written to the output
directory; CSV files are written with round-trip float formatting, so two
runs with the same configuration produce identical bytes.
"""

import csv
import itertools
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import floquet as fq
from . import markov as mk
from . import metastable as ms
from . import poincare as pc
from . import sde
from . import verify as vf
from .errors import RandPoincareError

CHECKS = ("exact", "theorems", "certificates")


class ConfigError(RandPoincareError):
    """Invalid or incomplete configuration."""

    stage = "config"


class StageError(RandPoincareError):
    """An error raised inside a named pipeline stage."""

    def __init__(self, stage, exc):
        super().__init__(f"{type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None or isinstance(exc, (StageError, ConfigError)):
            return False
        if isinstance(exc, (RandPoincareError, ValueError, np.linalg.LinAlgError)):
            raise StageError(self.name, exc) from exc
        return False


@dataclass
class PipelineConfig:
    """Parameters of an analysis run.

    ``model`` is ``"reference"`` or the path of a JSON model file.  ``cells``
    is the number of grid cells per chart axis; ``chart_lo``/``chart_hi``
    default to the model's chart box.  ``H`` overrides the exponent matrix
    (in detection order of the stable orbits); radial catalog models get the
    analytic one.  ``strict`` makes the asymptotic and certificate checks
    count towards the exit status, not only the exact identities.
    """

    model: str = "reference"
    sigma2: list = field(default_factory=lambda: [0.01])
    cells: int = 200
    chart_lo: list = None
    chart_hi: list = None
    samples_per_cell: int = 2000
    dt: float = 0.01
    seed: int = 1
    delta: float = 0.2
    max_time: float = 100.0
    out: str = "randpoincare-out"
    checks: list = field(default_factory=lambda: list(CHECKS))
    threads: int = 1
    H: list = None
    u: float = 1e-3
    m_values: list = field(default_factory=lambda: [1, 4, 16])
    strict: bool = False

    @classmethod
    def from_sources(cls, file=None, overrides=None):
        """Defaults, then the JSON ``file``, then non-None ``overrides``."""
        data = {}
        if file is not None:
            if not os.path.isfile(file):
                raise ConfigError(f"config file {file!r} not found")
            try:
                with open(file) as fh:
                    data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {file!r} is not valid JSON: {exc}") from exc
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown configuration keys: {sorted(extra)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if self.model != "reference" and not os.path.isfile(self.model):
            raise ConfigError(f"model file {self.model!r} not found")
        self.sigma2 = [float(s) for s in np.atleast_1d(self.sigma2)]
        if not self.sigma2 or any(s <= 0 for s in self.sigma2):
            raise ConfigError("sigma2 values must be positive")
        if int(self.cells) < 2:
            raise ConfigError("cells must be at least 2")
        if int(self.samples_per_cell) < 100:
            raise ConfigError("samples_per_cell must be at least 100")
        if not 0 < self.dt <= 0.1:
            raise ConfigError("dt must lie in (0, 0.1]")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")
        bad = set(self.checks) - set(CHECKS)
        if bad:
            raise ConfigError(f"unknown checks {sorted(bad)}; choose from {list(CHECKS)}")
        self.cells, self.samples_per_cell, self.threads = (
            int(self.cells), int(self.samples_per_cell), int(self.threads))

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# model files


def load_model(ref, sigma=None):
    """``"reference"`` or a JSON model file.

    The file holds ``name``, ``dimension``, ``catalog`` (``"radial"`` or
    ``"reference"``), ``parameters`` (catalog parameters such as ``roots``,
    ``omega``, ``theta_noise``), ``sigma``, ``sections``
    (``{"primary_theta": 0, "secondary_theta": ...}``), ``domain``
    (``{"r_min": ..., "r_max": ...}``) and ``confinement``.
    """
    if ref == "reference":
        m = sde.reference_model()
    else:
        if not os.path.isfile(ref):
            raise ConfigError(f"model file {ref!r} not found")
        try:
            with open(ref) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model file {ref!r} is not valid JSON: {exc}") from exc
        m = model_from_file_dict(d)
    return m if sigma is None else m.with_sigma(sigma)


def model_from_file_dict(d):
    catalog = d.get("catalog")
    if catalog not in ("radial", "reference"):
        raise ConfigError(f"unknown catalog {catalog!r}")
    if int(d.get("dimension", 2)) != 2:
        raise ConfigError("catalog models are planar (dimension 2)")
    sections = d.get("sections")
    if sections is None or "secondary_theta" not in sections:
        raise ConfigError("model file must place the secondary section explicitly")
    if float(sections.get("primary_theta", 0.0)) != 0.0:
        raise ConfigError("the primary section of catalog models is theta = 0")
    spec = dict(d.get("parameters", {}))
    spec.update(catalog=catalog, sigma=float(d.get("sigma", 0.1)),
                confinement=d.get("confinement", "recurrent"),
                secondary_theta=float(sections["secondary_theta"]))
    spec.update({k: float(v) for k, v in d.get("domain", {}).items()})
    try:
        m = sde.model_from_spec(spec)
    except TypeError as exc:
        raise ConfigError(f"bad model parameters: {exc}") from exc
    if d.get("name"):
        m.name = str(d["name"])
    return m


def grid_for(model, cfg):
    sec = model.primary
    lo = sec.lo if cfg.chart_lo is None else np.asarray(cfg.chart_lo, dtype=float)
    hi = sec.hi if cfg.chart_hi is None else np.asarray(cfg.chart_hi, dtype=float)
    shape = (cfg.cells,) * len(np.atleast_1d(lo))
    return pc.Grid(lo, hi, shape)


# ---------------------------------------------------------------------------
# orbits


def find_orbits(model, n_scan=121, tol=1e-10):
    """All periodic orbits whose anchors lie inside the chart box.

    One-dimensional charts are scanned for sign changes of ``Pi(x) - x``;
    higher-dimensional ones use a coarse grid of Newton starts.  Each orbit
    gets its monodromy; the list is sorted by anchor coordinate.
    """
    m0 = model.with_sigma(0.0)
    lo, hi = model.primary.lo, model.primary.hi
    d = len(lo)
    if d == 1:
        xs = np.linspace(lo[0], hi[0], n_scan)[1:-1, None]
        px, _ = fq.return_map(m0, xs)
        g = px[:, 0] - xs[:, 0]
        guesses = [xs[i] for i in np.flatnonzero(g == 0)]
        for i in np.flatnonzero(g[:-1] * g[1:] < 0):
            guesses.append(0.5 * (xs[i] + xs[i + 1]))
    else:
        axes = [np.linspace(a, b, 7)[1:-1] for a, b in zip(lo, hi)]
        guesses = [np.array(p) for p in itertools.product(*axes)]
    orbits = []
    for g0 in guesses:
        try:
            orb = fq.find_periodic_orbit(m0, g0, tol=tol)
        except RandPoincareError:
            continue
        x = orb.chart_point
        if np.any(x < lo) or np.any(x > hi):
            continue
        if any(np.linalg.norm(x - o.chart_point) < 1e-6 for o in orbits):
            continue
        fq.monodromy(m0, orb)
        orbits.append(orb)
    orbits.sort(key=lambda o: tuple(o.chart_point))
    return orbits


def exponents_for(model, stable, cfg):
    """Exponent matrix in the order of ``stable``: the configured one, or the
    analytic quasipotential of a radial catalog model."""
    if cfg.H is not None:
        H = np.array(cfg.H, dtype=float)
        if H.shape != (len(stable), len(stable)):
            raise ConfigError(f"H must be {len(stable)}x{len(stable)}")
        np.fill_diagonal(H, np.inf)
        return H, "user"
    spec = model.spec or {}
    if spec.get("catalog") == "reference":
        roots = sde.REFERENCE_ROOTS
    elif spec.get("catalog") == "radial":
        roots = spec["roots"]
    else:
        raise ConfigError("an exponent matrix H is required for this model")
    return ms.reference_exponents(roots, [float(x[0]) for x in stable]), "analytic"


# ---------------------------------------------------------------------------
# CSV writers


def _f(v):
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_orbits_csv(path, orbits):
    """``index, anchor_*, period, stable, multiplier_re_*, multiplier_im_*``."""
    if not orbits:
        write_csv(path, ["index"], [])
        return
    d = len(orbits[0].chart_point)
    D = len(orbits[0].multipliers)
    header = (["index"] + [f"anchor_{i}" for i in range(d)] + ["period", "stable"]
              + [f"multiplier_re_{i}" for i in range(D)] + [f"multiplier_im_{i}" for i in range(D)])
    rows = []
    for i, o in enumerate(orbits):
        mult = np.asarray(o.multipliers, dtype=complex)
        mult = mult[np.argsort(-np.abs(mult))]
        rows.append([i] + [_f(v) for v in o.chart_point] + [_f(o.period), int(o.stable)]
                    + [_f(v.real) for v in mult] + [_f(v.imag) for v in mult])
    write_csv(path, header, rows)


def write_spectrum_csv(path, values):
    """``index, real, imag, modulus`` sorted by decreasing modulus."""
    vals = np.asarray(values, dtype=complex)
    write_csv(path, ["index", "real", "imag", "modulus"],
              [[i, _f(v.real), _f(v.imag), _f(abs(v))] for i, v in enumerate(vals)])


def write_vectors_csv(path, K, columns):
    """``cell, center_*, <name>...`` with one column per named vector."""
    centers = K.centers()
    header = (["cell"] + [f"center_{i}" for i in range(centers.shape[1])] + list(columns))
    cols = [np.real(np.asarray(v)) for v in columns.values()]
    rows = [[int(c)] + [_f(x) for x in centers[a]] + [_f(v[a]) for v in cols]
            for a, c in enumerate(K.cells)]
    write_csv(path, header, rows)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, (complex, np.complexfloating)):
        return [float(v.real), float(v.imag)]
    return v


def tag(s2):
    return f"s2_{float(s2):g}"


# ---------------------------------------------------------------------------
# stages


def stage_orbits(cfg, model, out):
    with _stage("orbits"):
        orbits = find_orbits(model)
        write_orbits_csv(os.path.join(out, "orbits.csv"), orbits)
        stable = [o.chart_point for o in orbits if o.stable]
        if not stable:
            raise StageError("orbits", RandPoincareError("no stable periodic orbit in the chart"))
        return orbits, stable


def stage_kernel(cfg, model, s2, out):
    with _stage("kernel"):
        m = model.with_sigma(float(np.sqrt(s2)))
        K = pc.build_kernel(m, grid_for(model, cfg), cfg.samples_per_cell, dt=cfg.dt,
                            seed=cfg.seed, max_time=cfg.max_time, threads=cfg.threads)
        pc.save_kernel(K, os.path.join(out, f"kernel_{tag(s2)}.json"))
        pc.write_kernel_csv(K, os.path.join(out, f"kernel_{tag(s2)}.csv"))
        return K, m


def stage_structure(cfg, K, m, stable, out, s2):
    with _stage("structure"):
        st = ms.detect_balls(K, m, cfg.delta, stable)
        if st.N > 1:
            H, prov = exponents_for(m, stable, cfg)
            st = ms.order_structure(st, H, prov)
        write_json(os.path.join(out, f"structure_{tag(s2)}.json"), st.to_dict())
        return st


def stage_spectra(cfg, K, st, out, s2):
    """Spectrum, committors, QSDs and eigenfunction estimates."""
    with _stage("spectra"):
        count = min(K.size, max(10, st.N + 1))
        vals = np.linalg.eigvals(K.matrix)
        vals = vals[np.argsort(-np.abs(vals), kind="stable")]
        write_spectrum_csv(os.path.join(out, f"spectrum_{tag(s2)}.csv"), vals[:count])
        sp = mk.spectral_decomposition(vf.analysis_kernel(K), st.N)
        cols = {f"pi_{i}": sp.left[i] for i in range(st.N)}
        cols.update({f"phi_{i}": sp.right[i] for i in range(st.N)})
        for k in range(1, st.N):
            cols[f"committor_{k}"] = mk.committor(K, st.balls[k], st.M(k))
            cols[f"phi_estimate_{k}"] = ms.right_eigenfunction_estimate(K, st, k)
        write_vectors_csv(os.path.join(out, f"eigen_{tag(s2)}.csv"), K, cols)
        rows = []
        level = ms.level_data(K, st, st.N - 1) if st.N > 1 else None
        for i, b in enumerate(st.balls):
            KB = mk.kill(level.K0 if level is not None else K, b)
            q = level.qsds[i] if level is not None else mk.qsd(KB)
            for a, c in enumerate(KB.cells):
                rows.append([i + 1, int(c), _f(q.lambda0), _f(q.pi[a]), _f(q.phi[a])])
        write_csv(os.path.join(out, f"qsd_{tag(s2)}.csv"),
                  ["ball", "cell", "lambda0", "pi", "phi"], rows)
        return level


def stage_checks(cfg, K, st, out, s2):
    """Per-kernel checks.  Returns ``(report dict, hard failures, soft failures)``."""
    report, hard, soft = {}, [], []
    with _stage("verify"):
        if "exact" in cfg.checks:
            ex = vf.exact_identities(K, st)
            report["exact"] = {k: {"error": e, "tolerance": t, "pass": bool(e <= t)}
                               for k, (e, t) in ex.items()}
            hard += [f"exact:{k}" for k, v in report["exact"].items() if not v["pass"]]
        if "theorems" in cfg.checks and st.N > 1:
            sigma = float(np.sqrt(s2))
            reps = [vf.check_eigenvalues(K, st, sigma)]
            for k in range(1, st.N):
                reps += [vf.check_eigenfunctions(K, st, k), vf.check_hitting_times(K, st, k)]
            report["theorems"] = [r.to_dict() for r in reps]
            soft += [f"theorems:{r.check_name}" for r in reps if not r.passed]
        if "certificates" in cfg.checks and st.N > 1:
            certs = []
            k = st.N - 1
            level = ms.level_data(K, st, k)
            bt = ms.block_triangularize(np.eye(k + 1) - level.P)
            if bt.residual > 1e-12:
                hard.append("certificates:block_triangularization_residual")
            _, kc = ms.kstar_spectrum(level.P, bt)
            certs += kc
            certs.append(ms.resolvent_certificate(level.P, bt))
            for b in st.balls[:k + 1]:
                KB = mk.kill(level.K0, b)
                certs.append(ms.spectral_gap_bound(KB, 1))
                certs.append(ms.oscillation_bound(KB, 1))
            for m in cfg.m_values:
                for c in ms.norm_certificates(K, st, cfg.u, m):
                    c.inputs["m"] = float(m)
                    certs.append(c)
            report["certificates"] = [c.to_dict() for c in certs]
            # the oscillation constant is unquantified and the literal bound
            # on the other eigenvalues is known to be loose; both are reported only
            soft += [f"certificates:{c.name}" for c in certs
                     if c.satisfied is False and c.name not in ("oscillation", "others")]
    write_json(os.path.join(out, f"report_{tag(s2)}.json"), report)
    return report, hard, soft


def run_pipeline(cfg, log=None):
    """Run every stage for every sigma in the schedule.

    Returns ``(status, summary)`` with status 0 when all counted checks
    pass and 1 otherwise.  Stage failures raise :class:`StageError`.
    """
    log = log or (lambda msg: None)
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), cfg.to_dict())
    model = load_model(cfg.model)
    log("orbits")
    orbits, stable = stage_orbits(cfg, model, out)
    kernels, structures, hard, soft = [], [], [], []
    for s2 in cfg.sigma2:
        log(f"kernel sigma^2={s2:g}")
        K, m = stage_kernel(cfg, model, s2, out)
        st = stage_structure(cfg, K, m, stable, out, s2)
        log(f"spectra sigma^2={s2:g}")
        stage_spectra(cfg, K, st, out, s2)
        log(f"checks sigma^2={s2:g}")
        _, h, s = stage_checks(cfg, K, st, out, s2)
        hard += [f"{tag(s2)}:{x}" for x in h]
        soft += [f"{tag(s2)}:{x}" for x in s]
        kernels.append(K)
        structures.append(st)
    summary = {"orbits": len(orbits), "stable_orbits": len(stable),
               "sigma2": cfg.sigma2, "hard_failures": hard, "soft_failures": soft}
    with _stage("verify"):
        if len(cfg.sigma2) > 1 and structures[0].N > 1 and "theorems" in cfg.checks:
            sig = np.sqrt(cfg.sigma2)
            summary["gap"] = vf.check_gap(kernels, structures, sig).to_dict()
            if len(cfg.sigma2) >= 3:
                pts = [(s, vf.exit_probability(K, st, 1))
                       for s, K, st in zip(sig, kernels, structures)]
                H, c, r2 = vf.estimate_exponent(pts)
                summary["exponent"] = {"H": H, "intercept": c, "r2": r2,
                                       "points": [list(p) for p in pts],
                                       "analytic": float(structures[0].H[1, 0])}
    write_json(os.path.join(out, "summary.json"), summary)
    failed = hard + (soft if cfg.strict else [])
    return (1 if failed else 0), summary
