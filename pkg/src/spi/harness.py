"""Configuration, check drivers, and batch runs.

Three verification drivers operate on a configured problem: the composition
law (split the time interval, integrate the product of the two half
propagators over the intermediate point by stationary phase, compare with
the direct series), volume-preserving coordinate invariance, and batch
divergence reports.  Configs are flat INI files; all outputs are
deterministic documents.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field

import numpy as np

from spi.amplitude import (
    AmplitudeError,
    QuadConfig,
    assemble,
    divergence_report,
)
from spi.classical import Problem, SolverConfig, solve_bvp, van_vleck
from spi.expr import ExprLagrangian, TransformedLagrangian, parse
from spi.green import build_green
from spi.numutil import richardson_jacobian
from spi.stphase import formal_integral

__all__ = [
    "ConfigError",
    "CheckError",
    "RunConfig",
    "CheckReport",
    "fubini_check",
    "coordinate_check",
    "run",
]


class ConfigError(ValueError):
    pass


class CheckError(RuntimeError):
    pass


def _floats(text):
    return np.array([float(x) for x in text.replace(",", " ").split()])


@dataclass
class RunConfig:
    dimension: int
    lagrangian: str
    t0: float
    t1: float
    q0: np.ndarray
    q1: np.ndarray
    v0_guess: np.ndarray | None = None
    parameters: dict = field(default_factory=dict)
    loop_order: int = 1
    quad_order: int = 32
    grid: int = 201
    fd_step: float = 1e-2
    rtol: float = 1e-12
    atol: float = 1e-12
    split_time: float | None = None
    coord_map: list | None = None
    stphase: dict | None = None
    source_text: str = ""

    @staticmethod
    def load(path):
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        with open(path) as fh:
            text = fh.read()
        return RunConfig.from_parser(cp, text)

    @staticmethod
    def from_parser(cp, text=""):
        if "stphase" in cp and "problem" not in cp:
            st = dict(cp["stphase"])
            cfg = RunConfig(
                dimension=int(st.get("dimension", "1")),
                lagrangian="0",
                t0=0.0,
                t1=1.0,
                q0=np.zeros(1),
                q1=np.zeros(1),
                stphase=st,
                source_text=text,
            )
            return cfg
        if "problem" not in cp:
            raise ConfigError("missing [problem] section")
        prob = cp["problem"]
        for key in ("dimension", "lagrangian", "t0", "t1", "q0", "q1"):
            if key not in prob:
                raise ConfigError(f"missing required key {key!r} in [problem]")
        d = int(prob["dimension"])
        params = {k: float(v) for k, v in cp.items("parameters")} if "parameters" in cp else {}
        comp = cp["compute"] if "compute" in cp else {}
        cfg = RunConfig(
            dimension=d,
            lagrangian=prob["lagrangian"],
            t0=float(prob["t0"]),
            t1=float(prob["t1"]),
            q0=_floats(prob["q0"]),
            q1=_floats(prob["q1"]),
            v0_guess=_floats(prob["v0_guess"]) if "v0_guess" in prob else None,
            parameters=params,
            loop_order=int(comp.get("loop_order", 1)),
            quad_order=int(comp.get("quad_order", 32)),
            grid=int(comp.get("grid", 201)),
            fd_step=float(comp.get("fd_step", 1e-2)),
            rtol=float(comp.get("rtol", 1e-12)),
            atol=float(comp.get("atol", 1e-12)),
            source_text=text,
        )
        if cfg.q0.size != d or cfg.q1.size != d:
            raise ConfigError("q0/q1 must list one value per dimension")
        if "fubini" in cp:
            if "split_time" not in cp["fubini"]:
                raise ConfigError("missing required key 'split_time' in [fubini]")
            cfg.split_time = float(cp["fubini"]["split_time"])
            if not cfg.t0 < cfg.split_time < cfg.t1:
                raise ConfigError("split_time must lie strictly between t0 and t1")
        if "coords" in cp:
            if "map" not in cp["coords"]:
                raise ConfigError("missing required key 'map' in [coords]")
            parts = [p.strip() for p in cp["coords"]["map"].split(";")]
            if len(parts) != d:
                raise ConfigError(
                    f"[coords] map needs {d} ';'-separated expressions, got {len(parts)}"
                )
            cfg.coord_map = parts
        if "stphase" in cp:
            cfg.stphase = dict(cp["stphase"])
        # validate the expressions up front
        parse(cfg.lagrangian, d, params)
        if cfg.coord_map:
            for src in cfg.coord_map:
                e = parse(src, d, params)
                _require_position_only(e)
        return cfg

    def lagrangian_object(self):
        return ExprLagrangian.parse(self.lagrangian, self.dimension, self.parameters)

    def problem(self):
        solver = SolverConfig(rtol=self.rtol, atol=self.atol)
        return Problem(
            self.lagrangian_object(),
            self.t0,
            self.t1,
            self.q0,
            self.q1,
            v0_guess=self.v0_guess,
            config=solver,
        )

    def quad(self):
        return QuadConfig(order=self.quad_order)

    def snapshot(self):
        return {
            "dimension": self.dimension,
            "lagrangian": self.lagrangian,
            "t0": self.t0,
            "t1": self.t1,
            "q0": list(map(float, np.atleast_1d(self.q0))),
            "q1": list(map(float, np.atleast_1d(self.q1))),
            "parameters": dict(sorted(self.parameters.items())),
            "loop_order": self.loop_order,
            "quad_order": self.quad_order,
            "fd_step": self.fd_step,
            "split_time": self.split_time,
            "map": self.coord_map,
        }


def _require_position_only(expression):
    from spi.expr import BinOp, Call, Neg, Var

    def walk(node):
        if isinstance(node, Var) and node.kind != "q":
            raise ConfigError("coordinate maps may reference only position variables")
        for child in getattr(node, "__dict__", {}).values():
            pass
        if isinstance(node, BinOp):
            walk(node.left)
            walk(node.right)
        elif isinstance(node, (Neg, Call)):
            walk(node.arg)

    walk(expression.root)


@dataclass
class CheckReport:
    """Order-by-order comparison rows plus named scalar checks."""

    name: str
    rows: list
    checks: dict
    passed: bool
    config_snapshot: dict

    def to_document(self):
        return {
            "check": self.name,
            "passed": bool(self.passed),
            "rows": self.rows,
            "checks": self.checks,
            "config": self.config_snapshot,
        }


def _fd_tensor_derivatives(f, x, h, max_rank):
    """[f(x), grad, hess, ...] up to max_rank by nested Richardson FD.

    f maps R^d to scalars or arrays; derivative axes are appended in front
    via repeated jacobians, then symmetrized implicitly by use.
    """
    out = [np.asarray(f(np.asarray(x, dtype=float)))]
    funcs = [f]
    for _ in range(max_rank):
        g = funcs[-1]

        def jac(y, g=g):
            return richardson_jacobian(g, y, h)

        funcs.append(jac)
        out.append(np.asarray(jac(np.asarray(x, dtype=float))))
    return out


def _assemble_at(problem, loop_order, quad):
    traj = solve_bvp(problem)
    green = build_green(traj)
    return traj, green, assemble(traj, green, loop_order, quad)


def _refuse_if_divergent(result, what, tol=1e-6):
    rep = divergence_report(result, tol)
    for m, entry in rep.items():
        if not entry["divergence_free"]:
            raise CheckError(
                f"{what} has uncancelled D0 content at order {m}; "
                "the composition law assumes divergence-free input"
            )


def fubini_check(config):
    """Composition-law check at the configured split time.

    Compares the direct series on [t0, t1] with the stationary-phase
    integral over the intermediate point of the product of the two
    sub-interval series, order by order through the loop cap.
    """
    if config.split_time is None:
        raise ConfigError("fubini check needs [fubini] split_time")
    M = config.loop_order
    quad = config.quad()
    h = config.fd_step
    problem = config.problem()
    d = config.dimension

    traj, green, full = _assemble_at(problem, M, quad)
    t = config.split_time
    q_cp = traj.position(t)
    v_cp = traj.velocity(t)

    lagr = problem.lagrangian
    base0 = Problem(
        lagr, problem.t0, t, problem.q0, q_cp, v0_guess=traj.v0, config=problem.config
    )
    base1 = Problem(
        lagr, t, problem.t1, q_cp, problem.q1, v0_guess=v_cp, config=problem.config
    )
    traj0, green0, res0 = _assemble_at(base0, M, quad)
    traj1, green1, res1 = _assemble_at(base1, M, quad)
    for result, label in ((full, "full interval"), (res0, "first piece"), (res1, "second piece")):
        _refuse_if_divergent(result, label)

    solve_memo = {}

    def pair_data(q):
        key = np.asarray(q, dtype=float).tobytes()
        if key not in solve_memo:
            p0 = base0.with_endpoints(q1=q, v0_guess=_guess(traj0, dq1=q - q_cp))
            p1 = base1.with_endpoints(q0=q, v0_guess=_guess(traj1, dq0=q - q_cp))
            s0 = solve_bvp(p0)
            s1 = solve_bvp(p1)
            solve_memo[key] = (s0, s1)
        return solve_memo[key]

    def _guess(tr, dq0=None, dq1=None):
        t0 = tr.problem.t0
        _, _, dphi0, dphi1 = tr.jacobi(t0)
        g = tr.v0.copy()
        if dq0 is not None:
            g = g + dphi0 @ dq0
        if dq1 is not None:
            g = g + dphi1 @ dq1
        return g

    def grad_sum(q):
        s0, s1 = pair_data(q)
        from spi.classical import s_gradients

        return s_gradients(s0)[1] + s_gradients(s1)[0]

    def b0(q):
        s0, s1 = pair_data(q)
        return np.sqrt(van_vleck(s0)[1] * van_vleck(s1)[1])

    # phase data at the critical point; tensors of rank r need r-1 nested
    # jacobians of the exact gradient
    g_cp = grad_sum(q_cp)
    stationarity = float(np.max(np.abs(g_cp)))
    max_a_rank = 2 * M + 2
    a_tensors = _fd_tensor_derivatives(grad_sum, q_cp, h, max_a_rank - 1)
    s0_cp, s1_cp = pair_data(q_cp)
    phase0 = s0_cp.action + s1_cp.action
    a_derivs = [np.array(phase0), np.zeros(d)] + list(a_tensors[1:])
    hess = 0.5 * (a_tensors[1] + a_tensors[1].T)
    a_derivs[2] = hess

    det_h = float(np.linalg.det(hess))
    eta_cp = int(np.sum(np.linalg.eigvalsh(hess) < 0))
    _, det_w_full = van_vleck(traj)
    _, det_w0 = van_vleck(traj0)
    _, det_w1 = van_vleck(traj1)

    checks = {}
    scale_s = 1.0 + abs(full.action)
    checks["critical_point_stationarity"] = {
        "value": stationarity,
        "tol": 1e-6,
        "passed": stationarity <= 1e-6 * scale_s,
    }
    add_res = abs(full.action - (res0.action + res1.action))
    checks["action_additivity"] = {
        "value": add_res,
        "tol": 1e-8,
        "passed": add_res <= 1e-8 * scale_s,
    }
    pref_lhs = det_w_full
    pref_rhs = det_w0 * det_w1 / abs(det_h)
    pref_res = abs(pref_lhs - pref_rhs) / abs(pref_lhs)
    checks["prefactor_identity"] = {
        "lhs": pref_lhs,
        "rhs": pref_rhs,
        "rel_residual": pref_res,
        "tol": 1e-8,
        "passed": pref_res <= 1e-8,
    }
    morse_lhs = full.morse_index
    morse_rhs = res0.morse_index + eta_cp + res1.morse_index
    checks["morse_additivity"] = {
        "lhs": morse_lhs,
        "rhs": morse_rhs,
        "passed": morse_lhs == morse_rhs,
    }

    # insertion data: b_k(q) = sqrt(|det W0||det W1|) * (series0 * series1)_k
    b_map = {0: _fd_tensor_derivatives(b0, q_cp, h, 2 * M)}
    if M >= 1:
        quad_small = quad

        def bk(q, k):
            s0, s1 = pair_data(q)
            g0 = build_green(s0)
            g1 = build_green(s1)
            r0 = assemble(s0, g0, M, quad_small)
            r1 = assemble(s1, g1, M, quad_small)
            tot = 0.0
            for i in range(k + 1):
                c0 = r0.series.get(i)
                c1 = r1.series.get(k - i)
                tot += (c0.finite if c0 else 0.0) * (c1.finite if c1 else 0.0)
            return np.sqrt(van_vleck(s0)[1] * van_vleck(s1)[1]) * tot

        for k in range(1, M + 1):
            rank_k = 2 * (M - k)
            b_map[k] = _fd_tensor_derivatives(lambda q, k=k: bk(q, k), q_cp, h, rank_k)

    exp = formal_integral(a_derivs, b_derivs=b_map, loop_order=M)
    norm = np.sqrt(abs(det_h)) * np.sqrt(det_w_full)

    rows = []
    passed = all(c["passed"] for c in checks.values())
    for m in range(0, M + 1):
        lhs = full.series[m].finite
        rhs = exp.series.get(m, 0.0) / norm
        abs_res = abs(lhs - rhs)
        rel_res = abs_res / max(abs(lhs), abs(rhs), 1e-300)
        tol = 1e-8 if m == 0 else 1e-3
        # coefficients at FD-noise level count as zero on both sides
        ok = (abs_res <= tol) if max(abs(lhs), abs(rhs)) < 1e-9 else (rel_res <= tol)
        rows.append(
            {
                "order": m,
                "lhs": lhs,
                "rhs": rhs,
                "abs_residual": abs_res,
                "rel_residual": rel_res,
                "tol": tol,
                "passed": ok,
            }
        )
        passed = passed and ok

    return CheckReport(
        name="fubini",
        rows=rows,
        checks=checks,
        passed=passed,
        config_snapshot=config.snapshot(),
    )


def coordinate_check(config):
    """Volume-preserving coordinate-invariance check.

    Solves the configured problem through the pushed-forward Lagrangian and
    the base problem at mapped endpoints, then compares phase data and the
    series order by order.
    """
    if not config.coord_map:
        raise ConfigError("coordinate check needs [coords] map")
    d = config.dimension
    M = config.loop_order
    quad = config.quad()
    base_l = config.lagrangian_object()
    maps = [parse(src, d, config.parameters) for src in config.coord_map]
    tl = TransformedLagrangian(base_l, maps)

    solver = SolverConfig(rtol=config.rtol, atol=config.atol)
    prob_t = Problem(
        tl, config.t0, config.t1, config.q0, config.q1,
        v0_guess=config.v0_guess, config=solver,
    )
    traj_t = solve_bvp(prob_t)

    # volume preservation along the path
    ts = np.linspace(config.t0, config.t1, 101)
    qs = traj_t.position(ts)
    dets = np.linalg.det(np.moveaxis(tl.map_jacobian(qs), -1, 0))
    vol_res = float(np.max(np.abs(np.abs(dets) - 1.0)))
    if vol_res > 1e-10:
        raise CheckError(
            f"map is not volume-preserving: max ||det df| - 1| = {vol_res:.3e}"
        )

    q0_img = tl.map_point(config.q0)
    q1_img = tl.map_point(config.q1)
    v0_img = tl.map_jacobian(traj_t.position(config.t0)) @ traj_t.velocity(config.t0)
    prob_b = Problem(
        base_l, config.t0, config.t1, q0_img, q1_img, v0_guess=v0_img, config=solver
    )
    traj_b = solve_bvp(prob_b)

    green_t = build_green(traj_t)
    green_b = build_green(traj_b)
    res_t = assemble(traj_t, green_t, M, quad)
    res_b = assemble(traj_b, green_b, M, quad)

    checks = {"volume_residual": {"value": vol_res, "tol": 1e-10, "passed": True}}
    s_res = abs(res_t.action - res_b.action) / (1.0 + abs(res_b.action))
    checks["action_match"] = {"value": s_res, "tol": 1e-8, "passed": s_res <= 1e-8}
    w_res = abs(res_t.log_abs_det_w - res_b.log_abs_det_w)
    checks["log_det_w_match"] = {"value": w_res, "tol": 1e-8, "passed": w_res <= 1e-8}
    checks["morse_match"] = {
        "lhs": res_t.morse_index,
        "rhs": res_b.morse_index,
        "passed": res_t.morse_index == res_b.morse_index,
    }

    rows = []
    passed = all(c["passed"] for c in checks.values())
    for m in range(M + 1):
        pt = res_t.series[m]
        pb = res_b.series[m]
        n = max(pt.degree, pb.degree) + 1
        lhs = [pt.coeff(k) for k in range(n)]
        rhs = [pb.coeff(k) for k in range(n)]
        abs_res = max(abs(a - b) for a, b in zip(lhs, rhs))
        scale = max(max(map(abs, lhs)), max(map(abs, rhs)), 1e-300)
        rel_res = abs_res / scale
        tol = 1e-8 if m == 0 else 1e-4
        ok = (abs_res <= tol) if scale < 1e-9 else (rel_res <= tol)
        rows.append(
            {
                "order": m,
                "lhs": lhs,
                "rhs": rhs,
                "abs_residual": abs_res,
                "rel_residual": rel_res,
                "tol": tol,
                "passed": ok,
            }
        )
        passed = passed and ok

    return CheckReport(
        name="coords",
        rows=rows,
        checks=checks,
        passed=passed,
        config_snapshot=config.snapshot(),
    )


# ---------------------------------------------------------------------------
# subcommand layer


def _document_bytes(doc):
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def run_propagate(config):
    _, _, result = _assemble_at(config.problem(), config.loop_order, config.quad())
    doc = result.to_document()
    doc["config"] = config.snapshot()
    return doc


def run_green_grid(config, grid=None, dsigma=0, dtau=0):
    traj = solve_bvp(config.problem())
    rep = build_green(traj)
    n = grid or min(config.grid, 201)
    ts = np.linspace(config.t0, config.t1, n)
    S, T = np.meshgrid(ts, ts, indexing="ij")
    val = rep.evaluate(S.ravel(), T.ravel(), dsigma, dtau)
    d = config.dimension
    lines = []
    header = ["sigma", "tau"] + [f"g{i+1}{j+1}" for i in range(d) for j in range(d)]
    lines.append(",".join(header))
    smooth = val.smooth.reshape(d * d, -1)
    for p in range(S.size):
        row = [repr(float(S.ravel()[p])), repr(float(T.ravel()[p]))]
        row += [repr(float(smooth[k, p])) for k in range(d * d)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def run_divergences(configs):
    entries = []
    all_free = True
    for cfg in configs:
        _, _, result = _assemble_at(cfg.problem(), cfg.loop_order, cfg.quad())
        rep = divergence_report(result)
        free = all(entry["divergence_free"] for entry in rep.values())
        all_free = all_free and free
        entries.append(
            {
                "config": cfg.snapshot(),
                "orders": {
                    str(m): {
                        "divergence_free": entry["divergence_free"],
                        "degrees": {
                            str(k): v for k, v in entry["degrees"].items()
                        },
                    }
                    for m, entry in rep.items()
                },
                "divergence_free": free,
            }
        )
    return {"reports": entries, "all_divergence_free": all_free}


def run_stphase_oracle(config):
    from spi.expr import evaluate, jet_eval

    st = config.stphase or {}
    for key in ("function", "center"):
        if key not in st:
            raise ConfigError(f"missing required key {key!r} in [stphase]")
    N = int(st.get("dimension", "1"))
    M = int(st.get("loop_order", "2"))
    hbars = [float(x) for x in st.get("hbars", "0.2 0.1 0.05").replace(",", " ").split()]
    center = _floats(st["center"])
    half = float(st.get("halfwidth", "8"))
    expr = parse(st["function"], N)
    jet = jet_eval(expr, 0.0, np.zeros(N), center, 2 * M + 2, tau_order=0)
    a_derivs = []
    for r in range(2 * M + 3):
        t = np.empty((N,) * r)
        for idx in np.ndindex(*t.shape):
            alpha = [0] * (2 * N + 1)
            for i in idx:
                alpha[1 + N + i] += 1
            t[idx] = jet.partial(tuple(alpha))
        a_derivs.append(t)

    def A(*xs):
        return evaluate(expr, 0.0, np.zeros((N,) + np.shape(xs[0])), np.stack(xs))

    region = [(c - half, c + half) for c in center]
    rows = []
    from spi.stphase import numeric_oracle

    for hbar in hbars:
        i_num = numeric_oracle(A, None, region if N > 1 else region[0], hbar)
        row = {"hbar": hbar}
        for m in range(M + 1):
            exp = formal_integral(a_derivs, loop_order=max(m, 1))
            exp.series = {k: v for k, v in exp.series.items() if k <= m}
            i_m = exp.value(hbar)
            row[f"ratio_err_M{m}"] = abs(i_m / i_num - 1.0)
        rows.append(row)
    orders = {}
    for m in range(M + 1):
        errs = [r[f"ratio_err_M{m}"] for r in rows]
        obs = [
            np.log(errs[i] / errs[i + 1]) / np.log(hbars[i] / hbars[i + 1])
            for i in range(len(errs) - 1)
            if errs[i + 1] > 0
        ]
        orders[f"M{m}"] = min(obs) if obs else None
    return {"rows": rows, "observed_orders": orders, "config": config.snapshot()}


def run(config, subcommand, out=None, **kw):
    """Dispatch a subcommand; returns (exit_code, document_bytes)."""
    if subcommand == "propagate":
        payload = _document_bytes(run_propagate(config))
        code = 0
    elif subcommand == "green":
        payload = run_green_grid(config, **kw).encode()
        code = 0
    elif subcommand == "fubini":
        report = fubini_check(config)
        payload = _document_bytes(report.to_document())
        code = 0 if report.passed else 1
    elif subcommand == "coords":
        report = coordinate_check(config)
        payload = _document_bytes(report.to_document())
        code = 0 if report.passed else 1
    elif subcommand == "divergences":
        configs = config if isinstance(config, list) else [config]
        doc = run_divergences(configs)
        payload = _document_bytes(doc)
        code = 0 if doc["all_divergence_free"] else 1
    elif subcommand == "stphase-oracle":
        payload = _document_bytes(run_stphase_oracle(config))
        code = 0
    else:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    if out is not None:
        with open(out, "wb") as fh:
            fh.write(payload)
    return code, payload
