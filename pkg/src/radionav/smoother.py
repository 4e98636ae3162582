"""Sliding-window factor-graph smoother over navigation states.

Keyframes are NavState nodes linked by preintegrated-IMU factors and bias
random-walk factors, with unary aiding factors attached per keyframe.  The
robustified nonlinear least squares

    sum_k rho( || h_k(x) + H_k xi - z_k ||^2_{P_k} )

is solved by Gauss-Newton with on-manifold retraction x <- x * Exp(xi) and
iteratively reweighted least squares for the robust kernels; rank-deficient
or cost-increasing steps fall back to Levenberg-Marquardt damping.  Nodes
older than the lag are absorbed into a Gaussian prior on the oldest
retained node by Schur complement, linearized at the estimate at removal
time and never relinearized afterward.

Per-node tangent ordering: [theta, rho, velocity, accel bias, gyro bias,
baro bias (optional)]; see states.py.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import factors as meas
from .lie import right_jacobian_inv, so3_log
from .preintegration import GravityModel, PreintegratedImu, predict, residual_and_jacobians
from .robust import RobustKernel
from .states import NavState, retract

_NO_KERNEL = RobustKernel("none")


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False


def _decoupled_delta(mean: NavState, x: NavState) -> np.ndarray:
    d = np.zeros(mean.dim)
    d[0:3] = so3_log(mean.rotation.T @ x.rotation)
    d[3:6] = x.position - mean.position
    d[6:9] = x.velocity - mean.velocity
    d[9:12] = x.bias.accel - mean.bias.accel
    d[12:15] = x.bias.gyro - mean.bias.gyro
    if mean.baro_bias is not None:
        d[15] = x.baro_bias - mean.baro_bias
    return d


def _decoupled_jacobian(mean: NavState, x: NavState) -> np.ndarray:
    """Exact Jacobian of the decoupled delta w.r.t. the tangent of x."""
    dim = mean.dim
    j = np.eye(dim)
    j[0:3, 0:3] = right_jacobian_inv(so3_log(mean.rotation.T @ x.rotation))
    j[3:6, 3:6] = x.rotation
    return j


class GaussianPriorFactor:
    """Linear-Gaussian prior a + S * delta(x) in decoupled coordinates,
    already whitened (rows of S may be fewer than the state dimension when
    the marginal information is rank deficient)."""

    kernel = _NO_KERNEL
    may_degenerate = False

    def __init__(self, node: int, mean: NavState, sqrt_info: np.ndarray,
                 rhs: np.ndarray | None = None):
        self.node = node
        self.mean = mean
        self.sqrt_info = np.atleast_2d(np.asarray(sqrt_info, dtype=float))
        self.rhs = (np.zeros(self.sqrt_info.shape[0]) if rhs is None
                    else np.asarray(rhs, dtype=float))

    @staticmethod
    def from_covariance(node: int, mean: NavState, covariance) -> "GaussianPriorFactor":
        cov = np.asarray(covariance, dtype=float)
        info = np.linalg.inv(cov)
        info = 0.5 * (info + info.T)
        return GaussianPriorFactor(node, mean, np.linalg.cholesky(info).T)

    @property
    def nodes(self):
        return (self.node,)

    @property
    def dim(self):
        return self.sqrt_info.shape[0]

    def whitened(self, states):
        x = states[self.node]
        r = self.rhs + self.sqrt_info @ _decoupled_delta(self.mean, x)
        j = self.sqrt_info @ _decoupled_jacobian(self.mean, x)
        return r, {self.node: j}


class ImuGraphFactor:
    """Relative-motion constraint from a preintegrated IMU segment."""

    kernel = _NO_KERNEL
    may_degenerate = False

    def __init__(self, node_i: int, node_j: int, preint: PreintegratedImu,
                 gravity: GravityModel):
        self.node_i = node_i
        self.node_j = node_j
        self.preint = preint
        self.gravity = gravity
        cov = 0.5 * (preint.covariance + preint.covariance.T)
        # keep the factor well posed even for near-noiseless segments
        cov = cov + np.eye(9) * 1e-16
        self._chol = np.linalg.cholesky(cov)
        self.dim = 9

    @property
    def nodes(self):
        return (self.node_i, self.node_j)

    def whitened(self, states):
        xi_state = states[self.node_i]
        xj_state = states[self.node_j]
        r, blocks = residual_and_jacobians(xi_state, xj_state, self.preint, self.gravity)
        d = xi_state.dim
        ji = np.zeros((9, d))
        ji[:, 0:6] = blocks["pose_i"]
        ji[:, 6:9] = blocks["vel_i"]
        ji[:, 9:15] = blocks["bias"]
        jj = np.zeros((9, d))
        jj[:, 0:6] = blocks["pose_j"]
        jj[:, 6:9] = blocks["vel_j"]
        rw = scipy.linalg.solve_triangular(self._chol, r, lower=True)
        jiw = scipy.linalg.solve_triangular(self._chol, ji, lower=True)
        jjw = scipy.linalg.solve_triangular(self._chol, jj, lower=True)
        return rw, {self.node_i: jiw, self.node_j: jjw}


class BiasWalkFactor:
    """Random-walk constraint between consecutive bias states (and baro
    bias when tracked)."""

    kernel = _NO_KERNEL
    may_degenerate = False

    def __init__(self, node_i: int, node_j: int, dt: float,
                 accel_walk: float, gyro_walk: float,
                 baro_walk: float | None = None):
        self.node_i = node_i
        self.node_j = node_j
        self.with_baro = baro_walk is not None
        self.dim = 7 if self.with_baro else 6
        sigmas = [accel_walk] * 3 + [gyro_walk] * 3
        if self.with_baro:
            sigmas.append(baro_walk)
        self._whiten = 1.0 / (np.array(sigmas) * np.sqrt(max(dt, 1e-12)))

    @property
    def nodes(self):
        return (self.node_i, self.node_j)

    def whitened(self, states):
        xi_state = states[self.node_i]
        xj_state = states[self.node_j]
        d = xi_state.dim
        r = np.zeros(self.dim)
        r[0:3] = xj_state.bias.accel - xi_state.bias.accel
        r[3:6] = xj_state.bias.gyro - xi_state.bias.gyro
        ji = np.zeros((self.dim, d))
        jj = np.zeros((self.dim, d))
        ji[0:6, 9:15] = -np.eye(6)
        jj[0:6, 9:15] = np.eye(6)
        if self.with_baro:
            r[6] = xj_state.baro_bias - xi_state.baro_bias
            ji[6, 15] = -1.0
            jj[6, 15] = 1.0
        w = self._whiten
        return r * w, {self.node_i: ji * w[:, None], self.node_j: jj * w[:, None]}


class _UnaryFactor:
    """Base for aiding measurement factors attached to a single keyframe."""

    may_degenerate = False

    def __init__(self, covariance, kernel: RobustKernel | None, timestamp: float):
        self.node: int | None = None
        self.timestamp = timestamp
        self.kernel = kernel if kernel is not None else _NO_KERNEL
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        self._chol = np.linalg.cholesky(cov)
        self.dim = cov.shape[0]

    @property
    def nodes(self):
        return (self.node,)

    def _residual_jacobian(self, state):
        raise NotImplementedError

    def whitened(self, states):
        state = states[self.node]
        r, j_pose, j_extra = self._residual_jacobian(state)
        d = state.dim
        j = np.zeros((self.dim, d))
        j[:, 0:6] = -j_pose  # residual = z - h
        if j_extra is not None:
            col, block = j_extra
            j[:, col:col + block.shape[1]] = -block
        rw = scipy.linalg.solve_triangular(self._chol, r, lower=True)
        jw = scipy.linalg.solve_triangular(self._chol, j, lower=True)
        return rw, {self.node: jw}


class PositionFactor(_UnaryFactor):
    def __init__(self, z, covariance, kernel=None, timestamp=0.0):
        super().__init__(covariance, kernel, timestamp)
        self.z = np.asarray(z, dtype=float)

    def _residual_jacobian(self, state):
        r, h = meas.gnss_position_factor(state, self.z)
        return r, h, None


class CompassFactor(_UnaryFactor):
    def __init__(self, z, baseline: meas.CompassBaseline, covariance,
                 kernel=None, timestamp=0.0):
        super().__init__(covariance, kernel, timestamp)
        self.z = np.asarray(z, dtype=float)
        self.baseline = baseline

    def _residual_jacobian(self, state):
        r, h = meas.gnss_compass_factor(state, self.z, self.baseline)
        return r, h, None


class AoaFactor(_UnaryFactor):
    may_degenerate = True

    def __init__(self, z: meas.AoaMeasurement, cfg: meas.RadioFrameConfig,
                 kernel=None):
        super().__init__(z.noise_cov, kernel, z.timestamp)
        self.z = z
        self.cfg = cfg

    def _residual_jacobian(self, state):
        r, h = meas.aoa_factor(state, self.z, self.cfg)
        return r, h, None


class RangeFactor(_UnaryFactor):
    may_degenerate = True

    def __init__(self, z: meas.RangeMeasurement, cfg: meas.RadioFrameConfig,
                 kernel=None):
        super().__init__([[z.variance]], kernel, z.timestamp)
        self.z = z
        self.cfg = cfg

    def _residual_jacobian(self, state):
        r, h = meas.range_factor(state, self.z, self.cfg)
        return r, h, None


class BaroAltitudeFactor(_UnaryFactor):
    def __init__(self, z: meas.BaroMeasurement, kernel=None):
        super().__init__([[z.variance]], kernel, z.timestamp)
        self.z = z

    def _residual_jacobian(self, state):
        if state.baro_bias is None:
            raise ValueError("baro factor requires a state with baro bias")
        r, h_pose, h_bias = meas.baro_factor(state, state.baro_bias, self.z)
        return r, h_pose, (15, h_bias)


@dataclass
class SmootherConfig:
    lag: float = 2.0
    gravity: GravityModel = field(default_factory=GravityModel)
    accel_bias_walk: float = 1e-4   # m/s^2 per sqrt(s)
    gyro_bias_walk: float = 1e-6    # rad/s per sqrt(s)
    baro_bias_walk: float = 1e-3    # m per sqrt(s)
    max_iterations: int = 50
    cost_decrease_tol: float = 1e-9
    step_tol: float = 1e-10
    lm_lambda0: float = 1e-6
    lm_lambda_max: float = 1e8
    keyframe_slack: float = 1e-3    # batching window for aiding timestamps


class FixedLagSmoother:
    """Fixed-lag factor-graph window over NavState keyframes."""

    def __init__(self, config: SmootherConfig | None = None):
        self.config = config if config is not None else SmootherConfig()
        self._keys: list[int] = []
        self._times: list[float] = []
        self._states: dict[int, NavState] = {}
        self.factors: list = []
        self._next_key = 0

    # ------------------------------------------------------------------
    @property
    def node_count(self) -> int:
        return len(self._keys)

    @property
    def newest_key(self) -> int:
        return self._keys[-1]

    def state(self, key: int) -> NavState:
        return self._states[key]

    def timestamps(self):
        return list(self._times)

    # ------------------------------------------------------------------
    def initialize(self, state: NavState, covariance) -> int:
        if self._keys:
            raise ValueError("window already initialized")
        key = self._new_node(state)
        self.factors.append(GaussianPriorFactor.from_covariance(key, state, covariance))
        return key

    def add_keyframe(self, preint: PreintegratedImu, aiding, timestamp=None) -> int:
        """Predict a new node through the preintegrated segment and attach
        aiding factors to it."""
        if not self._keys:
            raise ValueError("initialize() the window first")
        prev_key = self._keys[-1]
        prev_state = self._states[prev_key]
        t_new = (prev_state.timestamp + preint.delta_time
                 if timestamp is None else timestamp)
        if t_new <= self._times[-1]:
            raise ValueError(
                f"keyframe timestamp {t_new} not after previous {self._times[-1]}")
        slack = self.config.keyframe_slack
        for f in aiding:
            if not (self._times[-1] - slack <= f.timestamp <= t_new + slack):
                raise ValueError(
                    f"aiding timestamp {f.timestamp} outside keyframe interval "
                    f"({self._times[-1]}, {t_new}]")

        new_state = predict(prev_state, preint, self.config.gravity).with_timestamp(t_new)
        key = self._new_node(new_state)
        self.factors.append(ImuGraphFactor(prev_key, key, preint, self.config.gravity))
        baro_walk = (self.config.baro_bias_walk
                     if new_state.baro_bias is not None else None)
        self.factors.append(BiasWalkFactor(
            prev_key, key, max(preint.delta_time, 1e-9),
            self.config.accel_bias_walk, self.config.gyro_bias_walk, baro_walk))
        for f in aiding:
            f.node = key
            self.factors.append(f)
        return key

    def _new_node(self, state: NavState) -> int:
        key = self._next_key
        self._next_key += 1
        self._keys.append(key)
        self._times.append(state.timestamp)
        self._states[key] = state
        return key

    # ------------------------------------------------------------------
    def _dim(self) -> int:
        return self._states[self._keys[0]].dim

    def _offsets(self):
        d = self._dim()
        return {k: i * d for i, k in enumerate(self._keys)}, d * len(self._keys)

    def _cost(self, states) -> float:
        total = 0.0
        for f in self.factors:
            try:
                r, _ = f.whitened(states)
            except meas.UnusableMeasurement:
                continue
            total += float(np.sum(f.kernel.cost(r)))
        return total

    def _build_normal_equations(self, states):
        offsets, n = self._offsets()
        d = self._dim()
        h = np.zeros((n, n))
        g = np.zeros(n)
        cost = 0.0
        for f in self.factors:
            try:
                r, jac = f.whitened(states)
            except meas.UnusableMeasurement:
                continue
            cost += float(np.sum(f.kernel.cost(r)))
            sw = np.sqrt(f.kernel.weight(r))
            items = [(offsets[k], sw[:, None] * j) for k, j in jac.items()]
            for oi, jw in items:
                g[oi:oi + d] += jw.T @ (sw * r)
                for oj, jw2 in items:
                    h[oi:oi + d, oj:oj + d] += jw.T @ jw2
        return h, g, cost

    @staticmethod
    def _banded_upper(h, half_bw):
        n = h.shape[0]
        ab = np.zeros((half_bw + 1, n))
        for off in range(half_bw + 1):
            ab[half_bw - off, off:] = np.diagonal(h, off)
        return ab

    def _solve(self, h, g, lam=0.0):
        # Jacobi preconditioning: factor information spans many decades
        # (tight IMU noise vs loose priors), which otherwise defeats the
        # Cholesky; with scaling, LM damping becomes Marquardt-style
        # (lambda times the diagonal).
        scale = np.sqrt(np.clip(np.diag(h), 1e-300, None))
        hs = h / scale[:, None] / scale[None, :]
        d = self._dim()
        half_bw = min(2 * d - 1, h.shape[0] - 1)
        ab = self._banded_upper(hs, half_bw)
        ab[-1] += lam
        return scipy.linalg.solveh_banded(ab, -g / scale, lower=False) / scale

    def _build_stacked(self, states):
        """Whitened, IRLS-weighted Jacobian stack for the square-root path."""
        offsets, n = self._offsets()
        d = self._dim()
        rows_r, rows_j = [], []
        for f in self.factors:
            try:
                r, jac = f.whitened(states)
            except meas.UnusableMeasurement:
                continue
            sw = np.sqrt(f.kernel.weight(r))
            jf = np.zeros((r.size, n))
            for k, jk in jac.items():
                o = offsets[k]
                jf[:, o:o + d] = jk
            rows_r.append(sw * r)
            rows_j.append(sw[:, None] * jf)
        return np.vstack(rows_j), np.concatenate(rows_r)

    def _qr_step(self, states):
        # square-root solve: cond(A) = sqrt(cond(A^T A)), so this survives
        # information spreads that break the Cholesky on normal equations
        a, b = self._build_stacked(states)
        xi, *_ = np.linalg.lstsq(a, -b, rcond=None)
        return xi

    def _retract_all(self, states, xi):
        offsets, _ = self._offsets()
        d = self._dim()
        return {k: retract(states[k], xi[o:o + d]) for k, o in offsets.items()}

    def optimize(self) -> SolveReport:
        if not self._keys:
            raise ValueError("window is empty")
        cfg = self.config
        states = dict(self._states)
        report = SolveReport()
        for it in range(cfg.max_iterations):
            report.iterations = it + 1
            h, g, cost = self._build_normal_equations(states)
            if it == 0:
                report.initial_cost = cost

            def try_step(step):
                candidate = self._retract_all(states, step)
                return candidate, self._cost(candidate)

            stepped = False
            xi = None
            # plain Gauss-Newton on the (banded) normal equations
            try:
                xi = self._solve(h, g)
                candidate, new_cost = try_step(xi)
                stepped = new_cost <= cost + 1e-15
            except np.linalg.LinAlgError:
                pass
            # square-root fallback for ill-conditioned normal equations
            if not stepped:
                xi = self._qr_step(states)
                candidate, new_cost = try_step(xi)
                stepped = new_cost <= cost + 1e-15
            # Levenberg-Marquardt damping as a last resort
            if not stepped:
                lam = cfg.lm_lambda0
                while lam <= cfg.lm_lambda_max:
                    try:
                        xi = self._solve(h, g, lam)
                    except np.linalg.LinAlgError:
                        lam *= 10.0
                        continue
                    candidate, new_cost = try_step(xi)
                    if new_cost <= cost + 1e-15:
                        stepped = True
                        break
                    lam *= 10.0
            if not stepped:
                report.converged = False
                report.final_cost = cost
                self._states.update(states)
                return report
            states = candidate
            decrease = cost - new_cost
            report.final_cost = new_cost
            if (decrease <= cfg.cost_decrease_tol * max(cost, 1e-300)
                    or np.linalg.norm(xi) < cfg.step_tol):
                report.converged = True
                break
            cost = new_cost
        else:
            report.converged = False
        self._states.update(states)
        return report

    # ------------------------------------------------------------------
    def _marginal_block(self, h, offset):
        d = self._dim()
        n = h.shape[0]
        scale = np.sqrt(np.clip(np.diag(h), 1e-300, None))
        hs = h / scale[:, None] / scale[None, :]
        half_bw = min(2 * d - 1, n - 1)
        ab = self._banded_upper(hs, half_bw)
        rhs = np.zeros((n, d))
        rhs[offset:offset + d, :] = np.diag(1.0 / scale[offset:offset + d])
        try:
            x = scipy.linalg.solveh_banded(ab, rhs, lower=False) / scale[:, None]
            cov = x[offset:offset + d, :]
        except np.linalg.LinAlgError:
            # square-root fallback: cov = R^-1 R^-T from the QR of the stack
            a, _ = self._build_stacked(self._states)
            r = np.linalg.qr(a, mode="r")
            e = np.zeros((n, d))
            e[offset:offset + d, :] = np.eye(d)
            y = scipy.linalg.solve_triangular(r.T, e, lower=True)
            cov = (y.T @ y)
        return 0.5 * (cov + cov.T)

    def current_estimate(self):
        """Newest node state and its marginal covariance (tangent space)."""
        if not self._keys:
            raise ValueError("window is empty")
        h, _, _ = self._build_normal_equations(self._states)
        cov = self._marginal_block(h, h.shape[0] - self._dim())
        return self._states[self.newest_key], cov

    def marginal_covariance(self, key: int):
        h, _, _ = self._build_normal_equations(self._states)
        offsets, _ = self._offsets()
        return self._marginal_block(h, offsets[key])

    # ------------------------------------------------------------------
    def marginalize(self, now: float) -> None:
        """Drop nodes older than now - lag, absorbing their information into
        a Gaussian prior on the oldest retained node."""
        cutoff = now - self.config.lag
        drop = [k for k, t in zip(self._keys, self._times) if t < cutoff]
        if not drop or len(drop) == len(self._keys):
            drop = drop[:len(self._keys) - 1]  # always retain one node
        if not drop:
            return
        drop_set = set(drop)
        involved = [f for f in self.factors if any(k in drop_set for k in f.nodes)]
        boundary = sorted({k for f in involved for k in f.nodes if k not in drop_set})
        if len(boundary) != 1:
            raise RuntimeError("marginalization expects a single boundary node")
        b_key = boundary[0]

        order = drop + [b_key]
        d = self._dim()
        offsets = {k: i * d for i, k in enumerate(order)}
        n = d * len(order)
        lam = np.zeros((n, n))
        eta = np.zeros(n)
        for f in involved:
            try:
                r, jac = f.whitened(self._states)
            except meas.UnusableMeasurement:
                continue
            sw = np.sqrt(f.kernel.weight(r))
            items = [(offsets[k], sw[:, None] * j) for k, j in jac.items()]
            for oi, jw in items:
                eta[oi:oi + d] += jw.T @ (sw * r)
                for oj, jw2 in items:
                    lam[oi:oi + d, oj:oj + d] += jw.T @ jw2

        nd = d * len(drop)
        lam_dd = lam[:nd, :nd]
        lam_db = lam[:nd, nd:]
        lam_bb = lam[nd:, nd:]
        # solve instead of invert; regularize unobserved dropped directions
        reg = 1e-12 * max(np.trace(lam_dd) / max(nd, 1), 1.0)
        sol = np.linalg.solve(lam_dd + reg * np.eye(nd), np.column_stack([lam_db, eta[:nd]]))
        lam_marg = lam_bb - lam_db.T @ sol[:, :d]
        eta_marg = eta[nd:] - lam_db.T @ sol[:, d]

        # express in the decoupled prior coordinates at the boundary estimate
        b_state = self._states[b_key]
        t = _decoupled_jacobian(b_state, b_state)  # xi -> delta, here delta==xi up to R
        t_inv = np.linalg.inv(t)
        lam_delta = t_inv.T @ lam_marg @ t_inv
        eta_delta = t_inv.T @ eta_marg
        lam_delta = 0.5 * (lam_delta + lam_delta.T)

        evals, evecs = np.linalg.eigh(lam_delta)
        floor = max(evals.max(), 0.0) * 1e-12
        keep = evals > floor
        s = (np.sqrt(evals[keep])[:, None]) * evecs[:, keep].T
        rhs = (evecs[:, keep].T @ eta_delta) / np.sqrt(evals[keep])

        involved_ids = {id(f) for f in involved}
        self.factors = [f for f in self.factors if id(f) not in involved_ids]
        self.factors.append(GaussianPriorFactor(b_key, b_state, s, rhs))
        for k in drop:
            idx = self._keys.index(k)
            del self._keys[idx]
            del self._times[idx]
            del self._states[k]
