"""Unscented Kalman filtering over the vehicle models, end-to-end differentiable.

Every matrix operation in predict/update is expressed through the tape
ops, so running a sequence under an active Tape yields gradients of any
loss on the state estimates with respect to dynamics, tire, and noise
parameters — including the paths through sigma points, covariances and
the Kalman gain.  Run without a tape, the same code is the plain filter.

All functions take beliefs with arbitrary leading batch dimensions:
mean (..., n), covariance (..., n, n).  Batched training stacks whole
sequences along such a dimension and steps them in lockstep.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dynamics as dyn
from . import mlp as nets
from .autodiff import (
    NonFiniteError,
    NotPositiveDefiniteError,
    ParameterSet,
    ShapeError,
    Tensor,
    as_tensor,
    cholesky,
    concat,
    lower_triangular_solve,
    matmul,
    reshape,
    transpose,
)
from .noise import NoiseModel, default_measurement_diag, default_process_diag
from .dynamics import FRICTION_BOUNDS

__all__ = [
    "UkfConfig",
    "GaussianBelief",
    "ModelSpec",
    "ModelBundle",
    "ut_weights",
    "sigma_points",
    "predict",
    "update",
    "run_sequence",
    "FilterRun",
    "FilterDivergence",
    "initial_belief",
    "augment_with_friction",
    "mixed_bundle",
    "DEFAULT_FEATURE_SCALES",
    "DEFAULT_DERIV_SCALE",
]

#: nominal magnitudes of [vx, vy, r, omega_s, steering, current, slip ratio,
#: front slip angle, rear slip angle] used to normalize network inputs.
DEFAULT_FEATURE_SCALES = np.array([5.0, 2.0, 5.0, 5.0, 0.45, 20.0, 1.0, 0.6, 0.6])

#: nominal magnitudes of the state derivative, for nets that output it.
DEFAULT_DERIV_SCALE = np.array([10.0, 10.0, 30.0, 20.0])


@dataclass
class UkfConfig:
    """Unscented-transform spread and numerical safeguards.

    ``alpha``/``beta``/``kappa`` are the standard scaled-transform knobs.
    When a covariance factorization fails, ``jitter_initial`` is added to
    the diagonal and scaled by ``jitter_factor`` up to ``jitter_retries``
    times before giving up.
    """

    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0
    ts: float = 0.01
    mu_min: float = FRICTION_BOUNDS[0]
    mu_max: float = FRICTION_BOUNDS[1]
    jitter_initial: float = 1e-9
    jitter_factor: float = 10.0
    jitter_retries: int = 3
    init_cov_diag: float = 0.25
    init_friction_cov: float = 0.04

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.ts <= 0.0:
            raise ValueError(f"ts must be positive, got {self.ts}")
        if not self.mu_min < self.mu_max:
            raise ValueError(f"need mu_min < mu_max, got [{self.mu_min}, {self.mu_max}]")


@dataclass
class GaussianBelief:
    mean: Tensor  # (..., n)
    cov: Tensor  # (..., n, n)

    @property
    def n_state(self) -> int:
        return self.mean.shape[-1]


@dataclass
class FilterRun:
    """Per-step posterior means (and optionally covariances) of a rollout."""

    means: list[Tensor]
    covs: list[Tensor] | None = None

    def mean_array(self) -> np.ndarray:
        """(T, ..., n) numpy stack of the posterior means."""
        return np.stack([m.values for m in self.means], axis=0)

    def cov_array(self) -> np.ndarray:
        if self.covs is None:
            raise ValueError("covariances were not collected for this run")
        return np.stack([c.values for c in self.covs], axis=0)


def ut_weights(n: int, cfg: UkfConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance weights of the scaled unscented transform."""
    lam = cfg.alpha**2 * (n + cfg.kappa) - n
    denom = n + lam
    wm = np.full(2 * n + 1, 1.0 / (2.0 * denom))
    wc = wm.copy()
    wm[0] = lam / denom
    wc[0] = lam / denom + (1.0 - cfg.alpha**2 + cfg.beta)
    return wm, wc


def _chol_with_jitter(cov: Tensor, cfg: UkfConfig) -> Tensor:
    """Factor a covariance, escalating diagonal jitter on failure."""
    try:
        return cholesky(cov)
    except NotPositiveDefiniteError:
        pass
    n = cov.shape[-1]
    delta = cfg.jitter_initial
    for _ in range(cfg.jitter_retries):
        try:
            return cholesky(cov + delta * np.eye(n))
        except NotPositiveDefiniteError:
            delta *= cfg.jitter_factor
    raise NotPositiveDefiniteError(-1, float("nan"))


def _unsqueeze(t: Tensor, axis: int) -> Tensor:
    shape = list(t.shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return reshape(t, tuple(shape))


def sigma_points(belief: GaussianBelief, cfg: UkfConfig) -> Tensor:
    """(..., 2n+1, n) sigma points: mean, then +/- scaled factor columns."""
    n = belief.n_state
    lam = cfg.alpha**2 * (n + cfg.kappa) - n
    spread = float(np.sqrt(n + lam))
    low = _chol_with_jitter(belief.cov, cfg)
    offsets = transpose(low) * spread  # rows are scaled columns of the factor
    center = _unsqueeze(belief.mean, -2)  # (..., 1, n)
    return concat([center, center + offsets, center - offsets], axis=-2)


def _ut_moments(
    points: Tensor, wm: np.ndarray, wc: np.ndarray
) -> tuple[Tensor, Tensor, Tensor]:
    """Weighted mean (..., 1, d), deviations, and covariance of points."""
    mean_row = matmul(wm[None, :], points)  # (..., 1, d)
    dev = points - mean_row
    cov = matmul(transpose(dev), dev * wc[:, None])
    return mean_row, dev, cov


def _symmetrize(m: Tensor) -> Tensor:
    return (m + transpose(m)) * 0.5


@dataclass
class ModelBundle:
    """Everything the filter needs to step: dynamics, measurement, noise.

    ``predict_derivative`` and the derivative inside ``measurement_fn``
    may come from different parameter bindings (that is the mixed-model
    ablation); ordinarily they are the same function.
    """

    n_state: int
    predict_derivative: Callable
    measurement_fn: Callable  # (state, control) -> (..., n_meas)
    process_cov: Callable  # (state_estimate) -> (..., n, n)
    measurement_cov: Callable  # (state_estimate) -> (..., m, m)
    estimates_friction: bool = False


def predict(
    belief: GaussianBelief, control, bundle: ModelBundle, dt: float, cfg: UkfConfig
) -> GaussianBelief:
    """Propagate the belief through one integration step of the dynamics."""
    n = belief.n_state
    wm, wc = ut_weights(n, cfg)
    pts = sigma_points(belief, cfg)
    u = as_tensor(control)
    u_row = _unsqueeze(u, -2)  # broadcast one control over all sigma points
    moved = dyn.rk4_step(bundle.predict_derivative, pts, u_row, dt)
    mean_row, _, cov = _ut_moments(moved, wm, wc)
    cov = _symmetrize(cov + bundle.process_cov(belief.mean))
    return GaussianBelief(mean=mean_row[..., 0, :], cov=cov)


def update(
    belief: GaussianBelief, control, measurement, bundle: ModelBundle, cfg: UkfConfig
) -> GaussianBelief:
    """Condition the belief on one sensor vector.

    Sigma points are redrawn from the predicted belief (rather than the
    propagated points being reused) so the injected process noise is
    reflected in the measurement spread; with linear models this makes
    the step match the closed-form Kalman update exactly.
    """
    n = belief.n_state
    wm, wc = ut_weights(n, cfg)
    pts = sigma_points(belief, cfg)
    u_row = _unsqueeze(as_tensor(control), -2)
    ypts = bundle.measurement_fn(pts, u_row)
    ymean_row, ydev, ycov = _ut_moments(ypts, wm, wc)
    innov_cov = _symmetrize(ycov + bundle.measurement_cov(belief.mean))
    xdev = pts - _unsqueeze(belief.mean, -2)
    cross = matmul(transpose(xdev), ydev * wc[:, None])  # (..., n, m)
    low = _chol_with_jitter(innov_cov, cfg)
    half = lower_triangular_solve(low, transpose(cross))
    gain_t = lower_triangular_solve(low, half, transpose_l=True)  # (..., m, n)
    innovation = as_tensor(measurement) - ymean_row[..., 0, :]
    shift = matmul(transpose(gain_t), _unsqueeze(innovation, -1))[..., 0]
    mean = belief.mean + shift
    cov = belief.cov - matmul(transpose(gain_t), matmul(innov_cov, gain_t))
    cov = _symmetrize(cov)
    if bundle.estimates_friction:
        mean = _project_friction(mean, cfg.mu_min, cfg.mu_max)
    return GaussianBelief(mean=mean, cov=cov)


def _project_friction(mean: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp the friction component of the mean into its physical range.

    The projection deliberately happens outside the tape (the tensor keeps
    its node), so gradients treat it as identity; inside the bounds it is
    one.
    """
    vals = mean.values
    mu = vals[..., 4]
    if np.all(mu >= lo) and np.all(mu <= hi):
        return mean
    clipped = vals.copy()
    clipped[..., 4] = np.clip(mu, lo, hi)
    return Tensor(clipped, mean.node)


class FilterDivergence(RuntimeError):
    """The filter left the finite/positive-definite regime at some step."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"filter diverged at step {step}: {detail}")
        self.step = step


def run_sequence(
    bundle: ModelBundle,
    belief: GaussianBelief,
    controls: np.ndarray,
    measurements: np.ndarray,
    dt: float | None = None,
    cfg: UkfConfig | None = None,
    collect_covs: bool = False,
) -> FilterRun:
    """Filter a whole sequence; index 0 of the output is the initial belief.

    ``controls`` is (T, ..., 2) and ``measurements`` (T, ..., n_meas); any
    inner batch shape must match the belief's.  Steps 1..T-1 each run one
    predict at ``dt`` (default: the configured step duration) followed by
    an update with that step's measurement.
    """
    if cfg is None:
        cfg = UkfConfig()
    if dt is None:
        dt = cfg.ts
    controls = np.asarray(controls, dtype=np.float64)
    measurements = np.asarray(measurements, dtype=np.float64)
    if controls.shape[0] != measurements.shape[0]:
        raise ShapeError(
            f"controls ({controls.shape[0]}) and measurements "
            f"({measurements.shape[0]}) disagree on sequence length"
        )
    means = [belief.mean]
    covs = [belief.cov] if collect_covs else None
    for k in range(1, controls.shape[0]):
        try:
            belief = predict(belief, controls[k - 1], bundle, dt, cfg)
            belief = update(belief, controls[k], measurements[k], bundle, cfg)
        except (NonFiniteError, NotPositiveDefiniteError) as e:
            raise FilterDivergence(k, str(e)) from e
        means.append(belief.mean)
        if collect_covs:
            covs.append(belief.cov)
    return FilterRun(means=means, covs=covs)


def initial_belief(
    measurement0: np.ndarray,
    cfg: UkfConfig,
    friction_prior: float | None = None,
) -> GaussianBelief:
    """Belief from the first sensor row: roll straight, trust the encoders.

    vx and wheel speed start at the wheel-speed reading, lateral velocity
    at zero, yaw rate at the gyro reading.  A friction prior extends the
    state to five components.
    """
    y = np.asarray(measurement0, dtype=np.float64)
    if y.shape[-1] != 4:
        raise ShapeError(f"expected a 4-channel measurement, got {y.shape}")
    lead = y.shape[:-1]
    n = 4 if friction_prior is None else 5
    mean = np.zeros(lead + (n,))
    mean[..., 0] = y[..., 3]
    mean[..., 2] = y[..., 2]
    mean[..., 3] = y[..., 3]
    diag = np.full(n, cfg.init_cov_diag)
    if friction_prior is not None:
        prior = np.asarray(friction_prior, dtype=np.float64)
        if np.any(prior < cfg.mu_min) or np.any(prior > cfg.mu_max):
            raise ValueError(
                f"friction prior {friction_prior} outside [{cfg.mu_min}, {cfg.mu_max}]"
            )
        mean[..., 4] = prior
        diag[4] = cfg.init_friction_cov
    cov = np.zeros(lead + (n, n))
    cov[...] = np.diag(diag)
    return GaussianBelief(mean=Tensor(mean), cov=Tensor(cov))


def augment_with_friction(
    belief: GaussianBelief, prior: float, variance: float, cfg: UkfConfig | None = None
) -> GaussianBelief:
    """Extend a 4-state belief with an independent friction component."""
    lo, hi = (cfg.mu_min, cfg.mu_max) if cfg is not None else FRICTION_BOUNDS
    if not lo <= prior <= hi:
        raise ValueError(f"friction prior {prior} outside [{lo}, {hi}]")
    if variance <= 0.0:
        raise ValueError(f"friction variance must be positive, got {variance}")
    mean = belief.mean.values
    cov = belief.cov.values
    lead = mean.shape[:-1]
    mean5 = np.concatenate([mean, np.full(lead + (1,), prior)], axis=-1)
    cov5 = np.zeros(lead + (5, 5))
    cov5[..., :4, :4] = cov
    cov5[..., 4, 4] = variance
    return GaussianBelief(mean=Tensor(mean5), cov=Tensor(cov5))


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

_TIRE_HIDDEN = 64
_FULL_HIDDEN = 256
_KINDS = ("pc", "pcr", "nn", "nnt", "nntf")


@dataclass
class ModelSpec:
    """Declarative description of one dynamics model configuration.

    ``init_parameters`` creates the trainable ParameterSet for the kind;
    ``bind`` assembles the runnable ModelBundle from any name->Tensor
    mapping over those parameters (tracked during training, untracked for
    inference).
    """

    kind: str
    vehicle: dyn.VehicleParams = field(default_factory=dyn.VehicleParams)
    pacejka: dyn.PacejkaParams = field(default_factory=dyn.default_pacejka)
    feature_scales: np.ndarray = field(
        default_factory=lambda: DEFAULT_FEATURE_SCALES.copy()
    )
    deriv_scale: np.ndarray = field(default_factory=lambda: DEFAULT_DERIV_SCALE.copy())
    force_scale: float = 30.0
    heteroscedastic: bool = False
    estimate_friction: bool = False
    v_eps: float = dyn.DEFAULT_V_EPS
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind '{self.kind}' (pick from {_KINDS})")
        if self.estimate_friction and self.kind != "nntf":
            raise ValueError("only the friction-scaled tire model estimates friction")

    @property
    def n_state(self) -> int:
        return 5 if self.estimate_friction else 4

    def net_dims(self) -> tuple[int, ...] | None:
        if self.kind == "pc":
            return None
        hidden = _TIRE_HIDDEN if self.kind in ("nnt", "nntf") else _FULL_HIDDEN
        return (9, hidden, hidden, hidden, 4)

    def state_scales(self) -> np.ndarray:
        base = self.feature_scales[:4]
        if self.n_state == 5:
            return np.concatenate([base, [1.0]])
        return base.copy()

    def noise_model(self) -> NoiseModel:
        return NoiseModel(
            n_state=self.n_state,
            n_meas=4,
            heteroscedastic=self.heteroscedastic,
            state_scales=self.state_scales(),
        )

    def init_parameters(self, seed: int | None = None) -> ParameterSet:
        """Fresh trainable parameters: network (or tire curves) plus noise."""
        ps = ParameterSet()
        dims = self.net_dims()
        if dims is not None:
            nets.register_params(
                ps, "net", nets.init_params(dims, self.seed if seed is None else seed)
            )
        else:
            _register_pacejka(ps, "pacejka", self.pacejka)
        self.noise_model().register(ps)
        return ps

    def derivative(self, mapping: dict[str, Tensor]) -> Callable:
        dims = self.net_dims()
        if self.kind == "pc":
            pp = _bind_pacejka(mapping, "pacejka", self.pacejka)
            return dyn.pc_derivative(self.vehicle, pp, self.v_eps)
        net = nets.bind_params(mapping, "net", dims)
        if self.kind == "pcr":
            return dyn.pcr_derivative(
                self.vehicle, self.pacejka, net, self.feature_scales,
                self.deriv_scale, self.v_eps,
            )
        if self.kind == "nn":
            return dyn.nn_derivative(
                self.vehicle, net, self.feature_scales, self.deriv_scale, self.v_eps
            )
        if self.kind == "nnt":
            return dyn.nnt_derivative(
                self.vehicle, net, self.feature_scales, self.force_scale, self.v_eps
            )
        friction = "state" if self.estimate_friction else self.pacejka.friction
        return dyn.nntf_derivative(
            self.vehicle, net, self.feature_scales, self.force_scale,
            friction, self.v_eps,
        )

    def bind(
        self,
        mapping: dict[str, Tensor],
        measurement_mapping: dict[str, Tensor] | None = None,
    ) -> ModelBundle:
        """Runnable bundle; a separate measurement binding mixes models."""
        deriv = self.derivative(mapping)
        if self.estimate_friction:
            deriv = dyn.with_zero_friction_rate(deriv)
        meas_deriv = deriv
        meas_mapping = mapping
        if measurement_mapping is not None:
            meas_mapping = measurement_mapping
            meas_deriv = self.derivative(measurement_mapping)
            if self.estimate_friction:
                meas_deriv = dyn.with_zero_friction_rate(meas_deriv)
        noise = self.noise_model()

        def measurement_fn(state, control):
            return dyn.measurement_model(state, control, meas_deriv)

        return ModelBundle(
            n_state=self.n_state,
            predict_derivative=deriv,
            measurement_fn=measurement_fn,
            process_cov=lambda est: noise.process_covariance(mapping, est),
            measurement_cov=lambda est: noise.measurement_covariance(meas_mapping, est),
            estimates_friction=self.estimate_friction,
        )

    def frozen_friction_view(
        self, mapping: dict[str, Tensor], friction: float
    ) -> tuple["ModelSpec", dict[str, Tensor]]:
        """Non-estimating twin of a friction-estimating model.

        Returns a spec with friction pinned at ``friction`` plus a
        compatible parameter mapping: network weights shared, 5-state
        noise marginalized onto the 4 motion states.  A model that does
        not estimate friction passes through unchanged.
        """
        if not self.estimate_friction:
            return self, mapping
        noise = self.noise_model()
        _, noise_map = noise.restrict_to_base_state(mapping, float(friction))
        new_mapping = {
            k: v for k, v in mapping.items() if k not in set(noise.param_names())
        }
        new_mapping.update(noise_map)
        spec = dataclasses.replace(
            self,
            estimate_friction=False,
            pacejka=dataclasses.replace(self.pacejka, friction=float(friction)),
        )
        return spec, new_mapping

    def bind_frozen_friction(
        self, mapping: dict[str, Tensor], friction: float
    ) -> ModelBundle:
        """A 4-state view of a friction-estimating model, friction pinned.

        Used as the baseline when judging what online friction estimation
        buys: same network, same (marginalized) noise, no fifth state.
        """
        if self.kind != "nntf":
            raise ValueError("freezing friction only makes sense for nntf")
        dims = self.net_dims()
        net = nets.bind_params(mapping, "net", dims)
        deriv = dyn.nntf_derivative(
            self.vehicle, net, self.feature_scales, self.force_scale,
            float(friction), self.v_eps,
        )
        if self.estimate_friction:
            noise, sub_map = self.noise_model().restrict_to_base_state(
                mapping, float(friction)
            )
        else:
            noise, sub_map = self.noise_model(), mapping

        def measurement_fn(state, control):
            return dyn.measurement_model(state, control, deriv)

        return ModelBundle(
            n_state=4,
            predict_derivative=deriv,
            measurement_fn=measurement_fn,
            process_cov=lambda est: noise.process_covariance(sub_map, est),
            measurement_cov=lambda est: noise.measurement_covariance(sub_map, est),
            estimates_friction=False,
        )


def mixed_bundle(
    predict_spec: ModelSpec,
    predict_mapping: dict[str, Tensor],
    update_spec: ModelSpec,
    update_mapping: dict[str, Tensor],
) -> ModelBundle:
    """Cross two models: prediction from one, measurement from the other.

    The predict side contributes the dynamics and process noise; the
    update side contributes the measurement function (its own dynamics
    evaluated inside the measurement map) and measurement noise.  Both
    sides must agree on the state dimension.
    """
    if predict_spec.n_state != update_spec.n_state:
        raise ValueError(
            f"state dims differ: predict {predict_spec.n_state} vs "
            f"update {update_spec.n_state}"
        )
    deriv = predict_spec.derivative(predict_mapping)
    if predict_spec.estimate_friction:
        deriv = dyn.with_zero_friction_rate(deriv)
    meas_deriv = update_spec.derivative(update_mapping)
    if update_spec.estimate_friction:
        meas_deriv = dyn.with_zero_friction_rate(meas_deriv)
    p_noise = predict_spec.noise_model()
    u_noise = update_spec.noise_model()

    def measurement_fn(state, control):
        return dyn.measurement_model(state, control, meas_deriv)

    return ModelBundle(
        n_state=predict_spec.n_state,
        predict_derivative=deriv,
        measurement_fn=measurement_fn,
        process_cov=lambda est: p_noise.process_covariance(predict_mapping, est),
        measurement_cov=lambda est: u_noise.measurement_covariance(update_mapping, est),
        estimates_friction=predict_spec.estimate_friction,
    )


def _register_pacejka(ps: ParameterSet, prefix: str, pp: dyn.PacejkaParams) -> None:
    for curve_name in ("longitudinal", "lateral_front", "lateral_rear"):
        curve: dyn.MagicFormula = getattr(pp, curve_name)
        for field_name in ("stiffness", "shape", "peak", "curvature"):
            ps.add(f"{prefix}.{curve_name}.{field_name}", getattr(curve, field_name))


def _bind_pacejka(
    mapping: dict[str, Tensor], prefix: str, template: dyn.PacejkaParams
) -> dyn.PacejkaParams:
    curves = {}
    for curve_name in ("longitudinal", "lateral_front", "lateral_rear"):
        curves[curve_name] = dyn.MagicFormula(
            *(
                mapping[f"{prefix}.{curve_name}.{f}"]
                for f in ("stiffness", "shape", "peak", "curvature")
            )
        )
    return dyn.PacejkaParams(friction=template.friction, **curves)
