"""Single-track vehicle dynamics with interchangeable tire-force sources.

The state is [vx, vy, yaw_rate, wheel_speed] in body frame (wheel speed
already converted to a linear velocity), optionally extended with a tire
friction coefficient as a fifth component.  Controls are [steering angle,
motor current].  All functions accept tensors with arbitrary leading
batch dimensions and work on tracked and untracked inputs alike, so the
same code serves the simulator check paths, the filter, and training.

Parameter fields may be plain floats or scalar Tensors; passing tracked
Tensors makes the physical constants trainable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    absolute,
    as_tensor,
    atan,
    atan2,
    clamp_min,
    concat,
    cos,
    fused_op,
    sin,
    stack,
    tanh,
    unbroadcast,
)
from .mlp import MlpParams, encode_features, mlp_forward

__all__ = [
    "STATE_NAMES",
    "AUGMENTED_STATE_NAMES",
    "DEFAULT_V_EPS",
    "SIGN_SMOOTH_WIDTH",
    "FRICTION_BOUNDS",
    "VehicleParams",
    "MagicFormula",
    "PacejkaParams",
    "default_pacejka",
    "SlipQuantities",
    "TireForces",
    "compute_slip",
    "magic_formula",
    "pacejka_forces",
    "single_track_derivative",
    "neural_tire_forces",
    "friction_scaled_tire_forces",
    "full_neural_derivative",
    "residual_neural_derivative",
    "rk4_step",
    "measurement_model",
    "pc_derivative",
    "pcr_derivative",
    "nn_derivative",
    "nnt_derivative",
    "nntf_derivative",
    "with_zero_friction_rate",
]

STATE_NAMES = ("vx", "vy", "yaw_rate", "wheel_speed")
AUGMENTED_STATE_NAMES = STATE_NAMES + ("friction",)

#: low-speed guard [m/s] used in every slip computation.
DEFAULT_V_EPS = 0.1

#: width of the tanh that replaces sgn() in the drivetrain friction torque,
#: keeping the derivative finite through zero wheel speed.
SIGN_SMOOTH_WIDTH = 0.05

#: admissible range for an estimated tire friction coefficient.
FRICTION_BOUNDS = (0.05, 1.5)


@dataclass
class VehicleParams:
    """Physical constants of the car (SI units; wheel speed pre-scaled).

    ``drive_inertia`` lumps motor, gearbox and all four wheels as seen at
    the wheel-speed state; ``motor_gain`` converts motor current to drive
    torque at the same point.
    """

    mass: float = 4.5
    lf: float = 0.18
    lr: float = 0.18
    yaw_inertia: float = 0.075
    drive_inertia: float = 0.12
    wheel_radius: float = 0.055
    motor_gain: float = 0.35
    coulomb_friction: float = 0.3
    viscous_friction: float = 0.05
    drag_coeff: float = 0.075


@dataclass
class MagicFormula:
    """One slip->force curve: peak * sin(shape * atan(...)) form."""

    stiffness: float  # slope scaling (B)
    shape: float  # asymptote shape (C)
    peak: float  # peak force at friction 1.0 [N]
    curvature: float  # curvature near the peak (E)


@dataclass
class PacejkaParams:
    """Tire curves: longitudinal shared across axles, lateral per axle."""

    longitudinal: MagicFormula
    lateral_front: MagicFormula
    lateral_rear: MagicFormula
    friction: float = 1.0

    def validate(self) -> None:
        for name in ("longitudinal", "lateral_front", "lateral_rear"):
            c: MagicFormula = getattr(self, name)
            if not (
                float(c.stiffness) > 0
                and float(c.shape) > 0
                and float(c.peak) > 0
                and float(c.curvature) < 1.0
            ):
                raise ValueError(
                    f"inadmissible magic-formula curve '{name}': need "
                    f"stiffness>0, shape>0, peak>0, curvature<1, got {c}"
                )
        if not float(self.friction) > 0:
            raise ValueError(f"friction must be positive, got {self.friction}")


def default_pacejka() -> PacejkaParams:
    """Curves matching the default VehicleParams (about half the weight
    of the car per axle at peak)."""
    return PacejkaParams(
        longitudinal=MagicFormula(10.0, 1.9, 24.0, 0.97),
        lateral_front=MagicFormula(7.0, 1.7, 22.0, -0.5),
        lateral_rear=MagicFormula(8.0, 1.6, 24.0, -0.3),
        friction=1.0,
    )


@dataclass
class SlipQuantities:
    """Slip ratio plus front/rear slip angles, each shaped like the batch."""

    ratio: Tensor
    angle_front: Tensor
    angle_rear: Tensor


@dataclass
class TireForces:
    front_x: Tensor
    rear_x: Tensor
    front_y: Tensor
    rear_y: Tensor


def _check_state(state: Tensor) -> None:
    if state.shape[-1] not in (4, 5):
        raise ShapeError(f"state must have 4 or 5 components, got {state.shape}")


def _compute_slip_ops(state, control, params, v_eps) -> SlipQuantities:
    # Elementary-op composition, kept for Tensor-valued geometry (lf/lr or
    # the guard itself trainable).  The fused fast path below must stay
    # value-identical to this.
    vx = state[..., 0]
    vy = state[..., 1]
    r = state[..., 2]
    omega = state[..., 3]
    delta = control[..., 0]
    forward = clamp_min(vx, v_eps)
    ratio = (omega - vx) / clamp_min(absolute(vx), v_eps)
    angle_front = delta - atan2(vy + params.lf * r, forward)
    angle_rear = -atan2(vy - params.lr * r, forward)
    return SlipQuantities(ratio=ratio, angle_front=angle_front, angle_rear=angle_rear)


def compute_slip(state, control, params: VehicleParams, v_eps: float = DEFAULT_V_EPS) -> SlipQuantities:
    """Slip ratio and slip angles with a low-speed guard.

    The guard clamps the denominators at ``v_eps`` so the quantities stay
    finite (and the filter usable) through standstill and launch, at the
    price of a dead zone below v_eps where their gradients vanish.

    This sits inside every derivative evaluation, five times per filter
    step, so it records a single fused tape node (plus three views)
    instead of ~15 elementary ops.
    """
    state = as_tensor(state)
    control = as_tensor(control)
    _check_state(state)
    if isinstance(params.lf, Tensor) or isinstance(params.lr, Tensor) or isinstance(v_eps, Tensor):
        return _compute_slip_ops(state, control, params, v_eps)
    sv = state.values
    cv = control.values
    vx = sv[..., 0]
    vy = sv[..., 1]
    r = sv[..., 2]
    omega = sv[..., 3]
    delta = cv[..., 0]
    eps = float(v_eps)
    lf = float(params.lf)
    lr = float(params.lr)
    forward = np.maximum(vx, eps)
    denom = np.maximum(np.abs(vx), eps)
    ratio = (omega - vx) / denom
    y_front = vy + r * lf
    y_rear = vy - r * lr
    angle_front = delta - np.arctan2(y_front, forward)
    angle_rear = -np.arctan2(y_rear, forward)
    common = np.broadcast_shapes(ratio.shape, angle_front.shape, angle_rear.shape)
    out = np.stack(
        [
            np.broadcast_to(ratio, common),
            np.broadcast_to(angle_front, common),
            np.broadcast_to(angle_rear, common),
        ],
        axis=-1,
    )

    def back(g):
        g0 = g[..., 0]
        g1 = g[..., 1]
        g2 = g[..., 2]
        inv_d = 1.0 / denom
        q_front = forward * forward + y_front * y_front
        q_rear = forward * forward + y_rear * y_rear
        wf = forward / q_front
        wr = forward / q_rear
        # The clamps kill the vx sensitivity below their floors (strict, to
        # match the elementary clamp_min backward).
        guard_fwd = vx > eps
        guard_abs = np.abs(vx) > eps
        d_vx = (
            g0 * (-(1.0 + ratio * np.sign(vx) * guard_abs) * inv_d)
            + (g1 * (y_front / q_front) + g2 * (y_rear / q_rear)) * guard_fwd
        )
        d_vy = -(g1 * wf + g2 * wr)
        d_r = g2 * (lr * wr) - g1 * (lf * wf)
        d_omega = g0 * inv_d
        parts = [d_vx, d_vy, d_r, d_omega]
        if sv.shape[-1] == 5:
            parts.append(np.zeros(common))
        g_state = np.stack([np.broadcast_to(p, common) for p in parts], axis=-1)
        g_control = np.stack([np.broadcast_to(g1, common), np.zeros(common)], axis=-1)
        return (
            unbroadcast(g_state, sv.shape),
            unbroadcast(g_control, cv.shape),
        )

    packed = fused_op("slip", out, (state, control), back)
    return SlipQuantities(
        ratio=packed[..., 0], angle_front=packed[..., 1], angle_rear=packed[..., 2]
    )


def magic_formula(curve: MagicFormula, slip) -> Tensor:
    """peak * sin(shape * atan(B*s - curvature*(B*s - atan(B*s))))."""
    s = as_tensor(slip)
    bs = curve.stiffness * s
    inner = bs - curve.curvature * (bs - atan(bs))
    return curve.peak * sin(curve.shape * atan(inner))


def pacejka_forces(slip: SlipQuantities, params: PacejkaParams, friction=None) -> TireForces:
    """Tire forces from the magic-formula curves, scaled by friction.

    ``friction`` overrides ``params.friction`` when given; a Tensor (for
    example a slice of an augmented state) multiplies elementwise so each
    batch member can carry its own road contact.
    """
    mu = params.friction if friction is None else friction
    fx = magic_formula(params.longitudinal, slip.ratio)
    fyf = magic_formula(params.lateral_front, slip.angle_front)
    fyr = magic_formula(params.lateral_rear, slip.angle_rear)
    if isinstance(mu, Tensor):
        fx, fyf, fyr = mu * fx, mu * fyf, mu * fyr
    else:
        fx, fyf, fyr = fx * float(mu), fyf * float(mu), fyr * float(mu)
    return TireForces(front_x=fx, rear_x=fx, front_y=fyf, rear_y=fyr)


def single_track_derivative(state, control, forces: TireForces, params: VehicleParams) -> Tensor:
    """Body-frame state derivative of the single-track model.

    Front wheel forces act rotated by the steering angle; the wheel-speed
    state sees motor torque against the tire reaction and a smooth
    Coulomb + viscous drivetrain loss.  Returns (..., 4); augmentation is
    handled by :func:`with_zero_friction_rate`.
    """
    state = as_tensor(state)
    control = as_tensor(control)
    _check_state(state)
    constants = (
        params.mass, params.lf, params.lr, params.yaw_inertia, params.drive_inertia,
        params.wheel_radius, params.motor_gain, params.coulomb_friction,
        params.viscous_friction, params.drag_coeff,
    )
    if any(isinstance(c, Tensor) for c in constants):
        return _single_track_ops(state, control, forces, params)
    fx = as_tensor(forces.front_x)
    frx = as_tensor(forces.rear_x)
    fyf = as_tensor(forces.front_y)
    fyr = as_tensor(forces.rear_y)
    mass, lf, lr, yaw_in, drive_in, wheel_r, motor_g, coulomb, viscous, drag_c = (
        float(c) for c in constants
    )
    sv = state.values
    cv = control.values
    vx = sv[..., 0]
    vy = sv[..., 1]
    r = sv[..., 2]
    omega = sv[..., 3]
    delta = cv[..., 0]
    current = cv[..., 1]
    fxv = fx.values
    frxv = frx.values
    fyfv = fyf.values
    fyrv = fyr.values
    cd = np.cos(delta)
    sd = np.sin(delta)
    avx = np.abs(vx)
    inv_m = 1.0 / mass
    inv_iz = 1.0 / yaw_in
    inv_id = 1.0 / drive_in
    inv_w = 1.0 / SIGN_SMOOTH_WIDTH
    drag = (vx * avx) * drag_c
    front_along = fxv * cd - fyfv * sd
    front_across = fxv * sd + fyfv * cd
    smooth_sign = np.tanh(omega * inv_w)
    vx_dot = (frxv + front_along - drag) * inv_m + vy * r
    vy_dot = (front_across + fyrv) * inv_m - vx * r
    r_dot = (front_across * lf - fyrv * lr) * inv_iz
    spin_loss = smooth_sign * coulomb + omega * viscous
    omega_dot = (current * motor_g - (fxv + frxv) * wheel_r - spin_loss) * inv_id
    common = np.broadcast_shapes(vx_dot.shape, vy_dot.shape, r_dot.shape, omega_dot.shape)
    out = np.stack(
        [np.broadcast_to(d, common) for d in (vx_dot, vy_dot, r_dot, omega_dot)], axis=-1
    )

    def back(g):
        g0 = g[..., 0]
        g1 = g[..., 1]
        g2 = g[..., 2]
        g3 = g[..., 3]
        dfa_ddelta = -(fxv * sd) - fyfv * cd
        dfac_ddelta = fxv * cd - fyfv * sd
        d_vx = g0 * (avx * (-2.0 * drag_c * inv_m)) - g1 * r
        d_vy = g0 * r
        d_r = g0 * vy - g1 * vx
        d_omega = g3 * (
            -((1.0 - smooth_sign * smooth_sign) * (coulomb * inv_w) + viscous) * inv_id
        )
        d_delta = (g0 * dfa_ddelta + g1 * dfac_ddelta) * inv_m + g2 * (dfac_ddelta * (lf * inv_iz))
        d_current = g3 * (motor_g * inv_id)
        g_fx = (
            g0 * (cd * inv_m)
            + g1 * (sd * inv_m)
            + g2 * (sd * (lf * inv_iz))
            - g3 * (wheel_r * inv_id)
        )
        g_frx = g0 * inv_m - g3 * (wheel_r * inv_id)
        g_fyf = g1 * (cd * inv_m) - g0 * (sd * inv_m) + g2 * (cd * (lf * inv_iz))
        g_fyr = g1 * inv_m - g2 * (lr * inv_iz)
        parts = [d_vx, d_vy, d_r, d_omega]
        if sv.shape[-1] == 5:
            parts.append(np.zeros(common))
        g_state = np.stack([np.broadcast_to(p, common) for p in parts], axis=-1)
        g_control = np.stack(
            [np.broadcast_to(d_delta, common), np.broadcast_to(d_current, common)], axis=-1
        )
        return (
            unbroadcast(g_state, sv.shape),
            unbroadcast(g_control, cv.shape),
            unbroadcast(g_fx, fxv.shape),
            unbroadcast(g_frx, frxv.shape),
            unbroadcast(g_fyf, fyfv.shape),
            unbroadcast(g_fyr, fyrv.shape),
        )

    return fused_op("single_track", out, (state, control, fx, frx, fyf, fyr), back)


def _single_track_ops(state, control, forces: TireForces, params: VehicleParams) -> Tensor:
    # Elementary-op composition, kept for Tensor-valued vehicle constants.
    # The fused fast path above must stay value-identical to this.
    vx = state[..., 0]
    vy = state[..., 1]
    r = state[..., 2]
    omega = state[..., 3]
    delta = control[..., 0]
    current = control[..., 1]
    cd = cos(delta)
    sd = sin(delta)
    drag = params.drag_coeff * (vx * absolute(vx))
    front_along = forces.front_x * cd - forces.front_y * sd
    front_across = forces.front_x * sd + forces.front_y * cd
    vx_dot = (forces.rear_x + front_along - drag) / params.mass + vy * r
    vy_dot = (front_across + forces.rear_y) / params.mass - vx * r
    r_dot = (front_across * params.lf - forces.rear_y * params.lr) / params.yaw_inertia
    spin_loss = params.coulomb_friction * tanh(omega / SIGN_SMOOTH_WIDTH) + params.viscous_friction * omega
    omega_dot = (
        params.motor_gain * current
        - params.wheel_radius * (forces.front_x + forces.rear_x)
        - spin_loss
    ) / params.drive_inertia
    return stack([vx_dot, vy_dot, r_dot, omega_dot], axis=-1)


# ---------------------------------------------------------------------------
# learned force / derivative sources
# ---------------------------------------------------------------------------


def neural_tire_forces(
    state, control, slip: SlipQuantities, net: MlpParams, scales: np.ndarray, force_scale: float
) -> TireForces:
    """Tire forces straight from a network: outputs [front_x, rear_x, front_y, rear_y]."""
    feats = encode_features(state, control, slip, scales)
    out = mlp_forward(net, feats) * float(force_scale)
    return TireForces(
        front_x=out[..., 0], rear_x=out[..., 1], front_y=out[..., 2], rear_y=out[..., 3]
    )


def friction_scaled_tire_forces(
    state, control, slip, net, scales, force_scale: float, friction
) -> TireForces:
    """Network tire forces multiplied by a friction coefficient.

    The network is trained to produce forces for full grip; the scalar (or
    per-batch Tensor) friction then moves every force linearly, which is
    what lets the filter estimate road contact online.
    """
    base = neural_tire_forces(state, control, slip, net, scales, force_scale)
    if not isinstance(friction, Tensor):
        friction = as_tensor(float(friction))
    return TireForces(
        front_x=friction * base.front_x,
        rear_x=friction * base.rear_x,
        front_y=friction * base.front_y,
        rear_y=friction * base.rear_y,
    )


def full_neural_derivative(
    state, control, net: MlpParams, scales, deriv_scale: np.ndarray, params: VehicleParams,
    v_eps: float = DEFAULT_V_EPS,
) -> Tensor:
    """State derivative predicted end-to-end by a network (no physics)."""
    slip = compute_slip(state, control, params, v_eps)
    feats = encode_features(state, control, slip, scales)
    return mlp_forward(net, feats) * as_tensor(np.asarray(deriv_scale, dtype=np.float64))


def residual_neural_derivative(
    state, control, net, scales, deriv_scale, params: VehicleParams,
    pacejka: PacejkaParams, v_eps: float = DEFAULT_V_EPS,
) -> Tensor:
    """Physics derivative plus a learned correction term."""
    slip = compute_slip(state, control, params, v_eps)
    forces = pacejka_forces(slip, pacejka)
    physical = single_track_derivative(state, control, forces, params)
    feats = encode_features(state, control, slip, scales)
    return physical + mlp_forward(net, feats) * as_tensor(np.asarray(deriv_scale, dtype=np.float64))


# ---------------------------------------------------------------------------
# integration and measurement
# ---------------------------------------------------------------------------


def rk4_step(deriv_fn: Callable, state, control, dt: float) -> Tensor:
    """One classic Runge-Kutta step with the control held constant.

    Any non-finite intermediate raises with the stage (k1..k4) named, so a
    model blowing up mid-step is attributable.
    """
    state = as_tensor(state)
    half = 0.5 * dt
    stage = "k1"
    try:
        k1 = deriv_fn(state, control)
        stage = "k2"
        k2 = deriv_fn(state + k1 * half, control)
        stage = "k3"
        k3 = deriv_fn(state + k2 * half, control)
        stage = "k4"
        k4 = deriv_fn(state + k3 * dt, control)
    except NonFiniteError as e:
        raise NonFiniteError(f"rk4 stage {stage}: {e}") from e
    return state + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0)


def measurement_model(state, control, deriv_fn: Callable) -> Tensor:
    """Predicted sensor vector [ax, ay, yaw_rate, wheel_speed].

    Body-frame accelerometer channels combine the velocity derivatives
    with the rotating-frame terms; yaw rate and wheel speed are read
    straight from the state.  Output is always 4-wide, also for augmented
    states.
    """
    state = as_tensor(state)
    _check_state(state)
    xd = as_tensor(deriv_fn(state, control))
    sv = state.values
    xdv = xd.values
    vx = sv[..., 0]
    vy = sv[..., 1]
    r = sv[..., 2]
    omega = sv[..., 3]
    ax = xdv[..., 0] - r * vy
    ay = xdv[..., 1] + r * vx
    common = np.broadcast_shapes(ax.shape, ay.shape, r.shape)
    out = np.stack(
        [
            np.broadcast_to(ax, common),
            np.broadcast_to(ay, common),
            np.broadcast_to(r, common),
            np.broadcast_to(omega, common),
        ],
        axis=-1,
    )

    def back(g):
        g0 = g[..., 0]
        g1 = g[..., 1]
        g_xd = np.zeros(common + (xdv.shape[-1],))
        g_xd[..., 0] = g0
        g_xd[..., 1] = g1
        d_vx = g1 * r
        d_vy = -(g0 * r)
        d_r = g1 * vx - g0 * vy + g[..., 2]
        d_omega = g[..., 3]
        parts = [d_vx, d_vy, d_r, d_omega]
        if sv.shape[-1] == 5:
            parts.append(np.zeros(common))
        g_state = np.stack([np.broadcast_to(p, common) for p in parts], axis=-1)
        return (
            unbroadcast(g_xd, xdv.shape),
            unbroadcast(g_state, sv.shape),
        )

    return fused_op("measurement", out, (xd, state), back)


def with_zero_friction_rate(deriv_fn: Callable) -> Callable:
    """Wrap a 4-component derivative for a friction-augmented state.

    The friction component evolves as a random-walk handled entirely by
    the process noise, so its deterministic rate is exactly zero.
    """

    def wrapped(state, control):
        state = as_tensor(state)
        if state.shape[-1] != 5:
            raise ShapeError(f"augmented state must have 5 components, got {state.shape}")
        d4 = deriv_fn(state, control)
        return concat([d4, state[..., 4:5] * 0.0], axis=-1)

    return wrapped


# ---------------------------------------------------------------------------
# derivative factories, one per dynamics flavor
# ---------------------------------------------------------------------------


def pc_derivative(params: VehicleParams, pacejka: PacejkaParams, v_eps: float = DEFAULT_V_EPS) -> Callable:
    """Pure physics: magic-formula tires in the single-track model."""

    def deriv(state, control):
        slip = compute_slip(state, control, params, v_eps)
        forces = pacejka_forces(slip, pacejka)
        return single_track_derivative(state, control, forces, params)

    return deriv


def pcr_derivative(
    params: VehicleParams, pacejka: PacejkaParams, net: MlpParams,
    scales, deriv_scale, v_eps: float = DEFAULT_V_EPS,
) -> Callable:
    def deriv(state, control):
        return residual_neural_derivative(
            state, control, net, scales, deriv_scale, params, pacejka, v_eps
        )

    return deriv


def nn_derivative(
    params: VehicleParams, net: MlpParams, scales, deriv_scale, v_eps: float = DEFAULT_V_EPS
) -> Callable:
    def deriv(state, control):
        return full_neural_derivative(state, control, net, scales, deriv_scale, params, v_eps)

    return deriv


def nnt_derivative(
    params: VehicleParams, net: MlpParams, scales, force_scale: float,
    v_eps: float = DEFAULT_V_EPS,
) -> Callable:
    """Network tire forces inside the physical single-track equations."""

    def deriv(state, control):
        slip = compute_slip(state, control, params, v_eps)
        forces = neural_tire_forces(state, control, slip, net, scales, force_scale)
        return single_track_derivative(state, control, forces, params)

    return deriv


def nntf_derivative(
    params: VehicleParams, net: MlpParams, scales, force_scale: float,
    friction="state", v_eps: float = DEFAULT_V_EPS,
) -> Callable:
    """Friction-scaled network tires; friction comes from the state.

    With ``friction="state"`` the fifth state component scales the forces
    (the estimating configuration).  A float freezes friction instead and
    keeps the state at 4 components.
    """
    from_state = friction == "state"

    def deriv(state, control):
        state = as_tensor(state)
        mu = state[..., 4] if from_state else float(friction)
        slip = compute_slip(state, control, params, v_eps)
        forces = friction_scaled_tire_forces(
            state, control, slip, net, scales, force_scale, mu
        )
        return single_track_derivative(state, control, forces, params)

    return deriv
