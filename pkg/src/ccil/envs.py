"""Deterministic simulated control tasks with scripted experts and a noisy evaluator.

All environments are dimensionless and integrate with a fixed step using
semi-implicit Euler. Step functions are vectorised over a leading batch axis.

``pendulum``   smooth, globally Lipschitz swing-and-balance task.
``wallgrasp``  point-mass gripper that must descend onto a rigid support wall
               (the floor ``y = 0``), close on an object resting against it and
               lift it. Wall contact clamps the normal velocity.
``peg1d``      one-dimensional insertion into a hole with Coulomb friction, a
               hard bottom stop and a narrow tolerance band around the goal depth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import TrajectoryDataset, Transition
from .exceptions import EnvironmentMisconfigured, InputError

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EnvSpec:
    """Base class; subclasses define the dynamics, expert and success test."""

    name: str = ""
    state_dim: int = 0
    action_dim: int = 0
    dt: float = 0.1
    horizon: int = 50
    noise_std: tuple = ()
    # True: success at any step ends the episode; False: judged on the final state
    terminate_on_success: bool = False

    def step(self, s, a) -> np.ndarray:
        return self.step_info(s, a)[0]

    def step_info(self, s, a):
        """Next state and the per-sample contact flag."""
        raise NotImplementedError

    def residual(self, s, a) -> np.ndarray:
        """True ``f(s, a) = s' - s``."""
        s = np.asarray(s, dtype=np.float64)
        return self.step(s, a) - s

    def success(self, s) -> np.ndarray:
        raise NotImplementedError

    def expert(self, s) -> np.ndarray:
        raise NotImplementedError

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def initial_grid(self) -> np.ndarray:
        """16 fixed initial conditions used for evaluation."""
        raise NotImplementedError

    @property
    def true_lipschitz(self) -> dict:
        """Analytic Lipschitz constants of ``f`` w.r.t. ``(s, a)`` per region."""
        return {}

    def _batch(self, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.action_dim:
            raise InputError(f"{self.name}: expected state {self.state_dim} / action {self.action_dim}, "
                             f"got {s.shape[-1]} / {a.shape[-1]}")
        return s, a


def _unbatch(single, *arrays):
    return tuple(x[0] for x in arrays) if single else arrays


# -- pendulum ------------------------------------------------------------

@dataclass(frozen=True)
class Pendulum(EnvSpec):
    """State ``(theta, omega)`` with ``theta = 0`` upright; action is torque.

    Success: final ``|theta| < 0.1`` and ``|omega| < 0.3``.
    """

    name: str = "pendulum"
    state_dim: int = 2
    action_dim: int = 1
    dt: float = 0.05
    horizon: int = 60
    gravity: float = 10.0
    damping: float = 0.1
    max_torque: float = 12.0
    noise_std: tuple = (0.02, 0.05)

    def step_info(self, s, a):
        single = np.ndim(s) == 1
        s, a = self._batch(s, a)
        theta, omega = s[:, 0], s[:, 1]
        u = np.clip(a[:, 0], -self.max_torque, self.max_torque)
        alpha = self.gravity * np.sin(theta) - self.damping * omega + u
        omega2 = omega + self.dt * alpha
        theta2 = theta + self.dt * omega2
        out = np.stack([theta2, omega2], axis=1)
        return _unbatch(single, out, np.zeros(len(s), dtype=bool))

    def success(self, s):
        s = np.asarray(s, dtype=np.float64)
        theta = np.angle(np.exp(1j * s[..., 0]))
        return (np.abs(theta) < 0.1) & (np.abs(s[..., 1]) < 0.3)

    def energy(self, s):
        s = np.asarray(s, dtype=np.float64)
        return 0.5 * s[..., 1] ** 2 - self.gravity * (1.0 - np.cos(s[..., 0]))

    def expert(self, s):
        """PD balance plus an energy-shaping term that vanishes at upright."""
        single = np.ndim(s) == 1
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        theta, omega = s[:, 0], s[:, 1]
        pd = -20.0 * theta - 6.0 * omega - self.gravity * np.sin(theta)
        shaping = -0.5 * self.energy(s) * omega
        u = np.clip(pd + shaping, -self.max_torque, self.max_torque)[:, None]
        return u[0] if single else u

    def sample_initial(self, rng, n):
        return np.stack([rng.uniform(-1.0, 1.0, n), rng.uniform(-1.0, 1.0, n)], axis=1)

    def initial_grid(self):
        th, om = np.meshgrid(np.linspace(-0.9, 0.9, 4), np.linspace(-0.9, 0.9, 4), indexing="ij")
        return np.stack([th.ravel(), om.ravel()], axis=1)

    def _jacobian(self, cos_theta: float) -> np.ndarray:
        dt, g, b = self.dt, self.gravity, self.damping
        return np.array([[dt * dt * g * cos_theta, dt - dt * dt * b, dt * dt],
                         [dt * g * cos_theta, -dt * b, dt]])

    @property
    def true_lipschitz(self):
        k = max(np.linalg.norm(self._jacobian(c), 2) for c in (-1.0, 1.0))
        return {"global": float(k)}


# -- wallgrasp -------------------------------------------------------------

@dataclass(frozen=True)
class WallGrasp(EnvSpec):
    """Gripper point mass above a rigid wall at ``y = 0`` with an object resting on it.

    State ``(px, py, vx, vy, ox, oy, g)``: gripper position and velocity, object
    position, grasp flag. Action ``(tx, ty, c)``: a position target tracked by a
    saturated PD controller, and a close command (``c > 0`` closes). When a
    step would carry the gripper through the wall, its position is projected
    onto the wall and the normal velocity is clamped to zero; those transitions
    are flagged as contact. Closing within ``capture_radius`` of the object
    grasps it. A grasped object moves with the gripper and a released one drops
    back onto the wall. Success: grasped object lifted above ``lift_height``.
    """

    name: str = "wallgrasp"
    state_dim: int = 7
    action_dim: int = 3
    dt: float = 0.1
    horizon: int = 60
    terminate_on_success: bool = True
    kp: float = 12.0
    kd: float = 5.0
    max_accel: float = 4.0
    capture_radius: float = 0.03
    lift_height: float = 0.2
    hover_height: float = 0.12
    waypoint_step: float = 0.08
    object_range: float = 0.15
    noise_std: tuple = (0.005, 0.005, 0.02, 0.02, 0.005, 0.005, 0.0)

    def step_info(self, s, a):
        single = np.ndim(s) == 1
        s, a = self._batch(s, a)
        p, v, o, g = s[:, 0:2], s[:, 2:4], s[:, 4:6], s[:, 6]
        acc = np.clip(self.kp * (a[:, 0:2] - p) - self.kd * v, -self.max_accel, self.max_accel)
        v2 = v + self.dt * acc
        p2 = p + self.dt * v2
        contact = p2[:, 1] < 0.0
        p2[:, 1] = np.where(contact, 0.0, p2[:, 1])
        v2[:, 1] = np.where(contact, 0.0, v2[:, 1])
        near = np.linalg.norm(p2 - o, axis=1) < self.capture_radius
        g2 = (a[:, 2] > 0.0) & ((g > 0.5) | near)
        o2 = np.where(g2[:, None], o + (p2 - p), np.stack([o[:, 0], np.zeros(len(s))], axis=1))
        out = np.concatenate([p2, v2, o2, g2[:, None].astype(np.float64)], axis=1)
        return _unbatch(single, out, contact)

    def success(self, s):
        s = np.asarray(s, dtype=np.float64)
        return (s[..., 6] > 0.5) & (s[..., 5] > self.lift_height)

    def expert(self, s):
        """Carrot-following waypoints: hover over the object, descend, press and close, lift."""
        single = np.ndim(s) == 1
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        n = len(s)
        p, o, g = s[:, 0:2], s[:, 4:6], s[:, 6] > 0.5
        aligned = np.abs(o[:, 0] - p[:, 0]) < 0.01
        goal = np.stack([o[:, 0], np.where(aligned, -0.05, self.hover_height)], axis=1)
        lift = np.stack([p[:, 0], np.full(n, self.lift_height + 0.15)], axis=1)
        goal = np.where(g[:, None], lift, goal)
        delta = goal - p
        dist = np.linalg.norm(delta, axis=1, keepdims=True)
        target = p + delta * np.minimum(1.0, self.waypoint_step / np.maximum(dist, 1e-12))
        on_wall = (p[:, 1] <= 1e-9) & (np.abs(o[:, 0] - p[:, 0]) < 0.5 * self.capture_radius)
        press = np.stack([o[:, 0], np.full(n, -0.05)], axis=1)
        target = np.where((on_wall & ~g)[:, None], press, target)
        c = np.where(on_wall | g, 1.0, -1.0)
        out = np.concatenate([target, c[:, None]], axis=1)
        return out[0] if single else out

    def _state(self, px, py, ox):
        z = np.zeros(len(px))
        return np.stack([px, py, z, z, ox, z, z], axis=1)

    def sample_initial(self, rng, n):
        r = self.object_range
        return self._state(rng.uniform(-0.5, 0.5, n), rng.uniform(0.3, 0.5, n), rng.uniform(-r, r, n))

    def initial_grid(self):
        r = 0.8 * self.object_range
        ox, px = np.meshgrid(np.linspace(-r, r, 4), np.linspace(-0.4, 0.4, 4), indexing="ij")
        return self._state(px.ravel(), np.full(16, 0.4), ox.ravel())

    @property
    def true_lipschitz(self):
        """Unsaturated free flight, per axis: ``f`` is linear in ``(p, v, target)``."""
        dt, kp, kd = self.dt, self.kp, self.kd
        dv = [-dt * kp, -dt * kd, dt * kp]
        dp = [dt * x for x in dv]
        dp[1] += dt
        return {"free_space_gripper": float(np.linalg.norm(np.array([dp, dv]), 2))}


# -- peg1d -------------------------------------------------------------------

@dataclass(frozen=True)
class Peg1D(EnvSpec):
    """Peg depth ``x`` and velocity ``v``; action is a force.

    Past the hole entrance ``x >= entrance`` Coulomb friction removes up to
    ``friction * dt`` of speed per step; the hole bottom clamps position and
    zeroes velocity (contact). Success: final ``|x - goal| < tolerance`` and
    ``|v| < 0.05``.
    """

    name: str = "peg1d"
    state_dim: int = 2
    action_dim: int = 1
    dt: float = 0.05
    horizon: int = 100
    entrance: float = 0.5
    goal: float = 1.0
    bottom: float = 1.05
    tolerance: float = 0.01
    friction: float = 0.5
    max_force: float = 4.0
    noise_std: tuple = (0.005, 0.02)

    def step_info(self, s, a):
        single = np.ndim(s) == 1
        s, a = self._batch(s, a)
        x, v = s[:, 0], s[:, 1]
        u = np.clip(a[:, 0], -self.max_force, self.max_force)
        v2 = v + self.dt * u
        inside = x >= self.entrance
        slowed = np.sign(v2) * np.maximum(np.abs(v2) - self.friction * self.dt, 0.0)
        v2 = np.where(inside, slowed, v2)
        x2 = x + self.dt * v2
        contact = x2 > self.bottom
        x2 = np.where(contact, self.bottom, x2)
        v2 = np.where(contact, 0.0, v2)
        return _unbatch(single, np.stack([x2, v2], axis=1), contact | inside)

    def success(self, s):
        s = np.asarray(s, dtype=np.float64)
        return (np.abs(s[..., 0] - self.goal) < self.tolerance) & (np.abs(s[..., 1]) < 0.05)

    def expert(self, s):
        single = np.ndim(s) == 1
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        x, v = s[:, 0], s[:, 1]
        u = 25.0 * (self.goal - x) - 9.0 * v
        u = u + np.where(x >= self.entrance, self.friction * np.sign(u), 0.0)
        u = np.clip(u, -self.max_force, self.max_force)[:, None]
        return u[0] if single else u

    def sample_initial(self, rng, n):
        return np.stack([rng.uniform(-1.0, 0.0, n), rng.uniform(-0.2, 0.2, n)], axis=1)

    def initial_grid(self):
        x, v = np.meshgrid(np.linspace(-0.9, -0.1, 4), np.linspace(-0.15, 0.15, 4), indexing="ij")
        return np.stack([x.ravel(), v.ravel()], axis=1)


_CATALOG = {"pendulum": Pendulum, "wallgrasp": WallGrasp, "peg1d": Peg1D}


def make_env(name: str, **overrides) -> EnvSpec:
    try:
        return _CATALOG[name](**overrides)
    except KeyError:
        raise InputError(f"unknown environment {name!r}; choose from {sorted(_CATALOG)}") from None


def env_names() -> list:
    return sorted(_CATALOG)


def scripted_expert(env: EnvSpec) -> Policy:
    return env.expert


# -- rollouts -----------------------------------------------------------------

@dataclass
class RolloutResult:
    states: np.ndarray
    actions: np.ndarray
    contact: np.ndarray
    success: bool
    noise_seed: Optional[int]
    initial_condition: int = -1

    def transitions(self) -> list:
        return [Transition(self.states[t], self.actions[t], self.states[t + 1], bool(self.contact[t]))
                for t in range(len(self.actions))]


def rollout(env: EnvSpec, policy: Policy, s0, noise_scale: float = 0.0,
            noise_seeds=None) -> list:
    """Run ``policy`` from each row of ``s0`` until success or the horizon.

    Observation noise ``noise_scale * env.noise_std * N(0, 1)`` is added to the
    policy input only; each rollout draws from its own seed so it can be
    replayed alone.
    """
    if noise_scale < 0:
        raise InputError("noise_scale must be non-negative")
    s = np.atleast_2d(np.asarray(s0, dtype=np.float64)).copy()
    n = len(s)
    std = np.asarray(env.noise_std, dtype=np.float64) * noise_scale
    if noise_seeds is None:
        noise_seeds = [None] * n
    noise = np.zeros((n, env.horizon, env.state_dim))
    if noise_scale > 0:
        for i, seed in enumerate(noise_seeds):
            noise[i] = np.random.default_rng(seed).standard_normal((env.horizon, env.state_dim)) * std
    states = [s.copy()]
    actions, contacts = [], []
    early = env.terminate_on_success
    done = env.success(s) if early else np.zeros(n, dtype=bool)
    length = np.where(done, 0, env.horizon)
    for t in range(env.horizon):
        a = np.atleast_2d(policy(s + noise[:, t]))
        s_next, contact = env.step_info(s, a)
        s_next = np.where(done[:, None], s, s_next)
        actions.append(a)
        contacts.append(contact)
        states.append(s_next)
        s = s_next
        if early:
            newly = ~done & env.success(s)
            length = np.where(newly, t + 1, length)
            done = done | newly
            if done.all():
                break
    success = done if early else env.success(s)
    S, A, C = np.stack(states, 1), np.stack(actions, 1), np.stack(contacts, 1)
    return [RolloutResult(S[i, :length[i] + 1], A[i, :length[i]], C[i, :length[i]], bool(success[i]),
                          noise_seeds[i]) for i in range(n)]


def collect(env: EnvSpec, expert: Policy, n_traj: int, seed: int, batch: int = 16) -> TrajectoryDataset:
    """``n_traj`` successful expert demonstrations from ``P0``; failures are discarded."""
    if n_traj < 1:
        raise InputError("n_traj must be >= 1")
    rng = np.random.default_rng(seed)
    kept, attempts = [], 0
    while len(kept) < n_traj and attempts < 10 * n_traj:
        m = min(batch, 10 * n_traj - attempts)
        results = rollout(env, expert, env.sample_initial(rng, m))
        attempts += m
        kept.extend(r for r in results if r.success and len(r.actions))
    if len(kept) < n_traj or len(kept) < 0.5 * attempts:
        raise EnvironmentMisconfigured(
            f"{env.name}: expert succeeded {len(kept)}/{attempts} times; below the 50% floor")
    return TrajectoryDataset([r.transitions() for r in kept[:n_traj]])


@dataclass
class EvaluationResult:
    success_rate: float
    successes: int
    n_trials: int
    rollouts: list = field(repr=False, default_factory=list)
    initial_conditions: np.ndarray = field(repr=False, default=None)


def evaluate(env: EnvSpec, policy: Policy, n_trials: int = 48, noise_scale: float = 0.0,
             seed: int = 0) -> EvaluationResult:
    """Cycle through the 16 fixed initial conditions, one noise seed per trial."""
    if noise_scale < 0:
        raise InputError("noise_scale must be non-negative")
    grid = env.initial_grid()
    ic = np.arange(n_trials) % len(grid)
    seeds = np.random.SeedSequence(seed).generate_state(n_trials, dtype=np.uint32).tolist()
    results = rollout(env, policy, grid[ic], noise_scale, seeds)
    for r, k in zip(results, ic):
        r.initial_condition = int(k)
    succ = sum(r.success for r in results)
    return EvaluationResult(succ / n_trials, succ, n_trials, results, grid)
