"""Bootstrap particle filter over the Lagrangian motion model.

An ensemble owns N weighted state vectors (see motion module for the
layout). One filter step runs predict -> weigh -> summarize -> resample;
the posterior summary is computed before resampling so reported
statistics carry no resampling noise. Resampling happens every step, so
weighing always starts from uniform weights in normal operation.

Checkpoint format (stable): a text file whose first line is ``#``
followed by a JSON header ``{"time", "seed", "point_id", "n"}``, then a
CSV header ``x,y,vx,vy,z,delta_s,weight,terminated`` and one row per
particle with full float precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import geometry, motion
from .geometry import CameraModel, RigidImageMotion
from .motion import IDS, IV, IX, IZ, STATE_DIM, ProcessNoise, SurfaceModel

__all__ = [
    "ParticleEnsemble",
    "CameraObservation",
    "ObservationSet",
    "PosteriorSummary",
    "predict",
    "weigh",
    "resample_systematic",
    "summarize",
    "step",
    "rng_for",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class ParticleEnsemble:
    """Weighted particle set approximating the state posterior."""

    states: np.ndarray
    weights: np.ndarray
    time: float
    terminated: np.ndarray = None
    uninformative: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise ValueError(f"states must be (N, {STATE_DIM})")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.states),):
            raise ValueError("weights must be one per particle")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and nonnegative")
        self.time = float(self.time)
        if self.terminated is None:
            self.terminated = np.zeros(len(self.states), dtype=bool)
        else:
            self.terminated = np.asarray(self.terminated, dtype=bool)

    @property
    def n(self) -> int:
        return len(self.states)

    @classmethod
    def uniform(cls, states, time: float) -> "ParticleEnsemble":
        states = np.asarray(states, dtype=float)
        n = len(states)
        return cls(states, np.full(n, 1.0 / n), time)


@dataclass
class CameraObservation:
    """One camera's contribution to a frame: how to score a particle.

    ``window_center`` is the integer pixel where the test sub-image was
    extracted (the anchor of ``surface``); a particle's matching offset is
    shake(project(position)) - window_center. ``surface`` may be any
    object with an ``evaluate(offsets) -> likelihood`` method.
    """

    camera: CameraModel
    shake: Optional[RigidImageMotion]
    surface: object
    window_center: np.ndarray

    def __post_init__(self):
        self.window_center = np.asarray(self.window_center, dtype=float).reshape(2)


@dataclass
class ObservationSet:
    """Per-frame observations; cameras may be absent (occluded/missing)."""

    time: float
    observations: Sequence[CameraObservation] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class PosteriorSummary:
    """Weighted moments of an ensemble plus degeneracy diagnostics."""

    mean_state: np.ndarray
    position_cov: np.ndarray
    velocity_cov: np.ndarray
    ess: float
    time: float
    velocity_skewness: np.ndarray
    uninformative: bool = False

    @property
    def mean_position(self) -> np.ndarray:
        return self.mean_state[IX]

    @property
    def mean_velocity(self) -> np.ndarray:
        return self.mean_state[IV]


def predict(ensemble: ParticleEnsemble, dt: float, noise: ProcessNoise,
            surface: SurfaceModel, rng: np.random.Generator) -> ParticleEnsemble:
    """Advance every particle through the motion model with independent
    draws; weights are untouched. Terminated particles stay frozen."""
    accel = rng.standard_normal((ensemble.n, 2))
    walk = rng.standard_normal(ensemble.n)
    new_states, newly_dead = motion.transition(
        ensemble.states, dt, noise, surface, ensemble.time, accel, walk)
    frozen = ensemble.terminated
    if np.any(frozen):
        new_states[frozen] = ensemble.states[frozen]
    return ParticleEnsemble(
        new_states, ensemble.weights.copy(), ensemble.time + dt,
        terminated=frozen | newly_dead, uninformative=ensemble.uninformative)


def weigh(ensemble: ParticleEnsemble,
          obs: Optional[ObservationSet]) -> ParticleEnsemble:
    """Multiply particle weights by the per-camera matching likelihoods.

    For each camera the particle position is projected, the frame's shake
    correction applied, and the likelihood surface evaluated at the
    offset from the test-window anchor; camera factors multiply (the
    cameras observe independently). Terminated particles get zero weight.
    An empty (or None) observation set leaves weights unchanged apart
    from that. If the total weight vanishes, weights reset to uniform and
    the ensemble is flagged uninformative.
    """
    w = ensemble.weights.astype(float).copy()
    entries = [] if obs is None else [
        o for o in obs.observations
        if not getattr(o.surface, "low_information", False)
    ]
    if obs is not None and len(obs.observations) and abs(obs.time - ensemble.time) > 1e-9:
        raise ValueError(f"observation time {obs.time} != ensemble time {ensemble.time}")

    if entries:
        world = np.column_stack([
            ensemble.states[:, IX], ensemble.states[:, IZ],
        ])
        for o in entries:
            pixels = geometry.project(o.camera, world, behind="nan")
            if o.shake is not None:
                pixels = o.shake.apply(pixels)
            offsets = pixels - o.window_center
            w *= o.surface.evaluate(offsets)

    alive = ~ensemble.terminated
    if not np.any(alive):
        return ParticleEnsemble(
            ensemble.states.copy(), np.full(ensemble.n, 1.0 / ensemble.n),
            ensemble.time, terminated=ensemble.terminated.copy(),
            uninformative=True)
    if not entries and np.all(alive):
        # pure prediction: weights pass through untouched
        return ParticleEnsemble(
            ensemble.states.copy(), w, ensemble.time,
            terminated=ensemble.terminated.copy(),
            uninformative=ensemble.uninformative)
    w[~alive] = 0.0
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        return ParticleEnsemble(
            ensemble.states.copy(), np.full(ensemble.n, 1.0 / ensemble.n),
            ensemble.time, terminated=ensemble.terminated.copy(),
            uninformative=True)
    return ParticleEnsemble(
        ensemble.states.copy(), w / total, ensemble.time,
        terminated=ensemble.terminated.copy(),
        uninformative=ensemble.uninformative)


def resample_systematic(ensemble: ParticleEnsemble,
                        rng_draw: float) -> ParticleEnsemble:
    """Systematic (low-variance) resampling.

    Offspring are selected at cumulative-weight positions
    ``rng_draw + i/N`` with ``rng_draw`` uniform on [0, 1/N); weights
    reset to 1/N. Offspring counts deviate from N*w_j by less than 1.
    """
    n = ensemble.n
    if not 0.0 <= rng_draw < 1.0 / n:
        raise ValueError("rng_draw must lie in [0, 1/N)")
    w = ensemble.weights / ensemble.weights.sum()
    # work in N-scaled cumulative space: integer-valued sums stay exact,
    # so structured weights (uniform, k/N) resample deterministically
    cum = np.cumsum(w * n)
    cum[-1] = float(n)
    positions = n * rng_draw + np.arange(n)
    idx = np.clip(np.searchsorted(cum, positions, side="right"), 0, n - 1)
    return ParticleEnsemble(
        ensemble.states[idx], np.full(n, 1.0 / n), ensemble.time,
        terminated=ensemble.terminated[idx],
        uninformative=ensemble.uninformative)


def summarize(ensemble: ParticleEnsemble) -> PosteriorSummary:
    """Weighted mean, position/velocity covariances, ESS and skewness."""
    w = ensemble.weights / ensemble.weights.sum()
    mean = w @ ensemble.states
    centered = ensemble.states - mean
    pos_cov = (centered[:, IX] * w[:, None]).T @ centered[:, IX]
    vel_cov = (centered[:, IV] * w[:, None]).T @ centered[:, IV]
    ess = 1.0 / np.sum(w * w)
    var = np.diag(vel_cov)
    with np.errstate(invalid="ignore", divide="ignore"):
        third = w @ (centered[:, IV] ** 3)
        skew = np.where(var > 0, third / np.power(var, 1.5, where=var > 0), 0.0)
    return PosteriorSummary(
        mean_state=mean,
        position_cov=0.5 * (pos_cov + pos_cov.T),
        velocity_cov=0.5 * (vel_cov + vel_cov.T),
        ess=float(ess),
        time=ensemble.time,
        velocity_skewness=skew,
        uninformative=ensemble.uninformative,
    )


ObservationInput = Union[ObservationSet, None,
                         Callable[[ParticleEnsemble], Optional[ObservationSet]]]


def step(ensemble: ParticleEnsemble, obs: ObservationInput, dt: float,
         noise: ProcessNoise, surface: SurfaceModel,
         rng: np.random.Generator) -> tuple[ParticleEnsemble, PosteriorSummary]:
    """One filter cycle: predict, weigh, summarize, then resample.

    ``obs`` may be an ObservationSet, None (pure prediction), or a
    callable receiving the predicted ensemble and returning the
    ObservationSet — the callable form exists because test windows are
    extracted at the projected prior weighted mean, which is only known
    after prediction.
    """
    predicted = predict(ensemble, dt, noise, surface, rng)
    if callable(obs):
        obs = obs(predicted)
    weighed = weigh(predicted, obs)
    summary = summarize(weighed)
    resampled = resample_systematic(weighed, rng.uniform(0.0, 1.0 / weighed.n))
    return resampled, summary


def rng_for(master_seed: int, *key: int) -> np.random.Generator:
    """Deterministic, order-independent generator for a work unit.

    Keyed by integers such as (start index, point id, direction, frame
    index): any worker reproduces the same stream for the same key, so
    campaign output is independent of scheduling order.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed),
                                 spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)


def save_checkpoint(path, ensemble: ParticleEnsemble, *, seed: int = 0,
                    point_id: int = 0) -> None:
    header = {"time": ensemble.time, "seed": int(seed),
              "point_id": int(point_id), "n": ensemble.n}
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header) + "\n")
        fh.write("x,y,vx,vy,z,delta_s,weight,terminated\n")
        for s, w, t in zip(ensemble.states, ensemble.weights, ensemble.terminated):
            fh.write(",".join(repr(float(v)) for v in s) + f",{float(w)!r},{int(t)}\n")


def load_checkpoint(path) -> tuple[ParticleEnsemble, dict]:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError("checkpoint must start with a JSON header line")
        header = json.loads(first[1:].strip())
        fh.readline()  # column header
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    states = rows[:, :STATE_DIM]
    weights = rows[:, STATE_DIM]
    terminated = rows[:, STATE_DIM + 1].astype(bool)
    ens = ParticleEnsemble(states, weights, header["time"], terminated=terminated)
    return ens, header
