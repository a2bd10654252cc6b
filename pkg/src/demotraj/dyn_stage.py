"""Dynamics learning stage: a conditional VAE over control variables.

Controls are generated step by step and pushed through the discrete
bicycle model, so the short-term trajectory is physically consistent by
construction.  All tensors are batched over a flat vehicle axis ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .dynamics import VehicleAttributes, step_state
from .numkernel import tensor as T
from .numkernel.layers import MLP
from .numkernel.params import ParamStore
from .numkernel.tensor import Tensor


class WrongHistoryLength(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass
class GaussianLatent:
    mean: Tensor
    log_var: Tensor

    def sample(self, eps: np.ndarray | None) -> Tensor:
        if eps is None:
            return self.mean
        return self.mean + T.exp(self.log_var * 0.5) * eps


@dataclass
class DynStageOutput:
    short_traj: Tensor  # (N, S, 4)
    controls: Tensor  # (N, S, 4)
    dyn_features: Tensor  # (N, d)
    priors: list[GaussianLatent]
    posteriors: list[GaussianLatent] | None = None
    one_step: Tensor | None = None  # (N, S, 4) one-step reconstructions on teacher states


def kl_loss(posteriors: list[GaussianLatent], priors: list[GaussianLatent], weights: np.ndarray | None = None) -> Tensor:
    """Mean over steps of KL(q || p) for diagonal Gaussians, summed over latent dims.

    ``weights`` (N,) averages over the batch axis; rows with weight 0 are ignored.
    """
    if len(posteriors) != len(priors) or not priors:
        raise LengthMismatch("posterior and prior sequences differ in length")
    total = None
    for q, p in zip(posteriors, priors):
        dv = q.log_var - p.log_var
        dm = q.mean - p.mean
        kl = 0.5 * (T.exp(dv) + dm * dm * T.exp(-p.log_var) - 1.0 - dv).sum(axis=-1)
        kl = _weighted_mean(kl, weights)
        total = kl if total is None else total + kl
    return total * (1.0 / len(priors))


def _weighted_mean(x: Tensor, weights: np.ndarray | None) -> Tensor:
    if weights is None:
        return x.mean()
    w = np.asarray(weights, dtype=np.float64)
    return (x * w).sum() * (1.0 / max(w.sum(), 1e-12))


def dynamics_informed_loss(
    true_states, generated_controls, attrs: VehicleAttributes, dt: float, weights: np.ndarray | None = None
) -> Tensor:
    """Mean squared norm of ``X^t - step(X^{t-1}, C^{t-1})`` over the window.

    true_states: (N, S+1, 4); generated_controls: (N, S, 4).
    """
    true_states = T.as_tensor(true_states)
    controls = T.as_tensor(generated_controls)
    if true_states.shape[-2] != controls.shape[-2] + 1:
        raise LengthMismatch("need one more state than controls")
    pred = step_state(true_states[:, :-1, :], controls, attrs, dt)
    err = true_states[:, 1:, :] - pred
    per_vehicle = (err * err).sum(axis=-1).mean(axis=-1)
    return _weighted_mean(per_vehicle, weights)


class DynStage:
    """History embedder, prior, posterior and control generator."""

    def __init__(self, store: ParamStore, cfg: Config, p_steps: int, s_steps: int) -> None:
        m = cfg.model
        d, z = m.d_model, m.z_dim
        self.cfg = cfg
        self.p_steps, self.s_steps = p_steps, s_steps
        self.attrs = cfg.dynamics.attrs()
        self.dt = cfg.horizon.dt_s
        self.pos_scale, self.vel_scale = m.pos_scale_m, m.vel_scale_mps
        self.lat_scale = m.lat_scale_m
        self.z_dim = z
        self.embed = MLP(store, "dyn.embed", [4 * p_steps, d, d], activation="gelu")
        self.step_enc = MLP(store, "dyn.step_enc", [4, d, d], activation="gelu")
        self.prior_net = MLP(store, "dyn.prior", [d, d, 2 * z], activation="gelu", final_gain=0.1)
        self.post_net = MLP(store, "dyn.post", [2 * d, d, 2 * z], activation="gelu", final_gain=0.1)
        self.gen = MLP(store, "dyn.gen", [d + z, d, 4], activation="gelu", final_gain=0.1)
        self.feat = MLP(store, "dyn.feat", [8 * s_steps, d, d], activation="gelu")
        # per-column statistics of the flattened history features, fitted on training data
        self.hist_mean = store.add_buffer("dyn.hist_norm.mean", np.zeros(4 * p_steps))
        self.hist_std = store.add_buffer("dyn.hist_norm.std", np.ones(4 * p_steps))

    # -- pieces ----------------------------------------------------------------

    def _state_features(self, states, ref: np.ndarray):
        """Scale ``(N, ..., 4)`` states; positions relative to each vehicle's reference point.

        Scenes arrive in the target's heading frame, so y is lateral and gets a
        finer scale than x.
        """
        scale = np.array([1 / self.pos_scale, 1 / self.lat_scale, 1 / self.vel_scale, 1 / self.vel_scale])
        shift = np.concatenate([ref, np.zeros_like(ref)], axis=-1)
        shift = shift.reshape(shift.shape[:1] + (1,) * (states.ndim - 2) + (4,))
        return (states - shift) * scale

    def embed_history(self, history: np.ndarray) -> Tensor:
        """(N, P, 4) -> (N, d)."""
        history = np.asarray(history, dtype=np.float64)
        if history.shape[-2] != self.p_steps:
            raise WrongHistoryLength(f"expected {self.p_steps} history steps, got {history.shape[-2]}")
        feats = self._history_columns(history)
        return self.embed(Tensor((feats - self.hist_mean) / self.hist_std))

    def _history_columns(self, history: np.ndarray) -> np.ndarray:
        return self._state_features(history, history[:, -1, :2]).reshape(len(history), -1)

    def fit_normalizer(self, histories: np.ndarray, floor: float = 1e-3) -> None:
        """Standardize history columns with statistics of ``histories`` (N, P, 4).

        Small cross-scene differences (a lane change under way, a braking
        speed profile) otherwise sit under a large shared component and take
        far too many optimizer steps to pick out.
        """
        histories = np.asarray(histories, dtype=np.float64)
        if histories.ndim != 3 or histories.shape[1] != self.p_steps or not len(histories):
            raise WrongHistoryLength(f"expected (N, {self.p_steps}, 4) histories, got {histories.shape}")
        cols = self._history_columns(histories)
        self.hist_mean[...] = cols.mean(axis=0)
        self.hist_std[...] = np.maximum(cols.std(axis=0), floor)

    def encode_state(self, state, ref: np.ndarray) -> Tensor:
        return self.step_enc(self._state_features(state, ref))

    def _gaussian(self, out: Tensor) -> GaussianLatent:
        m = self.cfg.model
        z = self.z_dim
        return GaussianLatent(out[..., :z], T.clip(out[..., z:], m.logvar_min, m.logvar_max))

    def prior(self, context: Tensor) -> GaussianLatent:
        return self._gaussian(self.prior_net(context))

    def posterior(self, context: Tensor, next_enc: Tensor) -> GaussianLatent:
        return self._gaussian(self.post_net(T.concat([context, next_enc], axis=-1)))

    def generate_control(self, context: Tensor, z, phi_prev) -> Tensor:
        """Decode ``(phi, omega, delta, a)``; heading advances from ``phi_prev`` by a bounded step."""
        dyn = self.cfg.dynamics
        raw = self.gen(T.concat([context, T.as_tensor(z)], axis=-1))
        phi = phi_prev + self.cfg.model.heading_step_limit * T.tanh(raw[..., 0])
        omega = raw[..., 1] * 0.1
        delta = dyn.steer_limit * T.tanh(raw[..., 2])
        accel = dyn.accel_limit * T.tanh(raw[..., 3] * (1.0 / dyn.accel_limit))
        return T.stack([phi, omega, delta, accel], axis=-1)

    def dynamic_features(self, short_traj: Tensor, controls: Tensor, ref: np.ndarray, phi_ref: np.ndarray) -> Tensor:
        n = short_traj.shape[0]
        st = self._state_features(short_traj, ref)
        shift = np.stack([phi_ref, np.zeros_like(phi_ref), np.zeros_like(phi_ref), np.zeros_like(phi_ref)], axis=-1)
        scale = np.array([1.0, 1.0, 1.0, 1.0 / self.cfg.dynamics.accel_limit])
        ct = (controls - shift[:, None, :]) * scale
        return self.feat(T.reshape(T.concat([st, ct], axis=-1), (n, -1)))

    # -- generation ------------------------------------------------------------

    def iterative_generate(
        self,
        history: np.ndarray,
        phi_ref: np.ndarray,
        mode: str = "prior",
        teacher: np.ndarray | None = None,
        noise: np.ndarray | None = None,
        control_override=None,
    ) -> DynStageOutput:
        """Roll the CVAE forward for ``s_steps``.

        history: (N, P, 4); phi_ref: (N,) heading at the current time.
        ``teacher`` (N, S, 4) replaces the generated states as the
        conditioning path (required for ``mode="posterior"``).  ``noise``
        (S, N, z) gives the reparameterization draws; ``None`` uses the
        latent mean.  ``control_override(k, ctrl)`` is a test hook.
        """
        if mode not in ("prior", "posterior"):
            raise ValueError(f"mode must be prior or posterior, got {mode!r}")
        if mode == "posterior" and teacher is None:
            raise ValueError("posterior mode needs teacher states")
        history = np.asarray(history, dtype=np.float64)
        ref = history[:, -1, :2]
        xring = self.embed_history(history)
        state = Tensor(history[:, -1, :])
        phi = Tensor(np.asarray(phi_ref, dtype=np.float64))
        context = xring
        priors, posts, controls, states, one_step = [], [], [], [], []
        for k in range(self.s_steps):
            p = self.prior(context)
            priors.append(p)
            eps = None if noise is None else noise[k]
            if mode == "posterior":
                q = self.posterior(context, self.encode_state(teacher[:, k, :], ref))
                posts.append(q)
                z = q.sample(eps)
            else:
                z = p.sample(eps)
            ctrl = self.generate_control(context, z, phi)
            if control_override is not None:
                ctrl = T.as_tensor(control_override(k, ctrl))
            phi = ctrl[:, 0]
            nxt = step_state(state, ctrl, self.attrs, self.dt)
            controls.append(ctrl)
            if teacher is not None:
                one_step.append(nxt)
                state = Tensor(teacher[:, k, :])
            else:
                state = nxt
            states.append(state if teacher is not None else nxt)
            context = xring + self.encode_state(state, ref)
        ctrl_t = T.stack(controls, axis=1)
        traj = T.stack(one_step if teacher is not None else states, axis=1)
        # the history embedding rides along as a residual so F_d keeps the observed motion
        feats = self.dynamic_features(traj, ctrl_t, ref, np.asarray(phi_ref)) + xring
        return DynStageOutput(
            short_traj=traj,
            controls=ctrl_t,
            dyn_features=feats,
            priors=priors,
            posteriors=posts or None,
            one_step=T.stack(one_step, axis=1) if one_step else None,
        )
