"""The bundle-adjustment factor graph.

Variables are keyframes (6-dim global angle-axis + translation states) and
landmarks (3-dim positions).  Each variable carries a belief and an
automatically generated diagonal prior; each measurement factor connects
exactly one keyframe and one landmark and stores its linearisation point,
its 9-dim information-form parameters, and the last message sent to each
side.  Storage is columnar (stacked numpy arrays indexed by id) so the
engine can vectorise across factors; `keyframe()`, `landmark()` and
`factor()` return snapshot views for inspection.

Priors are born at the same per-coordinate scale as the summed adjacent
measurement information and are weakened geometrically to 1/100 of that
over the first iterations of a variable's life; the prior mean stays pinned
at the variable's initial state throughout.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import camera
from .camera import DEPTH_EPSILON, Intrinsics, jacobian_many, project_many
from .dataset_io import ProblemSpec
from .info_gaussian import InfoGaussian

PRIOR_TARGET_RATIO = 0.01
PRIOR_FLOOR_RTOL = 1e-12
ARE_SENTINEL_PX = 1e6
DEFAULT_HUBER_NSIGMA = 2.0

KF_DIM = 6
LM_DIM = 3


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class VariableView:
    """Read-only snapshot of a variable node."""

    id: int
    kind: str  # "keyframe" | "landmark"
    dim: int
    state: np.ndarray
    belief: InfoGaussian
    prior: InfoGaussian
    prior_initial: InfoGaussian
    prior_target: InfoGaussian
    prior_is_fallback: bool


@dataclass(frozen=True)
class FactorView:
    """Read-only snapshot of a measurement factor node."""

    id: int
    keyframe_id: int
    landmark_id: int
    z: np.ndarray
    sigma_meas: np.ndarray  # 2x2 measurement noise covariance
    huber_nsigma: float
    lin_point: np.ndarray
    factor: InfoGaussian
    msg_to_keyframe: InfoGaussian
    msg_to_landmark: InfoGaussian
    iters_since_relin: int
    huber_weight: float
    linearization_valid: bool


def _diag_gaussian(diag: np.ndarray, mean: np.ndarray) -> InfoGaussian:
    return InfoGaussian(diag * mean, np.diag(diag))


class FactorGraph:
    def __init__(self, intrinsics: Intrinsics, huber_nsigma: float = DEFAULT_HUBER_NSIGMA):
        self.intrinsics = intrinsics
        self.huber_nsigma = float(huber_nsigma) if huber_nsigma else np.inf
        self.iteration = 0
        self.notes: Counter = Counter()

        self.kf_state = np.zeros((0, KF_DIM))
        self.lm_state = np.zeros((0, LM_DIM))
        self.kf_belief_eta = np.zeros((0, KF_DIM))
        self.kf_belief_lam = np.zeros((0, KF_DIM, KF_DIM))
        self.lm_belief_eta = np.zeros((0, LM_DIM))
        self.lm_belief_lam = np.zeros((0, LM_DIM, LM_DIM))
        self.kf_prior_diag0 = np.zeros((0, KF_DIM))
        self.kf_prior_mean = np.zeros((0, KF_DIM))
        self.kf_prior_scale = np.zeros(0)
        self.kf_prior_fallback = np.zeros(0, dtype=bool)
        self.kf_birth = np.zeros(0, dtype=int)
        self.lm_prior_diag0 = np.zeros((0, LM_DIM))
        self.lm_prior_mean = np.zeros((0, LM_DIM))
        self.lm_prior_scale = np.zeros(0)
        self.lm_prior_fallback = np.zeros(0, dtype=bool)
        self.lm_birth = np.zeros(0, dtype=int)

        self.f_kf = np.zeros(0, dtype=int)
        self.f_lm = np.zeros(0, dtype=int)
        self.f_z = np.zeros((0, 2))
        self.f_sigma = np.zeros(0)
        self.f_nsigma = np.zeros(0)
        self.f_lin = np.zeros((0, 9))
        self.f_eta = np.zeros((0, 9))
        self.f_lam = np.zeros((0, 9, 9))
        self.f_h0 = np.zeros((0, 2))
        self.f_weight = np.zeros(0)
        self.f_valid = np.zeros(0, dtype=bool)
        self.f_iters_since_relin = np.zeros(0, dtype=int)
        self.f_last_relin = np.zeros(0, dtype=int)
        self.f_msg_kf_eta = np.zeros((0, KF_DIM))
        self.f_msg_kf_lam = np.zeros((0, KF_DIM, KF_DIM))
        self.f_msg_lm_eta = np.zeros((0, LM_DIM))
        self.f_msg_lm_lam = np.zeros((0, LM_DIM, LM_DIM))
        self.f_in_kf_eta = np.zeros((0, KF_DIM))
        self.f_in_kf_lam = np.zeros((0, KF_DIM, KF_DIM))
        self.f_in_lm_eta = np.zeros((0, LM_DIM))
        self.f_in_lm_lam = np.zeros((0, LM_DIM, LM_DIM))

    # ------------------------------------------------------------------ sizes

    @property
    def n_keyframes(self) -> int:
        return self.kf_state.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.lm_state.shape[0]

    @property
    def n_variables(self) -> int:
        return self.n_keyframes + self.n_landmarks

    @property
    def n_measurement_factors(self) -> int:
        return self.f_kf.shape[0]

    @property
    def n_factor_nodes(self) -> int:
        """Measurement factors plus the one prior factor per variable."""
        return self.n_measurement_factors + self.n_variables

    # ------------------------------------------------------------------ views

    def keyframe(self, i: int) -> VariableView:
        return self._variable_view("keyframe", i)

    def landmark(self, j: int) -> VariableView:
        return self._variable_view("landmark", j)

    def _variable_view(self, kind: str, idx: int) -> VariableView:
        if kind == "keyframe":
            state, be, bl = self.kf_state[idx], self.kf_belief_eta[idx], self.kf_belief_lam[idx]
            diag0, mean = self.kf_prior_diag0[idx], self.kf_prior_mean[idx]
            scale, fb = self.kf_prior_scale[idx], self.kf_prior_fallback[idx]
            dim = KF_DIM
        else:
            state, be, bl = self.lm_state[idx], self.lm_belief_eta[idx], self.lm_belief_lam[idx]
            diag0, mean = self.lm_prior_diag0[idx], self.lm_prior_mean[idx]
            scale, fb = self.lm_prior_scale[idx], self.lm_prior_fallback[idx]
            dim = LM_DIM
        return VariableView(
            id=idx,
            kind=kind,
            dim=dim,
            state=state.copy(),
            belief=InfoGaussian(be.copy(), 0.5 * (bl + bl.T)),
            prior=_diag_gaussian(scale * diag0, mean),
            prior_initial=_diag_gaussian(diag0, mean),
            prior_target=_diag_gaussian(PRIOR_TARGET_RATIO * diag0, mean),
            prior_is_fallback=bool(fb),
        )

    def factor(self, m: int) -> FactorView:
        return FactorView(
            id=m,
            keyframe_id=int(self.f_kf[m]),
            landmark_id=int(self.f_lm[m]),
            z=self.f_z[m].copy(),
            sigma_meas=self.f_sigma[m] ** 2 * np.eye(2),
            huber_nsigma=float(self.f_nsigma[m]),
            lin_point=self.f_lin[m].copy(),
            factor=InfoGaussian(self.f_eta[m].copy(), 0.5 * (self.f_lam[m] + self.f_lam[m].T)),
            msg_to_keyframe=InfoGaussian(
                self.f_msg_kf_eta[m].copy(), 0.5 * (self.f_msg_kf_lam[m] + self.f_msg_kf_lam[m].T)
            ),
            msg_to_landmark=InfoGaussian(
                self.f_msg_lm_eta[m].copy(), 0.5 * (self.f_msg_lm_lam[m] + self.f_msg_lm_lam[m].T)
            ),
            iters_since_relin=int(self.f_iters_since_relin[m]),
            huber_weight=float(self.f_weight[m]),
            linearization_valid=bool(self.f_valid[m]),
        )

    # ----------------------------------------------------------- linearisation

    def linearize_factors(self, idx: np.ndarray, lin_points: np.ndarray) -> np.ndarray:
        """(Re)linearise the factors in `idx` at the given 9-dim points.

        Behind-camera points abort their factor's relinearisation (the old
        parameters are kept and the row of the returned mask is False).
        Freshly created factors with an invalid initial point get zero
        information until a later attempt succeeds.
        """
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            return np.zeros(0, dtype=bool)
        kf_states = lin_points[:, :KF_DIM]
        lm_pos = lin_points[:, KF_DIM:]
        uv_hat, depth = project_many(kf_states, lm_pos, self.intrinsics)
        ok = depth > DEPTH_EPSILON
        good = idx[ok]
        if good.size:
            jac = jacobian_many(kf_states[ok], lm_pos[ok], self.intrinsics)
            residual = self.f_z[good] - uv_hat[ok]
            mahal = np.linalg.norm(residual, axis=1) / self.f_sigma[good]
            weight = huber_weight(mahal, self.f_nsigma[good])
            inv_noise = weight / self.f_sigma[good] ** 2  # w * Sigma_M^-1 (isotropic)
            jt = np.swapaxes(jac, 1, 2)
            self.f_lam[good] = inv_noise[:, None, None] * (jt @ jac)
            target = np.einsum("fij,fj->fi", jac, lin_points[ok]) + residual
            self.f_eta[good] = inv_noise[:, None] * np.einsum("fji,fj->fi", jac, target)
            self.f_lin[good] = lin_points[ok]
            self.f_h0[good] = uv_hat[ok]
            self.f_weight[good] = weight
            self.f_valid[good] = True
        return ok

    # ----------------------------------------------------------------- priors

    def prior_information(self, kind: str):
        """Current (eta, diag) arrays of the weakened priors."""
        if kind == "keyframe":
            diag = self.kf_prior_scale[:, None] * self.kf_prior_diag0
            return diag * self.kf_prior_mean, diag
        diag = self.lm_prior_scale[:, None] * self.lm_prior_diag0
        return diag * self.lm_prior_mean, diag

    def refresh_priors(self, kf_ids: np.ndarray, lm_ids: np.ndarray) -> None:
        """Regenerate priors for the given variables from their adjacent
        factors' current linearisations (used for freshly added variables)."""
        kf_ids = np.asarray(kf_ids, dtype=int)
        lm_ids = np.asarray(lm_ids, dtype=int)
        if kf_ids.size == 0 and lm_ids.size == 0:
            return
        touched = np.isin(self.f_kf, kf_ids) | np.isin(self.f_lm, lm_ids)
        contrib_kf, contrib_lm = self._measurement_information_diag(np.flatnonzero(touched))
        for i in kf_ids:
            self.kf_prior_diag0[i] = _floor_prior_row(contrib_kf[i], self.notes)
            self.kf_prior_fallback[i] = not np.any(contrib_kf[i] > 0)
            self.kf_prior_mean[i] = self.kf_state[i]
            self.kf_prior_scale[i] = 1.0
            self.kf_belief_eta[i] = self.kf_prior_diag0[i] * self.kf_prior_mean[i]
            self.kf_belief_lam[i] = np.diag(self.kf_prior_diag0[i])
        for j in lm_ids:
            self.lm_prior_diag0[j] = _floor_prior_row(contrib_lm[j], self.notes)
            self.lm_prior_fallback[j] = not np.any(contrib_lm[j] > 0)
            self.lm_prior_mean[j] = self.lm_state[j]
            self.lm_prior_scale[j] = 1.0
            self.lm_belief_eta[j] = self.lm_prior_diag0[j] * self.lm_prior_mean[j]
            self.lm_belief_lam[j] = np.diag(self.lm_prior_diag0[j])

    def _measurement_information_diag(self, idx: np.ndarray):
        """Per-variable diagonal of the summed, unweighted J' Sigma_M^-1 J of
        the factors in `idx`, evaluated at their linearisation points."""
        contrib_kf = np.zeros((self.n_keyframes, KF_DIM))
        contrib_lm = np.zeros((self.n_landmarks, LM_DIM))
        idx = idx[self.f_valid[idx]]
        if idx.size:
            jac = jacobian_many(self.f_lin[idx, :KF_DIM], self.f_lin[idx, KF_DIM:], self.intrinsics)
            colsq = np.sum(jac**2, axis=1) / self.f_sigma[idx, None] ** 2
            np.add.at(contrib_kf, self.f_kf[idx], colsq[:, :KF_DIM])
            np.add.at(contrib_lm, self.f_lm[idx], colsq[:, KF_DIM:])
        return contrib_kf, contrib_lm

    # ------------------------------------------------------------- evaluation

    def residuals(self):
        """(residuals (F,2), depths (F,)) at current states.  Read-only."""
        if self.n_measurement_factors == 0:
            return np.zeros((0, 2)), np.zeros(0)
        uv_hat, depth = project_many(
            self.kf_state[self.f_kf], self.lm_state[self.f_lm], self.intrinsics
        )
        return self.f_z - uv_hat, depth

    def average_reprojection_error(self) -> float:
        """Mean Euclidean pixel error over all measurements at current states.

        Behind-camera measurements contribute a large sentinel (1e6 px) and a
        diagnostic note.  Defined as 0.0 for a graph with no measurements.
        """
        if self.n_measurement_factors == 0:
            return 0.0
        residual, depth = self.residuals()
        norms = np.linalg.norm(residual, axis=1)
        behind = depth <= DEPTH_EPSILON
        if np.any(behind):
            norms = np.where(behind, ARE_SENTINEL_PX, norms)
            self.notes["are_behind_camera"] += int(behind.sum())
        return float(np.mean(norms))

    def energy(self) -> float:
        """The objective: prior Mahalanobis terms plus Huber-modified
        measurement terms, at current states and current prior strengths."""
        total = 0.0
        for kind in ("keyframe", "landmark"):
            if kind == "keyframe":
                delta = self.kf_state - self.kf_prior_mean
                diag = self.kf_prior_scale[:, None] * self.kf_prior_diag0
            else:
                delta = self.lm_state - self.lm_prior_mean
                diag = self.lm_prior_scale[:, None] * self.lm_prior_diag0
            total += float(np.sum(diag * delta**2))
        if self.n_measurement_factors:
            residual, depth = self.residuals()
            behind = depth <= DEPTH_EPSILON
            if np.any(behind):
                # stale linearisation residual for flagged rows
                stale = self.f_z - self.f_h0
                stale[~self.f_valid] = 0.0
                residual = np.where(behind[:, None], stale, residual)
                self.notes["energy_behind_camera"] += int(behind.sum())
            mahal = np.linalg.norm(residual, axis=1) / self.f_sigma
            total += float(np.sum(huber_energy(mahal, self.f_nsigma)))
        return total

    def classify_outliers(self) -> np.ndarray:
        """Measurements currently in the linear (outlier) loss regime."""
        residual, depth = self.residuals()
        mahal = np.linalg.norm(residual, axis=1) / self.f_sigma
        mahal = np.where(depth <= DEPTH_EPSILON, np.inf, mahal)
        return mahal > self.f_nsigma

    # ------------------------------------------------------------ mutation

    def add_keyframe(self, state: np.ndarray | None = None) -> int:
        """Append a keyframe.  With no state given, copies the pose of the
        most recent keyframe (incremental SLAM initialisation)."""
        if state is None:
            if self.n_keyframes == 0:
                raise BuildError("no keyframe to copy the initial pose from")
            state = self.kf_state[-1]
        state = np.asarray(state, float).reshape(KF_DIM)
        self.kf_state = np.vstack([self.kf_state, state[None, :]])
        self.kf_prior_diag0 = np.vstack([self.kf_prior_diag0, np.ones((1, KF_DIM))])
        self.kf_prior_mean = np.vstack([self.kf_prior_mean, state[None, :]])
        self.kf_prior_scale = np.append(self.kf_prior_scale, 1.0)
        self.kf_prior_fallback = np.append(self.kf_prior_fallback, True)
        self.kf_birth = np.append(self.kf_birth, self.iteration)
        self.kf_belief_eta = np.vstack([self.kf_belief_eta, (np.ones(KF_DIM) * state)[None, :]])
        self.kf_belief_lam = np.concatenate([self.kf_belief_lam, np.eye(KF_DIM)[None]], axis=0)
        return self.n_keyframes - 1

    def add_landmark(self, position: np.ndarray) -> int:
        position = np.asarray(position, float).reshape(LM_DIM)
        self.lm_state = np.vstack([self.lm_state, position[None, :]])
        self.lm_prior_diag0 = np.vstack([self.lm_prior_diag0, np.ones((1, LM_DIM))])
        self.lm_prior_mean = np.vstack([self.lm_prior_mean, position[None, :]])
        self.lm_prior_scale = np.append(self.lm_prior_scale, 1.0)
        self.lm_prior_fallback = np.append(self.lm_prior_fallback, True)
        self.lm_birth = np.append(self.lm_birth, self.iteration)
        self.lm_belief_eta = np.vstack([self.lm_belief_eta, (np.ones(LM_DIM) * position)[None, :]])
        self.lm_belief_lam = np.concatenate([self.lm_belief_lam, np.eye(LM_DIM)[None]], axis=0)
        return self.n_landmarks - 1

    def add_measurement(self, kf_id: int, lm_id: int, z: np.ndarray, sigma: float = 1.0) -> int:
        return self.add_measurements([kf_id], [lm_id], np.asarray(z, float).reshape(1, 2), [sigma])

    def add_measurements(self, kf_ids, lm_ids, zs, sigmas) -> int:
        """Append measurement factors, linearise them at current states, and
        regenerate priors of variables added since the last iteration.
        Returns the id of the last factor added."""
        kf_ids = np.asarray(kf_ids, dtype=int).reshape(-1)
        lm_ids = np.asarray(lm_ids, dtype=int).reshape(-1)
        zs = np.asarray(zs, float).reshape(-1, 2)
        sigmas = np.asarray(sigmas, float).reshape(-1)
        if np.any(kf_ids < 0) or np.any(kf_ids >= self.n_keyframes):
            bad = kf_ids[(kf_ids < 0) | (kf_ids >= self.n_keyframes)][0]
            raise BuildError(f"measurement references missing keyframe {bad}")
        if np.any(lm_ids < 0) or np.any(lm_ids >= self.n_landmarks):
            bad = lm_ids[(lm_ids < 0) | (lm_ids >= self.n_landmarks)][0]
            raise BuildError(f"measurement references missing landmark {bad}")

        existing = set(zip(self.f_kf.tolist(), self.f_lm.tolist()))
        seen = set()
        for pair in zip(kf_ids.tolist(), lm_ids.tolist()):
            if pair in existing or pair in seen:
                self.notes["duplicate_measurement"] += 1
            seen.add(pair)

        start = self.n_measurement_factors
        n = kf_ids.shape[0]
        self.f_kf = np.append(self.f_kf, kf_ids)
        self.f_lm = np.append(self.f_lm, lm_ids)
        self.f_z = np.vstack([self.f_z, zs])
        self.f_sigma = np.append(self.f_sigma, sigmas)
        self.f_nsigma = np.append(self.f_nsigma, np.full(n, self.huber_nsigma))
        self.f_lin = np.vstack(
            [self.f_lin, np.concatenate([self.kf_state[kf_ids], self.lm_state[lm_ids]], axis=1)]
        )
        self.f_eta = np.vstack([self.f_eta, np.zeros((n, 9))])
        self.f_lam = np.concatenate([self.f_lam, np.zeros((n, 9, 9))], axis=0)
        self.f_h0 = np.vstack([self.f_h0, np.full((n, 2), np.nan)])
        self.f_weight = np.append(self.f_weight, np.ones(n))
        self.f_valid = np.append(self.f_valid, np.zeros(n, dtype=bool))
        self.f_iters_since_relin = np.append(self.f_iters_since_relin, np.zeros(n, dtype=int))
        self.f_last_relin = np.append(self.f_last_relin, np.zeros(n, dtype=int))
        self.f_msg_kf_eta = np.vstack([self.f_msg_kf_eta, np.zeros((n, KF_DIM))])
        self.f_msg_kf_lam = np.concatenate([self.f_msg_kf_lam, np.zeros((n, KF_DIM, KF_DIM))], axis=0)
        self.f_msg_lm_eta = np.vstack([self.f_msg_lm_eta, np.zeros((n, LM_DIM))])
        self.f_msg_lm_lam = np.concatenate([self.f_msg_lm_lam, np.zeros((n, LM_DIM, LM_DIM))], axis=0)
        self.f_in_kf_eta = np.vstack([self.f_in_kf_eta, np.zeros((n, KF_DIM))])
        self.f_in_kf_lam = np.concatenate([self.f_in_kf_lam, np.zeros((n, KF_DIM, KF_DIM))], axis=0)
        self.f_in_lm_eta = np.vstack([self.f_in_lm_eta, np.zeros((n, LM_DIM))])
        self.f_in_lm_lam = np.concatenate([self.f_in_lm_lam, np.zeros((n, LM_DIM, LM_DIM))], axis=0)

        new_idx = np.arange(start, start + n)
        ok = self.linearize_factors(new_idx, self.f_lin[new_idx])
        if not np.all(ok):
            self.notes["linearize_behind_camera"] += int((~ok).sum())
        self.f_last_relin[new_idx] = self.iteration

        young_kf = np.flatnonzero(self.kf_birth == self.iteration)
        young_lm = np.flatnonzero(self.lm_birth == self.iteration)
        self.refresh_priors(
            young_kf[np.isin(young_kf, kf_ids)], young_lm[np.isin(young_lm, lm_ids)]
        )
        return self.n_measurement_factors - 1

    # ------------------------------------------------------------- utilities

    def copy(self) -> "FactorGraph":
        out = FactorGraph(self.intrinsics, self.huber_nsigma)
        out.iteration = self.iteration
        out.notes = Counter(self.notes)
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                setattr(out, name, value.copy())
        return out

    def astype(self, dtype) -> "FactorGraph":
        """Copy with all float arrays cast to `dtype` (e.g. float32 for
        studying reduced-precision behaviour; excluded from acceptance)."""
        out = self.copy()
        for name, value in vars(out).items():
            if isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
                setattr(out, name, value.astype(dtype))
        return out

    def to_problem(self) -> ProblemSpec:
        """Export current states and measurements as a ProblemSpec."""
        return ProblemSpec(
            intrinsics=self.intrinsics,
            kf_init=self.kf_state.copy(),
            lm_init=self.lm_state.copy(),
            meas_kf=self.f_kf.copy(),
            meas_lm=self.f_lm.copy(),
            meas_uv=self.f_z.copy(),
            meas_sigma=self.f_sigma.copy(),
        )

    def cold_restart(self) -> "FactorGraph":
        """A fresh graph over the same measurements with initial states equal
        to this graph's current states: beliefs, messages, linearisations and
        prior schedules all reset."""
        return build(self.to_problem(), huber_nsigma=self.huber_nsigma)

    def validate(self, psd_rtol: float = 1e-8) -> dict:
        """Invariant check; returns violation counts (all zero when healthy)."""
        bad = {"belief_not_psd": 0, "factor_rank": 0, "asymmetry": 0}
        for lam in (self.kf_belief_lam, self.lm_belief_lam):
            if lam.size == 0:
                continue
            asym = np.max(np.abs(lam - np.swapaxes(lam, 1, 2)))
            if asym > 1e-9:
                bad["asymmetry"] += 1
            eigs = np.linalg.eigvalsh(0.5 * (lam + np.swapaxes(lam, 1, 2)))
            trace = np.einsum("nii->n", lam)
            bad["belief_not_psd"] += int(np.sum(eigs[:, 0] < -psd_rtol * np.maximum(1.0, trace)))
        fresh = self.f_valid & (self.f_iters_since_relin == 0)
        if np.any(fresh):
            # rank <= 2 right after linearisation: third-largest eigenvalue ~ 0
            eigs = np.linalg.eigvalsh(self.f_lam[fresh])
            scale = np.maximum(eigs[:, -1], 1.0)
            bad["factor_rank"] += int(np.sum(eigs[:, -3] > 1e-9 * scale))
        return bad


def huber_weight(mahal, nsigma):
    """Noise-covariance rescaling that reproduces the Huber loss.

    w = 1 in the quadratic regime (M <= N_sigma); beyond the threshold
    w = 2 N_sigma / M - (N_sigma / M)^2, so that w * M^2 equals the linear
    loss 2 N_sigma M - N_sigma^2.  Continuous, equal to 1 on [0, N_sigma],
    strictly decreasing and positive beyond.
    """
    scalar_in = np.ndim(mahal) == 0
    mahal = np.atleast_1d(np.asarray(mahal, dtype=float))
    nsigma = np.broadcast_to(np.asarray(nsigma, dtype=float), mahal.shape)
    w = np.ones_like(mahal)
    linear = mahal > nsigma
    if np.any(linear):
        ratio = nsigma[linear] / mahal[linear]
        w[linear] = 2 * ratio - ratio**2
    return float(w[0]) if scalar_in else w


def huber_energy(mahal, nsigma):
    """Piecewise Huber contribution: M^2 below the threshold, else
    2 N_sigma M - N_sigma^2."""
    scalar_in = np.ndim(mahal) == 0
    mahal = np.atleast_1d(np.asarray(mahal, dtype=float))
    nsigma = np.broadcast_to(np.asarray(nsigma, dtype=float), mahal.shape)
    out = mahal**2
    linear = mahal > nsigma
    if np.any(linear):
        out[linear] = 2 * nsigma[linear] * mahal[linear] - nsigma[linear] ** 2
    return float(out[0]) if scalar_in else out


def _floor_prior_row(row: np.ndarray, notes: Counter) -> np.ndarray:
    top = row.max() if row.size else 0.0
    if top <= 0.0:
        notes["fallback_prior"] += 1
        return np.ones_like(row)
    return np.maximum(row, PRIOR_FLOOR_RTOL * top)


def generate_priors(graph: FactorGraph) -> None:
    """Set every variable's initial prior from its adjacent measurements.

    The initial prior information diagonal equals the diagonal of the summed
    adjacent (unweighted) J' Sigma_M^-1 J blocks, with the prior mean pinned
    at the variable's current state; variables with no adjacent factor fall
    back to a unit isotropic prior and are flagged.  Beliefs are reset to the
    initial-strength priors.
    """
    contrib_kf, contrib_lm = graph._measurement_information_diag(
        np.arange(graph.n_measurement_factors)
    )
    graph.kf_prior_fallback = ~np.any(contrib_kf > 0, axis=1)
    graph.lm_prior_fallback = ~np.any(contrib_lm > 0, axis=1)
    graph.notes["fallback_prior"] += int(graph.kf_prior_fallback.sum() + graph.lm_prior_fallback.sum())
    graph.kf_prior_diag0 = np.stack(
        [_floor_prior_row(r, Counter()) for r in contrib_kf]
    ) if graph.n_keyframes else contrib_kf
    graph.lm_prior_diag0 = np.stack(
        [_floor_prior_row(r, Counter()) for r in contrib_lm]
    ) if graph.n_landmarks else contrib_lm
    graph.kf_prior_mean = graph.kf_state.copy()
    graph.lm_prior_mean = graph.lm_state.copy()
    graph.kf_prior_scale = np.ones(graph.n_keyframes)
    graph.lm_prior_scale = np.ones(graph.n_landmarks)
    graph.kf_belief_eta = graph.kf_prior_diag0 * graph.kf_prior_mean
    graph.kf_belief_lam = np.stack([np.diag(d) for d in graph.kf_prior_diag0]) \
        if graph.n_keyframes else np.zeros((0, KF_DIM, KF_DIM))
    graph.lm_belief_eta = graph.lm_prior_diag0 * graph.lm_prior_mean
    graph.lm_belief_lam = np.stack([np.diag(d) for d in graph.lm_prior_diag0]) \
        if graph.n_landmarks else np.zeros((0, LM_DIM, LM_DIM))


def build(problem: ProblemSpec, huber_nsigma: float = DEFAULT_HUBER_NSIGMA) -> FactorGraph:
    """Construct the factor graph for a problem.

    One prior factor per variable, one measurement factor per observation,
    all measurement factors linearised at the initial states, all messages
    zero-information, beliefs at the initial-strength priors.
    """
    problem.validate()
    graph = FactorGraph(problem.intrinsics, huber_nsigma)
    graph.kf_state = problem.kf_init.copy()
    graph.lm_state = problem.lm_init.copy()
    nk, nl = graph.n_keyframes, graph.n_landmarks
    graph.kf_belief_eta = np.zeros((nk, KF_DIM))
    graph.kf_belief_lam = np.zeros((nk, KF_DIM, KF_DIM))
    graph.lm_belief_eta = np.zeros((nl, LM_DIM))
    graph.lm_belief_lam = np.zeros((nl, LM_DIM, LM_DIM))
    graph.kf_prior_diag0 = np.ones((nk, KF_DIM))
    graph.kf_prior_mean = problem.kf_init.copy()
    graph.kf_prior_scale = np.ones(nk)
    graph.kf_prior_fallback = np.zeros(nk, dtype=bool)
    graph.kf_birth = np.zeros(nk, dtype=int)
    graph.lm_prior_diag0 = np.ones((nl, LM_DIM))
    graph.lm_prior_mean = problem.lm_init.copy()
    graph.lm_prior_scale = np.ones(nl)
    graph.lm_prior_fallback = np.zeros(nl, dtype=bool)
    graph.lm_birth = np.zeros(nl, dtype=int)

    m = problem.n_measurements
    observed = np.zeros(nl, dtype=bool)
    observed[problem.meas_lm] = True
    if not np.all(observed) and m:
        graph.notes["unobserved_landmarks"] += int((~observed).sum())

    graph.f_kf = problem.meas_kf.copy()
    graph.f_lm = problem.meas_lm.copy()
    graph.f_z = problem.meas_uv.copy()
    graph.f_sigma = problem.meas_sigma.copy()
    graph.f_nsigma = np.full(m, graph.huber_nsigma)
    graph.f_lin = np.concatenate(
        [graph.kf_state[graph.f_kf], graph.lm_state[graph.f_lm]], axis=1
    ) if m else np.zeros((0, 9))
    graph.f_eta = np.zeros((m, 9))
    graph.f_lam = np.zeros((m, 9, 9))
    graph.f_h0 = np.full((m, 2), np.nan)
    graph.f_weight = np.ones(m)
    graph.f_valid = np.zeros(m, dtype=bool)
    graph.f_iters_since_relin = np.zeros(m, dtype=int)
    graph.f_last_relin = np.zeros(m, dtype=int)
    graph.f_msg_kf_eta = np.zeros((m, KF_DIM))
    graph.f_msg_kf_lam = np.zeros((m, KF_DIM, KF_DIM))
    graph.f_msg_lm_eta = np.zeros((m, LM_DIM))
    graph.f_msg_lm_lam = np.zeros((m, LM_DIM, LM_DIM))
    graph.f_in_kf_eta = np.zeros((m, KF_DIM))
    graph.f_in_kf_lam = np.zeros((m, KF_DIM, KF_DIM))
    graph.f_in_lm_eta = np.zeros((m, LM_DIM))
    graph.f_in_lm_lam = np.zeros((m, LM_DIM, LM_DIM))

    duplicates = m - len(set(zip(graph.f_kf.tolist(), graph.f_lm.tolist())))
    if duplicates:
        graph.notes["duplicate_measurement"] += duplicates

    ok = graph.linearize_factors(np.arange(m), graph.f_lin)
    if not np.all(ok):
        graph.notes["linearize_behind_camera"] += int((~ok).sum())
    generate_priors(graph)
    return graph
