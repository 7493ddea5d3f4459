"""Per-image continuous camera trajectories.

An image index is embedded, encoded into rigid and refinement latents,
carried to every sampled exposure time by the latent ODE, and decoded into
a screw motion plus a near-identity refinement. Each sampled pose is

    T(tau) = T_anchor @ exp([S(tau)] theta(tau)) @ T_cmr(tau)

with camera-to-world poses and column vectors. The ablation estimators
(two-layer MLP, GRU cells, linear and cubic B-spline interpolation) produce
the same output type so the training loop does not care which one runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import neuralode
from .autodiff import Tensor
from .liegroup import Pose

ESTIMATORS = ("ode", "mlp", "gru", "linear", "bspline")
AXIS_EPS = 1e-8
CMR_INIT = 1e-5

# skew(w) = reshape(w @ _SKEW_BASIS, (3, 3))
_SKEW_BASIS = np.zeros((3, 9))
_SKEW_BASIS[2, 1], _SKEW_BASIS[1, 2] = -1.0, 1.0
_SKEW_BASIS[2, 3], _SKEW_BASIS[0, 5] = 1.0, -1.0
_SKEW_BASIS[1, 6], _SKEW_BASIS[0, 7] = -1.0, 1.0


@dataclass
class Trajectory:
    """Sampled poses for one image. ``R``/``t`` are camera-to-world tensors."""

    taus: np.ndarray
    anchor: int
    R: Tensor  # (N, 3, 3)
    t: Tensor  # (N, 3)
    R_cmr: Tensor | None = None  # (N, 3, 3) refinement blocks, for the orthogonality loss
    screw: dict | None = None

    def __len__(self):
        return len(self.taus)

    def poses(self) -> list[Pose]:
        return [Pose(self.R.data[i].copy(), self.t.data[i].copy()) for i in range(len(self))]

    def world_to_camera(self) -> tuple[Tensor, Tensor]:
        R_wc = ad.inv(self.R)
        t_wc = -ad.reshape(R_wc @ ad.reshape(self.t, (-1, 3, 1)), (-1, 3))
        return R_wc, t_wc


# ---------------------------------------------------------------------------
# differentiable Lie-group pieces (batched over time samples)


def skew_t(w: Tensor) -> Tensor:
    n = w.shape[0]
    return ad.reshape(w @ _SKEW_BASIS, (n, 3, 3))


def normalize_axis(w: Tensor) -> Tensor:
    norm = ad.sqrt(ad.tsum(ad.square(w), axis=-1, keepdims=True))
    return w / ad.clamp_min(norm, AXIS_EPS)


def screw_exp_t(omega_hat: Tensor, theta: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Batched screw exponential; theta has shape (n, 1)."""
    n = omega_hat.shape[0]
    K = skew_t(omega_hat)
    K2 = K @ K
    th = ad.reshape(theta, (n, 1, 1))
    s, c = ad.sin(th), ad.cos(th)
    eye = np.eye(3)
    R = eye + s * K + (1.0 - c) * K2
    G = th * eye + (1.0 - c) * K + (th - s) * K2
    t = ad.reshape(G @ ad.reshape(v, (n, 3, 1)), (n, 3))
    return R, t


def chain_poses(anchor: Pose, R_r, t_r, R_c=None, t_c=None) -> tuple[Tensor, Tensor]:
    """T_anchor @ T_r @ T_c for every time sample."""
    n = R_r.shape[0]
    if R_c is not None:
        t_r = ad.reshape(R_r @ ad.reshape(t_c, (n, 3, 1)), (n, 3)) + t_r
        R_r = R_r @ R_c
    R = anchor.R @ R_r
    t = ad.reshape(anchor.R @ ad.reshape(t_r, (n, 3, 1)), (n, 3)) + anchor.t
    return R, t


# ---------------------------------------------------------------------------
# small building blocks


class Linear:
    def __init__(self, store, name, n_in, n_out, rng, group="motion", init="default", bound=None):
        if init == "zero":
            w, b = np.zeros((n_in, n_out)), np.zeros(n_out)
        elif init == "uniform":
            w, b = rng.uniform(-bound, bound, (n_in, n_out)), np.zeros(n_out)
        else:
            k = 1.0 / np.sqrt(n_in)
            w, b = rng.uniform(-k, k, (n_in, n_out)), rng.uniform(-k, k, n_out)
        self.w = store.add(f"{name}.w", w, group)
        self.b = store.add(f"{name}.b", b, group)

    def __call__(self, x):
        if x.ndim != 2:
            return x @ self.w + self.b
        # one (1, n_in) product per row: BLAS rounding then does not depend on
        # how many rows are in the batch, which keeps resampled poses bit-exact
        n = x.shape[0]
        return ad.reshape(ad.reshape(x, (n, 1, -1)) @ self.w, (n, -1)) + self.b


class GRUCell:
    def __init__(self, store, name, n_in, n_hidden, rng):
        self.gates = Linear(store, f"{name}.gates", n_in + n_hidden, 2 * n_hidden, rng)
        self.cand = Linear(store, f"{name}.cand", n_in + n_hidden, n_hidden, rng)
        self.n = n_hidden

    def __call__(self, x, h):
        zr = ad.sigmoid(self.gates(ad.concat([x, h], axis=-1)))
        z, r = zr[..., : self.n], zr[..., self.n:]
        cand = ad.tanh(self.cand(ad.concat([x, r * h], axis=-1)))
        return (1.0 - z) * h + z * cand


# ---------------------------------------------------------------------------


class MotionModel:
    """Learned trajectories for ``n_images`` blurred observations.

    ``rigid`` and ``cmr`` switch the two transformation branches; with both
    off every sample sits on the anchor pose (the no-motion baseline).
    """

    def __init__(self, store: ad.ParamStore, n_images: int, *, estimator: str = "ode",
                 latent_dim: int = neuralode.LATENT_DIM, rigid: bool = True, cmr: bool = True,
                 share_derivative: bool = True, substeps: int = 4, n_samples: int = 9,
                 seed: int = 0):
        if estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
        self.store = store
        self.n_images = n_images
        self.estimator = estimator
        self.dim = latent_dim
        self.rigid = rigid
        self.cmr = cmr and estimator not in ("linear", "bspline")
        self.substeps = substeps
        self.n_samples = n_samples
        rng = np.random.default_rng(seed)
        D = latent_dim

        if estimator in ("linear", "bspline"):
            n_ctrl = 2 if estimator == "linear" else 4
            self.ctrl_axis = store.add("traj.ctrl_axis", rng.normal(size=(n_images, n_ctrl, 3)), "motion")
            self.ctrl_theta = store.add("traj.ctrl_theta", np.zeros((n_images, n_ctrl, 1)), "motion")
            self.ctrl_v = store.add("traj.ctrl_v", rng.normal(0.0, 0.1, (n_images, n_ctrl, 3)), "motion")
            return

        self.embedding = store.add("embed", rng.normal(0.0, 0.01, (n_images, D)), "motion")
        self.enc_r = Linear(store, "enc_r", D, D, rng)
        self.enc_c = Linear(store, "enc_c", D, D, rng)
        self.dec_r = Linear(store, "dec_r", D, D, rng)
        self.head_axis = Linear(store, "dec_r.axis", D, 3, rng)
        self.head_theta = Linear(store, "dec_r.theta", D, 1, rng, init="zero")
        self.head_v = Linear(store, "dec_r.v", D, 3, rng)
        self.dec_c = Linear(store, "dec_c", D, D, rng)
        self.head_A = Linear(store, "dec_c.A", D, 9, rng, init="uniform", bound=CMR_INIT)
        self.head_tc = Linear(store, "dec_c.t", D, 3, rng, init="uniform", bound=CMR_INIT)

        if estimator == "ode":
            self.f = neuralode.DerivativeNet(store, "ode.f", D, rng)
            self.g = self.f if share_derivative else neuralode.DerivativeNet(store, "ode.g", D, rng)
        elif estimator == "mlp":
            self.mlp_hidden = Linear(store, "mlp.hidden", D, D, rng)
            self.mlp_out = Linear(store, "mlp.out", D, n_samples * D, rng)
        elif estimator == "gru":
            self.gru_fwd = GRUCell(store, "gru.fwd", 1, D, rng)
            self.gru_bwd = GRUCell(store, "gru.bwd", 1, D, rng)

    # -- latent pieces -----------------------------------------------------

    def embed_index(self, i: int) -> Tensor:
        if not 0 <= i < self.n_images:
            raise IndexError(f"image index {i} out of range [0, {self.n_images})")
        return self.embedding[i]

    def anchor_latents(self, i: int) -> tuple[Tensor, Tensor]:
        e = self.embed_index(i)
        return ad.relu(self.enc_r(e)), ad.relu(self.enc_c(e))

    @property
    def step(self) -> float:
        """Solver step: ``substeps`` per interval of the nominal N-sample grid.

        It does not change when a trajectory is resampled at another count, so
        2N-1 samples reuse the N-sample solve at the shared times.
        """
        return 1.0 / ((self.n_samples - 1) * self.substeps)

    def latents(self, i: int, taus: np.ndarray, anchor: int) -> tuple[Tensor, Tensor]:
        """(N, D) rigid and refinement latents at every sampled time."""
        z_r, z_c = self.anchor_latents(i)
        n = len(taus)
        if self.estimator == "ode":
            step = self.step
            if self.g is self.f:
                z0 = ad.stack([z_r, z_c], axis=0)
                zs = neuralode.integrate(z0, taus[anchor], taus, self.f, step)
                Z = ad.stack(zs, axis=0)
                return Z[:, 0, :], Z[:, 1, :]
            zr = neuralode.integrate(z_r, taus[anchor], taus, self.f, step)
            zc = neuralode.integrate(z_c, taus[anchor], taus, self.g, step)
            return ad.stack(zr, axis=0), ad.stack(zc, axis=0)
        if self.estimator == "mlp":
            if self.mlp_out.b.shape[0] != n * self.dim:
                raise ValueError("the MLP estimator is built for a fixed number of samples")
            out = self.mlp_out
            both = ad.stack([z_r, z_c], axis=0)  # (2, D)
            Z = ad.reshape(out(ad.relu(self.mlp_hidden(both))), (2, n, self.dim))
            return Z[0], Z[1]
        # gru: separate cells walk forward and backward from the anchor
        both = ad.stack([z_r, z_c], axis=0)
        states = {anchor: both}
        for cell, idx in ((self.gru_fwd, range(anchor + 1, n)), (self.gru_bwd, range(anchor - 1, -1, -1))):
            h = both
            for k in idx:
                x = np.full((2, 1), taus[k] - taus[anchor])
                h = cell(x, h)
                states[k] = h
        Z = ad.stack([states[k] for k in range(n)], axis=0)  # (N, 2, D)
        return Z[:, 0, :], Z[:, 1, :]

    def decode_rigid(self, z: Tensor):
        """Latents (N, D) -> unit axis (N, 3), angle (N, 1), translation part (N, 3)."""
        h = ad.relu(self.dec_r(z))
        return normalize_axis(self.head_axis(h)), self.head_theta(h), self.head_v(h)

    def decode_cmr(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Latents (N, D) -> refinement blocks A + I (N, 3, 3) and translations (N, 3)."""
        n = z.shape[0]
        h = ad.relu(self.dec_c(z))
        A = ad.reshape(self.head_A(h), (n, 3, 3))
        return A + np.eye(3), self.head_tc(h)

    # -- trajectories --------------------------------------------------------

    def trajectory(self, anchor_pose: Pose, i: int, n: int) -> Trajectory:
        taus, anchor = neuralode.sample_times(n)
        if self.estimator in ("linear", "bspline"):
            return self._interp_trajectory(anchor_pose, i, taus, anchor)
        if not (self.rigid or self.cmr):
            return static_trajectory(anchor_pose, n)
        z_r, z_c = self.latents(i, taus, anchor)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        screw = None
        if self.rigid:
            w, th, v = self.decode_rigid(z_r)
            R_r, t_r = screw_exp_t(w, th, v)
            screw = {"omega_hat": w, "theta": th, "v": v}
        else:
            R_r, t_r = ad.Tensor(eye.copy()), ad.Tensor(np.zeros((n, 3)))
        R_c = t_c = None
        if self.cmr:
            R_c, t_c = self.decode_cmr(z_c)
        R, t = chain_poses(anchor_pose, R_r, t_r, R_c, t_c)
        return Trajectory(taus, anchor, R, t, R_c, screw)

    def _interp_trajectory(self, anchor_pose, i, taus, anchor) -> Trajectory:
        n = len(taus)
        if self.estimator == "linear":
            B = np.stack([1.0 - taus, taus], axis=1)
        else:
            B = cubic_bspline_basis(taus)
        Bt = ad.Tensor(B)
        axis = Bt @ self.ctrl_axis[i]
        theta = Bt @ self.ctrl_theta[i]
        v = Bt @ self.ctrl_v[i]
        w = normalize_axis(axis)
        R_r, t_r = screw_exp_t(w, theta, v)
        R, t = chain_poses(anchor_pose, R_r, t_r)
        return Trajectory(taus, anchor, R, t, None, {"omega_hat": w, "theta": theta, "v": v})


def cubic_bspline_basis(u: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline blending weights for four control points, u in [0, 1]."""
    u = np.asarray(u, dtype=float)
    u2, u3 = u * u, u * u * u
    return np.stack([
        (1 - u) ** 3 / 6.0,
        (3 * u3 - 6 * u2 + 4) / 6.0,
        (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0,
        u3 / 6.0,
    ], axis=1)


def static_trajectory(anchor_pose: Pose, n: int) -> Trajectory:
    taus, anchor = neuralode.sample_times(n)
    R = ad.Tensor(np.broadcast_to(anchor_pose.R, (n, 3, 3)).copy())
    t = ad.Tensor(np.broadcast_to(anchor_pose.t, (n, 3)).copy())
    return Trajectory(taus, anchor, R, t)


def write_trajectory_csv(path, rows: list[tuple[int, float, Pose]]):
    """Rows of (image_index, tau, pose) -> CSV with R row-major and t."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_index", "tau"] + [f"r{i}{j}" for i in range(3) for j in range(3)]
                   + ["tx", "ty", "tz"])
        for idx, tau, pose in rows:
            w.writerow([idx, repr(float(tau))] + [repr(float(x)) for x in pose.R.reshape(-1)]
                       + [repr(float(x)) for x in pose.t])


def read_trajectory_csv(path) -> dict[int, list[tuple[float, Pose]]]:
    out: dict[int, list[tuple[float, Pose]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            R = np.array([float(row[f"r{i}{j}"]) for i in range(3) for j in range(3)]).reshape(3, 3)
            t = np.array([float(row[k]) for k in ("tx", "ty", "tz")])
            out.setdefault(int(row["image_index"]), []).append((float(row["tau"]), Pose(R, t)))
    for v in out.values():
        v.sort(key=lambda r: r[0])
    return out
