"""Staged optimisation of the cloud, the trajectories and the blur composer.

Phase 1 fits the cloud alone against the anchor render. Phase 2 switches the
prediction to the mean of the N trajectory renders and starts the motion
networks. Phase 3 adds the pixel weights and the blend mask. ``forward`` is
the single code path used by training and by the renderer, so a checkpoint
renders exactly what the loss saw.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, splatter
from .blurcompose import WeightNet, blend_output, compose_blur, mean_frames
from .config import Config, parse_text
from .liegroup import Pose
from .motionmodel import MotionModel, write_trajectory_csv
from .scenegen import BlurDataset, read_cameras_csv, write_cameras_csv
from .splatter import Camera, GaussianCloud

LOSS_FIELDS = ("iter", "L1", "DSSIM", "Lo", "Lmask", "total")
CLOUD_GROUPS = tuple(f"cloud.{k}" for k in splatter.CLOUD_KEYS)
PARAMS_MAGIC = b"SDPARAM1"


class NumericalError(FloatingPointError):
    def __init__(self, group: str, iteration: int):
        super().__init__(f"non-finite values in parameter group {group!r} at iteration {iteration}")
        self.group = group
        self.iteration = iteration


def point_colors(points: np.ndarray, images, cameras: list[Camera]) -> np.ndarray:
    """Mean observed colour of each point over the views it projects into.

    Occlusion is ignored, as in a quick structure-from-motion colouring.
    Points seen by no camera stay grey.
    """
    total = np.zeros((len(points), 3))
    count = np.zeros(len(points))
    for img, cam in zip(images, cameras):
        p = points @ cam.pose.R.T + cam.pose.t
        z = p[:, 2]
        front = z > splatter.NEAR
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(cam.fx * p[:, 0] / z + cam.cx)
            v = np.rint(cam.fy * p[:, 1] / z + cam.cy)
        ok = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        total[ok] += img[v[ok].astype(int), u[ok].astype(int)]
        count[ok] += 1
    out = np.full((len(points), 3), 0.5)
    seen = count > 0
    out[seen] = total[seen] / count[seen, None]
    return out


def initial_cloud(truth: GaussianCloud, cfg: Config, images=None, cameras=None) -> GaussianCloud:
    """Starting cloud for a run.

    ``perturb`` keeps only jittered positions of the reference cloud, the way a
    sparse structure-from-motion point set would, and resets the rest:
    isotropic scales, identity rotations and a fixed opacity. Colours come
    from the observed (blurry) images when they are given, grey otherwise.
    """
    sh = np.zeros((len(truth), 1 if cfg.sh_degree == 0 else 4, 3))
    if cfg.init == "truth":
        cloud = truth.copy()
        if cloud.colors.shape[1] != sh.shape[1]:
            sh[:, :1] = cloud.colors[:, :1]
            cloud.colors = sh
        return cloud
    rng = np.random.default_rng([cfg.seed, 7])
    G = len(truth)
    means = truth.means + rng.normal(0.0, cfg.init_mean_jitter, (G, 3))
    if images is not None:
        sh[:, 0] = splatter.rgb_to_sh(np.clip(point_colors(means, images, cameras), 0.02, 0.98))
    quats = np.zeros((G, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        means=means,
        log_scales=np.full((G, 3), np.log(0.04)),
        quats=quats,
        opacity_logits=np.full(G, 1.0),
        colors=sh,
    )


class Model:
    """Everything learnable for one dataset, in one parameter store."""

    def __init__(self, cfg: Config, cameras: list[Camera], cloud: GaussianCloud):
        self.cfg = cfg
        self.cameras = cameras
        self.store = ad.ParamStore()
        self.cloud = cloud.register(self.store)
        self.motion = MotionModel(self.store, len(cameras), estimator=cfg.estimator,
                                  latent_dim=cfg.latent_dim, rigid=cfg.rigid, cmr=cfg.cmr,
                                  share_derivative=cfg.share_derivative, substeps=cfg.substeps,
                                  n_samples=cfg.n_samples, seed=cfg.seed + 1)
        self.wnet = WeightNet(self.store, cfg.wnet_channels, seed=cfg.seed + 2)

    def anchor(self, k: int) -> Pose:
        return self.cameras[k].pose.inverse()

    def trajectory(self, k: int, n: int | None = None):
        return self.motion.trajectory(self.anchor(k), k, n or self.cfg.n_samples)

    def current_cloud(self) -> GaussianCloud:
        return GaussianCloud.from_store(self.store)


@dataclass
class Output:
    image: ad.Tensor
    frames: ad.Tensor | None = None
    traj: object = None
    P: ad.Tensor | None = None
    M: ad.Tensor | None = None


def phase_at(iteration: int, cfg: Config) -> int:
    if iteration < cfg.motion_start:
        return 1
    if iteration < cfg.weightmask_start:
        return 2
    return 3


def render_frames(model: Model, k: int, prep=None, n: int | None = None):
    prep = prep or splatter.prepare(model.cloud)
    traj = model.trajectory(k, n)
    R_wc, t_wc = traj.world_to_camera()
    cam = model.cameras[k]
    frames = ad.stack([splatter.render(prep, cam, R_wc[j], t_wc[j]) for j in range(len(traj))], axis=0)
    return frames, traj


def forward(model: Model, k: int, phase: int) -> Output:
    """Predicted observation of camera ``k`` for a training phase."""
    prep = splatter.prepare(model.cloud)
    if phase == 1:
        return Output(splatter.render(prep, model.cameras[k]))
    frames, traj = render_frames(model, k, prep)
    if phase == 2:
        return Output(mean_frames(frames), frames, traj)
    P, M = model.wnet(frames)
    blur = compose_blur(frames, P)
    # the sharp term is rendered at the calibrated pose itself
    sharp = splatter.render(prep, model.cameras[k])
    return Output(blend_output(sharp, blur, M), frames, traj, P, M)


def render_sharp(model: Model, k: int) -> np.ndarray:
    with ad.no_grad():
        return splatter.render(model.current_cloud(), model.cameras[k]).data


def objective(model: Model, k: int, target: np.ndarray, phase: int):
    out = forward(model, k, phase)
    cfg = model.cfg
    l1 = losses.l1(out.image, target)
    ds = losses.dssim(out.image, target)
    lo = ad.Tensor(0.0)
    lm = ad.Tensor(0.0)
    if phase >= 2 and out.traj.R_cmr is not None and cfg.orth_loss:
        lo = losses.loss_orthogonality(out.traj.R_cmr)
    if phase == 3:
        lm = losses.loss_mask(out.M)
    total = losses.total_loss(l1, ds, lo, lm, cfg.loss_weights())
    return total, (l1, ds, lo, lm), out


def learning_rates(cfg: Config) -> dict:
    lr = {
        "cloud.means": losses.exponential_lr(cfg.lr_means_init, cfg.lr_means_final, cfg.total_iters),
        "cloud.log_scales": cfg.lr_scales,
        "cloud.quats": cfg.lr_quats,
        "cloud.opacity_logits": cfg.lr_opacity,
        "cloud.colors": cfg.lr_colors,
        "motion": cfg.lr_motion,
        "weightnet": cfg.lr_weightnet,
    }
    return lr


def active_groups(iteration: int, cfg: Config) -> tuple[str, ...]:
    groups = [g for g in CLOUD_GROUPS if g != "cloud.means" or iteration >= cfg.warmup_gauss_iters]
    phase = phase_at(iteration, cfg)
    if phase >= 2:
        groups.append("motion")
    if phase == 3:
        groups.append("weightnet")
    return tuple(groups)


def camera_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


# ---------------------------------------------------------------------------
# checkpoints


def write_params(path, arrays: dict[str, np.ndarray]):
    """Flat archive: name, shape, little-endian doubles."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8", order="C")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_params(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != PARAMS_MAGIC:
        raise ValueError(f"{path} is not a parameter archive")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in parameter archive")
    return out


def save_checkpoint(path, model: Model, opt: losses.Adam, iteration: int):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model.current_cloud().save(path / "scene.cloud")
    write_cameras_csv(path / "cameras.csv", model.cameras)
    arrays = dict(model.store.state_dict())
    # exact world-to-camera poses; cameras.csv alone round-trips through an inverse
    arrays["cameras.R"] = np.stack([c.pose.R for c in model.cameras])
    arrays["cameras.t"] = np.stack([c.pose.t for c in model.cameras])
    for name, st in opt.state.items():
        arrays[f"adam.m/{name}"] = st["m"]
        arrays[f"adam.v/{name}"] = st["v"]
        arrays[f"adam.t/{name}"] = np.array([st["t"]], dtype=float)
    write_params(path / "params.bin", arrays)
    (path / "config.txt").write_text(model.cfg.to_text())
    meta = {"iteration": iteration, "n_images": len(model.cameras), "optimizer_steps": opt.iteration}
    (path / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_checkpoint(path, cfg: Config | None = None):
    """Return (model, optimizer, iteration) restored from a checkpoint directory."""
    path = Path(path)
    for name in ("scene.cloud", "cameras.csv", "params.bin", "meta.json"):
        if not (path / name).exists():
            raise FileNotFoundError(f"checkpoint {path} lacks {name}")
    meta = json.loads((path / "meta.json").read_text())
    if cfg is None:
        cfg = parse_text((path / "config.txt").read_text())
    arrays = read_params(path / "params.bin")
    cameras = read_cameras_csv(path / "cameras.csv")
    if "cameras.R" in arrays:
        cameras = [c.with_pose(Pose(R, t)) for c, R, t in zip(cameras, arrays["cameras.R"], arrays["cameras.t"])]
    model = Model(cfg, cameras, GaussianCloud.load(path / "scene.cloud"))
    model.store.load_state_dict({k: v for k, v in arrays.items() if not k.startswith(("adam.", "cameras."))})
    opt = make_optimizer(model)
    for name in model.store.names():
        if f"adam.m/{name}" in arrays:
            opt.state[name] = {"m": arrays[f"adam.m/{name}"], "v": arrays[f"adam.v/{name}"],
                               "t": int(arrays[f"adam.t/{name}"][0])}
    opt.iteration = int(meta["optimizer_steps"])
    return model, opt, int(meta["iteration"])


def latest_checkpoint(out) -> Path | None:
    ckpts = sorted(Path(out).glob("checkpoints/iter_*"))
    ckpts = [c for c in ckpts if (c / "meta.json").exists()]
    return ckpts[-1] if ckpts else None


def make_optimizer(model: Model) -> losses.Adam:
    return losses.Adam(model.store, learning_rates(model.cfg), grad_clip=model.cfg.grad_clip)


# ---------------------------------------------------------------------------
# training


def _check_finite(model: Model, iteration: int, attr: str):
    for name in model.store.names():
        arr = getattr(model.store[name], attr)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericalError(model.store.groups[name], iteration)


def _fmt(x) -> str:
    return repr(float(x))


def train(data: BlurDataset, cfg: Config, out=None, resume: bool = True, log=None,
          stop_at: int | None = None) -> Model:
    """Run the staged schedule; writes logs and checkpoints when ``out`` is set.

    ``stop_at`` ends the run early (as an interruption would) without changing
    the schedule, which is what the resume check needs.
    """
    K = len(data)
    model = opt = None
    start = 0
    rows: list[list[str]] = []
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        ck = latest_checkpoint(out) if resume else None
        if ck is not None:
            model, opt, start = load_checkpoint(ck, cfg)
            if (out / "loss.csv").exists():
                with open(out / "loss.csv", newline="") as fh:
                    rows = [r for r in csv.reader(fh)][1:]
                rows = [r for r in rows if int(r[0]) < start]
        (out / "config.txt").write_text(cfg.to_text())
    if model is None:
        model = Model(cfg, data.cameras, initial_cloud(data.scene.cloud, cfg, data.blurred, data.cameras))
        opt = make_optimizer(model)

    log_fh = None
    if out is not None:
        log_fh = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOSS_FIELDS)
        writer.writerows(rows)
    try:
        end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
        for it in range(start, end):
            k = int(camera_order(cfg.seed, it // K, K)[it % K])
            phase = phase_at(it, cfg)
            try:
                total, terms, _ = objective(model, k, data.blurred[k], phase)
            except FloatingPointError:
                _check_finite(model, it, "data")
                raise NumericalError("forward", it) from None
            if not np.isfinite(total.data):
                _check_finite(model, it, "data")
                raise NumericalError("loss", it)
            ad.backward(total)
            _check_finite(model, it, "grad")
            names = [n for g in active_groups(it, cfg) for n in model.store.names(g)]
            opt.step(names)
            _check_finite(model, it, "data")
            row = [str(it)] + [_fmt(t.data) for t in terms] + [_fmt(total.data)]
            if log_fh is not None:
                writer.writerow(row)
            if log is not None:
                log(it, phase, [float(t.data) for t in terms], float(total.data))
            done = it + 1
            if out is not None and cfg.checkpoint_every and (done % cfg.checkpoint_every == 0 or done == cfg.total_iters):
                log_fh.flush()
                save_checkpoint(out / "checkpoints" / f"iter_{done:06d}", model, opt, done)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None and (stop_at is None or stop_at >= cfg.total_iters):
        final = out / "checkpoints" / f"iter_{cfg.total_iters:06d}"
        if not (final / "meta.json").exists():
            save_checkpoint(final, model, opt, cfg.total_iters)
        export_trajectories(model, out / "trajectory.csv")
    return model


def export_trajectories(model: Model, path, n: int | None = None):
    rows = []
    with ad.no_grad():
        for k in range(len(model.cameras)):
            traj = model.trajectory(k, n)
            rows += [(k, float(tau), pose) for tau, pose in zip(traj.taus, traj.poses())]
    write_trajectory_csv(path, rows)


def read_loss_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in r] for r in rows])
