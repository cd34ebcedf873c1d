"""Optimization loop: Adam with per-group learning rates, the log-linear
position schedule, density control with binding inheritance, periodic opacity
resets, CSV logging and checkpointing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import gauss, losses, meshrig, pipeline, rectifier
from .config import TrainConfig
from .errors import CheckpointCorruptError, ConfigError, NumericalAbort
from .gauss import GaussianSplats
from .losses import LossReport
from .meshrig import RiggedMesh

SPLAT_GROUPS = ("position", "scaling", "rotation", "opacity", "sh")


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def like(arr):
        return AdamSlot(m=np.zeros_like(arr), v=np.zeros_like(arr))


def adam_step(param, grad, slot: AdamSlot, lr, beta1=0.9, beta2=0.999,
              eps=1e-15):
    """Bias-corrected Adam update, in place. Rejects non-finite gradients."""
    if not np.all(np.isfinite(grad)):
        raise NumericalAbort("non-finite gradient in adam_step")
    slot.step += 1
    slot.m *= beta1
    slot.m += (1.0 - beta1) * grad
    slot.v *= beta2
    slot.v += (1.0 - beta2) * grad * grad
    m_hat = slot.m / (1.0 - beta1 ** slot.step)
    v_hat = slot.v / (1.0 - beta2 ** slot.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


def lr_schedule(iteration, cfg: TrainConfig):
    """Position learning rate: log-linear from the initial to the final value
    over the full run. Other groups are constant."""
    if not 0 <= iteration <= cfg.total_iters:
        raise ConfigError(
            f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if cfg.total_iters == 0:
        return cfg.lr_position_init
    t = iteration / cfg.total_iters
    return float(np.exp((1.0 - t) * np.log(cfg.lr_position_init)
                        + t * np.log(cfg.lr_position_final)))


# ---------------------------------------------------------------------------
# schedule events

def density_event_iterations(cfg: TrainConfig):
    """Iterations at which density control fires: positive multiples of the
    interval, strictly before the controller turn-off iteration."""
    end = min(cfg.density_control_end, cfg.total_iters + 1)
    return [i for i in range(cfg.densify_interval, end, cfg.densify_interval)]


def opacity_reset_iterations(cfg: TrainConfig):
    """Opacity resets: interval multiples from the start iteration, strictly
    before the turn-off iteration."""
    out = []
    i = cfg.opacity_reset_start
    while i < cfg.density_control_end and i <= cfg.total_iters:
        out.append(i)
        i += cfg.opacity_reset_interval
    return out


# ---------------------------------------------------------------------------
# density control

@dataclass
class DensityControlConfig:
    grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.01   # absolute world scale, meters
    clone_scale_threshold: float = 0.01
    prune_opacity_threshold: float = 0.005
    split_scale_divisor: float = 1.6

    def __post_init__(self):
        for name in ("grad_threshold", "split_scale_threshold",
                     "clone_scale_threshold", "prune_opacity_threshold",
                     "split_scale_divisor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class DensityStats:
    n_split: int = 0
    n_clone: int = 0
    n_pruned: int = 0


def densify_and_prune(splats: GaussianSplats, mean_grad, face_scale,
                      dc: DensityControlConfig, rng, max_splats=0):
    """Split/clone splats with hot view-space gradients, then prune faint ones.

    face_scale holds the rest-pose triangle scale per face, making the
    split-vs-clone comparison a world-size test. Children sample their local
    position from the parent's own Gaussian and inherit parent_face; pruning
    never removes the last splat of a face. Returns
    (new_splats, row_map, stats); row_map gives each output row's source row
    or -1 for freshly created rows (zeroed optimizer moments).
    """
    n = len(splats)
    mean_grad = np.asarray(mean_grad, dtype=float)
    world_scale = face_scale[splats.parent_face] * splats.scale.max(axis=1)
    hot = mean_grad > dc.grad_threshold
    split = hot & (world_scale > dc.split_scale_threshold)
    clone = hot & ~split & (world_scale <= dc.clone_scale_threshold)
    if max_splats and n + int(split.sum()) + int(clone.sum()) > max_splats:
        split = np.zeros(n, dtype=bool)
        clone = np.zeros(n, dtype=bool)

    survivors = np.nonzero(~split)[0]
    clone_rows = np.nonzero(clone)[0]
    split_rows = np.nonzero(split)[0]

    parts_map = [survivors, clone_rows]
    row_map = [survivors, -np.ones(clone_rows.size, dtype=np.int64)]
    pieces = {
        "mu_local": [splats.mu_local[survivors], splats.mu_local[clone_rows]],
        "rot_local": [splats.rot_local[survivors], splats.rot_local[clone_rows]],
        "log_scale": [splats.log_scale[survivors], splats.log_scale[clone_rows]],
        "opacity_logit": [splats.opacity_logit[survivors],
                          splats.opacity_logit[clone_rows]],
        "sh_coeffs": [splats.sh_coeffs[survivors], splats.sh_coeffs[clone_rows]],
        "parent_face": [splats.parent_face[survivors],
                        splats.parent_face[clone_rows]],
    }
    if split_rows.size:
        parents = np.repeat(split_rows, 2)
        scale = splats.scale[parents]
        rot = gauss.quat_to_matrix(splats.rot_local[parents])
        noise = rng.standard_normal((parents.size, 3))
        offset = np.einsum("nab,nb->na", rot, scale * noise)
        pieces["mu_local"].append(splats.mu_local[parents] + offset)
        pieces["rot_local"].append(splats.rot_local[parents])
        pieces["log_scale"].append(
            splats.log_scale[parents] - np.log(dc.split_scale_divisor))
        pieces["opacity_logit"].append(splats.opacity_logit[parents])
        pieces["sh_coeffs"].append(splats.sh_coeffs[parents])
        pieces["parent_face"].append(splats.parent_face[parents])
        row_map.append(-np.ones(parents.size, dtype=np.int64))

    merged = GaussianSplats(
        mu_local=np.concatenate(pieces["mu_local"]),
        rot_local=np.concatenate(pieces["rot_local"]),
        log_scale=np.concatenate(pieces["log_scale"]),
        opacity_logit=np.concatenate(pieces["opacity_logit"]),
        sh_coeffs=np.concatenate(pieces["sh_coeffs"]),
        parent_face=np.concatenate(pieces["parent_face"]),
        sh_degree=splats.sh_degree,
    )
    row_map = np.concatenate(row_map)

    # prune faint splats, protecting the last splat on each face
    cand = merged.opacity < dc.prune_opacity_threshold
    if np.any(cand):
        keep = ~cand
        for face in np.unique(merged.parent_face[cand]):
            rows = np.nonzero(merged.parent_face == face)[0]
            if not np.any(keep[rows]):
                best = rows[np.argmax(merged.opacity[rows])]
                keep[best] = True
        kept_rows = np.nonzero(keep)[0]
    else:
        kept_rows = np.arange(len(merged))

    final = GaussianSplats(
        mu_local=merged.mu_local[kept_rows],
        rot_local=merged.rot_local[kept_rows],
        log_scale=merged.log_scale[kept_rows],
        opacity_logit=merged.opacity_logit[kept_rows],
        sh_coeffs=merged.sh_coeffs[kept_rows],
        parent_face=merged.parent_face[kept_rows],
        sh_degree=splats.sh_degree,
    )
    stats = DensityStats(n_split=int(split_rows.size),
                         n_clone=int(clone_rows.size),
                         n_pruned=int(len(merged) - kept_rows.size))
    return final, row_map[kept_rows], stats


OPACITY_RESET_CEILING = 0.01


def opacity_reset(splats: GaussianSplats):
    """Clamp every activated opacity to at most 0.01 via a logit rewrite."""
    op = splats.opacity
    new_op = np.minimum(op, OPACITY_RESET_CEILING)
    splats.opacity_logit = gauss.opacity_inverse_activation(new_op)
    return int(np.count_nonzero(new_op < op))


# ---------------------------------------------------------------------------
# training state and checkpointing

@dataclass
class TrainState:
    splats: GaussianSplats
    rect_params: rectifier.RectifierParams | None
    optim: dict
    iteration: int
    grad_accum: np.ndarray
    iters_since_event: int
    rng: np.random.Generator
    config: TrainConfig
    scale_clamp_events: int = 0


def init_optim(splats: GaussianSplats, rect_params):
    optim = {
        "position": AdamSlot.like(splats.mu_local),
        "scaling": AdamSlot.like(splats.log_scale),
        "rotation": AdamSlot.like(splats.rot_local),
        "opacity": AdamSlot.like(splats.opacity_logit),
        "sh": AdamSlot.like(splats.sh_coeffs),
    }
    if rect_params is not None:
        for name, arr in rect_params.flat_parameters():
            optim[f"rect_{name}"] = AdamSlot.like(arr)
    return optim


def init_state(mesh: RiggedMesh, cfg: TrainConfig):
    splats = gauss.init_splats_on_faces(mesh.n_faces, sh_degree=cfg.sh_degree,
                                        init_opacity=cfg.init_opacity)
    rng = np.random.default_rng(cfg.seed)
    rect = None
    if cfg.use_rectifier:
        enc = rectifier.EncoderConfig(num_bands=cfg.encoder_bands,
                                      include_identity=cfg.encoder_include_identity)
        rect = rectifier.init_rectifier(enc, rng=rng)
    return TrainState(
        splats=splats,
        rect_params=rect,
        optim=init_optim(splats, rect),
        iteration=0,
        grad_accum=np.zeros(len(splats)),
        iters_since_event=0,
        rng=rng,
        config=cfg,
    )


def _rng_state_array(rng):
    s = rng.bit_generator.state
    st, inc = s["state"]["state"], s["state"]["inc"]
    mask = (1 << 64) - 1
    return np.array([st & mask, st >> 64, inc & mask, inc >> 64,
                     s["has_uint32"], s["uinteger"]], dtype=np.uint64)


def _rng_from_array(arr):
    vals = [int(x) for x in arr]
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {"state": vals[0] | (vals[1] << 64),
                  "inc": vals[2] | (vals[3] << 64)},
        "has_uint32": vals[4],
        "uinteger": vals[5],
    }
    return np.random.Generator(bitgen)


def save_checkpoint(path, state: TrainState):
    sp = state.splats
    splat_arrays = [
        ("mu_local", sp.mu_local), ("rot_local", sp.rot_local),
        ("log_scale", sp.log_scale), ("opacity_logit", sp.opacity_logit),
        ("sh_coeffs", sp.sh_coeffs), ("parent_face", sp.parent_face),
        ("sh_degree", np.int64(sp.sh_degree)),
    ]
    rect_arrays = [("enabled", np.int64(state.rect_params is not None))]
    if state.rect_params is not None:
        rect_arrays += state.rect_params.flat_parameters()
        rect_arrays.append(("encoder_bands",
                            np.int64(state.rect_params.encoder.num_bands)))
        rect_arrays.append(("encoder_identity",
                            np.int64(state.rect_params.encoder.include_identity)))
    optim_arrays = []
    for name, slot in state.optim.items():
        optim_arrays.append((f"{name}.m", slot.m))
        optim_arrays.append((f"{name}.v", slot.v))
        optim_arrays.append((f"{name}.step", np.int64(slot.step)))
    state_arrays = [
        ("iteration", np.int64(state.iteration)),
        ("grad_accum", state.grad_accum),
        ("iters_since_event", np.int64(state.iters_since_event)),
        ("scale_clamp_events", np.int64(state.scale_clamp_events)),
        ("rng_state", _rng_state_array(state.rng)),
    ]
    ckpt.write_sections(path, [
        ("splats", ckpt.pack_arrays(splat_arrays)),
        ("rectif", ckpt.pack_arrays(rect_arrays)),
        ("optim", ckpt.pack_arrays(optim_arrays)),
        ("state", ckpt.pack_arrays(state_arrays)),
        ("config", state.config.to_json().encode()),
    ])


def load_checkpoint(path) -> TrainState:
    sections = ckpt.read_sections(path)
    for required in ("splats", "rectif", "optim", "state", "config"):
        if required not in sections:
            raise CheckpointCorruptError(f"{path}: missing section {required}")
    cfg = TrainConfig.from_dict(json.loads(sections["config"].decode()))
    sd = dict(ckpt.unpack_arrays(sections["splats"]))
    splats = GaussianSplats(
        mu_local=sd["mu_local"], rot_local=sd["rot_local"],
        log_scale=sd["log_scale"], opacity_logit=sd["opacity_logit"],
        sh_coeffs=sd["sh_coeffs"], parent_face=sd["parent_face"],
        sh_degree=int(sd["sh_degree"]),
    )
    rd = dict(ckpt.unpack_arrays(sections["rectif"]))
    rect = None
    if int(rd["enabled"]):
        enc = rectifier.EncoderConfig(num_bands=int(rd["encoder_bands"]),
                                      include_identity=bool(int(rd["encoder_identity"])))
        n_layers = len(rectifier.HIDDEN_WIDTHS) + 2
        rect = rectifier.RectifierParams(
            weights=[rd[f"w{i}"] for i in range(n_layers)],
            biases=[rd[f"b{i}"] for i in range(n_layers)],
            encoder=enc)
    od = dict(ckpt.unpack_arrays(sections["optim"]))
    optim = {}
    for key in od:
        if key.endswith(".m"):
            name = key[:-2]
            optim[name] = AdamSlot(m=od[f"{name}.m"], v=od[f"{name}.v"],
                                   step=int(od[f"{name}.step"]))
    st = dict(ckpt.unpack_arrays(sections["state"]))
    return TrainState(
        splats=splats,
        rect_params=rect,
        optim=optim,
        iteration=int(st["iteration"]),
        grad_accum=st["grad_accum"],
        iters_since_event=int(st["iters_since_event"]),
        rng=_rng_from_array(st["rng_state"]),
        config=cfg,
        scale_clamp_events=int(st["scale_clamp_events"]),
    )


# ---------------------------------------------------------------------------
# the loop

def _remap_slot(slot: AdamSlot, row_map):
    fresh = row_map >= 0
    src = row_map[fresh]
    m = np.zeros((len(row_map),) + slot.m.shape[1:], dtype=slot.m.dtype)
    v = np.zeros_like(m)
    m[fresh] = slot.m[src]
    v[fresh] = slot.v[src]
    return AdamSlot(m=m, v=v, step=slot.step)


def scene_extent(mesh: RiggedMesh):
    """Radius of the rest mesh around its centroid."""
    center = mesh.vertices.mean(axis=0)
    return float(np.linalg.norm(mesh.vertices - center, axis=1).max())


LOG_FIELDS = (["iteration"] + LossReport.csv_header()
              + ["psnr", "n_splats", "lr_position", "event"])


def train(mesh: RiggedMesh, frames, cfg: TrainConfig, out_dir,
          progress=None):
    """Optimize splats (and the rectifier) against the training frames.

    frames: list of dataset.Frame; only split == "train" entries are sampled.
    Writes train_log.csv plus periodic and final checkpoints under out_dir.
    Returns the final TrainState. A non-finite loss aborts with NumericalAbort
    after dumping diagnostics; the last written checkpoint stays intact.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_frames = [f for f in frames if f.split == "train"]
    if not train_frames:
        raise ConfigError("no training frames in dataset")
    state = init_state(mesh, cfg)
    dc = DensityControlConfig(
        grad_threshold=cfg.grad_threshold,
        split_scale_threshold=cfg.split_scale_factor * scene_extent(mesh),
        clone_scale_threshold=cfg.split_scale_factor * scene_extent(mesh),
        prune_opacity_threshold=cfg.prune_opacity_threshold,
        split_scale_divisor=cfg.split_scale_divisor,
    )
    rest_frames = meshrig.mesh_triangle_frames(mesh, mesh.vertices)
    density_iters = set(density_event_iterations(cfg))
    reset_iters = set(opacity_reset_iterations(cfg))
    last_checkpoint = out_dir / "checkpoint_final.rmav"

    log_path = out_dir / "train_log.csv"
    log_file = open(log_path, "w", newline="")
    logger = csv.writer(log_file)
    logger.writerow(LOG_FIELDS)
    try:
        for step in range(1, cfg.total_iters + 1):
            frame = train_frames[int(state.rng.integers(len(train_frames)))]
            report, grads, output = pipeline.forward_backward(
                state.splats, mesh, frame.pose, frame.camera, frame.image,
                cfg.weights, rect_params=state.rect_params,
                eps_pos=cfg.eps_pos, eps_scaling=cfg.eps_scaling)
            if not np.isfinite(report.total):
                _dump_abort(out_dir, step, report)
                raise NumericalAbort(f"non-finite loss at iteration {step}")
            state.scale_clamp_events += grads.n_scale_clamped

            lr_pos = lr_schedule(step - 1, cfg)
            sp = state.splats
            adam = dict(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                        eps=cfg.adam_eps_splats)
            adam_step(sp.mu_local, grads.mu_local, state.optim["position"],
                      lr_pos, **adam)
            adam_step(sp.log_scale, grads.log_scale, state.optim["scaling"],
                      cfg.lr_scaling, **adam)
            adam_step(sp.rot_local, grads.rot_local, state.optim["rotation"],
                      cfg.lr_rotation, **adam)
            adam_step(sp.opacity_logit, grads.opacity_logit,
                      state.optim["opacity"], cfg.lr_opacity, **adam)
            adam_step(sp.sh_coeffs, grads.sh_coeffs, state.optim["sh"],
                      cfg.lr_sh, **adam)
            if state.rect_params is not None:
                for name, grad in grads.rect_params:
                    arr = dict(state.rect_params.flat_parameters())[name]
                    adam_step(arr, grad, state.optim[f"rect_{name}"],
                              cfg.lr_rectifier, beta1=cfg.adam_beta1,
                              beta2=cfg.adam_beta2, eps=cfg.adam_eps_rectifier)

            state.grad_accum += grads.view_grad_norm
            state.iters_since_event += 1
            event = ""
            if step in density_iters:
                mean_grad = state.grad_accum / max(state.iters_since_event, 1)
                state.splats, row_map, stats = densify_and_prune(
                    state.splats, mean_grad, rest_frames.w, dc, state.rng,
                    max_splats=cfg.max_splats)
                for name in SPLAT_GROUPS:
                    state.optim[name] = _remap_slot(state.optim[name], row_map)
                state.grad_accum = np.zeros(len(state.splats))
                state.iters_since_event = 0
                event = (f"density split={stats.n_split} clone={stats.n_clone} "
                         f"prune={stats.n_pruned}")
            if step in reset_iters:
                n_reset = opacity_reset(state.splats)
                state.optim["opacity"] = AdamSlot.like(state.splats.opacity_logit)
                event = (event + ";" if event else "") + f"opacity_reset {n_reset}"

            state.iteration = step
            logger.writerow([step] + [repr(v) for v in report.csv_row()]
                            + [repr(losses.psnr(output.color, frame.image)),
                               len(state.splats), repr(lr_pos), event])
            if progress is not None and (step % 100 == 0 or step == 1):
                progress(step, report, len(state.splats))
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"checkpoint_{step:06d}.rmav", state)
        save_checkpoint(last_checkpoint, state)
    finally:
        log_file.close()
    return state


def _dump_abort(out_dir, step, report):
    with open(Path(out_dir) / "abort_diagnostics.json", "w") as f:
        json.dump({"iteration": step, "raw": report.raw,
                   "weighted": report.weighted, "total": report.total}, f,
                  indent=1)


# ---------------------------------------------------------------------------
# evaluation

def render_state_frame(state: TrainState, mesh: RiggedMesh, frame):
    return pipeline.render_frame(state.splats, mesh, frame.pose, frame.camera,
                                 rect_params=state.rect_params)


def evaluate(state: TrainState, mesh: RiggedMesh, frames):
    """Per-frame PSNR/SSIM against ground truth plus the means.

    Returns (rows, mean_psnr, mean_ssim); rows are (index, psnr, ssim).
    """
    rows = []
    for i, frame in enumerate(frames):
        out = render_state_frame(state, mesh, frame)
        rows.append((i, losses.psnr(out.color, frame.image),
                     losses.ssim(out.color, frame.image)))
    mean_psnr = float(np.mean([r[1] for r in rows])) if rows else float("nan")
    mean_ssim = float(np.mean([r[2] for r in rows])) if rows else float("nan")
    return rows, mean_psnr, mean_ssim
