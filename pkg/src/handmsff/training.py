"""Stage-weighted multi-stage training loop with deterministic checkpointing.

Each fusion stage contributes a mean-squared heatmap loss; the stage
losses are combined with weights proportional to each stage's current
mean joint error (plus a small floor, normalized to a convex
combination), so training effort concentrates on the stages that are
currently worst. The weights come from argmax decoding and are treated
as constants: no gradient flows through them.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch

from . import localizer, synth
from .errors import ConfigError, ContractViolation, FormatError, TrainingDiverged
from .model import (
    ModelConfig,
    ModelParams,
    _decode_grid,
    build_net,
    init_model,
)

_CKPT_MAGIC = b"HJNCKPT\x00"
_CKPT_VERSION = 1

OPTIMIZERS = ("plain-gradient", "momentum", "adaptive-moment")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adaptive-moment"
    seed: int = 0
    losswise_epsilon: float = 1e-6
    checkpoint_every: int = 0  # steps between periodic checkpoints; 0 = final only
    max_steps: Optional[int] = None
    momentum: float = 0.9
    target_sigma: float = 2.0
    region_margin: float = 0.25
    losswise_raw: bool = False  # literal unnormalized stage weights

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate: must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer: must be one of {OPTIMIZERS}")
        if self.losswise_epsilon <= 0:
            raise ConfigError("losswise_epsilon: must be > 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps: must be >= 1 when set")
        if self.target_sigma <= 0:
            raise ConfigError("target_sigma: must be > 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{key}: unknown train config field")
        return cls(**data).validate()


@dataclass
class TrainState:
    params: ModelParams
    model_config: ModelConfig
    train_config: TrainConfig
    optimizer_state: dict  # {"kind", "t", "slots": {param_name: {slot: array}}}
    step: int
    epoch: int
    rng_state: dict
    loss_history: list


# ---------------------------------------------------------------------------
# Losses and stage weights.
# ---------------------------------------------------------------------------


def heatmap_mse(pred, target, occl_mask):
    """Mean squared difference over visible-joint maps only.

    Works on numpy arrays or torch tensors of shape (..., K, H, W) with an
    occlusion mask of shape (..., K); occluded maps are excluded from both
    numerator and denominator. All joints occluded yields 0 with a warning.
    """
    if tuple(pred.shape) != tuple(target.shape):
        raise ContractViolation(
            f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ"
        )
    if isinstance(pred, np.ndarray):
        visible = ~np.asarray(occl_mask, dtype=bool)
        if not visible.any():
            warnings.warn("all joints occluded; heatmap loss is 0", stacklevel=2)
            return 0.0
        diff = pred[visible] - np.asarray(target)[visible]
        return float(np.mean(diff * diff))
    visible = torch.as_tensor(np.asarray(occl_mask), device=pred.device).bool().logical_not()
    if not bool(visible.any()):
        warnings.warn("all joints occluded; heatmap loss is 0", stacklevel=2)
        return (pred * 0).sum()
    diff = pred[visible] - target[visible]
    return (diff * diff).mean()


def msff_weights(per_stage_pred_coords, gt, occl_mask, epsilon: float,
                 use_losswise: bool = True, normalize: bool = True) -> np.ndarray:
    """Stage weights from each stage's mean joint-position error.

    ``per_stage_pred_coords`` is (N, ..., K, 2) against ground truth
    (..., K, 2), distances measured over visible joints. Weights are the
    raw per-stage means plus ``epsilon``, normalized to sum to one; they
    carry no gradient. With ``use_losswise`` false only the last stage
    counts. ``normalize=False`` returns the raw literal means.
    """
    pred = np.asarray(per_stage_pred_coords, dtype=np.float64)
    n_stages = pred.shape[0]
    if n_stages < 1:
        raise ContractViolation("need at least one stage")
    if not use_losswise:
        out = np.zeros(n_stages)
        out[-1] = 1.0
        return out
    gt = np.asarray(gt, dtype=np.float64)
    visible = ~np.asarray(occl_mask, dtype=bool).reshape(-1)
    dist = np.linalg.norm(pred - gt[None], axis=-1).reshape(n_stages, -1)
    if visible.any():
        raw = dist[:, visible].mean(axis=1)
    else:
        raw = np.zeros(n_stages)
    if not normalize:
        return raw
    weighted = raw + epsilon
    return weighted / weighted.sum()


def total_loss(per_stage_losses: Sequence, weights) -> float:
    """Weighted sum of the per-stage losses."""
    if len(per_stage_losses) != len(weights):
        raise ContractViolation(
            f"{len(per_stage_losses)} losses vs {len(weights)} weights"
        )
    total = None
    for loss, w in zip(per_stage_losses, weights):
        term = loss * float(w)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# Optimizers over a named parameter mapping.
# ---------------------------------------------------------------------------

_ADAM_BETAS = (0.9, 0.999)
_ADAM_EPS = 1e-8


def _init_slots(kind: str, params: Mapping[str, torch.Tensor]) -> dict:
    if kind == "plain-gradient":
        return {}
    if kind == "momentum":
        return {n: {"v": torch.zeros_like(p)} for n, p in params.items()}
    return {
        n: {"m": torch.zeros_like(p), "v": torch.zeros_like(p)}
        for n, p in params.items()
    }


@torch.no_grad()
def _opt_step(kind: str, cfg: TrainConfig, t: int,
              params: Mapping[str, torch.Tensor], slots: dict) -> int:
    lr = cfg.learning_rate
    t += 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if kind == "plain-gradient":
            p.add_(g, alpha=-lr)
        elif kind == "momentum":
            v = slots[name]["v"]
            v.mul_(cfg.momentum).add_(g)
            p.add_(v, alpha=-lr)
        else:
            b1, b2 = _ADAM_BETAS
            m, v = slots[name]["m"], slots[name]["v"]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(_ADAM_EPS), value=-lr)
    return t


# ---------------------------------------------------------------------------
# Crop preparation and the loop itself.
# ---------------------------------------------------------------------------


def _prepare_crops(dataset, model_config: ModelConfig, margin: float,
                   target_sigma: float):
    """Oracle-localize every hand once and cache crops, targets and grid truth."""
    crops, targets, gts, vis = [], [], [], []
    hs = model_config.heatmap_size
    for i in range(len(dataset)):
        ann = dataset.annotation(i)
        image = dataset.image(i)
        for hand in ann.hands:
            visible = hand.visible
            region = localizer.oracle_region(
                hand.joints, visible, ann.image_size, margin=margin
            )
            if region is None:
                continue
            crop = localizer.crop_hand(image, region, model_config.crop_size)
            gt_hm = localizer.map_to_heatmap(hand.joints, crop, hs)
            gt_hm = np.where(visible[:, None], gt_hm, 0.0)
            crops.append(crop.pixels)
            targets.append(
                synth.gaussian_targets(gt_hm, target_sigma, hs, ~visible)
            )
            gts.append(gt_hm)
            vis.append(visible)
    if not crops:
        raise ContractViolation("dataset contains no hands with visible joints")
    return (
        torch.from_numpy(np.stack(crops).astype(np.float32)),
        torch.from_numpy(np.stack(targets).astype(np.float32)),
        torch.from_numpy(np.stack(gts).astype(np.float32)),
        torch.from_numpy(np.stack(vis)),
    )


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic per-epoch sample order (re-derivable, so resume is exact)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def _batch_loss(net, crops_t, targets_t, gt_t, vis_t, train_config, model_config):
    """Forward one batch in training mode; returns (total, per-stage, weights)."""
    stacks = net(crops_t, gt=gt_t, visible=vis_t)
    occl = ~vis_t.bool()
    stage_losses = [heatmap_mse(s, targets_t, occl) for s in stacks]
    with torch.no_grad():
        per_stage_pred = np.stack(
            [_decode_grid(s).to(torch.float64).cpu().numpy() for s in stacks]
        )
    weights = msff_weights(
        per_stage_pred,
        gt_t.cpu().numpy(),
        occl.cpu().numpy(),
        train_config.losswise_epsilon,
        use_losswise=model_config.use_losswise,
        normalize=not train_config.losswise_raw,
    )
    return total_loss(stage_losses, weights), stage_losses, weights


def train(dataset, model_config: ModelConfig, train_config: TrainConfig,
          out_dir=None, resume_from: Union[None, str, Path, TrainState] = None,
          ) -> tuple[TrainState, list[dict]]:
    """Run the training loop; returns the final state and the per-step log.

    ``resume_from`` (a checkpoint path or TrainState) continues a previous
    run: its parameters, optimizer slots and step counter are restored and
    the loop picks up mid-schedule, reproducing an unbroken run exactly.
    """
    model_config.validate()
    train_config.validate()
    crops_t, targets_t, gt_t, vis_t = _prepare_crops(
        dataset, model_config, train_config.region_margin, train_config.target_sigma
    )
    n = crops_t.shape[0]
    steps_per_epoch = math.ceil(n / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    if train_config.max_steps is not None:
        total_steps = min(total_steps, train_config.max_steps)

    if resume_from is None:
        params_np = init_model(model_config, train_config.seed)
        net = build_net(model_config, params_np)
        named = dict(net.named_parameters())
        slots = _init_slots(train_config.optimizer, named)
        opt_t = 0
        step = 0
        loss_history: list[float] = []
        rng = np.random.default_rng(train_config.seed)
    else:
        state = resume_from if isinstance(resume_from, TrainState) \
            else load_checkpoint(resume_from)
        if state.model_config != model_config:
            raise ConfigError(
                "model config does not match the checkpoint; refusing to resume"
            )
        if state.optimizer_state["kind"] != train_config.optimizer:
            raise ConfigError("optimizer kind does not match the checkpoint")
        net = build_net(model_config, state.params)
        named = dict(net.named_parameters())
        slots = {
            name: {k: torch.from_numpy(v.copy()) for k, v in entry.items()}
            for name, entry in state.optimizer_state["slots"].items()
        }
        opt_t = int(state.optimizer_state["t"])
        step = state.step
        loss_history = list(state.loss_history)
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state

    for p in named.values():
        p.requires_grad_(True)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def snapshot() -> TrainState:
        return TrainState(
            params={k: p.detach().numpy().copy() for k, p in named.items()},
            model_config=model_config,
            train_config=train_config,
            optimizer_state={
                "kind": train_config.optimizer,
                "t": opt_t,
                "slots": {
                    name: {k: v.numpy().copy() for k, v in entry.items()}
                    for name, entry in slots.items()
                },
            },
            step=step,
            epoch=step // steps_per_epoch,
            rng_state=rng.bit_generator.state,
            loss_history=list(loss_history),
        )

    log: list[dict] = []
    while step < total_steps:
        epoch = step // steps_per_epoch
        order = epoch_order(train_config.seed, epoch, n)
        lo = (step % steps_per_epoch) * train_config.batch_size
        sel = torch.from_numpy(order[lo : lo + train_config.batch_size].copy())
        loss, stage_losses, weights = _batch_loss(
            net, crops_t[sel], targets_t[sel], gt_t[sel], vis_t[sel],
            train_config, model_config,
        )
        if not torch.isfinite(loss):
            dump_path = None
            if out is not None:
                dump_path = out / "diverged_state.json"
                dump_path.write_text(json.dumps({
                    "step": step,
                    "epoch": epoch,
                    "stage_losses": [float(l) for l in stage_losses],
                    "weights": [float(w) for w in weights],
                }, indent=2))
                save_checkpoint(snapshot(), out / "diverged.ckpt")
            raise TrainingDiverged(
                f"non-finite loss at step {step}", dump_path=dump_path
            )
        for p in named.values():
            if p.grad is not None:
                p.grad = None
        loss.backward()
        opt_t = _opt_step(train_config.optimizer, train_config, opt_t, named, slots)
        step += 1
        total_f = float(loss.detach())
        loss_history.append(total_f)
        log.append({
            "step": step,
            "epoch": epoch,
            "stage_losses": [float(l.detach()) for l in stage_losses],
            "weights": [float(w) for w in weights],
            "total_loss": total_f,
        })
        if (
            out is not None
            and train_config.checkpoint_every > 0
            and step % train_config.checkpoint_every == 0
        ):
            save_checkpoint(snapshot(), out / f"ckpt_step{step:06d}.ckpt")

    state = snapshot()
    if out is not None:
        save_checkpoint(state, out / "checkpoint.ckpt")
        write_train_log(log, out / "log.csv")
    return state, log


def write_train_log(log: Sequence[dict], path) -> None:
    """Append-only CSV: step, epoch, total loss, then per-stage losses and weights."""
    if not log:
        Path(path).write_text("step,epoch,total_loss\n")
        return
    n_stages = len(log[0]["stage_losses"])
    header = (
        ["step", "epoch", "total_loss"]
        + [f"loss_{i + 1}" for i in range(n_stages)]
        + [f"weight_{i + 1}" for i in range(n_stages)]
    )
    lines = [",".join(header)]
    for row in log:
        cells = [str(row["step"]), str(row["epoch"]), repr(row["total_loss"])]
        cells += [repr(v) for v in row["stage_losses"]]
        cells += [repr(v) for v in row["weights"]]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON header, little-endian f32 blob.
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    tensors = []
    payload = bytearray()

    def add(name: str, arr: np.ndarray):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({
            "name": name,
            "shape": list(np.asarray(arr).shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)

    for name in sorted(state.params):
        add(f"param/{name}", state.params[name])
    for pname in sorted(state.optimizer_state["slots"]):
        for slot in sorted(state.optimizer_state["slots"][pname]):
            add(f"opt/{pname}/{slot}", state.optimizer_state["slots"][pname][slot])

    header = {
        "format_version": _CKPT_VERSION,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "optimizer": {"kind": state.optimizer_state["kind"],
                      "t": state.optimizer_state["t"]},
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": _rng_state_to_json(state.rng_state),
        "loss_history": [float(v) for v in state.loss_history],
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: checkpoint not found")
    data = path.read_bytes()
    if len(data) < len(_CKPT_MAGIC) + 4 or data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    header_len = struct.unpack_from("<I", data, len(_CKPT_MAGIC))[0]
    body_start = len(_CKPT_MAGIC) + 4
    if len(data) < body_start + header_len:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[body_start : body_start + header_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from exc
    if header.get("format_version") != _CKPT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {header.get('format_version')}"
        )
    payload = data[body_start + header_len :]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) < expected:
        raise FormatError(
            f"{path}: truncated checkpoint payload "
            f"({len(payload)} bytes, expected {expected})"
        )

    params: dict[str, np.ndarray] = {}
    slots: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        name = entry["name"]
        if name.startswith("param/"):
            params[name[len("param/") :]] = arr
        elif name.startswith("opt/"):
            _, pname, slot = name.split("/", 2)
            slots.setdefault(pname, {})[slot] = arr
        else:
            raise FormatError(f"{path}: unknown tensor kind '{name}'")

    return TrainState(
        params=params,
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        optimizer_state={
            "kind": header["optimizer"]["kind"],
            "t": header["optimizer"]["t"],
            "slots": slots,
        },
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        rng_state=_rng_state_from_json(header["rng_state"]),
        loss_history=list(header["loss_history"]),
    )


def _rng_state_to_json(state: dict) -> dict:
    # numpy PCG64 state is a nested dict of ints; JSON handles it natively.
    return json.loads(json.dumps(state))


def _rng_state_from_json(state: dict) -> dict:
    return state


# ---------------------------------------------------------------------------
# Finite-difference gradient verification.
# ---------------------------------------------------------------------------


def micro_config(num_msff: int = 1, activation: str = "rectifier") -> ModelConfig:
    """Smallest practical configuration, used by tests and smoke runs."""
    return ModelConfig(
        num_msff=num_msff,
        blocks_per_fec=1,
        units_per_block=1,
        branch_channels=6,
        crop_size=64,
        heatmap_size=16,
        activation=activation,
    )


def gradient_check(model_config: Optional[ModelConfig] = None, n_checks: int = 24,
                   fd_step: float = 1e-5, seed: int = 0) -> list[dict]:
    """Compare analytic training-loss gradients against central differences.

    Runs in double precision on the smooth activation (the rectifier's
    kinks would poison finite differences). Returns one record per sampled
    parameter with the analytic value, numeric value and relative error.
    """
    config = model_config or micro_config(num_msff=2, activation="smooth")
    config.validate()
    if config.activation != "smooth":
        raise ConfigError("activation: gradient check requires the smooth mode")
    train_cfg = TrainConfig()
    rng = np.random.default_rng(seed)
    params_np = init_model(config, seed)
    net = build_net(config, params_np, dtype=torch.float64)
    named = dict(net.named_parameters())

    hs = config.heatmap_size
    crop = torch.from_numpy(
        rng.uniform(0.0, 1.0, (1, 3, config.crop_size, config.crop_size))
    )
    gt = rng.uniform(1.0, hs - 2.0, (1, config.joint_count, 2))
    visible = rng.random((1, config.joint_count)) > 0.1
    targets = torch.from_numpy(
        synth.gaussian_targets(gt[0], 2.0, hs, ~visible[0])[None]
    )
    gt_t = torch.from_numpy(gt)
    vis_t = torch.from_numpy(visible)

    def loss_value() -> float:
        with torch.no_grad():
            loss, _, _ = _batch_loss(net, crop, targets, gt_t, vis_t, train_cfg, config)
        return float(loss)

    for p in named.values():
        p.requires_grad_(True)
    loss, _, _ = _batch_loss(net, crop, targets, gt_t, vis_t, train_cfg, config)
    loss.backward()
    # The final stage's feed-forward projection has no loss path; its
    # gradient is exactly zero, which the finite differences confirm.
    grads = {
        n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for n, p in named.items()
    }

    names = sorted(named)
    results = []
    for _ in range(n_checks):
        name = names[int(rng.integers(len(names)))]
        flat = named[name].detach().reshape(-1)
        idx = int(rng.integers(flat.numel()))
        orig = float(flat[idx])
        with torch.no_grad():
            named[name].reshape(-1)[idx] = orig + fd_step
            f_plus = loss_value()
            named[name].reshape(-1)[idx] = orig - fd_step
            f_minus = loss_value()
            named[name].reshape(-1)[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * fd_step)
        analytic = float(grads[name].reshape(-1)[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        results.append({
            "name": name,
            "index": idx,
            "analytic": analytic,
            "numeric": numeric,
            "rel_error": rel,
        })
    return results
