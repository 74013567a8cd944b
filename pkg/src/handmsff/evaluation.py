"""Detection metrics, heatmap spread statistics, and experiment runners.

PCK here is the fraction of visible joints whose prediction lands within
``tau`` times the hand's ground-truth bounding-box size (max of width and
height) of the true joint, using a strict inequality. Spread summarizes
how concentrated a heatmap is: the mean distance of its above-threshold
cells to the detected peak, normalized by the map diagonal, so 0 is a
single-point response and values grow toward 1 for diffuse maps.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import localizer
from .errors import ConfigError, ContractViolation
from .model import ModelConfig, build_net, decode_joints, parameter_count
from .training import TrainConfig, TrainState, load_checkpoint, train

DEFAULT_TAUS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
SPREAD_EPS = 1e-6

ABLATION_VARIANTS = ("full", "del_sshfr", "del_tp", "del_at", "del_lw", "del_aomr")
MSFF_SWEEP = (1, 2, 3, 4)


def bbox_normalizer(gt: np.ndarray, visible: np.ndarray) -> float:
    """Max of the visible-joint bounding box's width and height."""
    pts = np.asarray(gt, dtype=np.float64)[np.asarray(visible, dtype=bool)]
    if pts.size == 0:
        raise ContractViolation("cannot derive a normalizer without visible joints")
    span = pts.max(axis=0) - pts.min(axis=0)
    return float(max(span[0], span[1]))


def _flatten_joint_errors(preds, gts, occl_masks, normalizers):
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    visible = ~np.asarray(occl_masks, dtype=bool)
    norms = np.broadcast_to(
        np.asarray(normalizers, dtype=np.float64)[..., None], visible.shape
    )
    if np.any(norms[visible] <= 0):
        raise ContractViolation("normalizers must be positive")
    err = np.linalg.norm(preds - gts, axis=-1)
    return err[visible] / norms[visible], visible


def pck(preds, gts, occl_masks, tau: float, normalizers) -> float:
    """Fraction of visible joints with normalized error strictly below ``tau``."""
    if tau < 0:
        raise ContractViolation("tau must be >= 0")
    ratios, visible = _flatten_joint_errors(preds, gts, occl_masks, normalizers)
    if ratios.size == 0:
        raise ContractViolation("PCK is undefined with no visible joints")
    return float(np.mean(ratios < tau))


def pck_curve(preds, gts, occl_masks, normalizers,
              taus: Sequence[float] = DEFAULT_TAUS) -> dict[float, float]:
    """PCK at each threshold; nondecreasing in tau by construction."""
    ratios, _ = _flatten_joint_errors(preds, gts, occl_masks, normalizers)
    if ratios.size == 0:
        raise ContractViolation("PCK is undefined with no visible joints")
    return {float(t): float(np.mean(ratios < t)) for t in taus}


def spread(heatmap: np.ndarray, peak, eps: float = SPREAD_EPS) -> float:
    """Mean distance of above-threshold cells to the peak, over the map diagonal."""
    hm = np.asarray(heatmap, dtype=np.float64)
    h, w = hm.shape
    ys, xs = np.nonzero(hm > eps)
    if xs.size == 0:
        return 0.0
    px, py = float(peak[0]), float(peak[1])
    dist = np.hypot(xs - px, ys - py)
    return float(dist.mean() / np.hypot(w, h))


def _renormalize(maps: np.ndarray) -> np.ndarray:
    """Numpy twin of the model's per-map min-max normalization."""
    mn = maps.min(axis=(-2, -1), keepdims=True)
    mx = maps.max(axis=(-2, -1), keepdims=True)
    span = mx - mn
    out = np.where(span > 0, (maps - mn) / np.where(span > 0, span, 1.0), 0.0)
    return out


def heatmap_spreads(heatmaps: np.ndarray, eps: float = SPREAD_EPS) -> np.ndarray:
    """Spread of every map in a (K, H, W) stack, peaks taken at each argmax."""
    maps = _renormalize(np.asarray(heatmaps, dtype=np.float64))
    peaks = decode_joints(maps)
    return np.array([spread(maps[k], peaks[k], eps) for k in range(maps.shape[0])])


def spread_accuracy_bins(heatmaps, preds, gts, occl_masks, n_bins: int,
                         reference_tau: float = 0.2, normalizers=None) -> list[dict]:
    """Bucket joints by spread quantile and summarize correctness per bucket.

    ``heatmaps`` is (S, K, H, W); correctness is the PCK indicator at
    ``reference_tau``. Normalizers default to each sample's ground-truth
    bounding-box size. Empty buckets are omitted.
    """
    if n_bins < 2:
        raise ContractViolation("n_bins must be >= 2")
    gts = np.asarray(gts, dtype=np.float64)
    visible = ~np.asarray(occl_masks, dtype=bool)
    if normalizers is None:
        normalizers = np.array(
            [bbox_normalizer(gts[s], visible[s]) for s in range(gts.shape[0])]
        )
    ratios, vis = _flatten_joint_errors(preds, gts, ~visible, normalizers)
    correct = (ratios < reference_tau).astype(np.float64)
    spreads = np.concatenate(
        [heatmap_spreads(np.asarray(heatmaps)[s])[visible[s]]
         for s in range(len(heatmaps))]
    )
    edges = np.quantile(spreads, np.linspace(0.0, 1.0, n_bins + 1))
    which = np.clip(np.searchsorted(edges[1:-1], spreads, side="right"), 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = which == b
        if not mask.any():
            continue
        bins.append({
            "lo": float(edges[b]),
            "hi": float(edges[b + 1]),
            "count": int(mask.sum()),
            "mean_spread": float(spreads[mask].mean()),
            "mean_acc": float(correct[mask].mean()),
            "min_acc": float(correct[mask].min()),
            "max_acc": float(correct[mask].max()),
        })
    return bins


@dataclass
class EvalReport:
    pck_curve: dict
    per_joint_pck: list
    reference_tau: float
    spread_bins: list
    mean_error_px: float
    mean_normalized_error: float
    config: dict
    runtime: dict

    def to_dict(self, include_runtime: bool = True) -> dict:
        data = {
            "pck_curve": {f"{t:g}": v for t, v in self.pck_curve.items()},
            "per_joint_pck": self.per_joint_pck,
            "reference_tau": self.reference_tau,
            "spread_bins": self.spread_bins,
            "mean_error_px": self.mean_error_px,
            "mean_normalized_error": self.mean_normalized_error,
            "config": self.config,
        }
        if include_runtime:
            data["runtime"] = self.runtime
        return data


def _resolve_checkpoint(checkpoint, model_config):
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, TrainState):
        if model_config is not None and model_config != checkpoint.model_config:
            raise ConfigError("model config does not match the checkpoint")
        return checkpoint.params, checkpoint.model_config
    if isinstance(checkpoint, Mapping):
        if model_config is None:
            raise ConfigError("model_config is required with a bare parameter mapping")
        return checkpoint, model_config
    raise ConfigError(f"cannot interpret checkpoint of type {type(checkpoint)!r}")


def evaluate(dataset, checkpoint, model_config: Optional[ModelConfig] = None,
             margin: float = 0.25, reference_tau: float = 0.2,
             taus: Sequence[float] = DEFAULT_TAUS, n_spread_bins: int = 5,
             ) -> EvalReport:
    """Full pipeline evaluation: localize, crop, infer, decode, score.

    ``checkpoint`` may be a checkpoint path, a TrainState, or a bare
    parameter mapping (then ``model_config`` is required). Deterministic
    apart from the wall-clock runtime block.
    """
    import torch

    params, config = _resolve_checkpoint(checkpoint, model_config)
    net = build_net(config, params)
    hs = config.heatmap_size

    preds, gts, occl, norms, stacks = [], [], [], [], []
    t0 = time.perf_counter()
    n_hands = 0
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
            crop = localizer.crop_hand(image, region, config.crop_size)
            with torch.no_grad():
                out = net(torch.from_numpy(crop.pixels[None]))
            final = out[-1].squeeze(0).numpy()
            pred_src = localizer.map_to_source(decode_joints(final), crop, hs)
            preds.append(pred_src)
            gts.append(np.asarray(hand.joints, dtype=np.float64))
            occl.append(~visible)
            norms.append(bbox_normalizer(hand.joints, visible))
            stacks.append(final)
            n_hands += 1
    wall = time.perf_counter() - t0
    if n_hands == 0:
        raise ContractViolation("dataset contains no hands with visible joints")

    preds_a = np.stack(preds)
    gts_a = np.stack(gts)
    occl_a = np.stack(occl)
    norms_a = np.asarray(norms)
    visible_a = ~occl_a

    curve = pck_curve(preds_a, gts_a, occl_a, norms_a, taus=taus)
    ratios = np.linalg.norm(preds_a - gts_a, axis=-1) / norms_a[:, None]
    per_joint = []
    for k in range(preds_a.shape[1]):
        vis_k = visible_a[:, k]
        per_joint.append(
            float(np.mean(ratios[vis_k, k] < reference_tau)) if vis_k.any() else None
        )
    err_px = np.linalg.norm(preds_a - gts_a, axis=-1)[visible_a]

    report = EvalReport(
        pck_curve=curve,
        per_joint_pck=per_joint,
        reference_tau=reference_tau,
        spread_bins=spread_accuracy_bins(
            np.stack(stacks), preds_a, gts_a, occl_a, n_spread_bins,
            reference_tau=reference_tau, normalizers=norms_a,
        ),
        mean_error_px=float(err_px.mean()),
        mean_normalized_error=float(ratios[visible_a].mean()),
        config={
            "model": config.to_dict(),
            "margin": margin,
            "reference_tau": reference_tau,
        },
        runtime={
            "wall_s": wall,
            "n_images": len(dataset),
            "n_hands": n_hands,
            "hands_per_s": n_hands / wall if wall > 0 else float("nan"),
        },
    )
    return report


# ---------------------------------------------------------------------------
# Ablation and stage-count sweep runner.
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    reports: dict
    param_counts: dict
    errors: dict
    base_config: ModelConfig
    train_config: TrainConfig


def ablation_configs(base_config: ModelConfig) -> dict[str, ModelConfig]:
    """The six module ablations plus the stage-count sweep."""
    rep = dataclasses.replace
    variants = {
        "full": base_config,
        "del_sshfr": rep(base_config, use_sshfr=False),
        "del_tp": rep(base_config, use_transpose=False),
        "del_at": rep(base_config, use_attention=False),
        "del_lw": rep(base_config, use_losswise=False),
        "del_aomr": rep(base_config, use_aomr=False),
    }
    for n in MSFF_SWEEP:
        variants[f"msff_{n}"] = rep(base_config, num_msff=n)
    return variants


def run_ablation(dataset, base_config: ModelConfig, train_config: TrainConfig,
                 margin: float = 0.25) -> AblationResult:
    """Train and evaluate every variant from the same seed; failures are recorded,
    not fatal."""
    reports: dict = {}
    param_counts: dict = {}
    errors: dict = {}
    for name, config in ablation_configs(base_config).items():
        try:
            state, _ = train(dataset, config, train_config)
            param_counts[name] = parameter_count(state.params)
            reports[name] = evaluate(dataset, state, margin=margin)
        except Exception as exc:  # keep going; the table records the failure
            errors[name] = f"{type(exc).__name__}: {exc}"
    return AblationResult(
        reports=reports,
        param_counts=param_counts,
        errors=errors,
        base_config=base_config,
        train_config=train_config,
    )


# ---------------------------------------------------------------------------
# Report emission: JSON, CSV tables, and plots.
# ---------------------------------------------------------------------------


def write_pck_csv(report: EvalReport, path) -> None:
    lines = ["tau,pck"]
    for tau in sorted(report.pck_curve):
        lines.append(f"{tau:g},{report.pck_curve[tau]:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def plot_pck_curve(report: EvalReport, path) -> None:
    plt = _pyplot()
    taus = sorted(report.pck_curve)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(taus, [report.pck_curve[t] for t in taus], marker="o")
    ax.set_xlabel("normalized distance threshold")
    ax.set_ylabel("detection rate")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_spread_bins(report: EvalReport, path) -> None:
    plt = _pyplot()
    bins = report.spread_bins
    fig, ax = plt.subplots(figsize=(5, 4))
    if bins:
        xs = [b["mean_spread"] for b in bins]
        ax.plot(xs, [b["mean_acc"] for b in bins], "k-o", label="mean accuracy")
        ax.plot(xs, [b["max_acc"] for b in bins], "c--", label="max accuracy")
        ax.plot(xs, [b["min_acc"] for b in bins], "g--", label="min accuracy")
        ax.legend()
    ax.set_xlabel("heatmap spread")
    ax.set_ylabel(f"accuracy @ {report.reference_tau:g}")
    ax.set_ylim(-0.05, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_stage_sweep(result: AblationResult, path) -> None:
    """Overlay the PCK curves of the stage-count sweep variants."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for n in MSFF_SWEEP:
        report = result.reports.get(f"msff_{n}")
        if report is None:
            continue
        taus = sorted(report.pck_curve)
        ax.plot(taus, [report.pck_curve[t] for t in taus], marker="o",
                label=f"{n} stage{'s' if n > 1 else ''}")
    ax.set_xlabel("normalized distance threshold")
    ax.set_ylabel("detection rate")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    write_pck_csv(report, out / "pck.csv")
    plot_pck_curve(report, out / "pck_curve.png")
    plot_spread_bins(report, out / "spread_bins.png")


def save_ablation(result: AblationResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    taus = DEFAULT_TAUS
    lines = ["variant,parameters," + ",".join(f"pck@{t:g}" for t in taus) + ",status"]
    for name in ablation_configs(result.base_config):
        if name in result.reports:
            report = result.reports[name]
            cells = [name, str(result.param_counts[name])]
            cells += [f"{report.pck_curve.get(float(t), float('nan')):.6f}" for t in taus]
            cells.append("ok")
        else:
            cells = [name, "", *[""] * len(taus), result.errors.get(name, "missing")]
        lines.append(",".join(cells))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    for name, report in result.reports.items():
        save_report(report, out / "variants" / name)
    plot_stage_sweep(result, out / "stage_sweep.png")
