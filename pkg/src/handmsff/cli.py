"""Command-line entry point: dataset generation, training, evaluation, prediction.

Every run directory receives an effective-config echo (config.json) so any
result can be reproduced from its output directory alone. Flags win over
config-file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, localizer, synth, training
from .errors import ConfigError, HandMsffError
from .graph import EDGES
from .model import ModelConfig, decode_joints
from .synth import GenConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Merged view of every configurable knob, as read from a config file."""

    model: ModelConfig
    train: TrainConfig
    generate: GenConfig
    margin: float = 0.25
    reference_tau: float = 0.2

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "generate": self.generate.to_dict(),
            "eval": {"margin": self.margin, "reference_tau": self.reference_tau},
        }


def load_run_config(path=None) -> RunConfig:
    """Read a JSON config file with sections model/train/generate/eval."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {p} ({exc})") from exc
    known = {"model", "train", "generate", "eval"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown config section")
    eval_raw = dict(raw.get("eval", {}))
    for key in eval_raw:
        if key not in {"margin", "reference_tau"}:
            raise ConfigError(f"eval.{key}: unknown config field")
    return RunConfig(
        model=ModelConfig.from_dict(raw.get("model", {})),
        train=TrainConfig.from_dict(raw.get("train", {})),
        generate=GenConfig.from_dict(raw.get("generate", {})),
        margin=float(eval_raw.get("margin", 0.25)),
        reference_tau=float(eval_raw.get("reference_tau", 0.2)),
    )


def _echo_config(run_config: RunConfig, out_dir: Path, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = run_config.to_dict()
    payload["invocation"] = extra
    (out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    _echo_config(cfg, out, {"command": "gen-data", "n": args.n, "seed": args.seed})
    manifest = synth.generate_dataset(args.n, args.seed, out, cfg.generate)
    print(f"wrote {len(manifest.samples)} images to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    dataset = synth.load_dataset(args.data)
    out = Path(args.out)
    _echo_config(cfg, out, {"command": "train", "data": str(args.data)})
    state, log = training.train(dataset, cfg.model, cfg.train, out_dir=out)
    final = log[-1]["total_loss"] if log else float("nan")
    print(f"trained {state.step} steps; final loss {final:.6f}; "
          f"checkpoint at {out / 'checkpoint.ckpt'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    dataset = synth.load_dataset(args.data)
    out = Path(args.out)
    _echo_config(cfg, out, {"command": "eval", "data": str(args.data),
                            "checkpoint": str(args.checkpoint)})
    report = evaluation.evaluate(
        dataset, args.checkpoint, margin=cfg.margin,
        reference_tau=cfg.reference_tau,
    )
    evaluation.save_report(report, out)
    ref = report.pck_curve.get(cfg.reference_tau)
    print(f"evaluated {report.runtime['n_hands']} hands; "
          f"PCK@{cfg.reference_tau:g} = {ref:.4f}; report at {out / 'report.json'}")
    return 0


def _cmd_predict(args) -> int:
    from PIL import Image, ImageDraw

    cfg = load_run_config(args.config)
    state = training.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    _echo_config(cfg, out, {"command": "predict", "image": str(args.image),
                            "checkpoint": str(args.checkpoint)})
    img_path = Path(args.image)
    if not img_path.is_file():
        raise ConfigError(f"image: file not found: {img_path}")
    with Image.open(img_path) as im:
        rgb = im.convert("RGB")
        image = np.transpose(np.asarray(rgb, dtype=np.float32) / 255.0, (2, 0, 1))

    import torch

    from .model import build_net

    net = build_net(state.model_config, state.params)
    detector = localizer.FullFrameDetector()
    hands = []
    for region in detector.detect(image):
        crop = localizer.crop_hand(image, region, state.model_config.crop_size)
        with torch.no_grad():
            stacks = net(torch.from_numpy(crop.pixels[None]))
        coords = decode_joints(stacks[-1].squeeze(0).numpy())
        hands.append(localizer.map_to_source(
            coords, crop, state.model_config.heatmap_size
        ))

    (out / "joints.json").write_text(json.dumps({
        "image": str(img_path),
        "hands": [h.tolist() for h in hands],
    }, indent=2) + "\n")

    overlay = rgb.copy()
    draw = ImageDraw.Draw(overlay)
    for joints in hands:
        for a, b in EDGES:
            draw.line([tuple(joints[a]), tuple(joints[b])], fill=(0, 255, 0), width=2)
        for x, y in joints:
            draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=(255, 0, 0))
    overlay.save(out / "overlay.png")
    print(f"predicted {len(hands)} hand(s); outputs in {out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    dataset = synth.load_dataset(args.data)
    out = Path(args.out)
    _echo_config(cfg, out, {"command": "ablate", "data": str(args.data)})
    result = evaluation.run_ablation(dataset, cfg.model, cfg.train, margin=cfg.margin)
    evaluation.save_ablation(result, out)
    done = len(result.reports)
    failed = len(result.errors)
    print(f"ablation finished: {done} variants ok, {failed} failed; "
          f"table at {out / 'ablation.csv'}")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handmsff",
        description="Multi-scale hand joint detector: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="detect hand joints in one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("ablate", help="run the ablation and stage-count sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HandMsffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
