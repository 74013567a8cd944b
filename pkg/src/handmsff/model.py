"""Two-stage heatmap regression network for 21 hand joints.

Stage one is a ten-layer shallow feature extractor (SSHFR) that turns a
fixed-size hand crop into a 256-channel feature grid at 1/4 resolution.
Stage two chains N multi-scale fusion stages (MSFF);
each runs three parallel branches at full/half/quarter grid resolution,
fuses them with a channel transpose mix, applies a parameter-free
channel gate, emits per-joint heatmaps, reinforces them along the hand
skeleton, and feeds a projected summary to the next stage.

Public operations accept and return numpy arrays without a batch axis;
training code works with the :class:`HandJointNet` module directly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import graph as graph_mod
from .errors import ConfigError, ContractViolation

#: Channel width handed from the feature extractor to every fusion stage.
TRUNK_CHANNELS = 256

# Shallow extractor layout: kernel sizes, strides and output widths of the
# ten layers. Two stride-2 layers bring a crop from S down to S/4.
_SSHFR_KERNELS = (5, 5, 5, 5, 5, 3, 3, 3, 3, 3)
_SSHFR_STRIDES = (2, 1, 2, 1, 1, 1, 1, 1, 1, 1)
_SSHFR_CHANNELS = (32, 64, 64, 128, 128, 128, 256, 256, 256, 256)

ACTIVATIONS = ("rectifier", "smooth")

ModelParams = dict  # name -> float32 numpy array


def _conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> nn.Conv2d:
    # Replicate padding: zero padding plants spurious extrema on the map
    # border, and the min-max normalization then locks the argmax onto them.
    return nn.Conv2d(
        in_ch, out_ch, kernel, stride=stride, padding=kernel // 2,
        padding_mode="replicate" if kernel > 1 else "zeros",
    )


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation switches."""

    num_msff: int = 3
    blocks_per_fec: int = 1
    units_per_block: int = 4
    branch_channels: int = 96
    crop_size: int = 256
    heatmap_size: int = 64
    joint_count: int = 21
    activation: str = "rectifier"
    use_sshfr: bool = True
    use_transpose: bool = True
    use_attention: bool = True
    use_losswise: bool = True
    use_aomr: bool = True

    def validate(self) -> "ModelConfig":
        if self.num_msff < 1:
            raise ConfigError("num_msff: must be >= 1")
        if not 1 <= self.blocks_per_fec <= 4:
            raise ConfigError("blocks_per_fec: must be in [1, 4]")
        if not 1 <= self.units_per_block <= 4:
            raise ConfigError("units_per_block: must be in [1, 4]")
        if self.branch_channels < 1:
            raise ConfigError("branch_channels: must be >= 1")
        if self.heatmap_size < 4 or self.heatmap_size % 4 != 0:
            raise ConfigError("heatmap_size: must be a positive multiple of 4")
        if self.crop_size != 4 * self.heatmap_size:
            raise ConfigError("crop_size: must equal 4 * heatmap_size")
        if self.joint_count != graph_mod.JOINT_COUNT:
            raise ConfigError(f"joint_count: must be {graph_mod.JOINT_COUNT}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation: must be one of {ACTIVATIONS}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{key}: unknown model config field")
        return cls(**data).validate()


def _act_fn(config: ModelConfig):
    return F.relu if config.activation == "rectifier" else F.softplus


class SSHFR(nn.Module):
    """Ten-layer shallow feature extractor: crop (3, S, S) -> (256, S/4, S/4)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self._act = _act_fn(config)
        convs = []
        in_ch = 3
        for k, s, out_ch in zip(_SSHFR_KERNELS, _SSHFR_STRIDES, _SSHFR_CHANNELS):
            convs.append(_conv(in_ch, out_ch, k, stride=s))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)

    def forward(self, x):
        for conv in self.convs:
            x = self._act(conv(x))
        return x


class _ResidualUnit(nn.Module):
    """Two 3x3 stride-1 convolutions around a nonlinearity, plus identity skip."""

    def __init__(self, channels: int, act):
        super().__init__()
        self.conv1 = _conv(channels, channels, 3)
        self.conv2 = _conv(channels, channels, 3)
        self._act = act

    def forward(self, x):
        return x + self.conv2(self._act(self.conv1(x)))


class _ConvBlock(nn.Module):
    def __init__(self, channels: int, units: int, act):
        super().__init__()
        self.units = nn.ModuleList(_ResidualUnit(channels, act) for _ in range(units))

    def forward(self, x):
        for unit in self.units:
            x = unit(x)
        return x


class _FEC(nn.Module):
    """Feature extraction stack: p conv blocks of q residual units each."""

    def __init__(self, channels: int, config: ModelConfig):
        super().__init__()
        act = _act_fn(config)
        self.blocks = nn.ModuleList(
            _ConvBlock(channels, config.units_per_block, act)
            for _ in range(config.blocks_per_fec)
        )

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class _Branch(nn.Module):
    """One multi-scale branch: j-1 stride-2 downsamples, then the FEC stack.

    Branch 1 keeps full grid resolution; its residual units need equal
    in/out widths, so a 1x1 projection brings the trunk width down to the
    branch width first. Branches 2 and 3 fold that projection into their
    stride-2 downsample convolutions.
    """

    def __init__(self, scale_index: int, in_channels: int, config: ModelConfig):
        super().__init__()
        if scale_index not in (1, 2, 3):
            raise ContractViolation(f"branch index must be 1, 2 or 3, got {scale_index}")
        c = config.branch_channels
        self._act = _act_fn(config)
        if scale_index == 1:
            reduce = [_conv(in_channels, c, 1)]
        elif scale_index == 2:
            reduce = [_conv(in_channels, c, 3, stride=2)]
        else:
            reduce = [
                _conv(in_channels, c, 3, stride=2),
                _conv(c, c, 3, stride=2),
            ]
        self.reduce = nn.ModuleList(reduce)
        self.fec = _FEC(c, config)

    def forward(self, x):
        for conv in self.reduce:
            x = self._act(conv(x))
        return self.fec(x)


def fuse_branch_maps(psi1, psi2, psi3):
    """Bilinear-upsample the half/quarter grids and concatenate along channels."""
    if not psi1.shape[-3] == psi2.shape[-3] == psi3.shape[-3]:
        raise ContractViolation(
            "branch outputs must share a channel count, got "
            f"{psi1.shape[-3]}, {psi2.shape[-3]}, {psi3.shape[-3]}"
        )
    size = psi1.shape[-2:]
    up2 = F.interpolate(psi2, size=size, mode="bilinear", align_corners=False)
    up3 = F.interpolate(psi3, size=size, mode="bilinear", align_corners=False)
    return torch.cat([psi1, up2, up3], dim=-3)


def transpose_mix(fused, enabled: bool = True):
    """Interleave the three branch blocks channel-wise and stack onto the original.

    The 3C fused channels are viewed as a (3, C) grid, transposed to (C, 3)
    and flattened back, so channel order (a1..aC | b1..bC | c1..cC) becomes
    (a1, b1, c1, a2, b2, c2, ...). The result is concatenated ahead of the
    untransposed channels, giving 6C. With ``enabled`` false the fused
    block is duplicated instead so downstream shapes do not move.
    """
    b, c3, h, w = fused.shape
    if c3 % 3 != 0:
        raise ContractViolation(f"fused channel count {c3} not divisible by 3")
    if not enabled:
        return torch.cat([fused, fused], dim=1)
    mixed = fused.reshape(b, 3, c3 // 3, h, w).transpose(1, 2).reshape(b, c3, h, w)
    return torch.cat([mixed, fused], dim=1)


def channel_gate(x):
    """Scale each channel by the sum of its spatial max and spatial mean."""
    gate = x.amax(dim=(-2, -1), keepdim=True) + x.mean(dim=(-2, -1), keepdim=True)
    return x * gate


def normalize_unit_range(x):
    """Per-map min-max normalization to [0, 1]; constant maps become zero."""
    mn = x.amin(dim=(-2, -1), keepdim=True)
    mx = x.amax(dim=(-2, -1), keepdim=True)
    span = mx - mn
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = (x - mn) / safe
    return torch.where(span > 0, out, torch.zeros_like(out))


def _decode_grid(maps):
    """Argmax (x, y) per map, first occurrence in row-major order on ties."""
    h, w = maps.shape[-2:]
    idx = maps.flatten(-2).argmax(dim=-1)
    return torch.stack([idx % w, idx // w], dim=-1)


class MSFF(nn.Module):
    """One fusion stage: branches, fuse/transpose, gate, heatmap head, feed-forward."""

    def __init__(self, config: ModelConfig, in_channels: int = TRUNK_CHANNELS):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        self.branches = nn.ModuleList(
            _Branch(j, in_channels, config) for j in (1, 2, 3)
        )
        fused = 6 * config.branch_channels
        self.head = nn.Conv2d(fused, config.joint_count, 1)
        self.feed = nn.Conv2d(fused + config.joint_count, in_channels, 1)
        self._skeleton = graph_mod.build_hand_skeleton()

    def forward(self, x, gt=None, visible=None):
        """Return (input for the next stage, this stage's heatmaps).

        ``gt`` (B, K, 2 in heatmap grid units) switches on training
        behavior: the heatmaps forwarded to the next stage are rescaled by
        each joint's share of this stage's position error. The returned
        heatmaps are always the pre-rescale stack.
        """
        cfg = self.config
        psis = [branch(x) for branch in self.branches]
        fused = fuse_branch_maps(*psis)
        mixed = transpose_mix(fused, enabled=cfg.use_transpose)
        attended = channel_gate(mixed) if cfg.use_attention else mixed
        maps = normalize_unit_range(self.head(attended))
        if cfg.use_aomr:
            maps = graph_mod.mutual_reinforce(maps, self._skeleton)
        feed_maps = maps
        if cfg.use_aomr and gt is not None:
            feed_maps = maps * self._reweight(maps, gt, visible)
        nxt = self.feed(torch.cat([attended, feed_maps], dim=1))
        return nxt, maps

    def _reweight(self, maps, gt, visible):
        # Scale factors depend on params only through argmax locations, so
        # they are treated as constants (no gradient path).
        with torch.no_grad():
            pred = _decode_grid(maps).to(torch.float64).cpu().numpy()
        gt_np = np.asarray(gt.detach().cpu().numpy() if torch.is_tensor(gt) else gt)
        if visible is None:
            vis_np = np.ones(gt_np.shape[:-1], dtype=bool)
        else:
            vis_np = np.asarray(
                visible.detach().cpu().numpy() if torch.is_tensor(visible) else visible
            ).astype(bool)
        scales = np.stack(
            [
                graph_mod.reweight_scales(pred[b], gt_np[b], vis_np[b])
                for b in range(pred.shape[0])
            ]
        )
        return torch.as_tensor(scales, dtype=maps.dtype, device=maps.device)[
            :, :, None, None
        ]


class HandJointNet(nn.Module):
    """Feature extractor plus N chained fusion stages."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self._act = _act_fn(config)
        if config.use_sshfr:
            self.sshfr = SSHFR(config)
        else:
            # Ablation stem: one stride-4 projection straight to trunk width.
            self.stem_proj = _conv(3, TRUNK_CHANNELS, 5, stride=4)
        self.msffs = nn.ModuleList(MSFF(config) for _ in range(config.num_msff))

    def stem(self, x):
        if self.config.use_sshfr:
            return self.sshfr(x)
        return self._act(self.stem_proj(x))

    def forward(self, crop, gt=None, visible=None):
        """Run all stages; returns every stage's heatmap stack (list of N tensors)."""
        s = self.config.crop_size
        if crop.shape[-3:] != (3, s, s):
            raise ContractViolation(
                f"expected crop of shape (3, {s}, {s}), got {tuple(crop.shape[-3:])}"
            )
        x = self.stem(crop)
        stacks = []
        for msff in self.msffs:
            x, maps = msff(x, gt=gt, visible=visible)
            stacks.append(maps)
        return stacks


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Draw fresh parameters: fan-in-scaled zero-mean normals, zero biases."""
    config.validate()
    net = HandJointNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for param in net.parameters():
            if param.dim() > 1:
                fan_in = param.shape[1:].numel()
                param.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            else:
                param.zero_()
    return {name: p.detach().numpy().copy() for name, p in net.named_parameters()}


def load_params(net: nn.Module, params: Mapping[str, np.ndarray], prefix: str = ""):
    """Load a flat name->array mapping into ``net``, optionally stripping a prefix."""
    if prefix:
        subset = {
            k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)
        }
    else:
        subset = dict(params)
    dtype = next(net.parameters()).dtype
    tensors = {k: torch.as_tensor(np.asarray(v), dtype=dtype) for k, v in subset.items()}
    try:
        net.load_state_dict(tensors)
    except RuntimeError as exc:
        raise ConfigError(f"parameters do not match model config: {exc}") from exc
    return net


def parameter_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def build_net(config: ModelConfig, params: Optional[Mapping[str, np.ndarray]] = None,
              dtype: torch.dtype = torch.float32) -> HandJointNet:
    """Construct a network, optionally loading parameters, in the given dtype."""
    net = HandJointNet(config).to(dtype)
    if params is not None:
        load_params(net, params)
    net.eval()
    return net


# ---------------------------------------------------------------------------
# Functional single-sample operations (numpy in, numpy out).
# ---------------------------------------------------------------------------


def _as_batched_tensor(arr, dtype=torch.float32):
    return torch.as_tensor(np.asarray(arr), dtype=dtype).unsqueeze(0)


def sshfr_forward(crop: np.ndarray, params: Mapping[str, np.ndarray],
                  config: ModelConfig) -> np.ndarray:
    """Shallow features for one crop: (3, S, S) -> (256, S/4, S/4)."""
    config.validate()
    if not config.use_sshfr:
        raise ConfigError("use_sshfr: disabled in this config")
    crop = np.asarray(crop)
    s = config.crop_size
    if crop.shape != (3, s, s):
        raise ContractViolation(f"expected crop (3, {s}, {s}), got {crop.shape}")
    net = SSHFR(config)
    load_params(net, params, prefix="sshfr.")
    with torch.no_grad():
        out = net(_as_batched_tensor(crop))
    return out.squeeze(0).numpy()


def branch_forward(inputs: np.ndarray, branch_index: int,
                   params: Mapping[str, np.ndarray], config: ModelConfig,
                   stage: int = 0) -> np.ndarray:
    """Run one multi-scale branch of one stage on a trunk feature volume."""
    config.validate()
    if branch_index not in (1, 2, 3):
        raise ContractViolation(f"branch index must be 1, 2 or 3, got {branch_index}")
    net = _Branch(branch_index, TRUNK_CHANNELS, config)
    load_params(net, params, prefix=f"msffs.{stage}.branches.{branch_index - 1}.")
    with torch.no_grad():
        out = net(_as_batched_tensor(inputs))
    return out.squeeze(0).numpy()


def fuse_transpose(psi1: np.ndarray, psi2: np.ndarray, psi3: np.ndarray,
                   config: ModelConfig) -> np.ndarray:
    """Fuse three branch volumes into the 6C-channel mixed volume."""
    t1, t2, t3 = (_as_batched_tensor(p) for p in (psi1, psi2, psi3))
    fused = fuse_branch_maps(t1, t2, t3)
    return transpose_mix(fused, enabled=config.use_transpose).squeeze(0).numpy()


def channel_attention(volume: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Parameter-free channel gate; identity when attention is ablated."""
    if not config.use_attention:
        return np.asarray(volume).copy()
    return channel_gate(_as_batched_tensor(volume)).squeeze(0).numpy()


def heatmap_head(volume: np.ndarray, params: Mapping[str, np.ndarray],
                 config: ModelConfig, stage: int = 0) -> np.ndarray:
    """1x1-project a fused volume to K maps and min-max normalize each."""
    head = nn.Conv2d(6 * config.branch_channels, config.joint_count, 1)
    load_params(head, params, prefix=f"msffs.{stage}.head.")
    with torch.no_grad():
        out = normalize_unit_range(head(_as_batched_tensor(volume)))
    return out.squeeze(0).numpy()


def msff_forward(inputs: np.ndarray, stage: int, params: Mapping[str, np.ndarray],
                 config: ModelConfig, gt_joints: Optional[np.ndarray] = None,
                 visible: Optional[np.ndarray] = None):
    """One full fusion stage. Returns (next stage input, heatmap stack)."""
    config.validate()
    net = MSFF(config)
    load_params(net, params, prefix=f"msffs.{stage}.")
    gt_t = None if gt_joints is None else _as_batched_tensor(gt_joints)
    vis_t = None if visible is None else _as_batched_tensor(np.asarray(visible, dtype=np.float32))
    with torch.no_grad():
        nxt, maps = net(_as_batched_tensor(inputs), gt=gt_t, visible=vis_t)
    return nxt.squeeze(0).numpy(), maps.squeeze(0).numpy()


def model_forward(crop: np.ndarray, params: Mapping[str, np.ndarray],
                  config: ModelConfig, gt_joints: Optional[np.ndarray] = None,
                  visible: Optional[np.ndarray] = None) -> list[np.ndarray]:
    """Full network on one crop; returns all N heatmap stacks."""
    net = build_net(config, params)
    gt_t = None if gt_joints is None else _as_batched_tensor(gt_joints)
    vis_t = None if visible is None else _as_batched_tensor(np.asarray(visible, dtype=np.float32))
    with torch.no_grad():
        stacks = net(_as_batched_tensor(crop), gt=gt_t, visible=vis_t)
    return [s.squeeze(0).numpy() for s in stacks]


def decode_joints(heatmaps: np.ndarray) -> np.ndarray:
    """Per-map argmax as (x, y); ties resolve to the smallest row-major index."""
    maps = np.asarray(heatmaps)
    k, h, w = maps.shape
    idx = maps.reshape(k, h * w).argmax(axis=1)
    return np.stack([idx % w, idx // w], axis=1).astype(np.float64)
