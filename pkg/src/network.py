"""
HDAN: feature extractor, four attention-guided dense blocks with parallel
transition/upsample branches, attention-refined global fusion and a linear head
"""
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import BadInputShape, InvalidConfig, OddDims, ReductionMismatch

logger = logging.getLogger(__name__)

NUM_STAGES = 4
MIN_DIVISOR = 2 ** NUM_STAGES
GATE_EPS = 1e-6

ABLATION_FLAGS = {
    'dense_up': 'enable_dense_up',
    'ca': 'enable_ca',
    'sa': 'enable_sa',
}

# rows of the ablation study: (dense_up, ca, sa)
ABLATION_PRESETS = {
    'baseline': (False, False, False),
    'dense_up_only': (True, False, False),
    'dense_up_sa': (True, False, True),
    'dense_up_ca': (True, True, False),
    'full': (True, True, True),
}


@dataclass(frozen=True)
class NetworkConfig:
    in_modalities: int = 2
    num_classes: int = 4
    extractor_channels: int = 32
    growth_rate: int = 16
    units_per_block: int = 4
    transition_channels: int = 64
    upsample_channels: int = 16
    ca_reduction: int = 8
    sa_kernel: int = 7
    enable_dense_up: bool = True
    enable_ca: bool = True
    enable_sa: bool = True

    @classmethod
    def tiny(cls, **overrides) -> 'NetworkConfig':
        """Scaled-down widths for CPU tests"""
        base = dict(extractor_channels=8, growth_rate=4, transition_channels=16,
                    upsample_channels=8, ca_reduction=4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'NetworkConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidConfig(f"Unknown network settings: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def stage_channels(self) -> int:
        return self.transition_channels + self.units_per_block * self.growth_rate

    @property
    def fused_channels(self) -> int:
        branches = NUM_STAGES if self.enable_dense_up else 1
        return self.extractor_channels + branches * self.upsample_channels

    def ablate(self, *components: str) -> 'NetworkConfig':
        """Switch off components by short name (dense_up, ca, sa)"""
        changes = {}
        for name in components:
            if name not in ABLATION_FLAGS:
                raise InvalidConfig(f"Unknown ablation {name!r}; choose from {sorted(ABLATION_FLAGS)}")
            changes[ABLATION_FLAGS[name]] = False
        return replace(self, **changes)

    def with_preset(self, preset: str) -> 'NetworkConfig':
        if preset not in ABLATION_PRESETS:
            raise InvalidConfig(f"Unknown preset {preset!r}; choose from {sorted(ABLATION_PRESETS)}")
        dense_up, ca, sa = ABLATION_PRESETS[preset]
        return replace(self, enable_dense_up=dense_up, enable_ca=ca, enable_sa=sa)

    def validate(self) -> None:
        positive = ('in_modalities', 'extractor_channels', 'growth_rate', 'units_per_block',
                    'transition_channels', 'upsample_channels', 'ca_reduction', 'sa_kernel')
        for name in positive:
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if self.sa_kernel % 2 == 0:
            raise InvalidConfig(f"sa_kernel must be odd, got {self.sa_kernel}")
        for site, channels in (('feature extractor', self.extractor_channels), ('dense stages', self.stage_channels)):
            if channels % self.ca_reduction:
                raise ReductionMismatch(
                    f"ca_reduction {self.ca_reduction} does not divide {channels} channels at the {site}")


@dataclass
class ProbabilityMap:
    """Per-voxel class distributions, class axis first (C x D x H x W)"""
    probs: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.probs, axis=0).astype(np.uint8)


@dataclass
class ForwardTrace:
    phi0: torch.Tensor
    t: List[Optional[torch.Tensor]]
    x_hat: List[torch.Tensor]
    u: List[Optional[torch.Tensor]]
    r: torch.Tensor
    logits: torch.Tensor
    # keyed by attention site: 0 is the extractor branch, 1..4 the dense stages
    channel_maps: Dict[int, torch.Tensor] = field(default_factory=dict)
    spatial_maps: Dict[int, torch.Tensor] = field(default_factory=dict)


def gate(z: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(z).clamp(GATE_EPS, 1.0 - GATE_EPS)


def order_invariant_mean(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Mean over sorted values, bit-identical under any permutation along `dim`"""
    return torch.sort(x, dim=dim).values.mean(dim=dim)


class ConvNormAct(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, activation: bool = True):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size, stride=stride, padding=padding)
        self.norm = nn.BatchNorm3d(out_channels)
        self.act = nn.ReLU(inplace=True) if activation else None

    def forward(self, x):
        x = self.norm(self.conv(x))
        return self.act(x) if self.act is not None else x


class FeatureExtractor(nn.Module):
    """Two 3x3x3 conv-norm-act layers with a projected residual skip"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = ConvNormAct(in_channels, out_channels, 3, padding=1)
        self.conv2 = ConvNormAct(out_channels, out_channels, 3, padding=1, activation=False)
        self.skip = ConvNormAct(in_channels, out_channels, 1, activation=False)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.conv2(self.conv1(x)) + self.skip(x))


class DenseUnit(nn.Module):
    def __init__(self, in_channels: int, growth_rate: int):
        super().__init__()
        self.bottleneck = ConvNormAct(in_channels, 4 * growth_rate, 1)
        self.conv = ConvNormAct(4 * growth_rate, growth_rate, 3, padding=1)

    def forward(self, x):
        return self.conv(self.bottleneck(x))


class DenseBlock(nn.Module):
    def __init__(self, in_channels: int, growth_rate: int, num_units: int):
        super().__init__()
        self.units = nn.ModuleList(
            DenseUnit(in_channels + i * growth_rate, growth_rate) for i in range(num_units))

    def forward(self, x):
        features = [x]
        for unit in self.units:
            features.append(unit(torch.cat(features, dim=1)))
        return torch.cat(features, dim=1)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ReductionMismatch(f"ca_reduction {reduction} does not divide {channels} channels")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, feat):
        pooled = order_invariant_mean(feat.flatten(2), dim=2)
        return gate(self.fc2(F.relu(self.fc1(pooled))))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, feat):
        descriptors = torch.cat([
            feat.amax(dim=1, keepdim=True),
            order_invariant_mean(feat, dim=1).unsqueeze(1),
        ], dim=1)
        return gate(self.conv(descriptors))


class AttentionModule(nn.Module):
    """Sequential channel then spatial gating: F_c = M_c * F, X = M_s(F_c) * F_c"""

    def __init__(self, channels: int, cfg: NetworkConfig):
        super().__init__()
        self.channel = ChannelAttention(channels, cfg.ca_reduction)
        self.spatial = SpatialAttention(cfg.sa_kernel)
        self.enable_ca = cfg.enable_ca
        self.enable_sa = cfg.enable_sa

    def refine(self, feat) -> Tuple[torch.Tensor, Optional[torch.Tensor], Optional[torch.Tensor]]:
        m_c = m_s = None
        if self.enable_ca:
            m_c = self.channel(feat)
            feat = feat * m_c[:, :, None, None, None]
        if self.enable_sa:
            m_s = self.spatial(feat)
            feat = feat * m_s
        return feat, m_c, m_s

    def forward(self, feat):
        return self.refine(feat)[0]


class Transition(nn.Module):
    """1x1x1 channel projection followed by a 2x2x2 stride-2 downsampling layer"""

    def __init__(self, in_channels: int, out_channels: int, ceil_mode: bool = False):
        super().__init__()
        self.project = ConvNormAct(in_channels, out_channels, 1)
        self.down = ConvNormAct(out_channels, out_channels, 2, stride=2)
        self.ceil_mode = ceil_mode

    def forward(self, x):
        odd = [d % 2 for d in x.shape[2:]]
        if any(odd):
            if not self.ceil_mode:
                raise OddDims(f"Transition input needs even spatial dims, got {tuple(x.shape[2:])}")
            # F.pad takes (W, H, D) pairs, last axis first
            x = F.pad(x, (0, odd[2], 0, odd[1], 0, odd[0]))
        return self.down(self.project(x))


class Upsample(nn.Module):
    """Transpose convolution back to full resolution (kernel = stride = 2^k)"""

    def __init__(self, in_channels: int, out_channels: int, scale: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=scale, stride=scale)
        self.norm = nn.BatchNorm3d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.up(x)))


class Stage(nn.Module):
    def __init__(self, k: int, cfg: NetworkConfig):
        super().__init__()
        self.block = DenseBlock(cfg.transition_channels, cfg.growth_rate, cfg.units_per_block)
        self.attention = AttentionModule(cfg.stage_channels, cfg)
        self.transition = Transition(cfg.stage_channels, cfg.transition_channels,
                                     ceil_mode=(k == NUM_STAGES))
        self.upsample = Upsample(cfg.stage_channels, cfg.upsample_channels, 2 ** k)


class HDAN(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg.in_modalities, cfg.extractor_channels)
        self.attention0 = AttentionModule(cfg.extractor_channels, cfg)
        self.transition0 = Transition(cfg.extractor_channels, cfg.transition_channels)
        self.stages = nn.ModuleList(Stage(k, cfg) for k in range(1, NUM_STAGES + 1))
        self.head = nn.Conv3d(cfg.fused_channels, cfg.num_classes, kernel_size=1)

    def _stage(self, k: int) -> Stage:
        if not 1 <= k <= NUM_STAGES:
            raise InvalidConfig(f"Stage must be in 1..{NUM_STAGES}, got {k}")
        return self.stages[k - 1]

    def _attention(self, k: int) -> AttentionModule:
        return self.attention0 if k == 0 else self._stage(k).attention

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 5 or x.shape[1] != self.cfg.in_modalities:
            raise BadInputShape(
                f"Expected N x {self.cfg.in_modalities} x D x H x W input, got {tuple(x.shape)}")
        spatial = tuple(x.shape[2:])
        if any(d < MIN_DIVISOR or d % MIN_DIVISOR for d in spatial):
            raise BadInputShape(f"Spatial dims {spatial} must each be >= {MIN_DIVISOR} and divisible by it")

    def feature_extract(self, x):
        self.check_input(x)
        return self.extractor(x)

    def conv_block(self, k: int, t_prev):
        return self._stage(k).block(t_prev)

    def channel_attention(self, k: int, feat):
        return self._attention(k).channel(feat)

    def spatial_attention(self, k: int, feat):
        return self._attention(k).spatial(feat)

    def attention_refine(self, k: int, feat):
        return self._attention(k).refine(feat)[0]

    def transition(self, k: int, feat):
        module = self.transition0 if k == 0 else self._stage(k).transition
        return module(feat)

    def upsample_stage(self, k: int, x_hat):
        return self._stage(k).upsample(x_hat)

    def forward_with_trace(self, x, trace: bool = True) -> Tuple[torch.Tensor, Optional[ForwardTrace]]:
        phi0 = self.feature_extract(x)
        a0, m_c, m_s = self.attention0.refine(phi0)
        channel_maps, spatial_maps = {}, {}
        if trace:
            _record(channel_maps, spatial_maps, 0, m_c, m_s)

        t = [self.transition0(phi0)]
        x_hats, u = [], []
        for k, stage in enumerate(self.stages, start=1):
            x_hat, m_c, m_s = stage.attention.refine(stage.block(t[-1]))
            x_hats.append(x_hat)
            if trace:
                _record(channel_maps, spatial_maps, k, m_c, m_s)
            # T_4 feeds no later stage; only computed for the trace
            if k < NUM_STAGES or trace:
                t.append(stage.transition(x_hat))
            if self.cfg.enable_dense_up or k == NUM_STAGES:
                u.append(stage.upsample(x_hat))
            else:
                u.append(None)

        r = torch.cat([a0] + [branch for branch in u if branch is not None], dim=1)
        logits = self.head(r)
        probs = torch.softmax(logits, dim=1)
        if not trace:
            return probs, None
        return probs, ForwardTrace(phi0=phi0, t=t, x_hat=x_hats, u=u, r=r, logits=logits,
                                   channel_maps=channel_maps, spatial_maps=spatial_maps)

    def forward(self, x):
        return self.forward_with_trace(x, trace=False)[0]


def _record(channel_maps, spatial_maps, k, m_c, m_s) -> None:
    if m_c is not None:
        channel_maps[k] = m_c
    if m_s is not None:
        spatial_maps[k] = m_s


def initialize_weights(module: nn.Module) -> None:
    """Kaiming-uniform (fan-in, ReLU gain) weights, zero biases, identity norms"""
    if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
        nn.init.kaiming_uniform_(module.weight, a=0, mode='fan_in', nonlinearity='relu')
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm3d):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
        module.reset_running_stats()


def build_network(cfg: NetworkConfig, seed: int = 0) -> HDAN:
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = HDAN(cfg)
        net.apply(initialize_weights)
    logger.debug("Built HDAN with %d parameters (seed %d)", count_parameters(cfg), seed)
    return net


def count_parameters(cfg: NetworkConfig) -> int:
    """Closed-form parameter count; matches sum(p.numel()) of build_network(cfg)"""
    def conv_norm(cin, cout, k):
        return cin * cout * k ** 3 + cout + 2 * cout

    def attention(channels):
        hidden = channels // cfg.ca_reduction
        fc = channels * hidden + hidden + hidden * channels + channels
        return fc + 2 * cfg.sa_kernel ** 3 + 1

    def transition(cin):
        return conv_norm(cin, cfg.transition_channels, 1) + conv_norm(cfg.transition_channels,
                                                                      cfg.transition_channels, 2)

    g, e = cfg.growth_rate, cfg.extractor_channels
    extractor = conv_norm(cfg.in_modalities, e, 3) + conv_norm(e, e, 3) + conv_norm(cfg.in_modalities, e, 1)
    block = sum(conv_norm(cfg.transition_channels + i * g, 4 * g, 1) + conv_norm(4 * g, g, 3)
                for i in range(cfg.units_per_block))
    stage = block + attention(cfg.stage_channels) + transition(cfg.stage_channels)
    upsample = sum(cfg.stage_channels * cfg.upsample_channels * 8 ** k + 3 * cfg.upsample_channels
                   for k in range(1, NUM_STAGES + 1))
    head = cfg.fused_channels * cfg.num_classes + cfg.num_classes
    return extractor + attention(e) + transition(e) + NUM_STAGES * stage + upsample + head


def volume_to_tensor(data: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """M x D x H x W array -> 1 x M x D x H x W tensor"""
    return torch.from_numpy(np.ascontiguousarray(data)).to(dtype).unsqueeze(0)


def forward(net: HDAN, volume) -> Tuple[ProbabilityMap, ForwardTrace]:
    """Run one patch-sized MultiModalVolume through the network in inference mode"""
    if volume.num_modalities != net.cfg.in_modalities:
        raise BadInputShape(
            f"Network expects {net.cfg.in_modalities} modalities, volume has {volume.num_modalities}")
    net.eval()
    with torch.no_grad():
        probs, trace = net.forward_with_trace(volume_to_tensor(volume.data))
    return ProbabilityMap(probs=probs[0].numpy(), spacing=volume.spacing), trace
