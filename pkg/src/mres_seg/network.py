"""Dual-branch multi-resolution UNet with a pixel-aligned merge block."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteActivationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 3
    stages: int = 4
    base_channels: int = 16
    level_pair: tuple = (1, 3)
    merge_at: int | None = None  # default: stages - 1
    fusion: bool = True
    low_tap: str = "decoder"  # or "encoder"
    dual: bool = True
    patch_size: int = 512
    norm_groups: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "level_pair", tuple(self.level_pair))
        if self.merge_at is None:
            object.__setattr__(self, "merge_at", self.stages - 1)
        if not 1 <= self.merge_at <= self.stages - 1:
            raise ValueError(f"merge_at must lie in [1, {self.stages - 1}], got {self.merge_at}")
        if self.ratio not in (2, 4, 8):
            raise ValueError(f"level ratio must be 2, 4 or 8, got {self.ratio}")
        if self.low_tap not in ("decoder", "encoder"):
            raise ValueError(f"low_tap must be 'decoder' or 'encoder', got {self.low_tap!r}")
        if self.patch_size % 2**self.stages or self.patch_size // 2**self.stages < 4:
            raise ValueError(
                f"patch {self.patch_size} with {self.stages} stages leaves a bottleneck "
                f"below 4 px"
            )
        if self.dual and self.merge_grid < self.ratio:
            raise ValueError("merge grid smaller than the level ratio")

    @property
    def ratio(self):
        return 2 ** (self.level_pair[1] - self.level_pair[0])

    @property
    def merge_grid(self):
        return self.patch_size // 2**self.merge_at

    def channels(self, stage):
        return self.base_channels * 2**stage

    def to_dict(self):
        return dataclasses.asdict(self)


def _norm(ch, groups):
    return nn.GroupNorm(math.gcd(groups, ch), ch)


class ConvBlock(nn.Module):
    """Two 3x3 conv + GroupNorm + ReLU."""

    def __init__(self, cin, cout, groups):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(cout, groups)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class UpBlock(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.conv = ConvBlock(2 * cout, cout, groups)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class UNetBranch(nn.Module):
    """Plain UNet; stage ``i`` runs at 1/2**i resolution with base*2**i channels."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.depth = cfg.stages
        g = cfg.norm_groups
        for i in range(cfg.stages + 1):
            cin = 3 if i == 0 else cfg.channels(i - 1)
            setattr(self, f"enc{i}", ConvBlock(cin, cfg.channels(i), g))
        for i in range(cfg.stages - 1, -1, -1):
            setattr(self, f"dec{i}", UpBlock(cfg.channels(i + 1), cfg.channels(i), g))
        self.head = nn.Conv2d(cfg.channels(0), cfg.num_classes, 1)

    def encode(self, x, hook=None, check=None):
        """Encoder features per stage; ``hook(i, feat)`` may replace stage ``i``'s output."""
        feats = []
        for i in range(self.depth + 1):
            if i:
                x = F.max_pool2d(x, 2)
            x = getattr(self, f"enc{i}")(x)
            if hook is not None:
                x = hook(i, x)
            if check:
                check(f"enc{i}", x)
            feats.append(x)
        return feats

    def decode(self, feats, check=None):
        """Returns logits and decoder features indexed by stage."""
        x = feats[-1]
        dec = {self.depth: x}
        for i in range(self.depth - 1, -1, -1):
            x = getattr(self, f"dec{i}")(x, feats[i])
            if check:
                check(f"dec{i}", x)
            dec[i] = x
        return self.head(x), dec


class MergeBlock(nn.Module):
    """Inject low-branch context into a high-branch encoder stage.

    1. Stepwise 1x1 compression of the low map to ``c_high`` channels
       (at least two convs, ReLU between and after).
    2. Pixel alignment: the central ``g/r`` window of the compressed map is
       bilinearly resized onto the high grid; the whole map is also averaged
       into a global-context vector broadcast over the grid, so border
       features still reach the high branch.
    3. Concatenate [high, aligned, context] and compress back with two 1x1
       convs.
    """

    def __init__(self, c_high, c_low, ratio):
        super().__init__()
        self.ratio = ratio
        n = max(2, math.ceil(math.log2(max(c_low / c_high, 1))) + 1)
        widths = [c_low]
        for j in range(n - 1):
            widths.append(max(c_high, c_low // 2 ** (j + 1)))
        widths.append(c_high)
        self.compress = nn.ModuleList(
            nn.Conv2d(widths[j], widths[j + 1], 1) for j in range(n)
        )
        self.post1 = nn.Conv2d(3 * c_high, 2 * c_high, 1)
        self.post2 = nn.Conv2d(2 * c_high, c_high, 1)

    def forward(self, high_feat, low_feat):
        g_h = high_feat.shape[-1]
        g_l = low_feat.shape[-1]
        if high_feat.shape[-2:] != (g_h, g_h) or g_l % self.ratio:
            raise ValueError(
                f"incompatible grids: high {tuple(high_feat.shape)}, low {tuple(low_feat.shape)}"
            )
        x = low_feat
        for conv in self.compress:
            x = F.relu(conv(x))
        win = g_l // self.ratio
        off = (g_l - win) // 2
        center = x[..., off:off + win, off:off + win]
        aligned = F.interpolate(center, size=(g_h, g_h), mode="bilinear", align_corners=False)
        context = x.mean(dim=(-2, -1), keepdim=True).expand(-1, -1, g_h, g_h)
        y = torch.cat([high_feat, aligned, context], dim=1)
        return F.relu(self.post2(F.relu(self.post1(y))))

    @torch.no_grad()
    def identity_init(self):
        """Pass the high features straight through (low contribution zero)."""
        for conv in self.compress:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        c = self.post2.out_channels
        for conv in (self.post1, self.post2):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            conv.weight[:c, :c, 0, 0] = torch.eye(c)


def center_crop_resize(logits, ratio):
    """Central 1/ratio window of ``logits`` resized back to full size (bilinear)."""
    n = logits.shape[-1]
    win = n // ratio
    off = (n - win) // 2
    crop = logits[..., off:off + win, off:off + win]
    return F.interpolate(crop, size=(n, n), mode="bilinear", align_corners=False)


class FusionHead(nn.Module):
    def __init__(self, num_classes, ratio, hidden=None):
        super().__init__()
        self.ratio = ratio
        hidden = hidden or 4 * num_classes
        self.conv1 = nn.Conv2d(2 * num_classes, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, num_classes, 1)

    def forward(self, high_logits, low_logits):
        low = center_crop_resize(low_logits, self.ratio)
        x = torch.cat([high_logits, low], dim=1)
        return self.conv2(F.relu(self.conv1(x)))

    @torch.no_grad()
    def identity_sum_init(self):
        """fused = high + low_crop, up to the ReLU (split into +/- parts)."""
        c = self.conv2.out_channels
        if self.conv1.out_channels < 2 * c:
            raise ValueError("identity-sum init needs at least 2*num_classes hidden channels")
        w1 = torch.zeros_like(self.conv1.weight)
        eye = torch.eye(c)
        # hidden = [relu(h+l), relu(-(h+l))]; out = first - second = h + l
        w1[:c, :c, 0, 0] = eye
        w1[:c, c:2 * c, 0, 0] = eye
        w1[c:2 * c, :c, 0, 0] = -eye
        w1[c:2 * c, c:2 * c, 0, 0] = -eye
        self.conv1.weight.copy_(w1)
        nn.init.zeros_(self.conv1.bias)
        w2 = torch.zeros_like(self.conv2.weight)
        w2[:, :c, 0, 0] = eye
        w2[:, c:2 * c, 0, 0] = -eye
        self.conv2.weight.copy_(w2)
        nn.init.zeros_(self.conv2.bias)


class MultiResUNet(nn.Module):
    """High/low UNet pair, one merge into the high encoder, fused output head.

    With ``dual=False`` only the high branch exists (single-resolution baseline)
    and its logits double as the fused output.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        names = ("high", "low") if cfg.dual else ("high",)
        self.branch = nn.ModuleDict({n: UNetBranch(cfg) for n in names})
        if cfg.dual:
            c = cfg.channels(cfg.merge_at)
            self.merge = MergeBlock(c, c, cfg.ratio)
            if cfg.fusion:
                self.fusion = FusionHead(cfg.num_classes, cfg.ratio)
        self.check_finite = True

    def _check(self, name, x):
        if not torch.isfinite(x).all():
            raise NonFiniteActivationError(f"non-finite activation in {name}")

    def forward_logits(self, high, low=None):
        cfg = self.config
        check = self._check if self.check_finite else None
        hb = self.branch["high"]
        out = {}
        if not cfg.dual:
            logits, _ = hb.decode(hb.encode(high, check=check), check=check)
            return {"high": logits, "fused": logits}
        lb = self.branch["low"]
        lfeats = lb.encode(low, check=check)
        low_logits, ldec = lb.decode(lfeats, check=check)
        tap = ldec[cfg.merge_at] if cfg.low_tap == "decoder" else lfeats[cfg.merge_at]

        def hook(i, x):
            return self.merge(x, tap) if i == cfg.merge_at else x

        hfeats = hb.encode(high, hook=hook, check=check)
        high_logits, _ = hb.decode(hfeats, check=check)
        out["high"] = high_logits
        out["low"] = low_logits
        if cfg.fusion:
            out["fused"] = self.fusion(high_logits, low_logits)
            if check:
                check("fusion", out["fused"])
        else:
            out["fused"] = high_logits
        return out

    def forward(self, high, low=None):
        """Softmax probabilities per head: ``high``, ``low`` (dual only) and ``fused``."""
        return {k: torch.softmax(v, dim=1) for k, v in self.forward_logits(high, low).items()}

    @property
    def heads(self):
        return ("high", "low", "fused") if self.config.dual else ("fused",)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def build_network(config: NetworkConfig) -> MultiResUNet:
    """Build with weights drawn from ``config.seed`` (same seed, same weights)."""
    state = torch.random.get_rng_state()
    torch.manual_seed(config.seed)
    try:
        net = MultiResUNet(config)
    finally:
        torch.random.set_rng_state(state)
    return net


def conv_parameter_count(config: NetworkConfig):
    """Closed-form count of UNet-branch parameters (weights + biases, with norms)."""
    c = config.channels
    k = config.num_classes

    def block(cin, cout):
        return cin * cout * 9 + cout + cout * cout * 9 + cout + 4 * cout

    total = 0
    for i in range(config.stages + 1):
        total += block(3 if i == 0 else c(i - 1), c(i))
    for i in range(config.stages):
        total += c(i + 1) * c(i) * 4 + c(i)
        total += block(2 * c(i), c(i))
    total += c(0) * k + k
    return total


def to_tensor(images, dtype=torch.float32):
    """uint8 NHWC (or HWC) array -> float NCHW in [0, 1]."""
    t = torch.as_tensor(images)
    if t.ndim == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2).to(dtype) / 255.0


def save_checkpoint(net: MultiResUNet, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"config": net.config.to_dict(), "state_dict": net.state_dict(),
                "extra": extra or {}}, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    net = MultiResUNet(NetworkConfig(**blob["config"]))
    net.load_state_dict(blob["state_dict"])
    return net, blob.get("extra", {})
