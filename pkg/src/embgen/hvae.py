"""Deep hierarchical VAE over fixed-dimensional embedding vectors.

The latent space is an ordered sequence of groups, coarse to fine. A
bottom-up encoder tower produces features at every level; a top-down decoder
walks the groups, emitting each group's conditional prior from the current
decoder state, merging encoder information into a residual posterior, and
injecting the group sample back into the state. The first group's prior is a
standard normal; the observation model is a diagonal Gaussian with a learned
per-feature log-variance over the normalized [-1, 1] input space.

Two backbones implement the tower:

* ``conv``: the input vector is a 1-channel sequence; levels live at
  progressively halved resolutions (stride-2 down, nearest-neighbor up), with
  1D-convolutional residual cells.
* ``mlp``: affine residual cells with no resolution ladder, for input
  dimensions too small to downsample.

All state-changing randomness flows through explicit generators or noise
arguments, so every operation here is deterministic given its inputs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericalError, ParseError, ValidationError
from .store import NormalizationStats

LOGVAR_MIN = -8.0
LOGVAR_MAX = 4.0
CHECKPOINT_MAGIC = b"HVCK0001"
CHECKPOINT_FORMAT = "hvae-checkpoint-v1"


@dataclass(frozen=True)
class LatentHierarchySpec:
    """Hierarchy layout: levels x groups_per_level groups of dims_per_group latents."""

    levels: int
    groups_per_level: int
    dims_per_group: int
    hidden_size: int
    input_dim: int
    backbone: str = "auto"  # auto | conv | mlp

    def __post_init__(self):
        for name in ("levels", "groups_per_level", "dims_per_group", "hidden_size", "input_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"spec field {name} must be >= 1")
        if self.backbone not in ("auto", "conv", "mlp"):
            raise ValidationError(f"unknown backbone {self.backbone!r}")

    @property
    def total_groups(self) -> int:
        return self.levels * self.groups_per_level

    @property
    def total_latent_dims(self) -> int:
        return self.total_groups * self.dims_per_group

    def resolved_backbone(self) -> str:
        if self.backbone != "auto":
            return self.backbone
        stride_total = 2 ** (self.levels - 1)
        if self.input_dim % stride_total == 0 and self.input_dim // stride_total >= 4:
            return "conv"
        return "mlp"

    def to_json(self) -> dict:
        return {
            "levels": self.levels,
            "groups_per_level": self.groups_per_level,
            "dims_per_group": self.dims_per_group,
            "hidden_size": self.hidden_size,
            "input_dim": self.input_dim,
            "backbone": self.backbone,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LatentHierarchySpec":
        return cls(**obj)


@dataclass(frozen=True)
class GroupGaussian:
    """Diagonal Gaussian over one latent group; logvar clamped at construction."""

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValidationError("mean and logvar must share a shape")
        object.__setattr__(self, "logvar", torch.clamp(self.logvar, LOGVAR_MIN, LOGVAR_MAX))

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


@dataclass
class ElboBreakdown:
    """Single-estimate ELBO terms; tensors stay attached for backprop."""

    recon_loglik: torch.Tensor  # scalar, batch-averaged
    kl_per_group: torch.Tensor  # (L,), pre-clamp, batch-averaged
    kl_clamped_per_group: torch.Tensor  # (L,), after the free-bits floor
    beta: float
    total_loss: torch.Tensor  # scalar: -recon + beta * sum(kl_clamped)

    def to_record(self) -> dict:
        return {
            "recon_loglik": self.recon_loglik.item(),
            "kl_per_group": self.kl_per_group.detach().tolist(),
            "kl_clamped_per_group": self.kl_clamped_per_group.detach().tolist(),
            "beta": self.beta,
            "total_loss": self.total_loss.item(),
        }


class _ResidualConvCell(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)

    def forward(self, s):
        h = self.conv2(F.silu(self.conv1(F.silu(s))))
        return s + 0.1 * h


class _ResidualMlpCell(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, s):
        h = self.fc2(F.silu(self.fc1(F.silu(s))))
        return s + 0.1 * h


class _ConvBackbone(nn.Module):
    """Multi-resolution 1D tower; level j lives at input_dim >> (levels-1-j)."""

    def __init__(self, spec: LatentHierarchySpec):
        super().__init__()
        self.levels = spec.levels
        self.base_resolution = spec.input_dim // 2 ** (spec.levels - 1)
        if spec.input_dim % 2 ** (spec.levels - 1) != 0 or self.base_resolution < 4:
            raise ValidationError(
                f"input_dim {spec.input_dim} cannot be halved {spec.levels - 1} times; "
                "use the mlp backbone"
            )
        h = spec.hidden_size
        self.stem = nn.Conv1d(1, h, 3, padding=1)
        self.enc_cells = nn.ModuleList(_ResidualConvCell(h) for _ in range(spec.levels))
        self.enc_down = nn.ModuleList(
            nn.Conv1d(h, h, 3, stride=2, padding=1) for _ in range(spec.levels - 1)
        )
        self.start = nn.Parameter(torch.zeros(h, self.base_resolution))
        self.dec_cells = nn.ModuleList(_ResidualConvCell(h) for _ in range(spec.total_groups))
        self.dec_up = nn.ModuleList(nn.Conv1d(h, h, 3, padding=1) for _ in range(spec.levels - 1))
        self.out_conv = nn.Conv1d(h, 1, 3, padding=1)

    def encode_features(self, x):
        s = self.stem(x.unsqueeze(1))
        feats = [None] * self.levels
        for j in reversed(range(self.levels)):
            s = self.enc_cells[j](s)
            feats[j] = s
            if j > 0:
                s = self.enc_down[j - 1](s)
        return feats

    def initial_state(self, batch: int):
        return self.start.unsqueeze(0).expand(batch, -1, -1)

    def pool(self, s):
        return s.mean(dim=2)

    def inject(self, s, v):
        return s + v.unsqueeze(-1)

    def upsample(self, level: int, s):
        s = F.interpolate(s, scale_factor=2, mode="nearest")
        return self.dec_up[level](s)

    def output(self, s):
        return torch.tanh(self.out_conv(F.silu(s))).squeeze(1)


class _MlpBackbone(nn.Module):
    """Affine-residual tower; no resolution ladder."""

    def __init__(self, spec: LatentHierarchySpec):
        super().__init__()
        self.levels = spec.levels
        h = spec.hidden_size
        self.stem = nn.Linear(spec.input_dim, h)
        self.enc_cells = nn.ModuleList(_ResidualMlpCell(h) for _ in range(spec.levels))
        self.enc_down = nn.ModuleList(_ResidualMlpCell(h) for _ in range(spec.levels - 1))
        self.start = nn.Parameter(torch.zeros(h))
        self.dec_cells = nn.ModuleList(_ResidualMlpCell(h) for _ in range(spec.total_groups))
        self.dec_up = nn.ModuleList(_ResidualMlpCell(h) for _ in range(spec.levels - 1))
        self.out_fc = nn.Linear(h, spec.input_dim)

    def encode_features(self, x):
        s = self.stem(x)
        feats = [None] * self.levels
        for j in reversed(range(self.levels)):
            s = self.enc_cells[j](s)
            feats[j] = s
            if j > 0:
                s = self.enc_down[j - 1](s)
        return feats

    def initial_state(self, batch: int):
        return self.start.unsqueeze(0).expand(batch, -1)

    def pool(self, s):
        return s

    def inject(self, s, v):
        return s + v

    def upsample(self, level: int, s):
        return self.dec_up[level](s)

    def output(self, s):
        return torch.tanh(self.out_fc(F.silu(s)))


class HvaeNet(nn.Module):
    """Parameter container and top-down machinery shared by all operations."""

    def __init__(self, spec: LatentHierarchySpec):
        super().__init__()
        self.spec = spec
        kind = spec.resolved_backbone()
        self.backbone = _ConvBackbone(spec) if kind == "conv" else _MlpBackbone(spec)
        h, dz = spec.hidden_size, spec.dims_per_group
        # group 0 keeps the fixed standard-normal prior, hence L-1 prior heads
        self.prior_heads = nn.ModuleList(
            nn.Linear(h, 2 * dz) for _ in range(spec.total_groups - 1)
        )
        self.posterior_heads = nn.ModuleList(
            nn.Linear(2 * h, 2 * dz) for _ in range(spec.total_groups)
        )
        self.injectors = nn.ModuleList(nn.Linear(dz, h) for _ in range(spec.total_groups))
        self.obs_logvar = nn.Parameter(torch.zeros(spec.input_dim))

    def topdown(self, feats=None, noise=None, z_given=None, batch=None):
        """One coarse-to-fine pass.

        feats: encoder features (posterior mode) or None (prior mode).
        noise: per-group standard-normal draws; None means zero noise. In prior
          mode the caller pre-scales noise by the temperature.
        z_given: inject these samples instead of drawing (decode mode).
        Returns (posteriors, priors, samples, x_mean, x_logvar); posteriors is
        None in prior/decode mode.
        """
        spec = self.spec
        if batch is None:
            if feats is not None:
                batch = feats[0].shape[0]
            elif z_given is not None:
                batch = z_given[0].shape[0]
            else:
                batch = noise[0].shape[0]
        s = self.backbone.initial_state(batch)
        dtype, device = s.dtype, s.device
        dz = spec.dims_per_group
        posteriors: list[GroupGaussian] | None = [] if feats is not None else None
        priors: list[GroupGaussian] = []
        samples: list[torch.Tensor] = []
        for l in range(spec.total_groups):
            level = l // spec.groups_per_level
            if l == 0:
                mu_p = torch.zeros(batch, dz, dtype=dtype, device=device)
                logvar_p_raw = torch.zeros(batch, dz, dtype=dtype, device=device)
            else:
                mu_p, logvar_p_raw = self.prior_heads[l - 1](self.backbone.pool(s)).chunk(2, dim=-1)
            prior = GroupGaussian(mu_p, logvar_p_raw)
            priors.append(prior)
            if z_given is not None:
                z = z_given[l]
            elif feats is not None:
                pooled = torch.cat(
                    [self.backbone.pool(feats[level]), self.backbone.pool(s)], dim=-1
                )
                d_mu, d_logvar = self.posterior_heads[l](pooled).chunk(2, dim=-1)
                q = GroupGaussian(mu_p + d_mu, logvar_p_raw + d_logvar)
                posteriors.append(q)
                eps = noise[l] if noise is not None else torch.zeros_like(q.mean)
                z = q.mean + q.std * eps
            else:
                z = prior.mean + prior.std * noise[l]
            samples.append(z)
            s = self.backbone.inject(s, self.injectors[l](z))
            s = self.backbone.dec_cells[l](s)
            if (l + 1) % spec.groups_per_level == 0 and level < spec.levels - 1:
                s = self.backbone.upsample(level, s)
        x_mean = self.backbone.output(s)
        x_logvar = torch.clamp(self.obs_logvar, LOGVAR_MIN, LOGVAR_MAX).expand(batch, -1)
        return posteriors, priors, samples, x_mean, x_logvar


class HvaeModel:
    """A hierarchy spec, its network parameters, and the normalization stats."""

    def __init__(self, spec: LatentHierarchySpec, net: HvaeNet, norm_stats: NormalizationStats):
        if norm_stats.dim != spec.input_dim:
            raise ValidationError("norm_stats dim must equal spec.input_dim")
        self.spec = spec
        self.net = net
        self.norm_stats = norm_stats
        self.trained = False  # set by the trainer or checkpoint loading

    @property
    def dtype(self) -> torch.dtype:
        return self.net.obs_logvar.dtype

    @property
    def obs_logvar(self) -> torch.Tensor:
        return self.net.obs_logvar

    def encoder_parameters(self) -> Iterator[tuple[str, torch.Tensor]]:
        """Bottom-up tower and posterior heads (the inference parameters)."""
        for name, p in self.net.named_parameters():
            if name.startswith(("backbone.stem", "backbone.enc_", "posterior_heads")):
                yield name, p

    def decoder_parameters(self) -> Iterator[tuple[str, torch.Tensor]]:
        """Top-down state, priors, injectors, output head, observation variance."""
        encoder_names = {name for name, _ in self.encoder_parameters()}
        for name, p in self.net.named_parameters():
            if name not in encoder_names:
                yield name, p

    def as_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)


def build_model(
    spec: LatentHierarchySpec,
    seed: int,
    dtype: torch.dtype = torch.float64,
    norm_stats: NormalizationStats | None = None,
) -> HvaeModel:
    """Construct a model with deterministic, seed-keyed initialization.

    Prior and posterior heads start at zero so every posterior coincides with
    its conditional prior (and the priors with the standard normal) at
    initialization; the observation log-variance starts at zero.
    """
    net = HvaeNet(spec).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    zero_prefixes = ("prior_heads", "posterior_heads", "obs_logvar")
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.startswith(zero_prefixes):
                p.zero_()
            elif name.endswith("start"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=dtype))
            elif p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype) / math.sqrt(fan_in))
            else:
                p.zero_()
    stats = norm_stats if norm_stats is not None else NormalizationStats.identity(spec.input_dim)
    return HvaeModel(spec=spec, net=net, norm_stats=stats)


def _as_batch(model: HvaeModel, x) -> tuple[torch.Tensor, bool]:
    t = model.as_tensor(x)
    if t.ndim == 1:
        return t.unsqueeze(0), True
    if t.ndim == 2:
        return t, False
    raise ValidationError(f"expected a vector or a batch of vectors, got ndim={t.ndim}")


def _squeeze_group(g: GroupGaussian, squeeze: bool) -> GroupGaussian:
    if not squeeze:
        return g
    return GroupGaussian(g.mean.squeeze(0), g.logvar.squeeze(0))


def encode(model: HvaeModel, x_norm) -> list[GroupGaussian]:
    """Posterior statistics for every group, coarse to fine; deterministic.

    The top-down merge propagates posterior means (zero noise), so repeated
    calls agree exactly.
    """
    x, squeeze = _as_batch(model, x_norm)
    if x.shape[1] != model.spec.input_dim:
        raise ValidationError(f"input dim {x.shape[1]} != model dim {model.spec.input_dim}")
    with torch.no_grad():
        posteriors, _, _, _, _ = model.net.topdown(feats=model.net.backbone.encode_features(x))
    return [_squeeze_group(q, squeeze) for q in posteriors]


def decode(model: HvaeModel, z: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Observation-model parameters for the given group samples; deterministic."""
    spec = model.spec
    if len(z) != spec.total_groups:
        raise ValidationError(f"expected {spec.total_groups} group samples, got {len(z)}")
    squeeze = False
    zs = []
    for l, zl in enumerate(z):
        t = model.as_tensor(zl)
        if t.ndim == 1:
            t = t.unsqueeze(0)
            squeeze = True
        if t.shape[-1] != spec.dims_per_group:
            raise ValidationError(
                f"group {l} sample has dim {t.shape[-1]}, expected {spec.dims_per_group}"
            )
        zs.append(t)
    with torch.no_grad():
        _, _, _, x_mean, x_logvar = model.net.topdown(z_given=zs)
    if squeeze:
        return x_mean.squeeze(0), x_logvar.squeeze(0)
    return x_mean, x_logvar


def reparameterize(g: GroupGaussian, noise) -> torch.Tensor:
    """mean + exp(logvar / 2) * noise."""
    eps = torch.as_tensor(np.asarray(noise), dtype=g.mean.dtype)
    if eps.shape != g.mean.shape:
        raise ValidationError(f"noise shape {tuple(eps.shape)} != group shape {tuple(g.mean.shape)}")
    return g.mean + g.std * eps


def kl_gaussian(q: GroupGaussian, p: GroupGaussian) -> torch.Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over dimensions."""
    if q.mean.shape != p.mean.shape:
        raise ValidationError("q and p must share a shape")
    diff = q.mean - p.mean
    kl = 0.5 * (
        torch.exp(q.logvar - p.logvar)
        + diff * diff * torch.exp(-p.logvar)
        - 1.0
        + p.logvar
        - q.logvar
    )
    return kl.sum(dim=-1)


def gaussian_loglik(x, mean, logvar) -> torch.Tensor:
    """Diagonal-Gaussian log density, summed over the feature axis."""
    diff = x - mean
    return -0.5 * (math.log(2 * math.pi) + logvar + diff * diff * torch.exp(-logvar)).sum(dim=-1)


def elbo(
    model: HvaeModel,
    x_norm,
    *,
    beta: float = 1.0,
    free_bits_lambda: float = 0.0,
    noise: Sequence[torch.Tensor] | None = None,
    generator: torch.Generator | None = None,
) -> ElboBreakdown:
    """Single-sample reparameterized ELBO estimate with free-bits and warmup.

    ``noise`` fixes the per-group standard-normal draws; ``generator`` seeds
    them. KL terms are averaged over the batch before the free-bits floor, so
    the reported arrays satisfy kl_clamped[l] == max(kl[l], free_bits_lambda)
    exactly and total_loss == -recon + beta * sum(kl_clamped).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValidationError(f"beta must lie in [0, 1], got {beta}")
    if free_bits_lambda < 0.0:
        raise ValidationError("free_bits_lambda must be >= 0")
    x, _ = _as_batch(model, x_norm)
    if x.shape[1] != model.spec.input_dim:
        raise ValidationError(f"input dim {x.shape[1]} != model dim {model.spec.input_dim}")
    spec = model.spec
    if noise is None:
        shape = (x.shape[0], spec.dims_per_group)
        noise = [
            torch.randn(shape, generator=generator, dtype=model.dtype)
            for _ in range(spec.total_groups)
        ]
    else:
        noise = [model.as_tensor(n).reshape(x.shape[0], spec.dims_per_group) for n in noise]
    feats = model.net.backbone.encode_features(x)
    posteriors, priors, _, x_mean, x_logvar = model.net.topdown(feats=feats, noise=noise)
    recon = gaussian_loglik(x, x_mean, x_logvar).mean()
    kl_groups = torch.stack([kl_gaussian(q, p).mean() for q, p in zip(posteriors, priors)])
    kl_clamped = torch.clamp(kl_groups, min=free_bits_lambda)
    total = -recon + beta * kl_clamped.sum()
    if not torch.isfinite(total):
        bad = "recon_loglik" if not torch.isfinite(recon) else "kl"
        if bad == "kl":
            idx = [i for i, v in enumerate(kl_groups) if not torch.isfinite(v)]
            bad = f"kl_per_group{idx}"
        raise NumericalError(f"non-finite ELBO: offending term {bad}")
    return ElboBreakdown(
        recon_loglik=recon,
        kl_per_group=kl_groups,
        kl_clamped_per_group=kl_clamped,
        beta=float(beta),
        total_loss=total,
    )


# ---------------------------------------------------------------------------
# checkpoint container: magic | u32 header length | JSON header | f32 blobs

def save_checkpoint(
    model: HvaeModel,
    path: str | Path,
    free_bits_lambda: float | None = None,
    schedule: dict | None = None,
) -> Path:
    """Write a versioned, byte-deterministic checkpoint."""
    path = Path(path)
    names, blobs, index = [], [], []
    offset = 0
    for name, p in model.net.named_parameters():
        data = p.detach().to(torch.float32).numpy().astype("<f4")
        blob = data.tobytes(order="C")
        index.append({"name": name, "shape": list(p.shape), "offset": offset})
        names.append(name)
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.to_json(),
        "dtype": str(model.dtype).removeprefix("torch."),
        "norm_stats": model.norm_stats.to_json(),
        "free_bits_lambda": free_bits_lambda,
        "schedule": schedule or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[HvaeModel, dict]:
    """Rebuild a model from :func:`save_checkpoint` output; returns (model, header)."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: byte 0: bad or missing checkpoint magic")
    (header_len,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: byte 12: corrupt checkpoint header") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    spec = LatentHierarchySpec.from_json(header["spec"])
    dtype = getattr(torch, header["dtype"])
    stats = NormalizationStats.from_json(header["norm_stats"])
    net = HvaeNet(spec).to(dtype)
    base = 12 + header_len
    params = dict(net.named_parameters())
    with torch.no_grad():
        for entry in header["tensors"]:
            p = params[entry["name"]]
            numel = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = base + entry["offset"]
            arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=start)
            p.copy_(torch.from_numpy(arr.reshape(entry["shape"]).copy()).to(dtype))
    model = HvaeModel(spec=spec, net=net, norm_stats=stats)
    model.trained = header.get("schedule", {}).get("epochs_completed", 0) > 0
    return model, header
