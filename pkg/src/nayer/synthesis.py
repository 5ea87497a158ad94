"""Image synthesis: embedding rows -> latent codes -> generated images.

The latent side supports every input-mode ablation (plain embeddings,
one-hot, pure noise, concat/sum mixes, and the noisy-layer family). The
noisy layer is a BatchNorm-then-Linear map; the run loop reinitializes it
every generation round, so the randomness lives in the layer rather than in
the input. The image side is an upsampling conv generator whose convs are
spectrally normalized by power iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .embeddings import LTEPool, lookup
from .errors import DegenerateBatchError, ModeMismatchError, ShapeError
from .utils import generator_from, stable_seed

DEFAULT_LATENT_DIM = 1000
DROPOUT_RATE = 0.5


class InputMode(str, Enum):
    LTE = "LTE"
    OH = "OH"
    Z = "Z"
    CAT = "CAT"
    SUM = "SUM"
    NL_1TO1 = "NL_1TO1"
    NL_KTO1 = "NL_KTO1"
    NL_WO_REINIT = "NL_WO_REINIT"
    NL_WO_BN = "NL_WO_BN"


NL_MODES = {InputMode.NL_1TO1, InputMode.NL_KTO1, InputMode.NL_WO_REINIT, InputMode.NL_WO_BN}
AFFINE_MODES = {InputMode.LTE, InputMode.OH, InputMode.CAT, InputMode.SUM}
# Modes whose layer is freshly drawn every generation round.
REINIT_MODES = {InputMode.NL_1TO1, InputMode.NL_KTO1, InputMode.NL_WO_BN}


@dataclass(frozen=True)
class InputSpec:
    """Input mode plus its mode-specific knob (beta only applies to SUM)."""

    mode: InputMode
    beta: float | None = None

    def __post_init__(self) -> None:
        mode = InputMode(self.mode)
        object.__setattr__(self, "mode", mode)
        if mode is InputMode.SUM:
            if self.beta is None or self.beta < 0:
                raise ModeMismatchError("SUM mode requires beta >= 0")
        elif self.beta is not None:
            raise ModeMismatchError(f"beta is only valid for SUM mode, not {mode.value}")


# variant -> (batchnorm before the linear, extra r->r affine, tail nonlinearity)
ARCH_VARIANTS: dict[str, tuple[bool, bool, str | None]] = {
    "A1": (False, False, None),
    "A2": (False, True, None),
    "A3": (True, False, None),
    "A4": (True, True, None),
    "A5": (True, False, "sigmoid"),
    "A6": (True, False, "tanh"),
    "A7": (True, False, "relu"),
    "A8": (True, False, "dropout"),
}
DEFAULT_ARCH_VARIANT = "A3"


def _fan_in_uniform_(linear: nn.Linear, g: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(linear.in_features)
    nn.init.uniform_(linear.weight, -bound, bound, generator=g)
    nn.init.zeros_(linear.bias)


class NoisyLayer(nn.Module):
    """BatchNorm followed by a single linear map from embedding to latent space.

    ``reinit`` redraws the linear weight from a seeded fan-in-scaled uniform
    distribution, zeroes the bias, and resets the BN to identity; the same
    seed reproduces bit-identical parameters.
    """

    def __init__(self, dim_e: int, latent_dim: int = DEFAULT_LATENT_DIM,
                 arch_variant: str = DEFAULT_ARCH_VARIANT, seed: int = 0, bn_eps: float = 1e-5):
        super().__init__()
        if dim_e < 1 or latent_dim < 1:
            raise ShapeError("dim_e and latent_dim must be positive")
        if arch_variant not in ARCH_VARIANTS:
            raise ModeMismatchError(f"unknown noisy-layer variant {arch_variant!r}")
        if bn_eps <= 0:
            raise ModeMismatchError("bn_eps must be positive")
        use_bn, extra_affine, tail = ARCH_VARIANTS[arch_variant]
        self.dim_e = dim_e
        self.latent_dim = latent_dim
        self.arch_variant = arch_variant
        self.use_bn = use_bn
        self.tail = tail
        self.bn = nn.BatchNorm1d(dim_e, eps=bn_eps) if use_bn else None
        self.linear = nn.Linear(dim_e, latent_dim)
        self.extra = nn.Linear(latent_dim, latent_dim) if extra_affine else None
        self.init_seed = seed
        self._drop_gen = torch.Generator()
        self.reinit(seed)

    @property
    def bn_gamma(self) -> torch.Tensor | None:
        return None if self.bn is None else self.bn.weight

    @property
    def bn_beta(self) -> torch.Tensor | None:
        return None if self.bn is None else self.bn.bias

    @property
    def weight(self) -> torch.Tensor:
        return self.linear.weight

    @property
    def bias(self) -> torch.Tensor:
        return self.linear.bias

    def reinit(self, seed: int) -> None:
        g = torch.Generator()
        g.manual_seed(seed)
        _fan_in_uniform_(self.linear, g)
        if self.extra is not None:
            _fan_in_uniform_(self.extra, g)
        if self.bn is not None:
            self.bn.reset_running_stats()
            nn.init.ones_(self.bn.weight)
            nn.init.zeros_(self.bn.bias)
        self.init_seed = seed
        self._drop_gen.manual_seed(stable_seed("nl-dropout", seed))

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        if embeddings.ndim != 2 or embeddings.shape[1] != self.dim_e:
            raise ShapeError(f"expected (B, {self.dim_e}) embeddings, got {tuple(embeddings.shape)}")
        x = embeddings
        if self.bn is not None:
            if self.training and x.shape[0] < 2:
                raise DegenerateBatchError("batch statistics need at least 2 rows in training mode")
            x = self.bn(x)
        x = self.linear(x)
        if self.extra is not None:
            x = self.extra(x)
        if self.tail == "sigmoid":
            x = torch.sigmoid(x)
        elif self.tail == "tanh":
            x = torch.tanh(x)
        elif self.tail == "relu":
            x = F.relu(x)
        elif self.tail == "dropout" and self.training:
            mask = (torch.rand(x.shape, generator=self._drop_gen) >= DROPOUT_RATE).to(x.dtype)
            x = x * mask / (1.0 - DROPOUT_RATE)
        return x


class PerSampleNoisy(nn.Module):
    """One independently initialized linear per sample, behind a shared BN.

    Realizes the one-layer-per-image ablation: normalization happens over
    the batch (a per-sample variance would be undefined), then sample ``i``
    goes through its own weight slice.
    """

    def __init__(self, dim_e: int, latent_dim: int, batch_size: int, seed: int = 0, bn_eps: float = 1e-5):
        super().__init__()
        self.dim_e = dim_e
        self.latent_dim = latent_dim
        self.bn = nn.BatchNorm1d(dim_e, eps=bn_eps)
        self.weight = nn.Parameter(torch.empty(batch_size, latent_dim, dim_e))
        self.bias = nn.Parameter(torch.zeros(batch_size, latent_dim))
        self.init_seed = seed
        self.reinit(seed, batch_size)

    def reinit(self, seed: int, batch_size: int) -> None:
        g = torch.Generator()
        g.manual_seed(seed)
        bound = 1.0 / math.sqrt(self.dim_e)
        weight = torch.empty(batch_size, self.latent_dim, self.dim_e)
        nn.init.uniform_(weight, -bound, bound, generator=g)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(batch_size, self.latent_dim))
        self.bn.reset_running_stats()
        nn.init.ones_(self.bn.weight)
        nn.init.zeros_(self.bn.bias)
        self.init_seed = seed

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        if embeddings.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"per-sample layer built for batch {self.weight.shape[0]}, got {embeddings.shape[0]} rows"
            )
        if self.training and embeddings.shape[0] < 2:
            raise DegenerateBatchError("batch statistics need at least 2 rows in training mode")
        x = self.bn(embeddings)
        return torch.einsum("bre,be->br", self.weight, x) + self.bias


class PlainAffine(nn.Module):
    """Seeded trainable linear map used by the non-noisy input modes."""

    def __init__(self, in_features: int, latent_dim: int, seed: int = 0):
        super().__init__()
        self.linear = nn.Linear(in_features, latent_dim)
        g = torch.Generator()
        g.manual_seed(seed)
        _fan_in_uniform_(self.linear, g)

    @property
    def in_features(self) -> int:
        return self.linear.in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x)


def reinit_noisy_layer(dim_e: int, latent_dim: int = DEFAULT_LATENT_DIM,
                       arch_variant: str = DEFAULT_ARCH_VARIANT, seed: int = 0) -> NoisyLayer:
    """Fresh noisy layer with seeded weights, zero bias, identity BN."""
    return NoisyLayer(dim_e, latent_dim, arch_variant, seed)


def noisy_layer_forward(nl: nn.Module, embeddings: torch.Tensor, training: bool = True) -> torch.Tensor:
    was_training = nl.training
    nl.train(training)
    try:
        return nl(embeddings)
    finally:
        nl.train(was_training)


def _affine_for(mode: InputMode, dim_e: int, num_classes: int, latent_dim: int, seed: int) -> PlainAffine:
    in_features = {
        InputMode.LTE: dim_e,
        InputMode.SUM: dim_e,
        InputMode.CAT: 2 * dim_e,
        InputMode.OH: num_classes,
    }[mode]
    # Seeded by width only, so SUM(beta=0) and LTE share the exact same map.
    return PlainAffine(in_features, latent_dim, seed=stable_seed("plain-affine", seed, in_features))


def make_latent(
    mode: InputMode | str,
    pool: LTEPool | None,
    labels,
    nl: nn.Module | None = None,
    seed: int = 0,
    *,
    beta: float | None = None,
    latent_dim: int = DEFAULT_LATENT_DIM,
    training: bool = True,
) -> torch.Tensor:
    """Map a batch of class ids to (B, latent_dim) generator inputs.

    ``nl`` must be a noisy layer exactly for the NL_* modes; the affine
    modes accept a persistent PlainAffine or build a seeded throwaway one.
    Noise for Z/CAT/SUM is drawn from the given seed.
    """
    spec = InputSpec(InputMode(mode), beta)
    mode = spec.mode
    labels = torch.as_tensor(labels, dtype=torch.long)
    batch = labels.numel()

    if mode in NL_MODES:
        if mode is InputMode.NL_1TO1:
            if not isinstance(nl, PerSampleNoisy):
                raise ModeMismatchError("NL_1TO1 requires a PerSampleNoisy layer")
        elif not isinstance(nl, NoisyLayer):
            raise ModeMismatchError(f"{mode.value} requires a NoisyLayer")
        elif mode is InputMode.NL_WO_BN and nl.use_bn:
            raise ModeMismatchError("NL_WO_BN requires a BN-free noisy layer (variant A1/A2)")
        if pool is None:
            raise ModeMismatchError(f"{mode.value} requires an embedding pool")
        return noisy_layer_forward(nl, lookup(pool, labels), training)

    if isinstance(nl, (NoisyLayer, PerSampleNoisy)):
        raise ModeMismatchError(f"mode {mode.value} does not take a noisy layer")

    if mode is InputMode.Z:
        if nl is not None:
            raise ModeMismatchError("Z mode takes no trainable map")
        return torch.randn(batch, latent_dim, generator=generator_from("latent-z", seed))

    if pool is None and mode is not InputMode.OH:
        raise ModeMismatchError(f"{mode.value} requires an embedding pool")

    if mode is InputMode.OH:
        if pool is None:
            raise ModeMismatchError("OH mode needs the pool for the class count")
        base = F.one_hot(labels, pool.num_classes).to(torch.float32)
    else:
        base = lookup(pool, labels)

    if mode is InputMode.CAT:
        z = torch.randn(batch, pool.dim_e, generator=generator_from("latent-z", seed))
        base = torch.cat([base, z], dim=1)
    elif mode is InputMode.SUM:
        z = torch.randn(batch, pool.dim_e, generator=generator_from("latent-z", seed))
        base = base + spec.beta * z

    affine = nl if isinstance(nl, PlainAffine) else _affine_for(mode, pool.dim_e if pool else 0,
                                                                pool.num_classes if pool else 0,
                                                                latent_dim, seed)
    if affine.in_features != base.shape[1]:
        raise ModeMismatchError(
            f"affine expects {affine.in_features} input features, mode {mode.value} produced {base.shape[1]}"
        )
    return affine(base)


class LatentMapper:
    """Owns the trainable input-side state of one distillation run.

    Affine modes (LTE/OH/CAT/SUM) hold one PlainAffine for the whole run;
    NL modes hold a noisy layer that ``reinit_for_round`` redraws every
    generation round, except NL_WO_REINIT which keeps its layer for the run.
    Z mode owns nothing.
    """

    def __init__(self, mode: InputMode | str, pool: LTEPool, latent_dim: int, base_seed: int,
                 beta: float | None = None, nl_arch: str = DEFAULT_ARCH_VARIANT):
        self.spec = InputSpec(InputMode(mode), beta)
        self.mode = self.spec.mode
        self.pool = pool
        self.latent_dim = latent_dim
        self.base_seed = base_seed
        self.nl_arch = "A1" if self.mode is InputMode.NL_WO_BN else nl_arch
        self.module: nn.Module | None = None
        init_seed = stable_seed("mapper-init", base_seed)
        if self.mode in AFFINE_MODES:
            self.module = _affine_for(self.mode, pool.dim_e, pool.num_classes, latent_dim, base_seed)
        elif self.mode in (InputMode.NL_KTO1, InputMode.NL_WO_REINIT, InputMode.NL_WO_BN):
            self.module = NoisyLayer(pool.dim_e, latent_dim, self.nl_arch, seed=init_seed)
        # NL_1TO1 is built lazily at the first round (its size is the batch size).

    @property
    def persistent(self) -> bool:
        """True when the module (if any) lives for the whole run."""
        return self.mode not in REINIT_MODES

    def reinit_for_round(self, seed: int, batch_size: int) -> bool:
        """Redraw the noisy layer for a new generation round; returns True if redrawn."""
        if self.mode is InputMode.NL_1TO1:
            if self.module is None:
                self.module = PerSampleNoisy(self.pool.dim_e, self.latent_dim, batch_size, seed)
            else:
                self.module.reinit(seed, batch_size)
            return True
        if self.mode in (InputMode.NL_KTO1, InputMode.NL_WO_BN):
            self.module.reinit(seed)
            return True
        return False

    def make(self, labels, noise_seed: int, training: bool = True) -> torch.Tensor:
        return make_latent(self.mode, self.pool, labels, self.module, noise_seed,
                           beta=self.spec.beta, latent_dim=self.latent_dim, training=training)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [] if self.module is None else list(self.module.parameters())

    def fingerprint(self) -> str:
        from .utils import params_fingerprint

        return "" if self.module is None else params_fingerprint(self.module)


def _sigma_estimate(mat: torch.Tensor, u: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Top-singular-value estimate from the current left vector, grad-attached."""
    with torch.no_grad():
        v = F.normalize(mat.t().mv(u), dim=0, eps=eps)
    return torch.dot(u, mat.mv(v))


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, n_iter: int = 1,
                       eps: float = 1e-12) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Divide a conv/linear weight by its power-iteration top singular value.

    The weight is viewed as (out_channels, rest). Returns the normalized
    weight, the updated unit left vector, and a flag that is True when the
    weight was all zero and therefore returned unchanged.
    """
    if n_iter < 1:
        raise ShapeError("n_iter must be >= 1")
    mat = weight.reshape(weight.shape[0], -1)
    if not bool((mat != 0).any()):
        return weight, u, True
    with torch.no_grad():
        u = F.normalize(u, dim=0, eps=eps)
        for _ in range(n_iter):
            v = F.normalize(mat.t().mv(u), dim=0, eps=eps)
            u = F.normalize(mat.mv(v), dim=0, eps=eps)
        u = u.clone()
    sigma = _sigma_estimate(mat, u, eps)
    return weight / sigma, u, False


class SNConv2d(nn.Module):
    """3x3 conv with spectral weight normalization via a persisted power vector.

    Training forwards refresh ``u`` with one power iteration; eval forwards
    reuse the stored vector so the layer stays a pure function of its state.
    Setting ``update_u = False`` freezes the vector (used by gradient checks).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, padding: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=padding)
        self.register_buffer("u", F.normalize(torch.randn(out_channels), dim=0))
        self.update_u = True

    @property
    def weight(self) -> torch.Tensor:
        return self.conv.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mat = self.conv.weight.reshape(self.conv.weight.shape[0], -1)
        if not bool((mat != 0).any()):
            weight = self.conv.weight
        else:
            if self.training and self.update_u:
                with torch.no_grad():
                    v = F.normalize(mat.t().mv(self.u), dim=0)
                    self.u.copy_(F.normalize(mat.mv(v), dim=0))
            weight = self.conv.weight / _sigma_estimate(mat, self.u)
        return F.conv2d(x, weight, self.conv.bias, padding=self.conv.padding)


class ImageGenerator(nn.Module):
    """Dense stem, BN, reshape, then upsample+SNConv blocks ending in sigmoid+BN.

    The small architecture starts at (H/4, W/4) with two upsampling stages;
    the large one starts at (H/16, W/16) with four. The post-BN output is
    clamped to [0, 1] in every mode, so the images the losses see are exactly
    the images that get stored and replayed.
    """

    def __init__(self, latent_dim: int = DEFAULT_LATENT_DIM, image_shape: tuple[int, int, int] = (3, 32, 32),
                 arch: str = "small", width: int = 128):
        super().__init__()
        c, h, w = image_shape
        if arch == "small":
            factor, plan = 4, [(width, width), (width, width // 2)]
        elif arch == "large":
            factor, plan = 16, [(width, width), (width, width), (width, width // 2), (width // 2, width // 2)]
        else:
            raise ShapeError(f"unknown generator arch {arch!r}")
        if h % factor or w % factor:
            raise ShapeError(f"{arch} generator needs H and W divisible by {factor}, got {(h, w)}")
        self.latent_dim = latent_dim
        self.image_shape = tuple(image_shape)
        self.arch = arch
        self.width = width
        self.init_hw = (h // factor, w // factor)

        self.dense = nn.Linear(latent_dim, width * self.init_hw[0] * self.init_hw[1])
        self.dense_bn = nn.BatchNorm1d(width * self.init_hw[0] * self.init_hw[1])
        self.up_blocks = nn.ModuleList(
            nn.Sequential(
                nn.Upsample(scale_factor=2),
                SNConv2d(cin, cout),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(0.2, inplace=True),
            )
            for cin, cout in plan
        )
        self.out_conv = SNConv2d(plan[-1][1], c)
        self.out_bn = nn.BatchNorm2d(c)

    @property
    def num_stages(self) -> int:
        """Conv stages after the dense stem (upsampling blocks plus output)."""
        return len(self.up_blocks) + 1

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 2 or latents.shape[1] != self.latent_dim:
            raise ShapeError(f"expected (B, {self.latent_dim}) latents, got {tuple(latents.shape)}")
        if self.training and latents.shape[0] < 2:
            raise DegenerateBatchError("generator batch norm needs at least 2 rows in training mode")
        x = self.dense_bn(self.dense(latents))
        x = x.view(-1, self.width, *self.init_hw)
        for block in self.up_blocks:
            x = block(x)
        x = self.out_bn(torch.sigmoid(self.out_conv(x)))
        return x.clamp(0.0, 1.0)


def make_generator(latent_dim: int, image_shape: tuple[int, int, int], arch: str = "small",
                   width: int = 128, seed: int = 0) -> ImageGenerator:
    with torch.random.fork_rng():
        torch.manual_seed(stable_seed("generator", seed))
        return ImageGenerator(latent_dim, image_shape, arch, width)


def set_spectral_update(module: nn.Module, enabled: bool) -> None:
    for m in module.modules():
        if isinstance(m, SNConv2d):
            m.update_u = enabled


def generator_forward(gen: ImageGenerator, latents: torch.Tensor, training: bool = True) -> torch.Tensor:
    was_training = gen.training
    gen.train(training)
    try:
        return gen(latents)
    finally:
        gen.train(was_training)


@dataclass
class SyntheticBatch:
    """Generated images with their pseudo-labels; the unit stored in memory."""

    images: torch.Tensor  # (B, C, H, W) in [0, 1]
    pseudo_labels: torch.Tensor  # (B,) int64
    origin_epoch: int = 0
    origin_iteration: int = 0

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.pseudo_labels.numel():
            raise ShapeError("images and pseudo_labels disagree on batch size")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ShapeError(f"pixels outside [0, 1]: range ({lo:.4f}, {hi:.4f})")

    def __len__(self) -> int:
        return self.images.shape[0]


def synthesize(
    pool: LTEPool | None,
    labels,
    mode: InputMode | str,
    nl: nn.Module | None,
    gen: ImageGenerator,
    training: bool = True,
    seed: int = 0,
    beta: float | None = None,
    origin: tuple[int, int] = (0, 0),
) -> SyntheticBatch:
    """Compose latent construction and the generator into a stored batch.

    The returned images are detached and clamped to [0, 1] regardless of
    mode, so the batch always satisfies the replay-memory contract.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    latents = make_latent(mode, pool, labels, nl, seed, beta=beta,
                          latent_dim=gen.latent_dim, training=training)
    images = generator_forward(gen, latents, training)
    return SyntheticBatch(images.detach().clamp(0.0, 1.0), labels, origin[0], origin[1])
