"""Forward noising, the L1 training objective, and mask-conditioned sampling.

The forward process mixes clean data with unit Gaussian noise,

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps,

and the reverse process walks back one step at a time using the predicted
noise. Conditioning is channel concatenation: the model always sees the
clean binary mask as its last input channel; the mask itself is never noised.

Conventions baked in here:

- reverse-step noise uses the posterior variance by default; ``variance="beta"``
  switches to the plain per-step variance for comparison;
- the timestep for each training example is drawn uniformly from 1..T by the
  caller; t = 0 is accepted by ``q_sample`` as the identity for completeness;
- intermediate states x_t are never clamped; the sampling loops do clamp the
  *implied clean image* inside each step by default (see ``p_sample_step``),
  and the final sample is clamped to [-1, 1];
- all sampler randomness comes from a seeded numpy generator, so a seed fully
  determines the output on a given platform.
"""

from typing import Callable

import numpy as np
import torch

from maskdiff.schedule import NoiseSchedule

# invert_q_sample refuses to divide by sqrt(alpha_bar) below this; the
# round-trip identity is only meaningful while the signal is recoverable
ALPHA_BAR_FLOOR = 1e-8

Model = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _check_timestep(t: int, sched: NoiseSchedule, lo: int = 1) -> None:
    if not lo <= t <= sched.T:
        raise ValueError(f"timestep {t} outside {lo}..{sched.T}")


def _coeffs(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Schedule lookup as a tensor broadcastable against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        if like.ndim != 4 or len(t) != like.shape[0]:
            raise ValueError("per-sample t requires a matching batch dimension")
        vals = torch.from_numpy(table[t.numpy()])
        return vals.to(like.dtype)[:, None, None, None]
    return torch.tensor(float(table[int(t)]), dtype=like.dtype)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noise x0 to timestep t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        if t.numel() and (t.min() < 0 or t.max() > sched.T):
            raise ValueError("timesteps outside 0..T")
    else:
        _check_timestep(int(t), sched, lo=0)
    a = _coeffs(sched.sqrt_alpha_bar, t, x0)
    b = _coeffs(sched.sqrt_one_minus_alpha_bar, t, x0)
    return a * x0 + b * eps


def invert_q_sample(
    xt: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Algebraic inverse of ``q_sample``: recover x0 from (x_t, eps)."""
    if xt.shape != eps.shape:
        raise ValueError(f"xt shape {tuple(xt.shape)} != eps shape {tuple(eps.shape)}")
    _check_timestep(int(t), sched, lo=0)
    ab = sched.alpha_bar[int(t)]
    if ab <= ALPHA_BAR_FLOOR:
        raise ValueError(
            f"alpha_bar[{t}] = {ab:.3e}: signal unrecoverable (degenerate inversion)"
        )
    b = _coeffs(sched.sqrt_one_minus_alpha_bar, t, xt)
    return (xt - b * eps) / _coeffs(sched.sqrt_alpha_bar, t, xt)


def concat_condition(xt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Append the mask as an extra channel; works batched or unbatched."""
    if xt.ndim != mask.ndim:
        raise ValueError(f"rank mismatch: image {xt.ndim}-d vs mask {mask.ndim}-d")
    if mask.shape[-3] != 1:
        raise ValueError(f"mask must have one channel, got {mask.shape[-3]}")
    if xt.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"spatial mismatch: image {tuple(xt.shape[-2:])} vs mask "
            f"{tuple(mask.shape[-2:])}"
        )
    return torch.cat([xt, mask.to(xt.dtype)], dim=-3)


def training_loss(
    model: Model,
    x0: torch.Tensor,
    mask: torch.Tensor,
    t,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Mean absolute error between the true and predicted noise."""
    xt = q_sample(x0, t, eps, sched)
    pred = model(concat_condition(xt, mask), t)
    if pred.shape != eps.shape:
        raise ValueError(
            f"model output shape {tuple(pred.shape)} != noise shape {tuple(eps.shape)}"
        )
    return (pred - eps).abs().mean()


def p_sample_step(
    model: Model,
    xt: torch.Tensor,
    mask: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    z: torch.Tensor | None = None,
    variance: str = "posterior",
    clip_denoised: bool = False,
) -> torch.Tensor:
    """One reverse step from x_t to x_{t-1}.

    x_{t-1} = (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t)
              + sqrt(var_t) * z

    With ``clip_denoised`` the step is computed through the implied clean
    image, clamped to [-1, 1]:

        x0_hat = clamp((x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t))
        mean   = (sqrt(ab_{t-1}) beta_t x0_hat
                  + sqrt(alpha_t) (1 - ab_{t-1}) x_t) / (1 - ab_t)

    which is algebraically identical to the plain formula whenever the clamp
    is inactive, but bounds the error the cosine schedule's near-unity tail
    betas would otherwise amplify roughly 30x per step. At desk-scale
    training budgets the unclipped chain diverges, so the sampling loop
    enables this by default.

    The final step (t = 1) is deterministic: z must be None or zero.
    """
    t = int(t)
    _check_timestep(t, sched)
    if variance not in ("posterior", "beta"):
        raise ValueError(f"variance must be 'posterior' or 'beta', got {variance!r}")
    if t == 1 and z is not None and bool(torch.any(z != 0)):
        raise ValueError("the final reverse step is deterministic: z must be zero at t=1")

    eps_hat = model(concat_condition(xt, mask), t)
    beta_t = _coeffs(sched.beta, t, xt)
    if clip_denoised:
        ab_t = _coeffs(sched.alpha_bar, t, xt)
        ab_prev = _coeffs(sched.alpha_bar, t - 1, xt)
        x0_hat = (xt - _coeffs(sched.sqrt_one_minus_alpha_bar, t, xt) * eps_hat)
        x0_hat = (x0_hat / torch.sqrt(ab_t)).clamp(-1.0, 1.0)
        alpha_t = _coeffs(sched.alpha, t, xt)
        mean = (
            torch.sqrt(ab_prev) * beta_t * x0_hat
            + torch.sqrt(alpha_t) * (1.0 - ab_prev) * xt
        ) / (1.0 - ab_t)
    else:
        coef = beta_t / _coeffs(sched.sqrt_one_minus_alpha_bar, t, xt)
        mean = (xt - coef * eps_hat) / torch.sqrt(_coeffs(sched.alpha, t, xt))
    if z is None:
        return mean
    if z.shape != xt.shape:
        raise ValueError(f"z shape {tuple(z.shape)} != state shape {tuple(xt.shape)}")
    table = sched.posterior_variance if variance == "posterior" else sched.beta
    return mean + torch.sqrt(_coeffs(table, t, xt)) * z


def sample(
    model: Model,
    mask: torch.Tensor,
    sched: NoiseSchedule,
    seed,
    out_channels: int | None = None,
    variance: str = "posterior",
    clip_denoised: bool = True,
) -> torch.Tensor:
    """Generate one image for ``mask`` by ancestral sampling from pure noise.

    ``seed`` (an int or tuple of ints) fully determines the noise stream.
    Returns a (C, H, W) tensor clamped to [-1, 1].
    """
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise ValueError(f"mask must be (1, H, W), got {tuple(mask.shape)}")
    if out_channels is None:
        out_channels = getattr(getattr(model, "cfg", None), "out_channels", None)
        if out_channels is None:
            raise ValueError("pass out_channels explicitly for models without a cfg")
    rng = np.random.default_rng(seed)
    shape = (out_channels, *mask.shape[1:])
    x = torch.from_numpy(rng.standard_normal(shape, dtype=np.float32))
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            z = None
            if t > 1:
                z = torch.from_numpy(rng.standard_normal(shape, dtype=np.float32))
            x = p_sample_step(model, x, mask, t, sched, z, variance, clip_denoised)
    return x.clamp(-1.0, 1.0)


def sample_batch(
    model: Model,
    masks: torch.Tensor,
    sched: NoiseSchedule,
    seeds: list,
    variance: str = "posterior",
    clip_denoised: bool = True,
) -> torch.Tensor:
    """Batched ancestral sampling with one independent noise stream per item.

    Each item draws from its own generator in the same order as ``sample``,
    so the result for a given (mask, seed) does not depend on what else is
    in the batch (up to float reassociation inside the batched model call).
    """
    if masks.ndim != 4 or masks.shape[1] != 1:
        raise ValueError(f"masks must be (B, 1, H, W), got {tuple(masks.shape)}")
    if len(seeds) != masks.shape[0]:
        raise ValueError("need exactly one seed per mask")
    out_channels = model.cfg.out_channels
    rngs = [np.random.default_rng(s) for s in seeds]
    shape = (out_channels, *masks.shape[2:])
    x = torch.from_numpy(
        np.stack([r.standard_normal(shape, dtype=np.float32) for r in rngs])
    )
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            z = None
            if t > 1:
                z = torch.from_numpy(
                    np.stack([r.standard_normal(shape, dtype=np.float32) for r in rngs])
                )
            x = p_sample_step(model, x, masks, t, sched, z, variance, clip_denoised)
    return x.clamp(-1.0, 1.0)
