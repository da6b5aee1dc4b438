"""Command-line front end: make-toy, train, sample, evaluate.

Training reproducibility works by deriving one numpy generator per step from
(seed, stream, step): batch indices, augmentation draws, timesteps, and noise
for step k depend only on the config seed and k, never on how many steps ran
before. Resuming from a checkpoint therefore continues the exact stream an
uninterrupted run would have used, and the optimizer moments round-trip
bit-exactly through the checkpoint file.

Every command validates its inputs before creating any output, writes a
one-line reason to stderr on failure, and returns a nonzero exit status.
MASKDIFF_THREADS caps internal parallelism.
"""

import argparse
import math
import os
import sys
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from maskdiff import data as data_mod
from maskdiff import metrics as metrics_mod
from maskdiff.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from maskdiff.denoiser import DenoiserConfig, build_denoiser, init_params
from maskdiff.diffusion import concat_condition, q_sample, sample_batch
from maskdiff.schedule import build_schedule

_STREAM_TRAIN = 1
_STREAM_SAMPLE = 2


@dataclass
class TrainConfig:
    """Flat key=value training configuration (toy-scale defaults)."""

    data_root: str = ""
    run_dir: str = "runs/toy"
    iterations: int = 5000
    learning_rate: float = 1e-4
    batch_size: int = 16
    timesteps: int = 250
    schedule_offset: float = 0.008
    image_size: int = 32
    base_channels: int = 16
    channel_mults: str = "1,2"
    attention_levels: str = "1"
    groups: int = 8
    time_embed_dim: int = 0
    seed: int = 0
    checkpoint_every: int = 1000
    holdout_fraction: float = 0.1
    log_every: int = 100

    def __post_init__(self):
        if not self.data_root:
            raise ValueError("config must set data_root")
        for name in ("iterations", "batch_size", "timesteps", "image_size",
                     "base_channels", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.schedule_offset < 0:
            raise ValueError("schedule_offset must be >= 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")

    def denoiser_config(self, image_channels: int) -> DenoiserConfig:
        mults = tuple(int(m) for m in self.channel_mults.split(","))
        attn = frozenset(
            int(l) for l in self.attention_levels.split(",") if l.strip() != ""
        )
        return DenoiserConfig(
            in_channels=image_channels + 1,
            base_channels=self.base_channels,
            channel_mults=mults,
            attention_levels=attn,
            groups=self.groups,
            time_embed_dim=self.time_embed_dim,
        )


def parse_config(path) -> TrainConfig:
    """Parse a flat key = value file; unknown keys are errors."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = (part.strip() for part in stripped.partition("="))
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}")
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = known[key](value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


@dataclass
class TrainResult:
    run_dir: Path
    losses: list
    start_step: int
    final_checkpoint: Path
    loss_log: Path


def _split_train_holdout(manifest, fraction):
    entries = sorted(manifest.entries, key=lambda e: e[2])
    n_holdout = int(round(fraction * len(entries)))
    if n_holdout == 0:
        return entries, []
    return entries[:-n_holdout], entries[-n_holdout:]


def _batch_tensors(samples):
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    masks = torch.from_numpy(np.stack([s.mask for s in samples]))
    return images, masks


def _save_training_checkpoint(path, cfg, dcfg, model, optimizer, step):
    params = OrderedDict(
        (name, p.detach().clone()) for name, p in model.named_parameters()
    )
    adam_m, adam_v = OrderedDict(), OrderedDict()
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if state:
            adam_m[name] = state["exp_avg"].detach().clone()
            adam_v[name] = state["exp_avg_sq"].detach().clone()
    save_checkpoint(
        path,
        Checkpoint(
            cfg=dcfg,
            timesteps=cfg.timesteps,
            schedule_offset=cfg.schedule_offset,
            image_size=cfg.image_size,
            learning_rate=cfg.learning_rate,
            step=step,
            params=params,
            adam_m=adam_m,
            adam_v=adam_v,
        ),
    )


def run_training(cfg: TrainConfig, resume=None, echo=None) -> TrainResult:
    """Train the denoiser on the paired dataset under ``cfg``."""
    manifest = data_mod.DatasetManifest.scan(cfg.data_root, cfg.image_size)
    train_entries, _ = _split_train_holdout(manifest, cfg.holdout_fraction)
    if not train_entries:
        raise ValueError("no training entries after the holdout split")
    train_manifest = data_mod.DatasetManifest(
        root=manifest.root,
        entries=train_entries,
        height=cfg.image_size,
        width=cfg.image_size,
    )
    samples, report = data_mod.load_manifest(train_manifest)
    if report.empty_mask_ids and echo:
        echo(f"warning: {len(report.empty_mask_ids)} empty masks: "
             f"{', '.join(report.empty_mask_ids[:5])}")
    image_channels = samples[0].image.shape[0]
    dcfg = cfg.denoiser_config(image_channels)
    sched = build_schedule(cfg.timesteps, cfg.schedule_offset)

    start_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.cfg != dcfg:
            raise ValueError(
                f"checkpoint architecture {ckpt.cfg} does not match config {dcfg}"
            )
        if ckpt.timesteps != cfg.timesteps or ckpt.image_size != cfg.image_size:
            raise ValueError("checkpoint schedule/size do not match the config")
        params = ckpt.params
        start_step = ckpt.step
    else:
        params = init_params(dcfg, cfg.seed)

    model = build_denoiser(dcfg, params)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), weight_decay=0.0
    )
    if resume is not None and ckpt.adam_m:
        for name, p in model.named_parameters():
            optimizer.state[p] = {
                "step": torch.tensor(float(ckpt.step)),
                "exp_avg": ckpt.adam_m[name].clone(),
                "exp_avg_sq": ckpt.adam_v[name].clone(),
            }

    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    losses = []
    final_path = run_dir / "ckpt_final.mdck"
    for step in range(start_step + 1, cfg.iterations + 1):
        rng = np.random.default_rng((cfg.seed, _STREAM_TRAIN, step))
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        batch = [data_mod.augment(samples[i], rng) for i in idx]
        t = torch.from_numpy(rng.integers(1, cfg.timesteps + 1, size=cfg.batch_size))
        eps = torch.from_numpy(
            rng.standard_normal(
                (cfg.batch_size, image_channels, cfg.image_size, cfg.image_size),
                dtype=np.float32,
            )
        )
        images, masks = _batch_tensors(batch)
        xt = q_sample(images, t, eps, sched)
        pred = model(concat_condition(xt, masks), t)
        loss = (pred - eps).abs().mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite loss {value} at step {step}; aborting")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append((step, value))
        if echo and (step % cfg.log_every == 0 or step == cfg.iterations):
            echo(f"step {step}/{cfg.iterations}  loss {value:.6f}")
        if step % cfg.checkpoint_every == 0 and step != cfg.iterations:
            _save_training_checkpoint(
                run_dir / f"ckpt_{step:07d}.mdck", cfg, dcfg, model, optimizer, step
            )

    _save_training_checkpoint(final_path, cfg, dcfg, model, optimizer, cfg.iterations)
    loss_log = run_dir / "loss_log.tsv"
    with open(loss_log, "w") as fh:
        fh.write("step\tloss\n")
        for step, value in losses:
            fh.write(f"{step}\t{value:.8e}\n")
    return TrainResult(
        run_dir=run_dir,
        losses=losses,
        start_step=start_step,
        final_checkpoint=final_path,
        loss_log=loss_log,
    )


def _load_mask_file(path, expected_hw=None):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ValueError(f"cannot decode mask {path}: {exc}") from exc
    if expected_hw is not None and arr.shape != (expected_hw, expected_hw):
        raise ValueError(
            f"mask {path} is {arr.shape[0]}x{arr.shape[1]} but the model expects "
            f"{expected_hw}x{expected_hw}"
        )
    return (arr > 0.5).astype(np.float32)[None]


def _montage(mask, samples_chw):
    """One row: the mask rendered in gray, then each sample; 2px separators."""
    tiles = [np.repeat((mask * 2.0 - 1.0), samples_chw[0].shape[0], axis=0)]
    tiles.extend(samples_chw)
    c, h, w = tiles[0].shape
    sep = np.full((c, h, 2), 1.0, dtype=np.float32)
    strips = []
    for tile in tiles:
        strips.extend([tile, sep])
    return np.concatenate(strips[:-1], axis=2)


def run_sampling(checkpoint_path, masks_dir, out_dir, seed, count_per_mask,
                 variance="posterior", clip_denoised=True, echo=None):
    ckpt = load_checkpoint(checkpoint_path)
    masks_dir = Path(masks_dir)
    if not masks_dir.is_dir():
        raise ValueError(f"masks directory {masks_dir} does not exist")
    mask_files = sorted(
        p for p in masks_dir.iterdir() if p.suffix.lower() in data_mod.IMAGE_EXTENSIONS
    )
    if not mask_files:
        raise ValueError(f"no mask images in {masks_dir}")
    if count_per_mask < 1:
        raise ValueError("count_per_mask must be >= 1")
    masks = [_load_mask_file(p, ckpt.image_size) for p in mask_files]

    model = build_denoiser(ckpt.cfg, ckpt.params)
    model.eval()
    sched = build_schedule(ckpt.timesteps, ckpt.schedule_offset)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for m_idx, (path, mask) in enumerate(zip(mask_files, masks)):
        mask_t = torch.from_numpy(np.repeat(mask[None], count_per_mask, axis=0))
        seeds = [(seed, _STREAM_SAMPLE, m_idx, j) for j in range(count_per_mask)]
        batch = sample_batch(
            model, mask_t, sched, seeds, variance=variance, clip_denoised=clip_denoised
        ).numpy()
        for j in range(count_per_mask):
            dest = out / f"{path.stem}__{j:02d}.png"
            data_mod.save_image_png(dest, batch[j])
            written.append(dest)
        grid = out / f"{path.stem}__grid.png"
        data_mod.save_image_png(grid, _montage(mask, list(batch)))
        written.append(grid)
        if echo:
            echo(f"sampled {count_per_mask} images for {path.stem}")
    return written


def _load_image_dir(path):
    path = Path(path)
    if not path.is_dir():
        raise ValueError(f"{path} is not a directory")
    files = sorted(
        p for p in path.iterdir()
        if p.suffix.lower() in data_mod.IMAGE_EXTENSIONS and "__grid" not in p.stem
    )
    if not files:
        raise ValueError(f"no images in {path}")
    images = []
    for f in files:
        with Image.open(f) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            images.append(data_mod.uint8_to_image(np.asarray(im)))
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise ValueError(f"inconsistent image shapes in {path}: {sorted(shapes)}")
    return files, np.stack(images)


def run_evaluation(real_dir, synth_dir, masks_dir=None, report_file=None,
                   threshold=0.0):
    _, real = _load_image_dir(real_dir)
    synth_files, synth = _load_image_dir(synth_dir)
    if real.shape[0] < 2 or synth.shape[0] < 2:
        raise ValueError("need N >= 2 images in each set for FID/KID")
    real_feats = metrics_mod.reference_embedder(real)
    synth_feats = metrics_mod.reference_embedder(synth)
    embedder_id = metrics_mod.RandomConvEmbedder.identifier
    rows = [
        dict(
            metric="fid",
            value=metrics_mod.frechet_distance(
                metrics_mod.compute_stats(real_feats),
                metrics_mod.compute_stats(synth_feats),
            ),
        ),
        dict(metric="kid", value=metrics_mod.kid(real_feats, synth_feats)),
        dict(
            metric="is",
            value=metrics_mod.inception_score(
                metrics_mod.reference_class_probs(synth_feats)
            ),
        ),
    ]
    if masks_dir is not None:
        masks_dir = Path(masks_dir)
        fidelities = []
        for f, image in zip(synth_files, synth):
            stem = f.stem.split("__")[0]
            candidates = [
                masks_dir / f"{stem}{ext}" for ext in data_mod.IMAGE_EXTENSIONS
            ]
            mask_path = next((c for c in candidates if c.exists()), None)
            if mask_path is None:
                continue
            mask = _load_mask_file(mask_path)
            fidelities.append(
                metrics_mod.conditioning_fidelity(image, mask, threshold)
            )
        if not fidelities:
            raise ValueError(f"no synthetic image matched a mask in {masks_dir}")
        rows.append(dict(metric="conditioning_fidelity", value=float(np.mean(fidelities))))
    for row in rows:
        row.update(n_real=real.shape[0], n_synth=synth.shape[0], embedder_id=embedder_id)
    if report_file is not None:
        metrics_mod.write_report(report_file, rows)
    return {row["metric"]: row["value"] for row in rows}


def cmd_make_toy(args) -> int:
    manifest = data_mod.make_toy_dataset(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(manifest.entries)} pairs under {args.out} "
          f"({args.size}x{args.size}, seed {args.seed})")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    result = run_training(cfg, resume=args.resume, echo=print)
    print(f"finished at step {cfg.iterations}; final checkpoint "
          f"{result.final_checkpoint}; loss log {result.loss_log}")
    return 0


def cmd_sample(args) -> int:
    written = run_sampling(
        args.checkpoint, args.masks, args.out, args.seed, args.count,
        variance=args.variance, clip_denoised=not args.no_clip_denoised, echo=print,
    )
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    values = run_evaluation(
        args.real, args.synth, masks_dir=args.masks,
        report_file=args.report, threshold=args.threshold,
    )
    for metric, value in values.items():
        print(f"{metric}\t{value:.6f}")
    if args.report:
        print(f"report written to {args.report}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdiff",
        description="Mask-conditioned diffusion: toy data, training, sampling, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate a synthetic paired dataset")
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--size", type=int, default=32, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset root")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", help="train the denoiser from a config file")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images for each mask in a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masks", required=True, help="directory of binary mask images")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4, help="images per mask")
    p.add_argument("--variance", choices=["posterior", "beta"], default="posterior",
                   help="reverse-step noise variance")
    p.add_argument("--no-clip-denoised", action="store_true",
                   help="run the textbook unclipped reverse step (diverges on "
                        "lightly trained models)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="FID/KID/IS report between two image sets")
    p.add_argument("--real", required=True, help="directory of real images")
    p.add_argument("--synth", required=True, help="directory of synthetic images")
    p.add_argument("--masks", default=None,
                   help="optional mask directory for conditioning fidelity")
    p.add_argument("--report", default=None, help="output report file")
    p.add_argument("--threshold", type=float, default=0.0,
                   help="binarization threshold for conditioning fidelity")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_thread_cap():
    cap = os.environ.get("MASKDIFF_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
