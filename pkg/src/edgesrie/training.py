"""Training procedures: unsupervised despeckling and self-supervised
deblurring, plus corpus management.

Despeckling is trained Noise2Noise style and never sees a clean target:
every training pair comes from make_despeckle_pair, which simulates k
independent speckle realizations of one echogenicity map and picks two of
them (input and target) at a shared random crop. Deblurring is trained
self-supervised: the target is a clean patch O from the corpus and the
input is degrade(O).

Both trainers step AdamW at the configured learning rate on L2 loss, emit
one loss per step, and return the parameter set whose running-average loss
(window of 50 steps) was lowest, not necessarily the last step. Training is
bit-reproducible: all randomness derives from the config seed, and each
epoch visits corpus entries in manifest order, one optimizer step (one
batch) per entry.

A corpus manifest is a line-oriented text file::

    role<TAB>path<TAB>key=value key=value ...

with role `despeckle_source` (image is display-inverted to linear amplitude
and used as an echogenicity map) or `deblur_source` (display image used as
the clean target). The optional key=value fields override simulator or
degradation settings per entry.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

from . import net, nn
from .errors import (
    ConfigError,
    DataError,
    DescriptorMismatch,
    EmptyCorpus,
    NonFiniteLoss,
)
from .image import Domain, Image, read_image, to_decibel, to_display, to_linear_amplitude
from .rng import Stream
from .speckle import BlurConfig, SpeckleSimConfig, degrade, make_realizations

BEST_WINDOW = 50


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    patch_size: int = 64
    realizations_k: int = 3
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    manifest: str | None = None
    target_average: bool = False  # average the k-1 non-input realizations
    pairs_per_source: int | None = None  # pairs drawn per source per epoch

    def __post_init__(self):
        if self.patch_size < 32 or self.patch_size % 16:
            raise ConfigError("patch_size must be >= 32 and divisible by 16")
        if self.realizations_k < 2:
            raise ConfigError("realizations_k must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.pairs_per_source is not None and self.pairs_per_source < 1:
            raise ConfigError("pairs_per_source must be >= 1")

    @property
    def batches_per_source(self) -> int:
        pairs = self.pairs_per_source or self.batch_size
        return -(-pairs // self.batch_size)


@dataclass(frozen=True)
class CorpusEntry:
    role: str
    image: Image
    path: str | None = None
    overrides: dict = field(default_factory=dict)


ROLES = ("despeckle_source", "deblur_source")


def _apply_overrides(cfg, overrides: dict):
    fields = {f.name for f in dataclasses.fields(cfg)}
    bad = set(overrides) - fields
    if bad:
        raise ConfigError(f"unknown override keys {sorted(bad)} for {type(cfg).__name__}")
    if not overrides:
        return cfg
    return replace(cfg, **overrides)


def _parse_value(raw: str):
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def load_manifest(path) -> list[CorpusEntry]:
    """Read a corpus manifest and load every referenced image."""
    entries = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: need role<TAB>path")
            role, img_path = parts[0], parts[1]
            if role not in ROLES:
                raise DataError(f"{path}:{lineno}: unknown role {role!r}")
            overrides = {}
            for tok in parts[2:]:
                for kv in tok.split():
                    key, _, raw = kv.partition("=")
                    if not _:
                        raise DataError(f"{path}:{lineno}: bad override {kv!r}")
                    overrides[key] = _parse_value(raw)
            try:
                img = read_image(img_path)
            except FileNotFoundError as exc:
                raise DataError(f"{path}:{lineno}: missing file {img_path}") from exc
            if role == "despeckle_source":
                img = to_linear_amplitude(img)
            elif img.domain is not Domain.DISPLAY8:
                img = to_display(to_decibel(img) if img.domain is Domain.LINEAR else img)
            entries.append(CorpusEntry(role, img, img_path, overrides))
    return entries


def make_despeckle_pair(echo_source: Image, cfg: TrainConfig, stream: Stream,
                        sim: SpeckleSimConfig | None = None):
    """One Noise2Noise training pair as Display8 patches.

    Simulates cfg.realizations_k speckle realizations of the source (fresh
    simulator seed drawn from `stream`), picks the input realization
    uniformly and one distinct target uniformly, and crops both at a shared
    random location. Draw order: simulator seed, input index, target
    offset, crop x, crop z.
    """
    sim = sim if sim is not None else SpeckleSimConfig()
    echo = to_linear_amplitude(echo_source)
    k = cfg.realizations_k
    reals = make_realizations(echo, replace(sim, seed=stream.spawn_seed()), k)
    disp = [to_display(r, -sim.floor_db) for r in reals]
    i_in = stream.randint(k)
    i_tgt = (i_in + 1 + stream.randint(k - 1)) % k
    p = cfg.patch_size
    if echo.width < p or echo.height < p:
        raise DataError(f"source {echo.width}x{echo.height} smaller than patch {p}")
    x0 = stream.randint(echo.width - p + 1)
    z0 = stream.randint(echo.height - p + 1)

    def crop(im: Image) -> Image:
        return im.with_data(im.data[z0 : z0 + p, x0 : x0 + p])

    if cfg.target_average:
        others = [disp[j].data for j in range(k) if j != i_in]
        target = disp[0].with_data(np.mean(others, axis=0))
    else:
        target = disp[i_tgt]
    return crop(disp[i_in]), crop(target)


def _snapshot(model: net.Model, names: list[str]):
    return {n: (model.params[n][0].copy(), model.params[n][1].copy()) for n in names}


def _check_finite(params: dict) -> None:
    for name, p in params.items():
        if not np.isfinite(p).all():
            raise NonFiniteLoss(f"non-finite values in parameter {name}")


def _train_loop(model: net.Model, cfg: TrainConfig, branch: str, make_batch,
                n_entries: int, on_step=None):
    """Shared epoch/step/best-window scaffolding for both trainers."""
    out = model.copy()
    table = net.DESPECKLE_LAYERS if branch == "despeckle" else net.DEBLUR_LAYERS
    names = [n for n, *_ in table]
    params = {}
    for n in names:
        params[f"{n}.w"] = out.params[n][0]
        params[f"{n}.b"] = out.params[n][1]
    opt = nn.AdamW(lr=cfg.lr)
    losses: list[float] = []
    best_avg = np.inf
    best = _snapshot(out, names)
    step = 0
    forward = net.despeckle_forward if branch == "despeckle" else net.deblur_forward
    backward = net.despeckle_backward if branch == "despeckle" else net.deblur_backward
    schedule = [(e, i) for e in range(cfg.epochs) for i in range(n_entries)
                for _ in range(cfg.batches_per_source)]
    for epoch, entry_idx in schedule:
        x, target = make_batch(epoch, entry_idx)
        cache: dict = {}
        y = forward(out, x, cache)
        loss, gl = nn.l2_loss(y, target)
        if not np.isfinite(loss):
            raise NonFiniteLoss(
                f"loss became {loss} at step {step} (epoch {epoch}, entry {entry_idx})"
            )
        grads, _ = backward(out, cache, gl)
        flat = {}
        for n in names:
            gw, gb = grads[n]
            flat[f"{n}.w"] = gw
            flat[f"{n}.b"] = gb
        opt.step(params, flat)
        _check_finite(params)
        losses.append(loss)
        step += 1
        window = losses[-BEST_WINDOW:]
        avg = sum(window) / len(window)
        if avg < best_avg:
            best_avg = avg
            best = _snapshot(out, names)
        if on_step is not None:
            on_step(step, loss, out)
    for n in names:
        out.params[n][0][...] = best[n][0]
        out.params[n][1][...] = best[n][1]
    return out, losses


def train_despeckle(model: net.Model, corpus: list[CorpusEntry], cfg: TrainConfig,
                    on_step=None):
    """Noise2Noise despeckle training. Returns (model, per-step losses)."""
    sources = [e for e in corpus if e.role == "despeckle_source"]
    if not sources:
        raise EmptyCorpus("no despeckle_source entries in corpus")
    stream = Stream(cfg.seed)
    sims = [_apply_overrides(SpeckleSimConfig(), e.overrides) for e in sources]

    def make_batch(epoch, idx):
        entry, sim = sources[idx], sims[idx]
        xs, ts = [], []
        for _ in range(cfg.batch_size):
            xi, ti = make_despeckle_pair(entry.image, cfg, stream, sim)
            xs.append(xi.data)
            ts.append(ti.data)
        x = np.stack(xs)[:, None].astype(np.float32) / 255.0
        t = np.stack(ts)[:, None].astype(np.float32) / 255.0
        return x, t

    return _train_loop(model, cfg, "despeckle", make_batch, len(sources), on_step)


def train_deblur(model: net.Model, corpus: list[CorpusEntry], cfg: TrainConfig,
                 on_step=None):
    """Self-supervised deblur training: input = degrade(O), target = O."""
    sources = [e for e in corpus if e.role == "deblur_source"]
    if not sources:
        raise EmptyCorpus("no deblur_source entries in corpus")
    stream = Stream(cfg.seed)
    blurs = [_apply_overrides(BlurConfig(), _blur_overrides(e.overrides)) for e in sources]

    def make_batch(epoch, idx):
        entry, blur = sources[idx], blurs[idx]
        img = entry.image
        p = cfg.patch_size
        if img.width < p or img.height < p:
            raise DataError(f"source {img.width}x{img.height} smaller than patch {p}")
        xs, ts = [], []
        for _ in range(cfg.batch_size):
            x0 = stream.randint(img.width - p + 1)
            z0 = stream.randint(img.height - p + 1)
            clean = img.with_data(img.data[z0 : z0 + p, x0 : x0 + p])
            blurred = degrade(clean, replace(blur, seed=stream.spawn_seed()))
            xs.append(blurred.data)
            ts.append(clean.data)
        x = np.stack(xs)[:, None].astype(np.float32) / 255.0
        t = np.stack(ts)[:, None].astype(np.float32) / 255.0
        return x, t

    return _train_loop(model, cfg, "deblur", make_batch, len(sources), on_step)


def _blur_overrides(overrides: dict) -> dict:
    out = dict(overrides)
    for pair_key in ("blur_sigma_range", "narrow_alpha_range"):
        lo, hi = out.pop(f"{pair_key}_lo", None), out.pop(f"{pair_key}_hi", None)
        if lo is not None or hi is not None:
            base = getattr(BlurConfig(), pair_key)
            out[pair_key] = (lo if lo is not None else base[0],
                             hi if hi is not None else base[1])
    return out


def fuse(despeckle_model: net.Model, deblur_model: net.Model) -> net.Model:
    """Single model running deblur(despeckle(x)); parameters copied verbatim."""
    fused = despeckle_model.copy()
    for name, *_ in net.DEBLUR_LAYERS:
        src = deblur_model.params[name]
        dst = fused.params[name]
        if src[0].shape != dst[0].shape or src[1].shape != dst[1].shape:
            raise DescriptorMismatch(f"layer {name} shapes differ between branch models")
        fused.params[name] = [src[0].copy(), src[1].copy()]
    fused.fused = True
    fused.quant = None
    return fused


def write_loss_csv(path, losses: list[float]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss:.10g}\n")
