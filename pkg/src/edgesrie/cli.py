"""esrie: the EdgeSRIE command line.

    esrie <command> [--config FILE] [--key value ...]

Commands cover the whole pipeline: phantom, simulate, degrade, train, fuse,
quantize, infer, eval, profile, bench. Configuration comes from an optional
plain-text file of `key = value` lines merged with command-line overrides;
unknown keys are errors, and every run writes its fully resolved
configuration next to its outputs so any result can be reproduced from that
file alone.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import hashlib
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import baselines, metrics, net, quant, training
from .errors import (
    ConfigError,
    DataError,
    EsrieError,
    InvalidDuration,
    MissingRoi,
    NumericError,
)
from .image import (
    Domain,
    Image,
    PhantomSpec,
    RoiKind,
    RoiSpec,
    make_phantom,
    read_image,
    to_decibel,
    to_display,
    to_linear_amplitude,
    write_image,
)
from .rng import Stream
from .speckle import BlurConfig, SpeckleSimConfig, degrade, make_realizations, simulate_bmode

PRESETS = {
    # two-inclusion acceptance phantom: deep anechoic cyst + hyperechoic mass
    "cyst2": PhantomSpec(256, 256, 0.55, ((76, 76, 68, 0.02), (184, 184, 64, 2.5))),
    # homogeneous block for speckle statistics work
    "homog": PhantomSpec(256, 256, 0.6, ()),
}

# Standard ROI set for the cyst2 phantom (background, cyst, crossing profile).
CYST2_ROIS = (
    ("background", "region", 150, 8, 246, 60),
    ("cyst", "region", 46, 46, 106, 106),
    ("profile", "lateral", 4, 76, 156, 77),
)

_GLOBAL = {
    "seed": (0, int, "master seed"),
    "threads": (1, int, "worker threads for simulation/bench"),
    "out_dir": (".", str, "output directory"),
}

_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _parse_bool(raw: str) -> bool:
    try:
        return _BOOL[raw.lower()]
    except KeyError:
        raise ConfigError(f"expected true/false, got {raw!r}") from None


# Per-command key tables: key -> (default, type, help). A default of None
# marks the key as required. Globals are merged into every table.
_KEYS: dict[str, dict] = {
    "phantom": {
        "preset": ("", str, "named phantom: " + ", ".join(sorted(PRESETS))),
        "width": (256, int, "image width"),
        "height": (256, int, "image height"),
        "background_echo": (0.55, float, "background echogenicity"),
        "inclusions": ("", str, "cx,cz,r,echo;... circle list"),
        "out": ("phantom", str, "output name stem"),
    },
    "simulate": {
        "input": (None, str, "echogenicity map (.esri or .pgm)"),
        "k": (1, int, "number of realizations"),
        "sigma_x": (2.0, float, "lateral PSF sigma, px"),
        "sigma_z": (1.2, float, "axial PSF sigma, px"),
        "cycles": (3.0, float, "carrier periods across the axial pulse"),
        "noise_std": (1.0, float, "scatterer amplitude std"),
        "floor_db": (-55.0, float, "log compression floor"),
        "out": ("bmode", str, "output name stem"),
    },
    "degrade": {
        "input": (None, str, "display image to degrade"),
        "blur_sigma_lo": (0.8, float, "blur sigma range low"),
        "blur_sigma_hi": (2.0, float, "blur sigma range high"),
        "alpha_lo": (0.5, float, "contrast narrowing range low"),
        "alpha_hi": (0.9, float, "contrast narrowing range high"),
        "out": ("degraded", str, "output name stem"),
    },
    "train": {
        "branch": (None, str, "despeckle or deblur"),
        "manifest": (None, str, "corpus manifest path"),
        "epochs": (20, int, "training epochs"),
        "batch_size": (8, int, "pairs per optimizer step"),
        "patch_size": (64, int, "square patch side, multiple of 16"),
        "realizations_k": (3, int, "speckle realizations per pair draw"),
        "pairs_per_source": (0, int, "pairs per source per epoch (0: one batch)"),
        "lr": (1e-4, float, "AdamW learning rate"),
        "checkpoint_every": (0, int, "save every N steps (0: off)"),
        "target_average": (False, bool, "average the k-1 non-input realizations"),
        "init": ("", str, "checkpoint to start from (default: fresh)"),
        "out": ("model", str, "checkpoint name stem"),
    },
    "fuse": {
        "despeckle": (None, str, "despeckle checkpoint"),
        "deblur": (None, str, "deblur checkpoint"),
        "out": ("fused", str, "output checkpoint stem"),
    },
    "quantize": {
        "model": (None, str, "float checkpoint to quantize"),
        "calib_dir": (None, str, "directory of calibration images"),
        "calib_limit": (16, int, "max calibration images"),
        "qat_steps": (100, int, "fine-tune steps per branch (0: PTQ only)"),
        "qat_lr": (1e-5, float, "QAT learning rate"),
        "qat_patch": (64, int, "QAT patch side"),
        "qat_batch": (8, int, "QAT batch size"),
        "weights_only": (False, bool, "skip activation quantization"),
        "out": ("model_int8", str, "output checkpoint stem"),
    },
    "infer": {
        "model": (None, str, "checkpoint"),
        "input": (None, str, "display image"),
        "precision": ("f32", str, "f32 or int8"),
        "branch": ("fused", str, "fused, despeckle, or deblur"),
        "integer_only": (False, bool, "int8 debug path without float GEMM"),
        "out": ("output", str, "output name stem"),
    },
    "eval": {
        "inputs": (None, str, "comma-separated display images, or a directory"),
        "rois": (None, str, "ROI file: name kind x0 z0 x1 z1 per line"),
        "methods": ("input,lee,srad", str,
                    "columns from input,lee,srad,edgesrie-f32,edgesrie-int8"),
        "model": ("", str, "float checkpoint for edgesrie-f32"),
        "model_int8": ("", str, "int8 checkpoint for edgesrie-int8"),
        "lee_window": (7, int, "Lee window"),
        "cu": (0.0, float, "speckle sigma/mu (0: estimate from background ROI)"),
        "srad_iterations": (50, int, "SRAD iterations"),
        "srad_delta_t": (0.05, float, "SRAD time step"),
        "srad_q0_decay": (0.02, float, "SRAD q0 decay per iteration"),
    },
    "profile": {
        "model": ("", str, "checkpoint (default: fresh default model)"),
        "height": (144, int, "input height"),
        "width": (432, int, "input width"),
        "branch": ("fused", str, "fused, despeckle, or deblur"),
    },
    "bench": {
        "model": ("", str, "checkpoint (default: fresh default model)"),
        "input": ("", str, "display image (default: synthetic speckle)"),
        "precision": ("both", str, "f32, int8, or both"),
        "seconds": (2.0, float, "minimum wall time per path"),
        "min_runs": (100, int, "minimum timed runs per path"),
        "warmup": (3, int, "untimed warm-up runs"),
        "height": (144, int, "synthetic input height"),
        "width": (432, int, "synthetic input width"),
    },
}

_CASTS = {int: "integer", float: "number", str: "string", bool: "flag"}


def _cast(key: str, raw, want):
    if isinstance(raw, want):
        return raw
    try:
        if want is bool:
            return _parse_bool(raw)
        return want(raw)
    except (ValueError, ConfigError):
        raise ConfigError(f"key {key!r} expects {_CASTS[want]}, got {raw!r}") from None


def _read_config_file(path: str) -> dict:
    out = {}
    try:
        fh = open(path, "r", encoding="ascii")
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            out[key.strip()] = value.strip()
    return out


def _resolve(command: str, args: list[str]):
    table = dict(_GLOBAL)
    table.update(_KEYS[command])
    raw: dict = {}
    config_path = None
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            if command == "train" and "branch" not in raw:
                raw["branch"] = tok
                i += 1
                continue
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if key == "config":
            if i + 1 >= len(args):
                raise ConfigError("--config needs a file path")
            config_path = args[i + 1]
            i += 2
            continue
        if i + 1 >= len(args):
            raise ConfigError(f"--{key} needs a value")
        raw[key] = args[i + 1]
        i += 2
    merged: dict = {}
    if config_path:
        merged.update(_read_config_file(config_path))
    merged.update(raw)
    unknown = set(merged) - set(table)
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")
    cfg = {}
    for key, (default, want, _help) in table.items():
        if key in merged:
            cfg[key] = _cast(key, merged[key], want)
        elif default is None:
            raise ConfigError(f"{command} requires --{key}")
        else:
            cfg[key] = default
    return cfg


def _write_resolved(command: str, cfg: dict, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    text = f"# esrie {command}\n" + "\n".join(lines) + "\n"
    path = os.path.join(directory, f"{command}.resolved.cfg")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)
    return path


def _config_hash(command: str, cfg: dict) -> str:
    text = command + "".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _out(cfg: dict, name: str) -> str:
    os.makedirs(cfg["out_dir"], exist_ok=True)
    return os.path.join(cfg["out_dir"], name)


def _as_display(img: Image) -> Image:
    if img.domain is Domain.DISPLAY8:
        return img
    if img.domain is Domain.LINEAR:
        img = to_decibel(img)
    return to_display(img)


# --- pipeline commands -------------------------------------------------------


def _parse_inclusions(raw: str) -> tuple:
    if not raw:
        return ()
    incs = []
    for part in raw.split(";"):
        fields = part.split(",")
        if len(fields) != 4:
            raise ConfigError(f"inclusion {part!r}: expected cx,cz,r,echo")
        cx, cz, r, echo = (float(f) for f in fields)
        incs.append((cx, cz, r, echo))
    return tuple(incs)


def cmd_phantom(cfg: dict) -> int:
    if cfg["preset"]:
        try:
            spec = PRESETS[cfg["preset"]]
        except KeyError:
            raise ConfigError(
                f"unknown preset {cfg['preset']!r}; have {sorted(PRESETS)}") from None
    else:
        spec = PhantomSpec(cfg["width"], cfg["height"], cfg["background_echo"],
                           _parse_inclusions(cfg["inclusions"]))
    echo = make_phantom(spec)
    stem = _out(cfg, cfg["out"])
    write_image(echo, stem + ".esri")
    write_image(_as_display(echo), stem + ".pgm")
    with open(stem + ".manifest", "w", encoding="ascii") as fh:
        fh.write(f"despeckle_source\t{cfg['out']}.esri\n")
    if cfg["preset"] == "cyst2":
        with open(stem + ".rois", "w", encoding="ascii") as fh:
            for row in CYST2_ROIS:
                fh.write(" ".join(str(v) for v in row) + "\n")
    _write_resolved("phantom", cfg, cfg["out_dir"])
    print(f"phantom {echo.width}x{echo.height}, {len(spec.inclusions)} inclusion(s) -> {stem}.esri")
    return 0


def cmd_simulate(cfg: dict) -> int:
    echo = to_linear_amplitude(read_image(cfg["input"]))
    sim = SpeckleSimConfig(sigma_x=cfg["sigma_x"], sigma_z=cfg["sigma_z"],
                           cycles=cfg["cycles"], noise_std=cfg["noise_std"],
                           seed=cfg["seed"], floor_db=cfg["floor_db"])
    if cfg["k"] == 1:
        images = [simulate_bmode(echo, sim)]
        seeds = [sim.seed]
    else:
        images = make_realizations(echo, sim, cfg["k"], threads=cfg["threads"])
        seeds = [sim.seed ^ i for i in range(cfg["k"])]
    stem = _out(cfg, cfg["out"])
    manifest = []
    for i, db in enumerate(images):
        name = f"{cfg['out']}_r{i:02d}"
        write_image(db, f"{stem}_r{i:02d}.esri")
        write_image(to_display(db, -cfg["floor_db"]), f"{stem}_r{i:02d}.pgm")
        manifest.append(f"deblur_source\t{name}.pgm\tseed={seeds[i]}")
    with open(stem + ".manifest", "w", encoding="ascii") as fh:
        fh.write("\n".join(manifest) + "\n")
    _write_resolved("simulate", cfg, cfg["out_dir"])
    print(f"simulated {len(images)} realization(s) -> {stem}_r*.pgm")
    return 0


def cmd_degrade(cfg: dict) -> int:
    img = _as_display(read_image(cfg["input"]))
    blur = BlurConfig(blur_sigma_range=(cfg["blur_sigma_lo"], cfg["blur_sigma_hi"]),
                      narrow_alpha_range=(cfg["alpha_lo"], cfg["alpha_hi"]),
                      seed=cfg["seed"])
    out = degrade(img, blur)
    stem = _out(cfg, cfg["out"])
    write_image(out, stem + ".pgm")
    _write_resolved("degrade", cfg, cfg["out_dir"])
    print(f"degraded {cfg['input']} -> {stem}.pgm")
    return 0


def cmd_train(cfg: dict) -> int:
    branch = cfg["branch"]
    if branch not in ("despeckle", "deblur"):
        raise ConfigError(f"branch must be despeckle or deblur, got {branch!r}")
    corpus = training.load_manifest(cfg["manifest"])
    tc = training.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        patch_size=cfg["patch_size"], realizations_k=cfg["realizations_k"],
        lr=cfg["lr"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
        manifest=cfg["manifest"], target_average=cfg["target_average"],
        pairs_per_source=cfg["pairs_per_source"] or None)
    model = net.load(cfg["init"]) if cfg["init"] else net.build_default(cfg["seed"])
    stem = _out(cfg, cfg["out"])

    def on_step(step, loss, m):
        if tc.checkpoint_every and step % tc.checkpoint_every == 0:
            net.save(m, f"{stem}_step{step:06d}.esnn")

    trainer = training.train_despeckle if branch == "despeckle" else training.train_deblur
    t0 = time.time()
    trained, losses = trainer(model, corpus, tc, on_step=on_step)
    net.save(trained, stem + ".esnn")
    training.write_loss_csv(stem + "_loss.csv", losses)
    _write_resolved("train", cfg, cfg["out_dir"])
    final = float(np.mean(losses[-50:])) if losses else float("nan")
    print(f"trained {branch}: {len(losses)} steps in {time.time()-t0:.0f}s, "
          f"final loss (50-step avg) {final:.5f} -> {stem}.esnn")
    return 0


def cmd_fuse(cfg: dict) -> int:
    despeckle = net.load(cfg["despeckle"])
    deblur = net.load(cfg["deblur"])
    fused = training.fuse(despeckle, deblur)
    stem = _out(cfg, cfg["out"])
    net.save(fused, stem + ".esnn")
    _write_resolved("fuse", cfg, cfg["out_dir"])
    print(f"fused model: {net.param_count(fused)} parameters -> {stem}.esnn")
    return 0


def _calibration_images(cfg: dict) -> list[Image]:
    directory = cfg["calib_dir"]
    if not os.path.isdir(directory):
        raise DataError(f"calib_dir is not a directory: {directory}")
    names = sorted(n for n in os.listdir(directory)
                   if n.endswith((".pgm", ".esri")))[: cfg["calib_limit"]]
    return [_as_display(read_image(os.path.join(directory, n))) for n in names]


def _qat_batches(images: list[Image], model, branch: str, cfg: dict):
    """Self-distillation batches: (patch, float-model branch output)."""
    stream = Stream(cfg["seed"] + 17)
    p, b = cfg["qat_patch"], cfg["qat_batch"]
    fwd = net.despeckle_forward if branch == "despeckle" else net.deblur_forward
    while True:
        xs = []
        for _ in range(b):
            img = images[stream.randint(len(images))]
            if img.width < p or img.height < p:
                raise DataError(f"calibration image smaller than qat_patch {p}")
            x0 = stream.randint(img.width - p + 1)
            z0 = stream.randint(img.height - p + 1)
            xs.append(img.data[z0:z0 + p, x0:x0 + p])
        x = np.stack(xs)[:, None].astype(np.float32) / 255.0
        if branch == "deblur":
            # deblur consumes the despeckled frame as a display image, so
            # round it onto the gray grid exactly like the fused forward
            x = net._seam(net.despeckle_forward(model, x))
        yield x, fwd(model, x)


def cmd_quantize(cfg: dict) -> int:
    model = net.load(cfg["model"])
    images = _calibration_images(cfg)
    stats = quant.calibrate(model, images)
    tuned = model
    if cfg["qat_steps"] > 0 and not cfg["weights_only"]:
        qs = quant.quantize(model, stats).quant
        for branch in ("despeckle", "deblur"):
            batches = _qat_batches(images, tuned, branch, cfg)
            tuned, _ = quant.qat_finetune(tuned, qs, batches, cfg["qat_steps"],
                                          branch, lr=cfg["qat_lr"])
    final = quant.quantize(tuned, stats, weights_only=cfg["weights_only"])
    stem = _out(cfg, cfg["out"])
    net.save(final, stem + ".esnn")
    _write_resolved("quantize", cfg, cfg["out_dir"])
    float_bytes = sum(p.nbytes for w in model.params.values() for p in w)
    int_bytes = sum(q.nbytes for q in final.quant.qweight.values())
    mean_err = float(np.mean([
        np.abs(quant.quantized_forward(final, im).data
               - net.forward(tuned, im).data).mean()
        for im in images[:4]]))
    print(f"quantized -> {stem}.esnn (weights {int_bytes} bytes vs {float_bytes} float); "
          f"int8-vs-f32 mean abs diff {mean_err:.3f} gray over {min(4, len(images))} images")
    return 0


def cmd_infer(cfg: dict) -> int:
    model = net.load(cfg["model"])
    img = _as_display(read_image(cfg["input"]))
    if cfg["precision"] == "f32":
        out = net.forward(model, img, branch=cfg["branch"])
    elif cfg["precision"] == "int8":
        out = quant.quantized_forward(model, img, branch=cfg["branch"],
                                      integer_only=cfg["integer_only"])
    else:
        raise ConfigError(f"precision must be f32 or int8, got {cfg['precision']!r}")
    stem = _out(cfg, cfg["out"])
    write_image(out, stem + ".pgm")
    _write_resolved("infer", cfg, cfg["out_dir"])
    print(f"{cfg['precision']} {cfg['branch']} inference -> {stem}.pgm")
    return 0


# --- evaluation and measurement ----------------------------------------------

_ROI_KINDS = {"region": RoiKind.REGION, "lateral": RoiKind.LATERAL_PROFILE,
              "axial": RoiKind.AXIAL_PROFILE}


def read_rois(path: str) -> list[RoiSpec]:
    rois = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6 or parts[1] not in _ROI_KINDS:
                raise DataError(f"{path}:{lineno}: expected 'name kind x0 z0 x1 z1' "
                                f"with kind in {sorted(_ROI_KINDS)}")
            name, kind = parts[0], _ROI_KINDS[parts[1]]
            try:
                x0, z0, x1, z1 = (int(p) for p in parts[2:])
            except ValueError:
                raise DataError(f"{path}:{lineno}: coordinates must be integers") from None
            rois.append(RoiSpec(name, kind, x0, z0, x1, z1))
    return rois


def _eval_inputs(raw: str) -> list[str]:
    if os.path.isdir(raw):
        names = sorted(n for n in os.listdir(raw) if n.endswith((".pgm", ".esri")))
        return [os.path.join(raw, n) for n in names]
    return [p for p in raw.split(",") if p]


def cmd_eval(cfg: dict) -> int:
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    known = ("input", "lee", "srad", "edgesrie-f32", "edgesrie-int8")
    bad = set(methods) - set(known)
    if bad:
        raise ConfigError(f"unknown methods {sorted(bad)}; have {known}")
    rois = read_rois(cfg["rois"])
    by_name = {r.name: r for r in rois}
    if "background" not in by_name:
        raise MissingRoi("eval needs an ROI named 'background'")
    if "cyst" not in by_name:
        raise MissingRoi("eval needs an ROI named 'cyst'")
    profiles = [r for r in rois if r.kind is not RoiKind.REGION]
    score_rois = {"background": by_name["background"], "cyst": by_name["cyst"]}
    if profiles:
        score_rois["profile"] = profiles[0]

    model_f32 = net.load(cfg["model"]) if cfg["model"] else None
    model_int8 = net.load(cfg["model_int8"]) if cfg["model_int8"] else None
    if "edgesrie-f32" in methods and model_f32 is None:
        raise ConfigError("edgesrie-f32 needs --model")
    if "edgesrie-int8" in methods and model_int8 is None:
        raise ConfigError("edgesrie-int8 needs --model-int8")

    cu = cfg["cu"] or None
    lee_cfg = baselines.LeeConfig(window=cfg["lee_window"], cu=cu,
                                  roi=by_name["background"])
    srad_cfg = baselines.SradConfig(iterations=cfg["srad_iterations"],
                                    delta_t=cfg["srad_delta_t"],
                                    q0_decay=cfg["srad_q0_decay"], cu=cu,
                                    roi=by_name["background"])

    run_dir = os.path.join(cfg["out_dir"], f"eval-{_config_hash('eval', cfg)}")
    os.makedirs(run_dir, exist_ok=True)
    paths = _eval_inputs(cfg["inputs"])
    if not paths:
        raise DataError(f"no input images found in {cfg['inputs']!r}")

    reports = []
    csv_rows = ["image,method,cnr,ssnr,enl,agm,ssim"]
    for path in paths:
        img = _as_display(read_image(path))
        base = os.path.splitext(os.path.basename(path))[0]
        outputs = {}
        for method in methods:
            if method == "input":
                outputs[method] = img
            elif method == "lee":
                outputs[method] = baselines.lee_filter(img, lee_cfg)
            elif method == "srad":
                outputs[method] = baselines.srad_filter(img, srad_cfg)
            elif method == "edgesrie-f32":
                outputs[method] = net.forward(model_f32, img)
            else:
                outputs[method] = quant.quantized_forward(model_int8, img)
        for method in methods:
            rep = metrics.score(outputs[method], score_rois,
                                image_id=f"{base}/{method}", reference=img)
            reports.append(rep)
            cells = [base, method] + [
                "" if getattr(rep, c) is None else f"{getattr(rep, c):.10g}"
                for c in rep._COLUMNS]
            csv_rows.append(",".join(cells))
        for prof in profiles:
            for method in methods:
                values = metrics.extract_profile(outputs[method], prof)
                lines = ["index,value"] + [
                    f"{i},{v:.10g}" for i, v in enumerate(values)]
                name = f"profile_{base}_{prof.name}_{method}.csv"
                with open(os.path.join(run_dir, name), "w", encoding="ascii") as fh:
                    fh.write("\n".join(lines) + "\n")

    table = metrics.format_table(reports)
    print(table)
    with open(os.path.join(run_dir, "table.txt"), "w", encoding="ascii") as fh:
        fh.write(table + "\n")
    with open(os.path.join(run_dir, "metrics.csv"), "w", encoding="ascii") as fh:
        fh.write("\n".join(csv_rows) + "\n")
    _write_resolved("eval", cfg, run_dir)
    print(f"\nwrote {run_dir}/table.txt, metrics.csv, "
          f"{len(profiles) * len(paths) * len(methods)} profile CSV(s)")
    return 0


def cmd_profile(cfg: dict) -> int:
    model = net.load(cfg["model"]) if cfg["model"] else net.build_default(cfg["seed"])
    branch = cfg["branch"]
    h, w = cfg["height"], cfg["width"]
    total_params = net.param_count(model, branch)
    lines = [f"parameters ({branch}): {total_params}"]
    if branch == "fused":
        lines.append(f"  despeckle: {net.param_count(model, 'despeckle')}")
        lines.append(f"  deblur:    {net.param_count(model, 'deblur')}")
    breakdown = net.flop_breakdown(h, w, branch)
    total = sum(f for _, f in breakdown)
    lines.append(f"flops at {h}x{w}: {total} ({total / (h * w):.0f}/px)")
    for name, flops in breakdown:
        lines.append(f"  {name:<8s} {flops:>12d}  {100 * flops / total:5.1f}%")
    print("\n".join(lines))
    _write_resolved("profile", cfg, cfg["out_dir"])
    return 0


def _bench_image(cfg: dict) -> Image:
    if cfg["input"]:
        return _as_display(read_image(cfg["input"]))
    stream = Stream(cfg["seed"])
    h, w = cfg["height"], cfg["width"]
    data = np.floor(stream.uniform(0.0, 256.0, n=h * w)).clip(0, 255)
    return Image(data.reshape(h, w), Domain.DISPLAY8)


def _bench_path(run, seconds: float, min_runs: int, warmup: int):
    for _ in range(warmup):
        run(None)
    times = []
    layer_totals: dict[str, float] = {}
    deadline = time.perf_counter() + seconds
    while len(times) < min_runs or time.perf_counter() < deadline:
        t0 = time.perf_counter()
        run(layer_totals)
        times.append(time.perf_counter() - t0)
    fps = 1.0 / np.asarray(times)
    return float(fps.mean()), float(fps.std()), times, layer_totals


def _layer_report(layer_totals: dict, wall: float) -> list[str]:
    covered = sum(layer_totals.values())
    lines = [f"  per-layer coverage: {100 * covered / wall:.1f}% of wall time"]
    top = sorted(layer_totals.items(), key=lambda kv: -kv[1])[:8]
    for name, secs in top:
        lines.append(f"    {name:<8s} {1e3 * secs:9.2f} ms total "
                     f"({100 * secs / wall:5.1f}%)")
    return lines


def cmd_bench(cfg: dict) -> int:
    if cfg["seconds"] <= 0:
        raise InvalidDuration("seconds must be > 0")
    model = net.load(cfg["model"]) if cfg["model"] else net.build_default(cfg["seed"])
    img = _bench_image(cfg)
    want = cfg["precision"]
    if want not in ("f32", "int8", "both"):
        raise ConfigError(f"precision must be f32, int8, or both, got {want!r}")
    paths = {}
    if want in ("f32", "both"):
        paths["f32"] = lambda t: net.forward(model, img, timings=t)
    if want in ("int8", "both"):
        qmodel = model
        if qmodel.quant is None:
            stats = quant.calibrate(model, [img])
            qmodel = quant.quantize(model, stats)
        paths["int8"] = lambda t, m=qmodel: quant.quantized_forward(m, img, timings=t)
    results = {}
    for name, run in paths.items():
        mean, std, times, layers = _bench_path(
            run, cfg["seconds"], cfg["min_runs"], cfg["warmup"])
        results[name] = (mean, std, times, layers)
        print(f"{name}: {mean:.2f} +- {std:.2f} FPS over {len(times)} runs "
              f"({1e3 * np.mean(times):.1f} ms/frame) on {img.height}x{img.width}")
        print("\n".join(_layer_report(layers, sum(times))))
    if cfg["threads"] > 1:
        from concurrent.futures import ThreadPoolExecutor
        for name, run in paths.items():
            n = max(cfg["min_runs"], 1)
            with ThreadPoolExecutor(cfg["threads"]) as pool:
                t0 = time.perf_counter()
                list(pool.map(lambda _: run(None), range(n)))
                dt = time.perf_counter() - t0
            print(f"{name} x{cfg['threads']} threads: {n / dt:.2f} FPS aggregate")
    if "f32" in results and "int8" in results:
        print(f"int8/f32 speed ratio: {results['int8'][0] / results['f32'][0]:.2f}x")
    _write_resolved("bench", cfg, cfg["out_dir"])
    return 0


_DISPATCH = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "quantize": cmd_quantize,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "bench": cmd_bench,
}


def _usage() -> str:
    lines = [__doc__.strip(), "", "commands:"]
    for name in _DISPATCH:
        lines.append(f"  {name}")
    return "\n".join(lines)


def _command_help(command: str) -> str:
    table = dict(_GLOBAL)
    table.update(_KEYS[command])
    lines = [f"esrie {command} keys (key = value file or --key value):"]
    for key, (default, want, help_text) in table.items():
        marker = "required" if default is None else f"default {default!r}"
        lines.append(f"  --{key:<18s} {help_text} ({marker})")
    return "\n".join(lines)


def main(argv=None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args or args[0] in ("-h", "--help", "help"):
        print(_usage())
        return 0
    command = args[0]
    if command not in _DISPATCH:
        print(f"error: unknown command {command!r}\n\n{_usage()}", file=sys.stderr)
        return 2
    if "--help" in args or "-h" in args:
        print(_command_help(command))
        return 0
    try:
        cfg = _resolve(command, args[1:])
        return _DISPATCH[command](cfg)
    except ConfigError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error (numeric): {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return 3
    except EsrieError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
